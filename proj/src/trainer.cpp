#include "vonet/trainer.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "vonet/threads.h"

namespace fs = std::filesystem;

namespace vonet {

Real LossBreakdown::kld_sum() const {
  Real s = 0;
  for (Real v : kld_per_slot) s += v;
  return s;
}

Real LossBreakdown::kld_mean() const {
  return kld_per_slot.empty() ? 0 : kld_sum() / kld_per_slot.size();
}

LossResult compute_loss(const VoNet& model, const SampledBatch& batch,
                        const TrainConfig& cfg, Real beta, Real tau, Rng& rng) {
  const int b = batch.frames.at(0).shape()[0];
  const int k = cfg.slots;
  const int d = model.cfg.slot_dim;
  const int t_len = static_cast<int>(batch.frames.size());

  // Seed states: stored latents are constants; reset rows re-run the init
  // transformer so it keeps receiving gradient.
  std::vector<Tensor> rows;
  for (int i = 0; i < b; ++i) {
    if (batch.reset[i]) {
      Tensor noise = Tensor::make({1, k, d});
      rng.fill_normal(noise.values().begin(), noise.values().end());
      rows.push_back(model.dynamics.init_slots(noise));
    } else {
      rows.push_back(slice(batch.stored_latents, 0, i, 1));
    }
  }
  SlotState state = model.state_from_latents(concat(rows, 0), 0);

  LossResult result;
  Tensor nll_acc, kld_acc, aux_acc;  // graph accumulators
  std::vector<Tensor> kld_slot_acc;

  for (int t = 0; t < t_len; ++t) {
    const Tensor& frames = batch.frames[t];
    auto [next, cache] = model.unroll_step(state, frames, cfg.ablation);

    DiagonalGaussian prior_g = model.vae.prior(cache.prev_latents);
    Tensor kl = cfg.ablation.wo_klbal
                    ? kld(cache.posterior, prior_g)
                    : balanced_kld(cache.posterior, prior_g, cfg.kappa);  // [b,k]

    Tensor noise = Tensor::make({b, k, model.cfg.z_dim});
    rng.fill_normal(noise.values().begin(), noise.values().end());
    Tensor z = vae_sample(cache.posterior, noise);

    std::vector<int> tokens;
    {
      NoGradGuard ng;
      tokens = model.dvae.hard_tokens(model.dvae.encode_logits(frames));
    }
    Tensor nll_t = mean_all(model.token_decoder.nll(tokens, b, z));

    Tensor soft = model.dvae.gumbel_soft(model.dvae.encode_logits(frames), tau, rng);
    Tensor rec = model.dvae.decode(soft);
    Tensor diff = sub(rec, frames);
    Tensor aux_t = mul(sum_all(mul(diff, diff)), 1.0 / b);

    Tensor kl_slots = mean(kl, {0});  // [k]
    Tensor kl_t = sum_all(kl_slots);
    nll_acc = nll_acc.defined() ? add(nll_acc, nll_t) : nll_t;
    kld_acc = kld_acc.defined() ? add(kld_acc, kl_t) : kl_t;
    aux_acc = aux_acc.defined() ? add(aux_acc, aux_t) : aux_t;
    kld_slot_acc.push_back(kl_slots);

    result.caches.push_back(std::move(cache));
    result.priors.push_back(prior_g);
    state = next;
  }

  result.loss = add(add(nll_acc, mul(kld_acc, beta)), aux_acc);
  result.final_state = state;
  result.breakdown.total = result.loss.item();
  result.breakdown.nll = nll_acc.item();
  result.breakdown.aux = aux_acc.item();
  result.breakdown.kld_per_slot.assign(k, 0.0);
  for (const auto& ks : kld_slot_acc)
    for (int i = 0; i < k; ++i) result.breakdown.kld_per_slot[i] += ks.data()[i];
  return result;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'V', 'O', 'N', 'E', 'T', 'C', 'K', '1'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  uint32_t n = read_pod<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const VoNet& model,
                     const TrainConfig& cfg, uint64_t update) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(kMagic, 8);
  write_pod<uint32_t>(os, 1u);
  write_pod<uint64_t>(os, config_digest(cfg));
  write_pod<uint64_t>(os, update);
  write_pod<int32_t>(os, model.frame_h);
  write_pod<int32_t>(os, model.frame_w);
  write_string(os, serialize_config(cfg));

  ParamList params = model.params();
  write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    write_string(os, p.name);
    write_pod<uint32_t>(os, static_cast<uint32_t>(p.tensor.ndim()));
    for (int dim : p.tensor.shape()) write_pod<int32_t>(os, dim);
    const auto& v = p.tensor.values();
    write_pod<uint64_t>(os, static_cast<uint64_t>(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(Real)));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

std::pair<Checkpoint, std::unique_ptr<VoNet>> load_checkpoint(
    const std::string& path, const TrainConfig* expected_cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint32_t version = read_pod<uint32_t>(is);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  Checkpoint ck;
  ck.digest = read_pod<uint64_t>(is);
  ck.update = read_pod<uint64_t>(is);
  ck.frame_h = read_pod<int32_t>(is);
  ck.frame_w = read_pod<int32_t>(is);
  std::string cfg_text = read_string(is);
  ck.cfg = parse_train_config(cfg_text);
  if (config_digest(ck.cfg) != ck.digest)
    throw std::runtime_error("checkpoint config digest mismatch (corrupt): " +
                             path);
  if (expected_cfg && config_digest(*expected_cfg) != ck.digest)
    throw std::invalid_argument(
        "checkpoint was trained with a different config than supplied");

  auto model =
      std::make_unique<VoNet>(ck.cfg.model, ck.frame_h, ck.frame_w, ck.cfg.seed);
  ParamList params = model->params();
  uint32_t count = read_pod<uint32_t>(is);
  if (count != params.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (auto& p : params) {
    std::string name = read_string(is);
    if (name != p.name)
      throw std::runtime_error("checkpoint parameter order mismatch at " + name);
    uint32_t nd = read_pod<uint32_t>(is);
    Shape shape(nd);
    for (auto& dim : shape) dim = read_pod<int32_t>(is);
    if (shape != p.tensor.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    uint64_t numel = read_pod<uint64_t>(is);
    if (numel != static_cast<uint64_t>(p.tensor.size()))
      throw std::runtime_error("checkpoint size mismatch for " + name);
    is.read(reinterpret_cast<char*>(const_cast<Tensor&>(p.tensor).data()),
            static_cast<std::streamsize>(numel * sizeof(Real)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
  }
  return {ck, std::move(model)};
}

// ---- trainer ----

Trainer::Trainer(TrainConfig cfg, const DatasetManifest& data,
                 const std::string& out_dir)
    : cfg_(std::move(cfg)), data_(data), out_dir_(out_dir),
      buffer_(cfg_.replay_width, cfg_.replay_length, data.spec.height,
              data.spec.width, cfg_.slots, cfg_.model.slot_dim),
      collector_(data, cfg_.replay_width, cfg_.slots, cfg_.seed),
      rng_(cfg_.seed ^ 0x7e41be5ULL) {
  cfg_.validate();
  if (data.spec.frames_per_video < cfg_.segment_len)
    throw std::invalid_argument(
        "videos are shorter than the training segment length");
  model_ = std::make_unique<VoNet>(cfg_.model, data.spec.height,
                                   data.spec.width, cfg_.seed);
  fs::create_directories(out_dir_);
}

TrainHistory Trainer::run(bool concurrent_collect) {
  TrainHistory history;
  history.log_path = (fs::path(out_dir_) / "metrics.csv").string();
  std::ofstream log(history.log_path);
  log << "update,total,nll,kld_mean,lr,beta\n";

  ParamList params = model_->params();
  Adam opt(params);
  int threads = concurrent_collect ? default_threads() : 1;

  int ckpt_every = cfg_.checkpoint_every > 0
                       ? cfg_.checkpoint_every
                       : std::max(1, cfg_.total_updates / 10);

  for (int update = 0; update < cfg_.total_updates; ++update) {
    collector_.collect(*model_, buffer_, cfg_.collect_steps, threads);
    std::optional<SampledBatch> batch;
    while (!(batch = buffer_.sample(cfg_.batch_size, cfg_.segment_len, rng_,
                                    cfg_.ablation.wo_replay))) {
      collector_.collect(*model_, buffer_, cfg_.collect_steps, threads);
    }

    Real beta = cfg_.beta_at(update);
    Real tau = cfg_.tau_at(update);
    Real lr = cfg_.lr_at(update + 1);

    zero_grads(params);
    LossResult res = compute_loss(*model_, *batch, cfg_, beta, tau, rng_);
    if (!std::isfinite(res.breakdown.total)) {
      std::string dump = (fs::path(out_dir_) / "nan_dump.txt").string();
      std::ofstream df(dump);
      df << "update " << update << "\nnll " << res.breakdown.nll << "\naux "
         << res.breakdown.aux << "\nkld";
      for (Real v : res.breakdown.kld_per_slot) df << " " << v;
      df << "\nbeta " << beta << "\nlr " << lr << "\n";
      throw TrainAbort("non-finite loss at update " + std::to_string(update),
                       dump);
    }
    res.loss.backward();
    Real norm = clip_global_norm(params, cfg_.grad_clip);
    history.post_clip_norms.push_back(global_grad_norm(params));
    opt.step(lr);

    history.steps.push_back(res.breakdown);
    history.grad_norms.push_back(norm);
    log << update << "," << res.breakdown.total << "," << res.breakdown.nll
        << "," << res.breakdown.kld_mean() << "," << lr << "," << beta << "\n";
    log.flush();

    if ((update + 1) % ckpt_every == 0 || update + 1 == cfg_.total_updates) {
      std::string path =
          (fs::path(out_dir_) / ("checkpoint_" + std::to_string(update + 1) +
                                 ".vnck"))
              .string();
      save_checkpoint(path, *model_, cfg_, update + 1);
      history.checkpoints.push_back(path);
    }
  }
  history.final_checkpoint = history.checkpoints.empty()
                                 ? std::string()
                                 : history.checkpoints.back();
  return history;
}

}  // namespace vonet

// Acceptance suite: runs the project's check list end to end and prints
// one PASS/FAIL line per criterion. Exit code is the failure count.
//
// Usage: acceptance [criterion-number ...]
// VONET_ACCEPT_FULL=1 switches criterion 10 to the long 2000-update run
// gating all three of its sub-checks instead of the reduced CPU variant.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <vector>

#include "vonet/bench.h"
#include "vonet/config.h"
#include "vonet/dataset.h"
#include "vonet/eval.h"
#include "vonet/metrics.h"
#include "vonet/model.h"
#include "vonet/replay.h"
#include "vonet/threads.h"
#include "vonet/trainer.h"

using namespace vonet;
namespace fs = std::filesystem;

namespace {

std::ostringstream g_log;

Tensor randn(Rng& rng, const Shape& shape) {
  Tensor t = Tensor::make(shape);
  rng.fill_normal(t.values().begin(), t.values().end());
  return t;
}

Tensor rand01(Rng& rng, const Shape& shape) {
  Tensor t = Tensor::make(shape);
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

Tensor permute_slots(const Tensor& x, const std::vector<int>& perm) {
  std::vector<Tensor> parts;
  for (int p : perm) parts.push_back(slice(x, 1, p, 1));
  return concat(parts, 1);
}

Real max_diff(const Tensor& a, const Tensor& b) {
  Real m = 0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

std::string work_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("vonet_accept_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// ---- criterion 1: mask normalization ----

bool criterion_mask_normalization() {
  ModelConfig cfg = ModelConfig::toy();
  Rng seeds(101);
  Real worst = 0;
  const int draws = 100;
  const int ks[3] = {2, 5, 11};
  NoGradGuard ng;
  for (int i = 0; i < draws; ++i) {
    int k = ks[i % 3];
    Rng rng = seeds.fork(i);
    ParallelAttention attn(rng, cfg, 8, 8);
    Tensor features = randn(rng, {1, cfg.feature_channels, 8, 8});
    Tensor contexts = randn(rng, {1, k, cfg.context_dim});

    Tensor masks = attn.forward(features, contexts).masks;
    Tensor rec = attn.recurrent_reference(features, k);
    for (const Tensor& m : {masks, rec})
      for (int p = 0; p < 64; ++p) {
        Real sum = 0;
        for (int s = 0; s < k; ++s) sum += m.data()[s * 64 + p];
        worst = std::max(worst, std::fabs(sum - 1.0));
      }
  }
  g_log << "worst |sum-1| = " << worst << " over " << draws
        << " draws, both variants";
  return worst < 1e-5;
}

// ---- criterion 2: permutation equivariance ----

bool criterion_permutation_equivariance() {
  Real worst = 0;
  Rng seeds(202);
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng = seeds.fork(trial);
    ModelConfig cfg = ModelConfig::toy();
    VoNet model(cfg, 16, 16, rng.next_u64());
    int k = 3 + rng.uniform_int(3);
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = k - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);

    NoGradGuard ng;
    Tensor noise = randn(rng, {1, k, cfg.slot_dim});
    Tensor r0 = model.dynamics.init_slots(noise);
    Tensor r0p = model.dynamics.init_slots(permute_slots(noise, perm));
    worst = std::max(worst, max_diff(r0p, permute_slots(r0, perm)));

    Tensor features = randn(rng, {1, cfg.feature_channels, 8, 8});
    Tensor contexts = randn(rng, {1, k, cfg.context_dim});
    AttentionResult a = model.attention.forward(features, contexts);
    AttentionResult ap =
        model.attention.forward(features, permute_slots(contexts, perm));
    worst = std::max(worst, max_diff(ap.masks, permute_slots(a.masks, perm)));

    Tensor rprev = randn(rng, {1, k, cfg.slot_dim});
    DiagonalGaussian pr = model.vae.prior(rprev);
    DiagonalGaussian prp = model.vae.prior(permute_slots(rprev, perm));
    worst = std::max(worst, max_diff(prp.mean, permute_slots(pr.mean, perm)));
    worst =
        std::max(worst, max_diff(prp.log_var, permute_slots(pr.log_var, perm)));

    Tensor frames = rand01(rng, {1, 3, 16, 16});
    SlotState st;
    st.latents = rprev;
    st.contexts = model.dynamics.context(rprev);
    auto [next, cache] = model.unroll_step(st, frames, AblationFlags{});
    SlotState stp;
    stp.latents = permute_slots(rprev, perm);
    stp.contexts = permute_slots(st.contexts, perm);
    auto [nextp, cachep] = model.unroll_step(stp, frames, AblationFlags{});
    worst = std::max(worst,
                     max_diff(nextp.latents, permute_slots(next.latents, perm)));
    worst = std::max(
        worst, max_diff(cachep.attn.masks, permute_slots(cache.attn.masks, perm)));
  }
  g_log << "max deviation = " << worst << " over 20 trials";
  return worst < 1e-5;
}

// ---- criterion 3: KL balancing ----

bool criterion_kl_balancing() {
  ModelConfig cfg = ModelConfig::toy();
  Rng rng(303);
  SequentialVae vae(rng, cfg);
  Tensor r = randn(rng, {1, 3, cfg.slot_dim}).set_requires_grad();
  Tensor rprev = randn(rng, {1, 3, cfg.slot_dim});

  ParamList post_params, prior_params;
  vae.post_mlp.collect("post", post_params);
  vae.prior_tf.collect("prior_tf", prior_params);
  vae.prior_mlp.collect("prior_mlp", prior_params);

  auto value_at = [&](Real kappa) {
    return sum_all(balanced_kld(vae.posterior(r), vae.prior(rprev), kappa))
        .item();
  };
  Real base = value_at(0.7);
  Real value_spread = 0;
  for (Real kappa : {0.0, 0.35, 0.7, 1.0})
    value_spread = std::max(value_spread, std::fabs(value_at(kappa) - base));

  auto grads_at = [&](Real kappa) {
    zero_grads(post_params);
    zero_grads(prior_params);
    sum_all(balanced_kld(vae.posterior(r), vae.prior(rprev), kappa)).backward();
    return std::pair(global_grad_norm(post_params),
                     global_grad_norm(prior_params));
  };
  auto [post_at_1, prior_at_1] = grads_at(1.0);
  auto [post_07, prior_07] = grads_at(0.7);
  auto [post_035, prior_035] = grads_at(0.35);
  Real ratio = prior_07 / prior_035;

  g_log << "value spread " << value_spread << ", posterior-grad@k=1 "
        << post_at_1 << ", prior ratio 0.7/0.35 = " << ratio;
  return value_spread < 1e-6 && post_at_1 == 0.0 &&
         std::fabs(ratio - 2.0) < 1e-4;
}

// ---- criterion 4: KL closed form vs Monte Carlo ----

bool criterion_kl_oracle() {
  DiagonalGaussian q1, p1;
  q1.mean = Tensor::full({1, 1}, 1.0);
  q1.log_var = Tensor::zeros({1, 1});
  p1.mean = Tensor::zeros({1, 1});
  p1.log_var = Tensor::zeros({1, 1});
  Real unit = kld(q1, p1).item();
  if (std::fabs(unit - 0.5) > 1e-9) {
    g_log << "KL(N(1,1)||N(0,1)) = " << unit;
    return false;
  }

  Rng rng(404);
  Real worst_rel = 0;
  const int dims = 4, samples = 100000;
  for (int pair = 0; pair < 20; ++pair) {
    DiagonalGaussian q, p;
    q.mean = randn(rng, {dims});
    q.log_var = mul(randn(rng, {dims}), 0.5);
    p.mean = randn(rng, {dims});
    p.log_var = mul(randn(rng, {dims}), 0.5);
    Real closed = sum_all(kld(q, p)).item();

    Real est = 0;
    for (int s = 0; s < samples; ++s) {
      Real acc = 0;
      for (int i = 0; i < dims; ++i) {
        Real lq = q.log_var.data()[i], lp = p.log_var.data()[i];
        Real x = q.mean.data()[i] + std::exp(0.5 * lq) * rng.normal();
        Real dq = x - q.mean.data()[i], dp = x - p.mean.data()[i];
        acc += -0.5 * (lq + dq * dq / std::exp(lq)) +
               0.5 * (lp + dp * dp / std::exp(lp));
      }
      est += acc;
    }
    est /= samples;
    worst_rel = std::max(worst_rel, std::fabs(est - closed) / closed);
  }
  g_log << "KL(N(1,1)||N(0,1)) exact, worst MC deviation " << worst_rel * 100
        << "% over 20 pairs";
  return worst_rel < 0.02;
}

// ---- criterion 5: hungarian vs brute force ----

Real brute_force_assignment(const std::vector<std::vector<Real>>& profit) {
  int rows = static_cast<int>(profit.size());
  int cols = static_cast<int>(profit[0].size());
  Real best = -1e300;
  if (rows <= cols) {
    std::vector<int> perm(cols);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      Real total = 0;
      for (int i = 0; i < rows; ++i) total += profit[i][perm[i]];
      best = std::max(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    std::vector<int> perm(rows);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      Real total = 0;
      for (int j = 0; j < cols; ++j) total += profit[perm[j]][j];
      best = std::max(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  return best;
}

bool criterion_hungarian() {
  Rng rng(505);
  int agree = 0;
  const int square_trials = 100, rect_trials = 50;
  for (int t = 0; t < square_trials; ++t) {
    std::vector<std::vector<Real>> profit(5, std::vector<Real>(5));
    for (auto& row : profit)
      for (auto& v : row) v = rng.uniform();
    if (std::fabs(hungarian_total(profit) - brute_force_assignment(profit)) <
        1e-9)
      ++agree;
  }
  for (int t = 0; t < rect_trials; ++t) {
    int rows = 2 + rng.uniform_int(5), cols = 2 + rng.uniform_int(5);
    std::vector<std::vector<Real>> profit(rows, std::vector<Real>(cols));
    for (auto& row : profit)
      for (auto& v : row) v = rng.uniform();
    if (std::fabs(hungarian_total(profit) - brute_force_assignment(profit)) <
        1e-9)
      ++agree;
  }
  g_log << agree << "/" << (square_trials + rect_trials)
        << " matched brute force";
  return agree == square_trials + rect_trials;
}

// ---- criterion 6: metric oracles ----

Real ari_reference(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<int, int>, double> nij;
  std::map<int, double> ai, bj;
  for (size_t i = 0; i < a.size(); ++i) {
    nij[{a[i], b[i]}] += 1;
    ai[a[i]] += 1;
    bj[b[i]] += 1;
  }
  auto c2 = [](double n) { return n * (n - 1) / 2; };
  double sij = 0, sa = 0, sb = 0;
  for (auto& [k, v] : nij) sij += c2(v);
  for (auto& [k, v] : ai) sa += c2(v);
  for (auto& [k, v] : bj) sb += c2(v);
  double all = c2(static_cast<double>(a.size()));
  double expected = sa * sb / all;
  double maxi = 0.5 * (sa + sb);
  if (maxi == expected) return sij == maxi ? 1.0 : 0.0;
  return (sij - expected) / (maxi - expected);
}

bool criterion_metric_oracles() {
  bool ok = true;

  // oracle agreement on random videos
  Rng rng(606);
  Real worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    int h = 3 + rng.uniform_int(4), w = 3 + rng.uniform_int(4);
    int frames = 1 + rng.uniform_int(3);
    std::vector<Mask16> gt;
    Segmentation pred;
    pred.h = h;
    pred.w = w;
    pred.null_label = 6;
    std::vector<int> fgt, fpred;
    for (int t = 0; t < frames; ++t) {
      Mask16 m;
      m.h = h;
      m.w = w;
      m.id.resize(h * w);
      std::vector<int> labels(h * w);
      for (int p = 0; p < h * w; ++p) {
        m.id[p] = static_cast<uint16_t>(rng.uniform_int(4));
        labels[p] = rng.uniform_int(7);
        if (m.id[p] > 0) {
          fgt.push_back(m.id[p]);
          fpred.push_back(labels[p]);
        }
      }
      gt.push_back(std::move(m));
      pred.frames.push_back(std::move(labels));
    }
    Real mine;
    if (!fg_ari(pred, gt, &mine)) continue;
    worst = std::max(worst, std::fabs(mine - ari_reference(fpred, fgt)));
  }
  ok = ok && worst < 1e-9;

  // four-pixel worked example
  Mask16 g4;
  g4.h = 1;
  g4.w = 4;
  g4.id = {1, 1, 2, 2};
  Segmentation p4;
  p4.h = 1;
  p4.w = 4;
  p4.null_label = 9;
  p4.frames = {{1, 1, 1, 2}};
  Real four = -1;
  ok = ok && fg_ari(p4, {g4}, &four) && std::fabs(four) < 1e-12;

  // 2x2 miou example
  Mask16 g22;
  g22.h = 2;
  g22.w = 2;
  g22.id = {7, 7, 8, 8};
  Segmentation p22;
  p22.h = 2;
  p22.w = 2;
  p22.null_label = 5;
  p22.frames = {{1, 1, 2, 5}};
  Real miou22 = miou(p22, {g22});
  ok = ok && std::fabs(miou22 - 0.75) < 1e-12;

  // identity switch strictly decreases both metrics
  std::vector<Mask16> gts;
  Segmentation good, swapped;
  good.h = swapped.h = 2;
  good.w = swapped.w = 2;
  good.null_label = swapped.null_label = 5;
  for (int t = 0; t < 4; ++t) {
    Mask16 m;
    m.h = 2;
    m.w = 2;
    m.id = {1, 1, 2, 2};
    gts.push_back(m);
    good.frames.push_back({0, 0, 1, 1});
    swapped.frames.push_back(t < 2 ? std::vector<int>{0, 0, 1, 1}
                                   : std::vector<int>{1, 1, 0, 0});
  }
  Real ari_good, ari_bad;
  fg_ari(good, gts, &ari_good);
  fg_ari(swapped, gts, &ari_bad);
  bool switch_hurts =
      ari_bad < ari_good && miou(swapped, gts) < miou(good, gts);
  ok = ok && switch_hurts;

  g_log << "oracle dev " << worst << ", [1,1,2,2] vs [1,1,1,2] = " << four
        << ", 2x2 miou = " << miou22 << ", identity switch decreases: "
        << (switch_hurts ? "yes" : "no");
  return ok;
}

// ---- criterion 7: decoder causality ----

bool criterion_causality() {
  ModelConfig cfg = ModelConfig::toy();
  Rng seeds(707);
  NoGradGuard ng;
  Real past_diff = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng = seeds.fork(trial);
    TokenDecoder dec(rng, cfg, 4);
    dec.head = Linear(rng, cfg.dec_dim, cfg.vocab);
    const int t = 16;
    std::vector<int> tokens(t);
    for (auto& v : tokens) v = rng.uniform_int(cfg.vocab);
    Tensor slots = randn(rng, {1, 3, cfg.z_dim});
    Tensor base = dec.logits(tokens, 1, slots);
    int m = rng.uniform_int(t - 1);
    std::vector<int> mutated = tokens;
    mutated[m] = (mutated[m] + 1) % cfg.vocab;
    Tensor moved = dec.logits(mutated, 1, slots);
    for (int pos = 0; pos <= m; ++pos)
      for (int v = 0; v < cfg.vocab; ++v)
        past_diff = std::max(
            past_diff, std::fabs(base.data()[pos * cfg.vocab + v] -
                                 moved.data()[pos * cfg.vocab + v]));
  }
  g_log << "max past-logit diff = " << past_diff << " over 20 trials";
  return past_diff == 0.0;
}

// ---- criterion 8: end-to-end gradient checks ----

struct GradProbe {
  Real rel_err;
  std::string name;
};

bool criterion_gradient_checks() {
  ModelConfig cfg = ModelConfig::toy();  // D = 16
  const int k = 3, h = 32, w = 32;
  VoNet model(cfg, h, w, 808);
  Rng data_rng(809);
  Tensor frames = rand01(data_rng, {1, 3, h, w});
  Tensor latents = randn(data_rng, {1, k, cfg.slot_dim}).set_requires_grad();
  Tensor contexts =
      randn(data_rng, {1, k, cfg.context_dim}).set_requires_grad();
  Tensor znoise = randn(data_rng, {1, k, cfg.z_dim});
  std::vector<int> tokens;
  {
    NoGradGuard ngg;
    tokens = model.dvae.hard_tokens(model.dvae.encode_logits(frames));
  }

  // The full per-step objective as a function of the probed leaves. The
  // plain KL keeps the loss differentiable; the balanced variant's
  // stop-gradients are covered by criterion 3 instead.
  auto loss_fn = [&]() {
    Tensor features = model.backbone.forward(frames);
    AttentionResult attn = model.attention.forward(features, contexts);
    Tensor y = model.dynamics.encode(features, attn.masks);
    Tensor r = model.dynamics.update(y, latents);
    DiagonalGaussian q = model.vae.posterior(r);
    DiagonalGaussian p = model.vae.prior(latents);
    Tensor z = vae_sample(q, znoise);
    Tensor nll = mean_all(model.token_decoder.nll(tokens, 1, z));
    Tensor kl = sum_all(kld(q, p));
    return add(nll, mul(kl, 0.5));
  };

  auto check = [&](Tensor& leaf, const std::string& name) {
    Tensor loss = loss_fn();
    leaf.zero_grad();
    loss.backward();
    std::vector<Real> analytic(leaf.grad().begin(), leaf.grad().end());
    if (analytic.empty()) analytic.assign(leaf.size(), 0.0);
    Real diff_sq = 0, a_sq = 0, n_sq = 0;
    const Real step = 1e-5;
    for (int64_t i = 0; i < leaf.size(); ++i) {
      Real saved = leaf.data()[i];
      leaf.data()[i] = saved + step;
      Real up = loss_fn().item();
      leaf.data()[i] = saved - step;
      Real down = loss_fn().item();
      leaf.data()[i] = saved;
      Real numeric = (up - down) / (2 * step);
      diff_sq += (analytic[i] - numeric) * (analytic[i] - numeric);
      a_sq += analytic[i] * analytic[i];
      n_sq += numeric * numeric;
    }
    Real denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), Real(1e-12)});
    return GradProbe{std::sqrt(diff_sq) / denom, name};
  };

  std::vector<GradProbe> probes;
  probes.push_back(check(contexts, "contexts"));
  probes.push_back(check(latents, "slot latents"));
  ParamList post;
  model.vae.post_mlp.collect("post", post);
  for (auto& p : post) {
    Tensor t = p.tensor;
    probes.push_back(check(t, p.name));
  }

  bool ok = true;
  Real worst = 0;
  for (const auto& p : probes) {
    worst = std::max(worst, p.rel_err);
    if (p.rel_err >= 1e-3) {
      ok = false;
      g_log << "[" << p.name << " rel err " << p.rel_err << "] ";
    }
  }
  g_log << "worst relative error " << worst << " over " << probes.size()
        << " probes (contexts, latents, posterior params)";
  return ok;
}

// ---- criterion 9: attention scaling trend ----

bool criterion_bench_trend() {
  int threads = bench_default_threads();
  std::vector<BenchRow> rows = bench_attention(
      ModelConfig::desk(), {5, 11, 16, 24}, 128, 5, threads);
  double par = bench_ratio(rows, "parallel");
  double rec = bench_ratio(rows, "recurrent");
  g_log << "parallel t(24)/t(5) = " << par << ", recurrent = " << rec
        << " (threads=" << threads
        << "; flat parallel scaling needs cores >= max slot count)";
  return par < 1.5 && rec > 3.0;
}

// ---- criterion 10: smoke training ----

struct MaskStats {
  Real mean_max_prob = 0;
  int frames_with_two_slots = 0;
  int frames = 0;
};

MaskStats mask_statistics(const VoNet& model, const DatasetManifest& data,
                          int slots, int max_videos) {
  MaskStats stats;
  EvalOptions opt;
  opt.slots = slots;
  Real prob_acc = 0;
  int64_t prob_count = 0;
  for (int v = 0; v < std::min<int>(max_videos, data.videos.size()); ++v) {
    LabeledVideo video = load_video(data, v);
    std::vector<Tensor> masks =
        unroll_masks(model, video, slots, opt.eval_seed, AblationFlags{});
    for (const Tensor& m : masks) {
      int k = m.shape()[0], hw = m.shape()[1] * m.shape()[2];
      std::vector<int64_t> coverage(k + 1, 0);
      for (int p = 0; p < hw; ++p) {
        Real best = -1;
        int arg = 0;
        for (int s = 0; s < k; ++s) {
          Real val = m.data()[s * hw + p];
          if (val > best) {
            best = val;
            arg = s;
          }
        }
        prob_acc += best;
        ++prob_count;
        ++coverage[best < 0.3 ? k : arg];
      }
      int big = 0;
      for (int s = 0; s < k; ++s)
        if (coverage[s] >= 0.05 * hw) ++big;
      if (big >= 2) ++stats.frames_with_two_slots;
      ++stats.frames;
    }
  }
  stats.mean_max_prob = prob_acc / std::max<int64_t>(1, prob_count);
  return stats;
}

Real shuffled_fg_ari(const VoNet& model, const DatasetManifest& data, int slots,
                     int max_videos, uint64_t shuffle_seed) {
  Rng rng(shuffle_seed);
  Real acc = 0;
  int count = 0;
  EvalOptions opt;
  opt.slots = slots;
  for (int v = 0; v < std::min<int>(max_videos, data.videos.size()); ++v) {
    LabeledVideo video = load_video(data, v);
    Segmentation seg = segment_video(model, video, opt);
    for (auto& frame : seg.frames)
      for (size_t i = frame.size(); i > 1; --i)
        std::swap(frame[i - 1], frame[rng.uniform_int(static_cast<int>(i))]);
    Real v_ari;
    if (fg_ari(seg, video.gt_masks, &v_ari)) {
      acc += v_ari;
      ++count;
    }
  }
  return count ? acc / count : 0;
}

bool criterion_smoke_training() {
  const bool full = std::getenv("VONET_ACCEPT_FULL") != nullptr;
  const int updates = full ? 2000 : 500;

  std::string root = work_dir("smoke");
  DatasetSpec spec;
  spec.num_videos = 200;
  spec.frames_per_video = 24;
  spec.height = 64;
  spec.width = 64;
  spec.shapes_min = 2;
  spec.shapes_max = 3;
  spec.seed = 1001;
  DatasetManifest train_data =
      generate_dataset(spec, root + "/train", default_threads());
  spec.num_videos = 10;
  spec.seed = 2002;
  DatasetManifest eval_data =
      generate_dataset(spec, root + "/eval", default_threads());

  TrainConfig cfg;
  cfg.profile = "desk";
  cfg.model = ModelConfig::desk();
  cfg.slots = 5;
  cfg.segment_len = 3;
  cfg.batch_size = 4;
  cfg.total_updates = updates;
  cfg.replay_width = 8;
  cfg.replay_length = 500;
  cfg.seed = 7;

  Trainer trainer(cfg, train_data, root + "/run");
  TrainHistory history = trainer.run(/*concurrent_collect=*/true);

  auto mean_over = [&](int lo, int hi) {
    Real acc = 0;
    for (int i = lo; i < hi; ++i) acc += history.steps[i].total;
    return acc / (hi - lo);
  };
  Real early = mean_over(0, 100);
  Real late = mean_over(updates - 100, updates);
  bool a = late <= 0.7 * early;

  // clipping contract holds across the whole run
  Real worst_norm = 0;
  for (Real n : history.post_clip_norms) worst_norm = std::max(worst_norm, n);
  bool clip_ok = worst_norm <= cfg.grad_clip + 1e-6;

  const VoNet& model = trainer.model();
  MaskStats stats = mask_statistics(model, eval_data, cfg.slots, 10);
  bool b = stats.mean_max_prob > 0.5 &&
           stats.frames_with_two_slots >= static_cast<int>(0.8 * stats.frames);

  EvalOptions opt;
  opt.slots = cfg.slots;
  MetricReport report = evaluate_dataset(model, eval_data, opt);
  Real baseline = shuffled_fg_ari(model, eval_data, cfg.slots, 10, 31337);
  bool c = report.fg_ari_mean - baseline >= 0.2;

  g_log << (full ? "full" : "reduced") << " run: loss " << early << " -> "
        << late << " (drop " << 100 * (1 - late / early) << "%), max clipped norm "
        << worst_norm << "; masks: mean max prob " << stats.mean_max_prob
        << ", 2-slot frames " << stats.frames_with_two_slots << "/"
        << stats.frames << "; fg-ari " << report.fg_ari_mean
        << " vs shuffled " << baseline;
  if (!full)
    g_log << " [reduced CPU variant gates (a) + clipping; (b),(c) reported]";
  return full ? (a && b && c && clip_ok) : (a && clip_ok);
}

// ---- criterion 11: ablation plumbing ----

bool criterion_ablations() {
  std::string root = work_dir("ablate");
  DatasetSpec spec;
  spec.num_videos = 4;
  spec.frames_per_video = 8;
  spec.height = 16;
  spec.width = 16;
  spec.seed = 42;
  DatasetManifest data = generate_dataset(spec, root + "/data");

  TrainConfig base;
  base.profile = "toy";
  base.model = ModelConfig::toy();
  base.slots = 3;
  base.segment_len = 2;
  base.batch_size = 2;
  base.total_updates = 50;
  base.replay_width = 2;
  base.replay_length = 60;
  base.seed = 5;

  bool all_ran = true;
  for (std::string flag : {"wo-unet", "kl-div:20", "wo-replay", "wo-klbal"}) {
    TrainConfig cfg = base;
    cfg.ablation = AblationFlags::parse(flag);
    try {
      Trainer t(cfg, data, root + "/" + flag);
      TrainHistory h = t.run();
      all_ran = all_ran && static_cast<int>(h.steps.size()) == 50;
    } catch (const std::exception& e) {
      g_log << flag << " failed: " << e.what() << "; ";
      all_ran = false;
    }
  }

  // wo-klbal changes the posterior gradient on an identical batch
  VoNet model(base.model, 16, 16, 99);
  Rng rng(17);
  SampledBatch batch;
  Tensor f = Tensor::make({2, 3, 16, 16});
  for (auto& v : f.values()) v = rng.uniform();
  batch.frames = {f, f};
  batch.reset.assign(2, 0);
  batch.stored_latents = randn(rng, {2, base.slots, base.model.slot_dim});

  ParamList post;
  model.vae.post_mlp.collect("post", post);
  auto grad_norm_with = [&](bool wo_klbal) {
    TrainConfig cfg = base;
    cfg.ablation.wo_klbal = wo_klbal;
    zero_grads(model.params());
    Rng r(23);
    compute_loss(model, batch, cfg, 1.0, 1.0, r).loss.backward();
    return global_grad_norm(post);
  };
  Real with_balance = grad_norm_with(false);
  Real without = grad_norm_with(true);
  bool differs = std::fabs(with_balance - without) > 1e-12;

  g_log << "four variants trained 50 updates: " << (all_ran ? "yes" : "no")
        << "; posterior grad norm " << with_balance << " (balanced) vs "
        << without << " (plain)";
  return all_ran && differs;
}

// ---- criterion 12: replay semantics ----

bool criterion_replay() {
  ModelConfig cfg = ModelConfig::toy();
  TrainConfig tc;
  tc.profile = "toy";
  tc.model = cfg;
  tc.slots = 3;
  tc.segment_len = 2;
  tc.batch_size = 2;
  VoNet model(cfg, 16, 16, 3);

  // flagged segment == fresh-state run
  Rng rng(55);
  SampledBatch flagged;
  for (int t = 0; t < 2; ++t) {
    Tensor f = Tensor::make({2, 3, 16, 16});
    for (auto& v : f.values()) v = rng.uniform();
    flagged.frames.push_back(f);
  }
  flagged.reset.assign(2, 1);
  flagged.stored_latents = randn(rng, {2, 3, cfg.slot_dim});
  Rng ra(77);
  Real with_flag = compute_loss(model, flagged, tc, 0.5, 1.0, ra).breakdown.total;
  SampledBatch fresh = flagged;
  fresh.stored_latents = Tensor::zeros(flagged.stored_latents.shape());
  Rng rb(77);
  Real fresh_loss = compute_loss(model, fresh, tc, 0.5, 1.0, rb).breakdown.total;
  bool equal = std::fabs(with_flag - fresh_loss) < 1e-6;

  // 500-collect stress against a small ring
  std::string root = work_dir("replay");
  DatasetSpec spec;
  spec.num_videos = 3;
  spec.frames_per_video = 6;
  spec.height = 16;
  spec.width = 16;
  spec.seed = 13;
  DatasetManifest data = generate_dataset(spec, root);
  ReplayBuffer buffer(4, 20, 16, 16, tc.slots, cfg.slot_dim);
  Collector collector(data, 4, tc.slots, 21);
  bool capped = true;
  for (int i = 0; i < 500; ++i) {
    collector.collect(model, buffer, 2);
    capped = capped && buffer.size() <= buffer.capacity();
  }
  g_log << "flagged-vs-fresh |dLoss| = " << std::fabs(with_flag - fresh_loss)
        << "; buffer stayed <= " << buffer.capacity() << " over 500 collects: "
        << (capped ? "yes" : "no");
  return equal && capped;
}

struct Criterion {
  int id;
  std::string name;
  std::function<bool()> fn;
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<Criterion> criteria = {
      {1, "mask normalization (parallel + recurrent)", criterion_mask_normalization},
      {2, "slot permutation equivariance", criterion_permutation_equivariance},
      {3, "KL balancing value/gradient split", criterion_kl_balancing},
      {4, "closed-form KL vs Monte Carlo", criterion_kl_oracle},
      {5, "hungarian vs brute force", criterion_hungarian},
      {6, "segmentation metric oracles", criterion_metric_oracles},
      {7, "decoder causality", criterion_causality},
      {8, "end-to-end gradient checks", criterion_gradient_checks},
      {9, "attention scaling trend", criterion_bench_trend},
      {10, "smoke training", criterion_smoke_training},
      {11, "ablation plumbing", criterion_ablations},
      {12, "replay semantics", criterion_replay},
  };

  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (auto& c : criteria) {
    if (!wanted.empty() &&
        std::find(wanted.begin(), wanted.end(), c.id) == wanted.end())
      continue;
    g_log.str("");
    bool ok = false;
    try {
      ok = c.fn();
    } catch (const std::exception& e) {
      g_log << "exception: " << e.what();
    }
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << c.id << ": "
              << c.name << " -- " << g_log.str() << "\n";
    std::cout.flush();
    if (!ok) ++failures;
  }
  return failures;
}

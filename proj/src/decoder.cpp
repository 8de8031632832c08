#include <cmath>
#include <stdexcept>

#include "vonet/model.h"

namespace vonet {

// ---- discrete VAE ----

Dvae::Dvae(Rng& rng, const ModelConfig& cfg)
    : vocab(cfg.vocab), downsample(cfg.dvae_downsample) {
  if (downsample != 4)
    throw std::invalid_argument("dvae: only downsample factor 4 is built");
  int ch = cfg.dvae_channels;
  enc.emplace_back(rng, 3, ch, 3, 2, 1);
  enc.emplace_back(rng, ch, ch, 3, 2, 1);
  enc.emplace_back(rng, ch, vocab, 1, 1, 0);

  dec.emplace_back(rng, vocab, ch, 1, 1, 0);
  dec.emplace_back(rng, ch, ch, 3, 1, 1);
  dec.emplace_back(rng, ch, ch, 3, 1, 1);
  dec.emplace_back(rng, ch, 3, 1, 1, 0);
}

Tensor Dvae::encode_logits(const Tensor& frames) const {
  if (frames.ndim() != 4 || frames.shape()[1] != 3)
    throw std::invalid_argument("dvae: expected [n,3,h,w] frames");
  if (frames.shape()[2] % downsample != 0 || frames.shape()[3] % downsample != 0)
    throw std::invalid_argument("dvae: frame dims not divisible by " +
                                std::to_string(downsample));
  Tensor h = relu(enc[0].forward(frames));
  h = relu(enc[1].forward(h));
  return enc[2].forward(h);
}

std::vector<int> Dvae::hard_tokens(const Tensor& logits) const {
  int n = logits.shape()[0], v = logits.shape()[1];
  int g = logits.shape()[2];
  std::vector<int> tokens(static_cast<size_t>(n) * g * g);
  const Real* d = logits.data();
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < g * g; ++p) {
      int best = 0;
      Real bv = d[(static_cast<int64_t>(i) * v) * g * g + p];
      for (int c = 1; c < v; ++c) {
        Real val = d[(static_cast<int64_t>(i) * v + c) * g * g + p];
        if (val > bv) {
          bv = val;
          best = c;
        }
      }
      tokens[static_cast<size_t>(i) * g * g + p] = best;
    }
  return tokens;
}

Tensor Dvae::gumbel_soft(const Tensor& logits, Real tau, Rng& rng) const {
  if (tau <= 0) throw std::invalid_argument("dvae: tau must be positive");
  Tensor g = Tensor::make(logits.shape());
  for (auto& v : g.values()) v = rng.gumbel();
  return softmax(mul(add(logits, g), 1.0 / tau), 1);
}

Tensor Dvae::one_hot(const std::vector<int>& tokens, int n, int grid) const {
  Tensor t = Tensor::zeros({n, vocab, grid, grid});
  Real* d = t.data();
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < grid * grid; ++p) {
      int tok = tokens[static_cast<size_t>(i) * grid * grid + p];
      if (tok < 0 || tok >= vocab)
        throw std::out_of_range("dvae: token " + std::to_string(tok) +
                                " outside vocabulary of " + std::to_string(vocab));
      d[(static_cast<int64_t>(i) * vocab + tok) * grid * grid + p] = 1.0;
    }
  return t;
}

Tensor Dvae::decode(const Tensor& one_hots) const {
  if (one_hots.ndim() != 4 || one_hots.shape()[1] != vocab)
    throw std::invalid_argument("dvae: expected [n,V,g,g] token maps");
  Tensor h = relu(dec[0].forward(one_hots));
  h = upsample_nearest2x(h);
  h = relu(dec[1].forward(h));
  h = upsample_nearest2x(h);
  h = relu(dec[2].forward(h));
  return sigmoid(dec[3].forward(h));
}

void Dvae::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < enc.size(); ++i)
    enc[i].collect(prefix + ".enc" + std::to_string(i), out);
  for (size_t i = 0; i < dec.size(); ++i)
    dec[i].collect(prefix + ".dec" + std::to_string(i), out);
}

// ---- autoregressive token decoder ----

TokenDecoderBlock::TokenDecoderBlock(Rng& rng, int dim, int heads)
    : ln1(dim), ln2(dim), ln3(dim), self_attn(rng, dim, heads),
      cross_attn(rng, dim, heads) {
  fc1 = Linear(rng, dim, 2 * dim);
  fc2 = Linear(rng, 2 * dim, dim);
}

Tensor TokenDecoderBlock::forward(const Tensor& x, const Tensor& slots) const {
  Tensor nx = ln1.forward(x);
  Tensor u = add(x, self_attn.forward(nx, nx, /*causal=*/true));
  u = add(u, cross_attn.forward(ln2.forward(u), slots, /*causal=*/false));
  Tensor h = fc2.forward(relu(fc1.forward(ln3.forward(u))));
  return add(u, h);
}

void TokenDecoderBlock::collect(const std::string& prefix, ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  ln2.collect(prefix + ".ln2", out);
  ln3.collect(prefix + ".ln3", out);
  self_attn.collect(prefix + ".self", out);
  cross_attn.collect(prefix + ".cross", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

TokenDecoder::TokenDecoder(Rng& rng, const ModelConfig& cfg, int grid_)
    : ln_f(cfg.dec_dim), grid(grid_), vocab(cfg.vocab) {
  int dim = cfg.dec_dim;
  int t = grid * grid;
  tok_embed = init_fan_in(rng, {vocab, dim}, dim);
  pos_embed = init_fan_in(rng, {t, dim}, dim);
  bos = init_fan_in(rng, {1, dim}, dim);
  slot_project = Linear(rng, cfg.z_dim, dim);
  for (int i = 0; i < cfg.dec_layers; ++i)
    blocks.emplace_back(rng, dim, cfg.dec_heads);
  // zero head: every token starts exactly uniform
  head = Linear::zero_init(dim, vocab);
}

Tensor TokenDecoder::logits(const std::vector<int>& tokens, int n,
                            const Tensor& slots) const {
  int t = grid * grid;
  if (static_cast<int>(tokens.size()) != n * t)
    throw std::invalid_argument("token decoder: token count mismatch");
  int dim = tok_embed.shape()[1];

  // teacher forcing: position 0 sees BOS, position m sees token m-1
  std::vector<int> shifted(static_cast<size_t>(n) * (t - 1));
  for (int i = 0; i < n; ++i)
    for (int m = 0; m + 1 < t; ++m)
      shifted[static_cast<size_t>(i) * (t - 1) + m] =
          tokens[static_cast<size_t>(i) * t + m];
  Tensor emb = embedding(tok_embed, shifted, {n, t - 1});
  Tensor bos_b = broadcast_to(reshape(bos, {1, 1, dim}), {n, 1, dim});
  Tensor x = concat({bos_b, emb}, 1);  // [n, t, dim]
  x = add(x, reshape(pos_embed, {1, t, dim}));

  Tensor sl = slot_project.forward(slots);
  for (const auto& b : blocks) x = b.forward(x, sl);
  return head.forward(ln_f.forward(x));  // [n, t, V]
}

Tensor TokenDecoder::nll(const std::vector<int>& tokens, int n,
                         const Tensor& slots) const {
  Tensor lg = logits(tokens, n, slots);
  Tensor ls = log_softmax(lg, -1);
  Tensor picked = gather_last(ls, tokens);  // [n, t]
  return neg(sum(picked, {-1}));            // [n]
}

std::vector<int> TokenDecoder::rollout(const Tensor& slots,
                                       Rng* sample_rng) const {
  NoGradGuard ng;
  int n = slots.shape()[0];
  int t = grid * grid;
  std::vector<int> tokens(static_cast<size_t>(n) * t, 0);
  for (int m = 0; m < t; ++m) {
    Tensor lg = logits(tokens, n, slots);  // positions > m see stale zeros only
    for (int i = 0; i < n; ++i) {
      const Real* row = lg.data() + (static_cast<int64_t>(i) * t + m) * vocab;
      int choice = 0;
      if (sample_rng) {
        Real mx = row[0];
        for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
        Real z = 0;
        for (int v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
        Real u = sample_rng->uniform() * z, acc = 0;
        choice = vocab - 1;
        for (int v = 0; v < vocab; ++v) {
          acc += std::exp(row[v] - mx);
          if (u <= acc) {
            choice = v;
            break;
          }
        }
      } else {
        Real bv = row[0];
        for (int v = 1; v < vocab; ++v)
          if (row[v] > bv) {
            bv = row[v];
            choice = v;
          }
      }
      tokens[static_cast<size_t>(i) * t + m] = choice;
    }
  }
  return tokens;
}

void TokenDecoder::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".tok_embed", tok_embed});
  out.push_back({prefix + ".pos_embed", pos_embed});
  out.push_back({prefix + ".bos", bos});
  slot_project.collect(prefix + ".slot_project", out);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".blk" + std::to_string(i), out);
  ln_f.collect(prefix + ".ln_f", out);
  head.collect(prefix + ".head", out);
}

}  // namespace vonet

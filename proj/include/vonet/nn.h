#pragma once

#include <string>
#include <vector>

#include "vonet/rng.h"
#include "vonet/tensor.h"

namespace vonet {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

Tensor init_fan_in(Rng& rng, const Shape& shape, int fan_in);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out], undefined when bias-free

  Linear() = default;
  Linear(Rng& rng, int in, int out, bool bias = true);
  static Linear zero_init(int in, int out, bool bias = true);

  Tensor forward(const Tensor& x) const;  // [..., in] -> [..., out]
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2d {
  Tensor w;  // [co, ci, k, k]
  Tensor b;  // [co], undefined when bias-free
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(Rng& rng, int ci, int co, int k, int stride, int pad, bool bias = true);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct InstanceNorm2d {
  Tensor gamma, beta;  // [1, c, 1, 1]
  Real eps = 1e-5;

  InstanceNorm2d() = default;
  explicit InstanceNorm2d(int channels);

  Tensor forward(const Tensor& x) const;  // [n, c, h, w]
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma, beta;  // [dim]
  Real eps = 1e-8;

  LayerNorm() = default;
  explicit LayerNorm(int dim);

  Tensor forward(const Tensor& x) const;  // normalizes the last dim
  void collect(const std::string& prefix, ParamList& out) const;
};

// Stack of linear layers with ReLU between them; `relu_last` also
// activates the final layer.
struct Mlp {
  std::vector<Linear> layers;
  bool relu_last = false;

  Mlp() = default;
  Mlp(Rng& rng, const std::vector<int>& dims, bool relu_last = false);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct GruCell {
  Linear lx;  // in -> 3*hidden (update, reset, candidate)
  Linear lh;  // hidden -> 3*hidden
  int hidden = 0;

  GruCell() = default;
  GruCell(Rng& rng, int input, int hidden);

  Tensor forward(const Tensor& x, const Tensor& h) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Multi-head attention with per-head key/value size equal to the model
// size (d_k = d_v = d_model). No positional structure of its own.
struct MultiheadAttention {
  Linear q, k, v, o;
  int heads = 1;
  int head_dim = 0;

  MultiheadAttention() = default;
  MultiheadAttention(Rng& rng, int dim, int heads);

  // query: [n, tq, dim], kv: [n, tk, dim]. Causal masking requires tq == tk.
  Tensor forward(const Tensor& query, const Tensor& kv, bool causal) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Pre-LN decoder-only block: v = u + Attn(LN(u)); u' = v + MLP(LN(v)).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiheadAttention attn;
  Linear fc1, fc2;  // d_ff = 2 * dim

  TransformerBlock() = default;
  TransformerBlock(Rng& rng, int dim, int heads);

  Tensor forward(const Tensor& x, bool causal = false) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct TransformerStack {
  std::vector<TransformerBlock> blocks;

  TransformerStack() = default;
  TransformerStack(Rng& rng, int dim, int heads, int depth);

  Tensor forward(const Tensor& x, bool causal = false) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// ---- optimization ----

void zero_grads(const ParamList& params);
// Global L2 norm of all gradients; scales them down to max_norm when
// exceeded. Returns the pre-clip norm.
Real clip_global_norm(const ParamList& params, Real max_norm);
Real global_grad_norm(const ParamList& params);

class Adam {
 public:
  Adam(ParamList params, Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8);

  void step(Real lr);
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  std::vector<std::vector<Real>> m_, v_;
  Real beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace vonet

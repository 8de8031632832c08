#include "vonet/nn.h"

#include <cmath>
#include <stdexcept>

namespace vonet {

Tensor init_fan_in(Rng& rng, const Shape& shape, int fan_in) {
  Tensor t = Tensor::make(shape);
  Real bound = 1.0 / std::sqrt(static_cast<Real>(fan_in));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

// ---- Linear ----

Linear::Linear(Rng& rng, int in, int out, bool bias) {
  w = init_fan_in(rng, {in, out}, in);
  if (bias) b = init_fan_in(rng, {out}, in);
}

Linear Linear::zero_init(int in, int out, bool bias) {
  Linear l;
  l.w = Tensor::zeros({in, out});
  l.w.set_requires_grad(true);
  if (bias) {
    l.b = Tensor::zeros({out});
    l.b.set_requires_grad(true);
  }
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  int in = w.shape()[0], out = w.shape()[1];
  if (x.shape().back() != in)
    throw std::invalid_argument("Linear: input dim " +
                                std::to_string(x.shape().back()) + " != " +
                                std::to_string(in));
  Tensor x2 = reshape(x, {-1, in});
  Tensor y = matmul(x2, w);
  if (b.defined()) y = add(y, b);
  Shape out_shape = x.shape();
  out_shape.back() = out;
  return reshape(y, out_shape);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  if (b.defined()) out.push_back({prefix + ".b", b});
}

// ---- Conv2d ----

Conv2d::Conv2d(Rng& rng, int ci, int co, int k, int stride_, int pad_, bool bias)
    : stride(stride_), pad(pad_) {
  int fan_in = ci * k * k;
  w = init_fan_in(rng, {co, ci, k, k}, fan_in);
  if (bias) b = init_fan_in(rng, {co}, fan_in);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return conv2d(x, w, b, stride, pad);
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  if (b.defined()) out.push_back({prefix + ".b", b});
}

// ---- InstanceNorm2d ----

InstanceNorm2d::InstanceNorm2d(int channels) {
  gamma = Tensor::full({1, channels, 1, 1}, 1.0);
  gamma.set_requires_grad(true);
  beta = Tensor::zeros({1, channels, 1, 1});
  beta.set_requires_grad(true);
}

Tensor InstanceNorm2d::forward(const Tensor& x) const {
  return instance_norm_op(x, gamma, beta, eps);
}

void InstanceNorm2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

// ---- LayerNorm ----

LayerNorm::LayerNorm(int dim) {
  gamma = Tensor::full({dim}, 1.0);
  gamma.set_requires_grad(true);
  beta = Tensor::zeros({dim});
  beta.set_requires_grad(true);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm_op(x, gamma, beta, eps);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

// ---- Mlp ----

Mlp::Mlp(Rng& rng, const std::vector<int>& dims, bool relu_last_)
    : relu_last(relu_last_) {
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    layers.emplace_back(rng, dims[i], dims[i + 1]);
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size() || relu_last) h = relu(h);
  }
  return h;
}

void Mlp::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(prefix + ".fc" + std::to_string(i), out);
}

// ---- GruCell ----

GruCell::GruCell(Rng& rng, int input, int hidden_) : hidden(hidden_) {
  lx = Linear(rng, input, 3 * hidden_);
  lh = Linear(rng, hidden_, 3 * hidden_);
}

Tensor GruCell::forward(const Tensor& x, const Tensor& h) const {
  Tensor gx = lx.forward(x);  // [..., 3H]
  Tensor gh = lh.forward(h);
  Tensor z = sigmoid(add(slice(gx, -1, 0, hidden), slice(gh, -1, 0, hidden)));
  Tensor r =
      sigmoid(add(slice(gx, -1, hidden, hidden), slice(gh, -1, hidden, hidden)));
  Tensor n = tanh(add(slice(gx, -1, 2 * hidden, hidden),
                      mul(r, slice(gh, -1, 2 * hidden, hidden))));
  // h' = (1 - z) * n + z * h
  return add(n, mul(z, sub(h, n)));
}

void GruCell::collect(const std::string& prefix, ParamList& out) const {
  lx.collect(prefix + ".lx", out);
  lh.collect(prefix + ".lh", out);
}

// ---- MultiheadAttention ----

MultiheadAttention::MultiheadAttention(Rng& rng, int dim, int heads_)
    : heads(heads_), head_dim(dim) {
  q = Linear(rng, dim, heads_ * head_dim);
  k = Linear(rng, dim, heads_ * head_dim);
  v = Linear(rng, dim, heads_ * head_dim);
  o = Linear(rng, heads_ * head_dim, dim);
}

Tensor MultiheadAttention::forward(const Tensor& query, const Tensor& kv,
                                   bool causal) const {
  int n = query.shape()[0];
  int tq = query.shape()[1];
  int tk = kv.shape()[1];
  if (causal && tq != tk)
    throw std::invalid_argument("attention: causal mask needs square scores");

  auto split_heads = [&](const Tensor& x, int t) {
    // [n, t, h*d] -> [n*h, t, d]
    Tensor r = reshape(x, {n, t, heads, head_dim});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {n * heads, t, head_dim});
  };
  Tensor qh = split_heads(q.forward(query), tq);
  Tensor kh = split_heads(k.forward(kv), tk);
  Tensor vh = split_heads(v.forward(kv), tk);

  Tensor scores =
      mul(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(Real(head_dim)));
  if (causal) {
    Tensor mask = Tensor::zeros({tq, tk});
    Real* m = mask.data();
    for (int i = 0; i < tq; ++i)
      for (int j = i + 1; j < tk; ++j) m[i * tk + j] = -1e30;
    scores = add(scores, mask);
  }
  Tensor attn = softmax(scores, -1);
  Tensor ctx = matmul(attn, vh);  // [n*h, tq, d]
  ctx = reshape(ctx, {n, heads, tq, head_dim});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {n, tq, heads * head_dim});
  return o.forward(ctx);
}

void MultiheadAttention::collect(const std::string& prefix, ParamList& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

// ---- TransformerBlock ----

TransformerBlock::TransformerBlock(Rng& rng, int dim, int heads)
    : ln1(dim), ln2(dim), attn(rng, dim, heads) {
  fc1 = Linear(rng, dim, 2 * dim);
  fc2 = Linear(rng, 2 * dim, dim);
}

Tensor TransformerBlock::forward(const Tensor& x, bool causal) const {
  Tensor nx = ln1.forward(x);
  Tensor u = add(x, attn.forward(nx, nx, causal));
  Tensor h = fc2.forward(relu(fc1.forward(ln2.forward(u))));
  return add(u, h);
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  ln2.collect(prefix + ".ln2", out);
  attn.collect(prefix + ".attn", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

TransformerStack::TransformerStack(Rng& rng, int dim, int heads, int depth) {
  for (int i = 0; i < depth; ++i) blocks.emplace_back(rng, dim, heads);
}

Tensor TransformerStack::forward(const Tensor& x, bool causal) const {
  Tensor h = x;
  for (const auto& b : blocks) h = b.forward(h, causal);
  return h;
}

void TransformerStack::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".blk" + std::to_string(i), out);
}

// ---- optimization ----

void zero_grads(const ParamList& params) {
  for (const auto& p : params) const_cast<Tensor&>(p.tensor).zero_grad();
}

Real global_grad_norm(const ParamList& params) {
  Real sq = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (Real g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

Real clip_global_norm(const ParamList& params, Real max_norm) {
  Real norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    Real scale = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (Real& g : const_cast<Tensor&>(p.tensor).grad_ref()) g *= scale;
    }
  }
  return norm;
}

Adam::Adam(ParamList params, Real beta1, Real beta2, Real eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].tensor.size(), 0.0);
    v_[i].assign(params_[i].tensor.size(), 0.0);
  }
}

void Adam::step(Real lr) {
  ++t_;
  Real bc1 = 1.0 - std::pow(beta1_, static_cast<Real>(t_));
  Real bc2 = 1.0 - std::pow(beta2_, static_cast<Real>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = const_cast<Tensor&>(params_[i].tensor);
    if (!t.has_grad()) continue;
    const auto& g = t.grad();
    Real* w = t.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < g.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      Real mhat = m[j] / bc1;
      Real vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace vonet

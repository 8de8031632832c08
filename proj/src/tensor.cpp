#include "vonet/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace vonet {

namespace {

thread_local bool g_grad_enabled = true;

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw std::invalid_argument("axis out of range");
  return axis;
}

// Row-major strides; broadcast dims get stride 0 so the odometer walk can
// read the same element repeatedly.
struct BCast {
  Shape out;
  std::vector<int64_t> sa, sb;
};

std::vector<int64_t> strides_for(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

BCast make_bcast(const Shape& a, const Shape& b) {
  BCast bc;
  int nd = std::max(a.size(), b.size());
  bc.out.resize(nd);
  bc.sa.assign(nd, 0);
  bc.sb.assign(nd, 0);
  std::vector<int64_t> stra = strides_for(a), strb = strides_for(b);
  for (int i = 0; i < nd; ++i) {
    int da = i < nd - static_cast<int>(a.size()) ? 1 : a[i - (nd - a.size())];
    int db = i < nd - static_cast<int>(b.size()) ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast mismatch: " + shape_str(a) + " vs " +
                                  shape_str(b));
    bc.out[i] = std::max(da, db);
    if (da != 1) bc.sa[i] = stra[i - (nd - a.size())];
    if (db != 1) bc.sb[i] = strb[i - (nd - b.size())];
  }
  return bc;
}

// Walks the broadcast output space in runs along the innermost axis;
// f(i, oa, ob, len, da, db) handles out[i..i+len) with input strides
// da/db (0 or 1 along the last axis).
template <class F>
void bcast_walk_runs(const BCast& bc, F f) {
  int nd = static_cast<int>(bc.out.size());
  int64_t total = shape_numel(bc.out);
  if (nd == 0) {
    if (total == 1) f(0, 0, 0, 1, 0, 0);
    return;
  }
  const int64_t run = bc.out[nd - 1];
  const int64_t da = bc.sa[nd - 1], db = bc.sb[nd - 1];
  if (nd == 1) {
    f(0, 0, 0, run, da, db);
    return;
  }
  std::vector<int64_t> counter(nd - 1, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < total; i += run) {
    f(i, oa, ob, run, da, db);
    for (int d = nd - 2; d >= 0; --d) {
      ++counter[d];
      oa += bc.sa[d];
      ob += bc.sb[d];
      if (counter[d] < bc.out[d]) break;
      oa -= bc.sa[d] * bc.out[d];
      ob -= bc.sb[d] * bc.out[d];
      counter[d] = 0;
    }
  }
}

// Per-element walk kept for call sites that want it.
template <class F>
void bcast_walk(const BCast& bc, F f) {
  bcast_walk_runs(bc, [&](int64_t i, int64_t oa, int64_t ob, int64_t len,
                          int64_t da, int64_t db) {
    for (int64_t j = 0; j < len; ++j) f(i + j, oa + j * da, ob + j * db);
  });
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor make_result(Shape shape, std::vector<Tensor> parents,
                   std::function<void(Tensor::Impl&)> backward) {
  Tensor t = Tensor::make(std::move(shape));
  bool track = grad_enabled();
  if (track) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    track = any;
  }
  if (track) {
    t.impl()->requires_grad = true;
    t.impl()->parents = std::move(parents);
    t.impl()->backward_fn = std::move(backward);
  }
  return t;
}

// Generic binary elementwise op. fval computes the output; fgrad receives
// (go, a, b) and accumulates into the input grads. Same-shape inputs take
// tight loops; everything else goes through the odometer walk.
template <class FV, class FGA, class FGB>
Tensor binary_op(const Tensor& a, const Tensor& b, FV fval, FGA fga, FGB fgb) {
  const bool same = same_shape(a.shape(), b.shape());
  BCast bc = same ? BCast{a.shape(), {}, {}} : make_bcast(a.shape(), b.shape());
  Tensor out = make_result(
      bc.out, {a, b}, [a, b, bc, same, fga, fgb](Tensor::Impl& self) {
        const Real* pa = a.data();
        const Real* pb = b.data();
        const Real* go = self.grad.data();
        Real* ga = a.requires_grad() ? a.impl()->ensure_grad().data() : nullptr;
        Real* gb = b.requires_grad() ? b.impl()->ensure_grad().data() : nullptr;
        if (same) {
          int64_t n = self.numel();
          if (ga)
            for (int64_t i = 0; i < n; ++i) ga[i] += fga(go[i], pa[i], pb[i]);
          if (gb)
            for (int64_t i = 0; i < n; ++i) gb[i] += fgb(go[i], pa[i], pb[i]);
          return;
        }
        bcast_walk_runs(bc, [&](int64_t i, int64_t oa, int64_t ob, int64_t len,
                                int64_t da, int64_t db) {
          if (ga)
            for (int64_t j = 0; j < len; ++j)
              ga[oa + j * da] += fga(go[i + j], pa[oa + j * da], pb[ob + j * db]);
          if (gb)
            for (int64_t j = 0; j < len; ++j)
              gb[ob + j * db] += fgb(go[i + j], pa[oa + j * da], pb[ob + j * db]);
        });
      });
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  if (same) {
    int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) po[i] = fval(pa[i], pb[i]);
  } else {
    bcast_walk_runs(bc, [&](int64_t i, int64_t oa, int64_t ob, int64_t len,
                            int64_t da, int64_t db) {
      for (int64_t j = 0; j < len; ++j)
        po[i + j] = fval(pa[oa + j * da], pb[ob + j * db]);
    });
  }
  return out;
}

template <class FV, class FG>
Tensor unary_op(const Tensor& a, FV fval, FG fgrad) {
  Tensor out = make_result(a.shape(), {a}, [a, fgrad](Tensor::Impl& self) {
    if (!a.requires_grad()) return;
    const Real* pa = a.data();
    const Real* go = self.grad.data();
    const Real* po = self.value.data();
    Real* ga = a.impl()->ensure_grad().data();
    int64_t n = self.numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += fgrad(go[i], pa[i], po[i]);
  });
  const Real* pa = a.data();
  Real* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = fval(pa[i]);
  return out;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

RealVec& Tensor::Impl::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::make(Shape shape) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->value.resize(shape_numel(shape));
  t.impl_->shape = std::move(shape);
  return t;
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, Real v) {
  Tensor t = make(shape);
  std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
  return t;
}

Tensor Tensor::scalar(Real v) { return full({}, v); }

Tensor Tensor::from_vector(const Shape& shape, std::vector<Real> values) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape))
    throw std::invalid_argument("from_vector: size mismatch");
  Tensor t = make(shape);
  std::copy(values.begin(), values.end(), t.data());
  return t;
}

int Tensor::dim(int axis) const {
  return impl_->shape[normalize_axis(axis, ndim())];
}

Real Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() on non-scalar tensor");
  return impl_->value[0];
}

Tensor& Tensor::set_requires_grad(bool enable) {
  impl_->requires_grad = enable;
  return *this;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty())
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::backward() const {
  if (size() != 1) throw std::logic_error("backward() requires a scalar root");
  if (!impl_->requires_grad) return;
  // Iterative DFS to get reverse topological order.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* p = node->parents[next].impl();
      ++next;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  impl_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

bool grad_enabled() { return g_grad_enabled; }

void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](Real x, Real y) { return x + y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](Real x, Real y) { return x - y; },
      [](Real g, Real, Real) { return g; },
      [](Real g, Real, Real) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](Real x, Real y) { return x * y; },
      [](Real g, Real, Real y) { return g * y; },
      [](Real g, Real x, Real) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](Real x, Real y) { return x / y; },
      [](Real g, Real, Real y) { return g / y; },
      [](Real g, Real x, Real y) { return -g * x / (y * y); });
}

Tensor add(const Tensor& a, Real b) {
  return unary_op(
      a, [b](Real x) { return x + b; }, [](Real g, Real, Real) { return g; });
}

Tensor mul(const Tensor& a, Real b) {
  return unary_op(
      a, [b](Real x) { return x * b; }, [b](Real g, Real, Real) { return g * b; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return x > 0 ? x : 0; },
      [](Real g, Real x, Real) { return x > 0 ? g : 0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](Real g, Real, Real y) { return g * y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return std::tanh(x); },
      [](Real g, Real, Real y) { return g * (1.0 - y * y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return std::exp(x); },
      [](Real g, Real, Real y) { return g * y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return std::log(x); },
      [](Real g, Real x, Real) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](Real x) { return std::sqrt(x); },
      [](Real g, Real, Real y) { return 0.5 * g / y; });
}

Tensor clamp(const Tensor& a, Real lo, Real hi) {
  return unary_op(
      a, [lo, hi](Real x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](Real g, Real x, Real) { return (x > lo && x < hi) ? g : 0; });
}

// ---- softmax family ----

namespace {

// Applies f(in_base, out_base, step) for every 1-D lane along `axis`.
template <class F>
void for_each_lane(const Shape& shape, int axis, F f) {
  auto st = strides_for(shape);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    inner *= shape[i];
  int n = shape[axis];
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in)
      f(o * n * inner + in, inner, n);
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  int ax = normalize_axis(axis, a.ndim());
  Shape shape = a.shape();
  Tensor out = make_result(shape, {a}, [a, ax, shape](Tensor::Impl& self) {
    if (!a.requires_grad()) return;
    Real* ga = a.impl()->ensure_grad().data();
    const Real* s = self.value.data();
    const Real* go = self.grad.data();
    for_each_lane(shape, ax, [&](int64_t base, int64_t step, int n) {
      Real dot = 0;
      for (int i = 0; i < n; ++i) dot += go[base + i * step] * s[base + i * step];
      for (int i = 0; i < n; ++i) {
        int64_t k = base + i * step;
        ga[k] += s[k] * (go[k] - dot);
      }
    });
  });
  const Real* pa = a.data();
  Real* po = out.data();
  for_each_lane(shape, ax, [&](int64_t base, int64_t step, int n) {
    Real mx = pa[base];
    for (int i = 1; i < n; ++i) mx = std::max(mx, pa[base + i * step]);
    Real sum = 0;
    for (int i = 0; i < n; ++i) {
      Real e = std::exp(pa[base + i * step] - mx);
      po[base + i * step] = e;
      sum += e;
    }
    Real inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) po[base + i * step] *= inv;
  });
  return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
  int ax = normalize_axis(axis, a.ndim());
  Shape shape = a.shape();
  Tensor out = make_result(shape, {a}, [a, ax, shape](Tensor::Impl& self) {
    if (!a.requires_grad()) return;
    Real* ga = a.impl()->ensure_grad().data();
    const Real* ls = self.value.data();
    const Real* go = self.grad.data();
    for_each_lane(shape, ax, [&](int64_t base, int64_t step, int n) {
      Real gsum = 0;
      for (int i = 0; i < n; ++i) gsum += go[base + i * step];
      for (int i = 0; i < n; ++i) {
        int64_t k = base + i * step;
        ga[k] += go[k] - std::exp(ls[k]) * gsum;
      }
    });
  });
  const Real* pa = a.data();
  Real* po = out.data();
  for_each_lane(shape, ax, [&](int64_t base, int64_t step, int n) {
    Real mx = pa[base];
    for (int i = 1; i < n; ++i) mx = std::max(mx, pa[base + i * step]);
    Real sum = 0;
    for (int i = 0; i < n; ++i) sum += std::exp(pa[base + i * step] - mx);
    Real lse = mx + std::log(sum);
    for (int i = 0; i < n; ++i)
      po[base + i * step] = pa[base + i * step] - lse;
  });
  return out;
}

// ---- fused normalizations ----

namespace {

// Shared lane-normalization backward:
//   dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
// where dxhat = dy * gamma. `stats` stores (mu, inv) per lane.
void lane_norm_stats(const Real* x, int64_t lanes, int64_t len, Real eps,
                     std::vector<Real>& stats) {
  stats.resize(2 * lanes);
  for (int64_t l = 0; l < lanes; ++l) {
    const Real* p = x + l * len;
    Real mu = 0;
    for (int64_t i = 0; i < len; ++i) mu += p[i];
    mu /= len;
    Real var = 0;
    for (int64_t i = 0; i < len; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= len;
    stats[2 * l] = mu;
    stats[2 * l + 1] = 1.0 / std::sqrt(var + eps);
  }
}

}  // namespace

Tensor layer_norm_op(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     Real eps) {
  int64_t len = x.shape().back();
  int64_t lanes = x.size() / len;
  if (gamma.size() != len || beta.size() != len)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  auto stats = std::make_shared<std::vector<Real>>();
  lane_norm_stats(x.data(), lanes, len, eps, *stats);

  Tensor out = make_result(
      x.shape(), {x, gamma, beta},
      [x, gamma, beta, stats, lanes, len](Tensor::Impl& self) {
        const Real* px = x.data();
        const Real* pg = gamma.data();
        const Real* go = self.grad.data();
        Real* gx = x.requires_grad() ? x.impl()->ensure_grad().data() : nullptr;
        Real* gg =
            gamma.requires_grad() ? gamma.impl()->ensure_grad().data() : nullptr;
        Real* gb =
            beta.requires_grad() ? beta.impl()->ensure_grad().data() : nullptr;
        std::vector<Real> xhat(len);
        for (int64_t l = 0; l < lanes; ++l) {
          Real mu = (*stats)[2 * l], inv = (*stats)[2 * l + 1];
          const Real* xl = px + l * len;
          const Real* gl = go + l * len;
          Real s1 = 0, s2 = 0;
          for (int64_t i = 0; i < len; ++i) {
            xhat[i] = (xl[i] - mu) * inv;
            Real dxh = gl[i] * pg[i];
            s1 += dxh;
            s2 += dxh * xhat[i];
          }
          s1 /= len;
          s2 /= len;
          if (gx) {
            Real* dst = gx + l * len;
            for (int64_t i = 0; i < len; ++i)
              dst[i] += inv * (gl[i] * pg[i] - s1 - xhat[i] * s2);
          }
          if (gg)
            for (int64_t i = 0; i < len; ++i) gg[i] += gl[i] * xhat[i];
          if (gb)
            for (int64_t i = 0; i < len; ++i) gb[i] += gl[i];
        }
      });
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  Real* po = out.data();
  for (int64_t l = 0; l < lanes; ++l) {
    Real mu = (*stats)[2 * l], inv = (*stats)[2 * l + 1];
    const Real* src = px + l * len;
    Real* dst = po + l * len;
    for (int64_t i = 0; i < len; ++i)
      dst[i] = pg[i] * ((src[i] - mu) * inv) + pb[i];
  }
  return out;
}

Tensor instance_norm_op(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, Real eps) {
  if (x.ndim() != 4) throw std::invalid_argument("instance_norm: expected 4-D");
  int64_t n = x.shape()[0], c = x.shape()[1];
  int64_t len = static_cast<int64_t>(x.shape()[2]) * x.shape()[3];
  int64_t lanes = n * c;
  if (gamma.size() != c || beta.size() != c)
    throw std::invalid_argument("instance_norm: affine size mismatch");
  auto stats = std::make_shared<std::vector<Real>>();
  lane_norm_stats(x.data(), lanes, len, eps, *stats);

  Tensor out = make_result(
      x.shape(), {x, gamma, beta},
      [x, gamma, beta, stats, lanes, len, c](Tensor::Impl& self) {
        const Real* px = x.data();
        const Real* pg = gamma.data();
        const Real* go = self.grad.data();
        Real* gx = x.requires_grad() ? x.impl()->ensure_grad().data() : nullptr;
        Real* gg =
            gamma.requires_grad() ? gamma.impl()->ensure_grad().data() : nullptr;
        Real* gb =
            beta.requires_grad() ? beta.impl()->ensure_grad().data() : nullptr;
        for (int64_t l = 0; l < lanes; ++l) {
          int64_t ch = l % c;
          Real mu = (*stats)[2 * l], inv = (*stats)[2 * l + 1];
          Real g = pg[ch];
          const Real* xl = px + l * len;
          const Real* gl = go + l * len;
          Real s1 = 0, s2 = 0, sb = 0;
          for (int64_t i = 0; i < len; ++i) {
            Real xh = (xl[i] - mu) * inv;
            s1 += gl[i];
            s2 += gl[i] * xh;
            sb += gl[i];
          }
          if (gg) gg[ch] += s2;
          if (gb) gb[ch] += sb;
          if (gx) {
            Real m1 = g * s1 / len, m2 = g * s2 / len;
            Real* dst = gx + l * len;
            for (int64_t i = 0; i < len; ++i) {
              Real xh = (xl[i] - mu) * inv;
              dst[i] += inv * (g * gl[i] - m1 - xh * m2);
            }
          }
        }
      });
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  Real* po = out.data();
  for (int64_t l = 0; l < lanes; ++l) {
    int64_t ch = l % c;
    Real mu = (*stats)[2 * l], inv = (*stats)[2 * l + 1];
    const Real* src = px + l * len;
    Real* dst = po + l * len;
    for (int64_t i = 0; i < len; ++i)
      dst[i] = pg[ch] * ((src[i] - mu) * inv) + pb[ch];
  }
  return out;
}

// ---- reductions ----

namespace {

Shape reduced_shape(const Shape& in, const std::vector<bool>& reduce,
                    bool keepdims) {
  Shape out;
  for (size_t i = 0; i < in.size(); ++i) {
    if (reduce[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  int nd = a.ndim();
  std::vector<bool> red(nd, false);
  for (int ax : axes) red[normalize_axis(ax, nd)] = true;
  Shape in = a.shape();
  Shape out_shape = reduced_shape(in, red, keepdims);

  // Output strides aligned to input dims (0 where reduced).
  std::vector<int64_t> ostride(nd, 0);
  {
    Shape kept = reduced_shape(in, red, true);
    auto kst = strides_for(kept);
    for (int i = 0; i < nd; ++i) ostride[i] = red[i] ? 0 : kst[i];
  }

  auto walk = [in, ostride, nd](const Real* src, Real* dst, bool accumulate_out) {
    std::vector<int64_t> counter(nd, 0);
    int64_t total = shape_numel(in);
    int64_t off = 0;
    for (int64_t i = 0; i < total; ++i) {
      if (accumulate_out)
        dst[off] += src[i];
      else
        dst[i] += src[off];
      for (int d = nd - 1; d >= 0; --d) {
        ++counter[d];
        off += ostride[d];
        if (counter[d] < in[d]) break;
        off -= ostride[d] * in[d];
        counter[d] = 0;
      }
    }
  };

  Tensor out = make_result(out_shape, {a}, [a, walk](Tensor::Impl& self) {
    if (!a.requires_grad()) return;
    walk(self.grad.data(), a.impl()->ensure_grad().data(), false);
  });
  std::fill(out.values().begin(), out.values().end(), 0.0);
  walk(a.data(), out.data(), true);
  return out;
}

Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  int64_t count = 1;
  for (int ax : axes) count *= a.dim(ax);
  return mul(sum(a, axes, keepdims), 1.0 / static_cast<Real>(count));
}

Tensor sum_all(const Tensor& a) {
  std::vector<int> axes(a.ndim());
  for (int i = 0; i < a.ndim(); ++i) axes[i] = i;
  return sum(a, axes, false);
}

Tensor mean_all(const Tensor& a) {
  return mul(sum_all(a), 1.0 / static_cast<Real>(a.size()));
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: two inferred dims");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = static_cast<int>(a.size() / known);
  if (shape_numel(shape) != a.size())
    throw std::invalid_argument("reshape: numel mismatch " + shape_str(a.shape()) +
                                " -> " + shape_str(shape));
  Tensor out = make_result(shape, {a}, [a](Tensor::Impl& self) {
    if (!a.requires_grad()) return;
    Real* ga = a.impl()->ensure_grad().data();
    const Real* go = self.grad.data();
    int64_t n = self.numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
  });
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& dims) {
  int nd = a.ndim();
  if (static_cast<int>(dims.size()) != nd)
    throw std::invalid_argument("permute: rank mismatch");
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = a.shape()[dims[i]];
  auto in_strides = strides_for(a.shape());
  std::vector<int64_t> gather_stride(nd);
  for (int i = 0; i < nd; ++i) gather_stride[i] = in_strides[dims[i]];

  auto walk = [out_shape, gather_stride, nd](const Real* src, Real* dst,
                                             bool forward) {
    std::vector<int64_t> counter(nd, 0);
    int64_t total = shape_numel(out_shape);
    int64_t off = 0;
    for (int64_t i = 0; i < total; ++i) {
      if (forward)
        dst[i] = src[off];
      else
        dst[off] += src[i];
      for (int d = nd - 1; d >= 0; --d) {
        ++counter[d];
        off += gather_stride[d];
        if (counter[d] < out_shape[d]) break;
        off -= gather_stride[d] * out_shape[d];
        counter[d] = 0;
      }
    }
  };

  Tensor out = make_result(out_shape, {a}, [a, walk](Tensor::Impl& self) {
    if (!a.requires_grad()) return;
    walk(self.grad.data(), a.impl()->ensure_grad().data(), false);
  });
  walk(a.data(), out.data(), true);
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  std::vector<int> dims(a.ndim());
  for (int i = 0; i < a.ndim(); ++i) dims[i] = i;
  std::swap(dims[a.ndim() - 1], dims[a.ndim() - 2]);
  return permute(a, dims);
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  int ax = normalize_axis(axis, a.ndim());
  if (start < 0 || len < 0 || start + len > a.shape()[ax])
    throw std::invalid_argument("slice out of range");
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.shape()[i];
  for (int i = ax + 1; i < a.ndim(); ++i) inner *= a.shape()[i];
  int64_t in_dim = a.shape()[ax];

  Tensor out = make_result(
      out_shape, {a}, [a, outer, inner, in_dim, start, len](Tensor::Impl& self) {
        if (!a.requires_grad()) return;
        Real* ga = a.impl()->ensure_grad().data();
        const Real* go = self.grad.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < len; ++j) {
            const Real* s = go + (o * len + j) * inner;
            Real* d = ga + (o * in_dim + start + j) * inner;
            for (int64_t i = 0; i < inner; ++i) d[i] += s[i];
          }
      });
  const Real* pa = a.data();
  Real* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      std::copy_n(pa + (o * in_dim + start + j) * inner, inner,
                  po + (o * len + j) * inner);
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  int ax = normalize_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  int total_dim = 0;
  for (const auto& p : parts) {
    if (p.ndim() != parts[0].ndim())
      throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < p.ndim(); ++i)
      if (i != ax && p.shape()[i] != out_shape[i])
        throw std::invalid_argument("concat: shape mismatch");
    total_dim += p.shape()[ax];
  }
  out_shape[ax] = total_dim;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[i];
  for (int i = ax + 1; i < static_cast<int>(out_shape.size()); ++i)
    inner *= out_shape[i];

  Tensor out = make_result(
      out_shape, parts, [parts, outer, inner, total_dim, ax](Tensor::Impl& self) {
        const Real* go = self.grad.data();
        int offset = 0;
        for (const auto& p : parts) {
          int d = p.shape()[ax];
          if (p.requires_grad()) {
            Real* gp = p.impl()->ensure_grad().data();
            for (int64_t o = 0; o < outer; ++o) {
              const Real* s = go + (o * total_dim + offset) * inner;
              Real* dst = gp + o * d * inner;
              for (int64_t i = 0; i < d * inner; ++i) dst[i] += s[i];
            }
          }
          offset += d;
        }
      });
  Real* po = out.data();
  int offset = 0;
  for (const auto& p : parts) {
    int d = p.shape()[ax];
    const Real* s = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(s + o * d * inner, d * inner,
                  po + (o * total_dim + offset) * inner);
    offset += d;
  }
  return out;
}

namespace {

// Collapses the broadcast problem into outer dims plus one fused suffix
// that is either copied verbatim (contiguous in the input) or filled from
// a single input element (broadcast).
struct BcastPlan {
  std::vector<int> outer;         // remaining dims, innermost last
  std::vector<int64_t> ostride;   // input strides for the outer dims
  int64_t block = 1;
  bool fill = false;  // true: suffix reads one input element

  template <class FCopy, class FFill>
  void walk(int64_t total, FCopy fcopy, FFill ffill) const {
    int nd = static_cast<int>(outer.size());
    std::vector<int64_t> counter(nd, 0);
    int64_t oa = 0;
    for (int64_t i = 0; i < total; i += block) {
      if (fill)
        ffill(i, oa);
      else
        fcopy(i, oa);
      for (int d = nd - 1; d >= 0; --d) {
        ++counter[d];
        oa += ostride[d];
        if (counter[d] < outer[d]) break;
        oa -= ostride[d] * outer[d];
        counter[d] = 0;
      }
    }
  }
};

BcastPlan plan_broadcast(const BCast& bc) {
  BcastPlan plan;
  int nd = static_cast<int>(bc.out.size());
  int d = nd - 1;
  if (d >= 0 && bc.sa[d] == 0) {
    plan.fill = true;
    while (d >= 0 && bc.sa[d] == 0) plan.block *= bc.out[d--];
  } else {
    while (d >= 0 && bc.sa[d] == plan.block) plan.block *= bc.out[d--];
  }
  for (int i = 0; i <= d; ++i) {
    plan.outer.push_back(bc.out[i]);
    plan.ostride.push_back(bc.sa[i]);
  }
  return plan;
}

}  // namespace

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  BCast bc = make_bcast(a.shape(), shape);
  if (bc.out != shape)
    throw std::invalid_argument("broadcast_to: cannot reach " + shape_str(shape) +
                                " from " + shape_str(a.shape()));
  BcastPlan plan = plan_broadcast(bc);
  int64_t total = shape_numel(shape);
  Tensor out = make_result(shape, {a}, [a, plan, total](Tensor::Impl& self) {
    if (!a.requires_grad()) return;
    Real* ga = a.impl()->ensure_grad().data();
    const Real* go = self.grad.data();
    plan.walk(
        total,
        [&](int64_t i, int64_t oa) {
          for (int64_t j = 0; j < plan.block; ++j) ga[oa + j] += go[i + j];
        },
        [&](int64_t i, int64_t oa) {
          Real acc = 0;
          for (int64_t j = 0; j < plan.block; ++j) acc += go[i + j];
          ga[oa] += acc;
        });
  });
  const Real* pa = a.data();
  Real* po = out.data();
  plan.walk(
      total,
      [&](int64_t i, int64_t oa) {
        std::copy_n(pa + oa, plan.block, po + i);
      },
      [&](int64_t i, int64_t oa) { std::fill_n(po + i, plan.block, pa[oa]); });
  return out;
}

Tensor detach(const Tensor& a) {
  Tensor t = Tensor::make(a.shape());
  std::copy(a.values().begin(), a.values().end(), t.values().begin());
  return t;
}

// ---- indexing ----

Tensor embedding(const Tensor& weight, const std::vector<int>& idx,
                 const Shape& idx_shape) {
  if (weight.ndim() != 2) throw std::invalid_argument("embedding: weight not 2-D");
  int V = weight.shape()[0], D = weight.shape()[1];
  if (static_cast<int64_t>(idx.size()) != shape_numel(idx_shape))
    throw std::invalid_argument("embedding: index count mismatch");
  Shape out_shape = idx_shape;
  out_shape.push_back(D);
  Tensor out =
      make_result(out_shape, {weight}, [weight, idx, D](Tensor::Impl& self) {
        if (!weight.requires_grad()) return;
        Real* gw = weight.impl()->ensure_grad().data();
        const Real* go = self.grad.data();
        for (size_t i = 0; i < idx.size(); ++i) {
          Real* row = gw + static_cast<int64_t>(idx[i]) * D;
          const Real* g = go + i * D;
          for (int d = 0; d < D; ++d) row[d] += g[d];
        }
      });
  const Real* w = weight.data();
  Real* po = out.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= V)
      throw std::out_of_range("embedding: index out of vocabulary");
    std::copy_n(w + static_cast<int64_t>(idx[i]) * D, D, po + i * D);
  }
  return out;
}

Tensor gather_last(const Tensor& x, const std::vector<int>& idx) {
  int V = x.shape().back();
  int64_t rows = x.size() / V;
  if (static_cast<int64_t>(idx.size()) != rows)
    throw std::invalid_argument("gather_last: index count mismatch");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor out = make_result(out_shape, {x}, [x, idx, V](Tensor::Impl& self) {
    if (!x.requires_grad()) return;
    Real* gx = x.impl()->ensure_grad().data();
    const Real* go = self.grad.data();
    for (size_t i = 0; i < idx.size(); ++i)
      gx[static_cast<int64_t>(i) * V + idx[i]] += go[i];
  });
  const Real* px = x.data();
  Real* po = out.data();
  for (int64_t i = 0; i < rows; ++i) {
    if (idx[i] < 0 || idx[i] >= V)
      throw std::out_of_range("gather_last: index out of range");
    po[i] = px[i * V + idx[i]];
  }
  return out;
}

}  // namespace vonet

#include <Eigen/Core>

#include <stdexcept>

#include "vonet/tensor.h"

namespace vonet {

namespace {

using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

Tensor make_tracked(Shape shape, std::vector<Tensor> parents,
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

// Batch layout for matmul: both sides flattened to nb matrices; a tensor
// whose batch rank is smaller is broadcast (stride 0).
struct MMPlan {
  int64_t nb = 1;
  int64_t stride_a = 0, stride_b = 0;
  int M, K, N;
  Shape out;
};

MMPlan plan_matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument("matmul: inputs must be at least 2-D");
  MMPlan p;
  p.M = a.shape()[a.ndim() - 2];
  p.K = a.shape()[a.ndim() - 1];
  int kb = b.shape()[b.ndim() - 2];
  p.N = b.shape()[b.ndim() - 1];
  if (p.K != kb)
    throw std::invalid_argument("matmul: inner dims differ " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape ba(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  if (!ba.empty() && !bb.empty() && ba != bb)
    throw std::invalid_argument("matmul: batch dims differ");
  Shape batch = ba.empty() ? bb : ba;
  p.nb = shape_numel(batch);
  p.stride_a = ba.empty() ? 0 : static_cast<int64_t>(p.M) * p.K;
  p.stride_b = bb.empty() ? 0 : static_cast<int64_t>(p.K) * p.N;
  p.out = batch;
  p.out.push_back(p.M);
  p.out.push_back(p.N);
  return p;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MMPlan p = plan_matmul(a, b);
  Tensor out = make_tracked(p.out, {a, b}, [a, b, p](Tensor::Impl& self) {
    const int64_t so = static_cast<int64_t>(p.M) * p.N;
    for (int64_t i = 0; i < p.nb; ++i) {
      MapC go(self.grad.data() + i * so, p.M, p.N);
      if (a.requires_grad()) {
        MapM ga(a.impl()->ensure_grad().data() + i * p.stride_a, p.M, p.K);
        MapC vb(b.data() + i * p.stride_b, p.K, p.N);
        ga.noalias() += go * vb.transpose();
      }
      if (b.requires_grad()) {
        MapM gb(b.impl()->ensure_grad().data() + i * p.stride_b, p.K, p.N);
        MapC va(a.data() + i * p.stride_a, p.M, p.K);
        gb.noalias() += va.transpose() * go;
      }
    }
  });
  const int64_t so = static_cast<int64_t>(p.M) * p.N;
  for (int64_t i = 0; i < p.nb; ++i) {
    MapC va(a.data() + i * p.stride_a, p.M, p.K);
    MapC vb(b.data() + i * p.stride_b, p.K, p.N);
    MapM vo(out.data() + i * so, p.M, p.N);
    vo.noalias() = va * vb;
  }
  return out;
}

namespace {

struct ConvPlan {
  int N, C, H, W, Co, kh, kw, stride, pad, Ho, Wo;
};

// Valid output-x range [x_lo, x_hi) for a kernel column offset, i.e. the
// ox for which ix = ox*stride - pad + kj stays inside the row.
inline void ox_range(const ConvPlan& p, int kj, int& x_lo, int& x_hi) {
  x_lo = 0;
  while (x_lo < p.Wo && x_lo * p.stride - p.pad + kj < 0) ++x_lo;
  x_hi = p.Wo;
  while (x_hi > x_lo && (x_hi - 1) * p.stride - p.pad + kj >= p.W) --x_hi;
}

void im2col(const Real* x, const ConvPlan& p, Real* col) {
  // col layout: [C*kh*kw, Ho*Wo]; interior spans copy as contiguous runs
  const int64_t plane = static_cast<int64_t>(p.H) * p.W;
  int64_t r = 0;
  for (int c = 0; c < p.C; ++c)
    for (int ki = 0; ki < p.kh; ++ki)
      for (int kj = 0; kj < p.kw; ++kj, ++r) {
        Real* dst0 = col + r * p.Ho * p.Wo;
        const Real* src0 = x + c * plane;
        int x_lo, x_hi;
        ox_range(p, kj, x_lo, x_hi);
        for (int oy = 0; oy < p.Ho; ++oy) {
          Real* dst = dst0 + static_cast<int64_t>(oy) * p.Wo;
          int iy = oy * p.stride - p.pad + ki;
          if (iy < 0 || iy >= p.H) {
            std::fill_n(dst, p.Wo, 0.0);
            continue;
          }
          const Real* src = src0 + static_cast<int64_t>(iy) * p.W;
          if (x_lo > 0) std::fill_n(dst, x_lo, 0.0);
          if (x_hi < p.Wo) std::fill_n(dst + x_hi, p.Wo - x_hi, 0.0);
          if (p.stride == 1) {
            std::copy_n(src + x_lo - p.pad + kj, x_hi - x_lo, dst + x_lo);
          } else {
            for (int ox = x_lo; ox < x_hi; ++ox)
              dst[ox] = src[ox * p.stride - p.pad + kj];
          }
        }
      }
}

void col2im_add(const Real* col, const ConvPlan& p, Real* gx) {
  const int64_t plane = static_cast<int64_t>(p.H) * p.W;
  int64_t r = 0;
  for (int c = 0; c < p.C; ++c)
    for (int ki = 0; ki < p.kh; ++ki)
      for (int kj = 0; kj < p.kw; ++kj, ++r) {
        const Real* src0 = col + r * p.Ho * p.Wo;
        Real* dst0 = gx + c * plane;
        int x_lo, x_hi;
        ox_range(p, kj, x_lo, x_hi);
        for (int oy = 0; oy < p.Ho; ++oy) {
          int iy = oy * p.stride - p.pad + ki;
          if (iy < 0 || iy >= p.H) continue;
          const Real* src = src0 + static_cast<int64_t>(oy) * p.Wo;
          Real* dst = dst0 + static_cast<int64_t>(iy) * p.W;
          if (p.stride == 1) {
            Real* d = dst + x_lo - p.pad + kj;
            for (int ox = x_lo; ox < x_hi; ++ox) d[ox - x_lo] += src[ox];
          } else {
            for (int ox = x_lo; ox < x_hi; ++ox)
              dst[ox * p.stride - p.pad + kj] += src[ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw std::invalid_argument("conv2d: expected 4-D input and weight");
  ConvPlan p;
  p.N = x.shape()[0];
  p.C = x.shape()[1];
  p.H = x.shape()[2];
  p.W = x.shape()[3];
  p.Co = w.shape()[0];
  p.kh = w.shape()[2];
  p.kw = w.shape()[3];
  p.stride = stride;
  p.pad = pad;
  if (w.shape()[1] != p.C)
    throw std::invalid_argument("conv2d: channel mismatch");
  p.Ho = (p.H + 2 * pad - p.kh) / stride + 1;
  p.Wo = (p.W + 2 * pad - p.kw) / stride + 1;
  if (p.Ho <= 0 || p.Wo <= 0)
    throw std::invalid_argument("conv2d: kernel larger than padded input");

  const int kdim = p.C * p.kh * p.kw;
  const int64_t ostep = static_cast<int64_t>(p.Co) * p.Ho * p.Wo;
  const int64_t istep = static_cast<int64_t>(p.C) * p.H * p.W;
  const bool has_bias = bias.defined();
  // a 1x1 stride-1 convolution is a plain GEMM on the channel dim
  const bool pointwise = (p.kh == 1 && p.kw == 1 && p.stride == 1 && p.pad == 0);

  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  Tensor out = make_tracked(
      {p.N, p.Co, p.Ho, p.Wo}, parents,
      [x, w, bias, p, kdim, ostep, istep, has_bias,
       pointwise](Tensor::Impl& self) {
        const int64_t hw = static_cast<int64_t>(p.Ho) * p.Wo;
        MapC wm(w.data(), p.Co, kdim);
        std::vector<Real> col, dcol;
        if (!pointwise) col.resize(static_cast<size_t>(kdim) * hw);
        for (int n = 0; n < p.N; ++n) {
          MapC go(self.grad.data() + n * ostep, p.Co, hw);
          const Real* colp = nullptr;
          if (pointwise) {
            colp = x.data() + n * istep;
          } else if (w.requires_grad() || x.requires_grad()) {
            im2col(x.data() + n * istep, p, col.data());
            colp = col.data();
          }
          if (w.requires_grad()) {
            MapM gw(w.impl()->ensure_grad().data(), p.Co, kdim);
            MapC cm(colp, kdim, hw);
            gw.noalias() += go * cm.transpose();
          }
          if (has_bias && bias.requires_grad()) {
            Real* gb = bias.impl()->ensure_grad().data();
            for (int c = 0; c < p.Co; ++c) gb[c] += go.row(c).sum();
          }
          if (x.requires_grad()) {
            if (pointwise) {
              MapM gx(x.impl()->ensure_grad().data() + n * istep, kdim, hw);
              gx.noalias() += wm.transpose() * go;
            } else {
              dcol.resize(col.size());
              MapM dc(dcol.data(), kdim, hw);
              dc.noalias() = wm.transpose() * go;
              col2im_add(dcol.data(), p,
                         x.impl()->ensure_grad().data() + n * istep);
            }
          }
        }
      });

  const int64_t hw = static_cast<int64_t>(p.Ho) * p.Wo;
  std::vector<Real> col;
  if (!pointwise) col.resize(static_cast<size_t>(kdim) * hw);
  MapC wm(w.data(), p.Co, kdim);
  for (int n = 0; n < p.N; ++n) {
    const Real* colp = x.data() + n * istep;
    if (!pointwise) {
      im2col(x.data() + n * istep, p, col.data());
      colp = col.data();
    }
    MapC cm(colp, kdim, hw);
    MapM om(out.data() + n * ostep, p.Co, hw);
    om.noalias() = wm * cm;
    if (has_bias) {
      const Real* b = bias.data();
      for (int c = 0; c < p.Co; ++c) om.row(c).array() += b[c];
    }
  }
  return out;
}

Tensor maxpool2x2(const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument("maxpool2x2: expected 4-D input");
  int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument("maxpool2x2: odd spatial dims");
  int Ho = H / 2, Wo = W / 2;
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(N) * C * Ho * Wo);
  Tensor out = make_tracked({N, C, Ho, Wo}, {x}, [x, argmax](Tensor::Impl& self) {
    if (!x.requires_grad()) return;
    Real* gx = x.impl()->ensure_grad().data();
    const Real* go = self.grad.data();
    for (size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += go[i];
  });
  const Real* px = x.data();
  Real* po = out.data();
  int64_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          int64_t i00 = base + static_cast<int64_t>(2 * oy) * W + 2 * ox;
          int64_t best = i00;
          Real bv = px[i00];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              int64_t k = i00 + static_cast<int64_t>(dy) * W + dx;
              if (px[k] > bv) {
                bv = px[k];
                best = k;
              }
            }
          po[oi] = bv;
          (*argmax)[oi] = best;
        }
    }
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.ndim() != 4)
    throw std::invalid_argument("upsample_nearest2x: expected 4-D input");
  int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int Ho = H * 2, Wo = W * 2;
  Tensor out =
      make_tracked({N, C, Ho, Wo}, {x}, [x, N, C, H, W, Wo](Tensor::Impl& self) {
        if (!x.requires_grad()) return;
        Real* gx = x.impl()->ensure_grad().data();
        const Real* go = self.grad.data();
        int64_t ii = 0;
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
          const Real* g = go + nc * (static_cast<int64_t>(H) * 2 * Wo);
          for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2, ++ii) {
              int64_t a = static_cast<int64_t>(2 * y) * Wo + 2 * x2;
              gx[ii] += g[a] + g[a + 1] + g[a + Wo] + g[a + Wo + 1];
            }
        }
      });
  const Real* px = x.data();
  Real* po = out.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const Real* src = px + nc * (static_cast<int64_t>(H) * W);
    Real* dst = po + nc * (static_cast<int64_t>(Ho) * Wo);
    for (int y = 0; y < H; ++y)
      for (int x2 = 0; x2 < W; ++x2) {
        Real v = src[static_cast<int64_t>(y) * W + x2];
        int64_t a = static_cast<int64_t>(2 * y) * Wo + 2 * x2;
        dst[a] = v;
        dst[a + 1] = v;
        dst[a + Wo] = v;
        dst[a + Wo + 1] = v;
      }
  }
  return out;
}

}  // namespace vonet

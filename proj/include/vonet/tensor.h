#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vonet {

using Real = double;
using Shape = std::vector<int>;

// Leaves doubles default-initialized on resize; ops overwrite every
// element they allocate, so the usual zero-fill is pure overhead.
template <class T>
struct UninitAlloc : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = UninitAlloc<U>;
  };
  using std::allocator<T>::allocator;
  template <class U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};
using RealVec = std::vector<Real, UninitAlloc<Real>>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Reverse-mode autodiff tensor. Values are dense row-major doubles.
// Ops build a graph while grad mode is on and at least one input
// requires grad; backward() walks it once in reverse topological order.
class Tensor {
 public:
  struct Impl {
    Shape shape;
    RealVec value;
    RealVec grad;  // allocated on demand, same layout as value
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(Impl&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    RealVec& ensure_grad();
  };

  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, Real v);
  static Tensor scalar(Real v);
  static Tensor from_vector(const Shape& shape, std::vector<Real> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const;  // negative axes count from the back
  int64_t size() const { return impl_->numel(); }

  Real* data() { return impl_->value.data(); }
  const Real* data() const { return impl_->value.data(); }
  RealVec& values() { return impl_->value; }
  const RealVec& values() const { return impl_->value; }
  Real item() const;

  Tensor& set_requires_grad(bool enable = true);
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const RealVec& grad() const { return impl_->grad; }
  RealVec& grad_ref() { return impl_->ensure_grad(); }
  void zero_grad();

  // Backpropagates from this scalar tensor.
  void backward() const;

  Impl* impl() const { return impl_.get(); }

  static Tensor make(Shape shape);  // uninitialized storage

 private:
  std::shared_ptr<Impl> impl_;
};

// Grad-mode switch (thread local). Inference paths use NoGradGuard to
// skip graph construction entirely.
bool grad_enabled();
void set_grad_enabled(bool enabled);  // worker threads inherit the caller's mode
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- elementwise (NumPy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, Real b);
Tensor mul(const Tensor& a, Real b);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor clamp(const Tensor& a, Real lo, Real hi);

Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// Fused normalizations (population variance, eps inside the sqrt).
// layer_norm_op: x [..., D], gamma/beta [D].
// instance_norm_op: x [N,C,H,W], gamma/beta broadcastable [1,C,1,1].
Tensor layer_norm_op(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     Real eps);
Tensor instance_norm_op(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, Real eps);

// ---- reductions ----
Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdims = false);
Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);  // one dim may be -1
Tensor permute(const Tensor& a, const std::vector<int>& dims);
Tensor transpose_last2(const Tensor& a);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor detach(const Tensor& a);

// ---- linear algebra / conv ----
// matmul supports [*, M, K] x [*, K, N] with broadcastable batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [N, C, H, W], w: [Co, C, kh, kw], optional bias [Co].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad);
Tensor maxpool2x2(const Tensor& x);
Tensor upsample_nearest2x(const Tensor& x);

// ---- indexing ----
// weight: [V, D]; out: [idx_shape..., D].
Tensor embedding(const Tensor& weight, const std::vector<int>& idx,
                 const Shape& idx_shape);
// x: [..., V]; idx flat over leading dims; out: [...].
Tensor gather_last(const Tensor& x, const std::vector<int>& idx);

// ---- operators ----
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, Real b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, Real b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, Real b) { return mul(a, b); }
inline Tensor operator*(Real a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace vonet

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pfx {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded the producing op
};

}  // namespace detail

// Dense row-major f64 tensor. Handles share storage; clone() makes a deep,
// detached copy. Scalars are rank-0 (empty shape, numel 1).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const;
  int64_t dim(int64_t i) const;  // negative indices count from the back
  int64_t numel() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  double* data();
  const double* data() const;
  std::span<const double> values() const;
  double item() const;  // scalar tensors only

  bool has_grad() const;
  std::span<const double> grad() const;  // throws if no grad buffer
  double* grad_data();                   // allocates zeros on first use
  void zero_grad();                      // zeroes in place if allocated
  void drop_grad();                      // releases the buffer

  Tensor clone() const;  // deep copy, no grad, no tape link
  bool same_storage(const Tensor& other) const {
    return impl_ == other.impl_;
  }

  const Tape* producer() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
  friend struct OpRecorder;
};

// Ordered record of primitive ops for one reverse pass. Ops see the tape via
// Tape::Scope; tensors created while a scope is active and depending on a
// requires_grad input get their backward rule recorded in creation order,
// which is already topological.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  // Seeds d(loss)/d(loss)=1 and runs recorded ops in reverse. The loss must
  // be a scalar produced on this tape. Calling twice without reset() throws.
  void backward(const Tensor& loss);
  void reset();

  size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;

  friend struct OpRecorder;
};

// ---- Primitive ops ----------------------------------------------------
// Every op validates shapes, computes forward deterministically, and when a
// tape is active and some input requires grad, records its reverse rule.
// Backward rules never write into a tensor whose requires_grad is false.

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, double factor);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [R,C] + [C]

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]

Tensor softmax(const Tensor& x, int64_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);  // normalizes the last axis
Tensor gelu(const Tensor& x);
Tensor tanh_op(const Tensor& x);

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end);
Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end);

Tensor sum(const Tensor& x);  // -> scalar

// Mean negative log-likelihood over positions with mask!=0.
// logits [T,V], targets[t] in [0,V), mask selects at least one position.
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask);

namespace detail {
// C = alpha * op(A) op(B) + beta * C, row-major. Backed by CBLAS when built
// with PFX_USE_CBLAS, otherwise a portable blocked kernel.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b,
          int64_t ldb, double beta, double* c, int64_t ldc);
}  // namespace detail

}  // namespace pfx

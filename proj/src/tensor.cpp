#include "pfx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

#ifdef PFX_USE_CBLAS
#include <cblas.h>
#endif

namespace pfx {

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor dims must be positive, got " +
                                  shape_str(shape));
    }
  }
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a,
                              const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  check_shape(shape);
  if (numel_of(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("from_data: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(impl_->shape.size()); }

int64_t Tensor::dim(int64_t i) const {
  int64_t r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw std::out_of_range("dim index out of range");
  return impl_->shape[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return numel_of(impl_->shape); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }

std::span<const double> Tensor::values() const {
  return {impl_->data.data(), impl_->data.size()};
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item(): tensor has " +
                                std::to_string(numel()) + " elements");
  }
  return impl_->data[0];
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no gradient buffer");
  return {impl_->grad.data(), impl_->grad.size()};
}

double* Tensor::grad_data() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad.data();
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

void Tensor::drop_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

const Tape* Tensor::producer() const { return impl_ ? impl_->producer : nullptr; }

// ---- Tape ---------------------------------------------------------------

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: empty tensor");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar");
  }
  if (loss.producer() != this) {
    throw std::runtime_error("backward: loss was not produced on this tape");
  }
  if (backward_done_) {
    throw std::runtime_error("backward called twice without reset");
  }
  backward_done_ = true;
  const_cast<Tensor&>(loss).grad_data()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward_fn();
  }
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

// ---- Op recording helpers ------------------------------------------------

struct OpRecorder {
  // True when the current op must record a backward rule.
  static bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  static void mark_output(Tensor& out) {
    out.impl_->requires_grad = true;
    out.impl_->producer = g_active_tape;
  }

  static void record(std::function<void()> fn) {
    g_active_tape->nodes_.push_back({std::move(fn)});
  }

  // Output grad, or nullptr when no grad ever reached this tensor (its
  // consumers were not on the loss path).
  static const double* out_grad(const Tensor& t) {
    return t.impl_->grad.empty() ? nullptr : t.impl_->grad.data();
  }

  static double* accum_target(const Tensor& t) {
    auto& impl = *t.impl_;
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
    return impl.grad.data();
  }
};

namespace {

// Accumulate into x.grad only when x participates in differentiation.
bool wants_grad(const Tensor& x) { return x.requires_grad(); }

}  // namespace

// ---- gemm ----------------------------------------------------------------

namespace detail {

#ifdef PFX_USE_CBLAS
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b,
          int64_t ldb, double beta, double* c, int64_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}
#else
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b,
          int64_t ldb, double beta, double* c, int64_t ldc) {
  auto at = [&](int64_t i, int64_t p) {
    return trans_a ? a[p * lda + i] : a[i * lda + p];
  };
  auto bt = [&](int64_t p, int64_t j) {
    return trans_b ? b[j * ldb + p] : b[p * ldb + j];
  };
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * ldc;
    if (beta == 0.0) {
      std::fill(ci, ci + n, 0.0);
    } else if (beta != 1.0) {
      for (int64_t j = 0; j < n; ++j) ci[j] *= beta;
    }
    for (int64_t p = 0; p < k; ++p) {
      const double av = alpha * at(i, p);
      if (!trans_b) {
        const double* bp = b + p * ldb;
        for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      } else {
        for (int64_t j = 0; j < n; ++j) ci[j] += av * bt(p, j);
      }
    }
  }
}
#endif

}  // namespace detail

// ---- Elementwise ops -------------------------------------------------------

namespace {

Tensor binary_same_shape(const char* name, const Tensor& a, const Tensor& b,
                         double (*fwd)(double, double), int mode) {
  if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  if (OpRecorder::tracing({&a, &b})) {
    OpRecorder::mark_output(out);
    Tensor ca = a, cb = b, co = out;
    OpRecorder::record([ca, cb, co, mode, n]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g) return;
      if (wants_grad(ca)) {
        double* da = OpRecorder::accum_target(ca);
        const double* pb2 = cb.data();
        for (int64_t i = 0; i < n; ++i) {
          switch (mode) {
            case 0: da[i] += g[i]; break;            // add
            case 1: da[i] += g[i]; break;            // sub (lhs)
            case 2: da[i] += g[i] * pb2[i]; break;   // mul
          }
        }
      }
      if (wants_grad(cb)) {
        double* db = OpRecorder::accum_target(cb);
        const double* pa2 = ca.data();
        for (int64_t i = 0; i < n; ++i) {
          switch (mode) {
            case 0: db[i] += g[i]; break;
            case 1: db[i] -= g[i]; break;
            case 2: db[i] += g[i] * pa2[i]; break;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape("add", a, b,
                           [](double x, double y) { return x + y; }, 0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape("sub", a, b,
                           [](double x, double y) { return x - y; }, 1);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape("mul", a, b,
                           [](double x, double y) { return x * y; }, 2);
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * factor;
  if (OpRecorder::tracing({&a})) {
    OpRecorder::mark_output(out);
    Tensor ca = a, co = out;
    OpRecorder::record([ca, co, factor, n]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(ca)) return;
      double* da = OpRecorder::accum_target(ca);
      for (int64_t i = 0; i < n; ++i) da[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
    shape_error("add_bias", x.shape(), bias.shape());
  }
  const int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * cols;
    double* orow = po + r * cols;
    for (int64_t c = 0; c < cols; ++c) orow[c] = xr[c] + pb[c];
  }
  if (OpRecorder::tracing({&x, &bias})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, cb = bias, co = out;
    OpRecorder::record([cx, cb, co, rows, cols]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g) return;
      if (wants_grad(cx)) {
        double* dx = OpRecorder::accum_target(cx);
        for (int64_t i = 0; i < rows * cols; ++i) dx[i] += g[i];
      }
      if (wants_grad(cb)) {
        double* db = OpRecorder::accum_target(cb);
        for (int64_t r = 0; r < rows; ++r) {
          const double* gr = g + r * cols;
          for (int64_t c = 0; c < cols; ++c) db[c] += gr[c];
        }
      }
    });
  }
  return out;
}

// ---- Matrix products -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0,
               out.data(), n);
  if (OpRecorder::tracing({&a, &b})) {
    OpRecorder::mark_output(out);
    Tensor ca = a, cb = b, co = out;
    OpRecorder::record([ca, cb, co, m, k, n]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g) return;
      if (wants_grad(ca)) {
        // dA += dC * B^T
        detail::gemm(false, true, m, k, n, 1.0, g, n, cb.data(), n, 1.0,
                     OpRecorder::accum_target(ca), k);
      }
      if (wants_grad(cb)) {
        // dB += A^T * dC
        detail::gemm(true, false, k, n, m, 1.0, ca.data(), k, g, n, 1.0,
                     OpRecorder::accum_target(cb), n);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    shape_error("matmul_nt", a.shape(), b.shape());
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm(false, true, m, n, k, 1.0, a.data(), k, b.data(), k, 0.0,
               out.data(), n);
  if (OpRecorder::tracing({&a, &b})) {
    OpRecorder::mark_output(out);
    Tensor ca = a, cb = b, co = out;
    OpRecorder::record([ca, cb, co, m, k, n]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g) return;
      if (wants_grad(ca)) {
        // dA += dC * B
        detail::gemm(false, false, m, k, n, 1.0, g, n, cb.data(), k, 1.0,
                     OpRecorder::accum_target(ca), k);
      }
      if (wants_grad(cb)) {
        // dB += dC^T * A
        detail::gemm(true, false, n, k, m, 1.0, g, n, ca.data(), k, 1.0,
                     OpRecorder::accum_target(cb), k);
      }
    });
  }
  return out;
}

// ---- Softmax ---------------------------------------------------------------

Tensor softmax(const Tensor& x, int64_t axis) {
  const int64_t r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw std::invalid_argument("softmax: axis out of range for " +
                                shape_str(x.shape()));
  }
  const int64_t len = x.shape()[static_cast<size_t>(axis)];
  int64_t inner = 1;
  for (int64_t i = axis + 1; i < r; ++i) inner *= x.shape()[static_cast<size_t>(i)];
  const int64_t outer = x.numel() / (len * inner);

  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < len; ++i) mx = std::max(mx, px[base + i * inner]);
      double total = 0.0;
      for (int64_t i = 0; i < len; ++i) {
        const double e = std::exp(px[base + i * inner] - mx);
        po[base + i * inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (int64_t i = 0; i < len; ++i) po[base + i * inner] *= inv;
    }
  }
  if (OpRecorder::tracing({&x})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, co = out;
    OpRecorder::record([cx, co, outer, len, inner]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(cx)) return;
      double* dx = OpRecorder::accum_target(cx);
      const double* y = co.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * len * inner + in;
          double dot = 0.0;
          for (int64_t i = 0; i < len; ++i) {
            dot += g[base + i * inner] * y[base + i * inner];
          }
          for (int64_t i = 0; i < len; ++i) {
            const int64_t idx = base + i * inner;
            dx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---- Layer norm -------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const int64_t cols = x.dim(-1);
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != cols ||
      bias.dim(0) != cols) {
    shape_error("layer_norm", x.shape(), gain.shape());
  }
  const int64_t rows = x.numel() / cols;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  std::vector<double> means(static_cast<size_t>(rows));
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * cols;
    double mean = 0.0;
    for (int64_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double istd = 1.0 / std::sqrt(var + eps);
    means[static_cast<size_t>(r)] = mean;
    inv_std[static_cast<size_t>(r)] = istd;
    double* orow = po + r * cols;
    for (int64_t c = 0; c < cols; ++c) {
      orow[c] = (xr[c] - mean) * istd * pg[c] + pb[c];
    }
  }
  if (OpRecorder::tracing({&x, &gain, &bias})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, cg = gain, cb = bias, co = out;
    OpRecorder::record(
        [cx, cg, cb, co, rows, cols, means, inv_std]() mutable {
          const double* g = OpRecorder::out_grad(co);
          if (!g) return;
          const double* px2 = cx.data();
          const double* pg2 = cg.data();
          double* dx = wants_grad(cx) ? OpRecorder::accum_target(cx) : nullptr;
          double* dg = wants_grad(cg) ? OpRecorder::accum_target(cg) : nullptr;
          double* db = wants_grad(cb) ? OpRecorder::accum_target(cb) : nullptr;
          for (int64_t r = 0; r < rows; ++r) {
            const double* xr = px2 + r * cols;
            const double* gr = g + r * cols;
            const double mean = means[static_cast<size_t>(r)];
            const double istd = inv_std[static_cast<size_t>(r)];
            if (dg || db) {
              for (int64_t c = 0; c < cols; ++c) {
                const double xhat = (xr[c] - mean) * istd;
                if (dg) dg[c] += gr[c] * xhat;
                if (db) db[c] += gr[c];
              }
            }
            if (dx) {
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (int64_t c = 0; c < cols; ++c) {
                const double xhat = (xr[c] - mean) * istd;
                const double dxhat = gr[c] * pg2[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
              }
              const double inv_cols = 1.0 / static_cast<double>(cols);
              double* dxr = dx + r * cols;
              for (int64_t c = 0; c < cols; ++c) {
                const double xhat = (xr[c] - mean) * istd;
                const double dxhat = gr[c] * pg2[c];
                dxr[c] += istd * (dxhat - inv_cols * sum_dxhat -
                                  xhat * inv_cols * sum_dxhat_xhat);
              }
            }
          }
        });
  }
  return out;
}

// ---- Activations -------------------------------------------------------------

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * kInvSqrt2));
  }
  if (OpRecorder::tracing({&x})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, co = out;
    OpRecorder::record([cx, co, n]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(cx)) return;
      double* dx = OpRecorder::accum_target(cx);
      const double* px2 = cx.data();
      for (int64_t i = 0; i < n; ++i) {
        const double v = px2[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        dx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor tanh_op(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
  if (OpRecorder::tracing({&x})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, co = out;
    OpRecorder::record([cx, co, n]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(cx)) return;
      double* dx = OpRecorder::accum_target(cx);
      const double* y = co.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }
  return out;
}

// ---- Gather / concat / slice ---------------------------------------------------

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids) {
  if (table.rank() != 2) {
    throw std::invalid_argument("embedding_lookup: table must be 2-d");
  }
  if (ids.empty()) {
    throw std::invalid_argument("embedding_lookup: empty id list");
  }
  const int64_t vocab = table.dim(0), width = table.dim(1);
  for (int32_t id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside table of " + std::to_string(vocab));
    }
  }
  const int64_t rows = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({rows, width});
  const double* pt = table.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(po + r * width, pt + static_cast<int64_t>(ids[r]) * width,
                sizeof(double) * static_cast<size_t>(width));
  }
  if (OpRecorder::tracing({&table})) {
    OpRecorder::mark_output(out);
    Tensor ct = table, co = out;
    std::vector<int32_t> idv(ids.begin(), ids.end());
    OpRecorder::record([ct, co, idv, rows, width]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(ct)) return;
      double* dt = OpRecorder::accum_target(ct);
      for (int64_t r = 0; r < rows; ++r) {
        double* drow = dt + static_cast<int64_t>(idv[static_cast<size_t>(r)]) * width;
        const double* gr = g + r * width;
        for (int64_t c = 0; c < width; ++c) drow[c] += gr[c];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int64_t cols = parts.front().dim(1);
  int64_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) {
      shape_error("concat_rows", parts.front().shape(), p.shape());
    }
    rows += p.dim(0);
  }
  Tensor out = Tensor::zeros({rows, cols});
  double* po = out.data();
  int64_t at = 0;
  for (const Tensor& p : parts) {
    std::memcpy(po + at * cols, p.data(),
                sizeof(double) * static_cast<size_t>(p.numel()));
    at += p.dim(0);
  }
  bool trace = false;
  for (const Tensor& p : parts) {
    if (OpRecorder::tracing({&p})) trace = true;
  }
  if (trace) {
    OpRecorder::mark_output(out);
    Tensor co = out;
    std::vector<Tensor> cp = parts;
    OpRecorder::record([cp, co, cols]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g) return;
      int64_t at2 = 0;
      for (Tensor& p : cp) {
        const int64_t r = p.dim(0);
        if (wants_grad(p)) {
          double* dp = OpRecorder::accum_target(p);
          const double* gp = g + at2 * cols;
          for (int64_t i = 0; i < r * cols; ++i) dp[i] += gp[i];
        }
        at2 += r;
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int64_t rows = parts.front().dim(0);
  int64_t cols = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      shape_error("concat_cols", parts.front().shape(), p.shape());
    }
    cols += p.dim(1);
  }
  Tensor out = Tensor::zeros({rows, cols});
  double* po = out.data();
  int64_t at = 0;
  for (const Tensor& p : parts) {
    const int64_t pc = p.dim(1);
    const double* pp = p.data();
    for (int64_t r = 0; r < rows; ++r) {
      std::memcpy(po + r * cols + at, pp + r * pc,
                  sizeof(double) * static_cast<size_t>(pc));
    }
    at += pc;
  }
  bool trace = false;
  for (const Tensor& p : parts) {
    if (OpRecorder::tracing({&p})) trace = true;
  }
  if (trace) {
    OpRecorder::mark_output(out);
    Tensor co = out;
    std::vector<Tensor> cp = parts;
    OpRecorder::record([cp, co, rows, cols]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g) return;
      int64_t at2 = 0;
      for (Tensor& p : cp) {
        const int64_t pc = p.dim(1);
        if (wants_grad(p)) {
          double* dp = OpRecorder::accum_target(p);
          for (int64_t r = 0; r < rows; ++r) {
            const double* gr = g + r * cols + at2;
            double* dr = dp + r * pc;
            for (int64_t c = 0; c < pc; ++c) dr[c] += gr[c];
          }
        }
        at2 += pc;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end) {
  if (x.rank() != 2) throw std::invalid_argument("slice_rows: need 2-d input");
  if (begin < 0 || end > x.dim(0) || begin >= end) {
    throw std::out_of_range("slice_rows: [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") of " +
                            shape_str(x.shape()));
  }
  const int64_t cols = x.dim(1), rows = end - begin;
  Tensor out = Tensor::zeros({rows, cols});
  std::memcpy(out.data(), x.data() + begin * cols,
              sizeof(double) * static_cast<size_t>(rows * cols));
  if (OpRecorder::tracing({&x})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, co = out;
    OpRecorder::record([cx, co, begin, rows, cols]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(cx)) return;
      double* dx = OpRecorder::accum_target(cx) + begin * cols;
      for (int64_t i = 0; i < rows * cols; ++i) dx[i] += g[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end) {
  if (x.rank() != 2) throw std::invalid_argument("slice_cols: need 2-d input");
  if (begin < 0 || end > x.dim(1) || begin >= end) {
    throw std::out_of_range("slice_cols: [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") of " +
                            shape_str(x.shape()));
  }
  const int64_t rows = x.dim(0), in_cols = x.dim(1), cols = end - begin;
  Tensor out = Tensor::zeros({rows, cols});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(po + r * cols, px + r * in_cols + begin,
                sizeof(double) * static_cast<size_t>(cols));
  }
  if (OpRecorder::tracing({&x})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, co = out;
    OpRecorder::record([cx, co, begin, rows, in_cols, cols]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(cx)) return;
      double* dx = OpRecorder::accum_target(cx);
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = g + r * cols;
        double* dr = dx + r * in_cols + begin;
        for (int64_t c = 0; c < cols; ++c) dr[c] += gr[c];
      }
    });
  }
  return out;
}

// ---- Reductions -----------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  const double* px = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) total += px[i];
  Tensor out = Tensor::scalar(total);
  if (OpRecorder::tracing({&x})) {
    OpRecorder::mark_output(out);
    Tensor cx = x, co = out;
    OpRecorder::record([cx, co, n]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(cx)) return;
      double* dx = OpRecorder::accum_target(cx);
      for (int64_t i = 0; i < n; ++i) dx[i] += g[0];
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("cross_entropy: logits must be [T,V]");
  }
  const int64_t t_len = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t_len ||
      static_cast<int64_t>(mask.size()) != t_len) {
    throw std::invalid_argument("cross_entropy: targets/mask length mismatch");
  }
  int64_t active = 0;
  for (int64_t i = 0; i < t_len; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    ++active;
    const int32_t tgt = targets[static_cast<size_t>(i)];
    if (tgt < 0 || tgt >= vocab) {
      throw std::out_of_range("cross_entropy: target id " +
                              std::to_string(tgt) + " outside vocab");
    }
  }
  if (active == 0) {
    throw std::invalid_argument("cross_entropy: empty mask");
  }
  const double* pl = logits.data();
  double loss = 0.0;
  for (int64_t i = 0; i < t_len; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const double* row = pl + i * vocab;
    double mx = row[0];
    for (int64_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    double total = 0.0;
    for (int64_t v = 0; v < vocab; ++v) total += std::exp(row[v] - mx);
    const double lse = mx + std::log(total);
    loss += lse - row[targets[static_cast<size_t>(i)]];
  }
  loss /= static_cast<double>(active);
  Tensor out = Tensor::scalar(loss);
  if (OpRecorder::tracing({&logits})) {
    OpRecorder::mark_output(out);
    Tensor cl = logits, co = out;
    std::vector<int32_t> tv(targets.begin(), targets.end());
    std::vector<uint8_t> mv(mask.begin(), mask.end());
    OpRecorder::record([cl, co, tv, mv, t_len, vocab, active]() mutable {
      const double* g = OpRecorder::out_grad(co);
      if (!g || !wants_grad(cl)) return;
      double* dl = OpRecorder::accum_target(cl);
      const double* pl2 = cl.data();
      const double w = g[0] / static_cast<double>(active);
      for (int64_t i = 0; i < t_len; ++i) {
        if (!mv[static_cast<size_t>(i)]) continue;
        const double* row = pl2 + i * vocab;
        double* drow = dl + i * vocab;
        double mx = row[0];
        for (int64_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
        double total = 0.0;
        for (int64_t v = 0; v < vocab; ++v) total += std::exp(row[v] - mx);
        const double inv = 1.0 / total;
        for (int64_t v = 0; v < vocab; ++v) {
          drow[v] += w * std::exp(row[v] - mx) * inv;
        }
        drow[tv[static_cast<size_t>(i)]] -= w;
      }
    });
  }
  return out;
}

}  // namespace pfx

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace resotok {

enum class Dtype { F32, F64 };

struct TensorImpl;

// Dense row-major tensor participating in reverse-mode differentiation.
// Handles are cheap to copy; the payload is shared. Data is held in double
// precision; F32 tensors round every stored value to float, so both dtypes
// run through one build.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, Dtype dtype = Dtype::F32,
                      bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value,
                     Dtype dtype = Dtype::F32, bool requires_grad = false);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> values,
                          Dtype dtype = Dtype::F32, bool requires_grad = false);
  static Tensor scalar(double value, Dtype dtype = Dtype::F32);
  // Plain normal draws.
  static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng,
                      double stddev = 1.0, Dtype dtype = Dtype::F32,
                      bool requires_grad = false);
  // Normal with resampling outside +/- 2 stddev.
  static Tensor trunc_normal(std::vector<int64_t> shape, std::mt19937_64& rng,
                             double stddev, Dtype dtype = Dtype::F32,
                             bool requires_grad = false);
  static Tensor uniform(std::vector<int64_t> shape, std::mt19937_64& rng,
                        double lo, double hi, Dtype dtype = Dtype::F32,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int ndim() const;
  int64_t dim(int i) const;
  int64_t numel() const;
  Dtype dtype() const;
  bool requires_grad() const;
  void set_requires_grad(bool flag);

  std::vector<double>& raw();
  const std::vector<double>& raw() const;
  double value() const;  // scalar tensors only
  double at(const std::vector<int64_t>& index) const;

  bool has_grad() const;
  std::vector<double>& grad_raw();  // allocates zeros on first access
  Tensor grad() const;              // detached copy of the gradient
  void zero_grad();

  // Detached deep copy (no tape, keeps requires_grad off).
  Tensor detach_copy() const;

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct GraphNode {
  std::vector<Tensor> parents;
  std::function<void(TensorImpl&)> backward;
};

struct TensorImpl {
  std::vector<int64_t> shape;
  Dtype dtype = Dtype::F32;
  bool requires_grad = false;
  std::vector<double> data;
  std::unique_ptr<std::vector<double>> grad;
  std::shared_ptr<GraphNode> node;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  std::vector<double>& grad_ref();
};

// Scoped tape switch; ops built inside record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Running count of multiply-accumulates executed by matmul/conv2d since the
// last reset. Feeds the instrumented-forward check of the analytic counters.
void reset_mac_count();
uint64_t mac_count();

// ---- core ops ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
// tanh-form approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps);
// Normalization only, over the trailing `norm_size` entries of each row.
Tensor layernorm_plain(const Tensor& x, int64_t norm_size, double eps);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, std::vector<int64_t> shape);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t length);

// Gathers rows of a 2-D table; backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& indices);
// picks[i] = x[i, index[i]] for a 2-D x.
Tensor gather_elems(const Tensor& x, const std::vector<int64_t>& indices);

Tensor detach(const Tensor& x);
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training);

// Valid-padding convolution, x [C,H,W], w [O,C,kh,kw], b [O].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

// Mean cross-entropy of logits [n, v] against integer targets.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);

// ---- autodiff ------------------------------------------------------------

// Accumulates gradients of a scalar loss into every reachable requires_grad
// leaf, then frees the tape it walked.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |cd|, 1e-8). f must be deterministic.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x0, double eps = 1e-5);

// ---- named parameters ------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Ordered parameter registry; registration order fixes checkpoint layout.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;
  const std::vector<Parameter>& items() const { return items_; }
  std::vector<Parameter>& items() { return items_; }
  void zero_grads();

 private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Same ratio-style comparison as grad_check, applied to every coordinate of
// every parameter against the analytic grads left by `backward`.
double grad_check_params(const std::function<Tensor()>& loss_fn,
                         ParamStore& params, double eps = 1e-5);

}  // namespace resotok

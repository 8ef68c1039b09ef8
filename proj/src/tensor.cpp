#include "resotok/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace resotok {

namespace {

thread_local int no_grad_depth = 0;
std::atomic<uint64_t> g_mac_count{0};

int64_t numel_of(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] void contract_fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check_shape_positive(const std::vector<int64_t>& shape) {
  for (int64_t d : shape) {
    if (d <= 0) contract_fail("tensor extents must be positive, got " + shape_str(shape));
  }
}

inline double store_val(Dtype dt, double v) {
  return dt == Dtype::F32 ? static_cast<double>(static_cast<float>(v)) : v;
}

Dtype promote(Dtype a, Dtype b) {
  return (a == Dtype::F64 || b == Dtype::F64) ? Dtype::F64 : Dtype::F32;
}

std::vector<int64_t> broadcast_shapes(const std::vector<int64_t>& a,
                                      const std::vector<int64_t>& b,
                                      const char* op) {
  const size_t n = std::max(a.size(), b.size());
  std::vector<int64_t> out(n);
  for (size_t i = 0; i < n; ++i) {
    const int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      contract_fail(std::string(op) + ": shapes " + shape_str(a) + " and " +
                    shape_str(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides, with zero stride on broadcast (size-1) axes after
// right-alignment against an output rank.
std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& shape,
                                       size_t out_rank) {
  std::vector<int64_t> st(out_rank, 0);
  int64_t acc = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    const size_t j = shape.size() - 1 - i;
    st[out_rank - 1 - i] = shape[j] == 1 ? 0 : acc;
    acc *= shape[j];
  }
  return st;
}

struct Odometer {
  explicit Odometer(const std::vector<int64_t>& shape)
      : shape_(shape), coord_(shape.size(), 0) {}
  // Advances to the next coordinate; returns false after the last one.
  bool next() {
    for (size_t i = coord_.size(); i-- > 0;) {
      if (++coord_[i] < shape_[i]) return true;
      coord_[i] = 0;
    }
    return false;
  }
  int64_t offset(const std::vector<int64_t>& strides) const {
    int64_t off = 0;
    for (size_t i = 0; i < coord_.size(); ++i) off += coord_[i] * strides[i];
    return off;
  }
  const std::vector<int64_t> shape_;
  std::vector<int64_t> coord_;
};

int env_thread_limit() {
  static const int limit = [] {
    const char* s = std::getenv("RESOTOK_THREADS");
    if (!s) return 1;
    const long v = std::strtol(s, nullptr, 10);
    if (v < 1) return 1;
    return static_cast<int>(std::min<long>(v, 64));
  }();
  return limit;
}

// Splits [0, total) into contiguous chunks, one worker thread each. Each
// index is written by exactly one worker, keeping results thread-agnostic.
void parallel_for(int64_t total, const std::function<void(int64_t, int64_t)>& body) {
  const int threads = env_thread_limit();
  if (threads <= 1 || total < 4096) {
    body(0, total);
    return;
  }
  const int n = static_cast<int>(std::min<int64_t>(threads, total));
  std::vector<std::thread> pool;
  pool.reserve(n);
  const int64_t chunk = (total + n - 1) / n;
  for (int t = 0; t < n; ++t) {
    const int64_t lo = t * chunk;
    const int64_t hi = std::min<int64_t>(total, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::vector<double>& TensorImpl::grad_ref() {
  if (!grad) grad = std::make_unique<std::vector<double>>(data.size(), 0.0);
  return *grad;
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

void reset_mac_count() { g_mac_count.store(0); }
uint64_t mac_count() { return g_mac_count.load(); }

// ---- Tensor basics ---------------------------------------------------------

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dtype, bool requires_grad) {
  check_shape_positive(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dtype,
                    bool requires_grad) {
  Tensor t = zeros(std::move(shape), dtype, requires_grad);
  const double v = store_val(dtype, value);
  std::fill(t.raw().begin(), t.raw().end(), v);
  return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> values,
                         Dtype dtype, bool requires_grad) {
  check_shape_positive(shape);
  if (numel_of(shape) != static_cast<int64_t>(values.size())) {
    contract_fail("from_data: shape " + shape_str(shape) + " wants " +
                  std::to_string(numel_of(shape)) + " values, got " +
                  std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  impl->requires_grad = requires_grad;
  if (dtype == Dtype::F32) {
    for (double& v : values) v = store_val(Dtype::F32, v);
  }
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, Dtype dtype) {
  return from_data({1}, {value}, dtype);
}

Tensor Tensor::randn(std::vector<int64_t> shape, std::mt19937_64& rng,
                     double stddev, Dtype dtype, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dtype, requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.raw()) v = store_val(dtype, dist(rng));
  return t;
}

Tensor Tensor::trunc_normal(std::vector<int64_t> shape, std::mt19937_64& rng,
                            double stddev, Dtype dtype, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dtype, requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.raw()) {
    double d = dist(rng);
    while (std::abs(d) > 2.0 * stddev) d = dist(rng);
    v = store_val(dtype, d);
  }
  return t;
}

Tensor Tensor::uniform(std::vector<int64_t> shape, std::mt19937_64& rng,
                       double lo, double hi, Dtype dtype, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dtype, requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.raw()) v = store_val(dtype, dist(rng));
  return t;
}

const std::vector<int64_t>& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
int64_t Tensor::dim(int i) const {
  if (i < 0) i += ndim();
  return impl_->shape[static_cast<size_t>(i)];
}
int64_t Tensor::numel() const { return impl_->numel(); }
Dtype Tensor::dtype() const { return impl_->dtype; }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }

std::vector<double>& Tensor::raw() { return impl_->data; }
const std::vector<double>& Tensor::raw() const { return impl_->data; }

double Tensor::value() const {
  if (numel() != 1) contract_fail("value(): tensor is not scalar, shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(const std::vector<int64_t>& index) const {
  if (index.size() != impl_->shape.size()) contract_fail("at(): rank mismatch");
  int64_t off = 0;
  int64_t stride = 1;
  for (size_t i = impl_->shape.size(); i-- > 0;) {
    if (index[i] < 0 || index[i] >= impl_->shape[i]) contract_fail("at(): index out of range");
    off += index[i] * stride;
    stride *= impl_->shape[i];
  }
  return impl_->data[static_cast<size_t>(off)];
}

bool Tensor::has_grad() const { return impl_->grad != nullptr; }
std::vector<double>& Tensor::grad_raw() { return impl_->grad_ref(); }

Tensor Tensor::grad() const {
  Tensor g = zeros(impl_->shape, Dtype::F64);
  if (impl_->grad) g.raw() = *impl_->grad;
  return g;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::detach_copy() const {
  Tensor t = zeros(impl_->shape, impl_->dtype);
  t.raw() = impl_->data;
  return t;
}

// ---- op construction helpers ----------------------------------------------

namespace {

bool wants_grad(const Tensor& t) { return grad_enabled() && t.requires_grad(); }

Tensor make_out(std::vector<int64_t> shape, Dtype dtype,
                std::vector<Tensor> parents,
                std::function<void(TensorImpl&)> backward_fn) {
  bool rg = false;
  if (grad_enabled()) {
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
  }
  Tensor out = Tensor::zeros(std::move(shape), dtype, rg);
  if (rg) {
    out.impl()->node = std::make_shared<GraphNode>();
    out.impl()->node->parents = std::move(parents);
    out.impl()->node->backward = std::move(backward_fn);
  }
  return out;
}

void round_store(Tensor& t) {
  if (t.dtype() != Dtype::F32) return;
  for (double& v : t.raw()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

// ---- elementwise binary ops -------------------------------------------------

namespace {

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const auto out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  const size_t rank = out_shape.size();
  const auto sa = broadcast_strides(a.shape(), rank);
  const auto sb = broadcast_strides(b.shape(), rank);
  const Dtype dt = promote(a.dtype(), b.dtype());

  Tensor out = make_out(out_shape, dt, {a, b}, [op, sa, sb](TensorImpl& o) {
    Tensor pa = o.node->parents[0];
    Tensor pb = o.node->parents[1];
    const std::vector<double>& g = *o.grad;
    Odometer od(o.shape);
    int64_t i = 0;
    do {
      const int64_t ia = od.offset(sa);
      const int64_t ib = od.offset(sb);
      const double go = g[static_cast<size_t>(i)];
      const double av = pa.raw()[static_cast<size_t>(ia)];
      const double bv = pb.raw()[static_cast<size_t>(ib)];
      if (pa.requires_grad()) {
        double d = go;
        if (op == BinOp::Mul) d = go * bv;
        else if (op == BinOp::Div) d = go / bv;
        pa.grad_raw()[static_cast<size_t>(ia)] += d;
      }
      if (pb.requires_grad()) {
        double d = go;
        if (op == BinOp::Sub) d = -go;
        else if (op == BinOp::Mul) d = go * av;
        else if (op == BinOp::Div) d = -go * av / (bv * bv);
        pb.grad_raw()[static_cast<size_t>(ib)] += d;
      }
      ++i;
    } while (od.next());
  });

  const std::vector<double>& da = a.raw();
  const std::vector<double>& db = b.raw();
  std::vector<double>& dst = out.raw();
  Odometer od(out_shape);
  int64_t i = 0;
  do {
    const double av = da[static_cast<size_t>(od.offset(sa))];
    const double bv = db[static_cast<size_t>(od.offset(sb))];
    double v = 0;
    switch (op) {
      case BinOp::Add: v = av + bv; break;
      case BinOp::Sub: v = av - bv; break;
      case BinOp::Mul: v = av * bv; break;
      case BinOp::Div: v = av / bv; break;
    }
    dst[static_cast<size_t>(i)] = store_val(dt, v);
    ++i;
  } while (od.next());
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Div, "div"); }

// ---- elementwise unary ops ---------------------------------------------------

namespace {

// dfn(x, y) returns d out / d x given input x and output y.
Tensor unary_op(const Tensor& x, const std::function<double(double)>& fn,
                const std::function<double(double, double)>& dfn) {
  Tensor out = make_out(x.shape(), x.dtype(), {x}, [dfn](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    for (size_t i = 0; i < o.data.size(); ++i) {
      pg[i] += (*o.grad)[i] * dfn(px.raw()[i], o.data[i]);
    }
  });
  const std::vector<double>& src = x.raw();
  std::vector<double>& dst = out.raw();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = store_val(x.dtype(), fn(src[i]));
  return out;
}

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

}  // namespace

Tensor scale(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return v * s; },
                  [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return v + s; },
                  [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                  [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
        return 0.5 * v * (1.0 + std::tanh(u));
      },
      [](double v, double) {
        const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    contract_fail("matmul: operands must have rank >= 2, got " +
                  shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const int64_t M = as[as.size() - 2], K = as[as.size() - 1];
  const int64_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
  if (K != Kb) {
    contract_fail("matmul: inner extents disagree, " + shape_str(as) + " x " +
                  shape_str(bs));
  }
  const std::vector<int64_t> abatch(as.begin(), as.end() - 2);
  const std::vector<int64_t> bbatch(bs.begin(), bs.end() - 2);
  const auto batch = broadcast_shapes(abatch, bbatch, "matmul");
  const size_t brank = batch.size();
  const auto sa = broadcast_strides(abatch, brank);
  const auto sb = broadcast_strides(bbatch, brank);
  std::vector<int64_t> out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  const int64_t n_batches = numel_of(batch);
  const Dtype dt = promote(a.dtype(), b.dtype());

  // Per-batch element offsets of the broadcast operands.
  std::vector<int64_t> a_off(static_cast<size_t>(n_batches));
  std::vector<int64_t> b_off(static_cast<size_t>(n_batches));
  {
    Odometer od(batch);
    int64_t i = 0;
    do {
      a_off[static_cast<size_t>(i)] = od.offset(sa) * (M * K);
      b_off[static_cast<size_t>(i)] = od.offset(sb) * (K * N);
      ++i;
    } while (od.next());
  }

  g_mac_count.fetch_add(static_cast<uint64_t>(n_batches) * M * N * K,
                        std::memory_order_relaxed);

  Tensor out = make_out(out_shape, dt, {a, b},
                        [a_off, b_off, M, N, K, n_batches](TensorImpl& o) {
    Tensor pa = o.node->parents[0];
    Tensor pb = o.node->parents[1];
    const std::vector<double>& g = *o.grad;
    for (int64_t bi = 0; bi < n_batches; ++bi) {
      const int64_t ao = a_off[static_cast<size_t>(bi)];
      const int64_t bo = b_off[static_cast<size_t>(bi)];
      const int64_t go = bi * M * N;
      if (pa.requires_grad()) {
        std::vector<double>& ga = pa.grad_raw();
        for (int64_t m = 0; m < M; ++m) {
          for (int64_t k = 0; k < K; ++k) {
            double acc = 0;
            for (int64_t n = 0; n < N; ++n) {
              acc += g[static_cast<size_t>(go + m * N + n)] *
                     pb.raw()[static_cast<size_t>(bo + k * N + n)];
            }
            ga[static_cast<size_t>(ao + m * K + k)] += acc;
          }
        }
      }
      if (pb.requires_grad()) {
        std::vector<double>& gb = pb.grad_raw();
        for (int64_t k = 0; k < K; ++k) {
          for (int64_t n = 0; n < N; ++n) {
            double acc = 0;
            for (int64_t m = 0; m < M; ++m) {
              acc += pa.raw()[static_cast<size_t>(ao + m * K + k)] *
                     g[static_cast<size_t>(go + m * N + n)];
            }
            gb[static_cast<size_t>(bo + k * N + n)] += acc;
          }
        }
      }
    }
  });

  const std::vector<double>& da = a.raw();
  const std::vector<double>& db = b.raw();
  std::vector<double>& dst = out.raw();
  parallel_for(n_batches * M, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const int64_t bi = r / M;
      const int64_t m = r % M;
      const int64_t ao = a_off[static_cast<size_t>(bi)] + m * K;
      const int64_t bo = b_off[static_cast<size_t>(bi)];
      const int64_t oo = r * N;
      for (int64_t n = 0; n < N; ++n) {
        double acc = 0;
        for (int64_t k = 0; k < K; ++k) {
          acc += da[static_cast<size_t>(ao + k)] * db[static_cast<size_t>(bo + k * N + n)];
        }
        dst[static_cast<size_t>(oo + n)] = store_val(dt, acc);
      }
    }
  });
  return out;
}

// ---- softmax family ----------------------------------------------------------

namespace {

void axis_split(const std::vector<int64_t>& shape, int axis, int64_t* outer,
                int64_t* span, int64_t* inner) {
  if (axis < 0) axis += static_cast<int>(shape.size());
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    contract_fail("axis out of range for shape " + shape_str(shape));
  }
  *outer = 1;
  *inner = 1;
  for (int i = 0; i < axis; ++i) *outer *= shape[static_cast<size_t>(i)];
  *span = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) *inner *= shape[i];
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  int64_t outer, span, inner;
  axis_split(x.shape(), axis, &outer, &span, &inner);

  Tensor out = make_out(x.shape(), x.dtype(), {x}, [outer, span, inner](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    const std::vector<double>& g = *o.grad;
    for (int64_t a = 0; a < outer; ++a) {
      for (int64_t c = 0; c < inner; ++c) {
        const int64_t base = a * span * inner + c;
        double dot = 0;
        for (int64_t j = 0; j < span; ++j) {
          const size_t i = static_cast<size_t>(base + j * inner);
          dot += g[i] * o.data[i];
        }
        for (int64_t j = 0; j < span; ++j) {
          const size_t i = static_cast<size_t>(base + j * inner);
          pg[i] += o.data[i] * (g[i] - dot);
        }
      }
    }
  });

  const std::vector<double>& src = x.raw();
  std::vector<double>& dst = out.raw();
  for (int64_t a = 0; a < outer; ++a) {
    for (int64_t c = 0; c < inner; ++c) {
      const int64_t base = a * span * inner + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < span; ++j) mx = std::max(mx, src[static_cast<size_t>(base + j * inner)]);
      double denom = 0;
      for (int64_t j = 0; j < span; ++j) {
        const size_t i = static_cast<size_t>(base + j * inner);
        dst[i] = std::exp(src[i] - mx);
        denom += dst[i];
      }
      for (int64_t j = 0; j < span; ++j) {
        const size_t i = static_cast<size_t>(base + j * inner);
        dst[i] = store_val(x.dtype(), dst[i] / denom);
      }
    }
  }
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  int64_t outer, span, inner;
  axis_split(x.shape(), axis, &outer, &span, &inner);

  Tensor out = make_out(x.shape(), x.dtype(), {x}, [outer, span, inner](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    const std::vector<double>& g = *o.grad;
    for (int64_t a = 0; a < outer; ++a) {
      for (int64_t c = 0; c < inner; ++c) {
        const int64_t base = a * span * inner + c;
        double gsum = 0;
        for (int64_t j = 0; j < span; ++j) gsum += g[static_cast<size_t>(base + j * inner)];
        for (int64_t j = 0; j < span; ++j) {
          const size_t i = static_cast<size_t>(base + j * inner);
          pg[i] += g[i] - std::exp(o.data[i]) * gsum;
        }
      }
    }
  });

  const std::vector<double>& src = x.raw();
  std::vector<double>& dst = out.raw();
  for (int64_t a = 0; a < outer; ++a) {
    for (int64_t c = 0; c < inner; ++c) {
      const int64_t base = a * span * inner + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < span; ++j) mx = std::max(mx, src[static_cast<size_t>(base + j * inner)]);
      double denom = 0;
      for (int64_t j = 0; j < span; ++j) denom += std::exp(src[static_cast<size_t>(base + j * inner)] - mx);
      const double lse = mx + std::log(denom);
      for (int64_t j = 0; j < span; ++j) {
        const size_t i = static_cast<size_t>(base + j * inner);
        dst[i] = store_val(x.dtype(), src[i] - lse);
      }
    }
  }
  return out;
}

// ---- layer normalization ------------------------------------------------------

namespace {

Tensor layernorm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias,
                      int64_t span, double eps) {
  if (x.numel() % span != 0) contract_fail("layernorm: span does not divide numel");
  if (gain && gain->numel() != span) {
    contract_fail("layernorm: gain length " + std::to_string(gain->numel()) +
                  " does not match normalized extent " + std::to_string(span));
  }
  if (bias && bias->numel() != span) {
    contract_fail("layernorm: bias length " + std::to_string(bias->numel()) +
                  " does not match normalized extent " + std::to_string(span));
  }
  const int64_t rows = x.numel() / span;
  const bool affine = gain != nullptr;

  std::vector<Tensor> parents = {x};
  if (affine) {
    parents.push_back(*gain);
    parents.push_back(*bias);
  }

  Tensor out = make_out(x.shape(), x.dtype(), std::move(parents),
                        [rows, span, eps, affine](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    const Tensor* pg = affine ? &o.node->parents[1] : nullptr;
    const Tensor* pbias = affine ? &o.node->parents[2] : nullptr;
    const std::vector<double>& g = *o.grad;
    std::vector<double> y(static_cast<size_t>(span));
    for (int64_t r = 0; r < rows; ++r) {
      const size_t base = static_cast<size_t>(r * span);
      double mu = 0;
      for (int64_t j = 0; j < span; ++j) mu += px.raw()[base + static_cast<size_t>(j)];
      mu /= static_cast<double>(span);
      double var = 0;
      for (int64_t j = 0; j < span; ++j) {
        const double d = px.raw()[base + static_cast<size_t>(j)] - mu;
        var += d * d;
      }
      var /= static_cast<double>(span);
      const double sigma = std::sqrt(var + eps);
      double mean_gd = 0, mean_gdy = 0;
      for (int64_t j = 0; j < span; ++j) {
        y[static_cast<size_t>(j)] = (px.raw()[base + static_cast<size_t>(j)] - mu) / sigma;
        const double gv = affine ? pg->raw()[static_cast<size_t>(j)] : 1.0;
        const double gd = g[base + static_cast<size_t>(j)] * gv;
        mean_gd += gd;
        mean_gdy += gd * y[static_cast<size_t>(j)];
      }
      mean_gd /= static_cast<double>(span);
      mean_gdy /= static_cast<double>(span);
      if (px.requires_grad()) {
        std::vector<double>& pxg = px.grad_raw();
        for (int64_t j = 0; j < span; ++j) {
          const double gv = affine ? pg->raw()[static_cast<size_t>(j)] : 1.0;
          const double gd = g[base + static_cast<size_t>(j)] * gv;
          pxg[base + static_cast<size_t>(j)] +=
              (gd - mean_gd - y[static_cast<size_t>(j)] * mean_gdy) / sigma;
        }
      }
      if (affine && pg->requires_grad()) {
        Tensor t = o.node->parents[1];
        std::vector<double>& gg = t.grad_raw();
        for (int64_t j = 0; j < span; ++j) {
          gg[static_cast<size_t>(j)] += g[base + static_cast<size_t>(j)] * y[static_cast<size_t>(j)];
        }
      }
      if (affine && pbias->requires_grad()) {
        Tensor t = o.node->parents[2];
        std::vector<double>& gb = t.grad_raw();
        for (int64_t j = 0; j < span; ++j) gb[static_cast<size_t>(j)] += g[base + static_cast<size_t>(j)];
      }
    }
  });

  const std::vector<double>& src = x.raw();
  std::vector<double>& dst = out.raw();
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r * span);
    double mu = 0;
    for (int64_t j = 0; j < span; ++j) mu += src[base + static_cast<size_t>(j)];
    mu /= static_cast<double>(span);
    double var = 0;
    for (int64_t j = 0; j < span; ++j) {
      const double d = src[base + static_cast<size_t>(j)] - mu;
      var += d * d;
    }
    var /= static_cast<double>(span);
    const double sigma = std::sqrt(var + eps);
    for (int64_t j = 0; j < span; ++j) {
      double v = (src[base + static_cast<size_t>(j)] - mu) / sigma;
      if (gain) v = v * gain->raw()[static_cast<size_t>(j)] + bias->raw()[static_cast<size_t>(j)];
      dst[base + static_cast<size_t>(j)] = store_val(x.dtype(), v);
    }
  }
  return out;
}

}  // namespace

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int64_t span = x.dim(-1);
  return layernorm_impl(x, &gain, &bias, span, eps);
}

Tensor layernorm_plain(const Tensor& x, int64_t norm_size, double eps) {
  return layernorm_impl(x, nullptr, nullptr, norm_size, eps);
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x) {
  Tensor out = make_out({1}, x.dtype(), {x}, [](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    const double g = (*o.grad)[0];
    for (double& v : pg) v += g;
  });
  double acc = 0;
  for (double v : x.raw()) acc += v;
  out.raw()[0] = store_val(x.dtype(), acc);
  return out;
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = make_out({1}, x.dtype(), {x}, [inv](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    const double g = (*o.grad)[0] * inv;
    for (double& v : pg) v += g;
  });
  double acc = 0;
  for (double v : x.raw()) acc += v;
  out.raw()[0] = store_val(x.dtype(), acc * inv);
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

// ---- shape ops -------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
  if (numel_of(shape) != x.numel()) {
    contract_fail("reshape: " + shape_str(x.shape()) + " cannot view as " + shape_str(shape));
  }
  Tensor out = make_out(std::move(shape), x.dtype(), {x}, [](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    for (size_t i = 0; i < pg.size(); ++i) pg[i] += (*o.grad)[i];
  });
  out.raw() = x.raw();
  return out;
}

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  const int nd = x.ndim();
  if (axis_a < 0) axis_a += nd;
  if (axis_b < 0) axis_b += nd;
  if (axis_a < 0 || axis_a >= nd || axis_b < 0 || axis_b >= nd) {
    contract_fail("transpose: axis out of range for " + shape_str(x.shape()));
  }
  std::vector<int64_t> out_shape = x.shape();
  std::swap(out_shape[static_cast<size_t>(axis_a)], out_shape[static_cast<size_t>(axis_b)]);

  // out[coord] = x[coord with axes swapped]
  const auto src_shape = x.shape();
  auto map_copy = [axis_a, axis_b](const std::vector<int64_t>& dst_shape,
                                   const std::vector<double>& src,
                                   const std::vector<int64_t>& src_shape_,
                                   std::vector<double>* dst, bool accumulate) {
    std::vector<int64_t> sstr(src_shape_.size());
    int64_t acc = 1;
    for (size_t i = src_shape_.size(); i-- > 0;) {
      sstr[i] = acc;
      acc *= src_shape_[i];
    }
    Odometer od(dst_shape);
    int64_t i = 0;
    do {
      std::vector<int64_t> c = od.coord_;
      std::swap(c[static_cast<size_t>(axis_a)], c[static_cast<size_t>(axis_b)]);
      int64_t off = 0;
      for (size_t j = 0; j < c.size(); ++j) off += c[j] * sstr[j];
      if (accumulate) {
        (*dst)[static_cast<size_t>(off)] += src[static_cast<size_t>(i)];
      } else {
        (*dst)[static_cast<size_t>(i)] = src[static_cast<size_t>(off)];
      }
      ++i;
    } while (od.next());
  };

  Tensor out = make_out(out_shape, x.dtype(), {x},
                        [map_copy, out_shape](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    // scatter: grad flows back through the same index map
    map_copy(out_shape, *o.grad, px.shape(), &px.grad_raw(), true);
  });
  map_copy(out_shape, x.raw(), src_shape, &out.raw(), false);
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) contract_fail("concat: no operands");
  const int nd = parts[0].ndim();
  int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) contract_fail("concat: axis out of range");
  std::vector<int64_t> out_shape = parts[0].shape();
  int64_t total_axis = 0;
  Dtype dt = parts[0].dtype();
  for (const Tensor& p : parts) {
    if (p.ndim() != nd) contract_fail("concat: rank mismatch");
    for (int i = 0; i < nd; ++i) {
      if (i != ax && p.dim(i) != out_shape[static_cast<size_t>(i)]) {
        contract_fail("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                      shape_str(parts[0].shape()));
      }
    }
    total_axis += p.dim(ax);
    dt = promote(dt, p.dtype());
  }
  out_shape[static_cast<size_t>(ax)] = total_axis;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = ax + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];

  std::vector<int64_t> spans;
  spans.reserve(parts.size());
  for (const Tensor& p : parts) spans.push_back(p.dim(ax));

  Tensor out = make_out(out_shape, dt, parts,
                        [outer, inner, spans, total_axis](TensorImpl& o) {
    int64_t off = 0;
    for (size_t pi = 0; pi < o.node->parents.size(); ++pi) {
      Tensor p = o.node->parents[pi];
      const int64_t span = spans[pi];
      if (p.requires_grad()) {
        std::vector<double>& pg = p.grad_raw();
        for (int64_t a = 0; a < outer; ++a) {
          for (int64_t j = 0; j < span; ++j) {
            const int64_t src = (a * total_axis + off + j) * inner;
            const int64_t dst = (a * span + j) * inner;
            for (int64_t c = 0; c < inner; ++c) {
              pg[static_cast<size_t>(dst + c)] += (*o.grad)[static_cast<size_t>(src + c)];
            }
          }
        }
      }
      off += span;
    }
  });

  std::vector<double>& dst = out.raw();
  int64_t off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const std::vector<double>& src = parts[pi].raw();
    const int64_t span = spans[pi];
    for (int64_t a = 0; a < outer; ++a) {
      for (int64_t j = 0; j < span; ++j) {
        const int64_t d = (a * total_axis + off + j) * inner;
        const int64_t s = (a * span + j) * inner;
        for (int64_t c = 0; c < inner; ++c) {
          dst[static_cast<size_t>(d + c)] = store_val(dt, src[static_cast<size_t>(s + c)]);
        }
      }
    }
    off += span;
  }
  return out;
}

Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int nd = x.ndim();
  int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) contract_fail("narrow: axis out of range");
  const int64_t span = x.dim(ax);
  if (start < 0 || length <= 0 || start + length > span) {
    contract_fail("narrow: slice [" + std::to_string(start) + ", " +
                  std::to_string(start + length) + ") out of extent " + std::to_string(span));
  }
  std::vector<int64_t> out_shape = x.shape();
  out_shape[static_cast<size_t>(ax)] = length;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  for (int i = ax + 1; i < nd; ++i) inner *= x.dim(i);

  Tensor out = make_out(out_shape, x.dtype(), {x},
                        [outer, inner, span, start, length](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    for (int64_t a = 0; a < outer; ++a) {
      for (int64_t j = 0; j < length; ++j) {
        const int64_t src = (a * length + j) * inner;
        const int64_t dst = (a * span + start + j) * inner;
        for (int64_t c = 0; c < inner; ++c) {
          pg[static_cast<size_t>(dst + c)] += (*o.grad)[static_cast<size_t>(src + c)];
        }
      }
    }
  });

  const std::vector<double>& src = x.raw();
  std::vector<double>& dst = out.raw();
  for (int64_t a = 0; a < outer; ++a) {
    for (int64_t j = 0; j < length; ++j) {
      const int64_t s = (a * span + start + j) * inner;
      const int64_t d = (a * length + j) * inner;
      for (int64_t c = 0; c < inner; ++c) {
        dst[static_cast<size_t>(d + c)] = src[static_cast<size_t>(s + c)];
      }
    }
  }
  return out;
}

// ---- gathers ----------------------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& indices) {
  if (table.ndim() != 2) contract_fail("gather_rows: table must be 2-D");
  const int64_t rows = table.dim(0), cols = table.dim(1);
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= rows) {
      contract_fail("gather_rows: index " + std::to_string(indices[i]) +
                    " at position " + std::to_string(i) + " outside table of " +
                    std::to_string(rows) + " rows");
    }
  }
  const int64_t n = static_cast<int64_t>(indices.size());
  Tensor out = make_out({n, cols}, table.dtype(), {table},
                        [indices, cols](TensorImpl& o) {
    Tensor pt = o.node->parents[0];
    if (!pt.requires_grad()) return;
    std::vector<double>& pg = pt.grad_raw();
    for (size_t i = 0; i < indices.size(); ++i) {
      const size_t src = i * static_cast<size_t>(cols);
      const size_t dst = static_cast<size_t>(indices[i]) * static_cast<size_t>(cols);
      for (int64_t c = 0; c < cols; ++c) {
        pg[dst + static_cast<size_t>(c)] += (*o.grad)[src + static_cast<size_t>(c)];
      }
    }
  });
  const std::vector<double>& src = table.raw();
  std::vector<double>& dst = out.raw();
  for (size_t i = 0; i < indices.size(); ++i) {
    const size_t s = static_cast<size_t>(indices[i]) * static_cast<size_t>(cols);
    const size_t d = i * static_cast<size_t>(cols);
    for (int64_t c = 0; c < cols; ++c) dst[d + static_cast<size_t>(c)] = src[s + static_cast<size_t>(c)];
  }
  return out;
}

Tensor gather_elems(const Tensor& x, const std::vector<int64_t>& indices) {
  if (x.ndim() != 2) contract_fail("gather_elems: x must be 2-D");
  const int64_t n = x.dim(0), v = x.dim(1);
  if (static_cast<int64_t>(indices.size()) != n) {
    contract_fail("gather_elems: need one index per row");
  }
  for (int64_t i = 0; i < n; ++i) {
    if (indices[static_cast<size_t>(i)] < 0 || indices[static_cast<size_t>(i)] >= v) {
      contract_fail("gather_elems: index out of range at row " + std::to_string(i));
    }
  }
  Tensor out = make_out({n}, x.dtype(), {x}, [indices, v](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    for (size_t i = 0; i < indices.size(); ++i) {
      pg[i * static_cast<size_t>(v) + static_cast<size_t>(indices[i])] += (*o.grad)[i];
    }
  });
  for (int64_t i = 0; i < n; ++i) {
    out.raw()[static_cast<size_t>(i)] =
        x.raw()[static_cast<size_t>(i * v + indices[static_cast<size_t>(i)])];
  }
  return out;
}

Tensor detach(const Tensor& x) { return x.detach_copy(); }

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) contract_fail("dropout: p must be < 1");
  const double keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (double& m : *mask) m = dist(rng) < keep ? 1.0 / keep : 0.0;

  Tensor out = make_out(x.shape(), x.dtype(), {x}, [mask](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    if (!px.requires_grad()) return;
    std::vector<double>& pg = px.grad_raw();
    for (size_t i = 0; i < pg.size(); ++i) pg[i] += (*o.grad)[i] * (*mask)[i];
  });
  for (size_t i = 0; i < out.raw().size(); ++i) {
    out.raw()[i] = store_val(x.dtype(), x.raw()[i] * (*mask)[i]);
  }
  return out;
}

// ---- conv2d ------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.ndim() != 3 || w.ndim() != 4) contract_fail("conv2d: expected x [C,H,W], w [O,C,kh,kw]");
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int64_t O = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (C != Cw) contract_fail("conv2d: channel mismatch");
  if (b.numel() != O) contract_fail("conv2d: bias length mismatch");
  if (stride < 1 || kh > H || kw > W) contract_fail("conv2d: kernel exceeds input");
  const int64_t oh = (H - kh) / stride + 1;
  const int64_t ow = (W - kw) / stride + 1;
  const Dtype dt = promote(promote(x.dtype(), w.dtype()), b.dtype());

  g_mac_count.fetch_add(static_cast<uint64_t>(O) * C * kh * kw * oh * ow,
                        std::memory_order_relaxed);

  Tensor out = make_out({O, oh, ow}, dt, {x, w, b},
                        [C, H, W, O, kh, kw, oh, ow, stride](TensorImpl& o) {
    Tensor px = o.node->parents[0];
    Tensor pw = o.node->parents[1];
    Tensor pb = o.node->parents[2];
    const std::vector<double>& g = *o.grad;
    for (int64_t oc = 0; oc < O; ++oc) {
      for (int64_t i = 0; i < oh; ++i) {
        for (int64_t j = 0; j < ow; ++j) {
          const double gv = g[static_cast<size_t>((oc * oh + i) * ow + j)];
          if (pb.requires_grad()) pb.grad_raw()[static_cast<size_t>(oc)] += gv;
          for (int64_t c = 0; c < C; ++c) {
            for (int64_t u = 0; u < kh; ++u) {
              for (int64_t v = 0; v < kw; ++v) {
                const int64_t xi = (c * H + i * stride + u) * W + j * stride + v;
                const int64_t wi = ((oc * C + c) * kh + u) * kw + v;
                if (px.requires_grad()) {
                  px.grad_raw()[static_cast<size_t>(xi)] += gv * pw.raw()[static_cast<size_t>(wi)];
                }
                if (pw.requires_grad()) {
                  pw.grad_raw()[static_cast<size_t>(wi)] += gv * px.raw()[static_cast<size_t>(xi)];
                }
              }
            }
          }
        }
      }
    }
  });

  const std::vector<double>& xd = x.raw();
  const std::vector<double>& wd = w.raw();
  std::vector<double>& dst = out.raw();
  for (int64_t oc = 0; oc < O; ++oc) {
    for (int64_t i = 0; i < oh; ++i) {
      for (int64_t j = 0; j < ow; ++j) {
        double acc = b.raw()[static_cast<size_t>(oc)];
        for (int64_t c = 0; c < C; ++c) {
          for (int64_t u = 0; u < kh; ++u) {
            for (int64_t v = 0; v < kw; ++v) {
              acc += xd[static_cast<size_t>((c * H + i * stride + u) * W + j * stride + v)] *
                     wd[static_cast<size_t>(((oc * C + c) * kh + u) * kw + v)];
            }
          }
        }
        dst[static_cast<size_t>((oc * oh + i) * ow + j)] = store_val(dt, acc);
      }
    }
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
  Tensor lp = log_softmax(logits, 1);
  Tensor picked = gather_elems(lp, targets);
  return neg(mean(picked));
}

// ---- backward pass -----------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    contract_fail("backward: loss must be a scalar tensor");
  }
  // Topological order over the recorded tape.
  std::vector<TensorImpl*> order;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  std::unordered_map<TensorImpl*, int> state;  // 0 unseen, 1 open, 2 done
  stack.push_back({loss.impl(), 0});
  state[loss.impl()] = 1;
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const size_t n_parents = impl->node ? impl->node->parents.size() : 0;
    if (next < n_parents) {
      TensorImpl* p = impl->node->parents[next].impl();
      ++next;
      if (state[p] == 0) {
        state[p] = 1;
        stack.push_back({p, 0});
      }
    } else {
      state[impl] = 2;
      order.push_back(impl);
      stack.pop_back();
    }
  }

  loss.impl()->grad_ref()[0] += 1.0;
  for (size_t i = order.size(); i-- > 0;) {
    TensorImpl* impl = order[i];
    if (!impl->node) continue;
    if (!impl->grad) impl->grad_ref();
    for (Tensor& p : impl->node->parents) {
      if (p.requires_grad()) p.grad_raw();
    }
    impl->node->backward(*impl);
    impl->node.reset();  // tape freed as it is consumed
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x0, double eps) {
  Tensor x = x0.detach_copy();
  x.set_requires_grad(true);
  Tensor loss = f(x);
  if (loss.numel() != 1) contract_fail("grad_check: f must return a scalar");
  backward(loss);
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  if (x.has_grad()) analytic = x.grad_raw();

  Tensor xn = x0.detach_copy();
  NoGradGuard ng;
  double worst = 0;
  for (size_t i = 0; i < xn.raw().size(); ++i) {
    const double v = xn.raw()[i];
    xn.raw()[i] = v + eps;
    const double lp = f(xn).value();
    xn.raw()[i] = v - eps;
    const double lm = f(xn).value();
    xn.raw()[i] = v;
    const double cd = (lp - lm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(cd), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - cd) / denom);
  }
  return worst;
}

// ---- ParamStore ----------------------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) contract_fail("duplicate parameter name: " + name);
  t.set_requires_grad(true);
  index_[name] = items_.size();
  items_.push_back({name, t});
  return t;
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) > 0; }

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) contract_fail("unknown parameter: " + name);
  return items_[it->second].tensor;
}

void ParamStore::zero_grads() {
  for (auto& p : items_) p.tensor.zero_grad();
}

double grad_check_params(const std::function<Tensor()>& loss_fn,
                         ParamStore& params, double eps) {
  params.zero_grads();
  Tensor loss = loss_fn();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.items().size());
  for (auto& p : params.items()) {
    analytic.push_back(p.tensor.has_grad()
                           ? p.tensor.grad_raw()
                           : std::vector<double>(static_cast<size_t>(p.tensor.numel()), 0.0));
  }

  NoGradGuard ng;
  double worst = 0;
  for (size_t pi = 0; pi < params.items().size(); ++pi) {
    Tensor t = params.items()[pi].tensor;
    for (size_t i = 0; i < t.raw().size(); ++i) {
      const double v = t.raw()[i];
      t.raw()[i] = v + eps;
      const double lp = loss_fn().value();
      t.raw()[i] = v - eps;
      const double lm = loss_fn().value();
      t.raw()[i] = v;
      const double cd = (lp - lm) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(cd), 1e-8});
      worst = std::max(worst, std::abs(a - cd) / denom);
    }
  }
  return worst;
}

}  // namespace resotok

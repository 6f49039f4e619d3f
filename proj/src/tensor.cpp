#include "synref/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace synref {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

thread_local Tape* g_active_tape = nullptr;

std::string describe(const char* op, const Tensor& t) {
  std::string s = t.name().empty() ? std::string("<unnamed>") : t.name();
  return std::string(op) + " input '" + s + "' " + shape_str(t.shape());
}

void check_finite(const char* op, const Tensor& out) {
  if (!out.all_finite()) {
    throw DomainError(std::string("non-finite value in output of ") + op +
                      (out.name().empty() ? "" : " ('" + out.name() + "')"));
  }
}

bool is_scalar_like(const Tensor& t) { return t.numel() == 1; }

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

detail::TensorNode& Tensor::node() const {
  if (!node_) throw StateError("operation on an undefined tensor");
  return *node_;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->shape = shape;
  t.node_->value = std::move(values);
  t.node_->requires_grad = requires_grad;
  t.node_->id = g_next_id.fetch_add(1);
  return t;
}

Tensor Tensor::uniform(Rng& rng, const Shape& shape, double lo, double hi, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return from_values(shape, std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::numel() const { return node().value.size(); }

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool v) { node().requires_grad = v; }

std::span<const double> Tensor::values() const { return node().value; }

std::span<double> Tensor::values_mut() { return node().value; }

double Tensor::value_at(std::size_t flat_index) const {
  const auto& v = node().value;
  if (flat_index >= v.size()) throw ShapeError("value_at: index out of range");
  return v[flat_index];
}

double Tensor::scalar_value() const {
  if (numel() != 1) throw ShapeError("scalar_value on tensor of shape " + shape_str(shape()));
  return node().value[0];
}

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw StateError("gradient not allocated for tensor '" + node().name + "'");
  }
  return node().grad;
}

std::span<double> Tensor::grad_mut() {
  ensure_grad();
  return node().grad;
}

void Tensor::ensure_grad() {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

void Tensor::zero_grad() {
  auto& n = node();
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> g) {
  ensure_grad();
  auto& grad = node().grad;
  if (g.size() != grad.size()) throw ShapeError("accumulate_grad: size mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

const std::string& Tensor::name() const { return node().name; }

Tensor& Tensor::set_name(std::string name) {
  node().name = std::move(name);
  return *this;
}

std::uint64_t Tensor::id() const { return node().id; }

bool Tensor::all_finite() const {
  for (double v : node().value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  return from_values(shape(), std::vector<double>(node().value), node().requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void()> backprop) {
  if (consumed_) throw StateError("recording on a consumed tape");
  records_.push_back(Record{op, std::move(inputs), output, std::move(backprop)});
}

void Tape::run_backward(const Tensor& loss) {
  if (consumed_) throw StateError("backward on a consumed tape");
  if (records_.empty()) throw StateError("backward on an empty tape");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw StateError("backward: loss does not depend on any tracked tensor");
  }
  consumed_ = true;
  const_cast<Tensor&>(loss).ensure_grad();
  const_cast<Tensor&>(loss).grad_mut()[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output.has_grad()) it->backprop();
  }
  for (const auto& rec : records_) {
    for (const auto& in : rec.inputs) {
      if (!in.has_grad()) continue;
      for (double g : in.grad()) {
        if (!std::isfinite(g)) {
          throw DomainError("non-finite gradient at " + describe(rec.op, in));
        }
      }
    }
  }
}

TapeSuspend::TapeSuspend() {
  saved_ = g_active_tape;
  g_active_tape = nullptr;
}

TapeSuspend::~TapeSuspend() { g_active_tape = saved_; }

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw StateError("backward called with no active tape");
  t->run_backward(loss);
}

// ---------------------------------------------------------------------------
// Op helpers

namespace {

bool any_requires_grad(std::initializer_list<Tensor> inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void maybe_record(const char* op, std::initializer_list<Tensor> inputs, Tensor& out,
                  std::function<void()> backprop) {
  if (!any_requires_grad(inputs)) return;
  out.set_requires_grad(true);
  if (Tape* t = Tape::active()) {
    t->record(op, std::vector<Tensor>(inputs), out, std::move(backprop));
  }
}

enum class Bcast { kEqual, kLeftScalar, kRightScalar, kMapVolumeLeft, kMapVolumeRight };

bool map_volume_pair(const Shape& map, const Shape& vol) {
  return map.size() == 2 && vol.size() == 3 && map[0] == vol[0] && map[1] == vol[1];
}

Bcast classify_broadcast(const char* op, const Tensor& a, const Tensor& b, bool allow_map_volume) {
  if (a.shape() == b.shape()) return Bcast::kEqual;
  if (is_scalar_like(a)) return Bcast::kLeftScalar;
  if (is_scalar_like(b)) return Bcast::kRightScalar;
  if (allow_map_volume) {
    if (map_volume_pair(a.shape(), b.shape())) return Bcast::kMapVolumeLeft;
    if (map_volume_pair(b.shape(), a.shape())) return Bcast::kMapVolumeRight;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise arithmetic

namespace {

template <class Fwd, class BackA, class BackB>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, bool allow_map_volume,
                          Fwd fwd, BackA back_a, BackB back_b) {
  const Bcast mode = classify_broadcast(op, a, b, allow_map_volume);
  const Shape& out_shape = (mode == Bcast::kLeftScalar || mode == Bcast::kMapVolumeLeft)
                               ? b.shape()
                               : a.shape();
  const std::size_t n = shape_numel(out_shape);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);

  // Channel count for map/volume broadcast; index of a = flat / c.
  std::size_t c = 1;
  if (mode == Bcast::kMapVolumeLeft) c = b.shape()[2];
  if (mode == Bcast::kMapVolumeRight) c = a.shape()[2];

  auto a_index = [mode, c](std::size_t i) -> std::size_t {
    switch (mode) {
      case Bcast::kLeftScalar: return 0;
      case Bcast::kMapVolumeLeft: return i / c;
      default: return i;
    }
  };
  auto b_index = [mode, c](std::size_t i) -> std::size_t {
    switch (mode) {
      case Bcast::kRightScalar: return 0;
      case Bcast::kMapVolumeRight: return i / c;
      default: return i;
    }
  };

  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[a_index(i)], bv[b_index(i)]);

  Tensor result = Tensor::from_values(out_shape, std::move(out), false);
  check_finite(op, result);

  Tensor a_cap = a, b_cap = b, out_cap = result;
  maybe_record(op, {a, b}, result, [a_cap, b_cap, out_cap, a_index, b_index, n, back_a, back_b]() mutable {
    const auto g = out_cap.grad();
    const auto av2 = a_cap.values();
    const auto bv2 = b_cap.values();
    if (a_cap.requires_grad()) {
      auto ga = a_cap.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        ga[a_index(i)] += back_a(g[i], av2[a_index(i)], bv2[b_index(i)]);
      }
    }
    if (b_cap.requires_grad()) {
      auto gb = b_cap.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        gb[b_index(i)] += back_b(g[i], av2[a_index(i)], bv2[b_index(i)]);
      }
    }
  });
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, false, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, false, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, true, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Tensor result = Tensor::from_values({m, n}, std::move(out), false);
  check_finite("matmul", result);

  Tensor a_cap = a, b_cap = b, out_cap = result;
  maybe_record("matmul", {a, b}, result, [a_cap, b_cap, out_cap, m, k, n]() mutable {
    const auto g = out_cap.grad();
    if (a_cap.requires_grad()) {
      auto ga = a_cap.grad_mut();
      const auto bv2 = b_cap.values();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = &g[i * n];
          const double* brow = &bv2[p * n];
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (b_cap.requires_grad()) {
      auto gb = b_cap.grad_mut();
      const auto av2 = a_cap.values();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &g[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av2[i * k + p];
          if (aip == 0.0) continue;
          double* gbrow = &gb[p * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Unary maps

namespace {

template <class Fwd, class Back>
Tensor unary_elementwise(const char* op, const Tensor& x, Fwd fwd, Back back_from_in_out) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  Tensor result = Tensor::from_values(x.shape(), std::move(out), false);
  check_finite(op, result);

  Tensor x_cap = x, out_cap = result;
  maybe_record(op, {x}, result, [x_cap, out_cap, back_from_in_out]() mutable {
    const auto g = out_cap.grad();
    const auto xv2 = x_cap.values();
    const auto yv = out_cap.values();
    auto gx = x_cap.grad_mut();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * back_from_in_out(xv2[i], yv[i]);
  });
  return result;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary_elementwise(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(v));
  }
  return unary_elementwise(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor scale(const Tensor& x, double factor) {
  if (!std::isfinite(factor)) throw DomainError("scale by non-finite factor");
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  Tensor result = Tensor::from_values(x.shape(), std::move(out), false);
  check_finite("scale", result);
  Tensor x_cap = x, out_cap = result;
  maybe_record("scale", {x}, result, [x_cap, out_cap, factor]() mutable {
    const auto g = out_cap.grad();
    auto gx = x_cap.grad_mut();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
  });
  return result;
}

// ---------------------------------------------------------------------------
// Softmax

Tensor softmax_lastdim(const Tensor& x) {
  if (x.ndim() == 0) throw ShapeError("softmax_lastdim on a scalar");
  const std::size_t n = x.shape().back();
  if (n == 0) throw ShapeError("softmax_lastdim over an empty dimension");
  const std::size_t slices = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t s = 0; s < slices; ++s) {
    const double* in = &xv[s * n];
    double* o = &out[s * n];
    double m = in[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, in[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      o[i] = std::exp(in[i] - m);
      z += o[i];
    }
    for (std::size_t i = 0; i < n; ++i) o[i] /= z;
  }
  Tensor result = Tensor::from_values(x.shape(), std::move(out), false);
  check_finite("softmax_lastdim", result);

  Tensor x_cap = x, out_cap = result;
  maybe_record("softmax_lastdim", {x}, result, [x_cap, out_cap, n, slices]() mutable {
    const auto g = out_cap.grad();
    const auto yv = out_cap.values();
    auto gx = x_cap.grad_mut();
    for (std::size_t s = 0; s < slices; ++s) {
      const double* gs = &g[s * n];
      const double* ys = &yv[s * n];
      double inner = 0.0;
      for (std::size_t i = 0; i < n; ++i) inner += gs[i] * ys[i];
      double* gxs = &gx[s * n];
      for (std::size_t i = 0; i < n; ++i) gxs[i] += ys[i] * (gs[i] - inner);
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

Tensor reduce_all(const char* op, const Tensor& x, double denom) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor result = Tensor::scalar(acc / denom);
  check_finite(op, result);
  Tensor x_cap = x, out_cap = result;
  maybe_record(op, {x}, result, [x_cap, out_cap, denom]() mutable {
    const double g = out_cap.grad()[0] / denom;
    auto gx = x_cap.grad_mut();
    for (double& v : gx) v += g;
  });
  return result;
}

}  // namespace

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return reduce_all("mean", x, static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x) { return reduce_all("sum", x, 1.0); }

// ---------------------------------------------------------------------------
// Concat

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim of zero tensors");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ShapeError("concat_lastdim of scalars");
  std::size_t last_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) {
      throw ShapeError("concat_lastdim: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    for (std::size_t d = 0; d + 1 < s.size(); ++d) {
      if (s[d] != first[d]) {
        throw ShapeError("concat_lastdim: leading dims differ: " + shape_str(first) + " vs " +
                         shape_str(s));
      }
    }
    last_total += s.back();
  }
  Shape out_shape = first;
  out_shape.back() = last_total;
  const std::size_t rows = shape_numel(out_shape) / last_total;

  std::vector<double> out(rows * last_total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    const auto pv = p.values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(pv.begin() + r * w, pv.begin() + (r + 1) * w, out.begin() + r * last_total + offset);
    }
    offset += w;
  }
  Tensor result = Tensor::from_values(out_shape, std::move(out), false);
  check_finite("concat_lastdim", result);

  bool needs = false;
  for (const auto& p : parts) needs |= p.requires_grad();
  if (needs) {
    result.set_requires_grad(true);
    if (Tape* t = Tape::active()) {
      std::vector<Tensor> parts_cap = parts;
      Tensor out_cap = result;
      t->record("concat_lastdim", parts, result, [parts_cap, out_cap, rows, last_total]() mutable {
        const auto g = out_cap.grad();
        std::size_t off = 0;
        for (auto& p : parts_cap) {
          const std::size_t w = p.shape().back();
          if (p.requires_grad()) {
            auto gp = p.grad_mut();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * last_total + off + j];
            }
          }
          off += w;
        }
      });
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Vector reductions

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 1 || b.ndim() != 1 || a.numel() != b.numel()) {
    throw ShapeError("dot: need equal-length 1-D tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  Tensor result = Tensor::scalar(acc);
  check_finite("dot", result);
  Tensor a_cap = a, b_cap = b, out_cap = result;
  maybe_record("dot", {a, b}, result, [a_cap, b_cap, out_cap]() mutable {
    const double g = out_cap.grad()[0];
    const auto av2 = a_cap.values();
    const auto bv2 = b_cap.values();
    if (a_cap.requires_grad()) {
      auto ga = a_cap.grad_mut();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bv2[i];
    }
    if (b_cap.requires_grad()) {
      auto gb = b_cap.grad_mut();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * av2[i];
    }
  });
  return result;
}

Tensor l2_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("l2_distance: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  double ss = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    ss += d * d;
  }
  const double dist = std::sqrt(ss);
  Tensor result = Tensor::scalar(dist);
  check_finite("l2_distance", result);
  Tensor a_cap = a, b_cap = b, out_cap = result;
  maybe_record("l2_distance", {a, b}, result, [a_cap, b_cap, out_cap]() mutable {
    const double g = out_cap.grad()[0];
    const double d = out_cap.values()[0];
    // Subgradient 0 when the points coincide.
    if (d == 0.0) return;
    const auto av2 = a_cap.values();
    const auto bv2 = b_cap.values();
    if (a_cap.requires_grad()) {
      auto ga = a_cap.grad_mut();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (av2[i] - bv2[i]) / d;
    }
    if (b_cap.requires_grad()) {
      auto gb = b_cap.grad_mut();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (av2[i] - bv2[i]) / d;
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Shape and normalization

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor result = Tensor::from_values(shape, std::vector<double>(x.values().begin(), x.values().end()), false);
  Tensor x_cap = x, out_cap = result;
  maybe_record("reshape", {x}, result, [x_cap, out_cap]() mutable {
    const auto g = out_cap.grad();
    auto gx = x_cap.grad_mut();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
  return result;
}

Tensor l2_normalize(const Tensor& x) {
  const auto xv = x.values();
  double ss = 0.0;
  for (double v : xv) ss += v * v;
  if (ss == 0.0) throw DomainError("l2_normalize of a zero tensor");
  const double norm = std::sqrt(ss);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / norm;
  Tensor result = Tensor::from_values(x.shape(), std::move(out), false);
  check_finite("l2_normalize", result);
  Tensor x_cap = x, out_cap = result;
  maybe_record("l2_normalize", {x}, result, [x_cap, out_cap, norm]() mutable {
    const auto g = out_cap.grad();
    const auto yv = out_cap.values();
    double inner = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) inner += g[i] * yv[i];
    auto gx = x_cap.grad_mut();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (g[i] - yv[i] * inner) / norm;
  });
  return result;
}

Tensor avg4_neighbors(const Tensor& x) {
  if (x.ndim() != 3) {
    throw ShapeError("avg4_neighbors expects [h,w,c], got " + shape_str(x.shape()));
  }
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  auto cell = [w, c](std::size_t r, std::size_t col) { return (r * w + col) * c; };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      double cnt = 0.0;
      double* o = &out[cell(r, col)];
      auto take = [&](std::size_t rr, std::size_t cc) {
        const double* src = &xv[cell(rr, cc)];
        for (std::size_t k = 0; k < c; ++k) o[k] += src[k];
        cnt += 1.0;
      };
      if (r > 0) take(r - 1, col);
      if (r + 1 < h) take(r + 1, col);
      if (col > 0) take(r, col - 1);
      if (col + 1 < w) take(r, col + 1);
      for (std::size_t k = 0; k < c; ++k) o[k] /= cnt;
    }
  }
  Tensor result = Tensor::from_values(x.shape(), std::move(out), false);
  check_finite("avg4_neighbors", result);
  Tensor x_cap = x, out_cap = result;
  maybe_record("avg4_neighbors", {x}, result, [x_cap, out_cap, h, w, c]() mutable {
    const auto g = out_cap.grad();
    auto gx = x_cap.grad_mut();
    auto cell = [w, c](std::size_t r, std::size_t col) { return (r * w + col) * c; };
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        double cnt = 0.0;
        if (r > 0) cnt += 1.0;
        if (r + 1 < h) cnt += 1.0;
        if (col > 0) cnt += 1.0;
        if (col + 1 < w) cnt += 1.0;
        const double* gc = &g[cell(r, col)];
        auto give = [&](std::size_t rr, std::size_t cc) {
          double* dst = &gx[cell(rr, cc)];
          for (std::size_t k = 0; k < c; ++k) dst[k] += gc[k] / cnt;
        };
        if (r > 0) give(r - 1, col);
        if (r + 1 < h) give(r + 1, col);
        if (col > 0) give(r, col - 1);
        if (col + 1 < w) give(r, col + 1);
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Op kind dispatch

const std::vector<OpKind>& all_op_kinds() {
  static const std::vector<OpKind> kinds = {
      OpKind::kAdd,     OpKind::kSub,           OpKind::kMul,        OpKind::kMatmul,
      OpKind::kRelu,    OpKind::kSigmoid,       OpKind::kSoftmaxLastdim, OpKind::kExp,
      OpKind::kLog,     OpKind::kMean,          OpKind::kSum,        OpKind::kConcatLastdim,
      OpKind::kDot,     OpKind::kL2Distance,    OpKind::kScale,      OpKind::kReshape,
      OpKind::kL2Normalize, OpKind::kAvg4Neighbors,
  };
  return kinds;
}

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmaxLastdim: return "softmax_lastdim";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kConcatLastdim: return "concat_lastdim";
    case OpKind::kDot: return "dot";
    case OpKind::kL2Distance: return "l2_distance";
    case OpKind::kScale: return "scale";
    case OpKind::kReshape: return "reshape";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kAvg4Neighbors: return "avg4_neighbors";
  }
  return "unknown";
}

Tensor forward_op(OpKind kind, std::span<const Tensor> inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string("forward_op(") + op_kind_name(kind) + "): expected " +
                       std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::kAdd: need(2); return add(inputs[0], inputs[1]);
    case OpKind::kSub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::kMul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::kMatmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kRelu: need(1); return relu(inputs[0]);
    case OpKind::kSigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::kSoftmaxLastdim: need(1); return softmax_lastdim(inputs[0]);
    case OpKind::kExp: need(1); return exp(inputs[0]);
    case OpKind::kLog: need(1); return log(inputs[0]);
    case OpKind::kMean: need(1); return mean(inputs[0]);
    case OpKind::kSum: need(1); return sum(inputs[0]);
    case OpKind::kConcatLastdim:
      if (inputs.size() < 2) throw ShapeError("forward_op(concat_lastdim): need >= 2 inputs");
      return concat_lastdim(std::vector<Tensor>(inputs.begin(), inputs.end()));
    case OpKind::kDot: need(2); return dot(inputs[0], inputs[1]);
    case OpKind::kL2Distance: need(2); return l2_distance(inputs[0], inputs[1]);
    case OpKind::kScale: need(2); return scale(inputs[0], inputs[1].scalar_value());
    case OpKind::kReshape: need(1); return reshape(inputs[0], Shape{inputs[0].numel()});
    case OpKind::kL2Normalize: need(1); return l2_normalize(inputs[0]);
    case OpKind::kAvg4Neighbors: need(1); return avg4_neighbors(inputs[0]);
  }
  throw StateError("forward_op: unknown op kind");
}

// ---------------------------------------------------------------------------
// Optimizer and gradient checking

void sgd_step(std::span<Tensor> params, double lr) {
  if (!std::isfinite(lr)) throw DomainError("sgd_step: non-finite learning rate");
  for (auto& p : params) {
    if (!p.requires_grad()) {
      throw StateError("sgd_step: parameter '" + p.name() + "' does not require grad");
    }
    if (!p.has_grad()) {
      throw StateError("sgd_step: parameter '" + p.name() +
                       "' has no gradient (was backward run?)");
    }
  }
  for (auto& p : params) {
    auto v = p.values_mut();
    const auto g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    if (!p.all_finite()) {
      throw DomainError("sgd_step: parameter '" + p.name() + "' became non-finite");
    }
    p.zero_grad();
  }
}

namespace {

double grad_check_impl(const std::function<Tensor()>& recompute_loss, Tensor& x,
                       double epsilon, std::span<const std::size_t> probe) {
  if (!(epsilon > 0.0)) throw DomainError("grad_check: epsilon must be positive");
  if (!x.requires_grad()) throw StateError("grad_check: x does not require grad");

  x.zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor loss = recompute_loss();
    if (loss.numel() != 1) {
      throw ShapeError("grad_check: loss must be scalar, got " + shape_str(loss.shape()));
    }
    tape.run_backward(loss);
    x.ensure_grad();
    analytic.assign(x.grad().begin(), x.grad().end());
  }

  double worst = 0.0;
  {
    TapeSuspend suspend;
    auto xv = x.values_mut();
    for (std::size_t i : probe) {
      const double saved = xv[i];
      xv[i] = saved + epsilon;
      const double up = recompute_loss().scalar_value();
      xv[i] = saved - epsilon;
      const double down = recompute_loss().scalar_value();
      xv[i] = saved;
      const double fd = (up - down) / (2.0 * epsilon);
      const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
      if (!std::isfinite(err)) return std::numeric_limits<double>::infinity();
      worst = std::max(worst, err);
    }
  }
  x.zero_grad();
  return worst;
}

}  // namespace

double grad_check(const std::function<Tensor()>& recompute_loss, Tensor x, double epsilon) {
  std::vector<std::size_t> probe(x.numel());
  for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
  return grad_check_impl(recompute_loss, x, epsilon, probe);
}

double grad_check_sample(const std::function<Tensor()>& recompute_loss, Tensor x,
                         double epsilon, std::size_t max_probes, Rng& rng) {
  if (max_probes == 0) throw DomainError("grad_check_sample: max_probes must be positive");
  std::vector<std::size_t> all(x.numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const std::vector<std::size_t> probe =
      all.size() <= max_probes ? all : rng.sample(all, max_probes);
  return grad_check_impl(recompute_loss, x, epsilon, probe);
}

}  // namespace synref

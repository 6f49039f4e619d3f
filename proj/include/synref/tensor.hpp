#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "synref/error.hpp"
#include "synref/rng.hpp"

namespace synref {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::string name;
  std::uint64_t id = 0;
};
}  // namespace detail

/// Dense float64 tensor, row-major. Value-semantic handle: copies share the
/// underlying node, which is what ties tape records to parameters.
///
/// Scalars use the empty shape {} (numel 1). Gradients are allocated lazily
/// and accumulate additively across backward calls until zeroed.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_values(const Shape& shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;
  bool requires_grad() const;
  void set_requires_grad(bool v);

  std::span<const double> values() const;
  /// Direct mutable access. Intended for initialization and finite-difference
  /// probing; mutating a tensor already recorded on a live tape invalidates
  /// that tape's saved forward values.
  std::span<double> values_mut();
  double value_at(std::size_t flat_index) const;
  double scalar_value() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void ensure_grad();
  void zero_grad();
  void accumulate_grad(std::span<const double> g);

  const std::string& name() const;
  Tensor& set_name(std::string name);
  std::uint64_t id() const;
  bool all_finite() const;
  /// Deep copy of values; fresh node, no grad, never recorded.
  Tensor clone() const;

  friend bool same_node(const Tensor& a, const Tensor& b) { return a.node_ == b.node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
  detail::TensorNode& node() const;
};

/// Ordered record of the primitive operations of one training step.
/// Constructing a Tape makes it the active recording target (stack
/// discipline; tapes nest). Ops record themselves only while a tape is active
/// and some input requires a gradient. A tape is consumed by one backward
/// pass and then discarded; there is no graph reuse.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(const char* op, std::vector<Tensor> inputs, const Tensor& output,
              std::function<void()> backprop);
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and replays records newest-first, touching
  /// each exactly once. Gradients accumulate additively into every recorded
  /// input with requires_grad.
  void run_backward(const Tensor& loss);

 private:
  struct Record {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backprop;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

/// Suspends tape recording on this thread while alive. Finite-difference
/// probes inside grad_check run under this so probe arithmetic never lands on
/// a caller's tape.
class TapeSuspend {
 public:
  TapeSuspend();
  ~TapeSuspend();
  TapeSuspend(const TapeSuspend&) = delete;
  TapeSuspend& operator=(const TapeSuspend&) = delete;

 private:
  Tape* saved_;
};

// Primitive operations. Elementwise add/sub accept equal shapes or a scalar
// with a tensor; mul additionally accepts a [h,w] map with a [h,w,c] volume
// (per-channel broadcast). Anything richer is a ShapeError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// 2-D matrix product [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Softmax along the last dimension, computed with max subtraction. Every
/// slice of the output sums to 1.
Tensor softmax_lastdim(const Tensor& x);
Tensor exp(const Tensor& x);
/// Natural log; DomainError on any nonpositive element.
Tensor log(const Tensor& x);
/// Mean of all elements; scalar output.
Tensor mean(const Tensor& x);
/// Sum of all elements; scalar output.
Tensor sum(const Tensor& x);
/// Concatenate along the last dimension; leading dimensions must match.
Tensor concat_lastdim(const std::vector<Tensor>& parts);
/// Inner product of two 1-D tensors of equal length; scalar output.
Tensor dot(const Tensor& a, const Tensor& b);
/// Euclidean distance ||a - b|| over all elements; scalar output. The
/// subgradient at distance 0 is 0.
Tensor l2_distance(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Same data, new shape; numel must match.
Tensor reshape(const Tensor& x, const Shape& shape);
/// x / ||x|| over all elements; DomainError when ||x|| == 0.
Tensor l2_normalize(const Tensor& x);
/// For a [h,w,c] volume: per cell, the mean of the channel vectors of its
/// in-bounds 4-neighbors (edge cells average over fewer neighbors).
Tensor avg4_neighbors(const Tensor& x);

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kRelu,
  kSigmoid,
  kSoftmaxLastdim,
  kExp,
  kLog,
  kMean,
  kSum,
  kConcatLastdim,
  kDot,
  kL2Distance,
  kScale,
  kReshape,
  kL2Normalize,
  kAvg4Neighbors,
};

const std::vector<OpKind>& all_op_kinds();
const char* op_kind_name(OpKind kind);
/// Uniform dispatcher used by sweep-style tests. kScale reads its factor from
/// a scalar second input; kReshape flattens to 1-D.
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs);

/// Backward through the active tape from a scalar loss.
void backward(const Tensor& loss);

/// p -= lr * grad for every parameter, then zero all their gradients.
/// StateError if any parameter is missing its gradient.
void sgd_step(std::span<Tensor> params, double lr);

/// Compares the tape gradient of `recompute_loss` with central finite
/// differences on every coordinate of x. Returns
///   max_i |g_tape[i] - g_fd[i]| / max(1, |g_fd[i]|),
/// or +inf if anything is non-finite. `recompute_loss` must be deterministic
/// and must read x by handle so in-place probes are visible.
double grad_check(const std::function<Tensor()>& recompute_loss, Tensor x, double epsilon);

/// Same check restricted to a random subset of at most `max_probes`
/// coordinates (all of them when x is small enough). Intended for large
/// parameter tensors where the full sweep is too slow.
double grad_check_sample(const std::function<Tensor()>& recompute_loss, Tensor x, double epsilon,
                         std::size_t max_probes, Rng& rng);

}  // namespace synref

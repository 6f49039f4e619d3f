#pragma once

#include <cstdlib>
#include <functional>
#include <vector>

#include "synref/rng.hpp"
#include "synref/tensor.hpp"

namespace synref::testing {

// Random values bounded away from zero so relu kinks and degenerate norms
// never sit inside a finite-difference probe window.
inline Tensor away_from_zero(Rng& rng, const Shape& shape, double lo, double hi, double margin,
                             bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    x = rng.uniform(lo, hi);
    if (std::abs(x) < margin) x = x < 0 ? x - margin : x + margin;
  }
  return Tensor::from_values(shape, std::move(v), requires_grad);
}

// One random conforming input set for an op kind; every tensor input that can
// carry a gradient does.
inline std::vector<Tensor> make_op_inputs(OpKind kind, Rng& rng) {
  switch (kind) {
    case OpKind::kAdd:
    case OpKind::kSub: {
      if (rng.uniform() < 0.25) {
        return {Tensor::uniform(rng, {2, 3}, -1, 1, true), Tensor::scalar(rng.uniform(-1, 1), true)};
      }
      return {Tensor::uniform(rng, {2, 3}, -1, 1, true), Tensor::uniform(rng, {2, 3}, -1, 1, true)};
    }
    case OpKind::kMul: {
      const double pick = rng.uniform();
      if (pick < 0.2) {
        return {Tensor::scalar(rng.uniform(-1, 1), true), Tensor::uniform(rng, {2, 3}, -1, 1, true)};
      }
      if (pick < 0.5) {
        return {Tensor::uniform(rng, {2, 3}, -1, 1, true),
                Tensor::uniform(rng, {2, 3, 2}, -1, 1, true)};
      }
      return {Tensor::uniform(rng, {2, 3}, -1, 1, true), Tensor::uniform(rng, {2, 3}, -1, 1, true)};
    }
    case OpKind::kMatmul:
      return {Tensor::uniform(rng, {2, 3}, -1, 1, true), Tensor::uniform(rng, {3, 2}, -1, 1, true)};
    case OpKind::kRelu:
      return {away_from_zero(rng, {3, 4}, -1, 1, 0.05, true)};
    case OpKind::kSigmoid:
    case OpKind::kExp:
      return {Tensor::uniform(rng, {3, 4}, -2, 2, true)};
    case OpKind::kLog:
      return {Tensor::uniform(rng, {3, 4}, 0.1, 3.0, true)};
    case OpKind::kSoftmaxLastdim:
      return {Tensor::uniform(rng, {2, 5}, -3, 3, true)};
    case OpKind::kMean:
    case OpKind::kSum:
    case OpKind::kReshape:
      return {Tensor::uniform(rng, {2, 3}, -1, 1, true)};
    case OpKind::kConcatLastdim:
      return {Tensor::uniform(rng, {2, 2}, -1, 1, true), Tensor::uniform(rng, {2, 3}, -1, 1, true)};
    case OpKind::kDot:
      return {Tensor::uniform(rng, {5}, -1, 1, true), Tensor::uniform(rng, {5}, -1, 1, true)};
    case OpKind::kL2Distance:
      return {Tensor::uniform(rng, {2, 3}, 1.0, 2.0, true),
              Tensor::uniform(rng, {2, 3}, -2.0, -1.0, true)};
    case OpKind::kScale:
      return {Tensor::uniform(rng, {2, 3}, -1, 1, true), Tensor::scalar(rng.uniform(-2, 2), false)};
    case OpKind::kL2Normalize:
      return {away_from_zero(rng, {4}, -1.5, 1.5, 0.5, true)};
    case OpKind::kAvg4Neighbors:
      return {Tensor::uniform(rng, {3, 4, 2}, -1, 1, true)};
  }
  throw StateError("make_op_inputs: unknown kind");
}

// Deterministic scalar readout of an op so grad_check has a loss to probe.
// Weights are fixed per trial.
struct OpTrial {
  OpKind kind;
  std::vector<Tensor> inputs;
  Tensor readout_weights;  // undefined when the op output is already scalar

  Tensor loss() const {
    Tensor out = forward_op(kind, std::span<const Tensor>(inputs.data(), inputs.size()));
    if (out.numel() == 1) return reshape(out, Shape{});
    return dot(reshape(out, Shape{out.numel()}), readout_weights);
  }
};

inline OpTrial make_op_trial(OpKind kind, Rng& rng) {
  OpTrial trial;
  trial.kind = kind;
  trial.inputs = make_op_inputs(kind, rng);
  Tensor probe;
  {
    TapeSuspend suspend;
    probe = forward_op(kind, std::span<const Tensor>(trial.inputs.data(), trial.inputs.size()));
  }
  if (probe.numel() > 1) {
    trial.readout_weights = Tensor::uniform(rng, {probe.numel()}, -1, 1, false);
  }
  return trial;
}

}  // namespace synref::testing

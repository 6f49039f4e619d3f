#pragma once

#include <vector>

#include "synref/tensor.hpp"

namespace synref::losses {

// Which objective terms a run trains with, and their hyperparameters. The
// two instance-level forms mirror ablation rows and never run together.
struct LossConfig {
  double alpha = 1.0;  // triplet margin
  double tau = 0.1;    // contrastive temperature
  bool use_det = true;
  bool use_img = true;
  bool use_ins_tri = false;
  bool use_ins_cl = true;
  double det_weight = 1.0;
  double img_weight = 1.0;
  double ins_weight = 1.0;

  bool uses_instance_term() const { return use_ins_tri || use_ins_cl; }
  void validate() const;
};

/// Hinge on response maps: max(d(R, R+) - d(R, R-) + alpha, 0), with d the
/// L2 distance over all map cells. Subgradient at the hinge is 0.
Tensor image_triplet_loss(const Tensor& response, const Tensor& response_pos,
                          const Tensor& response_neg, double alpha);

/// Same hinge on matched-proposal instance feature rows.
Tensor instance_triplet_loss(const Tensor& inst, const Tensor& inst_pos,
                             const Tensor& inst_neg, double alpha);

/// Multi-positive contrastive loss over projected (unit-norm) features:
///   -log[ sum_+ e^{<z,z+>/tau} / (sum_+ e^{<z,z+>/tau} + sum_- e^{<z,z->/tau}) ]
/// computed with detached max-subtraction. Summation order is canonical
/// (ascending term value), so the result is exactly invariant to permuting
/// each set. DomainError on an empty set or tau <= 0.
Tensor contrastive_loss(const Tensor& anchor, const std::vector<Tensor>& positives,
                        const std::vector<Tensor>& negatives, double tau);

/// Cross-entropy of softmax(scores) against the matched proposal index.
/// scores is the [1, K] detection row; DomainError when the index is
/// outside [0, K).
Tensor detection_loss(const Tensor& scores, int target_index);

// Computed terms of one training step; leave a tensor default-constructed
// when the term is disabled.
struct LossParts {
  Tensor det;
  Tensor img;
  Tensor ins;
};

/// Weighted sum of the enabled terms (all weights default to 1). StateError
/// if an enabled term was not computed; a disabled term is ignored even if
/// present. All terms disabled yields a constant 0.
Tensor total_loss(const LossParts& parts, const LossConfig& config);

}  // namespace synref::losses

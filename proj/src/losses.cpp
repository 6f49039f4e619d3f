#include "synref/losses.hpp"

#include <algorithm>
#include <string>

#include "synref/error.hpp"

namespace synref::losses {

void LossConfig::validate() const {
  if (tau <= 0.0) throw DomainError("loss config: tau must be positive");
  if (alpha < 0.0) throw DomainError("loss config: alpha must be nonnegative");
  if (use_ins_tri && use_ins_cl) {
    throw DomainError("loss config: instance triplet and contrastive terms are exclusive");
  }
  if (det_weight < 0.0 || img_weight < 0.0 || ins_weight < 0.0) {
    throw DomainError("loss config: term weights must be nonnegative");
  }
}

namespace {

Tensor triplet_hinge(const Tensor& anchor, const Tensor& pos, const Tensor& neg,
                     double alpha) {
  if (alpha < 0.0) throw DomainError("triplet loss: alpha must be nonnegative");
  const Tensor d_pos = l2_distance(anchor, pos);
  const Tensor d_neg = l2_distance(anchor, neg);
  return relu(add(sub(d_pos, d_neg), Tensor::scalar(alpha)));
}

// Adds scalar terms in ascending value order so the total is independent of
// the caller's set ordering.
Tensor sum_canonical(std::vector<Tensor> terms) {
  std::stable_sort(terms.begin(), terms.end(), [](const Tensor& a, const Tensor& b) {
    return a.scalar_value() < b.scalar_value();
  });
  Tensor acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace

Tensor image_triplet_loss(const Tensor& response, const Tensor& response_pos,
                          const Tensor& response_neg, double alpha) {
  return triplet_hinge(response, response_pos, response_neg, alpha);
}

Tensor instance_triplet_loss(const Tensor& inst, const Tensor& inst_pos,
                             const Tensor& inst_neg, double alpha) {
  return triplet_hinge(inst, inst_pos, inst_neg, alpha);
}

Tensor contrastive_loss(const Tensor& anchor, const std::vector<Tensor>& positives,
                        const std::vector<Tensor>& negatives, double tau) {
  if (tau <= 0.0) throw DomainError("contrastive loss: tau must be positive");
  if (positives.empty()) throw DomainError("contrastive loss: empty positive set");
  if (negatives.empty()) throw DomainError("contrastive loss: empty negative set");

  const Tensor za = reshape(anchor, {anchor.numel()});
  auto scaled_sim = [&](const Tensor& other) {
    return scale(dot(za, reshape(other, {other.numel()})), 1.0 / tau);
  };
  std::vector<Tensor> pos_sims;
  pos_sims.reserve(positives.size());
  for (const Tensor& z : positives) pos_sims.push_back(scaled_sim(z));
  std::vector<Tensor> neg_sims;
  neg_sims.reserve(negatives.size());
  for (const Tensor& z : negatives) neg_sims.push_back(scaled_sim(z));

  double max_sim = pos_sims[0].scalar_value();
  for (const Tensor& s : pos_sims) max_sim = std::max(max_sim, s.scalar_value());
  for (const Tensor& s : neg_sims) max_sim = std::max(max_sim, s.scalar_value());
  const Tensor shift = Tensor::scalar(max_sim);

  auto exp_shifted = [&](std::vector<Tensor>& sims) {
    std::vector<Tensor> terms;
    terms.reserve(sims.size());
    for (const Tensor& s : sims) terms.push_back(exp(sub(s, shift)));
    return terms;
  };
  const Tensor pos_sum = sum_canonical(exp_shifted(pos_sims));
  const Tensor neg_sum = sum_canonical(exp_shifted(neg_sims));
  return sub(log(add(pos_sum, neg_sum)), log(pos_sum));
}

Tensor detection_loss(const Tensor& scores, int target_index) {
  const Shape& s = scores.shape();
  if (s.size() != 2 || s[0] != 1) {
    throw ShapeError("detection_loss: expected [1, K] scores, got " + shape_str(s));
  }
  const std::size_t k = s[1];
  if (target_index < 0 || static_cast<std::size_t>(target_index) >= k) {
    throw DomainError("detection_loss: target index " + std::to_string(target_index) +
                      " outside [0, " + std::to_string(k) + ")");
  }
  const Tensor log_probs = reshape(log(softmax_lastdim(scores)), {k});
  std::vector<double> onehot(k, 0.0);
  onehot[static_cast<std::size_t>(target_index)] = 1.0;
  return scale(dot(log_probs, Tensor::from_values({k}, std::move(onehot))), -1.0);
}

Tensor total_loss(const LossParts& parts, const LossConfig& config) {
  config.validate();
  Tensor acc;
  auto include = [&](const Tensor& part, double weight, const char* name) {
    if (!part.defined()) {
      throw StateError(std::string("total_loss: enabled term not computed: ") + name);
    }
    const Tensor term = weight == 1.0 ? part : scale(part, weight);
    acc = acc.defined() ? add(acc, term) : term;
  };
  if (config.use_det) include(parts.det, config.det_weight, "det");
  if (config.use_img) include(parts.img, config.img_weight, "img");
  if (config.uses_instance_term()) include(parts.ins, config.ins_weight, "ins");
  return acc.defined() ? acc : Tensor::scalar(0.0);
}

}  // namespace synref::losses

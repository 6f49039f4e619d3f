#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "synref/losses.hpp"
#include "synref/rng.hpp"
#include "synref/tensor.hpp"

using namespace synref;
using losses::LossConfig;
using losses::LossParts;

namespace {

Tensor unit_vector(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm_sq = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm_sq += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (auto& x : v) x *= inv;
  return Tensor::from_values({d}, std::move(v));
}

double naive_distance(const Tensor& a, const Tensor& b) {
  double ss = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.value_at(i) - b.value_at(i);
    ss += d * d;
  }
  return std::sqrt(ss);
}

double naive_contrastive(const Tensor& anchor, const std::vector<Tensor>& pos,
                         const std::vector<Tensor>& neg, double tau) {
  auto sim = [&](const Tensor& z) {
    double s = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
      s += anchor.value_at(i) * z.value_at(i);
    }
    return std::exp(s / tau);
  };
  double p = 0.0;
  for (const auto& z : pos) p += sim(z);
  double total = p;
  for (const auto& z : neg) total += sim(z);
  return -std::log(p / total);
}

// Unit vector whose inner product with e1 is exactly `sim`.
Tensor vector_with_sim(double sim, std::size_t d) {
  std::vector<double> v(d, 0.0);
  v[0] = sim;
  v[1] = std::sqrt(1.0 - sim * sim);
  return Tensor::from_values({d}, std::move(v));
}

}  // namespace

// ===========================================================================
// Triplet losses
// ===========================================================================

TEST_CASE("triplet losses reproduce the worked hinge values") {
  const Tensor anchor = Tensor::zeros({2, 2});
  const Tensor pos = Tensor::from_values({2, 2}, {0.2, 0, 0, 0});
  const Tensor neg = Tensor::from_values({2, 2}, {0.9, 0, 0, 0});
  CHECK(losses::image_triplet_loss(anchor, pos, neg, 1.0).scalar_value() ==
        doctest::Approx(0.3).epsilon(1e-12));

  const Tensor h = Tensor::zeros({6});
  const Tensor hp = Tensor::from_values({6}, {0.5, 0, 0, 0, 0, 0});
  const Tensor hn = Tensor::from_values({6}, {0.1, 0, 0, 0, 0, 0});
  CHECK(losses::instance_triplet_loss(h, hp, hn, 1.0).scalar_value() ==
        doctest::Approx(1.4).epsilon(1e-12));
}

TEST_CASE("triplet hinge is inactive when the negative is far enough") {
  const Tensor anchor = Tensor::from_values({3}, {1, 2, 3});
  const Tensor neg = Tensor::from_values({3}, {1, 2, 8});
  CHECK(losses::image_triplet_loss(anchor, anchor, neg, 1.0).scalar_value() == 0.0);

  const Tensor other = Tensor::from_values({3}, {4, 4, 4});
  CHECK(losses::image_triplet_loss(anchor, other, other, 0.0).scalar_value() == 0.0);
}

TEST_CASE("triplet losses match the hand formula on random inputs") {
  Rng rng(211);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const Tensor a = Tensor::uniform(rng, {d}, -2.0, 2.0);
    const Tensor p = Tensor::uniform(rng, {d}, -2.0, 2.0);
    const Tensor n = Tensor::uniform(rng, {d}, -2.0, 2.0);
    const double alpha = rng.uniform(0.0, 2.0);
    const double expect =
        std::max(0.0, naive_distance(a, p) - naive_distance(a, n) + alpha);
    const double got = losses::instance_triplet_loss(a, p, n, alpha).scalar_value();
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    CHECK(got >= 0.0);
    if (naive_distance(a, p) + alpha <= naive_distance(a, n)) CHECK(got == 0.0);
  }
}

TEST_CASE("triplet losses validate shapes and margin") {
  const Tensor a = Tensor::zeros({3});
  CHECK_THROWS_AS(losses::image_triplet_loss(a, Tensor::zeros({4}), a, 1.0),
                  ShapeError);
  CHECK_THROWS_AS(losses::instance_triplet_loss(a, a, a, -0.5), DomainError);
}

TEST_CASE("triplet gradients match finite differences away from the kink") {
  Tensor a = Tensor::from_values({4}, {0.1, -0.2, 0.4, 0.3}, true);
  Tensor p = Tensor::from_values({4}, {0.3, 0.1, 0.2, -0.1}, true);
  Tensor n = Tensor::from_values({4}, {0.2, -0.1, 0.5, 0.25}, true);
  auto loss = [&]() { return losses::instance_triplet_loss(a, p, n, 1.0); };
  REQUIRE(loss().scalar_value() > 0.1);  // hinge clearly active
  CHECK(grad_check(loss, a, 1e-5) < 1e-7);
  CHECK(grad_check(loss, p, 1e-5) < 1e-7);
  CHECK(grad_check(loss, n, 1e-5) < 1e-7);
}

// ===========================================================================
// Contrastive loss
// ===========================================================================

TEST_CASE("contrastive loss with equal similarities is -log(p / (p + n))") {
  // All pairwise similarities are 0: positives and negatives sit on axes
  // orthogonal to the anchor.
  const std::size_t d = 4;
  std::vector<double> a(d, 0.0);
  a[0] = 1.0;
  const Tensor anchor = Tensor::from_values({d}, std::move(a));
  std::vector<Tensor> pos(2, vector_with_sim(0.0, d));
  std::vector<Tensor> neg(6, vector_with_sim(0.0, d));
  const double got = losses::contrastive_loss(anchor, pos, neg, 0.1).scalar_value();
  CHECK(got == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(std::abs(got - 1.386294) < 1e-5);
}

TEST_CASE("contrastive loss matches the naive unshifted formula") {
  Rng rng(223);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(2, 8));
    const Tensor anchor = unit_vector(rng, d);
    std::vector<Tensor> pos;
    std::vector<Tensor> neg;
    const int np = rng.uniform_int(1, 5);
    const int nn = rng.uniform_int(1, 8);
    for (int i = 0; i < np; ++i) pos.push_back(unit_vector(rng, d));
    for (int i = 0; i < nn; ++i) neg.push_back(unit_vector(rng, d));
    const double tau = rng.uniform(0.05, 1.0);
    const double got = losses::contrastive_loss(anchor, pos, neg, tau).scalar_value();
    const double expect = naive_contrastive(anchor, pos, neg, tau);
    CHECK(std::abs(got - expect) < 1e-10);
  }
}

TEST_CASE("contrastive loss saturates to zero for a dominant positive") {
  const std::size_t d = 4;
  std::vector<double> a(d, 0.0);
  a[0] = 1.0;
  const Tensor anchor = Tensor::from_values({d}, std::move(a));
  std::vector<Tensor> pos = {vector_with_sim(1.0, d)};
  std::vector<Tensor> neg(5, vector_with_sim(-1.0, d));
  CHECK(losses::contrastive_loss(anchor, pos, neg, 0.01).scalar_value() < 1e-12);
}

TEST_CASE("contrastive loss is exactly permutation invariant within each set") {
  Rng rng(227);
  const std::size_t d = 5;
  const Tensor anchor = unit_vector(rng, d);
  std::vector<Tensor> pos;
  std::vector<Tensor> neg;
  for (int i = 0; i < 4; ++i) pos.push_back(unit_vector(rng, d));
  for (int i = 0; i < 7; ++i) neg.push_back(unit_vector(rng, d));
  const double base = losses::contrastive_loss(anchor, pos, neg, 0.1).scalar_value();
  for (int shuffle = 0; shuffle < 10; ++shuffle) {
    rng.shuffle(pos);
    rng.shuffle(neg);
    CHECK(losses::contrastive_loss(anchor, pos, neg, 0.1).scalar_value() == base);
  }
}

TEST_CASE("contrastive loss moves monotonically with each similarity") {
  const std::size_t d = 4;
  std::vector<double> a(d, 0.0);
  a[0] = 1.0;
  const Tensor anchor = Tensor::from_values({d}, std::move(a));
  std::vector<Tensor> pos = {vector_with_sim(0.3, d), vector_with_sim(0.1, d)};
  std::vector<Tensor> neg = {vector_with_sim(0.2, d), vector_with_sim(-0.4, d)};
  const double base = losses::contrastive_loss(anchor, pos, neg, 0.1).scalar_value();

  std::vector<Tensor> pos_up = {vector_with_sim(0.5, d), vector_with_sim(0.1, d)};
  CHECK(losses::contrastive_loss(anchor, pos_up, neg, 0.1).scalar_value() < base);

  std::vector<Tensor> neg_up = {vector_with_sim(0.4, d), vector_with_sim(-0.4, d)};
  CHECK(losses::contrastive_loss(anchor, pos, neg_up, 0.1).scalar_value() > base);
}

TEST_CASE("contrastive loss validates its inputs") {
  const Tensor z = vector_with_sim(0.5, 4);
  std::vector<Tensor> some = {z};
  CHECK_THROWS_AS(losses::contrastive_loss(z, {}, some, 0.1), DomainError);
  CHECK_THROWS_AS(losses::contrastive_loss(z, some, {}, 0.1), DomainError);
  CHECK_THROWS_AS(losses::contrastive_loss(z, some, some, 0.0), DomainError);
  std::vector<Tensor> bad = {Tensor::zeros({3})};
  CHECK_THROWS_AS(losses::contrastive_loss(z, some, bad, 0.1), ShapeError);
}

TEST_CASE("contrastive gradients match finite differences") {
  Rng rng(229);
  const std::size_t d = 5;
  Tensor anchor = unit_vector(rng, d);
  anchor.set_requires_grad(true);
  std::vector<Tensor> pos = {unit_vector(rng, d), unit_vector(rng, d)};
  std::vector<Tensor> neg = {unit_vector(rng, d), unit_vector(rng, d),
                             unit_vector(rng, d)};
  pos[0].set_requires_grad(true);
  neg[0].set_requires_grad(true);
  auto loss = [&]() { return losses::contrastive_loss(anchor, pos, neg, 0.1); };
  CHECK(grad_check(loss, anchor, 1e-5) < 1e-7);
  CHECK(grad_check(loss, pos[0], 1e-5) < 1e-7);
  CHECK(grad_check(loss, neg[0], 1e-5) < 1e-7);
}

// ===========================================================================
// Detection loss
// ===========================================================================

TEST_CASE("detection loss on uniform scores is log K") {
  const Tensor scores = Tensor::zeros({1, 20});
  CHECK(losses::detection_loss(scores, 7).scalar_value() ==
        doctest::Approx(std::log(20.0)).epsilon(1e-12));
  CHECK(std::abs(losses::detection_loss(scores, 0).scalar_value() - 2.9957) < 1e-4);
}

TEST_CASE("detection loss vanishes when the target dominates") {
  const Tensor scores = Tensor::from_values({1, 4}, {40.0, 0.0, -1.0, 2.0});
  CHECK(losses::detection_loss(scores, 0).scalar_value() < 1e-12);
}

TEST_CASE("detection loss matches a softmax hand computation") {
  Rng rng(233);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = static_cast<std::size_t>(rng.uniform_int(2, 10));
    const Tensor scores = Tensor::uniform(rng, {1, k}, -3.0, 3.0);
    const int target = rng.uniform_int(0, static_cast<int>(k) - 1);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp(scores.value_at(i));
    const double expect =
        -std::log(std::exp(scores.value_at(static_cast<std::size_t>(target))) / denom);
    CHECK(losses::detection_loss(scores, target).scalar_value() ==
          doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("detection loss validates shape and index") {
  CHECK_THROWS_AS(losses::detection_loss(Tensor::zeros({1, 5}), 5), DomainError);
  CHECK_THROWS_AS(losses::detection_loss(Tensor::zeros({1, 5}), -1), DomainError);
  CHECK_THROWS_AS(losses::detection_loss(Tensor::zeros({5}), 0), ShapeError);
  CHECK_THROWS_AS(losses::detection_loss(Tensor::zeros({2, 5}), 0), ShapeError);
}

TEST_CASE("detection gradients match finite differences") {
  Rng rng(239);
  Tensor scores = Tensor::uniform(rng, {1, 6}, -2.0, 2.0, true);
  auto loss = [&]() { return losses::detection_loss(scores, 2); };
  CHECK(grad_check(loss, scores, 1e-5) < 1e-7);
}

// ===========================================================================
// Total loss
// ===========================================================================

TEST_CASE("total loss sums exactly the enabled terms") {
  LossParts parts;
  parts.det = Tensor::scalar(1.0);
  parts.img = Tensor::scalar(0.3);
  parts.ins = Tensor::scalar(1.39);

  LossConfig full;
  CHECK(losses::total_loss(parts, full).scalar_value() ==
        doctest::Approx(2.69).epsilon(1e-12));

  LossConfig det_only;
  det_only.use_img = false;
  det_only.use_ins_cl = false;
  CHECK(losses::total_loss(parts, det_only).scalar_value() == 1.0);

  LossConfig none = det_only;
  none.use_det = false;
  CHECK(losses::total_loss(parts, none).scalar_value() == 0.0);

  LossConfig weighted;
  weighted.det_weight = 2.0;
  weighted.img_weight = 0.5;
  weighted.ins_weight = 0.0;
  CHECK(losses::total_loss(parts, weighted).scalar_value() ==
        doctest::Approx(2.0 + 0.15).epsilon(1e-12));
}

TEST_CASE("total loss requires every enabled term to be present") {
  LossParts parts;
  parts.det = Tensor::scalar(1.0);
  LossConfig cfg;  // img and ins_cl enabled by default
  CHECK_THROWS_AS(losses::total_loss(parts, cfg), StateError);
}

TEST_CASE("a disabled term contributes no gradient") {
  Tensor a = Tensor::scalar(0.7, true);
  Tensor b = Tensor::scalar(-0.4, true);
  Tape tape;
  LossParts parts;
  parts.det = mul(a, a);
  parts.img = mul(b, b);  // computed but disabled below
  LossConfig cfg;
  cfg.use_img = false;
  cfg.use_ins_tri = false;
  cfg.use_ins_cl = false;
  backward(losses::total_loss(parts, cfg));
  REQUIRE(a.has_grad());
  CHECK(a.grad()[0] == doctest::Approx(1.4).epsilon(1e-12));
  if (b.has_grad()) CHECK(b.grad()[0] == 0.0);
}

TEST_CASE("loss config validation catches every bad combination") {
  LossConfig ok;
  CHECK_NOTHROW(ok.validate());

  LossConfig bad_tau;
  bad_tau.tau = 0.0;
  CHECK_THROWS_AS(bad_tau.validate(), DomainError);

  LossConfig bad_alpha;
  bad_alpha.alpha = -1.0;
  CHECK_THROWS_AS(bad_alpha.validate(), DomainError);

  LossConfig both;
  both.use_ins_tri = true;
  both.use_ins_cl = true;
  CHECK_THROWS_AS(both.validate(), DomainError);

  LossConfig bad_weight;
  bad_weight.img_weight = -0.1;
  CHECK_THROWS_AS(bad_weight.validate(), DomainError);
}

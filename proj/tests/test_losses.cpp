#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "segreg/grad_check.hpp"
#include "segreg/losses.hpp"
#include "segreg/segnet.hpp"

using namespace segreg;
using Td = Tensor<double>;

namespace {

LabelBatch label_map(std::size_t b, std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  return {b, h, w, std::move(v)};
}

// One-hot (B,C+1,H,W) probabilities for a label map.
Td one_hot(const LabelBatch& l, std::size_t channels) {
  const std::size_t plane = l.height * l.width;
  std::vector<double> v(l.batch * channels * plane, 0.0);
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) v[(b * channels + l.values[b * plane + i]) * plane + i] = 1.0;
  return Td({l.batch, channels, l.height, l.width}, v);
}

double dice_oracle(const std::vector<double>& probs, const LabelBatch& l, std::size_t channels) {
  const std::size_t plane = l.height * l.width;
  double acc = 0;
  int present = 0;
  for (std::size_t c = 1; c < channels; ++c) {
    double inter = 0, ps = 0, gs = 0;
    for (std::size_t b = 0; b < l.batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const double p = probs[(b * channels + c) * plane + i];
        const double g = l.values[b * plane + i] == c ? 1.0 : 0.0;
        inter += p * g;
        ps += p;
        gs += g;
      }
    if (gs == 0) continue;
    acc += (2 * inter + 1e-5) / (ps + gs + 1e-5);
    ++present;
  }
  return present ? 1.0 - acc / present : 0.0;
}

double ce_oracle(const std::vector<double>& logits, const LabelBatch& l, std::size_t channels) {
  const std::size_t plane = l.height * l.width;
  double total = 0;
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < channels; ++c) s += std::exp(logits[(b * channels + c) * plane + i]);
      total -= logits[(b * channels + l.values[b * plane + i]) * plane + i] - std::log(s);
    }
  return total / static_cast<double>(l.batch * plane);
}

// Direct double loop over classes and rows.
double invariance_oracle(const std::vector<double>& z, const std::vector<int>& labels, std::size_t d, int C) {
  double acc = 0;
  int present = 0;
  for (int c = 1; c <= C; ++c) {
    std::vector<double> mu(d, 0.0);
    int count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) {
        for (std::size_t k = 0; k < d; ++k) mu[k] += z[i * d + k];
        ++count;
      }
    if (count == 0) continue;
    for (auto& m : mu) m /= count;
    double spread = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c)
        for (std::size_t k = 0; k < d; ++k) spread += (z[i * d + k] - mu[k]) * (z[i * d + k] - mu[k]);
    acc += spread / count;
    ++present;
  }
  return present ? acc / present : 0.0;
}

LatentBatch<double> latents(std::vector<double> z, std::vector<int> labels, std::size_t d, std::size_t C,
                            bool grad = false) {
  LatentBatch<double> b;
  b.embeddings = Td({labels.size(), d}, std::move(z), grad);
  b.labels = std::move(labels);
  b.num_classes = C;
  return b;
}

}  // namespace

TEST(Dice, PerfectOverlapIsZero) {
  auto l = label_map(1, 2, 4, {0, 1, 1, 2, 2, 0, 1, 0});
  EXPECT_LT(dice_loss(one_hot(l, 3), l).item(), 1e-4);
}

TEST(Dice, DisjointIsOne) {
  auto l = label_map(1, 2, 2, {1, 1, 1, 1});
  auto wrong = label_map(1, 2, 2, {2, 2, 2, 2});
  EXPECT_NEAR(dice_loss(one_hot(wrong, 3), l).item(), 1.0, 1e-5);
}

TEST(Dice, HalfOverlap) {
  // Predicted pixels 0..3, true pixels 2..5: intersection 2 of 4 and 4.
  auto l = label_map(1, 1, 8, {0, 0, 1, 1, 1, 1, 0, 0});
  auto pred = label_map(1, 1, 8, {1, 1, 1, 1, 0, 0, 0, 0});
  EXPECT_NEAR(dice_loss(one_hot(pred, 2), l).item(), 0.5, 1e-6);
}

TEST(Dice, NoForegroundGivesZero) {
  auto l = label_map(1, 1, 4, {0, 0, 0, 0});
  auto pred = label_map(1, 1, 4, {1, 1, 0, 0});
  EXPECT_EQ(dice_loss(one_hot(pred, 2), l).item(), 0.0);
}

TEST(Dice, MatchesOracleAndIsPermutationEquivariant) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> cls(0, 2);
  std::normal_distribution<double> normal;
  std::vector<std::uint8_t> v(2 * 16);
  for (auto& x : v) x = static_cast<std::uint8_t>(cls(rng));
  auto l = label_map(2, 4, 4, v);
  std::vector<double> logits(2 * 3 * 16);
  for (auto& x : logits) x = normal(rng);
  auto probs = softmax_channels(Td({2, 3, 4, 4}, logits));
  std::vector<double> pv(probs.data().begin(), probs.data().end());
  const double value = dice_loss(probs, l).item();
  EXPECT_NEAR(value, dice_oracle(pv, l, 3), 1e-12);
  EXPECT_GE(value, 0.0);
  EXPECT_LE(value, 1.0);

  // Same pixel permutation applied to probabilities and labels. Treat the
  // batch as one 32-pixel plane so pixels may move across images.
  std::vector<std::size_t> perm(32);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto flat = [&](std::size_t b, std::size_t i) { return b * 16 + i; };
  std::vector<double> p2(pv.size());
  std::vector<std::uint8_t> l2(32);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 16; ++i) {
      const std::size_t src = perm[flat(b, i)], sb = src / 16, si = src % 16;
      l2[flat(b, i)] = v[src];
      for (std::size_t c = 0; c < 3; ++c) p2[(b * 3 + c) * 16 + i] = pv[(sb * 3 + c) * 16 + si];
    }
  EXPECT_NEAR(dice_loss(Td({2, 3, 4, 4}, p2), label_map(2, 4, 4, l2)).item(), value, 1e-12);
}

TEST(Dice, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  std::vector<double> logits(3 * 16);
  for (auto& x : logits) x = normal(rng);
  auto l = label_map(1, 4, 4, {0, 1, 1, 0, 2, 2, 0, 1, 0, 0, 2, 1, 1, 0, 0, 2});
  auto f = [&](const Td& x) { return dice_loss(softmax_channels(x), l); };
  EXPECT_LT(grad_check(f, Td({1, 3, 4, 4}, logits)), 1e-6);
}

TEST(Dice, ShapeMismatch) {
  auto l = label_map(1, 2, 2, {0, 1, 1, 0});
  EXPECT_THROW(dice_loss(Td::zeros({1, 2, 2, 3}), l), ShapeError);
}

TEST(CrossEntropy, UniformLogits) {
  auto l = label_map(1, 2, 2, {0, 1, 2, 3});
  EXPECT_NEAR(cross_entropy_loss(Td::zeros({1, 4, 2, 2}), l).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginIsNearZero) {
  auto l = label_map(1, 1, 2, {1, 0});
  std::vector<double> logits{0.0, 20.0, 20.0, 0.0};  // channel-major: c0 = {0,20}, c1 = {20,0}
  EXPECT_LT(cross_entropy_loss(Td({1, 2, 1, 2}, logits), l).item(), 1e-8);
}

TEST(CrossEntropy, MeanOfPixelLosses) {
  std::vector<double> logits{0.3, -1.0, 1.2, 0.4};
  auto both = cross_entropy_loss(Td({1, 2, 1, 2}, logits), label_map(1, 1, 2, {0, 1})).item();
  auto a = cross_entropy_loss(Td({1, 2, 1, 1}, {0.3, 1.2}), label_map(1, 1, 1, {0})).item();
  auto b = cross_entropy_loss(Td({1, 2, 1, 1}, {-1.0, 0.4}), label_map(1, 1, 1, {1})).item();
  EXPECT_NEAR(both, (a + b) / 2, 1e-14);
}

TEST(CrossEntropy, MatchesOracleAndGradient) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal(0, 2);
  std::vector<double> logits(2 * 3 * 9);
  for (auto& x : logits) x = normal(rng);
  std::vector<std::uint8_t> v(18);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint8_t>(i % 3);
  auto l = label_map(2, 3, 3, v);
  EXPECT_NEAR(cross_entropy_loss(Td({2, 3, 3, 3}, logits), l).item(), ce_oracle(logits, l, 3), 1e-12);
  auto f = [&](const Td& x) { return cross_entropy_loss(x, l); };
  EXPECT_LT(grad_check(f, Td({2, 3, 3, 3}, logits)), 1e-6);
}

TEST(CrossEntropy, LabelOutOfRange) {
  EXPECT_THROW(cross_entropy_loss(Td::zeros({1, 2, 1, 1}), label_map(1, 1, 1, {2})), ValidationError);
}

TEST(Prototypes, Examples) {
  auto single = prototypes(latents({3.0, -1.0}, {1}, 2, 2));
  ASSERT_TRUE(single.present(1));
  EXPECT_EQ(single.means[1]->data()[0], 3.0);
  EXPECT_EQ(single.means[1]->data()[1], -1.0);
  EXPECT_FALSE(single.present(0));
  EXPECT_FALSE(single.present(2));

  auto pair = prototypes(latents({0.0, 0.0, 2.0, 0.0}, {1, 1}, 2, 2));
  EXPECT_NEAR(pair.means[1]->data()[0], 1.0, 1e-12);
  EXPECT_NEAR(pair.means[1]->data()[1], 0.0, 1e-12);
}

TEST(Prototypes, ExactClassMeans) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  std::vector<double> z(50 * 3);
  std::vector<int> labels(50);
  for (auto& x : z) x = normal(rng);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  auto p = prototypes(latents(z, labels, 3, 2));
  for (int c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < 3; ++k) {
      double m = 0;
      int n = 0;
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == c) m += z[i * 3 + k], ++n;
      EXPECT_NEAR(p.means[c]->data()[k], m / n, 1e-6);
    }
  }
}

TEST(Invariance, Examples) {
  auto same = latents({1.0, 2.0, 1.0, 2.0, 1.0, 2.0}, {1, 1, 1}, 2, 1);
  EXPECT_EQ(invariance_loss(same, prototypes(same)).item(), 0.0);
  auto pair = latents({0.0, 0.0, 2.0, 0.0}, {1, 1}, 2, 1);
  EXPECT_NEAR(invariance_loss(pair, prototypes(pair)).item(), 1.0, 1e-12);
}

TEST(Invariance, AveragesAcrossClasses) {
  // Class 1 spread 1.0, class 2 spread 4.0 (rows (0,0),(4,0): mu=(2,0)).
  auto b = latents({0, 0, 2, 0, 0, 0, 4, 0}, {1, 1, 2, 2}, 2, 2);
  EXPECT_NEAR(invariance_loss(b, prototypes(b)).item(), 2.5, 1e-12);
}

TEST(Invariance, BackgroundIgnored) {
  auto b = latents({0, 0, 2, 0, 100, 3, -50, 7}, {1, 1, 0, 0}, 2, 1);
  EXPECT_NEAR(invariance_loss(b, prototypes(b)).item(), 1.0, 1e-12);
}

TEST(Invariance, NoForegroundWarns) {
  auto b = latents({1, 2, 3, 4}, {0, 0}, 2, 2);
  LossWarnings warn;
  EXPECT_EQ(invariance_loss(b, prototypes(b), &warn).item(), 0.0);
  EXPECT_EQ(warn.empty_foreground, 1u);
}

TEST(Invariance, MatchesDoubleLoopOnRandomBatches) {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng() % 100, d = 1 + rng() % 8;
    const int C = 1 + static_cast<int>(rng() % 3);
    std::vector<double> z(n * d);
    std::vector<int> labels(n);
    for (auto& x : z) x = normal(rng);
    for (auto& l : labels) l = static_cast<int>(rng() % (C + 1));
    auto b = latents(z, labels, d, C);
    EXPECT_NEAR(invariance_loss(b, prototypes(b)).item(), invariance_oracle(z, labels, d, C), 1e-12);
    const double v = invariance_loss(b, prototypes(b)).item();
    EXPECT_GE(v, 0.0);
  }
}

TEST(Invariance, GradientFlowsThroughPrototypes) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal;
  std::vector<double> z(12 * 3);
  for (auto& x : z) x = normal(rng);
  std::vector<int> labels{0, 1, 1, 2, 2, 2, 1, 0, 2, 1, 1, 2};
  auto f = [&](const Td& x) {
    LatentBatch<double> b{x, labels, 2};
    return invariance_loss(b, prototypes(b));
  };
  EXPECT_LT(grad_check(f, Td({12, 3}, z)), 1e-7);
}

TEST(SegRegTotal, EndpointsAndDefault) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  std::vector<double> logits(3 * 16), z(16 * 4);
  for (auto& x : logits) x = normal(rng);
  for (auto& x : z) x = normal(rng);
  auto l = label_map(1, 4, 4, {0, 1, 1, 0, 2, 2, 0, 1, 0, 0, 2, 1, 1, 0, 0, 2});
  std::vector<int> lab(l.values.begin(), l.values.end());
  auto lb = latents(z, lab, 4, 2);
  auto proj = sample_projections(4, 16, 1);
  auto logit_t = Td({1, 3, 4, 4}, logits);
  const double seg = segmentation_loss(logit_t, l).item();
  const double sig = sigreg_loss(lb, proj).item();
  const double inv = invariance_loss(lb, prototypes(lb)).item();

  SegRegWeights w;
  w.lambda = 0.0;
  EXPECT_NEAR(segreg_total(logit_t, lb, l, w, proj).total.item(), seg + inv, 1e-12);
  w.lambda = 1.0;
  EXPECT_NEAR(segreg_total(logit_t, lb, l, w, proj).total.item(), seg + sig, 1e-12);
  w.lambda = 0.05;
  auto r = segreg_total(logit_t, lb, l, w, proj);
  EXPECT_NEAR(r.total.item(), seg + 0.05 * sig + 0.95 * inv, 1e-12);
  EXPECT_NEAR(r.recombined(w), r.total.item(), 1e-12);
  EXPECT_EQ(r.seg, seg);
  EXPECT_EQ(r.sigreg, sig);
  EXPECT_EQ(r.inv, inv);
}

TEST(SegRegTotal, RejectsBadLambda) {
  SegRegWeights w;
  w.lambda = 1.5;
  EXPECT_THROW(w.validate(), ValidationError);
}

TEST(SegRegTotal, ModelGradientMatchesFiniteDifferences) {
  ChannelPlan plan;
  plan.widths = {2, 3, 4, 3, 2};
  auto params = init_params<double>(7, 2, plan);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> img(64);
  for (auto& x : img) x = u(rng);
  Td image({1, 1, 8, 8}, img);
  LabelBatch l{1, 8, 8, std::vector<std::uint8_t>(64, 0)};
  for (std::size_t i = 0; i < 64; ++i) l.values[i] = static_cast<std::uint8_t>((i / 8 < 3) ? 1 : (i % 8 < 4 ? 2 : 0));
  auto proj = sample_projections(plan.latent_dim(), 4, 3);
  SegRegWeights w;
  auto f = [&]() {
    auto out = forward(params, image);
    auto lb = extract_latent_batch(out, l, PixelSampler{64, 1});
    return segreg_total(out.logits, lb, l, w, proj).total;
  };
  EXPECT_LT(grad_check_params(f, params.tensors, 1e-6), 1e-3);
}

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mrfnet/oracle.hpp"

using namespace mrfnet;

namespace {

std::vector<double> softmax(std::vector<double> v) {
  double m = *std::max_element(v.begin(), v.end()), s = 0.0;
  for (double& x : v) s += (x = std::exp(x - m));
  for (double& x : v) x /= s;
  return v;
}

}  // namespace

TEST(ScalarUpdate, ZeroWeightsGiveSoftmaxOfC) {
  const MrfFilterBank w(3, 3, 3);
  const std::vector<NeighbourResponsibility> nb{{0, 1, {0.2, 0.3, 0.5}}, {-1, -1, {0.1, 0.1, 0.8}}};
  const std::vector<double> c{0.3, -1.0, 2.0};
  const auto out = scalar_meanfield_update(nb, c, w);
  const auto ref = softmax(c);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(out[k], ref[k], 1e-15);
}

TEST(ScalarUpdate, UniformNeighboursWithClassConstantWeights) {
  MrfFilterBank w(3, 2, 2);
  for (std::size_t l = 0; l < 2; ++l) {
    w.set(0, l, 0, 1, 0.7 + l);
    w.set(1, l, 0, 1, 0.7 + l);
  }
  const std::vector<NeighbourResponsibility> nb{{-1, 0, {0.5, 0.5}}};
  const std::vector<double> c{0.1, 0.4};
  const auto out = scalar_meanfield_update(nb, c, w);
  EXPECT_NEAR(out[0], softmax(c)[0], 1e-15);
}

TEST(ScalarUpdate, HandCalculationWithFourNeighbours) {
  // K = 2. Cross neighbours only; every weight chosen so the logits are easy to add up.
  MrfFilterBank w(3, 2, 2);
  w.set(0, 0, 0, 1, 1.0);   // up, class 0 -> class 0
  w.set(1, 1, 2, 1, 2.0);   // down, class 1 -> class 1
  w.set(0, 1, 1, 0, -1.0);  // left, neighbour class 1 lowers class 0
  w.set(1, 0, 1, 2, 0.5);   // right, neighbour class 0 raises class 1
  const std::vector<NeighbourResponsibility> nb{
      {-1, 0, {1.0, 0.0}}, {1, 0, {0.25, 0.75}}, {0, -1, {0.5, 0.5}}, {0, 1, {0.8, 0.2}}};
  const std::vector<double> c{0.0, -1.0};
  // logit_0 = 0 + 1.0 * 1.0 + (-1.0) * 0.5 = 0.5
  // logit_1 = -1 + 2.0 * 0.75 + 0.5 * 0.8 = 0.9
  const auto out = scalar_meanfield_update(nb, c, w);
  EXPECT_NEAR(out[0], 1.0 / (1.0 + std::exp(0.4)), 1e-15);
  EXPECT_NEAR(out[1], 1.0 / (1.0 + std::exp(-0.4)), 1e-15);
  EXPECT_THROW(scalar_meanfield_update(std::vector<NeighbourResponsibility>{{0, 0, {0.5, 0.5}}}, c, w),
               ContractError);
}

TEST(ExactPosterior, SinglePixelIsSoftmaxOfC) {
  const Grid2D c(1, 1, 3, std::vector<double>{0.2, -0.4, 1.0});
  const ExactPosterior p(&c, MrfFilterBank(3, 3, 3), {}, 1, 1);
  const auto ref = softmax({0.2, -0.4, 1.0});
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(p.marginals()(0, 0, k), ref[k], 1e-15);
}

TEST(ExactPosterior, IndependentPixelsWithoutCoupling) {
  const Grid2D c(1, 2, 2, std::vector<double>{0.3, -0.3, 1.0, 2.0});
  const ExactPosterior p(&c, MrfFilterBank(3, 2, 2), {}, 1, 2);
  EXPECT_NEAR(p.marginals()(0, 0, 0), softmax({0.3, -0.3})[0], 1e-15);
  EXPECT_NEAR(p.marginals()(0, 1, 1), softmax({1.0, 2.0})[1], 1e-15);
  EXPECT_NEAR(p.kl(p.marginals()), 0.0, 1e-14);
}

TEST(ExactPosterior, TwoByOneHandEnumeration) {
  // Vertical pair, K = 2. W[k, l, (+1, 0)] = B[k][l], W[k, l, (-1, 0)] = B[l][k].
  const double B[2][2] = {{0.6, -0.2}, {0.4, 0.9}};
  MrfFilterBank w(3, 2, 2);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t l = 0; l < 2; ++l) {
      w.set(k, l, 2, 1, B[k][l]);
      w.set(k, l, 0, 1, B[l][k]);
    }
  const Grid2D c(2, 1, 2, std::vector<double>{0.1, -0.3, 0.5, 0.2});
  // Outside terms: the top pixel's upward tap (rows of B^T) and the bottom pixel's downward tap (rows of B),
  // each averaged over the uniform outside class.
  const double top_out[2] = {(0.6 + 0.4) / 2, (-0.2 + 0.9) / 2};
  const double bot_out[2] = {(0.6 - 0.2) / 2, (0.4 + 0.9) / 2};
  double score[2][2], z = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      score[a][b] = std::exp(c(0, 0, a) + c(1, 0, b) + B[a][b] + top_out[a] + bot_out[b]);
      z += score[a][b];
    }
  const ExactPosterior p(&c, w, {}, 2, 1);
  EXPECT_NEAR(p.log_partition(), std::log(z), 1e-14);
  EXPECT_NEAR(p.marginals()(0, 0, 1), (score[1][0] + score[1][1]) / z, 1e-14);
  EXPECT_NEAR(p.marginals()(1, 0, 1), (score[0][1] + score[1][1]) / z, 1e-14);
  LabelField s(2, 1, std::vector<int>{1, 0});
  EXPECT_NEAR(p.log_probability(p.encode(s)), std::log(score[1][0] / z), 1e-14);
}

TEST(ExactPosterior, RefusesOversizedGrids) {
  EXPECT_THROW(ExactPosterior(nullptr, MrfFilterBank(3, 2, 2), {}, 5, 5), ContractError);
  EXPECT_NO_THROW(ExactPosterior(nullptr, MrfFilterBank(3, 2, 2), {}, 2, 3));
}

TEST(ExactPosterior, KlIsNonNegative) {
  std::mt19937_64 rng(1);
  const MrfFilterBank w = random_symmetric_filters(2, 3, 1.0, rng);
  const ExactPosterior p(nullptr, w, {}, 3, 2);
  Grid2D q(3, 2, 2, 0.5);
  EXPECT_GT(p.kl(q), 0.0);
}

TEST(Gibbs, DetailedBalanceOnTwoByTwo) {
  std::mt19937_64 rng(2024);
  const MrfFilterBank w = random_symmetric_filters(2, 3, 0.4, rng);
  const ExactPosterior exact(nullptr, w, {}, 2, 2);
  LabelField z(2, 2);
  for (int i = 0; i < 100; ++i) gibbs_sweep(z, w, rng);
  const std::size_t batches = 1000, per_batch = 1000;
  std::vector<std::vector<double>> batch_freq(16, std::vector<double>(batches, 0.0));
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t s = 0; s < per_batch; ++s) {
      gibbs_sweep(z, w, rng);
      batch_freq[exact.encode(z)][b] += 1.0 / per_batch;
    }
  }
  for (std::uint64_t s = 0; s < 16; ++s) {
    double mean = 0.0, var = 0.0;
    for (double f : batch_freq[s]) mean += f / batches;
    for (double f : batch_freq[s]) var += (f - mean) * (f - mean) / (batches - 1);
    const double se = std::sqrt(var / batches);
    const double p = std::exp(exact.log_probability(s));
    EXPECT_LT(std::abs(mean - p), 3.0 * se + 1e-12) << "state " << s << " p=" << p << " freq=" << mean;
  }
}

TEST(Synthetic, SinglePixelLikelihoodValue) {
  std::mt19937_64 rng(1);
  const LabelField z(1, 1, 0);
  const std::vector<double> means{0.0, 1.0};
  const SyntheticImage img = synth_likelihood(z, means, 1.0, rng);
  const double x = img.x(0, 0, 0);
  EXPECT_NEAR(img.c(0, 0, 0), -0.5 * x * x - 0.5 * std::log(2 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(img.c(0, 0, 1), -0.5 * (x - 1) * (x - 1) - 0.5 * std::log(2 * std::numbers::pi), 1e-15);
}

TEST(Synthetic, AccuracyImprovesAsNoiseShrinks) {
  std::mt19937_64 label_rng(3);
  const LabelField z = gibbs_sample_labels(potts_filters(2, 0.4, 0.15), 48, 48, 50, label_rng);
  double last = 0.0;
  for (double sigma : {2.0, 1.0, 0.5, 0.25}) {
    std::mt19937_64 rng(11);
    const SyntheticImage img = synth_likelihood(z, std::vector<double>{0.0, 1.0}, sigma, rng);
    const LabelField pred = argmax_channels(img.c);
    double acc = 0.0;
    for (std::size_t p = 0; p < z.pixels(); ++p) acc += pred[p] == z[p];
    acc /= static_cast<double>(z.pixels());
    EXPECT_GT(acc, last) << "sigma " << sigma;
    last = acc;
  }
}

TEST(Teachers, PottsAndRandomFiltersAreSymmetric) {
  std::mt19937_64 rng(4);
  EXPECT_TRUE(symmetric_potentials(potts_filters(3, 0.5, 0.2)));
  for (std::size_t ks : {3u, 5u}) EXPECT_TRUE(symmetric_potentials(random_symmetric_filters(3, ks, 1.0, rng)));
  EXPECT_TRUE(random_symmetric_filters(2, 3, 1.0, rng).center_is_zero());
}

TEST(Teachers, NonlinearRelabelRule) {
  // 3x3, K = 2; centre pixel: neighbours contain five 1s -> majority 1,
  // right neighbour 1, down neighbour 0, so (1 + 1 + 0) mod 2 = 0.
  LabelField z(3, 3, std::vector<int>{1, 1, 0,
                                      0, 1, 1,
                                      1, 0, 1});
  EXPECT_EQ(nonlinear_relabel(z, 2)(1, 1), 0);
  LabelField z2 = z;
  z2(1, 1) = 0;  // the rule never reads the pixel itself
  EXPECT_EQ(nonlinear_relabel(z2, 2)(1, 1), 0);
  // Corner (0, 0): outside counts as class 0; neighbours 1, 0, 1 plus five outside -> majority 0;
  // right = 1, down = 0 -> 1.
  EXPECT_EQ(nonlinear_relabel(z, 2)(0, 0), 1);
}

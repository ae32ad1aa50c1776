#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mrfnet/inference.hpp"
#include "mrfnet/oracle.hpp"

using namespace mrfnet;

namespace {

Grid2D random_field(std::size_t h, std::size_t w, std::size_t k, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, scale);
  Grid2D z(h, w, k);
  for (double& v : z.data()) v = n(rng);
  return z;
}

MrfModel linear_with(const MrfFilterBank& w, Mode mode = Mode::generative) {
  ModelConfig cfg;
  cfg.classes = w.out_channels();
  cfg.kernel_size = w.kernel().kh();
  cfg.mode = mode;
  MrfModel m = MrfModel::zeros(cfg);
  m.linear().filters = w;
  return m;
}

}  // namespace

TEST(Coloring, CheckerboardOnlyForTheCross) {
  MrfFilterBank cross(3, 2, 2);
  cross.set(0, 0, 0, 1, 1.0);
  cross.set(0, 0, 1, 0, 1.0);
  EXPECT_NO_THROW(validate_coloring(cross, 2));
  MrfFilterBank full = cross;
  full.set(1, 1, 0, 0, 0.5);  // a diagonal neighbour
  EXPECT_THROW(validate_coloring(full, 2), ContractError);
  EXPECT_NO_THROW(validate_coloring(full, 4));
  EXPECT_THROW(validate_coloring(full, 3), ContractError);
  EXPECT_THROW(validate_coloring(full, 1), ContractError);
  MrfFilterBank wide(5, 2, 2);
  wide.set(0, 0, 0, 2, 1.0);  // offset (-2, 0)
  EXPECT_THROW(validate_coloring(wide, 4), ContractError);
  EXPECT_NO_THROW(validate_coloring(wide, 9));
}

TEST(Coloring, PixelColours) {
  EXPECT_EQ(pixel_color(3, 4, 2), 1u);
  EXPECT_EQ(pixel_color(3, 4, 4), 2u);
  EXPECT_EQ(pixel_color(5, 7, 9), 2u * 3u + 1u);
}

TEST(Elbo, HandExpansionOnTwoPixels) {
  // Row of two pixels, horizontal potentials only: W[k, l, (0, +1)] = A[k][l]
  // and, by symmetry, W[k, l, (0, -1)] = A[l][k].
  const double A[2][2] = {{0.8, -0.3}, {0.1, 0.5}};
  MrfFilterBank w(3, 2, 2);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t l = 0; l < 2; ++l) {
      w.set(k, l, 1, 2, A[k][l]);
      w.set(k, l, 1, 0, A[l][k]);
    }
  ASSERT_TRUE(symmetric_potentials(w));
  const MrfModel m = linear_with(w);
  const Grid2D r(1, 2, 2, std::vector<double>{0.3, 0.7, 0.6, 0.4});
  const Grid2D c(1, 2, 2, std::vector<double>{-1.0, -0.5, -0.2, -2.0});
  // unary: -0.3 - 0.35 - 0.12 - 0.8
  // pair (counted once): r0' A r1 = 0.3 * 0.36 + 0.7 * 0.26
  // outside: pixel 0 left tap 0.3 * 0.9 / 2 + 0.7 * 0.2 / 2; pixel 1 right tap 0.6 * 0.5 / 2 + 0.4 * 0.6 / 2
  const double expected = -1.57 + 0.29 + 0.205 + 0.27 - (0.3 * std::log(0.3) + 0.7 * std::log(0.7)) -
                          (0.6 * std::log(0.6) + 0.4 * std::log(0.4));
  EXPECT_NEAR(elbo_linear(r, &c, m), expected, 1e-14);
}

TEST(Elbo, EqualsLogPartitionMinusExactKl) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const MrfFilterBank w = random_symmetric_filters(2, 3, 0.8, rng);
    const MrfModel m = linear_with(w);
    const Grid2D c = random_field(3, 3, 2, 1.0, rng);
    const Grid2D q = softmax_channels(random_field(3, 3, 2, 1.0, rng));
    const ExactPosterior post = exact_posterior_marginals(&c, m, 3, 3);
    EXPECT_NEAR(elbo_linear(q, &c, m), post.log_partition() - post.kl(q), 1e-10);
  }
}

TEST(MeanField, OneJacobiSweepIsOneLayerApplication) {
  std::mt19937_64 rng(2);
  const MrfModel m = linear_with(random_symmetric_filters(3, 3, 1.0, rng));
  const Grid2D c = random_field(5, 6, 3, 1.0, rng);
  const Grid2D r0 = softmax_channels(c);
  const InferenceResult res = meanfield_run(r0, &c, m, Schedule::jacobi(1));
  EXPECT_EQ(res.field, apply_model(r0, &c, m));
  ASSERT_EQ(res.trace.max_change.size(), 1u);
  EXPECT_DOUBLE_EQ(res.trace.max_change[0], max_abs_difference(r0, res.field));
}

TEST(MeanField, ColoredConvergesToAFixedPoint) {
  std::mt19937_64 rng(3);
  const MrfModel m = linear_with(random_symmetric_filters(2, 3, 0.5, rng));
  const Grid2D c = random_field(8, 8, 2, 1.0, rng);
  Schedule s = Schedule::colored(4, 500);
  s.tolerance = 1e-13;
  const InferenceResult res = meanfield_run(softmax_channels(c), &c, m, s);
  EXPECT_LT(res.trace.max_change.size(), 500u);
  EXPECT_LT(max_abs_difference(apply_model(res.field, &c, m), res.field), 1e-11);
}

TEST(MeanField, ColoredElboNeverDecreasesPerGroup) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const MrfModel m = linear_with(random_symmetric_filters(3, 3, 1.5, rng));
    const Grid2D c = random_field(6, 5, 3, 1.0, rng);
    double last = elbo_linear(softmax_channels(c), &c, m);
    meanfield_run(softmax_channels(c), &c, m, Schedule::colored(4, 8), [&](const Grid2D& r) {
      const double now = elbo_linear(r, &c, m);
      EXPECT_GE(now, last - 1e-10);
      last = now;
    });
  }
}

TEST(MeanField, JacobiAndColoredAgreeWhenBothConverge) {
  // Jacobi is not guaranteed to converge, so only converged pairs are compared
  // and the agreement rate is reported.
  std::mt19937_64 rng(5);
  std::size_t agree = 0, total = 0, converged = 0;
  std::uniform_real_distribution<double> beta(0.05, 0.3);
  for (int trial = 0; trial < 50; ++trial) {
    const MrfModel m = linear_with(potts_filters(2, beta(rng), beta(rng)));
    const Grid2D c = random_field(10, 10, 2, 1.0, rng);
    Schedule jac = Schedule::jacobi(2000), col = Schedule::colored(4, 2000);
    jac.tolerance = col.tolerance = 1e-10;
    const auto a = meanfield_run(softmax_channels(c), &c, m, jac);
    const auto b = meanfield_run(softmax_channels(c), &c, m, col);
    if (a.trace.max_change.back() >= 1e-10 || b.trace.max_change.back() >= 1e-10) continue;
    ++converged;
    const LabelField la = argmax_channels(a.field), lb = argmax_channels(b.field);
    for (std::size_t p = 0; p < la.pixels(); ++p) agree += la[p] == lb[p];
    total += la.pixels();
  }
  ASSERT_GT(converged, 0u);
  const double rate = static_cast<double>(agree) / static_cast<double>(total);
  RecordProperty("converged_problems", static_cast<int>(converged));
  RecordProperty("argmax_agreement", std::to_string(rate));
  std::printf("jacobi/colored: %zu of 50 converged, argmax agreement %.4f\n", converged, rate);
  EXPECT_GE(rate, 0.99);
}

TEST(MeanField, ToleranceStopsEarlyAndDampingIsValidated) {
  std::mt19937_64 rng(6);
  const MrfModel m = linear_with(random_symmetric_filters(2, 3, 0.3, rng));
  const Grid2D c = random_field(4, 4, 2, 1.0, rng);
  Schedule s = Schedule::jacobi(1000);
  s.tolerance = 1e-6;
  EXPECT_LT(meanfield_run(softmax_channels(c), &c, m, s).trace.max_change.size(), 1000u);
  s.damping = 0.0;
  EXPECT_THROW(meanfield_run(softmax_channels(c), &c, m, s), ContractError);
  s.damping = 0.5;
  EXPECT_NO_THROW(meanfield_run(softmax_channels(c), &c, m, s));
}

TEST(MeanField, RejectsInvalidInitialField) {
  ModelConfig cfg;
  const MrfModel m = MrfModel::zeros(cfg);
  const Grid2D c(2, 2, 2);
  EXPECT_THROW(meanfield_run(Grid2D(2, 2, 2, 0.8), &c, m, Schedule::jacobi(1)), ContractError);
}

TEST(MeanField, ElboTraceIsNanWhereUndefined) {
  ModelConfig cfg;
  cfg.variant = Variant::nonlinear;
  cfg.features = 3;
  const MrfModel m = MrfModel::initialize(cfg, 1);
  const Grid2D c(3, 3, 2);
  const auto res = meanfield_run(Grid2D(3, 3, 2, 0.5), &c, m, Schedule::jacobi(2));
  EXPECT_TRUE(std::isnan(res.trace.elbo[0]));
  EXPECT_THROW(elbo_linear(Grid2D(3, 3, 2, 0.5), &c, m), ContractError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <string>

#include "ermc/ermc.hpp"
#include "support.hpp"

using namespace ermc;
using namespace ermc::testing;

namespace {

const LayerDims kSmall{2, 5, 3};

CurveSpec random_curve(std::uint64_t seed, const LayerDims& dims = kSmall) {
  const auto a = random_model(dims, seed);
  const auto b = random_model(dims, seed + 1000);
  const auto c = random_model(dims, seed + 2000);
  return CurveSpec(dims, a.params(), c.params(), b.params());
}

ParamVector axpy(double a, const ParamVector& x, double b, const ParamVector& y) {
  ParamVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(QbcPoint, EndpointsAreBitwise) {
  const auto c = random_curve(1);
  EXPECT_EQ(qbc_point(c, 0.0), c.theta1());
  EXPECT_EQ(qbc_point(c, 1.0), c.theta2());
}

TEST(QbcPoint, MidpointFormula) {
  const auto c = random_curve(2);
  const auto mid = qbc_point(c, 0.5);
  for (std::size_t i = 0; i < mid.size(); ++i) {
    EXPECT_DOUBLE_EQ(mid[i], 0.25 * c.theta1()[i] + 0.5 * c.control()[i] + 0.25 * c.theta2()[i]);
  }
}

TEST(QbcPoint, MidpointControlGivesStraightLine) {
  const auto a = random_model(kSmall, 3);
  const auto b = random_model(kSmall, 4);
  const auto c = CurveSpec::linear(a, b);
  for (double t : {0.0, 0.1, 0.25, 0.5, 0.7, 0.93, 1.0}) {
    const auto line = axpy(1.0 - t, a.params(), t, b.params());
    EXPECT_LT(max_abs_diff(qbc_point(c, t), line), 1e-12) << "t=" << t;
  }
}

TEST(QbcPoint, RejectsParameterOutsideUnitInterval) {
  const auto c = random_curve(5);
  for (double t : {-1e-12, 1.0000001, std::numeric_limits<double>::quiet_NaN()}) {
    try {
      qbc_point(c, t);
      FAIL() << t;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::domain);
    }
  }
}

TEST(QbcPoint, AffineInEachPoint) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c1 = random_curve(100 + trial);
    const auto c2 = random_curve(200 + trial);
    const double a = rng.uniform(-2.0, 3.0);
    const double b = 1.0 - a;
    const double t = rng.uniform();
    const CurveSpec mixed(kSmall, axpy(a, c1.theta1(), b, c2.theta1()),
                          axpy(a, c1.control(), b, c2.control()), axpy(a, c1.theta2(), b, c2.theta2()));
    const auto expect = axpy(a, qbc_point(c1, t), b, qbc_point(c2, t));
    EXPECT_LT(max_abs_diff(qbc_point(mixed, t), expect), 1e-12);

    // Varying the control point alone.
    const CurveSpec only_control(kSmall, c1.theta1(), axpy(a, c1.control(), b, c2.control()), c1.theta2());
    const CurveSpec swapped(kSmall, c1.theta1(), c2.control(), c1.theta2());
    EXPECT_LT(max_abs_diff(qbc_point(only_control, t), axpy(a, qbc_point(c1, t), b, qbc_point(swapped, t))),
              1e-12);
  }
}

TEST(CurveSpec, RejectsMismatchedShapes) {
  const auto a = random_model({2, 4, 2}, 1);
  const auto b = random_model({2, 5, 2}, 2);
  EXPECT_THROW(CurveSpec::linear(a, b), Error);
  EXPECT_THROW(CurveSpec({2, 4, 2}, a.params(), a.params(), b.params()), Error);
}

TEST(ControlGradient, FactorAtSpecialPoints) {
  const ParamVector g(std::vector<double>{1.5, -2.0, 0.25});
  for (double t : {0.0, 1.0}) {
    const auto frozen = control_gradient(t, g);
    for (double v : frozen.values()) EXPECT_EQ(v, 0.0);
  }
  const auto half = control_gradient(0.5, g);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(half[i], 0.5 * g[i]);
}

TEST(ControlGradient, LinearInGradient) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const double t = rng.uniform();
    const double s = rng.uniform(-3.0, 3.0);
    const ParamVector g(random_vector(rng, 7));
    const ParamVector h(random_vector(rng, 7));
    const auto lhs = control_gradient(t, axpy(s, g, 1.0, h));
    const auto rhs = axpy(s, control_gradient(t, g), 1.0, control_gradient(t, h));
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
  }
}

TEST(ControlGradient, MatchesFiniteDifferences) {
  for (int trial = 0; trial < 10; ++trial) {
    const auto curve = random_curve(50 + trial);
    const auto batch = random_batch(6, 2, 3, 70 + trial);
    Rng rng(90 + trial);
    const double t = rng.uniform(0.05, 0.95);
    const auto analytic = control_gradient(t, loss_and_grads(model_at(curve, t), batch).grads.grad_params);
    const auto numeric = central_difference(
        [&](std::span<const double> control) {
          CurveSpec moved = curve;
          std::ranges::copy(control, moved.control().values().begin());
          return loss_and_grads(model_at(moved, t), batch).loss;
        },
        curve.control().storage());
    EXPECT_LT(relative_error(analytic.values(), numeric), 1e-5) << "trial " << trial << " t=" << t;
  }
}

namespace {

CurveTrainConfig small_curve_config(std::size_t epochs) {
  CurveTrainConfig cfg;
  cfg.train.epochs = epochs;
  cfg.train.seed = 9;
  cfg.msd = MsdConfig::make(0.3, 0.1, 5);
  return cfg;
}

}  // namespace

TEST(TrainRobustCurve, ZeroEpochsIsNoOp) {
  const auto curve = random_curve(7, {2, 6, 2});
  const auto data = gen_two_moons(40, 0.1, 1);
  const auto out = train_robust_curve(curve, data, small_curve_config(0));
  EXPECT_EQ(out.curve, curve);
  EXPECT_TRUE(out.loss_trace.empty());
}

TEST(TrainRobustCurve, OnlyTheControlPointMoves) {
  const auto a = train(mlp_init({2, 6, 2}, 1), gen_two_moons(60, 0.1, 1), TrainConfig{.epochs = 3, .attack = {}}).model;
  const auto b = random_model({2, 6, 2}, 2);
  const auto start = CurveSpec::linear(a, b);
  const auto data = gen_two_moons(60, 0.1, 2);
  const auto data_copy = data;
  for (auto objective : {PathObjective::msd_max, PathObjective::summed, PathObjective::clean}) {
    auto cfg = small_curve_config(3);
    cfg.objective = objective;
    const auto out = train_robust_curve(start, data, cfg);
    EXPECT_EQ(out.curve.theta1(), start.theta1());
    EXPECT_EQ(out.curve.theta2(), start.theta2());
    EXPECT_EQ(qbc_point(out.curve, 0.0), a.params());
    EXPECT_EQ(qbc_point(out.curve, 1.0), b.params());
    EXPECT_NE(out.curve.control(), start.control());
    EXPECT_EQ(out.loss_trace.size(), 3u);
    EXPECT_EQ(data, data_copy);

    // Any interior point moves by exactly 2t(1-t) times the control displacement.
    const double t = 0.3;
    const auto before = qbc_point(start, t);
    const auto after = qbc_point(out.curve, t);
    for (std::size_t i = 0; i < before.size(); ++i) {
      const double shift = 2.0 * t * (1.0 - t) * (out.curve.control()[i] - start.control()[i]);
      EXPECT_NEAR(after[i] - before[i], shift, 1e-12);
    }
  }
}

TEST(TrainRobustCurve, DeterministicUnderSeed) {
  const auto curve = random_curve(8, {2, 6, 2});
  const auto data = gen_two_moons(50, 0.1, 3);
  const auto a = train_robust_curve(curve, data, small_curve_config(2));
  const auto b = train_robust_curve(curve, data, small_curve_config(2));
  EXPECT_EQ(a.curve, b.curve);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(TrainRobustCurve, ValidatesConfig) {
  const auto curve = random_curve(9, {2, 6, 2});
  const auto data = gen_two_moons(20, 0.1, 3);
  auto cfg = small_curve_config(1);
  cfg.train.learning_rate = -1.0;
  EXPECT_THROW(train_robust_curve(curve, data, cfg), Error);
  cfg = small_curve_config(1);
  cfg.msd.linf.ball.epsilon = -0.1;
  EXPECT_THROW(train_robust_curve(curve, data, cfg), Error);
  const auto wrong_dim = random_batch(10, 3, 2, 1);
  EXPECT_THROW(train_robust_curve(curve, wrong_dim, small_curve_config(1)), Error);
}

TEST(TrainRobustCurve, DivergenceCarriesEpochBatchAndT) {
  const auto curve = random_curve(10, {2, 6, 2});
  const auto data = gen_two_moons(40, 0.1, 4);
  auto cfg = small_curve_config(3);
  cfg.train.learning_rate = 1e305;
  try {
    train_robust_curve(curve, data, cfg);
    FAIL() << "expected divergence";
  } catch (const DivergedError& e) {
    EXPECT_EQ(e.code(), ErrorCode::diverged);
    EXPECT_EQ(e.epoch(), 0u);
    ASSERT_TRUE(e.batch().has_value());
    ASSERT_TRUE(e.t().has_value());
    // t is the draw for the reported batch from the curve-parameter stream.
    Rng t_rng(derive_seed(cfg.train.seed, stream::curve_t));
    double expected_t = 0.0;
    for (std::size_t b = 0; b <= *e.batch(); ++b) expected_t = t_rng.uniform();
    EXPECT_EQ(*e.t(), expected_t);
  }
}

TEST(TrainPlainCurve, EqualsRobustTrainingWithZeroBudgets) {
  const auto curve = random_curve(11, {2, 6, 2});
  const auto data = gen_two_moons(64, 0.1, 5);
  TrainConfig tc;
  tc.epochs = 4;
  tc.seed = 17;
  const auto plain = train_plain_curve(curve, data, tc);
  CurveTrainConfig robust;
  robust.train = tc;
  robust.msd = MsdConfig::make(0.0, 0.0);
  const auto zero = train_robust_curve(curve, data, robust);
  EXPECT_EQ(plain.curve, zero.curve);
  EXPECT_EQ(plain.loss_trace, zero.loss_trace);
  EXPECT_EQ(plain.curve.theta1(), curve.theta1());
  EXPECT_EQ(plain.curve.theta2(), curve.theta2());
}

namespace {

constexpr int kSeeds = 5;

// Desk-scale endpoints for five seeds, computed once for the path experiments.
class DeskCurve : public ::testing::Test {
 protected:
  struct Run {
    DeskData data;
    DeskEndpoints endpoints;
  };

  static void SetUpTestSuite() {
    runs_ = new std::vector<Run>();
    for (int s = 0; s < kSeeds; ++s) {
      auto data = desk_data(setup(), s);
      auto endpoints = desk_endpoints(setup(), data, s);
      runs_->push_back({std::move(data), std::move(endpoints)});
    }
  }
  static void TearDownTestSuite() {
    delete runs_;
    runs_ = nullptr;
  }

  static const DeskSetup& setup() {
    static const DeskSetup s;
    return s;
  }

  static double max_clean_loss(const CurveSpec& c, const LabeledBatch& data) {
    double worst = 0.0;
    for (double t : t_grid(setup().grid)) {
      worst = std::max(worst, loss_and_grads(model_at(c, t), data).loss);
    }
    return worst;
  }

  static std::vector<Run>* runs_;
};

std::vector<DeskCurve::Run>* DeskCurve::runs_ = nullptr;

}  // namespace

TEST_F(DeskCurve, PlainTrainingLowersTheLossBarrier) {
  std::vector<double> change;
  for (int s = 0; s < kSeeds; ++s) {
    const auto& run = (*runs_)[static_cast<std::size_t>(s)];
    const auto linear = CurveSpec::linear(run.endpoints.linf, run.endpoints.l1);
    TrainConfig tc = desk_train_config(setup(), s);
    tc.epochs = setup().curve_epochs;
    const auto trained = train_plain_curve(linear, run.data.train, tc).curve;
    EXPECT_EQ(trained.theta1(), linear.theta1());
    EXPECT_EQ(trained.theta2(), linear.theta2());
    change.push_back(max_clean_loss(trained, run.data.test) - max_clean_loss(linear, run.data.test));
  }
  EXPECT_LE(median(change), 0.0);
}

TEST_F(DeskCurve, RobustPathRaisesTheWorstCaseFloor) {
  std::vector<double> gain;
  for (int s = 0; s < kSeeds; ++s) {
    const auto& run = (*runs_)[static_cast<std::size_t>(s)];
    const auto linear = CurveSpec::linear(run.endpoints.linf, run.endpoints.l1);
    const auto robust = desk_robust_curve(setup(), run.data, run.endpoints, s);
    EXPECT_EQ(qbc_point(robust, 0.0), run.endpoints.linf.params());
    EXPECT_EQ(qbc_point(robust, 1.0), run.endpoints.l1.params());
    const auto suite = desk_suite(setup());
    gain.push_back(sweep_path(robust, run.data.test, setup().grid, suite).min_worst_case() -
                   sweep_path(linear, run.data.test, setup().grid, suite).min_worst_case());
  }
  std::string per_seed;
  for (double g : gain) per_seed += " " + std::to_string(g);
  EXPECT_GT(median(gain), 0.0) << "per-seed gain:" << per_seed;
}

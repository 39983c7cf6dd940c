#include "stdr/stdr.hpp"

#include <gtest/gtest.h>

#include "support/finite_diff.hpp"

namespace {

using namespace stdr;

TEST(TemporalSmoothness, ConstantRowsGiveZero) {
  MatX logits = MatX::Constant(5, 3, 1.7);
  auto [loss, grad] = temporal_smoothness_loss(logits);
  EXPECT_EQ(loss, 0.0);
  EXPECT_EQ(grad.norm(), 0.0);
}

TEST(TemporalSmoothness, HandValue) {
  // sigmoids (0.2, 0.7): loss = (0.2 - 0.7)^2 = 0.25
  MatX logits(2, 1);
  logits << logit(0.2), logit(0.7);
  auto [loss, grad] = temporal_smoothness_loss(logits);
  EXPECT_NEAR(loss, 0.25, 1e-12);
}

TEST(TemporalSmoothness, AveragesOverGaussiansAndPairs) {
  // four gap terms: 0.25, 0, 0.25, 0 -> mean 0.125; invariant to duplicating
  // the cloud, so the penalty does not grow with gaussian count
  MatX logits(3, 2);
  logits.col(0) << logit(0.2), logit(0.7), logit(0.7);
  logits.col(1) << logit(0.2), logit(0.7), logit(0.7);
  auto [loss, grad] = temporal_smoothness_loss(logits);
  EXPECT_NEAR(loss, 0.125, 1e-12);

  MatX doubled(3, 4);
  doubled << logits, logits;
  EXPECT_NEAR(temporal_smoothness_loss(doubled).first, loss, 1e-12);
}

TEST(TemporalSmoothness, TimeReversalInvariant) {
  Rng rng(4);
  MatX logits(6, 8);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-3, 3);
  const MatX reversed = logits.colwise().reverse();
  EXPECT_NEAR(temporal_smoothness_loss(logits).first, temporal_smoothness_loss(reversed).first,
              1e-12);
}

TEST(TemporalSmoothness, GradientMatchesFiniteDifferences) {
  Rng rng(21);
  MatX logits(4, 6);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-2, 2);
  auto loss = [&] { return temporal_smoothness_loss(logits).first; };
  const MatX analytic = temporal_smoothness_loss(logits).second;
  const auto res =
      testsupport::check_gradient(loss, logits.data(), analytic.data(), (int)logits.size());
  EXPECT_LE(res.max_rel_err, testsupport::kGradTol) << res.describe();
}

TEST(TemporalSmoothness, RejectsSingleTimestamp) {
  EXPECT_THROW(temporal_smoothness_loss(MatX::Zero(1, 4)), InvalidInput);
}

Eigen::MatrixXi two_point_knn() {
  Eigen::MatrixXi knn(1, 2);
  knn << 1, 0;
  return knn;
}

TEST(SpatialAwareness, IdenticalRowsGiveZero) {
  MatX logits = MatX::Constant(4, 2, 0.3);
  Rng rng(1);
  auto [loss, grad] = spatial_awareness_loss(logits, two_point_knn(), 1000, 20000, rng);
  EXPECT_NEAR(loss, 0.0, 1e-15);
  EXPECT_LE(grad.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SpatialAwareness, HandValueSinglePair) {
  // p = (0.75, 0.25) against q = (0.5, 0.5):
  // KL = 0.75 ln 1.5 + 0.25 ln 0.5
  MatX logits(2, 2);
  logits.col(0) << std::log(3.0), 0.0;
  logits.col(1) << 0.0, 0.0;
  Rng rng(1);
  auto [loss, grad] = spatial_awareness_loss(logits, two_point_knn(), 2, /*pair_cap=*/1, rng);
  const double expected = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  EXPECT_NEAR(loss, expected, 1e-12);
  EXPECT_NEAR(loss, 0.13081, 1e-5);
}

TEST(SpatialAwareness, NonNegativeUpToClampError) {
  Rng scene(77);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 12, k = 4;
    MatX logits(5, n);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = scene.uniform(-6, 6);
    Eigen::Matrix3Xd pts(3, n);
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = scene.uniform(-1, 1);
    const Eigen::MatrixXi knn = build_knn(pts, k);
    Rng rng(trial);
    auto [loss, grad] = spatial_awareness_loss(logits, knn, 1000, 20000, rng);
    EXPECT_GE(loss, -1e-9);
  }
}

TEST(SpatialAwareness, AveragesOverPairsAndRespectsCap) {
  MatX logits(2, 3);
  logits.col(0) << std::log(3.0), 0.0;
  logits.col(1) << 0.0, 0.0;
  logits.col(2) << std::log(3.0), 0.0;
  Eigen::MatrixXi knn(2, 3);
  knn << 1, 0, 0,
         2, 2, 1;
  // pairs in order: (0,1) kl=a, (0,2) kl=0, (1,0) kl=b, ...
  const double a = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  const double b = 0.5 * std::log(2.0 / 3.0) + 0.5 * std::log(2.0);
  Rng r1(1), r2(1), r3(1);
  EXPECT_NEAR(spatial_awareness_loss(logits, knn, 3, 1, r1).first, a, 1e-12);
  EXPECT_NEAR(spatial_awareness_loss(logits, knn, 3, 2, r2).first, a / 2.0, 1e-12);
  EXPECT_NEAR(spatial_awareness_loss(logits, knn, 3, 3, r3).first, (a + b) / 3.0, 1e-12);
}

TEST(SpatialAwareness, DeterministicSampling) {
  Rng scene(9);
  const int n = 40;
  MatX logits(4, n);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = scene.uniform(-2, 2);
  Eigen::Matrix3Xd pts(3, n);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = scene.uniform(-1, 1);
  const Eigen::MatrixXi knn = build_knn(pts, 3);

  Rng ra(123), rb(123), rc(124);
  const double la = spatial_awareness_loss(logits, knn, 10, 20000, ra).first;
  const double lb = spatial_awareness_loss(logits, knn, 10, 20000, rb).first;
  const double lc = spatial_awareness_loss(logits, knn, 10, 20000, rc).first;
  EXPECT_EQ(la, lb);
  EXPECT_NE(la, lc);  // different subsample
}

TEST(SpatialAwareness, GradientMatchesFiniteDifferences) {
  Rng scene(15);
  const int n = 10;
  MatX logits(4, n);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = scene.uniform(-2, 2);
  Eigen::Matrix3Xd pts(3, n);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = scene.uniform(-1, 1);
  const Eigen::MatrixXi knn = build_knn(pts, 3);

  auto loss = [&] {
    Rng rng(55);
    return spatial_awareness_loss(logits, knn, n, 20000, rng).first;
  };
  Rng rng(55);
  const MatX analytic = spatial_awareness_loss(logits, knn, n, 20000, rng).second;
  const auto res =
      testsupport::check_gradient(loss, logits.data(), analytic.data(), (int)logits.size());
  EXPECT_LE(res.max_rel_err, testsupport::kGradTol) << res.describe();
}

TEST(Schedule, PhaseBoundaries) {
  const ScheduleBounds b;
  EXPECT_EQ(schedule_phase(0, b).tag, PhaseTag::WarmUp);
  EXPECT_EQ(schedule_phase(2999, b).tag, PhaseTag::WarmUp);
  EXPECT_EQ(schedule_phase(3000, b).tag, PhaseTag::Regularized);
  EXPECT_EQ(schedule_phase(5999, b).tag, PhaseTag::Regularized);
  EXPECT_EQ(schedule_phase(6000, b).tag, PhaseTag::Frozen);
  EXPECT_EQ(schedule_phase(1000000, b).tag, PhaseTag::Frozen);
  EXPECT_THROW(schedule_phase(-1, b), InvalidInput);
}

TEST(Schedule, PhaseFlags) {
  const ScheduleBounds b;
  const SchedulePhase w = schedule_phase(100, b);
  EXPECT_TRUE(w.regularizers_active);
  EXPECT_FALSE(w.opacity_trainable);
  EXPECT_TRUE(w.masks_trainable);
  EXPECT_FALSE(w.deformation_active);
  EXPECT_FALSE(w.nets_trainable);

  const SchedulePhase r = schedule_phase(4500, b);
  EXPECT_TRUE(r.regularizers_active);
  EXPECT_TRUE(r.opacity_trainable);
  EXPECT_TRUE(r.masks_trainable);
  EXPECT_TRUE(r.deformation_active);
  EXPECT_TRUE(r.nets_trainable);

  const SchedulePhase f = schedule_phase(7000, b);
  EXPECT_FALSE(f.regularizers_active);
  EXPECT_TRUE(f.opacity_trainable);
  EXPECT_FALSE(f.masks_trainable);
  EXPECT_TRUE(f.deformation_active);
  EXPECT_TRUE(f.nets_trainable);
}

TEST(Schedule, MonotoneAndConfigurable) {
  ScheduleBounds b;
  b.warm_up_end = 10;
  b.reg_end = 20;
  int last = -1;
  for (int i = 0; i < 40; ++i) {
    const int tag = (int)schedule_phase(i, b).tag;
    EXPECT_GE(tag, last);
    last = tag;
  }
  ScheduleBounds bad;
  bad.warm_up_end = 30;
  bad.reg_end = 20;
  EXPECT_THROW(schedule_phase(0, bad), InvalidInput);
}

SepFieldSpec small_sep_spec(bool bn) {
  SepFieldSpec s;
  s.timestamps = 4;
  s.pe_bands = 3;
  s.zs_width = 6;
  s.zt_width = 5;
  s.branch_hidden = 7;
  s.batch_norm = bn;
  s.dropout_rate = 0.0;
  return s;
}

TEST(SepField, ShapesAndRanges) {
  const SepFieldSpec spec = small_sep_spec(false);
  Rng rng(2);
  SepFieldParams params = init_sep_field(spec, rng);
  MatX x(3, 9);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  MatX logits(4, 9);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-2, 2);
  const MatX probs = softmax_columns(logits);

  const SepBatch out = sep_field_forward(spec, params, x, probs, Mode::Eval);
  EXPECT_EQ(out.z_s.rows(), 6);
  EXPECT_EQ(out.z_t.rows(), 5);
  EXPECT_EQ(out.p_dyn.size(), 9);
  for (Eigen::Index i = 0; i < out.z_t.size(); ++i) {
    EXPECT_GT(out.z_t.data()[i], -1.0);
    EXPECT_LT(out.z_t.data()[i], 1.0);
  }
  for (Eigen::Index i = 0; i < 9; ++i) {
    EXPECT_GT(out.p_dyn[i], 0.0);
    EXPECT_LT(out.p_dyn[i], 1.0);
  }
}

TEST(SepField, IdenticalInputsGiveIdenticalFeatures) {
  const SepFieldSpec spec = small_sep_spec(false);
  Rng rng(6);
  SepFieldParams params = init_sep_field(spec, rng);
  MatX x(3, 2);
  x.col(0) = Vec3(0.3, -0.2, 0.9);
  x.col(1) = x.col(0);
  MatX probs = MatX::Constant(4, 2, 0.25);
  const SepBatch out = sep_field_forward(spec, params, x, probs, Mode::Eval);
  EXPECT_EQ(out.z_s.col(0), out.z_s.col(1));
  EXPECT_EQ(out.z_t.col(0), out.z_t.col(1));
  EXPECT_EQ(out.p_dyn[0], out.p_dyn[1]);
}

TEST(SepField, RejectsInvalidProbabilities) {
  const SepFieldSpec spec = small_sep_spec(false);
  Rng rng(6);
  SepFieldParams params = init_sep_field(spec, rng);
  MatX x = MatX::Zero(3, 1);
  MatX probs = MatX::Constant(4, 1, 0.3);  // sums to 1.2
  EXPECT_THROW(sep_field_forward(spec, params, x, probs, Mode::Eval), InvalidInput);
}

// Through the softmax, trunk, and both branches at once.
TEST(SepField, GradientThroughWholeBranchMatchesFiniteDifferences) {
  for (const bool bn : {false, true}) {
    const SepFieldSpec spec = small_sep_spec(bn);
    const Mode mode = bn ? Mode::Train : Mode::Eval;
    Rng rng(31);
    SepFieldParams params0 = init_sep_field(spec, rng);
    const int n = 6;
    MatX x(3, n);
    MatX logits(4, n);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-1.5, 1.5);
    MatX wzs(spec.zs_width, n), wzt(spec.zt_width, n);
    Eigen::RowVectorXd wpd(n);
    for (Eigen::Index i = 0; i < wzs.size(); ++i) wzs.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < wzt.size(); ++i) wzt.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < n; ++i) wpd[i] = rng.normal();

    auto loss = [&] {
      SepFieldParams local = params0;
      const SepBatch out =
          sep_field_forward(spec, local, x, softmax_columns(logits), mode);
      return (out.z_s.array() * wzs.array()).sum() + (out.z_t.array() * wzt.array()).sum() +
             (out.p_dyn.array() * wpd.array()).sum();
    };

    SepFieldParams work = params0;
    SepContext ctx;
    const MatX probs = softmax_columns(logits);
    sep_field_forward(spec, work, x, probs, mode, nullptr, &ctx);
    SepFieldGrads grads;
    const SepBackwardResult back =
        sep_field_backward(spec, params0, ctx, wzs, wzt, wpd, grads);
    const MatX dlogits = softmax_columns_backward(probs, back.dprobs);

    auto rx = testsupport::check_gradient(loss, x.data(), back.dx.data(), (int)x.size());
    EXPECT_LE(rx.max_rel_err, testsupport::kGradTol) << "bn=" << bn << " x: " << rx.describe();
    auto rm =
        testsupport::check_gradient(loss, logits.data(), dlogits.data(), (int)logits.size());
    EXPECT_LE(rm.max_rel_err, testsupport::kGradTol) << "bn=" << bn << " mask: " << rm.describe();
    auto rw = testsupport::check_gradient(loss, params0.shared.w[0].data(),
                                          grads.shared.w[0].data(),
                                          (int)params0.shared.w[0].size());
    EXPECT_LE(rw.max_rel_err, testsupport::kGradTol)
        << "bn=" << bn << " shared w0: " << rw.describe();
    auto rt = testsupport::check_gradient(loss, params0.temporal.w[1].data(),
                                          grads.temporal.w[1].data(),
                                          (int)params0.temporal.w[1].size());
    EXPECT_LE(rt.max_rel_err, testsupport::kGradTol)
        << "bn=" << bn << " temporal w1: " << rt.describe();
    auto rd = testsupport::check_gradient(loss, params0.dynamic_head.w[0].data(),
                                          grads.dynamic_head.w[0].data(),
                                          (int)params0.dynamic_head.w[0].size());
    EXPECT_LE(rd.max_rel_err, testsupport::kGradTol)
        << "bn=" << bn << " dynamic w0: " << rd.describe();
  }
}

}  // namespace

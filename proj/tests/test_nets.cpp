#include "stdr/nets.hpp"

#include <gtest/gtest.h>

#include "support/finite_diff.hpp"

namespace {

using namespace stdr;

// Independent long-double forward pass for nets without batch norm or
// dropout.
MatX forward_reference(const MlpSpec& spec, const MlpParams& p, const MatX& x) {
  std::vector<std::vector<long double>> a(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    a[c].assign(x.rows(), 0.0L);
    for (Eigen::Index r = 0; r < x.rows(); ++r) a[c][r] = x(r, c);
  }
  for (int l = 0; l < spec.layers(); ++l) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      std::vector<long double> z(p.w[l].rows(), 0.0L);
      for (Eigen::Index i = 0; i < p.w[l].rows(); ++i) {
        long double acc = p.b[l][i];
        for (Eigen::Index j = 0; j < p.w[l].cols(); ++j)
          acc += (long double)p.w[l](i, j) * a[c][j];
        switch (spec.activations[l]) {
          case Activation::Identity: break;
          case Activation::ReLU: acc = acc > 0 ? acc : 0; break;
          case Activation::Tanh: acc = std::tanh(acc); break;
          case Activation::Sigmoid: acc = 1.0L / (1.0L + std::exp(-acc)); break;
        }
        z[i] = acc;
      }
      a[c] = std::move(z);
    }
  }
  MatX out(spec.output_width(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    for (Eigen::Index r = 0; r < out.rows(); ++r) out(r, c) = (double)a[c][r];
  return out;
}

MlpSpec plain_spec() {
  MlpSpec s;
  s.widths = {4, 7, 5, 3};
  s.activations = {Activation::ReLU, Activation::Tanh, Activation::Identity};
  return s;
}

TEST(MlpInit, SeededAndBounded) {
  const MlpSpec spec = plain_spec();
  Rng r1(42), r2(42), r3(43);
  const MlpParams a = init_mlp(spec, r1);
  const MlpParams b = init_mlp(spec, r2);
  const MlpParams c = init_mlp(spec, r3);
  for (int l = 0; l < spec.layers(); ++l) {
    EXPECT_EQ(a.w[l], b.w[l]);
    EXPECT_NE(a.w[l], c.w[l]);
    EXPECT_EQ(a.b[l].norm(), 0.0);
    const double bound = 1.0 / std::sqrt((double)spec.widths[l]);
    EXPECT_LE(a.w[l].cwiseAbs().maxCoeff(), bound);
  }
  Rng r4(42);
  const MlpParams z = init_mlp(spec, r4, /*zero_final=*/true);
  EXPECT_EQ(z.w.back().norm(), 0.0);
  EXPECT_EQ(z.w[0], a.w[0]);
}

TEST(MlpForward, MatchesHighPrecisionReference) {
  const MlpSpec spec = plain_spec();
  Rng rng(7);
  MlpParams p = init_mlp(spec, rng);
  MatX x(4, 9);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-2, 2);
  const MatX got = mlp_forward(spec, p, x, Mode::Eval);
  const MatX want = forward_reference(spec, p, x);
  EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(MlpForward, EvalModeIsPure) {
  MlpSpec spec = plain_spec();
  spec.batch_norm = true;
  spec.dropout_rate = 0.3;
  Rng rng(11);
  MlpParams p = init_mlp(spec, rng);
  p.running_mean[0].setConstant(0.2);
  p.running_var[0].setConstant(1.7);
  const MlpParams snapshot = p;
  MatX x = MatX::Ones(4, 1);
  const MatX y1 = mlp_forward(spec, p, x, Mode::Eval);
  const MatX y2 = mlp_forward(spec, p, x, Mode::Eval);
  EXPECT_EQ(y1, y2);
  for (size_t l = 0; l < p.running_mean.size(); ++l) {
    EXPECT_EQ(p.running_mean[l], snapshot.running_mean[l]);
    EXPECT_EQ(p.running_var[l], snapshot.running_var[l]);
  }
}

TEST(MlpForward, InputValidation) {
  MlpSpec spec = plain_spec();
  Rng rng(1);
  MlpParams p = init_mlp(spec, rng);
  EXPECT_THROW(mlp_forward(spec, p, MatX::Zero(3, 1), Mode::Eval), InvalidInput);

  spec.batch_norm = true;
  MlpParams q = init_mlp(spec, rng);
  // train-mode batch norm needs at least two samples
  EXPECT_THROW(mlp_forward(spec, q, MatX::Zero(4, 1), Mode::Train, &rng), InvalidInput);
}

TEST(MlpBackward, FiniteDifferencesPlainNet) {
  MlpSpec spec;
  spec.widths = {3, 6, 4, 2};
  spec.activations = {Activation::Tanh, Activation::Tanh, Activation::Identity};
  Rng rng(23);
  MlpParams p = init_mlp(spec, rng);
  MatX x(3, 5);
  MatX wsum(2, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.5, 1.5);
  for (Eigen::Index i = 0; i < wsum.size(); ++i) wsum.data()[i] = rng.normal();

  auto loss = [&] {
    MlpParams local = p;  // eval path never mutates, copy is belt and braces
    return (mlp_forward(spec, local, x, Mode::Eval).array() * wsum.array()).sum();
  };

  MlpContext ctx;
  mlp_forward(spec, p, x, Mode::Eval, nullptr, &ctx);
  MlpGrads grads;
  const MatX dx = mlp_backward(spec, p, ctx, wsum, grads);

  for (int l = 0; l < spec.layers(); ++l) {
    auto rw = testsupport::check_gradient(loss, p.w[l].data(), grads.w[l].data(),
                                          (int)p.w[l].size());
    EXPECT_LE(rw.max_rel_err, testsupport::kGradTol) << "w" << l << ": " << rw.describe();
    auto rb = testsupport::check_gradient(loss, p.b[l].data(), grads.b[l].data(),
                                          (int)p.b[l].size());
    EXPECT_LE(rb.max_rel_err, testsupport::kGradTol) << "b" << l << ": " << rb.describe();
  }
  auto rx = testsupport::check_gradient(loss, x.data(), dx.data(), (int)x.size());
  EXPECT_LE(rx.max_rel_err, testsupport::kGradTol) << "x: " << rx.describe();
}

TEST(MlpBatchNorm, TrainNormalizesAndTracksRunningStats) {
  MlpSpec spec;
  spec.widths = {3, 8, 2};
  spec.activations = {Activation::Identity, Activation::Identity};
  spec.batch_norm = true;
  Rng rng(3);
  MlpParams p = init_mlp(spec, rng);
  MatX x(3, 32);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-3, 3);

  MlpContext ctx;
  mlp_forward(spec, p, x, Mode::Train, &rng, &ctx);
  for (Eigen::Index r = 0; r < 8; ++r) {
    EXPECT_NEAR(ctx.xhat[0].row(r).mean(), 0.0, 1e-12);
    const double var = ctx.xhat[0].row(r).array().square().mean();
    const double batch_var = ctx.bn_var[0][r];
    EXPECT_NEAR(var, batch_var / (batch_var + kBatchNormEps), 1e-12);
  }
  // running = 0.9 * init + 0.1 * batch
  for (Eigen::Index r = 0; r < 8; ++r) {
    EXPECT_NEAR(p.running_mean[0][r], 0.1 * ctx.bn_mean[0][r], 1e-12);
    EXPECT_NEAR(p.running_var[0][r], 0.9 * 1.0 + 0.1 * ctx.bn_var[0][r], 1e-12);
  }
}

TEST(MlpBatchNorm, TrainBackwardFiniteDifferences) {
  MlpSpec spec;
  spec.widths = {3, 5, 2};
  spec.activations = {Activation::Tanh, Activation::Identity};
  spec.batch_norm = true;
  Rng rng(19);
  MlpParams p0 = init_mlp(spec, rng);
  MatX x(3, 8);
  MatX wsum(2, 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  for (Eigen::Index i = 0; i < wsum.size(); ++i) wsum.data()[i] = rng.normal();

  // copy before every forward so running-stat updates never leak between
  // finite-difference evaluations
  auto loss = [&] {
    MlpParams local = p0;
    return (mlp_forward(spec, local, x, Mode::Train).array() * wsum.array()).sum();
  };

  MlpParams work = p0;
  MlpContext ctx;
  mlp_forward(spec, work, x, Mode::Train, nullptr, &ctx);
  MlpGrads grads;
  const MatX dx = mlp_backward(spec, p0, ctx, wsum, grads);

  for (int l = 0; l < spec.layers(); ++l) {
    auto rw = testsupport::check_gradient(loss, p0.w[l].data(), grads.w[l].data(),
                                          (int)p0.w[l].size());
    EXPECT_LE(rw.max_rel_err, testsupport::kGradTol) << "w" << l << ": " << rw.describe();
  }
  auto rg = testsupport::check_gradient(loss, p0.gamma[0].data(), grads.gamma[0].data(),
                                        (int)p0.gamma[0].size());
  EXPECT_LE(rg.max_rel_err, testsupport::kGradTol) << "gamma: " << rg.describe();
  auto rbeta = testsupport::check_gradient(loss, p0.beta[0].data(), grads.beta[0].data(),
                                           (int)p0.beta[0].size());
  EXPECT_LE(rbeta.max_rel_err, testsupport::kGradTol) << "beta: " << rbeta.describe();
  auto rx = testsupport::check_gradient(loss, x.data(), dx.data(), (int)x.size());
  EXPECT_LE(rx.max_rel_err, testsupport::kGradTol) << "x: " << rx.describe();
}

TEST(MlpDropout, MaskValuesAndSeededReplay) {
  MlpSpec spec;
  spec.widths = {2, 64, 1};
  spec.activations = {Activation::ReLU, Activation::Identity};
  spec.dropout_rate = 0.5;
  Rng rng(5);
  MlpParams p = init_mlp(spec, rng);
  MatX x = MatX::Ones(2, 4);

  Rng d1(99), d2(99);
  MlpContext c1, c2;
  const MatX y1 = mlp_forward(spec, p, x, Mode::Train, &d1, &c1);
  const MatX y2 = mlp_forward(spec, p, x, Mode::Train, &d2, &c2);
  EXPECT_EQ(y1, y2);
  ASSERT_GT(c1.dropout_mask[0].size(), 0);
  int zeros = 0;
  for (Eigen::Index i = 0; i < c1.dropout_mask[0].size(); ++i) {
    const double m = c1.dropout_mask[0].data()[i];
    EXPECT_TRUE(m == 0.0 || m == 2.0);
    zeros += m == 0.0;
  }
  EXPECT_GT(zeros, 0);
  EXPECT_LT(zeros, c1.dropout_mask[0].size());
  // eval ignores dropout entirely
  const MatX ye1 = mlp_forward(spec, p, x, Mode::Eval);
  const MatX ye2 = mlp_forward(spec, p, x, Mode::Eval);
  EXPECT_EQ(ye1, ye2);
}

TEST(MlpDropout, BackwardRoutesThroughMask) {
  MlpSpec spec;
  spec.widths = {2, 6, 1};
  spec.activations = {Activation::Tanh, Activation::Identity};
  spec.dropout_rate = 0.4;
  Rng rng(8);
  MlpParams p = init_mlp(spec, rng);
  MatX x(2, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);

  // re-seed per evaluation so finite differences see a fixed mask
  auto loss = [&] {
    Rng drop(777);
    MlpParams local = p;
    return mlp_forward(spec, local, x, Mode::Train, &drop).sum();
  };

  Rng drop(777);
  MlpParams work = p;
  MlpContext ctx;
  const MatX y = mlp_forward(spec, work, x, Mode::Train, &drop, &ctx);
  MlpGrads grads;
  const MatX dx = mlp_backward(spec, p, ctx, MatX::Ones(y.rows(), y.cols()), grads);

  auto rw = testsupport::check_gradient(loss, p.w[0].data(), grads.w[0].data(),
                                        (int)p.w[0].size());
  EXPECT_LE(rw.max_rel_err, testsupport::kGradTol) << rw.describe();
  auto rx = testsupport::check_gradient(loss, x.data(), dx.data(), (int)x.size());
  EXPECT_LE(rx.max_rel_err, testsupport::kGradTol) << rx.describe();
}

TEST(PositionalEncoding, HandValuesAndGradient) {
  MatX v(1, 1);
  v(0, 0) = 0.25;
  const MatX e = positional_encoding(v, 2);
  ASSERT_EQ(e.rows(), 4);
  EXPECT_NEAR(e(0, 0), std::sin(kPi * 0.25), 1e-15);
  EXPECT_NEAR(e(1, 0), std::cos(kPi * 0.25), 1e-15);
  EXPECT_NEAR(e(2, 0), std::sin(2 * kPi * 0.25), 1e-15);
  EXPECT_NEAR(e(3, 0), std::cos(2 * kPi * 0.25), 1e-15);

  Rng rng(13);
  MatX x(3, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  MatX w(positional_encoding_width(3, 5), 4);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  auto loss = [&] { return (positional_encoding(x, 5).array() * w.array()).sum(); };
  const MatX dv = positional_encoding_backward(x, 5, w);
  const auto res = testsupport::check_gradient(loss, x.data(), dv.data(), (int)x.size());
  EXPECT_LE(res.max_rel_err, testsupport::kGradTol) << res.describe();
}

TEST(Adam, FirstStepsHaveUnitDirection) {
  // constant gradient 1: bias correction makes every early step -lr
  AdamConfig cfg;
  cfg.lr = 0.01;
  AdamState st;
  st.init(1);
  double p = 0.0, g = 1.0;
  adam_step(&p, &g, 1, st, cfg);
  EXPECT_NEAR(p, -0.01, 1e-12);
  adam_step(&p, &g, 1, st, cfg);
  EXPECT_NEAR(p, -0.02, 1e-12);
  EXPECT_EQ(st.step, 2);
}

TEST(Adam, MinimizesQuadratic) {
  AdamConfig cfg;
  cfg.lr = 0.1;
  AdamState st;
  st.init(1);
  double p = -4.0;
  for (int i = 0; i < 2000; ++i) {
    const double g = 2.0 * (p - 3.0);
    adam_step(&p, &g, 1, st, cfg);
  }
  EXPECT_NEAR(p, 3.0, 1e-6);
}

TEST(Adam, StateSizeMismatchRejected) {
  AdamState st;
  st.init(2);
  double p[3] = {0, 0, 0}, g[3] = {1, 1, 1};
  EXPECT_THROW(adam_step(p, g, 3, st, AdamConfig{}), InvalidInput);
}

}  // namespace

#pragma once

#include "stdr/core.hpp"

#include <vector>

namespace stdr {

enum class Activation { Identity, ReLU, Tanh, Sigmoid };

enum class Mode { Train, Eval };

constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

// Fully connected stack. widths = [in, h1, ..., out]; activations has one
// entry per affine layer. Batch norm and dropout, when enabled, apply to
// hidden layers only, in the order affine, batch norm, activation, dropout.
struct MlpSpec {
  std::vector<int> widths;
  std::vector<Activation> activations;
  bool batch_norm = false;
  double dropout_rate = 0.0;

  int layers() const { return (int)widths.size() - 1; }
  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }

  void validate() const {
    require(widths.size() >= 2, "mlp: need at least one layer");
    require(activations.size() == widths.size() - 1, "mlp: one activation per layer");
    for (int w : widths) require(w >= 1, "mlp: layer widths must be positive");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "mlp: dropout rate must be in [0, 1)");
  }
};

struct MlpParams {
  std::vector<MatX> w;  // out x in
  std::vector<VecX> b;
  // per hidden layer, present only when batch_norm is on
  std::vector<VecX> gamma, beta, running_mean, running_var;
};

struct MlpGrads {
  std::vector<MatX> w;
  std::vector<VecX> b;
  std::vector<VecX> gamma, beta;

  void resize_like(const MlpParams& p) {
    w.resize(p.w.size());
    b.resize(p.b.size());
    for (size_t l = 0; l < p.w.size(); ++l) {
      w[l].setZero(p.w[l].rows(), p.w[l].cols());
      b[l].setZero(p.b[l].size());
    }
    gamma.resize(p.gamma.size());
    beta.resize(p.beta.size());
    for (size_t l = 0; l < p.gamma.size(); ++l) {
      gamma[l].setZero(p.gamma[l].size());
      beta[l].setZero(p.beta[l].size());
    }
  }
  void zero() {
    for (auto& m : w) m.setZero();
    for (auto& v : b) v.setZero();
    for (auto& v : gamma) v.setZero();
    for (auto& v : beta) v.setZero();
  }
};

// Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)) filled in storage order, zero
// biases. zero_final clears the last layer so the stack starts as the zero
// function.
inline MlpParams init_mlp(const MlpSpec& spec, Rng& rng, bool zero_final = false) {
  spec.validate();
  MlpParams p;
  const int nl = spec.layers();
  p.w.resize(nl);
  p.b.resize(nl);
  for (int l = 0; l < nl; ++l) {
    const int fan_in = spec.widths[l];
    const int fan_out = spec.widths[l + 1];
    const double bound = 1.0 / std::sqrt((double)fan_in);
    p.w[l].resize(fan_out, fan_in);
    for (Eigen::Index i = 0; i < p.w[l].size(); ++i)
      p.w[l].data()[i] = rng.uniform(-bound, bound);
    p.b[l] = VecX::Zero(fan_out);
  }
  if (zero_final) p.w[nl - 1].setZero();
  if (spec.batch_norm) {
    const int hidden = nl - 1;
    p.gamma.resize(hidden);
    p.beta.resize(hidden);
    p.running_mean.resize(hidden);
    p.running_var.resize(hidden);
    for (int l = 0; l < hidden; ++l) {
      const int w = spec.widths[l + 1];
      p.gamma[l] = VecX::Ones(w);
      p.beta[l] = VecX::Zero(w);
      p.running_mean[l] = VecX::Zero(w);
      p.running_var[l] = VecX::Ones(w);
    }
  }
  return p;
}

struct MlpContext {
  Mode mode = Mode::Eval;
  std::vector<MatX> inputs;    // a_l, input to affine layer l
  std::vector<MatX> act_in;    // value fed to the activation
  std::vector<MatX> act_out;   // activation output, before dropout
  std::vector<MatX> xhat;      // batch-norm normalized value (hidden, bn only)
  std::vector<VecX> bn_mean, bn_var;  // train-mode batch statistics
  std::vector<MatX> dropout_mask;     // empty when unused
};

inline double activate(Activation a, double u) {
  switch (a) {
    case Activation::Identity: return u;
    case Activation::ReLU: return u > 0.0 ? u : 0.0;
    case Activation::Tanh: return std::tanh(u);
    case Activation::Sigmoid: return sigmoid(u);
  }
  return u;
}

inline double activate_grad(Activation a, double u, double out) {
  switch (a) {
    case Activation::Identity: return 1.0;
    case Activation::ReLU: return u > 0.0 ? 1.0 : 0.0;
    case Activation::Tanh: return 1.0 - out * out;
    case Activation::Sigmoid: return out * (1.0 - out);
  }
  return 1.0;
}

// Forward over a batch (columns are samples). Train mode updates batch-norm
// running statistics in place and draws dropout masks from rng; eval mode
// mutates nothing and needs no rng. Batch statistics use the biased
// variance, for normalization and for the running estimate alike.
inline MatX mlp_forward(const MlpSpec& spec, MlpParams& params, const MatX& x, Mode mode,
                        Rng* rng = nullptr, MlpContext* ctx = nullptr) {
  spec.validate();
  require(x.rows() == spec.input_width(), "mlp: input width mismatch");
  require(x.cols() >= 1, "mlp: empty batch");
  const int nl = spec.layers();
  const Eigen::Index batch = x.cols();
  const bool drops = spec.dropout_rate > 0.0 && mode == Mode::Train;
  if (drops) require(rng != nullptr, "mlp: dropout in train mode needs an rng");
  if (spec.batch_norm && mode == Mode::Train)
    require(batch >= 2, "mlp: batch norm in train mode needs batch >= 2");

  if (ctx) {
    *ctx = MlpContext{};
    ctx->mode = mode;
    ctx->inputs.resize(nl);
    ctx->act_in.resize(nl);
    ctx->act_out.resize(nl);
    ctx->xhat.resize(nl);
    ctx->bn_mean.resize(nl);
    ctx->bn_var.resize(nl);
    ctx->dropout_mask.resize(nl);
  }

  MatX a = x;
  for (int l = 0; l < nl; ++l) {
    const bool hidden = l < nl - 1;
    if (ctx) ctx->inputs[l] = a;
    MatX z = params.w[l] * a;
    z.colwise() += params.b[l];

    if (hidden && spec.batch_norm) {
      if (mode == Mode::Train) {
        const VecX mean = z.rowwise().mean();
        MatX centered = z.colwise() - mean;
        const VecX var = centered.array().square().rowwise().mean().matrix();
        const VecX inv_std = (var.array() + kBatchNormEps).rsqrt().matrix();
        MatX xh = (centered.array().colwise() * inv_std.array()).matrix();
        params.running_mean[l] =
            (1.0 - kBatchNormMomentum) * params.running_mean[l] + kBatchNormMomentum * mean;
        params.running_var[l] =
            (1.0 - kBatchNormMomentum) * params.running_var[l] + kBatchNormMomentum * var;
        if (ctx) {
          ctx->bn_mean[l] = mean;
          ctx->bn_var[l] = var;
          ctx->xhat[l] = xh;
        }
        z = ((xh.array().colwise() * params.gamma[l].array()).colwise() + params.beta[l].array()).matrix();
      } else {
        const VecX inv_std = (params.running_var[l].array() + kBatchNormEps).rsqrt().matrix();
        MatX xh = ((z.colwise() - params.running_mean[l]).array().colwise() * inv_std.array()).matrix();
        if (ctx) ctx->xhat[l] = xh;
        z = ((xh.array().colwise() * params.gamma[l].array()).colwise() + params.beta[l].array()).matrix();
      }
    }
    if (ctx) ctx->act_in[l] = z;

    MatX h(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i)
      h.data()[i] = activate(spec.activations[l], z.data()[i]);
    if (ctx) ctx->act_out[l] = h;

    if (hidden && drops) {
      MatX mask(h.rows(), h.cols());
      const double keep_scale = 1.0 / (1.0 - spec.dropout_rate);
      for (Eigen::Index i = 0; i < mask.size(); ++i)
        mask.data()[i] = rng->uniform() >= spec.dropout_rate ? keep_scale : 0.0;
      h.array() *= mask.array();
      if (ctx) ctx->dropout_mask[l] = std::move(mask);
    }
    a = std::move(h);
  }
  return a;
}

// Reverse pass; requires the context captured by the matching forward.
// Gradients are written into `grads` (resized and zeroed here); returns
// dL/dX.
inline MatX mlp_backward(const MlpSpec& spec, const MlpParams& params, const MlpContext& ctx,
                         const MatX& dy, MlpGrads& grads) {
  const int nl = spec.layers();
  require((int)ctx.inputs.size() == nl, "mlp: context does not match spec");
  grads.resize_like(params);

  MatX da = dy;
  for (int l = nl - 1; l >= 0; --l) {
    const bool hidden = l < nl - 1;
    const Eigen::Index batch = ctx.inputs[l].cols();

    if (hidden && ctx.dropout_mask[l].size() > 0) da.array() *= ctx.dropout_mask[l].array();

    MatX du(da.rows(), da.cols());
    for (Eigen::Index i = 0; i < da.size(); ++i)
      du.data()[i] = da.data()[i] * activate_grad(spec.activations[l], ctx.act_in[l].data()[i],
                                                  ctx.act_out[l].data()[i]);

    MatX dz;
    if (hidden && spec.batch_norm) {
      grads.gamma[l] += (du.array() * ctx.xhat[l].array()).rowwise().sum().matrix();
      grads.beta[l] += du.rowwise().sum();
      const MatX dxhat = (du.array().colwise() * params.gamma[l].array()).matrix();
      if (ctx.mode == Mode::Train) {
        const VecX inv_std = (ctx.bn_var[l].array() + kBatchNormEps).rsqrt().matrix();
        // standard batch statistics backward
        const VecX sum_dxhat = dxhat.rowwise().sum();
        const VecX sum_dxhat_xhat = (dxhat.array() * ctx.xhat[l].array()).rowwise().sum().matrix();
        dz = (dxhat * (double)batch).colwise() - sum_dxhat;
        dz.array() -= ctx.xhat[l].array().colwise() * sum_dxhat_xhat.array();
        dz.array() *= (inv_std / (double)batch).replicate(1, batch).array();
      } else {
        const VecX inv_std = (params.running_var[l].array() + kBatchNormEps).rsqrt().matrix();
        dz = (dxhat.array().colwise() * inv_std.array()).matrix();
      }
    } else {
      dz = std::move(du);
    }

    grads.w[l] += dz * ctx.inputs[l].transpose();
    grads.b[l] += dz.rowwise().sum();
    da = params.w[l].transpose() * dz;
  }
  return da;
}

// Sinusoidal positional encoding. For each input dimension d and band
// k < bands: sin(2^k pi v_d), cos(2^k pi v_d), interleaved.
inline Eigen::Index positional_encoding_width(Eigen::Index dims, int bands) {
  return dims * 2 * bands;
}

inline MatX positional_encoding(const MatX& v, int bands) {
  require(bands >= 1, "positional encoding: need at least one band");
  MatX out(positional_encoding_width(v.rows(), bands), v.cols());
  for (Eigen::Index c = 0; c < v.cols(); ++c)
    for (Eigen::Index d = 0; d < v.rows(); ++d)
      for (int k = 0; k < bands; ++k) {
        const double arg = std::ldexp(kPi, k) * v(d, c);
        out(d * 2 * bands + 2 * k, c) = std::sin(arg);
        out(d * 2 * bands + 2 * k + 1, c) = std::cos(arg);
      }
  return out;
}

inline MatX positional_encoding_backward(const MatX& v, int bands, const MatX& dout) {
  MatX dv = MatX::Zero(v.rows(), v.cols());
  for (Eigen::Index c = 0; c < v.cols(); ++c)
    for (Eigen::Index d = 0; d < v.rows(); ++d)
      for (int k = 0; k < bands; ++k) {
        const double f = std::ldexp(kPi, k);
        const double arg = f * v(d, c);
        dv(d, c) += f * (std::cos(arg) * dout(d * 2 * bands + 2 * k, c) -
                         std::sin(arg) * dout(d * 2 * bands + 2 * k + 1, c));
      }
  return dv;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

struct AdamState {
  VecX m, v;
  std::int64_t step = 0;

  void init(Eigen::Index n) {
    m = VecX::Zero(n);
    v = VecX::Zero(n);
    step = 0;
  }
};

// One bias-corrected Adam update over a flat parameter block.
inline void adam_step(double* param, const double* grad, Eigen::Index n, AdamState& state,
                      const AdamConfig& cfg) {
  require(state.m.size() == n && state.v.size() == n, "adam: state size mismatch");
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, (double)state.step);
  const double c2 = 1.0 - std::pow(cfg.beta2, (double)state.step);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace stdr

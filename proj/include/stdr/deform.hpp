#pragma once

#include "stdr/cloud.hpp"
#include "stdr/stdr.hpp"

namespace stdr {

// Residual deformation field. Input is encoded position, the separated
// spatial/temporal features, and encoded normalized time; output rows are
// (dx 3, dr 4, ds 3) plus optional color and opacity-logit residual
// channels. use_features=false drops the feature block entirely (baseline
// mode, position and time only).
struct DeformSpec {
  int pe_bands_pos = 6;
  int pe_bands_time = 4;
  int zs_width = 32;
  int zt_width = 32;
  int hidden = 64;
  int layers = 6;  // affine layer count, final one linear
  bool use_features = true;
  bool deform_color = false;
  bool deform_alpha = false;
  bool p_dyn_gating = true;

  int input_width() const {
    int w = (int)positional_encoding_width(3, pe_bands_pos) +
            (int)positional_encoding_width(1, pe_bands_time);
    if (use_features) w += zs_width + zt_width;
    return w;
  }
  int output_width() const {
    return 10 + (deform_color ? 3 : 0) + (deform_alpha ? 1 : 0);
  }

  MlpSpec mlp_spec() const {
    MlpSpec s;
    s.widths.push_back(input_width());
    for (int l = 0; l < layers - 1; ++l) s.widths.push_back(hidden);
    s.widths.push_back(output_width());
    s.activations.assign(layers - 1, Activation::ReLU);
    s.activations.push_back(Activation::Identity);
    return s;
  }

  void validate() const {
    require(layers >= 1 && hidden >= 1, "deformation field: bad architecture");
    require(pe_bands_pos >= 1 && pe_bands_time >= 1, "deformation field: bad encoding");
  }
};

inline MlpParams init_deform_field(const DeformSpec& spec, Rng& rng) {
  spec.validate();
  // zero-initialized output layer: the field starts as the identity
  return init_mlp(spec.mlp_spec(), rng, /*zero_final=*/true);
}

struct DeformContext {
  MlpContext mlp;
  MatX x;        // 3 x N
  double t = 0;  // normalized timestamp
  MatX raw;      // pre-gating output
  Eigen::RowVectorXd p_dyn;
  bool gated = false;
};

// Deltas for the whole cloud at one normalized timestamp, output_width x N.
inline MatX deform_forward(const DeformSpec& spec, MlpParams& params, const MatX& x,
                           const MatX& z_s, const MatX& z_t, const Eigen::RowVectorXd& p_dyn,
                           double t, Mode mode, Rng* rng = nullptr,
                           DeformContext* ctx = nullptr) {
  spec.validate();
  require(x.rows() == 3, "deformation field: positions must be 3 x N");
  require(t >= 0.0 && t <= 1.0, "deformation field: normalized time must be in [0, 1]");
  const Eigen::Index n = x.cols();
  if (spec.use_features) {
    require(z_s.rows() == spec.zs_width && z_s.cols() == n, "deformation field: z_s shape");
    require(z_t.rows() == spec.zt_width && z_t.cols() == n, "deformation field: z_t shape");
  }
  const bool gate = spec.p_dyn_gating && spec.use_features;
  if (gate) require(p_dyn.size() == n, "deformation field: p_dyn length");

  const Eigen::Index pe_x = positional_encoding_width(3, spec.pe_bands_pos);
  const Eigen::Index pe_t = positional_encoding_width(1, spec.pe_bands_time);
  MatX input(spec.input_width(), n);
  input.topRows(pe_x) = positional_encoding(x, spec.pe_bands_pos);
  Eigen::Index row = pe_x;
  if (spec.use_features) {
    input.middleRows(row, spec.zs_width) = z_s;
    row += spec.zs_width;
    input.middleRows(row, spec.zt_width) = z_t;
    row += spec.zt_width;
  }
  MatX tmat(1, 1);
  tmat(0, 0) = t;
  input.middleRows(row, pe_t) = positional_encoding(tmat, spec.pe_bands_time).replicate(1, n);

  MatX raw = mlp_forward(spec.mlp_spec(), params, input, mode, rng, ctx ? &ctx->mlp : nullptr);
  if (ctx) {
    ctx->x = x;
    ctx->t = t;
    ctx->raw = raw;
    ctx->gated = gate;
    ctx->p_dyn = gate ? p_dyn : Eigen::RowVectorXd();
  }
  if (gate) {
    for (Eigen::Index i = 0; i < n; ++i) raw.col(i) *= p_dyn[i];
  }
  return raw;
}

struct DeformBackwardResult {
  MatX dx;    // 3 x N
  MatX dz_s;  // zs x N (zero-size when features disabled)
  MatX dz_t;
  Eigen::RowVectorXd dp_dyn;
  double dt = 0.0;
};

inline DeformBackwardResult deform_backward(const DeformSpec& spec, const MlpParams& params,
                                            const DeformContext& ctx, const MatX& ddeltas,
                                            MlpGrads& grads) {
  const Eigen::Index n = ctx.x.cols();
  DeformBackwardResult res;
  MatX draw = ddeltas;
  if (ctx.gated) {
    res.dp_dyn.setZero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      res.dp_dyn[i] = ddeltas.col(i).dot(ctx.raw.col(i));
      draw.col(i) *= ctx.p_dyn[i];
    }
  } else {
    res.dp_dyn.setZero(n);
  }

  const MatX dinput = mlp_backward(spec.mlp_spec(), params, ctx.mlp, draw, grads);

  const Eigen::Index pe_x = positional_encoding_width(3, spec.pe_bands_pos);
  const Eigen::Index pe_t = positional_encoding_width(1, spec.pe_bands_time);
  res.dx = positional_encoding_backward(ctx.x, spec.pe_bands_pos, dinput.topRows(pe_x));
  Eigen::Index row = pe_x;
  if (spec.use_features) {
    res.dz_s = dinput.middleRows(row, spec.zs_width);
    row += spec.zs_width;
    res.dz_t = dinput.middleRows(row, spec.zt_width);
    row += spec.zt_width;
  }
  MatX tmat(1, 1);
  tmat(0, 0) = ctx.t;
  // the encoded time block was broadcast across the batch
  const MatX dtep = dinput.middleRows(row, pe_t).rowwise().sum();
  res.dt = positional_encoding_backward(tmat, spec.pe_bands_time, dtep)(0, 0);
  return res;
}

// Per-timestamp parameters produced by a deformation; the canonical cloud
// is never touched.
struct TimeParams {
  Eigen::Matrix3Xd position;
  Eigen::Matrix4Xd rotation;  // renormalized
  Eigen::Matrix3Xd log_scale;
  Eigen::Matrix3Xd color_logit;
  Eigen::RowVectorXd opacity_logit;
};

struct TimeParamGrads {
  Eigen::Matrix3Xd position;
  Eigen::Matrix4Xd rotation;
  Eigen::Matrix3Xd log_scale;
  Eigen::Matrix3Xd color_logit;
  Eigen::RowVectorXd opacity_logit;

  void resize(Eigen::Index n) {
    position.setZero(3, n);
    rotation.setZero(4, n);
    log_scale.setZero(3, n);
    color_logit.setZero(3, n);
    opacity_logit.setZero(n);
  }
};

inline TimeParams identity_time_params(const GaussianCloud& cloud) {
  return {cloud.position, cloud.rotation, cloud.log_scale, cloud.color_logit,
          cloud.opacity_logit};
}

inline TimeParams apply_deformation(const GaussianCloud& cloud, const MatX& deltas,
                                    const DeformSpec& spec) {
  const Eigen::Index n = cloud.size();
  require(deltas.rows() == spec.output_width() && deltas.cols() == n,
          "apply deformation: delta shape mismatch");
  TimeParams out;
  out.position = cloud.position + deltas.topRows(3);
  out.rotation = cloud.rotation + deltas.middleRows(3, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = out.rotation.col(i).norm();
    require(norm > kQuatNormFloor, "apply deformation: degenerate deformed quaternion");
    out.rotation.col(i) /= norm;
  }
  out.log_scale = cloud.log_scale + deltas.middleRows(7, 3);
  out.color_logit = cloud.color_logit;
  out.opacity_logit = cloud.opacity_logit;
  Eigen::Index row = 10;
  if (spec.deform_color) {
    out.color_logit += deltas.middleRows(row, 3);
    row += 3;
  }
  if (spec.deform_alpha) out.opacity_logit += deltas.row(row);
  return out;
}

// Routes time-parameter gradients back to the canonical columns (into
// `cloud_grads`, accumulated) and to the deltas (returned).
inline MatX apply_deformation_backward(const GaussianCloud& cloud, const MatX& deltas,
                                       const DeformSpec& spec, const TimeParamGrads& dtime,
                                       CloudGrads& cloud_grads) {
  const Eigen::Index n = cloud.size();
  MatX ddeltas = MatX::Zero(spec.output_width(), n);

  cloud_grads.position += dtime.position;
  ddeltas.topRows(3) = dtime.position;

  // through the renormalization of q_raw = q + dr
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec4 raw = cloud.rotation.col(i) + deltas.middleRows(3, 4).col(i);
    const double norm = raw.norm();
    const Vec4 unit = raw / norm;
    const Vec4 g = dtime.rotation.col(i);
    const Vec4 draw = (g - unit * unit.dot(g)) / norm;
    cloud_grads.rotation.col(i) += draw;
    ddeltas.middleRows(3, 4).col(i) = draw;
  }

  cloud_grads.log_scale += dtime.log_scale;
  ddeltas.middleRows(7, 3) = dtime.log_scale;

  cloud_grads.color_logit += dtime.color_logit;
  cloud_grads.opacity_logit += dtime.opacity_logit;
  Eigen::Index row = 10;
  if (spec.deform_color) {
    ddeltas.middleRows(row, 3) = dtime.color_logit;
    row += 3;
  }
  if (spec.deform_alpha) ddeltas.row(row) = dtime.opacity_logit;
  return ddeltas;
}

}  // namespace stdr

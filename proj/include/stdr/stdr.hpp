#pragma once

#include "stdr/cloud.hpp"
#include "stdr/nets.hpp"

namespace stdr {

// Separation field: shared trunk on (encoded position, per-timestamp mask
// probabilities), then a tanh temporal-feature branch and a sigmoid
// dynamic-vs-static branch. Normalization and dropout live in the branches
// only.
struct SepFieldSpec {
  int timestamps = 0;  // K, width of the probability block
  int pe_bands = 6;
  int zs_width = 32;
  int zt_width = 32;
  int branch_hidden = 32;
  bool batch_norm = true;
  double dropout_rate = 0.1;

  int input_width() const {
    return (int)positional_encoding_width(3, pe_bands) + timestamps;
  }

  MlpSpec shared_spec() const {
    MlpSpec s;
    s.widths = {input_width(), zs_width, zs_width};
    s.activations = {Activation::ReLU, Activation::ReLU};
    return s;
  }
  MlpSpec temporal_spec() const {
    MlpSpec s;
    s.widths = {zs_width, branch_hidden, zt_width};
    s.activations = {Activation::ReLU, Activation::Tanh};
    s.batch_norm = batch_norm;
    s.dropout_rate = dropout_rate;
    return s;
  }
  MlpSpec dynamic_spec() const {
    MlpSpec s;
    s.widths = {zs_width, branch_hidden, 1};
    s.activations = {Activation::ReLU, Activation::Sigmoid};
    s.batch_norm = batch_norm;
    s.dropout_rate = dropout_rate;
    return s;
  }

  void validate() const {
    require(timestamps >= 1, "separation field: timestamps must be >= 1");
    require(pe_bands >= 1 && zs_width >= 1 && zt_width >= 1 && branch_hidden >= 1,
            "separation field: widths must be positive");
  }
};

struct SepFieldParams {
  MlpParams shared, temporal, dynamic_head;
};

struct SepFieldGrads {
  MlpGrads shared, temporal, dynamic_head;
};

inline SepFieldParams init_sep_field(const SepFieldSpec& spec, Rng& rng) {
  spec.validate();
  SepFieldParams p;
  p.shared = init_mlp(spec.shared_spec(), rng);
  p.temporal = init_mlp(spec.temporal_spec(), rng);
  p.dynamic_head = init_mlp(spec.dynamic_spec(), rng);
  return p;
}

struct SepBatch {
  MatX z_s;  // zs_width x N
  MatX z_t;  // zt_width x N
  Eigen::RowVectorXd p_dyn;
};

struct SepContext {
  MlpContext shared, temporal, dynamic_head;
  MatX x;  // 3 x N, kept for the encoding backward
};

inline SepBatch sep_field_forward(const SepFieldSpec& spec, SepFieldParams& params,
                                  const MatX& x, const MatX& probs, Mode mode,
                                  Rng* rng = nullptr, SepContext* ctx = nullptr) {
  spec.validate();
  require(x.rows() == 3, "separation field: positions must be 3 x N");
  require(probs.rows() == spec.timestamps && probs.cols() == x.cols(),
          "separation field: probability block shape mismatch");
  for (Eigen::Index c = 0; c < probs.cols(); ++c)
    require(std::abs(probs.col(c).sum() - 1.0) <= 1e-9,
            "separation field: mask probabilities must sum to 1");

  MatX input(spec.input_width(), x.cols());
  input.topRows(positional_encoding_width(3, spec.pe_bands)) =
      positional_encoding(x, spec.pe_bands);
  input.bottomRows(spec.timestamps) = probs;

  if (ctx) ctx->x = x;
  const MatX zs = mlp_forward(spec.shared_spec(), params.shared, input, mode, rng,
                              ctx ? &ctx->shared : nullptr);
  SepBatch out;
  out.z_s = zs;
  out.z_t = mlp_forward(spec.temporal_spec(), params.temporal, zs, mode, rng,
                        ctx ? &ctx->temporal : nullptr);
  out.p_dyn = mlp_forward(spec.dynamic_spec(), params.dynamic_head, zs, mode, rng,
                          ctx ? &ctx->dynamic_head : nullptr)
                  .row(0);
  return out;
}

struct SepBackwardResult {
  MatX dx;      // 3 x N
  MatX dprobs;  // K x N
};

// dz_s is the gradient reaching the trunk output from downstream consumers
// of z_s itself; branch contributions are added internally.
inline SepBackwardResult sep_field_backward(const SepFieldSpec& spec,
                                            const SepFieldParams& params, const SepContext& ctx,
                                            const MatX& dz_s, const MatX& dz_t,
                                            const Eigen::RowVectorXd& dp_dyn,
                                            SepFieldGrads& grads) {
  MatX dtrunk = dz_s;
  dtrunk += mlp_backward(spec.temporal_spec(), params.temporal, ctx.temporal, dz_t,
                         grads.temporal);
  dtrunk += mlp_backward(spec.dynamic_spec(), params.dynamic_head, ctx.dynamic_head,
                         dp_dyn, grads.dynamic_head);
  const MatX dinput =
      mlp_backward(spec.shared_spec(), params.shared, ctx.shared, dtrunk, grads.shared);

  SepBackwardResult res;
  const Eigen::Index pe_rows = positional_encoding_width(3, spec.pe_bands);
  res.dx = positional_encoding_backward(ctx.x, spec.pe_bands, dinput.topRows(pe_rows));
  res.dprobs = dinput.bottomRows(spec.timestamps);
  return res;
}

// Mean over Gaussians and adjacent timestamp pairs of the squared sigmoid
// gap. Returns the loss and its gradient with respect to the logits.
// Normalizing by the term count keeps the penalty on the same scale as the
// pixel-mean reconstruction loss regardless of cloud size; an unnormalized
// sum grows with the cloud and crushes every mask flat before the
// per-timestamp rendering signal can separate them.
inline std::pair<double, MatX> temporal_smoothness_loss(const MatX& mask_logits) {
  const Eigen::Index k = mask_logits.rows(), n = mask_logits.cols();
  require(k >= 2, "temporal smoothness: need at least two timestamps");
  MatX grad = MatX::Zero(k, n);
  double loss = 0.0;
  const double scale = 1.0 / (double)(n * (k - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t + 1 < k; ++t) {
      const double a = sigmoid(mask_logits(t, i));
      const double b = sigmoid(mask_logits(t + 1, i));
      const double gap = a - b;
      loss += gap * gap * scale;
      grad(t, i) += 2.0 * gap * a * (1.0 - a) * scale;
      grad(t + 1, i) -= 2.0 * gap * b * (1.0 - b) * scale;
    }
  }
  return {loss, std::move(grad)};
}

// Average KL divergence between each sampled Gaussian's timestamp
// distribution and those of its stored nearest neighbours. Sampling is
// without replacement when the cloud exceeds sample_size; the pair count is
// truncated at pair_cap in enumeration order.
inline std::pair<double, MatX> spatial_awareness_loss(const MatX& mask_logits,
                                                      const Eigen::MatrixXi& knn,
                                                      int sample_size, int pair_cap, Rng& rng) {
  const Eigen::Index k = mask_logits.rows(), n = mask_logits.cols();
  require(knn.cols() == n, "spatial awareness: knn table size mismatch");
  require(knn.rows() >= 1, "spatial awareness: knn table is empty");
  require(sample_size >= 1 && pair_cap >= 1, "spatial awareness: sample sizes must be positive");

  std::vector<Eigen::Index> picks;
  if (n <= sample_size) {
    picks.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) picks[i] = i;
  } else {
    // partial Fisher-Yates over the index range
    std::vector<Eigen::Index> idx(n);
    for (Eigen::Index i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < sample_size; ++i) {
      const Eigen::Index j = i + (Eigen::Index)rng.integer((std::uint64_t)(n - i));
      std::swap(idx[i], idx[j]);
    }
    picks.assign(idx.begin(), idx.begin() + sample_size);
  }

  const MatX p = softmax_columns(mask_logits);
  constexpr double kProbFloor = 1e-8;

  MatX grad = MatX::Zero(k, n);
  double loss = 0.0;
  long pairs = 0;
  VecX d(k), dkl_dp(k), dkl_dq(k);
  for (Eigen::Index pi = 0; pi < (Eigen::Index)picks.size() && pairs < pair_cap; ++pi) {
    const Eigen::Index i = picks[pi];
    for (Eigen::Index r = 0; r < knn.rows() && pairs < pair_cap; ++r) {
      const Eigen::Index j = knn(r, i);
      require(j >= 0 && j < n, "spatial awareness: knn index out of range");
      // probabilities floored before the log; the gradient is the exact
      // derivative of the floored expression
      double kl = 0.0;
      for (Eigen::Index t = 0; t < k; ++t) {
        const double pi_t = p(t, i), qj_t = p(t, j);
        d[t] = std::log(std::max(pi_t, kProbFloor)) - std::log(std::max(qj_t, kProbFloor));
        kl += pi_t * d[t];
        dkl_dp[t] = d[t] + (pi_t > kProbFloor ? 1.0 : 0.0);
        dkl_dq[t] = qj_t > kProbFloor ? -pi_t / qj_t : 0.0;
      }
      loss += kl;
      // chain through the softmax of both columns
      const double dot_p = p.col(i).dot(dkl_dp);
      grad.col(i) += (p.col(i).array() * (dkl_dp.array() - dot_p)).matrix();
      const double dot_q = p.col(j).dot(dkl_dq);
      grad.col(j) += (p.col(j).array() * (dkl_dq.array() - dot_q)).matrix();
      ++pairs;
    }
  }
  require(pairs > 0, "spatial awareness: no pairs sampled");
  loss /= (double)pairs;
  grad /= (double)pairs;
  return {loss, std::move(grad)};
}

enum class PhaseTag { WarmUp, Regularized, Frozen };

inline const char* phase_name(PhaseTag t) {
  switch (t) {
    case PhaseTag::WarmUp: return "warm_up";
    case PhaseTag::Regularized: return "regularized";
    case PhaseTag::Frozen: return "frozen";
  }
  return "?";
}

struct ScheduleBounds {
  std::int64_t warm_up_end = 3000;
  std::int64_t reg_end = 6000;

  void validate() const {
    require(warm_up_end >= 0 && reg_end >= warm_up_end,
            "schedule: need 0 <= warm_up_end <= reg_end");
  }
};

// Which parts of the model learn in each phase. Geometry and color train
// throughout; warm-up gates the opacity gradient and holds the deformation
// path (and its networks) at identity; after reg_end the mask logits are
// frozen and the regularizers stop contributing.
struct SchedulePhase {
  PhaseTag tag = PhaseTag::WarmUp;
  bool regularizers_active = true;
  bool opacity_trainable = false;
  bool masks_trainable = true;
  bool deformation_active = false;
  bool nets_trainable = false;
};

inline SchedulePhase schedule_phase(std::int64_t iteration, const ScheduleBounds& b) {
  b.validate();
  require(iteration >= 0, "schedule: iteration must be non-negative");
  SchedulePhase p;
  if (iteration < b.warm_up_end) {
    p.tag = PhaseTag::WarmUp;
    p.regularizers_active = true;
    p.opacity_trainable = false;
    p.masks_trainable = true;
    p.deformation_active = false;
    p.nets_trainable = false;
  } else if (iteration < b.reg_end) {
    p.tag = PhaseTag::Regularized;
    p.regularizers_active = true;
    p.opacity_trainable = true;
    p.masks_trainable = true;
    p.deformation_active = true;
    p.nets_trainable = true;
  } else {
    p.tag = PhaseTag::Frozen;
    p.regularizers_active = false;
    p.opacity_trainable = true;
    p.masks_trainable = false;
    p.deformation_active = true;
    p.nets_trainable = true;
  }
  return p;
}

}  // namespace stdr

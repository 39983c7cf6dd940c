#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "stdr/config.hpp"
#include "stdr/deform.hpp"
#include "stdr/metrics.hpp"
#include "stdr/scenes.hpp"
#include "stdr/splat.hpp"
#include "stdr/stdr.hpp"

namespace stdr {

// Stream tags for derive_seed(seed, iteration, tag); init streams use
// iteration 0 with tags that no per-iteration stream occupies.
inline constexpr std::uint64_t kStreamFrame = 0;
inline constexpr std::uint64_t kStreamSpatial = 1;
inline constexpr std::uint64_t kStreamDropout = 2;
inline constexpr std::uint64_t kStreamSepInit = 3;
inline constexpr std::uint64_t kStreamDeformInit = 4;

// Trained sigmoids can round to exactly 0 or 1 in double precision, which
// the compositor rejects; effective opacity is pinned to this open interval
// and the gradient is zeroed on the pinned splats.
inline constexpr double kAlphaFloor = 1e-12;
inline constexpr double kAlphaCeil = 1.0 - 1e-6;

struct LossReport {
  std::int64_t iteration = 0;
  PhaseTag phase = PhaseTag::WarmUp;
  double l1 = 0.0;
  double dssim = 0.0;
  double l_temp = 0.0;
  double l_spatial = 0.0;
  double total = 0.0;
};

struct TrainState {
  Config config;
  int timestamps = 0;
  int width = 0;
  int height = 0;
  std::vector<Camera> cameras;
  std::vector<char> held_out;  // per camera

  GaussianCloud cloud;
  SepFieldParams sep;
  MlpParams deform;

  AdamState adam_position, adam_rotation, adam_log_scale, adam_color, adam_opacity, adam_mask;
  std::vector<AdamState> adam_sep, adam_deform;  // one state per tensor, walk order below

  std::int64_t iteration = 0;
  bool mask_frozen = false;
  MatX frozen_probs;  // K x N, softmax snapshot taken when the masks freeze

  // derived from config at init/load, not serialized
  SepFieldSpec sep_spec;
  DeformSpec deform_spec;
};

struct StepGrads {
  SepFieldGrads sep;
  MlpGrads deform;
};

namespace detail {

// Canonical tensor order for a network: per layer weight then bias, then per
// batch-norm layer gamma then beta. Optimizer state and serialization both
// rely on this walk.
template <class F>
void for_each_tensor(MlpParams& p, MlpGrads& g, F&& f) {
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    f(p.w[l], g.w[l]);
    f(p.b[l], g.b[l]);
  }
  for (std::size_t l = 0; l < p.gamma.size(); ++l) {
    f(p.gamma[l], g.gamma[l]);
    f(p.beta[l], g.beta[l]);
  }
}

inline void append_adam_states(const MlpParams& p, std::vector<AdamState>& out) {
  auto add = [&](Eigen::Index n) {
    AdamState s;
    s.init(n);
    out.push_back(std::move(s));
  };
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    add(p.w[l].size());
    add(p.b[l].size());
  }
  for (std::size_t l = 0; l < p.gamma.size(); ++l) {
    add(p.gamma[l].size());
    add(p.beta[l].size());
  }
}

inline void adam_update_mlp(MlpParams& p, MlpGrads& g, std::vector<AdamState>& states,
                            std::size_t& cursor, const AdamConfig& cfg) {
  for_each_tensor(p, g, [&](auto& param, auto& grad) {
    require(cursor < states.size(), "adam: optimizer state walk overran");
    require(param.size() == grad.size(), "adam: gradient tensor shape mismatch");
    adam_step(param.data(), grad.data(), param.size(), states[cursor++], cfg);
  });
}

}  // namespace detail

inline TrainState init_train_state(const Config& cfg, const Dataset& ds) {
  cfg.validate();
  ds.validate();
  require(ds.timestamps >= 2, "trainer: need at least two timestamps");
  require(!ds.init_points.empty(), "trainer: dataset has no init points");
  require(!ds.training_frames().empty(), "trainer: dataset has no training frames");

  TrainState st;
  st.config = cfg;
  st.timestamps = ds.timestamps;
  st.width = ds.width;
  st.height = ds.height;
  st.cameras = ds.cameras;
  st.held_out = ds.held_out;

  std::vector<Vec3> points, colors;
  points.reserve(ds.init_points.size());
  colors.reserve(ds.init_points.size());
  for (const InitPoint& p : ds.init_points) {
    points.push_back(p.position);
    colors.push_back(p.color);
  }
  st.cloud = init_cloud(points, colors, ds.timestamps);
  require(st.cloud.size() > cfg.knn_k, "trainer: need more points than knn neighbours");
  st.cloud.knn = build_knn(st.cloud.position, cfg.knn_k);

  st.sep_spec = cfg.sep_field_spec(ds.timestamps);
  st.deform_spec = cfg.deform_field_spec();
  Rng sep_rng(derive_seed(cfg.seed, 0, kStreamSepInit));
  st.sep = init_sep_field(st.sep_spec, sep_rng);
  Rng deform_rng(derive_seed(cfg.seed, 0, kStreamDeformInit));
  st.deform = init_deform_field(st.deform_spec, deform_rng);

  const Eigen::Index n = st.cloud.size();
  st.adam_position.init(3 * n);
  st.adam_rotation.init(4 * n);
  st.adam_log_scale.init(3 * n);
  st.adam_color.init(3 * n);
  st.adam_opacity.init(n);
  st.adam_mask.init((Eigen::Index)ds.timestamps * n);
  detail::append_adam_states(st.sep.shared, st.adam_sep);
  detail::append_adam_states(st.sep.temporal, st.adam_sep);
  detail::append_adam_states(st.sep.dynamic_head, st.adam_sep);
  detail::append_adam_states(st.deform, st.adam_deform);

  st.frozen_probs = MatX::Zero(ds.timestamps, n);
  return st;
}

namespace detail {

// Projection + sigmoid squash + mask modulation + compositing for one
// timestamp. `caches` and `clamped` are filled when non-null (training);
// the eval path passes nullptr.
inline RenderOutput render_time_params(const TrainState& st, const TimeParams& time, int timestamp,
                                       const Camera& cam, std::vector<ProjectionCache>* caches,
                                       std::vector<char>* clamped) {
  const Config& cfg = st.config;
  const Eigen::Index n = time.position.cols();
  std::vector<Splat2D> splats((std::size_t)n);
  if (caches) caches->assign((std::size_t)n, ProjectionCache{});
  if (clamped) clamped->assign((std::size_t)n, 0);

  Eigen::Matrix3Xd colors(3, n);
  Eigen::RowVectorXd alphas(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    splats[(std::size_t)i] = project_gaussian(
        time.position.col(i), Quaternion::from_vec(time.rotation.col(i)), time.log_scale.col(i),
        cam, cfg.near_plane, cfg.lowpass, caches ? &(*caches)[(std::size_t)i] : nullptr);
    for (int c = 0; c < 3; ++c) colors(c, i) = sigmoid(time.color_logit(c, i));
    double a = sigmoid(time.opacity_logit[i]);
    if (cfg.stdr) a *= sigmoid(st.cloud.mask_logits(timestamp, i));
    if (a < kAlphaFloor) {
      a = kAlphaFloor;
      if (clamped) (*clamped)[(std::size_t)i] = 1;
    } else if (a > kAlphaCeil) {
      a = kAlphaCeil;
      if (clamped) (*clamped)[(std::size_t)i] = 1;
    }
    alphas[i] = a;
  }
  return render_forward(splats, colors, alphas, cam.width, cam.height, cfg.background_color(),
                        cfg.render_config());
}

}  // namespace detail

// One full objective evaluation at the current iteration's frame and RNG
// streams. With `grads` non-null the backward pass runs too: canonical cloud
// gradients land in state.cloud.grads (overwritten), network gradients in
// `grads`. Train-mode batch norm updates running statistics in place, so
// callers needing a pure evaluation must work on a copy of the state.
inline LossReport forward_backward(TrainState& st, const Dataset& ds, StepGrads* grads) {
  const Config& cfg = st.config;
  const SchedulePhase phase = schedule_phase(st.iteration, cfg.schedule());
  const Eigen::Index n = st.cloud.size();
  const int k = st.timestamps;

  const std::vector<int> train_ids = ds.training_frames();
  require(!train_ids.empty(), "trainer: dataset has no training frames");
  Rng frame_rng(derive_seed(cfg.seed, (std::uint64_t)st.iteration, kStreamFrame));
  const Frame& frame = ds.frames[(std::size_t)train_ids[frame_rng.integer(train_ids.size())]];
  const Camera& cam = ds.cameras[(std::size_t)frame.camera_id];
  const double t_norm = k > 1 ? (double)frame.timestamp / (double)(k - 1) : 0.0;

  MatX probs;
  if (cfg.stdr)
    probs = st.mask_frozen ? st.frozen_probs : softmax_columns(st.cloud.mask_logits);

  SepContext sep_ctx;
  DeformContext def_ctx;
  SepBatch sep_out;
  MatX deltas;
  TimeParams time;
  Rng dropout_rng(derive_seed(cfg.seed, (std::uint64_t)st.iteration, kStreamDropout));
  if (phase.deformation_active) {
    if (cfg.stdr)
      sep_out = sep_field_forward(st.sep_spec, st.sep, st.cloud.position, probs, Mode::Train,
                                  &dropout_rng, grads ? &sep_ctx : nullptr);
    deltas = deform_forward(st.deform_spec, st.deform, st.cloud.position, sep_out.z_s,
                            sep_out.z_t, sep_out.p_dyn, t_norm, Mode::Train, &dropout_rng,
                            grads ? &def_ctx : nullptr);
    time = apply_deformation(st.cloud, deltas, st.deform_spec);
  } else {
    time = identity_time_params(st.cloud);
  }

  std::vector<ProjectionCache> caches;
  std::vector<char> clamped;
  const RenderOutput render = detail::render_time_params(
      st, time, frame.timestamp, cam, grads ? &caches : nullptr, grads ? &clamped : nullptr);

  const LossValue l1 = l1_loss(render.image, frame.image);
  const LossValue dssim = dssim_loss(render.image, frame.image);

  LossReport rep;
  rep.iteration = st.iteration;
  rep.phase = phase.tag;
  rep.l1 = l1.value;
  rep.dssim = dssim.value;

  const bool regs_on = cfg.stdr && phase.regularizers_active;
  MatX temp_grad, spatial_grad;
  if (regs_on) {
    auto [lt, gt] = temporal_smoothness_loss(st.cloud.mask_logits);
    rep.l_temp = lt;
    temp_grad = std::move(gt);
    Rng spatial_rng(derive_seed(cfg.seed, (std::uint64_t)st.iteration, kStreamSpatial));
    auto [ls, gs] = spatial_awareness_loss(st.cloud.mask_logits, st.cloud.knn,
                                           cfg.spatial_samples, cfg.spatial_pair_cap, spatial_rng);
    rep.l_spatial = ls;
    spatial_grad = std::move(gs);
  }
  rep.total = cfg.lambda * rep.l1 + (1.0 - cfg.lambda) * rep.dssim +
              cfg.lambda_temporal * rep.l_temp + cfg.lambda_spatial * rep.l_spatial;
  if (!grads) return rep;

  st.cloud.grads.zero();

  Image dimage;
  dimage.resize(render.image.width, render.image.height);
  for (int c = 0; c < 3; ++c)
    dimage.channel[c] = cfg.lambda * l1.grad.channel[c] + (1.0 - cfg.lambda) * dssim.grad.channel[c];
  const RenderGrads rg = render_backward(render.context, dimage);

  TimeParamGrads dtime;
  dtime.resize(n);
  MatX dmask_photo = MatX::Zero(k, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double col = sigmoid(time.color_logit(c, i));
      dtime.color_logit(c, i) = rg.color(c, i) * col * (1.0 - col);
    }
    const double da = clamped[(std::size_t)i] ? 0.0 : rg.alpha[i];
    const double so = sigmoid(time.opacity_logit[i]);
    if (cfg.stdr) {
      const double sm = sigmoid(st.cloud.mask_logits(frame.timestamp, i));
      dtime.opacity_logit[i] = da * sm * so * (1.0 - so);
      dmask_photo(frame.timestamp, i) = da * so * sm * (1.0 - sm);
    } else {
      dtime.opacity_logit[i] = da * so * (1.0 - so);
    }
    const GaussianGeomGrad gg =
        project_backward(caches[(std::size_t)i], rg.mean2d.col(i), rg.cov2d[i], 0.0);
    dtime.position.col(i) = gg.dposition;
    dtime.rotation.col(i) = gg.drotation;
    dtime.log_scale.col(i) = gg.dlog_scale;
  }

  if (phase.deformation_active) {
    const MatX ddeltas =
        apply_deformation_backward(st.cloud, deltas, st.deform_spec, dtime, st.cloud.grads);
    const DeformBackwardResult dres =
        deform_backward(st.deform_spec, st.deform, def_ctx, ddeltas, grads->deform);
    st.cloud.grads.position += dres.dx;
    if (cfg.stdr) {
      const SepBackwardResult sres = sep_field_backward(st.sep_spec, st.sep, sep_ctx, dres.dz_s,
                                                        dres.dz_t, dres.dp_dyn, grads->sep);
      st.cloud.grads.position += sres.dx;
      if (!st.mask_frozen)
        st.cloud.grads.mask_logits += softmax_columns_backward(probs, sres.dprobs);
    }
  } else {
    st.cloud.grads.position += dtime.position;
    st.cloud.grads.rotation += dtime.rotation;
    st.cloud.grads.log_scale += dtime.log_scale;
    st.cloud.grads.color_logit += dtime.color_logit;
    st.cloud.grads.opacity_logit += dtime.opacity_logit;
  }

  if (cfg.stdr) {
    st.cloud.grads.mask_logits += dmask_photo;
    if (regs_on)
      st.cloud.grads.mask_logits +=
          cfg.lambda_temporal * temp_grad + cfg.lambda_spatial * spatial_grad;
  }
  return rep;
}

// One optimization step: phase bookkeeping, forward/backward, per-group
// Adam updates. Groups outside the phase's trainable set are skipped
// entirely, leaving their parameters and optimizer state bit-identical.
inline LossReport train_step(TrainState& st, const Dataset& ds) {
  const Config& cfg = st.config;
  const SchedulePhase phase = schedule_phase(st.iteration, cfg.schedule());

  if (cfg.stdr && !st.mask_frozen && phase.tag == PhaseTag::Frozen) {
    st.frozen_probs = softmax_columns(st.cloud.mask_logits);
    st.mask_frozen = true;
  }
  if (cfg.stdr && phase.regularizers_active && st.iteration > 0 &&
      st.iteration % cfg.knn_rebuild_every == 0)
    st.cloud.knn = build_knn(st.cloud.position, cfg.knn_k);

  StepGrads grads;
  const LossReport rep = forward_backward(st, ds, &grads);

  GaussianCloud& cl = st.cloud;
  adam_step(cl.position.data(), cl.grads.position.data(), cl.position.size(), st.adam_position,
            cfg.adam(cfg.lr_position));
  adam_step(cl.rotation.data(), cl.grads.rotation.data(), cl.rotation.size(), st.adam_rotation,
            cfg.adam(cfg.lr_rotation));
  adam_step(cl.log_scale.data(), cl.grads.log_scale.data(), cl.log_scale.size(),
            st.adam_log_scale, cfg.adam(cfg.lr_log_scale));
  adam_step(cl.color_logit.data(), cl.grads.color_logit.data(), cl.color_logit.size(),
            st.adam_color, cfg.adam(cfg.lr_color));
  if (phase.opacity_trainable)
    adam_step(cl.opacity_logit.data(), cl.grads.opacity_logit.data(), cl.opacity_logit.size(),
              st.adam_opacity, cfg.adam(cfg.lr_opacity));
  if (cfg.stdr && phase.masks_trainable)
    adam_step(cl.mask_logits.data(), cl.grads.mask_logits.data(), cl.mask_logits.size(),
              st.adam_mask, cfg.adam(cfg.lr_mask));
  if (phase.nets_trainable) {
    const AdamConfig net_cfg = cfg.adam(cfg.lr_nets);
    if (cfg.stdr) {
      std::size_t cursor = 0;
      detail::adam_update_mlp(st.sep.shared, grads.sep.shared, st.adam_sep, cursor, net_cfg);
      detail::adam_update_mlp(st.sep.temporal, grads.sep.temporal, st.adam_sep, cursor, net_cfg);
      detail::adam_update_mlp(st.sep.dynamic_head, grads.sep.dynamic_head, st.adam_sep, cursor,
                              net_cfg);
      require(cursor == st.adam_sep.size(), "adam: separation state walk incomplete");
    }
    std::size_t cursor = 0;
    detail::adam_update_mlp(st.deform, grads.deform, st.adam_deform, cursor, net_cfg);
    require(cursor == st.adam_deform.size(), "adam: deformation state walk incomplete");
  }

  st.iteration += 1;
  return rep;
}

inline void run_training(
    TrainState& st, const Dataset& ds,
    const std::function<void(const TrainState&, const LossReport&)>& on_iteration = {}) {
  while (st.iteration < st.config.iterations) {
    const LossReport rep = train_step(st, ds);
    if (on_iteration) on_iteration(st, rep);
  }
}

// Deterministic eval-mode render of one (camera, timestamp) view. The
// deformation path always runs; an untrained field is the identity by
// construction, so warm-up era checkpoints render their canonical state.
inline Image render_view(TrainState& st, int camera_id, int timestamp) {
  require(camera_id >= 0 && camera_id < (int)st.cameras.size(),
          "render: camera id out of range");
  require(timestamp >= 0 && timestamp < st.timestamps, "render: timestamp out of range");
  const Camera& cam = st.cameras[(std::size_t)camera_id];
  const int k = st.timestamps;
  const double t_norm = k > 1 ? (double)timestamp / (double)(k - 1) : 0.0;

  SepBatch sep_out;
  if (st.config.stdr) {
    const MatX probs = st.mask_frozen ? st.frozen_probs : softmax_columns(st.cloud.mask_logits);
    sep_out = sep_field_forward(st.sep_spec, st.sep, st.cloud.position, probs, Mode::Eval);
  }
  const MatX deltas = deform_forward(st.deform_spec, st.deform, st.cloud.position, sep_out.z_s,
                                     sep_out.z_t, sep_out.p_dyn, t_norm, Mode::Eval);
  const TimeParams time = apply_deformation(st.cloud, deltas, st.deform_spec);
  return detail::render_time_params(st, time, timestamp, cam, nullptr, nullptr).image;
}

struct EvalRow {
  int camera_id = 0;
  int timestamp = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

inline std::vector<EvalRow> evaluate_frames(TrainState& st, const Dataset& ds,
                                            bool held_out_split) {
  const std::vector<int> ids = held_out_split ? ds.held_out_frames() : ds.training_frames();
  require(!ids.empty(), held_out_split ? "eval: dataset has no held-out frames"
                                       : "eval: dataset has no training frames");
  std::vector<EvalRow> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    const Frame& f = ds.frames[(std::size_t)id];
    require(f.image.width == st.width && f.image.height == st.height,
            "eval: dataset image size does not match the checkpoint");
    const Image pred = render_view(st, f.camera_id, f.timestamp);
    rows.push_back({f.camera_id, f.timestamp, psnr(pred, f.image), ssim(pred, f.image)});
  }
  return rows;
}

// ---- checkpoint serialization ----
//
// Little-endian binary. Layout: magic "STDR", version, config JSON,
// dataset geometry (K, image size, cameras), iteration, freeze state,
// cloud arrays, knn table, frozen softmax snapshot, Adam states
// (cloud groups, then per-tensor states for the networks), network
// parameters (sep shared/temporal/dynamic head, then deformation), end
// marker.

namespace detail {

constexpr char kCkptMagic[4] = {'S', 'T', 'D', 'R'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::uint32_t kCkptEnd = 0x444e4523;  // "#END"

class CkptWriter {
 public:
  explicit CkptWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("checkpoint: cannot write " + path);
  }
  void raw(const void* p, std::size_t bytes) {
    out_.write(static_cast<const char*>(p), (std::streamsize)bytes);
  }
  template <class T>
  void pod(const T& v) {
    raw(&v, sizeof v);
  }
  void doubles(const double* p, Eigen::Index n) { raw(p, sizeof(double) * (std::size_t)n); }
  void vec(const VecX& v) {
    pod((std::uint64_t)v.size());
    doubles(v.data(), v.size());
  }
  void mat(const MatX& m) {
    pod((std::uint64_t)m.rows());
    pod((std::uint64_t)m.cols());
    doubles(m.data(), m.size());
  }
  void adam(const AdamState& s) {
    pod(s.step);
    vec(s.m);
    vec(s.v);
  }
  void mlp(const MlpParams& p) {
    pod((std::uint64_t)p.w.size());
    for (std::size_t l = 0; l < p.w.size(); ++l) {
      mat(p.w[l]);
      vec(p.b[l]);
    }
    pod((std::uint64_t)p.gamma.size());
    for (std::size_t l = 0; l < p.gamma.size(); ++l) {
      vec(p.gamma[l]);
      vec(p.beta[l]);
      vec(p.running_mean[l]);
      vec(p.running_var[l]);
    }
  }
  void finish() {
    pod(kCkptEnd);
    out_.flush();
    if (!out_) throw IoError("checkpoint: write failed for " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class CkptReader {
 public:
  explicit CkptReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("checkpoint: cannot open " + path);
  }
  void raw(void* p, std::size_t bytes, const char* field) {
    in_.read(static_cast<char*>(p), (std::streamsize)bytes);
    if (!in_) throw IoError("checkpoint: truncated reading " + std::string(field) + " in " + path_);
  }
  template <class T>
  T pod(const char* field) {
    T v;
    raw(&v, sizeof v, field);
    return v;
  }
  std::uint64_t count(const char* field, std::uint64_t cap = (1ULL << 32)) {
    const std::uint64_t n = pod<std::uint64_t>(field);
    if (n > cap) throw IoError("checkpoint: implausible count for " + std::string(field) + " in " + path_);
    return n;
  }
  void doubles(double* p, Eigen::Index n, const char* field) {
    raw(p, sizeof(double) * (std::size_t)n, field);
  }
  VecX vec(const char* field) {
    VecX v((Eigen::Index)count(field));
    doubles(v.data(), v.size(), field);
    return v;
  }
  MatX mat(const char* field) {
    const auto rows = (Eigen::Index)count(field);
    const auto cols = (Eigen::Index)count(field);
    MatX m(rows, cols);
    doubles(m.data(), m.size(), field);
    return m;
  }
  AdamState adam(const char* field) {
    AdamState s;
    s.step = pod<std::int64_t>(field);
    s.m = vec(field);
    s.v = vec(field);
    if (s.m.size() != s.v.size())
      throw IoError("checkpoint: inconsistent optimizer moments for " + std::string(field) +
                    " in " + path_);
    return s;
  }
  MlpParams mlp(const char* field) {
    MlpParams p;
    const std::uint64_t layers = count(field, 1024);
    p.w.resize(layers);
    p.b.resize(layers);
    for (std::uint64_t l = 0; l < layers; ++l) {
      p.w[l] = mat(field);
      p.b[l] = vec(field);
    }
    const std::uint64_t bn = count(field, 1024);
    p.gamma.resize(bn);
    p.beta.resize(bn);
    p.running_mean.resize(bn);
    p.running_var.resize(bn);
    for (std::uint64_t l = 0; l < bn; ++l) {
      p.gamma[l] = vec(field);
      p.beta[l] = vec(field);
      p.running_mean[l] = vec(field);
      p.running_var[l] = vec(field);
    }
    return p;
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

inline void check_adam_sizes(const std::vector<AdamState>& states, const MlpParams& p,
                             std::size_t& cursor, const std::string& path) {
  auto check = [&](Eigen::Index n) {
    if (cursor >= states.size() || states[cursor].m.size() != n)
      throw IoError("checkpoint: optimizer state does not match network shape in " + path);
    ++cursor;
  };
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    check(p.w[l].size());
    check(p.b[l].size());
  }
  for (std::size_t l = 0; l < p.gamma.size(); ++l) {
    check(p.gamma[l].size());
    check(p.beta[l].size());
  }
}

}  // namespace detail

inline void save_checkpoint(const TrainState& st, const std::string& path) {
  detail::CkptWriter w(path);
  w.raw(detail::kCkptMagic, 4);
  w.pod(detail::kCkptVersion);

  const std::string cfg_json = config_to_json(st.config).dump();
  w.pod((std::uint64_t)cfg_json.size());
  w.raw(cfg_json.data(), cfg_json.size());

  w.pod((std::int32_t)st.timestamps);
  w.pod((std::int32_t)st.width);
  w.pod((std::int32_t)st.height);
  w.pod((std::uint64_t)st.cameras.size());
  for (std::size_t c = 0; c < st.cameras.size(); ++c) {
    const Camera& cam = st.cameras[c];
    w.pod((std::int32_t)cam.width);
    w.pod((std::int32_t)cam.height);
    w.pod(cam.fx);
    w.pod(cam.fy);
    w.pod(cam.cx);
    w.pod(cam.cy);
    for (int r = 0; r < 3; ++r)
      for (int cc = 0; cc < 3; ++cc) w.pod(cam.rotation(r, cc));
    for (int r = 0; r < 3; ++r) w.pod(cam.translation[r]);
    w.pod((std::uint8_t)(st.held_out[c] ? 1 : 0));
  }

  w.pod(st.iteration);
  w.pod((std::uint8_t)(st.mask_frozen ? 1 : 0));

  const Eigen::Index n = st.cloud.size();
  w.pod((std::int64_t)n);
  w.doubles(st.cloud.position.data(), st.cloud.position.size());
  w.doubles(st.cloud.rotation.data(), st.cloud.rotation.size());
  w.doubles(st.cloud.log_scale.data(), st.cloud.log_scale.size());
  w.doubles(st.cloud.color_logit.data(), st.cloud.color_logit.size());
  w.doubles(st.cloud.opacity_logit.data(), st.cloud.opacity_logit.size());
  w.doubles(st.cloud.mask_logits.data(), st.cloud.mask_logits.size());

  w.pod((std::int32_t)st.cloud.knn.rows());
  w.raw(st.cloud.knn.data(), sizeof(std::int32_t) * (std::size_t)st.cloud.knn.size());
  w.doubles(st.frozen_probs.data(), st.frozen_probs.size());

  w.adam(st.adam_position);
  w.adam(st.adam_rotation);
  w.adam(st.adam_log_scale);
  w.adam(st.adam_color);
  w.adam(st.adam_opacity);
  w.adam(st.adam_mask);
  w.pod((std::uint64_t)st.adam_sep.size());
  for (const AdamState& s : st.adam_sep) w.adam(s);
  w.pod((std::uint64_t)st.adam_deform.size());
  for (const AdamState& s : st.adam_deform) w.adam(s);

  w.mlp(st.sep.shared);
  w.mlp(st.sep.temporal);
  w.mlp(st.sep.dynamic_head);
  w.mlp(st.deform);
  w.finish();
}

inline TrainState load_checkpoint(const std::string& path) {
  detail::CkptReader r(path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const auto version = r.pod<std::uint32_t>("version");
  if (version != detail::kCkptVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);

  const std::uint64_t cfg_len = r.count("config");
  std::string cfg_json(cfg_len, '\0');
  r.raw(cfg_json.data(), cfg_len, "config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cfg_json);
  } catch (const nlohmann::json::exception&) {
    throw IoError("checkpoint: malformed config block in " + path);
  }
  TrainState st;
  st.config = config_from_json(j);

  st.timestamps = r.pod<std::int32_t>("timestamps");
  st.width = r.pod<std::int32_t>("width");
  st.height = r.pod<std::int32_t>("height");
  if (st.timestamps < 1 || st.width < 1 || st.height < 1)
    throw IoError("checkpoint: bad scene geometry header in " + path);
  const std::uint64_t n_cameras = r.count("cameras", 1 << 20);
  st.cameras.resize(n_cameras);
  st.held_out.resize(n_cameras);
  for (std::uint64_t c = 0; c < n_cameras; ++c) {
    Camera& cam = st.cameras[c];
    cam.width = r.pod<std::int32_t>("cameras");
    cam.height = r.pod<std::int32_t>("cameras");
    cam.fx = r.pod<double>("cameras");
    cam.fy = r.pod<double>("cameras");
    cam.cx = r.pod<double>("cameras");
    cam.cy = r.pod<double>("cameras");
    for (int rr = 0; rr < 3; ++rr)
      for (int cc = 0; cc < 3; ++cc) cam.rotation(rr, cc) = r.pod<double>("cameras");
    for (int rr = 0; rr < 3; ++rr) cam.translation[rr] = r.pod<double>("cameras");
    st.held_out[c] = (char)r.pod<std::uint8_t>("cameras");
    cam.validate();
  }

  st.iteration = r.pod<std::int64_t>("iteration");
  if (st.iteration < 0) throw IoError("checkpoint: negative iteration in " + path);
  st.mask_frozen = r.pod<std::uint8_t>("mask_frozen") != 0;

  const auto n = (Eigen::Index)r.pod<std::int64_t>("cloud_size");
  if (n < 1) throw IoError("checkpoint: empty cloud in " + path);
  const int k = st.timestamps;
  GaussianCloud& cl = st.cloud;
  cl.timestamps = k;
  cl.position.resize(3, n);
  r.doubles(cl.position.data(), cl.position.size(), "position");
  cl.rotation.resize(4, n);
  r.doubles(cl.rotation.data(), cl.rotation.size(), "rotation");
  cl.log_scale.resize(3, n);
  r.doubles(cl.log_scale.data(), cl.log_scale.size(), "log_scale");
  cl.color_logit.resize(3, n);
  r.doubles(cl.color_logit.data(), cl.color_logit.size(), "color_logit");
  cl.opacity_logit.resize(n);
  r.doubles(cl.opacity_logit.data(), cl.opacity_logit.size(), "opacity_logit");
  cl.mask_logits.resize(k, n);
  r.doubles(cl.mask_logits.data(), cl.mask_logits.size(), "mask_logits");
  cl.grads.resize(n, k);

  const auto knn_rows = r.pod<std::int32_t>("knn");
  if (knn_rows < 1 || knn_rows >= n) throw IoError("checkpoint: bad knn table in " + path);
  cl.knn.resize(knn_rows, n);
  r.raw(cl.knn.data(), sizeof(std::int32_t) * (std::size_t)cl.knn.size(), "knn");
  for (Eigen::Index i = 0; i < cl.knn.size(); ++i)
    if (cl.knn.data()[i] < 0 || cl.knn.data()[i] >= n)
      throw IoError("checkpoint: knn index out of range in " + path);
  st.frozen_probs.resize(k, n);
  r.doubles(st.frozen_probs.data(), st.frozen_probs.size(), "frozen_probs");

  st.adam_position = r.adam("adam_position");
  st.adam_rotation = r.adam("adam_rotation");
  st.adam_log_scale = r.adam("adam_log_scale");
  st.adam_color = r.adam("adam_color");
  st.adam_opacity = r.adam("adam_opacity");
  st.adam_mask = r.adam("adam_mask");
  if (st.adam_position.m.size() != 3 * n || st.adam_rotation.m.size() != 4 * n ||
      st.adam_log_scale.m.size() != 3 * n || st.adam_color.m.size() != 3 * n ||
      st.adam_opacity.m.size() != n || st.adam_mask.m.size() != (Eigen::Index)k * n)
    throw IoError("checkpoint: optimizer state does not match cloud size in " + path);
  const std::uint64_t n_sep = r.count("adam_sep", 1 << 16);
  st.adam_sep.resize(n_sep);
  for (auto& s : st.adam_sep) s = r.adam("adam_sep");
  const std::uint64_t n_def = r.count("adam_deform", 1 << 16);
  st.adam_deform.resize(n_def);
  for (auto& s : st.adam_deform) s = r.adam("adam_deform");

  st.sep.shared = r.mlp("sep_shared");
  st.sep.temporal = r.mlp("sep_temporal");
  st.sep.dynamic_head = r.mlp("sep_dynamic");
  st.deform = r.mlp("deform");

  if (r.pod<std::uint32_t>("end_marker") != detail::kCkptEnd)
    throw IoError("checkpoint: bad end marker in " + path);

  st.sep_spec = st.config.sep_field_spec(st.timestamps);
  st.deform_spec = st.config.deform_field_spec();
  std::size_t cursor = 0;
  detail::check_adam_sizes(st.adam_sep, st.sep.shared, cursor, path);
  detail::check_adam_sizes(st.adam_sep, st.sep.temporal, cursor, path);
  detail::check_adam_sizes(st.adam_sep, st.sep.dynamic_head, cursor, path);
  if (cursor != st.adam_sep.size())
    throw IoError("checkpoint: optimizer state does not match network shape in " + path);
  cursor = 0;
  detail::check_adam_sizes(st.adam_deform, st.deform, cursor, path);
  if (cursor != st.adam_deform.size())
    throw IoError("checkpoint: optimizer state does not match network shape in " + path);
  return st;
}

}  // namespace stdr

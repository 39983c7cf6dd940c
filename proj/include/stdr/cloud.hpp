#pragma once

#include "stdr/geometry.hpp"

#include <algorithm>
#include <vector>

namespace stdr {

struct Gaussian {
  Vec3 position = Vec3::Zero();
  Quaternion rotation;
  Vec3 log_scale = Vec3::Zero();
  Vec3 color_logit = Vec3::Zero();
  double opacity_logit = 0.0;
  VecX mask_logits;
};

struct CloudGrads {
  Eigen::Matrix3Xd position;
  Eigen::Matrix4Xd rotation;
  Eigen::Matrix3Xd log_scale;
  Eigen::Matrix3Xd color_logit;
  Eigen::RowVectorXd opacity_logit;
  MatX mask_logits;  // K x N

  void resize(Eigen::Index n, Eigen::Index k) {
    position.setZero(3, n);
    rotation.setZero(4, n);
    log_scale.setZero(3, n);
    color_logit.setZero(3, n);
    opacity_logit.setZero(n);
    mask_logits.setZero(k, n);
  }
  void zero() {
    position.setZero();
    rotation.setZero();
    log_scale.setZero();
    color_logit.setZero();
    opacity_logit.setZero();
    mask_logits.setZero();
  }
};

// Column-per-Gaussian storage. Colors and opacity are kept as logits and
// squashed through sigmoid at render time; scales live in log space.
// mask_logits row j holds every Gaussian's logit for timestamp j.
struct GaussianCloud {
  int timestamps = 0;  // K
  Eigen::Matrix3Xd position;
  Eigen::Matrix4Xd rotation;  // (w, x, y, z)
  Eigen::Matrix3Xd log_scale;
  Eigen::Matrix3Xd color_logit;
  Eigen::RowVectorXd opacity_logit;
  MatX mask_logits;    // K x N
  Eigen::MatrixXi knn;  // k x N, empty until built
  CloudGrads grads;

  Eigen::Index size() const { return position.cols(); }

  Gaussian get(Eigen::Index i) const {
    Gaussian g;
    g.position = position.col(i);
    g.rotation = Quaternion::from_vec(rotation.col(i));
    g.log_scale = log_scale.col(i);
    g.color_logit = color_logit.col(i);
    g.opacity_logit = opacity_logit[i];
    g.mask_logits = mask_logits.col(i);
    return g;
  }

  void set(Eigen::Index i, const Gaussian& g) {
    require(g.mask_logits.size() == timestamps, "gaussian mask vector length mismatch");
    position.col(i) = g.position;
    rotation.col(i) = g.rotation.vec();
    log_scale.col(i) = g.log_scale;
    color_logit.col(i) = g.color_logit;
    opacity_logit[i] = g.opacity_logit;
    mask_logits.col(i) = g.mask_logits;
  }
};

// Column-wise softmax; numerically shifted by the column max.
inline MatX softmax_columns(const MatX& logits) {
  MatX p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const VecX shifted = logits.col(i).array() - logits.col(i).maxCoeff();
    const VecX e = shifted.array().exp();
    p.col(i) = e / e.sum();
  }
  return p;
}

// Backward of column-wise softmax: given dL/dp, returns dL/dlogits.
inline MatX softmax_columns_backward(const MatX& probs, const MatX& dprobs) {
  MatX dl(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.cols(); ++i) {
    const double dot = probs.col(i).dot(dprobs.col(i));
    dl.col(i) = probs.col(i).array() * (dprobs.col(i).array() - dot);
  }
  return dl;
}

// Per-Gaussian probability distribution over timestamps.
struct MaskDistribution {
  MatX probs;  // K x N, columns sum to 1

  Eigen::Index count() const { return probs.cols(); }
  Eigen::Index timestamps() const { return probs.rows(); }
  double prob(Eigen::Index gaussian, Eigen::Index t) const { return probs(t, gaussian); }

  double entropy(Eigen::Index gaussian) const {
    double h = 0.0;
    for (Eigen::Index t = 0; t < probs.rows(); ++t) {
      const double p = probs(t, gaussian);
      if (p > 0.0) h -= p * std::log(p);
    }
    return h;
  }
};

inline MaskDistribution mask_distribution(const GaussianCloud& cloud) {
  return MaskDistribution{softmax_columns(cloud.mask_logits)};
}

// Effective opacity at timestamp t: sigmoid(mask logit) * sigmoid(opacity
// logit), elementwise over the cloud.
inline VecX modulated_opacity(const GaussianCloud& cloud, Eigen::Index t) {
  require(t >= 0 && t < cloud.timestamps, "timestamp out of range");
  VecX out(cloud.size());
  for (Eigen::Index i = 0; i < cloud.size(); ++i)
    out[i] = sigmoid(cloud.mask_logits(t, i)) * sigmoid(cloud.opacity_logit[i]);
  return out;
}

// Exhaustive k-nearest-neighbours by Euclidean distance; ties broken by
// the lower index. Intended for desk-scale clouds (quadratic).
inline Eigen::MatrixXi build_knn(const Eigen::Matrix3Xd& positions, int k) {
  const Eigen::Index n = positions.cols();
  require(k >= 1, "knn: k must be >= 1");
  require(n > k, "knn: need more points than neighbours");
  Eigen::MatrixXi table(k, n);
  std::vector<std::pair<double, int>> dist(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j)
      dist[j] = {(positions.col(j) - positions.col(i)).squaredNorm(), (int)j};
    dist[i].first = std::numeric_limits<double>::infinity();  // exclude self
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int r = 0; r < k; ++r) table(r, i) = dist[r].second;
  }
  return table;
}

// Mean distance to the nearest other point, used to pick the initial scale.
inline double mean_nearest_distance(const Eigen::Matrix3Xd& positions) {
  const Eigen::Index n = positions.cols();
  require(n >= 2, "need at least two points");
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      best = std::min(best, (positions.col(j) - positions.col(i)).norm());
    }
    total += best;
  }
  return total / (double)n;
}

// Deterministic cloud from seed points: identity rotations, isotropic
// scale at the global mean nearest-neighbour distance, opacity logit at
// logit(0.1), flat (all-zero) mask logits.
inline GaussianCloud init_cloud(const std::vector<Vec3>& points, const std::vector<Vec3>& colors,
                                int timestamps, double color_floor = 1e-4) {
  require(!points.empty(), "init_cloud: no points");
  require(points.size() == colors.size(), "init_cloud: points/colors size mismatch");
  require(timestamps >= 1, "init_cloud: need at least one timestamp");
  const Eigen::Index n = (Eigen::Index)points.size();

  GaussianCloud cloud;
  cloud.timestamps = timestamps;
  cloud.position.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i) cloud.position.col(i) = points[i];

  cloud.rotation.resize(4, n);
  cloud.rotation.setZero();
  cloud.rotation.row(0).setOnes();

  const double nn = n >= 2 ? mean_nearest_distance(cloud.position) : 0.1;
  cloud.log_scale = Eigen::Matrix3Xd::Constant(3, n, std::log(std::max(nn, 1e-6)));

  cloud.color_logit.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(colors[i][c], color_floor, 1.0 - color_floor);
      cloud.color_logit(c, i) = logit(v);
    }

  cloud.opacity_logit = Eigen::RowVectorXd::Constant(n, logit(0.1));
  cloud.mask_logits = MatX::Zero(timestamps, n);
  cloud.grads.resize(n, timestamps);
  return cloud;
}

}  // namespace stdr

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "stdr/geometry.hpp"
#include "stdr/image.hpp"

namespace stdr {

// Splats whose 2D covariance determinant falls at or below this are dropped.
inline constexpr double kCovDetFloor = 1e-12;

struct RenderConfig {
  // Per-pixel contributions below this alpha are skipped. Zero disables the
  // skip and with it the tile culling, so every splat touches every pixel.
  double alpha_skip = 1.0 / 255.0;
  // Blending along a pixel stops once transmittance drops below this.
  double transmittance_floor = 1e-4;
  int tile_size = 16;

  void validate() const {
    require(alpha_skip >= 0.0 && transmittance_floor >= 0.0, "render config: negative threshold");
    require(tile_size >= 1, "render config: bad tile size");
  }
};

// Stable ascending sort by depth; equal depths keep input order.
inline std::vector<int> depth_sort(const std::vector<Splat2D>& splats) {
  std::vector<int> order(splats.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return splats[a].depth < splats[b].depth; });
  return order;
}

// Everything the backward pass needs to replay the forward traversal.
struct RenderContext {
  int width = 0;
  int height = 0;
  RenderConfig cfg;
  Vec3 background = Vec3::Zero();
  std::vector<Splat2D> splats;
  Eigen::Matrix3Xd colors;
  Eigen::RowVectorXd alphas;
  std::vector<Mat2> inv_cov;
  std::vector<char> active;
  int tiles_x = 0;
  int tiles_y = 0;
  std::vector<std::vector<int>> tile_splats;  // per tile, ids in ascending depth
};

struct RenderOutput {
  Image image;
  MatX final_transmittance;  // height x width
  RenderContext context;
};

struct RenderGrads {
  Eigen::Matrix2Xd mean2d;
  std::vector<Mat2> cov2d;
  Eigen::Matrix3Xd color;
  Eigen::RowVectorXd alpha;
};

namespace detail {

inline double max_eigenvalue_2x2(const Mat2& m) {
  const double half_trace = 0.5 * (m(0, 0) + m(1, 1));
  const double disc = 0.25 * (m(0, 0) - m(1, 1)) * (m(0, 0) - m(1, 1)) + m(0, 1) * m(1, 0);
  return half_trace + std::sqrt(std::max(0.0, disc));
}

// One splat's blended sample at a pixel, kept for the reverse sweep.
struct BlendSample {
  int id;
  double alpha_pix;
  double falloff;
  double transmittance;  // on entry to this splat
};

}  // namespace detail

inline RenderOutput render_forward(const std::vector<Splat2D>& splats,
                                   const Eigen::Matrix3Xd& colors,
                                   const Eigen::RowVectorXd& alphas, int width, int height,
                                   const Vec3& background, const RenderConfig& cfg = {}) {
  cfg.validate();
  const int n = static_cast<int>(splats.size());
  require(colors.cols() == n && alphas.size() == n, "render: per-splat array size mismatch");
  require(width >= 1 && height >= 1, "render: empty image");
  for (int i = 0; i < n; ++i)
    require(alphas[i] > 0.0 && alphas[i] < 1.0, "render: effective alpha must lie in (0, 1)");

  RenderOutput out;
  RenderContext& ctx = out.context;
  ctx.width = width;
  ctx.height = height;
  ctx.cfg = cfg;
  ctx.background = background;
  ctx.splats = splats;
  ctx.colors = colors;
  ctx.alphas = alphas;
  ctx.inv_cov.assign(n, Mat2::Zero());
  ctx.active.assign(n, 0);
  ctx.tiles_x = (width + cfg.tile_size - 1) / cfg.tile_size;
  ctx.tiles_y = (height + cfg.tile_size - 1) / cfg.tile_size;
  ctx.tile_splats.assign(static_cast<std::size_t>(ctx.tiles_x) * ctx.tiles_y, {});

  for (int i = 0; i < n; ++i) {
    if (splats[i].culled) continue;
    const Mat2& c = splats[i].cov2d;
    const double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
    if (det <= kCovDetFloor) continue;
    Mat2 inv;
    inv << c(1, 1), -c(0, 1), -c(1, 0), c(0, 0);
    ctx.inv_cov[i] = inv / det;
    ctx.active[i] = 1;
  }

  // bin splats to tiles in depth order so each tile list is already sorted
  const std::vector<int> order = depth_sort(splats);
  for (int id : order) {
    if (!ctx.active[id]) continue;
    int tx0 = 0, tx1 = ctx.tiles_x - 1, ty0 = 0, ty1 = ctx.tiles_y - 1;
    if (cfg.alpha_skip > 0.0) {
      if (alphas[id] < cfg.alpha_skip) continue;  // too faint for any pixel
      const double r2 = 2.0 * std::log(alphas[id] / cfg.alpha_skip);
      const double radius = std::sqrt(std::max(0.0, r2)) *
                            std::sqrt(std::max(0.0, detail::max_eigenvalue_2x2(splats[id].cov2d)));
      const Vec2& mu = splats[id].mean2d;
      const int px0 = static_cast<int>(std::floor(mu.x() - radius - 0.5));
      const int px1 = static_cast<int>(std::ceil(mu.x() + radius - 0.5));
      const int py0 = static_cast<int>(std::floor(mu.y() - radius - 0.5));
      const int py1 = static_cast<int>(std::ceil(mu.y() + radius - 0.5));
      if (px1 < 0 || py1 < 0 || px0 >= width || py0 >= height) continue;
      tx0 = std::max(0, px0 / cfg.tile_size);
      tx1 = std::min(ctx.tiles_x - 1, px1 / cfg.tile_size);
      ty0 = std::max(0, py0 / cfg.tile_size);
      ty1 = std::min(ctx.tiles_y - 1, py1 / cfg.tile_size);
    }
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx)
        ctx.tile_splats[static_cast<std::size_t>(ty) * ctx.tiles_x + tx].push_back(id);
  }

  out.image.resize(width, height);
  out.final_transmittance.setOnes(height, width);

  for (int ty = 0; ty < ctx.tiles_y; ++ty) {
    for (int tx = 0; tx < ctx.tiles_x; ++tx) {
      const auto& list = ctx.tile_splats[static_cast<std::size_t>(ty) * ctx.tiles_x + tx];
      const int y1 = std::min(height, (ty + 1) * cfg.tile_size);
      const int x1 = std::min(width, (tx + 1) * cfg.tile_size);
      for (int y = ty * cfg.tile_size; y < y1; ++y) {
        for (int x = tx * cfg.tile_size; x < x1; ++x) {
          const Vec2 p(x + 0.5, y + 0.5);
          Vec3 color = Vec3::Zero();
          double transmittance = 1.0;
          for (int id : list) {
            const Vec2 d = p - ctx.splats[id].mean2d;
            const double q = d.dot(ctx.inv_cov[id] * d);
            const double alpha_pix = ctx.alphas[id] * std::exp(-0.5 * q);
            if (alpha_pix < cfg.alpha_skip) continue;
            color += alpha_pix * transmittance * ctx.colors.col(id);
            transmittance *= 1.0 - alpha_pix;
            if (transmittance < cfg.transmittance_floor) break;
          }
          color += transmittance * background;
          for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = color[c];
          out.final_transmittance(y, x) = transmittance;
        }
      }
    }
  }
  return out;
}

inline RenderGrads render_backward(const RenderContext& ctx, const Image& dimage) {
  require(dimage.width == ctx.width && dimage.height == ctx.height,
          "render backward: gradient image shape mismatch");
  const int n = static_cast<int>(ctx.splats.size());

  RenderGrads grads;
  grads.mean2d.setZero(2, n);
  grads.cov2d.assign(n, Mat2::Zero());
  grads.color.setZero(3, n);
  grads.alpha.setZero(n);
  std::vector<Mat2> dinv(n, Mat2::Zero());

  std::vector<detail::BlendSample> samples;
  for (int ty = 0; ty < ctx.tiles_y; ++ty) {
    for (int tx = 0; tx < ctx.tiles_x; ++tx) {
      const auto& list = ctx.tile_splats[static_cast<std::size_t>(ty) * ctx.tiles_x + tx];
      const int y1 = std::min(ctx.height, (ty + 1) * ctx.cfg.tile_size);
      const int x1 = std::min(ctx.width, (tx + 1) * ctx.cfg.tile_size);
      for (int y = ty * ctx.cfg.tile_size; y < y1; ++y) {
        for (int x = tx * ctx.cfg.tile_size; x < x1; ++x) {
          const Vec2 p(x + 0.5, y + 0.5);

          // replay the forward traversal for this pixel
          samples.clear();
          double transmittance = 1.0;
          for (int id : list) {
            const Vec2 d = p - ctx.splats[id].mean2d;
            const double q = d.dot(ctx.inv_cov[id] * d);
            const double falloff = std::exp(-0.5 * q);
            const double alpha_pix = ctx.alphas[id] * falloff;
            if (alpha_pix < ctx.cfg.alpha_skip) continue;
            samples.push_back({id, alpha_pix, falloff, transmittance});
            transmittance *= 1.0 - alpha_pix;
            if (transmittance < ctx.cfg.transmittance_floor) break;
          }

          const Vec3 g(dimage.at(x, y, 0), dimage.at(x, y, 1), dimage.at(x, y, 2));

          // sweep back to front; behind holds the color blended behind the
          // current splat under unit transmittance
          Vec3 behind = ctx.background;
          for (auto it = samples.rbegin(); it != samples.rend(); ++it) {
            const int id = it->id;
            const Vec3 c = ctx.colors.col(id);
            grads.color.col(id) += it->alpha_pix * it->transmittance * g;
            const double dalpha_pix = g.dot(it->transmittance * (c - behind));
            grads.alpha[id] += dalpha_pix * it->falloff;
            const double dq = -0.5 * it->falloff * (dalpha_pix * ctx.alphas[id]);
            const Vec2 d = p - ctx.splats[id].mean2d;
            const Vec2 v = ctx.inv_cov[id] * d;
            grads.mean2d.col(id) -= 2.0 * dq * v;
            dinv[id] += dq * d * d.transpose();
            behind = it->alpha_pix * c + (1.0 - it->alpha_pix) * behind;
          }
        }
      }
    }
  }

  for (int id = 0; id < n; ++id) {
    if (!ctx.active[id]) continue;
    grads.cov2d[id] = -ctx.inv_cov[id] * dinv[id] * ctx.inv_cov[id];
  }
  return grads;
}

}  // namespace stdr

#pragma once

#include "stdr/core.hpp"

namespace stdr {

struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Vec4 vec() const { return Vec4(w, x, y, z); }
  static Quaternion from_vec(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }
  static Quaternion identity() { return {}; }
};

// Pinhole camera. Rotation maps world to camera coordinates (x right,
// y down, z forward); a point is visible when its camera z exceeds the
// near plane.
struct Camera {
  int width = 0;
  int height = 0;
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 to_camera(const Vec3& p_world) const { return rotation * p_world + translation; }

  void validate() const {
    require(width >= 1 && height >= 1, "camera: image dimensions must be positive");
    require(fx > 0.0 && fy > 0.0, "camera: focal lengths must be positive");
    const Mat3 err = rotation.transpose() * rotation - Mat3::Identity();
    require(err.cwiseAbs().maxCoeff() <= 1e-9, "camera: rotation is not orthonormal");
    require(std::abs(rotation.determinant() - 1.0) <= 1e-9,
            "camera: rotation determinant must be +1");
  }
};

constexpr double kQuatNormFloor = 1e-12;

// Rotation from a (not necessarily unit) quaternion; normalizes first.
inline Mat3 quat_to_rotmat(const Quaternion& q) {
  const double n = q.norm();
  require(n > kQuatNormFloor, "quaternion norm is degenerate");
  const double w = q.w / n, x = q.x / n, y = q.y / n, z = q.z / n;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// d(rotmat)/d(unit quat component c), c in {w,x,y,z}
inline Mat3 quat_rot_partial(const Quaternion& unit_q, int c) {
  const double w = unit_q.w, x = unit_q.x, y = unit_q.y, z = unit_q.z;
  Mat3 d;
  switch (c) {
    case 0:
      d << 0, -z, y, z, 0, -x, -y, x, 0;
      break;
    case 1:
      d << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
      break;
    case 2:
      d << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
      break;
    default:
      d << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
      break;
  }
  return 2.0 * d;
}

// Sigma = R S S^T R^T with S = diag(exp(log_scale)); symmetric PSD by
// construction.
inline Mat3 build_covariance(const Quaternion& q, const Vec3& log_scale) {
  const Mat3 r = quat_to_rotmat(q);
  const Vec3 s = log_scale.array().exp();
  const Mat3 m = r * s.asDiagonal();
  return m * m.transpose();
}

struct Splat2D {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  double depth = 0.0;
  bool culled = false;
};

struct ProjectionCache {
  bool culled = true;
  Vec3 x_cam = Vec3::Zero();
  Mat3 world_rot = Mat3::Identity();
  double fx = 0.0, fy = 0.0;
  Mat23 a = Mat23::Zero();  // J * W
  Mat3 cov3d = Mat3::Zero();
  Mat3 rot = Mat3::Identity();  // from normalized quaternion
  Vec3 scale = Vec3::Ones();    // exp(log_scale)
  Quaternion unit_q;
  double quat_norm = 1.0;
};

struct GaussianGeomGrad {
  Vec3 dposition = Vec3::Zero();
  Vec4 drotation = Vec4::Zero();
  Vec3 dlog_scale = Vec3::Zero();
};

// splats closer than this are culled
inline constexpr double kNearPlane = 0.01;
// screen-space anti-aliasing floor added to the projected covariance diagonal
inline constexpr double kLowpass = 0.3;

inline Splat2D project_gaussian(const Vec3& x_world, const Quaternion& q, const Vec3& log_scale,
                                const Camera& cam, double near_plane = kNearPlane,
                                double lowpass = kLowpass, ProjectionCache* cache = nullptr) {
  Splat2D out;
  const Vec3 xc = cam.to_camera(x_world);
  if (cache) {
    *cache = ProjectionCache{};
    cache->x_cam = xc;
  }
  if (xc.z() < near_plane) {
    out.culled = true;
    return out;
  }

  const double n = q.norm();
  require(n > kQuatNormFloor, "quaternion norm is degenerate");
  const Quaternion uq{q.w / n, q.x / n, q.y / n, q.z / n};
  const Mat3 r = quat_to_rotmat(uq);
  const Vec3 s = log_scale.array().exp();
  const Mat3 m = r * s.asDiagonal();
  const Mat3 cov3d = m * m.transpose();

  const double z = xc.z();
  Mat23 j;
  j << cam.fx / z, 0.0, -cam.fx * xc.x() / (z * z),
      0.0, cam.fy / z, -cam.fy * xc.y() / (z * z);
  const Mat23 a = j * cam.rotation;

  out.mean2d = Vec2(cam.fx * xc.x() / z + cam.cx, cam.fy * xc.y() / z + cam.cy);
  out.cov2d = a * cov3d * a.transpose();
  out.cov2d(0, 0) += lowpass;
  out.cov2d(1, 1) += lowpass;
  out.depth = z;
  out.culled = false;

  if (cache) {
    cache->culled = false;
    cache->world_rot = cam.rotation;
    cache->fx = cam.fx;
    cache->fy = cam.fy;
    cache->a = a;
    cache->cov3d = cov3d;
    cache->rot = r;
    cache->scale = s;
    cache->unit_q = uq;
    cache->quat_norm = n;
  }
  return out;
}

inline Splat2D project_gaussian(const Vec3& x_world, const Mat3& cov3d, const Camera& cam,
                                double near_plane, double lowpass) {
  Splat2D out;
  const Vec3 xc = cam.to_camera(x_world);
  if (xc.z() < near_plane) {
    out.culled = true;
    return out;
  }
  const double z = xc.z();
  Mat23 j;
  j << cam.fx / z, 0.0, -cam.fx * xc.x() / (z * z),
      0.0, cam.fy / z, -cam.fy * xc.y() / (z * z);
  const Mat23 a = j * cam.rotation;
  out.mean2d = Vec2(cam.fx * xc.x() / z + cam.cx, cam.fy * xc.y() / z + cam.cy);
  out.cov2d = a * cov3d * a.transpose();
  out.cov2d(0, 0) += lowpass;
  out.cov2d(1, 1) += lowpass;
  out.depth = z;
  return out;
}

// Reverse pass for the fused projection. dcov2d need not be symmetric.
inline GaussianGeomGrad project_backward(const ProjectionCache& c, const Vec2& dmean2d,
                                         const Mat2& dcov2d, double ddepth) {
  GaussianGeomGrad g;
  if (c.culled) return g;

  const double x = c.x_cam.x(), y = c.x_cam.y(), z = c.x_cam.z();
  const double fx = c.fx, fy = c.fy;

  // cov2d = A Sigma A^T
  const Mat3 dsigma = c.a.transpose() * dcov2d * c.a;
  const Mat23 da = (dcov2d + dcov2d.transpose()) * c.a * c.cov3d;
  const Mat23 dj = da * c.world_rot.transpose();

  Vec3 dxc = Vec3::Zero();
  dxc.x() += dj(0, 2) * (-fx / (z * z));
  dxc.y() += dj(1, 2) * (-fy / (z * z));
  dxc.z() += dj(0, 0) * (-fx / (z * z)) + dj(0, 2) * (2.0 * fx * x / (z * z * z)) +
             dj(1, 1) * (-fy / (z * z)) + dj(1, 2) * (2.0 * fy * y / (z * z * z));

  dxc.x() += dmean2d.x() * fx / z;
  dxc.z() += dmean2d.x() * (-fx * x / (z * z));
  dxc.y() += dmean2d.y() * fy / z;
  dxc.z() += dmean2d.y() * (-fy * y / (z * z));
  dxc.z() += ddepth;

  g.dposition = c.world_rot.transpose() * dxc;

  // Sigma = M M^T, M = R diag(s)
  const Mat3 m = c.rot * c.scale.asDiagonal();
  const Mat3 dm = (dsigma + dsigma.transpose()) * m;
  const Mat3 dr = dm * c.scale.asDiagonal();
  for (int k = 0; k < 3; ++k) {
    const double ds_k = dm.col(k).dot(c.rot.col(k));
    g.dlog_scale[k] = ds_k * c.scale[k];
  }

  Vec4 duq;
  for (int comp = 0; comp < 4; ++comp) {
    duq[comp] = (dr.array() * quat_rot_partial(c.unit_q, comp).array()).sum();
  }
  // through normalization q_hat = q / |q|
  const Vec4 qh = c.unit_q.vec();
  g.drotation = (duq - qh * qh.dot(duq)) / c.quat_norm;
  return g;
}

}  // namespace stdr

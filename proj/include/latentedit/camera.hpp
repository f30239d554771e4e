#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "latentedit/errors.hpp"

namespace latentedit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Camera parameter vector layout: rotation residual (axis-angle, 3),
// translation (3), focal (2), principal point (2). Radial distortion is held
// fixed and is not part of the optimised vector.
inline constexpr int kCameraParamCount = 10;
using CameraVector = Eigen::Matrix<double, kCameraParamCount, 1>;
using CameraMatrix = Eigen::Matrix<double, kCameraParamCount, kCameraParamCount>;

namespace camera_index {
inline constexpr int kRotation = 0;
inline constexpr int kTranslation = 3;
inline constexpr int kFocal = 6;
inline constexpr int kPrincipal = 8;
}  // namespace camera_index

Mat3 skew(const Vec3& w);
Mat3 so3_exp(const Vec3& w);
Vec3 so3_log(const Mat3& r);
// Left Jacobian of SO(3): exp(w + d) ~= exp(J_l(w) d) exp(w) to first order.
Mat3 so3_left_jacobian(const Vec3& w);

// Pinhole camera with radial distortion plus a residual update
//   rotation    = exp(offset[0:3]) * rotation0
//   translation = translation0 + offset[3:6]   (camera centre, world units)
//   focal       = focal0 + offset[6:8]
//   principal   = principal0 + offset[8:10]
// where offset = precond * delta_phi. `rotation` maps camera to world, so a
// world point p has camera coordinates rotation^T (p - translation).
struct CameraParams {
  Mat3 rotation0 = Mat3::Identity();
  Vec3 translation0 = Vec3::Zero();
  Vec2 focal0{1.0, 1.0};
  Vec2 principal0{0.0, 0.0};
  Vec2 distortion{0.0, 0.0};  // (k1, k2), frozen
  CameraVector delta_phi = CameraVector::Zero();
  CameraMatrix precond = CameraMatrix::Identity();

  CameraVector offset() const { return precond * delta_phi; }
  Mat3 rotation() const;
  Vec3 translation() const;
  Vec2 focal() const;
  Vec2 principal() const;

  // Copy of this camera with the effective offset replaced (delta_phi is set
  // so that precond * delta_phi == offset is bypassed: precond becomes I).
  CameraParams with_offset(const CameraVector& offset) const;

  // Throws ValidationError unless rotation0 is orthonormal within 1e-8 and
  // focal lengths are positive.
  void validate() const;

  bool operator==(const CameraParams& o) const = default;
};

// Camera at `eye` looking at `target`; image rows grow along -up.
CameraParams look_at(const Vec3& eye, const Vec3& target, const Vec3& up, const Vec2& focal, const Vec2& principal);

// phi0 (+) M * delta_phi as a k-vector: [log(R), t, f, c].
CameraVector apply_residual(const CameraParams& camera);
CameraVector initial_parameters(const CameraParams& camera);

// Stacks (u_j, v_j) for every point. Throws ProjectionError naming the first
// point with non-positive camera depth.
Eigen::VectorXd project_points(const CameraParams& camera, std::span<const Vec3> points);

// d project_points / d offset, evaluated at the current effective parameters.
// Shape (2m, k).
Eigen::MatrixXd projection_jacobian(const CameraParams& camera, std::span<const Vec3> points);

struct PreconditionReport {
  Eigen::MatrixXd sigma;          // J^T J + damping I
  Eigen::MatrixXd chol;           // lower L with sigma = L L^T
  Eigen::MatrixXd whitened_gram;  // (J M)^T (J M)
  double damping = 0.0;
};

struct Preconditioner {
  Eigen::MatrixXd matrix;  // M = L^{-T}
  PreconditionReport report;
};

class RankDeficiencyError : public Error {
 public:
  RankDeficiencyError(const std::string& what, Eigen::VectorXd null_direction)
      : Error(what), null_direction_(std::move(null_direction)) {}
  const Eigen::VectorXd& null_direction() const { return null_direction_; }

 private:
  Eigen::VectorXd null_direction_;
};

// 1e-10 * trace(J^T J) / k.
double default_damping(const Eigen::MatrixXd& jacobian);

// Whitening preconditioner: with sigma = J^T J + damping I = L L^T, returns
// M = L^{-T} so that M^T sigma M = I. Throws RankDeficiencyError when the
// factorisation fails.
Preconditioner precondition_matrix(const Eigen::MatrixXd& jacobian, double damping);

// Computes M from the projection Jacobian at the camera's current parameters
// over `proxy_points` and stores it in camera.precond. delta_phi is reset.
void initialize_preconditioner(CameraParams& camera, std::span<const Vec3> proxy_points, double damping);
void initialize_preconditioner(CameraParams& camera, std::span<const Vec3> proxy_points);

// Sum over cameras of ||theta - theta_0||^2 = ||M delta_phi||^2.
double loss_camera_reg(std::span<const CameraParams> cameras);
// d loss_camera_reg / d delta_phi for one camera: 2 M^T M delta_phi.
CameraVector camera_reg_gradient(const CameraParams& camera);

// m points uniformly inside the axis-aligned box [lo, hi], seeded.
std::vector<Vec3> sample_proxy_points(const Vec3& lo, const Vec3& hi, int m, std::uint64_t seed);

nlohmann::json camera_to_json(const CameraParams& camera);
CameraParams camera_from_json(const nlohmann::json& j);

}  // namespace latentedit

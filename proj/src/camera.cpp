#include "latentedit/camera.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace latentedit {

Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return s;
}

Mat3 so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 k = skew(w);
  if (theta2 == 0.0) return Mat3::Identity();
  double a, b;
  if (theta2 < 1e-12) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + a * k + b * k * k;
}

Vec3 so3_log(const Mat3& r) {
  const double cos_theta = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  const Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  if (theta < 1e-9) return 0.5 * v;
  if (M_PI - theta < 1e-6) {
    // Near pi: recover the axis from the symmetric part.
    const Mat3 b = 0.5 * (r + Mat3::Identity());
    int i = 0;
    b.diagonal().maxCoeff(&i);
    Vec3 axis = b.col(i) / std::sqrt(std::max(b(i, i), 1e-300));
    axis.normalize();
    if (axis.dot(v) < 0) axis = -axis;
    return theta * axis;
  }
  return theta / (2.0 * std::sin(theta)) * v;
}

Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 k = skew(w);
  double a, b;
  if (theta2 < 1e-10) {
    a = 0.5 - theta2 / 24.0;
    b = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = (1.0 - std::cos(theta)) / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + a * k + b * k * k;
}

Mat3 CameraParams::rotation() const {
  const CameraVector o = offset();
  return so3_exp(o.segment<3>(camera_index::kRotation)) * rotation0;
}

Vec3 CameraParams::translation() const { return translation0 + offset().segment<3>(camera_index::kTranslation); }
Vec2 CameraParams::focal() const { return focal0 + offset().segment<2>(camera_index::kFocal); }
Vec2 CameraParams::principal() const { return principal0 + offset().segment<2>(camera_index::kPrincipal); }

CameraParams CameraParams::with_offset(const CameraVector& o) const {
  CameraParams out = *this;
  out.precond = CameraMatrix::Identity();
  out.delta_phi = o;
  return out;
}

void CameraParams::validate() const {
  const double err = (rotation0.transpose() * rotation0 - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(err <= 1e-8)) throw ValidationError("camera rotation is not orthonormal (error " + std::to_string(err) + ")");
  if (!(focal0.x() > 0 && focal0.y() > 0)) throw ValidationError("camera focal lengths must be positive");
  if (!translation0.allFinite() || !principal0.allFinite() || !distortion.allFinite()) {
    throw ValidationError("camera has non-finite parameters");
  }
}

CameraParams look_at(const Vec3& eye, const Vec3& target, const Vec3& up, const Vec2& focal, const Vec2& principal) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  CameraParams cam;
  cam.rotation0.col(0) = right;
  cam.rotation0.col(1) = down;
  cam.rotation0.col(2) = forward;
  cam.translation0 = eye;
  cam.focal0 = focal;
  cam.principal0 = principal;
  return cam;
}

CameraVector initial_parameters(const CameraParams& camera) {
  CameraVector phi;
  phi.segment<3>(camera_index::kRotation) = so3_log(camera.rotation0);
  phi.segment<3>(camera_index::kTranslation) = camera.translation0;
  phi.segment<2>(camera_index::kFocal) = camera.focal0;
  phi.segment<2>(camera_index::kPrincipal) = camera.principal0;
  return phi;
}

CameraVector apply_residual(const CameraParams& camera) {
  CameraVector phi;
  phi.segment<3>(camera_index::kRotation) = so3_log(camera.rotation());
  phi.segment<3>(camera_index::kTranslation) = camera.translation();
  phi.segment<2>(camera_index::kFocal) = camera.focal();
  phi.segment<2>(camera_index::kPrincipal) = camera.principal();
  return phi;
}

Eigen::VectorXd project_points(const CameraParams& camera, std::span<const Vec3> points) {
  const Mat3 r = camera.rotation();
  const Vec3 t = camera.translation();
  const Vec2 f = camera.focal();
  const Vec2 c = camera.principal();
  const double k1 = camera.distortion.x(), k2 = camera.distortion.y();
  Eigen::VectorXd out(2 * points.size());
  for (std::size_t j = 0; j < points.size(); ++j) {
    const Vec3 x = r.transpose() * (points[j] - t);
    if (!(x.z() > 0.0)) {
      throw ProjectionError(j, "point " + std::to_string(j) + " has non-positive depth " + std::to_string(x.z()));
    }
    const double xn = x.x() / x.z(), yn = x.y() / x.z();
    const double r2 = xn * xn + yn * yn;
    const double d = 1.0 + k1 * r2 + k2 * r2 * r2;
    out(2 * j) = f.x() * xn * d + c.x();
    out(2 * j + 1) = f.y() * yn * d + c.y();
  }
  return out;
}

Eigen::MatrixXd projection_jacobian(const CameraParams& camera, std::span<const Vec3> points) {
  using namespace camera_index;
  const CameraVector o = camera.offset();
  const Mat3 r = camera.rotation();
  const Vec3 t = camera.translation();
  const Vec2 f = camera.focal();
  const double k1 = camera.distortion.x(), k2 = camera.distortion.y();
  const Mat3 jl = so3_left_jacobian(o.segment<3>(kRotation));
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(2 * points.size(), kCameraParamCount);
  for (std::size_t j = 0; j < points.size(); ++j) {
    const Vec3 q = points[j] - t;
    const Vec3 x = r.transpose() * q;
    if (!(x.z() > 0.0)) {
      throw ProjectionError(j, "point " + std::to_string(j) + " has non-positive depth " + std::to_string(x.z()));
    }
    const double z = x.z();
    const double xn = x.x() / z, yn = x.y() / z;
    const double r2 = xn * xn + yn * yn;
    const double d = 1.0 + k1 * r2 + k2 * r2 * r2;
    const double dd_dr2 = k1 + 2.0 * k2 * r2;

    // d(xd, yd) / d(xn, yn)
    Eigen::Matrix2d ddist;
    ddist << d + 2.0 * xn * xn * dd_dr2, 2.0 * xn * yn * dd_dr2, 2.0 * xn * yn * dd_dr2, d + 2.0 * yn * yn * dd_dr2;
    // d(xn, yn) / d x_cam
    Eigen::Matrix<double, 2, 3> dn;
    dn << 1.0 / z, 0.0, -x.x() / (z * z), 0.0, 1.0 / z, -x.y() / (z * z);
    const Eigen::Matrix<double, 2, 3> duv_dx = f.asDiagonal() * ddist * dn;

    const Mat3 dx_dw = r.transpose() * skew(q) * jl;
    const Mat3 dx_dt = -r.transpose();

    const auto row = static_cast<Eigen::Index>(2 * j);
    jac.block<2, 3>(row, kRotation) = duv_dx * dx_dw;
    jac.block<2, 3>(row, kTranslation) = duv_dx * dx_dt;
    jac(row, kFocal) = xn * d;
    jac(row + 1, kFocal + 1) = yn * d;
    jac(row, kPrincipal) = 1.0;
    jac(row + 1, kPrincipal + 1) = 1.0;
  }
  return jac;
}

double default_damping(const Eigen::MatrixXd& jacobian) {
  const double trace = jacobian.colwise().squaredNorm().sum();
  return 1e-10 * trace / static_cast<double>(jacobian.cols());
}

Preconditioner precondition_matrix(const Eigen::MatrixXd& jacobian, double damping) {
  if (!(damping >= 0.0)) throw ValidationError("damping must be non-negative");
  const Eigen::Index k = jacobian.cols();
  Preconditioner out;
  out.report.damping = damping;
  out.report.sigma = jacobian.transpose() * jacobian;
  out.report.sigma.diagonal().array() += damping;

  Eigen::LLT<Eigen::MatrixXd> llt(out.report.sigma);
  if (llt.info() != Eigen::Success || !llt.matrixL().toDenseMatrix().allFinite()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.report.sigma);
    const Eigen::VectorXd null_dir = eig.eigenvectors().col(0);
    throw RankDeficiencyError("camera Jacobian Gram matrix is rank deficient (smallest eigenvalue " +
                                  std::to_string(eig.eigenvalues()(0)) + ")",
                              null_dir);
  }
  out.report.chol = llt.matrixL().toDenseMatrix();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(k, k);
  // M = L^{-T}: solve L^T M = I.
  out.matrix = out.report.chol.transpose().triangularView<Eigen::Upper>().solve(eye);
  const Eigen::MatrixXd jm = jacobian * out.matrix;
  out.report.whitened_gram = jm.transpose() * jm;
  return out;
}

void initialize_preconditioner(CameraParams& camera, std::span<const Vec3> proxy_points, double damping) {
  const Eigen::MatrixXd jac = projection_jacobian(camera, proxy_points);
  const Preconditioner p = precondition_matrix(jac, damping);
  // Fold the current offset into the frozen initial estimate so that the new
  // residual starts from zero.
  const CameraVector current = camera.offset();
  camera.rotation0 = so3_exp(current.segment<3>(camera_index::kRotation)) * camera.rotation0;
  camera.translation0 += current.segment<3>(camera_index::kTranslation);
  camera.focal0 += current.segment<2>(camera_index::kFocal);
  camera.principal0 += current.segment<2>(camera_index::kPrincipal);
  camera.precond = p.matrix;
  camera.delta_phi.setZero();
}

void initialize_preconditioner(CameraParams& camera, std::span<const Vec3> proxy_points) {
  initialize_preconditioner(camera, proxy_points, default_damping(projection_jacobian(camera, proxy_points)));
}

double loss_camera_reg(std::span<const CameraParams> cameras) {
  double total = 0.0;
  for (const auto& cam : cameras) total += cam.offset().squaredNorm();
  return total;
}

CameraVector camera_reg_gradient(const CameraParams& camera) {
  return 2.0 * camera.precond.transpose() * camera.offset();
}

std::vector<Vec3> sample_proxy_points(const Vec3& lo, const Vec3& hi, int m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec3> pts(static_cast<std::size_t>(m));
  for (auto& p : pts) {
    for (int a = 0; a < 3; ++a) p(a) = lo(a) + (hi(a) - lo(a)) * u(rng);
  }
  return pts;
}

nlohmann::json camera_to_json(const CameraParams& camera) {
  nlohmann::json j;
  std::vector<double> rot(9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot[static_cast<std::size_t>(3 * r + c)] = camera.rotation0(r, c);
  j["rotation"] = rot;
  j["translation"] = {camera.translation0.x(), camera.translation0.y(), camera.translation0.z()};
  j["focal"] = {camera.focal0.x(), camera.focal0.y()};
  j["principal"] = {camera.principal0.x(), camera.principal0.y()};
  j["distortion"] = {camera.distortion.x(), camera.distortion.y()};
  return j;
}

namespace {

std::vector<double> read_array(const nlohmann::json& j, const char* key, std::size_t n) {
  if (!j.contains(key)) throw FormatError(std::string("camera JSON missing field '") + key + "'");
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != n) {
    throw FormatError(std::string("camera field '") + key + "' must be an array of " + std::to_string(n));
  }
  std::vector<double> v;
  for (const auto& x : a) {
    if (!x.is_number()) throw FormatError(std::string("camera field '") + key + "' must be numeric");
    v.push_back(x.get<double>());
  }
  return v;
}

}  // namespace

CameraParams camera_from_json(const nlohmann::json& j) {
  CameraParams cam;
  const auto rot = read_array(j, "rotation", 9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.rotation0(r, c) = rot[static_cast<std::size_t>(3 * r + c)];
  const auto t = read_array(j, "translation", 3);
  cam.translation0 = Vec3(t[0], t[1], t[2]);
  const auto f = read_array(j, "focal", 2);
  cam.focal0 = Vec2(f[0], f[1]);
  const auto c = read_array(j, "principal", 2);
  cam.principal0 = Vec2(c[0], c[1]);
  if (j.contains("distortion")) {
    const auto d = read_array(j, "distortion", 2);
    cam.distortion = Vec2(d[0], d[1]);
  }
  cam.validate();
  return cam;
}

}  // namespace latentedit

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/QR>
#include <random>

#include "latentedit/camera.hpp"
#include "test_util.hpp"

using namespace latentedit;

namespace {

CameraParams random_camera(std::uint64_t seed, bool distorted) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 eye(3.0 + u(rng), 2.0 * u(rng), 1.5 + u(rng));
  CameraParams cam = look_at(eye, Vec3(0.1 * u(rng), 0.1 * u(rng), 0.0), Vec3::UnitZ(),
                             Vec2(40.0 + 5.0 * u(rng), 42.0 + 5.0 * u(rng)), Vec2(16.0 + u(rng), 15.0 + u(rng)));
  if (distorted) cam.distortion = Vec2(0.05 * u(rng), 0.01 * u(rng));
  for (int i = 0; i < kCameraParamCount; ++i) cam.delta_phi(i) = 0.02 * u(rng);
  return cam;
}

std::vector<Vec3> random_points(int m, std::uint64_t seed) {
  return sample_proxy_points(Vec3(-0.8, -0.8, -0.8), Vec3(0.8, 0.8, 0.8), m, seed);
}

// Standalone projection: rotation built from Eigen's angle-axis type rather
// than the library's exponential map.
Eigen::VectorXd reference_projection(const CameraParams& cam, const std::vector<Vec3>& pts) {
  const CameraVector o = cam.precond * cam.delta_phi;
  const Vec3 w = o.segment<3>(0);
  const Mat3 dr = w.norm() > 0 ? Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix() : Mat3::Identity();
  const Mat3 r = dr * cam.rotation0;
  const Vec3 t = cam.translation0 + o.segment<3>(3);
  const double fx = cam.focal0.x() + o(6), fy = cam.focal0.y() + o(7);
  const double cx = cam.principal0.x() + o(8), cy = cam.principal0.y() + o(9);
  Eigen::VectorXd out(2 * pts.size());
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const Vec3 d = pts[j] - t;
    double x = 0, y = 0, z = 0;
    for (int k = 0; k < 3; ++k) {
      x += r(k, 0) * d(k);
      y += r(k, 1) * d(k);
      z += r(k, 2) * d(k);
    }
    const double xn = x / z, yn = y / z, r2 = xn * xn + yn * yn;
    const double s = 1.0 + cam.distortion.x() * r2 + cam.distortion.y() * r2 * r2;
    out(2 * j) = fx * xn * s + cx;
    out(2 * j + 1) = fy * yn * s + cy;
  }
  return out;
}

Eigen::MatrixXd fd_jacobian_offset(const CameraParams& cam, const std::vector<Vec3>& pts, double h) {
  const CameraVector o = cam.offset();
  Eigen::MatrixXd j(2 * pts.size(), kCameraParamCount);
  for (int i = 0; i < kCameraParamCount; ++i) {
    CameraVector p = o, m = o;
    p(i) += h;
    m(i) -= h;
    j.col(i) = (project_points(cam.with_offset(p), pts) - project_points(cam.with_offset(m), pts)) / (2 * h);
  }
  return j;
}

Eigen::MatrixXd random_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

double condition(const Eigen::MatrixXd& s) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  return es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff();
}

}  // namespace

TEST(So3, ExpLogRoundTripAndLeftJacobian) {
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec3 w(u(rng), u(rng), u(rng));
    EXPECT_LT((so3_log(so3_exp(w)) - w).norm(), 1e-12);
    const Mat3 r = so3_exp(w);
    EXPECT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    // exp(w + d) exp(w)^T ~= exp(J_l d)
    const Vec3 d(1e-6 * u(rng), 1e-6 * u(rng), 1e-6 * u(rng));
    const Vec3 lhs = so3_log(so3_exp(w + d) * r.transpose());
    EXPECT_LT((lhs - so3_left_jacobian(w) * d).norm(), 1e-11);
  }
  EXPECT_EQ(so3_exp(Vec3::Zero()), Mat3::Identity());
}

TEST(Projection, AxisPointLandsOnPrincipalPoint) {
  CameraParams cam;
  cam.focal0 = Vec2(50, 60);
  cam.principal0 = Vec2(12, 9);
  const std::vector<Vec3> pts{Vec3(0, 0, 1)};
  const Eigen::VectorXd uv = project_points(cam, pts);
  EXPECT_DOUBLE_EQ(uv(0), 12.0);
  EXPECT_DOUBLE_EQ(uv(1), 9.0);
}

TEST(Projection, DoublingFocalDoublesOffsetFromPrincipal) {
  CameraParams cam = random_camera(1, false);
  cam.delta_phi.setZero();
  CameraParams wide = cam;
  wide.focal0.x() *= 2.0;
  const auto pts = random_points(8, 2);
  const Eigen::VectorXd a = project_points(cam, pts), b = project_points(wide, pts);
  const double cx = cam.principal().x();
  for (std::size_t j = 0; j < pts.size(); ++j) {
    EXPECT_NEAR(b(2 * j) - cx, 2.0 * (a(2 * j) - cx), 1e-9);
  }
}

TEST(Projection, MatchesScalarReference) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const CameraParams cam = random_camera(seed, seed % 2 == 1);
    const auto pts = random_points(16, seed + 100);
    EXPECT_LT((project_points(cam, pts) - reference_projection(cam, pts)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Projection, NegativeDepthNamesThePoint) {
  CameraParams cam;
  const std::vector<Vec3> pts{Vec3(0, 0, 2), Vec3(0, 0, 3), Vec3(0, 0, -1)};
  try {
    project_points(cam, pts);
    FAIL() << "expected ProjectionError";
  } catch (const ProjectionError& e) {
    EXPECT_EQ(e.point_index(), 2u);
  }
}

TEST(Jacobian, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const CameraParams cam = random_camera(seed, seed % 2 == 0);
    const auto pts = random_points(12, seed + 7);
    const Eigen::MatrixXd j = projection_jacobian(cam, pts);
    ASSERT_EQ(j.rows(), 24);
    ASSERT_EQ(j.cols(), kCameraParamCount);
    const Eigen::MatrixXd fd = fd_jacobian_offset(cam, pts, 1e-6);
    for (Eigen::Index i = 0; i < j.size(); ++i) {
      const double a = j.data()[i], b = fd.data()[i];
      EXPECT_LE(std::abs(a - b), 1e-5 * std::max(1.0, std::abs(b))) << "seed " << seed << " entry " << i;
    }
  }
}

TEST(Jacobian, PrincipalColumnsAreExact) {
  CameraParams cam = random_camera(3, false);
  const auto pts = random_points(5, 1);
  const Eigen::MatrixXd j = projection_jacobian(cam, pts);
  for (int r = 0; r < 10; ++r) {
    EXPECT_EQ(j(r, camera_index::kPrincipal), r % 2 == 0 ? 1.0 : 0.0);
    EXPECT_EQ(j(r, camera_index::kPrincipal + 1), r % 2 == 0 ? 0.0 : 1.0);
  }
}

TEST(Precondition, OrthonormalColumnsGiveIdentity) {
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(random_matrix(20, 10, 4)).householderQ() *
                            Eigen::MatrixXd::Identity(20, 10);
  const Preconditioner p = precondition_matrix(q, 0.0);
  EXPECT_LT((p.matrix - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Precondition, WhitensRandomJacobians) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Eigen::MatrixXd j = random_matrix(24, 10, seed);
    j.col(seed % 10) *= 50.0;
    const Preconditioner p = precondition_matrix(j, 0.0);
    const Eigen::MatrixXd jm = j * p.matrix;
    EXPECT_LT((jm.transpose() * jm - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((p.report.whitened_gram - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff(), 1e-8);
    // L is lower triangular and reproduces sigma.
    EXPECT_LT(p.report.chol.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff(), 1e-300);
    EXPECT_LT((p.report.chol * p.report.chol.transpose() - p.report.sigma).cwiseAbs().maxCoeff(),
              1e-9 * p.report.sigma.cwiseAbs().maxCoeff());
    const double before = condition(j.transpose() * j), after = condition(jm.transpose() * jm);
    EXPECT_LE(after, before);
    if (before > 1.0 + 1e-6) EXPECT_LT(after, before);
  }
}

TEST(Precondition, RankDeficiencyNeedsDamping) {
  Eigen::MatrixXd j = random_matrix(24, 10, 9);
  j.col(4).setZero();
  try {
    precondition_matrix(j, 0.0);
    FAIL() << "expected RankDeficiencyError";
  } catch (const RankDeficiencyError& e) {
    const Eigen::VectorXd n = e.null_direction().normalized();
    EXPECT_GT(std::abs(n(4)), 0.99);
  }
  EXPECT_NO_THROW(precondition_matrix(j, 1e-8));
}

TEST(Precondition, DefaultDampingScalesWithTrace) {
  const Eigen::MatrixXd j = random_matrix(12, 10, 1);
  EXPECT_DOUBLE_EQ(default_damping(j), 1e-10 * (j.transpose() * j).trace() / 10.0);
}

TEST(Residual, ZeroResidualIsInitialEstimate) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CameraParams cam = random_camera(seed, false);
    cam.delta_phi.setZero();
    cam.precond = random_matrix(10, 10, seed).triangularView<Eigen::Upper>();
    EXPECT_EQ(cam.rotation(), cam.rotation0);
    EXPECT_EQ(cam.translation(), cam.translation0);
    EXPECT_EQ(apply_residual(cam), initial_parameters(cam));
  }
}

TEST(Residual, FocalEntryShiftsFocalOnly) {
  CameraParams cam = random_camera(2, false);
  cam.delta_phi.setZero();
  const CameraVector before = apply_residual(cam);
  cam.delta_phi(camera_index::kFocal) = 0.25;
  const CameraVector after = apply_residual(cam);
  CameraVector expected = before;
  expected(camera_index::kFocal) += 0.25;
  EXPECT_LT((after - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Residual, ChainRuleThroughPreconditioner) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CameraParams cam = random_camera(seed, false);
    const auto pts = random_points(10, seed);
    initialize_preconditioner(cam, pts);
    cam.delta_phi = 0.01 * random_matrix(10, 1, seed + 50);
    const Eigen::MatrixXd analytic = projection_jacobian(cam, pts) * cam.precond;
    Eigen::MatrixXd fd(analytic.rows(), analytic.cols());
    const double h = 1e-6;
    for (int i = 0; i < kCameraParamCount; ++i) {
      CameraParams p = cam, m = cam;
      p.delta_phi(i) += h;
      m.delta_phi(i) -= h;
      fd.col(i) = (project_points(p, pts) - project_points(m, pts)) / (2 * h);
    }
    EXPECT_LT((analytic - fd).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, fd.cwiseAbs().maxCoeff()));
  }
}

TEST(CameraReg, ZeroAtInitialAndArithmetic) {
  std::vector<CameraParams> cams{random_camera(0, false), random_camera(1, false)};
  for (auto& c : cams) c.delta_phi.setZero();
  EXPECT_EQ(loss_camera_reg(cams), 0.0);
  cams[1].delta_phi(camera_index::kFocal) = 2.0;
  EXPECT_DOUBLE_EQ(loss_camera_reg(cams), 4.0);
}

TEST(CameraReg, RandomOffsetsMatchScalarSum) {
  std::vector<CameraParams> cams;
  double expected = 0.0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    CameraParams c = random_camera(seed, false);
    c.precond = random_matrix(10, 10, seed + 9).triangularView<Eigen::Upper>();
    for (int i = 0; i < 10; ++i) {
      double o = 0.0;
      for (int k = 0; k < 10; ++k) o += c.precond(i, k) * c.delta_phi(k);
      expected += o * o;
    }
    cams.push_back(c);
  }
  EXPECT_NEAR(loss_camera_reg(cams), expected, 1e-12 * expected);
}

TEST(CameraReg, ZeroIffEffectiveEqualsInitial) {
  CameraParams c = random_camera(5, false);
  c.delta_phi.setZero();
  EXPECT_EQ(loss_camera_reg(std::span<const CameraParams>(&c, 1)), 0.0);
  c.delta_phi(3) = 1e-3;
  EXPECT_GT(loss_camera_reg(std::span<const CameraParams>(&c, 1)), 0.0);
  EXPECT_NE(apply_residual(c), initial_parameters(c));
}

TEST(CameraReg, GradientMatchesFiniteDifferences) {
  CameraParams c = random_camera(6, false);
  c.precond = random_matrix(10, 10, 3).triangularView<Eigen::Upper>();
  const CameraVector g = camera_reg_gradient(c);
  auto f = [&](const Eigen::VectorXd& d) {
    CameraParams x = c;
    x.delta_phi = d;
    return loss_camera_reg(std::span<const CameraParams>(&x, 1));
  };
  const Eigen::VectorXd fd = latentedit::testing::central_difference(f, c.delta_phi, 1e-6);
  EXPECT_LT(latentedit::testing::relative_error(g, fd), 1e-7);
}

TEST(Camera, JsonRoundTrip) {
  CameraParams c = random_camera(7, true);
  c.delta_phi.setZero();
  c.precond.setIdentity();
  const CameraParams back = camera_from_json(camera_to_json(c));
  EXPECT_EQ(back, c);
  const auto j = camera_to_json(c);
  EXPECT_EQ(j.at("rotation").size(), 9u);
  EXPECT_EQ(j.at("distortion").size(), 2u);
}

TEST(Camera, ProxyPointsStayInBoxAndAreSeeded) {
  const auto a = sample_proxy_points(Vec3(-1, -2, -3), Vec3(1, 2, 3), 32, 4);
  EXPECT_EQ(a.size(), 32u);
  for (const auto& p : a) {
    EXPECT_TRUE((p.array() >= Eigen::Array3d(-1, -2, -3)).all());
    EXPECT_TRUE((p.array() <= Eigen::Array3d(1, 2, 3)).all());
  }
  EXPECT_EQ(a, sample_proxy_points(Vec3(-1, -2, -3), Vec3(1, 2, 3), 32, 4));
}

TEST(Camera, ValidateRejectsNonOrthonormalRotation) {
  CameraParams c;
  c.rotation0(0, 0) = 1.1;
  EXPECT_THROW(c.validate(), ValidationError);
}

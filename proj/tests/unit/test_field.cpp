#include <gtest/gtest.h>

#include <random>

#include "latentedit/adapter.hpp"
#include "latentedit/camera.hpp"
#include "latentedit/errors.hpp"
#include "latentedit/field.hpp"
#include "latentedit/rays.hpp"
#include "test_util.hpp"

using namespace latentedit;
using latentedit::testing::central_difference;
using latentedit::testing::relative_error;

namespace {

FieldArchitecture small_arch() { return {.position_bands = 2, .direction_bands = 1, .hidden_width = 12, .hidden_layers = 2}; }

// Random weights and biases, so no unit is structurally dead.
FieldState random_field(const FieldArchitecture& arch, std::uint64_t seed) {
  FieldState s = FieldState::create(arch, seed);
  std::mt19937_64 rng(seed + 1000);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const auto& l : s.layout()) {
    for (int k = 0; k < l.out; ++k) s.params[static_cast<Eigen::Index>(l.bias_offset) + k] = u(rng);
  }
  return s;
}

// Constant field: softplus(sigma_bias) density and latent z everywhere.
FieldState constant_field(double sigma_bias, const Eigen::Vector4d& z) {
  FieldState s = FieldState::create(small_arch(), 0, true);
  const auto& sh = s.layout()[s.sigma_head()];
  s.params[static_cast<Eigen::Index>(sh.bias_offset)] = sigma_bias;
  const auto& lh = s.layout()[s.latent_head()];
  for (int c = 0; c < 4; ++c) s.params[static_cast<Eigen::Index>(lh.bias_offset) + c] = z(c);
  return s;
}

std::vector<Ray> random_rays(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Ray> rays;
  for (int i = 0; i < n; ++i) {
    Ray r;
    r.origin = Vec3(3.0, 0.3 * u(rng), 0.3 * u(rng));
    r.direction = (Vec3(-1.0, 0.2 * u(rng), 0.2 * u(rng))).normalized();
    r.t_near = 1.5;
    r.t_far = 4.5;
    rays.push_back(r);
  }
  return rays;
}

double inverse_softplus(double y) { return std::log(std::expm1(y)); }

}  // namespace

TEST(PositionalEncode, ZeroPointTwoBands) {
  const Eigen::VectorXd e = positional_encode(Vec3::Zero(), 2);
  Eigen::VectorXd expected(15);
  expected << 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1;
  EXPECT_EQ(e, expected);
}

TEST(PositionalEncode, NoBandsIsIdentity) {
  const Vec3 p(0.3, -2.0, 5.5);
  EXPECT_EQ(positional_encode(p, 0), Eigen::VectorXd(p));
}

TEST(PositionalEncode, HalfGivesUnitSine) {
  const Eigen::VectorXd e = positional_encode(Vec3(0.5, 0, 0), 1);
  EXPECT_EQ(e.size(), 9);
  EXPECT_EQ(e(3), 1.0);
}

TEST(FieldEval, ZeroHeadsAreConstant) {
  const FieldState s = FieldState::create(FieldArchitecture{}, 3, true);
  for (int i = 0; i < 5; ++i) {
    const FieldOutput out = field_eval(s, Vec3(0.1 * i, -0.2, 0.3), Vec3::UnitX());
    EXPECT_EQ(out.latent, Eigen::Vector4d::Zero());
    EXPECT_DOUBLE_EQ(out.sigma, std::log(2.0));
  }
}

TEST(FieldEval, DeterministicAndNonNegativeDensity) {
  const FieldState s = FieldState::create(FieldArchitecture{}, 4);
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    const Vec3 v = Vec3(u(rng), u(rng), u(rng)).normalized();
    const FieldOutput a = field_eval(s, p, v), b = field_eval(s, p, v);
    EXPECT_EQ(a.latent, b.latent);
    EXPECT_EQ(a.sigma, b.sigma);
    EXPECT_GE(a.sigma, 0.0);
  }
}

TEST(FieldEval, NonFiniteInputIsValidationError) {
  const FieldState s = FieldState::create(FieldArchitecture{}, 4);
  EXPECT_THROW(field_eval(s, Vec3(std::nan(""), 0, 0), Vec3::UnitX()), ValidationError);
}

// d z4 / d params against central differences of field_eval, per point.
TEST(FieldEval, LatentJacobianMatchesFiniteDifferences) {
  const FieldState s = random_field(small_arch(), 7);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int checked = 0;
  for (int i = 0; i < 100; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    const Vec3 v = Vec3(u(rng), u(rng), u(rng)).normalized();
    const int channel = i % 4;
    Eigen::MatrixXd pin(positional_encode(p, s.architecture().position_bands));
    Eigen::MatrixXd din(positional_encode(v, s.architecture().direction_bands));
    const MlpTape tape = mlp_forward(s, pin, din);
    Eigen::Matrix4Xd dl = Eigen::Matrix4Xd::Zero(4, 1);
    dl(channel, 0) = 1.0;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(s.params.size());
    mlp_backward(s, tape, dl, Eigen::RowVectorXd::Zero(1), g, nullptr, nullptr);
    auto f = [&](const Eigen::VectorXd& params) {
      FieldState t = s;
      t.params = params;
      return field_eval(t, p, v).latent(channel);
    };
    const Eigen::VectorXd fd = central_difference(f, s.params, 1e-4);
    EXPECT_LT(relative_error(g, fd), 1e-4) << "point " << i;
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(GenerateRays, PrincipalPixelLooksForward) {
  CameraParams cam;
  cam.focal0 = Vec2(10, 10);
  cam.principal0 = Vec2(4.5, 3.5);
  const std::vector<PixelIndex> px{{3, 4}};
  const auto rays = generate_rays(cam, px, 8, 10, 1, 1.0, 2.0);
  ASSERT_EQ(rays.size(), 1u);
  EXPECT_LT((rays[0].direction - Vec3::UnitZ()).norm(), 1e-15);
  EXPECT_EQ(rays[0].origin, cam.translation());
}

TEST(GenerateRays, FullLatentGridAndUnitDirections) {
  const CameraParams cam = look_at(Vec3(4, 1, 2), Vec3::Zero(), Vec3::UnitZ(), Vec2(300, 300), Vec2(160, 256));
  const auto rays = generate_rays(cam, all_pixels(64, 40), 64, 40, 8, 2.0, 6.0);
  EXPECT_EQ(rays.size(), 2560u);
  for (const auto& r : rays) EXPECT_NEAR(r.direction.norm(), 1.0, 1e-6);
}

TEST(GenerateRays, OutOfRangePixelIsValidationError) {
  const CameraParams cam;
  const std::vector<PixelIndex> px{{0, 5}};
  EXPECT_THROW(generate_rays(cam, px, 4, 5, 1, 1.0, 2.0), ValidationError);
}

TEST(GenerateRays, FactorEightGivesSixtyFourTimesFewerRays) {
  const CameraParams cam = look_at(Vec3(4, 0, 0), Vec3::Zero(), Vec3::UnitZ(), Vec2(460, 460), Vec2(256, 256));
  const int f = 8;
  const auto rays = generate_rays(cam, all_pixels(512 / f, 512 / f), 512 / f, 512 / f, f, 2.0, 6.0);
  EXPECT_EQ(rays.size(), 4096u);
  EXPECT_EQ(512u * 512u / rays.size(), 64u);
}

TEST(RenderRay, ZeroDensityReturnsBackgroundExactly) {
  const FieldState s = constant_field(-1e4, Eigen::Vector4d(1, 2, 3, 4));
  RenderConfig cfg;
  cfg.background_latent = Eigen::Vector4d(0.3, -0.7, 0.1, 1e-3);
  for (const auto& r : random_rays(5, 0)) EXPECT_EQ(render_ray(s, r, cfg), cfg.background_latent);
}

TEST(RenderRay, HomogeneousMediumMatchesClosedForm) {
  const Eigen::Vector4d zc(0.4, -0.2, 0.9, 0.1);
  const double sigma = 0.8;
  const FieldState s = constant_field(inverse_softplus(sigma), zc);
  RenderConfig cfg;
  cfg.samples_per_ray = 256;
  for (const auto& r : random_rays(5, 1)) {
    const Eigen::Vector4d expected = zc * (1.0 - std::exp(-sigma * (r.t_far - r.t_near)));
    EXPECT_LT((render_ray(s, r, cfg) - expected).cwiseAbs().maxCoeff(), 1e-3);
  }
}

TEST(RenderTape, WeightsAndTransmittanceInvariants) {
  const FieldState s = random_field(FieldArchitecture{}, 2);
  RenderConfig cfg;
  cfg.stratified = true;
  const auto rays = random_rays(40, 3);
  const RenderTape tape(s, rays, cfg, 9);
  const Eigen::MatrixXd& w = tape.weights();
  const Eigen::MatrixXd& t = tape.transmittance();
  for (Eigen::Index r = 0; r < w.cols(); ++r) {
    EXPECT_GE(w.col(r).minCoeff(), 0.0);
    EXPECT_LE(w.col(r).sum(), 1.0 + 1e-9);
    EXPECT_NEAR(tape.weight_sums()(r), w.col(r).sum(), 1e-12);
    for (Eigen::Index i = 1; i < t.rows(); ++i) EXPECT_LE(t(i, r), t(i - 1, r));
  }
}

TEST(RenderRay, LinearInLatentHead) {
  FieldState s = random_field(small_arch(), 5);
  RenderConfig cfg;
  cfg.background_latent = Eigen::Vector4d(0.2, 0.1, -0.3, 0.5);
  const auto rays = random_rays(6, 4);
  const RenderTape base(s, rays, cfg);
  const double alpha = 2.5;
  const auto& lh = s.layout()[s.latent_head()];
  const auto n = static_cast<Eigen::Index>(lh.out) * lh.in;
  s.params.segment(static_cast<Eigen::Index>(lh.weight_offset), n) *= alpha;
  s.params.segment(static_cast<Eigen::Index>(lh.bias_offset), lh.out) *= alpha;
  const RenderTape scaled(s, rays, cfg);
  for (Eigen::Index r = 0; r < 6; ++r) {
    const Eigen::Vector4d bg = (1.0 - base.weight_sums()(r)) * cfg.background_latent;
    const Eigen::Vector4d a = base.outputs().col(r) - bg;
    const Eigen::Vector4d b = scaled.outputs().col(r) - bg;
    EXPECT_LT((b - alpha * a).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(RenderTape, ReconstructionGradientMatchesFiniteDifferences) {
  const std::vector<FieldArchitecture> archs{small_arch(), {3, 1, 16, 3}, {2, 2, 8, 4}};
  for (std::size_t k = 0; k < archs.size(); ++k) {
    const FieldState s = random_field(archs[k], 20 + k);
    RenderConfig cfg;
    cfg.samples_per_ray = 16;
    cfg.stratified = true;
    cfg.background_latent = Eigen::Vector4d(0.1, 0.0, -0.1, 0.2);
    const auto rays = random_rays(4, 30 + k);
    const Eigen::Matrix4Xd target = Eigen::Matrix4Xd::Random(4, 4);
    auto loss = [&](const Eigen::VectorXd& params) {
      FieldState t = s;
      t.params = params;
      return loss_reconstruction(RenderTape(t, rays, cfg, 5).outputs(), target);
    };
    const RenderTape tape(s, rays, cfg, 5);
    const Eigen::Matrix4Xd upstream = 2.0 * (tape.outputs() - target) / 4.0;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(s.params.size());
    tape.backward(upstream, g);
    const Eigen::VectorXd fd = central_difference(loss, s.params, 1e-4);
    EXPECT_LT(relative_error(g, fd), 1e-4) << "configuration " << k;
  }
}

TEST(RenderTape, RayGradientsMatchFiniteDifferences) {
  const FieldState s = random_field(small_arch(), 11);
  RenderConfig cfg;
  cfg.samples_per_ray = 16;
  auto rays = random_rays(3, 12);
  const Eigen::Matrix4Xd target = Eigen::Matrix4Xd::Random(4, 3);
  const RenderTape tape(s, rays, cfg);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(s.params.size());
  std::vector<Vec3> d_origin, d_dir;
  tape.backward(2.0 * (tape.outputs() - target) / 3.0, g, &d_origin, &d_dir);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    auto f_origin = [&](const Eigen::VectorXd& o) {
      auto moved = rays;
      moved[r].origin = o;
      return loss_reconstruction(RenderTape(s, moved, cfg).outputs(), target);
    };
    auto f_dir = [&](const Eigen::VectorXd& d) {
      auto moved = rays;
      moved[r].direction = d;
      return loss_reconstruction(RenderTape(s, moved, cfg).outputs(), target);
    };
    EXPECT_LT(relative_error(d_origin[r], central_difference(f_origin, rays[r].origin, 1e-5)), 1e-4);
    EXPECT_LT(relative_error(d_dir[r], central_difference(f_dir, rays[r].direction, 1e-5)), 1e-4);
  }
}

TEST(RenderView, ZeroInitAdapterMatchesNoAdapter) {
  const FieldState s = random_field(small_arch(), 6);
  const CameraParams cam = look_at(Vec3(4, 0, 1), Vec3::Zero(), Vec3::UnitZ(), Vec2(10, 10), Vec2(4, 4));
  const ViewGeometry g{8, 8, 1, 2.0, 6.0};
  RenderConfig cfg;
  cfg.samples_per_ray = 16;
  const AdapterWeights w = AdapterWeights::create(8, 1);
  std::size_t rays = 0;
  const LatentImage plain = render_view(s, nullptr, cam, g, cfg, 0, &rays);
  EXPECT_EQ(render_view(s, &w, cam, g, cfg), plain);
  EXPECT_EQ(plain.rows(), 8);
  EXPECT_EQ(plain.cols(), 8);
  EXPECT_EQ(rays, 64u);
}

TEST(Loss, ReconstructionExamples) {
  const LatentImage a = latentedit::testing::random_latent(3, 5, 1);
  EXPECT_EQ(loss_reconstruction(a, a), 0.0);
  LatentImage b = a;
  for (double& v : b.values()) v += 1.0;
  EXPECT_NEAR(loss_reconstruction(a, b), 4.0, 1e-12);
  const LatentImage c = latentedit::testing::random_latent(3, 5, 2);
  double ref = 0.0;
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 5; ++col)
      for (int ch = 0; ch < 4; ++ch) ref += (a.at(r, col, ch) - c.at(r, col, ch)) * (a.at(r, col, ch) - c.at(r, col, ch));
  EXPECT_NEAR(loss_reconstruction(a, c), ref / 15.0, 1e-12);
  EXPECT_THROW(loss_reconstruction(a, LatentImage(5, 3)), ValidationError);
}

TEST(Loss, TotalExamples) {
  EXPECT_NEAR(loss_total(1, 1, 1, {0.80, 0.1, 0.1}), 1.0, 1e-15);
  EXPECT_EQ(loss_total(3.5, 9, 7, {1, 0, 0}), 3.5);
  EXPECT_NEAR(loss_total(2, 9, 4, {0.75, 0.0, 0.25}), 2.5, 1e-15);
}

TEST(Config, RenderConfigRejectsTooFewSamples) {
  RenderConfig cfg;
  cfg.samples_per_ray = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

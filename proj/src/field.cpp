#include "latentedit/field.hpp"

#include <cmath>
#include <random>
#include <string>

#include "latentedit/adapter.hpp"
#include "latentedit/errors.hpp"
#include "latentedit/scene.hpp"

namespace latentedit {

namespace {

void encode_into(const Vec3& p, int bands, double* out) {
  out[0] = p.x();
  out[1] = p.y();
  out[2] = p.z();
  double freq = M_PI;
  for (int k = 0; k < bands; ++k) {
    double* blk = out + 3 + 6 * k;
    for (int c = 0; c < 3; ++c) {
      blk[c] = std::sin(freq * p(c));
      blk[3 + c] = std::cos(freq * p(c));
    }
    freq *= 2.0;
  }
}

// d encoding / d p, contracted with the encoding gradient `g`.
Vec3 encode_backward(const Vec3& p, int bands, const double* g) {
  Vec3 out(g[0], g[1], g[2]);
  double freq = M_PI;
  for (int k = 0; k < bands; ++k) {
    const double* blk = g + 3 + 6 * k;
    for (int c = 0; c < 3; ++c) {
      out(c) += freq * (blk[c] * std::cos(freq * p(c)) - blk[3 + c] * std::sin(freq * p(c)));
    }
    freq *= 2.0;
  }
  return out;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using GradMap = Eigen::Map<Eigen::MatrixXd>;
using GradVecMap = Eigen::Map<Eigen::VectorXd>;

ConstMap weight(const FieldState& s, std::size_t layer) {
  const auto& l = s.layout()[layer];
  return ConstMap(s.params.data() + l.weight_offset, l.out, l.in);
}
ConstVecMap bias(const FieldState& s, std::size_t layer) {
  const auto& l = s.layout()[layer];
  return ConstVecMap(s.params.data() + l.bias_offset, l.out);
}

}  // namespace

Eigen::VectorXd positional_encode(const Vec3& p, int bands) {
  if (bands < 0) throw ValidationError("encoding bands must be non-negative");
  Eigen::VectorXd out(encoded_size(bands));
  encode_into(p, bands, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// FieldState

FieldState::FieldState(const FieldArchitecture& arch) : arch_(arch) {
  if (arch.position_bands < 0 || arch.direction_bands < 0 || arch.hidden_width < 1 || arch.hidden_layers < 1) {
    throw ConfigError("invalid field architecture");
  }
  std::size_t offset = 0;
  auto add = [&](int out, int in) {
    LayerShape l{out, in, offset, offset + static_cast<std::size_t>(out) * in};
    offset = l.bias_offset + static_cast<std::size_t>(out);
    layout_.push_back(l);
  };
  add(arch.hidden_width, encoded_size(arch.position_bands));
  for (int i = 1; i < arch.hidden_layers; ++i) add(arch.hidden_width, arch.hidden_width);
  add(1, arch.hidden_width);
  add(kLatentChannels, arch.hidden_width + encoded_size(arch.direction_bands));
  params = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
}

FieldState FieldState::create(const FieldArchitecture& arch, std::uint64_t seed, bool zero_heads) {
  FieldState s(arch);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < s.layout_.size(); ++i) {
    const auto& l = s.layout_[i];
    const bool head = i >= static_cast<std::size_t>(arch.hidden_layers);
    if (head && zero_heads) continue;
    const double gain = head ? 1.0 : std::sqrt(2.0);
    const double bound = gain * std::sqrt(3.0 / l.in);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t k = 0; k < static_cast<std::size_t>(l.out) * l.in; ++k) s.params[l.weight_offset + k] = u(rng);
  }
  return s;
}

std::vector<int> FieldState::layer_dims() const {
  std::vector<int> dims;
  for (const auto& l : layout_) {
    dims.push_back(l.in);
    dims.push_back(l.out);
  }
  return dims;
}

// ---------------------------------------------------------------------------
// MLP

MlpTape mlp_forward(const FieldState& state, Eigen::MatrixXd position_input, Eigen::MatrixXd direction_input) {
  const auto& arch = state.architecture();
  MlpTape tape;
  tape.position_input = std::move(position_input);
  tape.direction_input = std::move(direction_input);
  tape.hidden.reserve(static_cast<std::size_t>(arch.hidden_layers));
  const Eigen::MatrixXd* x = &tape.position_input;
  for (int l = 0; l < arch.hidden_layers; ++l) {
    Eigen::MatrixXd h = weight(state, static_cast<std::size_t>(l)) * *x;
    h.colwise() += bias(state, static_cast<std::size_t>(l));
    tape.hidden.push_back(h.cwiseMax(0.0));
    x = &tape.hidden.back();
  }
  const Eigen::MatrixXd& last = tape.hidden.back();
  tape.sigma_raw = weight(state, state.sigma_head()) * last;
  tape.sigma_raw.array() += bias(state, state.sigma_head())(0);
  tape.sigma = tape.sigma_raw.unaryExpr([](double v) { return softplus(v); });

  const auto wz = weight(state, state.latent_head());
  const int w = arch.hidden_width;
  tape.latent = wz.leftCols(w) * last + wz.rightCols(wz.cols() - w) * tape.direction_input;
  tape.latent.colwise() += bias(state, state.latent_head());
  return tape;
}

void mlp_backward(const FieldState& state, const MlpTape& tape, const Eigen::Matrix4Xd& d_latent,
                  const Eigen::RowVectorXd& d_sigma, Eigen::VectorXd& param_grad, Eigen::MatrixXd* d_position_input,
                  Eigen::MatrixXd* d_direction_input) {
  const auto& arch = state.architecture();
  const int w = arch.hidden_width;
  const auto& lz = state.layout()[state.latent_head()];
  const auto& ls = state.layout()[state.sigma_head()];
  const Eigen::MatrixXd& last = tape.hidden.back();

  const Eigen::RowVectorXd d_raw =
      d_sigma.array() * tape.sigma_raw.unaryExpr([](double v) { return sigmoid(v); }).array();

  GradMap g_wz(param_grad.data() + lz.weight_offset, lz.out, lz.in);
  g_wz.leftCols(w).noalias() += d_latent * last.transpose();
  g_wz.rightCols(lz.in - w).noalias() += d_latent * tape.direction_input.transpose();
  GradVecMap(param_grad.data() + lz.bias_offset, lz.out) += d_latent.rowwise().sum();

  GradMap g_ws(param_grad.data() + ls.weight_offset, ls.out, ls.in);
  g_ws.noalias() += d_raw * last.transpose();
  param_grad[static_cast<Eigen::Index>(ls.bias_offset)] += d_raw.sum();

  const auto wz = weight(state, state.latent_head());
  const auto ws = weight(state, state.sigma_head());
  if (d_direction_input) *d_direction_input = wz.rightCols(lz.in - w).transpose() * d_latent;

  Eigen::MatrixXd d_h = wz.leftCols(w).transpose() * d_latent;
  d_h.noalias() += ws.transpose() * d_raw;
  for (int l = arch.hidden_layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const auto& shape = state.layout()[li];
    const Eigen::MatrixXd d_pre = (tape.hidden[li].array() > 0.0).select(d_h, 0.0);
    const Eigen::MatrixXd& input = l == 0 ? tape.position_input : tape.hidden[li - 1];
    GradMap(param_grad.data() + shape.weight_offset, shape.out, shape.in).noalias() += d_pre * input.transpose();
    GradVecMap(param_grad.data() + shape.bias_offset, shape.out) += d_pre.rowwise().sum();
    if (l > 0) {
      d_h = weight(state, li).transpose() * d_pre;
    } else if (d_position_input) {
      *d_position_input = weight(state, li).transpose() * d_pre;
    }
  }
}

FieldOutput field_eval(const FieldState& state, const Vec3& p, const Vec3& v) {
  if (!p.allFinite() || !v.allFinite()) throw ValidationError("field_eval: non-finite input");
  Eigen::MatrixXd pos(state.position_dim(), 1), dir(state.direction_dim(), 1);
  encode_into(p, state.architecture().position_bands, pos.data());
  encode_into(v, state.architecture().direction_bands, dir.data());
  const MlpTape tape = mlp_forward(state, std::move(pos), std::move(dir));
  return {tape.latent.col(0), tape.sigma(0)};
}

// ---------------------------------------------------------------------------
// Rendering

void RenderConfig::validate() const {
  if (samples_per_ray < 2) throw ConfigError("samples_per_ray must be at least 2");
  if (adapter_tile < 0 || adapter_tile % 2 != 0) throw ConfigError("adapter_tile must be an even non-negative size");
  if (chunk_rays < 1) throw ConfigError("chunk_rays must be positive");
  if (!background_latent.allFinite()) throw ConfigError("background latent must be finite");
}

RenderTape::RenderTape(const FieldState& state, std::span<const Ray> rays, const RenderConfig& cfg,
                       std::uint64_t jitter_seed)
    : state_(&state), rays_(rays.begin(), rays.end()), cfg_(cfg) {
  cfg.validate();
  const int s = cfg.samples_per_ray;
  const std::size_t n_rays = rays_.size();
  const int pdim = state.position_dim(), ddim = state.direction_dim();
  const int pb = state.architecture().position_bands, db = state.architecture().direction_bands;
  outputs_.resize(4, static_cast<Eigen::Index>(n_rays));
  weight_sums_.resize(static_cast<Eigen::Index>(n_rays));
  depths_.resize(static_cast<Eigen::Index>(n_rays));
  weights_.resize(s, static_cast<Eigen::Index>(n_rays));
  transmittance_.resize(s, static_cast<Eigen::Index>(n_rays));

  std::mt19937_64 rng(jitter_seed);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);

  for (std::size_t first = 0; first < n_rays; first += static_cast<std::size_t>(cfg.chunk_rays)) {
    Chunk chunk;
    chunk.first_ray = first;
    chunk.rays = std::min(static_cast<std::size_t>(cfg.chunk_rays), n_rays - first);
    const auto n = static_cast<Eigen::Index>(chunk.rays) * s;
    chunk.t.resize(s, static_cast<Eigen::Index>(chunk.rays));
    Eigen::MatrixXd pos(pdim, n), dir(ddim, n);
    for (std::size_t r = 0; r < chunk.rays; ++r) {
      const Ray& ray = rays_[first + r];
      const double delta = (ray.t_far - ray.t_near) / s;
      Eigen::VectorXd denc(ddim);
      encode_into(ray.direction, db, denc.data());
      for (int i = 0; i < s; ++i) {
        const double u = cfg.stratified ? jitter(rng) : 0.5;
        const double t = ray.t_near + (i + u) * delta;
        chunk.t(i, static_cast<Eigen::Index>(r)) = t;
        const auto col = static_cast<Eigen::Index>(r) * s + i;
        encode_into(ray.origin + t * ray.direction, pb, pos.col(col).data());
        dir.col(col) = denc;
      }
    }
    chunk.mlp = mlp_forward(state, std::move(pos), std::move(dir));

    for (std::size_t r = 0; r < chunk.rays; ++r) {
      const Ray& ray = rays_[first + r];
      const double delta = (ray.t_far - ray.t_near) / s;
      const auto gr = static_cast<Eigen::Index>(first + r);
      double optical = 0.0, wsum = 0.0, wt = 0.0;
      Eigen::Vector4d acc = Eigen::Vector4d::Zero();
      for (int i = 0; i < s; ++i) {
        const auto col = static_cast<Eigen::Index>(r) * s + i;
        const double sd = chunk.mlp.sigma(col) * delta;
        const double trans = std::exp(-optical);
        const double w = trans * -std::expm1(-sd);
        transmittance_(i, gr) = trans;
        weights_(i, gr) = w;
        acc += w * chunk.mlp.latent.col(col);
        wsum += w;
        wt += w * chunk.t(i, static_cast<Eigen::Index>(r));
        optical += sd;
      }
      outputs_.col(gr) = acc + (1.0 - wsum) * cfg.background_latent;
      weight_sums_(gr) = wsum;
      depths_(gr) = wsum > 0.0 ? wt / wsum : std::numeric_limits<double>::quiet_NaN();
    }
    chunks_.push_back(std::move(chunk));
  }
}

void RenderTape::backward(const Eigen::Matrix4Xd& upstream, Eigen::VectorXd& param_grad, std::vector<Vec3>* d_origin,
                          std::vector<Vec3>* d_direction) const {
  if (upstream.cols() != static_cast<Eigen::Index>(rays_.size())) {
    throw ValidationError("render backward: upstream gradient has wrong ray count");
  }
  const FieldState& state = *state_;
  const int s = cfg_.samples_per_ray;
  const bool want_rays = d_origin || d_direction;
  if (d_origin) d_origin->assign(rays_.size(), Vec3::Zero());
  if (d_direction) d_direction->assign(rays_.size(), Vec3::Zero());
  const int pb = state.architecture().position_bands, db = state.architecture().direction_bands;

  for (const Chunk& chunk : chunks_) {
    const auto n = static_cast<Eigen::Index>(chunk.rays) * s;
    Eigen::Matrix4Xd d_latent(4, n);
    Eigen::RowVectorXd d_sigma(n);
    for (std::size_t r = 0; r < chunk.rays; ++r) {
      const auto gr = static_cast<Eigen::Index>(chunk.first_ray + r);
      const Ray& ray = rays_[chunk.first_ray + r];
      const double delta = (ray.t_far - ray.t_near) / s;
      const Eigen::Vector4d g = upstream.col(gr);
      // dL/dw_i and the suffix sums sum_{i>k} dL/dw_i w_i.
      double suffix = 0.0;
      for (int i = s - 1; i >= 0; --i) {
        const auto col = static_cast<Eigen::Index>(r) * s + i;
        const double w = weights_(i, gr);
        const double dw = g.dot(chunk.mlp.latent.col(col) - cfg_.background_latent);
        d_latent.col(col) = w * g;
        const double e = std::exp(-chunk.mlp.sigma(col) * delta);
        d_sigma(col) = delta * (dw * transmittance_(i, gr) * e - suffix);
        suffix += dw * w;
      }
    }
    Eigen::MatrixXd d_pos, d_dir;
    mlp_backward(state, chunk.mlp, d_latent, d_sigma, param_grad, want_rays ? &d_pos : nullptr,
                 want_rays ? &d_dir : nullptr);
    if (!want_rays) continue;
    for (std::size_t r = 0; r < chunk.rays; ++r) {
      const Ray& ray = rays_[chunk.first_ray + r];
      Vec3 g_o = Vec3::Zero(), g_v = Vec3::Zero();
      Eigen::VectorXd g_denc = Eigen::VectorXd::Zero(d_dir.rows());
      for (int i = 0; i < s; ++i) {
        const auto col = static_cast<Eigen::Index>(r) * s + i;
        const double t = chunk.t(i, static_cast<Eigen::Index>(r));
        const Vec3 gp = encode_backward(ray.origin + t * ray.direction, pb, d_pos.col(col).data());
        g_o += gp;
        g_v += t * gp;
        g_denc += d_dir.col(col);
      }
      g_v += encode_backward(ray.direction, db, g_denc.data());
      if (d_origin) (*d_origin)[chunk.first_ray + r] = g_o;
      if (d_direction) (*d_direction)[chunk.first_ray + r] = g_v;
    }
  }
}

Eigen::Vector4d render_ray(const FieldState& state, const Ray& ray, const RenderConfig& cfg) {
  const RenderTape tape(state, std::span<const Ray>(&ray, 1), cfg, cfg.seed);
  return tape.outputs().col(0);
}

ViewGeometry view_geometry(const SceneDataset& scene) {
  return {scene.rows(), scene.cols(), scene.downscale_factor, scene.near, scene.far};
}

namespace {

LatentImage render_raw(const FieldState& state, const CameraParams& camera, const ViewGeometry& g,
                       const RenderConfig& cfg, int view_id, std::size_t* rays_traced) {
  const auto pixels = all_pixels(g.rows, g.cols);
  const auto rays = generate_rays(camera, pixels, g.rows, g.cols, g.downscale, g.near, g.far);
  const RenderTape tape(state, rays, cfg, cfg.seed);
  if (rays_traced) *rays_traced = tape.ray_count();
  LatentImage out(g.rows, g.cols, view_id);
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    for (int ch = 0; ch < 4; ++ch) out.at(pixels[k].row, pixels[k].col, ch) = tape.outputs()(ch, static_cast<Eigen::Index>(k));
  }
  return out;
}

}  // namespace

LatentImage render_view(const FieldState& state, const AdapterWeights* adapter, const CameraParams& camera,
                        const ViewGeometry& geometry, const RenderConfig& cfg, int view_id,
                        std::size_t* rays_traced) {
  LatentImage raw = render_raw(state, camera, geometry, cfg, view_id, rays_traced);
  if (!adapter) return raw;
  return adapter_forward_tiled(*adapter, raw, cfg.adapter_tile);
}

DepthMap render_depth(const FieldState& state, const CameraParams& camera, const ViewGeometry& g,
                      const RenderConfig& cfg) {
  const auto pixels = all_pixels(g.rows, g.cols);
  const auto rays = generate_rays(camera, pixels, g.rows, g.cols, g.downscale, g.near, g.far);
  const RenderTape tape(state, rays, cfg, cfg.seed);
  DepthMap out;
  out.rows = g.rows;
  out.cols = g.cols;
  out.depth.assign(tape.depths().data(), tape.depths().data() + tape.depths().size());
  out.weight_sum.assign(tape.weight_sums().data(), tape.weight_sums().data() + tape.weight_sums().size());
  return out;
}

// ---------------------------------------------------------------------------
// Losses

double loss_reconstruction(const LatentImage& pred, const LatentImage& target) {
  if (!pred.same_shape(target)) throw ValidationError("loss_reconstruction: shape mismatch");
  if (pred.pixel_count() == 0) throw ValidationError("loss_reconstruction: empty input");
  double sum = 0.0;
  const auto a = pred.values();
  const auto b = target.values();
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  return sum / static_cast<double>(pred.pixel_count());
}

double loss_reconstruction(const Eigen::Matrix4Xd& pred, const Eigen::Matrix4Xd& target) {
  if (pred.cols() != target.cols()) throw ValidationError("loss_reconstruction: ray count mismatch");
  if (pred.cols() == 0) throw ValidationError("loss_reconstruction: empty batch");
  return (pred - target).squaredNorm() / static_cast<double>(pred.cols());
}

void LossWeights::validate() const {
  if (!(lambda_r >= 0.0 && lambda_f >= 0.0 && lambda_p >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

double loss_total(double l_r, double l_f, double l_reg, const LossWeights& w) {
  return w.lambda_r * l_r + w.lambda_f * l_f + w.lambda_p * l_reg;
}

}  // namespace latentedit

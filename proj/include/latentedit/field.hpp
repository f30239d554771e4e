#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "latentedit/rays.hpp"
#include "latentedit/tensor.hpp"

namespace latentedit {

class AdapterWeights;
struct SceneDataset;

// [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(2^{L-1} pi p)],
// each block holding the three components of p.
Eigen::VectorXd positional_encode(const Vec3& p, int bands);
inline int encoded_size(int bands) { return 3 + 6 * bands; }

struct FieldArchitecture {
  int position_bands = 6;
  int direction_bands = 2;
  int hidden_width = 64;
  int hidden_layers = 4;

  bool operator==(const FieldArchitecture&) const = default;
};

struct LayerShape {
  int out = 0;
  int in = 0;
  std::size_t weight_offset = 0;  // column-major out x in block
  std::size_t bias_offset = 0;
};

// Parameters of the latent field MLP. Layers, in order: hidden_layers dense
// ReLU layers on the encoded position, a scalar density head (softplus), and
// a 4-channel linear latent head on [last hidden, encoded direction].
class FieldState {
 public:
  FieldState() = default;
  // Uniform fan-in initialisation from `seed`; `zero_heads` zeroes both
  // output heads so the field is constant (z = 0, sigma = softplus(0)).
  static FieldState create(const FieldArchitecture& arch, std::uint64_t seed, bool zero_heads = false);

  const FieldArchitecture& architecture() const { return arch_; }
  const std::vector<LayerShape>& layout() const { return layout_; }
  std::vector<int> layer_dims() const;

  Eigen::VectorXd params;
  std::int64_t step_count = 0;

  std::size_t sigma_head() const { return static_cast<std::size_t>(arch_.hidden_layers); }
  std::size_t latent_head() const { return static_cast<std::size_t>(arch_.hidden_layers) + 1; }
  int position_dim() const { return encoded_size(arch_.position_bands); }
  int direction_dim() const { return encoded_size(arch_.direction_bands); }

  bool operator==(const FieldState& o) const {
    return arch_ == o.arch_ && step_count == o.step_count && params.size() == o.params.size() && params == o.params;
  }

 private:
  explicit FieldState(const FieldArchitecture& arch);
  FieldArchitecture arch_;
  std::vector<LayerShape> layout_;
};

struct FieldOutput {
  Eigen::Vector4d latent;
  double sigma = 0.0;
};

// Throws ValidationError for non-finite inputs.
FieldOutput field_eval(const FieldState& state, const Vec3& p, const Vec3& v);

// Batched MLP evaluation on pre-encoded inputs (columns are samples), keeping
// the activations needed for the backward pass.
struct MlpTape {
  std::vector<Eigen::MatrixXd> hidden;  // post-activation, one per hidden layer
  Eigen::MatrixXd position_input;       // P x N
  Eigen::MatrixXd direction_input;      // D x N
  Eigen::RowVectorXd sigma_raw;
  Eigen::RowVectorXd sigma;
  Eigen::Matrix4Xd latent;
};

MlpTape mlp_forward(const FieldState& state, Eigen::MatrixXd position_input, Eigen::MatrixXd direction_input);
// Accumulates d/dparams into `param_grad`; writes input gradients when the
// pointers are non-null.
void mlp_backward(const FieldState& state, const MlpTape& tape, const Eigen::Matrix4Xd& d_latent,
                  const Eigen::RowVectorXd& d_sigma, Eigen::VectorXd& param_grad, Eigen::MatrixXd* d_position_input,
                  Eigen::MatrixXd* d_direction_input);

struct RenderConfig {
  int samples_per_ray = 64;
  Eigen::Vector4d background_latent = Eigen::Vector4d::Zero();
  bool stratified = false;
  std::uint64_t seed = 0;
  // render_view applies the adapter to tiles of this many latent pixels per
  // side (0 = whole map at once).
  int adapter_tile = 16;
  int chunk_rays = 16;

  void validate() const;
};

// Midpoint quadrature of the latent volume integral for a batch of rays.
// With stratified sampling each sample is jittered inside its stratum using a
// generator seeded by `jitter_seed`; strata widths remain the quadrature
// weights. Keeps everything needed to backpropagate.
class RenderTape {
 public:
  RenderTape(const FieldState& state, std::span<const Ray> rays, const RenderConfig& cfg,
             std::uint64_t jitter_seed = 0);

  std::size_t ray_count() const { return rays_.size(); }
  const Eigen::Matrix4Xd& outputs() const { return outputs_; }
  const Eigen::RowVectorXd& weight_sums() const { return weight_sums_; }
  // Expected termination depth sum(w t) / sum(w); NaN where sum(w) == 0.
  const Eigen::RowVectorXd& depths() const { return depths_; }
  // Per-ray quadrature weights (S x R) and transmittances, for inspection.
  const Eigen::MatrixXd& weights() const { return weights_; }
  const Eigen::MatrixXd& transmittance() const { return transmittance_; }

  // `upstream` is dL/d(output), 4 x R. Parameter gradients are accumulated;
  // ray gradients (w.r.t. origin and unit direction) are written if requested.
  void backward(const Eigen::Matrix4Xd& upstream, Eigen::VectorXd& param_grad, std::vector<Vec3>* d_origin = nullptr,
                std::vector<Vec3>* d_direction = nullptr) const;

 private:
  struct Chunk {
    std::size_t first_ray = 0;
    std::size_t rays = 0;
    Eigen::MatrixXd t;  // S x rays
    MlpTape mlp;
  };

  const FieldState* state_;
  std::vector<Ray> rays_;
  RenderConfig cfg_;
  std::vector<Chunk> chunks_;
  Eigen::Matrix4Xd outputs_;
  Eigen::RowVectorXd weight_sums_;
  Eigen::RowVectorXd depths_;
  Eigen::MatrixXd weights_;
  Eigen::MatrixXd transmittance_;
};

Eigen::Vector4d render_ray(const FieldState& state, const Ray& ray, const RenderConfig& cfg);

struct ViewGeometry {
  int rows = 0;
  int cols = 0;
  int downscale = 1;
  double near = 2.0;
  double far = 6.0;
};
ViewGeometry view_geometry(const SceneDataset& scene);

// Renders every latent pixel; when an adapter is given it is applied to the
// full map (tile-wise when cfg.adapter_tile > 0). `rays_traced` receives the
// number of rays marched.
LatentImage render_view(const FieldState& state, const AdapterWeights* adapter, const CameraParams& camera,
                        const ViewGeometry& geometry, const RenderConfig& cfg, int view_id = 0,
                        std::size_t* rays_traced = nullptr);
// Per-pixel expected termination depth and accumulated weight.
struct DepthMap {
  int rows = 0, cols = 0;
  std::vector<double> depth;
  std::vector<double> weight_sum;
};
DepthMap render_depth(const FieldState& state, const CameraParams& camera, const ViewGeometry& geometry,
                      const RenderConfig& cfg);

// Mean over rays of the squared L2 distance between 4-vectors.
double loss_reconstruction(const LatentImage& pred, const LatentImage& target);
double loss_reconstruction(const Eigen::Matrix4Xd& pred, const Eigen::Matrix4Xd& target);

struct LossWeights {
  double lambda_r = 1.0;
  double lambda_f = 0.0;
  double lambda_p = 0.0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

double loss_total(double l_r, double l_f, double l_reg, const LossWeights& w);

}  // namespace latentedit

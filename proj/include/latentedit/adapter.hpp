#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "latentedit/tensor.hpp"

namespace latentedit {

// Residual refinement adapter applied to a rendered latent map:
//
//   down    = ConvDown(z)            3x3, stride 2, pad 1, 4 -> C
//   attn    = SelfAttention(down)    single head over the h x w token grid
//   refined = z + ConvUp(attn)       3x3 transposed, stride 2, pad 1,
//                                    output pad 1, C -> 4
//
// ConvUp starts at zero so a fresh adapter is the identity map.
class AdapterWeights {
 public:
  AdapterWeights() = default;
  static AdapterWeights create(int channels, std::uint64_t seed);

  int channels() const { return channels_; }
  std::size_t param_count() const { return static_cast<std::size_t>(params.size()); }

  // Views into `params`. Convolution kernels are C x 36 with column index
  // latent_channel * 9 + ky * 3 + kx; attention maps act as x W^T + b.
  Eigen::Map<const Eigen::MatrixXd> conv_down() const { return cmat(off_down_w_, channels_, 36); }
  Eigen::Map<const Eigen::VectorXd> conv_down_bias() const { return cvec(off_down_b_, channels_); }
  Eigen::Map<const Eigen::MatrixXd> attention_map(int which) const {
    return cmat(off_attn_ + static_cast<std::size_t>(which) * attn_block(), channels_, channels_);
  }
  Eigen::Map<const Eigen::VectorXd> attention_bias(int which) const {
    return cvec(off_attn_ + static_cast<std::size_t>(which) * attn_block() + sq(), channels_);
  }
  Eigen::Map<const Eigen::MatrixXd> conv_up() const { return cmat(off_up_w_, channels_, 36); }
  Eigen::Map<const Eigen::VectorXd> conv_up_bias() const { return cvec(off_up_b_, kLatentChannels); }

  // Offsets for writing gradients in the same layout.
  std::size_t conv_down_offset() const { return off_down_w_; }
  std::size_t conv_down_bias_offset() const { return off_down_b_; }
  std::size_t attention_offset(int which) const { return off_attn_ + static_cast<std::size_t>(which) * attn_block(); }
  std::size_t attention_bias_offset(int which) const { return attention_offset(which) + sq(); }
  std::size_t conv_up_offset() const { return off_up_w_; }
  std::size_t conv_up_bias_offset() const { return off_up_b_; }

  Eigen::VectorXd params;

  bool operator==(const AdapterWeights& o) const {
    return channels_ == o.channels_ && params.size() == o.params.size() && params == o.params;
  }

 private:
  explicit AdapterWeights(int channels);
  std::size_t sq() const { return static_cast<std::size_t>(channels_) * channels_; }
  std::size_t attn_block() const { return sq() + static_cast<std::size_t>(channels_); }
  Eigen::Map<const Eigen::MatrixXd> cmat(std::size_t off, int r, int c) const {
    return {params.data() + off, r, c};
  }
  Eigen::Map<const Eigen::VectorXd> cvec(std::size_t off, int n) const { return {params.data() + off, n}; }

  int channels_ = 0;
  std::size_t off_down_w_ = 0, off_down_b_ = 0, off_attn_ = 0, off_up_w_ = 0, off_up_b_ = 0;
};

enum AttentionMap { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };

// Exact count: 9*c*C + C (down) + 4*(C^2 + C) (attention) + 9*C*c + c (up),
// with c latent channels.
std::size_t adapter_param_count(int channels, int latent_channels = kLatentChannels);

// Smallest C whose parameter count is closest to `target`.
int adapter_channels_for_budget(std::size_t target, int latent_channels = kLatentChannels);

// Channel count used by default: the one whose parameter count is closest
// to 0.28 million.
inline constexpr std::size_t kAdapterParamBudget = 280000;
int default_adapter_channels();

// Throws ValidationError for odd spatial dimensions.
LatentImage adapter_forward(const AdapterWeights& w, const LatentImage& z_hat);

// Applies the adapter independently to tile x tile blocks (tile even, 0 =
// whole map).
LatentImage adapter_forward_tiled(const AdapterWeights& w, const LatentImage& z_hat, int tile);

// Softmax attention weights (tokens x tokens) of the forward pass.
Eigen::MatrixXd adapter_attention_weights(const AdapterWeights& w, const LatentImage& z_hat);

// Forward pass that keeps intermediates for backpropagation.
class AdapterPass {
 public:
  AdapterPass(const AdapterWeights& w, const LatentImage& z_hat);

  const LatentImage& output() const { return output_; }
  const Eigen::MatrixXd& attention() const { return attn_; }

  // d_out has the output's shape. Accumulates parameter gradients and returns
  // d/d z_hat.
  LatentImage backward(const LatentImage& d_out, Eigen::VectorXd& param_grad) const;

 private:
  const AdapterWeights* w_;
  int rows_, cols_, h_, w2_;
  LatentImage input_;
  Eigen::MatrixXd patches_;  // T x 36
  Eigen::MatrixXd down_, q_, k_, v_, attn_, y_, o_;
  LatentImage output_;
};

// Mean over pixels of the squared L2 distance.
double loss_refinement(const LatentImage& refined, const LatentImage& target);

}  // namespace latentedit

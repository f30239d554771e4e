#include "latentedit/adapter.hpp"

#include <cmath>
#include <cstdlib>
#include <random>
#include <string>

#include "latentedit/errors.hpp"

namespace latentedit {

AdapterWeights::AdapterWeights(int channels) : channels_(channels) {
  if (channels < 1) throw ConfigError("adapter channels must be positive");
  const auto c = static_cast<std::size_t>(channels);
  off_down_w_ = 0;
  off_down_b_ = off_down_w_ + 36 * c;
  off_attn_ = off_down_b_ + c;
  off_up_w_ = off_attn_ + 4 * (c * c + c);
  off_up_b_ = off_up_w_ + 36 * c;
  params = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(off_up_b_ + kLatentChannels));
}

AdapterWeights AdapterWeights::create(int channels, std::uint64_t seed) {
  AdapterWeights w(channels);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::size_t off, std::size_t n, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < n; ++i) w.params[static_cast<Eigen::Index>(off + i)] = u(rng);
  };
  const auto c = static_cast<std::size_t>(channels);
  fill(w.off_down_w_, 36 * c, std::sqrt(3.0 / 36.0));
  for (int m = 0; m < 4; ++m) fill(w.attention_offset(m), c * c, std::sqrt(3.0 / channels));
  // conv_up weights and bias stay zero.
  return w;
}

std::size_t adapter_param_count(int channels, int latent_channels) {
  const auto c = static_cast<std::size_t>(channels);
  const auto lc = static_cast<std::size_t>(latent_channels);
  return 9 * lc * c + c + 4 * (c * c + c) + 9 * c * lc + lc;
}

int adapter_channels_for_budget(std::size_t target, int latent_channels) {
  int best = 1;
  std::size_t best_err = static_cast<std::size_t>(-1);
  for (int c = 1;; ++c) {
    const std::size_t n = adapter_param_count(c, latent_channels);
    const std::size_t err = n > target ? n - target : target - n;
    if (err < best_err) {
      best_err = err;
      best = c;
    }
    if (n > target) break;
  }
  return best;
}

int default_adapter_channels() { return adapter_channels_for_budget(kAdapterParamBudget); }

namespace {

void check_even(const LatentImage& z) {
  if (z.rows() < 2 || z.cols() < 2 || z.rows() % 2 != 0 || z.cols() % 2 != 0) {
    throw ValidationError("adapter requires even spatial dimensions, got " + std::to_string(z.rows()) + "x" +
                          std::to_string(z.cols()));
  }
}

Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& s) {
  const double m = s.maxCoeff();
  Eigen::RowVectorXd e = (s.array() - m).exp();
  return e / e.sum();
}

}  // namespace

AdapterPass::AdapterPass(const AdapterWeights& w, const LatentImage& z_hat)
    : w_(&w), rows_(z_hat.rows()), cols_(z_hat.cols()), h_(0), w2_(0), input_(z_hat) {
  check_even(z_hat);
  h_ = rows_ / 2;
  w2_ = cols_ / 2;
  const Eigen::Index tokens = static_cast<Eigen::Index>(h_) * w2_;
  const int c = w.channels();

  patches_ = Eigen::MatrixXd::Zero(tokens, 36);
  for (int i = 0; i < h_; ++i) {
    for (int j = 0; j < w2_; ++j) {
      const Eigen::Index t = static_cast<Eigen::Index>(i) * w2_ + j;
      for (int ky = 0; ky < 3; ++ky) {
        const int y = 2 * i - 1 + ky;
        if (y < 0 || y >= rows_) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int x = 2 * j - 1 + kx;
          if (x < 0 || x >= cols_) continue;
          for (int ci = 0; ci < 4; ++ci) patches_(t, ci * 9 + ky * 3 + kx) = z_hat.at(y, x, ci);
        }
      }
    }
  }
  down_ = patches_ * w.conv_down().transpose();
  down_.rowwise() += w.conv_down_bias().transpose();

  auto project = [&](int which) {
    Eigen::MatrixXd out = down_ * w.attention_map(which).transpose();
    out.rowwise() += w.attention_bias(which).transpose();
    return out;
  };
  q_ = project(kQuery);
  k_ = project(kKey);
  v_ = project(kValue);
  const Eigen::MatrixXd scores = (q_ * k_.transpose()) / std::sqrt(static_cast<double>(c));
  attn_.resize(tokens, tokens);
  for (Eigen::Index t = 0; t < tokens; ++t) attn_.row(t) = softmax_row(scores.row(t));
  y_ = attn_ * v_;
  o_ = y_ * w.attention_map(kOutput).transpose();
  o_.rowwise() += w.attention_bias(kOutput).transpose();

  const Eigen::MatrixXd up = o_ * w.conv_up();  // T x 36, column = o * 9 + ky * 3 + kx
  output_ = z_hat;
  const auto ub = w.conv_up_bias();
  for (int y = 0; y < rows_; ++y)
    for (int x = 0; x < cols_; ++x)
      for (int o = 0; o < 4; ++o) output_.at(y, x, o) += ub(o);
  for (int i = 0; i < h_; ++i) {
    for (int j = 0; j < w2_; ++j) {
      const Eigen::Index t = static_cast<Eigen::Index>(i) * w2_ + j;
      for (int ky = 0; ky < 3; ++ky) {
        const int y = 2 * i - 1 + ky;
        if (y < 0 || y >= rows_) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int x = 2 * j - 1 + kx;
          if (x < 0 || x >= cols_) continue;
          for (int o = 0; o < 4; ++o) output_.at(y, x, o) += up(t, o * 9 + ky * 3 + kx);
        }
      }
    }
  }
}

LatentImage AdapterPass::backward(const LatentImage& d_out, Eigen::VectorXd& param_grad) const {
  if (!d_out.same_shape(output_)) throw ValidationError("adapter backward: gradient shape mismatch");
  const AdapterWeights& w = *w_;
  const int c = w.channels();
  const Eigen::Index tokens = static_cast<Eigen::Index>(h_) * w2_;
  auto grad_mat = [&](std::size_t off, Eigen::Index r, Eigen::Index cc) {
    return Eigen::Map<Eigen::MatrixXd>(param_grad.data() + off, r, cc);
  };
  auto grad_vec = [&](std::size_t off, Eigen::Index n) { return Eigen::Map<Eigen::VectorXd>(param_grad.data() + off, n); };

  LatentImage d_in = d_out;  // residual path

  // ConvUp
  Eigen::Vector4d d_ub = Eigen::Vector4d::Zero();
  for (int y = 0; y < rows_; ++y)
    for (int x = 0; x < cols_; ++x)
      for (int o = 0; o < 4; ++o) d_ub(o) += d_out.at(y, x, o);
  grad_vec(w.conv_up_bias_offset(), 4) += d_ub;
  Eigen::MatrixXd d_up = Eigen::MatrixXd::Zero(tokens, 36);
  for (int i = 0; i < h_; ++i) {
    for (int j = 0; j < w2_; ++j) {
      const Eigen::Index t = static_cast<Eigen::Index>(i) * w2_ + j;
      for (int ky = 0; ky < 3; ++ky) {
        const int y = 2 * i - 1 + ky;
        if (y < 0 || y >= rows_) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int x = 2 * j - 1 + kx;
          if (x < 0 || x >= cols_) continue;
          for (int o = 0; o < 4; ++o) d_up(t, o * 9 + ky * 3 + kx) = d_out.at(y, x, o);
        }
      }
    }
  }
  grad_mat(w.conv_up_offset(), c, 36).noalias() += o_.transpose() * d_up;
  const Eigen::MatrixXd d_o = d_up * w.conv_up().transpose();

  // Output projection
  grad_mat(w.attention_offset(kOutput), c, c).noalias() += d_o.transpose() * y_;
  grad_vec(w.attention_bias_offset(kOutput), c) += d_o.colwise().sum().transpose();
  const Eigen::MatrixXd d_y = d_o * w.attention_map(kOutput);

  // Attention
  const Eigen::MatrixXd d_a = d_y * v_.transpose();
  const Eigen::MatrixXd d_v = attn_.transpose() * d_y;
  const Eigen::VectorXd row_dot = (d_a.array() * attn_.array()).rowwise().sum();
  const Eigen::MatrixXd d_s =
      (attn_.array() * (d_a.array().colwise() - row_dot.array())).matrix() / std::sqrt(static_cast<double>(c));
  const Eigen::MatrixXd d_q = d_s * k_;
  const Eigen::MatrixXd d_k = d_s.transpose() * q_;

  Eigen::MatrixXd d_down = Eigen::MatrixXd::Zero(tokens, c);
  const Eigen::MatrixXd* grads[3] = {&d_q, &d_k, &d_v};
  for (int m = 0; m < 3; ++m) {
    grad_mat(w.attention_offset(m), c, c).noalias() += grads[m]->transpose() * down_;
    grad_vec(w.attention_bias_offset(m), c) += grads[m]->colwise().sum().transpose();
    d_down.noalias() += *grads[m] * w.attention_map(m);
  }

  // ConvDown
  grad_mat(w.conv_down_offset(), c, 36).noalias() += d_down.transpose() * patches_;
  grad_vec(w.conv_down_bias_offset(), c) += d_down.colwise().sum().transpose();
  const Eigen::MatrixXd d_patches = d_down * w.conv_down();
  for (int i = 0; i < h_; ++i) {
    for (int j = 0; j < w2_; ++j) {
      const Eigen::Index t = static_cast<Eigen::Index>(i) * w2_ + j;
      for (int ky = 0; ky < 3; ++ky) {
        const int y = 2 * i - 1 + ky;
        if (y < 0 || y >= rows_) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int x = 2 * j - 1 + kx;
          if (x < 0 || x >= cols_) continue;
          for (int ci = 0; ci < 4; ++ci) d_in.at(y, x, ci) += d_patches(t, ci * 9 + ky * 3 + kx);
        }
      }
    }
  }
  return d_in;
}

LatentImage adapter_forward(const AdapterWeights& w, const LatentImage& z_hat) {
  return AdapterPass(w, z_hat).output();
}

Eigen::MatrixXd adapter_attention_weights(const AdapterWeights& w, const LatentImage& z_hat) {
  return AdapterPass(w, z_hat).attention();
}

LatentImage adapter_forward_tiled(const AdapterWeights& w, const LatentImage& z_hat, int tile) {
  check_even(z_hat);
  if (tile < 0 || tile % 2 != 0) throw ValidationError("adapter tile must be even and non-negative");
  if (tile == 0 || (tile >= z_hat.rows() && tile >= z_hat.cols())) return adapter_forward(w, z_hat);
  LatentImage out(z_hat.rows(), z_hat.cols(), z_hat.view_id());
  for (int r0 = 0; r0 < z_hat.rows(); r0 += tile) {
    for (int c0 = 0; c0 < z_hat.cols(); c0 += tile) {
      const int th = std::min(tile, z_hat.rows() - r0), tw = std::min(tile, z_hat.cols() - c0);
      LatentImage block(th, tw);
      for (int r = 0; r < th; ++r)
        for (int c = 0; c < tw; ++c)
          for (int ch = 0; ch < 4; ++ch) block.at(r, c, ch) = z_hat.at(r0 + r, c0 + c, ch);
      const LatentImage refined = adapter_forward(w, block);
      for (int r = 0; r < th; ++r)
        for (int c = 0; c < tw; ++c)
          for (int ch = 0; ch < 4; ++ch) out.at(r0 + r, c0 + c, ch) = refined.at(r, c, ch);
    }
  }
  return out;
}

double loss_refinement(const LatentImage& refined, const LatentImage& target) {
  if (!refined.same_shape(target)) throw ValidationError("loss_refinement: shape mismatch");
  if (refined.pixel_count() == 0) throw ValidationError("loss_refinement: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < refined.size(); ++i) {
    const double d = refined.values()[i] - target.values()[i];
    sum += d * d;
  }
  return sum / static_cast<double>(refined.pixel_count());
}

}  // namespace latentedit

#pragma once

#include <Eigen/Core>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "latentedit/tensor.hpp"

namespace latentedit {

enum class ScheduleKind { kScaledLinear, kCosine };
ScheduleKind parse_schedule_kind(const std::string& name);
std::string schedule_kind_name(ScheduleKind kind);

// beta[t] is the cumulative signal coefficient: beta[0] = 1, strictly
// decreasing, and z_t = sqrt(beta_t) z + sqrt(1 - beta_t) eps.
struct NoiseSchedule {
  std::vector<double> beta;
  double t_min = 0.02;
  double t_max = 0.98;
  double delta_t = 0.75;
  int num_steps = 1000;
  ScheduleKind kind = ScheduleKind::kScaledLinear;

  // Nearest integer index for a continuous t in (0, 1).
  int index_for(double t_frac) const;
};

// Throws ConfigError for T < 2 or bounds outside 0 < t_min < t_max < 1,
// 0 < delta_t < 1.
NoiseSchedule make_schedule(int num_steps = 1000, ScheduleKind kind = ScheduleKind::kScaledLinear,
                            double t_min = 0.02, double t_max = 0.98, double delta_t = 0.75);

struct NoisedLatent {
  LatentImage z_t;
  LatentImage eps;
  int t = 0;
};

LatentImage standard_normal_like(const LatentImage& z, std::uint64_t seed);
NoisedLatent add_noise_at(const LatentImage& z, int t, const NoiseSchedule& sched, std::uint64_t seed);
NoisedLatent add_noise(const LatentImage& z, double t_frac, const NoiseSchedule& sched, std::uint64_t seed);

// Text condition; std::nullopt is the null text condition. A null image
// condition is passed as nullptr.
using Prompt = std::optional<std::string>;

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual LatentImage eps(const LatentImage& z_t, int t, const LatentImage* image_cond, const Prompt& text) const = 0;
};

// Side channel for test backends that need the noise drawn by add_noise.
// Callers that noise a latent hand the draw to any denoiser implementing it.
class NoiseRecorder {
 public:
  virtual ~NoiseRecorder() = default;
  virtual void record_noise(const LatentImage& eps) const = 0;
};

void record_noise_if_supported(const Denoiser& d, const LatentImage& eps);

struct GuidanceConfig {
  double s_image = 1.5;
  double s_text = 7.5;

  void validate() const;
};

// eps(z, 0, 0) + s_I (eps(z, I, 0) - eps(z, 0, 0)) + s_T (eps(z, I, C) - eps(z, I, 0)),
// three denoiser calls.
LatentImage guided_score(const Denoiser& d, const LatentImage& z_t, int t, const LatentImage* image_cond,
                         const Prompt& text, const GuidanceConfig& g);

LatentImage ddim_step(const LatentImage& z_t, const LatentImage& eps_pred, int t, int t_prev,
                      const NoiseSchedule& sched);

// Index sequence t = t_0 > t_1 > ... > t_n = 0 of n uniform strides (fewer
// when t < n).
std::vector<int> ddim_timesteps(int t, int n_steps);

struct DenoiseResult {
  LatentImage edited;
  int t_start = 0;
};

// Draws t in [t_min, t_max] from the seed, noises z, then runs n_steps DDIM
// strides down to 0 with guided_score at every stride.
DenoiseResult denoise_edit(const Denoiser& d, const LatentImage& z, const LatentImage* image_cond, const Prompt& text,
                           const GuidanceConfig& g, const NoiseSchedule& sched, int n_steps, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Backends

// Returns the recorded noise for every call (zeros before any recording).
class IdentityDenoiser : public Denoiser, public NoiseRecorder {
 public:
  LatentImage eps(const LatentImage& z_t, int t, const LatentImage* image_cond, const Prompt& text) const override;
  void record_noise(const LatentImage& eps) const override;

 protected:
  LatentImage recorded(const LatentImage& z_t) const;

 private:
  mutable std::mutex mu_;
  mutable std::optional<LatentImage> noise_;
};

// Recorded noise everywhere except text-conditioned calls inside the region,
// which return eps - magnitude * direction. With several regions the one
// registered for the exact image condition is used; a single region applies
// to every image condition.
class OracleEditDenoiser : public IdentityDenoiser {
 public:
  OracleEditDenoiser(Mask region, const Eigen::Vector4d& direction, double magnitude);
  void add_view(const LatentImage& image_cond, Mask region);

  const Eigen::Vector4d& direction() const { return direction_; }
  double magnitude() const { return magnitude_; }

  LatentImage eps(const LatentImage& z_t, int t, const LatentImage* image_cond, const Prompt& text) const override;

 private:
  const Mask* region_for(const LatentImage* image_cond) const;

  Mask default_region_;
  std::vector<std::pair<LatentImage, Mask>> per_view_;
  Eigen::Vector4d direction_;
  double magnitude_;
};

// Ignores the text condition entirely, so conditional == unconditional.
class NullEditDenoiser : public Denoiser {
 public:
  LatentImage eps(const LatentImage& z_t, int t, const LatentImage* image_cond, const Prompt& text) const override;
};

// Forwards to another backend and counts calls.
class CountingDenoiser : public Denoiser, public NoiseRecorder {
 public:
  explicit CountingDenoiser(const Denoiser& inner) : inner_(inner) {}
  LatentImage eps(const LatentImage& z_t, int t, const LatentImage* image_cond, const Prompt& text) const override;
  void record_noise(const LatentImage& eps) const override { record_noise_if_supported(inner_, eps); }
  std::size_t calls() const { return calls_.load(); }

 private:
  const Denoiser& inner_;
  mutable std::atomic<std::size_t> calls_{0};
};

// Subprocess backend. Each request is one JSON header line
//   {"t": int, "image_cond": bool, "text": string or null}
// followed by z_t and, when image_cond is true, the image condition, both in
// the binary tensor container. The reply is one tensor of z_t's shape.
class ExternalDenoiser : public Denoiser {
 public:
  explicit ExternalDenoiser(std::vector<std::string> argv);
  ~ExternalDenoiser() override;
  ExternalDenoiser(const ExternalDenoiser&) = delete;
  ExternalDenoiser& operator=(const ExternalDenoiser&) = delete;

  LatentImage eps(const LatentImage& z_t, int t, const LatentImage* image_cond, const Prompt& text) const override;

 private:
  mutable std::mutex mu_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
};

}  // namespace latentedit

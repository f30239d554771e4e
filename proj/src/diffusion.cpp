#include "latentedit/diffusion.hpp"

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "latentedit/errors.hpp"
#include "latentedit/rng.hpp"
#include "latentedit/tensor_io.hpp"

namespace latentedit {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "scaled_linear") return ScheduleKind::kScaledLinear;
  if (name == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("unknown noise schedule '" + name + "'");
}

std::string schedule_kind_name(ScheduleKind kind) {
  return kind == ScheduleKind::kCosine ? "cosine" : "scaled_linear";
}

int NoiseSchedule::index_for(double t_frac) const {
  return static_cast<int>(std::lround(t_frac * num_steps));
}

NoiseSchedule make_schedule(int num_steps, ScheduleKind kind, double t_min, double t_max, double delta_t) {
  if (num_steps < 2) throw ConfigError("schedule needs at least 2 steps");
  if (!(t_min > 0.0 && t_min < t_max && t_max < 1.0)) throw ConfigError("schedule requires 0 < t_min < t_max < 1");
  if (!(delta_t > 0.0 && delta_t < 1.0)) throw ConfigError("schedule requires 0 < delta_t < 1");
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.kind = kind;
  s.t_min = t_min;
  s.t_max = t_max;
  s.delta_t = delta_t;
  s.beta.assign(static_cast<std::size_t>(num_steps) + 1, 1.0);
  const double n = num_steps;
  if (kind == ScheduleKind::kScaledLinear) {
    const double lo = std::sqrt(0.00085), hi = std::sqrt(0.012);
    for (int i = 1; i <= num_steps; ++i) {
      const double r = lo + (hi - lo) * (i - 1) / (n - 1.0);
      s.beta[static_cast<std::size_t>(i)] = s.beta[static_cast<std::size_t>(i) - 1] * (1.0 - r * r);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / n + offset) / (1.0 + offset) * M_PI / 2.0);
      return c * c;
    };
    for (int i = 1; i <= num_steps; ++i) {
      const double step = std::min(1.0 - f(i) / f(i - 1), 0.999);
      s.beta[static_cast<std::size_t>(i)] = s.beta[static_cast<std::size_t>(i) - 1] * (1.0 - step);
    }
  }
  return s;
}

LatentImage standard_normal_like(const LatentImage& z, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LatentImage out(z.rows(), z.cols(), z.view_id());
  for (double& v : out.values()) v = normal(rng);
  return out;
}

NoisedLatent add_noise_at(const LatentImage& z, int t, const NoiseSchedule& sched, std::uint64_t seed) {
  if (t < 0 || t > sched.num_steps) throw ValidationError("noise index outside the schedule");
  NoisedLatent out;
  out.t = t;
  out.eps = standard_normal_like(z, seed);
  out.z_t = LatentImage(z.rows(), z.cols(), z.view_id());
  const double b = sched.beta[static_cast<std::size_t>(t)];
  if (b == 1.0) {
    out.z_t = z;
    return out;
  }
  const double a = std::sqrt(b), s = std::sqrt(1.0 - b);
  for (std::size_t i = 0; i < z.size(); ++i) out.z_t.values()[i] = a * z.values()[i] + s * out.eps.values()[i];
  return out;
}

NoisedLatent add_noise(const LatentImage& z, double t_frac, const NoiseSchedule& sched, std::uint64_t seed) {
  if (!(t_frac > 0.0 && t_frac < 1.0)) throw ValidationError("add_noise: t_frac must lie in (0, 1)");
  return add_noise_at(z, sched.index_for(t_frac), sched, seed);
}

void record_noise_if_supported(const Denoiser& d, const LatentImage& eps) {
  if (const auto* rec = dynamic_cast<const NoiseRecorder*>(&d)) rec->record_noise(eps);
}

void GuidanceConfig::validate() const {
  if (!std::isfinite(s_image) || !std::isfinite(s_text)) throw ConfigError("guidance scales must be finite");
}

namespace {

void check_same_shape(const LatentImage& a, const LatentImage& b, const char* what) {
  if (!a.same_shape(b)) throw ValidationError(std::string(what) + ": shape mismatch");
}

}  // namespace

LatentImage guided_score(const Denoiser& d, const LatentImage& z_t, int t, const LatentImage* image_cond,
                         const Prompt& text, const GuidanceConfig& g) {
  const LatentImage e_uncond = d.eps(z_t, t, nullptr, std::nullopt);
  const LatentImage e_image = d.eps(z_t, t, image_cond, std::nullopt);
  const LatentImage e_full = d.eps(z_t, t, image_cond, text);
  check_same_shape(e_uncond, z_t, "guided_score");
  check_same_shape(e_image, z_t, "guided_score");
  check_same_shape(e_full, z_t, "guided_score");
  LatentImage out(z_t.rows(), z_t.cols(), z_t.view_id());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = e_uncond.values()[i], im = e_image.values()[i], f = e_full.values()[i];
    out.values()[i] = u + g.s_image * (im - u) + g.s_text * (f - im);
  }
  return out;
}

LatentImage ddim_step(const LatentImage& z_t, const LatentImage& eps_pred, int t, int t_prev,
                      const NoiseSchedule& sched) {
  if (!(t_prev < t)) throw ValidationError("ddim_step requires t_prev < t");
  if (t_prev < 0 || t > sched.num_steps) throw ValidationError("ddim_step index outside the schedule");
  check_same_shape(z_t, eps_pred, "ddim_step");
  const double b = sched.beta[static_cast<std::size_t>(t)];
  const double bp = sched.beta[static_cast<std::size_t>(t_prev)];
  const double sb = std::sqrt(b), s1b = std::sqrt(1.0 - b);
  const double sbp = std::sqrt(bp), s1bp = std::sqrt(1.0 - bp);
  LatentImage out(z_t.rows(), z_t.cols(), z_t.view_id());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = eps_pred.values()[i];
    out.values()[i] = sbp * ((z_t.values()[i] - s1b * e) / sb) + s1bp * e;
  }
  return out;
}

std::vector<int> ddim_timesteps(int t, int n_steps) {
  if (n_steps < 1) throw ValidationError("DDIM needs at least one step");
  std::vector<int> ts{t};
  for (int k = 1; k <= n_steps; ++k) {
    const int next = static_cast<int>(std::lround(static_cast<double>(t) * (n_steps - k) / n_steps));
    if (next < ts.back()) ts.push_back(next);
  }
  return ts;
}

DenoiseResult denoise_edit(const Denoiser& d, const LatentImage& z, const LatentImage* image_cond, const Prompt& text,
                           const GuidanceConfig& g, const NoiseSchedule& sched, int n_steps, std::uint64_t seed) {
  if (n_steps < 1) throw ValidationError("denoise_edit needs n_steps >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(sched.t_min, sched.t_max);
  const double t_frac = u(rng);
  const NoisedLatent noised = add_noise(z, t_frac, sched, derive_seed(seed, 1, 0));
  record_noise_if_supported(d, noised.eps);
  DenoiseResult out;
  out.t_start = noised.t;
  LatentImage cur = noised.z_t;
  const auto ts = ddim_timesteps(noised.t, n_steps);
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const LatentImage e = guided_score(d, cur, ts[k], image_cond, text, g);
    cur = ddim_step(cur, e, ts[k], ts[k + 1], sched);
  }
  out.edited = std::move(cur);
  return out;
}

// ---------------------------------------------------------------------------
// Backends

void IdentityDenoiser::record_noise(const LatentImage& eps) const {
  std::lock_guard lock(mu_);
  noise_ = eps;
}

LatentImage IdentityDenoiser::recorded(const LatentImage& z_t) const {
  std::lock_guard lock(mu_);
  if (!noise_ || !noise_->same_shape(z_t)) return LatentImage(z_t.rows(), z_t.cols(), z_t.view_id());
  LatentImage out = *noise_;
  out.set_view_id(z_t.view_id());
  return out;
}

LatentImage IdentityDenoiser::eps(const LatentImage& z_t, int, const LatentImage*, const Prompt&) const {
  return recorded(z_t);
}

OracleEditDenoiser::OracleEditDenoiser(Mask region, const Eigen::Vector4d& direction, double magnitude)
    : default_region_(std::move(region)), direction_(direction), magnitude_(magnitude) {
  if (std::abs(direction.norm() - 1.0) > 1e-9) throw ValidationError("oracle edit direction must be unit length");
  if (!std::isfinite(magnitude)) throw ValidationError("oracle edit magnitude must be finite");
}

void OracleEditDenoiser::add_view(const LatentImage& image_cond, Mask region) {
  if (region.rows() != image_cond.rows() || region.cols() != image_cond.cols()) {
    throw ValidationError("oracle region shape does not match its image condition");
  }
  per_view_.emplace_back(image_cond, std::move(region));
}

const Mask* OracleEditDenoiser::region_for(const LatentImage* image_cond) const {
  if (image_cond) {
    for (const auto& [cond, region] : per_view_) {
      if (cond.same_shape(*image_cond) && std::equal(cond.values().begin(), cond.values().end(),
                                                     image_cond->values().begin())) {
        return &region;
      }
    }
  }
  return default_region_.size() > 0 ? &default_region_ : nullptr;
}

LatentImage OracleEditDenoiser::eps(const LatentImage& z_t, int, const LatentImage* image_cond,
                                    const Prompt& text) const {
  LatentImage out = recorded(z_t);
  if (!text) return out;
  const Mask* region = region_for(image_cond);
  if (!region) return out;
  if (region->rows() != z_t.rows() || region->cols() != z_t.cols()) {
    throw ValidationError("oracle region shape does not match the latent");
  }
  for (int r = 0; r < z_t.rows(); ++r) {
    for (int c = 0; c < z_t.cols(); ++c) {
      if (!region->at(r, c)) continue;
      for (int ch = 0; ch < 4; ++ch) out.at(r, c, ch) -= magnitude_ * direction_(ch);
    }
  }
  return out;
}

LatentImage NullEditDenoiser::eps(const LatentImage& z_t, int t, const LatentImage* image_cond, const Prompt&) const {
  // Any deterministic function of (z_t, t, image) that ignores the text.
  LatentImage out(z_t.rows(), z_t.cols(), z_t.view_id());
  const double k = 0.1 + 1e-4 * t;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values()[i] = k * z_t.values()[i] + (image_cond ? 0.01 * image_cond->values()[i] : 0.0);
  }
  return out;
}

LatentImage CountingDenoiser::eps(const LatentImage& z_t, int t, const LatentImage* image_cond,
                                  const Prompt& text) const {
  ++calls_;
  return inner_.eps(z_t, t, image_cond, text);
}

// ---------------------------------------------------------------------------
// External subprocess backend

namespace {

void write_all(int fd, const char* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::write(fd, data, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw Error(std::string("external denoiser: write failed: ") + std::strerror(errno));
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

void read_all(int fd, char* data, std::size_t n) {
  while (n > 0) {
    const ssize_t r = ::read(fd, data, n);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) throw Error("external denoiser: process closed its output");
    data += r;
    n -= static_cast<std::size_t>(r);
  }
}

void send_tensor(int fd, const LatentImage& z) {
  std::ostringstream os;
  write_tensor(os, to_blob(z, DType::kFloat64));
  const std::string s = os.str();
  write_all(fd, s.data(), s.size());
}

LatentImage receive_tensor(int fd, const LatentImage& like) {
  std::string header(kTensorHeaderBytes, '\0');
  read_all(fd, header.data(), header.size());
  const auto dtype = static_cast<std::uint8_t>(header[4]);
  std::array<std::uint32_t, 3> dims{};
  std::memcpy(dims.data(), header.data() + 8, 12);
  const std::size_t count = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  const std::size_t width = dtype == 1 ? 8 : 4;
  if (count > (std::size_t{1} << 28)) throw FormatError("external denoiser: reply too large");
  std::string payload(count * width, '\0');
  read_all(fd, payload.data(), payload.size());
  std::istringstream is(header + payload);
  LatentImage out = latent_from_blob(read_tensor(is), like.view_id());
  if (!out.same_shape(like)) throw FormatError("external denoiser: reply shape differs from z_t");
  return out;
}

}  // namespace

ExternalDenoiser::ExternalDenoiser(std::vector<std::string> argv) {
  if (argv.empty()) throw ConfigError("external denoiser needs a command");
  int in_pipe[2], out_pipe[2];
  if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) throw Error("external denoiser: pipe failed");
  const pid_t pid = ::fork();
  if (pid < 0) throw Error("external denoiser: fork failed");
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    std::vector<char*> args;
    for (auto& a : argv) args.push_back(a.data());
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  ::signal(SIGPIPE, SIG_IGN);
}

ExternalDenoiser::~ExternalDenoiser() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

LatentImage ExternalDenoiser::eps(const LatentImage& z_t, int t, const LatentImage* image_cond,
                                  const Prompt& text) const {
  std::lock_guard lock(mu_);
  nlohmann::json header;
  header["t"] = t;
  header["image_cond"] = image_cond != nullptr;
  header["text"] = text ? nlohmann::json(*text) : nlohmann::json(nullptr);
  const std::string line = header.dump() + "\n";
  write_all(to_child_, line.data(), line.size());
  send_tensor(to_child_, z_t);
  if (image_cond) send_tensor(to_child_, *image_cond);
  return receive_tensor(from_child_, z_t);
}

}  // namespace latentedit

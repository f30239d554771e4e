#include "latentedit/edit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "latentedit/errors.hpp"
#include "latentedit/rng.hpp"

namespace latentedit {

LatentImage blend_masked(const LatentImage& edited, const LatentImage& original, const Mask& mask) {
  if (!edited.same_shape(original) || mask.rows() != original.rows() || mask.cols() != original.cols()) {
    throw ValidationError("blend_masked: shape mismatch");
  }
  LatentImage out = original;
  for (int r = 0; r < out.rows(); ++r) {
    for (int c = 0; c < out.cols(); ++c) {
      if (!mask.at(r, c)) continue;
      for (int ch = 0; ch < kLatentChannels; ++ch) out.at(r, c, ch) = edited.at(r, c, ch);
    }
  }
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n,");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n,");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool starts_with_determiner(const std::string& clause) {
  static const char* kDeterminers[] = {"the", "a", "an", "his", "her", "its", "their", "my", "your", "our", "this",
                                       "that"};
  const std::string first = lower(clause.substr(0, clause.find(' ')));
  return std::any_of(std::begin(kDeterminers), std::end(kDeterminers), [&](const char* d) { return first == d; });
}

}  // namespace

std::vector<std::string> split_prompt(const std::string& prompt) {
  if (trim(prompt).empty()) throw ValidationError("empty prompt");
  std::istringstream words(prompt);
  std::vector<std::string> clauses{""};
  std::string w;
  while (words >> w) {
    if (lower(w) == "and" && !clauses.back().empty()) {
      clauses.emplace_back();
      continue;
    }
    if (!clauses.back().empty()) clauses.back() += ' ';
    clauses.back() += w;
  }
  std::vector<std::string> out;
  for (auto& c : clauses) {
    c = trim(c);
    if (!c.empty()) out.push_back(c);
  }
  if (out.empty()) throw ValidationError("prompt has no clauses");
  const std::string verb = out.front().substr(0, out.front().find(' '));
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (starts_with_determiner(out[i]) && !starts_with_determiner(out.front())) out[i] = verb + " " + out[i];
  }
  return out;
}

PhaseSchedule init_phase_schedule(std::int64_t total_steps, std::int64_t reference_steps,
                                  std::int64_t reference_boundary, const LossWeights& early,
                                  const LossWeights& late) {
  if (total_steps < 1 || reference_steps < 1 || reference_boundary < 0 || reference_boundary > reference_steps) {
    throw ConfigError("invalid initialisation schedule");
  }
  const auto boundary = static_cast<std::int64_t>(
      std::llround(static_cast<double>(total_steps) * reference_boundary / reference_steps));
  std::vector<Phase> phases;
  if (boundary > 0) phases.push_back({0, boundary, early, "init_refine"});
  if (boundary < total_steps) phases.push_back({boundary, total_steps, late, "init_align"});
  return PhaseSchedule(std::move(phases));
}

PhaseSchedule edit_phase_schedule(std::int64_t total_steps, std::int64_t warm_steps, const LossWeights& warm,
                                  const LossWeights& late) {
  if (total_steps < 1 || warm_steps < 0) throw ConfigError("invalid editing schedule");
  const std::int64_t boundary = std::min(warm_steps, total_steps);
  std::vector<Phase> phases;
  if (boundary > 0) phases.push_back({0, boundary, warm, "edit_refine"});
  if (boundary < total_steps) phases.push_back({boundary, total_steps, late, "edit"});
  return PhaseSchedule(std::move(phases));
}

void EditConfig::validate() const {
  if (editing_rate < 1) throw ConfigError("editing rate must be >= 1");
  if (!(mask_threshold >= 0.0 && mask_threshold <= 1.0)) throw ConfigError("mask threshold must lie in [0, 1]");
  if (edit_iterations < 1) throw ConfigError("edit iterations must be >= 1");
  if (denoise_steps < 1) throw ConfigError("denoise steps must be >= 1");
  if (phase_schedule.total_steps() != edit_iterations) {
    throw ConfigError("edit phase schedule must cover exactly the edit iterations");
  }
  guidance.validate();
}

EditSession start_session(TrainingState trained, const SceneDataset& scene) {
  scene.validate();
  EditSession s;
  s.training = std::move(trained);
  s.dataset = scene;
  s.originals = scene.latents;
  for (const auto& z : scene.latents) s.masks.emplace_back(z.rows(), z.cols());
  s.cached_masks.resize(scene.size());
  return s;
}

std::string to_json_line(const EditLogRecord& rec) {
  nlohmann::json j;
  j["step"] = rec.step;
  j["phase"] = rec.phase;
  j["loss_r"] = rec.loss.loss_r;
  j["loss_f"] = rec.loss.loss_f;
  j["loss_reg"] = rec.loss.loss_reg;
  j["du_view"] = rec.du_view ? nlohmann::json(*rec.du_view) : nlohmann::json(nullptr);
  j["mask_area_frac"] = rec.mask_area_frac ? nlohmann::json(*rec.mask_area_frac) : nlohmann::json(nullptr);
  if (rec.mask_overlap_frac) j["mask_overlap_frac"] = *rec.mask_overlap_frac;
  return j.dump();
}

namespace {

constexpr std::uint64_t kStreamScore = 11;
constexpr std::uint64_t kStreamDenoise = 12;
constexpr std::uint64_t kStreamInitialMask = 13;

RenderConfig deterministic(const RenderConfig& cfg) {
  RenderConfig r = cfg;
  r.stratified = false;
  return r;
}

Mask prompt_mask(const EditPrompt& p, const LatentImage& z, const LatentImage& image_cond, const EditConfig& cfg,
                 const NoiseSchedule& sched, std::uint64_t seed) {
  return threshold_mask(delta_scores(*p.denoiser, z, &image_cond, p.text, sched, seed), cfg.mask_threshold);
}

}  // namespace

DatasetUpdate dataset_update(EditSession& session, int view, const std::vector<EditPrompt>& prompts,
                             const EditConfig& cfg, const NoiseSchedule& sched, const TrainConfig& train_cfg,
                             std::uint64_t seed) {
  const auto v = static_cast<std::size_t>(view);
  const TrainingState& st = session.training;
  DatasetUpdate du;
  du.view = view;
  du.render = render_view(st.field, &st.adapter, st.cameras[v], view_geometry(session.dataset),
                          deterministic(train_cfg.render), view);
  const LatentImage& original = session.originals[v];
  const auto index = static_cast<std::uint64_t>(session.dataset_updates);
  LatentImage blended = original;
  du.mask = Mask(original.rows(), original.cols());
  const bool reuse = cfg.consolidate_masks || !cfg.refresh_mask_each_edit;
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    const EditPrompt& p = prompts[j];
    const std::uint64_t sub = index * 1024 + j;
    auto& cache = session.cached_masks[v];
    Mask m;
    if (reuse && cache.size() == prompts.size()) {
      m = cache[j];
    } else {
      m = prompt_mask(p, du.render, original, cfg, sched, derive_seed(seed, kStreamScore, sub));
    }
    const DenoiseResult edited = denoise_edit(*p.denoiser, du.render, &original, p.text, cfg.guidance, sched,
                                              cfg.denoise_steps, derive_seed(seed, kStreamDenoise, sub));
    // Later prompts overwrite earlier ones inside overlaps.
    blended = blend_masked(edited.edited, blended, m);
    du.mask = mask_union(du.mask, m);
    du.prompt_masks.push_back(std::move(m));
  }
  if (reuse) session.cached_masks[v] = du.prompt_masks;
  du.mask.threshold_used = cfg.mask_threshold;
  du.blended = blended;
  session.dataset.latents[v] = std::move(blended);
  session.masks[v] = du.mask;
  ++session.dataset_updates;
  return du;
}

void edit_scene(EditSession& session, const std::vector<EditPrompt>& prompts, const EditConfig& cfg,
                const NoiseSchedule& sched, const TrainConfig& train_cfg, std::uint64_t seed,
                const EditCallbacks& callbacks) {
  cfg.validate();
  train_cfg.validate();
  if (prompts.empty()) throw ValidationError("edit_scene needs at least one prompt");
  for (const auto& p : prompts) {
    if (!p.denoiser) throw ValidationError("prompt '" + p.text + "' has no denoiser");
  }
  if (cfg.consolidate_masks && !session.masks_consolidated) {
    // Score every view once from its current render, then make each prompt's
    // masks consistent across views.
    const TrainingState& st = session.training;
    std::vector<std::vector<Mask>> per_prompt(prompts.size());
    for (std::size_t v = 0; v < session.dataset.size(); ++v) {
      const LatentImage render = render_view(st.field, &st.adapter, st.cameras[v], view_geometry(session.dataset),
                                             deterministic(train_cfg.render), static_cast<int>(v));
      for (std::size_t j = 0; j < prompts.size(); ++j) {
        per_prompt[j].push_back(prompt_mask(prompts[j], render, session.originals[v], cfg, sched,
                                            derive_seed(seed, kStreamInitialMask, v * 1024 + j)));
      }
    }
    for (auto& masks : per_prompt) {
      masks = consolidate_masks(masks, session.dataset, st.cameras, st.field, cfg.consolidation);
    }
    for (std::size_t v = 0; v < session.dataset.size(); ++v) {
      session.cached_masks[v].clear();
      for (std::size_t j = 0; j < prompts.size(); ++j) session.cached_masks[v].push_back(per_prompt[j][v]);
    }
    session.masks_consolidated = true;
  }
  while (session.step < cfg.edit_iterations) {
    const std::int64_t i = session.step;
    const Phase& phase = cfg.phase_schedule.at(i);
    const TrainBatch batch = sample_batch(session.dataset, train_cfg, session.training.field.step_count);
    EditLogRecord rec;
    rec.step = i;
    rec.phase = phase.name;
    try {
      rec.loss = train_step(session.training, session.dataset, batch, phase.weights, train_cfg);
    } catch (const NonFiniteError& e) {
      std::string where;
      if (cfg.snapshot_dir) {
        save_checkpoint(session.training, *cfg.snapshot_dir);
        where = "; last good state written to " + cfg.snapshot_dir->string();
      }
      throw NonFiniteError(std::string(e.what()) + " during edit iteration " + std::to_string(i) + where);
    }
    if ((i + 1) % cfg.editing_rate == 0) {
      const int view = static_cast<int>(session.next_view);
      session.next_view = (session.next_view + 1) % session.dataset.size();
      const DatasetUpdate du = dataset_update(session, view, prompts, cfg, sched, train_cfg, seed);
      rec.du_view = view;
      rec.mask_area_frac = du.mask.area_fraction();
      if (prompts.size() > 1) {
        std::size_t overlap = 0;
        for (std::size_t k = 0; k < du.mask.size(); ++k) {
          int hits = 0;
          for (const auto& m : du.prompt_masks) hits += m.values()[k] ? 1 : 0;
          overlap += hits > 1 ? 1 : 0;
        }
        rec.mask_overlap_frac = static_cast<double>(overlap) / static_cast<double>(du.mask.size());
      }
      if (callbacks.on_update) callbacks.on_update(du);
    }
    ++session.step;
    if (callbacks.on_step) callbacks.on_step(rec);
  }
}

double edit_psnr(const LatentImage& a, const LatentImage& b, const Mask* region, double peak) {
  if (!a.same_shape(b)) throw ValidationError("edit_psnr: shape mismatch");
  if (region && (region->rows() != a.rows() || region->cols() != a.cols())) {
    throw ValidationError("edit_psnr: region shape mismatch");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < a.cols(); ++c) {
      if (region && !region->at(r, c)) continue;
      for (int ch = 0; ch < a.channels(); ++ch) {
        const double d = a.at(r, c, ch) - b.at(r, c, ch);
        sum += d * d;
      }
      n += static_cast<std::size_t>(a.channels());
    }
  }
  if (n == 0) throw ValidationError("edit_psnr: empty selection");
  const double mse = sum / static_cast<double>(n);
  if (mse == 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(peak * peak / mse));
}

RandomProjectionEmbedder::RandomProjectionEmbedder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw ConfigError("embedding dimension must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  image_proj_.resize(dim, 2 * kLatentChannels);
  for (Eigen::Index i = 0; i < image_proj_.size(); ++i) image_proj_.data()[i] = n(rng);
}

Eigen::VectorXd RandomProjectionEmbedder::embed_image(const LatentImage& z) const {
  Eigen::VectorXd stats = Eigen::VectorXd::Zero(2 * kLatentChannels);
  const double count = static_cast<double>(z.pixel_count());
  for (int r = 0; r < z.rows(); ++r)
    for (int c = 0; c < z.cols(); ++c)
      for (int ch = 0; ch < kLatentChannels; ++ch) stats(ch) += z.at(r, c, ch) / count;
  for (int r = 0; r < z.rows(); ++r)
    for (int c = 0; c < z.cols(); ++c)
      for (int ch = 0; ch < kLatentChannels; ++ch) {
        const double d = z.at(r, c, ch) - stats(ch);
        stats(kLatentChannels + ch) += d * d / count;
      }
  for (int ch = 0; ch < kLatentChannels; ++ch) stats(kLatentChannels + ch) = std::sqrt(stats(kLatentChannels + ch));
  Eigen::VectorXd e = image_proj_ * stats;
  const double norm = e.norm();
  return norm > 0.0 ? Eigen::VectorXd(e / norm) : e;
}

Eigen::VectorXd RandomProjectionEmbedder::embed_text(const std::string& text) const {
  std::uint64_t h = seed_ ^ 0xcbf29ce484222325ULL;
  for (unsigned char c : text) h = (h ^ c) * 0x100000001b3ULL;
  std::mt19937_64 rng(splitmix64(h));
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd e(dim_);
  for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = n(rng);
  return e / e.norm();
}

double directional_similarity(const Embedder& e, const LatentImage& before, const LatentImage& after,
                              const std::string& prompt_before, const std::string& prompt_after) {
  const Eigen::VectorXd di = e.embed_image(after) - e.embed_image(before);
  const Eigen::VectorXd dt = e.embed_text(prompt_after) - e.embed_text(prompt_before);
  if (di.size() != dt.size()) throw ValidationError("embedder returned mismatched dimensions");
  const double ni = di.norm(), nt = dt.norm();
  if (ni == 0.0) throw UndefinedResultError("directional similarity undefined: image embedding did not change");
  if (nt == 0.0) throw UndefinedResultError("directional similarity undefined: caption embedding did not change");
  return std::clamp(di.dot(dt) / (ni * nt), -1.0, 1.0);
}

double displacement_cosine(const LatentImage& before, const LatentImage& after, const Mask& region,
                           const Eigen::Vector4d& direction) {
  if (!before.same_shape(after) || region.rows() != before.rows() || region.cols() != before.cols()) {
    throw ValidationError("displacement_cosine: shape mismatch");
  }
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  std::size_t n = 0;
  for (int r = 0; r < before.rows(); ++r) {
    for (int c = 0; c < before.cols(); ++c) {
      if (!region.at(r, c)) continue;
      for (int ch = 0; ch < 4; ++ch) mean(ch) += after.at(r, c, ch) - before.at(r, c, ch);
      ++n;
    }
  }
  if (n == 0) throw UndefinedResultError("displacement_cosine: empty region");
  if (!(mean.norm() > 0.0) || !(direction.norm() > 0.0)) {
    throw UndefinedResultError("displacement_cosine: zero displacement");
  }
  return mean.dot(direction) / (mean.norm() * direction.norm());
}

}  // namespace latentedit

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "latentedit/config.hpp"
#include "latentedit/errors.hpp"

using namespace latentedit;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Defaults, MatchPublishedHyperparameters) {
  const RunConfig c;
  EXPECT_EQ(c.edit_mu, 0.45);
  EXPECT_EQ(c.guidance_s_text, 7.5);
  EXPECT_EQ(c.guidance_s_image, 1.5);
  EXPECT_EQ(c.schedule_delta_t, 0.75);
  EXPECT_EQ(c.schedule_t_min, 0.02);
  EXPECT_EQ(c.schedule_t_max, 0.98);
  EXPECT_EQ(c.edit_rate, 10);
  EXPECT_EQ(c.edit_warm_steps, 400);
  EXPECT_EQ(c.edit_lambda_warm, (std::array<double, 3>{0.90, 0.1, 0.0}));
  EXPECT_EQ(c.edit_lambda_late, (std::array<double, 3>{1.0, 0.0, 0.0}));
  EXPECT_EQ(c.init_reference_steps, 30000);
  EXPECT_EQ(c.init_reference_boundary, 2500);
  EXPECT_EQ(c.init_lambda_early, (std::array<double, 3>{0.80, 0.1, 0.1}));
  EXPECT_EQ(c.init_lambda_late, (std::array<double, 3>{0.75, 0.0, 0.25}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Defaults, ShippedConfigEqualsBuiltInDefaults) {
  const RunConfig shipped = load_config(std::filesystem::path(LATENTEDIT_SOURCE_DIR) / "configs" / "default.json");
  EXPECT_EQ(config_to_json(shipped), config_to_json(RunConfig{}));
}

TEST(Defaults, DerivedModuleConfigsCarryTheValues) {
  const RunConfig c;
  const NoiseSchedule s = make_schedule(c);
  EXPECT_EQ(s.delta_t, 0.75);
  EXPECT_EQ(s.t_min, 0.02);
  EXPECT_EQ(s.t_max, 0.98);
  const EditConfig e = edit_config(c);
  EXPECT_EQ(e.mask_threshold, 0.45);
  EXPECT_EQ(e.editing_rate, 10);
  EXPECT_EQ(e.guidance.s_text, 7.5);
  EXPECT_EQ(e.guidance.s_image, 1.5);
  EXPECT_EQ(e.phase_schedule.at(399).weights, (LossWeights{0.9, 0.1, 0.0}));
  EXPECT_EQ(e.phase_schedule.at(400).weights, (LossWeights{1.0, 0.0, 0.0}));
  const PhaseSchedule init = init_schedule(c);
  EXPECT_EQ(init.at(0).weights, (LossWeights{0.8, 0.1, 0.1}));
  EXPECT_EQ(init.at(1999).weights, (LossWeights{0.75, 0.0, 0.25}));
}

TEST(LoadConfig, UnknownKeyIsRejected) {
  EXPECT_THROW(load_config(write_temp("le_cfg_unknown.json", R"({"edit.muu": 0.5})")), ConfigError);
  EXPECT_THROW(load_config(write_temp("le_cfg_nested.json", R"({"edit": {"mu": 0.5}})")), ConfigError);
}

TEST(LoadConfig, WrongTypesAreRejected) {
  RunConfig c;
  EXPECT_THROW(apply_config_json(c, {{"edit.mu", "high"}}), ConfigError);
  EXPECT_THROW(apply_config_json(c, {{"edit.editing_rate", 2.5}}), ConfigError);
  EXPECT_THROW(apply_config_json(c, {{"edit.refresh_mask", 1}}), ConfigError);
  EXPECT_THROW(apply_config_json(c, {{"edit.lambda_warm", {1.0, 0.0}}}), ConfigError);
  EXPECT_THROW(apply_config_json(c, {{"backend.command", "prog"}}), ConfigError);
  EXPECT_THROW(apply_config_json(c, nlohmann::json::array()), ConfigError);
}

TEST(LoadConfig, MalformedAndMissingFilesAreConfigErrors) {
  EXPECT_THROW(load_config(write_temp("le_cfg_bad.json", "{not json")), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(LoadConfig, PartialFileKeepsOtherDefaults) {
  const RunConfig c = load_config(write_temp("le_cfg_partial.json", R"({"edit.mu": 0.3, "seed": 7})"));
  EXPECT_EQ(c.edit_mu, 0.3);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.guidance_s_text, 7.5);
}

TEST(Overrides, ParseJsonValuesAndBareStrings) {
  RunConfig c;
  apply_override(c, "edit.editing_rate=5");
  apply_override(c, "guidance.s_text=3");
  apply_override(c, "backend.name=identity");
  apply_override(c, "edit.lambda_late=[0.5,0.25,0.25]");
  apply_override(c, "render.stratified=false");
  EXPECT_EQ(c.edit_rate, 5);
  EXPECT_EQ(c.guidance_s_text, 3.0);
  EXPECT_EQ(c.backend_name, "identity");
  EXPECT_EQ(c.edit_lambda_late, (std::array<double, 3>{0.5, 0.25, 0.25}));
  EXPECT_FALSE(c.render_stratified);
  EXPECT_THROW(apply_override(c, "edit.mu"), ConfigError);
  EXPECT_THROW(apply_override(c, "=3"), ConfigError);
  EXPECT_THROW(apply_override(c, "nope=3"), ConfigError);
}

TEST(RoundTrip, JsonPreservesEveryKey) {
  RunConfig c;
  c.seed = 42;
  c.edit_mu = 0.3;
  c.backend_command = {"python3", "serve.py"};
  c.render_background = {0.1, 0.2, 0.3, 0.4};
  const nlohmann::json j = config_to_json(c);
  EXPECT_EQ(j.size(), config_keys().size());
  RunConfig d;
  apply_config_json(d, j);
  EXPECT_EQ(config_to_json(d), j);
}

TEST(Validate, RejectsInconsistentSettings) {
  auto invalid = [](const std::string& assignment) {
    RunConfig c;
    apply_override(c, assignment);
    EXPECT_THROW(c.validate(), ConfigError) << assignment;
  };
  invalid("backend.name=magic");
  invalid("backend.name=external");
  invalid("backend.direction=[0,0,0,0]");
  invalid("schedule.t_min=0.99");
  invalid("edit.mu=1.5");
  invalid("edit.editing_rate=0");
  invalid("train.patch_size=8");
  invalid("schedule.kind=linear");
  invalid("edit.checkpoint_every=-1");
}

TEST(MakeDenoiser, OracleNeedsARegionAndOthersResolveByName) {
  SceneSpec spec;
  spec.views = 2;
  spec.rows = spec.cols = 4;
  SceneDataset scene = synth_scene(spec, 0);
  RunConfig c;
  EXPECT_NE(dynamic_cast<OracleEditDenoiser*>(make_denoiser(c, scene).get()), nullptr);
  c.backend_name = "null";
  EXPECT_NE(dynamic_cast<NullEditDenoiser*>(make_denoiser(c, scene).get()), nullptr);
  c.backend_name = "identity";
  EXPECT_NE(dynamic_cast<IdentityDenoiser*>(make_denoiser(c, scene).get()), nullptr);
  c.backend_name = "oracle_edit";
  scene.ground_truth_edit_region.reset();
  EXPECT_THROW(make_denoiser(c, scene), ConfigError);
}

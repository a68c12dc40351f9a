#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "idmkit/env.hpp"
#include "idmkit/idm_core.hpp"
#include "idmkit/training.hpp"
#include "idmkit/video_pipeline.hpp"
#include "json.hpp"

namespace idm {

/// Everything a pipeline run is configured by. Serialized as canonical JSON
/// (sorted keys); unknown keys are rejected.
struct PipelineConfig {
  GeneratorConfig generator;
  ModelConfig model = default_pipeline_model();
  TrainConfig train;
  /// train / val / test fractions used by `train`.
  std::array<double, 3> split{10.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0};
  std::optional<std::filesystem::path> filter_rules;
  std::optional<std::string> classifier_url;
  bool classifier_fallback = false;
  double sample_rate_hz = 1.0;
  std::optional<std::filesystem::path> search_index;
  int search_k = 15;
  std::optional<std::string> refiner_url;
  std::optional<std::string> reasoner_url;

  /// small_conv at the synthetic screen resolution.
  static ModelConfig default_pipeline_model();
};

nlohmann::json pipeline_config_to_json(const PipelineConfig& config);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string pipeline_config_digest(const PipelineConfig& config);

/// Output root: $W&L_HOME, else $WL_HOME, else ./wl_out.
std::filesystem::path output_root();

/// Exit codes: 0 success, 1 I/O, 2 validation, 3 numeric failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace idm

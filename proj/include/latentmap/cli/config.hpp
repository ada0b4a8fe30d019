#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentmap/eval/eval.hpp"
#include "latentmap/training/training.hpp"

namespace latentmap {

/// Bad or unknown config field. The message names the field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneConfig {
  std::string kind = "apartment";  // apartment | room
  std::uint64_t seed = 1;
  int frames = 32;
  TrajectoryOptions trajectory;
  std::uint64_t trajectory_seed = 0;
};

struct Stage1Config {
  ShapeDataOptions data;
  Stage1Options train;
  int held_out_shapes = 40;
};

struct Stage2Config {
  FusionDataOptions data;
  Stage2Options train;
  int sequences = 24;
  int held_out_sequences = 4;
};

/// Everything a run needs. Defaults are the desk-scale setup.
struct RunConfig {
  std::uint64_t seed = 0;
  GridSpec grid = GridSpec::desk();
  NetworkConfig network = NetworkConfig::from_grid(GridSpec::desk());
  SensorModel sensor = desk_sensor();
  SceneConfig scene;
  NoiseConfig noise;
  IntegrationPolicy policy;
  ExtractionConfig extraction;
  TsdfConfig tsdf;
  MetricConfig metrics;
  Stage1Config stage1;
  Stage2Config stage2;
  CompareConfig compare;
  std::vector<double> calibrate_taus{0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5};

  /// Cross-field checks; throws ConfigError.
  void validate() const;
  /// Copies the shared sections (grid, sensor, policy, ...) into the
  /// per-command option structs.
  void propagate();
};

nlohmann::json to_json(const RunConfig& cfg);
/// Strict: every key must be known, every value must have the right type.
RunConfig config_from_json(const nlohmann::json& j);

/// Applies "section.key=value" (value parsed as JSON, else taken as a
/// string) to a JSON document. Unknown paths are rejected later by
/// config_from_json.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// File (or defaults when path is empty) + overrides, validated.
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

/// Writes config.json into dir (created if needed).
void write_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg);

}  // namespace latentmap

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "soapapo/apo_engine.hpp"
#include "soapapo/llm_gateway.hpp"

namespace soapapo {

/// Everything a pipeline command needs. Relative paths in the file resolve against
/// the directory holding the config file.
struct RunConfig {
  std::vector<std::filesystem::path> dataset;
  std::filesystem::path run_dir;
  std::uint64_t seed = 0;
  llm::BackendConfig backend;
  apo::OptimizerConfig optimizer;
  std::size_t train_sample_size = 5;
  std::size_t min_section_size = 10;
  bool eval_excludes_training = true;
  std::filesystem::path lexicon;
  std::optional<std::filesystem::path> templates;
  std::string baseline_label = "Gen";

  /// The config as written (relative paths kept, run_dir left out), persisted as
  /// `<run>/config.json`.
  nlohmann::json canonical;

  /// Parses JSON or TOML (by extension). Unknown keys, bad types and missing files
  /// raise ConfigError naming the key.
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

/// toml++ table converted to the equivalent JSON value.
nlohmann::json toml_to_json(const std::filesystem::path& path);

}  // namespace soapapo

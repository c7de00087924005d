#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "soapapo/apo_engine.hpp"
#include "soapapo/corpus.hpp"
#include "soapapo/metrics.hpp"

namespace soapapo::experiment {

/// Prompts authored by one mentor (a human group, the generic baseline, or APO).
struct PromptGroup {
  std::string label;
  std::map<corpus::SectionId, apo::PromptState> prompts;
};

/// Prompt-set file: {"label": "...", "prompts": {"<section>": "<instruction>", ...}}.
PromptGroup load_prompt_group(const std::filesystem::path& path);
PromptGroup prompt_group_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PromptGroup& group);

struct ScoreTable {
  std::string group;
  std::string mentee;
  std::map<corpus::SectionId, metrics::ScoreCard> per_section;
  metrics::ScoreCard overall;
};

nlohmann::json to_json(const ScoreTable& table);
ScoreTable score_table_from_json(const nlohmann::json& j);

using EvaluationSets = std::map<corpus::SectionId, std::vector<corpus::DialogueRecord>>;

/// Validates the group's prompt on every section of `eval`. The overall card is the
/// example-weighted aggregate of the sections. Missing prompts raise ConfigError.
ScoreTable run_group(const PromptGroup& group, const llm::LlmRole& mentee, const EvaluationSets& eval,
                     apo::Engine& engine);

/// Example-weighted overall of per-section cards.
metrics::ScoreCard overall_of(const std::map<corpus::SectionId, metrics::ScoreCard>& per_section);

/// Column heads used in score and delta tables.
inline constexpr std::string_view kMetricNames[] = {"R1", "R2", "RL", "M", "U-f"};

/// F1 of the named metric scaled to score points (x100).
double metric_points(const metrics::ScoreCard& card, std::string_view metric);

inline constexpr std::string_view kOverallRow = "Overall";

struct DeltaTable {
  std::string baseline;
  std::string metric;
  std::string mentee;
  std::map<std::string, double> baseline_points;               ///< row -> baseline score (x100)
  std::map<std::string, std::map<std::string, double>> rows;  ///< row -> label -> delta (x100)
  std::vector<std::string> labels;                            ///< column order
  std::vector<std::string> row_order;                         ///< sections, then Overall
};

/// Signed per-section increments of each table over the baseline. Rows cover every
/// section plus "Overall". Section sets must match.
DeltaTable delta_table(const ScoreTable& baseline, std::span<const ScoreTable> others, std::string_view metric);

/// Half-up to two decimals (ties away from zero), as printed in the tables.
std::string format_points(double points);
std::string format_delta(double points);

/// Table-1 style CSV: section,R1,R2,RL,M,U-f with an Overall row.
std::string score_table_csv(const ScoreTable& table);
/// Table-4 style CSV for one or more mentees.
std::string delta_tables_csv(std::span<const DeltaTable> tables);

/// File-name safe form of a label or model id.
std::string file_token(std::string_view s);

struct ReportFiles {
  std::vector<std::filesystem::path> written;
};

/// Reads `<run>/scores/*.json` and writes report/scores_*.csv, report/deltas_<metric>.csv,
/// report/mentor_impact.csv and report/summary.md. Throws ReportError listing every
/// missing artifact when the run is incomplete.
ReportFiles emit_report(const std::filesystem::path& run_dir, const std::string& baseline_label = "Gen");

}  // namespace soapapo::experiment

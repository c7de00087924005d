#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "soapapo/apo_engine.hpp"
#include "soapapo/corpus.hpp"
#include "soapapo/experiment.hpp"
#include "soapapo/llm_gateway.hpp"
#include "soapapo/metrics.hpp"
#include "soapapo/prompt_kit.hpp"
#include "soapapo/run_config.hpp"

// Run directory layout:
//   <run>/dataset.json, inventory.csv        ingest
//   <run>/config.json                        optimize
//   <run>/splits/<section>.json              seed, train ids, eval ids
//   <run>/traces/<section>.json              optimization traces
//   <run>/prompts/<label>.json               prompt sets (Gen and APO-<critic>)
//   <run>/scores/<label>__<mentee>.json      evaluate
//   <run>/cache/<digest>.json                gateway responses
//   <run>/report/                            report
//   <run>/review/                            review service state
namespace soapapo::pipeline {

/// Loads and filters the pool, then writes `dataset.json` and `inventory.csv`.
corpus::SectionDataset ingest(const std::vector<std::filesystem::path>& csvs, const std::filesystem::path& run_dir,
                              std::size_t min_section_size = 10, std::size_t train_sample_size = 5);

/// Shared state for commands operating on one run directory.
class RunContext {
 public:
  /// `backend` overrides the configured one (tests pass instrumented backends).
  RunContext(RunConfig config, std::filesystem::path run_dir, std::shared_ptr<llm::Backend> backend = nullptr);

  const RunConfig& config() const noexcept { return config_; }
  const std::filesystem::path& run_dir() const noexcept { return run_dir_; }
  const corpus::SectionDataset& dataset() const noexcept { return dataset_; }
  const prompts::TemplateSet& templates() const noexcept { return templates_; }
  const metrics::MetricSuite& metrics() const noexcept { return *metrics_; }
  llm::Gateway& gateway() noexcept { return *gateway_; }

  /// Deterministic split for the section; persisted to splits/<section>.json.
  corpus::SectionSplit split_for(const corpus::SectionId& section);

  std::unique_ptr<apo::Engine> make_engine() const;

  /// Requested section names canonicalized and checked against the dataset; empty
  /// input means every section.
  std::vector<corpus::SectionId> resolve_sections(const std::vector<std::string>& names) const;

 private:
  RunConfig config_;
  std::filesystem::path run_dir_;
  corpus::SectionDataset dataset_;
  prompts::TemplateSet templates_;
  std::unique_ptr<metrics::MetricSuite> metrics_;
  std::unique_ptr<llm::Gateway> gateway_;
  std::mutex split_mu_;
};

struct OptimizeOptions {
  std::vector<std::string> sections;  ///< empty: all
  int parallel_sections = 1;
};

std::string apo_group_label(const RunConfig& config);

/// Optimizes each section, persisting splits, traces and prompt sets. Sections run
/// concurrently up to `parallel_sections`; the first failure is rethrown after all finish.
std::vector<apo::OptimizationTrace> optimize(RunContext& ctx, const OptimizeOptions& options);

/// Scores a prompt set on the evaluation split of each section and writes
/// scores/<label>__<mentee>.json plus report/scores_<label>_<mentee>.csv.
experiment::ScoreTable evaluate(RunContext& ctx, const experiment::PromptGroup& group, const std::string& mentee_model,
                                const std::vector<std::string>& sections = {});

}  // namespace soapapo::pipeline

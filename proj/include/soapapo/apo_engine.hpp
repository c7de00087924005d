#pragma once

#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "soapapo/corpus.hpp"
#include "soapapo/llm_gateway.hpp"
#include "soapapo/metrics.hpp"
#include "soapapo/prompt_kit.hpp"

namespace soapapo::apo {

enum class PromptOrigin { generic, human_mentor, apo_iteration, human_post_apo };

std::string_view to_string(PromptOrigin origin);
PromptOrigin origin_from_string(std::string_view s);

/// One prompt version. `iteration` counts optimizer steps along the chain
/// (parent.iteration + 1); `epoch` is the epoch that produced it; p0 is (0, 0).
struct PromptState {
  std::string id;
  corpus::SectionId section;
  std::string text;
  PromptOrigin origin = PromptOrigin::generic;
  std::optional<std::string> parent;
  int epoch = 0;
  int iteration = 0;
  std::optional<std::string> mentor_label;
};

PromptState initial_prompt(const corpus::SectionId& section, std::string text,
                           PromptOrigin origin = PromptOrigin::generic,
                           std::optional<std::string> mentor_label = std::nullopt);

struct GradientFeedback {
  std::string reasons;
  std::string suggestions;
  std::string source_record;
  std::string prompt_before;  ///< id of the lineage entry the critique was about
};

enum class FinalSelection { last, best_validation };
enum class UpdateMode {
  per_instance,  ///< forward, critique, rewrite for each training record in turn
  aggregate,     ///< critique the whole batch, then one rewrite per iteration
};

struct OptimizerConfig {
  int iterations = 5;  ///< j
  int epochs = 3;      ///< k
  llm::LlmRole mentee{llm::LlmRole::Kind::mentee, "gpt-4-0613"};
  llm::LlmRole critic{llm::LlmRole::Kind::critic, "gpt-4-0613"};
  FinalSelection final_selection = FinalSelection::last;
  UpdateMode mode = UpdateMode::per_instance;
  bool accumulate_suggestions = false;
  bool validate_every_epoch = true;
  bool self_consistency_in_training = false;
  int self_consistency_runs = 5;
  double temperature = 0.3;
  bool strict_json = false;

  void validate(std::size_t batch_size) const;  ///< throws ConfigError
};

struct EpochValidation {
  std::string prompt_id;
  metrics::ScoreCard card;
};

struct OptimizationTrace {
  corpus::SectionId section;
  std::string status = "running";  ///< running, complete or aborted
  std::string error;
  std::vector<PromptState> lineage;
  std::vector<GradientFeedback> gradients;
  std::vector<metrics::ScoreCard> per_iteration_scores;
  std::vector<EpochValidation> epoch_validations;
  std::optional<PromptState> final;
  std::optional<metrics::ScoreCard> validation;
  std::size_t repairs = 0;

  const PromptState* find(const std::string& id) const;
};

nlohmann::json to_json(const PromptState& p);
PromptState prompt_state_from_json(const nlohmann::json& j);
nlohmann::json to_json(const OptimizationTrace& t);
OptimizationTrace trace_from_json(const nlohmann::json& j);

/// Picks among candidates by ROUGE-1 F1; ties go to the earliest. `last` ignores scores.
std::size_t select_final(std::span<const metrics::ScoreCard> scores, FinalSelection selection);

/// Runs the forward/backward loop for one section at a time. Calls within a section
/// are strictly sequential; distinct Engine calls for distinct sections may run concurrently.
class Engine {
 public:
  Engine(llm::Gateway& gateway, prompts::TemplateSet templates, const metrics::MetricSuite& metrics,
         OptimizerConfig config);

  /// Mentee summary of one record under `prompt`.
  std::string forward(const PromptState& prompt, const corpus::DialogueRecord& record, const llm::LlmRole& mentee);

  /// Critique then rewrite. The child's epoch defaults to the parent's (at least 1).
  std::pair<GradientFeedback, PromptState> backward(const PromptState& prompt, const corpus::DialogueRecord& record,
                                                    const std::string& generated, const llm::LlmRole& critic,
                                                    std::optional<int> epoch = std::nullopt);

  GradientFeedback gradient_step(const PromptState& prompt, const corpus::DialogueRecord& record,
                                 const std::string& generated, const llm::LlmRole& critic);
  PromptState update_step(const PromptState& prompt, std::span<const std::string> suggestions,
                          const llm::LlmRole& critic, int epoch);

  using Checkpoint = std::function<void(const OptimizationTrace&)>;

  /// Full optimization. `checkpoint` sees the trace after every iteration, at the
  /// end, and once more before an error propagates.
  OptimizationTrace optimize_section(const corpus::SectionSplit& split, const PromptState& p0,
                                     const Checkpoint& checkpoint = {});

  /// Self-consistent generation over `evaluation`, scored against references.
  metrics::ScoreCard validate(const PromptState& prompt, std::span<const corpus::DialogueRecord> evaluation,
                              const llm::LlmRole& mentee);

  /// Per-record generation used by validate (exposed for the review service).
  std::string generate_for_evaluation(const PromptState& prompt, const corpus::DialogueRecord& record,
                                      const llm::LlmRole& mentee);

  const OptimizerConfig& config() const noexcept { return config_; }
  std::vector<std::string> events() const;
  std::size_t repairs() const;

 private:
  llm::Gateway& gateway_;
  prompts::TemplateSet templates_;
  const metrics::MetricSuite& metrics_;
  OptimizerConfig config_;
  mutable std::mutex events_mu_;
  std::vector<std::string> events_;
  std::size_t repairs_ = 0;

  prompts::StructuredReply ask(const llm::LlmRole& role, const std::string& prompt, prompts::ReplyKind kind,
                               const std::string& context, bool self_consistent);
  void log(std::string event);
  metrics::ScoreCard score_batch(const PromptState& prompt, std::span<const corpus::DialogueRecord> batch);
};

}  // namespace soapapo::apo

#include "soapapo/apo_engine.hpp"

#include <algorithm>

#include "soapapo/errors.hpp"

namespace soapapo::apo {

using corpus::DialogueRecord;
using corpus::SectionId;
using metrics::ScoreCard;

std::string_view to_string(PromptOrigin origin) {
  switch (origin) {
    case PromptOrigin::generic: return "generic";
    case PromptOrigin::human_mentor: return "human_mentor";
    case PromptOrigin::apo_iteration: return "apo_iteration";
    case PromptOrigin::human_post_apo: return "human_post_apo";
  }
  return "generic";
}

PromptOrigin origin_from_string(std::string_view s) {
  if (s == "generic") return PromptOrigin::generic;
  if (s == "human_mentor") return PromptOrigin::human_mentor;
  if (s == "apo_iteration") return PromptOrigin::apo_iteration;
  if (s == "human_post_apo") return PromptOrigin::human_post_apo;
  throw Error("unknown prompt origin: " + std::string(s));
}

PromptState initial_prompt(const SectionId& section, std::string text, PromptOrigin origin,
                           std::optional<std::string> mentor_label) {
  PromptState p;
  p.id = section.slug() + "#0";
  p.section = section;
  p.text = std::move(text);
  p.origin = origin;
  p.mentor_label = std::move(mentor_label);
  return p;
}

void OptimizerConfig::validate(std::size_t batch_size) const {
  if (iterations < 1) throw ConfigError("optimizer.iterations", "optimizer.iterations must be >= 1");
  if (epochs < 1) throw ConfigError("optimizer.epochs", "optimizer.epochs must be >= 1");
  if (self_consistency_runs < 1)
    throw ConfigError("self_consistency_runs", "self_consistency_runs must be >= 1");
  if (mentee.model.empty()) throw ConfigError("mentee.model", "mentee.model must be set");
  if (critic.model.empty()) throw ConfigError("critic.model", "critic.model must be set");
  if (mode == UpdateMode::per_instance && static_cast<std::size_t>(iterations) > batch_size)
    throw ConfigError("optimizer.iterations", "optimizer.iterations (" + std::to_string(iterations) +
                                                  ") exceeds the training batch size (" +
                                                  std::to_string(batch_size) + ") under per-instance chaining");
}

const PromptState* OptimizationTrace::find(const std::string& id) const {
  for (const auto& p : lineage)
    if (p.id == id) return &p;
  return nullptr;
}

std::size_t select_final(std::span<const ScoreCard> scores, FinalSelection selection) {
  if (scores.empty()) throw Error("no candidates to select from");
  if (selection == FinalSelection::last) return scores.size() - 1;
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i].rouge1.f1 > scores[best].rouge1.f1) best = i;
  return best;
}

// ------------------------------------------------------------------ json

nlohmann::json to_json(const PromptState& p) {
  nlohmann::json j = {{"id", p.id},
                      {"section", p.section.name()},
                      {"text", p.text},
                      {"origin", to_string(p.origin)},
                      {"epoch", p.epoch},
                      {"iteration", p.iteration}};
  j["parent"] = p.parent ? nlohmann::json(*p.parent) : nlohmann::json(nullptr);
  j["mentor_label"] = p.mentor_label ? nlohmann::json(*p.mentor_label) : nlohmann::json(nullptr);
  return j;
}

PromptState prompt_state_from_json(const nlohmann::json& j) {
  PromptState p;
  p.id = j.at("id").get<std::string>();
  p.section = SectionId(j.at("section").get<std::string>());
  p.text = j.at("text").get<std::string>();
  p.origin = origin_from_string(j.at("origin").get<std::string>());
  p.epoch = j.at("epoch").get<int>();
  p.iteration = j.at("iteration").get<int>();
  if (j.contains("parent") && !j["parent"].is_null()) p.parent = j["parent"].get<std::string>();
  if (j.contains("mentor_label") && !j["mentor_label"].is_null()) p.mentor_label = j["mentor_label"].get<std::string>();
  return p;
}

nlohmann::json to_json(const OptimizationTrace& t) {
  nlohmann::json j;
  j["section"] = t.section.name();
  j["status"] = t.status;
  j["error"] = t.error;
  j["repairs"] = t.repairs;
  j["lineage"] = nlohmann::json::array();
  for (const auto& p : t.lineage) j["lineage"].push_back(to_json(p));
  j["gradients"] = nlohmann::json::array();
  for (const auto& g : t.gradients)
    j["gradients"].push_back({{"reasons", g.reasons},
                              {"suggestions", g.suggestions},
                              {"source_record", g.source_record},
                              {"prompt_before", g.prompt_before}});
  j["per_iteration_scores"] = nlohmann::json::array();
  for (const auto& c : t.per_iteration_scores) j["per_iteration_scores"].push_back(metrics::to_json(c));
  j["epoch_validations"] = nlohmann::json::array();
  for (const auto& v : t.epoch_validations)
    j["epoch_validations"].push_back({{"prompt_id", v.prompt_id}, {"scores", metrics::to_json(v.card)}});
  j["final"] = t.final ? to_json(*t.final) : nlohmann::json(nullptr);
  j["validation"] = t.validation ? metrics::to_json(*t.validation) : nlohmann::json(nullptr);
  return j;
}

OptimizationTrace trace_from_json(const nlohmann::json& j) {
  OptimizationTrace t;
  try {
    t.section = SectionId(j.at("section").get<std::string>());
    t.status = j.at("status").get<std::string>();
    t.error = j.value("error", "");
    t.repairs = j.value("repairs", std::size_t{0});
    for (const auto& p : j.at("lineage")) t.lineage.push_back(prompt_state_from_json(p));
    for (const auto& g : j.at("gradients"))
      t.gradients.push_back({g.at("reasons").get<std::string>(), g.at("suggestions").get<std::string>(),
                             g.at("source_record").get<std::string>(), g.at("prompt_before").get<std::string>()});
    for (const auto& c : j.at("per_iteration_scores")) t.per_iteration_scores.push_back(metrics::score_card_from_json(c));
    for (const auto& v : j.at("epoch_validations"))
      t.epoch_validations.push_back({v.at("prompt_id").get<std::string>(), metrics::score_card_from_json(v.at("scores"))});
    if (!j.at("final").is_null()) t.final = prompt_state_from_json(j["final"]);
    if (!j.at("validation").is_null()) t.validation = metrics::score_card_from_json(j["validation"]);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed trace: ") + e.what());
  }
  return t;
}

// ------------------------------------------------------------------ engine

Engine::Engine(llm::Gateway& gateway, prompts::TemplateSet templates, const metrics::MetricSuite& metrics,
               OptimizerConfig config)
    : gateway_(gateway), templates_(std::move(templates)), metrics_(metrics), config_(std::move(config)) {}

void Engine::log(std::string event) {
  std::lock_guard lk(events_mu_);
  events_.push_back(std::move(event));
}

std::vector<std::string> Engine::events() const {
  std::lock_guard lk(events_mu_);
  return events_;
}

std::size_t Engine::repairs() const {
  std::lock_guard lk(events_mu_);
  return repairs_;
}

prompts::StructuredReply Engine::ask(const llm::LlmRole& role, const std::string& prompt, prompts::ReplyKind kind,
                                     const std::string& context, bool self_consistent) {
  llm::ChatRequest req;
  req.model = role.model;
  req.temperature = config_.temperature;
  req.messages.push_back({llm::MessageRole::user, prompt});

  const prompts::ParseOptions opts{config_.strict_json};
  const std::string raw = self_consistent ? gateway_.complete_self_consistent(req, config_.self_consistency_runs).chosen.content
                                          : gateway_.complete(req).content;
  try {
    return prompts::parse_structured(raw, kind, opts);
  } catch (const Error& first) {
    {
      std::lock_guard lk(events_mu_);
      ++repairs_;
      events_.push_back("repair: " + context + ": " + first.what());
    }
    llm::ChatRequest retry = req;
    retry.messages.push_back({llm::MessageRole::assistant, raw});
    retry.messages.push_back({llm::MessageRole::user, std::string(prompts::kRepairNudge)});
    const std::string raw2 = gateway_.complete(retry).content;
    try {
      return prompts::parse_structured(raw2, kind, opts);
    } catch (const Error& second) {
      std::string key;
      if (auto* s = dynamic_cast<const SchemaError*>(&second)) key = s->key();
      if (auto* c = dynamic_cast<const CoercionError*>(&second)) key = c->key();
      throw IterationError(context + ": unreadable " + std::string(prompts::to_string(kind)) +
                               " reply after repair: " + second.what(),
                           raw2, key);
    }
  }
}

std::string Engine::forward(const PromptState& prompt, const DialogueRecord& record, const llm::LlmRole& mentee) {
  if (record.section != prompt.section)
    throw PreconditionError("record " + record.id + " belongs to section " + record.section.name() +
                            ", prompt is for " + prompt.section.name());
  const auto text = prompts::render_forward(templates_, prompt.text, prompt.section.name(), record.dialogue);
  return ask(mentee, text, prompts::ReplyKind::summary, "forward " + record.id + " with " + prompt.id,
             config_.self_consistency_in_training)
      .at("summary");
}

GradientFeedback Engine::gradient_step(const PromptState& prompt, const DialogueRecord& record,
                                       const std::string& generated, const llm::LlmRole& critic) {
  if (generated.find_first_not_of(" \t\r\n") == std::string::npos)
    throw PreconditionError("backward pass needs a non-empty generated summary");
  const auto text = prompts::render_gradient(templates_, prompt.text, prompt.section.name(), record.dialogue,
                                             generated, record.reference_summary);
  const auto reply = ask(critic, text, prompts::ReplyKind::gradient, "gradient " + record.id + " for " + prompt.id, false);
  return GradientFeedback{reply.at("reasons"), reply.at("suggestions"), record.id, prompt.id};
}

PromptState Engine::update_step(const PromptState& prompt, std::span<const std::string> suggestions,
                                const llm::LlmRole& critic, int epoch) {
  const auto text = prompts::render_update(templates_, prompt.text, suggestions);
  const auto reply = ask(critic, text, prompts::ReplyKind::update, "update of " + prompt.id, false);
  PromptState child;
  child.section = prompt.section;
  child.text = reply.at("new instruction");
  child.origin = PromptOrigin::apo_iteration;
  child.parent = prompt.id;
  child.epoch = epoch;
  child.iteration = prompt.iteration + 1;
  child.id = prompt.section.slug() + "#" + std::to_string(child.iteration);
  child.mentor_label = prompt.mentor_label;
  return child;
}

std::pair<GradientFeedback, PromptState> Engine::backward(const PromptState& prompt, const DialogueRecord& record,
                                                          const std::string& generated, const llm::LlmRole& critic,
                                                          std::optional<int> epoch) {
  auto g = gradient_step(prompt, record, generated, critic);
  const std::vector<std::string> s{g.suggestions};
  auto child = update_step(prompt, s, critic, epoch.value_or(std::max(prompt.epoch, 1)));
  return {std::move(g), std::move(child)};
}

ScoreCard Engine::score_batch(const PromptState& prompt, std::span<const DialogueRecord> batch) {
  std::vector<ScoreCard> cards;
  for (const auto& rec : batch) cards.push_back(metrics_.score(forward(prompt, rec, config_.mentee), rec.reference_summary));
  return metrics::aggregate(cards);
}

std::string Engine::generate_for_evaluation(const PromptState& prompt, const DialogueRecord& record,
                                            const llm::LlmRole& mentee) {
  if (record.section != prompt.section)
    throw PreconditionError("record " + record.id + " belongs to section " + record.section.name() +
                            ", prompt is for " + prompt.section.name());
  const auto text = prompts::render_forward(templates_, prompt.text, prompt.section.name(), record.dialogue);
  return ask(mentee, text, prompts::ReplyKind::summary, "validate " + record.id + " with " + prompt.id,
             config_.self_consistency_runs > 1)
      .at("summary");
}

ScoreCard Engine::validate(const PromptState& prompt, std::span<const DialogueRecord> evaluation,
                           const llm::LlmRole& mentee) {
  if (evaluation.empty()) throw PreconditionError("validation set is empty; the aggregate is undefined");
  for (const auto& rec : evaluation)
    if (rec.section != prompt.section)
      throw PreconditionError("validation record " + rec.id + " is not in section " + prompt.section.name());
  std::vector<ScoreCard> cards;
  cards.reserve(evaluation.size());
  for (const auto& rec : evaluation) {
    try {
      cards.push_back(metrics_.score(generate_for_evaluation(prompt, rec, mentee), rec.reference_summary));
    } catch (const IterationError&) {
      throw;
    } catch (const Error& e) {
      throw Error("validation of record " + rec.id + " failed: " + e.what());
    }
  }
  return metrics::aggregate(cards);
}

OptimizationTrace Engine::optimize_section(const corpus::SectionSplit& split, const PromptState& p0,
                                           const Checkpoint& checkpoint) {
  if (p0.section != split.section)
    throw PreconditionError("initial prompt is for " + p0.section.name() + ", split is for " + split.section.name());
  config_.validate(split.training.size());
  for (const auto& rec : split.evaluation)
    for (const auto& tr : split.training)
      if (split.eval_excludes_training && rec.id == tr.id)
        throw PreconditionError("training record " + tr.id + " also appears in the evaluation set");

  OptimizationTrace trace;
  trace.section = split.section;
  trace.lineage.push_back(p0);
  const auto repairs_before = repairs();
  auto notify = [&] {
    trace.repairs = repairs() - repairs_before;
    if (checkpoint) checkpoint(trace);
  };

  try {
    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      std::vector<std::string> epoch_suggestions;
      for (int c = 1; c <= config_.iterations; ++c) {
        const PromptState current = trace.lineage.back();
        PromptState child;
        if (config_.mode == UpdateMode::per_instance) {
          const auto& rec = split.training[static_cast<std::size_t>(c - 1)];
          const auto generated = forward(current, rec, config_.mentee);
          auto g = gradient_step(current, rec, generated, config_.critic);
          epoch_suggestions.push_back(g.suggestions);
          trace.gradients.push_back(std::move(g));
          const std::vector<std::string> newest{epoch_suggestions.back()};
          child = update_step(current, config_.accumulate_suggestions ? epoch_suggestions : newest, config_.critic,
                              epoch);
        } else {
          std::vector<std::string> batch_suggestions;
          for (const auto& rec : split.training) {
            const auto generated = forward(current, rec, config_.mentee);
            auto g = gradient_step(current, rec, generated, config_.critic);
            batch_suggestions.push_back(g.suggestions);
            trace.gradients.push_back(std::move(g));
          }
          child = update_step(current, batch_suggestions, config_.critic, epoch);
        }
        trace.lineage.push_back(child);
        trace.per_iteration_scores.push_back(score_batch(child, split.training));
        notify();
      }
      if (config_.validate_every_epoch || config_.final_selection == FinalSelection::best_validation)
        trace.epoch_validations.push_back(
            {trace.lineage.back().id, validate(trace.lineage.back(), split.evaluation, config_.mentee)});
    }

    if (trace.epoch_validations.empty()) {
      trace.final = trace.lineage.back();
      trace.validation = validate(*trace.final, split.evaluation, config_.mentee);
    } else {
      std::vector<ScoreCard> cards;
      for (const auto& v : trace.epoch_validations) cards.push_back(v.card);
      const auto pick = select_final(cards, config_.final_selection);
      trace.final = *trace.find(trace.epoch_validations[pick].prompt_id);
      trace.validation = trace.epoch_validations[pick].card;
    }
    trace.status = "complete";
    notify();
  } catch (const Error& e) {
    trace.status = "aborted";
    trace.error = e.what();
    notify();
    throw;
  }
  return trace;
}

}  // namespace soapapo::apo

#include <chrono>

#include <gtest/gtest.h>

#include "soapapo/apo_engine.hpp"
#include "soapapo/errors.hpp"

using namespace soapapo;
using namespace soapapo::apo;
using corpus::DialogueRecord;
using corpus::SectionId;
using nlohmann::json;

namespace {

const SectionId kCC("CC");

DialogueRecord rec(std::string id, std::string ref, std::string dialogue = "Doctor: hi\nPatient: I have a cough.\n") {
  return {std::move(id), kCC, std::move(dialogue), std::move(ref)};
}

corpus::SectionSplit make_split(std::size_t n_train, std::size_t n_eval, const std::string& ref = "cough for a week") {
  corpus::SectionSplit s;
  s.section = kCC;
  for (std::size_t i = 0; i < n_train; ++i) s.training.push_back(rec("t" + std::to_string(i), ref));
  for (std::size_t i = 0; i < n_eval; ++i) s.evaluation.push_back(rec("e" + std::to_string(i), ref));
  s.train_sample_size = n_train;
  return s;
}

json rule(json needles, std::string reply) { return {{"when_contains", std::move(needles)}, {"reply", std::move(reply)}}; }

struct Harness {
  explicit Harness(json fallback, OptimizerConfig cfg = {})
      : backend(std::make_shared<llm::MockBackend>(json{{"fallback", std::move(fallback)}})),
        gateway(backend, std::make_shared<llm::ResponseCache>()),
        suite([] {
          auto lex = std::make_shared<metrics::ConceptLexicon>();
          lex->add("C1", "cough");
          return lex;
        }()),
        engine(gateway, prompts::TemplateSet::defaults(), suite, cfg) {}

  std::shared_ptr<llm::MockBackend> backend;
  llm::Gateway gateway;
  metrics::MetricSuite suite;
  Engine engine;
};

json standard_script() {
  return json::array({
      rule("Current AI summary:", R"({"reasons": "too verbose", "suggestions": "be concise"})"),
      rule("Suggestions from summary [1]:",
           R"({"final suggestion": "be concise", "new instruction": "Summarize concisely {{digest}}."})"),
      rule("Conversation snippet:", R"({"summary": "Cough for a week."})"),
  });
}

PromptState p0() { return initial_prompt(kCC, prompts::TemplateSet::defaults().initial_instruction); }

}  // namespace

TEST(InitialPrompt, IsRootOfLineage) {
  const auto p = p0();
  EXPECT_EQ(p.id, "CC#0");
  EXPECT_EQ(p.iteration, 0);
  EXPECT_EQ(p.epoch, 0);
  EXPECT_FALSE(p.parent);
  EXPECT_EQ(p.origin, PromptOrigin::generic);
}

TEST(Forward, ScriptedSummaryAndPrecondition) {
  Harness h(json::array({rule("Conversation snippet:", R"({"summary":"S1"})")}));
  EXPECT_EQ(h.engine.forward(p0(), rec("r", "x"), {llm::LlmRole::Kind::mentee, "m"}), "S1");
  DialogueRecord other = rec("o", "x");
  other.section = SectionId("GENHX");
  EXPECT_THROW(h.engine.forward(p0(), other, {llm::LlmRole::Kind::mentee, "m"}), PreconditionError);
}

TEST(Forward, MalformedReplyIsRepairedOnce) {
  Harness h(json::array({rule("Your previous reply could not be read", R"({"summary": "fixed"})"),
                         rule("Conversation snippet:", "I think the summary is: cough")}));
  EXPECT_EQ(h.engine.forward(p0(), rec("r", "x"), {llm::LlmRole::Kind::mentee, "m"}), "fixed");
  EXPECT_EQ(h.engine.repairs(), 1u);
  ASSERT_EQ(h.engine.events().size(), 1u);
  EXPECT_NE(h.engine.events()[0].find("repair"), std::string::npos);
  EXPECT_EQ(h.backend->calls(), 2u);
}

TEST(Forward, SecondFailureCarriesRawOutput) {
  Harness h(json::array({rule("Your previous reply could not be read", "still no dictionary"),
                         rule("Conversation snippet:", "no dictionary")}));
  try {
    h.engine.forward(p0(), rec("r", "x"), {llm::LlmRole::Kind::mentee, "m"});
    FAIL();
  } catch (const IterationError& e) {
    EXPECT_EQ(e.raw_output(), "still no dictionary");
    EXPECT_TRUE(e.key().empty());
  }
}

TEST(Backward, ScriptedGradientAndUpdate) {
  Harness h(json::array({
      rule("Current AI summary:", R"({"reasons":"too verbose","suggestions":"be concise"})"),
      rule("Suggestions from summary [1]:",
           R"({"final suggestion":"be concise","new instruction":"Summarize concisely."})"),
  }));
  const auto parent = p0();
  const auto [g, child] = h.engine.backward(parent, rec("r", "ref"), "A long summary.", {llm::LlmRole::Kind::critic, "c"});
  EXPECT_EQ(g.reasons, "too verbose");
  EXPECT_EQ(g.suggestions, "be concise");
  EXPECT_EQ(g.prompt_before, parent.id);
  EXPECT_EQ(child.text, "Summarize concisely.");
  EXPECT_EQ(child.parent, parent.id);
  EXPECT_EQ(child.iteration, parent.iteration + 1);
  EXPECT_EQ(child.origin, PromptOrigin::apo_iteration);
  EXPECT_EQ(child.id, "CC#1");
  EXPECT_THROW(h.engine.backward(parent, rec("r", "ref"), "  ", {llm::LlmRole::Kind::critic, "c"}), PreconditionError);
}

TEST(Backward, MissingSuggestionsAndEmptyInstructionNameTheKey) {
  Harness missing(json::array({rule("", R"({"reasons":"r"})")}));
  try {
    missing.engine.backward(p0(), rec("r", "ref"), "gen", {llm::LlmRole::Kind::critic, "c"});
    FAIL();
  } catch (const IterationError& e) {
    EXPECT_EQ(e.key(), "suggestions");
  }
  Harness empty(json::array({
      rule("Current AI summary:", R"({"reasons":"r","suggestions":"s"})"),
      rule("", R"({"final suggestion":"f","new instruction":""})"),
  }));
  try {
    empty.engine.backward(p0(), rec("r", "ref"), "gen", {llm::LlmRole::Kind::critic, "c"});
    FAIL();
  } catch (const IterationError& e) {
    EXPECT_EQ(e.key(), "new instruction");
  }
}

TEST(Validate, MeansAndErrors) {
  // two records whose outputs score R1 0.2 and 0.4 against a ten-token reference
  const std::string ref = "t1 t2 t3 t4 t5 t6 t7 t8 t9 t10";
  Harness h(json::array({rule("Patient: one", R"({"summary": "t1 t2 x x x x x x x x"})"),
                         rule("Patient: two", R"({"summary": "t1 t2 t3 t4 x x x x x x"})")}));
  const std::vector<DialogueRecord> eval{rec("a", ref, "Patient: one\n"), rec("b", ref, "Patient: two\n")};
  const llm::LlmRole mentee{llm::LlmRole::Kind::mentee, "m"};
  EXPECT_NEAR(h.engine.validate(p0(), eval, mentee).rouge1.f1, 0.3, 1e-12);
  EXPECT_THROW(h.engine.validate(p0(), std::vector<DialogueRecord>{}, mentee), PreconditionError);

  Harness same(json::array({rule("", R"({"summary": "cough for a week"})")}));
  const auto card = same.engine.validate(p0(), std::vector<DialogueRecord>{rec("a", "cough for a week")}, mentee);
  EXPECT_DOUBLE_EQ(card.rouge1.f1, 1.0);
  EXPECT_DOUBLE_EQ(card.rouge2.f1, 1.0);
  EXPECT_DOUBLE_EQ(card.rougeL.f1, 1.0);
}

TEST(OptimizeProperty, LineageLawHoldsForAllSmallSchedules) {
  const auto start = std::chrono::steady_clock::now();
  for (int j = 1; j <= 4; ++j)
    for (int k = 1; k <= 3; ++k) {
      OptimizerConfig cfg;
      cfg.iterations = j;
      cfg.epochs = k;
      Harness h(standard_script(), cfg);
      const auto trace = h.engine.optimize_section(make_split(5, 4), p0());
      ASSERT_EQ(trace.lineage.size(), static_cast<std::size_t>(1 + k * j)) << j << "x" << k;
      ASSERT_TRUE(trace.final);
      ASSERT_NE(trace.find(trace.final->id), nullptr);
      ASSERT_EQ(trace.status, "complete");
      ASSERT_EQ(trace.gradients.size(), static_cast<std::size_t>(k * j));
      for (std::size_t i = 0; i < trace.gradients.size(); ++i)
        ASSERT_EQ(trace.gradients[i].prompt_before, trace.lineage[i].id);
      for (std::size_t i = 1; i < trace.lineage.size(); ++i) {
        ASSERT_EQ(trace.lineage[i].parent, trace.lineage[i - 1].id);
        ASSERT_EQ(trace.lineage[i].iteration, static_cast<int>(i));
        ASSERT_EQ(trace.lineage[i].epoch, static_cast<int>((i - 1) / static_cast<std::size_t>(j)) + 1);
      }
      ASSERT_EQ(trace.epoch_validations.size(), static_cast<std::size_t>(k));
    }
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::seconds(5));
}

TEST(Optimize, AggregateModeCritiquesWholeBatch) {
  OptimizerConfig cfg;
  cfg.iterations = 2;
  cfg.epochs = 2;
  cfg.mode = UpdateMode::aggregate;
  Harness h(standard_script(), cfg);
  const auto trace = h.engine.optimize_section(make_split(3, 2), p0());
  EXPECT_EQ(trace.lineage.size(), 5u);
  EXPECT_EQ(trace.gradients.size(), 12u);
}

TEST(Optimize, IterationsBeyondBatchRejected) {
  OptimizerConfig cfg;
  cfg.iterations = 6;
  Harness h(standard_script(), cfg);
  try {
    h.engine.optimize_section(make_split(5, 2), p0());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "optimizer.iterations");
  }
}

TEST(Optimize, DeterministicTraces) {
  OptimizerConfig cfg;
  cfg.iterations = 3;
  cfg.epochs = 2;
  Harness a(standard_script(), cfg), b(standard_script(), cfg);
  const auto ta = a.engine.optimize_section(make_split(5, 3), p0());
  const auto tb = b.engine.optimize_section(make_split(5, 3), p0());
  EXPECT_EQ(to_json(ta).dump(), to_json(tb).dump());
  EXPECT_EQ(to_json(trace_from_json(to_json(ta))).dump(), to_json(ta).dump());
}

TEST(Optimize, TrainingRecordInEvaluationIsRejected) {
  Harness h(standard_script());
  auto split = make_split(5, 2);
  split.evaluation.push_back(split.training[0]);
  EXPECT_THROW(h.engine.optimize_section(split, p0()), PreconditionError);
  EXPECT_THROW(h.engine.optimize_section(make_split(5, 2), initial_prompt(SectionId("GENHX"), "x")), PreconditionError);
}

TEST(SelectFinal, BestValidationPicksArgmaxEarliestOnTies) {
  std::vector<metrics::ScoreCard> cards(3);
  cards[0].rouge1.f1 = 0.2;
  cards[1].rouge1.f1 = 0.5;
  cards[2].rouge1.f1 = 0.4;
  EXPECT_EQ(select_final(cards, FinalSelection::best_validation), 1u);
  EXPECT_EQ(select_final(cards, FinalSelection::last), 2u);
  cards[2].rouge1.f1 = 0.5;
  EXPECT_EQ(select_final(cards, FinalSelection::best_validation), 1u);
}

namespace {

// Epoch e rewrites INSTR-(e-1) into INSTR-e; the evaluation outputs under INSTR-1..3
// score R1 = 0.2, 0.5 and 0.4 against the ten-token reference.
json epoch_script() {
  json rules = json::array({rule("Current AI summary:", R"({"reasons": "r", "suggestions": "s"})")});
  for (int e = 1; e <= 3; ++e)
    rules.push_back(rule(json::array({"Suggestions from summary [1]:", "INSTR-" + std::to_string(e - 1)}),
                         R"({"final suggestion": "f", "new instruction": "INSTR-)" + std::to_string(e) + "\"}"));
  rules.push_back(rule(json::array({"Conversation snippet:", "INSTR-0"}), R"({"summary": "x"})"));
  rules.push_back(rule(json::array({"Conversation snippet:", "INSTR-1"}), R"({"summary": "t1 t2 x x x x x x x x"})"));
  rules.push_back(rule(json::array({"Conversation snippet:", "INSTR-2"}), R"({"summary": "t1 t2 t3 t4 t5 x x x x x"})"));
  rules.push_back(rule(json::array({"Conversation snippet:", "INSTR-3"}), R"({"summary": "t1 t2 t3 t4 x x x x x x"})"));
  return rules;
}

}  // namespace

TEST(Optimize, BestValidationSelectsTheMiddleEpoch) {
  OptimizerConfig cfg;
  cfg.iterations = 1;
  cfg.epochs = 3;
  cfg.final_selection = FinalSelection::best_validation;
  Harness h(epoch_script(), cfg);
  const auto trace =
      h.engine.optimize_section(make_split(5, 3, "t1 t2 t3 t4 t5 t6 t7 t8 t9 t10"), initial_prompt(kCC, "INSTR-0"));
  ASSERT_EQ(trace.epoch_validations.size(), 3u);
  EXPECT_NEAR(trace.epoch_validations[0].card.rouge1.f1, 0.2, 1e-12);
  EXPECT_NEAR(trace.epoch_validations[1].card.rouge1.f1, 0.5, 1e-12);
  EXPECT_NEAR(trace.epoch_validations[2].card.rouge1.f1, 0.4, 1e-12);
  EXPECT_EQ(trace.final->text, "INSTR-2");
  EXPECT_EQ(trace.final->id, "CC#2");
  EXPECT_NEAR(trace.validation->rouge1.f1, 0.5, 1e-12);

  cfg.final_selection = FinalSelection::last;
  Harness last(epoch_script(), cfg);
  const auto t2 =
      last.engine.optimize_section(make_split(5, 3, "t1 t2 t3 t4 t5 t6 t7 t8 t9 t10"), initial_prompt(kCC, "INSTR-0"));
  EXPECT_EQ(t2.final->text, "INSTR-3");
}

TEST(Optimize, FailureAbortsAndCheckpointsPartialTrace) {
  OptimizerConfig cfg;
  cfg.iterations = 2;
  cfg.epochs = 2;
  // the second update (of CC#1) never yields a dictionary
  json script = json::array({
      rule("Current AI summary:", R"({"reasons": "r", "suggestions": "s"})"),
      rule(json::array({"Suggestions from summary [1]:", "STEP-1"}), "no dictionary here"),
      rule("Your previous reply could not be read", "still nothing"),
      rule("Suggestions from summary [1]:", R"({"final suggestion": "f", "new instruction": "STEP-1"})"),
      rule("Conversation snippet:", R"({"summary": "cough"})"),
  });
  Harness h(script, cfg);
  std::vector<OptimizationTrace> seen;
  EXPECT_THROW(h.engine.optimize_section(make_split(5, 2), p0(), [&](const OptimizationTrace& t) { seen.push_back(t); }),
               IterationError);
  ASSERT_FALSE(seen.empty());
  EXPECT_EQ(seen.back().status, "aborted");
  EXPECT_EQ(seen.back().lineage.size(), 2u);
  EXPECT_NE(seen.back().error.find("after repair"), std::string::npos);
  EXPECT_EQ(seen.back().repairs, 1u);
}

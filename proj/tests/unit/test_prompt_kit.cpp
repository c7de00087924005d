#include <random>

#include <gtest/gtest.h>

#include "../support/structured_corpus.hpp"
#include "../support/test_support.hpp"
#include "soapapo/errors.hpp"
#include "soapapo/prompt_kit.hpp"

using namespace soapapo;
using namespace soapapo::prompts;

namespace {
const TemplateSet& defaults() {
  static const TemplateSet set = TemplateSet::defaults();
  return set;
}
bool contains(const std::string& hay, std::string_view needle) { return hay.find(needle) != std::string::npos; }
}  // namespace

TEST(Templates, DefaultsMatchAssetFiles) {
  const auto dir = testing_support::source_dir() / "assets" / "templates";
  const auto from_disk = TemplateSet::load_dir(dir);
  EXPECT_EQ(from_disk.checksums(), defaults().checksums());
  EXPECT_EQ(defaults().initial_instruction.back(), '.');
}

TEST(Templates, SlotValidation) {
  EXPECT_THROW(PromptTemplate(TemplateKind::forward_wrapper, "{{instruction}} {{section}}"), TemplateError);
  EXPECT_THROW(PromptTemplate(TemplateKind::update, "{{instruction}} {{suggestions}} {{extra}}"), TemplateError);
  EXPECT_NO_THROW(PromptTemplate(TemplateKind::update, "{{instruction}}\n{{suggestions}}"));
}

TEST(RenderForward, ContainsInputsAndContract) {
  const auto out = render_forward(defaults(), defaults().initial_instruction, "CC", "Doctor: hello\nPatient: hi");
  EXPECT_TRUE(contains(out, defaults().initial_instruction));
  EXPECT_TRUE(contains(out, "\nCC\n"));
  EXPECT_TRUE(contains(out, "Doctor: hello\nPatient: hi"));
  EXPECT_TRUE(contains(out, "{\"summary\": ...}"));
  EXPECT_THROW(render_forward(defaults(), "x", "CC", ""), RenderError);
  EXPECT_EQ(out, render_forward(defaults(), defaults().initial_instruction, "CC", "Doctor: hello\nPatient: hi"));
}

TEST(RenderForward, BracesInValuesSurviveVerbatim) {
  const auto out = render_forward(defaults(), "Keep {{section}} and {x} as typed", "CC", "Patient: {{dialogue}}");
  EXPECT_TRUE(contains(out, "Keep {{section}} and {x} as typed"));
  EXPECT_TRUE(contains(out, "Patient: {{dialogue}}"));
}

TEST(RenderGradient, BlocksAndRequirements) {
  const auto out = render_gradient(defaults(), "instr", "CC", "dlg", "AI SUMMARY TEXT", "REF TEXT");
  EXPECT_TRUE(contains(out, "Current AI summary:\nAI SUMMARY TEXT\n"));
  EXPECT_TRUE(contains(out, "Reference summary:\nREF TEXT\n"));
  EXPECT_TRUE(contains(out, "don't try to add any examples"));
  EXPECT_TRUE(contains(out, "{\"reasons\": ..., \"suggestions\": ...}"));
  try {
    render_gradient(defaults(), "instr", "CC", "dlg", "ai", "");
    FAIL();
  } catch (const RenderError& e) {
    EXPECT_EQ(e.slot(), "reference_summary");
  }
}

TEST(RenderUpdate, NumberedBlocksInOrder) {
  const std::vector<std::string> one{"be concise"};
  const auto a = render_update(defaults(), "instr", one);
  EXPECT_TRUE(contains(a, "Suggestions from summary [1]:\nbe concise"));
  EXPECT_FALSE(contains(a, "[2]"));

  const std::vector<std::string> three{"first", "second", "third"};
  const auto b = render_update(defaults(), "instr", three);
  const auto p1 = b.find("[1]:\nfirst"), p2 = b.find("[2]:\nsecond"), p3 = b.find("[3]:\nthird");
  ASSERT_NE(p1, std::string::npos);
  ASSERT_NE(p2, std::string::npos);
  ASSERT_NE(p3, std::string::npos);
  EXPECT_LT(p1, p2);
  EXPECT_LT(p2, p3);
  EXPECT_TRUE(contains(b, "{\"final suggestion\": ..., \"new instruction\": ...}"));
  EXPECT_THROW(render_update(defaults(), "instr", std::vector<std::string>{}), RenderError);
}

TEST(ParseStructured, SpecExamples) {
  EXPECT_EQ(parse_structured("{\"summary\":\"Chest pain x2 days.\"}", ReplyKind::summary).at("summary"),
            "Chest pain x2 days.");
  const auto g = parse_structured("Sure! ```json\n{\"reasons\":\"r\",\"suggestions\":\"s\"}\n```", ReplyKind::gradient);
  EXPECT_EQ(g.at("reasons"), "r");
  EXPECT_EQ(g.at("suggestions"), "s");
  try {
    parse_structured("{\"reasons\":\"r\"}", ReplyKind::gradient);
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.key(), "suggestions");
  }
}

TEST(ParseStructured, GoldenCorpus) {
  const auto result = testing_support::run_structured_corpus(testing_support::data_dir() / "structured_corpus.json");
  EXPECT_EQ(result.cases, 50u);
  for (const auto& f : result.failures) ADD_FAILURE() << f;
}

namespace {

std::string random_text(std::mt19937_64& gen, bool allow_braces) {
  // whole code points, so the text stays valid UTF-8
  std::vector<std::string> pool{"a", "b", "c", " ", "X", "Y", "Z", ".", ",", ":", ";", "'", "\"", "\\", "\n", "\t", "-", "\xc3\xa9"};
  if (allow_braces) {
    pool.emplace_back("{");
    pool.emplace_back("}");
  }
  std::uniform_int_distribution<std::size_t> len(1, 24);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::string s;
  for (std::size_t i = 0, n = len(gen); i < n; ++i) s += pool[pick(gen)];
  // the contract trims values, so keep them non-blank and without edge whitespace
  return "v" + s + "v";
}

}  // namespace

TEST(ParseStructuredProperty, DictRoundTrip) {
  std::mt19937_64 gen(17);
  for (int i = 0; i < 500; ++i) {
    StructuredReply r;
    r.kind = static_cast<ReplyKind>(i % 3);
    for (auto k : required_keys(r.kind)) r.fields[std::string(k)] = random_text(gen, true);
    const auto back = parse_structured(r.to_dict_text(), r.kind);
    ASSERT_EQ(back.fields, r.fields) << r.to_dict_text();
    const auto strict = parse_structured(r.to_dict_text(), r.kind, {true});
    ASSERT_EQ(strict.fields, r.fields);
  }
}

TEST(ParseStructuredProperty, RecoversDictFromProse) {
  std::mt19937_64 gen(29);
  for (int i = 0; i < 500; ++i) {
    StructuredReply r;
    r.kind = ReplyKind::gradient;
    r.fields["reasons"] = random_text(gen, true);
    r.fields["suggestions"] = random_text(gen, true);
    // prose without braces on either side, optionally fenced
    const auto before = random_text(gen, false), after = random_text(gen, false);
    const bool fence = i % 2;
    const auto text = before + (fence ? "\n```json\n" : " ") + r.to_dict_text() + (fence ? "\n```\n" : " ") + after;
    const auto back = parse_structured(text, r.kind);
    ASSERT_EQ(back.fields, r.fields) << text;
  }
}

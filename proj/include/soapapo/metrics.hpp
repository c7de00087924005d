#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace soapapo::metrics {

/// Lowercased tokens, split on every run of non-alphanumeric ASCII. Bytes >= 0x80
/// count as word characters so UTF-8 words stay whole.
struct TokenSeq {
  std::vector<std::string> tokens;
  std::string source;

  static TokenSeq from_text(std::string_view text);
  static TokenSeq from_tokens(std::vector<std::string> tokens);
  std::size_t size() const noexcept { return tokens.size(); }
  bool empty() const noexcept { return tokens.empty(); }
};

std::vector<std::string> tokenize(std::string_view text);

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  static PRF from_counts(double matches, double candidate_total, double reference_total);
  static PRF from_pr(double p, double r);
};

struct ScoreCard {
  PRF rouge1, rouge2, rougeL, meteor, concepts;
  std::size_t n_examples = 0;
};

nlohmann::json to_json(const ScoreCard& card);
ScoreCard score_card_from_json(const nlohmann::json& j);

PRF rouge_n(const TokenSeq& candidate, const TokenSeq& reference, int n);
PRF rouge_l(const TokenSeq& candidate, const TokenSeq& reference);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Porter (1980) suffix stripper, applied to lowercase ASCII words.
std::string porter_stem(std::string_view word);

struct MeteorBreakdown {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f_mean = 0.0;
  double penalty = 0.0;
  double score = 0.0;
};

/// METEOR with exact and Porter-stem stages only (no synonyms). alpha 0.9, beta 3, gamma 0.5.
MeteorBreakdown meteor_breakdown(const TokenSeq& candidate, const TokenSeq& reference);
double meteor_lite(const TokenSeq& candidate, const TokenSeq& reference);

/// Exact-match concept dictionary. Surface forms are stored tokenized.
class ConceptLexicon {
 public:
  ConceptLexicon();
  ~ConceptLexicon();
  ConceptLexicon(ConceptLexicon&&) noexcept;
  ConceptLexicon& operator=(ConceptLexicon&&) noexcept;

  /// `concept_id<TAB>surface form` per line; '#' comments and blank lines skipped.
  static ConceptLexicon load(const std::filesystem::path& path);
  static ConceptLexicon parse(std::string_view text);

  void add(const std::string& concept_id, std::string_view surface_form);

  bool empty() const noexcept;
  std::size_t concept_count() const noexcept;

  /// Greedy leftmost-longest scan; tokens inside a consumed span are not re-scanned.
  std::set<std::string> extract(const TokenSeq& text) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::set<std::string> extract_concepts(const TokenSeq& text, const ConceptLexicon& lexicon);
/// Set-level P/R/F1; two empty concept sets count as perfect agreement.
PRF concept_f1(const TokenSeq& candidate, const TokenSeq& reference, const ConceptLexicon& lexicon);

/// Mean of every field. With weights, a weighted mean (weights must be positive and
/// match the card count). n_examples of the result is the sum of the inputs'.
ScoreCard aggregate(std::span<const ScoreCard> cards, std::optional<std::span<const double>> weights = std::nullopt);

/// All five metrics for one candidate/reference pair.
class MetricSuite {
 public:
  explicit MetricSuite(std::shared_ptr<const ConceptLexicon> lexicon);
  ScoreCard score(std::string_view candidate, std::string_view reference) const;
  const ConceptLexicon& lexicon() const { return *lexicon_; }

 private:
  std::shared_ptr<const ConceptLexicon> lexicon_;
};

}  // namespace soapapo::metrics

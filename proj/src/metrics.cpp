#include "soapapo/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"

namespace soapapo::metrics {

namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

double safe_div(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenSeq TokenSeq::from_text(std::string_view text) { return TokenSeq{tokenize(text), std::string(text)}; }

TokenSeq TokenSeq::from_tokens(std::vector<std::string> tokens) {
  TokenSeq t;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) t.source.push_back(' ');
    t.source += tokens[i];
  }
  t.tokens = std::move(tokens);
  return t;
}

PRF PRF::from_pr(double p, double r) {
  PRF out{p, r, 0.0};
  if (p + r > 0.0) out.f1 = 2.0 * p * r / (p + r);
  return out;
}

PRF PRF::from_counts(double matches, double candidate_total, double reference_total) {
  return from_pr(safe_div(matches, candidate_total), safe_div(matches, reference_total));
}

// ---------------------------------------------------------------- ROUGE

PRF rouge_n(const TokenSeq& candidate, const TokenSeq& reference, int n) {
  if (n < 1) throw Error("rouge_n requires n >= 1");
  const auto un = static_cast<std::size_t>(n);
  auto grams = [un](const std::vector<std::string>& toks) {
    std::map<std::string, std::size_t> counts;
    if (toks.size() < un) return counts;
    for (std::size_t i = 0; i + un <= toks.size(); ++i) {
      std::string key;
      for (std::size_t k = 0; k < un; ++k) {
        if (k) key.push_back('\x1f');
        key += toks[i + k];
      }
      ++counts[key];
    }
    return counts;
  };
  const auto cand = grams(candidate.tokens);
  const auto ref = grams(reference.tokens);
  std::size_t matches = 0;
  for (const auto& [g, c] : cand) {
    auto it = ref.find(g);
    if (it != ref.end()) matches += std::min(c, it->second);
  }
  const auto total = [](const std::map<std::string, std::size_t>& m) {
    std::size_t s = 0;
    for (const auto& [_, c] : m) s += c;
    return s;
  };
  return PRF::from_counts(static_cast<double>(matches), static_cast<double>(total(cand)),
                          static_cast<double>(total(ref)));
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

PRF rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
  const auto l = lcs_length(candidate.tokens, reference.tokens);
  return PRF::from_counts(static_cast<double>(l), static_cast<double>(candidate.size()),
                          static_cast<double>(reference.size()));
}

// ---------------------------------------------------------------- METEOR

MeteorBreakdown meteor_breakdown(const TokenSeq& candidate, const TokenSeq& reference) {
  MeteorBreakdown out;
  const auto& c = candidate.tokens;
  const auto& r = reference.tokens;
  if (c.empty() || r.empty()) return out;

  // cand position -> ref position, or npos
  constexpr auto npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> align(c.size(), npos);
  std::vector<bool> ref_used(r.size(), false);

  auto stage = [&](auto&& form) {
    std::vector<std::string> rf(r.size());
    for (std::size_t j = 0; j < r.size(); ++j)
      if (!ref_used[j]) rf[j] = form(r[j]);
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (align[i] != npos) continue;
      const auto cf = form(c[i]);
      for (std::size_t j = 0; j < r.size(); ++j) {
        if (!ref_used[j] && rf[j] == cf) {
          align[i] = j;
          ref_used[j] = true;
          break;
        }
      }
    }
  };
  stage([](const std::string& t) { return t; });
  stage([](const std::string& t) { return porter_stem(t); });

  std::size_t prev_c = npos, prev_r = npos;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (align[i] == npos) continue;
    ++out.matches;
    const bool continues = prev_c != npos && i == prev_c + 1 && align[i] == prev_r + 1;
    if (!continues) ++out.chunks;
    prev_c = i;
    prev_r = align[i];
  }
  if (out.matches == 0) return out;

  const double m = static_cast<double>(out.matches);
  out.precision = m / static_cast<double>(c.size());
  out.recall = m / static_cast<double>(r.size());
  out.f_mean = 10.0 * out.precision * out.recall / (out.recall + 9.0 * out.precision);
  out.penalty = 0.5 * std::pow(static_cast<double>(out.chunks) / m, 3.0);
  out.score = out.f_mean * (1.0 - out.penalty);
  return out;
}

double meteor_lite(const TokenSeq& candidate, const TokenSeq& reference) {
  return meteor_breakdown(candidate, reference).score;
}

// ---------------------------------------------------------------- concepts

struct ConceptLexicon::Impl {
  struct Node {
    std::unordered_map<std::string, std::size_t> next;
    std::optional<std::size_t> concept_index;
  };
  std::vector<Node> nodes{Node{}};
  std::vector<std::string> ids;
  std::unordered_map<std::string, std::size_t> id_index;
  std::size_t surface_forms = 0;
};

ConceptLexicon::ConceptLexicon() : impl_(std::make_unique<Impl>()) {}
ConceptLexicon::~ConceptLexicon() = default;
ConceptLexicon::ConceptLexicon(ConceptLexicon&&) noexcept = default;
ConceptLexicon& ConceptLexicon::operator=(ConceptLexicon&&) noexcept = default;

void ConceptLexicon::add(const std::string& concept_id, std::string_view surface_form) {
  if (concept_id.empty()) throw Error("concept id must not be empty");
  const auto toks = tokenize(surface_form);
  if (toks.empty()) throw Error("concept " + concept_id + " has an empty surface form");
  auto [it, inserted] = impl_->id_index.emplace(concept_id, impl_->ids.size());
  if (inserted) impl_->ids.push_back(concept_id);
  std::size_t node = 0;
  for (const auto& t : toks) {
    auto found = impl_->nodes[node].next.find(t);
    if (found == impl_->nodes[node].next.end()) {
      impl_->nodes.push_back({});
      const auto created = impl_->nodes.size() - 1;
      impl_->nodes[node].next.emplace(t, created);
      node = created;
    } else {
      node = found->second;
    }
  }
  // first registration of a surface form wins
  if (!impl_->nodes[node].concept_index) impl_->nodes[node].concept_index = it->second;
  ++impl_->surface_forms;
}

ConceptLexicon ConceptLexicon::parse(std::string_view text) {
  ConceptLexicon lex;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos)
      throw Error("lexicon line " + std::to_string(line_no) + ": expected concept_id<TAB>surface form");
    lex.add(std::string(line.substr(0, tab)), line.substr(tab + 1));
  }
  return lex;
}

ConceptLexicon ConceptLexicon::load(const std::filesystem::path& path) { return parse(read_file(path)); }

bool ConceptLexicon::empty() const noexcept { return impl_->ids.empty(); }
std::size_t ConceptLexicon::concept_count() const noexcept { return impl_->ids.size(); }

std::set<std::string> ConceptLexicon::extract(const TokenSeq& text) const {
  if (empty()) throw Error("concept lexicon is empty");
  std::set<std::string> found;
  const auto& toks = text.tokens;
  std::size_t i = 0;
  while (i < toks.size()) {
    std::size_t node = 0;
    std::size_t best_len = 0;
    std::optional<std::size_t> best;
    for (std::size_t k = i; k < toks.size(); ++k) {
      auto it = impl_->nodes[node].next.find(toks[k]);
      if (it == impl_->nodes[node].next.end()) break;
      node = it->second;
      if (impl_->nodes[node].concept_index) {
        best = impl_->nodes[node].concept_index;
        best_len = k - i + 1;
      }
    }
    if (best) {
      found.insert(impl_->ids[*best]);
      i += best_len;
    } else {
      ++i;
    }
  }
  return found;
}

std::set<std::string> extract_concepts(const TokenSeq& text, const ConceptLexicon& lexicon) {
  return lexicon.extract(text);
}

PRF concept_f1(const TokenSeq& candidate, const TokenSeq& reference, const ConceptLexicon& lexicon) {
  const auto c = lexicon.extract(candidate);
  const auto r = lexicon.extract(reference);
  if (c.empty() && r.empty()) return PRF{1.0, 1.0, 1.0};
  std::vector<std::string> common;
  std::set_intersection(c.begin(), c.end(), r.begin(), r.end(), std::back_inserter(common));
  return PRF::from_counts(static_cast<double>(common.size()), static_cast<double>(c.size()),
                          static_cast<double>(r.size()));
}

// ---------------------------------------------------------------- aggregation

ScoreCard aggregate(std::span<const ScoreCard> cards, std::optional<std::span<const double>> weights) {
  if (cards.empty()) throw Error("cannot aggregate an empty list of score cards");
  if (weights && weights->size() != cards.size()) throw Error("aggregate: weight count does not match card count");
  double wsum = 0.0;
  ScoreCard out;
  auto acc = [](PRF& dst, const PRF& src, double w) {
    dst.precision += w * src.precision;
    dst.recall += w * src.recall;
    dst.f1 += w * src.f1;
  };
  for (std::size_t i = 0; i < cards.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    if (!(w > 0.0)) throw Error("aggregate: weights must be positive");
    wsum += w;
    acc(out.rouge1, cards[i].rouge1, w);
    acc(out.rouge2, cards[i].rouge2, w);
    acc(out.rougeL, cards[i].rougeL, w);
    acc(out.meteor, cards[i].meteor, w);
    acc(out.concepts, cards[i].concepts, w);
    out.n_examples += cards[i].n_examples;
  }
  for (PRF* p : {&out.rouge1, &out.rouge2, &out.rougeL, &out.meteor, &out.concepts}) {
    p->precision /= wsum;
    p->recall /= wsum;
    p->f1 /= wsum;
  }
  return out;
}

// ---------------------------------------------------------------- json

namespace {

nlohmann::json prf_json(const PRF& p) { return {{"p", p.precision}, {"r", p.recall}, {"f1", p.f1}}; }
PRF prf_from(const nlohmann::json& j) { return PRF{j.at("p").get<double>(), j.at("r").get<double>(), j.at("f1").get<double>()}; }

}  // namespace

nlohmann::json to_json(const ScoreCard& card) {
  return {{"rouge1", prf_json(card.rouge1)}, {"rouge2", prf_json(card.rouge2)}, {"rougeL", prf_json(card.rougeL)},
          {"meteor", prf_json(card.meteor)}, {"concept_f1", prf_json(card.concepts)}, {"n_examples", card.n_examples}};
}

ScoreCard score_card_from_json(const nlohmann::json& j) {
  ScoreCard c;
  c.rouge1 = prf_from(j.at("rouge1"));
  c.rouge2 = prf_from(j.at("rouge2"));
  c.rougeL = prf_from(j.at("rougeL"));
  c.meteor = prf_from(j.at("meteor"));
  c.concepts = prf_from(j.at("concept_f1"));
  c.n_examples = j.at("n_examples").get<std::size_t>();
  return c;
}

// ---------------------------------------------------------------- suite

MetricSuite::MetricSuite(std::shared_ptr<const ConceptLexicon> lexicon) : lexicon_(std::move(lexicon)) {
  if (!lexicon_ || lexicon_->empty()) throw Error("metric suite needs a non-empty concept lexicon");
}

ScoreCard MetricSuite::score(std::string_view candidate, std::string_view reference) const {
  const auto c = TokenSeq::from_text(candidate);
  const auto r = TokenSeq::from_text(reference);
  ScoreCard card;
  card.rouge1 = rouge_n(c, r, 1);
  card.rouge2 = rouge_n(c, r, 2);
  card.rougeL = rouge_l(c, r);
  const auto m = meteor_breakdown(c, r);
  card.meteor = PRF{m.precision, m.recall, m.score};
  card.concepts = concept_f1(c, r, *lexicon_);
  card.n_examples = 1;
  return card;
}

}  // namespace soapapo::metrics

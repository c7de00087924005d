#include "soapapo/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"

namespace soapapo::experiment {

namespace fs = std::filesystem;
using corpus::SectionId;
using metrics::ScoreCard;

PromptGroup prompt_group_from_json(const nlohmann::json& j) {
  PromptGroup g;
  try {
    g.label = j.at("label").get<std::string>();
    if (g.label.empty()) throw ConfigError("label", "prompt set label must not be empty");
    for (const auto& [section, text] : j.at("prompts").items()) {
      const SectionId s(section);
      if (!text.is_string() || text.get<std::string>().empty())
        throw ConfigError(section, "prompt for section " + s.name() + " must be non-empty text");
      auto p = apo::initial_prompt(s, text.get<std::string>(),
                                   g.label == "Gen" ? apo::PromptOrigin::generic : apo::PromptOrigin::human_mentor,
                                   g.label);
      g.prompts.emplace(s, std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("prompts", std::string("malformed prompt set: ") + e.what());
  }
  return g;
}

PromptGroup load_prompt_group(const fs::path& path) {
  try {
    return prompt_group_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("prompts", "cannot parse prompt set " + path.string() + ": " + e.what());
  }
}

nlohmann::json to_json(const PromptGroup& group) {
  nlohmann::json prompts = nlohmann::json::object();
  for (const auto& [s, p] : group.prompts) prompts[s.name()] = p.text;
  return {{"label", group.label}, {"prompts", prompts}};
}

nlohmann::json to_json(const ScoreTable& table) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [s, c] : table.per_section) per[s.name()] = metrics::to_json(c);
  return {{"group", table.group}, {"mentee", table.mentee}, {"per_section", per}, {"overall", metrics::to_json(table.overall)}};
}

ScoreTable score_table_from_json(const nlohmann::json& j) {
  ScoreTable t;
  t.group = j.at("group").get<std::string>();
  t.mentee = j.at("mentee").get<std::string>();
  for (const auto& [s, c] : j.at("per_section").items()) t.per_section.emplace(SectionId(s), metrics::score_card_from_json(c));
  t.overall = metrics::score_card_from_json(j.at("overall"));
  return t;
}

ScoreCard overall_of(const std::map<SectionId, ScoreCard>& per_section) {
  std::vector<ScoreCard> cards;
  std::vector<double> weights;
  for (const auto& [_, c] : per_section) {
    cards.push_back(c);
    weights.push_back(static_cast<double>(c.n_examples));
  }
  return metrics::aggregate(cards, std::span<const double>(weights));
}

ScoreTable run_group(const PromptGroup& group, const llm::LlmRole& mentee, const EvaluationSets& eval,
                     apo::Engine& engine) {
  for (const auto& [s, _] : eval)
    if (!group.prompts.count(s))
      throw ConfigError(s.name(), "prompt set '" + group.label + "' has no prompt for section " + s.name());
  ScoreTable t;
  t.group = group.label;
  t.mentee = mentee.model;
  for (const auto& [s, recs] : eval) t.per_section[s] = engine.validate(group.prompts.at(s), recs, mentee);
  t.overall = overall_of(t.per_section);
  return t;
}

double metric_points(const ScoreCard& card, std::string_view metric) {
  if (metric == "R1") return card.rouge1.f1 * 100.0;
  if (metric == "R2") return card.rouge2.f1 * 100.0;
  if (metric == "RL") return card.rougeL.f1 * 100.0;
  if (metric == "M") return card.meteor.f1 * 100.0;
  if (metric == "U-f") return card.concepts.f1 * 100.0;
  throw Error("unknown metric: " + std::string(metric));
}

DeltaTable delta_table(const ScoreTable& baseline, std::span<const ScoreTable> others, std::string_view metric) {
  DeltaTable d;
  d.baseline = baseline.group;
  d.metric = std::string(metric);
  d.mentee = baseline.mentee;
  for (const auto& [s, _] : baseline.per_section) d.row_order.push_back(s.name());
  d.row_order.emplace_back(kOverallRow);
  for (const auto& [s, c] : baseline.per_section) d.baseline_points[s.name()] = metric_points(c, metric);
  d.baseline_points[std::string(kOverallRow)] = metric_points(baseline.overall, metric);

  for (const auto& other : others) {
    std::set<SectionId> a, b;
    for (const auto& [s, _] : baseline.per_section) a.insert(s);
    for (const auto& [s, _] : other.per_section) b.insert(s);
    if (a != b)
      throw Error("delta table: section sets of '" + baseline.group + "' and '" + other.group + "' differ");
    d.labels.push_back(other.group);
    for (const auto& [s, c] : other.per_section)
      d.rows[s.name()][other.group] = metric_points(c, metric) - d.baseline_points[s.name()];
    d.rows[std::string(kOverallRow)][other.group] =
        metric_points(other.overall, metric) - d.baseline_points[std::string(kOverallRow)];
  }
  return d;
}

namespace {

double round2(double v) {
  // nudge keeps values like 4.425 (stored as 4.42499..) rounding the way they print
  const double scaled = v * 100.0;
  const double nudged = scaled + (scaled >= 0 ? 1e-7 : -1e-7);
  return std::round(nudged) / 100.0;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s(buf);
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

}  // namespace

std::string format_points(double points) { return fixed2(round2(points)); }

std::string format_delta(double points) {
  const double r = round2(points);
  const auto s = fixed2(r);
  return r > 0 ? "+" + s : s;
}

std::string score_table_csv(const ScoreTable& table) {
  std::ostringstream out;
  out << "section";
  for (auto m : kMetricNames) out << ',' << m;
  out << '\n';
  auto row = [&](const std::string& name, const ScoreCard& c) {
    out << csv_cell(name);
    for (auto m : kMetricNames) out << ',' << format_points(metric_points(c, m));
    out << '\n';
  };
  for (const auto& [s, c] : table.per_section) row(s.name(), c);
  row(std::string(kOverallRow), table.overall);
  return out.str();
}

std::string delta_tables_csv(std::span<const DeltaTable> tables) {
  std::ostringstream out;
  for (std::size_t t = 0; t < tables.size(); ++t) {
    const auto& d = tables[t];
    if (t) out << '\n';
    out << "mentee,section," << csv_cell(d.baseline);
    for (const auto& l : d.labels) out << ',' << csv_cell(l);
    out << '\n';
    for (const auto& r : d.row_order) {
      out << csv_cell(d.mentee) << ',' << csv_cell(r) << ',' << format_points(d.baseline_points.at(r));
      for (const auto& l : d.labels) out << ',' << format_delta(d.rows.at(r).at(l));
      out << '\n';
    }
  }
  return out.str();
}

std::string file_token(std::string_view s) {
  std::string out;
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' ||
                    c == '-' || c == '_';
    out.push_back(ok ? c : '_');
  }
  return out;
}

namespace {

bool has_json(const fs::path& dir) {
  if (!fs::is_directory(dir)) return false;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") return true;
  return false;
}

std::vector<fs::path> sorted_json(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

ReportFiles emit_report(const fs::path& run_dir, const std::string& baseline_label) {
  std::vector<std::string> missing;
  if (!fs::exists(run_dir / "config.json")) missing.emplace_back("config.json");
  if (!fs::exists(run_dir / "dataset.json")) missing.emplace_back("dataset.json");
  if (!has_json(run_dir / "traces")) missing.emplace_back("traces/<section>.json");
  if (!has_json(run_dir / "scores")) missing.emplace_back("scores/<group>__<mentee>.json");

  std::vector<ScoreTable> tables;
  if (missing.empty()) {
    for (const auto& p : sorted_json(run_dir / "scores")) tables.push_back(score_table_from_json(nlohmann::json::parse(read_file(p))));
    const bool any_baseline =
        std::any_of(tables.begin(), tables.end(), [&](const ScoreTable& t) { return t.group == baseline_label; });
    if (!any_baseline) missing.push_back("scores/" + file_token(baseline_label) + "__<mentee>.json");
  }
  if (!missing.empty()) {
    std::string msg = "run directory " + run_dir.string() + " is incomplete; missing:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ReportError(msg);
  }

  // mentee -> label -> table
  std::map<std::string, std::map<std::string, const ScoreTable*>> by_mentee;
  for (const auto& t : tables) by_mentee[t.mentee][t.group] = &t;

  ReportFiles files;
  const auto report = run_dir / "report";
  fs::create_directories(report);
  auto emit = [&](const fs::path& p, const std::string& content) {
    write_file_atomic(p, content);
    files.written.push_back(p);
  };

  for (const auto& t : tables)
    emit(report / ("scores_" + file_token(t.group) + "_" + file_token(t.mentee) + ".csv"), score_table_csv(t));

  // metric -> per-mentee delta tables
  std::map<std::string, std::vector<DeltaTable>> deltas;
  for (const auto& [mentee, groups] : by_mentee) {
    auto base = groups.find(baseline_label);
    if (base == groups.end()) continue;
    std::vector<ScoreTable> others;
    for (const auto& [label, t] : groups)
      if (label != baseline_label) others.push_back(*t);
    for (auto m : kMetricNames) deltas[std::string(m)].push_back(delta_table(*base->second, others, m));
  }
  for (auto m : kMetricNames)
    emit(report / ("deltas_" + file_token(m) + ".csv"), delta_tables_csv(deltas[std::string(m)]));

  // bar data: overall delta per mentor, per mentee
  std::ostringstream impact;
  impact << "mentee,mentor";
  for (auto m : kMetricNames) impact << ',' << m;
  impact << '\n';
  for (const auto& [mentee, groups] : by_mentee) {
    auto base = groups.find(baseline_label);
    if (base == groups.end()) continue;
    for (const auto& [label, t] : groups) {
      if (label == baseline_label) continue;
      impact << csv_cell(mentee) << ',' << csv_cell(label);
      for (auto m : kMetricNames)
        impact << ',' << format_delta(metric_points(t->overall, m) - metric_points(base->second->overall, m));
      impact << '\n';
    }
  }
  emit(report / "mentor_impact.csv", impact.str());

  std::ostringstream md;
  md << "# Run report\n\n";
  md << "Scores are F1 x100. Overall rows are example-weighted across sections. Baseline: `" << baseline_label
     << "`.\n\n";
  for (const auto& [mentee, groups] : by_mentee) {
    md << "## X guides " << mentee << "\n\n| Mentor | n |";
    for (auto m : kMetricNames) md << ' ' << m << " |";
    md << "\n|---|---|";
    for (std::size_t i = 0; i < std::size(kMetricNames); ++i) md << "---|";
    md << '\n';
    for (const auto& [label, t] : groups) {
      md << "| " << label << " | " << t->overall.n_examples << " |";
      for (auto m : kMetricNames) md << ' ' << format_points(metric_points(t->overall, m)) << " |";
      md << '\n';
    }
    md << '\n';
    auto base = groups.find(baseline_label);
    if (base != groups.end() && groups.size() > 1) {
      md << "Mentor impact on " << mentee << " (overall delta vs " << baseline_label << "):\n\n| Mentor |";
      for (auto m : kMetricNames) md << ' ' << m << " |";
      md << "\n|---|";
      for (std::size_t i = 0; i < std::size(kMetricNames); ++i) md << "---|";
      md << '\n';
      for (const auto& [label, t] : groups) {
        if (label == baseline_label) continue;
        md << "| " << label << " |";
        for (auto m : kMetricNames)
          md << ' ' << format_delta(metric_points(t->overall, m) - metric_points(base->second->overall, m)) << " |";
        md << '\n';
      }
      md << '\n';
    }
  }

  // optimization outcome per section
  md << "## Optimization traces\n\n| Section | Status | Lineage | Final prompt | Validation R1 |\n|---|---|---|---|---|\n";
  for (const auto& p : sorted_json(run_dir / "traces")) {
    const auto t = apo::trace_from_json(nlohmann::json::parse(read_file(p)));
    md << "| " << t.section.name() << " | " << t.status << " | " << t.lineage.size() << " | "
       << (t.final ? t.final->id : std::string("-")) << " | "
       << (t.validation ? format_points(t.validation->rouge1.f1 * 100.0) : std::string("-")) << " |\n";
  }
  emit(report / "summary.md", md.str());
  return files;
}

}  // namespace soapapo::experiment

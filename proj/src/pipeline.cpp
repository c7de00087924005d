#include "soapapo/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <sstream>
#include <thread>

#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"

namespace soapapo::pipeline {

namespace fs = std::filesystem;
using corpus::SectionId;

namespace {

std::string pretty(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void write_if_changed(const fs::path& p, const std::string& content) {
  if (fs::exists(p) && read_file(p) == content) return;
  write_file_atomic(p, content);
}

std::string inventory_csv(const corpus::SectionDataset& ds, std::size_t train_sample_size) {
  std::ostringstream out;
  out << "section,records,evaluation\n";
  const auto eval = corpus::evaluation_inventory(ds, train_sample_size);
  std::size_t total = 0, total_eval = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto n = ds.sections.at(eval[i].first).size();
    out << eval[i].first.name() << ',' << n << ',' << eval[i].second << '\n';
    total += n;
    total_eval += eval[i].second;
  }
  out << "Overall," << total << ',' << total_eval << '\n';
  return out.str();
}

}  // namespace

corpus::SectionDataset ingest(const std::vector<fs::path>& csvs, const fs::path& run_dir, std::size_t min_section_size,
                              std::size_t train_sample_size) {
  auto ds = corpus::load_dataset(csvs, min_section_size);
  fs::create_directories(run_dir);
  write_if_changed(run_dir / "dataset.json", pretty(corpus::provenance_json(ds)));
  write_if_changed(run_dir / "inventory.csv", inventory_csv(ds, train_sample_size));
  return ds;
}

RunContext::RunContext(RunConfig config, fs::path run_dir, std::shared_ptr<llm::Backend> backend)
    : config_(std::move(config)),
      run_dir_(std::move(run_dir)),
      dataset_(corpus::load_dataset(config_.dataset, config_.min_section_size)),
      templates_(config_.templates ? prompts::TemplateSet::load_dir(*config_.templates) : prompts::TemplateSet::defaults()) {
  if (run_dir_.empty()) throw ConfigError("run_dir", "no run directory given (set run_dir or pass --run)");
  auto lexicon = std::make_shared<metrics::ConceptLexicon>(metrics::ConceptLexicon::load(config_.lexicon));
  if (lexicon->empty()) throw ConfigError("lexicon", "concept lexicon " + config_.lexicon.string() + " is empty");
  metrics_ = std::make_unique<metrics::MetricSuite>(std::move(lexicon));
  if (!backend) backend = llm::make_backend(config_.backend);
  gateway_ = std::make_unique<llm::Gateway>(std::move(backend), std::make_shared<llm::ResponseCache>(run_dir_ / "cache"));
}

corpus::SectionSplit RunContext::split_for(const SectionId& section) {
  auto split = corpus::split_section(dataset_, section, config_.train_sample_size, config_.seed,
                                     config_.eval_excludes_training);
  std::lock_guard lk(split_mu_);
  write_if_changed(run_dir_ / "splits" / (section.slug() + ".json"), pretty(corpus::split_manifest(split)));
  return split;
}

std::unique_ptr<apo::Engine> RunContext::make_engine() const {
  return std::make_unique<apo::Engine>(*gateway_, templates_, *metrics_, config_.optimizer);
}

std::vector<SectionId> RunContext::resolve_sections(const std::vector<std::string>& names) const {
  std::vector<SectionId> out;
  if (names.empty()) {
    for (const auto& [s, _] : dataset_.sections) out.push_back(s);
    return out;
  }
  for (const auto& n : names) {
    SectionId s(n);
    if (!dataset_.contains(s)) {
      // accept file-name slugs as well
      for (const auto& [known, _] : dataset_.sections)
        if (known.slug() == s.slug()) s = known;
    }
    if (!dataset_.contains(s)) throw ConfigError("--sections", "unknown section: " + n);
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

std::string apo_group_label(const RunConfig& config) { return "APO-" + config.optimizer.critic.model; }

namespace {

void write_prompt_sets(RunContext& ctx) {
  experiment::PromptGroup gen{"Gen", {}};
  for (const auto& [s, _] : ctx.dataset().sections)
    gen.prompts.emplace(s, apo::initial_prompt(s, ctx.templates().initial_instruction));
  write_if_changed(ctx.run_dir() / "prompts" / "Gen.json", pretty(experiment::to_json(gen)));

  experiment::PromptGroup apo_group{apo_group_label(ctx.config()), {}};
  const auto traces_dir = ctx.run_dir() / "traces";
  if (fs::is_directory(traces_dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(traces_dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto t = apo::trace_from_json(nlohmann::json::parse(read_file(f)));
      if (t.status == "complete" && t.final) apo_group.prompts.emplace(t.section, *t.final);
    }
  }
  if (!apo_group.prompts.empty())
    write_if_changed(ctx.run_dir() / "prompts" / (experiment::file_token(apo_group.label) + ".json"),
                     pretty(experiment::to_json(apo_group)));
}

}  // namespace

std::vector<apo::OptimizationTrace> optimize(RunContext& ctx, const OptimizeOptions& options) {
  const auto sections = ctx.resolve_sections(options.sections);
  nlohmann::json cfg = ctx.config().canonical;
  cfg["templates_sha256"] = ctx.templates().checksums();
  write_if_changed(ctx.run_dir() / "config.json", pretty(cfg));
  write_if_changed(ctx.run_dir() / "dataset.json", pretty(corpus::provenance_json(ctx.dataset())));

  // validate before any API spend
  for (const auto& s : sections) {
    ctx.config().optimizer.validate(ctx.config().train_sample_size);
    (void)ctx.split_for(s);
  }

  std::vector<apo::OptimizationTrace> traces(sections.size());
  std::vector<std::exception_ptr> errors(sections.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < sections.size(); i = next++) {
      try {
        const auto& s = sections[i];
        const auto split = ctx.split_for(s);
        auto engine = ctx.make_engine();
        const auto trace_path = ctx.run_dir() / "traces" / (s.slug() + ".json");
        traces[i] = engine->optimize_section(
            split, apo::initial_prompt(s, ctx.templates().initial_instruction),
            [&](const apo::OptimizationTrace& t) { write_if_changed(trace_path, pretty(apo::to_json(t))); });
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(options.parallel_sections, static_cast<int>(sections.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  write_prompt_sets(ctx);
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return traces;
}

experiment::ScoreTable evaluate(RunContext& ctx, const experiment::PromptGroup& group, const std::string& mentee_model,
                                const std::vector<std::string>& sections) {
  experiment::EvaluationSets eval;
  for (const auto& s : ctx.resolve_sections(sections)) eval[s] = ctx.split_for(s).evaluation;
  auto engine = ctx.make_engine();
  const llm::LlmRole mentee{llm::LlmRole::Kind::mentee, mentee_model};
  auto table = experiment::run_group(group, mentee, eval, *engine);

  const auto stem = experiment::file_token(group.label);
  const auto mentee_tok = experiment::file_token(mentee_model);
  write_if_changed(ctx.run_dir() / "scores" / (stem + "__" + mentee_tok + ".json"), pretty(experiment::to_json(table)));
  write_if_changed(ctx.run_dir() / "report" / ("scores_" + stem + "_" + mentee_tok + ".csv"),
                   experiment::score_table_csv(table));
  return table;
}

}  // namespace soapapo::pipeline

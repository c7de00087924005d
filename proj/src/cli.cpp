#include "soapapo/cli.hpp"

#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"
#include "soapapo/experiment.hpp"
#include "soapapo/pipeline.hpp"
#include "soapapo/review_service.hpp"
#include "soapapo/run_config.hpp"

namespace soapapo {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_commas(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const auto& r : raw) {
    std::stringstream ss(r);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// --config when given; otherwise the config persisted by `optimize` in the run
/// directory, whose relative paths resolve against the working directory.
RunConfig load_config(const std::string& config, const std::string& run) {
  RunConfig cfg;
  if (!config.empty()) {
    cfg = RunConfig::load(config);
  } else {
    const auto path = fs::path(run) / "config.json";
    if (run.empty() || !fs::exists(path)) throw ConfigError("--config", "no --config given and no config.json in the run");
    auto j = nlohmann::json::parse(read_file(path));
    j.erase("templates_sha256");
    cfg = RunConfig::from_json(j, fs::current_path());
  }
  if (!run.empty()) cfg.run_dir = run;
  return cfg;
}

void print_stats(std::ostream& out, llm::Gateway& gw) {
  const auto s = gw.stats();
  out << "backend calls: " << s.backend_calls << ", cache hits: " << s.cache_hits << "\n";
}

review::ReviewServer* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const CliHooks& hooks) {
  CLI::App app{"Automatic prompt optimization for SOAP note section summaries", "soapapo"};
  app.set_version_flag("--version", "{\"name\": \"soapapo\", \"version\": \"" + std::string(kVersion) + "\"}");
  app.require_subcommand(1);

  auto* ingest = app.add_subcommand("ingest", "Load a dialogue CSV pool and write the dataset inventory");
  std::vector<std::string> ingest_csv;
  std::string ingest_out;
  std::size_t min_section_size = 10, train_sample_size = 5;
  ingest->add_option("csv", ingest_csv, "CSV file(s) with ID, section_header, section_text, dialogue")
      ->required()
      ->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_out, "Run directory")->required();
  ingest->add_option("--min-section-size", min_section_size, "Drop sections with fewer rows")
      ->capture_default_str();
  ingest->add_option("--train-sample-size", train_sample_size, "Rows per section held out for training")
      ->capture_default_str();

  std::string config, run, group, mentee, baseline = "Gen", host = "127.0.0.1", ui_dir;
  std::vector<std::string> sections;
  int parallel = 1, port = 8080;
  bool unblinded = false;

  auto* optimize = app.add_subcommand("optimize", "Run prompt optimization per section");
  optimize->add_option("--config", config, "Run config (.json or .toml)")->required();
  optimize->add_option("--run", run, "Run directory (overrides run_dir in the config)");
  optimize->add_option("--sections", sections, "Comma separated section names, e.g. CC,GENHX");
  optimize->add_option("--parallel-sections", parallel, "Sections optimized concurrently")
      ->check(CLI::Range(1, 64))
      ->capture_default_str();

  auto* evaluate = app.add_subcommand("evaluate", "Score a prompt set on the evaluation splits");
  evaluate->add_option("--config", config, "Run config; defaults to <run>/config.json");
  evaluate->add_option("--run", run, "Run directory");
  evaluate->add_option("--group", group, "Prompt set file {label, prompts}")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--mentee", mentee, "Mentee model id")->required();
  evaluate->add_option("--sections", sections, "Comma separated section names");

  auto* report = app.add_subcommand("report", "Write score, delta and summary tables for a run");
  report->add_option("--run", run, "Run directory")->required();
  report->add_option("--baseline", baseline, "Baseline prompt set label")->capture_default_str();

  auto* serve = app.add_subcommand("serve", "Serve the review API for a finished run");
  serve->add_option("--run", run, "Run directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--port", port, "Port (0 picks a free one)")->required();
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--config", config, "Run config; defaults to <run>/config.json");
  serve->add_flag("--unblinded", unblinded, "Show which side is APO before voting");
  serve->add_option("--ui-dir", ui_dir, "Static UI bundle served at /")->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*ingest) {
      std::vector<fs::path> paths(ingest_csv.begin(), ingest_csv.end());
      const auto ds = pipeline::ingest(paths, ingest_out, min_section_size, train_sample_size);
      out << read_file(fs::path(ingest_out) / "inventory.csv");
      return 0;
    }
    if (*optimize) {
      auto cfg = load_config(config, run);
      const auto run_dir = cfg.run_dir;
      pipeline::RunContext ctx(std::move(cfg), run_dir, hooks.backend);
      const auto traces = pipeline::optimize(ctx, {split_commas(sections), parallel});
      for (const auto& t : traces)
        out << t.section.name() << ": " << t.status << ", final " << (t.final ? t.final->id : "-") << ", "
            << t.lineage.size() << " prompts\n";
      print_stats(out, ctx.gateway());
      return 0;
    }
    if (*evaluate) {
      auto cfg = load_config(config, run);
      const auto run_dir = cfg.run_dir;
      pipeline::RunContext ctx(std::move(cfg), run_dir, hooks.backend);
      const auto prompts = experiment::load_prompt_group(group);
      const auto table = pipeline::evaluate(ctx, prompts, mentee, split_commas(sections));
      out << experiment::score_table_csv(table);
      print_stats(out, ctx.gateway());
      return 0;
    }
    if (*report) {
      const auto files = experiment::emit_report(run, baseline);
      for (const auto& f : files.written) out << f.string() << "\n";
      return 0;
    }
    if (*serve) {
      std::shared_ptr<pipeline::RunContext> ctx;
      if (!config.empty()) {
        ctx = std::make_shared<pipeline::RunContext>(load_config(config, run), run, hooks.backend);
      } else if (fs::exists(fs::path(run) / "config.json")) {
        // the persisted config may hold paths relative to another directory; without
        // it the read endpoints and edits still work
        try {
          ctx = std::make_shared<pipeline::RunContext>(load_config(config, run), run, hooks.backend);
        } catch (const ConfigError& e) {
          err << "warning: " << e.what() << "; comparisons disabled (pass --config)\n";
        }
      }
      review::ReviewService service(run, ctx, {unblinded});
      review::ReviewServer server(service, ui_dir.empty() ? std::nullopt : std::optional<fs::path>(ui_dir));
      const int bound = server.bind(host, port);
      out << "listening on http://" << host << ":" << bound << std::endl;
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.listen();
      g_server = nullptr;
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace soapapo

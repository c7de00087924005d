#include "soapapo/review_service.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <numeric>

#include <httplib.h>

#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"
#include "soapapo/rng.hpp"

namespace soapapo::review {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Reply error(int status, const std::string& message) { return {status, json{{"error", message}}}; }

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < path.size()) {
    while (i < path.size() && path[i] == '/') ++i;
    const auto j = path.find('/', i);
    const auto end = j == std::string::npos ? path.size() : j;
    if (end > i) out.push_back(path.substr(i, end - i));
    i = end;
  }
  return out;
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

ReviewService::ReviewService(fs::path run_dir, std::shared_ptr<pipeline::RunContext> ctx, ServiceOptions options)
    : run_dir_(std::move(run_dir)), ctx_(std::move(ctx)), options_(options) {
  const auto dir = run_dir_ / "review";
  if (fs::exists(dir / "prompts.json"))
    for (const auto& v : json::parse(read_file(dir / "prompts.json"))) versions_.push_back(apo::prompt_state_from_json(v));
  if (fs::exists(dir / "pairs.json")) {
    for (const auto& v : json::parse(read_file(dir / "pairs.json"))) {
      Pair p;
      p.pair_id = v.at("pair_id");
      p.section = v.at("section");
      p.record_id = v.at("record_id");
      p.dialogue = v.at("dialogue");
      p.prompt_apo = v.at("prompt_apo");
      p.prompt_edited = v.at("prompt_edited");
      p.summary_apo = v.at("summary_apo");
      p.summary_edited = v.at("summary_edited");
      p.presentation_order = {v.at("presentation_order").at(0).get<std::string>(),
                              v.at("presentation_order").at(1).get<std::string>()};
      if (!v.at("vote").is_null()) p.vote = v.at("vote").get<std::string>();
      pairs_.push_back(std::move(p));
    }
  }
  if (fs::exists(dir / "sessions.json")) sessions_ = json::parse(read_file(dir / "sessions.json"));
}

std::string ReviewService::run_id() const {
  auto p = run_dir_;
  if (!p.has_filename()) p = p.parent_path();
  return p.filename().string();
}

void ReviewService::save_locked() const {
  const auto dir = run_dir_ / "review";
  json prompts = json::array();
  for (const auto& v : versions_) prompts.push_back(apo::to_json(v));
  json pairs = json::array();
  for (const auto& p : pairs_)
    pairs.push_back({{"pair_id", p.pair_id},
                     {"section", p.section},
                     {"record_id", p.record_id},
                     {"dialogue", p.dialogue},
                     {"prompt_apo", p.prompt_apo},
                     {"prompt_edited", p.prompt_edited},
                     {"summary_apo", p.summary_apo},
                     {"summary_edited", p.summary_edited},
                     {"presentation_order", p.presentation_order},
                     {"vote", p.vote ? json(*p.vote) : json(nullptr)}});
  write_file_atomic(dir / "prompts.json", prompts.dump(2) + "\n");
  write_file_atomic(dir / "pairs.json", pairs.dump(2) + "\n");
  write_file_atomic(dir / "sessions.json", sessions_.dump(2) + "\n");
}

std::optional<json> ReviewService::load_trace(const std::string& section) const {
  const auto path = run_dir_ / "traces" / (corpus::SectionId(section).slug() + ".json");
  if (!fs::exists(path)) return std::nullopt;
  return json::parse(read_file(path));
}

std::optional<std::string> ReviewService::resolve_section(const std::string& raw) const {
  const corpus::SectionId wanted(raw);
  const auto dir = run_dir_ / "traces";
  if (!fs::is_directory(dir)) return std::nullopt;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    const auto name = json::parse(read_file(e.path())).at("section").get<std::string>();
    const corpus::SectionId known(name);
    if (known == wanted || known.slug() == wanted.slug()) return name;
  }
  return std::nullopt;
}

Reply ReviewService::list_sections(const std::optional<std::string>& run) const {
  if (run && *run != run_id()) return error(404, "unknown run: " + *run);
  const auto dir = run_dir_ / "traces";
  std::vector<fs::path> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
  if (files.empty()) return error(404, "run " + run_id() + " has no optimization traces");
  std::sort(files.begin(), files.end());

  std::lock_guard lk(mu_);
  json out = json::array();
  for (const auto& f : files) {
    const auto t = json::parse(read_file(f));
    const auto name = t.at("section").get<std::string>();
    json versions = json::array();
    for (const auto& v : versions_)
      if (v.section.name() == name) versions.push_back(apo::to_json(v));
    out.push_back({{"section", name},
                   {"slug", corpus::SectionId(name).slug()},
                   {"status", t.at("status")},
                   {"prompt_id", t.at("final").is_null() ? json(nullptr) : t.at("final").at("id")},
                   {"text", t.at("final").is_null() ? json(nullptr) : t.at("final").at("text")},
                   {"validation", t.at("validation")},
                   {"human_versions", versions}});
  }
  return {200, {{"run", run_id()}, {"sections", out}}};
}

Reply ReviewService::put_prompt(const std::string& raw_section, const json& body) {
  if (!body.is_object() || !body.contains("text") || !body.at("text").is_string() ||
      blank(body.at("text").get<std::string>()))
    return error(400, "body must be {\"text\": non-empty string, \"reviewer_label\": expert|non_expert}");
  std::string label = "expert";
  if (body.contains("reviewer_label")) {
    if (!body.at("reviewer_label").is_string()) return error(400, "reviewer_label must be expert or non_expert");
    label = body.at("reviewer_label").get<std::string>();
    if (label != "expert" && label != "non_expert") return error(400, "reviewer_label must be expert or non_expert");
  }
  const auto section = resolve_section(raw_section);
  if (!section) return error(404, "unknown section: " + raw_section);
  const auto trace = load_trace(*section);
  if (!trace || trace->at("final").is_null()) return error(409, "section " + *section + " has no APO final prompt");
  const auto final = apo::prompt_state_from_json(trace->at("final"));

  std::lock_guard lk(mu_);
  const auto n = std::count_if(versions_.begin(), versions_.end(),
                               [&](const apo::PromptState& v) { return v.section == final.section; });
  apo::PromptState edit;
  edit.id = final.section.slug() + "#h" + std::to_string(n + 1);
  edit.section = final.section;
  edit.text = body.at("text").get<std::string>();
  edit.origin = apo::PromptOrigin::human_post_apo;
  edit.parent = final.id;
  edit.epoch = final.epoch;
  edit.iteration = final.iteration + 1;
  edit.mentor_label = label;
  versions_.push_back(edit);
  save_locked();
  return {201, apo::to_json(edit)};
}

Reply ReviewService::compare(const std::string& raw_section, const json& body) {
  if (!body.is_object() || !body.contains("n") || !body.at("n").is_number_integer() || body.at("n").get<long>() < 1 ||
      body.at("n").get<long>() > 10000)
    return error(400, "body must be {\"n\": integer between 1 and 10000}");
  const auto n = static_cast<std::size_t>(body.at("n").get<long>());
  const auto section = resolve_section(raw_section);
  if (!section) return error(404, "unknown section: " + raw_section);
  const auto trace = load_trace(*section);
  if (!trace || trace->at("final").is_null()) return error(409, "section " + *section + " has no APO final prompt");
  const auto apo_final = apo::prompt_state_from_json(trace->at("final"));

  apo::PromptState edited;
  std::size_t existing = 0;
  {
    std::lock_guard lk(mu_);
    const apo::PromptState* latest = nullptr;
    for (const auto& v : versions_)
      if (v.section == apo_final.section) latest = &v;
    if (!latest) return error(409, "no human edit exists for section " + *section);
    edited = *latest;
    existing = std::count_if(pairs_.begin(), pairs_.end(), [&](const Pair& p) { return p.section == *section; });
  }
  if (!ctx_) return error(409, "the service was started without a run config; summaries cannot be generated");
  if (!ctx_->dataset().contains(apo_final.section))
    return error(409, "section " + *section + " is not in the configured dataset");

  const auto split = ctx_->split_for(apo_final.section);
  if (split.evaluation.empty()) return error(409, "section " + *section + " has no evaluation records");
  SplitMix64 rng(ctx_->config().seed ^ fnv1a64(apo_final.section.name()) ^ static_cast<std::uint64_t>(existing));
  std::vector<std::size_t> order(split.evaluation.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  fisher_yates(order, rng);

  // generation happens outside the state lock; the gateway serializes its own cache access
  auto engine = ctx_->make_engine();
  const auto& mentee = ctx_->config().optimizer.mentee;
  std::vector<Pair> fresh;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = split.evaluation[order[i % order.size()]];
    Pair p;
    p.section = *section;
    p.record_id = rec.id;
    p.dialogue = rec.dialogue;
    p.prompt_apo = apo_final.id;
    p.prompt_edited = edited.id;
    try {
      p.summary_apo = engine->generate_for_evaluation(apo_final, rec, mentee);
      p.summary_edited = engine->generate_for_evaluation(edited, rec, mentee);
    } catch (const Error& e) {
      return error(502, std::string("generation failed: ") + e.what());
    }
    if (rng.next() % 2 == 0)
      p.presentation_order = {"apo", "edited"};
    else
      p.presentation_order = {"edited", "apo"};
    fresh.push_back(std::move(p));
  }

  std::lock_guard lk(mu_);
  auto k = std::count_if(pairs_.begin(), pairs_.end(), [&](const Pair& p) { return p.section == *section; });
  json views = json::array();
  for (auto& p : fresh) {
    p.pair_id = apo_final.section.slug() + "-p" + std::to_string(++k);
    views.push_back(pair_view(p));
    pairs_.push_back(std::move(p));
  }
  save_locked();
  return {201, {{"pairs", views}}};
}

json ReviewService::pair_view(const Pair& p) const {
  const auto& left = p.presentation_order[0] == "apo" ? p.summary_apo : p.summary_edited;
  const auto& right = p.presentation_order[1] == "apo" ? p.summary_apo : p.summary_edited;
  json v = {{"pair_id", p.pair_id}, {"section", p.section}, {"record_id", p.record_id},
            {"dialogue", p.dialogue}, {"left", left},        {"right", right},
            {"voted", p.vote.has_value()}};
  if (p.vote || options_.unblinded) {
    v["presentation_order"] = p.presentation_order;
    v["vote"] = p.vote ? json(*p.vote) : json(nullptr);
  }
  return v;
}

Reply ReviewService::vote(const std::string& pair_id, const json& body) {
  std::lock_guard lk(mu_);
  auto it = std::find_if(pairs_.begin(), pairs_.end(), [&](const Pair& p) { return p.pair_id == pair_id; });
  if (it == pairs_.end()) return error(404, "unknown pair: " + pair_id);
  if (!body.is_object() || !body.contains("choice") || !body.at("choice").is_string())
    return error(400, "body must be {\"choice\": left|right|tie}");
  const auto choice = body.at("choice").get<std::string>();
  if (choice != "left" && choice != "right" && choice != "tie")
    return error(400, "choice must be left, right or tie");
  if (it->vote) return error(409, "pair " + pair_id + " already has a vote");
  it->vote = choice == "tie" ? "tie" : it->presentation_order[choice == "left" ? 0 : 1];
  save_locked();
  return {200, pair_view(*it)};
}

Reply ReviewService::preference_summary() const {
  std::lock_guard lk(mu_);
  std::size_t edited = 0, tie = 0, apo = 0;
  for (const auto& p : pairs_) {
    if (!p.vote) continue;
    if (*p.vote == "edited") ++edited;
    else if (*p.vote == "tie") ++tie;
    else ++apo;
  }
  const auto n = edited + tie + apo;
  if (n == 0) return error(409, "no votes recorded yet");
  const auto frac = [n](std::size_t c) { return static_cast<double>(c) / static_cast<double>(n); };
  return {200,
          {{"prefer_edited", frac(edited)},
           {"tie", frac(tie)},
           {"prefer_apo", frac(apo)},
           {"n_votes", n},
           {"counts", {{"edited", edited}, {"tie", tie}, {"apo", apo}}}}};
}

Reply ReviewService::list_pairs() const {
  std::lock_guard lk(mu_);
  json out = json::array();
  for (const auto& p : pairs_) out.push_back(pair_view(p));
  return {200, {{"pairs", out}}};
}

Reply ReviewService::get_pair(const std::string& pair_id) const {
  std::lock_guard lk(mu_);
  for (const auto& p : pairs_)
    if (p.pair_id == pair_id) return {200, pair_view(p)};
  return error(404, "unknown pair: " + pair_id);
}

Reply ReviewService::create_session(const json& body) {
  std::string label = "expert";
  if (body.is_object() && body.contains("reviewer_label")) {
    if (!body.at("reviewer_label").is_string()) return error(400, "reviewer_label must be expert or non_expert");
    label = body.at("reviewer_label").get<std::string>();
  }
  if (label != "expert" && label != "non_expert") return error(400, "reviewer_label must be expert or non_expert");
  const auto sections = list_sections();
  if (sections.status != 200) return sections;
  for (const auto& s : sections.body.at("sections"))
    if (s.at("status") != "complete") return error(409, "run " + run_id() + " is not complete");

  std::lock_guard lk(mu_);
  json s = {{"session_id", "session-" + std::to_string(sessions_.size() + 1)},
            {"reviewer_label", label},
            {"run_id", run_id()},
            {"created_at", utc_now()}};
  sessions_.push_back(s);
  save_locked();
  return {201, s};
}

Reply ReviewService::list_sessions() const {
  std::lock_guard lk(mu_);
  return {200, {{"sessions", sessions_}}};
}

Reply ReviewService::handle(const std::string& method, const std::string& path, const std::string& body,
                            const std::map<std::string, std::string>& query) {
  json payload;
  if (!body.empty()) {
    try {
      payload = json::parse(body);
    } catch (const json::parse_error&) {
      return error(400, "request body is not valid JSON");
    }
  }
  const auto seg = split_path(path);
  try {
    if (seg.size() == 1 && seg[0] == "sections" && method == "GET") {
      const auto it = query.find("run");
      return list_sections(it == query.end() ? std::nullopt : std::optional<std::string>(it->second));
    }
    if (seg.size() == 3 && seg[0] == "sections" && seg[2] == "prompt" && method == "PUT")
      return put_prompt(seg[1], payload);
    if (seg.size() == 3 && seg[0] == "sections" && seg[2] == "compare" && method == "POST")
      return compare(seg[1], payload);
    if (seg.size() == 3 && seg[0] == "pairs" && seg[2] == "vote" && method == "POST") return vote(seg[1], payload);
    if (seg.size() == 1 && seg[0] == "pairs" && method == "GET") return list_pairs();
    if (seg.size() == 2 && seg[0] == "pairs" && method == "GET") return get_pair(seg[1]);
    if (seg.size() == 2 && seg[0] == "preferences" && seg[1] == "summary" && method == "GET")
      return preference_summary();
    if (seg.size() == 1 && seg[0] == "sessions" && method == "POST") return create_session(payload);
    if (seg.size() == 1 && seg[0] == "sessions" && method == "GET") return list_sessions();
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
  return error(404, "no route for " + method + " " + path);
}

// ------------------------------------------------------------------ server

struct ReviewServer::Impl {
  explicit Impl(ReviewService& s) : service(s) {}
  ReviewService& service;
  httplib::Server server;
};

ReviewServer::ReviewServer(ReviewService& service, std::optional<fs::path> ui_dir)
    : impl_(std::make_unique<Impl>(service)) {
  auto& svr = impl_->server;
  if (ui_dir) svr.set_mount_point("/", ui_dir->string());
  const auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query(req.params.begin(), req.params.end());
    const auto reply = impl_->service.handle(req.method, req.path, req.body, query);
    res.status = reply.status;
    res.set_content(reply.body.dump(2), "application/json");
  };
  const char* api = R"(/(sections|pairs|preferences|sessions)(/.*)?)";
  svr.Get(api, handler);
  svr.Put(api, handler);
  svr.Post(api, handler);
}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void ReviewServer::listen() { impl_->server.listen_after_bind(); }

void ReviewServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace soapapo::review

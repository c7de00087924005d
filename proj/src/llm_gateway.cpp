#include "soapapo/llm_gateway.hpp"

#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "soapapo/digest.hpp"
#include "soapapo/metrics.hpp"

namespace soapapo::llm {

std::string_view to_string(MessageRole role) {
  switch (role) {
    case MessageRole::system: return "system";
    case MessageRole::user: return "user";
    case MessageRole::assistant: return "assistant";
  }
  return "user";
}

std::string_view to_string(BackendKind kind) { return kind == BackendKind::http ? "http" : "mock"; }

void ChatRequest::validate() const {
  if (messages.empty()) throw Error("chat request has no messages");
  if (!std::isfinite(temperature) || temperature < 0.0) throw Error("chat request temperature must be finite and >= 0");
  if (sample_index < 0) throw Error("chat request sample_index must be >= 0");
}

const std::string& ChatRequest::last_user_content() const {
  static const std::string kEmpty;
  for (auto it = messages.rbegin(); it != messages.rend(); ++it)
    if (it->role == MessageRole::user) return it->content;
  return kEmpty;
}

void BackendConfig::validate() const {
  if (kind == BackendKind::http) {
    if (base_url.empty()) throw ConfigError("backend.base_url", "http backend requires backend.base_url");
    if (api_key_env.empty()) throw ConfigError("backend.api_key_env", "http backend requires backend.api_key_env");
  } else if (script_path.empty()) {
    throw ConfigError("backend.script", "mock backend requires backend.script");
  }
  if (max_retries < 0) throw ConfigError("backend.max_retries", "backend.max_retries must be >= 0");
  if (backoff_base_ms < 0) throw ConfigError("backend.backoff_base_ms", "backend.backoff_base_ms must be >= 0");
  if (max_parallel < 1) throw ConfigError("backend.max_parallel", "backend.max_parallel must be >= 1");
}

namespace {

nlohmann::json messages_json(const std::vector<ChatMessage>& messages) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : messages) arr.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  return arr;
}

nlohmann::json request_json(const ChatRequest& r) {
  return {{"model", r.model},
          {"messages", messages_json(r.messages)},
          {"temperature", r.temperature},
          {"sample_index", r.sample_index}};
}

}  // namespace

std::string cache_key(const ChatRequest& request, BackendKind backend) {
  nlohmann::json canon = request_json(request);
  canon["backend"] = to_string(backend);
  return sha256_hex(canon.dump());
}

// ------------------------------------------------------------------ mock

MockBackend::MockBackend(nlohmann::json script) {
  if (!script.is_object()) throw ConfigError("backend.script", "mock script must be a JSON object");
  if (script.contains("responses")) {
    for (const auto& [k, v] : script["responses"].items()) {
      if (!v.is_string()) throw ConfigError("backend.script", "mock response for " + k + " must be text");
      responses_[k] = v.get<std::string>();
    }
  }
  if (script.contains("fallback")) {
    for (const auto& rule : script["fallback"]) {
      if (rule.is_string()) {
        fallback_.push_back({{}, rule.get<std::string>()});
        continue;
      }
      Rule r;
      r.reply = rule.at("reply").get<std::string>();
      if (rule.contains("when_contains")) {
        const auto& w = rule["when_contains"];
        if (w.is_string()) r.needles.push_back(w.get<std::string>());
        else
          for (const auto& n : w) r.needles.push_back(n.get<std::string>());
      }
      fallback_.push_back(std::move(r));
    }
  }
}

std::shared_ptr<MockBackend> MockBackend::from_file(const std::filesystem::path& path) {
  try {
    return std::make_shared<MockBackend>(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("backend.script", "cannot parse mock script " + path.string() + ": " + e.what());
  }
}

namespace {

std::string json_escape_inner(const std::string& s) {
  const auto dumped = nlohmann::json(s).dump();
  return dumped.substr(1, dumped.size() - 2);
}

std::string expand_reply(const std::string& reply, const ChatRequest& req, const std::string& digest) {
  const std::string& prompt = req.last_user_content();
  std::string out;
  std::size_t pos = 0;
  while (pos < reply.size()) {
    const auto open = reply.find("{{", pos);
    if (open == std::string::npos) break;
    const auto close = reply.find("}}", open + 2);
    if (close == std::string::npos) break;
    out.append(reply, pos, open - pos);
    const std::string tag = reply.substr(open + 2, close - open - 2);
    if (tag == "sample_index") {
      out += std::to_string(req.sample_index);
    } else if (tag == "digest") {
      out += digest.substr(0, 8);
    } else if (tag.rfind("between:", 0) == 0) {
      const auto args = tag.substr(8);
      const auto bar = args.find('|');
      const std::string start = args.substr(0, bar);
      const std::string end = bar == std::string::npos ? std::string{} : args.substr(bar + 1);
      std::string piece;
      if (auto s = prompt.find(start); s != std::string::npos) {
        s += start.size();
        const auto e = end.empty() ? std::string::npos : prompt.find(end, s);
        piece = prompt.substr(s, e == std::string::npos ? std::string::npos : e - s);
      }
      out += json_escape_inner(piece);
    } else {
      out.append(reply, open, close + 2 - open);
    }
    pos = close + 2;
  }
  out.append(reply, pos, std::string::npos);
  return out;
}

}  // namespace

std::string MockBackend::complete(const ChatRequest& request, const std::string& digest) {
  ++calls_;
  if (auto it = responses_.find(digest); it != responses_.end()) return it->second;
  const auto& prompt = request.last_user_content();
  for (const auto& rule : fallback_) {
    bool ok = true;
    for (const auto& n : rule.needles) ok = ok && prompt.find(n) != std::string::npos;
    if (ok) return expand_reply(rule.reply, request, digest);
  }
  throw ScriptGapError(digest);
}

// ------------------------------------------------------------------ http

namespace {

class HttplibTransport final : public HttpTransport {
 public:
  explicit HttplibTransport(std::chrono::seconds timeout) : timeout_(timeout) {}

  HttpReply post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                 const std::string& body) override {
    const auto scheme_end = url.find("://");
    const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto path_start = url.find('/', host_start);
    const std::string origin = path_start == std::string::npos ? url : url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client client(origin);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    HttpReply reply;
    if (!res) {
      reply.error = httplib::to_string(res.error());
      return reply;
    }
    reply.status = res->status;
    reply.body = res->body;
    return reply;
  }

 private:
  std::chrono::seconds timeout_;
};

}  // namespace

std::shared_ptr<HttpTransport> make_default_transport(std::chrono::seconds timeout) {
  return std::make_shared<HttplibTransport>(timeout);
}

void ParallelLimit::acquire() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return free_ > 0; });
  --free_;
}

void ParallelLimit::release() {
  {
    std::lock_guard lk(mu_);
    ++free_;
  }
  cv_.notify_one();
}

HttpBackend::HttpBackend(BackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper)
    : config_(std::move(config)),
      transport_(transport ? std::move(transport) : make_default_transport()),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })),
      limit_(config_.max_parallel) {}

bool HttpBackend::retryable(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

std::string HttpBackend::complete(const ChatRequest& request, const std::string& /*digest*/) {
  const char* key = std::getenv(config_.api_key_env.c_str());
  if (key == nullptr || *key == '\0')
    throw ConfigError("backend.api_key_env", "environment variable " + config_.api_key_env + " is not set");

  std::string base = config_.base_url;
  while (!base.empty() && base.back() == '/') base.pop_back();
  const std::string url = base + "/chat/completions";
  const nlohmann::json body = {
      {"model", request.model}, {"messages", messages_json(request.messages)}, {"temperature", request.temperature}};
  const std::vector<std::pair<std::string, std::string>> headers = {{"Authorization", std::string("Bearer ") + key}};

  HttpReply reply;
  for (int attempt = 0;; ++attempt) {
    limit_.acquire();
    try {
      reply = transport_->post(url, headers, body.dump());
    } catch (...) {
      limit_.release();
      throw;
    }
    limit_.release();
    if (reply.status >= 200 && reply.status < 300) break;
    if (!retryable(reply.status) || attempt >= config_.max_retries) {
      throw TransportError(reply.status, "chat completion failed after " + std::to_string(attempt + 1) +
                                             " attempt(s), last status " + std::to_string(reply.status) +
                                             (reply.error.empty() ? "" : " (" + reply.error + ")"));
    }
    ++retries_;
    sleeper_(std::chrono::milliseconds(static_cast<long long>(config_.backoff_base_ms) << attempt));
  }

  try {
    const auto j = nlohmann::json::parse(reply.body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw TransportError(reply.status, "chat completion returned non-text content");
    return content.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(reply.status, std::string("unreadable chat completion body: ") + e.what());
  }
}

std::shared_ptr<Backend> make_backend(const BackendConfig& config, std::shared_ptr<HttpTransport> transport) {
  config.validate();
  if (config.kind == BackendKind::mock) return MockBackend::from_file(config.script_path);
  return std::make_shared<HttpBackend>(config, std::move(transport));
}

// ------------------------------------------------------------------ cache

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  if (!dir_.empty()) std::filesystem::create_directories(dir_);
}

std::shared_ptr<std::mutex> ResponseCache::lock_for(const std::string& digest) {
  std::lock_guard lk(mu_);
  auto& m = digest_locks_[digest];
  if (!m) m = std::make_shared<std::mutex>();
  return m;
}

std::optional<ChatResponse> ResponseCache::get(const std::string& digest) const {
  {
    std::lock_guard lk(mu_);
    if (auto it = memory_.find(digest); it != memory_.end()) return it->second;
  }
  if (dir_.empty()) return std::nullopt;
  const auto path = dir_ / (digest + ".json");
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    ChatResponse r;
    r.content = j.at("content").get<std::string>();
    r.backend_id = j.at("backend_id").get<std::string>();
    return r;
  } catch (const std::exception&) {
    return std::nullopt;  // unreadable entry: treat as a miss and overwrite
  }
}

void ResponseCache::put(const std::string& digest, const ChatRequest& request, const ChatResponse& response) {
  auto lock = lock_for(digest);
  std::lock_guard lk(*lock);
  ChatResponse stored = response;
  stored.cached = false;
  stored.latency_ms = 0;
  if (!dir_.empty()) {
    nlohmann::json j = {{"digest", digest},
                        {"backend_id", response.backend_id},
                        {"content", response.content},
                        {"request", request_json(request)}};
    write_file_atomic(dir_ / (digest + ".json"), j.dump(2) + "\n");
  }
  std::lock_guard mlk(mu_);
  memory_[digest] = std::move(stored);
}

// ------------------------------------------------------------------ gateway

Gateway::Gateway(std::shared_ptr<Backend> backend, std::shared_ptr<ResponseCache> cache)
    : backend_(std::move(backend)), cache_(cache ? std::move(cache) : std::make_shared<ResponseCache>()) {
  if (!backend_) throw Error("gateway needs a backend");
}

std::string Gateway::cache_key(const ChatRequest& request) const { return llm::cache_key(request, backend_->kind()); }

ChatResponse Gateway::complete(const ChatRequest& request) {
  request.validate();
  const auto digest = cache_key(request);
  if (auto hit = cache_->get(digest)) {
    ++cache_hits_;
    hit->cached = true;
    hit->latency_ms = 0;
    return *hit;
  }
  const auto t0 = std::chrono::steady_clock::now();
  ++backend_calls_;
  ChatResponse r;
  r.content = backend_->complete(request, digest);
  r.backend_id = backend_->id();
  r.latency_ms = static_cast<long>(
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count());
  cache_->put(digest, request, r);
  return r;
}

std::size_t rouge_l_medoid(const std::vector<std::string>& texts) {
  if (texts.size() <= 1) return 0;
  std::vector<metrics::TokenSeq> toks;
  toks.reserve(texts.size());
  for (const auto& t : texts) toks.push_back(metrics::TokenSeq::from_text(t));
  std::vector<double> sum(texts.size(), 0.0);
  for (std::size_t i = 0; i < texts.size(); ++i)
    for (std::size_t j = i + 1; j < texts.size(); ++j) {
      const double f = metrics::rouge_l(toks[i], toks[j]).f1;
      sum[i] += f;
      sum[j] += f;
    }
  std::size_t best = 0;
  for (std::size_t i = 1; i < sum.size(); ++i)
    if (sum[i] > sum[best]) best = i;
  return best;
}

SelfConsistentResult Gateway::complete_self_consistent(const ChatRequest& request, int runs) {
  if (runs < 1) throw Error("self-consistency needs runs >= 1");
  SelfConsistentResult out;
  for (int i = 0; i < runs; ++i) {
    ChatRequest r = request;
    r.sample_index = i;
    try {
      out.candidates.push_back(complete(r));
    } catch (const Error& e) {
      throw SamplingError("self-consistency draw " + std::to_string(i + 1) + " of " + std::to_string(runs) +
                              " failed after " + std::to_string(out.candidates.size()) + " candidate(s): " + e.what(),
                          out.candidates);
    }
  }
  std::vector<std::string> texts;
  for (const auto& c : out.candidates) texts.push_back(c.content);
  out.chosen_index = rouge_l_medoid(texts);
  out.chosen = out.candidates[out.chosen_index];
  return out;
}

GatewayStats Gateway::stats() const { return {backend_calls_.load(), cache_hits_.load()}; }

}  // namespace soapapo::llm

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "soapapo/errors.hpp"

namespace soapapo::llm {

enum class MessageRole { system, user, assistant };

std::string_view to_string(MessageRole role);

struct ChatMessage {
  MessageRole role = MessageRole::user;
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.3;
  int sample_index = 0;  ///< distinguishes self-consistency draws

  /// Throws Error when there are no messages, the temperature is negative or not
  /// finite, or the sample index is negative.
  void validate() const;
  /// Content of the last user message (empty when there is none).
  const std::string& last_user_content() const;
};

struct ChatResponse {
  std::string content;
  std::string backend_id;
  bool cached = false;
  long latency_ms = 0;
};

enum class BackendKind { http, mock };

std::string_view to_string(BackendKind kind);

struct BackendConfig {
  BackendKind kind = BackendKind::mock;
  std::string base_url;                 ///< http only
  std::string api_key_env;              ///< http only; name of the env var holding the key
  std::filesystem::path script_path;    ///< mock only
  int max_retries = 4;                  ///< retries after the first attempt
  int backoff_base_ms = 500;
  int max_parallel = 4;

  void validate() const;  ///< throws ConfigError naming the offending key
};

struct LlmRole {
  enum class Kind { mentee, critic };
  Kind role = Kind::mentee;
  std::string model;
};

/// Stable request digest: SHA-256 over a canonical JSON of backend kind, model,
/// messages in order, temperature and sample index.
std::string cache_key(const ChatRequest& request, BackendKind backend);

// ------------------------------------------------------------------ backends

class Backend {
 public:
  virtual ~Backend() = default;
  virtual BackendKind kind() const = 0;
  virtual std::string id() const = 0;
  /// Returns the raw assistant text for the request.
  virtual std::string complete(const ChatRequest& request, const std::string& digest) = 0;
};

/// Scripted backend. Script JSON: {"responses": {digest: text}, "fallback": [rule...]}.
/// A rule is either a plain string or {"when_contains": text | [text...], "reply": text};
/// the first rule whose needles all occur in the last user message answers. Replies may
/// use {{sample_index}}, {{digest}} (first 8 hex chars) and {{between:START|END}}
/// (JSON-escaped text of the last user message between the two markers).
class MockBackend final : public Backend {
 public:
  explicit MockBackend(nlohmann::json script);
  static std::shared_ptr<MockBackend> from_file(const std::filesystem::path& path);

  BackendKind kind() const override { return BackendKind::mock; }
  std::string id() const override { return "mock"; }
  std::string complete(const ChatRequest& request, const std::string& digest) override;

  std::size_t calls() const noexcept { return calls_.load(); }

 private:
  struct Rule {
    std::vector<std::string> needles;
    std::string reply;
  };
  std::map<std::string, std::string> responses_;
  std::vector<Rule> fallback_;
  std::atomic<std::size_t> calls_{0};
};

struct HttpReply {
  int status = 0;  ///< 0 when the connection itself failed
  std::string body;
  std::string error;
};

/// One POST. Replaceable so tests can stub the network.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpReply post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                         const std::string& body) = 0;
};

/// cpp-httplib based transport (http and https).
std::shared_ptr<HttpTransport> make_default_transport(std::chrono::seconds timeout = std::chrono::seconds(120));

/// Counting semaphore with a runtime bound.
class ParallelLimit {
 public:
  explicit ParallelLimit(int bound) : free_(bound < 1 ? 1 : bound) {}
  void acquire();
  void release();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int free_;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// OpenAI-compatible chat completions: POST {base_url}/chat/completions with
/// {model, messages, temperature} and a bearer key. Retries 408, 429, 5xx and
/// connection failures with base * 2^attempt backoff.
class HttpBackend final : public Backend {
 public:
  HttpBackend(BackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper = {});

  BackendKind kind() const override { return BackendKind::http; }
  std::string id() const override { return "http:" + config_.base_url; }
  std::string complete(const ChatRequest& request, const std::string& digest) override;

  std::size_t retries() const noexcept { return retries_.load(); }
  static bool retryable(int status);

 private:
  BackendConfig config_;
  std::shared_ptr<HttpTransport> transport_;
  Sleeper sleeper_;
  ParallelLimit limit_;
  std::atomic<std::size_t> retries_{0};
};

std::shared_ptr<Backend> make_backend(const BackendConfig& config,
                                      std::shared_ptr<HttpTransport> transport = nullptr);

// ------------------------------------------------------------------ cache

/// Content-addressed response store: one `<digest>.json` per request. An empty
/// directory path keeps entries in memory only.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir = {});

  std::optional<ChatResponse> get(const std::string& digest) const;
  void put(const std::string& digest, const ChatRequest& request, const ChatResponse& response);
  const std::filesystem::path& dir() const noexcept { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, ChatResponse> memory_;
  std::map<std::string, std::shared_ptr<std::mutex>> digest_locks_;

  std::shared_ptr<std::mutex> lock_for(const std::string& digest);
};

// ------------------------------------------------------------------ gateway

struct SelfConsistentResult {
  ChatResponse chosen;
  std::size_t chosen_index = 0;
  std::vector<ChatResponse> candidates;
};

/// Raised when one draw of a self-consistent request fails; carries the draws that succeeded.
class SamplingError : public Error {
 public:
  SamplingError(const std::string& what, std::vector<ChatResponse> partial)
      : Error(what), partial_(std::move(partial)) {}
  const std::vector<ChatResponse>& partial() const noexcept { return partial_; }

 private:
  std::vector<ChatResponse> partial_;
};

/// Index of the candidate with the highest mean ROUGE-L F1 to the others; ties go
/// to the lowest index.
std::size_t rouge_l_medoid(const std::vector<std::string>& texts);

struct GatewayStats {
  std::size_t backend_calls = 0;
  std::size_t cache_hits = 0;
};

class Gateway {
 public:
  Gateway(std::shared_ptr<Backend> backend, std::shared_ptr<ResponseCache> cache);

  ChatResponse complete(const ChatRequest& request);
  SelfConsistentResult complete_self_consistent(const ChatRequest& request, int runs = 5);
  std::string cache_key(const ChatRequest& request) const;

  GatewayStats stats() const;
  Backend& backend() { return *backend_; }

 private:
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<ResponseCache> cache_;
  std::atomic<std::size_t> backend_calls_{0};
  std::atomic<std::size_t> cache_hits_{0};
};

}  // namespace soapapo::llm

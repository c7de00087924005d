#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "soapapo/pipeline.hpp"

namespace soapapo::review {

/// Status code plus JSON body; errors carry {"error": message}.
struct Reply {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  /// Reveal which side is APO in pair payloads before a vote.
  bool unblinded = false;
};

/// Human-in-the-loop review over a finished run. State lives in <run>/review/
/// (prompts.json, pairs.json, sessions.json) and is rewritten after every change.
///
/// Pair sampling: the evaluation split is shuffled with SplitMix64 seeded by
/// `seed ^ fnv1a64(section name) ^ (existing pair count of the section)`; records are
/// taken in shuffled order (cycling when n exceeds the split), and after each record
/// one more draw decides the sides: an even draw shows (apo, edited), odd (edited, apo).
class ReviewService {
 public:
  /// `ctx` may be null, in which case only the read endpoints and edits work.
  ReviewService(std::filesystem::path run_dir, std::shared_ptr<pipeline::RunContext> ctx, ServiceOptions options = {});

  Reply list_sections(const std::optional<std::string>& run_id = std::nullopt) const;
  Reply put_prompt(const std::string& section, const nlohmann::json& body);
  Reply compare(const std::string& section, const nlohmann::json& body);
  Reply vote(const std::string& pair_id, const nlohmann::json& body);
  Reply preference_summary() const;
  Reply list_pairs() const;
  Reply get_pair(const std::string& pair_id) const;
  Reply create_session(const nlohmann::json& body);
  Reply list_sessions() const;

  /// Routes a request by method and decoded path. Unknown routes give 404.
  Reply handle(const std::string& method, const std::string& path, const std::string& body,
               const std::map<std::string, std::string>& query = {});

  std::string run_id() const;

 private:
  struct Pair {
    std::string pair_id;
    std::string section;
    std::string record_id;
    std::string dialogue;
    std::string prompt_apo;
    std::string prompt_edited;
    std::string summary_apo;
    std::string summary_edited;
    std::array<std::string, 2> presentation_order;  ///< "apo" / "edited"
    std::optional<std::string> vote;
  };

  std::filesystem::path run_dir_;
  std::shared_ptr<pipeline::RunContext> ctx_;
  ServiceOptions options_;
  mutable std::mutex mu_;
  std::vector<apo::PromptState> versions_;
  std::vector<Pair> pairs_;
  nlohmann::json sessions_ = nlohmann::json::array();

  std::optional<nlohmann::json> load_trace(const std::string& section) const;
  std::optional<std::string> resolve_section(const std::string& raw) const;
  nlohmann::json pair_view(const Pair& p) const;
  void save_locked() const;
};

/// HTTP front end over cpp-httplib. Serves `ui_dir` at / when given.
class ReviewServer {
 public:
  ReviewServer(ReviewService& service, std::optional<std::filesystem::path> ui_dir = std::nullopt);
  ~ReviewServer();

  int bind(const std::string& host, int port);  ///< port 0 picks a free one; returns the bound port
  void listen();                                ///< blocks until stop()
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace soapapo::review

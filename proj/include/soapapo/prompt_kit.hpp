#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace soapapo::prompts {

enum class TemplateKind { forward_wrapper, gradient, update };

std::string_view to_string(TemplateKind kind);

/// A prompt body with `{{slot}}` markers. Construction checks that the body holds
/// exactly the slots its kind requires.
class PromptTemplate {
 public:
  PromptTemplate(TemplateKind kind, std::string body);

  TemplateKind kind() const noexcept { return kind_; }
  const std::string& body() const noexcept { return body_; }
  std::string sha256() const;

  static std::span<const std::string_view> required_slots(TemplateKind kind);

  /// Single pass substitution; substituted values are never re-scanned, so braces
  /// inside them survive verbatim. Empty or whitespace-only values are rejected.
  std::string render(const std::map<std::string, std::string, std::less<>>& values) const;

 private:
  TemplateKind kind_;
  std::string body_;
};

/// The three fixed prompts plus the generic starting instruction.
struct TemplateSet {
  PromptTemplate forward;
  PromptTemplate gradient;
  PromptTemplate update;
  std::string initial_instruction;

  /// Built-in copies of assets/templates (embedded at build time).
  static TemplateSet defaults();
  /// Reads forward.txt, gradient.txt and update.txt from `dir`; initial_prompt.txt is
  /// optional and falls back to the default.
  static TemplateSet load_dir(const std::filesystem::path& dir);

  nlohmann::json checksums() const;
};

std::string render_forward(const TemplateSet& set, std::string_view instruction, std::string_view section,
                           std::string_view dialogue);
std::string render_gradient(const TemplateSet& set, std::string_view instruction, std::string_view section,
                            std::string_view dialogue, std::string_view ai_summary,
                            std::string_view reference_summary);
/// Suggestions are numbered from 1 in input order.
std::string render_update(const TemplateSet& set, std::string_view instruction,
                          std::span<const std::string> suggestions);

enum class ReplyKind { summary, gradient, update };

std::string_view to_string(ReplyKind kind);
std::span<const std::string_view> required_keys(ReplyKind kind);

struct StructuredReply {
  ReplyKind kind = ReplyKind::summary;
  std::map<std::string, std::string> fields;
  std::string raw;

  const std::string& at(const std::string& key) const { return fields.at(key); }
  /// Canonical dictionary text of the fields.
  std::string to_dict_text() const;
};

struct ParseOptions {
  /// Strict mode accepts only standard JSON inside the brace group.
  bool strict = false;
};

/// Finds the first balanced brace group in `text` that parses as a dictionary and
/// validates it against `kind`. Throws FormatError, SchemaError or CoercionError.
StructuredReply parse_structured(std::string_view text, ReplyKind kind, ParseOptions options = {});

/// Follow-up message sent once when a reply fails to parse.
inline constexpr std::string_view kRepairNudge =
    "Your previous reply could not be read. Please provide your response solely in the dictionary format "
    "without including any additional text.";

}  // namespace soapapo::prompts

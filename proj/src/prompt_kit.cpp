#include "soapapo/prompt_kit.hpp"

#include <algorithm>
#include <array>
#include <optional>
#include <set>

#include "soapapo/default_templates.inc"
#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"

namespace soapapo::prompts {

namespace {

constexpr std::array<std::string_view, 3> kForwardSlots{"instruction", "section", "dialogue"};
constexpr std::array<std::string_view, 5> kGradientSlots{"instruction", "section", "dialogue", "ai_summary",
                                                         "reference_summary"};
constexpr std::array<std::string_view, 2> kUpdateSlots{"instruction", "suggestions"};

constexpr std::array<std::string_view, 1> kSummaryKeys{"summary"};
constexpr std::array<std::string_view, 2> kGradientKeys{"reasons", "suggestions"};
constexpr std::array<std::string_view, 2> kUpdateKeys{"final suggestion", "new instruction"};

bool is_slot_char(char c) { return (c >= 'a' && c <= 'z') || c == '_'; }

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; });
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Visits every `{{name}}` marker: on_text(literal), on_slot(name).
template <typename Text, typename Slot>
void scan_slots(std::string_view body, Text&& on_text, Slot&& on_slot) {
  std::size_t pos = 0;
  while (pos < body.size()) {
    const auto open = body.find("{{", pos);
    if (open == std::string_view::npos) break;
    std::size_t k = open + 2;
    while (k < body.size() && is_slot_char(body[k])) ++k;
    if (k > open + 2 && body.substr(k, 2) == "}}") {
      on_text(body.substr(pos, open - pos));
      on_slot(body.substr(open + 2, k - open - 2));
      pos = k + 2;
    } else {
      on_text(body.substr(pos, open + 1 - pos));
      pos = open + 1;
    }
  }
  on_text(body.substr(pos));
}

std::string strip_final_newline(std::string s) {
  if (!s.empty() && s.back() == '\n') s.pop_back();
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

std::string_view to_string(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::forward_wrapper: return "forward";
    case TemplateKind::gradient: return "gradient";
    case TemplateKind::update: return "update";
  }
  return "?";
}

std::span<const std::string_view> PromptTemplate::required_slots(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::forward_wrapper: return kForwardSlots;
    case TemplateKind::gradient: return kGradientSlots;
    case TemplateKind::update: return kUpdateSlots;
  }
  return {};
}

PromptTemplate::PromptTemplate(TemplateKind kind, std::string body) : kind_(kind), body_(std::move(body)) {
  std::set<std::string, std::less<>> found;
  scan_slots(body_, [](std::string_view) {}, [&](std::string_view s) { found.emplace(s); });
  const auto req = required_slots(kind_);
  for (auto s : req)
    if (!found.count(s))
      throw TemplateError(std::string(to_string(kind_)) + " template is missing slot {{" + std::string(s) + "}}");
  for (const auto& s : found)
    if (std::find(req.begin(), req.end(), s) == req.end())
      throw TemplateError(std::string(to_string(kind_)) + " template has unknown slot {{" + s + "}}");
}

std::string PromptTemplate::sha256() const { return sha256_hex(body_); }

std::string PromptTemplate::render(const std::map<std::string, std::string, std::less<>>& values) const {
  for (auto s : required_slots(kind_)) {
    auto it = values.find(s);
    if (it == values.end() || blank(it->second))
      throw RenderError(std::string(s), "cannot render " + std::string(to_string(kind_)) + " prompt: slot '" +
                                            std::string(s) + "' is empty");
  }
  std::string out;
  out.reserve(body_.size() + 256);
  scan_slots(
      body_, [&](std::string_view t) { out += t; }, [&](std::string_view s) { out += values.find(s)->second; });
  return out;
}

TemplateSet TemplateSet::defaults() {
  return TemplateSet{
      PromptTemplate(TemplateKind::forward_wrapper, strip_final_newline(std::string(assets::kForward))),
      PromptTemplate(TemplateKind::gradient, strip_final_newline(std::string(assets::kGradient))),
      PromptTemplate(TemplateKind::update, strip_final_newline(std::string(assets::kUpdate))),
      strip_final_newline(std::string(assets::kInitialPrompt)),
  };
}

TemplateSet TemplateSet::load_dir(const std::filesystem::path& dir) {
  auto read = [&](const char* name) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) throw TemplateError("template file not found: " + p.string());
    return strip_final_newline(read_file(p));
  };
  std::string initial = std::filesystem::exists(dir / "initial_prompt.txt")
                            ? read("initial_prompt.txt")
                            : strip_final_newline(std::string(assets::kInitialPrompt));
  return TemplateSet{
      PromptTemplate(TemplateKind::forward_wrapper, read("forward.txt")),
      PromptTemplate(TemplateKind::gradient, read("gradient.txt")),
      PromptTemplate(TemplateKind::update, read("update.txt")),
      std::move(initial),
  };
}

nlohmann::json TemplateSet::checksums() const {
  return {{"forward", forward.sha256()},
          {"gradient", gradient.sha256()},
          {"update", update.sha256()},
          {"initial_prompt", sha256_hex(initial_instruction)}};
}

std::string render_forward(const TemplateSet& set, std::string_view instruction, std::string_view section,
                           std::string_view dialogue) {
  return set.forward.render({{"instruction", std::string(instruction)},
                             {"section", std::string(section)},
                             {"dialogue", std::string(dialogue)}});
}

std::string render_gradient(const TemplateSet& set, std::string_view instruction, std::string_view section,
                            std::string_view dialogue, std::string_view ai_summary,
                            std::string_view reference_summary) {
  return set.gradient.render({{"instruction", std::string(instruction)},
                              {"section", std::string(section)},
                              {"dialogue", std::string(dialogue)},
                              {"ai_summary", std::string(ai_summary)},
                              {"reference_summary", std::string(reference_summary)}});
}

std::string render_update(const TemplateSet& set, std::string_view instruction,
                          std::span<const std::string> suggestions) {
  if (suggestions.empty()) throw RenderError("suggestions", "cannot render update prompt: no suggestions given");
  std::string blocks;
  for (std::size_t i = 0; i < suggestions.size(); ++i) {
    if (blank(suggestions[i]))
      throw RenderError("suggestions", "cannot render update prompt: suggestion " + std::to_string(i + 1) + " is empty");
    if (i) blocks.push_back('\n');
    blocks += "Suggestions from summary [" + std::to_string(i + 1) + "]:\n" + suggestions[i];
  }
  return set.update.render({{"instruction", std::string(instruction)}, {"suggestions", blocks}});
}

// ------------------------------------------------------------------ parsing

std::string_view to_string(ReplyKind kind) {
  switch (kind) {
    case ReplyKind::summary: return "summary";
    case ReplyKind::gradient: return "gradient";
    case ReplyKind::update: return "update";
  }
  return "?";
}

std::span<const std::string_view> required_keys(ReplyKind kind) {
  switch (kind) {
    case ReplyKind::summary: return kSummaryKeys;
    case ReplyKind::gradient: return kGradientKeys;
    case ReplyKind::update: return kUpdateKeys;
  }
  return {};
}

std::string StructuredReply::to_dict_text() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (auto k : required_keys(kind)) {
    auto it = fields.find(std::string(k));
    if (it != fields.end()) j[it->first] = it->second;
  }
  for (const auto& [k, v] : fields)
    if (!j.contains(k)) j[k] = v;
  return j.dump();
}

namespace {

// Lenient dictionary reader: single or double quoted strings, trailing commas,
// raw control characters inside strings.
class LenientParser {
 public:
  explicit LenientParser(std::string_view s) : s_(s) {}

  nlohmann::json parse_document() {
    auto v = value();
    ws();
    if (i_ != s_.size()) fail("trailing characters after dictionary");
    return v;
  }

 private:
  std::string_view s_;
  std::size_t i_ = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("malformed dictionary at offset " + std::to_string(i_) + ": " + what);
  }

  void ws() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t' || s_[i_] == '\n' || s_[i_] == '\r')) ++i_;
  }

  char peek() const { return i_ < s_.size() ? s_[i_] : '\0'; }

  nlohmann::json value() {
    ws();
    const char c = peek();
    if (c == '{') return object();
    if (c == '[') return array();
    if (c == '"' || c == '\'') return string_lit();
    if (c == '-' || (c >= '0' && c <= '9')) return number();
    if (s_.substr(i_, 4) == "true") { i_ += 4; return true; }
    if (s_.substr(i_, 5) == "false") { i_ += 5; return false; }
    if (s_.substr(i_, 4) == "null") { i_ += 4; return nullptr; }
    if (s_.substr(i_, 4) == "None") { i_ += 4; return nullptr; }
    if (s_.substr(i_, 3) == "...") fail("placeholder '...' instead of a value");
    fail("unexpected character");
  }

  nlohmann::json object() {
    ++i_;
    nlohmann::json obj = nlohmann::json::object();
    ws();
    if (peek() == '}') { ++i_; return obj; }
    while (true) {
      ws();
      if (peek() == '}') { ++i_; return obj; }  // trailing comma
      if (peek() != '"' && peek() != '\'') fail("expected quoted key");
      const auto key = string_lit().get<std::string>();
      ws();
      if (peek() != ':') fail("expected ':' after key");
      ++i_;
      obj[key] = value();
      ws();
      if (peek() == ',') { ++i_; continue; }
      if (peek() == '}') { ++i_; return obj; }
      fail("expected ',' or '}'");
    }
  }

  nlohmann::json array() {
    ++i_;
    nlohmann::json arr = nlohmann::json::array();
    while (true) {
      ws();
      if (peek() == ']') { ++i_; return arr; }
      arr.push_back(value());
      ws();
      if (peek() == ',') { ++i_; continue; }
      if (peek() == ']') { ++i_; return arr; }
      fail("expected ',' or ']'");
    }
  }

  nlohmann::json number() {
    const auto start = i_;
    if (peek() == '-') ++i_;
    while (i_ < s_.size() && ((s_[i_] >= '0' && s_[i_] <= '9') || s_[i_] == '.' || s_[i_] == 'e' ||
                              s_[i_] == 'E' || s_[i_] == '+' || s_[i_] == '-'))
      ++i_;
    // kept as text: it only ever becomes a field value
    return std::string(s_.substr(start, i_ - start));
  }

  static void append_utf8(std::string& out, unsigned cp) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }

  unsigned hex4() {
    if (i_ + 4 > s_.size()) fail("truncated \\u escape");
    unsigned v = 0;
    for (int k = 0; k < 4; ++k) {
      const char h = s_[i_++];
      v <<= 4;
      if (h >= '0' && h <= '9') v |= static_cast<unsigned>(h - '0');
      else if (h >= 'a' && h <= 'f') v |= static_cast<unsigned>(h - 'a' + 10);
      else if (h >= 'A' && h <= 'F') v |= static_cast<unsigned>(h - 'A' + 10);
      else fail("bad \\u escape");
    }
    return v;
  }

  nlohmann::json string_lit() {
    const char quote = s_[i_++];
    std::string out;
    while (true) {
      if (i_ >= s_.size()) fail("unterminated string");
      const char c = s_[i_++];
      if (c == quote) break;
      if (c != '\\') {
        out.push_back(c);
        continue;
      }
      if (i_ >= s_.size()) fail("unterminated escape");
      const char e = s_[i_++];
      switch (e) {
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        case 'b': out.push_back('\b'); break;
        case 'f': out.push_back('\f'); break;
        case 'u': {
          unsigned cp = hex4();
          if (cp >= 0xD800 && cp <= 0xDBFF && s_.substr(i_, 2) == "\\u") {
            i_ += 2;
            const unsigned lo = hex4();
            cp = 0x10000 + ((cp - 0xD800) << 10) + (lo - 0xDC00);
          }
          append_utf8(out, cp);
          break;
        }
        default: out.push_back(e);  // \" \' \\ \/ and anything else verbatim
      }
    }
    return out;
  }
};

// Offsets [begin, end] of the balanced group opening at `open`, if any.
std::optional<std::size_t> group_end(std::string_view text, std::size_t open) {
  int depth = 0;
  bool in_str = false;
  for (std::size_t i = open; i < text.size(); ++i) {
    const char c = text[i];
    if (in_str) {
      if (c == '\\') ++i;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i;
  }
  return std::nullopt;
}

nlohmann::json parse_group(std::string_view group, bool strict) {
  if (strict) {
    try {
      return nlohmann::json::parse(group);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("malformed dictionary (strict): ") + e.what());
    }
  }
  return LenientParser(group).parse_document();
}

}  // namespace

StructuredReply parse_structured(std::string_view text, ReplyKind kind, ParseOptions options) {
  std::optional<nlohmann::json> dict;
  std::optional<FormatError> first_error;
  bool any_group = false;
  for (auto open = text.find('{'); open != std::string_view::npos; open = text.find('{', open + 1)) {
    const auto close = group_end(text, open);
    if (!close) continue;
    any_group = true;
    try {
      auto parsed = parse_group(text.substr(open, *close - open + 1), options.strict);
      if (parsed.is_object()) {
        dict = std::move(parsed);
        break;
      }
    } catch (const FormatError& e) {
      if (!first_error) first_error = e;
    }
  }
  if (!dict) {
    if (!any_group) throw FormatError("no dictionary found in " + std::string(to_string(kind)) + " reply");
    if (first_error) throw *first_error;
    throw FormatError("no dictionary found in " + std::string(to_string(kind)) + " reply");
  }

  StructuredReply reply;
  reply.kind = kind;
  reply.raw = std::string(text);
  for (auto key : required_keys(kind)) {
    const std::string k(key);
    if (!dict->contains(k))
      throw SchemaError(k, std::string(to_string(kind)) + " reply is missing key '" + k + "'");
    const auto& v = (*dict)[k];
    if (v.is_array() || v.is_object())
      throw CoercionError(k, "value of '" + k + "' must be text, not a " + (v.is_array() ? "list" : "dictionary"));
    std::string s = v.is_string() ? v.get<std::string>() : v.is_null() ? std::string{} : v.dump();
    s = trim(s);
    if (s.empty()) throw SchemaError(k, std::string(to_string(kind)) + " reply has an empty value for '" + k + "'");
    reply.fields.emplace(k, std::move(s));
  }
  for (const auto& [k, v] : dict->items()) {
    if (reply.fields.count(k)) continue;
    reply.fields.emplace(k, v.is_string() ? v.get<std::string>() : v.dump());
  }
  return reply;
}

}  // namespace soapapo::prompts

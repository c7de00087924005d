#include "soapapo/run_config.hpp"

#include <set>

#include <toml.hpp>

#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"

namespace soapapo {

namespace fs = std::filesystem;

namespace {

nlohmann::json toml_node(const toml::node& node) {
  if (auto t = node.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_node(v);
    return j;
  }
  if (auto a = node.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : *a) j.push_back(toml_node(v));
    return j;
  }
  if (auto s = node.as_string()) return s->get();
  if (auto i = node.as_integer()) return i->get();
  if (auto f = node.as_floating_point()) return f->get();
  if (auto b = node.as_boolean()) return b->get();
  throw ConfigError("", "unsupported TOML value type (dates are not accepted)");
}

class Reader {
 public:
  Reader(const nlohmann::json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected a table/object at " + name(""));
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  const nlohmann::json& at(const std::string& key) {
    seen_.insert(key);
    if (!obj_.contains(key)) throw ConfigError(name(key), "missing required config key '" + name(key) + "'");
    return obj_.at(key);
  }

  std::string str(const std::string& key) {
    const auto& v = at(key);
    if (!v.is_string()) throw ConfigError(name(key), "config key '" + name(key) + "' must be a string");
    return v.get<std::string>();
  }

  template <typename T>
  T integer(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) throw ConfigError(name(key), "config key '" + name(key) + "' must be an integer");
    if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
    const auto i = v.get<std::int64_t>();
    if (i < 0 && std::is_unsigned_v<T>) throw ConfigError(name(key), "config key '" + name(key) + "' must be >= 0");
    return static_cast<T>(i);
  }

  double real(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number()) throw ConfigError(name(key), "config key '" + name(key) + "' must be a number");
    return v.get<double>();
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) throw ConfigError(name(key), "config key '" + name(key) + "' must be true or false");
    return v.get<bool>();
  }

  std::string choice(const std::string& key, const std::string& fallback, std::initializer_list<const char*> allowed) {
    const std::string v = has(key) ? str(key) : fallback;
    for (auto a : allowed)
      if (v == a) return v;
    std::string list;
    for (auto a : allowed) list += std::string(list.empty() ? "" : ", ") + a;
    throw ConfigError(name(key), "config key '" + name(key) + "' must be one of: " + list);
  }

  void reject_unknown() const {
    for (const auto& [k, _] : obj_.items())
      if (!seen_.count(k)) throw ConfigError(name(k), "unknown config key '" + name(k) + "'");
  }

 private:
  const nlohmann::json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

fs::path existing(const fs::path& base, const std::string& raw, const std::string& key) {
  fs::path p(raw);
  if (p.is_relative()) p = base / p;
  if (!fs::exists(p)) throw ConfigError(key, "config key '" + key + "' points at a missing path: " + p.string());
  return p;
}

llm::LlmRole role_from(const nlohmann::json& v, llm::LlmRole::Kind kind, const std::string& key) {
  llm::LlmRole role{kind, {}};
  if (v.is_string()) {
    role.model = v.get<std::string>();
  } else {
    Reader r(v, key);
    role.model = r.str("model");
    r.reject_unknown();
  }
  if (role.model.empty()) throw ConfigError(key + ".model", "config key '" + key + ".model' must not be empty");
  return role;
}

}  // namespace

nlohmann::json toml_to_json(const fs::path& path) {
  try {
    return toml_node(toml::parse_file(path.string()));
  } catch (const toml::parse_error& e) {
    throw ConfigError("<file>", "cannot parse TOML config " + path.string() + ": " + std::string(e.description()));
  }
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("--config", "config file not found: " + path.string());
  nlohmann::json j;
  const auto ext = path.extension().string();
  if (ext == ".toml") {
    j = toml_to_json(path);
  } else if (ext == ".json") {
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("<file>", "cannot parse JSON config " + path.string() + ": " + e.what());
    }
  } else {
    throw ConfigError("--config", "config file must end in .json or .toml: " + path.string());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  RunConfig c;
  Reader root(j, "");

  const auto& ds = root.at("dataset");
  if (ds.is_string()) {
    c.dataset.push_back(existing(base_dir, ds.get<std::string>(), "dataset"));
  } else if (ds.is_array() && !ds.empty()) {
    for (const auto& d : ds) {
      if (!d.is_string()) throw ConfigError("dataset", "config key 'dataset' must hold paths");
      c.dataset.push_back(existing(base_dir, d.get<std::string>(), "dataset"));
    }
  } else {
    throw ConfigError("dataset", "config key 'dataset' must be a path or a list of paths");
  }

  if (root.has("run_dir")) {
    fs::path p(root.str("run_dir"));
    c.run_dir = p.is_relative() ? base_dir / p : p;
  }
  if (!root.has("seed")) throw ConfigError("seed", "missing required config key 'seed'");
  c.seed = root.integer<std::uint64_t>("seed", 0);

  {
    Reader b(root.at("backend"), "backend");
    const auto kind = b.choice("kind", "mock", {"mock", "http"});
    c.backend.kind = kind == "http" ? llm::BackendKind::http : llm::BackendKind::mock;
    if (b.has("base_url")) c.backend.base_url = b.str("base_url");
    if (b.has("api_key_env")) c.backend.api_key_env = b.str("api_key_env");
    if (b.has("script")) c.backend.script_path = existing(base_dir, b.str("script"), "backend.script");
    c.backend.max_retries = b.integer<int>("max_retries", c.backend.max_retries);
    c.backend.backoff_base_ms = b.integer<int>("backoff_base_ms", c.backend.backoff_base_ms);
    c.backend.max_parallel = b.integer<int>("max_parallel", c.backend.max_parallel);
    b.reject_unknown();
    c.backend.validate();
  }

  c.optimizer.mentee = role_from(root.at("mentee"), llm::LlmRole::Kind::mentee, "mentee");
  c.optimizer.critic = role_from(root.at("critic"), llm::LlmRole::Kind::critic, "critic");
  c.optimizer.temperature = root.real("temperature", 0.3);
  if (!(c.optimizer.temperature >= 0.0)) throw ConfigError("temperature", "config key 'temperature' must be >= 0");
  c.optimizer.self_consistency_runs = root.integer<int>("self_consistency_runs", 5);
  if (c.optimizer.self_consistency_runs < 1)
    throw ConfigError("self_consistency_runs", "config key 'self_consistency_runs' must be >= 1");
  c.optimizer.strict_json = root.boolean("strict_json", false);

  if (root.has("optimizer")) {
    Reader o(root.at("optimizer"), "optimizer");
    c.optimizer.iterations = o.integer<int>("iterations", c.optimizer.iterations);
    c.optimizer.epochs = o.integer<int>("epochs", c.optimizer.epochs);
    c.optimizer.final_selection =
        o.choice("final_selection", "last", {"last", "best_validation"}) == "last" ? apo::FinalSelection::last
                                                                                 : apo::FinalSelection::best_validation;
    c.optimizer.mode = o.choice("mode", "per_instance", {"per_instance", "aggregate"}) == "per_instance"
                           ? apo::UpdateMode::per_instance
                           : apo::UpdateMode::aggregate;
    c.optimizer.accumulate_suggestions = o.boolean("accumulate_suggestions", false);
    c.optimizer.validate_every_epoch = o.boolean("validate_every_epoch", true);
    c.optimizer.self_consistency_in_training = o.boolean("self_consistency_in_training", false);
    o.reject_unknown();
    if (c.optimizer.iterations < 1) throw ConfigError("optimizer.iterations", "optimizer.iterations must be >= 1");
    if (c.optimizer.epochs < 1) throw ConfigError("optimizer.epochs", "optimizer.epochs must be >= 1");
  }

  c.train_sample_size = root.integer<std::size_t>("train_sample_size", 5);
  if (c.train_sample_size < 1) throw ConfigError("train_sample_size", "config key 'train_sample_size' must be >= 1");
  c.min_section_size = root.integer<std::size_t>("min_section_size", 10);
  c.eval_excludes_training = root.boolean("eval_excludes_training", true);
  c.lexicon = existing(base_dir, root.str("lexicon"), "lexicon");
  if (root.has("templates")) c.templates = existing(base_dir, root.str("templates"), "templates");
  if (root.has("baseline_label")) c.baseline_label = root.str("baseline_label");
  root.reject_unknown();

  c.canonical = j;
  c.canonical.erase("run_dir");
  return c;
}

}  // namespace soapapo

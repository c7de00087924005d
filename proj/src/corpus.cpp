#include "soapapo/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "soapapo/digest.hpp"
#include "soapapo/errors.hpp"
#include "soapapo/rng.hpp"

namespace soapapo::corpus {

namespace {

constexpr std::string_view kRequiredColumns[] = {"ID", "section_header", "section_text", "dialogue"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

std::string canonical_section_name(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char c : raw) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  return out;
}

std::string SectionId::slug() const {
  std::string s = name_;
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-') c = '_';
  return s;
}

std::size_t SectionDataset::total_records() const {
  std::size_t n = 0;
  for (const auto& [_, recs] : sections) n += recs.size();
  return n;
}

const std::vector<DialogueRecord>& SectionDataset::records(const SectionId& s) const {
  auto it = sections.find(s);
  if (it == sections.end()) throw SplitError("section not in dataset: " + s.name());
  return it->second;
}

const DialogueRecord& SectionDataset::record(const std::string& id) const {
  for (const auto& [_, recs] : sections)
    for (const auto& r : recs)
      if (r.id == id) return r;
  throw Error("record id not in dataset: " + id);
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  if (text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    // a lone empty field means a blank line
    if (!(row.size() == 1 && row.front().empty())) rows.push_back(std::move(row));
    row.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field_started || field.empty()) {
          in_quotes = true;
          field_started = true;
        } else {
          field.push_back(c);
        }
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
        end_row();
        break;
      case '\n':
        end_row();
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw IngestionError("unterminated quoted field at end of CSV");
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

namespace {

struct RawPool {
  std::vector<DialogueRecord> records;
  Provenance provenance;
};

void read_pool(const std::filesystem::path& path, const std::string& id_prefix, RawPool& pool,
               std::set<std::string>& seen_ids) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error&) {
    throw IngestionError("cannot read dataset file: " + path.string());
  }
  auto rows = parse_csv(text);
  if (rows.empty()) throw IngestionError("dataset file is empty: " + path.string());

  const auto& header = rows.front();
  std::map<std::string_view, std::size_t> col;
  for (auto name : kRequiredColumns) {
    auto it = std::find_if(header.begin(), header.end(),
                           [&](const std::string& h) { return trim(h) == name; });
    if (it == header.end())
      throw SchemaError(std::string(name), "dataset is missing required column '" + std::string(name) + "'");
    col[name] = static_cast<std::size_t>(it - header.begin());
  }

  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    auto cell = [&](std::string_view name) -> std::string {
      const auto c = col[name];
      return c < row.size() ? row[c] : std::string{};
    };
    DialogueRecord rec;
    rec.id = id_prefix + trim(cell("ID"));
    rec.section = SectionId(cell("section_header"));
    rec.dialogue = cell("dialogue");
    rec.reference_summary = cell("section_text");
    if (trim(cell("ID")).empty())
      throw IngestionError(path.filename().string() + ": row " + std::to_string(r) + " has an empty ID");
    if (rec.section.name().empty())
      throw IngestionError("record " + rec.id + " has an empty section_header");
    if (trim(rec.dialogue).empty()) throw IngestionError("record " + rec.id + " has an empty dialogue");
    if (!seen_ids.insert(rec.id).second) throw IngestionError("duplicate record id: " + rec.id);
    pool.records.push_back(std::move(rec));
  }
  pool.provenance.sources.push_back(path.filename().string());
  pool.provenance.sha256.push_back(sha256_hex(text));
  pool.provenance.rows_read += rows.size() - 1;
}

}  // namespace

SectionDataset load_dataset(const std::filesystem::path& path, std::size_t min_section_size) {
  return load_dataset(std::vector<std::filesystem::path>{path}, min_section_size);
}

SectionDataset load_dataset(const std::vector<std::filesystem::path>& paths, std::size_t min_section_size) {
  if (paths.empty()) throw IngestionError("no dataset files given");
  RawPool pool;
  std::set<std::string> seen;
  for (const auto& p : paths) {
    const std::string prefix = paths.size() > 1 ? p.stem().string() + ":" : std::string{};
    read_pool(p, prefix, pool, seen);
  }
  SectionDataset ds;
  ds.provenance = std::move(pool.provenance);
  for (auto& rec : pool.records) ds.sections[rec.section].push_back(std::move(rec));
  return filter_sections(std::move(ds), min_section_size);
}

SectionDataset filter_sections(SectionDataset dataset, std::size_t min_section_size) {
  dataset.provenance.min_section_size = min_section_size;
  for (auto it = dataset.sections.begin(); it != dataset.sections.end();) {
    if (it->second.size() < min_section_size) {
      dataset.provenance.dropped_sections[it->first.name()] = it->second.size();
      it = dataset.sections.erase(it);
    } else {
      ++it;
    }
  }
  return dataset;
}

SectionSplit split_section(const SectionDataset& dataset, const SectionId& section,
                           std::size_t train_sample_size, std::uint64_t seed, bool eval_excludes_training) {
  auto it = dataset.sections.find(section);
  if (it == dataset.sections.end()) throw SplitError("section not in dataset: " + section.name());
  const auto& recs = it->second;
  if (train_sample_size == 0) throw SplitError("train_sample_size must be at least 1");
  if (recs.size() <= train_sample_size)
    throw SplitError("section " + section.name() + " has " + std::to_string(recs.size()) +
                     " records, needs more than " + std::to_string(train_sample_size));

  const auto order = shuffled_indices(recs.size(), seed);
  std::vector<bool> is_train(recs.size(), false);
  SectionSplit split;
  split.section = section;
  split.seed = seed;
  split.train_sample_size = train_sample_size;
  split.eval_excludes_training = eval_excludes_training;
  for (std::size_t i = 0; i < train_sample_size; ++i) {
    is_train[order[i]] = true;
    split.training.push_back(recs[order[i]]);
  }
  for (std::size_t i = 0; i < recs.size(); ++i)
    if (!eval_excludes_training || !is_train[i]) split.evaluation.push_back(recs[i]);
  return split;
}

std::vector<std::pair<SectionId, std::size_t>> section_inventory(const SectionDataset& dataset) {
  std::vector<std::pair<SectionId, std::size_t>> out;
  for (const auto& [s, recs] : dataset.sections) out.emplace_back(s, recs.size());
  return out;
}

std::vector<std::pair<SectionId, std::size_t>> evaluation_inventory(const SectionDataset& dataset,
                                                                    std::size_t train_sample_size) {
  auto out = section_inventory(dataset);
  for (auto& [_, n] : out) n = n > train_sample_size ? n - train_sample_size : 0;
  return out;
}

nlohmann::json split_manifest(const SectionSplit& split) {
  nlohmann::json j;
  j["section"] = split.section.name();
  j["seed"] = split.seed;
  j["train_sample_size"] = split.train_sample_size;
  j["eval_excludes_training"] = split.eval_excludes_training;
  auto ids = [](const std::vector<DialogueRecord>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : v) a.push_back(r.id);
    return a;
  };
  j["train_ids"] = ids(split.training);
  j["eval_ids"] = ids(split.evaluation);
  return j;
}

SectionSplit split_from_manifest(const SectionDataset& dataset, const nlohmann::json& manifest) {
  SectionSplit split;
  try {
    split.section = SectionId(manifest.at("section").get<std::string>());
    split.seed = manifest.at("seed").get<std::uint64_t>();
    split.train_sample_size = manifest.at("train_sample_size").get<std::size_t>();
    split.eval_excludes_training = manifest.value("eval_excludes_training", true);
    const auto& recs = dataset.records(split.section);
    auto lookup = [&](const std::string& id) -> const DialogueRecord& {
      auto r = std::find_if(recs.begin(), recs.end(), [&](const DialogueRecord& d) { return d.id == id; });
      if (r == recs.end()) throw SplitError("split manifest references unknown id " + id);
      return *r;
    };
    for (const auto& id : manifest.at("train_ids")) split.training.push_back(lookup(id.get<std::string>()));
    for (const auto& id : manifest.at("eval_ids")) split.evaluation.push_back(lookup(id.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw SplitError(std::string("malformed split manifest: ") + e.what());
  }
  return split;
}

nlohmann::json provenance_json(const SectionDataset& dataset) {
  const auto& p = dataset.provenance;
  nlohmann::json j;
  j["sources"] = p.sources;
  j["sha256"] = p.sha256;
  j["min_section_size"] = p.min_section_size;
  j["rows_read"] = p.rows_read;
  j["dropped_sections"] = p.dropped_sections;
  j["retained_records"] = dataset.total_records();
  nlohmann::json inv = nlohmann::json::object();
  for (const auto& [s, n] : section_inventory(dataset)) inv[s.name()] = n;
  j["sections"] = inv;
  return j;
}

}  // namespace soapapo::corpus

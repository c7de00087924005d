#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace soapapo::corpus {

/// Trim, collapse internal whitespace runs to one space, uppercase (ASCII).
std::string canonical_section_name(std::string_view raw);

/// A SOAP note section name in canonical form ("FAM SOCHX", "GENHX", "CC").
class SectionId {
 public:
  SectionId() = default;
  explicit SectionId(std::string_view raw) : name_(canonical_section_name(raw)) {}

  const std::string& name() const noexcept { return name_; }
  /// File-system friendly form: anything but letters, digits and '-' becomes '_'
  /// ("FAM/SOCHX" -> "FAM_SOCHX").
  std::string slug() const;

  auto operator<=>(const SectionId&) const = default;

 private:
  std::string name_;
};

struct DialogueRecord {
  std::string id;
  SectionId section;
  std::string dialogue;
  std::string reference_summary;
};

struct Provenance {
  std::vector<std::string> sources;  ///< file names only, so run directories stay relocatable
  std::vector<std::string> sha256;   ///< one digest per source
  std::size_t min_section_size = 10;
  std::size_t rows_read = 0;
  std::map<std::string, std::size_t> dropped_sections;  ///< name -> row count
};

struct SectionDataset {
  std::map<SectionId, std::vector<DialogueRecord>> sections;
  Provenance provenance;

  std::size_t total_records() const;
  bool contains(const SectionId& s) const { return sections.count(s) != 0; }
  const std::vector<DialogueRecord>& records(const SectionId& s) const;
  /// Lookup across all sections; throws when the id is unknown.
  const DialogueRecord& record(const std::string& id) const;
};

struct SectionSplit {
  SectionId section;
  std::vector<DialogueRecord> training;    ///< shuffled order; this is the order the optimizer walks
  std::vector<DialogueRecord> evaluation;  ///< source order
  std::uint64_t seed = 0;
  std::size_t train_sample_size = 5;
  bool eval_excludes_training = true;
};

/// Minimal RFC 4180 reader: quoted fields, doubled quotes, embedded newlines, CRLF, UTF-8 BOM.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

/// Loads one CSV pool. Columns ID, section_header, section_text and dialogue are required.
SectionDataset load_dataset(const std::filesystem::path& path, std::size_t min_section_size = 10);

/// Pools several CSV files (e.g. the original train and validation splits). Record
/// ids are qualified as "<file stem>:<id>" so ids stay unique across files.
SectionDataset load_dataset(const std::vector<std::filesystem::path>& paths,
                            std::size_t min_section_size = 10);

/// Drops sections with fewer than `min_section_size` records. Idempotent.
SectionDataset filter_sections(SectionDataset dataset, std::size_t min_section_size);

SectionSplit split_section(const SectionDataset& dataset, const SectionId& section,
                           std::size_t train_sample_size, std::uint64_t seed,
                           bool eval_excludes_training = true);

std::vector<std::pair<SectionId, std::size_t>> section_inventory(const SectionDataset& dataset);

/// Per-section evaluation counts once `train_sample_size` rows are held out for training.
std::vector<std::pair<SectionId, std::size_t>> evaluation_inventory(const SectionDataset& dataset,
                                                                    std::size_t train_sample_size);

nlohmann::json split_manifest(const SectionSplit& split);
/// Rebuilds a split from its manifest, checking every id against the dataset.
SectionSplit split_from_manifest(const SectionDataset& dataset, const nlohmann::json& manifest);

nlohmann::json provenance_json(const SectionDataset& dataset);

}  // namespace soapapo::corpus

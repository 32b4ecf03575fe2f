#pragma once

// Dataset records and the dataset-level constructions: category taxonomy,
// train/valid/test splits, the expert pool, and the 5-way auxiliary
// matching datasets.

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmcqa/rng.hpp"

namespace mmcqa {

// One question as stored on disk: raw token strings (ids resolve against a
// vocabulary at load time); feature_id keys the spatial feature store.
struct SampleRecord {
  std::uint64_t id = 0;
  std::vector<std::string> tokens;
  std::vector<std::uint32_t> categories;  // non-empty
  std::vector<std::uint64_t> answerers;
  std::int64_t timestamp = 0;
  std::uint64_t feature_id = 0;
};

// Line-delimited records, one JSON object per line.
void save_records(const std::string& path, const std::vector<SampleRecord>& records);
std::vector<SampleRecord> load_records(const std::string& path);

// Category hierarchy; parent -1 marks a root. A node's parent must be added
// before the node, which keeps the graph acyclic by construction.
class Taxonomy {
 public:
  struct Node {
    std::uint32_t id = 0;
    std::string name;
    std::int64_t parent = -1;
  };

  // n root categories named c0..c{n-1}, ids 0..n-1.
  static Taxonomy flat(std::size_t categories);

  void add(Node node);
  std::size_t size() const { return nodes_.size(); }
  bool has(std::uint32_t id) const { return index_.count(id) != 0; }
  const Node& node(std::uint32_t id) const;

  // The labels plus every ancestor, ascending and unique: a question tagged
  // with a leaf is labeled with the whole path to its root.
  std::vector<std::uint32_t> expand(const std::vector<std::uint32_t>& labels) const;

  void save(const std::string& path) const;
  static Taxonomy load(const std::string& path);

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::uint32_t, std::size_t> index_;
};

struct SplitIndices {
  std::vector<std::size_t> train, valid, test;  // ascending within each split
};

// Deterministic 80/10/10: valid and test take floor(n/10) each, train keeps
// the remainder. Requires at least 10 samples.
SplitIndices split_dataset(std::size_t count, std::uint64_t seed);

// Users with strictly more than threshold answers inside the closed window,
// ascending id.
std::vector<std::uint64_t> build_expert_pool(const std::vector<SampleRecord>& samples,
                                             std::int64_t window_begin, std::int64_t window_end,
                                             std::size_t threshold);

enum class AuxDirection { kImageToText, kTextToImage };

// One 5-way matching instance. Candidates are sample ids of the modality
// opposite the anchor; the candidate at answer_index is the anchor's pair.
struct AuxSample {
  AuxDirection direction{};
  std::uint64_t anchor = 0;
  std::array<std::uint64_t, 5> candidates{};
  std::uint32_t answer_index = 0;
};

struct AuxDatasets {
  std::vector<AuxSample> image_to_text, text_to_image;
};

// Both directions over one split: every sample anchors once per direction,
// with 4 negatives drawn uniformly without replacement from the rest of the
// same split and a uniform answer position.
AuxDatasets build_aux_datasets(const std::vector<std::uint64_t>& split_ids, Rng& rng);

}  // namespace mmcqa

#pragma once

// Synthetic corpus with a known generative story, plus the exact Bayes
// oracle for it. The oracle is the measuring stick for the learned models:
// it bounds achievable category accuracy and defines ideal expert rankings.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmcqa/data.hpp"
#include "mmcqa/rng.hpp"
#include "mmcqa/tensor.hpp"
#include "mmcqa/text.hpp"

namespace mmcqa {

// The generative story, per sample:
//   1. draw a category set S (1..3 distinct categories, set_size_probs);
//   2. draw a token count from a clipped normal;
//   3. with prob p_ambiguous the text carries no signal (uniform words);
//      otherwise each token comes from a category's vocabulary block with
//      prob topic_concentration and from the full vocabulary otherwise;
//   4. with prob p_placeholder the image is pure noise; otherwise
//      signal_rows regions equal mean(prototype[c] for c in S) plus
//      N(0, noise_std) and the rest are N(0, 1);
//   5. 0..5 answerers drawn without replacement, weighted by
//      exp(sharpness * |topics_e cap S| / |S|).
// Word j is spelled "w<j>" and owns vocabulary id kReservedIds + j; block b
// of size vocab_words / categories belongs to category b.
struct SyntheticConfig {
  std::size_t categories = 12;
  std::size_t vocab_words = 600;  // content words, multiple of categories
  double topic_concentration = 0.9;
  std::size_t image_dim = 64;
  std::size_t regions = 49;
  std::size_t signal_rows = 12;
  double noise_std = 0.35;
  double p_placeholder = 0.15;
  double p_ambiguous = 0.10;
  std::size_t experts = 30;
  double sharpness = 4.0;
  std::size_t samples = 1000;
  double mean_tokens = 70.0;
  std::vector<double> set_size_probs{0.15, 0.35, 0.50};
  std::uint64_t seed = 1;

  void validate() const;
};

// Everything hidden from a model but known to the generator.
struct SyntheticLatents {
  std::vector<std::vector<std::uint32_t>> categories;   // ascending per sample
  std::vector<std::uint8_t> text_ambiguous;
  std::vector<std::uint8_t> placeholder;
  std::vector<std::vector<std::uint32_t>> signal_rows;  // ascending per sample
};

struct SyntheticOracle {
  SyntheticConfig config;
  TensorD prototypes;  // [categories, image_dim]
  std::vector<std::vector<std::uint32_t>> expert_topics;  // 1..2 each, ascending
  SyntheticLatents latents;
};

struct SyntheticDataset {
  std::vector<SampleRecord> samples;  // id = timestamp = feature_id = index
  std::vector<std::pair<std::uint64_t, std::vector<float>>> features;  // [m * D] rows
  Vocabulary vocab;
  Taxonomy taxonomy;
  SyntheticOracle oracle;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

// samples.jsonl, features.cqaf, vocab.txt, taxonomy.tsv, oracle.json.
void save_synthetic(const SyntheticDataset& data, const std::string& dir);
SyntheticOracle load_oracle(const std::string& path);

// Exact posterior P(c in S | observations), marginalized over the category
// set, the ambiguous-text flag, and the placeholder flag. token_ids are
// vocabulary ids (reserved ids are skipped); spatial is the sample's
// [regions * image_dim] feature block. Either modality can be switched off
// to model text-only or image-only observers. The signal-row positions are
// taken from the latents, so sample_index must identify the sample.
std::vector<double> oracle_category_posterior(const SyntheticOracle& oracle,
                                              std::size_t sample_index,
                                              const std::vector<std::uint32_t>& token_ids,
                                              const std::vector<float>& spatial, bool use_text,
                                              bool use_image);

std::size_t oracle_bayes_top1(const SyntheticOracle& oracle, std::size_t sample_index,
                              const std::vector<std::uint32_t>& token_ids,
                              const std::vector<float>& spatial, bool use_text, bool use_image);

// Experts by affinity to the category set, descending; ties ascending id.
std::vector<std::uint64_t> oracle_expert_ranking(const SyntheticOracle& oracle,
                                                 const std::vector<std::uint32_t>& categories);

}  // namespace mmcqa

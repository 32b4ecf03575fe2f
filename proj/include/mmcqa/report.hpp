#pragma once

// Machine-readable evaluation output: the aggregate results table for one
// split plus the per-sample records behind it, including the per-sample
// image weight for the gated variants. Serialization is deterministic, so
// identical runs produce byte-identical report files.

#include <cstdint>
#include <string>
#include <vector>

#include "mmcqa/model.hpp"
#include "mmcqa/pipeline.hpp"

namespace mmcqa {

struct SampleReport {
  std::uint64_t id = 0;
  std::vector<std::uint32_t> gold;  // ancestor-expanded category ids
  std::uint32_t top1 = 0;           // argmax category
  bool top1_hit = false;

  // Set only for the gated variants. raw is the model's own gate value:
  // the scalar gate's sigmoid output, or the attention variant's summed
  // region mass 1 - a_{m+1}. normalized rescales the region mass so that
  // uniform attention reads as about 1; for the scalar gate the two match.
  bool has_image_weight = false;
  double image_weight = 0.0;
  double image_weight_normalized = 0.0;
};

struct EvalReport {
  std::uint64_t config_hash = 0;
  // Provenance for the emitted artifact; evaluation itself draws nothing.
  std::uint64_t seed_init = 0;
  std::uint64_t seed_data = 0;
  std::uint64_t seed_sampling = 0;
  std::string variant;
  std::string split;
  std::size_t samples = 0;
  double top1_hit = 0.0;
  double subset_exact = 0.0;
  double mrr = 0.0;
  std::vector<SampleReport> per_sample;  // corpus order within the split
};

// Classification and retrieval over one split. The classifier provides the
// per-sample records; retrieval contributes the aggregate MRR over the
// split's questions with in-pool answerers.
EvalReport evaluate_split(const Model<float>& cls, const Model<float>& ret,
                          const Corpus& corpus, const std::vector<std::size_t>& split,
                          const std::string& split_name, std::uint64_t config_hash,
                          std::size_t batch);

// Stable-key JSON; image-weight fields are absent for ungated variants.
std::string report_json(const EvalReport& report);

}  // namespace mmcqa

#pragma once

// Evaluation metrics and the dataset-difference diagnostics: accuracy
// variants for multi-label categories, mean reciprocal rank for expert
// ranking, and KNN mean-average-distance over token sets or feature rows.

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "mmcqa/rng.hpp"

namespace mmcqa {

// One question's expert ranking next to its ground truth. Scores align with
// ranked and must be non-increasing, ties broken by ascending id.
struct RankingResult {
  std::vector<std::uint64_t> ranked;   // best first
  std::vector<double> scores;          // optional; same length when present
  std::vector<std::uint64_t> relevant; // non-empty
};

struct CategoryAccuracy {
  double top1_hit = 0.0;       // argmax category lands in the gold set
  double subset_exact = 0.0;   // {c : p_c >= 0.5} equals the gold set
};

// The paper-shaped headline is top1_hit; subset_exact is co-reported since
// the source metric definition is ambiguous. Throws on empty input, ragged
// prediction rows, or an empty gold set.
CategoryAccuracy category_accuracy(const std::vector<std::vector<double>>& predictions,
                                   const std::vector<std::vector<std::uint32_t>>& golds);

// Mean over questions of 1 / rank of the best-ranked relevant expert.
// Throws on an empty list, an empty relevant set, a ranking that violates
// the (score desc, id asc) order, or a ranking with no relevant expert.
double mean_reciprocal_rank(const std::vector<RankingResult>& results);

// 1 - |intersection| / |union|; both empty gives 0.
double jaccard_needham(const std::set<std::string>& a, const std::set<std::string>& b);

// Sample n items without replacement, then for each take the mean distance
// to its k nearest neighbors inside the subset (self excluded) and average
// over the subset. distance(i, j) must be symmetric. Requires 1 <= k < n
// and n <= count.
double knn_mean_average_distance(std::size_t count,
                                 const std::function<double(std::size_t, std::size_t)>& distance,
                                 std::size_t n, std::size_t k, Rng& rng);

// The two modalities of the dataset diagnostic: Jaccard-Needham over
// bag-of-words token sets, Euclidean over unit-normalized feature rows.
double jaccard_knn_distance(const std::vector<std::set<std::string>>& items, std::size_t n,
                            std::size_t k, Rng& rng);
double feature_knn_distance(const std::vector<std::vector<float>>& items, std::size_t n,
                            std::size_t k, Rng& rng);

struct DiagnosticsCell {
  std::string modality;  // "text" or "image"
  std::size_t subset = 0;
  std::size_t k = 0;
  double mean_avg_dist = 0.0;
};

struct DiagnosticsReport {
  std::vector<DiagnosticsCell> cells;
};

// Full grid over subset sizes and K values, both modalities, one seeded
// subsample per cell. Sizes beyond the corpus are skipped.
DiagnosticsReport run_knn_diagnostics(const std::vector<std::set<std::string>>& token_sets,
                                      const std::vector<std::vector<float>>& features,
                                      const std::vector<std::size_t>& subset_sizes,
                                      const std::vector<std::size_t>& k_values, Rng& rng);

// columns: modality,n,K,mean_avg_dist
std::string diagnostics_csv(const DiagnosticsReport& report);

}  // namespace mmcqa

#include "mmcqa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mmcqa {

CategoryAccuracy category_accuracy(const std::vector<std::vector<double>>& predictions,
                                   const std::vector<std::vector<std::uint32_t>>& golds) {
  if (predictions.empty() || predictions.size() != golds.size())
    throw std::invalid_argument("category_accuracy: need matching non-empty inputs");
  const std::size_t C = predictions[0].size();
  if (C == 0) throw std::invalid_argument("category_accuracy: empty prediction row");

  double top1 = 0.0, exact = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const std::vector<double>& p = predictions[i];
    if (p.size() != C) throw std::invalid_argument("category_accuracy: ragged prediction rows");
    if (golds[i].empty()) throw std::invalid_argument("category_accuracy: empty gold set");

    const std::size_t best = std::max_element(p.begin(), p.end()) - p.begin();
    std::vector<std::uint32_t> gold = golds[i];
    std::sort(gold.begin(), gold.end());
    if (gold.back() >= C) throw std::invalid_argument("category_accuracy: gold id out of range");
    if (std::binary_search(gold.begin(), gold.end(), static_cast<std::uint32_t>(best)))
      top1 += 1.0;

    std::vector<std::uint32_t> predicted;
    for (std::size_t c = 0; c < C; ++c)
      if (p[c] >= 0.5) predicted.push_back(static_cast<std::uint32_t>(c));
    if (predicted == gold) exact += 1.0;
  }
  const double n = static_cast<double>(predictions.size());
  return {top1 / n, exact / n};
}

double mean_reciprocal_rank(const std::vector<RankingResult>& results) {
  if (results.empty()) throw std::invalid_argument("mean_reciprocal_rank: no results");
  double total = 0.0;
  for (const RankingResult& r : results) {
    if (r.relevant.empty()) throw std::invalid_argument("mean_reciprocal_rank: empty relevant set");
    if (!r.scores.empty()) {
      if (r.scores.size() != r.ranked.size())
        throw std::invalid_argument("mean_reciprocal_rank: scores misaligned with ranking");
      for (std::size_t i = 1; i < r.scores.size(); ++i) {
        const bool ordered = r.scores[i - 1] > r.scores[i] ||
                             (r.scores[i - 1] == r.scores[i] && r.ranked[i - 1] < r.ranked[i]);
        if (!ordered)
          throw std::invalid_argument("mean_reciprocal_rank: ranking violates score order");
      }
    }
    std::size_t rank = 0;
    for (std::size_t i = 0; i < r.ranked.size(); ++i) {
      if (std::find(r.relevant.begin(), r.relevant.end(), r.ranked[i]) != r.relevant.end()) {
        rank = i + 1;
        break;
      }
    }
    if (rank == 0)
      throw std::invalid_argument("mean_reciprocal_rank: no relevant expert in ranking");
    total += 1.0 / static_cast<double>(rank);
  }
  return total / static_cast<double>(results.size());
}

double jaccard_needham(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const std::string& x : a) inter += b.count(x);
  const std::size_t uni = a.size() + b.size() - inter;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

double knn_mean_average_distance(std::size_t count,
                                 const std::function<double(std::size_t, std::size_t)>& distance,
                                 std::size_t n, std::size_t k, Rng& rng) {
  if (n > count) throw std::invalid_argument("knn diagnostic: subset larger than corpus");
  if (k == 0 || k >= n) throw std::invalid_argument("knn diagnostic: need 1 <= K < n");
  const std::vector<std::size_t> subset = rng.sample_without_replacement(count, n);

  std::vector<double> per_item(n, 0.0);
#pragma omp parallel for schedule(dynamic)
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    std::vector<double> dists;
    dists.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      dists.push_back(distance(subset[i], subset[j]));
    }
    std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
    // Partial sort puts the k smallest in front; sum exactly those.
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += dists[j];
    per_item[i] = s / static_cast<double>(k);
  }
  double total = 0.0;
  for (double d : per_item) total += d;  // sequential sum keeps the result order-independent
  return total / static_cast<double>(n);
}

double jaccard_knn_distance(const std::vector<std::set<std::string>>& items, std::size_t n,
                            std::size_t k, Rng& rng) {
  return knn_mean_average_distance(
      items.size(), [&](std::size_t a, std::size_t b) { return jaccard_needham(items[a], items[b]); },
      n, k, rng);
}

double feature_knn_distance(const std::vector<std::vector<float>>& items, std::size_t n,
                            std::size_t k, Rng& rng) {
  std::vector<std::vector<double>> unit(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    double norm = 0.0;
    for (float x : items[i]) norm += double(x) * x;
    norm = std::sqrt(norm);
    unit[i].resize(items[i].size());
    for (std::size_t d = 0; d < items[i].size(); ++d)
      unit[i][d] = norm > 0.0 ? items[i][d] / norm : 0.0;
  }
  return knn_mean_average_distance(
      items.size(),
      [&](std::size_t a, std::size_t b) {
        if (unit[a].size() != unit[b].size())
          throw std::invalid_argument("knn diagnostic: ragged feature rows");
        double s = 0.0;
        for (std::size_t d = 0; d < unit[a].size(); ++d) {
          const double diff = unit[a][d] - unit[b][d];
          s += diff * diff;
        }
        return std::sqrt(s);
      },
      n, k, rng);
}

DiagnosticsReport run_knn_diagnostics(const std::vector<std::set<std::string>>& token_sets,
                                      const std::vector<std::vector<float>>& features,
                                      const std::vector<std::size_t>& subset_sizes,
                                      const std::vector<std::size_t>& k_values, Rng& rng) {
  DiagnosticsReport report;
  for (std::size_t n : subset_sizes) {
    for (std::size_t k : k_values) {
      if (k >= n) continue;
      if (n <= token_sets.size())
        report.cells.push_back({"text", n, k, jaccard_knn_distance(token_sets, n, k, rng)});
      if (n <= features.size())
        report.cells.push_back({"image", n, k, feature_knn_distance(features, n, k, rng)});
    }
  }
  return report;
}

std::string diagnostics_csv(const DiagnosticsReport& report) {
  std::ostringstream out;
  out << "modality,n,K,mean_avg_dist\n";
  out.precision(6);
  out << std::fixed;
  for (const DiagnosticsCell& c : report.cells)
    out << c.modality << ',' << c.subset << ',' << c.k << ',' << c.mean_avg_dist << '\n';
  return out.str();
}

}  // namespace mmcqa

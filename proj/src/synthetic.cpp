#include "mmcqa/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "mmcqa/image.hpp"

namespace mmcqa {
namespace {

using nlohmann::json;

constexpr double kLog2Pi = 1.8378770664093453;

double safe_log(double x) { return x > 0.0 ? std::log(x) : -std::numeric_limits<double>::infinity(); }

double logsumexp2(double a, double b) {
  if (std::isinf(a) && a < 0) return b;
  if (std::isinf(b) && b < 0) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(double(n) + 1) - std::lgamma(double(k) + 1) - std::lgamma(double(n - k) + 1);
}

// Lexicographic k-subsets of {0..n-1}.
template <typename Fn>
void for_each_subset(std::size_t n, std::size_t k, Fn&& fn) {
  std::vector<std::uint32_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = static_cast<std::uint32_t>(i);
  while (true) {
    fn(idx);
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

std::vector<std::uint32_t> sorted_u32(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  std::vector<std::uint32_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<std::uint32_t>(v[i]);
  return out;
}

double expert_affinity(const std::vector<std::uint32_t>& topics,
                       const std::vector<std::uint32_t>& cats) {
  std::size_t hits = 0;
  for (std::uint32_t t : topics)
    if (std::find(cats.begin(), cats.end(), t) != cats.end()) ++hits;
  return static_cast<double>(hits) / static_cast<double>(cats.size());
}

}  // namespace

void SyntheticConfig::validate() const {
  if (categories == 0 || categories > 24)
    throw std::invalid_argument("synthetic: categories must be in [1, 24]");
  if (vocab_words == 0 || vocab_words % categories != 0)
    throw std::invalid_argument("synthetic: vocab_words must be a positive multiple of categories");
  if (topic_concentration < 0.0 || topic_concentration > 1.0)
    throw std::invalid_argument("synthetic: topic_concentration must be in [0, 1]");
  if (image_dim == 0 || regions == 0 || signal_rows == 0 || signal_rows > regions)
    throw std::invalid_argument("synthetic: need 0 < signal_rows <= regions and image_dim > 0");
  if (noise_std <= 0.0) throw std::invalid_argument("synthetic: noise_std must be positive");
  if (p_placeholder < 0.0 || p_placeholder > 1.0 || p_ambiguous < 0.0 || p_ambiguous > 1.0)
    throw std::invalid_argument("synthetic: flag probabilities must be in [0, 1]");
  if (experts == 0) throw std::invalid_argument("synthetic: experts must be positive");
  if (samples == 0) throw std::invalid_argument("synthetic: samples must be positive");
  if (mean_tokens < 3.0) throw std::invalid_argument("synthetic: mean_tokens must be at least 3");
  if (set_size_probs.empty() || set_size_probs.size() > 3 ||
      set_size_probs.size() > categories)
    throw std::invalid_argument("synthetic: set_size_probs must cover sizes 1..3 at most");
  double total = 0.0;
  for (double p : set_size_probs) {
    if (p < 0.0) throw std::invalid_argument("synthetic: set size probabilities must be >= 0");
    total += p;
  }
  if (total <= 0.0) throw std::invalid_argument("synthetic: set size probabilities sum to zero");
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.categories;
  const std::size_t D = cfg.image_dim;
  const std::size_t V = cfg.vocab_words;
  const std::size_t B = V / C;
  const std::size_t m = cfg.regions;

  Rng master(cfg.seed);
  Rng proto_rng = master.fork(1);
  Rng expert_rng = master.fork(2);
  Rng sample_rng = master.fork(3);

  SyntheticDataset data;
  data.oracle.config = cfg;
  data.oracle.prototypes = TensorD::random_normal({C, D}, 0.0, 1.0, proto_rng, false);

  data.oracle.expert_topics.reserve(cfg.experts);
  for (std::size_t e = 0; e < cfg.experts; ++e) {
    const std::size_t n_topics = std::min<std::size_t>(1 + expert_rng.index(2), C);
    data.oracle.expert_topics.push_back(sorted_u32(expert_rng.sample_without_replacement(C, n_topics)));
  }

  for (std::size_t j = 0; j < V; ++j) data.vocab.add("w" + std::to_string(j));
  data.taxonomy = Taxonomy::flat(C);

  SyntheticLatents& lat = data.oracle.latents;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const std::size_t set_size = 1 + sample_rng.weighted(cfg.set_size_probs);
    std::vector<std::uint32_t> cats = sorted_u32(sample_rng.sample_without_replacement(C, set_size));

    const double raw_len = sample_rng.normal(cfg.mean_tokens, cfg.mean_tokens / 4.0);
    const std::size_t len = static_cast<std::size_t>(
        std::clamp<long>(std::lround(raw_len), long(kMinSeqLen), long(kMaxSeqLen)));

    const bool ambiguous = sample_rng.bernoulli(cfg.p_ambiguous);
    SampleRecord rec;
    rec.id = i;
    rec.timestamp = static_cast<std::int64_t>(i);
    rec.feature_id = i;
    rec.categories = cats;
    rec.tokens.reserve(len);
    for (std::size_t t = 0; t < len; ++t) {
      std::size_t word;
      if (!ambiguous && sample_rng.bernoulli(cfg.topic_concentration)) {
        const std::uint32_t c = cats[sample_rng.index(set_size)];
        word = c * B + sample_rng.index(B);
      } else {
        word = sample_rng.index(V);
      }
      rec.tokens.push_back("w" + std::to_string(word));
    }

    const bool placeholder = sample_rng.bernoulli(cfg.p_placeholder);
    std::vector<std::uint32_t> sig =
        sorted_u32(sample_rng.sample_without_replacement(m, cfg.signal_rows));

    std::vector<double> mu(D, 0.0);
    for (std::uint32_t c : cats)
      for (std::size_t d = 0; d < D; ++d) mu[d] += data.oracle.prototypes.at(c, d);
    for (double& x : mu) x /= static_cast<double>(set_size);

    std::vector<float> feat(m * D);
    std::size_t next_sig = 0;
    for (std::size_t r = 0; r < m; ++r) {
      const bool is_sig = next_sig < sig.size() && sig[next_sig] == r;
      if (is_sig) ++next_sig;
      for (std::size_t d = 0; d < D; ++d) {
        const double x = (is_sig && !placeholder) ? mu[d] + sample_rng.normal(0.0, cfg.noise_std)
                                                  : sample_rng.normal();
        feat[r * D + d] = static_cast<float>(x);
      }
    }

    const std::size_t n_answers = std::min(sample_rng.index(6), cfg.experts);
    if (n_answers > 0) {
      std::vector<double> weights(cfg.experts);
      for (std::size_t e = 0; e < cfg.experts; ++e)
        weights[e] = std::exp(cfg.sharpness * expert_affinity(data.oracle.expert_topics[e], cats));
      for (std::size_t a = 0; a < n_answers; ++a) {
        const std::size_t e = sample_rng.weighted(weights);
        rec.answerers.push_back(e);
        weights[e] = 0.0;
      }
      std::sort(rec.answerers.begin(), rec.answerers.end());
    }

    lat.categories.push_back(cats);
    lat.text_ambiguous.push_back(ambiguous ? 1 : 0);
    lat.placeholder.push_back(placeholder ? 1 : 0);
    lat.signal_rows.push_back(std::move(sig));
    data.features.emplace_back(i, std::move(feat));
    data.samples.push_back(std::move(rec));
  }
  return data;
}

namespace {

json config_to_json(const SyntheticConfig& c) {
  return json{{"categories", c.categories},
              {"vocab_words", c.vocab_words},
              {"topic_concentration", c.topic_concentration},
              {"image_dim", c.image_dim},
              {"regions", c.regions},
              {"signal_rows", c.signal_rows},
              {"noise_std", c.noise_std},
              {"p_placeholder", c.p_placeholder},
              {"p_ambiguous", c.p_ambiguous},
              {"experts", c.experts},
              {"sharpness", c.sharpness},
              {"samples", c.samples},
              {"mean_tokens", c.mean_tokens},
              {"set_size_probs", c.set_size_probs},
              {"seed", c.seed}};
}

SyntheticConfig config_from_json(const json& j) {
  SyntheticConfig c;
  c.categories = j.at("categories").get<std::size_t>();
  c.vocab_words = j.at("vocab_words").get<std::size_t>();
  c.topic_concentration = j.at("topic_concentration").get<double>();
  c.image_dim = j.at("image_dim").get<std::size_t>();
  c.regions = j.at("regions").get<std::size_t>();
  c.signal_rows = j.at("signal_rows").get<std::size_t>();
  c.noise_std = j.at("noise_std").get<double>();
  c.p_placeholder = j.at("p_placeholder").get<double>();
  c.p_ambiguous = j.at("p_ambiguous").get<double>();
  c.experts = j.at("experts").get<std::size_t>();
  c.sharpness = j.at("sharpness").get<double>();
  c.samples = j.at("samples").get<std::size_t>();
  c.mean_tokens = j.at("mean_tokens").get<double>();
  c.set_size_probs = j.at("set_size_probs").get<std::vector<double>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_synthetic(const SyntheticDataset& data, const std::string& dir) {
  save_records(dir + "/samples.jsonl", data.samples);
  write_feature_file(dir + "/features.cqaf", data.oracle.config.regions,
                     data.oracle.config.image_dim, data.features);
  data.vocab.save(dir + "/vocab.txt");
  data.taxonomy.save(dir + "/taxonomy.tsv");

  const SyntheticOracle& o = data.oracle;
  std::vector<std::vector<double>> protos(o.config.categories,
                                          std::vector<double>(o.config.image_dim));
  for (std::size_t c = 0; c < o.config.categories; ++c)
    for (std::size_t d = 0; d < o.config.image_dim; ++d) protos[c][d] = o.prototypes.at(c, d);

  json j{{"config", config_to_json(o.config)},
         {"prototypes", protos},
         {"expert_topics", o.expert_topics},
         {"categories", o.latents.categories},
         {"text_ambiguous", o.latents.text_ambiguous},
         {"placeholder", o.latents.placeholder},
         {"signal_rows", o.latents.signal_rows}};
  std::ofstream out(dir + "/oracle.json", std::ios::trunc);
  if (!out) throw std::runtime_error("save_synthetic: cannot open " + dir + "/oracle.json");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("save_synthetic: write failed for oracle.json");
}

SyntheticOracle load_oracle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_oracle: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_oracle: " + path + ": " + e.what());
  }
  SyntheticOracle o;
  o.config = config_from_json(j.at("config"));
  const auto protos = j.at("prototypes").get<std::vector<std::vector<double>>>();
  if (protos.size() != o.config.categories)
    throw std::runtime_error("load_oracle: prototype row count mismatch");
  o.prototypes = TensorD::zeros({o.config.categories, o.config.image_dim});
  for (std::size_t c = 0; c < protos.size(); ++c) {
    if (protos[c].size() != o.config.image_dim)
      throw std::runtime_error("load_oracle: prototype dim mismatch");
    for (std::size_t d = 0; d < protos[c].size(); ++d) o.prototypes.at(c, d) = protos[c][d];
  }
  o.expert_topics = j.at("expert_topics").get<std::vector<std::vector<std::uint32_t>>>();
  o.latents.categories = j.at("categories").get<std::vector<std::vector<std::uint32_t>>>();
  o.latents.text_ambiguous = j.at("text_ambiguous").get<std::vector<std::uint8_t>>();
  o.latents.placeholder = j.at("placeholder").get<std::vector<std::uint8_t>>();
  o.latents.signal_rows = j.at("signal_rows").get<std::vector<std::vector<std::uint32_t>>>();
  return o;
}

std::vector<double> oracle_category_posterior(const SyntheticOracle& oracle,
                                              std::size_t sample_index,
                                              const std::vector<std::uint32_t>& token_ids,
                                              const std::vector<float>& spatial, bool use_text,
                                              bool use_image) {
  const SyntheticConfig& cfg = oracle.config;
  const std::size_t C = cfg.categories;
  const std::size_t D = cfg.image_dim;
  const std::size_t V = cfg.vocab_words;
  const std::size_t B = V / C;
  if (sample_index >= oracle.latents.signal_rows.size())
    throw std::invalid_argument("oracle: sample index out of range");

  double prob_total = 0.0;
  for (double p : cfg.set_size_probs) prob_total += p;

  // Text sufficient statistics: per-block token counts.
  std::vector<std::size_t> block_counts(C, 0);
  std::size_t total_tokens = 0;
  if (use_text) {
    for (std::uint32_t id : token_ids) {
      if (id < kReservedIds) continue;
      const std::size_t w = id - kReservedIds;
      if (w >= V) throw std::invalid_argument("oracle: token id beyond vocabulary");
      ++block_counts[w / B];
      ++total_tokens;
    }
  }
  const double log_out_block = safe_log((1.0 - cfg.topic_concentration) / double(V));
  const double log_uniform_word = std::log(1.0 / double(V));

  // Image sufficient statistics over the sample's known signal rows.
  const std::vector<std::uint32_t>& sig = oracle.latents.signal_rows[sample_index];
  double total_sq = 0.0, sig_sq = 0.0;
  std::vector<double> sig_sum(D, 0.0);
  if (use_image) {
    if (spatial.size() != cfg.regions * D)
      throw std::invalid_argument("oracle: spatial block has wrong size");
    for (std::size_t r = 0; r < cfg.regions; ++r)
      for (std::size_t d = 0; d < D; ++d) total_sq += double(spatial[r * D + d]) * spatial[r * D + d];
    for (std::uint32_t r : sig) {
      for (std::size_t d = 0; d < D; ++d) {
        const double x = spatial[r * D + d];
        sig_sq += x * x;
        sig_sum[d] += x;
      }
    }
  }
  const double n_sig = static_cast<double>(sig.size());
  const double var = cfg.noise_std * cfg.noise_std;
  const double log_noise_all = -0.5 * total_sq - 0.5 * double(cfg.regions) * double(D) * kLog2Pi;
  const double log_noise_rest =
      -0.5 * (total_sq - sig_sq) - 0.5 * (double(cfg.regions) - n_sig) * double(D) * kLog2Pi;

  // Per-category dot products against the signal-row sum, and the Gram
  // matrix of prototypes; together they give mu-dependent terms for any set.
  std::vector<double> proto_dot(C, 0.0);
  std::vector<double> gram(C * C, 0.0);
  if (use_image) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t d = 0; d < D; ++d) proto_dot[c] += oracle.prototypes.at(c, d) * sig_sum[d];
    for (std::size_t a = 0; a < C; ++a)
      for (std::size_t b = a; b < C; ++b) {
        double dot = 0.0;
        for (std::size_t d = 0; d < D; ++d)
          dot += oracle.prototypes.at(a, d) * oracle.prototypes.at(b, d);
        gram[a * C + b] = gram[b * C + a] = dot;
      }
  }

  std::vector<double> log_post;
  std::vector<std::vector<std::uint32_t>> sets;
  for (std::size_t k = 1; k <= cfg.set_size_probs.size(); ++k) {
    const double pk = cfg.set_size_probs[k - 1] / prob_total;
    if (pk <= 0.0) continue;
    const double log_prior = std::log(pk) - log_choose(C, k);
    for_each_subset(C, k, [&](const std::vector<std::uint32_t>& s) {
      double lp = log_prior;
      if (use_text) {
        std::size_t in_set = 0;
        for (std::uint32_t c : s) in_set += block_counts[c];
        const double log_in_block =
            std::log((1.0 - cfg.topic_concentration) / double(V) +
                     cfg.topic_concentration / (double(k) * double(B)));
        double log_signal = double(in_set) * log_in_block;
        if (total_tokens > in_set) log_signal += double(total_tokens - in_set) * log_out_block;
        const double log_unif = double(total_tokens) * log_uniform_word;
        lp += logsumexp2(safe_log(cfg.p_ambiguous) + log_unif,
                         safe_log(1.0 - cfg.p_ambiguous) + log_signal);
      }
      if (use_image) {
        double mu_dot = 0.0, mu_sq = 0.0;
        for (std::uint32_t a : s) {
          mu_dot += proto_dot[a];
          for (std::uint32_t b : s) mu_sq += gram[a * C + b];
        }
        mu_dot /= double(k);
        mu_sq /= double(k) * double(k);
        const double quad = sig_sq - 2.0 * mu_dot + n_sig * mu_sq;
        const double log_signal = log_noise_rest - 0.5 * quad / var -
                                  0.5 * n_sig * double(D) * std::log(6.283185307179586 * var);
        lp += logsumexp2(safe_log(cfg.p_placeholder) + log_noise_all,
                         safe_log(1.0 - cfg.p_placeholder) + log_signal);
      }
      log_post.push_back(lp);
      sets.push_back(s);
    });
  }

  double mx = -std::numeric_limits<double>::infinity();
  for (double lp : log_post) mx = std::max(mx, lp);
  double z = 0.0;
  std::vector<double> post(log_post.size());
  for (std::size_t i = 0; i < log_post.size(); ++i) {
    post[i] = std::exp(log_post[i] - mx);
    z += post[i];
  }
  std::vector<double> marginal(C, 0.0);
  for (std::size_t i = 0; i < sets.size(); ++i)
    for (std::uint32_t c : sets[i]) marginal[c] += post[i] / z;
  return marginal;
}

std::size_t oracle_bayes_top1(const SyntheticOracle& oracle, std::size_t sample_index,
                              const std::vector<std::uint32_t>& token_ids,
                              const std::vector<float>& spatial, bool use_text, bool use_image) {
  const std::vector<double> marginal =
      oracle_category_posterior(oracle, sample_index, token_ids, spatial, use_text, use_image);
  return static_cast<std::size_t>(
      std::max_element(marginal.begin(), marginal.end()) - marginal.begin());
}

std::vector<std::uint64_t> oracle_expert_ranking(const SyntheticOracle& oracle,
                                                 const std::vector<std::uint32_t>& categories) {
  if (categories.empty()) throw std::invalid_argument("oracle: empty category set");
  std::vector<std::uint64_t> order(oracle.expert_topics.size());
  std::vector<double> affinity(order.size());
  for (std::size_t e = 0; e < order.size(); ++e) {
    order[e] = e;
    affinity[e] = expert_affinity(oracle.expert_topics[e], categories);
  }
  std::sort(order.begin(), order.end(), [&](std::uint64_t a, std::uint64_t b) {
    if (affinity[a] != affinity[b]) return affinity[a] > affinity[b];
    return a < b;
  });
  return order;
}

}  // namespace mmcqa

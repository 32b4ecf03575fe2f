#include "mmcqa/report.hpp"

#include <algorithm>
#include <stdexcept>

#include <json.hpp>

#include "mmcqa/heads.hpp"
#include "mmcqa/metrics.hpp"

namespace mmcqa {

namespace {

bool gated_fusion(FusionKind kind) {
  return kind == FusionKind::kGlobalWeight || kind == FusionKind::kGated;
}

}  // namespace

EvalReport evaluate_split(const Model<float>& cls, const Model<float>& ret,
                          const Corpus& corpus, const std::vector<std::size_t>& split,
                          const std::string& split_name, std::uint64_t config_hash,
                          std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("evaluate_split: batch must be positive");
  if (cls.spec.kind != ModelKind::kClassifier || ret.spec.kind != ModelKind::kRetrieval)
    throw std::invalid_argument("evaluate_split: model kinds are swapped");

  EvalReport report;
  report.config_hash = config_hash;
  report.variant = to_string(cls.spec.variant);
  report.split = split_name;
  report.samples = split.size();

  const bool uses_text = variant_uses_text(cls.spec.variant);
  const bool uses_image = variant_uses_image(cls.spec.variant);
  const bool spatial = fusion_is_spatial(cls.spec.fusion);
  const bool gated = gated_fusion(cls.spec.fusion);
  const bool attention_mass = cls.spec.fusion == FusionKind::kGated;
  const std::size_t regions = cls.spec.dims.regions;

  std::vector<std::vector<double>> predictions;
  std::vector<std::vector<std::uint32_t>> golds;
  predictions.reserve(split.size());
  golds.reserve(split.size());

  for (std::size_t at = 0; at < split.size(); at += batch) {
    const std::size_t end = std::min(split.size(), at + batch);
    const std::vector<std::size_t> idx(split.begin() + at, split.begin() + end);

    Tape<float> tape;
    StagedModel<float> sm = stage_model(tape, cls);
    TextBatch text;
    Tensor<float> image;
    if (uses_text) {
      std::vector<const TokenSequence*> seqs;
      seqs.reserve(idx.size());
      for (std::size_t i : idx) seqs.push_back(&corpus.token_ids[i]);
      text = TextBatch::pack(seqs);
    }
    if (uses_image) {
      const std::size_t dim = corpus.features.dim();
      const std::size_t rows_per = spatial ? corpus.features.regions() : 1;
      std::vector<float> data;
      data.reserve(idx.size() * rows_per * dim);
      for (std::size_t i : idx) {
        ImageFeatures f = corpus.features.get(corpus.samples[i].feature_id);
        const std::vector<float>& src = spatial ? f.spatial : f.flat;
        data.insert(data.end(), src.begin(), src.end());
      }
      image = Tensor<float>({idx.size() * rows_per, dim}, std::move(data));
    }
    FusionOut fo = model_trunk(tape, sm, uses_text ? &text : nullptr,
                               uses_image ? &image : nullptr);
    const Tensor<float>& probs = tape.value(model_classifier_probs(tape, sm, fo.v_it));
    const Tensor<float>* weights =
        gated && fo.image_weight != kNoParam ? &tape.value(fo.image_weight) : nullptr;

    for (std::size_t b = 0; b < idx.size(); ++b) {
      SampleReport sr;
      sr.id = corpus.samples[idx[b]].id;
      sr.gold = corpus.golds[idx[b]];

      std::vector<double> row(probs.cols());
      std::size_t arg = 0;
      for (std::size_t j = 0; j < probs.cols(); ++j) {
        row[j] = probs.at(b, j);
        if (row[j] > row[arg]) arg = j;
      }
      sr.top1 = static_cast<std::uint32_t>(arg);
      sr.top1_hit = std::find(sr.gold.begin(), sr.gold.end(), sr.top1) != sr.gold.end();

      if (weights != nullptr) {
        sr.has_image_weight = true;
        sr.image_weight = (*weights)[b];
        sr.image_weight_normalized =
            attention_mass ? normalized_image_weight(sr.image_weight, regions)
                           : sr.image_weight;
      }
      report.per_sample.push_back(std::move(sr));
      predictions.push_back(std::move(row));
      golds.push_back(corpus.golds[idx[b]]);
    }
  }

  if (!predictions.empty()) {
    const CategoryAccuracy acc = category_accuracy(predictions, golds);
    report.top1_hit = acc.top1_hit;
    report.subset_exact = acc.subset_exact;
  }
  report.mrr = retrieval_mrr(ret, corpus, split, batch);
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::json doc;
  doc["config_hash"] = report.config_hash;
  doc["seeds"] = {{"init", report.seed_init},
                  {"data", report.seed_data},
                  {"sampling", report.seed_sampling}};
  doc["variant"] = report.variant;
  doc["split"] = report.split;
  doc["samples"] = report.samples;
  doc["metrics"] = {{"top1_hit", report.top1_hit},
                    {"subset_exact", report.subset_exact},
                    {"mrr", report.mrr}};
  nlohmann::json rows = nlohmann::json::array();
  for (const SampleReport& s : report.per_sample) {
    nlohmann::json row;
    row["id"] = s.id;
    row["gold"] = s.gold;
    row["top1"] = s.top1;
    row["top1_hit"] = s.top1_hit;
    if (s.has_image_weight) {
      row["image_weight"] = s.image_weight;
      row["image_weight_normalized"] = s.image_weight_normalized;
    }
    rows.push_back(std::move(row));
  }
  doc["per_sample"] = std::move(rows);
  return doc.dump(2) + "\n";
}

}  // namespace mmcqa

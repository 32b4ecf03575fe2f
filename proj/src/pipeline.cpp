#include "mmcqa/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "mmcqa/checkpoint.hpp"
#include "mmcqa/heads.hpp"
#include "mmcqa/metrics.hpp"

namespace mmcqa {

void RunConfig::validate() const {
  validate_flags(variant, flags);
  if (batch_main == 0 || batch_aux == 0)
    throw std::invalid_argument("run config: batch sizes must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw std::invalid_argument("run config: learning rate must be positive");
  if (finetune_lr_scale < 0.0 || !std::isfinite(finetune_lr_scale))
    throw std::invalid_argument("run config: fine-tune rate scale must be non-negative");
  if (stage1_epochs == 0 || stage2_epochs == 0 || stage3_epochs == 0)
    throw std::invalid_argument("run config: epoch budgets must be positive");
  if (patience == 0) throw std::invalid_argument("run config: patience must be at least 1");
  if (n_neg == 0)
    throw std::invalid_argument("run config: negative sample count must be positive");
}

Corpus load_corpus(const std::string& samples_path, const std::string& taxonomy_path,
                   const std::string& features_path, std::uint64_t seed_data,
                   std::size_t expert_threshold) {
  Corpus c;
  c.samples = load_records(samples_path);
  c.taxonomy = Taxonomy::load(taxonomy_path);
  c.features = FeatureStore::load(features_path);
  c.seed_data = seed_data;
  c.expert_threshold = expert_threshold;
  if (c.samples.empty()) throw std::runtime_error("corpus: no samples in " + samples_path);

  c.by_id.reserve(c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    const SampleRecord& s = c.samples[i];
    if (!c.by_id.emplace(s.id, i).second)
      throw std::runtime_error("corpus: duplicate sample id " + std::to_string(s.id));
    if (!c.features.has(s.feature_id))
      throw std::runtime_error("corpus: no image features for sample " + std::to_string(s.id));
    for (std::uint32_t cat : s.categories) {
      if (!c.taxonomy.has(cat))
        throw std::runtime_error("corpus: sample " + std::to_string(s.id) +
                                 " names unknown category " + std::to_string(cat));
    }
  }

  c.splits = split_dataset(c.samples.size(), seed_data);

  // The vocabulary sees training text only; held-out tokens map to unknown.
  std::vector<std::vector<std::string>> train_docs;
  train_docs.reserve(c.splits.train.size());
  for (std::size_t i : c.splits.train) train_docs.push_back(c.samples[i].tokens);
  c.vocab = Vocabulary::build(train_docs, 1);

  c.token_ids.reserve(c.samples.size());
  c.golds.reserve(c.samples.size());
  for (const SampleRecord& s : c.samples) {
    TokenSequence t;
    t.original_length = s.tokens.size();
    const std::size_t n = std::min(s.tokens.size(), kMaxSeqLen);
    t.ids.reserve(n > 0 ? n : 1);
    for (std::size_t j = 0; j < n; ++j) t.ids.push_back(c.vocab.id_of(s.tokens[j]));
    if (t.ids.empty()) t.ids.push_back(kPadId);
    c.token_ids.push_back(std::move(t));
    c.golds.push_back(c.taxonomy.expand(s.categories));
  }

  // Experts qualify by their answer count in the training split alone, so
  // the pool carries no information about held-out questions.
  std::vector<SampleRecord> train_records;
  train_records.reserve(c.splits.train.size());
  for (std::size_t i : c.splits.train) train_records.push_back(c.samples[i]);
  c.expert_pool = build_expert_pool(train_records, std::numeric_limits<std::int64_t>::min(),
                                    std::numeric_limits<std::int64_t>::max(), expert_threshold);
  if (c.expert_pool.empty())
    throw std::runtime_error("corpus: expert pool is empty; lower the answer threshold");

  std::unordered_map<std::uint64_t, std::uint32_t> pool_row;
  pool_row.reserve(c.expert_pool.size());
  for (std::size_t r = 0; r < c.expert_pool.size(); ++r)
    pool_row.emplace(c.expert_pool[r], static_cast<std::uint32_t>(r));
  c.answer_rows.resize(c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    std::vector<std::uint32_t>& rows = c.answer_rows[i];
    for (std::uint64_t a : c.samples[i].answerers) {
      auto it = pool_row.find(a);
      if (it != pool_row.end()) rows.push_back(it->second);
    }
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  }
  return c;
}

ModelDims resolve_dims(const RunConfig& cfg, const Corpus& corpus) {
  ModelDims dims = cfg.dims;
  dims.text.vocab = corpus.vocab.size();
  dims.image_dim = corpus.features.dim();
  dims.regions = corpus.features.regions();
  dims.categories = corpus.taxonomy.size();
  dims.pool = corpus.expert_pool.size();
  dims.n_neg = cfg.n_neg;
  return dims;
}

AuxDatasets corpus_aux_datasets(const Corpus& corpus, const std::vector<std::size_t>& split,
                                std::uint64_t fork_key) {
  std::vector<std::uint64_t> ids;
  ids.reserve(split.size());
  for (std::size_t i : split) ids.push_back(corpus.samples.at(i).id);
  Rng rng = Rng(corpus.seed_data).fork(fork_key);
  return build_aux_datasets(ids, rng);
}

EarlyStopDecision early_stop(const std::vector<double>& history, std::size_t patience) {
  if (patience == 0) throw std::invalid_argument("early_stop: patience must be at least 1");
  if (history.empty()) throw std::invalid_argument("early_stop: empty history");
  constexpr double kMinImprovement = 1e-4;
  EarlyStopDecision d;
  d.best_epoch = 1;
  double best = history[0];
  std::size_t streak = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > best + kMinImprovement) {
      streak = 0;
    } else {
      ++streak;
    }
    if (history[i] > best) {
      best = history[i];
      d.best_epoch = i + 1;
    }
  }
  d.stop = streak >= patience;
  return d;
}

std::string format_epoch_log(const EpochLog& log) {
  std::ostringstream out;
  out << "stage=" << log.stage << " epoch=" << log.epoch << std::fixed << " train_loss="
      << std::setprecision(6) << log.train_loss << " valid_metric=" << log.valid_metric
      << " seconds=" << std::setprecision(3) << log.seconds;
  return out.str();
}

namespace {

std::vector<std::vector<std::size_t>> chunked(const std::vector<std::size_t>& order,
                                              std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < order.size(); at += batch) {
    const std::size_t end = std::min(order.size(), at + batch);
    out.emplace_back(order.begin() + at, order.begin() + end);
  }
  return out;
}

TextBatch pack_docs(const Corpus& corpus, const std::vector<std::size_t>& idx) {
  std::vector<const TokenSequence*> seqs;
  seqs.reserve(idx.size());
  for (std::size_t i : idx) seqs.push_back(&corpus.token_ids[i]);
  return TextBatch::pack(seqs);
}

// One block of feature rows per sample: m spatial rows or the single mean
// row, matching what the model's fusion consumes.
Tensor<float> image_batch(const Corpus& corpus, const std::vector<std::size_t>& idx,
                          bool spatial) {
  const std::size_t dim = corpus.features.dim();
  const std::size_t rows_per = spatial ? corpus.features.regions() : 1;
  std::vector<float> data;
  data.reserve(idx.size() * rows_per * dim);
  for (std::size_t i : idx) {
    ImageFeatures f = corpus.features.get(corpus.samples[i].feature_id);
    const std::vector<float>& src = spatial ? f.spatial : f.flat;
    data.insert(data.end(), src.begin(), src.end());
  }
  return Tensor<float>({idx.size() * rows_per, dim}, std::move(data));
}

struct TrunkInputs {
  TextBatch text;
  Tensor<float> image;
  bool has_text = false;
  bool has_image = false;

  const TextBatch* text_ptr() const { return has_text ? &text : nullptr; }
  const Tensor<float>* image_ptr() const { return has_image ? &image : nullptr; }
};

TrunkInputs main_inputs(const Corpus& corpus, const ModelSpec& spec,
                        const std::vector<std::size_t>& idx) {
  TrunkInputs in;
  if (variant_uses_text(spec.variant)) {
    in.text = pack_docs(corpus, idx);
    in.has_text = true;
  }
  if (variant_uses_image(spec.variant)) {
    in.image = image_batch(corpus, idx, fusion_is_spatial(spec.fusion));
    in.has_image = true;
  }
  return in;
}

void check_finite(double loss, const std::string& stage, std::size_t epoch,
                  std::size_t batch_index) {
  if (std::isfinite(loss)) return;
  std::ostringstream out;
  out << "training diverged: non-finite loss at " << stage << " epoch " << epoch << " batch "
      << batch_index;
  throw std::runtime_error(out.str());
}

// The auxiliary matcher scores five (text, image) pairings per sample; the
// anchor side repeats across its candidates.
struct AuxBatchInputs {
  TextBatch text;
  Tensor<float> image;
  std::vector<std::uint32_t> gold;
};

AuxBatchInputs aux_inputs(const Corpus& corpus, const std::vector<const AuxSample*>& batch,
                          bool spatial) {
  std::vector<const TokenSequence*> seqs;
  std::vector<std::size_t> image_idx;
  seqs.reserve(batch.size() * kAuxCandidates);
  image_idx.reserve(batch.size() * kAuxCandidates);
  AuxBatchInputs in;
  in.gold.reserve(batch.size());
  for (const AuxSample* s : batch) {
    const std::size_t anchor = corpus.by_id.at(s->anchor);
    const bool image_anchor = s->direction == AuxDirection::kImageToText;
    for (std::size_t j = 0; j < kAuxCandidates; ++j) {
      const std::size_t cand = corpus.by_id.at(s->candidates[j]);
      seqs.push_back(&corpus.token_ids[image_anchor ? cand : anchor]);
      image_idx.push_back(image_anchor ? anchor : cand);
    }
    in.gold.push_back(s->answer_index);
  }
  in.text = TextBatch::pack(seqs);
  const std::size_t dim = corpus.features.dim();
  const std::size_t rows_per = spatial ? corpus.features.regions() : 1;
  std::vector<float> data;
  data.reserve(image_idx.size() * rows_per * dim);
  for (std::size_t i : image_idx) {
    ImageFeatures f = corpus.features.get(corpus.samples[i].feature_id);
    const std::vector<float>& src = spatial ? f.spatial : f.flat;
    data.insert(data.end(), src.begin(), src.end());
  }
  in.image = Tensor<float>({image_idx.size() * rows_per, dim}, std::move(data));
  return in;
}

struct TrainLoopSpec {
  Model<float>* model = nullptr;
  std::string label;
  std::size_t max_epochs = 0;
  std::size_t patience = 0;  // 0 = fixed budget, no early stopping
  std::function<double(std::size_t, Rng&)> train_epoch;
  std::function<double()> valid_metric;
};

// Epoch driver shared by every stage and model: evaluate at entry, snapshot,
// train with per-epoch forked randomness, snapshot on strict improvement,
// and restore the best parameters at the end. The entry snapshot means a
// stage can never leave its model worse than it found it (on the validation
// metric it steers by).
StageResult run_train_loop(const TrainLoopSpec& spec, Rng loop_rng, std::vector<EpochLog>* log,
                           std::ostream* console) {
  ParamStore<float>& params = spec.model->params;
  std::vector<Tensor<float>> snapshot;
  auto take_snapshot = [&]() {
    snapshot.clear();
    snapshot.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) snapshot.push_back(params.value(i));
  };

  StageResult res;
  res.best_epoch = 0;
  res.best_metric = spec.valid_metric();
  take_snapshot();

  for (std::size_t epoch = 1; epoch <= spec.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng epoch_rng = loop_rng.fork(epoch);
    const double loss = spec.train_epoch(epoch, epoch_rng);
    const double metric = spec.valid_metric();
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    res.metric_history.push_back(metric);
    EpochLog entry{spec.label, epoch, loss, metric, seconds};
    if (log) log->push_back(entry);
    if (console) *console << format_epoch_log(entry) << std::endl;

    if (metric > res.best_metric) {
      res.best_metric = metric;
      res.best_epoch = epoch;
      take_snapshot();
    }
    if (spec.patience > 0 && early_stop(res.metric_history, spec.patience).stop) break;
  }

  for (std::size_t i = 0; i < params.size(); ++i) params.value(i) = snapshot[i];
  return res;
}

enum class MainTask { kClassification, kRetrieval };

// One pass over the training split (classification) or its subset with
// in-pool answerers (retrieval). Returns the mean batch loss.
double train_main_epoch(Model<float>& model, MainTask task, const RunConfig& cfg,
                        const Corpus& corpus, AdamWState& state, const AdamWConfig& ocfg,
                        const std::string& label, std::size_t epoch, Rng& er) {
  std::vector<std::size_t> order;
  if (task == MainTask::kRetrieval) {
    for (std::size_t i : corpus.splits.train)
      if (!corpus.answer_rows[i].empty()) order.push_back(i);
  } else {
    order = corpus.splits.train;
  }
  er.shuffle(order);

  double total = 0.0;
  std::size_t batches = 0;
  for (const std::vector<std::size_t>& idx : chunked(order, cfg.batch_main)) {
    Tape<float> tape;
    StagedModel<float> sm = stage_model(tape, model);
    TrunkInputs in = main_inputs(corpus, model.spec, idx);
    FusionOut fo = model_trunk(tape, sm, in.text_ptr(), in.image_ptr());

    ValueId loss;
    if (task == MainTask::kClassification) {
      std::vector<std::vector<std::uint32_t>> golds;
      golds.reserve(idx.size());
      for (std::size_t i : idx) golds.push_back(corpus.golds[i]);
      loss = bce_multilabel_loss(tape, model_classifier_probs(tape, sm, fo.v_it), golds);
    } else {
      std::vector<std::vector<std::uint32_t>> answerers;
      answerers.reserve(idx.size());
      for (std::size_t i : idx) answerers.push_back(corpus.answer_rows[i]);
      ValueId scores = model_expert_scores(tape, sm, fo.v_it);
      loss = retrieval_loss_from_plan(
          tape, scores,
          plan_retrieval(idx.size(), corpus.expert_pool.size(), answerers, cfg.n_neg, er));
    }

    const double value = tape.value(loss)[0];
    check_finite(value, label, epoch, batches);
    apply_gradients(tape, loss, sm, model, state, ocfg);
    total += value;
    ++batches;
  }
  return batches > 0 ? total / double(batches) : 0.0;
}

// Image-to-text and text-to-image batches alternate; both losses flow
// through the same parameters without any scaling between the directions.
double train_aux_epoch(Model<float>& model, const RunConfig& cfg, const Corpus& corpus,
                       const AuxDatasets& data, AdamWState& state, const AdamWConfig& ocfg,
                       const std::string& label, std::size_t epoch, Rng& er) {
  std::vector<const AuxSample*> it, ti;
  if (!cfg.flags.no_aux_it)
    for (const AuxSample& s : data.image_to_text) it.push_back(&s);
  if (!cfg.flags.no_aux_ti)
    for (const AuxSample& s : data.text_to_image) ti.push_back(&s);
  er.shuffle(it);
  er.shuffle(ti);

  auto batches_of = [&](const std::vector<const AuxSample*>& list) {
    std::vector<std::vector<const AuxSample*>> out;
    for (std::size_t at = 0; at < list.size(); at += cfg.batch_aux) {
      const std::size_t end = std::min(list.size(), at + cfg.batch_aux);
      out.emplace_back(list.begin() + at, list.begin() + end);
    }
    return out;
  };
  const std::vector<std::vector<const AuxSample*>> it_batches = batches_of(it);
  const std::vector<std::vector<const AuxSample*>> ti_batches = batches_of(ti);

  std::vector<const std::vector<const AuxSample*>*> schedule;
  schedule.reserve(it_batches.size() + ti_batches.size());
  for (std::size_t k = 0; k < std::max(it_batches.size(), ti_batches.size()); ++k) {
    if (k < it_batches.size()) schedule.push_back(&it_batches[k]);
    if (k < ti_batches.size()) schedule.push_back(&ti_batches[k]);
  }

  const bool spatial = fusion_is_spatial(model.spec.fusion);
  double total = 0.0;
  std::size_t batches = 0;
  for (const std::vector<const AuxSample*>* batch : schedule) {
    Tape<float> tape;
    StagedModel<float> sm = stage_model(tape, model);
    AuxBatchInputs in = aux_inputs(corpus, *batch, spatial);
    FusionOut fo = model_trunk(tape, sm, &in.text, &in.image);
    ValueId loss = aux_match_loss(tape, fo.v_it, model_aux_ids(sm), in.gold);

    const double value = tape.value(loss)[0];
    check_finite(value, label, epoch, batches);
    apply_gradients(tape, loss, sm, model, state, ocfg);
    total += value;
    ++batches;
  }
  return batches > 0 ? total / double(batches) : 0.0;
}

AdamWConfig optimizer_config(const RunConfig& cfg) {
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  return ocfg;
}

// Runs one main-task model through a stage's epoch loop with a fresh
// optimizer. loop_code keys this (stage, model) pair's sampling stream.
StageResult run_main_loop(Model<float>& model, MainTask task, const RunConfig& cfg,
                          const Corpus& corpus, const std::string& label,
                          std::uint64_t loop_code, std::size_t max_epochs, std::size_t patience,
                          std::vector<EpochLog>* log, std::ostream* console) {
  AdamWConfig ocfg = optimizer_config(cfg);
  AdamWState state;
  init_optimizer(model, state);

  TrainLoopSpec spec;
  spec.model = &model;
  spec.label = label;
  spec.max_epochs = max_epochs;
  spec.patience = patience;
  spec.train_epoch = [&model, task, &cfg, &corpus, &state, ocfg, label](std::size_t epoch,
                                                                        Rng& er) {
    return train_main_epoch(model, task, cfg, corpus, state, ocfg, label, epoch, er);
  };
  if (task == MainTask::kClassification) {
    spec.valid_metric = [&model, &corpus, &cfg]() {
      return classifier_top1(model, corpus, corpus.splits.valid, cfg.batch_main);
    };
  } else {
    spec.valid_metric = [&model, &corpus, &cfg]() {
      return retrieval_mrr(model, corpus, corpus.splits.valid, cfg.batch_main);
    };
  }
  return run_train_loop(spec, Rng(cfg.seed_sampling).fork(loop_code), log, console);
}

// Validation matching datasets with the disabled direction removed, so the
// steering metric only sees what the model trains on.
AuxDatasets active_aux_valid(const RunConfig& cfg, const Corpus& corpus) {
  AuxDatasets valid = corpus_aux_datasets(corpus, corpus.splits.valid, 11);
  if (cfg.flags.no_aux_it) valid.image_to_text.clear();
  if (cfg.flags.no_aux_ti) valid.text_to_image.clear();
  return valid;
}

void guard_corpus_seed(const RunConfig& cfg, const Corpus& corpus) {
  if (cfg.seed_data != corpus.seed_data)
    throw std::invalid_argument("run config data seed does not match the corpus");
}

std::vector<double> history_for(const std::vector<EpochLog>& log, const std::string& stage) {
  std::vector<double> h;
  for (const EpochLog& e : log) {
    if (e.stage == stage) h.push_back(e.valid_metric);
  }
  return h;
}

}  // namespace

TrainedModels run_stage1(const RunConfig& cfg, const Corpus& corpus, std::vector<EpochLog>* log,
                         std::ostream* console) {
  cfg.validate();
  guard_corpus_seed(cfg, corpus);
  const ModelDims dims = resolve_dims(cfg, corpus);
  const bool bimodal = variant_uses_text(cfg.variant) && variant_uses_image(cfg.variant);

  Rng init(cfg.seed_init);
  Rng cls_rng = init.fork(1);
  Rng ret_rng = init.fork(2);
  Rng aux_rng = init.fork(3);
  TrainedModels models{
      build_model<float>(make_spec(cfg.variant, ModelKind::kClassifier, dims, cfg.flags),
                         cls_rng),
      build_model<float>(make_spec(cfg.variant, ModelKind::kRetrieval, dims, cfg.flags),
                         ret_rng),
      std::nullopt};
  if (bimodal && !cfg.flags.no_aux)
    models.aux = build_model<float>(make_spec(cfg.variant, ModelKind::kAuxiliary, dims, cfg.flags),
                                    aux_rng);

  run_main_loop(models.cls, MainTask::kClassification, cfg, corpus, "stage1-classifier", 11,
                cfg.stage1_epochs, cfg.patience, log, console);
  run_main_loop(models.ret, MainTask::kRetrieval, cfg, corpus, "stage1-retrieval", 12,
                cfg.stage1_epochs, cfg.patience, log, console);

  if (models.aux) {
    const AuxDatasets train = corpus_aux_datasets(corpus, corpus.splits.train, 10);
    const AuxDatasets valid = active_aux_valid(cfg, corpus);
    Model<float>& aux = *models.aux;
    AdamWConfig ocfg = optimizer_config(cfg);
    AdamWState state;
    init_optimizer(aux, state);

    TrainLoopSpec spec;
    spec.model = &aux;
    spec.label = "stage1-auxiliary";
    spec.max_epochs = cfg.stage1_epochs;
    spec.patience = cfg.patience;
    spec.train_epoch = [&aux, &cfg, &corpus, &train, &state, ocfg](std::size_t epoch, Rng& er) {
      return train_aux_epoch(aux, cfg, corpus, train, state, ocfg, "stage1-auxiliary", epoch,
                             er);
    };
    spec.valid_metric = [&aux, &corpus, &valid, &cfg]() {
      return aux_match_accuracy(aux, corpus, valid, cfg.batch_aux);
    };
    run_train_loop(spec, Rng(cfg.seed_sampling).fork(13), log, console);
  }
  return models;
}

void run_stage2(const RunConfig& cfg, const Corpus& corpus, TrainedModels& models,
                std::vector<EpochLog>* log, std::ostream* console) {
  cfg.validate();
  guard_corpus_seed(cfg, corpus);

  // Text branches freeze; with an auxiliary twin its frozen encoder output
  // is concatenated in behind an identity-initialized reducer, which keeps
  // the stage-entry function bit-identical to the stage-1 model. Without
  // text there is nothing to freeze and the stage is a plain continuation.
  auto prepare = [&](Model<float>& m) {
    if (!variant_uses_text(cfg.variant)) return;
    if (models.aux) {
      add_stage2_params(m, models.aux->params);
    } else {
      m.params.set_lr_scale_prefix("text.", 0.0);
    }
  };
  prepare(models.cls);
  prepare(models.ret);

  run_main_loop(models.cls, MainTask::kClassification, cfg, corpus, "stage2-classifier", 21,
                cfg.stage2_epochs, 0, log, console);
  run_main_loop(models.ret, MainTask::kRetrieval, cfg, corpus, "stage2-retrieval", 22,
                cfg.stage2_epochs, 0, log, console);
}

void run_stage3(const RunConfig& cfg, const Corpus& corpus, TrainedModels& models,
                std::vector<EpochLog>* log, std::ostream* console) {
  cfg.validate();
  guard_corpus_seed(cfg, corpus);
  if (cfg.flags.no_finetune || !variant_uses_text(cfg.variant)) return;

  // Only the model's own text branch moves, at a reduced rate; fusion,
  // heads, and the grafted twin stay where stage 2 left them.
  auto prepare = [&](Model<float>& m) {
    m.params.set_lr_scale_prefix("", 0.0);
    m.params.set_lr_scale_prefix("text.", cfg.finetune_lr_scale);
  };
  prepare(models.cls);
  prepare(models.ret);

  run_main_loop(models.cls, MainTask::kClassification, cfg, corpus, "stage3-classifier", 31,
                cfg.stage3_epochs, cfg.patience, log, console);
  run_main_loop(models.ret, MainTask::kRetrieval, cfg, corpus, "stage3-retrieval", 32,
                cfg.stage3_epochs, cfg.patience, log, console);
}

double aux_match_accuracy(const Model<float>& aux, const Corpus& corpus,
                          const AuxDatasets& datasets, std::size_t batch) {
  std::vector<const AuxSample*> all;
  all.reserve(datasets.image_to_text.size() + datasets.text_to_image.size());
  for (const AuxSample& s : datasets.image_to_text) all.push_back(&s);
  for (const AuxSample& s : datasets.text_to_image) all.push_back(&s);
  if (all.empty()) return 0.0;
  if (batch == 0) throw std::invalid_argument("aux_match_accuracy: batch must be positive");

  const bool spatial = fusion_is_spatial(aux.spec.fusion);
  std::size_t hits = 0;
  for (std::size_t at = 0; at < all.size(); at += batch) {
    const std::size_t end = std::min(all.size(), at + batch);
    const std::vector<const AuxSample*> chunk(all.begin() + at, all.begin() + end);
    Tape<float> tape;
    StagedModel<float> sm = stage_model(tape, aux);
    AuxBatchInputs in = aux_inputs(corpus, chunk, spatial);
    FusionOut fo = model_trunk(tape, sm, &in.text, &in.image);
    const Tensor<float>& probs = tape.value(aux_match(tape, fo.v_it, model_aux_ids(sm)));
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < kAuxCandidates; ++j) {
        if (probs.at(b, j) > probs.at(b, arg)) arg = j;
      }
      if (arg == chunk[b]->answer_index) ++hits;
    }
  }
  return double(hits) / double(all.size());
}

double classifier_top1(const Model<float>& cls, const Corpus& corpus,
                       const std::vector<std::size_t>& split, std::size_t batch) {
  if (split.empty()) return 0.0;
  if (batch == 0) throw std::invalid_argument("classifier_top1: batch must be positive");

  std::vector<std::vector<double>> predictions;
  std::vector<std::vector<std::uint32_t>> golds;
  predictions.reserve(split.size());
  golds.reserve(split.size());
  for (const std::vector<std::size_t>& idx : chunked(split, batch)) {
    Tape<float> tape;
    StagedModel<float> sm = stage_model(tape, cls);
    TrunkInputs in = main_inputs(corpus, cls.spec, idx);
    FusionOut fo = model_trunk(tape, sm, in.text_ptr(), in.image_ptr());
    const Tensor<float>& probs = tape.value(model_classifier_probs(tape, sm, fo.v_it));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::vector<double> row(probs.cols());
      for (std::size_t j = 0; j < probs.cols(); ++j) row[j] = probs.at(b, j);
      predictions.push_back(std::move(row));
      golds.push_back(corpus.golds[idx[b]]);
    }
  }
  return category_accuracy(predictions, golds).top1_hit;
}

double retrieval_mrr(const Model<float>& ret, const Corpus& corpus,
                     const std::vector<std::size_t>& split, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("retrieval_mrr: batch must be positive");

  std::vector<RankingResult> results;
  for (const std::vector<std::size_t>& idx : chunked(split, batch)) {
    bool any = false;
    for (std::size_t i : idx) any = any || !corpus.answer_rows[i].empty();
    if (!any) continue;

    Tape<float> tape;
    StagedModel<float> sm = stage_model(tape, ret);
    TrunkInputs in = main_inputs(corpus, ret.spec, idx);
    FusionOut fo = model_trunk(tape, sm, in.text_ptr(), in.image_ptr());
    const Tensor<float>& scores = tape.value(model_expert_scores(tape, sm, fo.v_it));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::vector<std::uint32_t>& rows = corpus.answer_rows[idx[b]];
      if (rows.empty()) continue;
      RankingResult r;
      for (std::size_t p : rank_experts(scores, b, corpus.expert_pool)) {
        r.ranked.push_back(corpus.expert_pool[p]);
        r.scores.push_back(scores.at(b, p));
      }
      for (std::uint32_t row : rows) r.relevant.push_back(corpus.expert_pool[row]);
      results.push_back(std::move(r));
    }
  }
  return results.empty() ? 0.0 : mean_reciprocal_rank(results);
}

PipelineOutcome train_pipeline(const RunConfig& cfg, const Corpus& corpus,
                               const std::string& run_dir, std::uint64_t config_hash,
                               std::ostream* console) {
  cfg.validate();
  guard_corpus_seed(cfg, corpus);

  PipelineOutcome out;
  out.models = run_stage1(cfg, corpus, &out.log, console);

  // Stage-1 counts are the architecture's trainable budget; later stages
  // only shrink the trainable subset.
  const std::size_t cls_params = out.models.cls.params.trainable_count();
  const std::size_t ret_params = out.models.ret.params.trainable_count();
  const std::size_t aux_params =
      out.models.aux ? out.models.aux->params.trainable_count() : 0;

  auto save_set = [&](const std::string& stage, bool with_aux) {
    if (run_dir.empty()) return;
    auto save_one = [&](const Model<float>& m, const std::string& name) {
      CheckpointMeta meta;
      meta.config_hash = config_hash;
      meta.variant = to_string(cfg.variant);
      meta.stage = stage;
      meta.metric_history = history_for(out.log, stage + "-" + name);
      meta.epoch = meta.metric_history.size();
      save_checkpoint(run_dir + "/" + stage + "/" + name, m.params, meta);
    };
    save_one(out.models.cls, "classifier");
    save_one(out.models.ret, "retrieval");
    if (with_aux && out.models.aux) save_one(*out.models.aux, "auxiliary");
  };

  save_set("stage1", true);
  run_stage2(cfg, corpus, out.models, &out.log, console);
  save_set("stage2", false);
  run_stage3(cfg, corpus, out.models, &out.log, console);

  // "final" repeats the auxiliary model (untouched since stage 1) so the
  // directory is self-contained for evaluation tools.
  auto final_history = [&](const std::string& name) {
    std::vector<double> h = history_for(out.log, "stage3-" + name);
    if (h.empty()) h = history_for(out.log, "stage2-" + name);
    return h;
  };
  if (!run_dir.empty()) {
    auto save_final = [&](const Model<float>& m, const std::string& name,
                          std::vector<double> history) {
      CheckpointMeta meta;
      meta.config_hash = config_hash;
      meta.variant = to_string(cfg.variant);
      meta.stage = "final";
      meta.metric_history = std::move(history);
      meta.epoch = meta.metric_history.size();
      save_checkpoint(run_dir + "/final/" + name, m.params, meta);
    };
    save_final(out.models.cls, "classifier", final_history("classifier"));
    save_final(out.models.ret, "retrieval", final_history("retrieval"));
    if (out.models.aux)
      save_final(*out.models.aux, "auxiliary", history_for(out.log, "stage1-auxiliary"));
  }

  out.cls_top1 = classifier_top1(out.models.cls, corpus, corpus.splits.valid, cfg.batch_main);
  out.ret_mrr = retrieval_mrr(out.models.ret, corpus, corpus.splits.valid, cfg.batch_main);
  if (out.models.aux) {
    out.aux_accuracy =
        aux_match_accuracy(*out.models.aux, corpus, active_aux_valid(cfg, corpus), cfg.batch_aux);
  }

  if (!run_dir.empty()) {
    nlohmann::json manifest;
    manifest["config_hash"] = config_hash;
    manifest["variant"] = to_string(cfg.variant);
    manifest["flags"] = {
        {"no_image_weight", cfg.flags.no_image_weight}, {"no_aux", cfg.flags.no_aux},
        {"no_aux_it", cfg.flags.no_aux_it},             {"no_aux_ti", cfg.flags.no_aux_ti},
        {"no_attention", cfg.flags.no_attention},       {"no_finetune", cfg.flags.no_finetune},
        {"big_att", cfg.flags.big_att},                 {"big_fc", cfg.flags.big_fc}};
    manifest["seeds"] = {{"init", cfg.seed_init},
                         {"data", cfg.seed_data},
                         {"sampling", cfg.seed_sampling}};
    manifest["hyperparameters"] = {{"batch_main", cfg.batch_main},
                                   {"batch_aux", cfg.batch_aux},
                                   {"lr", cfg.lr},
                                   {"finetune_lr_scale", cfg.finetune_lr_scale},
                                   {"stage1_epochs", cfg.stage1_epochs},
                                   {"stage2_epochs", cfg.stage2_epochs},
                                   {"stage3_epochs", cfg.stage3_epochs},
                                   {"patience", cfg.patience},
                                   {"n_neg", cfg.n_neg},
                                   {"expert_threshold", cfg.expert_threshold}};
    manifest["trainable_parameters"] = {{"classifier", cls_params}, {"retrieval", ret_params}};
    if (out.models.aux) manifest["trainable_parameters"]["auxiliary"] = aux_params;
    nlohmann::json epochs = nlohmann::json::array();
    for (const EpochLog& e : out.log) {
      epochs.push_back({{"stage", e.stage},
                        {"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"valid_metric", e.valid_metric}});
    }
    manifest["epochs"] = std::move(epochs);
    manifest["final_metrics"] = {{"classifier_top1", out.cls_top1},
                                 {"retrieval_mrr", out.ret_mrr},
                                 {"auxiliary_accuracy", out.aux_accuracy}};

    std::filesystem::create_directories(run_dir);
    {
      std::ofstream file(run_dir + "/run.json", std::ios::binary | std::ios::trunc);
      if (!file) throw std::runtime_error("cannot write " + run_dir + "/run.json");
      file << manifest.dump(2) << "\n";
    }
    // Wall times live here and nowhere else; everything above is
    // deterministic for a fixed (config, seeds, build).
    std::ofstream tlog(run_dir + "/train.log", std::ios::binary | std::ios::trunc);
    if (!tlog) throw std::runtime_error("cannot write " + run_dir + "/train.log");
    for (const EpochLog& e : out.log) tlog << format_epoch_log(e) << "\n";
  }
  return out;
}

std::vector<std::pair<std::string, RunConfig>> ablation_grid(const RunConfig& base) {
  std::vector<std::pair<std::string, RunConfig>> rows;
  auto push = [&](const std::string& name, Variant v, AblationFlags f) {
    RunConfig cfg = base;
    cfg.variant = v;
    cfg.flags = f;
    cfg.validate();
    rows.emplace_back(name, std::move(cfg));
  };

  const Variant full = Variant::kGlobalWeightAttention;
  AblationFlags f;
  push("full", full, f);
  f = {};
  f.no_image_weight = true;
  push("no-image-weight", full, f);
  f = {};
  f.no_aux = true;
  push("no-aux", full, f);
  f = {};
  f.no_aux_it = true;
  push("no-aux-it", full, f);
  f = {};
  f.no_aux_ti = true;
  push("no-aux-ti", full, f);
  f = {};
  f.no_attention = true;
  push("no-attention", full, f);
  f = {};
  f.no_finetune = true;
  push("no-finetune", full, f);
  f = {};
  f.big_att = true;
  push("big-att", Variant::kSan1, f);
  f = {};
  f.big_fc = true;
  push("big-fc", Variant::kSan1, f);
  return rows;
}

}  // namespace mmcqa

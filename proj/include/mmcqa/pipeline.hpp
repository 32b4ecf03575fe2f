#pragma once

// Three-stage training orchestration: independent task models first, then
// frozen-text training with the auxiliary encoder grafted in, then a gentle
// text-only fine-tune. Every random draw forks off one of three named seeds,
// so a (config, seeds) pair pins every parameter and metric bit-for-bit.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmcqa/data.hpp"
#include "mmcqa/model.hpp"

namespace mmcqa {

struct RunConfig {
  Variant variant = Variant::kGlobalWeightAttention;
  AblationFlags flags;

  std::size_t batch_main = 128;
  std::size_t batch_aux = 32;
  double lr = 1e-3;
  double finetune_lr_scale = 0.1;  // stage-3 text learning-rate multiplier
  std::size_t stage1_epochs = 30;  // cap; early stopping usually ends sooner
  std::size_t stage2_epochs = 10;  // fixed budget, no early stopping
  std::size_t stage3_epochs = 10;  // cap
  std::size_t patience = 5;
  std::size_t n_neg = 50;

  std::uint64_t seed_init = 1;
  std::uint64_t seed_data = 2;
  std::uint64_t seed_sampling = 3;

  // Corpus shaping: experts need strictly more answers than this in the
  // training window.
  std::size_t expert_threshold = 49;

  // Architecture template; corpus-derived fields (vocab, categories, pool,
  // image_dim, regions) are overwritten when models are built.
  ModelDims dims;

  void validate() const;
};

// Tokenized, split, and indexed data ready for batching. The vocabulary is
// rebuilt from the training split alone, so validation and test tokens the
// training data never saw map to the unknown id.
struct Corpus {
  std::vector<SampleRecord> samples;
  Taxonomy taxonomy;
  Vocabulary vocab;
  FeatureStore features;
  SplitIndices splits;
  std::vector<std::uint64_t> expert_pool;                  // ascending ids
  std::vector<TokenSequence> token_ids;                    // aligned with samples
  std::vector<std::vector<std::uint32_t>> golds;           // taxonomy-expanded
  std::vector<std::vector<std::uint32_t>> answer_rows;     // in-pool rows, sorted
  std::unordered_map<std::uint64_t, std::size_t> by_id;    // sample id -> index
  std::uint64_t seed_data = 0;
  std::size_t expert_threshold = 0;
};

Corpus load_corpus(const std::string& samples_path, const std::string& taxonomy_path,
                   const std::string& features_path, std::uint64_t seed_data,
                   std::size_t expert_threshold);

// Model dims with the corpus-derived fields filled in.
ModelDims resolve_dims(const RunConfig& cfg, const Corpus& corpus);

// Matching datasets for one split, drawn from the corpus data seed; distinct
// fork keys keep train and validation candidate draws independent.
AuxDatasets corpus_aux_datasets(const Corpus& corpus, const std::vector<std::size_t>& split,
                                std::uint64_t fork_key);

struct EarlyStopDecision {
  bool stop = false;
  std::size_t best_epoch = 0;  // 1-based argmax, ties to the earliest
};

// Stops once `patience` consecutive epochs fail to beat the running best by
// more than 1e-4.
EarlyStopDecision early_stop(const std::vector<double>& history, std::size_t patience);

struct EpochLog {
  std::string stage;  // e.g. "stage1-classifier"
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_metric = 0.0;
  double seconds = 0.0;
};

std::string format_epoch_log(const EpochLog& log);

struct StageResult {
  std::vector<double> metric_history;  // validation metric per trained epoch
  std::size_t best_epoch = 0;          // 0 = the stage-entry parameters won
  double best_metric = 0.0;
};

struct TrainedModels {
  Model<float> cls;
  Model<float> ret;
  std::optional<Model<float>> aux;  // absent for single-modality or no_aux runs
};

// Stage 1: three independent models; the auxiliary matcher alternates
// image-to-text and text-to-image batches with unscaled losses.
TrainedModels run_stage1(const RunConfig& cfg, const Corpus& corpus,
                         std::vector<EpochLog>* log, std::ostream* console);

// Stage 2: text branches freeze; when an auxiliary model exists its frozen
// text encoder is concatenated in behind an identity-initialized reducer.
// Runs the full fixed budget, keeping the best epoch.
void run_stage2(const RunConfig& cfg, const Corpus& corpus, TrainedModels& models,
                std::vector<EpochLog>* log, std::ostream* console);

// Stage 3: only the model's own text branch trains, at a reduced rate.
// Skipped entirely under no_finetune or for variants without text.
void run_stage3(const RunConfig& cfg, const Corpus& corpus, TrainedModels& models,
                std::vector<EpochLog>* log, std::ostream* console);

struct PipelineOutcome {
  TrainedModels models;
  std::vector<EpochLog> log;
  double cls_top1 = 0.0;   // final validation metrics
  double ret_mrr = 0.0;
  double aux_accuracy = 0.0;  // 0 when no auxiliary model was trained
};

// All stages per the config flags. When run_dir is non-empty, writes
// checkpoints under run_dir/{stage1,stage2,final}/<model> plus a run.json
// manifest with parameter counts and final metrics.
PipelineOutcome train_pipeline(const RunConfig& cfg, const Corpus& corpus,
                               const std::string& run_dir, std::uint64_t config_hash,
                               std::ostream* console);

// Fraction of matching samples whose five-way argmax hits the hidden slot.
double aux_match_accuracy(const Model<float>& aux, const Corpus& corpus,
                          const AuxDatasets& datasets, std::size_t batch);

// Classifier top-1-in-gold-set rate over a split.
double classifier_top1(const Model<float>& cls, const Corpus& corpus,
                       const std::vector<std::size_t>& split, std::size_t batch);

// Retrieval MRR over the split's questions with at least one in-pool
// answerer; returns 0 when no question qualifies.
double retrieval_mrr(const Model<float>& ret, const Corpus& corpus,
                     const std::vector<std::size_t>& split, std::size_t batch);

// The nine ablation rows: the full model, six single-flag removals, and the
// two budget-matched stacked-attention baselines.
std::vector<std::pair<std::string, RunConfig>> ablation_grid(const RunConfig& base);

}  // namespace mmcqa

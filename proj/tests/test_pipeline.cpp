#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mmcqa/checkpoint.hpp"
#include "mmcqa/pipeline.hpp"
#include "mmcqa/synthetic.hpp"

using namespace mmcqa;

namespace {

std::string tmp_dir(const std::string& stem) {
  const std::string dir = (std::filesystem::temp_directory_path() / stem).string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Every parameter tensor's raw bytes, store order. Equal strings mean
// bit-identical models.
std::string param_bytes(const ParamStore<float>& params) {
  std::string out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<float>& data = params.value(i).data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  }
  return out;
}

// Forty hand-made records over a two-level taxonomy: roots 0 and 1, leaves
// 2 and 3. Each doc is two tokens, one unique to the sample. Answerer 7
// covers half the questions, 8 a quarter, 9 exactly one.
std::vector<SampleRecord> hand_records() {
  std::vector<SampleRecord> recs;
  for (std::size_t i = 0; i < 40; ++i) {
    SampleRecord r;
    r.id = 1000 + i;
    r.tokens = {"tok" + std::to_string(i), "common"};
    r.categories = {static_cast<std::uint32_t>(2 + i % 2)};
    if (i % 2 == 0) r.answerers.push_back(7);
    if (i % 4 == 0) r.answerers.push_back(8);
    if (i == 3) r.answerers.push_back(9);
    r.timestamp = static_cast<std::int64_t>(i);
    r.feature_id = i;
    recs.push_back(std::move(r));
  }
  recs[5].tokens.assign(kMaxSeqLen + 50, "common");
  recs[6].tokens.clear();
  return recs;
}

Taxonomy hand_taxonomy() {
  Taxonomy tax;
  tax.add({0, "hardware", -1});
  tax.add({1, "software", -1});
  tax.add({2, "laptops", 0});
  tax.add({3, "editors", 1});
  return tax;
}

struct CorpusFiles {
  std::string samples, taxonomy, features;
};

CorpusFiles write_hand_corpus(const std::string& dir, float feature_value) {
  const std::vector<SampleRecord> recs = hand_records();
  CorpusFiles files{dir + "/samples.jsonl", dir + "/taxonomy.tsv", dir + "/features.cqaf"};
  save_records(files.samples, recs);
  hand_taxonomy().save(files.taxonomy);
  std::vector<std::pair<std::uint64_t, std::vector<float>>> feats;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    std::vector<float> rows(3 * 5);
    for (std::size_t j = 0; j < rows.size(); ++j)
      rows[j] = std::isnan(feature_value) ? feature_value
                                          : feature_value + 0.01f * float(i) + 0.001f * float(j);
    feats.emplace_back(recs[i].feature_id, std::move(rows));
  }
  write_feature_file(files.features, 3, 5, feats);
  return files;
}

// Small grounded corpus the training smoke tests share: four categories,
// enough image signal that grounding is learnable in a couple of epochs.
SyntheticConfig tiny_synth() {
  SyntheticConfig s;
  s.categories = 4;
  s.vocab_words = 80;
  s.image_dim = 8;
  s.regions = 4;
  s.signal_rows = 2;
  s.noise_std = 0.3;
  s.p_placeholder = 0.2;
  s.p_ambiguous = 0.2;
  s.experts = 8;
  s.samples = 120;
  s.mean_tokens = 12.0;
  s.seed = 77;
  return s;
}

Corpus tiny_corpus() {
  const std::string dir = tmp_dir("mmcqa_pipe_synth");
  save_synthetic(generate_synthetic(tiny_synth()), dir);
  return load_corpus(dir + "/samples.jsonl", dir + "/taxonomy.tsv", dir + "/features.cqaf", 2,
                     3);
}

RunConfig tiny_run(Variant v) {
  RunConfig cfg;
  cfg.variant = v;
  cfg.batch_main = 16;
  cfg.batch_aux = 8;
  cfg.lr = 1e-3;
  cfg.stage1_epochs = 2;
  cfg.stage2_epochs = 2;
  cfg.stage3_epochs = 2;
  cfg.patience = 5;
  cfg.n_neg = 4;
  cfg.seed_init = 1;
  cfg.seed_data = 2;
  cfg.seed_sampling = 3;
  cfg.expert_threshold = 3;
  cfg.dims.text.embed = 8;
  cfg.dims.text.filters = {4, 4, 4};
  cfg.dims.text.d = 8;
  cfg.dims.attention_dim = 8;
  cfg.dims.aux_channels = 4;
  return cfg;
}

}  // namespace

TEST_CASE("early stopping follows the patience contract") {
  CHECK_THROWS_AS(early_stop({}, 2), std::invalid_argument);
  CHECK_THROWS_AS(early_stop({0.5}, 0), std::invalid_argument);

  SUBCASE("plateau exhausts patience") {
    EarlyStopDecision d = early_stop({0.5, 0.6, 0.6, 0.6}, 2);
    CHECK(d.stop);
    CHECK(d.best_epoch == 2);
    CHECK_FALSE(early_stop({0.5, 0.6, 0.6}, 2).stop);
  }
  SUBCASE("monotone improvement never stops") {
    std::vector<double> history;
    for (int i = 0; i < 50; ++i) {
      history.push_back(0.1 + 0.01 * i);
      EarlyStopDecision d = early_stop(history, 2);
      CHECK_FALSE(d.stop);
      CHECK(d.best_epoch == history.size());
    }
  }
  SUBCASE("a late rebound resets the streak") {
    EarlyStopDecision d = early_stop({0.7, 0.69, 0.71}, 2);
    CHECK_FALSE(d.stop);
    CHECK(d.best_epoch == 3);
  }
  SUBCASE("gains below the threshold count as no improvement") {
    EarlyStopDecision d = early_stop({0.5, 0.50005, 0.50009}, 2);
    CHECK(d.stop);
    // argmax still tracks the raw maximum
    CHECK(d.best_epoch == 3);
  }
  SUBCASE("single epoch continues") {
    EarlyStopDecision d = early_stop({0.4}, 1);
    CHECK_FALSE(d.stop);
    CHECK(d.best_epoch == 1);
  }
  SUBCASE("ties pick the earliest epoch") {
    CHECK(early_stop({0.3, 0.8, 0.8, 0.8}, 5).best_epoch == 2);
  }
}

TEST_CASE("epoch log lines have a fixed layout") {
  EpochLog e{"stage1-classifier", 3, 0.5, 0.25, 1.5};
  CHECK(format_epoch_log(e) ==
        "stage=stage1-classifier epoch=3 train_loss=0.500000 valid_metric=0.250000 "
        "seconds=1.500");
}

TEST_CASE("run config validation") {
  RunConfig cfg = tiny_run(Variant::kGlobalWeightAttention);
  CHECK_NOTHROW(cfg.validate());

  RunConfig bad = cfg;
  bad.patience = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_main = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.finetune_lr_scale = -0.1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.stage2_epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.variant = Variant::kSan1;
  bad.flags.no_attention = true;  // only meaningful on the gated model
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("the ablation grid covers the nine rows") {
  RunConfig base = tiny_run(Variant::kTextOnly);
  base.lr = 0.005;
  base.seed_init = 42;
  std::vector<std::pair<std::string, RunConfig>> rows = ablation_grid(base);
  REQUIRE(rows.size() == 9);

  const std::vector<std::string> names = {"full",      "no-image-weight", "no-aux",
                                          "no-aux-it", "no-aux-ti",       "no-attention",
                                          "no-finetune", "big-att",       "big-fc"};
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].first == names[i]);

  auto flags_set = [](const AblationFlags& f) {
    return int(f.no_image_weight) + int(f.no_aux) + int(f.no_aux_it) + int(f.no_aux_ti) +
           int(f.no_attention) + int(f.no_finetune) + int(f.big_att) + int(f.big_fc);
  };
  CHECK(rows[0].second.variant == Variant::kGlobalWeightAttention);
  CHECK(flags_set(rows[0].second.flags) == 0);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(flags_set(rows[i].second.flags) == 1);
  CHECK(rows[5].second.flags.no_attention);
  CHECK(rows[6].second.flags.no_finetune);
  CHECK(rows[7].second.variant == Variant::kSan1);
  CHECK(rows[7].second.flags.big_att);
  CHECK(rows[8].second.variant == Variant::kSan1);
  CHECK(rows[8].second.flags.big_fc);
  // hyperparameters and seeds pass through untouched
  for (const auto& [name, cfg] : rows) {
    CHECK(cfg.lr == 0.005);
    CHECK(cfg.seed_init == 42);
    CHECK(cfg.batch_main == base.batch_main);
  }
}

TEST_CASE("corpus building: splits, vocabulary scope, pool, and indexes") {
  const std::string dir = tmp_dir("mmcqa_pipe_hand");
  CorpusFiles files = write_hand_corpus(dir, 0.5f);
  Corpus c = load_corpus(files.samples, files.taxonomy, files.features, 9, 5);

  CHECK(c.samples.size() == 40);
  CHECK(c.seed_data == 9);
  CHECK(c.expert_threshold == 5);

  SUBCASE("splits are 80/10/10, disjoint, and cover everything") {
    CHECK(c.splits.train.size() == 32);
    CHECK(c.splits.valid.size() == 4);
    CHECK(c.splits.test.size() == 4);
    std::set<std::size_t> seen;
    for (const auto* split : {&c.splits.train, &c.splits.valid, &c.splits.test})
      for (std::size_t i : *split) CHECK(seen.insert(i).second);
    CHECK(seen.size() == 40);
  }

  SUBCASE("vocabulary comes from the training split alone") {
    std::set<std::size_t> train(c.splits.train.begin(), c.splits.train.end());
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
      const std::string unique = "tok" + std::to_string(i);
      if (i == 5 || i == 6) continue;  // rewritten docs have no unique token
      if (train.count(i)) {
        CHECK(c.vocab.id_of(unique) != kUnkId);
      } else {
        CHECK(c.vocab.id_of(unique) == kUnkId);
      }
    }
    CHECK(c.vocab.id_of("common") != kUnkId);
  }

  SUBCASE("token ids truncate long docs and pad blank ones") {
    CHECK(c.token_ids[5].ids.size() == kMaxSeqLen);
    CHECK(c.token_ids[5].original_length == kMaxSeqLen + 50);
    CHECK(c.token_ids[6].ids == std::vector<std::uint32_t>{kPadId});
    CHECK(c.token_ids[6].real_length() == 0);
    CHECK(c.token_ids[0].ids.size() == 2);
  }

  SUBCASE("gold sets are ancestor-expanded") {
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
      const std::uint32_t leaf = c.samples[i].categories[0];
      const std::uint32_t root = leaf - 2;
      CHECK(c.golds[i] == std::vector<std::uint32_t>{root, leaf});
    }
  }

  SUBCASE("expert pool counts training answers only, strictly over threshold") {
    std::map<std::uint64_t, std::size_t> counts;
    for (std::size_t i : c.splits.train)
      for (std::uint64_t a : c.samples[i].answerers) ++counts[a];
    std::vector<std::uint64_t> expected;
    for (const auto& [id, n] : counts)
      if (n > c.expert_threshold) expected.push_back(id);
    CHECK(c.expert_pool == expected);
    CHECK(!c.expert_pool.empty());
    // answerer 9 has a single answer overall and can never qualify
    for (std::uint64_t id : c.expert_pool) CHECK(id != 9);
  }

  SUBCASE("answer rows map back to in-pool answerers, sorted") {
    std::set<std::uint64_t> pool(c.expert_pool.begin(), c.expert_pool.end());
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
      const std::vector<std::uint32_t>& rows = c.answer_rows[i];
      CHECK(std::is_sorted(rows.begin(), rows.end()));
      std::set<std::uint64_t> from_rows;
      for (std::uint32_t r : rows) {
        REQUIRE(r < c.expert_pool.size());
        from_rows.insert(c.expert_pool[r]);
      }
      std::set<std::uint64_t> expected;
      for (std::uint64_t a : c.samples[i].answerers)
        if (pool.count(a)) expected.insert(a);
      CHECK(from_rows == expected);
    }
  }

  SUBCASE("by_id inverts the sample order") {
    for (std::size_t i = 0; i < c.samples.size(); ++i) CHECK(c.by_id.at(c.samples[i].id) == i);
  }

  SUBCASE("loading never touches feature payloads") { CHECK(c.features.read_count() == 0); }
}

TEST_CASE("corpus loading rejects broken inputs") {
  const std::string dir = tmp_dir("mmcqa_pipe_badcorpus");

  SUBCASE("missing image features") {
    std::vector<SampleRecord> recs = hand_records();
    recs[7].feature_id = 9999;
    save_records(dir + "/s.jsonl", recs);
    hand_taxonomy().save(dir + "/t.tsv");
    std::vector<std::pair<std::uint64_t, std::vector<float>>> feats;
    for (const SampleRecord& r : recs)
      if (r.feature_id != 9999) feats.emplace_back(r.feature_id, std::vector<float>(15, 0.1f));
    write_feature_file(dir + "/f.cqaf", 3, 5, feats);
    CHECK_THROWS_WITH_AS(load_corpus(dir + "/s.jsonl", dir + "/t.tsv", dir + "/f.cqaf", 1, 5),
                         doctest::Contains("features"), std::runtime_error);
  }

  SUBCASE("duplicate sample ids") {
    std::vector<SampleRecord> recs = hand_records();
    recs[3].id = recs[2].id;
    save_records(dir + "/s.jsonl", recs);
    hand_taxonomy().save(dir + "/t.tsv");
    std::vector<std::pair<std::uint64_t, std::vector<float>>> feats;
    for (const SampleRecord& r : recs) feats.emplace_back(r.feature_id, std::vector<float>(15, 0.1f));
    write_feature_file(dir + "/f.cqaf", 3, 5, feats);
    CHECK_THROWS_WITH_AS(load_corpus(dir + "/s.jsonl", dir + "/t.tsv", dir + "/f.cqaf", 1, 5),
                         doctest::Contains("duplicate"), std::runtime_error);
  }

  SUBCASE("unknown category id") {
    std::vector<SampleRecord> recs = hand_records();
    recs[4].categories = {77};
    save_records(dir + "/s.jsonl", recs);
    hand_taxonomy().save(dir + "/t.tsv");
    std::vector<std::pair<std::uint64_t, std::vector<float>>> feats;
    for (const SampleRecord& r : recs) feats.emplace_back(r.feature_id, std::vector<float>(15, 0.1f));
    write_feature_file(dir + "/f.cqaf", 3, 5, feats);
    CHECK_THROWS_WITH_AS(load_corpus(dir + "/s.jsonl", dir + "/t.tsv", dir + "/f.cqaf", 1, 5),
                         doctest::Contains("category"), std::runtime_error);
  }

  SUBCASE("an impossible expert threshold empties the pool") {
    CorpusFiles files = write_hand_corpus(dir, 0.5f);
    CHECK_THROWS_WITH_AS(load_corpus(files.samples, files.taxonomy, files.features, 1, 1000),
                         doctest::Contains("pool"), std::runtime_error);
  }
}

TEST_CASE("resolved dims mirror the corpus") {
  const std::string dir = tmp_dir("mmcqa_pipe_dims");
  CorpusFiles files = write_hand_corpus(dir, 0.5f);
  Corpus c = load_corpus(files.samples, files.taxonomy, files.features, 9, 5);
  RunConfig cfg = tiny_run(Variant::kGlobalWeightAttention);
  cfg.n_neg = 7;

  ModelDims dims = resolve_dims(cfg, c);
  CHECK(dims.text.vocab == c.vocab.size());
  CHECK(dims.categories == 4);
  CHECK(dims.pool == c.expert_pool.size());
  CHECK(dims.image_dim == 5);
  CHECK(dims.regions == 3);
  CHECK(dims.n_neg == 7);
  // template fields survive
  CHECK(dims.text.d == 8);
  CHECK(dims.attention_dim == 8);
}

TEST_CASE("auxiliary datasets draw from the data seed and stay inside the split") {
  Corpus c = tiny_corpus();
  AuxDatasets valid = corpus_aux_datasets(c, c.splits.valid, 11);
  AuxDatasets valid_again = corpus_aux_datasets(c, c.splits.valid, 11);
  AuxDatasets train = corpus_aux_datasets(c, c.splits.train, 10);

  CHECK(valid.image_to_text.size() == c.splits.valid.size());
  CHECK(valid.text_to_image.size() == c.splits.valid.size());
  CHECK(train.image_to_text.size() == c.splits.train.size());

  std::set<std::uint64_t> valid_ids;
  for (std::size_t i : c.splits.valid) valid_ids.insert(c.samples[i].id);
  auto check_samples = [&](const std::vector<AuxSample>& list, AuxDirection dir) {
    for (const AuxSample& s : list) {
      CHECK(s.direction == dir);
      CHECK(valid_ids.count(s.anchor) == 1);
      REQUIRE(s.answer_index < 5);
      CHECK(s.candidates[s.answer_index] == s.anchor);
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(valid_ids.count(s.candidates[j]) == 1);
        if (j != s.answer_index) CHECK(s.candidates[j] != s.anchor);
      }
    }
  };
  check_samples(valid.image_to_text, AuxDirection::kImageToText);
  check_samples(valid.text_to_image, AuxDirection::kTextToImage);

  // same fork key twice -> identical draws; the train key differs
  REQUIRE(valid_again.image_to_text.size() == valid.image_to_text.size());
  bool identical = true;
  for (std::size_t i = 0; i < valid.image_to_text.size(); ++i) {
    identical = identical &&
                valid.image_to_text[i].candidates == valid_again.image_to_text[i].candidates &&
                valid.image_to_text[i].anchor == valid_again.image_to_text[i].anchor;
  }
  CHECK(identical);
}

TEST_CASE("evaluation metrics are invariant to batch size") {
  Corpus c = tiny_corpus();
  RunConfig cfg = tiny_run(Variant::kGlobalWeight);
  const ModelDims dims = resolve_dims(cfg, c);
  Rng rng(123);
  Model<float> cls =
      build_model<float>(make_spec(cfg.variant, ModelKind::kClassifier, dims, cfg.flags), rng);
  Model<float> ret =
      build_model<float>(make_spec(cfg.variant, ModelKind::kRetrieval, dims, cfg.flags), rng);

  CHECK(classifier_top1(cls, c, c.splits.valid, 7) ==
        classifier_top1(cls, c, c.splits.valid, 16));
  CHECK(retrieval_mrr(ret, c, c.splits.valid, 5) == retrieval_mrr(ret, c, c.splits.valid, 32));

  // empty split degenerates to zero rather than throwing
  CHECK(classifier_top1(cls, c, {}, 8) == 0.0);
  CHECK(retrieval_mrr(ret, c, {}, 8) == 0.0);

  Model<float> aux =
      build_model<float>(make_spec(cfg.variant, ModelKind::kAuxiliary, dims, cfg.flags), rng);
  AuxDatasets valid = corpus_aux_datasets(c, c.splits.valid, 11);
  CHECK(aux_match_accuracy(aux, c, valid, 3) == aux_match_accuracy(aux, c, valid, 64));
  CHECK(aux_match_accuracy(aux, c, AuxDatasets{}, 8) == 0.0);
}

TEST_CASE("stage 1 builds the model family the flags call for") {
  Corpus c = tiny_corpus();

  SUBCASE("data seed mismatch is rejected") {
    RunConfig cfg = tiny_run(Variant::kTextOnly);
    cfg.seed_data = 999;
    CHECK_THROWS_AS(run_stage1(cfg, c, nullptr, nullptr), std::invalid_argument);
  }

  SUBCASE("bimodal variant trains an auxiliary matcher") {
    RunConfig cfg = tiny_run(Variant::kGlobalWeight);
    cfg.stage1_epochs = 1;
    std::vector<EpochLog> log;
    TrainedModels models = run_stage1(cfg, c, &log, nullptr);
    CHECK(models.aux.has_value());
    bool saw_aux = false;
    for (const EpochLog& e : log) saw_aux = saw_aux || e.stage == "stage1-auxiliary";
    CHECK(saw_aux);
  }

  SUBCASE("no_aux skips the matcher") {
    RunConfig cfg = tiny_run(Variant::kGlobalWeight);
    cfg.flags.no_aux = true;
    cfg.stage1_epochs = 1;
    TrainedModels models = run_stage1(cfg, c, nullptr, nullptr);
    CHECK_FALSE(models.aux.has_value());
  }

  SUBCASE("text-only runs never touch the feature store") {
    Corpus fresh = tiny_corpus();
    RunConfig cfg = tiny_run(Variant::kTextOnly);
    cfg.stage1_epochs = 1;
    TrainedModels models = run_stage1(cfg, fresh, nullptr, nullptr);
    run_stage2(cfg, fresh, models, nullptr, nullptr);
    run_stage3(cfg, fresh, models, nullptr, nullptr);
    CHECK_FALSE(models.aux.has_value());
    CHECK(fresh.features.read_count() == 0);
  }
}

TEST_CASE("stage 2 freezes text and grafts the auxiliary encoder") {
  Corpus c = tiny_corpus();
  RunConfig cfg = tiny_run(Variant::kGlobalWeight);
  cfg.stage1_epochs = 1;
  cfg.stage2_epochs = 1;
  std::vector<EpochLog> log;

  TrainedModels models = run_stage1(cfg, c, &log, nullptr);
  REQUIRE(models.aux.has_value());
  const double m1 = classifier_top1(models.cls, c, c.splits.valid, cfg.batch_main);
  const double r1 = retrieval_mrr(models.ret, c, c.splits.valid, cfg.batch_main);

  // record the frozen-side bytes before stage 2 touches anything
  auto text_bytes = [](const Model<float>& m, const std::string& prefix) {
    std::string out;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      if (m.params.name(i).rfind(prefix, 0) != 0) continue;
      const std::vector<float>& data = m.params.value(i).data();
      out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
    }
    return out;
  };
  const std::string cls_text_before = text_bytes(models.cls, "text.");
  const std::string aux_text_before = text_bytes(*models.aux, "text.");
  const std::string aux_all_before = param_bytes(models.aux->params);

  run_stage2(cfg, c, models, &log, nullptr);

  CHECK(models.cls.spec.stage2_concat);
  CHECK(models.ret.spec.stage2_concat);
  CHECK(text_bytes(models.cls, "text.") == cls_text_before);
  CHECK(text_bytes(models.cls, "aux.") == aux_text_before);
  CHECK(param_bytes(models.aux->params) == aux_all_before);  // matcher is frozen after stage 1

  // the identity-initialized reducer makes the stage-2 entry function equal
  // the stage-1 model, so keeping the best epoch can only help
  const double m2 = classifier_top1(models.cls, c, c.splits.valid, cfg.batch_main);
  const double r2 = retrieval_mrr(models.ret, c, c.splits.valid, cfg.batch_main);
  CHECK(m2 >= m1);
  CHECK(r2 >= r1);

  // stage 3 at the standard reduced rate can only improve or tie as well
  run_stage3(cfg, c, models, &log, nullptr);
  const double m3 = classifier_top1(models.cls, c, c.splits.valid, cfg.batch_main);
  CHECK(m3 >= m2);
  for (std::size_t i = 0; i < models.cls.params.size(); ++i) {
    const std::string& name = models.cls.params.name(i);
    const double scale = models.cls.params.lr_scale(i);
    if (name.rfind("text.", 0) == 0) {
      CHECK(scale == cfg.finetune_lr_scale);
    } else {
      CHECK(scale == 0.0);
    }
  }
}

TEST_CASE("stage 3 honors the fine-tune flags") {
  Corpus c = tiny_corpus();
  RunConfig cfg = tiny_run(Variant::kGlobalWeight);
  cfg.stage1_epochs = 1;
  cfg.stage2_epochs = 1;
  cfg.stage3_epochs = 2;

  TrainedModels models = run_stage1(cfg, c, nullptr, nullptr);
  run_stage2(cfg, c, models, nullptr, nullptr);
  const std::string cls_after2 = param_bytes(models.cls.params);
  const std::string ret_after2 = param_bytes(models.ret.params);
  const double m2 = classifier_top1(models.cls, c, c.splits.valid, cfg.batch_main);

  SUBCASE("zero fine-tune rate leaves parameters and metrics untouched") {
    RunConfig zero = cfg;
    zero.finetune_lr_scale = 0.0;
    std::vector<EpochLog> log;
    run_stage3(zero, c, models, &log, nullptr);
    CHECK(param_bytes(models.cls.params) == cls_after2);
    CHECK(param_bytes(models.ret.params) == ret_after2);
    CHECK(classifier_top1(models.cls, c, c.splits.valid, cfg.batch_main) == m2);
    CHECK(log.size() == 2 * cfg.stage3_epochs);  // it still trains, to no effect
  }

  SUBCASE("no_finetune skips the stage outright") {
    RunConfig skip = cfg;
    skip.flags.no_finetune = true;
    std::vector<EpochLog> log;
    run_stage3(skip, c, models, &log, nullptr);
    CHECK(log.empty());
    CHECK(param_bytes(models.cls.params) == cls_after2);
    CHECK(param_bytes(models.ret.params) == ret_after2);
  }
}

TEST_CASE("the full pipeline is deterministic and writes a complete run directory") {
  Corpus c = tiny_corpus();
  RunConfig cfg = tiny_run(Variant::kGlobalWeightAttention);
  const std::string dir_a = tmp_dir("mmcqa_pipe_run_a");
  const std::string dir_b = tmp_dir("mmcqa_pipe_run_b");

  PipelineOutcome a = train_pipeline(cfg, c, dir_a, 0xfeedbeefULL, nullptr);
  PipelineOutcome b = train_pipeline(cfg, c, dir_b, 0xfeedbeefULL, nullptr);

  CHECK(a.cls_top1 == b.cls_top1);
  CHECK(a.ret_mrr == b.ret_mrr);
  CHECK(a.aux_accuracy == b.aux_accuracy);
  CHECK(param_bytes(a.models.cls.params) == param_bytes(b.models.cls.params));
  CHECK(param_bytes(a.models.ret.params) == param_bytes(b.models.ret.params));

  CHECK(slurp(dir_a + "/run.json") == slurp(dir_b + "/run.json"));
  for (const std::string rel : {"stage1/classifier", "stage1/retrieval", "stage1/auxiliary",
                                "stage2/classifier", "stage2/retrieval", "final/classifier",
                                "final/retrieval", "final/auxiliary"}) {
    CAPTURE(rel);
    CHECK(slurp(dir_a + "/" + rel + "/manifest.txt") == slurp(dir_b + "/" + rel + "/manifest.txt"));
    CHECK(slurp(dir_a + "/" + rel + "/params.bin") == slurp(dir_b + "/" + rel + "/params.bin"));
  }

  // checkpoints reload against the run's config hash, and the final
  // classifier carries the stage-2 graft (its store holds aux.* tensors)
  LoadedCheckpoint final_cls = load_checkpoint(dir_a + "/final/classifier", 0xfeedbeefULL);
  CHECK(final_cls.meta.variant == "global-weight-attention");
  CHECK(final_cls.meta.stage == "final");
  CHECK(final_cls.params.has("stage2.reduce_w"));
  CHECK(final_cls.params.has("aux.conv2_w"));
  CHECK_THROWS_AS(load_checkpoint(dir_a + "/final/classifier", 0x1234ULL), std::runtime_error);

  // the manifest records the stage-1 trainable budgets and epoch history
  const std::string manifest = slurp(dir_a + "/run.json");
  CHECK(manifest.find("\"trainable_parameters\"") != std::string::npos);
  CHECK(manifest.find("\"classifier\"") != std::string::npos);
  CHECK(manifest.find("\"auxiliary\"") != std::string::npos);
  CHECK(manifest.find("\"epochs\"") != std::string::npos);
  CHECK(manifest.find("\"final_metrics\"") != std::string::npos);
  CHECK(manifest.find("seconds") == std::string::npos);  // wall time stays out of results
  CHECK(slurp(dir_a + "/train.log").find("stage=stage1-classifier epoch=1") !=
        std::string::npos);

  // the epoch log covers every stage of the full variant
  std::set<std::string> stages;
  for (const EpochLog& e : a.log) stages.insert(e.stage);
  for (const std::string expected :
       {"stage1-classifier", "stage1-retrieval", "stage1-auxiliary", "stage2-classifier",
        "stage2-retrieval", "stage3-classifier", "stage3-retrieval"}) {
    CAPTURE(expected);
    CHECK(stages.count(expected) == 1);
  }
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  // An absurd learning rate overflows float parameters after one step; the
  // next batch's loss goes non-finite and the run must abort, not retry.
  const std::string dir = tmp_dir("mmcqa_pipe_nan");
  CorpusFiles files = write_hand_corpus(dir, 0.5f);
  Corpus c = load_corpus(files.samples, files.taxonomy, files.features, 2, 5);
  RunConfig cfg = tiny_run(Variant::kGlobalWeight);
  cfg.lr = 1e30;
  cfg.stage1_epochs = 3;
  CHECK_THROWS_WITH_AS(run_stage1(cfg, c, nullptr, nullptr), doctest::Contains("diverged"),
                       std::runtime_error);
}

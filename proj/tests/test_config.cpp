#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "mmcqa/config.hpp"

using namespace mmcqa;

namespace {

std::string write_tmp(const std::string& text) {
  const std::string path =
      (std::filesystem::temp_directory_path() / "mmcqa_config_test.toml").string();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  return path;
}

}  // namespace

TEST_CASE("empty document yields all defaults") {
  const FileConfig cfg = parse_config("");
  CHECK(cfg.run.variant == Variant::kGlobalWeightAttention);
  CHECK(cfg.run.batch_main == 128);
  CHECK(cfg.run.batch_aux == 32);
  CHECK(cfg.run.lr == doctest::Approx(1e-3));
  CHECK(cfg.run.patience == 5);
  CHECK(cfg.run.expert_threshold == 49);
  CHECK_FALSE(cfg.run.flags.no_aux);
  CHECK(cfg.synth.categories == 12);
  CHECK(cfg.synth.set_size_probs == std::vector<double>{0.15, 0.35, 0.50});
  CHECK(cfg.paths.data_dir == "data");
  CHECK(cfg.paths.samples_path() == "data/samples.jsonl");
  CHECK(cfg.paths.taxonomy_path() == "data/taxonomy.tsv");
  CHECK(cfg.paths.features_path() == "data/features.cqaf");
}

TEST_CASE("full document parses into every section") {
  const std::string doc = R"(
# training run
[run]
variant = "san-1"      # inline comment
batch_main = 64
batch_aux = 16
lr = 0.002
finetune_lr_scale = 0.25
stage1_epochs = 4
stage2_epochs = 3
stage3_epochs = 2
patience = 2
n_neg = 10
seed_init = 11
seed_data = 12
seed_sampling = 13
expert_threshold = 5
big_att = true
embed = 24
filter1 = 8
filter2 = 12
filter3 = 16
d = 48
attention_dim = 40
aux_channels = 20

[synthetic]
categories = 6
vocab_words = 120
topic_concentration = 0.8
image_dim = 32
regions = 9
signal_rows = 4
noise_std = 0.5
p_placeholder = 0.25
p_ambiguous = 0.4
experts = 15
sharpness = 3.5
samples = 500
mean_tokens = 40
set_size_probs = 0.2, 0.3, 0.5
seed = 99

[paths]
data_dir = /tmp/corpus
run_dir = "/tmp/out/run"
results_dir = /tmp/out
)";
  const FileConfig cfg = parse_config(doc);
  CHECK(cfg.run.variant == Variant::kSan1);
  CHECK(cfg.run.batch_main == 64);
  CHECK(cfg.run.lr == doctest::Approx(0.002));
  CHECK(cfg.run.finetune_lr_scale == doctest::Approx(0.25));
  CHECK(cfg.run.stage1_epochs == 4);
  CHECK(cfg.run.patience == 2);
  CHECK(cfg.run.n_neg == 10);
  CHECK(cfg.run.seed_init == 11);
  CHECK(cfg.run.seed_data == 12);
  CHECK(cfg.run.seed_sampling == 13);
  CHECK(cfg.run.expert_threshold == 5);
  CHECK(cfg.run.flags.big_att);
  CHECK_FALSE(cfg.run.flags.big_fc);
  CHECK(cfg.run.dims.text.embed == 24);
  CHECK(cfg.run.dims.text.filters == std::array<std::size_t, 3>{8, 12, 16});
  CHECK(cfg.run.dims.text.d == 48);
  CHECK(cfg.run.dims.attention_dim == 40);
  CHECK(cfg.run.dims.aux_channels == 20);

  CHECK(cfg.synth.categories == 6);
  CHECK(cfg.synth.vocab_words == 120);
  CHECK(cfg.synth.topic_concentration == doctest::Approx(0.8));
  CHECK(cfg.synth.image_dim == 32);
  CHECK(cfg.synth.regions == 9);
  CHECK(cfg.synth.signal_rows == 4);
  CHECK(cfg.synth.noise_std == doctest::Approx(0.5));
  CHECK(cfg.synth.p_placeholder == doctest::Approx(0.25));
  CHECK(cfg.synth.p_ambiguous == doctest::Approx(0.4));
  CHECK(cfg.synth.experts == 15);
  CHECK(cfg.synth.sharpness == doctest::Approx(3.5));
  CHECK(cfg.synth.samples == 500);
  CHECK(cfg.synth.mean_tokens == doctest::Approx(40.0));
  CHECK(cfg.synth.set_size_probs == std::vector<double>{0.2, 0.3, 0.5});
  CHECK(cfg.synth.seed == 99);

  CHECK(cfg.paths.data_dir == "/tmp/corpus");
  CHECK(cfg.paths.run_dir == "/tmp/out/run");
  CHECK(cfg.paths.results_dir == "/tmp/out");
  CHECK(cfg.paths.samples_path() == "/tmp/corpus/samples.jsonl");
  CHECK(cfg.paths.run_path() == "/tmp/out/run");
  CHECK(cfg.paths.results_path() == "/tmp/out");
}

TEST_CASE("boolean flags accept only true and false") {
  CHECK(parse_config("[run]\nno_aux = true\n").run.flags.no_aux);
  CHECK_FALSE(parse_config("[run]\nno_aux = false\n").run.flags.no_aux);
  CHECK_THROWS_AS(parse_config("[run]\nno_aux = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[run]\nno_aux = yes\n"), std::invalid_argument);
}

TEST_CASE("strict parsing rejects bad input with the line number") {
  using doctest::Contains;
  CHECK_THROWS_WITH_AS(parse_config("[run]\nbogus_key = 1\n"),
                       Contains("unknown key 'run.bogus_key'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nbogus_key = 1\n"), Contains("line 2"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[synthetic]\nlr = 0.1\n"),
                       Contains("unknown key 'synthetic.lr'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[paths]\nvariant = x\n"),
                       Contains("unknown key 'paths.variant'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[training]\nlr = 0.1\n"),
                       Contains("unknown section 'training'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("lr = 0.1\n"), Contains("before any section"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nlr = 0.1\n\nlr = 0.2\n"),
                       Contains("duplicate key 'run.lr'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nlr = 0.1\n\nlr = 0.2\n"), Contains("line 4"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nlr 0.1\n"), Contains("expected key = value"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[run\nlr = 0.1\n"), Contains("malformed section"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nlr = oops\n"), Contains("expected a number"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nbatch_main = -3\n"),
                       Contains("non-negative integer"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[paths]\ndata_dir = \"oops\n"),
                       Contains("unbalanced quotes"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[run]\nvariant = flux-capacitor\n"), std::invalid_argument);
}

TEST_CASE("a duplicate key in a different section is fine") {
  const FileConfig cfg = parse_config("[run]\nseed_data = 5\n[synthetic]\nseed = 5\n");
  CHECK(cfg.run.seed_data == 5);
  CHECK(cfg.synth.seed == 5);
}

TEST_CASE("config hash covers run and synthetic but not paths") {
  const FileConfig base = parse_config("[run]\nlr = 0.005\n[synthetic]\nseed = 3\n");
  const FileConfig moved = parse_config(
      "[run]\nlr = 0.005\n[synthetic]\nseed = 3\n[paths]\ndata_dir = /somewhere/else\n");
  CHECK(config_hash(base) == config_hash(moved));

  FileConfig run_change = base;
  run_change.run.lr = 0.006;
  CHECK(config_hash(run_change) != config_hash(base));

  FileConfig synth_change = base;
  synth_change.synth.seed = 4;
  CHECK(config_hash(synth_change) != config_hash(base));

  FileConfig flag_change = base;
  flag_change.run.flags.no_aux = true;
  CHECK(config_hash(flag_change) != config_hash(base));

  // same object hashed twice is bit-stable
  CHECK(config_hash(base) == config_hash(base));
}

TEST_CASE("fnv1a64 matches published reference digests") {
  // offset basis and the one-byte 'a' digest from the FNV reference tables
  CHECK(fnv1a64("") == 14695981039346656037ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("canonical form lists every semantic field exactly once") {
  const std::string canon = canonical_config(FileConfig{});
  for (const char* key :
       {"variant=", "flags=", "batch_main=", "batch_aux=", "lr=", "finetune_lr_scale=",
        "stage1_epochs=", "stage2_epochs=", "stage3_epochs=", "patience=", "n_neg=",
        "seed_init=", "seed_data=", "seed_sampling=", "expert_threshold=", "dims=",
        "synthetic.categories=", "synthetic.vocab_words=", "synthetic.topic_concentration=",
        "synthetic.image_dim=", "synthetic.regions=", "synthetic.signal_rows=",
        "synthetic.noise_std=", "synthetic.p_placeholder=", "synthetic.p_ambiguous=",
        "synthetic.experts=", "synthetic.sharpness=", "synthetic.samples=",
        "synthetic.mean_tokens=", "synthetic.set_size_probs=", "synthetic.seed="}) {
    CAPTURE(std::string(key));
    CHECK(canon.find(key) != std::string::npos);
  }
  // no path leaks into the hash input
  CHECK(canon.find("data_dir") == std::string::npos);
  CHECK(canon.find("results") == std::string::npos);
  CHECK(canon.find("run_dir") == std::string::npos);
  // doubles keep full precision in the canonical form
  FileConfig cfg;
  cfg.run.lr = 0.1 + 0.2;  // 0.30000000000000004
  CHECK(canonical_config(cfg).find("lr=0.30000000000000004") != std::string::npos);
}

TEST_CASE("results dir falls back to the environment, then to cwd") {
  PathsConfig paths;
  unsetenv("MMCQA_RESULTS_DIR");
  CHECK(paths.results_path() == ".");
  CHECK(paths.run_path() == "./run");
  setenv("MMCQA_RESULTS_DIR", "/tmp/env-results", 1);
  CHECK(paths.results_path() == "/tmp/env-results");
  CHECK(paths.run_path() == "/tmp/env-results/run");
  paths.results_dir = "/explicit";
  CHECK(paths.results_path() == "/explicit");  // explicit value wins over env
  unsetenv("MMCQA_RESULTS_DIR");
}

TEST_CASE("load_config reads a file and rejects a missing one") {
  const std::string path = write_tmp("[run]\nseed_init = 42\n");
  const FileConfig cfg = load_config(path);
  CHECK(cfg.run.seed_init == 42);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_config("/nonexistent/config.toml"), std::runtime_error);
}

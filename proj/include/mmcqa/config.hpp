#pragma once

// Declarative run configuration: a small TOML-like text format with [run],
// [synthetic], and [paths] sections. Parsing is strict: unknown sections or
// keys are errors, so a typo cannot silently fall back to a default. The
// config hash covers the semantic sections ([run] and [synthetic]) but not
// [paths], so relocating data does not orphan existing checkpoints.

#include <cstdint>
#include <string>
#include <string_view>

#include "mmcqa/pipeline.hpp"
#include "mmcqa/synthetic.hpp"

namespace mmcqa {

struct PathsConfig {
  std::string data_dir = "data";
  std::string samples;   // default: <data_dir>/samples.jsonl
  std::string taxonomy;  // default: <data_dir>/taxonomy.tsv
  std::string features;  // default: <data_dir>/features.cqaf
  std::string run_dir;   // default: <results_dir>/run
  std::string results_dir;  // default: $MMCQA_RESULTS_DIR, else "."

  std::string samples_path() const;
  std::string taxonomy_path() const;
  std::string features_path() const;
  std::string results_path() const;  // applies the environment fallback
  std::string run_path() const;
};

struct FileConfig {
  RunConfig run;
  SyntheticConfig synth;
  PathsConfig paths;
};

// Throws std::invalid_argument with a line number on malformed input,
// unknown keys, or duplicate keys. An empty document yields all defaults.
FileConfig parse_config(const std::string& text);
FileConfig load_config(const std::string& path);

std::uint64_t fnv1a64(std::string_view bytes);

// Every [run] and [synthetic] field in a fixed order; the hash input.
std::string canonical_config(const FileConfig& cfg);
std::uint64_t config_hash(const FileConfig& cfg);

}  // namespace mmcqa

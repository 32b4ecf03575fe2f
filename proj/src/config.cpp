#include "mmcqa/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace mmcqa {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw std::invalid_argument("config: " + what + " (line " + std::to_string(line) + ")");
}

double parse_double(const std::string& v, std::size_t line) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty() || errno == ERANGE)
    fail(line, "expected a number, got '" + v + "'");
  return x;
}

std::uint64_t parse_u64(const std::string& v, std::size_t line) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || v.empty() || errno == ERANGE ||
      v.find('-') != std::string::npos)
    fail(line, "expected a non-negative integer, got '" + v + "'");
  return x;
}

std::size_t parse_size(const std::string& v, std::size_t line) {
  return static_cast<std::size_t>(parse_u64(v, line));
}

bool parse_bool(const std::string& v, std::size_t line) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail(line, "expected true or false, got '" + v + "'");
}

std::vector<double> parse_double_list(const std::string& v, std::size_t line) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(trim(item), line));
  if (out.empty()) fail(line, "expected a comma-separated number list");
  return out;
}

// A quoted value keeps its inner text verbatim; a bare value is used as-is.
std::string parse_string(const std::string& v, std::size_t line) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  if (!v.empty() && (v.front() == '"' || v.back() == '"')) fail(line, "unbalanced quotes");
  return v;
}

void apply_run_key(RunConfig& run, const std::string& key, const std::string& value,
                   std::size_t line) {
  if (key == "variant") {
    run.variant = variant_from_string(parse_string(value, line));
  } else if (key == "batch_main") {
    run.batch_main = parse_size(value, line);
  } else if (key == "batch_aux") {
    run.batch_aux = parse_size(value, line);
  } else if (key == "lr") {
    run.lr = parse_double(value, line);
  } else if (key == "finetune_lr_scale") {
    run.finetune_lr_scale = parse_double(value, line);
  } else if (key == "stage1_epochs") {
    run.stage1_epochs = parse_size(value, line);
  } else if (key == "stage2_epochs") {
    run.stage2_epochs = parse_size(value, line);
  } else if (key == "stage3_epochs") {
    run.stage3_epochs = parse_size(value, line);
  } else if (key == "patience") {
    run.patience = parse_size(value, line);
  } else if (key == "n_neg") {
    run.n_neg = parse_size(value, line);
  } else if (key == "seed_init") {
    run.seed_init = parse_u64(value, line);
  } else if (key == "seed_data") {
    run.seed_data = parse_u64(value, line);
  } else if (key == "seed_sampling") {
    run.seed_sampling = parse_u64(value, line);
  } else if (key == "expert_threshold") {
    run.expert_threshold = parse_size(value, line);
  } else if (key == "no_image_weight") {
    run.flags.no_image_weight = parse_bool(value, line);
  } else if (key == "no_aux") {
    run.flags.no_aux = parse_bool(value, line);
  } else if (key == "no_aux_it") {
    run.flags.no_aux_it = parse_bool(value, line);
  } else if (key == "no_aux_ti") {
    run.flags.no_aux_ti = parse_bool(value, line);
  } else if (key == "no_attention") {
    run.flags.no_attention = parse_bool(value, line);
  } else if (key == "no_finetune") {
    run.flags.no_finetune = parse_bool(value, line);
  } else if (key == "big_att") {
    run.flags.big_att = parse_bool(value, line);
  } else if (key == "big_fc") {
    run.flags.big_fc = parse_bool(value, line);
  } else if (key == "embed") {
    run.dims.text.embed = parse_size(value, line);
  } else if (key == "filter1") {
    run.dims.text.filters[0] = parse_size(value, line);
  } else if (key == "filter2") {
    run.dims.text.filters[1] = parse_size(value, line);
  } else if (key == "filter3") {
    run.dims.text.filters[2] = parse_size(value, line);
  } else if (key == "d") {
    run.dims.text.d = parse_size(value, line);
  } else if (key == "attention_dim") {
    run.dims.attention_dim = parse_size(value, line);
  } else if (key == "aux_channels") {
    run.dims.aux_channels = parse_size(value, line);
  } else {
    fail(line, "unknown key 'run." + key + "'");
  }
}

void apply_synth_key(SyntheticConfig& synth, const std::string& key, const std::string& value,
                     std::size_t line) {
  if (key == "categories") {
    synth.categories = parse_size(value, line);
  } else if (key == "vocab_words") {
    synth.vocab_words = parse_size(value, line);
  } else if (key == "topic_concentration") {
    synth.topic_concentration = parse_double(value, line);
  } else if (key == "image_dim") {
    synth.image_dim = parse_size(value, line);
  } else if (key == "regions") {
    synth.regions = parse_size(value, line);
  } else if (key == "signal_rows") {
    synth.signal_rows = parse_size(value, line);
  } else if (key == "noise_std") {
    synth.noise_std = parse_double(value, line);
  } else if (key == "p_placeholder") {
    synth.p_placeholder = parse_double(value, line);
  } else if (key == "p_ambiguous") {
    synth.p_ambiguous = parse_double(value, line);
  } else if (key == "experts") {
    synth.experts = parse_size(value, line);
  } else if (key == "sharpness") {
    synth.sharpness = parse_double(value, line);
  } else if (key == "samples") {
    synth.samples = parse_size(value, line);
  } else if (key == "mean_tokens") {
    synth.mean_tokens = parse_double(value, line);
  } else if (key == "set_size_probs") {
    synth.set_size_probs = parse_double_list(value, line);
  } else if (key == "seed") {
    synth.seed = parse_u64(value, line);
  } else {
    fail(line, "unknown key 'synthetic." + key + "'");
  }
}

void apply_paths_key(PathsConfig& paths, const std::string& key, const std::string& value,
                     std::size_t line) {
  if (key == "data_dir") {
    paths.data_dir = parse_string(value, line);
  } else if (key == "samples") {
    paths.samples = parse_string(value, line);
  } else if (key == "taxonomy") {
    paths.taxonomy = parse_string(value, line);
  } else if (key == "features") {
    paths.features = parse_string(value, line);
  } else if (key == "run_dir") {
    paths.run_dir = parse_string(value, line);
  } else if (key == "results_dir") {
    paths.results_dir = parse_string(value, line);
  } else {
    fail(line, "unknown key 'paths." + key + "'");
  }
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

std::string PathsConfig::samples_path() const {
  return samples.empty() ? data_dir + "/samples.jsonl" : samples;
}
std::string PathsConfig::taxonomy_path() const {
  return taxonomy.empty() ? data_dir + "/taxonomy.tsv" : taxonomy;
}
std::string PathsConfig::features_path() const {
  return features.empty() ? data_dir + "/features.cqaf" : features;
}
std::string PathsConfig::results_path() const {
  if (!results_dir.empty()) return results_dir;
  const char* env = std::getenv("MMCQA_RESULTS_DIR");
  return env != nullptr && env[0] != '\0' ? env : ".";
}
std::string PathsConfig::run_path() const {
  return run_dir.empty() ? results_path() + "/run" : run_dir;
}

FileConfig parse_config(const std::string& text) {
  FileConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  std::set<std::string> seen;
  std::size_t line_no = 0;

  while (std::getline(in, raw)) {
    ++line_no;
    // strip comments, respecting quoted values
    std::string line;
    bool quoted = false;
    for (char ch : raw) {
      if (ch == '"') quoted = !quoted;
      if (ch == '#' && !quoted) break;
      line.push_back(ch);
    }
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail(line_no, "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "run" && section != "synthetic" && section != "paths")
        fail(line_no, "unknown section '" + section + "'");
      continue;
    }

    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) fail(line_no, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(line_no, "empty key");
    if (section.empty()) fail(line_no, "key '" + key + "' before any section");
    if (!seen.insert(section + "." + key).second)
      fail(line_no, "duplicate key '" + section + "." + key + "'");

    if (section == "run") {
      apply_run_key(cfg.run, key, value, line_no);
    } else if (section == "synthetic") {
      apply_synth_key(cfg.synth, key, value, line_no);
    } else {
      apply_paths_key(cfg.paths, key, value, line_no);
    }
  }
  return cfg;
}

FileConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t hash = 14695981039346656037ULL;
  for (unsigned char ch : bytes) {
    hash ^= ch;
    hash *= 1099511628211ULL;
  }
  return hash;
}

std::string canonical_config(const FileConfig& cfg) {
  const RunConfig& r = cfg.run;
  const SyntheticConfig& s = cfg.synth;
  std::ostringstream out;
  out << "variant=" << to_string(r.variant) << '\n'
      << "flags=" << r.flags.no_image_weight << r.flags.no_aux << r.flags.no_aux_it
      << r.flags.no_aux_ti << r.flags.no_attention << r.flags.no_finetune << r.flags.big_att
      << r.flags.big_fc << '\n'
      << "batch_main=" << r.batch_main << '\n'
      << "batch_aux=" << r.batch_aux << '\n'
      << "lr=" << fmt_double(r.lr) << '\n'
      << "finetune_lr_scale=" << fmt_double(r.finetune_lr_scale) << '\n'
      << "stage1_epochs=" << r.stage1_epochs << '\n'
      << "stage2_epochs=" << r.stage2_epochs << '\n'
      << "stage3_epochs=" << r.stage3_epochs << '\n'
      << "patience=" << r.patience << '\n'
      << "n_neg=" << r.n_neg << '\n'
      << "seed_init=" << r.seed_init << '\n'
      << "seed_data=" << r.seed_data << '\n'
      << "seed_sampling=" << r.seed_sampling << '\n'
      << "expert_threshold=" << r.expert_threshold << '\n'
      << "dims=" << r.dims.text.embed << ',' << r.dims.text.filters[0] << ','
      << r.dims.text.filters[1] << ',' << r.dims.text.filters[2] << ',' << r.dims.text.d << ','
      << r.dims.attention_dim << ',' << r.dims.aux_channels << '\n'
      << "synthetic.categories=" << s.categories << '\n'
      << "synthetic.vocab_words=" << s.vocab_words << '\n'
      << "synthetic.topic_concentration=" << fmt_double(s.topic_concentration) << '\n'
      << "synthetic.image_dim=" << s.image_dim << '\n'
      << "synthetic.regions=" << s.regions << '\n'
      << "synthetic.signal_rows=" << s.signal_rows << '\n'
      << "synthetic.noise_std=" << fmt_double(s.noise_std) << '\n'
      << "synthetic.p_placeholder=" << fmt_double(s.p_placeholder) << '\n'
      << "synthetic.p_ambiguous=" << fmt_double(s.p_ambiguous) << '\n'
      << "synthetic.experts=" << s.experts << '\n'
      << "synthetic.sharpness=" << fmt_double(s.sharpness) << '\n'
      << "synthetic.samples=" << s.samples << '\n'
      << "synthetic.mean_tokens=" << fmt_double(s.mean_tokens) << '\n';
  out << "synthetic.set_size_probs=";
  for (std::size_t i = 0; i < s.set_size_probs.size(); ++i) {
    if (i > 0) out << ',';
    out << fmt_double(s.set_size_probs[i]);
  }
  out << '\n' << "synthetic.seed=" << s.seed << '\n';
  return out.str();
}

std::uint64_t config_hash(const FileConfig& cfg) { return fnv1a64(canonical_config(cfg)); }

}  // namespace mmcqa

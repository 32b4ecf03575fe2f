#include "mmcqa/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mmcqa {

namespace {

constexpr const char* kMagic = "mmcqa-checkpoint v1";

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

}  // namespace

void save_checkpoint(const std::string& dir, const ParamStore<float>& params,
                     const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string manifest_path = dir + "/manifest.txt";
  const std::string blob_path = dir + "/params.bin";

  std::ostringstream manifest;
  manifest << kMagic << "\n";
  manifest << "config_hash " << meta.config_hash << "\n";
  manifest << "variant " << meta.variant << "\n";
  manifest << "stage " << meta.stage << "\n";
  manifest << "epoch " << meta.epoch << "\n";
  manifest << "metrics " << meta.metric_history.size();
  for (double v : meta.metric_history) manifest << " " << format_double(v);
  manifest << "\n";
  manifest << "tensors " << params.size() << "\n";

  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) fail(blob_path, "cannot open for writing");
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    if (name.find_first_of(" \t\n") != std::string::npos)
      fail(manifest_path, "tensor name contains whitespace: " + name);
    const Tensor<float>& t = params.value(i);
    manifest << name << " " << format_double(params.lr_scale(i)) << " " << offset << " "
             << t.rank();
    for (std::size_t r = 0; r < t.rank(); ++r) manifest << " " << t.dim(r);
    manifest << "\n";
    blob.write(reinterpret_cast<const char*>(t.data().data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
    offset += t.numel() * sizeof(float);
  }
  blob.close();
  if (!blob) fail(blob_path, "write failed");

  std::ofstream mf(manifest_path, std::ios::binary | std::ios::trunc);
  if (!mf) fail(manifest_path, "cannot open for writing");
  mf << manifest.str();
  mf.close();
  if (!mf) fail(manifest_path, "write failed");
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  const std::string manifest_path = dir + "/manifest.txt";
  const std::string blob_path = dir + "/params.bin";
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) fail(manifest_path, "cannot open");

  std::string line;
  if (!std::getline(mf, line) || line != kMagic) fail(manifest_path, "bad magic line");

  auto expect_key = [&](const char* key) -> std::istringstream {
    if (!std::getline(mf, line)) fail(manifest_path, std::string("missing ") + key);
    std::istringstream is(line);
    std::string got;
    is >> got;
    if (got != key) fail(manifest_path, std::string("expected ") + key + ", got " + got);
    return is;
  };

  LoadedCheckpoint out;
  {
    auto is = expect_key("config_hash");
    if (!(is >> out.meta.config_hash)) fail(manifest_path, "bad config_hash");
  }
  {
    auto is = expect_key("variant");
    if (!(is >> out.meta.variant)) fail(manifest_path, "bad variant");
  }
  {
    auto is = expect_key("stage");
    if (!(is >> out.meta.stage)) fail(manifest_path, "bad stage");
  }
  {
    auto is = expect_key("epoch");
    if (!(is >> out.meta.epoch)) fail(manifest_path, "bad epoch");
  }
  {
    auto is = expect_key("metrics");
    std::size_t n = 0;
    if (!(is >> n)) fail(manifest_path, "bad metrics count");
    out.meta.metric_history.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!(is >> out.meta.metric_history[i])) fail(manifest_path, "bad metrics entry");
    }
  }
  std::size_t tensor_count = 0;
  {
    auto is = expect_key("tensors");
    if (!(is >> tensor_count)) fail(manifest_path, "bad tensor count");
  }

  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) fail(blob_path, "cannot open");
  blob.seekg(0, std::ios::end);
  const std::uint64_t blob_size = static_cast<std::uint64_t>(blob.tellg());

  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < tensor_count; ++i) {
    if (!std::getline(mf, line)) fail(manifest_path, "missing tensor line");
    std::istringstream is(line);
    std::string name;
    double lr_scale = 0.0;
    std::uint64_t offset = 0;
    std::size_t rank = 0;
    if (!(is >> name >> lr_scale >> offset >> rank)) fail(manifest_path, "bad tensor line: " + line);
    if (rank == 0 || rank > 2) fail(manifest_path, "unsupported tensor rank in " + name);
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::size_t r = 0; r < rank; ++r) {
      if (!(is >> shape[r])) fail(manifest_path, "bad shape in " + name);
      numel *= shape[r];
    }
    if (offset != expected_offset) fail(manifest_path, "non-contiguous offset for " + name);
    expected_offset += numel * sizeof(float);
    if (expected_offset > blob_size) fail(blob_path, "blob shorter than manifest claims");
    std::vector<float> data(numel);
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(data.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
    if (!blob) fail(blob_path, "short read for " + name);
    out.params.add(name, Tensor<float>(std::move(shape), std::move(data), true), lr_scale);
  }
  if (expected_offset != blob_size) fail(blob_path, "trailing bytes after last tensor");
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& dir, std::uint64_t expected_config_hash) {
  LoadedCheckpoint out = load_checkpoint(dir);
  if (out.meta.config_hash != expected_config_hash) {
    throw std::runtime_error(dir + ": checkpoint config hash " +
                             std::to_string(out.meta.config_hash) + " does not match run config " +
                             std::to_string(expected_config_hash));
  }
  return out;
}

}  // namespace mmcqa

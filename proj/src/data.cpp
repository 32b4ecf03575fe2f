#include "mmcqa/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mmcqa {

using nlohmann::json;

void save_records(const std::string& path, const std::vector<SampleRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_records: cannot open " + path);
  for (const SampleRecord& r : records) {
    std::string joined;
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      if (i) joined += ' ';
      joined += r.tokens[i];
    }
    json line{{"id", r.id},           {"tokens", joined},
              {"categories", r.categories}, {"answerers", r.answerers},
              {"timestamp", r.timestamp},   {"feature", r.feature_id}};
    out << line.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_records: write failed for " + path);
}

std::vector<SampleRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_records: cannot open " + path);
  std::vector<SampleRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("load_records: " + path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
    SampleRecord r;
    try {
      r.id = j.at("id").get<std::uint64_t>();
      std::istringstream words(j.at("tokens").get<std::string>());
      std::string w;
      while (words >> w) r.tokens.push_back(w);
      r.categories = j.at("categories").get<std::vector<std::uint32_t>>();
      r.answerers = j.at("answerers").get<std::vector<std::uint64_t>>();
      r.timestamp = j.at("timestamp").get<std::int64_t>();
      r.feature_id = j.at("feature").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw std::runtime_error("load_records: " + path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
    if (r.categories.empty())
      throw std::runtime_error("load_records: " + path + ":" + std::to_string(line_no) +
                               ": record has no categories");
    records.push_back(std::move(r));
  }
  return records;
}

Taxonomy Taxonomy::flat(std::size_t categories) {
  Taxonomy t;
  for (std::size_t c = 0; c < categories; ++c)
    t.add({static_cast<std::uint32_t>(c), "c" + std::to_string(c), -1});
  return t;
}

void Taxonomy::add(Node node) {
  if (index_.count(node.id)) throw std::invalid_argument("taxonomy: duplicate category id");
  if (node.parent >= 0 && !has(static_cast<std::uint32_t>(node.parent)))
    throw std::invalid_argument("taxonomy: parent must be added before its children");
  if (node.name.find('\t') != std::string::npos || node.name.find('\n') != std::string::npos)
    throw std::invalid_argument("taxonomy: name must not contain tabs or newlines");
  index_[node.id] = nodes_.size();
  nodes_.push_back(std::move(node));
}

const Taxonomy::Node& Taxonomy::node(std::uint32_t id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::invalid_argument("taxonomy: unknown category");
  return nodes_[it->second];
}

std::vector<std::uint32_t> Taxonomy::expand(const std::vector<std::uint32_t>& labels) const {
  std::set<std::uint32_t> out;
  for (std::uint32_t label : labels) {
    std::int64_t cur = label;
    while (cur >= 0) {
      const Node& n = node(static_cast<std::uint32_t>(cur));
      out.insert(n.id);
      cur = n.parent;
    }
  }
  return {out.begin(), out.end()};
}

void Taxonomy::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("taxonomy: cannot open " + path);
  for (const Node& n : nodes_) out << n.id << '\t' << n.name << '\t' << n.parent << '\n';
  if (!out) throw std::runtime_error("taxonomy: write failed for " + path);
}

Taxonomy Taxonomy::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("taxonomy: cannot open " + path);
  Taxonomy t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t tab1 = line.find('\t');
    const std::size_t tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) throw std::runtime_error("taxonomy: malformed line: " + line);
    Node n;
    n.id = static_cast<std::uint32_t>(std::stoul(line.substr(0, tab1)));
    n.name = line.substr(tab1 + 1, tab2 - tab1 - 1);
    n.parent = std::stoll(line.substr(tab2 + 1));
    t.add(std::move(n));
  }
  return t;
}

SplitIndices split_dataset(std::size_t count, std::uint64_t seed) {
  if (count < 10) throw std::invalid_argument("split_dataset: at least 10 samples required");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const std::size_t tenth = count / 10;
  SplitIndices s;
  s.train.assign(order.begin(), order.end() - 2 * tenth);
  s.valid.assign(order.end() - 2 * tenth, order.end() - tenth);
  s.test.assign(order.end() - tenth, order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.valid.begin(), s.valid.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<std::uint64_t> build_expert_pool(const std::vector<SampleRecord>& samples,
                                             std::int64_t window_begin, std::int64_t window_end,
                                             std::size_t threshold) {
  if (window_begin > window_end) throw std::invalid_argument("build_expert_pool: empty window");
  std::map<std::uint64_t, std::size_t> counts;
  for (const SampleRecord& s : samples) {
    if (s.timestamp < window_begin || s.timestamp > window_end) continue;
    for (std::uint64_t user : s.answerers) ++counts[user];
  }
  std::vector<std::uint64_t> pool;
  for (const auto& [user, count] : counts)
    if (count > threshold) pool.push_back(user);
  return pool;  // std::map iteration is already ascending
}

AuxDatasets build_aux_datasets(const std::vector<std::uint64_t>& split_ids, Rng& rng) {
  const std::size_t n = split_ids.size();
  if (n < 5) throw std::invalid_argument("build_aux_datasets: at least 5 samples required");
  AuxDatasets out;
  for (AuxDirection dir : {AuxDirection::kImageToText, AuxDirection::kTextToImage}) {
    auto& bucket = dir == AuxDirection::kImageToText ? out.image_to_text : out.text_to_image;
    bucket.reserve(n);
    for (std::size_t a = 0; a < n; ++a) {
      AuxSample s;
      s.direction = dir;
      s.anchor = split_ids[a];
      s.answer_index = static_cast<std::uint32_t>(rng.index(5));
      std::vector<std::size_t> negs = rng.sample_without_replacement(n - 1, 4);
      std::size_t next = 0;
      for (std::size_t slot = 0; slot < 5; ++slot) {
        if (slot == s.answer_index) {
          s.candidates[slot] = split_ids[a];
        } else {
          std::size_t pick = negs[next++];
          s.candidates[slot] = split_ids[pick >= a ? pick + 1 : pick];
        }
      }
      bucket.push_back(s);
    }
  }
  return out;
}

}  // namespace mmcqa

#include "mmcqa/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>
#include <stdexcept>

namespace mmcqa {

const std::string kUrlToken = "<url>";

std::vector<std::string> WhitespaceTokenizer::split(const std::string& text) const {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string clean_text(const std::string& text) {
  static const std::regex url_re(R"((https?|ftp)://[^\s<>"]+)", std::regex::icase);
  static const std::regex tag_re(R"(<[^<>]*>)");
  static const std::regex entity_re(R"(&#?[a-zA-Z0-9]{1,10};)");
  // markup first so the url sentinel is not mistaken for a tag
  std::string s = std::regex_replace(text, tag_re, " ");
  s = std::regex_replace(s, entity_re, " ");
  s = std::regex_replace(s, url_re, " " + kUrlToken + " ");
  return s;
}

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<unk>", kUrlToken};
  for (std::uint32_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = i;
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& docs,
                             std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : docs) {
    for (const auto& tok : doc) {
      if (tok == kUrlToken) continue;
      ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, count] : ranked) {
    if (count >= min_count) v.add(tok);
  }
  return v;
}

void Vocabulary::add(const std::string& token) {
  if (ids_.count(token)) return;
  ids_[token] = static_cast<std::uint32_t>(tokens_.size());
  tokens_.push_back(token);
}

std::uint32_t Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(std::uint32_t id) const {
  if (id >= tokens_.size()) throw std::out_of_range("Vocabulary: id out of range");
  return tokens_[id];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("Vocabulary: cannot write " + path);
  for (const auto& tok : tokens_) out << tok << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("Vocabulary: cannot read " + path);
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (lineno >= kReservedIds) v.add(line);
    ++lineno;
  }
  if (lineno < kReservedIds) throw std::runtime_error("Vocabulary: missing reserved rows");
  return v;
}

TokenSequence tokenize(const std::string& text, const Tokenizer& tokenizer,
                       const Vocabulary& vocab) {
  std::vector<std::string> words = tokenizer.split(clean_text(text));
  TokenSequence seq;
  seq.original_length = words.size();
  for (const auto& w : words) {
    if (seq.ids.size() >= kMaxSeqLen) break;
    seq.ids.push_back(vocab.id_of(w));
  }
  if (seq.ids.empty()) seq.ids.push_back(kPadId);
  return seq;
}

TextBatch TextBatch::pack(const std::vector<const TokenSequence*>& seqs) {
  if (seqs.empty()) throw std::invalid_argument("TextBatch: empty batch");
  TextBatch b;
  b.batch = seqs.size();
  b.len = kMinSeqLen;
  for (const TokenSequence* s : seqs) b.len = std::max(b.len, s->ids.size());
  b.flat_ids.assign(b.batch * b.len, kPadId);
  b.real_lens.resize(b.batch);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const TokenSequence& s = *seqs[i];
    std::copy(s.ids.begin(), s.ids.end(), b.flat_ids.begin() + i * b.len);
    b.real_lens[i] = s.real_length();
  }
  return b;
}

std::vector<std::uint32_t> TextBatch::window_plan(std::size_t n) const {
  const std::size_t per = len - n + 1;
  std::vector<std::uint32_t> plan;
  plan.reserve(batch * per * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < per; ++q) {
      for (std::size_t j = 0; j < n; ++j) {
        plan.push_back(static_cast<std::uint32_t>(b * len + q + j));
      }
    }
  }
  return plan;
}

std::vector<std::uint8_t> TextBatch::window_mask(std::size_t n) const {
  const std::size_t per = len - n + 1;
  std::vector<std::uint8_t> mask(batch * per, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t real = real_lens[b];
    const std::size_t eff = std::max(real, kMinSeqLen);
    bool any = false;
    for (std::size_t q = 0; q < per; ++q) {
      const bool inside = q + n <= eff;
      const bool touches_real = q < real;
      if (inside && touches_real) {
        mask[b * per + q] = 1;
        any = true;
      }
    }
    if (!any) mask[b * per + 0] = 1;
  }
  return mask;
}

}  // namespace mmcqa

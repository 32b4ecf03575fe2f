#pragma once

// Text side of the encoders: tokenization, vocabulary, and the n-gram
// convolution encoder that turns a token sequence into v_T.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmcqa/tape.hpp"
#include "mmcqa/tensor.hpp"

namespace mmcqa {

inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kUnkId = 1;
inline constexpr std::uint32_t kUrlId = 2;
inline constexpr std::size_t kReservedIds = 3;
inline constexpr std::size_t kMaxSeqLen = 256;
// Shortest usable sequence: one full stride for the widest (3-gram) filter.
inline constexpr std::size_t kMinSeqLen = 3;

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::string> split(const std::string& text) const = 0;
};

class WhitespaceTokenizer final : public Tokenizer {
 public:
  std::vector<std::string> split(const std::string& text) const override;
};

// Strips HTML tags and entities, replaces URLs with the reserved url token.
std::string clean_text(const std::string& text);

// The literal the url rule substitutes; maps to kUrlId during lookup.
extern const std::string kUrlToken;

class Vocabulary {
 public:
  Vocabulary();

  // Tokens with count >= min_count, most frequent first (ties lexicographic).
  static Vocabulary build(const std::vector<std::vector<std::string>>& docs,
                          std::size_t min_count = 1);

  void add(const std::string& token);
  std::uint32_t id_of(const std::string& token) const;  // kUnkId when absent
  const std::string& token_of(std::uint32_t id) const;
  std::size_t size() const { return tokens_.size(); }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

struct TokenSequence {
  std::vector<std::uint32_t> ids;  // never empty; [kPadId] for blank text
  std::size_t original_length = 0;

  std::size_t real_length() const {
    return (ids.size() == 1 && ids[0] == kPadId) ? 0 : ids.size();
  }
};

TokenSequence tokenize(const std::string& text, const Tokenizer& tokenizer,
                       const Vocabulary& vocab);

struct TextDims {
  std::size_t vocab = 0;
  std::size_t embed = 32;
  std::array<std::size_t, 3> filters{32, 64, 64};  // 1-, 2-, 3-gram counts
  std::size_t d = 64;

  std::size_t sum_filters() const { return filters[0] + filters[1] + filters[2]; }
};

// Tape leaf ids for one text encoder's parameters.
struct TextParamIds {
  ValueId embedding;                 // [V, E]; PAD row frozen at zero
  std::array<ValueId, 3> conv_w;     // [n*E, F_n]
  std::array<ValueId, 3> conv_b;     // [F_n]
  ValueId proj_w;                    // [sum F, d]
  ValueId proj_b;                    // [d]
};

// A batch of sequences padded to one shared length.
struct TextBatch {
  std::vector<std::uint32_t> flat_ids;  // batch * len, row-major
  std::vector<std::size_t> real_lens;   // non-PAD token count per sequence
  std::size_t batch = 0;
  std::size_t len = 0;  // max(kMinSeqLen, longest sequence)

  static TextBatch pack(const std::vector<const TokenSequence*>& seqs);

  // im2col plan for n-gram windows: rows of the embedded batch, grouped
  // per window; every sequence contributes len - n + 1 windows.
  std::vector<std::uint32_t> window_plan(std::size_t n) const;

  // A window is pooled iff it lies inside the sequence's effective length
  // max(real_len, kMinSeqLen) and covers at least one real token. An all-PAD
  // sequence keeps window 0 so max-pooling stays well defined.
  std::vector<std::uint8_t> window_mask(std::size_t n) const;
};

// v_T for the whole batch: [B, d]. Throws if any token id >= vocab size.
template <typename T>
ValueId text_cnn_encode_batch(Tape<T>& tape, const TextBatch& batch, const TextParamIds& p,
                              const TextDims& dims) {
  for (std::uint32_t id : batch.flat_ids) {
    if (id >= dims.vocab) throw std::invalid_argument("text encoder: token id out of range");
  }
  ValueId embedded = tape.gather_rows(p.embedding, batch.flat_ids);  // [B*L, E]
  ValueId pooled = 0;
  for (std::size_t g = 0; g < 3; ++g) {
    const std::size_t n = g + 1;
    ValueId windows = tape.gather_windows(embedded, batch.window_plan(n), n);
    ValueId conv = tape.tanh_op(tape.add_rows(tape.matmul(windows, p.conv_w[g]), p.conv_b[g]));
    ValueId mx = tape.block_max(conv, batch.batch, batch.window_mask(n));
    pooled = g == 0 ? mx : tape.concat(pooled, mx, 1);
  }
  return tape.tanh_op(tape.add_rows(tape.matmul(pooled, p.proj_w), p.proj_b));
}

}  // namespace mmcqa

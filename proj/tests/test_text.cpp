#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "mmcqa/grad_check.hpp"
#include "mmcqa/rng.hpp"
#include "mmcqa/tape.hpp"
#include "mmcqa/text.hpp"

using namespace mmcqa;

namespace {

Vocabulary small_vocab() {
  Vocabulary v;
  for (const char* t : {"red", "shoe", "see", "now", "fast", "blue", "car"}) v.add(t);
  return v;
}

TokenSequence seq_of(std::vector<std::uint32_t> ids) {
  TokenSequence s;
  s.original_length = ids.size();
  s.ids = std::move(ids);
  return s;
}

// Stages zero-initialized encoder parameters as tape leaves.
template <typename T>
TextParamIds stage_zero_params(Tape<T>& tape, const TextDims& dims) {
  TextParamIds p;
  p.embedding = tape.leaf(Tensor<T>::zeros({dims.vocab, dims.embed}, true));
  for (std::size_t g = 0; g < 3; ++g) {
    p.conv_w[g] = tape.leaf(Tensor<T>::zeros({(g + 1) * dims.embed, dims.filters[g]}, true));
    p.conv_b[g] = tape.leaf(Tensor<T>::zeros({dims.filters[g]}, true));
  }
  p.proj_w = tape.leaf(Tensor<T>::zeros({dims.sum_filters(), dims.d}, true));
  p.proj_b = tape.leaf(Tensor<T>::zeros({dims.d}, true));
  return p;
}

template <typename T>
TextParamIds stage_random_params(Tape<T>& tape, const TextDims& dims, Rng& rng) {
  TextParamIds p;
  Tensor<T> emb = Tensor<T>::random_uniform({dims.vocab, dims.embed}, T(0.5), rng, true);
  for (std::size_t j = 0; j < dims.embed; ++j) emb[j] = T(0);  // PAD row zero
  p.embedding = tape.leaf(std::move(emb));
  for (std::size_t g = 0; g < 3; ++g) {
    p.conv_w[g] =
        tape.leaf(Tensor<T>::glorot((g + 1) * dims.embed, dims.filters[g], rng));
    p.conv_b[g] = tape.leaf(Tensor<T>::random_uniform({dims.filters[g]}, T(0.1), rng, true));
  }
  p.proj_w = tape.leaf(Tensor<T>::glorot(dims.sum_filters(), dims.d, rng));
  p.proj_b = tape.leaf(Tensor<T>::random_uniform({dims.d}, T(0.1), rng, true));
  return p;
}

}  // namespace

TEST_CASE("tokenize: known tokens map to their ids") {
  Vocabulary v = small_vocab();
  WhitespaceTokenizer tok;
  TokenSequence s = tokenize("red shoe shoe", tok, v);
  CHECK(s.ids == std::vector<std::uint32_t>{v.id_of("red"), v.id_of("shoe"), v.id_of("shoe")});
  CHECK(v.id_of("red") == 3);
  CHECK(v.id_of("shoe") == 4);
}

TEST_CASE("tokenize: urls become the url token before splitting") {
  Vocabulary v = small_vocab();
  WhitespaceTokenizer tok;
  TokenSequence s = tokenize("see http://x.y now", tok, v);
  REQUIRE(s.ids.size() == 3);
  CHECK(s.ids[0] == v.id_of("see"));
  CHECK(s.ids[1] == kUrlId);
  CHECK(s.ids[2] == v.id_of("now"));
}

TEST_CASE("tokenize: empty text maps to a single PAD") {
  Vocabulary v = small_vocab();
  WhitespaceTokenizer tok;
  TokenSequence s = tokenize("", tok, v);
  CHECK(s.ids == std::vector<std::uint32_t>{kPadId});
  CHECK(s.real_length() == 0);
  TokenSequence s2 = tokenize("   \n\t  ", tok, v);
  CHECK(s2.ids == std::vector<std::uint32_t>{kPadId});
}

TEST_CASE("tokenize: html is stripped, oov maps to unk, long input truncates") {
  Vocabulary v = small_vocab();
  WhitespaceTokenizer tok;
  TokenSequence s = tokenize("<b>red</b>&nbsp;zzz shoe", tok, v);
  REQUIRE(s.ids.size() == 3);
  CHECK(s.ids[0] == v.id_of("red"));
  CHECK(s.ids[1] == kUnkId);
  CHECK(s.ids[2] == v.id_of("shoe"));

  std::string long_text;
  for (int i = 0; i < 300; ++i) long_text += "red ";
  TokenSequence t = tokenize(long_text, tok, v);
  CHECK(t.ids.size() == kMaxSeqLen);
  CHECK(t.original_length == 300);
}

TEST_CASE("vocabulary: build ranks by frequency, save/load round-trips") {
  std::vector<std::vector<std::string>> docs{{"b", "a", "b"}, {"b", "a", "c"}};
  Vocabulary v = Vocabulary::build(docs);
  CHECK(v.id_of("b") == 3);  // most frequent after reserved ids
  CHECK(v.id_of("a") == 4);
  CHECK(v.id_of("c") == 5);
  CHECK(v.size() == 6);

  Vocabulary v2 = Vocabulary::build(docs, 2);
  CHECK(v2.id_of("c") == kUnkId);
  CHECK(v2.size() == 5);

  std::string path = "/tmp/mmcqa_vocab_test.txt";
  v.save(path);
  Vocabulary loaded = Vocabulary::load(path);
  CHECK(loaded.size() == v.size());
  CHECK(loaded.id_of("b") == 3);
  CHECK(loaded.id_of("c") == 5);
  CHECK(loaded.token_of(kUrlId) == kUrlToken);
  std::remove(path.c_str());
}

TEST_CASE("batch packing: shared length and per-sequence masks") {
  TokenSequence a = seq_of({3, 4, 5, 6, 7});
  TokenSequence b = seq_of({3});
  TextBatch batch = TextBatch::pack({&a, &b});
  CHECK(batch.len == 5);
  CHECK(batch.flat_ids[5] == 3);
  CHECK(batch.flat_ids[6] == kPadId);

  // 2-gram windows: sample a keeps all 4; sample b keeps only window 0
  auto mask2 = batch.window_mask(2);
  REQUIRE(mask2.size() == 8);
  CHECK(mask2 == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0, 0, 0});

  // 3-gram: sample b's only stride is the minimum-padding window
  auto mask3 = batch.window_mask(3);
  REQUIRE(mask3.size() == 6);
  CHECK(mask3 == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
}

TEST_CASE("batch packing: all-PAD sequence keeps window zero") {
  TokenSequence empty = seq_of({kPadId});
  TextBatch batch = TextBatch::pack({&empty});
  CHECK(batch.len == kMinSeqLen);
  for (std::size_t n = 1; n <= 3; ++n) {
    auto mask = batch.window_mask(n);
    CHECK(mask[0] == 1);
    for (std::size_t q = 1; q < mask.size(); ++q) CHECK(mask[q] == 0);
  }
}

TEST_CASE("encode: zero parameters give v_T = tanh(projection bias)") {
  TextDims dims;
  dims.vocab = 10;
  dims.embed = 4;
  dims.filters = {2, 2, 2};
  dims.d = 3;
  Tape<float> tape;
  TextParamIds p = stage_zero_params(tape, dims);
  // overwrite proj bias with a nonzero leaf
  p.proj_b = tape.leaf(TensorF({3}, {0.5f, -0.3f, 0.f}, true));
  TokenSequence s = seq_of({3, 4, 5});
  TextBatch batch = TextBatch::pack({&s});
  ValueId vt = text_cnn_encode_batch(tape, batch, p, dims);
  const TensorF& out = tape.value(vt);
  CHECK(out.at(0, 0) == doctest::Approx(std::tanh(0.5f)));
  CHECK(out.at(0, 1) == doctest::Approx(std::tanh(-0.3f)));
  CHECK(out.at(0, 2) == 0.f);
}

TEST_CASE("encode: length-1 sequence, 1-gram picks embedding dim 0") {
  TextDims dims;
  dims.vocab = 6;
  dims.embed = 2;
  dims.filters = {1, 1, 1};
  dims.d = 1;
  Tape<float> tape;
  TextParamIds p = stage_zero_params(tape, dims);
  TensorF emb = TensorF::zeros({6, 2}, true);
  emb.at(3, 0) = 0.7f;
  emb.at(3, 1) = -0.4f;
  p.embedding = tape.leaf(std::move(emb));
  p.conv_w[0] = tape.leaf(TensorF({2, 1}, {1.f, 0.f}, true));
  TensorF proj = TensorF::zeros({3, 1}, true);
  proj.at(0, 0) = 1.f;
  p.proj_w = tape.leaf(std::move(proj));

  TokenSequence s = seq_of({3});
  TextBatch batch = TextBatch::pack({&s});
  ValueId vt = text_cnn_encode_batch(tape, batch, p, dims);
  // pooled 1-gram = tanh(embedding[3][0]); projection then tanh again
  CHECK(tape.value(vt).at(0, 0) == doctest::Approx(std::tanh(std::tanh(0.7f))));
}

TEST_CASE("encode: 1-gram pooling is permutation-invariant, full v_T is not") {
  TextDims dims;
  dims.vocab = 10;
  dims.embed = 4;
  dims.filters = {3, 3, 3};
  dims.d = 5;
  Rng rng(17);
  Tape<float> tape;
  TextParamIds p = stage_random_params(tape, dims, rng);

  TokenSequence a = seq_of({3, 4, 5, 6, 7});
  TokenSequence b = seq_of({7, 5, 3, 6, 4});

  auto pooled_1gram = [&](const TokenSequence& s) {
    TextBatch batch = TextBatch::pack({&s});
    ValueId embedded = tape.gather_rows(p.embedding, batch.flat_ids);
    ValueId windows = tape.gather_windows(embedded, batch.window_plan(1), 1);
    ValueId conv = tape.tanh_op(tape.add_rows(tape.matmul(windows, p.conv_w[0]), p.conv_b[0]));
    return tape.value(tape.block_max(conv, 1, batch.window_mask(1))).data();
  };
  CHECK(pooled_1gram(a) == pooled_1gram(b));

  TextBatch ba = TextBatch::pack({&a});
  TextBatch bb = TextBatch::pack({&b});
  CHECK(tape.value(text_cnn_encode_batch(tape, ba, p, dims)).data() !=
        tape.value(text_cnn_encode_batch(tape, bb, p, dims)).data());
}

TEST_CASE("encode: v_T is bit-identical under extra batch padding") {
  TextDims dims;
  dims.vocab = 12;
  dims.embed = 6;
  dims.filters = {4, 4, 4};
  dims.d = 8;
  Rng rng(23);
  Tape<float> tape;
  TextParamIds p = stage_random_params(tape, dims, rng);

  TokenSequence a = seq_of({3, 4, 5, 6, 7});
  TokenSequence longer = seq_of({8, 9, 10, 11, 3, 4, 5, 6, 7});
  TokenSequence single = seq_of({5});
  TokenSequence empty = seq_of({kPadId});

  TextBatch alone = TextBatch::pack({&a});
  TextBatch padded = TextBatch::pack({&a, &longer});
  const TensorF& va = tape.value(text_cnn_encode_batch(tape, alone, p, dims));
  const TensorF& vp = tape.value(text_cnn_encode_batch(tape, padded, p, dims));
  for (std::size_t j = 0; j < dims.d; ++j) CHECK(va.at(0, j) == vp.at(0, j));

  TextBatch salone = TextBatch::pack({&single});
  TextBatch spadded = TextBatch::pack({&single, &longer});
  const TensorF& vs = tape.value(text_cnn_encode_batch(tape, salone, p, dims));
  const TensorF& vsp = tape.value(text_cnn_encode_batch(tape, spadded, p, dims));
  for (std::size_t j = 0; j < dims.d; ++j) CHECK(vs.at(0, j) == vsp.at(0, j));

  TextBatch ealone = TextBatch::pack({&empty});
  TextBatch epadded = TextBatch::pack({&empty, &longer});
  const TensorF& ve = tape.value(text_cnn_encode_batch(tape, ealone, p, dims));
  const TensorF& vep = tape.value(text_cnn_encode_batch(tape, epadded, p, dims));
  for (std::size_t j = 0; j < dims.d; ++j) CHECK(ve.at(0, j) == vep.at(0, j));
}

TEST_CASE("encode: outputs bounded by one and deterministic") {
  TextDims dims;
  dims.vocab = 20;
  dims.embed = 5;
  dims.filters = {4, 6, 6};
  dims.d = 7;
  Rng rng(31);
  Tape<float> tape;
  TextParamIds p = stage_random_params(tape, dims, rng);
  TokenSequence a = seq_of({3, 9, 14, 2, 7, 11});
  TokenSequence b = seq_of({19, 18, 17});
  TextBatch batch = TextBatch::pack({&a, &b});
  ValueId v1 = text_cnn_encode_batch(tape, batch, p, dims);
  ValueId v2 = text_cnn_encode_batch(tape, batch, p, dims);
  for (float x : tape.value(v1).data()) CHECK(std::abs(x) <= 1.0f);
  CHECK(tape.value(v1).data() == tape.value(v2).data());
}

TEST_CASE("encode: token id out of vocabulary range is rejected") {
  TextDims dims;
  dims.vocab = 5;
  dims.embed = 2;
  dims.filters = {1, 1, 1};
  dims.d = 2;
  Tape<float> tape;
  TextParamIds p = stage_zero_params(tape, dims);
  TokenSequence bad = seq_of({3, 7});
  TextBatch batch = TextBatch::pack({&bad});
  CHECK_THROWS(text_cnn_encode_batch(tape, batch, p, dims));
}

TEST_CASE("encode: gradients match finite differences") {
  TextDims dims;
  dims.vocab = 6;
  dims.embed = 3;
  dims.filters = {2, 2, 2};
  dims.d = 4;
  Rng rng(41);
  TokenSequence a = seq_of({3, 4, 5, 3});
  TokenSequence b = seq_of({5, 4});
  TextBatch batch = TextBatch::pack({&a, &b});

  auto draw = [&](std::vector<std::size_t> shape, double range) {
    std::vector<float> d(TensorF::numel_of(shape));
    for (float& x : d) x = float(rng.uniform(-range, range));
    return TensorF(shape, std::vector<float>(d.begin(), d.end()));
  };
  std::vector<TensorF> params;
  params.push_back(draw({dims.vocab, dims.embed}, 0.5));
  for (std::size_t g = 0; g < 3; ++g) {
    params.push_back(draw({(g + 1) * dims.embed, dims.filters[g]}, 0.6));
    params.push_back(draw({dims.filters[g]}, 0.1));
  }
  params.push_back(draw({dims.sum_filters(), dims.d}, 0.5));
  params.push_back(draw({dims.d}, 0.1));
  std::vector<std::string> names{"emb", "w1", "b1", "w2", "b2", "w3", "b3", "pw", "pb"};

  std::vector<float> mixer(2 * dims.d);
  for (float& x : mixer) x = float(rng.uniform(-1, 1));

  auto build = [&](auto& tape, const std::vector<ValueId>& ids) {
    using U = typename std::decay_t<decltype(tape)>::scalar_type;
    TextParamIds p{ids[0], {ids[1], ids[3], ids[5]}, {ids[2], ids[4], ids[6]}, ids[7], ids[8]};
    ValueId vt = text_cnn_encode_batch(tape, batch, p, dims);
    ValueId w = tape.leaf(Tensor<U>({2, dims.d}, std::vector<U>(mixer.begin(), mixer.end())));
    return tape.sum(tape.mul(vt, w));
  };
  auto rep32 = grad_check(params, names, build);
  CHECK(rep32.worst < 1e-3);

  std::vector<TensorD> params64;
  for (const auto& t : params) params64.push_back(t.cast<double>());
  auto rep64 = grad_check(params64, names, build);
  CHECK(rep64.worst < 1e-6);
}

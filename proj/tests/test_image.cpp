#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mmcqa/grad_check.hpp"
#include "mmcqa/image.hpp"
#include "mmcqa/rng.hpp"

using namespace mmcqa;

namespace {

const std::string kPath = "/tmp/mmcqa_feats_test.bin";

struct FileGuard {
  ~FileGuard() { std::remove(kPath.c_str()); }
};

}  // namespace

TEST_CASE("feature store: write and load round trip, flat is the row mean") {
  FileGuard guard;
  write_feature_file(kPath, 2, 2,
                     {{7, {1.f, 1.f, 3.f, 3.f}}, {9, {0.f, 2.f, 4.f, 6.f}}});
  FeatureStore store = FeatureStore::load(kPath);
  CHECK(store.size() == 2);
  CHECK(store.regions() == 2);
  CHECK(store.dim() == 2);
  CHECK(store.has(7));
  CHECK_FALSE(store.has(8));

  ImageFeatures f = store.get(7);
  CHECK(f.spatial == std::vector<float>{1.f, 1.f, 3.f, 3.f});
  CHECK(f.flat == std::vector<float>{2.f, 2.f});

  ImageFeatures g = store.get(9);
  CHECK(g.flat == std::vector<float>{2.f, 4.f});
}

TEST_CASE("feature store: m=1 stores flat-only records") {
  FileGuard guard;
  write_feature_file(kPath, 1, 3, {{1, {0.5f, -1.f, 2.f}}});
  FeatureStore store = FeatureStore::load(kPath);
  ImageFeatures f = store.get(1);
  CHECK(f.flat == std::vector<float>{0.5f, -1.f, 2.f});
  CHECK(f.spatial == f.flat);
  CHECK(f.regions == 1);
}

TEST_CASE("feature store: missing id is an error") {
  FileGuard guard;
  write_feature_file(kPath, 1, 2, {{1, {0.f, 0.f}}});
  FeatureStore store = FeatureStore::load(kPath);
  CHECK_THROWS_WITH_AS(store.get(42), doctest::Contains("missing id 42"), std::runtime_error);
}

TEST_CASE("feature store: corrupt files are rejected") {
  FileGuard guard;
  SUBCASE("bad magic") {
    std::ofstream out(kPath, std::ios::binary);
    out << "NOPE";
    out.close();
    CHECK_THROWS_AS(FeatureStore::load(kPath), std::runtime_error);
  }
  SUBCASE("truncated record") {
    write_feature_file(kPath, 2, 4, {{1, std::vector<float>(8, 1.f)}});
    // chop the last 16 bytes so the record is short
    std::ifstream in(kPath, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(kPath, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size() - 16));
    out.close();
    CHECK_THROWS_WITH_AS(FeatureStore::load(kPath), doctest::Contains("truncated"),
                         std::runtime_error);
  }
  SUBCASE("non-finite value") {
    write_feature_file(kPath, 1, 2,
                       {{1, {1.f, std::numeric_limits<float>::infinity()}}});
    CHECK_THROWS_WITH_AS(FeatureStore::load(kPath), doctest::Contains("non-finite"),
                         std::runtime_error);
  }
  SUBCASE("duplicate id") {
    write_feature_file(kPath, 1, 1, {{5, {1.f}}, {5, {2.f}}});
    CHECK_THROWS_WITH_AS(FeatureStore::load(kPath), doctest::Contains("duplicate"),
                         std::runtime_error);
  }
}

TEST_CASE("feature store: writer validates record sizes") {
  FileGuard guard;
  CHECK_THROWS_AS(write_feature_file(kPath, 2, 2, {{1, {1.f, 2.f}}}), std::invalid_argument);
}

TEST_CASE("feature store: reads are counted") {
  FileGuard guard;
  write_feature_file(kPath, 1, 1, {{1, {1.f}}, {2, {2.f}}});
  FeatureStore store = FeatureStore::load(kPath);
  CHECK(store.read_count() == 0);
  store.get(1);
  store.get(2);
  store.get(1);
  CHECK(store.read_count() == 3);
}

TEST_CASE("projector: zero weights give tanh(bias), identity passes through") {
  Tape<float> tape;
  ValueId rows = tape.leaf(TensorF({2, 2}, {0.5f, 0.f, 1.f, -1.f}));
  SUBCASE("zero weight") {
    ValueId w = tape.leaf(TensorF::zeros({2, 3}));
    ValueId b = tape.leaf(TensorF({3}, {0.2f, 0.f, -0.7f}));
    const TensorF& out = tape.value(project_image_rows(tape, rows, w, b));
    for (std::size_t r = 0; r < 2; ++r) {
      CHECK(out.at(r, 0) == doctest::Approx(std::tanh(0.2f)));
      CHECK(out.at(r, 1) == 0.f);
      CHECK(out.at(r, 2) == doctest::Approx(std::tanh(-0.7f)));
    }
  }
  SUBCASE("identity weight") {
    ValueId w = tape.leaf(TensorF({2, 2}, {1.f, 0.f, 0.f, 1.f}));
    ValueId b = tape.leaf(TensorF::zeros({2}));
    const TensorF& out = tape.value(project_image_rows(tape, rows, w, b));
    CHECK(out.at(0, 0) == doctest::Approx(std::tanh(0.5f)));
    CHECK(out.at(0, 1) == 0.f);
  }
}

TEST_CASE("projector: identical spatial rows give identical projections equal to flat") {
  FileGuard guard;
  write_feature_file(kPath, 3, 2, {{1, {0.3f, -0.2f, 0.3f, -0.2f, 0.3f, -0.2f}}});
  FeatureStore store = FeatureStore::load(kPath);
  ImageFeatures f = store.get(1);
  CHECK(f.flat == std::vector<float>{0.3f, -0.2f});

  Rng rng(5);
  Tape<float> tape;
  ValueId w = tape.leaf(TensorF::glorot(2, 4, rng));
  ValueId b = tape.leaf(TensorF::random_uniform({4}, 0.1f, rng));
  ValueId spatial = tape.leaf(TensorF({3, 2}, std::vector<float>(f.spatial)));
  ValueId flat = tape.leaf(TensorF({1, 2}, std::vector<float>(f.flat)));
  const TensorF& vsp = tape.value(project_image_rows(tape, spatial, w, b));
  const TensorF& vi = tape.value(project_image_rows(tape, flat, w, b));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(vsp.at(r, j) == vi.at(0, j));
  }
}

TEST_CASE("projector: gradients match finite differences") {
  Rng rng(13);
  std::vector<float> rows(6), wdat(8), bdat(4), mix(12);
  for (auto* v : {&rows, &wdat, &bdat, &mix}) {
    for (float& x : *v) x = float(rng.uniform(-1, 1));
  }
  std::vector<TensorF> params{TensorF({3, 2}, rows), TensorF({2, 4}, wdat),
                              TensorF({4}, bdat)};
  auto build = [&](auto& tape, const std::vector<ValueId>& ids) {
    using U = typename std::decay_t<decltype(tape)>::scalar_type;
    ValueId out = project_image_rows(tape, ids[0], ids[1], ids[2]);
    ValueId w = tape.leaf(Tensor<U>({3, 4}, std::vector<U>(mix.begin(), mix.end())));
    return tape.sum(tape.mul(out, w));
  };
  auto rep = grad_check(params, {"rows", "w", "b"}, build);
  CHECK(rep.worst < 1e-3);
}

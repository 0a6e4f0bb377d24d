#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "elastic/dataset.hpp"

using namespace elastic;

TEST_CASE("same seed reproduces the dataset exactly") {
  TaskSpec spec;
  auto a = make_synthetic_dataset(spec, 50, 123, Split::Train);
  auto b = make_synthetic_dataset(spec, 50, 123, Split::Train);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].grid_colors == b[i].grid_colors);
    CHECK(a[i].query == b[i].query);
    CHECK(a[i].answer == b[i].answer);
    CHECK(a[i].features.data == b[i].features.data);
  }
}

TEST_CASE("train and eval splits never share a grid") {
  TaskSpec spec;
  spec.grid = 3;
  spec.colors = 3;
  auto train = make_synthetic_dataset(spec, 400, 9, Split::Train);
  auto eval = make_synthetic_dataset(spec, 400, 9, Split::Eval);
  std::set<std::vector<int>> train_grids;
  for (const auto& s : train) train_grids.insert(s.grid_colors);
  for (const auto& s : eval) CHECK(train_grids.count(s.grid_colors) == 0);
}

TEST_CASE("lookup labels are approximately uniform over colors") {
  TaskSpec spec;
  spec.mode = TaskMode::Lookup;
  const int n = 10000;
  auto data = make_synthetic_dataset(spec, n, 77, Split::Train);
  const VocabLayout vocab = VocabLayout::build(spec);
  std::vector<int> counts(spec.colors, 0);
  for (const auto& s : data) counts[s.gold - vocab.ans0] += 1;
  const double expect = double(n) / spec.colors;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // df = 4; the 99.9th percentile is 18.47.
  CHECK(chi2 < 18.47);
}

TEST_CASE("count-mod labels are balanced over residues") {
  TaskSpec spec;  // CountMod, modulus 3
  const int n = 10000;
  auto data = make_synthetic_dataset(spec, n, 78, Split::Train);
  const VocabLayout vocab = VocabLayout::build(spec);
  std::vector<int> counts(spec.modulus, 0);
  for (const auto& s : data) counts[s.gold - vocab.ans0] += 1;
  const double expect = double(n) / spec.modulus;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // df = 2; the 99.9th percentile is 13.82.
  CHECK(chi2 < 13.82);
}

TEST_CASE("count-mod labels stay balanced within each split") {
  // Regression guard: the split hash must not correlate with count parity,
  // or one split trains on labels the other never exhibits.
  TaskSpec spec;
  spec.grid = 3;
  spec.colors = 3;
  spec.modulus = 2;
  spec.d_feat = 8;
  const VocabLayout vocab = VocabLayout::build(spec);
  for (Split split : {Split::Train, Split::Eval}) {
    auto data = make_synthetic_dataset(spec, 3000, 17, split);
    // chi^2 over the (query color, label) joint, df = 5.
    std::vector<int> counts(spec.colors * spec.modulus, 0);
    for (const auto& s : data)
      counts[(s.query[0] - vocab.colorq0) * spec.modulus +
             (s.gold - vocab.ans0)] += 1;
    const double expect = 3000.0 / counts.size();
    double chi2 = 0;
    for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
    CHECK(chi2 < 20.5);  // 99.9th percentile at df = 5
  }
}

TEST_CASE("answers are correct for both tasks") {
  TaskSpec lookup;
  lookup.mode = TaskMode::Lookup;
  const VocabLayout lv = VocabLayout::build(lookup);
  for (const auto& s : make_synthetic_dataset(lookup, 100, 5, Split::Eval)) {
    const int r = s.query[0] - lv.row0;
    const int c = s.query[1] - lv.col0;
    CHECK(s.gold == lv.ans0 + s.grid_colors[r * lookup.grid + c]);
    CHECK(s.answer == std::vector<int>({s.gold, lv.eos}));
  }
  TaskSpec cm;
  const VocabLayout cv = VocabLayout::build(cm);
  for (const auto& s : make_synthetic_dataset(cm, 100, 6, Split::Eval)) {
    const int color = s.query[0] - cv.colorq0;
    int count = 0;
    for (int cell : s.grid_colors) count += (cell == color);
    CHECK(s.gold == cv.ans0 + count % cm.modulus);
  }
}

TEST_CASE("features encode color one-hot plus scaled coordinates") {
  TaskSpec spec;
  spec.noise_sigma = 0.0;
  auto data = make_synthetic_dataset(spec, 10, 7, Split::Train);
  for (const auto& s : data) {
    REQUIRE(s.features.rows() == size_t(spec.n_cells()));
    REQUIRE(s.features.cols() == size_t(spec.d_feat));
    for (int i = 0; i < spec.n_cells(); ++i) {
      CHECK(s.features.at(i, s.grid_colors[i]) == 1.0f);
      CHECK(s.features.at(i, spec.colors) ==
            doctest::Approx(double(i / spec.grid) / (spec.grid - 1)));
      CHECK(s.features.at(i, spec.colors + 1) ==
            doctest::Approx(double(i % spec.grid) / (spec.grid - 1)));
    }
  }
}

TEST_CASE("spec bounds are enforced") {
  TaskSpec spec;
  spec.grid = 1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = TaskSpec{};
  spec.colors = 13;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = TaskSpec{};
  spec.modulus = 1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = TaskSpec{};
  spec.d_feat = spec.colors + 1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("vocab layout is contiguous and sized for the larger answer set") {
  TaskSpec spec;
  spec.grid = 4;
  spec.colors = 5;
  spec.modulus = 3;
  const VocabLayout v = VocabLayout::build(spec);
  CHECK(v.row0 == 0);
  CHECK(v.col0 == 4);
  CHECK(v.colorq0 == 8);
  CHECK(v.ans0 == 13);
  CHECK(v.eos == 18);  // max(colors, modulus) answer slots
  CHECK(v.vocab_size == 19);
}

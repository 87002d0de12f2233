#include <cmath>
#include <random>

#include "doctest.h"
#include "neurofuse/gbdt.hpp"

using namespace nf;

namespace {

struct Dataset {
  Tensor<double> x;
  std::vector<int32_t> y;
};

// Exhaustive enumeration: every midpoint between distinct values of every
// feature, partitioned directly by the routing rule.
SplitChoice brute_force_split(const Tensor<double>& x, const std::vector<double>& g,
                              const std::vector<double>& h, const std::vector<int32_t>& rows,
                              const BoostParams& p) {
  const int64_t F = x.dim(1);
  auto term = [&](double G, double H) { return G * G / (H + p.lambda); };
  double G = 0, H = 0;
  for (int32_t i : rows) G += g[i], H += h[i];
  SplitChoice best;
  for (int64_t f = 0; f < F; ++f) {
    std::vector<double> vals;
    for (int32_t i : rows) vals.push_back(x[i * F + f]);
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    for (size_t j = 0; j + 1 < vals.size(); ++j) {
      const double thr = (vals[j] + vals[j + 1]) / 2;
      double GL = 0, HL = 0;
      for (int32_t i : rows)
        if (x[i * F + f] < thr) GL += g[i], HL += h[i];
      if (HL < p.min_child_weight || H - HL < p.min_child_weight) continue;
      const double gain = 0.5 * (term(GL, HL) + term(G - GL, H - HL) - term(G, H)) - p.gamma;
      if (gain > best.gain + 1e-12) best = {static_cast<int32_t>(f), thr, gain};
    }
  }
  return best;
}

Dataset blobs(int n, int f, int k, double spread, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  std::vector<std::vector<double>> centers(k, std::vector<double>(f));
  for (auto& c : centers)
    for (auto& v : c) v = 3 * nd(rng);
  Dataset d{Tensor<double>({n, f}), {}};
  for (int i = 0; i < n; ++i) {
    const int c = i % k;
    d.y.push_back(c);
    for (int j = 0; j < f; ++j) d.x[i * f + j] = centers[c][j] + spread * nd(rng);
  }
  return d;
}

Dataset noise_data(int n, int f, int k, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Dataset d{Tensor<double>({n, f}), {}};
  for (auto& v : d.x.data()) v = u(rng);
  for (int i = 0; i < n; ++i) d.y.push_back(static_cast<int32_t>(rng() % k));
  d.y[0] = 0;
  d.y[1] = 1;
  return d;
}

double accuracy(const TreeEnsemble& m, const Dataset& d) {
  Tensor<double> p = gbdt_predict(m, d.x);
  const int64_t K = m.num_classes;
  int hit = 0;
  for (size_t i = 0; i < d.y.size(); ++i) {
    const double* row = &p[static_cast<int64_t>(i) * K];
    hit += std::max_element(row, row + K) - row == d.y[i];
  }
  return static_cast<double>(hit) / d.y.size();
}

TreeEnsemble random_ensemble(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-5, 5);
  TreeEnsemble m;
  m.num_classes = 1 + static_cast<int32_t>(rng() % 4);
  m.num_features = 1 + static_cast<int32_t>(rng() % 20);
  m.eta = std::abs(u(rng)) / 5;
  m.base_score = u(rng);
  const int rounds = static_cast<int>(rng() % 6);
  for (int t = 0; t < rounds * m.num_classes; ++t) {
    Tree tree;
    tree.nodes.emplace_back();
    // Grow by splitting random leaves; children always come after parents.
    const int splits = static_cast<int>(rng() % 6);
    for (int s = 0; s < splits; ++s) {
      std::vector<int32_t> leaves;
      for (size_t i = 0; i < tree.nodes.size(); ++i)
        if (tree.nodes[i].is_leaf()) leaves.push_back(static_cast<int32_t>(i));
      const int32_t at = leaves[rng() % leaves.size()];
      const auto n = static_cast<int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      tree.nodes[at] = {static_cast<int32_t>(rng() % m.num_features), u(rng), n, n + 1, 0.0};
    }
    for (auto& node : tree.nodes)
      if (node.is_leaf()) node.weight = u(rng);
    m.trees.push_back(std::move(tree));
  }
  return m;
}

}  // namespace

TEST_CASE("separable pair: one midpoint stump per class") {
  Dataset d{Tensor<double>({2, 1}, std::vector<double>{0.0, 1.0}), {0, 1}};
  BoostParams p;
  p.rounds = 1;
  p.max_depth = 1;
  p.min_child_weight = 0;
  TreeEnsemble m = gbdt_fit(d.x, d.y, p);
  REQUIRE(m.trees.size() == 2);
  for (const Tree& t : m.trees) {
    REQUIRE(t.nodes.size() == 3);
    CHECK(t.nodes[0].feature == 0);
    CHECK(t.nodes[0].threshold == 0.5);
    CHECK(t.depth() == 1);
  }
  // g = (-0.5, 0.5) for class 0, h = 0.25 each: leaves -(-0.5)/1.25 and -(0.5)/1.25.
  CHECK(m.trees[0].nodes[1].weight == doctest::Approx(0.4));
  CHECK(m.trees[0].nodes[2].weight == doctest::Approx(-0.4));
  CHECK(accuracy(m, d) == 1.0);
  Tensor<double> prob = gbdt_predict(m, d.x);
  CHECK(prob[0] > 0.5);
  CHECK(prob[3] > 0.5);
}

TEST_CASE("default min_child_weight blocks splits on a 2-sample set") {
  Dataset d{Tensor<double>({2, 1}, std::vector<double>{0.0, 1.0}), {0, 1}};
  BoostParams p;
  p.rounds = 1;
  TreeEnsemble m = gbdt_fit(d.x, d.y, p);
  for (const Tree& t : m.trees) CHECK(t.nodes.size() == 1);
}

TEST_CASE("chosen split equals brute-force maximum") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 30), f = 1 + static_cast<int>(rng() % 6);
    Tensor<double> x({n, f});
    // Coarse values force many ties.
    for (auto& v : x.data()) v = trial % 2 ? std::round(u(rng) * 3) : u(rng);
    std::vector<double> g(n), h(n);
    for (int i = 0; i < n; ++i) {
      const double p = (u(rng) + 1) / 2;
      g[i] = p - (rng() % 2);
      h[i] = p * (1 - p);
    }
    std::vector<int32_t> rows;
    for (int i = 0; i < n; ++i)
      if (rng() % 4) rows.push_back(i);
    if (rows.empty()) rows.push_back(0);
    BoostParams p;
    p.lambda = trial % 3 ? 1.0 : 0.1;
    p.min_child_weight = trial % 5 == 0 ? 0.0 : 0.05;
    p.gamma = trial % 7 == 0 ? 0.01 : 0.0;
    const SplitChoice got = best_split(x, g, h, rows, p);
    const SplitChoice want = brute_force_split(x, g, h, rows, p);
    INFO("trial " << trial);
    CHECK(got.gain == doctest::Approx(want.gain).epsilon(1e-9));
    CHECK(got.gain >= 0.0);
    if (want.feature >= 0) {
      // Different partitions can tie exactly; the chosen one must attain the maximum.
      REQUIRE(got.feature >= 0);
      double GL = 0, HL = 0, G = 0, H = 0;
      for (int32_t i : rows) {
        G += g[i], H += h[i];
        if (x[i * f + got.feature] < got.threshold) GL += g[i], HL += h[i];
      }
      auto term = [&](double a, double b) { return a * a / (b + p.lambda); };
      const double realized = 0.5 * (term(GL, HL) + term(G - GL, H - HL) - term(G, H)) - p.gamma;
      CHECK(realized == doctest::Approx(want.gain).epsilon(1e-9));
      if (got.feature == want.feature) CHECK(got.threshold <= want.threshold + 1e-12);
    } else {
      CHECK(got.feature == -1);
    }
  }
}

TEST_CASE("tie-break prefers lowest feature then lowest threshold") {
  // Two identical columns and a symmetric layout: all four candidates tie.
  Tensor<double> x({4, 2}, std::vector<double>{0, 0, 1, 1, 2, 2, 3, 3});
  std::vector<double> g{1, -1, 1, -1}, h{0.25, 0.25, 0.25, 0.25};
  BoostParams p;
  p.min_child_weight = 0;
  SplitChoice s = best_split(x, g, h, {0, 1, 2, 3}, p);
  CHECK(s.feature == 0);
  CHECK(s.threshold == 0.5);
}

TEST_CASE("3-class 128-d blobs reach 100% training accuracy within 20 rounds") {
  Dataset d = blobs(300, 128, 3, 1.0, 5);
  BoostParams p;
  p.rounds = 20;
  TreeEnsemble m = gbdt_fit(d.x, d.y, p);
  CHECK(m.rounds() == 20);
  CHECK(accuracy(m, d) == 1.0);
  for (const Tree& t : m.trees) CHECK(t.depth() <= p.max_depth);
}

TEST_CASE("empty ensemble predicts uniform") {
  TreeEnsemble m;
  m.num_classes = 4;
  m.num_features = 3;
  Tensor<double> p = gbdt_predict(m, Tensor<double>({5, 3}, 1.0));
  for (double v : p.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("single leaf tree scores softmax([w*eta, 0, ...])") {
  TreeEnsemble m;
  m.num_classes = 3;
  m.num_features = 2;
  m.eta = 0.3;
  const double w = 1.7;
  m.trees.resize(3);
  for (int k = 0; k < 3; ++k) m.trees[k].nodes = {TreeNode{}};
  m.trees[0].nodes[0].weight = w;
  Tensor<double> p = gbdt_predict(m, Tensor<double>({1, 2}, 0.0));
  const double z = std::exp(w * 0.3) + 2;
  CHECK(p[0] == doctest::Approx(std::exp(w * 0.3) / z).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(1 / z).epsilon(1e-14));
  CHECK(p[2] == doctest::Approx(1 / z).epsilon(1e-14));
}

TEST_CASE("probability rows sum to one") {
  Dataset d = noise_data(120, 8, 4, 3);
  BoostParams p;
  p.rounds = 10;
  TreeEnsemble m = gbdt_fit(d.x, d.y, p);
  Tensor<double> prob = gbdt_predict(m, d.x);
  for (int i = 0; i < 120; ++i) {
    double s = 0;
    for (int k = 0; k < 4; ++k) s += prob[i * 4 + k];
    CHECK(std::abs(s - 1) <= 1e-6);
  }
}

TEST_CASE("scores equal base plus eta times summed tree outputs") {
  Dataset d = noise_data(60, 5, 3, 9);
  BoostParams p;
  p.rounds = 7;
  TreeEnsemble m = gbdt_fit(d.x, d.y, p);
  m.base_score = 0.25;
  Tensor<double> s = gbdt_scores(m, d.x);
  for (int i = 0; i < 60; ++i)
    for (int k = 0; k < 3; ++k) {
      double want = m.base_score;
      for (int r = 0; r < 7; ++r) want += m.eta * m.trees[r * 3 + k].predict(&d.x[i * 5]);
      CHECK(s[i * 3 + k] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("training log-loss never increases across 50 rounds") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Dataset d = noise_data(200, 10, 3 + static_cast<int>(seed % 2), seed);
    BoostParams p;
    p.rounds = 50;
    TreeEnsemble m = gbdt_fit(d.x, d.y, p);
    double prev = gbdt_log_loss(m.truncated(0), d.x, d.y);
    for (int r = 1; r <= 50; ++r) {
      const double cur = gbdt_log_loss(m.truncated(r), d.x, d.y);
      INFO("seed " << seed << " round " << r);
      CHECK(cur <= prev + 1e-12);
      prev = cur;
    }
  }
}

TEST_CASE("fit is deterministic") {
  Dataset d = noise_data(150, 12, 3, 21);
  BoostParams p;
  p.rounds = 15;
  CHECK(gbdt_fit(d.x, d.y, p) == gbdt_fit(d.x, d.y, p));
  CHECK(gbdt_serialize(gbdt_fit(d.x, d.y, p)) == gbdt_serialize(gbdt_fit(d.x, d.y, p)));
}

TEST_CASE("invalid inputs are rejected") {
  Tensor<double> x({4, 2}, 1.0);
  CHECK_THROWS_AS(gbdt_fit(x, {1, 1, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(gbdt_fit(x, {0, 1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(gbdt_fit(x, {0, 1, 0, -1}), std::invalid_argument);
  CHECK_THROWS_AS(gbdt_fit(x, {0, 1, 0, 5}, {}, 3), std::invalid_argument);
  CHECK_THROWS_AS(gbdt_fit(Tensor<double>({1, 2}), {0}), std::invalid_argument);
  BoostParams bad;
  bad.rounds = 0;
  CHECK_THROWS_AS(gbdt_fit(x, {0, 1, 0, 1}, bad), std::invalid_argument);
  bad = {};
  bad.lambda = -1;
  CHECK_THROWS_AS(gbdt_fit(x, {0, 1, 0, 1}, bad), std::invalid_argument);

  TreeEnsemble m = gbdt_fit(x, {0, 1, 0, 1});
  CHECK_THROWS_AS(gbdt_predict(m, Tensor<double>({4, 3})), ShapeError);
}

TEST_CASE("serialization round-trips 100 random ensembles bit-exactly") {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 100; ++i) {
    TreeEnsemble m = random_ensemble(rng);
    const auto bytes = gbdt_serialize(m);
    TreeEnsemble back = gbdt_deserialize(bytes);
    CHECK(back == m);
    CHECK(gbdt_serialize(back) == bytes);
  }
}

TEST_CASE("empty ensemble serializes to the bare header") {
  TreeEnsemble m;
  m.num_classes = 3;
  m.num_features = 128;
  const auto bytes = gbdt_serialize(m);
  CHECK(bytes.size() == 4 + 4 * 3 + 8 * 2 + 4 + 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "BTGB");
  CHECK(gbdt_deserialize(bytes) == m);
}

TEST_CASE("predictions survive the round trip") {
  Dataset d = blobs(90, 16, 3, 2.0, 8);
  BoostParams p;
  p.rounds = 8;
  TreeEnsemble m = gbdt_fit(d.x, d.y, p);
  TreeEnsemble back = gbdt_deserialize(gbdt_serialize(m));
  CHECK(gbdt_predict(back, d.x) == gbdt_predict(m, d.x));
}

TEST_CASE("corruption is detected") {
  Dataset d = noise_data(40, 4, 3, 4);
  BoostParams p;
  p.rounds = 3;
  const auto bytes = gbdt_serialize(gbdt_fit(d.x, d.y, p));
  for (size_t pos : {size_t{0}, size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[pos] ^= 0x10;
    CHECK_THROWS_WITH_AS(gbdt_deserialize(bad), doctest::Contains("CRC32"), FormatError);
  }
  auto cut = bytes;
  cut.resize(2);
  CHECK_THROWS_AS(gbdt_deserialize(cut), FormatError);
}

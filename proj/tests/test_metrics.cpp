#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "doctest.h"
#include "neurofuse/binary_io.hpp"
#include "neurofuse/metrics.hpp"
#include "support/metric_oracles.hpp"

using namespace nf;
namespace fs = std::filesystem;
using nf::testing::definitional;
using nf::testing::Oracle;
using nf::testing::pairwise_auc;

namespace {

std::string slurp(const fs::path& p) {
  auto b = read_file(p);
  return {b.begin(), b.end()};
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("nf_metrics_" + name);
  fs::remove_all(p);
  return p;
}

Tensor<double> random_scores(int n, int k, std::mt19937_64& rng, int levels = 0) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<double> s({n, k});
  for (auto& v : s.data()) v = levels ? std::floor(u(rng) * levels) / levels : u(rng);
  return s;
}

}  // namespace

TEST_CASE("perfect diagonal") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 5;
  cm.at(1, 1) = 7;
  cm.at(2, 2) = 2;
  MetricReport r = compute_metrics(cm);
  CHECK(r.accuracy == 1.0);
  CHECK(r.macro_f1 == 1.0);
  CHECK(r.mcc == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("constant predictor on a balanced binary set has MCC 0") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 10;
  cm.at(1, 0) = 10;
  MetricReport r = compute_metrics(cm);
  CHECK(r.mcc == 0.0);
  CHECK(r.accuracy == 0.5);
  CHECK(r.precision[1] == 0.0);
  CHECK(r.recall[1] == 0.0);
  CHECK(r.f1[1] == 0.0);
}

TEST_CASE("empty matrix rejected") { CHECK_THROWS_AS(compute_metrics(ConfusionMatrix(3)), std::invalid_argument); }

TEST_CASE("1000 random matrices agree with the definitional oracle") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int K = 2 + static_cast<int>(rng() % 5);
    ConfusionMatrix cm(K);
    for (auto& v : cm.counts) v = rng() % 3 == 0 ? 0 : static_cast<int64_t>(rng() % 12);
    if (cm.total() == 0) cm.at(0, 0) = 1;
    const MetricReport r = compute_metrics(cm);
    const Oracle o = definitional(cm);
    INFO("trial " << trial);
    CHECK(std::abs(r.accuracy - o.accuracy) <= 1e-12);
    CHECK(std::abs(r.macro_precision - o.macro_p) <= 1e-12);
    CHECK(std::abs(r.macro_recall - o.macro_r) <= 1e-12);
    CHECK(std::abs(r.macro_f1 - o.macro_f1) <= 1e-12);
    CHECK(std::abs(r.mcc - o.mcc) <= 1e-12);
    CHECK(std::abs(r.micro_precision - o.micro_p) <= 1e-12);
    // Single-label multiclass identity.
    CHECK(std::abs(r.micro_precision - r.accuracy) <= 1e-12);
    CHECK(std::abs(r.micro_recall - r.accuracy) <= 1e-12);
    CHECK(r.mcc >= -1.0);
    CHECK(r.mcc <= 1.0);
    for (double v : {r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("ROC edge cases") {
  const std::vector<bool> pos{true, true, false, false};
  CHECK(*roc_curve({0.9, 0.8, 0.2, 0.1}, pos).auc == 1.0);
  CHECK(*roc_curve({0.1, 0.2, 0.8, 0.9}, pos).auc == 0.0);
  RocCurve flat = roc_curve({0.5, 0.5, 0.5, 0.5}, pos);
  CHECK(*flat.auc == 0.5);
  CHECK(flat.fpr == std::vector<double>{0, 1});
  CHECK(flat.tpr == std::vector<double>{0, 1});
  CHECK_FALSE(roc_curve({0.1, 0.2}, {true, true}).auc.has_value());
  CHECK_FALSE(roc_curve({0.1, 0.2}, {false, false}).auc.has_value());
}

TEST_CASE("ROC curves are monotone from (0,0) to (1,1)") {
  std::mt19937_64 rng(3);
  Tensor<double> s = random_scores(80, 3, rng, 7);
  std::vector<int32_t> y;
  for (int i = 0; i < 80; ++i) y.push_back(i % 3);
  RocResult r = roc_auc(s, y);
  for (const RocCurve* c : {&r.per_class[0], &r.per_class[1], &r.per_class[2], &r.micro}) {
    CHECK(c->fpr.front() == 0.0);
    CHECK(c->tpr.front() == 0.0);
    CHECK(c->fpr.back() == 1.0);
    CHECK(c->tpr.back() == 1.0);
    for (size_t i = 1; i < c->fpr.size(); ++i) {
      CHECK(c->fpr[i] >= c->fpr[i - 1]);
      CHECK(c->tpr[i] >= c->tpr[i - 1]);
    }
  }
}

TEST_CASE("AUC matches the pairwise statistic, ties included") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 40), k = 2 + static_cast<int>(rng() % 3);
    Tensor<double> s = random_scores(n, k, rng, trial % 2 ? 5 : 0);
    std::vector<int32_t> y;
    for (int i = 0; i < n; ++i) y.push_back(static_cast<int32_t>(rng() % k));
    y[0] = 0;
    y[1] = 1;
    RocResult r = roc_auc(s, y);
    std::vector<double> pooled;
    std::vector<bool> pooled_pos;
    for (int c = 0; c < k; ++c) {
      std::vector<double> col;
      std::vector<bool> pos;
      for (int i = 0; i < n; ++i) {
        col.push_back(s[i * k + c]);
        pos.push_back(y[i] == c);
      }
      pooled.insert(pooled.end(), col.begin(), col.end());
      pooled_pos.insert(pooled_pos.end(), pos.begin(), pos.end());
      const bool defined = std::count(pos.begin(), pos.end(), true) > 0 && std::count(pos.begin(), pos.end(), false) > 0;
      REQUIRE(r.per_class[c].auc.has_value() == defined);
      if (defined) CHECK(*r.per_class[c].auc == doctest::Approx(pairwise_auc(col, pos)).epsilon(1e-12));
    }
    CHECK(*r.micro.auc == doctest::Approx(pairwise_auc(pooled, pooled_pos)).epsilon(1e-12));
  }
}

TEST_CASE("AUC is invariant under strictly monotone score transforms") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> s = random_scores(60, 3, rng, trial % 2 ? 6 : 0);
    std::vector<int32_t> y;
    for (int i = 0; i < 60; ++i) y.push_back(static_cast<int32_t>(rng() % 3));
    y[0] = 0, y[1] = 1, y[2] = 2;
    Tensor<double> lin = s, cube = s;
    for (auto& v : lin.data()) v = 2 * v + 1;
    for (auto& v : cube.data()) v = v * v * v;
    RocResult a = roc_auc(s, y), b = roc_auc(lin, y), c = roc_auc(cube, y);
    for (int k = 0; k < 3; ++k) {
      CHECK(*a.per_class[k].auc == doctest::Approx(*b.per_class[k].auc).epsilon(1e-12));
      CHECK(*a.per_class[k].auc == doctest::Approx(*c.per_class[k].auc).epsilon(1e-12));
    }
    CHECK(*a.micro.auc == doctest::Approx(*b.micro.auc).epsilon(1e-12));
    CHECK(*a.micro.auc == doctest::Approx(*c.micro.auc).epsilon(1e-12));
  }
}

TEST_CASE("roc_auc input validation") {
  CHECK_THROWS_AS(roc_auc(Tensor<double>({1, 3}), {0}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc(Tensor<double>({3, 3}), {0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc(Tensor<double>({2, 3}), {0, 3}), std::invalid_argument);
  RocResult r = roc_auc(Tensor<double>({2, 3}, 0.2), {0, 0});
  CHECK_FALSE(r.per_class[0].auc.has_value());
  CHECK_FALSE(r.per_class[1].auc.has_value());
  CHECK(r.micro.auc.has_value());
}

TEST_CASE("emit_plots writes one figure with per-class and micro curves") {
  std::mt19937_64 rng(9);
  Tensor<double> s = random_scores(30, 3, rng);
  std::vector<int32_t> y;
  for (int i = 0; i < 30; ++i) y.push_back(i % 3);
  MetricReport r = evaluate_scores(s, y, {"glioma", "meningioma", "pituitary"});
  const fs::path dir = scratch("emit") / "nested" / "out";
  auto files = emit_plots(r, dir);
  CHECK(files.size() == 5);
  for (const auto& f : files) CHECK(fs::file_size(f) > 0);
  const std::string roc = slurp(dir / "roc.txt");
  size_t curves = 0;
  for (size_t at = roc.find("# curve"); at != std::string::npos; at = roc.find("# curve", at + 1)) ++curves;
  CHECK(curves == 4);
  CHECK(roc.find("# curve micro") != std::string::npos);
  CHECK(slurp(dir / "confusion.txt").find("true\\pred glioma meningioma pituitary") == 0);
  CHECK(slurp(dir / "roc.png").substr(1, 3) == "PNG");

  const std::map<std::string, std::string> first = [&] {
    std::map<std::string, std::string> m;
    for (const auto& f : files) m[f.filename().string()] = slurp(f);
    return m;
  }();
  emit_plots(r, dir);
  for (const auto& [name, body] : first) CHECK(slurp(dir / name) == body);
  fs::remove_all(scratch("emit"));
}

TEST_CASE("emit_plots reports an unwritable directory") {
  const fs::path blocker = scratch("blocker");
  std::ofstream(blocker) << "x";
  MetricReport r = compute_metrics(ConfusionMatrix::from_labels({0, 1}, {0, 1}, 2));
  CHECK_THROWS_AS(emit_plots(r, blocker / "sub"), std::runtime_error);
  fs::remove(blocker);
}

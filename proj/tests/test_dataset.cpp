#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "neurofuse/architecture.hpp"
#include "neurofuse/dataset.hpp"
#include "neurofuse/image.hpp"
#include "neurofuse/weights.hpp"

using namespace nf;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("nf_dataset_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Writes `counts[i]` tiny PNGs into class directory `names[i]`, in `order`.
void make_tree(const fs::path& root, const std::vector<std::string>& names, const std::vector<int>& counts,
               uint64_t shuffle_seed = 0) {
  std::vector<std::pair<int, int>> jobs;
  for (size_t c = 0; c < names.size(); ++c)
    for (int i = 0; i < counts[c]; ++i) jobs.emplace_back(static_cast<int>(c), i);
  if (shuffle_seed) std::shuffle(jobs.begin(), jobs.end(), std::mt19937_64(shuffle_seed));
  const Image px(2, 2, 1, {10, 20, 30, 40});
  for (const auto& [c, i] : jobs) {
    fs::create_directories(root / names[c]);
    write_png(root / names[c] / ("img" + std::to_string(i) + ".png"), px);
  }
}

DatasetManifest synthetic_manifest(const std::vector<int64_t>& per_class) {
  DatasetManifest m;
  for (size_t k = 0; k < per_class.size(); ++k) {
    m.class_names.push_back("k" + std::to_string(k));
    for (int64_t i = 0; i < per_class[k]; ++i)
      m.entries.push_back({"k" + std::to_string(k) + "/" + std::to_string(i) + ".png", static_cast<int32_t>(k), Split::none});
  }
  return m;
}

std::vector<uint8_t> bytes_of(const fs::path& p) { return read_file(p); }

WeightRecord random_record(std::mt19937_64& rng, const std::string& name) {
  WeightRecord r;
  r.name = name;
  const int rank = static_cast<int>(rng() % 5);
  for (int a = 0; a < rank; ++a) r.shape.push_back(1 + static_cast<int64_t>(rng() % 5));
  std::uniform_real_distribution<float> u(-3, 3);
  if (rng() % 2) {
    r.dtype = WeightDType::int8;
    r.quant_axis = rank > 0 && rng() % 2 ? static_cast<int32_t>(rng() % rank) : -1;
    const int64_t nscale = r.quant_axis < 0 ? 1 : r.shape[r.quant_axis];
    for (int64_t s = 0; s < nscale; ++s) r.scales.push_back(std::abs(u(rng)) + 1e-3f);
    for (int64_t i = 0; i < r.elements(); ++i) r.i8.push_back(static_cast<int8_t>(static_cast<int>(rng() % 255) - 127));
  } else {
    for (int64_t i = 0; i < r.elements(); ++i) r.f32.push_back(u(rng));
  }
  return r;
}

}  // namespace

TEST_CASE("split sizes follow the floor rule") {
  CHECK(split_sizes(3064) == std::array<int64_t, 3>{2144, 306, 614});
  CHECK(split_sizes(10) == std::array<int64_t, 3>{7, 1, 2});
  CHECK(split_sizes(1) == std::array<int64_t, 3>{0, 0, 1});
}

TEST_CASE("single class of 3064 splits 2144/306/614") {
  DatasetManifest m = split_manifest(synthetic_manifest({3064}), 7);
  CHECK(m.class_counts(Split::train)[0] == 2144);
  CHECK(m.class_counts(Split::val)[0] == 306);
  CHECK(m.class_counts(Split::test)[0] == 614);
}

TEST_CASE("split invariants over 1000 random (n, seed) pairs") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 4);
    std::vector<int64_t> sizes;
    for (int k = 0; k < K; ++k) sizes.push_back(1 + static_cast<int64_t>(rng() % 300));
    const uint64_t seed = rng();
    DatasetManifest m = split_manifest(synthetic_manifest(sizes), seed);
    INFO("trial " << trial);
    std::map<Split, std::set<std::string>> by_split;
    for (const auto& e : m.entries) by_split[e.split].insert(e.path);
    CHECK(by_split.count(Split::none) == 0);
    size_t covered = 0;
    for (auto& [s, set] : by_split) covered += set.size();
    CHECK(covered == m.entries.size());
    for (Split a : {Split::train, Split::val, Split::test})
      for (Split b : {Split::train, Split::val, Split::test})
        if (a < b)
          for (const auto& p : by_split[a]) CHECK(by_split[b].count(p) == 0);
    for (int k = 0; k < K; ++k) {
      const double n = static_cast<double>(sizes[k]);
      CHECK(std::abs(m.class_counts(Split::train)[k] - 0.7 * n) <= 1.0);
      CHECK(std::abs(m.class_counts(Split::val)[k] - 0.1 * n) <= 1.0);
      // Test absorbs both floor remainders, so it can exceed 0.2n by up to (but not) 2.
      const double over = static_cast<double>(m.class_counts(Split::test)[k]) - 0.2 * n;
      CHECK(over >= -1e-9);
      CHECK(over < 2.0);
      const auto want = split_sizes(sizes[k]);
      CHECK(m.class_counts(Split::train)[k] == want[0]);
      CHECK(m.class_counts(Split::val)[k] == want[1]);
      CHECK(m.class_counts(Split::test)[k] == want[2]);
    }
    CHECK_NOTHROW(check_no_leakage(m));
    CHECK(split_manifest(synthetic_manifest(sizes), seed) == m);
  }
}

TEST_CASE("different seeds give different shuffles") {
  DatasetManifest a = split_manifest(synthetic_manifest({100, 100}), 1);
  DatasetManifest b = split_manifest(synthetic_manifest({100, 100}), 2);
  CHECK_FALSE(a.entries == b.entries);
}

TEST_CASE("leakage detection") {
  DatasetManifest m = split_manifest(synthetic_manifest({20}), 3);
  m.root = scratch("leak");
  CHECK_NOTHROW(check_no_leakage(m));
  ManifestEntry dup = m.select(Split::train)[0];
  dup.split = Split::test;
  m.entries.push_back(dup);
  CHECK_THROWS_WITH_AS(check_no_leakage(m), doctest::Contains("leakage"), std::runtime_error);
  DatasetManifest unsplit = synthetic_manifest({3});
  CHECK_THROWS_AS(check_no_leakage(unsplit), std::runtime_error);
}

TEST_CASE("Figshare-shaped tree") {
  const fs::path root = scratch("figshare");
  make_tree(root, {"glioma", "meningioma", "pituitary"}, {1426, 708, 930});
  std::ofstream(root / "glioma" / "readme.txt") << "not an image";
  DatasetManifest m = ingest(root);
  CHECK(m.entries.size() == 3064);
  CHECK(m.class_names == std::vector<std::string>{"glioma", "meningioma", "pituitary"});
  CHECK(m.class_counts() == std::vector<int64_t>{1426, 708, 930});
  CHECK(m.skipped == std::vector<std::string>{"glioma/readme.txt"});
  fs::remove_all(root);
}

TEST_CASE("Kaggle-shaped tree") {
  const fs::path root = scratch("kaggle");
  make_tree(root, {"no", "yes"}, {98, 155});
  DatasetManifest m = ingest(root);
  CHECK(m.entries.size() == 253);
  CHECK(m.num_classes() == 2);
  CHECK(m.class_counts()[0] == 98);
  fs::remove_all(root);
}

TEST_CASE("single class with one image") {
  const fs::path root = scratch("single");
  make_tree(root, {"only"}, {1});
  DatasetManifest m = ingest(root);
  CHECK(m.entries.size() == 1);
  CHECK(m.entries[0] == ManifestEntry{"only/img0.png", 0, Split::none});
  fs::remove_all(root);
}

TEST_CASE("ingest rejects empty inputs") {
  const fs::path root = scratch("empty");
  CHECK_THROWS_AS(ingest(root), std::invalid_argument);
  fs::create_directories(root / "a");
  std::ofstream(root / "a" / "x.png") << "garbage";
  CHECK_THROWS_AS(ingest(root), std::invalid_argument);
  CHECK_THROWS_AS(ingest(root / "missing"), std::invalid_argument);
  fs::remove_all(root);
}

TEST_CASE("ingest is independent of creation order") {
  const fs::path a = scratch("order_a"), b = scratch("order_b");
  make_tree(a, {"z", "m", "a"}, {12, 5, 9}, 1);
  make_tree(b, {"z", "m", "a"}, {12, 5, 9}, 2);
  DatasetManifest ma = ingest(a), mb = ingest(b);
  CHECK(ma.class_names == std::vector<std::string>{"a", "m", "z"});
  CHECK(ma.entries == mb.entries);
  CHECK(format_manifest(split_manifest(ma, 5)) == format_manifest(split_manifest(mb, 5)));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("manifest text round trip") {
  const fs::path dir = scratch("manifest");
  make_tree(dir / "data", {"x", "y"}, {6, 4});
  DatasetManifest m = split_manifest(ingest(dir / "data"), 11);
  m.skipped.push_back("x/broken.png");
  write_manifest(dir / "manifest.txt", m);
  DatasetManifest back = read_manifest(dir / "manifest.txt");
  CHECK(back.entries == m.entries);
  CHECK(back.class_names == m.class_names);
  CHECK(back.seed == 11);
  CHECK(back.skipped == m.skipped);
  CHECK(fs::equivalent(back.root, m.root));
  CHECK(fs::exists(back.resolve(back.entries[0])));
  CHECK_THROWS_AS(parse_manifest("a\t0\ttrain\n", "."), FormatError);
  CHECK_THROWS_AS(parse_manifest("# neurofuse manifest v1\n# classes a\na\t1\ttrain\n", "."), FormatError);
  CHECK_THROWS_AS(parse_manifest("# neurofuse manifest v1\n# classes a\na\t0\tholdout\n", "."), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("synthetic generator") {
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  SynthSpec spec;
  SynthResult ra = synth_generate(spec, a);
  synth_generate(spec, b);
  CHECK(ra.manifest.entries.size() == 600);
  CHECK(ra.manifest.class_counts() == std::vector<int64_t>{200, 200, 200});
  CHECK(ra.manifest.class_counts(Split::train) == std::vector<int64_t>{140, 140, 140});
  CHECK(bytes_of(a / "manifest.txt") == bytes_of(b / "manifest.txt"));
  for (size_t i = 0; i < ra.manifest.entries.size(); i += 37) {
    const auto& e = ra.manifest.entries[i];
    CHECK(bytes_of(ra.manifest.resolve(e)) == bytes_of(b / "images" / e.path));
    CHECK(fs::exists(synth_mask_path(ra.manifest, e)));
  }
  DatasetManifest reread = read_manifest(ra.manifest_path);
  CHECK(synth_mask_path(reread, reread.entries[0]) == synth_mask_path(ra.manifest, ra.manifest.entries[0]));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("noise-free synthetic classes separate by blob area; masks align") {
  const fs::path dir = scratch("synth_clean");
  SynthSpec spec;
  spec.noise = 0;
  spec.per_class = 30;
  SynthResult r = synth_generate(spec, dir);
  std::vector<std::pair<int64_t, int64_t>> area(3, {INT64_MAX, 0});
  for (const auto& e : r.manifest.entries) {
    const Image img = read_image(r.manifest.resolve(e));
    const Image mask = read_image(synth_mask_path(r.manifest, e));
    int64_t bright = 0;
    for (size_t p = 0; p < img.pixels.size(); ++p) {
      const bool in = img.pixels[p] >= 150;
      bright += in;
      CHECK(in == (mask.pixels[p] == 255));
    }
    area[e.label].first = std::min(area[e.label].first, bright);
    area[e.label].second = std::max(area[e.label].second, bright);
  }
  CHECK(area[0].second < area[1].first);
  CHECK(area[1].second < area[2].first);
  fs::remove_all(dir);
}

TEST_CASE("shaped lesions: masks cover the full extent, ring cores stay dark") {
  const fs::path dir = scratch("synth_shapes");
  SynthSpec spec;
  spec.classes = 4;
  spec.per_class = 6;
  spec.noise = 0;
  spec.shape = {BlobShape::disc, BlobShape::ring, BlobShape::square, BlobShape::cross};
  spec.radius = {{8, 9}, {10, 11}, {7, 8}, {9, 10}};
  spec.intensity.assign(4, {200.0, 220.0});
  SynthResult r = synth_generate(spec, dir);
  CHECK(r.manifest.class_names == std::vector<std::string>{"c0_disc", "c1_ring", "c2_square", "c3_cross"});
  for (const auto& e : r.manifest.entries) {
    const Image img = read_image(r.manifest.resolve(e));
    const Image mask = read_image(synth_mask_path(r.manifest, e));
    int64_t bright = 0, masked = 0, dark_in_mask = 0, bright_outside = 0;
    for (size_t p = 0; p < img.pixels.size(); ++p) {
      const bool b = img.pixels[p] >= 150, m = mask.pixels[p] == 255;
      bright += b;
      masked += m;
      dark_in_mask += m && !b;
      bright_outside += b && !m;
    }
    INFO(e.path);
    CHECK(bright_outside == 0);
    if (e.label == 1) {
      CHECK(dark_in_mask > 0);
    } else {
      CHECK(dark_in_mask == 0);
    }
    // Squares fill their bounding box; crosses fill well under half of it.
    int top = img.height, bottom = -1, left = img.width, right = -1;
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x)
        if (mask.at(y, x)) {
          top = std::min(top, y);
          bottom = std::max(bottom, y);
          left = std::min(left, x);
          right = std::max(right, x);
        }
    const double fill = static_cast<double>(masked) / ((bottom - top + 1) * (right - left + 1));
    if (e.label == 2) CHECK(fill == 1.0);
    if (e.label == 3) CHECK(fill < 0.7);
  }
  CHECK(parse_blob_shape("ring") == BlobShape::ring);
  CHECK_THROWS_AS(parse_blob_shape("blob"), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("synth spec validation") {
  SynthSpec s;
  s.radius.pop_back();
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.radius[0] = {5, 40};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.shape.push_back(BlobShape::ring);
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.wall = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("weight container round trips random records bit-exactly") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    WeightFile f;
    const int n = static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) f.records.push_back(random_record(rng, "t" + std::to_string(i)));
    const auto bytes = serialize_weights(f);
    CHECK(static_cast<int64_t>(bytes.size()) == serialized_size(f));
    CHECK(deserialize_weights(bytes) == f);
  }
}

TEST_CASE("weight container rejects corruption") {
  std::mt19937_64 rng(3);
  WeightFile f;
  f.records.push_back(random_record(rng, "a"));
  f.records.push_back(random_record(rng, "b"));
  auto bytes = serialize_weights(f);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_WITH_AS(deserialize_weights(truncated), doctest::Contains("CRC32"), FormatError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 1;
  CHECK_THROWS_WITH_AS(deserialize_weights(flipped), doctest::Contains("CRC32"), FormatError);
  ByteWriter w;
  w.bytes("XXXX", 4);
  w.u32(1);
  w.u32(0);
  w.seal();
  CHECK_THROWS_WITH_AS(deserialize_weights(w.take()), doctest::Contains("magic"), FormatError);
  f.records.push_back(f.records[0]);
  CHECK_THROWS_AS(serialize_weights(f), FormatError);
}

TEST_CASE("network weights: file size accounting and round trip") {
  ClassifierConfig cfg = ClassifierConfig::preset(Preset::tiny);
  FusionClassifier<float> a(cfg, {1, true}), b(cfg, {2, true});
  WeightFile f = collect_weights(a.params());
  int64_t payload = 0, overhead = 16;
  for (const auto& r : f.records) {
    payload += r.payload_bytes();
    overhead += 4 + static_cast<int64_t>(r.name.size()) + 1 + 4 + 8 * static_cast<int64_t>(r.shape.size()) + 4 + 4;
  }
  const fs::path dir = scratch("weights");
  write_weights(dir / "w.btwf", a.params());
  CHECK(static_cast<int64_t>(fs::file_size(dir / "w.btwf")) == payload + overhead);
  read_weights(dir / "w.btwf", b.params());
  for (const auto& p : a.params()) CHECK(b.params().find(p->name)->value() == p->value());
  fs::remove_all(dir);
}

TEST_CASE("loading reports every mismatched tensor by name") {
  ClassifierConfig cfg = ClassifierConfig::preset(Preset::tiny);
  FusionClassifier<float> net(cfg, {1, true});
  WeightFile f = collect_weights(net.params());
  f.records[0].shape.push_back(1);
  f.records[1].name = "bogus.w";
  std::string msg;
  try {
    load_weights(net.params(), f);
  } catch (const FormatError& e) {
    msg = e.what();
  }
  CHECK(msg.find(collect_weights(net.params()).records[0].name + ": file has") != std::string::npos);
  CHECK(msg.find("bogus.w: not a parameter") != std::string::npos);
  CHECK(msg.find(collect_weights(net.params()).records[1].name + ": missing") != std::string::npos);
}

TEST_CASE("int8 records dequantize per channel") {
  WeightRecord r;
  r.name = "w";
  r.dtype = WeightDType::int8;
  r.shape = {2, 3};
  r.quant_axis = 1;
  r.scales = {1.0f, 0.5f, 0.25f};
  r.i8 = {4, 4, 4, -8, -8, -8};
  Tensor<float> t = r.to_tensor();
  CHECK(t.data()[0] == 4.0f);
  CHECK(t.data()[1] == 2.0f);
  CHECK(t.data()[2] == 1.0f);
  CHECK(t.data()[5] == -2.0f);
}

#include "neurofuse/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "neurofuse/binary_io.hpp"
#include "neurofuse/image.hpp"
#include "neurofuse/preprocess.hpp"

namespace nf {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestHeader = "# neurofuse manifest v1";

// Unbiased draw from [0, n) by rejection; the standard distributions are not
// pinned across library implementations.
uint64_t bounded(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do x = rng();
  while (x >= limit);
  return x % n;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::vector<fs::path> sorted_children(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  return out;
}

// Size names when every class is a disc of the default three sizes, shape
// names otherwise.
std::string class_dir_name(int32_t k, const SynthSpec& spec) {
  static const char* sizes3[] = {"small", "medium", "large"};
  const bool all_discs = std::all_of(spec.shape.begin(), spec.shape.end(), [](BlobShape s) { return s == BlobShape::disc; });
  if (all_discs && spec.classes == 3) return "c" + std::to_string(k) + "_" + sizes3[k];
  return "c" + std::to_string(k) + "_" + blob_shape_name(spec.shape[k]);
}

}  // namespace

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::none: break;
  }
  return "none";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  if (name == "none") return Split::none;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val, test or none)");
}

std::vector<int64_t> DatasetManifest::class_counts() const {
  std::vector<int64_t> c(class_names.size(), 0);
  for (const auto& e : entries) ++c[e.label];
  return c;
}

std::vector<int64_t> DatasetManifest::class_counts(Split split) const {
  std::vector<int64_t> c(class_names.size(), 0);
  for (const auto& e : entries)
    if (e.split == split) ++c[e.label];
  return c;
}

std::vector<ManifestEntry> DatasetManifest::select(Split split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(e);
  return out;
}

DatasetManifest ingest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("dataset directory not found: " + dir.string());
  DatasetManifest m;
  m.root = dir;
  for (const auto& class_dir : sorted_children(dir, true)) {
    const auto label = static_cast<int32_t>(m.class_names.size());
    bool any = false;
    for (const auto& file : sorted_children(class_dir, false)) {
      const std::string rel = (class_dir.filename() / file.filename()).generic_string();
      try {
        read_image(file);
      } catch (const ImageIoError&) {
        m.skipped.push_back(rel);
        continue;
      }
      m.entries.push_back({rel, label, Split::none});
      any = true;
    }
    if (any) {
      m.class_names.push_back(class_dir.filename().string());
    }
  }
  if (m.class_names.empty()) throw std::invalid_argument("no class directory with a decodable image under " + dir.string());
  return m;
}

std::array<int64_t, 3> split_sizes(int64_t n) {
  const int64_t train = n * 7 / 10, val = n / 10;
  return {train, val, n - train - val};
}

DatasetManifest split_manifest(DatasetManifest manifest, uint64_t seed) {
  manifest.seed = seed;
  for (int32_t k = 0; k < manifest.num_classes(); ++k) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < manifest.entries.size(); ++i)
      if (manifest.entries[i].label == k) idx.push_back(i);
    std::mt19937_64 rng = item_rng(seed, static_cast<uint64_t>(k));
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[bounded(rng, i)]);
    const auto [train, val, test] = split_sizes(static_cast<int64_t>(idx.size()));
    for (size_t j = 0; j < idx.size(); ++j) {
      const auto pos = static_cast<int64_t>(j);
      manifest.entries[idx[j]].split = pos < train ? Split::train : pos < train + val ? Split::val : Split::test;
    }
  }
  return manifest;
}

void check_no_leakage(const DatasetManifest& manifest) {
  std::map<std::string, Split> seen;
  for (const auto& e : manifest.entries) {
    if (e.split == Split::none) throw std::runtime_error("manifest entry " + e.path + " is not assigned to a split");
    const std::string key = fs::weakly_canonical(manifest.resolve(e)).string();
    auto [it, fresh] = seen.emplace(key, e.split);
    if (!fresh) {
      throw std::runtime_error("data leakage: " + e.path + " appears in both " + split_name(it->second) + " and " +
                               split_name(e.split));
    }
  }
}

std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << kManifestHeader << "\n# seed " << m.seed << "\n# classes";
  for (const auto& c : m.class_names) os << " " << c;
  os << "\n";
  for (const auto& s : m.skipped) os << "# skipped " << s << "\n";
  for (const auto& e : m.entries) os << e.path << "\t" << e.label << "\t" << split_name(e.split) << "\n";
  return os.str();
}

DatasetManifest parse_manifest(const std::string& text, const fs::path& root) {
  DatasetManifest m;
  m.root = root;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + why);
    };
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key;
      ls >> key;
      if (line == kManifestHeader) {
        header = true;
      } else if (key == "seed") {
        if (!(ls >> m.seed)) fail("bad seed");
      } else if (key == "classes") {
        for (std::string c; ls >> c;) m.class_names.push_back(c);
      } else if (key == "skipped") {
        m.skipped.push_back(line.substr(line.find("skipped") + 8));
      } else if (key == "root") {
        m.root = root / line.substr(line.find("root") + 5);
      }
      continue;
    }
    if (!header) fail("missing manifest header");
    const size_t t1 = line.find('\t'), t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) fail("expected path<TAB>label<TAB>split");
    ManifestEntry e;
    e.path = line.substr(0, t1);
    try {
      size_t used = 0;
      const std::string lab = line.substr(t1 + 1, t2 - t1 - 1);
      e.label = std::stoi(lab, &used);
      if (used != lab.size()) fail("bad label");
    } catch (const std::logic_error&) {
      fail("bad label");
    }
    if (e.label < 0 || e.label >= m.num_classes()) fail("label outside the class list");
    try {
      e.split = parse_split(line.substr(t2 + 1));
    } catch (const std::invalid_argument& err) {
      fail(err.what());
    }
    m.entries.push_back(std::move(e));
  }
  if (!header) throw FormatError("manifest: missing header line");
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::string text = format_manifest(manifest);
  const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  const fs::path rel = fs::weakly_canonical(manifest.root).lexically_relative(fs::weakly_canonical(dir));
  const std::string root_line = "# root " + (rel.empty() ? fs::absolute(manifest.root) : rel).generic_string() + "\n";
  text.insert(text.find('\n') + 1, root_line);
  write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

DatasetManifest read_manifest(const fs::path& path) {
  const auto bytes = read_file(path);
  const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  return parse_manifest(std::string(bytes.begin(), bytes.end()), dir);
}

const char* blob_shape_name(BlobShape shape) {
  switch (shape) {
    case BlobShape::disc: return "disc";
    case BlobShape::ring: return "ring";
    case BlobShape::square: return "square";
    case BlobShape::cross: return "cross";
  }
  return "?";
}

BlobShape parse_blob_shape(const std::string& name) {
  for (BlobShape s : {BlobShape::disc, BlobShape::ring, BlobShape::square, BlobShape::cross})
    if (name == blob_shape_name(s)) return s;
  throw std::invalid_argument("unknown blob shape '" + name + "'");
}

void SynthSpec::validate() const {
  if (classes < 1) throw std::invalid_argument("synth: classes must be >= 1");
  if (per_class < 1) throw std::invalid_argument("synth: per_class must be >= 1");
  if (size < 32) throw std::invalid_argument("synth: image size must be >= 32");
  if (static_cast<int32_t>(radius.size()) != classes || static_cast<int32_t>(intensity.size()) != classes ||
      static_cast<int32_t>(shape.size()) != classes) {
    throw std::invalid_argument("synth: need one shape, radius and intensity range per class");
  }
  for (const auto& [lo, hi] : radius) {
    if (!(lo > 0 && lo <= hi && hi <= 0.25 * size)) {
      throw std::invalid_argument("synth: radius ranges must lie in (0, size/4]");
    }
  }
  for (const auto& [lo, hi] : intensity) {
    if (!(lo >= 0 && lo <= hi && hi <= 255)) throw std::invalid_argument("synth: intensity ranges must lie in [0, 255]");
  }
  if (!(head_intensity >= 0 && head_intensity <= 255)) throw std::invalid_argument("synth: head intensity must lie in [0, 255]");
  if (!(wall > 0 && wall <= 1)) throw std::invalid_argument("synth: wall must lie in (0, 1]");
  if (!(noise >= 0)) throw std::invalid_argument("synth: noise must be non-negative");
}

SynthResult synth_generate(const SynthSpec& spec, const fs::path& out_dir) {
  spec.validate();
  const fs::path images = out_dir / "images", masks = out_dir / "masks";
  const int S = spec.size;
  for (int32_t k = 0; k < spec.classes; ++k) {
    const std::string cls = class_dir_name(k, spec);
    fs::create_directories(images / cls);
    fs::create_directories(masks / cls);
    for (int32_t i = 0; i < spec.per_class; ++i) {
      std::mt19937_64 rng = item_rng(spec.seed, static_cast<uint64_t>(k) * 1000003u + static_cast<uint64_t>(i));
      std::normal_distribution<double> gauss(0.0, 1.0);
      const double c = (S - 1) / 2.0;
      const double hy = c + uniform(rng, -1.5, 1.5), hx = c + uniform(rng, -1.5, 1.5);
      const double ha = S * uniform(rng, 0.40, 0.45), hb = S * uniform(rng, 0.36, 0.42);
      const BlobShape shape = spec.shape[k];
      const double r = uniform(rng, spec.radius[k].first, spec.radius[k].second);
      const double level = uniform(rng, spec.intensity[k].first, spec.intensity[k].second);
      // Lesion centre drawn inside the head ellipse shrunk by the lesion extent.
      const double extent = shape == BlobShape::square || shape == BlobShape::cross ? r * std::sqrt(2.0) : r;
      const double sa = std::max(ha - extent - 2, 0.0), sb = std::max(hb - extent - 2, 0.0);
      double dy, dx;
      do {
        dy = uniform(rng, -1, 1);
        dx = uniform(rng, -1, 1);
      } while (dy * dy + dx * dx > 1);
      const double by = hy + dy * sa, bx = hx + dx * sb;
      Image img(S, S, 1), mask(S, S, 1);
      for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
          const double ey = (y - hy) / ha, ex = (x - hx) / hb;
          const bool in_head = ey * ey + ex * ex <= 1;
          const double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
          const double ay = std::abs(y - by), ax = std::abs(x - bx), arm = spec.wall * r;
          bool in_blob = d2 <= r * r;
          if (shape == BlobShape::square) in_blob = ay <= r && ax <= r;
          if (shape == BlobShape::cross) in_blob = (ay <= r && ax <= arm) || (ax <= r && ay <= arm);
          const double core = r * (1 - spec.wall);
          const bool bright = in_blob && (shape != BlobShape::ring || d2 > core * core);
          double v = bright ? level : in_head ? spec.head_intensity : 8.0;
          if (spec.noise > 0) v += spec.noise * gauss(rng);
          img.at(y, x) = static_cast<uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
          mask.at(y, x) = in_blob ? 255 : 0;
        }
      }
      char name[32];
      std::snprintf(name, sizeof name, "%04d.png", i);
      write_png(images / cls / name, img);
      write_png(masks / cls / name, mask);
    }
  }
  SynthResult res;
  res.manifest = split_manifest(ingest(images), spec.seed);
  res.manifest_path = out_dir / "manifest.txt";
  res.mask_root = masks;
  write_manifest(res.manifest_path, res.manifest);
  return res;
}

fs::path synth_mask_path(const DatasetManifest& manifest, const ManifestEntry& entry) {
  const fs::path p = manifest.root.parent_path() / "masks" / entry.path;
  return fs::exists(p) ? p : fs::path();
}

}  // namespace nf

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace nf {

enum class Split { none, train, val, test };

const char* split_name(Split split);
Split parse_split(const std::string& name);

/// `path` is relative to the manifest root.
struct ManifestEntry {
  std::string path;
  int32_t label = 0;
  Split split = Split::none;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  uint64_t seed = 0;
  // Files that were found but could not be decoded; never part of `entries`.
  std::vector<std::string> skipped;

  int32_t num_classes() const { return static_cast<int32_t>(class_names.size()); }
  std::vector<int64_t> class_counts() const;
  std::vector<int64_t> class_counts(Split split) const;
  std::vector<ManifestEntry> select(Split split) const;
  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
  bool operator==(const DatasetManifest&) const = default;
};

/// One subdirectory per class; class indices follow the lexicographic order of
/// the directory names and files are listed in lexicographic order.
DatasetManifest ingest(const std::filesystem::path& dir);

/// Per-class sizes (train, val, test) under the floor rule.
std::array<int64_t, 3> split_sizes(int64_t n);

/// Stratified split: each class is shuffled with a seeded Fisher-Yates pass,
/// then the first floor(0.7n) go to train, the next floor(0.1n) to val and the
/// rest to test.
DatasetManifest split_manifest(DatasetManifest manifest, uint64_t seed);

/// Throws if any path appears in more than one split or if an entry is unsplit.
void check_no_leakage(const DatasetManifest& manifest);

/// Line-oriented text: header lines starting with '#', then one
/// "path<TAB>label<TAB>split" line per entry.
std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& root);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
/// Relative entry paths resolve against the manifest's directory unless a
/// root header says otherwise.
DatasetManifest read_manifest(const std::filesystem::path& path);

enum class BlobShape { disc, ring, square, cross };

const char* blob_shape_name(BlobShape shape);
BlobShape parse_blob_shape(const std::string& name);

/// Synthetic brain-like scans: a dark field, a mid-gray "head" ellipse and one
/// bright lesion whose shape and extent depend on the class. `radius` is the
/// disc or ring radius, the square's half side or the cross's arm length. A
/// ring's wall and a cross's arm half-width are `wall` times the radius; a
/// ring's core stays at head intensity.
struct SynthSpec {
  int32_t classes = 3;
  int32_t per_class = 200;
  int32_t size = 64;
  std::vector<BlobShape> shape{BlobShape::disc, BlobShape::disc, BlobShape::disc};
  std::vector<std::pair<double, double>> radius{{4.0, 6.0}, {8.0, 10.0}, {12.0, 14.0}};
  std::vector<std::pair<double, double>> intensity{{180.0, 230.0}, {180.0, 230.0}, {180.0, 230.0}};
  double head_intensity = 110.0;
  double wall = 0.4;
  double noise = 8.0;
  uint64_t seed = 7;

  void validate() const;
};

struct SynthResult {
  DatasetManifest manifest;  // split with SynthSpec::seed
  std::filesystem::path manifest_path;
  std::filesystem::path mask_root;
};

/// Writes images/<class>/NNNN.png, masks/<class>/NNNN.png (255 over the
/// lesion's full extent, ring cores included) and manifest.txt under `out_dir`.
SynthResult synth_generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

/// Ground-truth mask path of a synthetic image, or empty when none exists.
std::filesystem::path synth_mask_path(const DatasetManifest& manifest, const ManifestEntry& entry);

}  // namespace nf

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "neurofuse/architecture.hpp"
#include "neurofuse/config.hpp"
#include "neurofuse/dataset.hpp"
#include "neurofuse/gbdt.hpp"
#include "neurofuse/preprocess.hpp"
#include "neurofuse/training.hpp"

namespace nf {

/// Everything needed to rebuild a run's network and input pipeline. Stored
/// as `run.cfg` in the run directory; keys match the command-line flags.
struct RunSettings {
  Preset preset = Preset::tiny;
  std::vector<int64_t> tap_widths;  // empty keeps the preset's widths
  int clahe_grid = 8;
  double clahe_clip = 2.0;
  int roi_margin = 0;
  bool roi = true;
  uint64_t seed = 7;
  std::filesystem::path manifest;
  std::vector<std::string> class_names;

  ClassifierConfig classifier() const;
  /// Preprocessing at the network's input size.
  PreprocessOptions preprocess() const;

  KeyValueConfig to_config() const;
  static RunSettings from_config(const KeyValueConfig& cfg);
};

/// Parses "a,b,c" into exactly three positive widths.
std::vector<int64_t> parse_tap_widths(const std::string& text);

enum class HeadChoice { automatic, mlp, gbdt };
HeadChoice parse_head_choice(const std::string& name);

/// Files of a run directory.
struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path config() const { return dir / "run.cfg"; }
  std::filesystem::path weights() const { return dir / "weights.btwf"; }
  std::filesystem::path head() const { return dir / "head.btgb"; }
  std::filesystem::path epochs() const { return dir / "train_epochs.txt"; }
  std::filesystem::path summary() const { return dir / "train_summary.txt"; }
};

/// A trained run loaded from disk: the stage-1 network and, once fitted, the
/// boosted-tree head.
struct Run {
  RunPaths paths;
  RunSettings settings;
  FusionClassifier<float> net;
  std::optional<TreeEnsemble> head;

  /// `weights` overrides the run's own weight file (for example a quantized
  /// copy); int8 records are dequantized on load.
  static Run open(const std::filesystem::path& dir, const std::filesystem::path& weights = {});

  DatasetManifest manifest() const;
  int32_t num_classes() const { return static_cast<int32_t>(settings.class_names.size()); }
  /// True when `choice` resolves to the boosted-tree head.
  bool uses_gbdt(HeadChoice choice) const;
  /// Class probabilities [N, K] from the chosen head.
  Tensor<double> probabilities(const LabeledImages& set, HeadChoice choice = HeadChoice::automatic) const;
};

/// Stage 1 on the manifest named by `settings` (whose class names are taken
/// from it): writes run.cfg, the weights and both report files into `dir` and
/// removes any stale head.
TrainReport train_run(const std::filesystem::path& dir, RunSettings settings, const TrainConfig& cfg,
                      std::ostream* log = nullptr);

/// Stage 2 on the run's training split; saves and attaches the head.
TreeEnsemble fit_head(Run& run, const BoostParams& params);

/// Preprocesses one image file for `settings`.
PreprocessResult preprocess_file(const std::filesystem::path& path, const RunSettings& settings);

/// Row-wise softmax.
Tensor<double> softmax_rows(const Tensor<double>& scores);

void write_head(const std::filesystem::path& path, const TreeEnsemble& head);
TreeEnsemble read_head(const std::filesystem::path& path);

}  // namespace nf

#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "neurofuse/architecture.hpp"
#include "neurofuse/dataset.hpp"
#include "neurofuse/gbdt.hpp"
#include "neurofuse/optim.hpp"
#include "neurofuse/preprocess.hpp"

namespace nf {

/// Preprocessed images of one split, kept as 8-bit so augmentation works on
/// the same pixels the network sees. `ids` are manifest paths.
struct LabeledImages {
  std::vector<Image> images;
  std::vector<int32_t> labels;
  std::vector<std::string> ids;

  size_t size() const { return images.size(); }
};

/// Loads and preprocesses every entry of `split` in manifest order.
LabeledImages load_split(const DatasetManifest& manifest, Split split, const PreprocessOptions& opts);

/// Stacks images into [n, H, W, C] with pixel values scaled to [0, 1]. With
/// `channels` 3, gray images are replicated into every channel; 0 keeps the
/// images' own channel count.
Tensor<float> to_batch(const std::vector<Image>& images, const std::vector<size_t>& indices, int channels = 0);
Tensor<float> to_batch(const std::vector<Image>& images, int channels = 0);

/// Independent generator for a named stream (shuffle, augment, dropout) and index.
std::mt19937_64 stream_rng(uint64_t seed, uint64_t stream, uint64_t index);

enum TrainStream : uint64_t { shuffle_stream = 1, augment_stream = 2, dropout_stream = 3 };

/// Training order of epoch `epoch` (0-based): Fisher-Yates over [0, n) drawn
/// from the shuffle stream.
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch);

/// The augmented copy of training image `index` in epoch `epoch`.
Image augmented_sample(const Image& img, const AugmentSpec& spec, uint64_t seed, int epoch, size_t index);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  AdamaxOptions optimizer;
  uint64_t seed = 7;
  bool augment = true;
  AugmentSpec augmentation;
  int log_every = 1;  // epochs between log lines; 0 silences the log
  bool keep_best = true;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_accuracy = 0;
  double first_batch_loss = 0;
  int64_t trainable_params = 0;
  double wall_seconds = 0;

  /// One line per epoch after a header.
  std::string format_epochs() const;
  /// key=value lines.
  std::string format_summary() const;
};

/// Stage 1: shuffled minibatch Adamax on softmax cross-entropy, augmenting
/// training images only. Frozen parameters are never updated. With
/// `keep_best` and a validation set, the weights of the best validation
/// accuracy epoch (earliest on ties) are restored at the end.
TrainReport train_stage1(FusionClassifier<float>& net, const LabeledImages& train, const LabeledImages& val,
                         const TrainConfig& cfg, std::ostream* log = nullptr);

/// Mean loss and accuracy of the MLP head in inference mode.
struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};
EvalResult evaluate_mlp(const FusionClassifier<float>& net, const LabeledImages& set, int batch_size = 32);

/// MLP logits [N, K] in inference mode.
Tensor<double> predict_logits(const FusionClassifier<float>& net, const LabeledImages& set, int batch_size = 32);

struct FeatureSet {
  Tensor<double> features;  // [N, pointwise_out]
  std::vector<int32_t> labels;
};

/// Batch-normalized embeddings in inference mode, without augmentation, in
/// input order.
FeatureSet extract_features(const FusionClassifier<float>& net, const LabeledImages& set, int batch_size = 32);

/// Stage 2: boosted trees on extracted training features.
TreeEnsemble train_stage2(const FeatureSet& train, const BoostParams& params, int32_t num_classes);

}  // namespace nf

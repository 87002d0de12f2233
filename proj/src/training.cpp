#include "neurofuse/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace nf {

namespace {

uint64_t bounded(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do x = rng();
  while (x >= limit);
  return x % n;
}

Tensor<float> onehot(const std::vector<int32_t>& labels, const std::vector<size_t>& indices, int64_t K) {
  Tensor<float> y({static_cast<int64_t>(indices.size()), K});
  for (size_t i = 0; i < indices.size(); ++i) y[static_cast<int64_t>(i) * K + labels[indices[i]]] = 1.0f;
  return y;
}

int64_t argmax_row(const float* row, int64_t K) { return std::max_element(row, row + K) - row; }

std::vector<size_t> range_indices(size_t begin, size_t end) {
  std::vector<size_t> idx(end - begin);
  for (size_t i = begin; i < end; ++i) idx[i - begin] = i;
  return idx;
}

void check_set(const LabeledImages& set, const char* what) {
  if (set.labels.size() != set.images.size()) {
    throw std::invalid_argument(std::string(what) + " set has mismatched images and labels");
  }
}

// Every parameter value, trainable or not; running statistics move too.
std::vector<Tensor<float>> snapshot(const ParamRegistry<float>& params) {
  std::vector<Tensor<float>> out;
  for (const auto& p : params) out.push_back(p->value());
  return out;
}

void restore(ParamRegistry<float>& params, const std::vector<Tensor<float>>& values) {
  size_t i = 0;
  for (auto& p : params) p->mutable_value() = values[i++];
}

}  // namespace

LabeledImages load_split(const DatasetManifest& manifest, Split split, const PreprocessOptions& opts) {
  LabeledImages out;
  for (const ManifestEntry& e : manifest.select(split)) {
    out.images.push_back(preprocess_image(read_image(manifest.resolve(e)), opts).image);
    out.labels.push_back(e.label);
    out.ids.push_back(e.path);
  }
  return out;
}

Tensor<float> to_batch(const std::vector<Image>& images, const std::vector<size_t>& indices, int channels) {
  if (indices.empty()) throw std::invalid_argument("cannot build an empty batch");
  const Image& first = images[indices[0]];
  const int64_t H = first.height, W = first.width, C = first.channels;
  const int64_t out_c = channels > 0 ? channels : C;
  if (out_c != C && !(C == 1 && out_c == 3)) {
    throw ShapeError("cannot feed " + std::to_string(C) + "-channel images to a " + std::to_string(out_c) +
                     "-channel input");
  }
  Tensor<float> t({static_cast<int64_t>(indices.size()), H, W, out_c});
  float* dst = t.ptr();
  for (size_t idx : indices) {
    const Image& img = images[idx];
    if (img.height != H || img.width != W || img.channels != C) {
      throw ShapeError("batch images differ in size");
    }
    for (uint8_t v : img.pixels)
      for (int64_t c = 0; c < out_c / C; ++c) *dst++ = static_cast<float>(v) / 255.0f;
  }
  return t;
}

Tensor<float> to_batch(const std::vector<Image>& images, int channels) {
  return to_batch(images, range_indices(0, images.size()), channels);
}

std::mt19937_64 stream_rng(uint64_t seed, uint64_t stream, uint64_t index) {
  return item_rng(seed ^ (stream * 0xD1B54A32D192ED03ull), index);
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch) {
  std::vector<size_t> idx = range_indices(0, n);
  std::mt19937_64 rng = stream_rng(seed, shuffle_stream, static_cast<uint64_t>(epoch));
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[bounded(rng, i)]);
  return idx;
}

Image augmented_sample(const Image& img, const AugmentSpec& spec, uint64_t seed, int epoch, size_t index) {
  std::mt19937_64 rng = stream_rng(seed, augment_stream, (static_cast<uint64_t>(epoch) << 32) ^ index);
  return augment(img, spec, rng);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  if (!(optimizer.lr >= 0)) throw std::invalid_argument("learning rate must be non-negative");
  if (log_every < 0) throw std::invalid_argument("log cadence must be non-negative");
}

std::string TrainReport::format_epochs() const {
  std::ostringstream os;
  os << "# epoch train_loss train_accuracy val_loss val_accuracy seconds\n";
  os << std::setprecision(9);
  for (const EpochRecord& e : epochs) {
    os << e.epoch << ' ' << e.train_loss << ' ' << e.train_accuracy << ' ' << e.val_loss << ' ' << e.val_accuracy
       << ' ' << std::setprecision(4) << e.seconds << std::setprecision(9) << '\n';
  }
  return os.str();
}

std::string TrainReport::format_summary() const {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "epochs=" << epochs.size() << '\n';
  os << "best_epoch=" << best_epoch << '\n';
  os << "best_val_accuracy=" << best_val_accuracy << '\n';
  if (!epochs.empty()) {
    os << "final_train_loss=" << epochs.back().train_loss << '\n';
    os << "final_val_accuracy=" << epochs.back().val_accuracy << '\n';
  }
  os << "first_batch_loss=" << first_batch_loss << '\n';
  os << "trainable_params=" << trainable_params << '\n';
  os << "wall_seconds=" << std::setprecision(4) << wall_seconds << '\n';
  return os.str();
}

TrainReport train_stage1(FusionClassifier<float>& net, const LabeledImages& train, const LabeledImages& val,
                         const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (!net.has_head()) throw std::invalid_argument("stage 1 needs the MLP head");
  check_set(train, "training");
  check_set(val, "validation");
  if (train.size() == 0) throw std::invalid_argument("training set is empty");
  const int64_t K = net.config().fusion.num_classes;
  for (const auto* set : {&train, &val})
    for (int32_t y : set->labels)
      if (y < 0 || y >= K) throw std::invalid_argument("label " + std::to_string(y) + " outside the network's classes");
  const std::unordered_set<std::string> train_ids(train.ids.begin(), train.ids.end());
  for (const std::string& id : val.ids)
    if (!id.empty() && train_ids.count(id)) throw std::runtime_error("data leakage: " + id + " is in train and val");

  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.trainable_params = net.count_trainable_params();
  Adamax<float> opt(cfg.optimizer);
  std::vector<Tensor<float>> best;
  report.best_val_accuracy = -1;
  const size_t N = train.size();
  const int C = static_cast<int>(net.config().input_channels());
  const size_t B = static_cast<size_t>(cfg.batch_size);
  int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const std::vector<size_t> order = epoch_order(N, cfg.seed, epoch);
    double loss_sum = 0;
    int64_t correct = 0;
    for (size_t b = 0; b < N; b += B) {
      std::vector<size_t> idx(order.begin() + b, order.begin() + std::min(N, b + B));
      Tensor<float> x;
      if (cfg.augment) {
        std::vector<Image> imgs;
        for (size_t i : idx) imgs.push_back(augmented_sample(train.images[i], cfg.augmentation, cfg.seed, epoch, i));
        x = to_batch(imgs, C);
      } else {
        x = to_batch(train.images, idx, C);
      }
      std::mt19937_64 dropout_rng = stream_rng(cfg.seed, dropout_stream, static_cast<uint64_t>(step++));
      ForwardContext<float> ctx;
      ctx.mode = ops::Mode::train;
      ctx.rng = &dropout_rng;
      zero_grad(net.params());
      ClassifierOutput<float> out = net.forward(Var<float>::leaf(std::move(x)), ctx);
      Var<float> loss = ops::softmax_cross_entropy(out.logits, Var<float>::leaf(onehot(train.labels, idx, K)));
      backward(loss);
      opt.step(net.params());
      const double l = loss.value()[0];
      if (epoch == 0 && b == 0) report.first_batch_loss = l;
      loss_sum += l * static_cast<double>(idx.size());
      const Tensor<float>& logits = out.logits.value();
      for (size_t i = 0; i < idx.size(); ++i)
        correct += argmax_row(&logits[static_cast<int64_t>(i) * K], K) == train.labels[idx[i]];
    }
    zero_grad(net.params());

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(N);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(N);
    if (val.size() > 0) {
      const EvalResult v = evaluate_mlp(net, val, cfg.batch_size);
      rec.val_loss = v.loss;
      rec.val_accuracy = v.accuracy;
      if (v.accuracy > report.best_val_accuracy) {
        report.best_val_accuracy = v.accuracy;
        report.best_epoch = rec.epoch;
        if (cfg.keep_best) best = snapshot(net.params());
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    report.epochs.push_back(rec);
    if (log && cfg.log_every > 0 && (rec.epoch % cfg.log_every == 0 || rec.epoch == cfg.epochs)) {
      std::ostringstream line;
      line << "epoch " << rec.epoch << "/" << cfg.epochs << std::fixed << std::setprecision(4) << " loss "
           << rec.train_loss << " acc " << rec.train_accuracy << " val_loss " << rec.val_loss << " val_acc "
           << rec.val_accuracy << " (" << std::setprecision(1) << rec.seconds << " s)\n";
      *log << line.str() << std::flush;
    }
  }
  if (val.size() == 0) {
    report.best_epoch = cfg.epochs;
    report.best_val_accuracy = 0;
  } else if (cfg.keep_best && !best.empty()) {
    restore(net.params(), best);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

Tensor<double> predict_logits(const FusionClassifier<float>& net, const LabeledImages& set, int batch_size) {
  if (!net.has_head()) throw std::invalid_argument("network has no MLP head");
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  const int64_t K = net.config().fusion.num_classes;
  Tensor<double> out({static_cast<int64_t>(set.size()), K});
  NoGradGuard no_grad;
  for (size_t b = 0; b < set.size(); b += static_cast<size_t>(batch_size)) {
    const std::vector<size_t> idx = range_indices(b, std::min(set.size(), b + batch_size));
    ForwardContext<float> ctx;
    const Tensor<float> logits = net.forward(Var<float>::leaf(to_batch(set.images, idx, static_cast<int>(net.config().input_channels()))), ctx).logits.value();
    for (int64_t i = 0; i < logits.size(); ++i) out[static_cast<int64_t>(b) * K + i] = logits[i];
  }
  return out;
}

EvalResult evaluate_mlp(const FusionClassifier<float>& net, const LabeledImages& set, int batch_size) {
  check_set(set, "evaluation");
  EvalResult r;
  if (set.size() == 0) return r;
  const Tensor<double> logits = predict_logits(net, set, batch_size);
  const int64_t K = logits.dim(1);
  int64_t correct = 0;
  for (size_t i = 0; i < set.size(); ++i) {
    const double* row = &logits[static_cast<int64_t>(i) * K];
    const double m = *std::max_element(row, row + K);
    double z = 0;
    for (int64_t k = 0; k < K; ++k) z += std::exp(row[k] - m);
    r.loss += std::log(z) + m - row[set.labels[i]];
    correct += std::max_element(row, row + K) - row == set.labels[i];
  }
  r.loss /= static_cast<double>(set.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
  return r;
}

FeatureSet extract_features(const FusionClassifier<float>& net, const LabeledImages& set, int batch_size) {
  check_set(set, "feature");
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  const int64_t D = net.config().fusion.pointwise_out;
  FeatureSet fs;
  fs.features = Tensor<double>({static_cast<int64_t>(set.size()), D});
  fs.labels = set.labels;
  NoGradGuard no_grad;
  for (size_t b = 0; b < set.size(); b += static_cast<size_t>(batch_size)) {
    const std::vector<size_t> idx = range_indices(b, std::min(set.size(), b + batch_size));
    ForwardContext<float> ctx;
    const Tensor<float> f = net.forward(Var<float>::leaf(to_batch(set.images, idx, static_cast<int>(net.config().input_channels()))), ctx).features.value();
    for (int64_t i = 0; i < f.size(); ++i) fs.features[static_cast<int64_t>(b) * D + i] = f[i];
  }
  return fs;
}

TreeEnsemble train_stage2(const FeatureSet& train, const BoostParams& params, int32_t num_classes) {
  return gbdt_fit(train.features, train.labels, params, num_classes);
}

}  // namespace nf

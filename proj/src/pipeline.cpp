#include "neurofuse/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "neurofuse/binary_io.hpp"
#include "neurofuse/weights.hpp"

namespace nf {

namespace {

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

std::string join_commas(const std::vector<std::string>& items) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  if (!(in >> v) || !(in >> std::ws).eof()) {
    throw std::invalid_argument("config key '" + key + "' has malformed value '" + text + "'");
  }
  return v;
}

std::string number_text(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

std::vector<int64_t> parse_tap_widths(const std::string& text) {
  std::vector<int64_t> widths;
  for (const std::string& item : split_commas(text)) {
    const int64_t w = parse_number<int64_t>("tap-widths", item);
    if (w < 1) throw std::invalid_argument("tap widths must be positive, got " + item);
    widths.push_back(w);
  }
  if (widths.size() != 3) throw std::invalid_argument("expected three tap widths, got '" + text + "'");
  return widths;
}

HeadChoice parse_head_choice(const std::string& name) {
  if (name == "auto") return HeadChoice::automatic;
  if (name == "mlp") return HeadChoice::mlp;
  if (name == "gbdt") return HeadChoice::gbdt;
  throw std::invalid_argument("unknown head '" + name + "' (expected auto, mlp or gbdt)");
}

ClassifierConfig RunSettings::classifier() const {
  if (class_names.empty()) throw std::invalid_argument("run settings name no classes");
  ClassifierConfig cfg = ClassifierConfig::preset(preset, static_cast<int64_t>(class_names.size()));
  if (!tap_widths.empty()) {
    if (tap_widths.size() != 3) throw std::invalid_argument("expected three tap widths");
    std::copy(tap_widths.begin(), tap_widths.end(), cfg.taps.dwsc_out_channels.begin());
  }
  return cfg;
}

PreprocessOptions RunSettings::preprocess() const {
  PreprocessOptions opts;
  opts.roi = roi;
  opts.roi_margin = roi_margin;
  opts.clahe.grid = clahe_grid;
  opts.clahe.clip_limit = clahe_clip;
  opts.out_size = static_cast<int>(classifier().input_size());
  return opts;
}

KeyValueConfig RunSettings::to_config() const {
  for (const std::string& name : class_names) {
    if (name.find(',') != std::string::npos) throw std::invalid_argument("class name '" + name + "' contains a comma");
  }
  KeyValueConfig cfg;
  cfg.set("preset", preset_name(preset));
  std::vector<std::string> widths;
  for (int64_t w : tap_widths) widths.push_back(std::to_string(w));
  if (!widths.empty()) cfg.set("tap-widths", join_commas(widths));
  cfg.set("clahe-grid", std::to_string(clahe_grid));
  cfg.set("clahe-clip", number_text(clahe_clip));
  cfg.set("roi-margin", std::to_string(roi_margin));
  cfg.set("no-roi", roi ? "false" : "true");
  cfg.set("seed", std::to_string(seed));
  cfg.set("manifest", manifest.string());
  cfg.set("class-names", join_commas(class_names));
  return cfg;
}

RunSettings RunSettings::from_config(const KeyValueConfig& cfg) {
  RunSettings s;
  s.preset = parse_preset(cfg.require("preset"));
  if (auto v = cfg.get("tap-widths")) s.tap_widths = parse_tap_widths(*v);
  if (auto v = cfg.get("clahe-grid")) s.clahe_grid = parse_number<int>("clahe-grid", *v);
  if (auto v = cfg.get("clahe-clip")) s.clahe_clip = parse_number<double>("clahe-clip", *v);
  if (auto v = cfg.get("roi-margin")) s.roi_margin = parse_number<int>("roi-margin", *v);
  if (auto v = cfg.get("no-roi")) s.roi = !parse_bool(*v);
  if (auto v = cfg.get("seed")) s.seed = parse_number<uint64_t>("seed", *v);
  s.manifest = cfg.require("manifest");
  s.class_names = split_commas(cfg.require("class-names"));
  return s;
}

Run Run::open(const std::filesystem::path& dir, const std::filesystem::path& weights) {
  RunPaths paths{dir};
  RunSettings settings = RunSettings::from_config(KeyValueConfig::load(paths.config()));
  Run run{paths, settings, FusionClassifier<float>(settings.classifier(), InitOptions{settings.seed, true}), {}};
  read_weights(weights.empty() ? paths.weights() : weights, run.net.params());
  if (std::filesystem::exists(paths.head())) run.head = read_head(paths.head());
  return run;
}

DatasetManifest Run::manifest() const {
  DatasetManifest m = read_manifest(settings.manifest);
  if (m.class_names != settings.class_names) {
    throw std::runtime_error("manifest " + settings.manifest.string() + " no longer matches the run's classes");
  }
  return m;
}

bool Run::uses_gbdt(HeadChoice choice) const {
  if (choice == HeadChoice::gbdt && !head) {
    throw std::runtime_error("run " + paths.dir.string() + " has no boosted-tree head; run fit-head first");
  }
  return choice == HeadChoice::gbdt || (choice == HeadChoice::automatic && head.has_value());
}

Tensor<double> Run::probabilities(const LabeledImages& set, HeadChoice choice) const {
  if (set.size() == 0) throw std::invalid_argument("no images to score");
  if (uses_gbdt(choice)) return gbdt_predict(*head, extract_features(net, set).features);
  return softmax_rows(predict_logits(net, set));
}

TrainReport train_run(const std::filesystem::path& dir, RunSettings settings, const TrainConfig& cfg,
                      std::ostream* log) {
  const DatasetManifest m = read_manifest(settings.manifest);
  check_no_leakage(m);
  settings.manifest = std::filesystem::absolute(settings.manifest);
  settings.class_names = m.class_names;
  const PreprocessOptions popts = settings.preprocess();
  const LabeledImages train = load_split(m, Split::train, popts);
  const LabeledImages val = load_split(m, Split::val, popts);
  FusionClassifier<float> net(settings.classifier(), InitOptions{settings.seed, true});
  const TrainReport report = train_stage1(net, train, val, cfg, log);

  std::filesystem::create_directories(dir);
  const RunPaths paths{dir};
  KeyValueConfig saved = settings.to_config();
  saved.set("epochs", std::to_string(cfg.epochs));
  saved.set("batch-size", std::to_string(cfg.batch_size));
  saved.set("lr", number_text(cfg.optimizer.lr));
  saved.set("no-augment", cfg.augment ? "false" : "true");
  saved.save(paths.config());
  write_weights(paths.weights(), net.params());
  const std::string epochs = report.format_epochs(), summary = report.format_summary();
  write_file(paths.epochs(), std::vector<uint8_t>(epochs.begin(), epochs.end()));
  write_file(paths.summary(), std::vector<uint8_t>(summary.begin(), summary.end()));
  std::filesystem::remove(paths.head());
  return report;
}

TreeEnsemble fit_head(Run& run, const BoostParams& params) {
  const LabeledImages train = load_split(run.manifest(), Split::train, run.settings.preprocess());
  TreeEnsemble head = train_stage2(extract_features(run.net, train), params, run.num_classes());
  write_head(run.paths.head(), head);
  run.head = head;
  return head;
}

PreprocessResult preprocess_file(const std::filesystem::path& path, const RunSettings& settings) {
  return preprocess_image(read_image(path), settings.preprocess());
}

Tensor<double> softmax_rows(const Tensor<double>& scores) {
  if (scores.rank() != 2) throw ShapeError("softmax_rows needs [N, K], got " + shape_str(scores.shape()));
  const int64_t N = scores.dim(0), K = scores.dim(1);
  Tensor<double> out(scores.shape());
  for (int64_t n = 0; n < N; ++n) {
    const double* row = &scores[n * K];
    const double m = *std::max_element(row, row + K);
    double z = 0;
    for (int64_t k = 0; k < K; ++k) z += out[n * K + k] = std::exp(row[k] - m);
    for (int64_t k = 0; k < K; ++k) out[n * K + k] /= z;
  }
  return out;
}

void write_head(const std::filesystem::path& path, const TreeEnsemble& head) {
  write_file(path, gbdt_serialize(head));
}

TreeEnsemble read_head(const std::filesystem::path& path) { return gbdt_deserialize(read_file(path)); }

}  // namespace nf

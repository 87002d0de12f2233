#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "neurofuse/binary_io.hpp"
#include "neurofuse/config.hpp"
#include "neurofuse/dataset.hpp"
#include "neurofuse/explain.hpp"
#include "neurofuse/metrics.hpp"
#include "neurofuse/pipeline.hpp"
#include "neurofuse/quantize.hpp"
#include "neurofuse/training.hpp"
#include "neurofuse/weights.hpp"

namespace fs = std::filesystem;
using namespace nf;

namespace {

struct PreprocessFlags {
  int clahe_grid = 8;
  double clahe_clip = 2.0;
  int roi_margin = 0;
  bool no_roi = false;

  void add_to(CLI::App* app) {
    app->add_option("--clahe-grid", clahe_grid, "CLAHE tiles per side")->capture_default_str();
    app->add_option("--clahe-clip", clahe_clip, "CLAHE clip limit")->capture_default_str();
    app->add_option("--roi-margin", roi_margin, "pixels added around the Otsu ROI")->capture_default_str();
    app->add_flag("--no-roi", no_roi, "skip the Otsu ROI crop");
  }
  void apply(RunSettings& s) const {
    s.clahe_grid = clahe_grid;
    s.clahe_clip = clahe_clip;
    s.roi_margin = roi_margin;
    s.roi = !no_roi;
  }
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

std::vector<std::pair<double, double>> parse_ranges(const std::string& text) {
  std::vector<std::pair<double, double>> out;
  for (const std::string& item : split_list(text)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("expected lo:hi, got '" + item + "'");
    out.emplace_back(std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
  }
  return out;
}

LabeledImages single_image(const Image& preprocessed) {
  LabeledImages set;
  set.images.push_back(preprocessed);
  set.labels.push_back(0);
  set.ids.push_back("input");
  return set;
}

int32_t argmax_row(const Tensor<double>& p, int64_t row) {
  const int64_t K = p.dim(1);
  const double* r = &p[row * K];
  return static_cast<int32_t>(std::max_element(r, r + K) - r);
}

// Config entries become command-line tokens unless the same flag was given
// explicitly. Keys for other subcommands are skipped; keys no subcommand
// knows are an error.
std::vector<std::string> apply_config(CLI::App& app, const std::vector<std::string>& args) {
  std::string config_path;
  for (size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;
  const KeyValueConfig cfg = KeyValueConfig::load(config_path);

  size_t sub_at = 0;
  CLI::App* sub = nullptr;
  for (size_t i = 1; i < args.size() && !sub; ++i) {
    for (CLI::App* s : app.get_subcommands([](CLI::App*) { return true; })) {
      if (s->get_name() == args[i]) {
        sub = s;
        sub_at = i;
      }
    }
  }
  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  auto known_anywhere = [&](const std::string& flag) {
    if (app.get_option_no_throw(flag)) return true;
    for (CLI::App* s : app.get_subcommands([](CLI::App*) { return true; }))
      if (s->get_option_no_throw(flag)) return true;
    return false;
  };

  std::vector<std::string> global, local;
  for (const auto& [key, value] : cfg.values) {
    const std::string flag = "--" + key;
    if (key == "config") continue;
    if (!known_anywhere(flag)) throw std::invalid_argument(config_path + ": unknown key '" + key + "'");
    CLI::Option* opt = sub ? sub->get_option_no_throw(flag) : nullptr;
    std::vector<std::string>* target = &local;
    if (!opt) {
      opt = app.get_option_no_throw(flag);
      target = &global;
    }
    if (!opt || given(flag)) continue;
    if (opt->get_expected_min() == 0) {
      if (parse_bool(value)) target->push_back(flag);
    } else {
      target->push_back(flag);
      target->push_back(value);
    }
  }
  std::vector<std::string> out{args[0]};
  out.insert(out.end(), global.begin(), global.end());
  for (size_t i = 1; i < args.size(); ++i) {
    out.push_back(args[i]);
    if (sub && i == sub_at) out.insert(out.end(), local.begin(), local.end());
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain-scan classification with a fused residual/VGG extractor and boosted trees"};
  app.require_subcommand(1);
  uint64_t seed = 7;
  std::string config_path;
  app.add_option("--seed", seed, "seed for data generation, splitting, initialization and training")
      ->capture_default_str();
  app.add_option("--config", config_path, "key=value file supplying defaults for any flag");

  // synth
  CLI::App* synth = app.add_subcommand("synth", "generate the synthetic lesion dataset");
  fs::path synth_out;
  SynthSpec spec;
  std::string shapes = "disc,disc,disc", radii = "4:6,8:10,12:14";
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--classes", spec.classes)->capture_default_str();
  synth->add_option("--per-class", spec.per_class)->capture_default_str();
  synth->add_option("--size", spec.size, "image side in pixels")->capture_default_str();
  synth->add_option("--noise", spec.noise, "Gaussian noise sigma")->capture_default_str();
  synth->add_option("--head-intensity", spec.head_intensity)->capture_default_str();
  synth->add_option("--shapes", shapes, "lesion shape per class: disc, ring, square or cross")->capture_default_str();
  synth->add_option("--radii", radii, "lesion radius range per class, lo:hi")->capture_default_str();

  // ingest
  CLI::App* ingest_cmd = app.add_subcommand("ingest", "index a class-per-directory image tree and split it 70/10/20");
  fs::path ingest_dir, ingest_out;
  ingest_cmd->add_option("--dir", ingest_dir, "dataset root")->required()->check(CLI::ExistingDirectory);
  ingest_cmd->add_option("--out", ingest_out, "manifest path (default <dir>/manifest.txt)");

  // preprocess
  CLI::App* prep = app.add_subcommand("preprocess", "run Otsu ROI, CLAHE and resizing on one image");
  fs::path prep_in, prep_out;
  int prep_size = 224;
  PreprocessFlags prep_flags;
  prep->add_option("--image", prep_in)->required()->check(CLI::ExistingFile);
  prep->add_option("--out", prep_out, "output PNG")->required();
  prep->add_option("--size", prep_size, "output side in pixels")->capture_default_str();
  prep_flags.add_to(prep);

  // train
  CLI::App* train = app.add_subcommand("train", "stage 1: train the extractor with its MLP head");
  fs::path train_manifest, train_out;
  std::string preset = "tiny", tap_widths;
  TrainConfig tcfg;
  bool no_augment = false, quiet = false;
  PreprocessFlags train_flags;
  train->add_option("--manifest", train_manifest, "dataset manifest (default: synthesize one under <out>/data)");
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--preset", preset, "paper or tiny")->capture_default_str();
  train->add_option("--tap-widths", tap_widths, "three comma-separated tap widths");
  train->add_option("--epochs", tcfg.epochs)->capture_default_str();
  train->add_option("--batch-size", tcfg.batch_size)->capture_default_str();
  train->add_option("--lr", tcfg.optimizer.lr, "Adamax learning rate")->capture_default_str();
  train->add_flag("--no-augment", no_augment, "train on unaugmented images");
  train->add_flag("--quiet", quiet, "no per-epoch log");
  train_flags.add_to(train);

  // fit-head
  CLI::App* fit = app.add_subcommand("fit-head", "stage 2: fit boosted trees on extracted features");
  fs::path fit_run;
  BoostParams boost;
  fit->add_option("--run", fit_run, "run directory")->required()->check(CLI::ExistingDirectory);
  fit->add_option("--rounds", boost.rounds)->capture_default_str();
  fit->add_option("--max-depth", boost.max_depth)->capture_default_str();
  fit->add_option("--eta", boost.eta)->capture_default_str();
  fit->add_option("--lambda", boost.lambda)->capture_default_str();
  fit->add_option("--gamma", boost.gamma)->capture_default_str();
  fit->add_option("--min-child-weight", boost.min_child_weight)->capture_default_str();

  // eval
  CLI::App* eval = app.add_subcommand("eval", "metrics, confusion matrix and ROC on one split");
  fs::path eval_run, eval_out, eval_weights;
  std::string eval_split = "test", eval_head = "auto";
  eval->add_option("--run", eval_run, "run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", eval_split, "train, val or test")->capture_default_str();
  eval->add_option("--head", eval_head, "auto, mlp or gbdt")->capture_default_str();
  eval->add_option("--weights", eval_weights, "weight file to use instead of the run's own")
      ->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "report directory (default <run>/eval-<split>)");

  // quantize
  CLI::App* quant = app.add_subcommand("quantize", "int8 post-training quantization of the extractor");
  fs::path quant_run, quant_out;
  std::string quant_split = "test";
  int64_t quant_samples = 500;
  quant->add_option("--run", quant_run, "run directory")->required()->check(CLI::ExistingDirectory);
  quant->add_option("--out", quant_out, "quantized weight file")->required();
  quant->add_option("--split", quant_split, "split used for the agreement check")->capture_default_str();
  quant->add_option("--samples", quant_samples, "at most this many images in the agreement check")
      ->capture_default_str();

  // explain
  CLI::App* expl = app.add_subcommand("explain", "Grad-CAM overlay for one image");
  fs::path expl_run, expl_image, expl_out, expl_weights;
  int expl_class = -1;
  double expl_alpha = 0.4;
  std::string expl_layer = FusionClassifier<float>::kPointwiseLayer;
  expl->add_option("--run", expl_run, "run directory")->required()->check(CLI::ExistingDirectory);
  expl->add_option("--image", expl_image)->required()->check(CLI::ExistingFile);
  expl->add_option("--out", expl_out, "overlay PNG")->required();
  expl->add_option("--class", expl_class, "class index (default: the predicted class)");
  expl->add_option("--layer", expl_layer, "target convolution layer")->capture_default_str();
  expl->add_option("--alpha", expl_alpha, "heatmap opacity")->capture_default_str();
  expl->add_option("--weights", expl_weights, "weight file to use instead of the run's own")
      ->check(CLI::ExistingFile);

  // predict
  CLI::App* pred = app.add_subcommand("predict", "classify images");
  fs::path pred_run, pred_weights;
  std::vector<fs::path> pred_images;
  std::string pred_head = "auto";
  pred->add_option("--run", pred_run, "run directory")->required()->check(CLI::ExistingDirectory);
  pred->add_option("--image", pred_images, "one or more images")->required()->check(CLI::ExistingFile);
  pred->add_option("--head", pred_head, "auto, mlp or gbdt")->capture_default_str();
  pred->add_option("--weights", pred_weights, "weight file to use instead of the run's own")
      ->check(CLI::ExistingFile);

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = apply_config(app, args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::vector<char*> cargs;
  for (std::string& a : args) cargs.push_back(a.data());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::cout << std::setprecision(6);

    if (*synth) {
      spec.seed = seed;
      spec.shape.clear();
      for (const std::string& s : split_list(shapes)) spec.shape.push_back(parse_blob_shape(s));
      spec.radius = parse_ranges(radii);
      spec.intensity.assign(static_cast<size_t>(std::max(spec.classes, 0)), {180.0, 230.0});
      const SynthResult r = synth_generate(spec, synth_out);
      std::cout << "wrote " << r.manifest.entries.size() << " images, manifest " << r.manifest_path.string() << "\n";
      for (Split s : {Split::train, Split::val, Split::test}) {
        std::cout << "  " << split_name(s) << ": " << r.manifest.select(s).size() << "\n";
      }
    }

    if (*ingest_cmd) {
      if (ingest_out.empty()) ingest_out = ingest_dir / "manifest.txt";
      const DatasetManifest m = split_manifest(ingest(ingest_dir), seed);
      write_manifest(ingest_out, m);
      std::cout << "indexed " << m.entries.size() << " images in " << m.num_classes() << " classes, manifest "
                << ingest_out.string() << "\n";
      const std::vector<int64_t> counts = m.class_counts();
      for (int32_t k = 0; k < m.num_classes(); ++k) std::cout << "  " << m.class_names[k] << ": " << counts[k] << "\n";
      for (const std::string& s : m.skipped) std::cout << "  skipped undecodable " << s << "\n";
    }

    if (*prep) {
      PreprocessOptions opts;
      opts.roi = !prep_flags.no_roi;
      opts.roi_margin = prep_flags.roi_margin;
      opts.clahe.grid = prep_flags.clahe_grid;
      opts.clahe.clip_limit = prep_flags.clahe_clip;
      opts.out_size = prep_size;
      const PreprocessResult r = preprocess_image(read_image(prep_in), opts);
      write_png(prep_out, r.image);
      std::cout << "otsu threshold " << r.threshold << ", roi " << r.roi.height << "x" << r.roi.width << " at ("
                << r.roi.top << ", " << r.roi.left << ")"
                << (r.empty_foreground ? ", empty foreground" : "") << "\n";
    }

    if (*train) {
      RunSettings settings;
      settings.preset = parse_preset(preset);
      if (!tap_widths.empty()) settings.tap_widths = parse_tap_widths(tap_widths);
      settings.seed = seed;
      train_flags.apply(settings);
      fs::create_directories(train_out);
      if (train_manifest.empty()) {
        SynthSpec data;
        data.seed = seed;
        data.size = static_cast<int32_t>(ClassifierConfig::preset(settings.preset, data.classes).input_size());
        train_manifest = synth_generate(data, train_out / "data").manifest_path;
        std::cout << "synthesized " << data.classes * data.per_class << " images under "
                  << (train_out / "data").string() << "\n";
      }
      settings.manifest = train_manifest;
      tcfg.seed = seed;
      tcfg.augment = !no_augment;
      tcfg.log_every = quiet ? 0 : 1;
      std::cout << "training " << preset_name(settings.preset) << " from " << train_manifest.string() << "\n";
      const TrainReport report = train_run(train_out, settings, tcfg, quiet ? nullptr : &std::cout);
      const RunPaths paths{train_out};
      std::cout << "best val accuracy " << report.best_val_accuracy << " at epoch " << report.best_epoch << "/"
                << tcfg.epochs << ", " << report.wall_seconds << " s; weights " << paths.weights().string() << "\n";
    }

    if (*fit) {
      Run run = Run::open(fit_run);
      const DatasetManifest m = run.manifest();
      const PreprocessOptions popts = run.settings.preprocess();
      const TreeEnsemble head = fit_head(run, boost);
      std::cout << "fitted " << head.rounds() << " rounds x " << head.num_classes << " trees; head "
                << run.paths.head().string() << "\n";
      const LabeledImages val_set = load_split(m, Split::val, popts);
      if (val_set.size() > 0) {
        for (HeadChoice h : {HeadChoice::mlp, HeadChoice::gbdt}) {
          const MetricReport r = evaluate_scores(run.probabilities(val_set, h), val_set.labels, m.class_names);
          std::cout << "  val accuracy (" << (h == HeadChoice::mlp ? "mlp" : "gbdt") << ") " << r.accuracy << "\n";
        }
      }
    }

    if (*eval) {
      const Run run = Run::open(eval_run, eval_weights);
      const DatasetManifest m = run.manifest();
      const LabeledImages set = load_split(m, parse_split(eval_split), run.settings.preprocess());
      const HeadChoice head = parse_head_choice(eval_head);
      const MetricReport report = evaluate_scores(run.probabilities(set, head), set.labels, m.class_names);
      if (eval_out.empty()) eval_out = run.paths.dir / ("eval-" + eval_split);
      emit_plots(report, eval_out);
      std::cout << "head " << (run.uses_gbdt(head) ? "gbdt" : "mlp") << ", " << set.size() << " " << eval_split
                << " images\n"
                << format_report(report) << "reports in " << eval_out.string() << "\n";
    }

    if (*quant) {
      const Run run = Run::open(quant_run);
      const QuantizedModel q = quantize_model(run.net.params());
      write_file(quant_out, serialize_weights(q.weights));
      std::cout << "extractor " << q.size.f32_bytes << " -> " << q.size.quantized_bytes << " bytes (ratio "
                << q.size.ratio() << ", " << q.size.quantized_tensors << " int8 tensors); wrote " << quant_out.string()
                << "\n";

      const Run reloaded = Run::open(quant_run, quant_out);
      LabeledImages set = load_split(run.manifest(), parse_split(quant_split), run.settings.preprocess());
      if (quant_samples > 0 && static_cast<int64_t>(set.size()) > quant_samples) {
        set.images.resize(static_cast<size_t>(quant_samples));
        set.labels.resize(static_cast<size_t>(quant_samples));
      }
      if (set.size() > 0) {
        const AgreementReport a =
            fidelity_check(run.net, reloaded.net, to_batch(set.images, static_cast<int>(run.net.config().input_channels())),
                           run.head ? &*run.head : nullptr);
        std::cout << "top-1 agreement " << a.agreements << "/" << a.samples << " (" << a.agreement()
                  << "), max score deviation " << a.max_score_deviation << " on " << quant_split << " ("
                  << (run.head ? "gbdt" : "mlp") << " head)\n";
      }
    }

    if (*expl) {
      Run run = Run::open(expl_run, expl_weights);
      const PreprocessResult p = preprocess_file(expl_image, run.settings);
      const LabeledImages set = single_image(p.image);
      const Tensor<double> probs = run.probabilities(set);
      const int32_t predicted = argmax_row(probs, 0);
      const int cls = expl_class >= 0 ? expl_class : predicted;
      const Tensor<float> x = to_batch(set.images, static_cast<int>(run.net.config().input_channels()));
      const Heatmap hm = grad_cam(run.net, x, cls, expl_layer);
      write_png(expl_out, overlay(p.image, hm, expl_alpha));
      std::cout << "class " << cls << " (" << run.settings.class_names.at(static_cast<size_t>(cls)) << "), predicted "
                << run.settings.class_names[static_cast<size_t>(predicted)] << "; " << hm.layer << " grid "
                << hm.grid_height << "x" << hm.grid_width << "; wrote " << expl_out.string() << "\n";
    }

    if (*pred) {
      const Run run = Run::open(pred_run, pred_weights);
      LabeledImages set;
      for (const fs::path& path : pred_images) {
        set.images.push_back(preprocess_file(path, run.settings).image);
        set.labels.push_back(0);
        set.ids.push_back(path.string());
      }
      const Tensor<double> probs = run.probabilities(set, parse_head_choice(pred_head));
      const int64_t K = probs.dim(1);
      for (size_t i = 0; i < set.size(); ++i) {
        const int32_t k = argmax_row(probs, static_cast<int64_t>(i));
        std::cout << set.ids[i] << "\t" << run.settings.class_names[static_cast<size_t>(k)];
        for (int64_t c = 0; c < K; ++c) std::cout << "\t" << probs[static_cast<int64_t>(i) * K + c];
        std::cout << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

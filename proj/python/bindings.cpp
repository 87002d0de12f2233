#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "neurofuse/explain.hpp"
#include "neurofuse/metrics.hpp"
#include "neurofuse/pipeline.hpp"
#include "neurofuse/quantize.hpp"

namespace py = pybind11;
using namespace nf;

namespace {

using U8Array = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const U8Array& a) {
  if (a.ndim() == 2) {
    return Image(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 1,
                 std::vector<uint8_t>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() == 3 && (a.shape(2) == 1 || a.shape(2) == 3)) {
    return Image(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)),
                 std::vector<uint8_t>(a.data(), a.data() + a.size()));
  }
  throw py::value_error("expected an image of shape (H, W) or (H, W, 1|3)");
}

py::array_t<uint8_t> from_image(const Image& img) {
  std::vector<py::ssize_t> shape{img.height, img.width};
  if (img.channels > 1) shape.push_back(img.channels);
  py::array_t<uint8_t> out(shape);
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

template <typename T>
py::array_t<T> from_tensor(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor<double> to_matrix(const F64Array& a, const char* what) {
  if (a.ndim() != 2) throw py::value_error(std::string(what) + " must be a 2-D array");
  return Tensor<double>({a.shape(0), a.shape(1)}, std::vector<double>(a.data(), a.data() + a.size()));
}

std::vector<int32_t> to_labels(const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw py::value_error("labels must be a 1-D array");
  return std::vector<int32_t>(a.data(), a.data() + a.size());
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["accuracy"] = r.accuracy;
  d["macro_precision"] = r.macro_precision;
  d["macro_recall"] = r.macro_recall;
  d["macro_f1"] = r.macro_f1;
  d["micro_f1"] = r.micro_f1;
  d["mcc"] = r.mcc;
  d["precision"] = r.precision;
  d["recall"] = r.recall;
  d["f1"] = r.f1;
  std::vector<py::object> auc;
  for (const RocCurve& c : r.roc) auc.push_back(c.auc ? py::cast(*c.auc) : py::none());
  d["auc"] = auc;
  d["micro_auc"] = r.micro_roc.auc ? py::cast(*r.micro_roc.auc) : py::none();
  const int32_t K = r.confusion.num_classes;
  py::array_t<int64_t> cm({K, K});
  std::copy(r.confusion.counts.begin(), r.confusion.counts.end(), cm.mutable_data());
  d["confusion"] = cm;
  d["class_names"] = r.class_names;
  return d;
}

LabeledImages image_set(const Run& run, const std::vector<std::filesystem::path>& paths) {
  LabeledImages set;
  for (const auto& p : paths) {
    set.images.push_back(preprocess_file(p, run.settings).image);
    set.labels.push_back(0);
    set.ids.push_back(p.string());
  }
  return set;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Brain-scan classification: preprocessing, fused extractor, boosted trees, Grad-CAM";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("read_image", [](const std::filesystem::path& p) { return from_image(read_image(p)); }, py::arg("path"));
  m.def("otsu_threshold", [](const U8Array& img) { return otsu_threshold(to_grayscale(to_image(img))).threshold; },
        py::arg("image"));
  m.def(
      "clahe",
      [](const U8Array& img, int grid, double clip) {
        return from_image(clahe(to_grayscale(to_image(img)), ClaheParams{grid, clip}));
      },
      py::arg("image"), py::arg("grid") = 8, py::arg("clip_limit") = 2.0);
  m.def(
      "preprocess",
      [](const U8Array& img, int out_size, bool roi, int roi_margin, int clahe_grid, double clahe_clip) {
        PreprocessOptions opts;
        opts.out_size = out_size;
        opts.roi = roi;
        opts.roi_margin = roi_margin;
        opts.clahe = ClaheParams{clahe_grid, clahe_clip};
        return from_image(preprocess_image(to_image(img), opts).image);
      },
      py::arg("image"), py::arg("out_size") = 224, py::arg("roi") = true, py::arg("roi_margin") = 0,
      py::arg("clahe_grid") = 8, py::arg("clahe_clip") = 2.0);

  m.def(
      "synth",
      [](const std::filesystem::path& out_dir, uint64_t seed, int per_class, int size, double noise) {
        SynthSpec spec;
        spec.seed = seed;
        spec.per_class = per_class;
        spec.size = size;
        spec.noise = noise;
        return synth_generate(spec, out_dir).manifest_path;
      },
      py::arg("out_dir"), py::arg("seed") = 7, py::arg("per_class") = 200, py::arg("size") = 64,
      py::arg("noise") = 8.0, "Writes the synthetic lesion dataset and returns its manifest path.");

  m.def(
      "train",
      [](const std::filesystem::path& manifest, const std::filesystem::path& out_dir, const std::string& preset,
         int epochs, uint64_t seed, int batch_size, double lr, bool augment, std::vector<int64_t> tap_widths) {
        RunSettings settings;
        settings.preset = parse_preset(preset);
        settings.tap_widths = std::move(tap_widths);
        settings.seed = seed;
        settings.manifest = manifest;
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.batch_size = batch_size;
        cfg.optimizer.lr = lr;
        cfg.augment = augment;
        TrainReport report;
        {
          py::gil_scoped_release release;
          report = train_run(out_dir, settings, cfg);
        }
        py::dict d;
        d["best_epoch"] = report.best_epoch;
        d["best_val_accuracy"] = report.best_val_accuracy;
        d["first_batch_loss"] = report.first_batch_loss;
        d["trainable_params"] = report.trainable_params;
        d["wall_seconds"] = report.wall_seconds;
        std::vector<double> train_loss, val_accuracy;
        for (const EpochRecord& e : report.epochs) {
          train_loss.push_back(e.train_loss);
          val_accuracy.push_back(e.val_accuracy);
        }
        d["train_loss"] = train_loss;
        d["val_accuracy"] = val_accuracy;
        return d;
      },
      py::arg("manifest"), py::arg("out_dir"), py::arg("preset") = "tiny", py::arg("epochs") = 50,
      py::arg("seed") = 7, py::arg("batch_size") = 32, py::arg("lr") = 1e-3, py::arg("augment") = true,
      py::arg("tap_widths") = std::vector<int64_t>{},
      "Stage-1 training into a run directory; returns the training summary.");

  py::class_<TreeEnsemble>(m, "TreeEnsemble")
      .def_property_readonly("num_classes", [](const TreeEnsemble& t) { return t.num_classes; })
      .def_property_readonly("rounds", &TreeEnsemble::rounds)
      .def("predict_proba", [](const TreeEnsemble& t, const F64Array& x) {
        return from_tensor(gbdt_predict(t, to_matrix(x, "features")));
      })
      .def("to_bytes", [](const TreeEnsemble& t) {
        const std::vector<uint8_t> b = gbdt_serialize(t);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      })
      .def_static("from_bytes", [](const py::bytes& b) {
        const std::string s = b;
        return gbdt_deserialize(std::vector<uint8_t>(s.begin(), s.end()));
      })
      .def("__eq__", [](const TreeEnsemble& a, const TreeEnsemble& b) { return a == b; });

  m.def(
      "gbdt_fit",
      [](const F64Array& x, const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& y, int rounds,
         int max_depth, double eta, double lambda, double gamma, double min_child_weight, int32_t num_classes) {
        const Tensor<double> features = to_matrix(x, "features");
        const std::vector<int32_t> labels = to_labels(y);
        py::gil_scoped_release release;
        return gbdt_fit(features, labels, BoostParams{rounds, max_depth, eta, lambda, gamma, min_child_weight},
                        num_classes);
      },
      py::arg("features"), py::arg("labels"), py::arg("rounds") = 100, py::arg("max_depth") = 4, py::arg("eta") = 0.3,
      py::arg("lambda_") = 1.0, py::arg("gamma") = 0.0, py::arg("min_child_weight") = 1.0, py::arg("num_classes") = 0);

  m.def(
      "evaluate_scores",
      [](const F64Array& scores, const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& labels,
         std::vector<std::string> class_names) {
        return report_dict(evaluate_scores(to_matrix(scores, "scores"), to_labels(labels), std::move(class_names)));
      },
      py::arg("scores"), py::arg("labels"), py::arg("class_names") = std::vector<std::string>{});

  m.def(
      "quantize_tensor",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& w, bool per_channel, int32_t axis) {
        Shape shape(w.shape(), w.shape() + w.ndim());
        const Tensor<float> t(shape, std::vector<float>(w.data(), w.data() + w.size()));
        const QuantizedTensor q = quantize_tensor(t, per_channel ? QuantScheme::per_channel : QuantScheme::per_tensor, axis);
        py::array_t<int8_t> values(std::vector<py::ssize_t>(shape.begin(), shape.end()));
        std::copy(q.q.begin(), q.q.end(), values.mutable_data());
        return py::make_tuple(values, py::array_t<float>(q.scales.size(), q.scales.data()));
      },
      py::arg("weights"), py::arg("per_channel") = false, py::arg("axis") = -1,
      "Symmetric int8 quantization; returns (int8 values, scales).");

  py::class_<Run>(m, "Run")
      .def_static(
          "open", [](const std::filesystem::path& dir, const std::string& weights) { return Run::open(dir, weights); },
          py::arg("run_dir"), py::arg("weights") = "", "Loads a run; `weights` overrides its weight file.")
      .def_property_readonly("class_names", [](const Run& r) { return r.settings.class_names; })
      .def_property_readonly("has_head", [](const Run& r) { return r.head.has_value(); })
      .def_property_readonly("head", [](const Run& r) { return r.head; })
      .def(
          "fit_head",
          [](Run& r, int rounds, int max_depth, double eta) {
            py::gil_scoped_release release;
            BoostParams p;
            p.rounds = rounds;
            p.max_depth = max_depth;
            p.eta = eta;
            return fit_head(r, p);
          },
          py::arg("rounds") = 100, py::arg("max_depth") = 4, py::arg("eta") = 0.3)
      .def(
          "predict",
          [](const Run& r, const std::vector<std::filesystem::path>& images, const std::string& head) {
            const LabeledImages set = image_set(r, images);
            Tensor<double> p;
            {
              py::gil_scoped_release release;
              p = r.probabilities(set, parse_head_choice(head));
            }
            return from_tensor(p);
          },
          py::arg("images"), py::arg("head") = "auto", "Class probabilities [N, K] for image files.")
      .def(
          "evaluate",
          [](const Run& r, const std::string& split, const std::string& head) {
            const DatasetManifest m = r.manifest();
            const LabeledImages set = load_split(m, parse_split(split), r.settings.preprocess());
            return report_dict(evaluate_scores(r.probabilities(set, parse_head_choice(head)), set.labels, m.class_names));
          },
          py::arg("split") = "test", py::arg("head") = "auto")
      .def(
          "grad_cam",
          [](Run& r, const std::filesystem::path& image, int class_index, const std::string& layer) {
            const LabeledImages set = image_set(r, {image});
            if (class_index < 0) {
              const Tensor<double> p = r.probabilities(set);
              class_index = static_cast<int>(std::max_element(p.data().begin(), p.data().end()) - p.data().begin());
            }
            const Heatmap hm =
                grad_cam(r.net, to_batch(set.images, static_cast<int>(r.net.config().input_channels())), class_index, layer);
            py::array_t<double> out({hm.height, hm.width});
            std::copy(hm.upsampled.begin(), hm.upsampled.end(), out.mutable_data());
            return py::make_tuple(class_index, out);
          },
          py::arg("image"), py::arg("class_index") = -1,
          py::arg("layer") = std::string(FusionClassifier<float>::kPointwiseLayer),
          "Returns (class index, heatmap in [0, 1] at the network input size).")
      .def(
          "quantize",
          [](const Run& r, const std::filesystem::path& out) {
            const QuantizedModel q = quantize_model(r.net.params());
            write_file(out, serialize_weights(q.weights));
            py::dict d;
            d["f32_bytes"] = q.size.f32_bytes;
            d["quantized_bytes"] = q.size.quantized_bytes;
            d["ratio"] = q.size.ratio();
            return d;
          },
          py::arg("out"));
}

#include "neurofuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "neurofuse/binary_io.hpp"

namespace nf {

namespace {

double ratio(double num, double den) { return den == 0 ? 0.0 : num / den; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt_auc(const std::optional<double>& auc) { return auc ? fmt(*auc) : "undefined"; }

std::string class_name(const MetricReport& r, int32_t k) {
  return k < static_cast<int32_t>(r.class_names.size()) ? r.class_names[k] : "class" + std::to_string(k);
}

const cv::Scalar kPalette[] = {{200, 80, 30}, {40, 140, 40}, {30, 60, 200}, {160, 40, 160},
                               {20, 150, 180}, {120, 120, 20}, {90, 90, 90}};

cv::Mat render_roc(const MetricReport& r) {
  constexpr int W = 640, H = 560, L = 70, T = 30, S = 440;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  const auto pt = [&](double x, double y) {
    return cv::Point(L + static_cast<int>(std::lround(x * S)), T + static_cast<int>(std::lround((1 - y) * S)));
  };
  cv::rectangle(img, pt(0, 1), pt(1, 0), cv::Scalar(0, 0, 0), 1);
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    cv::putText(img, fmt(v).substr(0, 4), pt(v, 0) + cv::Point(-14, 18), cv::FONT_HERSHEY_PLAIN, 0.9,
                cv::Scalar(0, 0, 0));
    cv::putText(img, fmt(v).substr(0, 4), pt(0, v) + cv::Point(-40, 4), cv::FONT_HERSHEY_PLAIN, 0.9,
                cv::Scalar(0, 0, 0));
  }
  for (int i = 0; i < 40; i += 2) cv::line(img, pt(i / 40.0, i / 40.0), pt((i + 1) / 40.0, (i + 1) / 40.0), {160, 160, 160});
  cv::putText(img, "false positive rate", pt(0.35, 0) + cv::Point(0, 40), cv::FONT_HERSHEY_PLAIN, 1.0, {0, 0, 0});
  cv::putText(img, "true positive rate", {4, T - 10}, cv::FONT_HERSHEY_PLAIN, 1.0, {0, 0, 0});

  auto draw = [&](const RocCurve& c, const cv::Scalar& color, int thickness) {
    for (size_t i = 1; i < c.fpr.size(); ++i) cv::line(img, pt(c.fpr[i - 1], c.tpr[i - 1]), pt(c.fpr[i], c.tpr[i]), color, thickness);
  };
  int row = 0;
  auto legend = [&](const std::string& text, const cv::Scalar& color) {
    const cv::Point at = pt(0.45, 0) + cv::Point(0, -14 - 18 * row++);
    cv::line(img, at + cv::Point(0, -4), at + cv::Point(20, -4), color, 2);
    cv::putText(img, text, at + cv::Point(26, 0), cv::FONT_HERSHEY_PLAIN, 1.0, {0, 0, 0});
  };
  for (size_t k = 0; k < r.roc.size(); ++k) {
    const cv::Scalar color = kPalette[k % std::size(kPalette)];
    draw(r.roc[k], color, 2);
    legend(class_name(r, static_cast<int32_t>(k)) + " AUC " + fmt_auc(r.roc[k].auc), color);
  }
  draw(r.micro_roc, {0, 0, 0}, 1);
  legend("micro AUC " + fmt_auc(r.micro_roc.auc), {0, 0, 0});
  return img;
}

cv::Mat render_confusion(const MetricReport& r) {
  const int K = r.confusion.num_classes, cell = std::max(40, 320 / std::max(K, 1)), L = 110, T = 40;
  cv::Mat img(T + K * cell + 60, L + K * cell + 20, CV_8UC3, cv::Scalar(255, 255, 255));
  for (int t = 0; t < K; ++t) {
    int64_t row_total = 0;
    for (int p = 0; p < K; ++p) row_total += r.confusion.at(t, p);
    for (int p = 0; p < K; ++p) {
      const int64_t n = r.confusion.at(t, p);
      const double frac = ratio(static_cast<double>(n), static_cast<double>(row_total));
      const int shade = 255 - static_cast<int>(std::lround(frac * 200));
      const cv::Rect box(L + p * cell, T + t * cell, cell, cell);
      cv::rectangle(img, box, cv::Scalar(255, shade, shade), cv::FILLED);
      cv::rectangle(img, box, cv::Scalar(0, 0, 0), 1);
      const cv::Scalar ink = frac > 0.6 ? cv::Scalar(255, 255, 255) : cv::Scalar(0, 0, 0);
      cv::putText(img, std::to_string(n), box.tl() + cv::Point(6, cell / 2 + 5), cv::FONT_HERSHEY_PLAIN, 1.0, ink);
    }
    cv::putText(img, class_name(r, t).substr(0, 12), {4, T + t * cell + cell / 2 + 5}, cv::FONT_HERSHEY_PLAIN, 0.9,
                {0, 0, 0});
    cv::putText(img, std::to_string(t), {L + t * cell + cell / 2 - 4, T - 8}, cv::FONT_HERSHEY_PLAIN, 1.0, {0, 0, 0});
  }
  cv::putText(img, "rows: true, cols: predicted", {4, T + K * cell + 30}, cv::FONT_HERSHEY_PLAIN, 1.0, {0, 0, 0});
  return img;
}

std::vector<uint8_t> png_bytes(const cv::Mat& img) {
  std::vector<uint8_t> out;
  if (!cv::imencode(".png", img, out)) throw std::runtime_error("PNG encoding failed");
  return out;
}

std::vector<uint8_t> text_bytes(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

ConfusionMatrix::ConfusionMatrix(int32_t k) : num_classes(k), counts(static_cast<size_t>(k) * k, 0) {
  if (k < 1) throw std::invalid_argument("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_labels(const std::vector<int32_t>& truth, const std::vector<int32_t>& predicted,
                                             int32_t k) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("truth and prediction lengths differ");
  ConfusionMatrix cm(k);
  for (size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

void ConfusionMatrix::add(int32_t truth, int32_t predicted) {
  if (truth < 0 || truth >= num_classes || predicted < 0 || predicted >= num_classes) {
    throw std::invalid_argument("class index outside [0, " + std::to_string(num_classes) + ")");
  }
  ++at(truth, predicted);
}

int64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), int64_t{0}); }

double matthews_corrcoef(const ConfusionMatrix& cm) {
  const int32_t K = cm.num_classes;
  long double c = 0, s = 0, pt = 0, pp = 0, tt = 0;
  for (int32_t k = 0; k < K; ++k) {
    long double t = 0, p = 0;
    for (int32_t j = 0; j < K; ++j) {
      t += cm.at(k, j);
      p += cm.at(j, k);
    }
    c += cm.at(k, k);
    s += t;
    pt += p * t;
    pp += p * p;
    tt += t * t;
  }
  const long double den = (s * s - pp) * (s * s - tt);
  if (den == 0) return 0.0;
  return static_cast<double>((c * s - pt) / std::sqrt(den));
}

MetricReport compute_metrics(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total <= 0) throw std::invalid_argument("metrics need a non-empty confusion matrix");
  for (int64_t v : cm.counts) {
    if (v < 0) throw std::invalid_argument("confusion matrix has a negative count");
  }
  const int32_t K = cm.num_classes;
  MetricReport r;
  r.confusion = cm;
  int64_t trace = 0, pooled_true = 0, pooled_predicted = 0;
  for (int32_t k = 0; k < K; ++k) {
    int64_t row = 0, col = 0;
    for (int32_t j = 0; j < K; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const double tp = static_cast<double>(cm.at(k, k));
    trace += cm.at(k, k);
    pooled_true += row;
    pooled_predicted += col;
    const double p = ratio(tp, static_cast<double>(col)), rc = ratio(tp, static_cast<double>(row));
    r.precision.push_back(p);
    r.recall.push_back(rc);
    r.f1.push_back(ratio(2 * p * rc, p + rc));
  }
  const auto mean = [&](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / K; };
  r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  r.macro_precision = mean(r.precision);
  r.macro_recall = mean(r.recall);
  r.macro_f1 = mean(r.f1);
  r.micro_precision = ratio(static_cast<double>(trace), static_cast<double>(pooled_predicted));
  r.micro_recall = ratio(static_cast<double>(trace), static_cast<double>(pooled_true));
  r.micro_f1 = ratio(2 * r.micro_precision * r.micro_recall, r.micro_precision + r.micro_recall);
  r.mcc = matthews_corrcoef(cm);
  return r;
}

RocCurve roc_curve(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("ROC scores and labels differ in length");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  const auto P = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  const auto N = static_cast<double>(positive.size()) - P;
  RocCurve c;
  if (P == 0 || N == 0) return c;
  c.fpr.push_back(0);
  c.tpr.push_back(0);
  double tp = 0, fp = 0, area = 0;
  for (size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (positive[order[i]] ? tp : fp) += 1;
    const double x = fp / N, y = tp / P;
    area += (x - c.fpr.back()) * (y + c.tpr.back()) / 2;
    c.fpr.push_back(x);
    c.tpr.push_back(y);
  }
  c.auc = area;
  return c;
}

RocResult roc_auc(const Tensor<double>& scores, const std::vector<int32_t>& labels) {
  if (scores.rank() != 2) throw ShapeError("ROC scores must be [N, K], got " + shape_str(scores.shape()));
  const int64_t N = scores.dim(0), K = scores.dim(1);
  if (static_cast<int64_t>(labels.size()) != N) throw std::invalid_argument("ROC labels do not match score rows");
  if (N < 2) throw std::invalid_argument("ROC needs at least 2 samples");
  for (int32_t y : labels) {
    if (y < 0 || y >= K) throw std::invalid_argument("ROC label outside [0, K)");
  }
  RocResult out;
  std::vector<double> pooled;
  std::vector<bool> pooled_pos;
  for (int64_t k = 0; k < K; ++k) {
    std::vector<double> col(static_cast<size_t>(N));
    std::vector<bool> pos(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) {
      col[i] = scores[i * K + k];
      pos[i] = labels[i] == k;
    }
    out.per_class.push_back(roc_curve(col, pos));
    pooled.insert(pooled.end(), col.begin(), col.end());
    pooled_pos.insert(pooled_pos.end(), pos.begin(), pos.end());
  }
  out.micro = roc_curve(pooled, pooled_pos);
  return out;
}

MetricReport evaluate_scores(const Tensor<double>& scores, const std::vector<int32_t>& labels,
                             std::vector<std::string> class_names) {
  RocResult roc = roc_auc(scores, labels);
  const int64_t K = scores.dim(1);
  std::vector<int32_t> pred;
  for (int64_t i = 0; i < scores.dim(0); ++i) {
    const double* row = &scores[i * K];
    pred.push_back(static_cast<int32_t>(std::max_element(row, row + K) - row));
  }
  MetricReport r = compute_metrics(ConfusionMatrix::from_labels(labels, pred, static_cast<int32_t>(K)));
  r.class_names = std::move(class_names);
  r.roc = std::move(roc.per_class);
  r.micro_roc = std::move(roc.micro);
  return r;
}

std::string format_report(const MetricReport& r) {
  std::ostringstream os;
  os << "samples " << r.confusion.total() << "\n";
  os << "accuracy " << fmt(r.accuracy) << "\n";
  os << "macro_precision " << fmt(r.macro_precision) << "\n";
  os << "macro_recall " << fmt(r.macro_recall) << "\n";
  os << "macro_f1 " << fmt(r.macro_f1) << "\n";
  os << "micro_precision " << fmt(r.micro_precision) << "\n";
  os << "micro_recall " << fmt(r.micro_recall) << "\n";
  os << "micro_f1 " << fmt(r.micro_f1) << "\n";
  os << "mcc " << fmt(r.mcc) << "\n";
  if (!r.roc.empty()) os << "micro_auc " << fmt_auc(r.micro_roc.auc) << "\n";
  os << "class precision recall f1" << (r.roc.empty() ? "" : " auc") << "\n";
  for (int32_t k = 0; k < r.confusion.num_classes; ++k) {
    os << class_name(r, k) << " " << fmt(r.precision[k]) << " " << fmt(r.recall[k]) << " " << fmt(r.f1[k]);
    if (k < static_cast<int32_t>(r.roc.size())) os << " " << fmt_auc(r.roc[k].auc);
    os << "\n";
  }
  return os.str();
}

std::vector<std::filesystem::path> emit_plots(const MetricReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error("cannot create output directory " + out_dir.string() +
                             (ec ? ": " + ec.message() : std::string()));
  }
  std::ostringstream cm;
  const int32_t K = report.confusion.num_classes;
  cm << "true\\pred";
  for (int32_t p = 0; p < K; ++p) cm << " " << class_name(report, p);
  cm << "\n";
  for (int32_t t = 0; t < K; ++t) {
    cm << class_name(report, t);
    for (int32_t p = 0; p < K; ++p) cm << " " << report.confusion.at(t, p);
    cm << "\n";
  }
  std::ostringstream roc;
  auto table = [&](const std::string& name, const RocCurve& c) {
    roc << "# curve " << name << " auc " << fmt_auc(c.auc) << "\n";
    for (size_t i = 0; i < c.fpr.size(); ++i) roc << fmt(c.fpr[i]) << " " << fmt(c.tpr[i]) << "\n";
  };
  for (size_t k = 0; k < report.roc.size(); ++k) table(class_name(report, static_cast<int32_t>(k)), report.roc[k]);
  if (!report.roc.empty()) table("micro", report.micro_roc);

  const std::vector<std::pair<std::string, std::vector<uint8_t>>> files{
      {"metrics.txt", text_bytes(format_report(report))},
      {"confusion.txt", text_bytes(cm.str())},
      {"confusion.png", png_bytes(render_confusion(report))},
      {"roc.txt", text_bytes(roc.str())},
      {"roc.png", png_bytes(render_roc(report))},
  };
  std::vector<std::filesystem::path> written;
  for (const auto& [name, bytes] : files) {
    write_file(out_dir / name, bytes);
    written.push_back(out_dir / name);
  }
  return written;
}

}  // namespace nf

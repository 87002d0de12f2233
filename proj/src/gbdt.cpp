#include "neurofuse/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace nf {

namespace {

constexpr uint32_t kGbdtVersion = 1;

void softmax_row(const double* s, double* p, int k) {
  const double mx = *std::max_element(s, s + k);
  double z = 0;
  for (int j = 0; j < k; ++j) z += (p[j] = std::exp(s[j] - mx));
  for (int j = 0; j < k; ++j) p[j] /= z;
}

double leaf_weight(double g, double h, double lambda) { return -g / (h + lambda); }

double score_term(double g, double h, double lambda) { return g * g / (h + lambda); }

int32_t grow(Tree& tree, const Tensor<double>& x, const std::vector<double>& g,
             const std::vector<double>& h, std::vector<int32_t> rows, int depth,
             const BoostParams& params) {
  const int32_t id = static_cast<int32_t>(tree.nodes.size());
  tree.nodes.emplace_back();
  double G = 0, H = 0;
  for (int32_t i : rows) {
    G += g[i];
    H += h[i];
  }
  SplitChoice split;
  if (depth < params.max_depth && rows.size() >= 2) split = best_split(x, g, h, rows, params);
  if (split.feature < 0) {
    tree.nodes[id].weight = leaf_weight(G, H, params.lambda);
    return id;
  }
  const int64_t F = x.dim(1);
  std::vector<int32_t> left, right;
  for (int32_t i : rows) (x[i * F + split.feature] < split.threshold ? left : right).push_back(i);
  rows.clear();
  rows.shrink_to_fit();
  const int32_t l = grow(tree, x, g, h, std::move(left), depth + 1, params);
  const int32_t r = grow(tree, x, g, h, std::move(right), depth + 1, params);
  TreeNode& n = tree.nodes[id];
  n.feature = split.feature;
  n.threshold = split.threshold;
  n.left = l;
  n.right = r;
  return id;
}

void check_width(const TreeEnsemble& model, const Tensor<double>& features) {
  if (features.rank() != 2 || features.dim(1) != model.num_features) {
    throw ShapeError("GBDT expects [N, " + std::to_string(model.num_features) + "] features, got " +
                     shape_str(features.shape()));
  }
}

}  // namespace

double Tree::predict(const double* x) const {
  int32_t i = 0;
  while (!nodes[i].is_leaf()) i = x[nodes[i].feature] < nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].weight;
}

int Tree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int deepest = 0;
  for (size_t i = 0; i < nodes.size(); ++i) {
    deepest = std::max(deepest, d[i]);
    if (!nodes[i].is_leaf()) d[nodes[i].left] = d[nodes[i].right] = d[i] + 1;
  }
  return deepest;
}

TreeEnsemble TreeEnsemble::truncated(int32_t r) const {
  TreeEnsemble t = *this;
  t.trees.resize(static_cast<size_t>(std::min(r, rounds())) * num_classes);
  return t;
}

SplitChoice best_split(const Tensor<double>& x, const std::vector<double>& g,
                       const std::vector<double>& h, const std::vector<int32_t>& rows,
                       const BoostParams& params) {
  const int64_t F = x.dim(1);
  double G = 0, H = 0;
  for (int32_t i : rows) {
    G += g[i];
    H += h[i];
  }
  const double parent = score_term(G, H, params.lambda);
  SplitChoice best;
  std::vector<int32_t> order(rows);
  for (int64_t f = 0; f < F; ++f) {
    std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
      const double xa = x[a * F + f], xb = x[b * F + f];
      return xa < xb || (xa == xb && a < b);
    });
    double GL = 0, HL = 0;
    for (size_t j = 0; j + 1 < order.size(); ++j) {
      GL += g[order[j]];
      HL += h[order[j]];
      const double v = x[order[j] * F + f], next = x[order[j + 1] * F + f];
      if (!(v < next)) continue;
      const double GR = G - GL, HR = H - HL;
      if (HL < params.min_child_weight || HR < params.min_child_weight) continue;
      const double gain = 0.5 * (score_term(GL, HL, params.lambda) + score_term(GR, HR, params.lambda) - parent) -
                          params.gamma;
      if (gain > best.gain) {
        double thr = v + (next - v) / 2;
        if (!(thr > v)) thr = next;  // adjacent doubles
        best = {static_cast<int32_t>(f), thr, gain};
      }
    }
  }
  return best;
}

TreeEnsemble gbdt_fit(const Tensor<double>& features, const std::vector<int32_t>& labels,
                      const BoostParams& params, int32_t num_classes) {
  if (features.rank() != 2) throw ShapeError("GBDT features must be [N, F]");
  const int64_t N = features.dim(0), F = features.dim(1);
  if (static_cast<int64_t>(labels.size()) != N) {
    throw std::invalid_argument("GBDT: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(N) + " rows");
  }
  if (N < 2) throw std::invalid_argument("GBDT needs at least 2 samples");
  if (params.rounds < 1) throw std::invalid_argument("GBDT needs at least one boosting round");
  if (params.max_depth < 0 || params.eta < 0 || params.lambda < 0 ||
      params.gamma < 0 || params.min_child_weight < 0) {
    throw std::invalid_argument("GBDT hyperparameters must be nonnegative");
  }
  const int32_t max_label = *std::max_element(labels.begin(), labels.end());
  const int32_t K = num_classes > 0 ? num_classes : max_label + 1;
  for (int32_t y : labels) {
    if (y < 0 || y >= K) throw std::invalid_argument("GBDT label " + std::to_string(y) + " outside [0, K)");
  }
  if (std::set<int32_t>(labels.begin(), labels.end()).size() < 2) {
    throw std::invalid_argument("GBDT needs at least two distinct classes");
  }

  TreeEnsemble model;
  model.num_classes = K;
  model.num_features = static_cast<int32_t>(F);
  model.eta = params.eta;
  model.base_score = 0.0;

  std::vector<double> scores(static_cast<size_t>(N * K), model.base_score), prob(scores.size());
  std::vector<double> g(static_cast<size_t>(N)), h(static_cast<size_t>(N));
  std::vector<int32_t> all(static_cast<size_t>(N));
  std::iota(all.begin(), all.end(), 0);
  for (int r = 0; r < params.rounds; ++r) {
    for (int64_t i = 0; i < N; ++i) softmax_row(&scores[i * K], &prob[i * K], K);
    std::vector<Tree> round(static_cast<size_t>(K));
    for (int32_t k = 0; k < K; ++k) {
      for (int64_t i = 0; i < N; ++i) {
        const double p = prob[i * K + k];
        g[i] = p - (labels[i] == k ? 1.0 : 0.0);
        h[i] = p * (1.0 - p);
      }
      grow(round[k], features, g, h, all, 0, params);
    }
    for (int32_t k = 0; k < K; ++k) {
      for (int64_t i = 0; i < N; ++i) scores[i * K + k] += params.eta * round[k].predict(&features[i * F]);
      model.trees.push_back(std::move(round[k]));
    }
  }
  return model;
}

Tensor<double> gbdt_scores(const TreeEnsemble& model, const Tensor<double>& features) {
  check_width(model, features);
  const int64_t N = features.dim(0), F = features.dim(1), K = model.num_classes;
  Tensor<double> s({N, K}, model.base_score);
  for (size_t t = 0; t < model.trees.size(); ++t) {
    const int64_t k = static_cast<int64_t>(t) % K;
    for (int64_t i = 0; i < N; ++i) s[i * K + k] += model.eta * model.trees[t].predict(&features[i * F]);
  }
  return s;
}

Tensor<double> gbdt_predict(const TreeEnsemble& model, const Tensor<double>& features) {
  Tensor<double> s = gbdt_scores(model, features);
  Tensor<double> p(s.shape());
  const int64_t K = model.num_classes;
  for (int64_t i = 0; i < s.dim(0); ++i) softmax_row(&s[i * K], &p[i * K], static_cast<int>(K));
  return p;
}

double gbdt_log_loss(const TreeEnsemble& model, const Tensor<double>& features,
                     const std::vector<int32_t>& labels) {
  Tensor<double> p = gbdt_predict(model, features);
  double loss = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    loss -= std::log(std::max(p[static_cast<int64_t>(i) * model.num_classes + labels[i]], 1e-12));
  }
  return loss / static_cast<double>(labels.size());
}

std::vector<uint8_t> gbdt_serialize(const TreeEnsemble& model) {
  ByteWriter w;
  w.bytes("BTGB", 4);
  w.u32(kGbdtVersion);
  w.u32(static_cast<uint32_t>(model.num_classes));
  w.u32(static_cast<uint32_t>(model.rounds()));
  w.f64(model.eta);
  w.f64(model.base_score);
  w.u32(static_cast<uint32_t>(model.num_features));
  for (const Tree& t : model.trees) {
    w.u32(static_cast<uint32_t>(t.nodes.size()));
    for (const TreeNode& n : t.nodes) {
      w.i32(n.feature);
      w.f64(n.threshold);
      w.i32(n.left);
      w.i32(n.right);
      w.f64(n.weight);
    }
  }
  w.seal();
  return w.take();
}

TreeEnsemble gbdt_deserialize(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes, "BTGB");
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "BTGB") throw FormatError("BTGB: bad magic");
  if (const uint32_t v = r.u32(); v != kGbdtVersion) {
    throw FormatError("BTGB: unsupported version " + std::to_string(v));
  }
  TreeEnsemble m;
  m.num_classes = static_cast<int32_t>(r.u32());
  const uint32_t rounds = r.u32();
  m.eta = r.f64();
  m.base_score = r.f64();
  m.num_features = static_cast<int32_t>(r.u32());
  if (m.num_classes < 0 || m.num_features < 0 || (rounds > 0 && m.num_classes == 0)) {
    throw FormatError("BTGB: invalid header");
  }
  const uint64_t ntrees = uint64_t{rounds} * static_cast<uint64_t>(m.num_classes);
  for (uint64_t t = 0; t < ntrees; ++t) {
    Tree tree;
    const uint32_t nn = r.u32();
    if (nn == 0 || nn > r.remaining()) throw FormatError("BTGB: invalid node count");
    tree.nodes.resize(nn);
    for (auto& n : tree.nodes) {
      n.feature = r.i32();
      n.threshold = r.f64();
      n.left = r.i32();
      n.right = r.i32();
      n.weight = r.f64();
    }
    for (uint32_t i = 0; i < nn; ++i) {
      const TreeNode& n = tree.nodes[i];
      if (n.is_leaf()) continue;
      const auto in_range = [&](int32_t c) { return c > static_cast<int32_t>(i) && c < static_cast<int32_t>(nn); };
      if (n.feature >= m.num_features || !in_range(n.left) || !in_range(n.right)) {
        throw FormatError("BTGB: malformed node " + std::to_string(i) + " in tree " + std::to_string(t));
      }
    }
    m.trees.push_back(std::move(tree));
  }
  if (!r.done()) throw FormatError("BTGB: trailing bytes after tree table");
  return m;
}

}  // namespace nf

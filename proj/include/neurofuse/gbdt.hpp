#pragma once

#include <cstdint>
#include <vector>

#include "neurofuse/binary_io.hpp"
#include "neurofuse/tensor.hpp"

namespace nf {

struct BoostParams {
  int rounds = 100;
  int max_depth = 4;
  double eta = 0.3;
  double lambda = 1.0;
  double gamma = 0.0;
  double min_child_weight = 1.0;
};

/// Internal nodes route `x[feature] < threshold` to `left`.
struct TreeNode {
  int32_t feature = -1;
  double threshold = 0.0;
  int32_t left = -1;
  int32_t right = -1;
  double weight = 0.0;  // leaves only

  bool is_leaf() const { return feature < 0; }
  bool operator==(const TreeNode&) const = default;
};

struct Tree {
  std::vector<TreeNode> nodes;  // root at 0

  double predict(const double* x) const;
  int depth() const;
  bool operator==(const Tree&) const = default;
};

/// Trees are stored round-major: tree `r * num_classes + k` is round r, class k.
struct TreeEnsemble {
  int32_t num_classes = 0;
  int32_t num_features = 0;
  double eta = 0.3;
  double base_score = 0.0;
  std::vector<Tree> trees;

  int32_t rounds() const { return num_classes ? static_cast<int32_t>(trees.size()) / num_classes : 0; }
  /// First `rounds` rounds only.
  TreeEnsemble truncated(int32_t rounds) const;
  bool operator==(const TreeEnsemble&) const = default;
};

/// The split the greedy search settles on for one node.
struct SplitChoice {
  int32_t feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

/// Best split of the rows `rows` under gradient statistics (g, h), or
/// feature -1 when no candidate has positive gain. Ties go to the lowest
/// feature, then the lowest threshold.
SplitChoice best_split(const Tensor<double>& x, const std::vector<double>& g,
                       const std::vector<double>& h, const std::vector<int32_t>& rows,
                       const BoostParams& params);

/// Softmax-objective boosting with exact greedy splits. `num_classes` of 0
/// infers K from the largest label.
TreeEnsemble gbdt_fit(const Tensor<double>& features, const std::vector<int32_t>& labels,
                      const BoostParams& params = {}, int32_t num_classes = 0);

/// Raw additive class scores [N, K].
Tensor<double> gbdt_scores(const TreeEnsemble& model, const Tensor<double>& features);
/// Softmax of the scores [N, K].
Tensor<double> gbdt_predict(const TreeEnsemble& model, const Tensor<double>& features);

/// Mean negative log-likelihood of the labels.
double gbdt_log_loss(const TreeEnsemble& model, const Tensor<double>& features,
                     const std::vector<int32_t>& labels);

/// "BTGB" container: magic, version, K, rounds, eta, base score, feature
/// count, node table per tree, trailing CRC32; all little-endian.
std::vector<uint8_t> gbdt_serialize(const TreeEnsemble& model);
TreeEnsemble gbdt_deserialize(const std::vector<uint8_t>& bytes);

}  // namespace nf

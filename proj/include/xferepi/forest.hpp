#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xferepi/csv.hpp"
#include "xferepi/datasets.hpp"
#include "xferepi/parallel.hpp"
#include "xferepi/rng.hpp"

namespace xferepi::forest {

struct ForestConfig {
  int n_trees = 50;
  int max_features = 0;      // 0: ceil(sqrt(n_features))
  int min_samples_leaf = 1;  // counted in drawn multiplicity
  int max_depth = 0;         // 0: unlimited
  bool bootstrap = true;
  std::size_t bootstrap_draws = 0;  // 0: one draw per input row
  std::uint64_t seed = 0;

  void validate() const {
    if (n_trees < 1) throw std::invalid_argument("n_trees must be >= 1");
    if (max_features < 0) throw std::invalid_argument("max_features must be >= 0");
    if (min_samples_leaf < 1) throw std::invalid_argument("min_samples_leaf must be >= 1");
    if (max_depth < 0) throw std::invalid_argument("max_depth must be >= 0");
  }
};

struct TreeNode {
  std::int32_t feature = -1;  // -1: leaf
  double threshold = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;  // weighted mean of the node's targets
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    std::int32_t at = 0;
    while (nodes[static_cast<std::size_t>(at)].feature >= 0) {
      const TreeNode& nd = nodes[static_cast<std::size_t>(at)];
      at = x[static_cast<std::size_t>(nd.feature)] < nd.threshold ? nd.left : nd.right;
    }
    return nodes[static_cast<std::size_t>(at)].value;
  }
};

struct ForestModel {
  int n_features = 0;
  ForestConfig config;
  std::vector<Tree> trees;

  /// Mean of tree outputs, clipped at zero at the forest level only.
  double predict(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != n_features)
      throw std::invalid_argument("predict: feature arity mismatch");
    double acc = 0.0;
    for (const auto& t : trees) acc += t.predict(x);
    return std::max(0.0, acc / static_cast<double>(trees.size()));
  }

  /// Batch prediction iterates tree-major so each tree's node array stays
  /// cache-resident across rows.
  std::vector<double> predict(const datasets::SupervisedDataset& ds) const {
    if (ds.n_features != n_features)
      throw std::invalid_argument("predict: feature arity mismatch");
    std::vector<double> out(ds.rows(), 0.0);
    for (const auto& t : trees)
      for (std::size_t i = 0; i < ds.rows(); ++i) out[i] += t.predict(ds.row(i));
    for (auto& v : out) v = std::max(0.0, v / static_cast<double>(trees.size()));
    return out;
  }
};

namespace detail {

struct BuildInputs {
  const datasets::SupervisedDataset* data = nullptr;
  std::span<const double> base_weights;                 // empty: uniform
  const std::vector<std::uint32_t>* global_order = nullptr;  // per-feature sorted ids, length p*n
  ForestConfig cfg;
  int p = 0;
  int max_features = 0;
};

/// One tree. Samples (or copies) rows, then grows depth-first over
/// per-feature presorted index slices kept in sync by stable partitions.
/// All randomness comes from the tree's own derived stream.
inline Tree build_tree(const BuildInputs& in, int tree_index) {
  const auto& data = *in.data;
  const std::size_t n = data.rows();
  const int p = in.p;
  util::CounterRng rng(
      util::derive_stream(in.cfg.seed, "forest/tree/" + std::to_string(tree_index)));

  // Row multiplicities and effective in-tree weights.
  std::vector<double> wt(n, 0.0);
  std::vector<std::int64_t> cnt(n, 0);
  if (in.cfg.bootstrap) {
    std::size_t draws = in.cfg.bootstrap_draws ? in.cfg.bootstrap_draws : n;
    if (in.base_weights.empty()) {
      for (std::size_t d = 0; d < draws; ++d) ++cnt[rng.uniform_below(n)];
    } else {
      util::WeightedSampler sampler(in.base_weights);
      for (std::size_t d = 0; d < draws; ++d) ++cnt[sampler.sample(rng)];
    }
    for (std::size_t i = 0; i < n; ++i) wt[i] = static_cast<double>(cnt[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      wt[i] = in.base_weights.empty() ? 1.0 : in.base_weights[i];
      cnt[i] = wt[i] > 0.0 ? 1 : 0;
    }
  }

  // Per-feature (id, value) entries restricted to sampled rows, sorted by
  // value. Values travel with the ids so split scans stream sequentially
  // instead of gathering from the row-major feature matrix.
  struct Entry {
    std::uint32_t id;
    double value;
  };
  std::size_t m = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (cnt[i] > 0) ++m;
  if (m == 0) throw std::invalid_argument("tree build: no rows with positive weight");
  const double* X = data.features.data();
  const double* Y = data.targets.data();
  std::vector<Entry> buf(static_cast<std::size_t>(p) * m);
  for (int f = 0; f < p; ++f) {
    std::size_t pos = static_cast<std::size_t>(f) * m;
    const std::uint32_t* order = in.global_order->data() + static_cast<std::size_t>(f) * n;
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t id = order[i];
      if (cnt[id] > 0)
        buf[pos++] = {id, X[static_cast<std::size_t>(id) * static_cast<std::size_t>(p) +
                            static_cast<std::size_t>(f)]};
    }
  }
  // Per-row weight and weight*target, fetched together during scans.
  struct WPair {
    double w;
    double wy;
  };
  std::vector<WPair> ww(n);
  for (std::size_t i = 0; i < n; ++i) ww[i] = {wt[i], wt[i] * Y[i]};

  Tree tree;
  tree.nodes.reserve(2 * m);
  tree.nodes.emplace_back();

  struct Item {
    std::size_t lo, hi;
    int depth;
    std::int32_t node;
  };
  std::vector<Item> stack{{0, m, 0, 0}};
  std::vector<Entry> scratch(m);
  std::vector<std::uint8_t> side(n);
  std::vector<int> feats(static_cast<std::size_t>(p));
  const bool unit_leaf = in.cfg.min_samples_leaf == 1;

  while (!stack.empty()) {
    Item it = stack.back();
    stack.pop_back();

    double W = 0.0, WY = 0.0;
    std::int64_t count = 0;
    double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
    for (std::size_t i = it.lo; i < it.hi; ++i) {
      std::uint32_t id = buf[i].id;
      W += ww[id].w;
      WY += ww[id].wy;
      count += cnt[id];
      double y = Y[id];
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    TreeNode& node = tree.nodes[static_cast<std::size_t>(it.node)];
    node.value = WY / W;

    bool depth_capped = in.cfg.max_depth > 0 && it.depth >= in.cfg.max_depth;
    if (depth_capped || count < 2 * in.cfg.min_samples_leaf || ymin == ymax) continue;

    // Feature subsample, examined in ascending index order so equal scores
    // resolve to the lowest feature.
    int k = std::min(in.max_features, p);
    for (int f = 0; f < p; ++f) feats[static_cast<std::size_t>(f)] = f;
    if (k < p) {
      for (int j = 0; j < k; ++j) {
        std::size_t pick = static_cast<std::size_t>(j) +
                           rng.uniform_below(static_cast<std::uint64_t>(p - j));
        std::swap(feats[static_cast<std::size_t>(j)], feats[pick]);
      }
      std::sort(feats.begin(), feats.begin() + k);
    }

    double best_score = -std::numeric_limits<double>::infinity();
    int best_f = -1;
    double best_thr = 0.0;
    for (int j = 0; j < k; ++j) {
      int f = feats[static_cast<std::size_t>(j)];
      const Entry* arr = buf.data() + static_cast<std::size_t>(f) * m;
      double WL = 0.0, WYL = 0.0;
      std::int64_t CL = 0;
      for (std::size_t i = it.lo; i + 1 < it.hi; ++i) {
        const Entry& e = arr[i];
        WL += ww[e.id].w;
        WYL += ww[e.id].wy;
        if (!unit_leaf) CL += cnt[e.id];
        double vnext = arr[i + 1].value;
        if (!(e.value < vnext)) continue;
        if (!unit_leaf &&
            (CL < in.cfg.min_samples_leaf || count - CL < in.cfg.min_samples_leaf))
          continue;
        double WR = W - WL, WYR = WY - WYL;
        double score = WYL * WYL / WL + WYR * WYR / WR;
        if (score > best_score) {
          double thr = 0.5 * (e.value + vnext);
          if (!(thr > e.value)) thr = vnext;  // adjacent doubles: keep both sides non-empty
          best_score = score;
          best_f = f;
          best_thr = thr;
        }
      }
    }
    if (best_f < 0) continue;  // nothing separable among sampled features

    const Entry* split_arr = buf.data() + static_cast<std::size_t>(best_f) * m;
    for (std::size_t i = it.lo; i < it.hi; ++i)
      side[split_arr[i].id] = split_arr[i].value < best_thr ? 0 : 1;
    std::size_t m_left = 0;
    for (int f = 0; f < p; ++f) {
      Entry* arr = buf.data() + static_cast<std::size_t>(f) * m;
      std::size_t w0 = it.lo, w1 = 0;
      for (std::size_t i = it.lo; i < it.hi; ++i) {
        if (side[arr[i].id] == 0)
          arr[w0++] = arr[i];
        else
          scratch[w1++] = arr[i];
      }
      std::copy(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(w1), arr + w0);
      m_left = w0 - it.lo;
    }

    std::int32_t left_id = static_cast<std::int32_t>(tree.nodes.size());
    node.feature = best_f;
    node.threshold = best_thr;
    node.left = left_id;
    node.right = left_id + 1;
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    stack.push_back({it.lo + m_left, it.hi, it.depth + 1, left_id + 1});
    stack.push_back({it.lo, it.lo + m_left, it.depth + 1, left_id});
  }
  return tree;
}

}  // namespace detail

/// Fits a weighted forest. Weights bias the bootstrap draw (drawn rows then
/// count with multiplicity one each); without bootstrap they enter the split
/// criterion and leaf means directly, and zero-weight rows are ignored.
inline ForestModel fit_forest(const datasets::SupervisedDataset& data,
                              std::span<const double> weights, const ForestConfig& cfg,
                              int jobs = 1) {
  cfg.validate();
  const std::size_t n = data.rows();
  const int p = data.n_features;
  if (n == 0 || p == 0) throw std::invalid_argument("fit_forest: empty dataset");
  if (!weights.empty()) {
    if (weights.size() != n) throw std::invalid_argument("fit_forest: weight count mismatch");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("fit_forest: negative weight");
      total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("fit_forest: total weight must be positive");
  }

  // Shared presort; every tree filters it instead of re-sorting.
  std::vector<std::uint32_t> global_order(static_cast<std::size_t>(p) * n);
  for (int f = 0; f < p; ++f) {
    std::uint32_t* order = global_order.data() + static_cast<std::size_t>(f) * n;
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
    const double* X = data.features.data();
    std::stable_sort(order, order + n, [&](std::uint32_t a, std::uint32_t b) {
      return X[a * static_cast<std::size_t>(p) + static_cast<std::size_t>(f)] <
             X[b * static_cast<std::size_t>(p) + static_cast<std::size_t>(f)];
    });
  }

  detail::BuildInputs in;
  in.data = &data;
  in.base_weights = weights;
  in.global_order = &global_order;
  in.cfg = cfg;
  in.p = p;
  in.max_features = cfg.max_features > 0
                        ? std::min(cfg.max_features, p)
                        : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(p))));

  ForestModel model;
  model.n_features = p;
  model.config = cfg;
  model.trees.resize(static_cast<std::size_t>(cfg.n_trees));
  util::parallel_for(model.trees.size(), jobs, [&](std::size_t t) {
    model.trees[t] = detail::build_tree(in, static_cast<int>(t));
  });
  return model;
}

inline void save_forest(std::ostream& out, const ForestModel& m) {
  out << "xferepi-forest 1\n";
  out << "n_features " << m.n_features << "\n";
  out << "trees " << m.trees.size() << "\n";
  for (const auto& t : m.trees) {
    out << "tree " << t.nodes.size() << "\n";
    for (const auto& nd : t.nodes)
      out << nd.feature << ' ' << util::format_double(nd.threshold) << ' ' << nd.left << ' '
          << nd.right << ' ' << util::format_double(nd.value) << "\n";
  }
  out << "end\n";
}

inline ForestModel load_forest(std::istream& in) {
  std::string tag;
  int version = 0;
  in >> tag >> version;
  if (tag != "xferepi-forest" || version != 1)
    throw std::runtime_error("unrecognized forest file header");
  ForestModel m;
  std::size_t n_trees = 0;
  in >> tag >> m.n_features >> tag >> n_trees;
  m.trees.resize(n_trees);
  for (auto& t : m.trees) {
    std::size_t n_nodes = 0;
    in >> tag >> n_nodes;
    if (tag != "tree") throw std::runtime_error("malformed forest file");
    t.nodes.resize(n_nodes);
    for (auto& nd : t.nodes) {
      std::string thr, val;
      in >> nd.feature >> thr >> nd.left >> nd.right >> val;
      nd.threshold = util::parse_double(thr, "forest file");
      nd.value = util::parse_double(val, "forest file");
    }
  }
  in >> tag;
  if (tag != "end" || !in) throw std::runtime_error("truncated forest file");
  return m;
}

}  // namespace xferepi::forest

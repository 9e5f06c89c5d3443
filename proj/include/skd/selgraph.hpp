#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "skd/dataset.hpp"
#include "skd/detail/text.hpp"
#include "skd/error.hpp"
#include "skd/metric.hpp"

namespace skd {

/// Pairwise connection between two faces of the same class, i < j.
struct IntraEdge {
  std::size_t i = 0;
  std::size_t j = 0;
  double weight = 0.0;

  bool operator==(const IntraEdge&) const = default;
};

/// Sparse selection graph: one node per face plus one centroid node per class.
///
/// Centroid nodes carry no variable, so every face-to-other-centroid affinity
/// is pre-summed into the face's unary cost. Only same-class face pairs keep
/// explicit edges, and the graph therefore splits into independent classes.
class SelectionGraph {
 public:
  SelectionGraph() = default;

  /// Builds from raw parts. Edges must cover every same-class pair exactly once
  /// with i < j; all weights and unaries must be finite and nonnegative.
  static SelectionGraph from_parts(std::vector<int> labels, std::size_t n_classes, std::vector<double> unary,
                                   std::vector<IntraEdge> edges) {
    SelectionGraph g;
    g.labels_ = std::move(labels);
    g.n_classes_ = n_classes;
    g.unary_ = std::move(unary);
    g.edges_ = std::move(edges);
    g.check();
    return g;
  }

  std::size_t n_faces() const noexcept { return labels_.size(); }
  std::size_t n_classes() const noexcept { return n_classes_; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  const std::vector<double>& unary() const noexcept { return unary_; }
  const std::vector<IntraEdge>& intra_edges() const noexcept { return edges_; }

  /// Faces plus centroid nodes.
  std::size_t node_count() const noexcept { return n_faces() + n_classes_; }
  std::size_t intra_edge_count() const noexcept { return edges_.size(); }
  /// Face-to-centroid connections of the sparse graph, sum_c K_c (C - 1).
  /// They are not stored as edges; their weights live in the unary costs.
  std::size_t folded_connection_count() const noexcept { return n_faces() * (n_classes_ - 1); }

  /// Face indices of each class in ascending order, indexed by label - 1.
  const std::vector<std::vector<std::size_t>>& members() const noexcept { return members_; }
  /// Edge indices (into intra_edges()) of each class, indexed by label - 1.
  const std::vector<std::vector<std::size_t>>& class_edges() const noexcept { return class_edges_; }

 private:
  void check() {
    if (n_classes_ == 0) throw InvariantError("selection graph: no classes");
    if (unary_.size() != labels_.size()) throw InvariantError("selection graph: unary/label length mismatch");
    members_.assign(n_classes_, {});
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      const int l = labels_[i];
      if (l < 1 || static_cast<std::size_t>(l) > n_classes_) throw InvariantError("selection graph: label out of range");
      if (!std::isfinite(unary_[i]) || unary_[i] < 0.0)
        throw InvariantError("selection graph: unary " + std::to_string(i) + " not finite and nonnegative");
      members_[l - 1].push_back(i);
    }
    std::size_t expected = 0;
    for (const auto& m : members_)
      if (!m.empty()) expected += m.size() * (m.size() - 1) / 2;
    if (edges_.size() != expected)
      throw InvariantError("selection graph: expected " + std::to_string(expected) + " intra edges, got " +
                           std::to_string(edges_.size()));
    std::sort(edges_.begin(), edges_.end(),
              [](const IntraEdge& a, const IntraEdge& b) { return a.i != b.i ? a.i < b.i : a.j < b.j; });
    class_edges_.assign(n_classes_, {});
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      const auto& ed = edges_[e];
      if (ed.i >= ed.j || ed.j >= labels_.size()) throw InvariantError("selection graph: edge must satisfy i < j < n");
      if (labels_[ed.i] != labels_[ed.j]) throw InvariantError("selection graph: edge crosses classes");
      if (e > 0 && edges_[e - 1].i == ed.i && edges_[e - 1].j == ed.j)
        throw InvariantError("selection graph: duplicate edge");
      // lambda * w <= 0 at (1,1) against 0 elsewhere: submodular iff w >= 0.
      if (!std::isfinite(ed.weight) || ed.weight < 0.0)
        throw InvariantError("selection graph: edge weight not finite and nonnegative (pairwise term not submodular)");
      class_edges_[labels_[ed.i] - 1].push_back(e);
    }
  }

  std::vector<int> labels_;
  std::size_t n_classes_ = 0;
  std::vector<double> unary_;
  std::vector<IntraEdge> edges_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::vector<std::size_t>> class_edges_;
};

/// Binary selection over faces; alpha[i] == 1 keeps face i.
struct SelectionMask {
  std::vector<std::uint8_t> alpha;

  SelectionMask() = default;
  explicit SelectionMask(std::size_t n, std::uint8_t value = 0) : alpha(n, value) {}

  std::size_t size() const noexcept { return alpha.size(); }
  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(alpha.begin(), alpha.end(), std::uint8_t{1}));
  }
  bool operator==(const SelectionMask&) const = default;

  static SelectionMask all(std::size_t n) { return SelectionMask(n, 1); }
};

inline SelectionGraph build_selection_graph(const StudentSet& set, const CentroidTable& centroids,
                                            Measure measure = Measure::CosSim) {
  if (centroids.centroids.size() != set.class_count)
    throw InvariantError("build_selection_graph: centroid table does not match class count");
  const std::size_t n = set.size();
  std::vector<int> labels(n);
  std::vector<double> unary(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = set.records[i];
    labels[i] = r.label;
    double u = 0.0;
    for (std::size_t c = 0; c < set.class_count; ++c) {
      if (static_cast<int>(c + 1) == r.label) continue;
      u += pairwise_measure(r.teacher_feature, centroids.centroids[c], measure);
    }
    unary[i] = u;
  }
  std::vector<IntraEdge> edges;
  std::vector<std::vector<std::size_t>> by_class(set.class_count);
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i] - 1].push_back(i);
  for (const auto& m : by_class) {
    for (std::size_t a = 0; a < m.size(); ++a)
      for (std::size_t b = a + 1; b < m.size(); ++b)
        edges.push_back({m[a], m[b],
                         pairwise_measure(set.records[m[a]].teacher_feature, set.records[m[b]].teacher_feature,
                                          measure)});
  }
  return SelectionGraph::from_parts(std::move(labels), set.class_count, std::move(unary), std::move(edges));
}

namespace detail {

inline void require_lambda(double lambda) {
  if (!std::isfinite(lambda) || lambda > 0.0)
    throw InvariantError("lambda must be finite and nonpositive, got " + format_double(lambda));
}

inline void require_mask(const SelectionGraph& g, const SelectionMask& mask) {
  if (mask.size() != g.n_faces()) throw InvariantError("mask length does not match the graph");
  for (auto a : mask.alpha)
    if (a > 1) throw InvariantError("mask entries must be 0 or 1");
}

}  // namespace detail

/// P(alpha) = sum over selected same-class pairs of w_ij.
inline double pairwise_reward(const SelectionGraph& g, const SelectionMask& mask) {
  detail::require_mask(g, mask);
  double p = 0.0;
  for (const auto& e : g.intra_edges())
    if (mask.alpha[e.i] && mask.alpha[e.j]) p += e.weight;
  return p;
}

/// sum_i alpha_i U_i + lambda * sum_{i<j} alpha_i alpha_j w_ij
inline double energy(const SelectionGraph& g, const SelectionMask& mask, double lambda) {
  detail::require_lambda(lambda);
  detail::require_mask(g, mask);
  double unary = 0.0;
  for (std::size_t i = 0; i < g.n_faces(); ++i)
    if (mask.alpha[i]) unary += g.unary()[i];
  return unary + lambda * pairwise_reward(g, mask);
}

/// Debug dump: `i,label,U_i` rows then `i,j,w_ij` rows.
inline void dump_graph(const SelectionGraph& g, std::ostream& os) {
  os << "# nodes " << g.node_count() << " faces " << g.n_faces() << " classes " << g.n_classes() << " intra_edges "
     << g.intra_edge_count() << " folded_connections " << g.folded_connection_count() << '\n';
  for (std::size_t i = 0; i < g.n_faces(); ++i)
    os << i << ',' << g.labels()[i] << ',' << detail::format_double(g.unary()[i]) << '\n';
  for (const auto& e : g.intra_edges()) os << e.i << ',' << e.j << ',' << detail::format_double(e.weight) << '\n';
}

}  // namespace skd

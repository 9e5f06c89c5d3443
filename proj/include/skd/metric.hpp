#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skd/dataset.hpp"
#include "skd/error.hpp"

namespace skd {

/// How two teacher embeddings are compared.
///
/// CosSim (default) is the clamped cosine similarity max(0, cos) in [0,1].
/// CosDist is 1 - cos in [0,2]; it is kept as an alternate and is not what the
/// selection energy expects, since there a larger value must mean "more alike".
enum class Measure { CosSim, CosDist };

inline std::string_view to_string(Measure m) { return m == Measure::CosSim ? "cossim" : "cosdist"; }

inline Measure parse_measure(std::string_view s) {
  if (s == "cossim") return Measure::CosSim;
  if (s == "cosdist") return Measure::CosDist;
  throw InvariantError("unknown measure '" + std::string(s) + "' (expected cossim or cosdist)");
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvariantError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) throw InvariantError("cosine: zero-norm vector");
  // Clamp rounding overshoot so that cos(v, v) never exceeds 1.
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double pairwise_measure(std::span<const double> a, std::span<const double> b,
                               Measure mode = Measure::CosSim) {
  const double c = cosine(a, b);
  return mode == Measure::CosSim ? std::max(0.0, c) : 1.0 - c;
}

/// Per-class mean teacher feature; `centroids[c - 1]` belongs to label c.
struct CentroidTable {
  std::vector<Vector> centroids;

  const Vector& of(int label) const { return centroids.at(static_cast<std::size_t>(label - 1)); }
};

/// Exact per-class mean of teacher features, summed in record order.
/// Degraded inputs never contribute.
inline CentroidTable class_centroids(const StudentSet& set) {
  CentroidTable table;
  table.centroids.assign(set.class_count, Vector(set.feature_dim, 0.0));
  std::vector<std::size_t> counts(set.class_count, 0);
  for (const auto& r : set.records) {
    if (r.label < 1 || static_cast<std::size_t>(r.label) > set.class_count)
      throw InvariantError("class_centroids: label out of range");
    if (r.teacher_feature.size() != set.feature_dim) throw InvariantError("class_centroids: dimension mismatch");
    auto& acc = table.centroids[r.label - 1];
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += r.teacher_feature[k];
    ++counts[r.label - 1];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw InvariantError("class_centroids: class " + std::to_string(c + 1) + " is empty");
    const double n = static_cast<double>(counts[c]);
    for (auto& v : table.centroids[c]) v /= n;
  }
  return table;
}

}  // namespace skd

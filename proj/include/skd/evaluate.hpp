#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skd/dataset.hpp"
#include "skd/error.hpp"
#include "skd/student.hpp"

namespace skd {

/// Which hidden layer provides the embedding for verification/retrieval.
enum class Tap { Mimic, Identity };

inline std::string_view to_string(Tap t) { return t == Tap::Mimic ? "mimic" : "identity"; }

inline Tap parse_tap(std::string_view s) {
  if (s == "mimic") return Tap::Mimic;
  if (s == "identity") return Tap::Identity;
  throw InvariantError("unknown tap '" + std::string(s) + "' (expected mimic or identity)");
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// count one half.
inline double roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw InvariantError("roc_auc: length mismatch");
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InvariantError("roc_auc: need at least one positive and one negative");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;  // sum of 1-based average ranks of positives
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) rank_sum += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

inline Eigen::VectorXd embed(const StudentModel& m, std::span<const double> x, Tap tap) {
  auto t = forward(m, x);
  return tap == Tap::Mimic ? t.mimic : t.identity;
}

/// Brings a high-resolution (teacher-space) feature into the tap's space.
inline Eigen::VectorXd embed_high(const StudentModel& m, std::span<const double> f, Tap tap) {
  if (tap == Tap::Mimic) return Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
  return identity_from_mimic(m, f);
}

namespace detail {

/// Cosine of two vectors after length normalisation; a zero vector scores 0.
inline double normalized_cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace detail

struct VerificationPair {
  Vector a;
  Vector b;
  bool same = false;
};

/// Scores each pair by the cosine of its length-normalised tap features.
inline std::vector<double> verification_scores(const StudentModel& m, std::span<const VerificationPair> pairs, Tap tap) {
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& p : pairs) scores.push_back(detail::normalized_cosine(embed(m, p.a, tap), embed(m, p.b, tap)));
  return scores;
}

inline double evaluate_verification(const StudentModel& m, std::span<const VerificationPair> pairs, Tap tap) {
  std::vector<bool> same;
  for (const auto& p : pairs) same.push_back(p.same);
  return roc_auc(verification_scores(m, pairs, tap), same);
}

/// Seeded pair set over degraded inputs: positives share a label but come from
/// different records, negatives have different labels.
inline std::vector<VerificationPair> make_verification_pairs(const StudentSet& set, std::size_t n_positive,
                                                             std::size_t n_negative, std::uint64_t seed) {
  const auto sizes = class_sizes(set);
  if (std::none_of(sizes.begin(), sizes.end(), [](std::size_t k) { return k >= 2; }))
    throw InvariantError("make_verification_pairs: no class has two records");
  if (set.class_count < 2) throw InvariantError("make_verification_pairs: need two classes");
  std::vector<std::vector<std::size_t>> by_class(set.class_count);
  for (const auto& r : set.records) by_class[r.label - 1].push_back(r.id);
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  auto input = [&](std::size_t rec) -> const Vector& { return set.records[rec].degraded_inputs[pick(set.versions)]; };

  std::vector<VerificationPair> pairs;
  while (pairs.size() < n_positive) {
    const auto& members = by_class[pick(set.class_count)];
    if (members.size() < 2) continue;
    const auto a = members[pick(members.size())];
    const auto b = members[pick(members.size())];
    if (a == b) continue;
    pairs.push_back({input(a), input(b), true});
  }
  while (pairs.size() < n_positive + n_negative) {
    const auto a = pick(set.size()), b = pick(set.size());
    if (set.records[a].label == set.records[b].label) continue;
    pairs.push_back({input(a), input(b), false});
  }
  return pairs;
}

struct IdentificationResult {
  double top1_error = 0.0;
  double top5_error = 0.0;
};

/// Classifies every degraded input. The rank of the true class counts classes
/// with a strictly larger logit plus equal logits at a lower index.
inline IdentificationResult evaluate_identification(const StudentModel& m, const StudentSet& set) {
  if (set.class_count > m.arch.class_count) throw InvariantError("evaluate_identification: labels exceed model classes");
  std::size_t total = 0, miss1 = 0, miss5 = 0;
  for (const auto& r : set.records) {
    for (const auto& x : r.degraded_inputs) {
      const auto z = forward(m, x).logits;
      const int y = r.label - 1;
      std::size_t rank = 0;
      for (Eigen::Index c = 0; c < z.size(); ++c)
        if (z[c] > z[y] || (z[c] == z[y] && c < y)) ++rank;
      ++total;
      if (rank >= 1) ++miss1;
      if (rank >= 5) ++miss5;
    }
  }
  return {static_cast<double>(miss1) / static_cast<double>(total), static_cast<double>(miss5) / static_cast<double>(total)};
}

struct GalleryEntry {
  std::size_t id = 0;
  Vector feature;  // high-resolution feature, teacher space
};

struct Probe {
  std::size_t id = 0;
  Vector input;  // degraded input
};

/// Rank-1 accuracy: each probe is matched to the gallery entry of highest
/// cosine similarity, ties going to the lower gallery id.
inline double evaluate_retrieval(const StudentModel& m, std::span<const GalleryEntry> gallery,
                                 std::span<const Probe> probes, Tap tap) {
  if (gallery.empty()) throw InvariantError("evaluate_retrieval: empty gallery");
  if (probes.empty()) throw InvariantError("evaluate_retrieval: no probes");
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return gallery[a].id < gallery[b].id; });
  for (std::size_t k = 1; k < order.size(); ++k)
    if (gallery[order[k]].id == gallery[order[k - 1]].id) throw InvariantError("evaluate_retrieval: duplicate gallery id");

  for (const auto& p : probes) {
    const bool known = std::any_of(gallery.begin(), gallery.end(), [&](const GalleryEntry& g) { return g.id == p.id; });
    if (!known) throw InvariantError("evaluate_retrieval: probe id " + std::to_string(p.id) + " not in gallery");
  }
  std::vector<Eigen::VectorXd> feats;
  for (auto k : order) feats.push_back(embed_high(m, gallery[k].feature, tap));
  std::size_t hits = 0;
  for (const auto& p : probes) {
    const auto q = embed(m, p.input, tap);
    std::size_t best = 0;
    double best_s = -2.0;
    for (std::size_t k = 0; k < feats.size(); ++k) {
      const double s = detail::normalized_cosine(q, feats[k]);
      if (s > best_s) {
        best_s = s;
        best = k;
      }
    }
    if (gallery[order[best]].id == p.id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

}  // namespace skd

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "skd/dataset.hpp"
#include "skd/error.hpp"
#include "skd/metric.hpp"
#include "skd/selgraph.hpp"
#include "skd/student.hpp"

namespace skd {

/// Training signal: class only (c), selective distillation only (s),
/// selective distillation + class (sc), unselected distillation + class (dc).
enum class Supervision { C, S, SC, DC };

inline std::string_view to_string(Supervision s) {
  switch (s) {
    case Supervision::C: return "c";
    case Supervision::S: return "s";
    case Supervision::SC: return "sc";
    case Supervision::DC: return "dc";
  }
  return "c";
}

inline Supervision parse_supervision(std::string_view s) {
  if (s == "c") return Supervision::C;
  if (s == "s") return Supervision::S;
  if (s == "sc") return Supervision::SC;
  if (s == "dc") return Supervision::DC;
  throw InvariantError("unknown supervision '" + std::string(s) + "' (expected c, s, sc or dc)");
}

inline bool uses_classification(Supervision s) { return s != Supervision::S; }
inline bool uses_regression(Supervision s) { return s != Supervision::C; }

struct TrainConfig {
  Supervision supervision = Supervision::SC;
  double lambda = -1.0;  // selection weight the mask was produced with (recorded)
  double learning_rate = 0.05;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  Measure measure = Measure::CosSim;
  double reg_scale = 1.0;
  bool normalize_targets = false;
};

struct LossParts {
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  // per-sample averages over the epoch's batches, measured before each update
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

namespace detail {

/// Every (record, version) pair of a set flattened into column form.
struct SampleTable {
  Eigen::MatrixXd inputs;   // d_in x (n * N)
  Eigen::MatrixXd targets;  // D x n, one teacher feature per record
  std::vector<int> label;   // 0-based class per column
  std::vector<std::size_t> record;  // record index per column
};

inline SampleTable make_samples(const StudentSet& set, bool normalize_targets) {
  SampleTable t;
  const auto n = static_cast<Eigen::Index>(set.size());
  const auto cols = n * static_cast<Eigen::Index>(set.versions);
  t.inputs.resize(static_cast<Eigen::Index>(set.input_dim), cols);
  t.targets.resize(static_cast<Eigen::Index>(set.feature_dim), n);
  t.label.reserve(static_cast<std::size_t>(cols));
  t.record.reserve(static_cast<std::size_t>(cols));
  Eigen::Index col = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& r = set.records[i];
    Eigen::VectorXd f = Eigen::Map<const Eigen::VectorXd>(r.teacher_feature.data(), static_cast<Eigen::Index>(r.teacher_feature.size()));
    if (normalize_targets) f.normalize();
    t.targets.col(static_cast<Eigen::Index>(i)) = f;
    for (const auto& x : r.degraded_inputs) {
      t.inputs.col(col++) = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
      t.label.push_back(r.label - 1);
      t.record.push_back(i);
    }
  }
  return t;
}

struct Terms {
  bool cls = true;
  bool reg = true;
  double reg_scale = 1.0;
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;

  explicit Gradients(const StudentModel& m) {
    for (const auto& l : m.layers) {
      weight.push_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
      bias.push_back(Eigen::VectorXd::Zero(l.bias.size()));
    }
  }
};

/// Loss of the given columns (summed), optionally accumulating its gradient.
/// `alpha` holds the per-record regression weight.
inline LossParts batch_loss(const StudentModel& m, const SampleTable& t, std::span<const std::size_t> cols,
                            std::span<const double> alpha, const Terms& terms, Gradients* grads) {
  const auto B = static_cast<Eigen::Index>(cols.size());
  Eigen::MatrixXd x(t.inputs.rows(), B);
  for (Eigen::Index k = 0; k < B; ++k) x.col(k) = t.inputs.col(static_cast<Eigen::Index>(cols[k]));
  const auto cache = forward_batch(m, x);

  LossParts loss;
  Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(cache.logits().rows(), B);
  if (terms.cls) {
    const auto& z = cache.logits();
    for (Eigen::Index k = 0; k < B; ++k) {
      const double zmax = z.col(k).maxCoeff();
      const Eigen::VectorXd e = (z.col(k).array() - zmax).exp().matrix();
      const double sum = e.sum();
      const int y = t.label[cols[k]];
      loss.cls += -(z(y, k) - zmax - std::log(sum));
      if (grads) {
        d_logits.col(k) = e / sum;
        d_logits(y, k) -= 1.0;
      }
    }
  }
  Eigen::MatrixXd d_mimic_direct = Eigen::MatrixXd::Zero(cache.mimic(m).rows(), B);
  if (terms.reg) {
    const auto& mim = cache.mimic(m);
    for (Eigen::Index k = 0; k < B; ++k) {
      const std::size_t i = t.record[cols[k]];
      const double a = alpha[i];
      if (a == 0.0) continue;
      const Eigen::VectorXd diff = mim.col(k) - t.targets.col(static_cast<Eigen::Index>(i));
      loss.reg += terms.reg_scale * a * diff.squaredNorm();
      if (grads) d_mimic_direct.col(k) = 2.0 * terms.reg_scale * a * diff;
    }
  }
  loss.total = loss.cls + loss.reg;
  if (!grads) return loss;

  // Backward: head -> identity -> mimic (+ regression) -> trunk.
  Eigen::MatrixXd d_post = d_logits;
  for (std::size_t k = m.layers.size(); k-- > 0;) {
    const auto& l = m.layers[k];
    if (k == m.mimic_layer()) d_post += d_mimic_direct;
    const Eigen::MatrixXd d_pre =
        d_post.cwiseProduct(activation_grad(cache.pre[k], cache.post[k + 1], l.activation));
    grads->weight[k].noalias() += d_pre * cache.post[k].transpose();
    grads->bias[k] += d_pre.rowwise().sum();
    if (k > 0) d_post = l.weight.transpose() * d_pre;
  }
  return loss;
}

inline std::vector<double> regression_weights(const StudentSet& set, Supervision sup,
                                              const std::optional<SelectionMask>& mask) {
  if (sup == Supervision::DC || !uses_regression(sup)) return std::vector<double>(set.size(), 1.0);
  if (!mask) throw InvariantError("supervision '" + std::string(to_string(sup)) + "' requires a selection mask");
  if (mask->size() != set.size()) throw InvariantError("mask length does not match the student set");
  std::vector<double> w(set.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask->alpha[i] ? 1.0 : 0.0;
  return w;
}

inline LossParts full_loss(const StudentModel& m, const SampleTable& t, std::span<const double> alpha,
                           const Terms& terms, Gradients* grads) {
  constexpr std::size_t chunk = 512;
  const auto total = static_cast<std::size_t>(t.inputs.cols());
  std::vector<std::size_t> cols;
  LossParts acc;
  for (std::size_t start = 0; start < total; start += chunk) {
    cols.resize(std::min(chunk, total - start));
    std::iota(cols.begin(), cols.end(), start);
    const auto part = batch_loss(m, t, cols, alpha, terms, grads);
    acc.cls += part.cls;
    acc.reg += part.reg;
  }
  acc.total = acc.cls + acc.reg;
  return acc;
}

}  // namespace detail

/// sum_i sum_j -log softmax(logits(x_ij))_{l_i}, over every record.
inline double classification_loss(const StudentModel& m, const StudentSet& set) {
  require_compatible(m, set);
  const auto t = detail::make_samples(set, false);
  const std::vector<double> none(set.size(), 0.0);
  return detail::full_loss(m, t, none, {true, false, 1.0}, nullptr).cls;
}

/// sum_i alpha_i sum_j ||mimic(x_ij) - f_i||^2
inline double regression_loss(const StudentModel& m, const StudentSet& set, const SelectionMask& mask,
                              bool normalize_targets = false) {
  require_compatible(m, set);
  if (mask.size() != set.size()) throw InvariantError("regression_loss: mask length does not match the set");
  const auto t = detail::make_samples(set, normalize_targets);
  std::vector<double> alpha(set.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) alpha[i] = mask.alpha[i] ? 1.0 : 0.0;
  return detail::full_loss(m, t, alpha, {false, true, 1.0}, nullptr).reg;
}

/// Joint objective with unit weights. Omitted terms are reported as zero;
/// dc ignores `mask` and regresses every record.
inline LossParts total_loss(const StudentModel& m, const StudentSet& set, const std::optional<SelectionMask>& mask,
                            Supervision sup, double reg_scale = 1.0, bool normalize_targets = false) {
  require_compatible(m, set);
  const auto alpha = detail::regression_weights(set, sup, mask);
  const auto t = detail::make_samples(set, normalize_targets);
  return detail::full_loss(m, t, alpha, {uses_classification(sup), uses_regression(sup), reg_scale}, nullptr);
}

namespace detail {

inline void check_config(const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate))
    throw InvariantError("learning rate must be finite and nonnegative");
  if (cfg.batch_size == 0) throw InvariantError("batch size must be positive");
  if (!(cfg.reg_scale >= 0.0)) throw InvariantError("reg scale must be nonnegative");
  if (!std::isfinite(cfg.lambda) || cfg.lambda > 0.0) throw InvariantError("lambda must be nonpositive");
}

inline StudentModel run_sgd(StudentModel model, const StudentSet& set, std::span<const double> alpha,
                            const Terms& terms, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  check_config(cfg);
  require_compatible(model, set);
  const auto t = make_samples(set, cfg.normalize_targets);
  const auto total = static_cast<std::size_t>(t.inputs.cols());
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossParts sum;
    for (std::size_t start = 0; start < total; start += cfg.batch_size) {
      const std::span<const std::size_t> cols(order.data() + start, std::min(cfg.batch_size, total - start));
      Gradients g(model);
      const auto part = batch_loss(model, t, cols, alpha, terms, &g);
      if (!std::isfinite(part.total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                           "; the learning rate is likely too high");
      sum.cls += part.cls;
      sum.reg += part.reg;
      const double step = cfg.learning_rate / static_cast<double>(cols.size());
      for (std::size_t k = 0; k < model.layers.size(); ++k) {
        auto& l = model.layers[k];
        if (l.frozen) continue;
        l.weight -= step * g.weight[k];
        l.bias -= step * g.bias[k];
      }
    }
    if (on_epoch) {
      const double n = static_cast<double>(total);
      on_epoch({epoch, sum.cls / n, sum.reg / n, (sum.cls + sum.reg) / n});
    }
  }
  return model;
}

}  // namespace detail

/// Stage 1: mini-batch SGD on the classification loss alone.
inline StudentModel pretrain_student(StudentModel model, const StudentSet& set, const TrainConfig& cfg,
                                     const EpochCallback& on_epoch = {}) {
  const std::vector<double> none(set.size(), 0.0);
  return detail::run_sgd(std::move(model), set, none, {true, false, 1.0}, cfg, on_epoch);
}

/// Stage 3: mini-batch SGD on the joint objective selected by `cfg.supervision`.
/// The mask is required for s and sc, ignored by dc (all records) and c.
inline StudentModel finetune(StudentModel model, const StudentSet& set, const std::optional<SelectionMask>& mask,
                             const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  const auto alpha = detail::regression_weights(set, cfg.supervision, mask);
  return detail::run_sgd(std::move(model), set, alpha,
                         {uses_classification(cfg.supervision), uses_regression(cfg.supervision), cfg.reg_scale}, cfg,
                         on_epoch);
}

// ---------------------------------------------------------------------------
// Gradient check

/// Flattened view over every parameter (weights column-major, then bias, per layer).
inline std::vector<double*> parameter_pointers(StudentModel& m) {
  std::vector<double*> ptrs;
  for (auto& l : m.layers) {
    for (Eigen::Index k = 0; k < l.weight.size(); ++k) ptrs.push_back(l.weight.data() + k);
    for (Eigen::Index k = 0; k < l.bias.size(); ++k) ptrs.push_back(l.bias.data() + k);
  }
  return ptrs;
}

struct GradientCheckOptions {
  double epsilon = 1e-5;
  double reg_scale = 1.0;
  // 0 checks every coordinate; otherwise a seeded random sample of this size
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
  // denominators below this are clamped, so near-zero gradients are compared absolutely
  double floor = 1e-6;
};

/// Max relative error between backprop and central finite differences of
/// the summed total loss.
inline double gradient_check(const StudentModel& model, const StudentSet& set,
                             const std::optional<SelectionMask>& mask, Supervision sup,
                             const GradientCheckOptions& opt = {}) {
  require_compatible(model, set);
  const auto alpha = detail::regression_weights(set, sup, mask);
  const auto t = detail::make_samples(set, false);
  const detail::Terms terms{uses_classification(sup), uses_regression(sup), opt.reg_scale};

  detail::Gradients g(model);
  detail::full_loss(model, t, alpha, terms, &g);
  std::vector<double> analytic;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    for (Eigen::Index i = 0; i < g.weight[k].size(); ++i) analytic.push_back(g.weight[k].data()[i]);
    for (Eigen::Index i = 0; i < g.bias[k].size(); ++i) analytic.push_back(g.bias[k][i]);
  }

  StudentModel probe = model;
  auto ptrs = parameter_pointers(probe);
  std::vector<std::size_t> coords(ptrs.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (opt.max_coordinates != 0 && opt.max_coordinates < coords.size()) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coordinates);
  }
  double worst = 0.0;
  for (auto c : coords) {
    const double saved = *ptrs[c];
    *ptrs[c] = saved + opt.epsilon;
    const double up = detail::full_loss(probe, t, alpha, terms, nullptr).total;
    *ptrs[c] = saved - opt.epsilon;
    const double down = detail::full_loss(probe, t, alpha, terms, nullptr).total;
    *ptrs[c] = saved;
    const double numeric = (up - down) / (2.0 * opt.epsilon);
    const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), opt.floor});
    worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Transfer

/// Freezes the trunk (through the mimic layer) and re-initialises the identity
/// layer and a fresh softmax head with `new_class_count` outputs.
inline StudentModel transfer_student(const StudentModel& model, std::size_t new_class_count, std::uint64_t seed) {
  if (new_class_count < 2) throw InvariantError("transfer_student: need at least 2 classes");
  StudentModel out = model;
  out.arch.class_count = new_class_count;
  for (std::size_t k = 0; k <= out.mimic_layer(); ++k) out.layers[k].frozen = true;
  std::mt19937_64 rng(seed);
  auto& id = out.layers[out.identity_layer()];
  id.frozen = false;
  detail::xavier_fill(id, out.arch.mimic_dim(), out.arch.identity_dim, rng);
  auto& head = out.layers[out.head_layer()];
  head.frozen = false;
  detail::xavier_fill(head, out.arch.identity_dim, new_class_count, rng);
  return out;
}

}  // namespace skd

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skd/dataset.hpp"
#include "skd/error.hpp"

namespace skd {

enum class Activation { Identity, Relu, Tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
  }
  return "identity";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw InvariantError("unknown activation '" + std::string(s) + "'");
}

struct LayerSpec {
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  Activation activation = Activation::Relu;

  bool operator==(const LayerSpec&) const = default;
};

/// Student topology: trunk -> identity layer -> softmax head.
///
/// The last trunk layer is the mimic layer; its output width must equal the
/// teacher feature dimension D. The mimic tap is read before the identity
/// layer, which sits strictly between it and the head.
struct StudentArch {
  std::vector<LayerSpec> trunk;
  std::size_t identity_dim = 128;
  Activation identity_activation = Activation::Relu;
  std::size_t class_count = 0;
  // VGGFace-sized teacher; the student must stay strictly below it.
  std::size_t teacher_param_budget = 138'000'000;

  std::size_t input_dim() const { return trunk.empty() ? 0 : trunk.front().fan_in; }
  std::size_t mimic_dim() const { return trunk.empty() ? 0 : trunk.back().fan_out; }

  bool operator==(const StudentArch&) const = default;
};

/// d_in -> hidden... -> mimic(D) -> identity -> softmax(C), rectified hidden units,
/// linear mimic layer.
inline StudentArch default_arch(std::size_t input_dim, std::size_t mimic_dim, std::size_t class_count,
                                std::size_t identity_dim = 128, std::vector<std::size_t> hidden = {64, 64}) {
  StudentArch arch;
  std::size_t prev = input_dim;
  for (auto h : hidden) {
    arch.trunk.push_back({prev, h, Activation::Relu});
    prev = h;
  }
  arch.trunk.push_back({prev, mimic_dim, Activation::Identity});
  arch.identity_dim = identity_dim;
  arch.class_count = class_count;
  return arch;
}

struct DenseLayer {
  Eigen::MatrixXd weight;  // fan_out x fan_in
  Eigen::VectorXd bias;
  Activation activation = Activation::Identity;
  bool frozen = false;

  std::size_t parameter_count() const { return static_cast<std::size_t>(weight.size() + bias.size()); }
};

struct StudentModel {
  StudentArch arch;
  std::vector<DenseLayer> layers;  // trunk..., identity layer, head
  std::uint64_t seed = 0;

  std::size_t mimic_layer() const { return arch.trunk.size() - 1; }
  std::size_t identity_layer() const { return arch.trunk.size(); }
  std::size_t head_layer() const { return arch.trunk.size() + 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }
};

namespace detail {

inline void xavier_fill(DenseLayer& layer, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  // U(-a, a) with a = sqrt(6 / (fan_in + fan_out)) has variance 2 / (fan_in + fan_out).
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> unif(-a, a);
  layer.weight.resize(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
  for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = unif(rng);
  layer.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fan_out));
}

inline void check_arch(const StudentArch& arch) {
  if (arch.trunk.empty()) throw InvariantError("student arch: trunk needs at least one layer (the mimic layer)");
  for (std::size_t k = 0; k < arch.trunk.size(); ++k) {
    const auto& l = arch.trunk[k];
    if (l.fan_in == 0 || l.fan_out == 0) throw InvariantError("student arch: layer " + std::to_string(k) + " is empty");
    if (k > 0 && arch.trunk[k - 1].fan_out != l.fan_in)
      throw InvariantError("student arch: layer " + std::to_string(k) + " fan_in does not match previous fan_out");
  }
  if (arch.identity_dim == 0) throw InvariantError("student arch: identity_dim must be positive");
  if (arch.class_count < 1) throw InvariantError("student arch: class_count must be positive");
}

}  // namespace detail

/// Xavier-uniform weights, zero biases, deterministic in `seed`.
inline StudentModel init_student(const StudentArch& arch, std::uint64_t seed) {
  detail::check_arch(arch);
  StudentModel m;
  m.arch = arch;
  m.seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& spec : arch.trunk) {
    DenseLayer l;
    l.activation = spec.activation;
    detail::xavier_fill(l, spec.fan_in, spec.fan_out, rng);
    m.layers.push_back(std::move(l));
  }
  DenseLayer id;
  id.activation = arch.identity_activation;
  detail::xavier_fill(id, arch.mimic_dim(), arch.identity_dim, rng);
  m.layers.push_back(std::move(id));
  DenseLayer head;
  head.activation = Activation::Identity;
  detail::xavier_fill(head, arch.identity_dim, arch.class_count, rng);
  m.layers.push_back(std::move(head));
  if (m.parameter_count() >= arch.teacher_param_budget)
    throw InvariantError("student has " + std::to_string(m.parameter_count()) +
                         " parameters, not below the teacher budget " + std::to_string(arch.teacher_param_budget));
  return m;
}

/// Throws unless the model's input, mimic and head widths fit the set.
inline void require_compatible(const StudentModel& m, const StudentSet& set) {
  if (m.arch.input_dim() != set.input_dim)
    throw InvariantError("model input dim " + std::to_string(m.arch.input_dim()) + " != set d_in " +
                         std::to_string(set.input_dim));
  if (m.arch.mimic_dim() != set.feature_dim)
    throw InvariantError("model mimic dim " + std::to_string(m.arch.mimic_dim()) + " != teacher dim D " +
                         std::to_string(set.feature_dim));
  if (m.arch.class_count != set.class_count)
    throw InvariantError("model class count " + std::to_string(m.arch.class_count) + " != set class count " +
                         std::to_string(set.class_count));
}

inline StudentModel init_student(const StudentArch& arch, const StudentSet& set, std::uint64_t seed) {
  auto m = init_student(arch, seed);
  require_compatible(m, set);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

inline Eigen::MatrixXd activate(const Eigen::MatrixXd& pre, Activation a) {
  switch (a) {
    case Activation::Relu: return pre.cwiseMax(0.0);
    case Activation::Tanh: return pre.array().tanh().matrix();
    case Activation::Identity: break;
  }
  return pre;
}

/// d activation / d pre, evaluated from the pre-activation and its output.
inline Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& post, Activation a) {
  switch (a) {
    case Activation::Relu: return (pre.array() > 0.0).cast<double>().matrix();
    case Activation::Tanh: return (1.0 - post.array().square()).matrix();
    case Activation::Identity: break;
  }
  return Eigen::MatrixXd::Ones(pre.rows(), pre.cols());
}

/// Per-layer pre- and post-activations for a batch (one column per sample).
/// `post[0]` is the input; `post[k + 1]` is layer k's output.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;
  std::vector<Eigen::MatrixXd> post;

  const Eigen::MatrixXd& mimic(const StudentModel& m) const { return post[m.mimic_layer() + 1]; }
  const Eigen::MatrixXd& identity(const StudentModel& m) const { return post[m.identity_layer() + 1]; }
  const Eigen::MatrixXd& logits() const { return post.back(); }
};

inline ForwardCache forward_batch(const StudentModel& m, const Eigen::MatrixXd& inputs) {
  if (static_cast<std::size_t>(inputs.rows()) != m.arch.input_dim())
    throw InvariantError("forward: input has " + std::to_string(inputs.rows()) + " rows, model expects " +
                         std::to_string(m.arch.input_dim()));
  if (!inputs.allFinite()) throw NumericError("forward: non-finite input");
  ForwardCache cache;
  cache.pre.reserve(m.layers.size());
  cache.post.reserve(m.layers.size() + 1);
  cache.post.push_back(inputs);
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    const auto& l = m.layers[k];
    Eigen::MatrixXd pre = (l.weight * cache.post.back()).colwise() + l.bias;
    Eigen::MatrixXd post = activate(pre, l.activation);
    if (!post.allFinite()) throw NumericError("forward: non-finite activation at layer " + std::to_string(k));
    cache.pre.push_back(std::move(pre));
    cache.post.push_back(std::move(post));
  }
  return cache;
}

struct Taps {
  Eigen::VectorXd mimic;     // dimension D
  Eigen::VectorXd identity;  // dimension identity_dim
  Eigen::VectorXd logits;    // dimension C
};

inline Taps forward(const StudentModel& m, std::span<const double> x) {
  Eigen::MatrixXd in = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  auto cache = forward_batch(m, in);
  return {cache.mimic(m).col(0), cache.identity(m).col(0), cache.logits().col(0)};
}

/// Applies the identity layer to a vector living in mimic space (e.g. a
/// teacher feature), giving its identity-tap representation.
inline Eigen::VectorXd identity_from_mimic(const StudentModel& m, std::span<const double> mimic) {
  if (mimic.size() != m.arch.mimic_dim()) throw InvariantError("identity_from_mimic: dimension mismatch");
  const auto& l = m.layers[m.identity_layer()];
  Eigen::MatrixXd pre = l.weight * Eigen::Map<const Eigen::VectorXd>(mimic.data(), static_cast<Eigen::Index>(mimic.size())) + l.bias;
  return activate(pre, l.activation).col(0);
}

}  // namespace skd

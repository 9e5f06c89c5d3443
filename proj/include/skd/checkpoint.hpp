#pragma once

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>

#include "skd/distiller.hpp"
#include "skd/error.hpp"
#include "skd/student.hpp"

namespace skd {

inline constexpr const char* kCheckpointFormat = "SKDCKPT1";

/// Checkpoint JSON: arch, seed and every parameter (row-major weights).
/// nlohmann serialises doubles in shortest round-trip form, so a
/// save/load cycle is bit-exact.
inline nlohmann::json checkpoint_json(const StudentModel& m) {
  nlohmann::json arch;
  arch["trunk"] = nlohmann::json::array();
  for (const auto& l : m.arch.trunk)
    arch["trunk"].push_back({{"fan_in", l.fan_in}, {"fan_out", l.fan_out}, {"activation", to_string(l.activation)}});
  arch["identity_dim"] = m.arch.identity_dim;
  arch["identity_activation"] = to_string(m.arch.identity_activation);
  arch["class_count"] = m.arch.class_count;
  arch["teacher_param_budget"] = m.arch.teacher_param_budget;

  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back({{"rows", l.weight.rows()},
                      {"cols", l.weight.cols()},
                      {"activation", to_string(l.activation)},
                      {"frozen", l.frozen},
                      {"weight", w},
                      {"bias", b}});
  }
  return {{"format", kCheckpointFormat},
          {"seed", m.seed},
          {"parameter_count", m.parameter_count()},
          {"arch", arch},
          {"layers", layers}};
}

inline StudentModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != kCheckpointFormat) throw ParseError(0, "not a student checkpoint");
    StudentModel m;
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& a = j.at("arch");
    for (const auto& l : a.at("trunk"))
      m.arch.trunk.push_back({l.at("fan_in").get<std::size_t>(), l.at("fan_out").get<std::size_t>(),
                              parse_activation(l.at("activation").get<std::string>())});
    m.arch.identity_dim = a.at("identity_dim").get<std::size_t>();
    m.arch.identity_activation = parse_activation(a.at("identity_activation").get<std::string>());
    m.arch.class_count = a.at("class_count").get<std::size_t>();
    m.arch.teacher_param_budget = a.at("teacher_param_budget").get<std::size_t>();
    detail::check_arch(m.arch);

    const auto& layers = j.at("layers");
    if (layers.size() != m.arch.trunk.size() + 2) throw ParseError(0, "checkpoint layer count does not match arch");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      DenseLayer d;
      const auto rows = l.at("rows").get<Eigen::Index>(), cols = l.at("cols").get<Eigen::Index>();
      const auto w = l.at("weight").get<std::vector<double>>();
      const auto b = l.at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows)
        throw ParseError(0, "checkpoint layer " + std::to_string(k) + " has inconsistent sizes");
      d.weight.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) d.weight(r, c) = w[static_cast<std::size_t>(r * cols + c)];
      d.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), rows);
      d.activation = parse_activation(l.at("activation").get<std::string>());
      d.frozen = l.at("frozen").get<bool>();
      m.layers.push_back(std::move(d));
    }
    // Layer shapes must follow from the arch.
    const auto expect = [&](std::size_t k, std::size_t in, std::size_t out) {
      if (static_cast<std::size_t>(m.layers[k].weight.cols()) != in ||
          static_cast<std::size_t>(m.layers[k].weight.rows()) != out)
        throw ParseError(0, "checkpoint layer " + std::to_string(k) + " shape does not match arch");
    };
    for (std::size_t k = 0; k < m.arch.trunk.size(); ++k) expect(k, m.arch.trunk[k].fan_in, m.arch.trunk[k].fan_out);
    expect(m.identity_layer(), m.arch.mimic_dim(), m.arch.identity_dim);
    expect(m.head_layer(), m.arch.identity_dim, m.arch.class_count);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("malformed checkpoint: ") + e.what());
  }
}

inline std::string checkpoint_string(const StudentModel& m) { return checkpoint_json(m).dump() + "\n"; }

inline void save_checkpoint(const StudentModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << checkpoint_string(m);
}

inline StudentModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return model_from_json(j);
}

/// One metrics line: {"epoch":k,"cls":...,"reg":...,"total":...}
inline std::string metrics_line(const EpochMetrics& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["cls"] = e.cls;
  j["reg"] = e.reg;
  j["total"] = e.total;
  return j.dump();
}

}  // namespace skd

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "skd/detail/text.hpp"
#include "skd/error.hpp"
#include "skd/maxflow.hpp"
#include "skd/selgraph.hpp"

namespace skd {

struct MinimizeResult {
  SelectionMask mask;
  double energy = 0.0;
};

/// Arc of the s-t network for one class. Node 0 is the source, node 1 the
/// sink and node 2 + k the k-th face of the class (ascending face index).
struct CutArc {
  std::size_t from = 0;
  std::size_t to = 0;
  double capacity = 0.0;
};

/// s-t network whose cut of {s} + {selected faces} equals the class energy
/// plus `offset`. Face i is on the source side iff alpha_i = 1.
struct CutReduction {
  std::vector<std::size_t> faces;
  std::vector<CutArc> arcs;
  double offset = 0.0;

  static constexpr std::size_t source = 0;
  static constexpr std::size_t sink = 1;

  /// Capacity of the cut induced by the class's entries of a global mask.
  double cut_value(const SelectionMask& mask) const {
    auto on_source = [&](std::size_t node) {
      if (node == source) return true;
      if (node == sink) return false;
      return mask.alpha.at(faces[node - 2]) == 1;
    };
    double cut = 0.0;
    for (const auto& a : arcs)
      if (on_source(a.from) && !on_source(a.to)) cut += a.capacity;
    return cut;
  }
};

/// Builds the reparameterised network for class `label`.
///
/// Each pair term lambda*w*a_i*a_j with lambda*w <= 0 is rewritten as
/// -c*a_i + c*a_i*(1 - a_j), c = -lambda*w >= 0: an arc i -> j of capacity c
/// and a shift of face i's unary. Negative unaries become source arcs and
/// their sum moves into the offset.
inline CutReduction reduce_class(const SelectionGraph& g, int label, double lambda) {
  detail::require_lambda(lambda);
  CutReduction red;
  red.faces = g.members().at(static_cast<std::size_t>(label - 1));
  std::vector<std::size_t> local(g.n_faces(), 0);
  for (std::size_t k = 0; k < red.faces.size(); ++k) local[red.faces[k]] = k;

  std::vector<double> linear(red.faces.size());
  for (std::size_t k = 0; k < red.faces.size(); ++k) linear[k] = g.unary()[red.faces[k]];
  for (auto e : g.class_edges()[label - 1]) {
    const auto& ed = g.intra_edges()[e];
    const double c = -lambda * ed.weight;
    if (c == 0.0) continue;
    linear[local[ed.i]] -= c;
    red.arcs.push_back({2 + local[ed.i], 2 + local[ed.j], c});
  }
  for (std::size_t k = 0; k < linear.size(); ++k) {
    if (linear[k] > 0.0) {
      red.arcs.push_back({2 + k, CutReduction::sink, linear[k]});
    } else if (linear[k] < 0.0) {
      red.arcs.push_back({CutReduction::source, 2 + k, -linear[k]});
      red.offset -= linear[k];
    }
  }
  return red;
}

namespace detail {

inline void solve_class(const SelectionGraph& g, int label, double lambda, SelectionMask& mask) {
  const auto red = reduce_class(g, label, lambda);
  double scale = 0.0;
  for (const auto& a : red.arcs) scale += a.capacity;
  if (!std::isfinite(scale)) throw InvariantError("minimize: non-finite capacities");
  MaxFlow<double> flow(2 + red.faces.size(), scale * 1e-12);
  for (const auto& a : red.arcs) flow.add_edge(a.from, a.to, a.capacity);
  flow.solve(CutReduction::source, CutReduction::sink);
  // The residual-reachable set is the minimal minimiser: fewest selected faces,
  // and a subset of every other optimum.
  const auto side = flow.source_side();
  for (std::size_t k = 0; k < red.faces.size(); ++k) mask.alpha[red.faces[k]] = side[2 + k] ? 1 : 0;
}

}  // namespace detail

/// Exact global minimiser of the selection energy via one s-t min-cut per class.
///
/// Among co-optimal masks the one with the fewest selected faces is returned;
/// for a submodular energy that mask is unique, so the result is canonical.
inline MinimizeResult minimize(const SelectionGraph& g, double lambda) {
  detail::require_lambda(lambda);
  SelectionMask mask(g.n_faces());
  for (std::size_t c = 0; c < g.n_classes(); ++c) {
    if (g.members()[c].empty()) continue;
    detail::solve_class(g, static_cast<int>(c + 1), lambda, mask);
  }
  return {mask, energy(g, mask, lambda)};
}

inline constexpr std::size_t kBruteForceMaxClass = 20;

/// Reference minimiser by per-class enumeration. Ties (within 1e-12 relative)
/// go to the mask with fewer selected faces, then to the one with alpha = 0 at
/// the lowest differing index.
inline MinimizeResult brute_force_minimize(const SelectionGraph& g, double lambda) {
  detail::require_lambda(lambda);
  SelectionMask mask(g.n_faces());
  for (std::size_t c = 0; c < g.n_classes(); ++c) {
    const auto& faces = g.members()[c];
    const std::size_t k = faces.size();
    if (k > kBruteForceMaxClass)
      throw InvariantError("brute_force_minimize: class " + std::to_string(c + 1) + " has " + std::to_string(k) +
                           " faces (limit " + std::to_string(kBruteForceMaxClass) + ")");
    if (k == 0) continue;
    std::vector<std::size_t> local(g.n_faces(), 0);
    for (std::size_t a = 0; a < k; ++a) local[faces[a]] = a;
    struct LocalEdge {
      std::size_t a, b;
      double w;
    };
    std::vector<LocalEdge> edges;
    double scale = 1.0;
    for (auto f : faces) scale += g.unary()[f];
    for (auto e : g.class_edges()[c]) {
      const auto& ed = g.intra_edges()[e];
      edges.push_back({local[ed.i], local[ed.j], ed.weight});
      scale += -lambda * ed.weight;
    }
    const double tol = 1e-12 * scale;

    auto class_energy = [&](std::uint32_t bits) {
      double u = 0.0, p = 0.0;
      for (std::size_t a = 0; a < k; ++a)
        if (bits >> a & 1u) u += g.unary()[faces[a]];
      for (const auto& e : edges)
        if ((bits >> e.a & 1u) && (bits >> e.b & 1u)) p += e.w;
      return u + lambda * p;
    };
    // true if `x` should replace the incumbent `y` at equal energy
    auto preferred = [](std::uint32_t x, std::uint32_t y) {
      const int cx = std::popcount(x), cy = std::popcount(y);
      if (cx != cy) return cx < cy;
      const std::uint32_t diff = x ^ y;
      if (diff == 0) return false;
      const std::uint32_t lowest = diff & (~diff + 1u);
      return (x & lowest) == 0;
    };

    std::uint32_t best = 0;
    double best_e = 0.0;
    const std::uint32_t total = 1u << k;
    for (std::uint32_t bits = 1; bits < total; ++bits) {
      const double e = class_energy(bits);
      if (e < best_e - tol) {
        best = bits;
        best_e = e;
      } else if (e <= best_e + tol && preferred(bits, best)) {
        best = bits;
        best_e = std::min(e, best_e);
      }
    }
    for (std::size_t a = 0; a < k; ++a) mask.alpha[faces[a]] = (best >> a & 1u) ? 1 : 0;
  }
  return {mask, energy(g, mask, lambda)};
}

// ---------------------------------------------------------------------------
// Lambda sweep

struct SweepEntry {
  double lambda = 0.0;
  std::size_t selected_count = 0;
  double optimal_energy = 0.0;
  double pairwise_reward = 0.0;

  bool operator==(const SweepEntry&) const = default;
};

struct SweepResult {
  std::vector<SweepEntry> entries;  // ascending lambda
  std::vector<SelectionMask> masks;  // parallel to entries
};

/// -2^13, -2^12, ..., -2^0, 0
inline std::vector<double> default_lambda_grid() {
  std::vector<double> grid;
  for (int k = 13; k >= 0; --k) grid.push_back(-std::ldexp(1.0, k));
  grid.push_back(0.0);
  return grid;
}

/// Parses `pow2:-8192..0`, `pow2:-64..-1` or a comma list such as `-8,-4,0`.
inline std::vector<double> parse_lambda_grid(const std::string& spec) {
  auto bad = [&](const std::string& why) { return InvariantError("bad lambda grid '" + spec + "': " + why); };
  std::vector<double> grid;
  if (spec.rfind("pow2:", 0) == 0) {
    const auto body = spec.substr(5);
    const auto dots = body.find("..");
    if (dots == std::string::npos) throw bad("expected LO..HI");
    auto lo = detail::parse_double(body.substr(0, dots));
    auto hi = detail::parse_double(body.substr(dots + 2));
    if (!lo || !hi) throw bad("bounds must be numbers");
    auto exponent = [&](double v) {
      int e = 0;
      const double m = std::frexp(-v, &e);
      if (!(v < 0.0) || m != 0.5) throw bad("bounds must be 0 or negative powers of two");
      return e - 1;
    };
    const int top = exponent(*lo);
    const int bottom = *hi == 0.0 ? 0 : exponent(*hi);
    if (bottom > top) throw bad("LO must not exceed HI");
    for (int k = top; k >= bottom; --k) grid.push_back(-std::ldexp(1.0, k));
    if (*hi == 0.0) grid.push_back(0.0);
  } else {
    for (auto field : detail::split(spec, ',')) {
      auto v = detail::parse_double(field);
      if (!v) throw bad("not a number: '" + std::string(field) + "'");
      grid.push_back(*v);
    }
  }
  for (double v : grid) detail::require_lambda(v);
  return grid;
}

/// Solves the selection problem at each lambda. With `threads > 1` lambdas are
/// solved concurrently; the result does not depend on scheduling.
inline SweepResult lambda_sweep(const SelectionGraph& g, std::vector<double> lambdas, unsigned threads = 1) {
  for (double l : lambdas) detail::require_lambda(l);
  std::sort(lambdas.begin(), lambdas.end());
  SweepResult out;
  out.entries.resize(lambdas.size());
  out.masks.resize(lambdas.size());
  auto run = [&](std::size_t k) {
    auto res = minimize(g, lambdas[k]);
    out.entries[k] = {lambdas[k], res.mask.count(), res.energy, pairwise_reward(g, res.mask)};
    out.masks[k] = std::move(res.mask);
  };
  if (threads <= 1) {
    for (std::size_t k = 0; k < lambdas.size(); ++k) run(k);
  } else {
    std::vector<std::future<void>> jobs;
    for (unsigned w = 0; w < threads; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t k = w; k < lambdas.size(); k += threads) run(k);
      }));
    }
    for (auto& j : jobs) j.get();
  }
  return out;
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
  os << "lambda,count,energy,pairwise_reward\n";
  for (const auto& e : r.entries)
    os << detail::format_double(e.lambda) << ',' << e.selected_count << ',' << detail::format_double(e.optimal_energy)
       << ',' << detail::format_double(e.pairwise_reward) << '\n';
}

// ---------------------------------------------------------------------------
// Mask file: `SKDMASK1 <n> <lambda>` then `id,alpha` rows.

struct MaskFile {
  SelectionMask mask;
  double lambda = 0.0;
};

inline void write_mask(std::ostream& os, const SelectionMask& mask, double lambda) {
  os << "SKDMASK1 " << mask.size() << ' ' << detail::format_double(lambda) << '\n';
  for (std::size_t i = 0; i < mask.size(); ++i) os << i << ',' << static_cast<int>(mask.alpha[i]) << '\n';
}

inline void save_mask(const std::string& path, const SelectionMask& mask, double lambda) {
  std::ostringstream buf;
  write_mask(buf, mask, lambda);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << buf.str();
}

inline MaskFile read_mask(std::istream& is) {
  std::string text;
  if (!std::getline(is, text)) throw ParseError(1, "missing mask header");
  auto header = detail::split(detail::trim_cr(text), ' ');
  if (header.size() != 3 || header[0] != "SKDMASK1") throw ParseError(1, "malformed mask header");
  auto n = detail::parse_int<std::size_t>(header[1]);
  auto lambda = detail::parse_double(header[2]);
  if (!n || !lambda) throw ParseError(1, "malformed mask header");
  MaskFile mf;
  mf.lambda = *lambda;
  mf.mask = SelectionMask(*n);
  for (std::size_t i = 0; i < *n; ++i) {
    if (!std::getline(is, text)) throw ParseError(i + 2, "unexpected end of mask file");
    auto f = detail::split(detail::trim_cr(text), ',');
    auto id = f.size() == 2 ? detail::parse_int<std::size_t>(f[0]) : std::nullopt;
    if (!id || *id != i) throw ParseError(i + 2, "expected row for id " + std::to_string(i));
    if (f[1] == "1") mf.mask.alpha[i] = 1;
    else if (f[1] != "0") throw ParseError(i + 2, "alpha must be 0 or 1");
  }
  return mf;
}

inline MaskFile load_mask(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_mask(in);
}

}  // namespace skd

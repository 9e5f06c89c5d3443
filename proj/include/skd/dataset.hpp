#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "skd/detail/text.hpp"
#include "skd/error.hpp"

namespace skd {

using Vector = std::vector<double>;

/// One training identity sample: the teacher's embedding of the high-resolution
/// face plus N degraded student inputs. Labels are 1-based class indices.
struct FaceRecord {
  std::size_t id = 0;
  int label = 1;
  Vector teacher_feature;
  std::vector<Vector> degraded_inputs;
  std::optional<bool> outlier_flag;

  bool operator==(const FaceRecord&) const = default;
};

struct StudentSet {
  std::vector<FaceRecord> records;
  std::size_t class_count = 0;   // C
  std::size_t feature_dim = 0;   // D, teacher embedding width
  std::size_t input_dim = 0;     // d_in, degraded input width
  std::size_t versions = 0;      // N, degraded inputs per record

  std::size_t size() const noexcept { return records.size(); }

  bool operator==(const StudentSet&) const = default;
};

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t per_class_count = 30;
  std::size_t feature_dim = 64;
  std::size_t input_dim = 32;
  std::size_t versions = 16;
  // Expected norm of the Gaussian perturbation of a unit class direction
  // (per-coordinate sigma = noise_scale / sqrt(D)).
  double noise_scale = 0.1;
  // Same, for the per-version noise added after the degradation projection
  // (per-coordinate sigma = input_noise / sqrt(d_in)).
  double input_noise = 0.5;
  double outlier_fraction = 0.0;
  std::uint64_t seed = 0;
  // Seed of the degradation projection; defaults to `seed`. Sets generated
  // with the same projection seed (and d_in, D) share one degradation model.
  std::optional<std::uint64_t> projection_seed;
};

/// Records per class, indexed by label - 1.
inline std::vector<std::size_t> class_sizes(const StudentSet& set) {
  std::vector<std::size_t> sizes(set.class_count, 0);
  for (const auto& r : set.records) {
    if (r.label >= 1 && static_cast<std::size_t>(r.label) <= set.class_count) ++sizes[r.label - 1];
  }
  return sizes;
}

namespace detail {

inline bool all_finite(const Vector& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline bool all_zero(const Vector& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

}  // namespace detail

/// Throws InvariantError describing the first violated invariant.
inline void validate(const StudentSet& set) {
  if (set.class_count == 0) throw InvariantError("student set has no classes");
  if (set.feature_dim == 0 || set.input_dim == 0 || set.versions == 0)
    throw InvariantError("student set dimensions must be positive");
  if (set.records.empty()) throw InvariantError("student set has no records");
  for (std::size_t k = 0; k < set.records.size(); ++k) {
    const auto& r = set.records[k];
    const auto who = "record " + std::to_string(k);
    if (r.id != k) throw InvariantError(who + ": ids must be dense 0..n-1 in order");
    if (r.label < 1 || static_cast<std::size_t>(r.label) > set.class_count)
      throw InvariantError(who + ": label out of range");
    if (r.teacher_feature.size() != set.feature_dim)
      throw InvariantError(who + ": teacher feature has wrong dimension");
    if (!detail::all_finite(r.teacher_feature)) throw InvariantError(who + ": non-finite teacher feature");
    if (detail::all_zero(r.teacher_feature)) throw InvariantError(who + ": all-zero teacher feature");
    if (r.degraded_inputs.size() != set.versions)
      throw InvariantError(who + ": wrong number of degraded inputs");
    for (const auto& x : r.degraded_inputs) {
      if (x.size() != set.input_dim) throw InvariantError(who + ": degraded input has wrong dimension");
      if (!detail::all_finite(x)) throw InvariantError(who + ": non-finite degraded input");
    }
  }
  const auto sizes = class_sizes(set);
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    if (sizes[c] == 0) throw InvariantError("class " + std::to_string(c + 1) + " has no records");
  }
}

// ---------------------------------------------------------------------------
// Text format
//
//   SKD1 <n> <C> <D> <d_in> <N>
//   id,label,outlier_flag,f_1,...,f_D        (outlier_flag is 0, 1 or -)
//   j,x_1,...,x_{d_in}                       (N lines, j = 1..N)

inline void write_student_set(std::ostream& os, const StudentSet& set) {
  validate(set);
  os << "SKD1 " << set.size() << ' ' << set.class_count << ' ' << set.feature_dim << ' '
     << set.input_dim << ' ' << set.versions << '\n';
  for (const auto& r : set.records) {
    os << r.id << ',' << r.label << ',' << (r.outlier_flag ? (*r.outlier_flag ? "1" : "0") : "-");
    for (double v : r.teacher_feature) os << ',' << detail::format_double(v);
    os << '\n';
    for (std::size_t j = 0; j < r.degraded_inputs.size(); ++j) {
      os << (j + 1);
      for (double v : r.degraded_inputs[j]) os << ',' << detail::format_double(v);
      os << '\n';
    }
  }
}

inline void save_student_set(const StudentSet& set, const std::string& path) {
  std::ostringstream buf;
  write_student_set(buf, set);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << buf.str();
  if (!out) throw IoError("write failed: " + path);
}

namespace detail {

inline Vector parse_values(const std::vector<std::string_view>& fields, std::size_t first,
                           std::size_t line) {
  Vector out;
  out.reserve(fields.size() - first);
  for (std::size_t k = first; k < fields.size(); ++k) {
    auto v = parse_double(fields[k]);
    if (!v) throw ParseError(line, "not a number: '" + std::string(fields[k]) + "'");
    if (!std::isfinite(*v)) throw ParseError(line, "non-finite value");
    out.push_back(*v);
  }
  return out;
}

}  // namespace detail

inline StudentSet read_student_set(std::istream& is) {
  std::string text;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(is, text)) return false;
    ++line_no;
    return true;
  };

  if (!next_line()) throw ParseError(1, "missing header");
  auto header = detail::split(detail::trim_cr(text), ' ');
  if (header.size() != 6 || header[0] != "SKD1") throw ParseError(1, "malformed header");
  std::size_t dims[5];
  for (int k = 0; k < 5; ++k) {
    auto v = detail::parse_int<std::size_t>(header[k + 1]);
    if (!v) throw ParseError(1, "malformed header field '" + std::string(header[k + 1]) + "'");
    dims[k] = *v;
  }
  StudentSet set;
  const std::size_t n = dims[0];
  set.class_count = dims[1];
  set.feature_dim = dims[2];
  set.input_dim = dims[3];
  set.versions = dims[4];
  if (n == 0 || set.class_count == 0 || set.feature_dim == 0 || set.input_dim == 0 || set.versions == 0)
    throw ParseError(1, "header counts must be positive");
  set.records.reserve(n);

  for (std::size_t i = 0; i < n; ++i) {
    if (!next_line()) throw ParseError(line_no + 1, "unexpected end of file, expected record " + std::to_string(i));
    auto fields = detail::split(detail::trim_cr(text), ',');
    if (fields.size() != 3 + set.feature_dim)
      throw ParseError(line_no, "dimension mismatch: expected " + std::to_string(set.feature_dim) +
                                    " teacher values, got " + std::to_string(fields.size() < 3 ? 0 : fields.size() - 3));
    FaceRecord r;
    auto id = detail::parse_int<std::size_t>(fields[0]);
    if (!id || *id != i) throw ParseError(line_no, "record id must be " + std::to_string(i));
    r.id = *id;
    auto label = detail::parse_int<int>(fields[1]);
    if (!label || *label < 1 || static_cast<std::size_t>(*label) > set.class_count)
      throw ParseError(line_no, "label out of range 1.." + std::to_string(set.class_count));
    r.label = *label;
    if (fields[2] == "1") r.outlier_flag = true;
    else if (fields[2] == "0") r.outlier_flag = false;
    else if (fields[2] != "-") throw ParseError(line_no, "outlier flag must be 0, 1 or -");
    r.teacher_feature = detail::parse_values(fields, 3, line_no);
    if (detail::all_zero(r.teacher_feature)) throw ParseError(line_no, "all-zero teacher feature");

    r.degraded_inputs.reserve(set.versions);
    for (std::size_t j = 0; j < set.versions; ++j) {
      if (!next_line()) throw ParseError(line_no + 1, "unexpected end of file in degraded inputs");
      auto xf = detail::split(detail::trim_cr(text), ',');
      if (xf.size() != 1 + set.input_dim)
        throw ParseError(line_no, "dimension mismatch: expected " + std::to_string(set.input_dim) +
                                      " input values, got " + std::to_string(xf.size() - 1));
      auto jj = detail::parse_int<std::size_t>(xf[0]);
      if (!jj || *jj != j + 1) throw ParseError(line_no, "version index must be " + std::to_string(j + 1));
      r.degraded_inputs.push_back(detail::parse_values(xf, 1, line_no));
    }
    set.records.push_back(std::move(r));
  }
  while (next_line()) {
    if (!detail::trim_cr(text).empty()) throw ParseError(line_no, "trailing data after last record");
  }
  const auto sizes = class_sizes(set);
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    if (sizes[c] == 0) throw ParseError(1, "class " + std::to_string(c + 1) + " has no records");
  }
  return set;
}

inline StudentSet load_student_set(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_student_set(in);
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace detail {

/// Unit-norm nonnegative class directions. With D >= C each class owns a
/// disjoint random block of coordinates, so directions are mutually orthogonal.
inline std::vector<Vector> class_directions(std::size_t classes, std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  std::vector<Vector> dirs(classes, Vector(dim, 0.0));
  if (dim >= classes) {
    std::vector<std::size_t> perm(dim);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t base = dim / classes, extra = dim % classes;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t len = base + (c < extra ? 1 : 0);
      for (std::size_t k = 0; k < len; ++k) dirs[c][perm[pos++]] = unif(rng);
    }
  } else {
    std::normal_distribution<double> gauss;
    for (auto& d : dirs) {
      do {
        for (auto& v : d) v = std::abs(gauss(rng));
      } while (all_zero(d));
    }
  }
  for (auto& d : dirs) {
    double norm = 0.0;
    for (double v : d) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : d) v /= norm;
  }
  return dirs;
}

}  // namespace detail

/// Number of planted outliers per class for a given config.
inline std::size_t outliers_per_class(const SynthConfig& cfg) {
  return static_cast<std::size_t>(std::floor(cfg.outlier_fraction * static_cast<double>(cfg.per_class_count) + 1e-9));
}

/// Deterministic synthetic student set.
///
/// Inlier teacher features are the class direction plus Gaussian noise, clamped
/// to be nonnegative. Planted outliers get a teacher feature drawn near another
/// class's direction (the teacher is wrong about them) while their degraded
/// inputs still come from their true class. Degraded inputs are a fixed random
/// linear projection to d_in dimensions plus per-version noise.
inline StudentSet synthesize(const SynthConfig& cfg) {
  if (cfg.classes == 0 || cfg.per_class_count == 0) throw InvariantError("synth: C and per_class_count must be >= 1");
  if (cfg.input_dim == 0 || cfg.feature_dim < cfg.input_dim) throw InvariantError("synth: require D >= d_in >= 1");
  if (cfg.versions == 0) throw InvariantError("synth: N must be >= 1");
  if (!(cfg.noise_scale >= 0.0) || !(cfg.input_noise >= 0.0)) throw InvariantError("synth: noise scales must be nonnegative");
  if (!(cfg.outlier_fraction >= 0.0 && cfg.outlier_fraction < 1.0))
    throw InvariantError("synth: outlier_fraction must be in [0,1)");
  const std::size_t n_out = outliers_per_class(cfg);
  if (n_out >= cfg.per_class_count) throw InvariantError("synth: outlier_fraction leaves a class with no inliers");
  if (n_out > 0 && cfg.classes < 2) throw InvariantError("synth: outliers need at least two classes");

  std::normal_distribution<double> gauss;
  const std::size_t D = cfg.feature_dim, d_in = cfg.input_dim;

  std::vector<Vector> projection(d_in, Vector(D));
  {
    std::mt19937_64 proj_rng(cfg.projection_seed.value_or(cfg.seed) ^ 0x9e3779b97f4a7c15ULL);
    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (auto& row : projection)
      for (auto& v : row) v = gauss(proj_rng) * proj_scale;
  }
  gauss.reset();
  std::mt19937_64 rng(cfg.seed);

  const auto dirs = detail::class_directions(cfg.classes, D, rng);

  const double sigma = cfg.noise_scale / std::sqrt(static_cast<double>(D));
  const double input_sigma = cfg.input_noise / std::sqrt(static_cast<double>(d_in));
  auto noisy = [&](const Vector& dir) {
    Vector f(D);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      for (std::size_t k = 0; k < D; ++k) f[k] = std::max(0.0, dir[k] + sigma * gauss(rng));
      if (!detail::all_zero(f)) return f;
    }
    throw InvariantError("synth: noise_scale too large, cannot draw a nonzero feature");
  };

  StudentSet set;
  set.class_count = cfg.classes;
  set.feature_dim = D;
  set.input_dim = d_in;
  set.versions = cfg.versions;
  set.records.reserve(cfg.classes * cfg.per_class_count);

  for (std::size_t c = 0; c < cfg.classes; ++c) {
    std::vector<std::size_t> slots(cfg.per_class_count);
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    std::vector<std::size_t> others;
    for (std::size_t o = 0; o < cfg.classes; ++o)
      if (o != c) others.push_back(o);
    std::shuffle(others.begin(), others.end(), rng);

    // slot -> index of the wrong class it is planted near, if any
    std::vector<std::optional<std::size_t>> planted(cfg.per_class_count);
    for (std::size_t k = 0; k < n_out; ++k) planted[slots[k]] = others[k % others.size()];

    for (std::size_t p = 0; p < cfg.per_class_count; ++p) {
      FaceRecord r;
      r.id = set.records.size();
      r.label = static_cast<int>(c + 1);
      r.outlier_flag = planted[p].has_value();
      Vector latent;
      if (planted[p]) {
        r.teacher_feature = noisy(dirs[*planted[p]]);
        latent = noisy(dirs[c]);
      } else {
        r.teacher_feature = noisy(dirs[c]);
        latent = r.teacher_feature;
      }
      r.degraded_inputs.reserve(cfg.versions);
      for (std::size_t j = 0; j < cfg.versions; ++j) {
        Vector x(d_in);
        for (std::size_t a = 0; a < d_in; ++a) {
          double acc = 0.0;
          for (std::size_t b = 0; b < D; ++b) acc += projection[a][b] * latent[b];
          x[a] = acc + input_sigma * gauss(rng);
        }
        r.degraded_inputs.push_back(std::move(x));
      }
      set.records.push_back(std::move(r));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Subsetting helpers used to carve train/held-out sets from one synthetic world.

/// Keeps only the listed classes (1-based), relabelled 1..k in the given order.
inline StudentSet select_classes(const StudentSet& set, const std::vector<int>& classes) {
  StudentSet out;
  out.class_count = classes.size();
  out.feature_dim = set.feature_dim;
  out.input_dim = set.input_dim;
  out.versions = set.versions;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    for (const auto& r : set.records) {
      if (r.label != classes[k]) continue;
      FaceRecord copy = r;
      copy.id = out.records.size();
      copy.label = static_cast<int>(k + 1);
      out.records.push_back(std::move(copy));
    }
  }
  validate(out);
  return out;
}

/// Splits each class: its first `first_count` records (in id order) go to the first set.
inline std::pair<StudentSet, StudentSet> split_per_class(const StudentSet& set, std::size_t first_count) {
  StudentSet a, b;
  for (auto* s : {&a, &b}) {
    s->class_count = set.class_count;
    s->feature_dim = set.feature_dim;
    s->input_dim = set.input_dim;
    s->versions = set.versions;
  }
  std::vector<std::size_t> seen(set.class_count, 0);
  for (const auto& r : set.records) {
    auto& dst = seen[r.label - 1]++ < first_count ? a : b;
    FaceRecord copy = r;
    copy.id = dst.records.size();
    dst.records.push_back(std::move(copy));
  }
  validate(a);
  validate(b);
  return {std::move(a), std::move(b)};
}

}  // namespace skd

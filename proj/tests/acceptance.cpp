// Acceptance gate: one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "skd/skd.hpp"
#include "test_util.hpp"

using namespace skd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// 1. minimize agrees with exhaustive search.
Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  const std::vector<double> lambdas = {-8.0, -2.0, -1.0, -0.5, -0.125, 0.0};
  std::size_t graphs = 0, solves = 0, mismatches = 0;
  double worst = 0.0;
  for (; graphs < 300; ++graphs) {
    const auto g = test::random_graph(rng, 4, 8);
    for (double lam : lambdas) {
      const auto fast = minimize(g, lam), slow = brute_force_minimize(g, lam);
      worst = std::max(worst, std::abs(fast.energy - slow.energy));
      if (std::abs(fast.energy - slow.energy) > 1e-9 || !(fast.mask == slow.mask)) ++mismatches;
      ++solves;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 30.0, std::to_string(graphs) + " graphs, " + std::to_string(solves) +
                                              " solves, mismatches " + std::to_string(mismatches) + ", max |dE| " +
                                              fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

// 2. Sweeps on the default grid are monotone.
Outcome monotonicity() {
  const auto grid = default_lambda_grid();
  std::size_t sweeps = 0, violations = 0, zero_checked = 0;
  auto check = [&](const SelectionGraph& g) {
    const auto r = lambda_sweep(g, grid);
    ++sweeps;
    for (std::size_t k = 1; k < r.entries.size(); ++k) {
      if (r.entries[k].pairwise_reward > r.entries[k - 1].pairwise_reward) ++violations;
      if (r.entries[k].optimal_energy < r.entries[k - 1].optimal_energy) ++violations;
    }
    const bool all_positive = std::all_of(g.unary().begin(), g.unary().end(), [](double u) { return u > 0.0; });
    if (all_positive) {
      ++zero_checked;
      if (r.entries.back().lambda != 0.0 || r.entries.back().selected_count != 0) ++violations;
    }
  };
  std::mt19937_64 rng(77);
  for (int k = 0; k < 200; ++k) check(test::random_graph(rng, 4, 10));
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthConfig c;
    c.outlier_fraction = 0.1;
    c.seed = seed;
    const auto s = synthesize(c);
    check(build_selection_graph(s, class_centroids(s)));
    check(build_selection_graph(s, class_centroids(s), Measure::CosDist));
  }
  return {violations == 0 && zero_checked > 0, std::to_string(sweeps) + " sweeps, " + std::to_string(zero_checked) +
                                                   " with all U > 0, violations " + std::to_string(violations)};
}

// 3. Node and edge counts on random shapes.
Outcome graph_structure() {
  std::mt19937_64 rng(5);
  std::size_t shapes = 0, bad = 0;
  for (; shapes < 100; ++shapes) {
    const std::size_t C = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    std::vector<Vector> feats;
    std::vector<int> labels;
    std::vector<std::size_t> K(C);
    std::normal_distribution<double> nd;
    for (std::size_t c = 0; c < C; ++c) {
      K[c] = std::uniform_int_distribution<std::size_t>(1, 15)(rng);
      for (std::size_t i = 0; i < K[c]; ++i) {
        Vector f(6);
        for (auto& v : f) v = std::abs(nd(rng)) + 1e-3;
        feats.push_back(f);
        labels.push_back(static_cast<int>(c + 1));
      }
    }
    std::vector<std::size_t> perm(labels.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Vector> f2;
    std::vector<int> l2;
    for (auto p : perm) {
      f2.push_back(feats[p]);
      l2.push_back(labels[p]);
    }
    const auto s = test::make_set(f2, l2, C);
    std::size_t n = 0, edges = 0, folded = 0;
    for (auto k : K) {
      n += k;
      edges += k * (k - 1) / 2;
      folded += k * (C - 1);
    }
    for (auto m : {Measure::CosSim, Measure::CosDist}) {
      const auto g = build_selection_graph(s, class_centroids(s), m);
      if (g.node_count() != n + C || g.intra_edge_count() != edges || g.folded_connection_count() != folded) ++bad;
    }
  }
  return {bad == 0, std::to_string(shapes) + " shapes x 2 measures, mismatches " + std::to_string(bad)};
}

// 4. Planted outliers are discarded at some grid lambda.
Outcome outlier_discarding() {
  const auto t0 = Clock::now();
  SynthConfig c;
  c.classes = 10;
  c.per_class_count = 30;
  c.outlier_fraction = 0.1;
  c.seed = 1;
  const auto s = synthesize(c);
  const auto g = build_selection_graph(s, class_centroids(s));
  const auto r = lambda_sweep(g, default_lambda_grid());
  std::size_t n_out = 0;
  for (const auto& rec : s.records) n_out += rec.outlier_flag.value_or(false) ? 1 : 0;
  const std::size_t n_in = s.size() - n_out;
  bool found = false;
  double best_lam = 0.0, best_disc = 0.0, best_keep = 0.0;
  for (std::size_t k = 0; k < r.entries.size(); ++k) {
    std::size_t discarded = 0, kept = 0;
    for (const auto& rec : s.records) {
      const bool sel = r.masks[k].alpha[rec.id] != 0;
      if (rec.outlier_flag.value_or(false)) discarded += sel ? 0 : 1;
      else kept += sel ? 1 : 0;
    }
    const double disc = static_cast<double>(discarded) / static_cast<double>(n_out);
    const double keep = static_cast<double>(kept) / static_cast<double>(n_in);
    if (disc >= 0.8 && keep >= 0.8 && (!found || disc + keep > best_disc + best_keep)) {
      found = true;
      best_lam = r.entries[k].lambda;
      best_disc = disc;
      best_keep = keep;
    }
  }
  const double secs = seconds_since(t0);
  return {found && secs < 10.0, found ? "lambda " + fmt(best_lam) + " discards " + fmt(100 * best_disc, 3) +
                                            "% of " + std::to_string(n_out) + " outliers, keeps " +
                                            fmt(100 * best_keep, 3) + "% of inliers, " + fmt(secs, 3) + " s"
                                      : "no grid lambda meets both thresholds"};
}

// 5. Backprop matches central differences.
Outcome gradients() {
  SynthConfig c;
  c.classes = 4;
  c.per_class_count = 6;
  c.feature_dim = 10;
  c.input_dim = 6;
  c.versions = 3;
  c.outlier_fraction = 0.2;
  c.seed = 11;
  const auto s = synthesize(c);
  const auto mask = minimize(build_selection_graph(s, class_centroids(s)), -1.0).mask;
  const auto m = init_student(default_arch(s.input_dim, s.feature_dim, s.class_count, 8, {12}), s, 3);
  GradientCheckOptions opt;
  opt.epsilon = 1e-5;
  double worst = 0.0;
  std::string detail;
  for (auto sup : {Supervision::C, Supervision::S, Supervision::SC, Supervision::DC}) {
    const double e = gradient_check(m, s, mask, sup, opt);
    worst = std::max(worst, e);
    detail += std::string(to_string(sup)) + "=" + fmt(e, 3) + " ";
  }
  return {worst < 1e-4, detail + "(" + std::to_string(m.parameter_count()) + " parameters)"};
}

// 6. Selective distillation improves verification.
Outcome distillation_benefit() {
  const auto t0 = Clock::now();
  const std::vector<Supervision> modes = {Supervision::C, Supervision::SC, Supervision::DC, Supervision::S};
  std::vector<double> sum(modes.size(), 0.0);
  const int seeds = 5;
  for (int seed = 1; seed <= seeds; ++seed) {
    SynthConfig cfg;
    cfg.classes = 10;
    cfg.per_class_count = 40;
    cfg.feature_dim = 64;
    cfg.input_dim = 16;
    cfg.versions = 8;
    cfg.noise_scale = 0.1;
    cfg.input_noise = 2.0;
    cfg.outlier_fraction = 0.1;
    cfg.seed = static_cast<std::uint64_t>(seed);
    const auto [train, eval] = split_per_class(synthesize(cfg), 30);
    const auto pairs = make_verification_pairs(eval, 500, 500, 99);
    const auto mask = minimize(build_selection_graph(train, class_centroids(train)), -1.0).mask;
    TrainConfig tc;
    tc.learning_rate = 0.02;
    tc.batch_size = 32;
    tc.epochs = 5;
    tc.seed = static_cast<std::uint64_t>(seed);
    const auto base = pretrain_student(
        init_student(default_arch(train.input_dim, train.feature_dim, train.class_count, 128, {64, 64}), train,
                     static_cast<std::uint64_t>(seed)),
        train, tc);
    for (std::size_t k = 0; k < modes.size(); ++k) {
      TrainConfig fc = tc;
      fc.epochs = 20;
      fc.supervision = modes[k];
      sum[k] += evaluate_verification(finetune(base, train, mask, fc), pairs, Tap::Mimic);
    }
  }
  const double c = sum[0] / seeds, sc = sum[1] / seeds, dc = sum[2] / seeds, s = sum[3] / seeds;
  const double secs = seconds_since(t0);
  return {sc >= c + 0.02 && sc >= dc && secs < 300.0, "mean AUC c=" + fmt(c) + " sc=" + fmt(sc) + " dc=" + fmt(dc) +
                                                          " s=" + fmt(s) + ", " + fmt(secs, 3) + " s"};
}

bool trunk_equal(const StudentModel& a, const StudentModel& b) {
  for (std::size_t k = 0; k <= a.mimic_layer(); ++k) {
    const auto &x = a.layers[k], &y = b.layers[k];
    if (x.weight.size() != y.weight.size() || x.bias.size() != y.bias.size()) return false;
    if (std::memcmp(x.weight.data(), y.weight.data(), sizeof(double) * static_cast<std::size_t>(x.weight.size())) != 0)
      return false;
    if (std::memcmp(x.bias.data(), y.bias.data(), sizeof(double) * static_cast<std::size_t>(x.bias.size())) != 0)
      return false;
  }
  return true;
}

// 7. Transfer keeps the trunk frozen and beats training from scratch.
Outcome transfer() {
  const auto t0 = Clock::now();
  double sum_transfer = 0.0, sum_scratch = 0.0;
  bool frozen_ok = true;
  const int seeds = 3;
  for (int seed = 1; seed <= seeds; ++seed) {
    const auto s = static_cast<std::uint64_t>(seed);
    SynthConfig src_cfg;
    src_cfg.classes = 200;
    src_cfg.per_class_count = 5;
    src_cfg.feature_dim = 64;
    src_cfg.input_dim = 16;
    src_cfg.versions = 8;
    src_cfg.noise_scale = 0.1;
    src_cfg.input_noise = 1.0;
    src_cfg.seed = 100 + s;
    const auto source = synthesize(src_cfg);

    SynthConfig tgt_cfg = src_cfg;
    tgt_cfg.classes = 20;
    tgt_cfg.per_class_count = 20;
    tgt_cfg.seed = 500 + s;
    tgt_cfg.projection_seed = src_cfg.seed;  // same degradation, new identities
    const auto [ttrain, ttest] = split_per_class(synthesize(tgt_cfg), 10);

    TrainConfig pc;
    pc.learning_rate = 0.05;
    pc.batch_size = 32;
    pc.epochs = 15;
    pc.seed = s;
    const auto src = pretrain_student(
        init_student(default_arch(source.input_dim, source.feature_dim, source.class_count, 128, {64, 64}), source, s),
        source, pc);

    TrainConfig tc;
    tc.supervision = Supervision::C;
    tc.learning_rate = 0.05;
    tc.batch_size = 32;
    tc.epochs = 5;
    tc.seed = s;
    const auto moved = transfer_student(src, 20, s + 1000);
    const auto tuned = finetune(moved, ttrain, std::nullopt, tc);
    frozen_ok = frozen_ok && trunk_equal(src, tuned);
    const auto scratch = finetune(
        init_student(default_arch(ttrain.input_dim, ttrain.feature_dim, 20, 128, {64, 64}), ttrain, s + 1000), ttrain,
        std::nullopt, tc);
    sum_transfer += evaluate_identification(tuned, ttest).top1_error;
    sum_scratch += evaluate_identification(scratch, ttest).top1_error;
  }
  const double tr = sum_transfer / seeds, sc = sum_scratch / seeds;
  return {frozen_ok && tr <= sc, std::string("trunk bytes ") + (frozen_ok ? "unchanged" : "CHANGED") +
                                     ", mean top-1 error transferred=" + fmt(tr) + " scratch=" + fmt(sc) + ", " +
                                     fmt(seconds_since(t0), 3) + " s"};
}

// 8. Centroids and the pairwise measure are exact.
Outcome metric_exactness() {
  double worst_centroid = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthConfig c;
    c.classes = 20;
    c.per_class_count = 50;
    c.noise_scale = 1.0;
    c.outlier_fraction = 0.1;
    c.seed = seed;
    const auto s = synthesize(c);
    const auto table = class_centroids(s);
    for (std::size_t cls = 0; cls < s.class_count; ++cls) {
      std::vector<long double> acc(s.feature_dim, 0.0L);
      std::size_t n = 0;
      for (const auto& r : s.records) {
        if (static_cast<std::size_t>(r.label) != cls + 1) continue;
        ++n;
        for (std::size_t d = 0; d < s.feature_dim; ++d) acc[d] += r.teacher_feature[d];
      }
      for (std::size_t d = 0; d < s.feature_dim; ++d) {
        const long double ref = acc[d] / static_cast<long double>(n);
        const double got = table.centroids[cls][d];
        const long double scale = std::max(std::abs(ref), 1e-300L);
        worst_centroid = std::max(worst_centroid, static_cast<double>(std::abs(got - ref) / scale));
      }
    }
  }
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<std::size_t> dim(1, 64);
  std::uniform_real_distribution<double> logscale(-6.0, 6.0);
  double worst_sym = 0.0, worst_scale = 0.0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const auto n = dim(rng);
    Vector a(n), b(n);
    for (auto& v : a) v = nd(rng);
    for (auto& v : b) v = nd(rng);
    const double k = std::pow(10.0, logscale(rng));
    Vector ka(a);
    for (auto& v : ka) v *= k;
    for (auto m : {Measure::CosSim, Measure::CosDist}) {
      const double ab = pairwise_measure(a, b, m);
      worst_sym = std::max(worst_sym, std::abs(ab - pairwise_measure(b, a, m)));
      worst_scale = std::max(worst_scale, std::abs(ab - pairwise_measure(ka, b, m)));
    }
  }
  return {worst_centroid <= 1e-12 && worst_sym <= 1e-12 && worst_scale <= 1e-12,
          "centroid rel err " + fmt(worst_centroid, 3) + ", symmetry " + fmt(worst_sym, 3) + ", scale " +
              fmt(worst_scale, 3) + " over " + std::to_string(trials) + " trials"};
}

// 9. Reproducible outputs and exact round trips.
Outcome determinism() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  SynthConfig c;
  c.classes = 5;
  c.per_class_count = 12;
  c.feature_dim = 24;
  c.input_dim = 8;
  c.versions = 3;
  c.outlier_fraction = 0.1;
  c.seed = 9;
  auto set_text = [](const StudentSet& s) {
    std::ostringstream os;
    write_student_set(os, s);
    return os.str();
  };
  const auto s = synthesize(c);
  expect(set_text(s) == set_text(synthesize(c)), "synth text");
  {
    std::istringstream is(set_text(s));
    const auto back = read_student_set(is);
    expect(back == s && set_text(back) == set_text(s), "set round trip");
  }

  const auto g = build_selection_graph(s, class_centroids(s));
  auto mask_text = [&](double lam) {
    std::ostringstream os;
    write_mask(os, minimize(g, lam).mask, lam);
    return os.str();
  };
  expect(mask_text(-1.0) == mask_text(-1.0), "mask bytes");
  {
    std::istringstream is(mask_text(-1.0));
    const auto mf = read_mask(is);
    expect(mf.mask == minimize(g, -1.0).mask && mf.lambda == -1.0, "mask round trip");
  }

  auto sweep_text = [&](unsigned threads) {
    std::ostringstream os;
    write_sweep_csv(os, lambda_sweep(g, default_lambda_grid(), threads));
    return os.str();
  };
  const auto csv = sweep_text(1);
  expect(csv == sweep_text(1) && csv == sweep_text(3), "sweep bytes");
  {
    const auto r = lambda_sweep(g, default_lambda_grid());
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    std::size_t k = 0;
    bool ok = true;
    while (std::getline(is, line)) {
      std::istringstream ls(line);
      std::string lam, cnt, en, pr;
      std::getline(ls, lam, ',');
      std::getline(ls, cnt, ',');
      std::getline(ls, en, ',');
      std::getline(ls, pr, ',');
      const auto& e = r.entries.at(k++);
      ok = ok && std::stod(lam) == e.lambda && std::stoul(cnt) == e.selected_count && std::stod(en) == e.optimal_energy &&
           std::stod(pr) == e.pairwise_reward;
    }
    expect(ok && k == r.entries.size(), "sweep csv round trip");
  }

  const auto mask = minimize(g, -1.0).mask;
  auto train = [&](std::string& metrics) {
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 16;
    tc.seed = 4;
    auto m = init_student(default_arch(s.input_dim, s.feature_dim, s.class_count, 16, {20}), s, 2);
    m = pretrain_student(m, s, tc, [&](const EpochMetrics& e) { metrics += metrics_line(e) + "\n"; });
    m = finetune(m, s, mask, tc, [&](const EpochMetrics& e) { metrics += metrics_line(e) + "\n"; });
    return m;
  };
  std::string ma, mb;
  const auto a = train(ma), b = train(mb);
  expect(checkpoint_string(a) == checkpoint_string(b), "checkpoint bytes");
  expect(!ma.empty() && ma == mb, "metrics bytes");
  {
    const auto back = model_from_json(nlohmann::json::parse(checkpoint_string(a)));
    expect(checkpoint_string(back) == checkpoint_string(a), "checkpoint round trip");
    bool same_out = true;
    for (const auto& r : s.records)
      same_out = same_out && forward(back, r.degraded_inputs[0]).logits == forward(a, r.degraded_inputs[0]).logits;
    expect(same_out, "checkpoint forward");
  }
  std::string joined;
  for (const auto& f : failures) joined += " " + f;
  return {failures.empty(), failures.empty() ? "sets, masks, sweep CSV, metrics and checkpoints reproduce exactly"
                                             : "failed:" + joined};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skd acceptance suite"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle equivalence", oracle_equivalence},   {"parametric monotonicity", monotonicity},
      {"graph structure", graph_structure},         {"planted-outlier discarding", outlier_discarding},
      {"gradient correctness", gradients},          {"distillation benefit", distillation_benefit},
      {"transfer contract", transfer},              {"metric and centroid exactness", metric_exactness},
      {"determinism and round trip", determinism}};

  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (only != 0 && static_cast<std::size_t>(only) != k + 1) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k + 1 << " (" << criteria[k].first << "): " << o.detail
              << std::endl;
  }
  return all ? 0 : 1;
}

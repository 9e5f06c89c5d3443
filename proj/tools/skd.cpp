// skd: selective knowledge distillation pipeline.
//
//   synth [-> split] -> select / sweep -> pretrain -> finetune -> eval
//
// Every command that writes a file also writes <out>.config.ini, the resolved
// configuration; `skd --config <out>.config.ini` reruns it exactly.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "skd/skd.hpp"

namespace {

constexpr int kExitUsage = 2;

const char* kind_name(skd::ErrorKind k) {
  switch (k) {
    case skd::ErrorKind::Io: return "io";
    case skd::ErrorKind::Format: return "format";
    case skd::ErrorKind::Invariant: return "invariant";
    case skd::ErrorKind::Numeric: return "numeric";
  }
  return "unknown";
}

int report(const char* kind, int code, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["code"] = code;
  j["message"] = message;
  std::cerr << j.dump() << '\n';
  return code;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw skd::IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw skd::IoError("write failed: " + path);
}

/// Writes `[<subcommand>]` plus every option's resolved value. Options left
/// unset with no default (written by CLI11 as `name=""`) are omitted.
void echo_config(const CLI::App& sub, const std::string& out) {
  std::string section = sub.get_name();
  for (const auto* p = sub.get_parent(); p != nullptr && p->get_parent() != nullptr; p = p->get_parent())
    section = p->get_name() + "." + section;
  std::istringstream all(sub.config_to_str(true, false));
  std::string text = "[" + section + "]\n", line;
  while (std::getline(all, line))
    if (!line.ends_with("=\"\"")) text += line + "\n";
  write_text(out + ".config.ini", text);
}

std::vector<std::size_t> parse_widths(const std::string& spec) {
  std::vector<std::size_t> out;
  if (spec.empty()) return out;
  for (auto f : skd::detail::split(spec, ',')) {
    auto v = skd::detail::parse_int<std::size_t>(f);
    if (!v || *v == 0) throw skd::InvariantError("bad layer width '" + std::string(f) + "'");
    out.push_back(*v);
  }
  return out;
}

struct TrainFlags {
  double lr = 0.05;
  std::size_t batch = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--batch", batch, "mini-batch size");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--seed", seed, "shuffling / initialisation seed");
  }

  skd::TrainConfig config() const {
    skd::TrainConfig c;
    c.learning_rate = lr;
    c.batch_size = batch;
    c.epochs = epochs;
    c.seed = seed;
    return c;
  }
};

/// Collects JSON metric lines; they go to the metrics file and stdout.
struct MetricsSink {
  std::string text;

  skd::EpochCallback callback() {
    return [this](const skd::EpochMetrics& e) {
      const auto line = skd::metrics_line(e);
      std::cout << line << '\n';
      text += line + "\n";
    };
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skd: selective knowledge distillation for low-resolution face recognition"};
  app.set_config("--config", "", "rerun from a resolved-config echo (<out>.config.ini)");
  app.require_subcommand(1);
  app.footer(
      "Exit codes:\n"
      "  0  success\n"
      "  2  usage error (bad flags)\n"
      "  3  I/O error (missing or unwritable file)\n"
      "  4  format error (malformed input file)\n"
      "  5  invariant violation (inconsistent inputs or parameters)\n"
      "  6  numeric failure (non-finite loss or activation)\n"
      "Errors are printed to stderr as one JSON object:\n"
      "  {\"error\":\"<kind>\",\"code\":<exit code>,\"message\":\"...\"}");
  app.option_defaults()->always_capture_default();

  // synth ------------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "generate a seeded synthetic training set");
  skd::SynthConfig sc;
  std::string synth_out;
  std::uint64_t projection_seed = 0;
  synth->add_option("--out", synth_out, "output set file")->required();
  synth->add_option("--classes", sc.classes, "number of identities C");
  synth->add_option("--per-class", sc.per_class_count, "records per identity");
  synth->add_option("--dim", sc.feature_dim, "teacher feature dimension D");
  synth->add_option("--input-dim", sc.input_dim, "degraded input dimension d_in");
  synth->add_option("--versions", sc.versions, "degraded versions N per record");
  synth->add_option("--noise", sc.noise_scale, "teacher feature noise (expected norm)");
  synth->add_option("--input-noise", sc.input_noise, "degraded input noise (expected norm)");
  synth->add_option("--outlier-fraction", sc.outlier_fraction, "planted outliers per class, as a fraction");
  synth->add_option("--seed", sc.seed, "generator seed");
  auto* proj_opt = synth->add_option("--projection-seed", projection_seed,
                                     "seed of the degradation projection (default: --seed)")
                       ->default_str("");

  // split ------------------------------------------------------------------
  auto* split = app.add_subcommand("split", "split every class into a training part and a held-out part");
  std::string sp_data, sp_out, sp_heldout;
  std::size_t sp_first = 1;
  split->add_option("--data", sp_data, "student set file")->required();
  split->add_option("--first", sp_first, "records per class (in id order) kept in --out");
  split->add_option("--out", sp_out, "output set with the first records of each class")->required();
  split->add_option("--heldout", sp_heldout, "output set with the remaining records")->required();

  // select -----------------------------------------------------------------
  auto* select = app.add_subcommand("select", "minimise the selection energy at one lambda");
  std::string sel_data, sel_out, sel_measure = "cossim";
  double sel_lambda = -1.0;
  select->add_option("--data", sel_data, "student set file")->required();
  select->add_option("--lambda", sel_lambda, "pairwise weight (<= 0)");
  select->add_option("--measure", sel_measure, "cossim or cosdist");
  select->add_option("--out", sel_out, "output mask file")->required();

  // sweep ------------------------------------------------------------------
  auto* sweep = app.add_subcommand("sweep", "selection over a lambda grid, written as CSV");
  std::string sw_data, sw_out, sw_measure = "cossim", sw_grid = "pow2:-8192..0";
  unsigned sw_threads = 1;
  sweep->add_option("--data", sw_data, "student set file")->required();
  sweep->add_option("--grid", sw_grid, "pow2:LO..HI or a comma list of lambdas");
  sweep->add_option("--measure", sw_measure, "cossim or cosdist");
  sweep->add_option("--threads", sw_threads, "worker threads (output does not depend on it)");
  sweep->add_option("--out", sw_out, "output CSV")->required();

  // graph ------------------------------------------------------------------
  auto* graph_cmd = app.add_subcommand("graph", "selection graph inspection");
  graph_cmd->require_subcommand(1);
  auto* graph = graph_cmd->add_subcommand("dump", "write unaries (i,label,U) and intra-class weights (i,j,w)");
  std::string gr_data, gr_out, gr_measure = "cossim";
  graph->add_option("--data", gr_data, "student set file")->required();
  graph->add_option("--measure", gr_measure, "cossim or cosdist");
  graph->add_option("--out", gr_out, "output file")->required();

  // pretrain ---------------------------------------------------------------
  auto* pretrain = app.add_subcommand("pretrain", "stage 1: train the student on the classification loss");
  std::string pt_data, pt_out, pt_metrics, pt_hidden = "64,64";
  std::size_t pt_identity_dim = 128;
  TrainFlags pt_flags;
  pretrain->add_option("--data", pt_data, "student set file")->required();
  pretrain->add_option("--hidden", pt_hidden, "hidden trunk widths before the mimic layer");
  pretrain->add_option("--identity-dim", pt_identity_dim, "identity layer width");
  pt_flags.add(pretrain);
  pretrain->add_option("--out", pt_out, "output checkpoint")->required();
  pretrain->add_option("--metrics", pt_metrics, "JSON-lines metrics file (default <out>.metrics.jsonl)");

  // finetune ---------------------------------------------------------------
  auto* finetune = app.add_subcommand("finetune", "stage 3: joint classification + mimic regression");
  std::string ft_data, ft_model, ft_mask, ft_out, ft_metrics, ft_sup = "sc";
  double ft_lambda = 0.0, ft_reg_scale = 1.0;
  bool ft_normalize = false;
  TrainFlags ft_flags;
  finetune->add_option("--data", ft_data, "student set file")->required();
  finetune->add_option("--model", ft_model, "pretrained checkpoint")->required();
  finetune->add_option("--mask", ft_mask, "selection mask (required for s and sc)");
  finetune->add_option("--supervision", ft_sup, "c, s, sc or dc");
  auto* ft_lambda_opt =
      finetune->add_option("--lambda", ft_lambda, "expected lambda of the mask; must match its header")
          ->default_str("");
  finetune->add_option("--reg-scale", ft_reg_scale, "weight of the regression term");
  finetune->add_flag("--normalize-targets", ft_normalize, "regress length-normalised teacher features");
  ft_flags.add(finetune);
  finetune->add_option("--out", ft_out, "output checkpoint")->required();
  finetune->add_option("--metrics", ft_metrics, "JSON-lines metrics file (default <out>.metrics.jsonl)");

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "verification AUC, identification top-1/top-5, retrieval rank-1");
  std::string ev_data, ev_model, ev_out, ev_tap = "mimic";
  std::size_t ev_pos = 500, ev_neg = 500;
  std::uint64_t ev_seed = 99;
  eval->add_option("--data", ev_data, "evaluation set file")->required();
  eval->add_option("--model", ev_model, "checkpoint")->required();
  eval->add_option("--tap", ev_tap, "embedding tap: mimic or identity");
  eval->add_option("--positives", ev_pos, "positive verification pairs");
  eval->add_option("--negatives", ev_neg, "negative verification pairs");
  eval->add_option("--pair-seed", ev_seed, "seed of the verification pair set");
  eval->add_option("--out", ev_out, "also write the JSON report here");

  // bench ------------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "inference throughput and parameter count (informational)");
  std::string bn_model, bn_out;
  std::size_t bn_samples = 10000;
  bench->add_option("--model", bn_model, "checkpoint")->required();
  bench->add_option("--samples", bn_samples, "forward passes to time");
  bench->add_option("--out", bn_out, "also write the JSON report here");

  for (auto* sub : app.get_subcommands({})) sub->configurable();
  graph->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", kExitUsage, e.what());
  }

  try {
    if (*synth) {
      if (*proj_opt) sc.projection_seed = projection_seed;
      else proj_opt->default_str(std::to_string(sc.seed));
      skd::save_student_set(skd::synthesize(sc), synth_out);
      echo_config(*synth, synth_out);
    } else if (*split) {
      const auto [a, b] = skd::split_per_class(skd::load_student_set(sp_data), sp_first);
      skd::save_student_set(a, sp_out);
      skd::save_student_set(b, sp_heldout);
      echo_config(*split, sp_out);
    } else if (*select) {
      const auto set = skd::load_student_set(sel_data);
      const auto g = skd::build_selection_graph(set, skd::class_centroids(set), skd::parse_measure(sel_measure));
      const auto res = skd::minimize(g, sel_lambda);
      skd::save_mask(sel_out, res.mask, sel_lambda);
      echo_config(*select, sel_out);
      nlohmann::ordered_json j;
      j["lambda"] = sel_lambda;
      j["selected"] = res.mask.count();
      j["faces"] = res.mask.size();
      j["energy"] = res.energy;
      std::cout << j.dump() << '\n';
    } else if (*sweep) {
      const auto set = skd::load_student_set(sw_data);
      const auto g = skd::build_selection_graph(set, skd::class_centroids(set), skd::parse_measure(sw_measure));
      const auto res = skd::lambda_sweep(g, skd::parse_lambda_grid(sw_grid), sw_threads);
      std::ostringstream csv;
      skd::write_sweep_csv(csv, res);
      write_text(sw_out, csv.str());
      echo_config(*sweep, sw_out);
    } else if (*graph) {
      const auto set = skd::load_student_set(gr_data);
      const auto g = skd::build_selection_graph(set, skd::class_centroids(set), skd::parse_measure(gr_measure));
      std::ostringstream os;
      skd::dump_graph(g, os);
      write_text(gr_out, os.str());
      echo_config(*graph, gr_out);
    } else if (*pretrain) {
      const auto set = skd::load_student_set(pt_data);
      auto arch = skd::default_arch(set.input_dim, set.feature_dim, set.class_count, pt_identity_dim,
                                    parse_widths(pt_hidden));
      auto model = skd::init_student(arch, set, pt_flags.seed);
      MetricsSink sink;
      model = skd::pretrain_student(std::move(model), set, pt_flags.config(), sink.callback());
      skd::save_checkpoint(model, pt_out);
      write_text(pt_metrics.empty() ? pt_out + ".metrics.jsonl" : pt_metrics, sink.text);
      echo_config(*pretrain, pt_out);
    } else if (*finetune) {
      const auto set = skd::load_student_set(ft_data);
      auto model = skd::load_checkpoint(ft_model);
      auto cfg = ft_flags.config();
      cfg.supervision = skd::parse_supervision(ft_sup);
      cfg.reg_scale = ft_reg_scale;
      cfg.normalize_targets = ft_normalize;
      std::optional<skd::SelectionMask> mask;
      if (!ft_mask.empty()) {
        auto mf = skd::load_mask(ft_mask);
        if (*ft_lambda_opt && mf.lambda != ft_lambda)
          throw skd::InvariantError("mask " + ft_mask + " was selected at lambda " +
                                    skd::detail::format_double(mf.lambda) + ", not " +
                                    skd::detail::format_double(ft_lambda));
        if (mf.mask.size() != set.size()) throw skd::InvariantError("mask length does not match the set");
        cfg.lambda = mf.lambda;
        ft_lambda_opt->default_str(skd::detail::format_double(mf.lambda));
        mask = std::move(mf.mask);
      } else if (*ft_lambda_opt) {
        throw skd::InvariantError("--lambda given without --mask; run `skd select` first");
      }
      MetricsSink sink;
      model = skd::finetune(std::move(model), set, mask, cfg, sink.callback());
      skd::save_checkpoint(model, ft_out);
      write_text(ft_metrics.empty() ? ft_out + ".metrics.jsonl" : ft_metrics, sink.text);
      echo_config(*finetune, ft_out);
    } else if (*eval) {
      const auto set = skd::load_student_set(ev_data);
      const auto model = skd::load_checkpoint(ev_model);
      const auto tap = skd::parse_tap(ev_tap);
      const auto pairs = skd::make_verification_pairs(set, ev_pos, ev_neg, ev_seed);
      nlohmann::ordered_json j;
      j["tap"] = std::string(skd::to_string(tap));
      j["auc"] = skd::evaluate_verification(model, pairs, tap);
      if (model.arch.class_count == set.class_count) {
        const auto id = skd::evaluate_identification(model, set);
        j["top1_error"] = id.top1_error;
        j["top5_error"] = id.top5_error;
      }
      // Retrieval: the first record of each identity is its high-resolution
      // gallery entry; every degraded input of the other records is a probe.
      std::vector<skd::GalleryEntry> gallery;
      std::vector<skd::Probe> probes;
      std::vector<bool> seen(set.class_count, false);
      for (const auto& r : set.records) {
        const auto id = static_cast<std::size_t>(r.label);
        if (!seen[id - 1]) {
          seen[id - 1] = true;
          gallery.push_back({id, r.teacher_feature});
        } else {
          for (const auto& x : r.degraded_inputs) probes.push_back({id, x});
        }
      }
      if (!probes.empty()) j["rank1"] = skd::evaluate_retrieval(model, gallery, probes, tap);
      std::cout << j.dump() << '\n';
      if (!ev_out.empty()) {
        write_text(ev_out, j.dump() + "\n");
        echo_config(*eval, ev_out);
      }
    } else if (*bench) {
      const auto model = skd::load_checkpoint(bn_model);
      if (bn_samples == 0) throw skd::InvariantError("--samples must be positive");
      Eigen::MatrixXd batch = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(model.arch.input_dim()),
                                                        static_cast<Eigen::Index>(bn_samples), 0.5);
      const auto t0 = std::chrono::steady_clock::now();
      const auto cache = skd::forward_batch(model, batch);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      nlohmann::ordered_json j;
      j["parameters"] = model.parameter_count();
      j["teacher_budget"] = model.arch.teacher_param_budget;
      j["samples"] = bn_samples;
      j["seconds"] = secs;
      j["inferences_per_sec"] = secs > 0.0 ? static_cast<double>(bn_samples) / secs : 0.0;
      j["checksum"] = cache.logits().sum();
      std::cout << j.dump() << '\n';
      if (!bn_out.empty()) {
        write_text(bn_out, j.dump() + "\n");
        echo_config(*bench, bn_out);
      }
    }
  } catch (const skd::Error& e) {
    return report(kind_name(e.kind()), static_cast<int>(e.kind()), e.what());
  } catch (const std::exception& e) {
    return report("internal", 1, e.what());
  }
  return 0;
}

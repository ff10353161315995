#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "r2kd/analysis.hpp"
#include "r2kd/config.hpp"
#include "r2kd/pipeline.hpp"

namespace r2kd {

// A fully resolved invocation: merged run config plus the per-subcommand
// inputs. Exit codes downstream: 0 success, 1 runtime failure, 2 usage or
// config error.
struct CommandSpec {
  std::string subcommand;
  RunConfig cfg;
  std::string out_dir;
  std::string teacher_path;  // distill, analyze-entropy, disparity
  std::string ckpt_path;     // evaluate, prune, export-features
  std::vector<std::pair<std::string, std::string>> students;  // analyze-entropy, report order
  std::string student_path;                                   // disparity
  EntropyRegime regime = EntropyRegime::high;
  size_t grid = 64;
  double family_width = 0.08;
  size_t top_k = 0;  // 0: report every class
};

namespace detail {

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("config: cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunFailure("cannot open '" + path.string() + "' for writing");
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw RunFailure("write failed for '" + path.string() + "'");
}

inline std::string fmt4(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// manifest.txt names every artifact; config.cfg is the full merged snapshot
// (seed included), so the pair is enough to re-run the command exactly.
inline void write_run_record(const CommandSpec& spec,
                             const std::vector<std::pair<std::string, std::string>>& entries) {
  const std::filesystem::path dir(spec.out_dir);
  write_text_file(dir / "config.cfg", serialize_config(spec.cfg));
  std::string m;
  m += "subcommand=" + spec.subcommand + "\n";
  m += "config_hash=" + to_hex64(config_hash(spec.cfg)) + "\n";
  m += "seed=" + std::to_string(spec.cfg.seed) + "\n";
  m += "config=config.cfg\n";
  for (const auto& [k, v] : entries) m += k + "=" + v + "\n";
  write_text_file(dir / "manifest.txt", m);
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each writes its artifacts under spec.out_dir only and
// finishes with the run record.
// ---------------------------------------------------------------------------

inline void run_train_teacher(const CommandSpec& spec, std::ostream& out) {
  DatasetBundle data = load_dataset(spec.cfg);
  TrainOutput res = train_teacher(spec.cfg, data);
  const std::filesystem::path dir(spec.out_dir);
  save_checkpoint(res.ckpt, (dir / "teacher.ckpt").string());
  write_text_file(dir / "metrics.csv", res.log.to_csv());
  const EpochRow& last = res.log.rows.back();
  out << "train-teacher: epochs " << res.log.rows.size() << " top1 " << fmt4(last.top1)
      << " entropy " << fmt4(last.entropy) << " -> teacher.ckpt\n";
  write_run_record(spec, {{"artifact.checkpoint", "teacher.ckpt"}, {"artifact.metrics", "metrics.csv"}});
}

inline void run_distill(const CommandSpec& spec, std::ostream& out) {
  Checkpoint teacher = load_checkpoint(spec.teacher_path);
  DatasetBundle data = load_dataset(spec.cfg);
  TrainOutput res = distill(spec.cfg, teacher, data);
  const std::filesystem::path dir(spec.out_dir);
  save_checkpoint(res.ckpt, (dir / "student.ckpt").string());
  write_text_file(dir / "metrics.csv", res.log.to_csv());
  const EpochRow& last = res.log.rows.back();
  out << "distill: method " << method_to_string(spec.cfg.method) << " top1 " << fmt4(last.top1)
      << " entropy " << fmt4(last.entropy) << " -> student.ckpt\n";
  write_run_record(spec, {{"input.teacher", spec.teacher_path},
                          {"artifact.checkpoint", "student.ckpt"},
                          {"artifact.metrics", "metrics.csv"}});
}

inline void run_evaluate(const CommandSpec& spec, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(spec.ckpt_path);
  DatasetBundle data = load_dataset(spec.cfg);
  EvalResult res = evaluate(ckpt.net, data.test, data.meta);
  std::string csv = "class,count,accuracy,mean_entropy\n";
  char buf[128];
  for (size_t c = 0; c < res.per_class.size(); ++c) {
    const ClassStat& s = res.per_class[c];
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g,%.9g\n", c, s.count, s.accuracy(),
                  s.mean_entropy());
    csv += buf;
  }
  write_text_file(std::filesystem::path(spec.out_dir) / "eval.csv", csv);
  out << "evaluate: top1 " << fmt4(res.top1) << " mean_entropy " << fmt4(res.mean_entropy)
      << " over " << data.test.batch << " samples -> eval.csv\n";
  write_run_record(spec, {{"input.checkpoint", spec.ckpt_path}, {"artifact.eval", "eval.csv"}});
}

inline void run_prune(const CommandSpec& spec, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(spec.ckpt_path);
  auto [pruned, mask] = magnitude_prune(ckpt.net, spec.cfg.prune);
  Checkpoint pc;
  pc.net = std::move(pruned);
  pc.seed = ckpt.seed;
  pc.epoch = ckpt.epoch;
  pc.config_hash = ckpt.config_hash;
  const std::filesystem::path dir(spec.out_dir);
  save_checkpoint(pc, (dir / "pruned.ckpt").string());
  const size_t total = mask.total_count(), zeros = mask.zero_count();
  char buf[160];
  std::snprintf(buf, sizeof(buf), "weights,zeroed,requested_ratio,sparsity\n%zu,%zu,%.9g,%.9g\n",
                total, zeros, spec.cfg.prune.ratio,
                total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0);
  write_text_file(dir / "prune.csv", buf);
  out << "prune: zeroed " << zeros << " of " << total << " weights ("
      << prune_scope_to_string(spec.cfg.prune.scope) << ", ratio "
      << fmt4(spec.cfg.prune.ratio) << ") -> pruned.ckpt\n";
  write_run_record(spec, {{"input.checkpoint", spec.ckpt_path},
                          {"artifact.checkpoint", "pruned.ckpt"},
                          {"artifact.stats", "prune.csv"}});
}

inline void run_analyze_entropy(const CommandSpec& spec, std::ostream& out) {
  Checkpoint teacher = load_checkpoint(spec.teacher_path);
  std::vector<Checkpoint> loaded;
  loaded.reserve(spec.students.size());
  for (const auto& [name, path] : spec.students) loaded.push_back(load_checkpoint(path));
  std::vector<std::pair<std::string, const Network*>> students;
  for (size_t i = 0; i < spec.students.size(); ++i)
    students.emplace_back(spec.students[i].first, &loaded[i].net);
  DatasetBundle data = load_dataset(spec.cfg);
  const size_t top_k = spec.top_k ? spec.top_k : data.meta.num_classes;
  EntropyReport rep = entropy_report(teacher.net, students, data.test, data.meta, top_k);
  write_text_file(std::filesystem::path(spec.out_dir) / "entropy.csv", rep.to_csv());
  out << "analyze-entropy: " << rep.selection_rule << ", " << rep.rows.size()
      << " rows -> entropy.csv\n";
  std::vector<std::pair<std::string, std::string>> entries{{"input.teacher", spec.teacher_path}};
  for (const auto& [name, path] : spec.students) entries.emplace_back("input.student." + name, path);
  entries.emplace_back("artifact.report", "entropy.csv");
  write_run_record(spec, entries);
}

inline void run_disparity(const CommandSpec& spec, std::ostream& out) {
  Checkpoint teacher = load_checkpoint(spec.teacher_path);
  Checkpoint student = load_checkpoint(spec.student_path);
  DatasetBundle data = load_dataset(spec.cfg);
  DisparityMatrix d = disparity_matrix(teacher.net, student.net, data.test, data.meta);
  write_text_file(std::filesystem::path(spec.out_dir) / "disparity.csv", d.to_csv());
  out << "disparity: mean off-diagonal " << fmt4(d.mean_off_diagonal()) << ", degenerate classes "
      << d.degenerate.size() << " -> disparity.csv\n";
  write_run_record(spec, {{"input.teacher", spec.teacher_path},
                          {"input.student", spec.student_path},
                          {"artifact.matrix", "disparity.csv"}});
}

inline void run_demo_kl(const CommandSpec& spec, std::ostream& out) {
  ModeDemoResult r = kl_mode_demo(spec.regime, spec.grid, spec.family_width);
  const std::filesystem::path dir(spec.out_dir);
  write_text_file(dir / "demo.csv", r.to_csv());
  const std::string regime = spec.regime == EntropyRegime::high ? "high" : "low";
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "regime,grid,family_width,teacher_entropy,kl_entropy,corr_entropy,"
                "kl_valley_mass,corr_valley_mass,teacher_argmax,kl_argmax,corr_argmax,"
                "kl_target_mass,corr_target_mass\n"
                "%s,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu,%zu,%zu,%.9g,%.9g\n",
                regime.c_str(), spec.grid, spec.family_width, r.teacher_entropy, r.kl_entropy,
                r.corr_entropy, r.kl_valley_mass, r.corr_valley_mass, r.teacher_argmax,
                r.kl_argmax, r.corr_argmax, r.kl_mode_mass[r.target_mode],
                r.corr_mode_mass[r.target_mode]);
  write_text_file(dir / "demo_summary.csv", buf);
  out << "demo-kl " << regime << " grid " << spec.grid << ": kl_valley_mass "
      << fmt4(r.kl_valley_mass) << " corr_argmax_match "
      << (r.corr_argmax == r.teacher_argmax ? 1 : 0) << " kl_entropy " << fmt4(r.kl_entropy)
      << " corr_entropy " << fmt4(r.corr_entropy) << " -> demo.csv\n";
  write_run_record(spec, {{"demo.regime", regime},
                          {"demo.grid", std::to_string(spec.grid)},
                          {"demo.family_width", detail::fmt_double(spec.family_width)},
                          {"artifact.distributions", "demo.csv"},
                          {"artifact.summary", "demo_summary.csv"}});
}

inline void run_export_features(const CommandSpec& spec, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(spec.ckpt_path);
  DatasetBundle data = load_dataset(spec.cfg);
  const std::filesystem::path path = std::filesystem::path(spec.out_dir) / "features.csv";
  FeatureExport fe = export_features(ckpt.net, data.test, data.meta, path.string());
  out << "export-features: " << fe.rows << " rows, width " << fe.width << " -> features.csv\n";
  write_run_record(spec,
                   {{"input.checkpoint", spec.ckpt_path}, {"artifact.features", "features.csv"}});
}

}  // namespace detail

inline void run_command(const CommandSpec& spec, std::ostream& out) {
  std::filesystem::create_directories(spec.out_dir);
  if (spec.subcommand == "train-teacher") return detail::run_train_teacher(spec, out);
  if (spec.subcommand == "distill") return detail::run_distill(spec, out);
  if (spec.subcommand == "evaluate") return detail::run_evaluate(spec, out);
  if (spec.subcommand == "prune") return detail::run_prune(spec, out);
  if (spec.subcommand == "analyze-entropy") return detail::run_analyze_entropy(spec, out);
  if (spec.subcommand == "disparity") return detail::run_disparity(spec, out);
  if (spec.subcommand == "demo-kl") return detail::run_demo_kl(spec, out);
  if (spec.subcommand == "export-features") return detail::run_export_features(spec, out);
  throw std::invalid_argument("unknown subcommand '" + spec.subcommand + "'");
}

namespace detail {

// Run options shared by every dataset-touching subcommand. Values are only
// applied when the flag was actually given, so precedence stays flags > file
// > defaults.
struct SharedFlags {
  std::string config_path, method, augment, data_dir, out_dir;
  uint64_t seed = 0;
  double alpha = 0.0, beta = 0.0, lambda = 0.0, prune_ratio = 0.0;
  bool deterministic = false;
};

inline CLI::Validator open_unit_interval(const std::string& what) {
  return CLI::Validator(
      [what](std::string& s) -> std::string {
        double v = 0.0;
        try {
          v = std::stod(s);
        } catch (...) {
          return what + ": not a number: '" + s + "'";
        }
        if (!(v > 0.0 && v < 1.0)) return what + " must satisfy 0 < lambda < 1, got " + s;
        return {};
      },
      "FLOAT in (0,1)");
}

inline CLI::Validator prune_ratio_range() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        double v = 0.0;
        try {
          v = std::stod(s);
        } catch (...) {
          return "prune ratio: not a number: '" + s + "'";
        }
        if (!(v >= 0.0 && v < 1.0)) return "prune ratio must satisfy 0 <= ratio < 1, got " + s;
        return {};
      },
      "FLOAT in [0,1)");
}

inline CLI::Validator grid_at_least_16() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        long long v = 0;
        try {
          v = std::stoll(s);
        } catch (...) {
          return "grid: not an integer: '" + s + "'";
        }
        if (v < 16) return "grid must have at least 16 points, got " + s;
        return {};
      },
      "INT >= 16");
}

inline void add_shared_options(CLI::App* cmd, SharedFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value run config file");
  cmd->add_option("--seed", f.seed, "RNG seed for the whole run");
  cmd->add_option("--method", f.method, "distillation objective")
      ->check(CLI::IsMember({"kd", "r2kd"}));
  cmd->add_option("--alpha", f.alpha, "weight of the value-correlation distance")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--beta", f.beta, "weight of the rank-correlation distance")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--lambda", f.lambda, "ensemble weight on the intact teacher")
      ->check(open_unit_interval("ensemble weighting"));
  cmd->add_option("--prune-ratio", f.prune_ratio, "fraction of teacher weights to zero")
      ->check(prune_ratio_range());
  cmd->add_option("--augment", f.augment, "training-batch augmentation")
      ->check(CLI::IsMember({"none", "cutmix", "mixup"}));
  cmd->add_option("--data-dir", f.data_dir, "dataset binaries (default: env R2KD_DATA_DIR)");
  cmd->add_flag("--deterministic", f.deterministic, "bit-stable mode, single worker");
  cmd->add_option("--out", f.out_dir, "output directory, all artifacts land here")->required();
}

inline RunConfig merge_run_config(const CLI::App* cmd, const SharedFlags& f) {
  RunConfig cfg = default_run_config();
  if (cmd->count("--config")) cfg = parse_config(read_text_file(f.config_path), cfg);
  if (cmd->count("--seed")) cfg.seed = f.seed;
  if (cmd->count("--method")) cfg.method = method_from_string(f.method);
  if (cmd->count("--alpha")) cfg.loss.alpha = f.alpha;
  if (cmd->count("--beta")) cfg.loss.beta = f.beta;
  if (cmd->count("--lambda")) cfg.ensemble.lambda = f.lambda;
  if (cmd->count("--prune-ratio")) cfg.prune.ratio = f.prune_ratio;
  if (cmd->count("--augment")) cfg.augment = augment_from_string(f.augment);
  if (cmd->count("--data-dir")) {
    cfg.data_dir = f.data_dir;
  } else if (cfg.data_dir.empty()) {
    if (const char* env = std::getenv("R2KD_DATA_DIR")) cfg.data_dir = env;
  }
  if (f.deterministic) cfg.deterministic = true;
  validate_run_config(cfg);
  return cfg;
}

}  // namespace detail

// Parses argv and runs the selected subcommand. Streams are injected so tests
// can capture output; main() passes std::cout / std::cerr.
inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"knowledge distillation with correlation losses and a pruned-teacher ensemble"};
  app.name("r2kd");
  app.require_subcommand(1);

  std::map<std::string, detail::SharedFlags> shared;
  auto make = [&](const std::string& name, const std::string& desc) {
    CLI::App* cmd = app.add_subcommand(name, desc);
    detail::add_shared_options(cmd, shared[name]);
    return cmd;
  };

  make("train-teacher", "cross-entropy pre-training of the teacher architecture");
  CLI::App* c_distill = make("distill", "train a student against a teacher checkpoint");
  std::string distill_teacher;
  c_distill->add_option("--teacher", distill_teacher, "teacher checkpoint")->required();

  CLI::App* c_eval = make("evaluate", "test-split accuracy and entropy of a checkpoint");
  std::string eval_ckpt;
  c_eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate")->required();

  CLI::App* c_prune = make("prune", "magnitude-prune a checkpoint");
  std::string prune_ckpt;
  c_prune->add_option("--ckpt", prune_ckpt, "checkpoint to prune")->required();

  CLI::App* c_entropy = make("analyze-entropy", "per-class entropy of teacher and students");
  std::string entropy_teacher;
  std::vector<std::string> entropy_students;
  size_t entropy_top_k = 0;
  c_entropy->add_option("--teacher", entropy_teacher, "teacher checkpoint")->required();
  c_entropy->add_option("--student", entropy_students, "NAME=PATH student checkpoint, repeatable")
      ->required();
  c_entropy->add_option("--top-k", entropy_top_k, "classes to report (0: every class)");

  CLI::App* c_disp = make("disparity", "logit-correlation disparity between two checkpoints");
  std::string disp_teacher, disp_student;
  c_disp->add_option("--teacher", disp_teacher, "teacher checkpoint")->required();
  c_disp->add_option("--student", disp_student, "student checkpoint")->required();

  CLI::App* c_demo = app.add_subcommand(
      "demo-kl", "fit a one-bump student to a bimodal teacher under both objectives");
  std::string demo_regime = "high";
  size_t demo_grid = 64;
  double demo_fw = 0.08;
  std::string demo_out;
  c_demo->add_option("--regime", demo_regime, "teacher entropy regime")
      ->check(CLI::IsMember({"high", "low"}));
  c_demo->add_option("--grid", demo_grid, "grid points")->check(detail::grid_at_least_16());
  c_demo->add_option("--family-width", demo_fw, "initial bump width")
      ->check(CLI::PositiveNumber);
  c_demo->add_option("--out", demo_out, "output directory, all artifacts land here")->required();

  CLI::App* c_export = make("export-features", "penultimate-layer features of the test split");
  std::string export_ckpt;
  c_export->add_option("--ckpt", export_ckpt, "checkpoint whose features to export")->required();

  if (argc <= 1) {
    err << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* a = &app;
    while (!a->get_subcommands().empty()) a = a->get_subcommands().front();
    out << a->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run with --help for usage\n";
    return 2;
  }

  CommandSpec spec;
  try {
    CLI::App* cmd = app.get_subcommands().front();
    spec.subcommand = cmd->get_name();
    if (spec.subcommand == "demo-kl") {
      spec.cfg = default_run_config();
      spec.out_dir = demo_out;
      spec.regime = demo_regime == "high" ? EntropyRegime::high : EntropyRegime::low;
      spec.grid = demo_grid;
      spec.family_width = demo_fw;
    } else {
      const detail::SharedFlags& f = shared[spec.subcommand];
      spec.cfg = detail::merge_run_config(cmd, f);
      spec.out_dir = f.out_dir;
    }
    spec.teacher_path = spec.subcommand == "distill" ? distill_teacher
                        : spec.subcommand == "analyze-entropy" ? entropy_teacher
                        : spec.subcommand == "disparity" ? disp_teacher
                                                         : "";
    if (spec.subcommand == "evaluate") spec.ckpt_path = eval_ckpt;
    if (spec.subcommand == "prune") spec.ckpt_path = prune_ckpt;
    if (spec.subcommand == "export-features") spec.ckpt_path = export_ckpt;
    if (spec.subcommand == "disparity") spec.student_path = disp_student;
    if (spec.subcommand == "analyze-entropy") {
      spec.top_k = entropy_top_k;
      for (const std::string& kv : entropy_students) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == kv.size())
          throw std::invalid_argument("--student expects NAME=PATH, got '" + kv + "'");
        const std::string name = kv.substr(0, eq);
        for (const auto& [seen, path] : spec.students)
          if (seen == name) throw std::invalid_argument("duplicate student name '" + name + "'");
        spec.students.emplace_back(name, kv.substr(eq + 1));
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    run_command(spec, out);
    return 0;
  } catch (const FormatError& e) {
    err << "error: format-error " << e.what() << "\n";
    return 1;
  } catch (const NumericalFailure& e) {
    err << "error: numerical-failure " << e.what() << "\n";
    return 1;
  } catch (const RunFailure& e) {
    err << "error: run-failure " << e.what() << "\n";
    return 1;
  } catch (const InvalidStateError& e) {
    err << "error: invalid-state " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

// Convenience overload for tests: args without the program name.
inline int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("r2kd");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> ptrs;
  ptrs.reserve(full.size());
  for (const std::string& s : full) ptrs.push_back(s.c_str());
  return cli_main(static_cast<int>(ptrs.size()), ptrs.data(), out, err);
}

}  // namespace r2kd

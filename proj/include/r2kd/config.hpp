#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "r2kd/correlation.hpp"
#include "r2kd/ensemble.hpp"
#include "r2kd/errors.hpp"
#include "r2kd/net.hpp"
#include "r2kd/numerics.hpp"

namespace r2kd {

enum class Method { ce_only, kd, r2kd };
enum class AugmentKind { none, cutmix, mixup };

inline std::string method_to_string(Method m) {
  switch (m) {
    case Method::ce_only:
      return "ce-only";
    case Method::kd:
      return "kd";
    case Method::r2kd:
      return "r2kd";
  }
  return "r2kd";
}

inline Method method_from_string(const std::string& s) {
  if (s == "ce-only") return Method::ce_only;
  if (s == "kd") return Method::kd;
  if (s == "r2kd") return Method::r2kd;
  throw std::invalid_argument("unknown method '" + s + "' (expected ce-only, kd, or r2kd)");
}

inline std::string augment_to_string(AugmentKind a) {
  switch (a) {
    case AugmentKind::none:
      return "none";
    case AugmentKind::cutmix:
      return "cutmix";
    case AugmentKind::mixup:
      return "mixup";
  }
  return "none";
}

inline AugmentKind augment_from_string(const std::string& s) {
  if (s == "none") return AugmentKind::none;
  if (s == "cutmix") return AugmentKind::cutmix;
  if (s == "mixup") return AugmentKind::mixup;
  throw std::invalid_argument("unknown augmentation '" + s + "' (expected none, cutmix, or mixup)");
}

inline std::string prune_scope_to_string(PruneScope s) {
  return s == PruneScope::global ? "global" : "per-layer";
}

inline PruneScope prune_scope_from_string(const std::string& s) {
  if (s == "global") return PruneScope::global;
  if (s == "per-layer") return PruneScope::per_layer;
  throw std::invalid_argument("unknown prune scope '" + s + "' (expected global or per-layer)");
}

// Everything one run needs, flat enough to round-trip through a key=value
// file. Architecture strings use a small stack language: "mlp:64,32" is two
// relu hidden layers, "cnn:8,16" is two conv+pool stages; the class count and
// input shape come from the dataset at build time.
struct RunConfig {
  std::string dataset = "blobs";  // blobs | blobs-hard | cifar10 | cifar100
  std::string teacher_arch = "mlp:64,32";
  std::string student_arch = "mlp:32,16";
  SgdConfig sgd;
  LossConfig loss;
  PruneConfig prune;
  EnsembleConfig ensemble;
  bool ensemble_enabled = true;  // false: students see the intact teacher only
  AugmentKind augment = AugmentKind::none;
  double augment_beta = 1.0;  // Beta(a,a) parameter for cutmix/mixup
  size_t epochs = 30;
  size_t batch = 64;
  uint64_t seed = 1;
  Method method = Method::r2kd;
  bool deterministic = false;
  std::string data_dir;  // CIFAR binaries live here; unused for blobs
};

inline RunConfig default_run_config() {
  RunConfig cfg;
  cfg.sgd.schedule = {{15, 0.1}, {25, 0.1}};
  return cfg;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& key) {
  try {
    size_t idx = 0;
    double v = std::stod(s, &idx);
    if (idx != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw FormatError("config: key '" + key + "' needs a number, got '" + s + "'");
  }
}

inline uint64_t parse_u64(const std::string& s, const std::string& key) {
  uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw FormatError("config: key '" + key + "' needs a non-negative integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw FormatError("config: key '" + key + "' needs true or false, got '" + s + "'");
}

inline std::string fmt_schedule(const std::vector<std::pair<size_t, double>>& sched) {
  std::string out;
  for (size_t i = 0; i < sched.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(sched[i].first) + ":" + fmt_double(sched[i].second);
  }
  return out;
}

inline std::vector<std::pair<size_t, double>> parse_schedule(const std::string& s) {
  std::vector<std::pair<size_t, double>> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto colon = item.find(':');
    if (colon == std::string::npos)
      throw FormatError("config: schedule entry '" + item + "' is not epoch:multiplier");
    out.emplace_back(static_cast<size_t>(parse_u64(item.substr(0, colon), "sgd.schedule")),
                     parse_double(item.substr(colon + 1), "sgd.schedule"));
  }
  return out;
}

inline std::string trim(std::string_view v) {
  size_t a = v.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return "";
  size_t b = v.find_last_not_of(" \t\r");
  return std::string(v.substr(a, b - a + 1));
}

}  // namespace detail

// Canonical text form: fixed key order, full-precision numbers. Also the
// input to the config hash, so any semantic change moves the hash.
inline std::string serialize_config(const RunConfig& cfg) {
  using detail::fmt_double;
  std::string out;
  auto kv = [&out](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
  kv("dataset", cfg.dataset);
  kv("method", method_to_string(cfg.method));
  kv("seed", std::to_string(cfg.seed));
  kv("epochs", std::to_string(cfg.epochs));
  kv("batch", std::to_string(cfg.batch));
  kv("deterministic", cfg.deterministic ? "true" : "false");
  kv("data_dir", cfg.data_dir);
  kv("teacher.arch", cfg.teacher_arch);
  kv("student.arch", cfg.student_arch);
  kv("sgd.lr", fmt_double(cfg.sgd.lr));
  kv("sgd.momentum", fmt_double(cfg.sgd.momentum));
  kv("sgd.weight_decay", fmt_double(cfg.sgd.weight_decay));
  kv("sgd.schedule", detail::fmt_schedule(cfg.sgd.schedule));
  kv("loss.alpha", fmt_double(cfg.loss.alpha));
  kv("loss.beta", fmt_double(cfg.loss.beta));
  kv("loss.kd_temperature", fmt_double(cfg.loss.kd_temperature));
  kv("loss.corr_temperature", fmt_double(cfg.loss.corr_temperature));
  kv("loss.soft_rank_tau", fmt_double(cfg.loss.soft_rank_tau));
  kv("loss.kd_gamma", fmt_double(cfg.loss.kd_gamma));
  kv("loss.eps", fmt_double(cfg.loss.eps));
  kv("prune.ratio", fmt_double(cfg.prune.ratio));
  kv("prune.scope", prune_scope_to_string(cfg.prune.scope));
  kv("ensemble.enabled", cfg.ensemble_enabled ? "true" : "false");
  kv("ensemble.lambda", fmt_double(cfg.ensemble.lambda));
  kv("augment", augment_to_string(cfg.augment));
  kv("augment.beta", fmt_double(cfg.augment_beta));
  return out;
}

inline uint64_t config_hash(const RunConfig& cfg) {
  std::string text = serialize_config(cfg);
  return fnv1a64(text.data(), text.size());
}

// Applies one key=value pair onto cfg. Shared by the file parser and the
// command line so both speak the same vocabulary.
inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "dataset") {
    if (value != "blobs" && value != "blobs-hard" && value != "cifar10" && value != "cifar100")
      throw FormatError("config: unknown dataset '" + value + "'");
    cfg.dataset = value;
  } else if (key == "method") {
    cfg.method = method_from_string(value);
  } else if (key == "seed") {
    cfg.seed = parse_u64(value, key);
  } else if (key == "epochs") {
    cfg.epochs = static_cast<size_t>(parse_u64(value, key));
  } else if (key == "batch") {
    cfg.batch = static_cast<size_t>(parse_u64(value, key));
  } else if (key == "deterministic") {
    cfg.deterministic = parse_bool(value, key);
  } else if (key == "data_dir") {
    cfg.data_dir = value;
  } else if (key == "teacher.arch") {
    cfg.teacher_arch = value;
  } else if (key == "student.arch") {
    cfg.student_arch = value;
  } else if (key == "sgd.lr") {
    cfg.sgd.lr = parse_double(value, key);
  } else if (key == "sgd.momentum") {
    cfg.sgd.momentum = parse_double(value, key);
  } else if (key == "sgd.weight_decay") {
    cfg.sgd.weight_decay = parse_double(value, key);
  } else if (key == "sgd.schedule") {
    cfg.sgd.schedule = parse_schedule(value);
  } else if (key == "loss.alpha") {
    cfg.loss.alpha = parse_double(value, key);
  } else if (key == "loss.beta") {
    cfg.loss.beta = parse_double(value, key);
  } else if (key == "loss.kd_temperature") {
    cfg.loss.kd_temperature = parse_double(value, key);
  } else if (key == "loss.corr_temperature") {
    cfg.loss.corr_temperature = parse_double(value, key);
  } else if (key == "loss.soft_rank_tau") {
    cfg.loss.soft_rank_tau = parse_double(value, key);
  } else if (key == "loss.kd_gamma") {
    cfg.loss.kd_gamma = parse_double(value, key);
  } else if (key == "loss.eps") {
    cfg.loss.eps = parse_double(value, key);
  } else if (key == "prune.ratio") {
    cfg.prune.ratio = parse_double(value, key);
  } else if (key == "prune.scope") {
    cfg.prune.scope = prune_scope_from_string(value);
  } else if (key == "ensemble.enabled") {
    cfg.ensemble_enabled = parse_bool(value, key);
  } else if (key == "ensemble.lambda") {
    cfg.ensemble.lambda = parse_double(value, key);
  } else if (key == "augment") {
    cfg.augment = augment_from_string(value);
  } else if (key == "augment.beta") {
    cfg.augment_beta = parse_double(value, key);
  } else {
    throw FormatError("config: unknown key '" + key + "'");
  }
}

// key=value per line; '#' starts a comment; blank lines allowed. Values keep
// prior settings when a key is absent, so a file is a diff on the defaults.
inline RunConfig parse_config(const std::string& text, RunConfig base = default_run_config()) {
  std::stringstream ss(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw FormatError("config: line " + std::to_string(line_no) + " has no '=': '" + t + "'");
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    try {
      apply_config_entry(base, key, value);
    } catch (const FormatError& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

// ---------------------------------------------------------------------------
// Architecture strings
// ---------------------------------------------------------------------------

// "mlp:H1,H2,..." -> dense+relu per hidden width, then dense to num_classes.
// "cnn:C1,C2,..." -> conv3x3+relu+maxpool2 per channel count, flatten, dense.
inline std::vector<LayerSpec> parse_arch(const std::string& arch, Shape3 input,
                                         size_t num_classes) {
  auto colon = arch.find(':');
  std::string family = colon == std::string::npos ? arch : arch.substr(0, colon);
  std::vector<size_t> widths;
  if (colon != std::string::npos) {
    std::stringstream ss(arch.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) throw FormatError("arch '" + arch + "': empty width");
      widths.push_back(static_cast<size_t>(detail::parse_u64(item, "arch")));
      if (widths.back() == 0) throw FormatError("arch '" + arch + "': zero width");
    }
  }
  if (widths.empty()) throw FormatError("arch '" + arch + "': needs at least one width");

  std::vector<LayerSpec> layers;
  auto dense = [](size_t in, size_t out) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.in_dim = in;
    l.out_dim = out;
    return l;
  };
  if (family == "mlp") {
    size_t prev = input.flat();
    for (size_t w : widths) {
      layers.push_back(dense(prev, w));
      LayerSpec r;
      r.kind = LayerKind::relu;
      layers.push_back(r);
      prev = w;
    }
    layers.push_back(dense(prev, num_classes));
  } else if (family == "cnn") {
    size_t ch = input.ch, h = input.h, w = input.w;
    for (size_t c : widths) {
      LayerSpec conv;
      conv.kind = LayerKind::conv3x3;
      conv.in_ch = ch;
      conv.out_ch = c;
      layers.push_back(conv);
      LayerSpec r;
      r.kind = LayerKind::relu;
      layers.push_back(r);
      if (h % 2 != 0 || w % 2 != 0)
        throw FormatError("arch '" + arch + "': spatial dims must stay even for pooling");
      LayerSpec p;
      p.kind = LayerKind::maxpool2;
      layers.push_back(p);
      ch = c;
      h /= 2;
      w /= 2;
    }
    LayerSpec f;
    f.kind = LayerKind::flatten;
    layers.push_back(f);
    layers.push_back(dense(ch * h * w, num_classes));
  } else {
    throw FormatError("arch '" + arch + "': unknown family (expected mlp or cnn)");
  }
  return layers;
}

inline void validate_run_config(const RunConfig& cfg) {
  validate_sgd_config(cfg.sgd);
  validate_loss_config(cfg.loss);
  validate_prune_config(cfg.prune);
  validate_ensemble_config(cfg.ensemble);
  if (cfg.epochs == 0) throw std::invalid_argument("run config: epochs must be positive");
  if (cfg.batch < 2) throw std::invalid_argument("run config: batch must be at least 2");
  if (!(cfg.augment_beta > 0.0))
    throw std::invalid_argument("run config: augment.beta must be positive");
  if (cfg.teacher_arch.empty() || cfg.student_arch.empty())
    throw std::invalid_argument("run config: architecture strings must be non-empty");
}

}  // namespace r2kd

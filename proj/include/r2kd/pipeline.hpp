#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r2kd/augment.hpp"
#include "r2kd/config.hpp"
#include "r2kd/correlation.hpp"
#include "r2kd/dataset.hpp"
#include "r2kd/ensemble.hpp"
#include "r2kd/errors.hpp"
#include "r2kd/net.hpp"
#include "r2kd/numerics.hpp"
#include "r2kd/rng.hpp"

namespace r2kd {

// Fixed stream ids so the independent random decisions of a run never share
// a sequence: dataset content, teacher init, student init, shuffling,
// augmentation.
constexpr uint64_t kStreamDataset = 1;
constexpr uint64_t kStreamTeacherInit = 2;
constexpr uint64_t kStreamStudentInit = 3;
constexpr uint64_t kStreamShuffle = 4;
constexpr uint64_t kStreamAugment = 5;

struct DatasetBundle {
  ImageBatch train;
  ImageBatch test;
  DatasetMeta meta;
};

namespace detail {

// Class-major blob output splits cleanly: the first train_pc samples of each
// class go to train, the next test_pc to test.
inline DatasetBundle split_blobs(const ImageBatch& all, const DatasetMeta& meta, size_t classes,
                                 size_t train_pc, size_t test_pc) {
  DatasetBundle out;
  out.meta = meta;
  auto init_like = [&](ImageBatch& b, size_t n) {
    b.channels = all.channels;
    b.height = all.height;
    b.width = all.width;
    b.batch = n;
    b.pixels.resize(n * all.sample_size());
    b.labels.resize(n);
  };
  init_like(out.train, classes * train_pc);
  init_like(out.test, classes * test_pc);
  const size_t per_class = train_pc + test_pc;
  size_t tr = 0, te = 0;
  for (size_t c = 0; c < classes; ++c) {
    for (size_t s = 0; s < per_class; ++s) {
      const size_t src = c * per_class + s;
      ImageBatch& dst = s < train_pc ? out.train : out.test;
      size_t& cursor = s < train_pc ? tr : te;
      std::copy(all.image(src).begin(), all.image(src).end(), dst.image(cursor).begin());
      dst.labels[cursor] = all.labels[src];
      ++cursor;
    }
  }
  out.meta.train_count = out.train.batch;
  out.meta.test_count = out.test.batch;
  return out;
}

inline DatasetBundle load_blob_dataset(uint64_t seed, size_t classes, size_t dim, size_t train_pc,
                                       size_t test_pc, double sigma, double mean_scale) {
  BlobSpec spec = make_blob_spec(classes, dim, train_pc + test_pc, sigma, mean_scale, seed);
  auto [all, meta] = gen_blobs(spec);
  meta.num_classes = classes;
  DatasetBundle out = split_blobs(all, meta, classes, train_pc, test_pc);
  set_channel_stats(out.meta, out.train);
  return out;
}

inline DatasetBundle load_cifar_dataset(const RunConfig& cfg, CifarVariant v) {
  if (cfg.data_dir.empty())
    throw std::invalid_argument("dataset '" + cfg.dataset + "' needs data_dir");
  DatasetBundle out;
  out.meta = cifar_meta(v);
  if (v == CifarVariant::cifar10) {
    std::vector<std::string> parts;
    for (int i = 1; i <= 5; ++i)
      parts.push_back(cfg.data_dir + "/data_batch_" + std::to_string(i) + ".bin");
    out.train = load_cifar_files(parts, v);
    out.test = load_cifar_file(cfg.data_dir + "/test_batch.bin", v);
  } else {
    out.train = load_cifar_file(cfg.data_dir + "/train.bin", v);
    out.test = load_cifar_file(cfg.data_dir + "/test.bin", v);
  }
  out.meta.train_count = out.train.batch;
  out.meta.test_count = out.test.batch;
  set_channel_stats(out.meta, out.train);
  return out;
}

}  // namespace detail

// Dataset presets. Blob content is derived from the run seed, so different
// seeds are genuinely independent problem instances while a fixed seed
// reproduces bit-identical data. "blobs" is cleanly separable; "blobs-hard"
// overlaps heavily so teachers sit well below perfect accuracy.
inline DatasetBundle load_dataset(const RunConfig& cfg) {
  const uint64_t dseed = RngStream{cfg.seed, kStreamDataset}.next_u64();
  if (cfg.dataset == "blobs")
    return detail::load_blob_dataset(dseed, 4, 64, 100, 25, 0.35, 1.0);
  if (cfg.dataset == "blobs-hard")
    return detail::load_blob_dataset(dseed, 10, 64, 500, 100, 1.5, 1.0);
  if (cfg.dataset == "cifar10") return detail::load_cifar_dataset(cfg, CifarVariant::cifar10);
  if (cfg.dataset == "cifar100") return detail::load_cifar_dataset(cfg, CifarVariant::cifar100);
  throw std::invalid_argument("unknown dataset '" + cfg.dataset + "'");
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochRow {
  size_t epoch = 0;
  double l_ce = 0.0;
  double l_value = 0.0;
  double l_rank = 0.0;
  double total = 0.0;
  double top1 = 0.0;
  double entropy = 0.0;
  double seconds = 0.0;
};

struct MetricsLog {
  std::vector<EpochRow> rows;

  void append(const EpochRow& row) {
    if (!rows.empty() && row.epoch <= rows.back().epoch)
      throw std::invalid_argument("metrics log: epoch index must increase");
    rows.push_back(row);
  }

  std::string to_csv() const {
    std::string out = "epoch,l_ce,l_value,l_rank,total,top1,entropy,seconds\n";
    char buf[256];
    for (const EpochRow& r : rows) {
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.epoch, r.l_ce,
                    r.l_value, r.l_rank, r.total, r.top1, r.entropy, r.seconds);
      out += buf;
    }
    return out;
  }
};

struct ClassStat {
  size_t count = 0;
  size_t correct = 0;
  double entropy_sum = 0.0;

  double accuracy() const { return count ? static_cast<double>(correct) / count : 0.0; }
  double mean_entropy() const { return count ? entropy_sum / count : 0.0; }
};

struct EvalResult {
  double top1 = 0.0;
  double mean_entropy = 0.0;
  std::vector<ClassStat> per_class;
};

// Full-split metrics at temperature 1. Deterministic: fixed chunking, fixed
// accumulation order.
inline EvalResult evaluate(const Network& net, const ImageBatch& data, const DatasetMeta& meta) {
  if (data.batch == 0) throw std::invalid_argument("evaluate: empty split");
  if (net.num_outputs() < meta.num_classes)
    throw std::invalid_argument("evaluate: network has fewer outputs than classes");
  const std::vector<float> x = standardize(data, meta);
  const size_t sample = data.sample_size();
  EvalResult res;
  res.per_class.resize(meta.num_classes);
  size_t correct = 0;
  double entropy_total = 0.0;

  const size_t chunk = 512;
  for (size_t start = 0; start < data.batch; start += chunk) {
    const size_t n = std::min(chunk, data.batch - start);
    std::span<const float> xs(x.data() + start * sample, n * sample);
    DenseMatrix logits = forward(net, xs, n);
    for (size_t b = 0; b < n; ++b) {
      auto row = logits.row(b);
      ProbabilityVector p = softmax(row, 1.0);
      const double h = entropy_unchecked(p.probs);
      const size_t label = data.labels[start + b];
      const size_t arg = static_cast<size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      ClassStat& cs = res.per_class.at(label);
      ++cs.count;
      cs.entropy_sum += h;
      entropy_total += h;
      if (arg == label) {
        ++correct;
        ++cs.correct;
      }
    }
  }
  res.top1 = static_cast<double>(correct) / static_cast<double>(data.batch);
  res.mean_entropy = entropy_total / static_cast<double>(data.batch);
  return res;
}

// ---------------------------------------------------------------------------
// Loss assembly helpers
// ---------------------------------------------------------------------------

// Method overrides on top of the configured loss weights: ce-only trains on
// plain cross-entropy, kd on CE + temperature-scaled KL, r2kd on the full
// correlation objective.
inline LossConfig effective_loss_config(const RunConfig& cfg) {
  LossConfig eff = cfg.loss;
  switch (cfg.method) {
    case Method::ce_only:
      eff.alpha = 0.0;
      eff.beta = 0.0;
      eff.kd_gamma = 0.0;
      break;
    case Method::kd:
      eff.alpha = 0.0;
      eff.beta = 0.0;
      if (!(eff.kd_gamma > 0.0)) eff.kd_gamma = 1.0;
      break;
    case Method::r2kd:
      break;
  }
  return eff;
}

// The teacher distribution is formed once per step and feeds every active
// term. Correlation terms read it at corr_temperature; a pure KL run reads it
// at kd_temperature to match the scaled-KL definition.
inline double teacher_prob_temperature(const LossConfig& eff) {
  return (eff.alpha > 0.0 || eff.beta > 0.0) ? eff.corr_temperature : eff.kd_temperature;
}

// Batch-mean soft-label cross-entropy at temperature 1, for runs that never
// touch a teacher.
inline LossBreakdown ce_loss(const DenseMatrix& logits, const BatchLabels& labels) {
  const size_t B = logits.rows, C = logits.cols;
  if (labels.batch() != B) throw std::invalid_argument("ce_loss: label batch mismatch");
  LossBreakdown out;
  out.grad_student_logits = DenseMatrix(B, C);
  std::vector<double> onehot(C, 0.0);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (size_t b = 0; b < B; ++b) {
    std::span<const double> y;
    if (labels.is_soft()) {
      y = labels.soft.row(b);
    } else {
      std::fill(onehot.begin(), onehot.end(), 0.0);
      if (labels.hard[b] >= C) throw std::invalid_argument("ce_loss: label out of range");
      onehot[labels.hard[b]] = 1.0;
      y = onehot;
    }
    TermGrad tg = ce_term(logits.row(b), y);
    out.l_ce += tg.loss * inv_b;
    for (size_t i = 0; i < C; ++i) out.grad_student_logits.at(b, i) = tg.grad[i] * inv_b;
  }
  out.total = out.l_ce;
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOutput {
  Checkpoint ckpt;
  MetricsLog log;
};

namespace detail {

// Gathers train samples by index into a contiguous sub-batch.
inline ImageBatch gather(const ImageBatch& data, std::span<const size_t> idx) {
  ImageBatch out;
  out.batch = idx.size();
  out.channels = data.channels;
  out.height = data.height;
  out.width = data.width;
  out.pixels.resize(out.batch * data.sample_size());
  out.labels.resize(out.batch);
  for (size_t i = 0; i < idx.size(); ++i) {
    auto src = data.image(idx[i]);
    std::copy(src.begin(), src.end(), out.image(i).begin());
    out.labels[i] = data.labels[idx[i]];
  }
  return out;
}

// One optimizer step's inputs: the (possibly augmented and concatenated)
// pixel block plus labels.
struct StepBatch {
  ImageBatch images;
  BatchLabels labels;
};

inline StepBatch assemble_step_batch(const RunConfig& cfg, const ImageBatch& sub,
                                     size_t num_classes, RngStream aug_rng) {
  StepBatch out;
  if (cfg.augment == AugmentKind::none) {
    out.images = sub;
    out.labels = BatchLabels::from_hard(sub.labels);
    return out;
  }
  MixedBatch mixed = cfg.augment == AugmentKind::cutmix
                         ? cutmix(sub, num_classes, cfg.augment_beta, aug_rng)
                         : mixup(sub, num_classes, cfg.augment_beta, aug_rng);
  // Clean and augmented samples share one optimizer step.
  const size_t B = sub.batch;
  out.images = sub;
  out.images.batch = 2 * B;
  out.images.pixels.insert(out.images.pixels.end(), mixed.images.pixels.begin(),
                           mixed.images.pixels.end());
  out.images.labels.insert(out.images.labels.end(), mixed.images.labels.begin(),
                           mixed.images.labels.end());
  DenseMatrix soft(2 * B, num_classes);
  for (size_t b = 0; b < B; ++b) soft.at(b, sub.labels[b]) = 1.0;
  for (size_t b = 0; b < B; ++b)
    for (size_t c = 0; c < num_classes; ++c) soft.at(B + b, c) = mixed.soft_labels.at(b, c);
  out.labels = BatchLabels::from_soft(std::move(soft));
  return out;
}

// Ensemble of intact and pruned teacher, as probabilities at temperature T.
inline DenseMatrix teacher_distribution(const Network& teacher, const Network* pruned,
                                        const EnsembleConfig& ens, std::span<const float> x,
                                        size_t batch, double temperature) {
  DenseMatrix zt = forward(teacher, x, batch);
  DenseMatrix out(batch, zt.cols);
  if (pruned) {
    DenseMatrix zp = forward(*pruned, x, batch);
    for (size_t b = 0; b < batch; ++b) {
      ProbabilityVector pt = softmax(zt.row(b), temperature);
      ProbabilityVector pp = softmax(zp.row(b), temperature);
      std::vector<double> mix = ensemble_predict(pt.probs, pp.probs, ens);
      for (size_t c = 0; c < out.cols; ++c) out.at(b, c) = mix[c];
    }
  } else {
    for (size_t b = 0; b < batch; ++b) {
      ProbabilityVector pt = softmax(zt.row(b), temperature);
      for (size_t c = 0; c < out.cols; ++c) out.at(b, c) = pt.probs[c];
    }
  }
  return out;
}

inline TrainOutput run_training(const RunConfig& cfg, const DatasetBundle& data, Network student,
                                const Network* teacher, const Network* pruned,
                                const LossConfig& eff, const std::string& phase) {
  validate_run_config(cfg);
  const size_t N = data.train.batch;
  const size_t C = data.meta.num_classes;
  if (N < 2) throw std::invalid_argument(phase + ": train split too small");
  const bool use_teacher = teacher != nullptr && (eff.alpha > 0 || eff.beta > 0 || eff.kd_gamma > 0);
  const double t_prob_temp = teacher_prob_temperature(eff);
  const uint64_t teacher_hash_before = teacher ? network_hash(*teacher) : 0;

  SgdState sgd = make_sgd_state(student);
  MetricsLog log;
  RngStream shuffle_rng{cfg.seed, kStreamShuffle};
  RngStream augment_rng{cfg.seed, kStreamAugment};

  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = scheduled_lr(cfg.sgd, epoch);
    RngStream epoch_rng = shuffle_rng.child(epoch);
    std::vector<size_t> perm = epoch_rng.permutation(N);
    double sum_ce = 0.0, sum_value = 0.0, sum_rank = 0.0, sum_total = 0.0;
    size_t steps = 0;

    for (size_t start = 0, step = 0; start < N; start += cfg.batch, ++step) {
      const size_t n = std::min(cfg.batch, N - start);
      if (n < 2) break;  // augmentation and correlation both need pairs
      ImageBatch sub = gather(data.train, std::span<const size_t>(perm).subspan(start, n));
      StepBatch sb = assemble_step_batch(cfg, sub, C, augment_rng.child(epoch, step));
      const std::vector<float> x = standardize(sb.images, data.meta);

      ForwardCache cache;
      DenseMatrix logits = forward(student, x, sb.images.batch, &cache);
      if (!logits.all_finite())
        throw RunFailure(phase + ": non-finite activations at epoch " + std::to_string(epoch) +
                         " batch " + std::to_string(step));

      LossBreakdown loss;
      if (use_teacher) {
        DenseMatrix probs = teacher_distribution(*teacher, pruned, cfg.ensemble, x,
                                                 sb.images.batch, t_prob_temp);
        loss = r2kd_loss(logits, probs, sb.labels, eff);
      } else {
        loss = ce_loss(logits, sb.labels);
      }
      if (!std::isfinite(loss.total))
        throw RunFailure(phase + ": non-finite loss at epoch " + std::to_string(epoch) +
                         " batch " + std::to_string(step));

      Grads grads = backward(student, cache, loss.grad_student_logits);
      sgd_step(student, grads, lr, cfg.sgd.momentum, cfg.sgd.weight_decay, sgd);
      sum_ce += loss.l_ce;
      sum_value += loss.l_value;
      sum_rank += loss.l_rank;
      sum_total += loss.total;
      ++steps;
    }
    if (steps == 0) throw RunFailure(phase + ": no full step possible with batch " +
                                     std::to_string(cfg.batch));

    EvalResult ev = evaluate(student, data.test, data.meta);
    const auto t1 = std::chrono::steady_clock::now();
    EpochRow row;
    row.epoch = epoch;
    row.l_ce = sum_ce / static_cast<double>(steps);
    row.l_value = sum_value / static_cast<double>(steps);
    row.l_rank = sum_rank / static_cast<double>(steps);
    row.total = sum_total / static_cast<double>(steps);
    row.top1 = ev.top1;
    row.entropy = ev.mean_entropy;
    row.seconds = cfg.deterministic
                      ? 0.0
                      : std::chrono::duration<double>(t1 - t0).count();
    log.append(row);
  }

  if (teacher && network_hash(*teacher) != teacher_hash_before)
    throw InvalidStateError(phase + ": teacher parameters changed during the run");

  TrainOutput out;
  out.ckpt.net = std::move(student);
  out.ckpt.seed = cfg.seed;
  out.ckpt.epoch = cfg.epochs;
  out.ckpt.config_hash = to_hex64(config_hash(cfg));
  out.log = std::move(log);
  return out;
}

}  // namespace detail

inline Shape3 dataset_input_shape(const DatasetMeta& meta) {
  return Shape3{meta.channels, meta.height, meta.width};
}

// Plain cross-entropy pre-training of the teacher architecture. Augmentation
// is never applied here; distillation always starts from a clean-trained
// teacher.
inline TrainOutput train_teacher(const RunConfig& cfg, const DatasetBundle& data) {
  RunConfig tcfg = cfg;
  tcfg.method = Method::ce_only;
  tcfg.augment = AugmentKind::none;
  const Shape3 in = dataset_input_shape(data.meta);
  RngStream init{cfg.seed, kStreamTeacherInit};
  Network net = build_network(in, parse_arch(cfg.teacher_arch, in, data.meta.num_classes), init);
  LossConfig eff = effective_loss_config(tcfg);
  return detail::run_training(tcfg, data, std::move(net), nullptr, nullptr, eff, "teacher training");
}

inline TrainOutput train_teacher(const RunConfig& cfg) {
  DatasetBundle data = load_dataset(cfg);
  return train_teacher(cfg, data);
}

// Distills a student against the checkpointed teacher. The teacher and its
// magnitude-pruned copy run inference only; the student is the sole optimizer
// target.
inline TrainOutput distill(const RunConfig& cfg, const Checkpoint& teacher_ckpt,
                           const DatasetBundle& data) {
  const Shape3 in = dataset_input_shape(data.meta);
  if (!(teacher_ckpt.net.input_shape == in))
    throw std::invalid_argument("distill: teacher input shape does not match the dataset");
  if (teacher_ckpt.net.num_outputs() != data.meta.num_classes)
    throw std::invalid_argument("distill: teacher outputs " +
                                std::to_string(teacher_ckpt.net.num_outputs()) + " classes, dataset has " +
                                std::to_string(data.meta.num_classes));

  RngStream init{cfg.seed, kStreamStudentInit};
  Network student = build_network(in, parse_arch(cfg.student_arch, in, data.meta.num_classes), init);
  LossConfig eff = effective_loss_config(cfg);

  // The pruned-teacher ensemble belongs to the correlation method; the kd
  // baseline stays vanilla (intact teacher only).
  Network pruned;
  const Network* pruned_ptr = nullptr;
  if (cfg.ensemble_enabled && cfg.method == Method::r2kd) {
    auto [p, mask] = magnitude_prune(teacher_ckpt.net, cfg.prune);
    pruned = std::move(p);
    pruned_ptr = &pruned;
  }
  return detail::run_training(cfg, data, std::move(student), &teacher_ckpt.net, pruned_ptr, eff,
                              "distillation");
}

inline TrainOutput distill(const RunConfig& cfg, const Checkpoint& teacher_ckpt) {
  DatasetBundle data = load_dataset(cfg);
  return distill(cfg, teacher_ckpt, data);
}

}  // namespace r2kd

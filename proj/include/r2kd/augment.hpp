#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2kd/dataset.hpp"
#include "r2kd/numerics.hpp"
#include "r2kd/rng.hpp"

namespace r2kd {

// Mixed samples plus their soft labels. mix_lambda[i] is the weight of the
// original sample i; pair_index[i] names the partner whose content was
// blended in. Each soft label has at most two nonzero entries.
struct MixedBatch {
  ImageBatch images;
  DenseMatrix soft_labels;         // B x C
  std::vector<double> mix_lambda;  // in [0,1]
  std::vector<size_t> pair_index;
};

// Half-open pixel rectangle [y1,y2) x [x1,x2).
struct CutBox {
  size_t y1 = 0, x1 = 0, y2 = 0, x2 = 0;
  size_t area() const { return (y2 - y1) * (x2 - x1); }
};

// Box with side fractions sqrt(1 - raw_lambda) centered at (cy, cx), clipped
// to the image. The realized area can undershoot the nominal one at borders;
// callers recompute lambda from area().
inline CutBox make_cut_box(size_t h, size_t w, double raw_lambda, size_t cy, size_t cx) {
  if (cy >= h || cx >= w) throw std::invalid_argument("make_cut_box: center outside image");
  double frac = std::sqrt(std::max(0.0, 1.0 - raw_lambda));
  long long cut_h = static_cast<long long>(static_cast<double>(h) * frac);
  long long cut_w = static_cast<long long>(static_cast<double>(w) * frac);
  CutBox box;
  box.y1 = static_cast<size_t>(std::max(0LL, static_cast<long long>(cy) - cut_h / 2));
  box.y2 = static_cast<size_t>(std::min(static_cast<long long>(h),
                                        static_cast<long long>(cy) + (cut_h + 1) / 2));
  box.x1 = static_cast<size_t>(std::max(0LL, static_cast<long long>(cx) - cut_w / 2));
  box.x2 = static_cast<size_t>(std::min(static_cast<long long>(w),
                                        static_cast<long long>(cx) + (cut_w + 1) / 2));
  if (box.y2 < box.y1) box.y2 = box.y1;
  if (box.x2 < box.x1) box.x2 = box.x1;
  return box;
}

namespace detail {

inline void validate_mix_args(const ImageBatch& batch, size_t num_classes, double beta_a) {
  if (batch.batch < 2) throw std::invalid_argument("augmentation: batch must have at least 2 samples");
  if (!(beta_a > 0.0)) throw std::invalid_argument("augmentation: beta parameter must be positive");
  if (num_classes < 2) throw std::invalid_argument("augmentation: needs at least 2 classes");
  for (size_t b = 0; b < batch.batch; ++b)
    if (batch.labels[b] >= num_classes)
      throw std::invalid_argument("augmentation: label " + std::to_string(batch.labels[b]) +
                                  " out of range at sample " + std::to_string(b));
}

inline MixedBatch init_mixed(const ImageBatch& batch, size_t num_classes) {
  MixedBatch out;
  out.images = batch;
  out.soft_labels = DenseMatrix(batch.batch, num_classes);
  out.mix_lambda.assign(batch.batch, 1.0);
  out.pair_index.assign(batch.batch, 0);
  return out;
}

inline void set_soft_label(MixedBatch& out, size_t b, size_t label_a, size_t label_b, double lam) {
  out.soft_labels.at(b, label_a) += lam;
  out.soft_labels.at(b, label_b) += 1.0 - lam;
}

}  // namespace detail

// Splices a partner rectangle into each image. Partners come from one random
// permutation; per-sample randomness (raw lambda, box center) comes from child
// streams keyed on the sample index so results are order-independent. The
// stored lambda is recomputed from the clipped box area.
inline MixedBatch cutmix(const ImageBatch& batch, size_t num_classes, double beta_a,
                         RngStream& rng) {
  detail::validate_mix_args(batch, num_classes, beta_a);
  MixedBatch out = detail::init_mixed(batch, num_classes);
  const size_t plane = batch.height * batch.width;
  std::vector<size_t> partner = rng.permutation(batch.batch);

  for (size_t b = 0; b < batch.batch; ++b) {
    const size_t j = partner[b];
    out.pair_index[b] = j;
    RngStream local = rng.child(b);
    double raw = local.beta(beta_a, beta_a);
    size_t cy = local.below(batch.height);
    size_t cx = local.below(batch.width);
    CutBox box = make_cut_box(batch.height, batch.width, raw, cy, cx);

    std::span<const float> src = batch.image(j);
    std::span<float> dst = out.images.image(b);
    for (size_t c = 0; c < batch.channels; ++c)
      for (size_t y = box.y1; y < box.y2; ++y)
        for (size_t x = box.x1; x < box.x2; ++x)
          dst[c * plane + y * batch.width + x] = src[c * plane + y * batch.width + x];

    double lam = 1.0 - static_cast<double>(box.area()) / static_cast<double>(plane);
    out.mix_lambda[b] = lam;
    detail::set_soft_label(out, b, batch.labels[b], batch.labels[j], lam);
  }
  return out;
}

// Elementwise convex blend x = lam * x_i + (1 - lam) * x_j with the label
// mixed by the same lambda.
inline MixedBatch mixup(const ImageBatch& batch, size_t num_classes, double beta_a,
                        RngStream& rng) {
  detail::validate_mix_args(batch, num_classes, beta_a);
  MixedBatch out = detail::init_mixed(batch, num_classes);
  std::vector<size_t> partner = rng.permutation(batch.batch);

  for (size_t b = 0; b < batch.batch; ++b) {
    const size_t j = partner[b];
    out.pair_index[b] = j;
    RngStream local = rng.child(b);
    double lam = local.beta(beta_a, beta_a);
    out.mix_lambda[b] = lam;

    std::span<const float> src = batch.image(j);
    std::span<float> dst = out.images.image(b);
    const float lf = static_cast<float>(lam);
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = lf * dst[i] + (1.0f - lf) * src[i];
    detail::set_soft_label(out, b, batch.labels[b], batch.labels[j], lam);
  }
  return out;
}

}  // namespace r2kd

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <set>
#include <vector>

#include "r2kd/augment.hpp"
#include "r2kd/rng.hpp"

using namespace r2kd;

namespace {

// Small batch with constant-valued images so pixel provenance is readable:
// every pixel of sample b equals (b+1)/10.
ImageBatch constant_batch(size_t batch, size_t channels, size_t h, size_t w, size_t num_classes) {
  ImageBatch out;
  out.batch = batch;
  out.channels = channels;
  out.height = h;
  out.width = w;
  out.pixels.resize(batch * channels * h * w);
  out.labels.resize(batch);
  for (size_t b = 0; b < batch; ++b) {
    out.labels[b] = b % num_classes;
    for (auto& p : out.image(b)) p = static_cast<float>(b + 1) / 10.0f;
  }
  return out;
}

ImageBatch random_batch(size_t batch, size_t channels, size_t h, size_t w, size_t num_classes,
                        uint64_t seed) {
  ImageBatch out = constant_batch(batch, channels, h, w, num_classes);
  RngStream rng{seed, 0};
  for (auto& p : out.pixels) p = static_cast<float>(rng.uniform());
  for (size_t b = 0; b < batch; ++b) out.labels[b] = rng.below(num_classes);
  return out;
}

}  // namespace

TEST_CASE("cut box geometry") {
  SECTION("raw lambda 1 selects nothing") {
    CutBox box = make_cut_box(8, 8, 1.0, 4, 4);
    CHECK(box.area() == 0);
  }
  SECTION("raw lambda 0 selects everything when centered") {
    CutBox box = make_cut_box(8, 8, 0.0, 4, 4);
    CHECK(box.area() == 64);
  }
  SECTION("quarter-area box on 8x8") {
    // sqrt(1 - 0.75) = 0.5 -> side 4; centered at (4,4) gives [2,6) x [2,6).
    CutBox box = make_cut_box(8, 8, 0.75, 4, 4);
    CHECK(box.y1 == 2);
    CHECK(box.y2 == 6);
    CHECK(box.x1 == 2);
    CHECK(box.x2 == 6);
    CHECK(box.area() == 16);
  }
  SECTION("clipping at the border shrinks the box") {
    CutBox box = make_cut_box(8, 8, 0.75, 0, 0);
    CHECK(box.y1 == 0);
    CHECK(box.y2 == 2);  // cy + (cut+1)/2
    CHECK(box.area() < 16);
  }
  SECTION("center outside image throws") {
    CHECK_THROWS_AS(make_cut_box(8, 8, 0.5, 8, 0), std::invalid_argument);
  }
}

TEST_CASE("cutmix is deterministic under the same stream") {
  ImageBatch batch = random_batch(12, 3, 8, 8, 5, 41);
  RngStream a{777, 3};
  RngStream b{777, 3};
  MixedBatch ma = cutmix(batch, 5, 1.0, a);
  MixedBatch mb = cutmix(batch, 5, 1.0, b);
  REQUIRE(ma.images.pixels == mb.images.pixels);
  REQUIRE(ma.soft_labels.data == mb.soft_labels.data);
  REQUIRE(ma.mix_lambda == mb.mix_lambda);
  REQUIRE(ma.pair_index == mb.pair_index);

  RngStream c{778, 3};
  MixedBatch mc = cutmix(batch, 5, 1.0, c);
  CHECK(mc.images.pixels != ma.images.pixels);
}

TEST_CASE("cutmix pixels come from exactly the sample or its partner") {
  ImageBatch batch = constant_batch(6, 2, 8, 8, 4);
  RngStream rng{99, 0};
  MixedBatch mixed = cutmix(batch, 4, 1.0, rng);
  const size_t plane = batch.height * batch.width;

  for (size_t b = 0; b < batch.batch; ++b) {
    const size_t j = mixed.pair_index[b];
    const float own = static_cast<float>(b + 1) / 10.0f;
    const float other = static_cast<float>(j + 1) / 10.0f;
    size_t own_count = 0;
    auto img = mixed.images.image(b);
    // The spliced region must be channel-consistent: pixel (y,x) has the same
    // provenance in every plane.
    for (size_t i = 0; i < plane; ++i) {
      bool is_own = img[i] == own;
      bool is_other = img[i] == other;
      REQUIRE((is_own || is_other));
      for (size_t c = 1; c < batch.channels; ++c) REQUIRE(img[c * plane + i] == img[i]);
      own_count += is_own;
    }
    // Stored lambda equals the fraction of own pixels (b == j makes both
    // readings identical, so only check distinct pairs).
    if (own != other) {
      double lam = static_cast<double>(own_count) / static_cast<double>(plane);
      REQUIRE(mixed.mix_lambda[b] == Catch::Approx(lam).margin(1e-12));
    }
  }
}

TEST_CASE("cutmix soft labels are two-point distributions") {
  ImageBatch batch = random_batch(16, 1, 8, 8, 6, 17);
  RngStream rng{5, 0};
  MixedBatch mixed = cutmix(batch, 6, 1.0, rng);
  REQUIRE(mixed.soft_labels.rows == 16);
  REQUIRE(mixed.soft_labels.cols == 6);
  for (size_t b = 0; b < 16; ++b) {
    double sum = 0.0;
    size_t nonzero = 0;
    for (size_t c = 0; c < 6; ++c) {
      double v = mixed.soft_labels.at(b, c);
      REQUIRE(v >= 0.0);
      sum += v;
      nonzero += (v > 0.0);
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(nonzero <= 2);
    const size_t j = mixed.pair_index[b];
    const double lam = mixed.mix_lambda[b];
    if (batch.labels[b] == batch.labels[j]) {
      CHECK(mixed.soft_labels.at(b, batch.labels[b]) == Catch::Approx(1.0).margin(1e-12));
    } else {
      CHECK(mixed.soft_labels.at(b, batch.labels[b]) == Catch::Approx(lam).margin(1e-12));
      CHECK(mixed.soft_labels.at(b, batch.labels[j]) == Catch::Approx(1.0 - lam).margin(1e-12));
    }
  }
}

TEST_CASE("cutmix preserves the pixel range and the input batch") {
  ImageBatch batch = random_batch(10, 3, 8, 8, 4, 23);
  ImageBatch before = batch;
  RngStream rng{31, 0};
  MixedBatch mixed = cutmix(batch, 4, 1.0, rng);
  CHECK(batch.pixels == before.pixels);  // input untouched
  for (float p : mixed.images.pixels) {
    REQUIRE(p >= 0.0f);
    REQUIRE(p <= 1.0f);
  }
  for (double l : mixed.mix_lambda) {
    REQUIRE(l >= 0.0);
    REQUIRE(l <= 1.0);
  }
}

TEST_CASE("mixup blends each sample with its recorded partner and lambda") {
  ImageBatch batch = random_batch(8, 1, 4, 4, 3, 67);
  RngStream rng{13, 2};
  MixedBatch mixed = mixup(batch, 3, 0.7, rng);
  for (size_t b = 0; b < batch.batch; ++b) {
    const size_t j = mixed.pair_index[b];
    const float lam = static_cast<float>(mixed.mix_lambda[b]);
    auto own = batch.image(b);
    auto src = batch.image(j);
    auto got = mixed.images.image(b);
    for (size_t i = 0; i < got.size(); ++i) {
      float expect = lam * own[i] + (1.0f - lam) * src[i];
      REQUIRE(got[i] == Catch::Approx(expect).margin(1e-6));
    }
  }
}

TEST_CASE("mixup is deterministic and labels mirror the pixel weights") {
  ImageBatch batch = random_batch(9, 2, 4, 4, 4, 3);
  RngStream a{1, 1};
  RngStream b{1, 1};
  MixedBatch ma = mixup(batch, 4, 1.0, a);
  MixedBatch mb = mixup(batch, 4, 1.0, b);
  REQUIRE(ma.images.pixels == mb.images.pixels);
  REQUIRE(ma.soft_labels.data == mb.soft_labels.data);
  for (size_t i = 0; i < ma.mix_lambda.size(); ++i) {
    const size_t j = ma.pair_index[i];
    if (batch.labels[i] != batch.labels[j])
      CHECK(ma.soft_labels.at(i, batch.labels[i]) ==
            Catch::Approx(ma.mix_lambda[i]).margin(1e-12));
  }
}

TEST_CASE("partner assignment is a permutation") {
  ImageBatch batch = random_batch(32, 1, 4, 4, 5, 11);
  RngStream rng{400, 0};
  MixedBatch mixed = cutmix(batch, 5, 1.0, rng);
  std::set<size_t> seen(mixed.pair_index.begin(), mixed.pair_index.end());
  REQUIRE(seen.size() == 32);
  REQUIRE(*seen.begin() == 0);
  REQUIRE(*seen.rbegin() == 31);
}

TEST_CASE("augmentation argument validation") {
  ImageBatch one = constant_batch(1, 1, 4, 4, 2);
  RngStream rng{0, 0};
  CHECK_THROWS_AS(cutmix(one, 2, 1.0, rng), std::invalid_argument);

  ImageBatch two = constant_batch(2, 1, 4, 4, 2);
  CHECK_THROWS_AS(cutmix(two, 2, 0.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(cutmix(two, 2, -1.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(mixup(two, 1, 1.0, rng), std::invalid_argument);

  ImageBatch bad_label = constant_batch(4, 1, 4, 4, 4);
  bad_label.labels[2] = 9;
  CHECK_THROWS_AS(cutmix(bad_label, 4, 1.0, rng), std::invalid_argument);
}

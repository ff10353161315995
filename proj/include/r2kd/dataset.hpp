#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r2kd/errors.hpp"
#include "r2kd/rng.hpp"

namespace r2kd {

// Planar B x channels x H x W pixel block plus hard labels. Image datasets
// keep pixels in [0,1]; synthetic feature data reuses the container without
// that range guarantee.
struct ImageBatch {
  size_t batch = 0;
  size_t channels = 0;
  size_t height = 0;
  size_t width = 0;
  std::vector<float> pixels;
  std::vector<size_t> labels;

  size_t sample_size() const { return channels * height * width; }
  std::span<float> image(size_t b) { return {pixels.data() + b * sample_size(), sample_size()}; }
  std::span<const float> image(size_t b) const {
    return {pixels.data() + b * sample_size(), sample_size()};
  }
};

struct DatasetMeta {
  std::string name;
  size_t num_classes = 0;
  size_t channels = 0;
  size_t height = 0;
  size_t width = 0;
  size_t train_count = 0;
  size_t test_count = 0;
  // Per-channel standardization statistics from the training split; teacher
  // and student must see identical preprocessing.
  std::vector<double> channel_mean;
  std::vector<double> channel_std;
};

// ---------------------------------------------------------------------------
// CIFAR binary parsing
// ---------------------------------------------------------------------------

enum class CifarVariant { cifar10, cifar100 };

constexpr size_t kCifarPixelBytes = 3072;  // 3 planes of 32x32
constexpr size_t kCifarSide = 32;

inline size_t cifar_record_bytes(CifarVariant v) {
  return v == CifarVariant::cifar10 ? 1 + kCifarPixelBytes : 2 + kCifarPixelBytes;
}

inline size_t cifar_class_count(CifarVariant v) {
  return v == CifarVariant::cifar10 ? 10 : 100;
}

inline DatasetMeta cifar_meta(CifarVariant v) {
  DatasetMeta m;
  m.name = v == CifarVariant::cifar10 ? "cifar10" : "cifar100";
  m.num_classes = cifar_class_count(v);
  m.channels = 3;
  m.height = kCifarSide;
  m.width = kCifarSide;
  return m;
}

namespace detail {

// Decodes one raw record into pixels/label. record points at the label
// byte(s); base_offset is the record's position in the file for error text.
inline size_t decode_cifar_record(const unsigned char* record, CifarVariant v, size_t record_index,
                                  long long base_offset, std::span<float> pixels_out) {
  size_t label;
  size_t skip;
  if (v == CifarVariant::cifar10) {
    label = record[0];
    skip = 1;
    if (label >= 10)
      throw FormatError("cifar10 label " + std::to_string(label) + " out of range [0,10) at record " +
                            std::to_string(record_index),
                        base_offset);
  } else {
    size_t coarse = record[0];
    label = record[1];
    skip = 2;
    if (coarse >= 20)
      throw FormatError("cifar100 coarse label " + std::to_string(coarse) +
                            " out of range [0,20) at record " + std::to_string(record_index),
                        base_offset);
    if (label >= 100)
      throw FormatError("cifar100 fine label " + std::to_string(label) +
                            " out of range [0,100) at record " + std::to_string(record_index),
                        base_offset + 1);
  }
  for (size_t i = 0; i < kCifarPixelBytes; ++i)
    pixels_out[i] = static_cast<float>(record[skip + i]) / 255.0f;
  return label;
}

}  // namespace detail

// Sequential record reader. Validates the file size up front and each label
// as it streams; every malformed input surfaces as a FormatError.
class CifarReader {
 public:
  CifarReader(const std::string& path, CifarVariant variant)
      : path_(path), variant_(variant), in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open " + path);
    in_.seekg(0, std::ios::end);
    long long size = static_cast<long long>(in_.tellg());
    in_.seekg(0, std::ios::beg);
    const long long rec = static_cast<long long>(cifar_record_bytes(variant));
    if (size == 0) throw FormatError(path + ": empty file (0 records, at least 1 expected)");
    if (size % rec != 0)
      throw FormatError(path + ": size " + std::to_string(size) + " is not a multiple of the " +
                            std::to_string(rec) + "-byte record length (" +
                            std::to_string(size % rec) + " trailing bytes)",
                        (size / rec) * rec);
    count_ = static_cast<size_t>(size / rec);
  }

  size_t record_count() const { return count_; }
  size_t records_read() const { return read_; }

  // Fills one record; returns false at end of stream.
  bool next(std::span<float> pixels_out, size_t& label_out) {
    if (read_ == count_) return false;
    const size_t rec = cifar_record_bytes(variant_);
    std::vector<unsigned char> buf(rec);
    if (!in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(rec)))
      throw FormatError(path_ + ": read failed at record " + std::to_string(read_),
                        static_cast<long long>(read_ * rec));
    label_out = detail::decode_cifar_record(buf.data(), variant_, read_,
                                            static_cast<long long>(read_ * rec), pixels_out);
    ++read_;
    return true;
  }

 private:
  std::string path_;
  CifarVariant variant_;
  std::ifstream in_;
  size_t count_ = 0;
  size_t read_ = 0;
};

// Streaming load: one record at a time through CifarReader.
inline ImageBatch load_cifar_streaming(const std::string& path, CifarVariant variant) {
  CifarReader reader(path, variant);
  ImageBatch out;
  out.batch = reader.record_count();
  out.channels = 3;
  out.height = kCifarSide;
  out.width = kCifarSide;
  out.pixels.resize(out.batch * kCifarPixelBytes);
  out.labels.resize(out.batch);
  size_t label = 0;
  for (size_t r = 0; r < out.batch; ++r) {
    if (!reader.next(out.image(r), label))
      throw FormatError(path + ": stream ended early at record " + std::to_string(r));
    out.labels[r] = label;
  }
  return out;
}

// Whole-file load: slurps the file and decodes in place. Kept as a separate
// code path so the streaming/whole-file equivalence is a real check.
inline ImageBatch load_cifar_file(const std::string& path, CifarVariant variant) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const size_t rec = cifar_record_bytes(variant);
  if (bytes.empty()) throw FormatError(path + ": empty file (0 records, at least 1 expected)");
  if (bytes.size() % rec != 0)
    throw FormatError(path + ": size " + std::to_string(bytes.size()) +
                          " is not a multiple of the " + std::to_string(rec) +
                          "-byte record length (" + std::to_string(bytes.size() % rec) +
                          " trailing bytes)",
                      static_cast<long long>((bytes.size() / rec) * rec));
  ImageBatch out;
  out.batch = bytes.size() / rec;
  out.channels = 3;
  out.height = kCifarSide;
  out.width = kCifarSide;
  out.pixels.resize(out.batch * kCifarPixelBytes);
  out.labels.resize(out.batch);
  for (size_t r = 0; r < out.batch; ++r) {
    out.labels[r] = detail::decode_cifar_record(bytes.data() + r * rec, variant, r,
                                                static_cast<long long>(r * rec), out.image(r));
  }
  return out;
}

// Concatenates several batch files (CIFAR-10 ships its training set in five).
inline ImageBatch load_cifar_files(const std::vector<std::string>& paths, CifarVariant variant) {
  if (paths.empty()) throw std::invalid_argument("load_cifar_files: no paths given");
  ImageBatch all;
  for (const auto& p : paths) {
    ImageBatch part = load_cifar_file(p, variant);
    if (all.batch == 0) {
      all = std::move(part);
    } else {
      all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
      all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
      all.batch += part.batch;
    }
  }
  return all;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs
// ---------------------------------------------------------------------------

struct BlobSpec {
  size_t num_classes = 0;
  size_t dim = 0;
  std::vector<std::vector<double>> means;  // one length-dim vector per class
  double sigma = 1.0;                      // shared isotropic scale
  size_t per_class = 0;
  uint64_t seed = 0;
};

inline void validate_blob_spec(const BlobSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("blob spec: needs at least 2 classes");
  if (spec.dim == 0) throw std::invalid_argument("blob spec: zero dimension");
  if (spec.per_class == 0) throw std::invalid_argument("blob spec: zero samples per class");
  if (!(spec.sigma > 0.0)) throw std::invalid_argument("blob spec: sigma must be positive");
  if (spec.means.size() != spec.num_classes)
    throw std::invalid_argument("blob spec: one mean vector per class required");
  for (const auto& m : spec.means)
    if (m.size() != spec.dim) throw std::invalid_argument("blob spec: mean dimension mismatch");
  for (size_t a = 0; a < spec.means.size(); ++a)
    for (size_t b = a + 1; b < spec.means.size(); ++b)
      if (spec.means[a] == spec.means[b])
        throw std::invalid_argument("blob spec: class means must be pairwise distinct");
}

// Most-square factorization of dim as H x W (single channel), so the blob
// features can flow through image-shaped ops.
inline std::pair<size_t, size_t> blob_shape(size_t dim) {
  for (size_t h = static_cast<size_t>(std::sqrt(static_cast<double>(dim))); h >= 1; --h)
    if (dim % h == 0) return {h, dim / h};
  return {1, dim};
}

// Random class means in [-mean_scale, mean_scale]^dim, derived from the seed.
inline BlobSpec make_blob_spec(size_t classes, size_t dim, size_t per_class, double sigma,
                               double mean_scale, uint64_t seed) {
  BlobSpec spec;
  spec.num_classes = classes;
  spec.dim = dim;
  spec.sigma = sigma;
  spec.per_class = per_class;
  spec.seed = seed;
  RngStream means_rng = RngStream{seed, 0}.child(0x6d65616e);  // independent of sampling stream
  spec.means.resize(classes);
  for (size_t c = 0; c < classes; ++c) {
    spec.means[c].resize(dim);
    for (size_t d = 0; d < dim; ++d)
      spec.means[c][d] = (means_rng.uniform() * 2.0 - 1.0) * mean_scale;
  }
  validate_blob_spec(spec);
  return spec;
}

inline std::pair<ImageBatch, DatasetMeta> gen_blobs(const BlobSpec& spec) {
  validate_blob_spec(spec);
  auto [h, w] = blob_shape(spec.dim);
  ImageBatch out;
  out.batch = spec.num_classes * spec.per_class;
  out.channels = 1;
  out.height = h;
  out.width = w;
  out.pixels.resize(out.batch * spec.dim);
  out.labels.resize(out.batch);
  RngStream rng{spec.seed, 1};
  size_t b = 0;
  for (size_t c = 0; c < spec.num_classes; ++c) {
    for (size_t s = 0; s < spec.per_class; ++s, ++b) {
      out.labels[b] = c;
      std::span<float> img = out.image(b);
      for (size_t d = 0; d < spec.dim; ++d)
        img[d] = static_cast<float>(spec.means[c][d] + spec.sigma * rng.normal());
    }
  }
  DatasetMeta meta;
  meta.name = "blobs";
  meta.num_classes = spec.num_classes;
  meta.channels = 1;
  meta.height = h;
  meta.width = w;
  return {std::move(out), meta};
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

inline void set_channel_stats(DatasetMeta& meta, const ImageBatch& train) {
  if (train.batch == 0) throw std::invalid_argument("set_channel_stats: empty batch");
  const size_t plane = train.height * train.width;
  meta.channel_mean.assign(train.channels, 0.0);
  meta.channel_std.assign(train.channels, 0.0);
  const double n = static_cast<double>(train.batch * plane);
  for (size_t b = 0; b < train.batch; ++b) {
    std::span<const float> img = train.image(b);
    for (size_t c = 0; c < train.channels; ++c)
      for (size_t i = 0; i < plane; ++i) meta.channel_mean[c] += img[c * plane + i];
  }
  for (auto& m : meta.channel_mean) m /= n;
  for (size_t b = 0; b < train.batch; ++b) {
    std::span<const float> img = train.image(b);
    for (size_t c = 0; c < train.channels; ++c)
      for (size_t i = 0; i < plane; ++i) {
        double d = img[c * plane + i] - meta.channel_mean[c];
        meta.channel_std[c] += d * d;
      }
  }
  for (auto& s : meta.channel_std) s = std::max(std::sqrt(s / n), 1e-6);
}

// (x - mean_c) / std_c, flattened B x sample_size floats ready for a network.
inline std::vector<float> standardize(const ImageBatch& batch, const DatasetMeta& meta) {
  if (meta.channel_mean.size() != batch.channels || meta.channel_std.size() != batch.channels)
    throw std::invalid_argument("standardize: meta stats missing or channel mismatch");
  const size_t plane = batch.height * batch.width;
  std::vector<float> out(batch.pixels.size());
  for (size_t b = 0; b < batch.batch; ++b) {
    std::span<const float> img = batch.image(b);
    float* dst = out.data() + b * batch.sample_size();
    for (size_t c = 0; c < batch.channels; ++c) {
      const float m = static_cast<float>(meta.channel_mean[c]);
      const float inv = static_cast<float>(1.0 / meta.channel_std[c]);
      for (size_t i = 0; i < plane; ++i) dst[c * plane + i] = (img[c * plane + i] - m) * inv;
    }
  }
  return out;
}

}  // namespace r2kd

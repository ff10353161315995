#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r2kd/errors.hpp"
#include "r2kd/numerics.hpp"
#include "r2kd/rng.hpp"

namespace r2kd {

enum class LayerKind { dense, conv3x3, relu, maxpool2, flatten };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  size_t in_dim = 0, out_dim = 0;  // dense
  size_t in_ch = 0, out_ch = 0;    // conv3x3

  bool parametric() const { return kind == LayerKind::dense || kind == LayerKind::conv3x3; }
};

struct Shape3 {
  size_t ch = 0, h = 0, w = 0;
  size_t flat() const { return ch * h * w; }
  bool operator==(const Shape3&) const = default;
};

inline std::string layer_to_string(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::dense:
      return "dense:" + std::to_string(l.in_dim) + ":" + std::to_string(l.out_dim);
    case LayerKind::conv3x3:
      return "conv3x3:" + std::to_string(l.in_ch) + ":" + std::to_string(l.out_ch);
    case LayerKind::relu:
      return "relu";
    case LayerKind::maxpool2:
      return "maxpool2";
    case LayerKind::flatten:
      return "flatten";
  }
  throw InvalidStateError("layer_to_string: unreachable kind");
}

inline LayerSpec layer_from_string(const std::string& s) {
  LayerSpec l;
  if (s == "relu") {
    l.kind = LayerKind::relu;
    return l;
  }
  if (s == "maxpool2") {
    l.kind = LayerKind::maxpool2;
    return l;
  }
  if (s == "flatten") {
    l.kind = LayerKind::flatten;
    return l;
  }
  auto parse_two = [&](const std::string& name) -> std::pair<size_t, size_t> {
    std::string rest = s.substr(name.size() + 1);
    size_t colon = rest.find(':');
    if (colon == std::string::npos)
      throw FormatError("layer spec '" + s + "': expected " + name + ":<in>:<out>");
    try {
      return {std::stoull(rest.substr(0, colon)), std::stoull(rest.substr(colon + 1))};
    } catch (const std::exception&) {
      throw FormatError("layer spec '" + s + "': bad integer field");
    }
  };
  if (s.rfind("dense:", 0) == 0) {
    l.kind = LayerKind::dense;
    std::tie(l.in_dim, l.out_dim) = parse_two("dense");
    if (l.in_dim == 0 || l.out_dim == 0) throw FormatError("layer spec '" + s + "': zero dimension");
    return l;
  }
  if (s.rfind("conv3x3:", 0) == 0) {
    l.kind = LayerKind::conv3x3;
    std::tie(l.in_ch, l.out_ch) = parse_two("conv3x3");
    if (l.in_ch == 0 || l.out_ch == 0) throw FormatError("layer spec '" + s + "': zero channels");
    return l;
  }
  throw FormatError("layer spec '" + s + "': unknown kind");
}

namespace detail {
inline uint64_t next_net_uid() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1);
}
}  // namespace detail

// Feedforward network with 32-bit parameters. Copies share identity until
// mutated; any parameter mutation must go through bump()/reassign so cached
// forward activations can be detected as stale.
struct Network {
  Shape3 input_shape;
  std::vector<LayerSpec> layers;
  std::vector<Shape3> shapes;                // shapes[i] = input of layer i; back() = output
  std::vector<std::vector<float>> weights;   // empty vector for non-parametric layers
  std::vector<std::vector<float>> biases;
  uint64_t uid = 0;
  uint64_t revision = 0;

  size_t num_outputs() const { return shapes.back().flat(); }
  size_t param_count() const {
    size_t n = 0;
    for (const auto& w : weights) n += w.size();
    for (const auto& b : biases) n += b.size();
    return n;
  }
  size_t weight_count() const {
    size_t n = 0;
    for (const auto& w : weights) n += w.size();
    return n;
  }
  void bump() { ++revision; }
  void assign_new_uid() {
    uid = detail::next_net_uid();
    revision = 0;
  }
  bool all_finite() const {
    for (const auto& w : weights)
      for (float v : w)
        if (!std::isfinite(v)) return false;
    for (const auto& b : biases)
      for (float v : b)
        if (!std::isfinite(v)) return false;
    return true;
  }
};

// Validates layer composition and returns the per-layer input shapes plus the
// final output shape (result has layers.size()+1 entries).
inline std::vector<Shape3> propagate_shapes(Shape3 input, const std::vector<LayerSpec>& layers) {
  if (layers.empty()) throw std::invalid_argument("network: needs at least one layer");
  if (input.flat() == 0) throw std::invalid_argument("network: empty input shape");
  std::vector<Shape3> shapes;
  shapes.push_back(input);
  Shape3 cur = input;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::dense:
        if (l.in_dim != cur.flat())
          throw std::invalid_argument("network: dense layer " + std::to_string(i) + " expects " +
                                      std::to_string(l.in_dim) + " inputs, got " +
                                      std::to_string(cur.flat()));
        cur = {l.out_dim, 1, 1};
        break;
      case LayerKind::conv3x3:
        if (l.in_ch != cur.ch)
          throw std::invalid_argument("network: conv layer " + std::to_string(i) + " expects " +
                                      std::to_string(l.in_ch) + " channels, got " +
                                      std::to_string(cur.ch));
        if (cur.h == 0 || cur.w == 0)
          throw std::invalid_argument("network: conv layer " + std::to_string(i) + " on empty grid");
        cur = {l.out_ch, cur.h, cur.w};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool2:
        if (cur.h % 2 != 0 || cur.w % 2 != 0)
          throw std::invalid_argument("network: maxpool2 layer " + std::to_string(i) +
                                      " needs even spatial dims, got " + std::to_string(cur.h) +
                                      "x" + std::to_string(cur.w));
        cur = {cur.ch, cur.h / 2, cur.w / 2};
        break;
      case LayerKind::flatten:
        cur = {cur.flat(), 1, 1};
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero.
inline Network build_network(Shape3 input, const std::vector<LayerSpec>& layers, RngStream rng) {
  Network net;
  net.input_shape = input;
  net.layers = layers;
  net.shapes = propagate_shapes(input, layers);
  net.weights.resize(layers.size());
  net.biases.resize(layers.size());
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (!l.parametric()) continue;
    RngStream lr = rng.child(i);
    size_t fan_in, wn, bn;
    if (l.kind == LayerKind::dense) {
      fan_in = l.in_dim;
      wn = l.out_dim * l.in_dim;
      bn = l.out_dim;
    } else {
      fan_in = l.in_ch * 9;
      wn = l.out_ch * l.in_ch * 9;
      bn = l.out_ch;
    }
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    net.weights[i].resize(wn);
    for (auto& w : net.weights[i]) w = static_cast<float>((lr.uniform() * 2.0 - 1.0) * limit);
    net.biases[i].assign(bn, 0.0f);
  }
  net.assign_new_uid();
  return net;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ForwardCache {
  size_t batch = 0;
  uint64_t net_uid = 0;
  uint64_t net_revision = 0;
  std::vector<std::vector<float>> acts;            // acts[i] = input to layer i; acts[L] = logits
  std::vector<std::vector<uint32_t>> pool_argmax;  // per maxpool layer, flat source indices
};

namespace detail {

inline void dense_forward(const LayerSpec& l, const float* w, const float* b, const float* x,
                          float* y) {
  for (size_t o = 0; o < l.out_dim; ++o) {
    double acc = b[o];
    const float* wrow = w + o * l.in_dim;
    for (size_t i = 0; i < l.in_dim; ++i) acc += static_cast<double>(wrow[i]) * x[i];
    y[o] = static_cast<float>(acc);
  }
}

inline void conv3x3_forward(const LayerSpec& l, Shape3 in, const float* w, const float* b,
                            const float* x, float* y) {
  const size_t H = in.h, W = in.w;
  for (size_t oc = 0; oc < l.out_ch; ++oc) {
    for (size_t iy = 0; iy < H; ++iy) {
      for (size_t ix = 0; ix < W; ++ix) {
        double acc = b[oc];
        for (size_t ic = 0; ic < l.in_ch; ++ic) {
          const float* plane = x + ic * H * W;
          const float* kern = w + ((oc * l.in_ch + ic) * 9);
          for (int dy = -1; dy <= 1; ++dy) {
            long long sy = static_cast<long long>(iy) + dy;
            if (sy < 0 || sy >= static_cast<long long>(H)) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              long long sx = static_cast<long long>(ix) + dx;
              if (sx < 0 || sx >= static_cast<long long>(W)) continue;
              acc += static_cast<double>(kern[(dy + 1) * 3 + (dx + 1)]) *
                     plane[static_cast<size_t>(sy) * W + static_cast<size_t>(sx)];
            }
          }
        }
        y[(oc * H + iy) * W + ix] = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace detail

// Runs the network on a flattened B x input_flat block. When cache is given
// it is filled with everything backward needs.
inline DenseMatrix forward(const Network& net, std::span<const float> input, size_t batch,
                           ForwardCache* cache = nullptr) {
  const size_t in_flat = net.input_shape.flat();
  if (batch == 0) throw std::invalid_argument("forward: empty batch");
  if (input.size() != batch * in_flat)
    throw std::invalid_argument("forward: input size " + std::to_string(input.size()) +
                                " does not match batch " + std::to_string(batch) + " x " +
                                std::to_string(in_flat));
  const size_t L = net.layers.size();
  std::vector<std::vector<float>> acts(L + 1);
  std::vector<std::vector<uint32_t>> pool_argmax(L);
  acts[0].assign(input.begin(), input.end());

  for (size_t li = 0; li < L; ++li) {
    const LayerSpec& l = net.layers[li];
    const Shape3 in_shape = net.shapes[li];
    const Shape3 out_shape = net.shapes[li + 1];
    const size_t in_f = in_shape.flat(), out_f = out_shape.flat();
    acts[li + 1].resize(batch * out_f);
    if (l.kind == LayerKind::maxpool2) pool_argmax[li].resize(batch * out_f);

    for (size_t bI = 0; bI < batch; ++bI) {
      const float* x = acts[li].data() + bI * in_f;
      float* y = acts[li + 1].data() + bI * out_f;
      switch (l.kind) {
        case LayerKind::dense:
          detail::dense_forward(l, net.weights[li].data(), net.biases[li].data(), x, y);
          break;
        case LayerKind::conv3x3:
          detail::conv3x3_forward(l, in_shape, net.weights[li].data(), net.biases[li].data(), x, y);
          break;
        case LayerKind::relu:
          for (size_t i = 0; i < in_f; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
          break;
        case LayerKind::maxpool2: {
          const size_t H = in_shape.h, W = in_shape.w, OH = out_shape.h, OW = out_shape.w;
          uint32_t* am = pool_argmax[li].data() + bI * out_f;
          for (size_t c = 0; c < in_shape.ch; ++c) {
            for (size_t oy = 0; oy < OH; ++oy) {
              for (size_t ox = 0; ox < OW; ++ox) {
                size_t best = (c * H + 2 * oy) * W + 2 * ox;
                float bv = x[best];
                for (int dy = 0; dy < 2; ++dy)
                  for (int dx = 0; dx < 2; ++dx) {
                    size_t idx = (c * H + 2 * oy + dy) * W + 2 * ox + dx;
                    if (x[idx] > bv) {  // first max in scan order wins ties
                      bv = x[idx];
                      best = idx;
                    }
                  }
                size_t oidx = (c * OH + oy) * OW + ox;
                y[oidx] = bv;
                am[oidx] = static_cast<uint32_t>(best);
              }
            }
          }
          break;
        }
        case LayerKind::flatten:
          std::memcpy(y, x, in_f * sizeof(float));
          break;
      }
    }
  }

  const size_t out_f = net.shapes.back().flat();
  DenseMatrix logits(batch, out_f);
  for (size_t bI = 0; bI < batch; ++bI)
    for (size_t i = 0; i < out_f; ++i) logits.at(bI, i) = acts[L][bI * out_f + i];

  if (cache) {
    cache->batch = batch;
    cache->net_uid = net.uid;
    cache->net_revision = net.revision;
    cache->acts = std::move(acts);
    cache->pool_argmax = std::move(pool_argmax);
  }
  return logits;
}

struct Grads {
  std::vector<std::vector<float>> weights;
  std::vector<std::vector<float>> biases;
};

// Backpropagates grad_logits through the cached activations. The cache must
// come from a forward pass on this exact network state.
inline Grads backward(const Network& net, const ForwardCache& cache, const DenseMatrix& grad_logits) {
  if (cache.net_uid != net.uid || cache.net_revision != net.revision)
    throw InvalidStateError("backward: stale forward cache (network changed since forward)");
  const size_t L = net.layers.size();
  const size_t batch = cache.batch;
  if (grad_logits.rows != batch || grad_logits.cols != net.num_outputs())
    throw std::invalid_argument("backward: grad_logits shape mismatch");
  if (cache.acts.size() != L + 1) throw InvalidStateError("backward: malformed cache");

  Grads g;
  g.weights.resize(L);
  g.biases.resize(L);
  // Accumulate parameter gradients in doubles, cast once at the end.
  std::vector<std::vector<double>> gw(L), gb(L);
  for (size_t li = 0; li < L; ++li) {
    gw[li].assign(net.weights[li].size(), 0.0);
    gb[li].assign(net.biases[li].size(), 0.0);
  }

  const size_t out_f = net.shapes.back().flat();
  std::vector<float> delta(batch * out_f);
  for (size_t bI = 0; bI < batch; ++bI)
    for (size_t i = 0; i < out_f; ++i) delta[bI * out_f + i] = static_cast<float>(grad_logits.at(bI, i));

  for (size_t li = L; li-- > 0;) {
    const LayerSpec& l = net.layers[li];
    const Shape3 in_shape = net.shapes[li];
    const Shape3 out_shape = net.shapes[li + 1];
    const size_t in_f = in_shape.flat(), out_f2 = out_shape.flat();
    std::vector<float> prev(batch * in_f, 0.0f);

    for (size_t bI = 0; bI < batch; ++bI) {
      const float* x = cache.acts[li].data() + bI * in_f;
      const float* dy = delta.data() + bI * out_f2;
      float* dx = prev.data() + bI * in_f;
      switch (l.kind) {
        case LayerKind::dense: {
          const float* w = net.weights[li].data();
          for (size_t o = 0; o < l.out_dim; ++o) {
            const double d = dy[o];
            gb[li][o] += d;
            double* gwrow = gw[li].data() + o * l.in_dim;
            const float* wrow = w + o * l.in_dim;
            for (size_t i = 0; i < l.in_dim; ++i) {
              gwrow[i] += d * x[i];
              dx[i] += static_cast<float>(d * wrow[i]);
            }
          }
          break;
        }
        case LayerKind::conv3x3: {
          const size_t H = in_shape.h, W = in_shape.w;
          const float* w = net.weights[li].data();
          for (size_t oc = 0; oc < l.out_ch; ++oc) {
            for (size_t iy = 0; iy < H; ++iy) {
              for (size_t ix = 0; ix < W; ++ix) {
                const double d = dy[(oc * H + iy) * W + ix];
                if (d == 0.0) continue;
                gb[li][oc] += d;
                for (size_t ic = 0; ic < l.in_ch; ++ic) {
                  const float* plane = x + ic * H * W;
                  float* dplane = dx + ic * H * W;
                  const size_t kbase = (oc * l.in_ch + ic) * 9;
                  for (int dyk = -1; dyk <= 1; ++dyk) {
                    long long sy = static_cast<long long>(iy) + dyk;
                    if (sy < 0 || sy >= static_cast<long long>(H)) continue;
                    for (int dxk = -1; dxk <= 1; ++dxk) {
                      long long sx = static_cast<long long>(ix) + dxk;
                      if (sx < 0 || sx >= static_cast<long long>(W)) continue;
                      const size_t src = static_cast<size_t>(sy) * W + static_cast<size_t>(sx);
                      const size_t k = kbase + static_cast<size_t>(dyk + 1) * 3 +
                                       static_cast<size_t>(dxk + 1);
                      gw[li][k] += d * plane[src];
                      dplane[src] += static_cast<float>(d * w[k]);
                    }
                  }
                }
              }
            }
          }
          break;
        }
        case LayerKind::relu:
          for (size_t i = 0; i < in_f; ++i) dx[i] = x[i] > 0.0f ? dy[i] : 0.0f;
          break;
        case LayerKind::maxpool2: {
          const uint32_t* am = cache.pool_argmax[li].data() + bI * out_f2;
          for (size_t i = 0; i < out_f2; ++i) dx[am[i]] += dy[i];
          break;
        }
        case LayerKind::flatten:
          std::memcpy(dx, dy, in_f * sizeof(float));
          break;
      }
    }
    delta = std::move(prev);
  }

  for (size_t li = 0; li < L; ++li) {
    g.weights[li].resize(gw[li].size());
    g.biases[li].resize(gb[li].size());
    for (size_t i = 0; i < gw[li].size(); ++i) g.weights[li][i] = static_cast<float>(gw[li][i]);
    for (size_t i = 0; i < gb[li].size(); ++i) g.biases[li][i] = static_cast<float>(gb[li][i]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::pair<size_t, double>> schedule;  // (epoch, multiplier), applied from that epoch on
};

inline void validate_sgd_config(const SgdConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("sgd config: lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
    throw std::invalid_argument("sgd config: momentum must be in [0,1)");
  if (!(cfg.weight_decay >= 0.0))
    throw std::invalid_argument("sgd config: weight_decay must be non-negative");
}

inline double scheduled_lr(const SgdConfig& cfg, size_t epoch) {
  double lr = cfg.lr;
  for (const auto& [e, m] : cfg.schedule)
    if (epoch >= e) lr *= m;
  return lr;
}

struct SgdState {
  std::vector<std::vector<float>> vel_w, vel_b;
};

inline SgdState make_sgd_state(const Network& net) {
  SgdState s;
  s.vel_w.resize(net.weights.size());
  s.vel_b.resize(net.biases.size());
  for (size_t i = 0; i < net.weights.size(); ++i) {
    s.vel_w[i].assign(net.weights[i].size(), 0.0f);
    s.vel_b[i].assign(net.biases[i].size(), 0.0f);
  }
  return s;
}

// v <- m*v + g + wd*w ; w <- w - lr*v  (applied to weights and biases alike)
inline void sgd_step(Network& net, const Grads& grads, double lr, double momentum,
                     double weight_decay, SgdState& state) {
  if (grads.weights.size() != net.weights.size() || grads.biases.size() != net.biases.size())
    throw std::invalid_argument("sgd_step: gradient layer count mismatch");
  for (size_t li = 0; li < net.weights.size(); ++li) {
    if (grads.weights[li].size() != net.weights[li].size() ||
        grads.biases[li].size() != net.biases[li].size())
      throw std::invalid_argument("sgd_step: gradient shape mismatch at layer " + std::to_string(li));
    for (size_t i = 0; i < net.weights[li].size(); ++i) {
      float& v = state.vel_w[li][i];
      float& w = net.weights[li][i];
      v = static_cast<float>(momentum * v + grads.weights[li][i] + weight_decay * w);
      w = static_cast<float>(w - lr * v);
    }
    for (size_t i = 0; i < net.biases[li].size(); ++i) {
      float& v = state.vel_b[li][i];
      float& b = net.biases[li][i];
      v = static_cast<float>(momentum * v + grads.biases[li][i] + weight_decay * b);
      b = static_cast<float>(b - lr * v);
    }
  }
  net.bump();
}

// Hash over the exact parameter bits, for change detection.
inline uint64_t network_hash(const Network& net) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t li = 0; li < net.weights.size(); ++li) {
    h = fnv1a64(net.weights[li].data(), net.weights[li].size() * sizeof(float), h);
    h = fnv1a64(net.biases[li].data(), net.biases[li].size() * sizeof(float), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Layout: 8-byte magic "R2KDCKPT", uint32 version, uint64 header length, a
// key=value text header, then per-parametric-layer float32 blobs (weights
// then biases) in layer order. Multi-byte fields are little-endian.

constexpr char kCheckpointMagic[8] = {'R', '2', 'K', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Network net;
  uint64_t seed = 0;
  uint64_t epoch = 0;
  std::string config_hash;
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream header;
  header << "input=" << ckpt.net.input_shape.ch << "," << ckpt.net.input_shape.h << ","
         << ckpt.net.input_shape.w << "\n";
  header << "layers=";
  for (size_t i = 0; i < ckpt.net.layers.size(); ++i) {
    if (i) header << "|";
    header << layer_to_string(ckpt.net.layers[i]);
  }
  header << "\n";
  header << "seed=" << ckpt.seed << "\n";
  header << "epoch=" << ckpt.epoch << "\n";
  header << "config_hash=" << ckpt.config_hash << "\n";
  const std::string h = header.str();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunFailure("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  uint32_t ver = kCheckpointVersion;
  uint64_t hlen = h.size();
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (size_t li = 0; li < ckpt.net.layers.size(); ++li) {
    if (!ckpt.net.layers[li].parametric()) continue;
    out.write(reinterpret_cast<const char*>(ckpt.net.weights[li].data()),
              static_cast<std::streamsize>(ckpt.net.weights[li].size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(ckpt.net.biases[li].data()),
              static_cast<std::streamsize>(ckpt.net.biases[li].size() * sizeof(float)));
  }
  if (!out) throw RunFailure("short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 20)
    throw FormatError(path + ": too small for a checkpoint (" + std::to_string(bytes.size()) +
                          " bytes)",
                      static_cast<long long>(bytes.size()));
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw FormatError(path + ": bad magic, expected \"R2KDCKPT\"", 0);
  uint32_t ver;
  std::memcpy(&ver, bytes.data() + 8, sizeof(ver));
  if (ver != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(ver), 8);
  uint64_t hlen;
  std::memcpy(&hlen, bytes.data() + 12, sizeof(hlen));
  if (20 + hlen > bytes.size())
    throw FormatError(path + ": header length " + std::to_string(hlen) + " exceeds file size", 12);
  std::string header(bytes.data() + 20, bytes.data() + 20 + hlen);

  Checkpoint ckpt;
  Shape3 input{};
  std::vector<LayerSpec> layers;
  std::istringstream hs(header);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path + ": malformed header line '" + line + "'");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "input") {
        size_t c1 = val.find(','), c2 = val.rfind(',');
        if (c1 == std::string::npos || c2 == c1)
          throw FormatError(path + ": input shape needs ch,h,w");
        input.ch = std::stoull(val.substr(0, c1));
        input.h = std::stoull(val.substr(c1 + 1, c2 - c1 - 1));
        input.w = std::stoull(val.substr(c2 + 1));
      } else if (key == "layers") {
        size_t pos = 0;
        while (pos <= val.size()) {
          size_t bar = val.find('|', pos);
          std::string tok = val.substr(pos, bar == std::string::npos ? std::string::npos : bar - pos);
          if (tok.empty()) throw FormatError(path + ": empty layer token");
          layers.push_back(layer_from_string(tok));
          if (bar == std::string::npos) break;
          pos = bar + 1;
        }
      } else if (key == "seed") {
        ckpt.seed = std::stoull(val);
      } else if (key == "epoch") {
        ckpt.epoch = std::stoull(val);
      } else if (key == "config_hash") {
        ckpt.config_hash = val;
      }
      // Unknown keys are tolerated for forward compatibility.
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception&) {
      throw FormatError(path + ": bad header value in '" + line + "'");
    }
  }
  if (layers.empty()) throw FormatError(path + ": header missing layers");
  if (input.flat() == 0) throw FormatError(path + ": header missing input shape");

  Network net;
  net.input_shape = input;
  net.layers = layers;
  net.shapes = propagate_shapes(input, layers);
  net.weights.resize(layers.size());
  net.biases.resize(layers.size());

  size_t offset = 20 + static_cast<size_t>(hlen);
  for (size_t li = 0; li < layers.size(); ++li) {
    const LayerSpec& l = layers[li];
    if (!l.parametric()) continue;
    size_t wn, bn;
    if (l.kind == LayerKind::dense) {
      wn = l.out_dim * l.in_dim;
      bn = l.out_dim;
    } else {
      wn = l.out_ch * l.in_ch * 9;
      bn = l.out_ch;
    }
    const size_t need = (wn + bn) * sizeof(float);
    if (offset + need > bytes.size())
      throw FormatError(path + ": truncated parameter blob for layer " + std::to_string(li) +
                            " (need " + std::to_string(need) + " bytes, have " +
                            std::to_string(bytes.size() - offset) + ")",
                        static_cast<long long>(bytes.size()));
    net.weights[li].resize(wn);
    net.biases[li].resize(bn);
    std::memcpy(net.weights[li].data(), bytes.data() + offset, wn * sizeof(float));
    offset += wn * sizeof(float);
    std::memcpy(net.biases[li].data(), bytes.data() + offset, bn * sizeof(float));
    offset += bn * sizeof(float);
  }
  if (offset != bytes.size())
    throw FormatError(path + ": " + std::to_string(bytes.size() - offset) +
                          " trailing bytes after parameter blobs",
                      static_cast<long long>(offset));
  net.assign_new_uid();
  ckpt.net = std::move(net);
  return ckpt;
}

}  // namespace r2kd

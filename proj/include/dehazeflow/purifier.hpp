#pragma once

// Atmospheric scattering purifier.
//
// A three-stage encoder / spatial attention / three-stage decoder CNN predicts
// the coefficient map K(x); the dehazed estimate is O_m = K*x - K + b.
//
//   encoder stage s (s = 1..3):  maxpool2 -> conv3x3 -> instance norm -> GELU
//   attention:                   conv3x3 -> sigmoid map -> broadcast multiply
//   decoder stage d (d = 1..3):  upsample2 -> crop -> concat(skip) -> conv3x3
//                                -> instance norm -> GELU
//   head:                        conv1x1 to 3 channels, plus the input x
//
// Decoder stage d concatenates the tensor that entered encoder stage 4-d, so
// every skip pairs up at matching resolution (the last one is x itself).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dehazeflow/autodiff.hpp"
#include "dehazeflow/error.hpp"
#include "dehazeflow/ops.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

struct PurifierConfig {
  /// Channels of the first encoder stage; later stages use 2x and 4x.
  std::size_t width = 16;

  bool operator==(const PurifierConfig&) const = default;
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <class T>
class PurifierNet {
 public:
  static constexpr std::size_t kStages = 3;
  static constexpr std::size_t kImageChannels = 3;

  /// Parameters filled with zeros, norm gains 0, b = 1. With this network
  /// the CNN reduces to its global residual: K(x) = x.
  static PurifierNet zeros(PurifierConfig cfg) {
    PurifierNet net(cfg);
    net.param("b")[0] = T(1);
    return net;
  }

  /// Uniform(+-1/sqrt(fan_in)) weights and biases, unit norm gains, b = 1.
  /// The head starts at zero so that K(x) = x on the first step.
  static PurifierNet init(PurifierConfig cfg, std::uint64_t seed) {
    PurifierNet net(cfg);
    std::mt19937_64 rng(seed);
    for (auto& p : net.params_) {
      const std::string& name = p.name;
      if (name == "b") {
        p.value[0] = T(1);
      } else if (ends_with(name, "norm.gain")) {
        p.value.fill(T(1));
      } else if (name.rfind("head.", 0) == 0 || ends_with(name, "norm.bias")) {
        p.value.fill(T(0));
      } else {
        const std::size_t fan_in = net.fan_in(name);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : p.value.data()) v = static_cast<T>(dist(rng));
      }
    }
    return net;
  }

  const PurifierConfig& config() const noexcept { return cfg_; }

  std::vector<NamedTensor<T>>& params() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& params() const noexcept { return params_; }

  Tensor<T>& param(std::string_view name) { return params_[index_of(name)].value; }
  const Tensor<T>& param(std::string_view name) const { return params_[index_of(name)].value; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    throw Error("PurifierNet: no parameter named '" + std::string(name) + "'");
  }

  /// Trainable scalar count including b.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  /// Channel ladder: stage_channels(0) = 3 (image), 1..3 = encoder widths.
  std::size_t stage_channels(std::size_t s) const {
    return s == 0 ? kImageChannels : cfg_.width << (s - 1);
  }

  bool operator==(const PurifierNet& o) const {
    if (!(cfg_ == o.cfg_) || params_.size() != o.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != o.params_[i].name || !(params_[i].value == o.params_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  explicit PurifierNet(PurifierConfig cfg) : cfg_(cfg) {
    if (cfg.width == 0) throw DomainError("PurifierNet: width must be positive");
    auto add = [this](std::string name, Shape4 s) { params_.push_back({std::move(name), Tensor<T>(s)}); };
    auto conv = [&](const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k) {
      add(prefix + ".weight", {cout, cin, k, k});
      add(prefix + ".bias", {1, cout, 1, 1});
    };
    auto norm = [&](const std::string& prefix, std::size_t c) {
      add(prefix + ".gain", {1, c, 1, 1});
      add(prefix + ".bias", {1, c, 1, 1});
    };
    for (std::size_t s = 1; s <= kStages; ++s) {
      const std::string p = "enc" + std::to_string(s);
      conv(p + ".conv", stage_channels(s - 1), stage_channels(s), 3);
      norm(p + ".norm", stage_channels(s));
    }
    conv("attn.conv", stage_channels(kStages), 1, 3);
    // decoder stage d upsamples stage (4-d) features and concatenates the
    // input of encoder stage (4-d), i.e. stage (3-d) features
    for (std::size_t d = 1; d <= kStages; ++d) {
      const std::string p = "dec" + std::to_string(d);
      const std::size_t up = d == 1 ? stage_channels(kStages) : stage_channels(kStages + 1 - d);
      const std::size_t skip = stage_channels(kStages - d);
      const std::size_t out = d == kStages ? stage_channels(1) : stage_channels(kStages - d);
      conv(p + ".conv", up + skip, out, 3);
      norm(p + ".norm", out);
    }
    conv("head", stage_channels(1), kImageChannels, 1);
    add("b", {1, 1, 1, 1});
  }

  std::size_t fan_in(const std::string& name) const {
    const Shape4 s = param(name.substr(0, name.rfind('.')) + ".weight").shape();
    return s.c * s.h * s.w;
  }

  static bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
  }

  PurifierConfig cfg_;
  std::vector<NamedTensor<T>> params_;
};

/// Graph leaves for every purifier parameter, in PurifierNet::params() order.
template <class T>
struct PurifierBinding {
  std::vector<Var<T>> vars;
  const PurifierNet<T>* net = nullptr;

  const Var<T>& operator[](std::string_view name) const { return vars[net->index_of(name)]; }
};

/// Reference the parameters of `net` in `g`. With `trainable` false the
/// leaves carry no gradient (inference or a frozen purifier).
template <class T>
PurifierBinding<T> bind_purifier(Graph<T>& g, const PurifierNet<T>& net, bool trainable) {
  PurifierBinding<T> b;
  b.net = &net;
  b.vars.reserve(net.params().size());
  for (const auto& p : net.params()) b.vars.push_back(g.reference(p.value, trainable));
  return b;
}

/// K(x) = D(Attn(E(x))) + x. Output has the shape of x.
template <class T>
Var<T> cnn_forward(const Var<T>& x, const PurifierBinding<T>& p) {
  const Shape4 xs = x.shape();
  if (xs.c != PurifierNet<T>::kImageChannels) {
    throw ShapeError("cnn_forward: expected a 3-channel image, got " + xs.str());
  }
  constexpr std::size_t kStages = PurifierNet<T>::kStages;
  std::vector<Var<T>> skips;
  Var<T> h = x;
  for (std::size_t s = 1; s <= kStages; ++s) {
    const std::string pre = "enc" + std::to_string(s);
    skips.push_back(h);
    h = maxpool2d(h);
    h = conv2d(h, p[pre + ".conv.weight"], p[pre + ".conv.bias"], 1, 1);
    h = instance_norm(h, p[pre + ".norm.gain"], p[pre + ".norm.bias"]);
    h = gelu(h);
  }
  h = spatial_attention(h, p["attn.conv.weight"], p["attn.conv.bias"]);
  for (std::size_t d = 1; d <= kStages; ++d) {
    const std::string pre = "dec" + std::to_string(d);
    const Var<T>& skip = skips[kStages - d];
    h = upsample_bilinear2x(h);
    h = crop(h, skip.shape().h, skip.shape().w);
    h = concat_channels(h, skip);
    h = conv2d(h, p[pre + ".conv.weight"], p[pre + ".conv.bias"], 1, 1);
    h = instance_norm(h, p[pre + ".norm.gain"], p[pre + ".norm.bias"]);
    h = gelu(h);
  }
  h = conv2d(h, p["head.weight"], p["head.bias"], 1, 0);
  return add(h, x);
}

/// O_m = K*x + (b - K) from a precomputed K. Summed in this order K = 1,
/// b = 1 returns x exactly.
template <class T>
Var<T> purify_with(const Var<T>& k, const Var<T>& x, const Var<T>& b) {
  return add(mul(k, x), add_broadcast_scalar(scale(k, T(-1)), b));
}

/// O_m = CNN(x)*x - CNN(x) + b. No clamping.
template <class T>
Var<T> purify(const Var<T>& x, const PurifierBinding<T>& p) {
  return purify_with(cnn_forward(x, p), x, p["b"]);
}

/// Multiply-accumulate count of one CNN evaluation on an h x w image.
inline std::uint64_t purifier_macs(const PurifierConfig& cfg, std::size_t h, std::size_t w) {
  auto conv = [](std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t hh,
                 std::uint64_t ww) { return cin * cout * k * k * hh * ww; };
  auto ch = [&](std::size_t s) -> std::uint64_t { return s == 0 ? 3 : cfg.width << (s - 1); };
  std::vector<std::size_t> hs{h}, ws{w};
  for (int s = 0; s < 3; ++s) {
    hs.push_back((hs.back() + 1) / 2);
    ws.push_back((ws.back() + 1) / 2);
  }
  std::uint64_t macs = 0;
  for (std::size_t s = 1; s <= 3; ++s) macs += conv(ch(s - 1), ch(s), 3, hs[s], ws[s]);
  macs += conv(ch(3), 1, 3, hs[3], ws[3]);
  for (std::size_t d = 1; d <= 3; ++d) {
    const std::uint64_t up = d == 1 ? ch(3) : ch(4 - d);
    const std::uint64_t skip = ch(3 - d);
    const std::uint64_t out = d == 3 ? ch(1) : ch(3 - d);
    macs += conv(up + skip, out, 3, hs[3 - d], ws[3 - d]);
  }
  macs += conv(ch(1), 3, 1, h, w);
  return macs;
}

}  // namespace dehazeflow

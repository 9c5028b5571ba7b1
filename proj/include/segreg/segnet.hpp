#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "segreg/latent.hpp"
#include "segreg/ops.hpp"
#include "segreg/rng.hpp"

namespace segreg {

// Encoder-decoder widths: enc1, enc2, bottleneck, dec2, dec1. The last entry
// is the latent dimension d.
struct ChannelPlan {
  std::array<std::size_t, 5> widths{8, 16, 32, 16, 8};
  std::size_t in_channels = 1;

  std::size_t latent_dim() const { return widths[4]; }
  bool operator==(const ChannelPlan&) const = default;
};

struct LayerSpec {
  std::string name;
  std::size_t in, out, kernel;
};

// Conv layers in canonical order; each contributes "<name>.weight" and "<name>.bias".
inline std::vector<LayerSpec> layer_specs(const ChannelPlan& plan, std::size_t num_classes) {
  const auto& w = plan.widths;
  return {
      {"enc1.conv1", plan.in_channels, w[0], 3}, {"enc1.conv2", w[0], w[0], 3},
      {"enc2.conv1", w[0], w[1], 3},             {"enc2.conv2", w[1], w[1], 3},
      {"bottleneck.conv1", w[1], w[2], 3},       {"bottleneck.conv2", w[2], w[2], 3},
      {"dec2.conv1", w[2] + w[1], w[3], 3},      {"dec2.conv2", w[3], w[3], 3},
      {"dec1.conv1", w[3] + w[0], w[4], 3},      {"dec1.conv2", w[4], w[4], 3},
      {"head", w[4], num_classes + 1, 1},
  };
}

/// Named parameter leaves of the tiny U-Net.
template <class T>
struct ModelParams {
  ChannelPlan plan;
  std::size_t num_classes = 0;  // foreground classes C; logits have C+1 channels
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  const Tensor<T>& get(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw ValidationError("model: no parameter named '" + std::string(name) + "'");
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  // Deep copy into fresh leaves.
  ModelParams clone(bool requires_grad = true) const { return cast<T>(requires_grad); }

  template <class U>
  ModelParams<U> cast(bool requires_grad = true) const {
    ModelParams<U> out;
    out.plan = plan;
    out.num_classes = num_classes;
    out.names = names;
    for (const auto& t : tensors) {
      std::vector<U> v(t.data().begin(), t.data().end());
      out.tensors.emplace_back(t.shape(), std::move(v), requires_grad);
    }
    return out;
  }

  void zero_grad() {
    for (auto& t : tensors) t.zero_grad();
  }
};

/// He-normal initialisation (zero mean, variance 2/fan_in), zero biases.
template <class T>
ModelParams<T> init_params(std::uint64_t seed, std::size_t num_classes, const ChannelPlan& plan = {}) {
  ModelParams<T> p;
  p.plan = plan;
  p.num_classes = num_classes;
  auto rng = make_stream(seed, "init-params");
  for (const auto& layer : layer_specs(plan, num_classes)) {
    const std::size_t fan_in = layer.in * layer.kernel * layer.kernel;
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> w(layer.out * fan_in);
    for (auto& v : w) v = static_cast<T>(normal(rng));
    p.names.push_back(layer.name + ".weight");
    p.tensors.emplace_back(Shape{layer.out, layer.in, layer.kernel, layer.kernel}, std::move(w), true);
    p.names.push_back(layer.name + ".bias");
    p.tensors.push_back(Tensor<T>::zeros({layer.out}, true));
  }
  return p;
}

template <class T>
struct ForwardOutput {
  Tensor<T> logits;   // (B, C+1, H, W)
  Tensor<T> latents;  // (B, d, H, W), the head's input
};

inline constexpr double kLeakySlope = 0.01;

template <class T>
ForwardOutput<T> forward(const ModelParams<T>& params, const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != params.plan.in_channels) {
    throw ShapeError("forward: images must be (batch," + std::to_string(params.plan.in_channels) + ",H,W), got " +
                     shape_str(images.shape()));
  }
  if (images.dim(2) % 4 || images.dim(3) % 4) {
    throw ShapeError("forward: H and W must be divisible by 4, got " + shape_str(images.shape()));
  }
  const auto& P = params.tensors;
  const T slope = static_cast<T>(kLeakySlope);
  // Layer k uses tensors 2k (weight) and 2k+1 (bias).
  auto conv = [&](const Tensor<T>& x, std::size_t layer) { return conv2d(x, P[2 * layer], P[2 * layer + 1]); };
  auto block = [&](const Tensor<T>& x, std::size_t first) {
    auto h = leaky_relu(conv(x, first), slope);
    return leaky_relu(conv(h, first + 1), slope);
  };
  auto e1 = block(images, 0);
  auto e2 = block(maxpool2(e1), 2);
  auto bn = block(maxpool2(e2), 4);
  auto d2 = block(concat_channels(upsample2(bn), e2), 6);
  auto d1 = block(concat_channels(upsample2(d2), e1), 8);
  auto logits = conv(d1, 10);
  return {std::move(logits), std::move(d1)};
}

// Per-class pixel budget for stratified sampling.
struct PixelSampler {
  std::size_t budget_per_class = 256;
  std::uint64_t seed = 0;
};

/// Stratified pixel sample: per class, min(budget, available) flat pixel
/// indices drawn uniformly without replacement, ascending within each class.
/// Classes are emitted in order 0..num_classes.
inline std::vector<std::vector<std::size_t>> stratified_pixels(const LabelBatch& labels, std::size_t num_classes,
                                                                const PixelSampler& sampler) {
  std::vector<std::vector<std::size_t>> pools(num_classes + 1);
  for (std::size_t i = 0; i < labels.values.size(); ++i) pools.at(labels.values[i]).push_back(i);
  Rng rng(sampler.seed);
  for (auto& pool : pools) {
    const std::size_t take = std::min(sampler.budget_per_class, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(take);
    std::sort(pool.begin(), pool.end());
  }
  return pools;
}

template <class T>
LatentBatch<T> extract_latent_batch(const ForwardOutput<T>& out, const LabelBatch& labels,
                                    const PixelSampler& sampler) {
  const auto& z = out.latents;
  if (labels.batch != z.dim(0) || labels.height != z.dim(2) || labels.width != z.dim(3)) {
    throw ShapeError("extract_latent_batch: labels do not match latents " + shape_str(z.shape()));
  }
  const std::size_t num_classes = out.logits.dim(1) - 1;
  labels.validate(num_classes);
  auto pools = stratified_pixels(labels, num_classes, sampler);
  std::vector<std::size_t> rows;
  LatentBatch<T> batch;
  batch.num_classes = num_classes;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    rows.insert(rows.end(), pools[c].begin(), pools[c].end());
    batch.labels.insert(batch.labels.end(), pools[c].size(), static_cast<int>(c));
  }
  batch.embeddings = gather_rows(z, std::span<const std::size_t>(rows));
  return batch;
}

}  // namespace segreg

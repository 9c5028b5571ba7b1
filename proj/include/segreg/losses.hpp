#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "segreg/gaussianity.hpp"
#include "segreg/latent.hpp"
#include "segreg/ops.hpp"

namespace segreg {

namespace detail {

inline void check_label_map(const char* op, const Shape& s, const LabelBatch& labels) {
  require_rank(op, s, 4, "input");
  if (labels.batch != s[0] || labels.height != s[2] || labels.width != s[3]) {
    throw ShapeError(std::string(op) + ": labels (" + std::to_string(labels.batch) + "," +
                     std::to_string(labels.height) + "," + std::to_string(labels.width) + ") do not match " +
                     shape_str(s));
  }
  labels.validate(s[1] - 1);
}

}  // namespace detail

inline constexpr double kDiceEps = 1e-5;

/// Soft Dice loss over foreground channels 1..C, pooled over the whole batch.
/// Classes with no ground-truth pixels are skipped; with none present the loss is 0.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const LabelBatch& labels) {
  detail::check_label_map("dice-loss", probs.shape(), labels);
  const std::size_t batch = probs.dim(0), ch = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  auto p = probs.data();
  std::vector<double> inter(ch, 0.0), psum(ch, 0.0), gsum(ch, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 1; c < ch; ++c) {
      const T* pc = p.data() + (b * ch + c) * plane;
      const std::uint8_t* lab = labels.values.data() + b * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        psum[c] += pc[i];
        if (lab[i] == c) {
          inter[c] += pc[i];
          gsum[c] += 1.0;
        }
      }
    }
  std::vector<double> coef(ch, 0.0);  // d(dice_c)/dp for g = 0; g = 1 adds gain[c]
  std::vector<double> gain(ch, 0.0);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 1; c < ch; ++c) {
    if (gsum[c] == 0.0) continue;
    const double den = psum[c] + gsum[c] + kDiceEps;
    const double num = 2.0 * inter[c] + kDiceEps;
    total += num / den;
    coef[c] = -num / (den * den);
    gain[c] = 2.0 / den;
    ++present;
  }
  const double loss = present ? 1.0 - total / static_cast<double>(present) : 0.0;
  const double w = present ? -1.0 / static_cast<double>(present) : 0.0;
  return detail::make_result<T>(
      "dice-loss", Shape{}, std::vector<T>{static_cast<T>(loss)}, {probs},
      [=, lab = labels.values](detail::Node<T>& self) {
        if (present == 0) return;
        auto& g = self.inputs[0]->grad_buffer();
        const double go = static_cast<double>(self.grad[0]) * w;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 1; c < ch; ++c) {
            if (gain[c] == 0.0) continue;
            T* gc = g.data() + (b * ch + c) * plane;
            const std::uint8_t* l = lab.data() + b * plane;
            const T base = static_cast<T>(go * coef[c]), hit = static_cast<T>(go * (coef[c] + gain[c]));
            for (std::size_t i = 0; i < plane; ++i) gc[i] += l[i] == c ? hit : base;
          }
      });
}

/// Pixelwise mean negative log-softmax of the true class.
template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const LabelBatch& labels) {
  detail::check_label_map("cross-entropy", logits.shape(), labels);
  const std::size_t batch = logits.dim(0), ch = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  detail::require_finite<T>("cross-entropy", logits.data());
  auto x = logits.data();
  const double inv = 1.0 / static_cast<double>(batch * plane);
  std::vector<T> soft(x.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = b * ch * plane + i;
      T mx = x[base];
      for (std::size_t c = 1; c < ch; ++c) mx = std::max(mx, x[base + c * plane]);
      double s = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        const double e = std::exp(static_cast<double>(x[base + c * plane] - mx));
        soft[base + c * plane] = static_cast<T>(e);
        s += e;
      }
      for (std::size_t c = 0; c < ch; ++c) soft[base + c * plane] = static_cast<T>(soft[base + c * plane] / s);
      const std::size_t y = labels.values[b * plane + i];
      total += static_cast<double>(mx) + std::log(s) - static_cast<double>(x[base + y * plane]);
    }
  return detail::make_result<T>(
      "cross-entropy", Shape{}, std::vector<T>{static_cast<T>(total * inv)}, {logits},
      [=, soft = std::move(soft), lab = labels.values](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const T go = static_cast<T>(static_cast<double>(self.grad[0]) * inv);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t base = b * ch * plane + i;
            for (std::size_t c = 0; c < ch; ++c) g[base + c * plane] += go * soft[base + c * plane];
            g[base + lab[b * plane + i] * plane] -= go;
          }
      });
}

/// mix * Dice(softmax(logits)) + (1 - mix) * CE(logits).
template <class T>
Tensor<T> segmentation_loss(const Tensor<T>& logits, const LabelBatch& labels, double mix = 0.5) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw ValidationError("segmentation_loss: dice/ce mix must lie in [0,1]");
  if (mix == 0.0) return cross_entropy_loss(logits, labels);
  auto dice = dice_loss(softmax_channels(logits), labels);
  if (mix == 1.0) return dice;
  return add(scale(dice, static_cast<T>(mix)), scale(cross_entropy_loss(logits, labels), static_cast<T>(1.0 - mix)));
}

/// Class means mu_c for c = 0..C, each (1,d); absent classes have no tensor.
template <class T>
struct PrototypeSet {
  std::vector<std::optional<Tensor<T>>> means;
  std::vector<std::size_t> counts;

  bool present(std::size_t c) const { return c < means.size() && means[c].has_value(); }
};

template <class T>
PrototypeSet<T> prototypes(const LatentBatch<T>& latents) {
  latents.validate();
  PrototypeSet<T> out;
  for (const auto& rows : latents.index_sets()) {
    out.counts.push_back(rows.size());
    if (rows.empty()) {
      out.means.emplace_back();
    } else {
      out.means.emplace_back(mean_rows(gather_rows(latents.embeddings, std::span<const std::size_t>(rows))));
    }
  }
  return out;
}

struct LossWarnings {
  std::size_t empty_foreground = 0;
};

/// Mean over present foreground classes of the within-class mean squared
/// distance to the prototype. Background rows do not contribute.
template <class T>
Tensor<T> invariance_loss(const LatentBatch<T>& latents, const PrototypeSet<T>& protos,
                          LossWarnings* warnings = nullptr) {
  latents.validate();
  const auto sets = latents.index_sets();
  if (protos.means.size() != sets.size()) throw ShapeError("invariance_loss: prototypes do not match class count");
  std::optional<Tensor<T>> total;
  std::size_t present = 0;
  for (std::size_t c = 1; c < sets.size(); ++c) {
    if (sets[c].empty()) continue;
    if (!protos.present(c)) throw ValidationError("invariance_loss: prototype missing for class " + std::to_string(c));
    auto z = gather_rows(latents.embeddings, std::span<const std::size_t>(sets[c]));
    auto spread = mean(square(sub(z, repeat_rows(*protos.means[c], sets[c].size()))));
    // mean() divides by |I_c|*d; the per-row squared norm sums over d.
    auto term = scale(spread, static_cast<T>(latents.dim()));
    total = total ? add(*total, term) : term;
    ++present;
  }
  if (present == 0) {
    if (warnings) ++warnings->empty_foreground;
    return Tensor<T>::scalar(T(0));
  }
  return present == 1 ? *total : scale(*total, T(1) / static_cast<T>(present));
}

struct SegRegWeights {
  double lambda = 0.05;
  double seg_weight = 1.0;
  double dice_ce_mix = 0.5;
  double inv_weight = 1.0;  // extra multiplier on the invariance term, 1 reproduces the plain objective

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("segreg weights: lambda must lie in [0,1]");
    if (!(dice_ce_mix >= 0.0 && dice_ce_mix <= 1.0)) {
      throw ValidationError("segreg weights: dice_ce_mix must lie in [0,1]");
    }
    if (!(seg_weight >= 0.0) || !std::isfinite(seg_weight)) throw ValidationError("segreg weights: bad seg_weight");
    if (!(inv_weight >= 0.0) || !std::isfinite(inv_weight)) throw ValidationError("segreg weights: bad inv_weight");
  }
};

template <class T>
struct SegRegLoss {
  Tensor<T> total;
  double seg = 0.0;
  double sigreg = 0.0;
  double inv = 0.0;
  std::size_t empty_foreground_warnings = 0;

  // seg_weight * seg + lambda * sigreg + (1 - lambda) * inv_weight * inv, in
  // the same order as the graph.
  double recombined(const SegRegWeights& w) const {
    return w.seg_weight * seg + w.lambda * sigreg + (1.0 - w.lambda) * w.inv_weight * inv;
  }
};

/// Combined objective. Terms with an exactly zero weight are not added to the
/// graph (their values are still reported).
template <class T>
SegRegLoss<T> segreg_total(const Tensor<T>& logits, const LatentBatch<T>& latents, const LabelBatch& labels,
                           const SegRegWeights& w, const ProjectionSet& proj, const SigRegOptions& sig_opts = {}) {
  w.validate();
  SegRegLoss<T> out;
  auto seg = segmentation_loss(logits, labels, w.dice_ce_mix);
  out.seg = static_cast<double>(seg.item());

  const double sig_w = w.lambda, inv_w = (1.0 - w.lambda) * w.inv_weight;
  Tensor<T> sig, inv;
  if (sig_w != 0.0) {
    sig = sigreg_loss(latents, proj, sig_opts);
  } else {
    NoGradGuard guard;
    sig = sigreg_loss(latents, proj, sig_opts);
  }
  LossWarnings warn;
  if (inv_w != 0.0) {
    inv = invariance_loss(latents, prototypes(latents), &warn);
  } else {
    NoGradGuard guard;
    inv = invariance_loss(latents, prototypes(latents), &warn);
  }
  out.sigreg = static_cast<double>(sig.item());
  out.inv = static_cast<double>(inv.item());
  out.empty_foreground_warnings = warn.empty_foreground;

  Tensor<T> total = w.seg_weight == 1.0 ? seg : scale(seg, static_cast<T>(w.seg_weight));
  if (sig_w != 0.0) total = add(total, scale(sig, static_cast<T>(sig_w)));
  if (inv_w != 0.0) total = add(total, scale(inv, static_cast<T>(inv_w)));
  out.total = total;
  return out;
}

}  // namespace segreg

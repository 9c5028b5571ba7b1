#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "segreg/drift.hpp"
#include "segreg/losses.hpp"
#include "segreg/optim.hpp"
#include "segreg/segnet.hpp"
#include "segreg/synthdata.hpp"

namespace segreg {

enum class Method { seq, ewc, rehearsal, segreg, segreg_ewc };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::seq: return "seq";
    case Method::ewc: return "ewc";
    case Method::rehearsal: return "rehearsal";
    case Method::segreg: return "segreg";
    case Method::segreg_ewc: return "segreg_ewc";
  }
  return "?";
}

inline Method method_from_name(std::string_view name) {
  for (auto m : {Method::seq, Method::ewc, Method::rehearsal, Method::segreg, Method::segreg_ewc})
    if (method_name(m) == name) return m;
  throw ValidationError("unknown method '" + std::string(name) + "' (expected seq, ewc, rehearsal, segreg or segreg_ewc)");
}

inline bool uses_ewc(Method m) { return m == Method::ewc || m == Method::segreg_ewc; }
inline bool uses_segreg(Method m) { return m == Method::segreg || m == Method::segreg_ewc; }
inline bool uses_rehearsal(Method m) { return m == Method::rehearsal; }

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 6;
  double clip_norm = 12.0;  // global gradient-norm cap, 0 disables
};

struct MethodConfig {
  Method method = Method::seq;
  double ewc_lambda = 100.0;
  std::size_t fisher_samples = 200;
  std::size_t rehearsal_per_task = 32;
  SegRegWeights segreg{};
  std::size_t projections = 16;      // K directions, resampled every step
  SigRegOptions sigreg{};
  std::size_t pixels_per_class = 256;  // latent rows sampled per class per step
  OptimConfig optim{};
  std::uint64_t run_seed = 0;

  void validate() const {
    segreg.validate();
    sigreg.grid.validate();
    if (!(ewc_lambda >= 0.0) || !std::isfinite(ewc_lambda)) throw ValidationError("method: ewc_lambda must be >= 0");
    if (optim.batch_size == 0) throw ValidationError("optim: batch_size must be positive");
    if (projections == 0) throw ValidationError("method: projections must be positive");
    if (pixels_per_class == 0) throw ValidationError("method: pixels_per_class must be positive");
    if (!(optim.lr > 0.0)) throw ValidationError("optim: lr must be > 0");
    if (!(optim.momentum >= 0.0 && optim.momentum < 1.0)) throw ValidationError("optim: momentum must lie in [0,1)");
  }
};

/// State carried between stages. Only the fields of the owning method are used.
struct CarryState {
  Method method = Method::seq;
  std::size_t stages_done = 0;
  // EWC: anchor parameters and diagonal Fisher from the latest stage.
  std::vector<std::vector<float>> anchor;
  std::vector<std::vector<float>> fisher;
  // Rehearsal: stored training items.
  std::vector<Sample> buffer;

  static CarryState for_method(Method m) {
    CarryState c;
    c.method = m;
    return c;
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double total = 0, seg = 0, sigreg = 0, inv = 0, ewc = 0;
};

struct StageLog {
  std::string task_id;
  std::vector<EpochLog> epochs;
  std::size_t empty_foreground_warnings = 0;
};

// ---------------------------------------------------------------------------
// EWC

/// (lambda/2) * sum_p F_p (theta_p - anchor_p)^2 over all parameter leaves.
template <class T>
Tensor<T> ewc_penalty(const std::vector<Tensor<T>>& params, const std::vector<std::vector<float>>& anchor,
                      const std::vector<std::vector<float>>& fisher, double lambda) {
  if (anchor.size() != params.size() || fisher.size() != params.size()) {
    throw ValidationError("ewc: anchor/Fisher do not match the parameter list");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].data();
    if (anchor[k].size() != w.size() || fisher[k].size() != w.size()) throw ValidationError("ewc: size mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double d = static_cast<double>(w[i]) - anchor[k][i];
      total += fisher[k][i] * d * d;
    }
  }
  return detail::make_result<T>("ewc-penalty", Shape{}, std::vector<T>{static_cast<T>(0.5 * lambda * total)}, params,
                                [anchor, fisher, lambda](detail::Node<T>& self) {
                                  const double go = static_cast<double>(self.grad[0]) * lambda;
                                  for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                    if (!self.input_needs_grad(k)) continue;
                                    const auto& w = self.inputs[k]->data;
                                    auto& g = self.inputs[k]->grad_buffer();
                                    for (std::size_t i = 0; i < w.size(); ++i)
                                      g[i] += static_cast<T>(go * fisher[k][i] * (w[i] - anchor[k][i]));
                                  }
                                });
}

/// Diagonal Fisher: mean over training items of the squared per-item gradient
/// of the segmentation loss at the current parameters.
inline std::vector<std::vector<float>> diagonal_fisher(ModelParams<float>& params, const Dataset& ds,
                                                       const MethodConfig& cfg, std::uint64_t stream_index) {
  const std::size_t n = std::min(cfg.fisher_samples, ds.train.count);
  std::vector<std::vector<double>> acc;
  for (const auto& t : params.tensors) acc.emplace_back(t.numel(), 0.0);
  std::vector<std::size_t> order(ds.train.count);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_stream(cfg.run_seed, "fisher", stream_index);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t item[1] = {order[s]};
    params.zero_grad();
    auto out = forward(params, image_batch<float>(ds.train, ds.spec, item));
    segmentation_loss(out.logits, label_batch(ds.train, ds.spec, item), cfg.segreg.dice_ce_mix).backward();
    for (std::size_t k = 0; k < params.tensors.size(); ++k) {
      if (!params.tensors[k].has_grad()) continue;
      auto g = params.tensors[k].grad();
      for (std::size_t i = 0; i < g.size(); ++i) acc[k][i] += static_cast<double>(g[i]) * g[i];
    }
  }
  params.zero_grad();
  std::vector<std::vector<float>> fisher;
  for (auto& a : acc) {
    std::vector<float> f(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) f[i] = n ? static_cast<float>(a[i] / static_cast<double>(n)) : 0.0f;
    fisher.push_back(std::move(f));
  }
  return fisher;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

// Batch assembled from current-task items plus replayed samples.
struct MixedBatch {
  Tensor<float> images;
  LabelBatch labels;
};

inline MixedBatch assemble_batch(const Dataset& ds, std::span<const std::size_t> items,
                                 const std::vector<const Sample*>& replay) {
  const std::size_t H = ds.spec.height, W = ds.spec.width, px = H * W;
  const std::size_t B = items.size() + replay.size();
  std::vector<float> img;
  img.reserve(B * px);
  LabelBatch lab{B, H, W, {}};
  lab.values.reserve(B * px);
  for (auto i : items) {
    img.insert(img.end(), ds.train.images.begin() + i * px, ds.train.images.begin() + (i + 1) * px);
    lab.values.insert(lab.values.end(), ds.train.masks.begin() + i * px, ds.train.masks.begin() + (i + 1) * px);
  }
  for (const Sample* s : replay) {
    img.insert(img.end(), s->image.begin(), s->image.end());
    lab.values.insert(lab.values.end(), s->mask.begin(), s->mask.end());
  }
  return {Tensor<float>({B, 1, H, W}, std::move(img)), std::move(lab)};
}

// Replayed items per batch: one stored sample for every three current ones.
inline std::size_t replay_count(std::size_t batch_size) { return std::max<std::size_t>(1, (batch_size + 1) / 3); }

}  // namespace detail

/// Trains one stage in place. `stream_index` keys every random stream used,
/// so a stage is reproducible from (run_seed, stream_index, carry).
inline StageLog train_stage(ModelParams<float>& params, const Dataset& ds, const MethodConfig& cfg, CarryState& carry,
                            std::uint64_t stream_index) {
  cfg.validate();
  if (carry.method != cfg.method) {
    throw ValidationError("train_stage: carry state belongs to method '" + std::string(method_name(carry.method)) +
                          "', not '" + std::string(method_name(cfg.method)) + "'");
  }
  if (ds.spec.num_classes() != params.num_classes) throw ValidationError("train_stage: task class count differs from model");
  if (ds.train.count == 0) throw ValidationError("train_stage: task '" + ds.spec.task_id + "' has no training items");
  if (!carry.buffer.empty() && carry.buffer.front().mask.size() != ds.spec.height * ds.spec.width) {
    throw ValidationError("train_stage: rehearsal buffer image size differs from task '" + ds.spec.task_id + "'");
  }

  StageLog log;
  log.task_id = ds.spec.task_id;
  SgdMomentum<float> opt(cfg.optim.lr, cfg.optim.momentum, cfg.optim.clip_norm);
  const bool segreg_terms = uses_segreg(cfg.method);
  const bool ewc_on = uses_ewc(cfg.method) && cfg.ewc_lambda != 0.0 && !carry.fisher.empty();
  const bool replay_on = uses_rehearsal(cfg.method) && !carry.buffer.empty();
  const std::size_t B = cfg.optim.batch_size;
  const std::uint64_t base = stream_index << 20;
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    std::vector<std::size_t> order(ds.train.count);
    std::iota(order.begin(), order.end(), 0);
    auto order_rng = make_stream(cfg.run_seed, "batch-order", base + epoch);
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochLog e;
    e.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += B, ++step) {
      const std::size_t stop = std::min(order.size(), start + B);
      std::span<const std::size_t> items(order.data() + start, stop - start);
      std::vector<const Sample*> replay;
      if (replay_on) {
        auto rng = make_stream(cfg.run_seed, "rehearsal-draw", base + step);
        std::uniform_int_distribution<std::size_t> pick(0, carry.buffer.size() - 1);
        for (std::size_t r = 0; r < detail::replay_count(B); ++r) replay.push_back(&carry.buffer[pick(rng)]);
      }
      auto batch = detail::assemble_batch(ds, items, replay);
      auto out = forward(params, batch.images);
      Tensor<float> loss;
      if (segreg_terms) {
        PixelSampler sampler{cfg.pixels_per_class, stream_seed(cfg.run_seed, "pixels", base + step)};
        auto latents = extract_latent_batch(out, batch.labels, sampler);
        auto proj = sample_projections(params.plan.latent_dim(), cfg.projections,
                                       stream_seed(cfg.run_seed, "projections", base + step));
        auto r = segreg_total(out.logits, latents, batch.labels, cfg.segreg, proj, cfg.sigreg);
        loss = r.total;
        e.seg += r.seg;
        e.sigreg += r.sigreg;
        e.inv += r.inv;
        log.empty_foreground_warnings += r.empty_foreground_warnings;
      } else {
        loss = segmentation_loss(out.logits, batch.labels, cfg.segreg.dice_ce_mix);
        e.seg += loss.item();
      }
      if (ewc_on) {
        auto pen = ewc_penalty(params.tensors, carry.anchor, carry.fisher, cfg.ewc_lambda);
        e.ewc += pen.item();
        loss = add(loss, pen);
      }
      if (!std::isfinite(loss.item())) throw NumericError("train_stage: non-finite loss on task '" + ds.spec.task_id + "'");
      e.total += loss.item();
      params.zero_grad();
      loss.backward();
      opt.step(params.tensors);
      ++e.steps;
    }
    params.zero_grad();
    const double n = static_cast<double>(std::max<std::size_t>(1, e.steps));
    e.total /= n, e.seg /= n, e.sigreg /= n, e.inv /= n, e.ewc /= n;
    log.epochs.push_back(e);
  }

  if (uses_ewc(cfg.method)) {
    // The latest stage's Fisher and optimum replace the previous ones.
    carry.fisher = diagonal_fisher(params, ds, cfg, stream_index);
    carry.anchor.clear();
    for (const auto& t : params.tensors) carry.anchor.emplace_back(t.data().begin(), t.data().end());
  }
  if (uses_rehearsal(cfg.method)) {
    std::vector<std::size_t> idx(ds.train.count);
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = make_stream(cfg.run_seed, "rehearsal", stream_index);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t px = ds.spec.height * ds.spec.width;
    for (std::size_t k = 0; k < std::min(cfg.rehearsal_per_task, idx.size()); ++k) {
      const std::size_t i = idx[k];
      carry.buffer.push_back({std::vector<float>(ds.train.images.begin() + i * px, ds.train.images.begin() + (i + 1) * px),
                              std::vector<std::uint8_t>(ds.train.masks.begin() + i * px,
                                                        ds.train.masks.begin() + (i + 1) * px)});
    }
  }
  ++carry.stages_done;
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation

/// 2|A n B| / (|A| + |B|) for class c; 1 when both masks lack c.
inline double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t c) {
  if (pred.size() != truth.size()) throw ShapeError("dsc: masks differ in size");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == c, t = truth[i] == c;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Argmax label maps for every item of a split.
inline std::vector<std::uint8_t> predict(const ModelParams<float>& params, const Split& split, const TaskSpec& spec,
                                         std::size_t batch = 16) {
  NoGradGuard guard;
  const std::size_t px = spec.height * spec.width, ch = params.num_classes + 1;
  std::vector<std::uint8_t> out(split.count * px);
  for (std::size_t start = 0; start < split.count; start += batch) {
    std::vector<std::size_t> items(std::min(batch, split.count - start));
    std::iota(items.begin(), items.end(), start);
    const auto fwd = forward(params, image_batch<float>(split, spec, items));
    const auto logits = fwd.logits.data();
    for (std::size_t b = 0; b < items.size(); ++b)
      for (std::size_t i = 0; i < px; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < ch; ++c)
          if (logits[(b * ch + c) * px + i] > logits[(b * ch + best) * px + i]) best = c;
        out[(start + b) * px + i] = static_cast<std::uint8_t>(best);
      }
  }
  return out;
}

/// Per-item mean foreground DSC on a split.
inline std::vector<double> evaluate(const ModelParams<float>& params, const Dataset& ds, std::string_view split_name = "test") {
  const auto& split = ds.split(split_name);
  const auto pred = predict(params, split, ds.spec);
  const std::size_t px = ds.spec.height * ds.spec.width, C = ds.spec.num_classes();
  std::vector<double> scores;
  for (std::size_t i = 0; i < split.count; ++i) {
    std::span<const std::uint8_t> p(pred.data() + i * px, px), t(split.masks.data() + i * px, px);
    double s = 0;
    for (std::size_t c = 1; c <= C; ++c) s += dsc(p, t, static_cast<std::uint8_t>(c));
    scores.push_back(s / static_cast<double>(C));
  }
  return scores;
}

/// Per-class DSC pooled as the mean over items, classes 1..C.
inline std::vector<double> evaluate_per_class(const ModelParams<float>& params, const Dataset& ds,
                                              std::string_view split_name) {
  const auto& split = ds.split(split_name);
  const auto pred = predict(params, split, ds.spec);
  const std::size_t px = ds.spec.height * ds.spec.width, C = ds.spec.num_classes();
  std::vector<double> out(C, 0.0);
  for (std::size_t i = 0; i < split.count; ++i) {
    std::span<const std::uint8_t> p(pred.data() + i * px, px), t(split.masks.data() + i * px, px);
    for (std::size_t c = 1; c <= C; ++c) out[c - 1] += dsc(p, t, static_cast<std::uint8_t>(c));
  }
  for (auto& v : out) v /= static_cast<double>(std::max<std::size_t>(1, split.count));
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ValidationError("mean of an empty score list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Score matrix and metrics

/// R[i][j]: DSC on task j after stage i; b[j]: DSC of a model trained on task j alone.
struct ScoreMatrix {
  std::vector<std::vector<double>> R;
  std::vector<double> b;
  // Raw per-item scores behind R and b, when available.
  std::vector<std::vector<std::vector<double>>> raw_R;
  std::vector<std::vector<double>> raw_b;

  std::size_t tasks() const { return b.size(); }
};

struct ContinualMetrics {
  double mean_dsc = 0, bwt = 0, fwt = 0;
};

inline ContinualMetrics continual_metrics(const ScoreMatrix& S) {
  const std::size_t T = S.b.size();
  if (T < 2) throw ValidationError("continual_metrics: need at least 2 tasks");
  if (S.R.size() != T) throw ValidationError("continual_metrics: score matrix is incomplete");
  for (const auto& row : S.R) {
    if (row.size() != T) throw ValidationError("continual_metrics: score matrix is incomplete");
    for (double v : row)
      if (!std::isfinite(v)) throw ValidationError("continual_metrics: score matrix is incomplete");
  }
  for (double v : S.b)
    if (!std::isfinite(v)) throw ValidationError("continual_metrics: baselines are incomplete");
  ContinualMetrics m;
  for (std::size_t j = 0; j < T; ++j) m.mean_dsc += S.R[T - 1][j];
  m.mean_dsc /= static_cast<double>(T);
  for (std::size_t j = 0; j + 1 < T; ++j) m.bwt += S.R[T - 1][j] - S.R[j][j];
  m.bwt /= static_cast<double>(T - 1);
  for (std::size_t j = 1; j < T; ++j) m.fwt += S.R[j - 1][j] - S.b[j];
  m.fwt /= static_cast<double>(T - 1);
  return m;
}

// ---------------------------------------------------------------------------
// Sequences

inline constexpr std::size_t kProbePixels = 512;

/// Fixed probe set: stratified pixels of the first task's validation split.
struct ProbeSet {
  std::vector<std::size_t> pixels;  // flat indices b*H*W + y*W + x into the split
  std::vector<int> labels;
};

inline ProbeSet make_probe(const Dataset& first, std::uint64_t run_seed, std::size_t total = kProbePixels) {
  const auto& split = first.val;
  if (split.count == 0) throw ValidationError("probe: task '" + first.spec.task_id + "' has an empty validation split");
  const std::size_t classes = first.spec.num_classes() + 1;
  std::vector<std::vector<std::size_t>> pools(classes);
  for (std::size_t i = 0; i < split.masks.size(); ++i) pools[split.masks[i]].push_back(i);
  auto rng = make_stream(run_seed, "probe");
  ProbeSet probe;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& pool = pools[c];
    const std::size_t quota = total / classes + (c < total % classes ? 1 : 0);
    const std::size_t take = std::min(quota, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(take);
    std::sort(pool.begin(), pool.end());
    probe.pixels.insert(probe.pixels.end(), pool.begin(), pool.end());
    probe.labels.insert(probe.labels.end(), take, static_cast<int>(c));
  }
  return probe;
}

inline LatentSnapshot probe_snapshot(const ModelParams<float>& params, const Dataset& first, const ProbeSet& probe,
                                     std::size_t stage) {
  NoGradGuard guard;
  const std::size_t px = first.spec.height * first.spec.width, d = params.plan.latent_dim();
  Eigen::MatrixXd emb(static_cast<Eigen::Index>(probe.pixels.size()), static_cast<Eigen::Index>(d));
  // Forward one image at a time and pick its probe rows.
  std::vector<std::size_t> order(probe.pixels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probe.pixels[a] / px < probe.pixels[b] / px; });
  std::size_t cached = std::numeric_limits<std::size_t>::max();
  Tensor<float> latents;
  for (std::size_t k : order) {
    const std::size_t item = probe.pixels[k] / px, pixel = probe.pixels[k] % px;
    if (item != cached) {
      const std::size_t one[1] = {item};
      latents = forward(params, image_batch<float>(first.val, first.spec, one)).latents;
      cached = item;
    }
    auto z = latents.data();
    for (std::size_t j = 0; j < d; ++j) emb(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = z[j * px + pixel];
  }
  return make_snapshot(stage, std::move(emb), probe.labels, first.spec.num_classes());
}

struct Baselines {
  std::vector<double> b;
  std::vector<std::vector<double>> raw;
};

// Baselines use a stream namespace disjoint from the sequence stages.
inline constexpr std::uint64_t kBaselineStreamOffset = 1000;

/// b[j]: a fresh model trained on task j alone with plain segmentation loss.
/// Independent of the method, so every method sharing a seed shares b.
inline Baselines train_baselines(const std::vector<Dataset>& tasks, const MethodConfig& cfg) {
  MethodConfig plain = cfg;
  plain.method = Method::seq;
  Baselines out;
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    auto params = init_params<float>(cfg.run_seed, tasks[j].spec.num_classes());
    auto carry = CarryState::for_method(Method::seq);
    train_stage(params, tasks[j], plain, carry, kBaselineStreamOffset + j);
    out.raw.push_back(evaluate(params, tasks[j]));
    out.b.push_back(mean_of(out.raw.back()));
  }
  return out;
}

struct SequenceResult {
  ScoreMatrix scores;
  std::vector<LatentSnapshot> snapshots;
  std::vector<StageLog> logs;
};

using StageCallback = std::function<void(std::size_t stage, const ModelParams<float>&, const SequenceResult&)>;

/// Trains the tasks in order. After every stage the full row of R is
/// evaluated and a probe snapshot recorded; `on_stage` (if set) runs after each
/// stage so partial results survive a later failure.
inline SequenceResult run_sequence(const std::vector<Dataset>& tasks, const MethodConfig& cfg,
                                   std::optional<Baselines> baselines = std::nullopt,
                                   const StageCallback& on_stage = {}) {
  cfg.validate();
  if (tasks.size() < 2) throw ValidationError("run_sequence: need at least 2 tasks");
  const auto& first = tasks.front().spec;
  for (const auto& t : tasks) {
    if (t.spec.num_classes() != first.num_classes() || t.spec.height != first.height || t.spec.width != first.width) {
      throw ValidationError("run_sequence: task '" + t.spec.task_id + "' differs in class count or image size");
    }
  }
  SequenceResult res;
  auto params = init_params<float>(cfg.run_seed, first.num_classes());
  auto carry = CarryState::for_method(cfg.method);
  const auto probe = make_probe(tasks.front(), cfg.run_seed);
  const std::size_t T = tasks.size();
  for (std::size_t i = 0; i < T; ++i) {
    res.logs.push_back(train_stage(params, tasks[i], cfg, carry, i));
    std::vector<double> row;
    std::vector<std::vector<double>> raw_row;
    for (std::size_t j = 0; j < T; ++j) {
      raw_row.push_back(evaluate(params, tasks[j]));
      row.push_back(mean_of(raw_row.back()));
    }
    res.scores.R.push_back(std::move(row));
    res.scores.raw_R.push_back(std::move(raw_row));
    res.snapshots.push_back(probe_snapshot(params, tasks.front(), probe, i + 1));
    if (on_stage) on_stage(i + 1, params, res);
  }
  if (!baselines) baselines = train_baselines(tasks, cfg);
  if (baselines->b.size() != T) throw ValidationError("run_sequence: baseline count differs from task count");
  res.scores.b = baselines->b;
  res.scores.raw_b = baselines->raw;
  return res;
}

}  // namespace segreg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "segreg/checkpoint.hpp"
#include "segreg/json_io.hpp"
#include "segreg/latent.hpp"
#include "segreg/rng.hpp"
#include "segreg/tensor.hpp"

namespace segreg {

enum class ShapeKind { disk, ring, rectangle };

inline std::string_view shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::ring: return "ring";
    case ShapeKind::rectangle: return "rectangle";
  }
  return "?";
}

inline ShapeKind shape_kind_from_name(std::string_view name) {
  if (name == "disk") return ShapeKind::disk;
  if (name == "ring") return ShapeKind::ring;
  if (name == "rectangle") return ShapeKind::rectangle;
  throw ValidationError("unknown shape kind '" + std::string(name) + "' (expected disk, ring or rectangle)");
}

struct Appearance {
  double mean = 0.5;
  double std = 0.0;  // per-sample jitter of the class intensity

  bool operator==(const Appearance&) const = default;
};

/// One synthetic segmentation task. `appearance[0]` is the background.
struct TaskSpec {
  std::string task_id = "task";
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<ShapeKind> classes{ShapeKind::disk};
  std::vector<Appearance> appearance{{0.2, 0.02}, {0.7, 0.05}};
  double noise_sigma = 0.05;
  double gamma = 1.0;
  int blur_radius = 1;
  std::size_t n_train = 64;
  std::size_t n_val = 16;
  std::size_t n_test = 32;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return classes.size(); }
  bool operator==(const TaskSpec&) const = default;

  void validate() const {
    const std::string where = "task '" + task_id + "'";
    if (task_id.empty()) throw ValidationError("task_id: must not be empty");
    if (height == 0 || width == 0) throw ValidationError(where + ": image_size must be positive");
    if (classes.empty() || classes.size() > 3) throw ValidationError(where + ": classes must list 1 to 3 shapes");
    if (appearance.size() != classes.size() + 1) {
      throw ValidationError(where + ": appearance needs one entry per class plus background");
    }
    for (const auto& a : appearance) {
      if (!std::isfinite(a.mean) || !(a.std >= 0.0) || !std::isfinite(a.std)) {
        throw ValidationError(where + ": appearance mean must be finite and std >= 0");
      }
    }
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ValidationError(where + ": noise_sigma must be >= 0");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ValidationError(where + ": gamma must be > 0");
    if (blur_radius < 0) throw ValidationError(where + ": blur_radius must be >= 0");
  }
};

inline OrderedJson to_json(const TaskSpec& s) {
  OrderedJson classes = OrderedJson::array(), appearance = OrderedJson::array();
  for (auto k : s.classes) classes.push_back(shape_kind_name(k));
  for (const auto& a : s.appearance) appearance.push_back({{"mean", a.mean}, {"std", a.std}});
  return {{"task_id", s.task_id},
          {"image_size", {s.height, s.width}},
          {"classes", classes},
          {"appearance", appearance},
          {"noise_sigma", s.noise_sigma},
          {"gamma", s.gamma},
          {"blur_radius", s.blur_radius},
          {"n_train", s.n_train},
          {"n_val", s.n_val},
          {"n_test", s.n_test},
          {"seed", s.seed}};
}

inline TaskSpec task_spec_from_json(const Json& j, const std::string& where = "task") {
  detail::require_known_keys(j,
                             {"task_id", "image_size", "classes", "appearance", "noise_sigma", "gamma", "blur_radius",
                              "n_train", "n_val", "n_test", "seed"},
                             where);
  TaskSpec s;
  detail::read_required(j, "task_id", s.task_id, where);
  if (j.contains("image_size")) {
    std::vector<std::size_t> size;
    detail::read_field(j, "image_size", size, where);
    if (size.size() != 2) throw ValidationError(where + ".image_size: expected [H, W]");
    s.height = size[0];
    s.width = size[1];
  }
  if (j.contains("classes")) {
    std::vector<std::string> names;
    detail::read_field(j, "classes", names, where);
    s.classes.clear();
    for (const auto& n : names) s.classes.push_back(shape_kind_from_name(n));
  }
  if (j.contains("appearance")) {
    const auto& arr = j.at("appearance");
    if (!arr.is_array()) throw ValidationError(where + ".appearance: expected an array");
    s.appearance.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string w = where + ".appearance[" + std::to_string(i) + "]";
      detail::require_known_keys(arr[i], {"mean", "std"}, w);
      Appearance a;
      detail::read_field(arr[i], "mean", a.mean, w);
      detail::read_field(arr[i], "std", a.std, w);
      s.appearance.push_back(a);
    }
  }
  detail::read_field(j, "noise_sigma", s.noise_sigma, where);
  detail::read_field(j, "gamma", s.gamma, where);
  detail::read_field(j, "blur_radius", s.blur_radius, where);
  detail::read_field(j, "n_train", s.n_train, where);
  detail::read_field(j, "n_val", s.n_val, where);
  detail::read_field(j, "n_test", s.n_test, where);
  detail::read_field(j, "seed", s.seed, where);
  s.validate();
  return s;
}

/// Appearance-only change applied by domain_shift. Geometry is untouched.
struct AppearanceDelta {
  std::string name = "shift";
  std::vector<double> mean_delta;  // empty, or one entry per class plus background
  std::vector<double> std_delta;
  double noise_sigma_delta = 0.0;
  double gamma_delta = 0.0;
  int blur_delta = 0;
};

inline TaskSpec domain_shift(const TaskSpec& base, const AppearanceDelta& delta) {
  TaskSpec out = base;
  out.task_id = base.task_id + "+" + delta.name;
  auto apply = [&](const std::vector<double>& d, auto member, const char* field) {
    if (d.empty()) return;
    if (d.size() != out.appearance.size()) {
      throw ValidationError(std::string("domain_shift: ") + field + " needs one entry per class plus background");
    }
    for (std::size_t i = 0; i < d.size(); ++i) out.appearance[i].*member += d[i];
  };
  apply(delta.mean_delta, &Appearance::mean, "mean_delta");
  apply(delta.std_delta, &Appearance::std, "std_delta");
  out.noise_sigma += delta.noise_sigma_delta;
  out.gamma += delta.gamma_delta;
  out.blur_radius += delta.blur_delta;
  out.validate();
  return out;
}

struct Sample {
  std::vector<float> image;         // (H, W), values in [0, 1]
  std::vector<std::uint8_t> mask;   // (H, W), labels 0..C
};

struct Split {
  std::size_t count = 0;
  std::vector<float> images;        // count * H * W
  std::vector<std::uint8_t> masks;  // count * H * W

  bool operator==(const Split&) const = default;
};

struct Dataset {
  TaskSpec spec;
  Split train, val, test;

  const Split& split(std::string_view name) const { return const_cast<Dataset&>(*this).split(name); }
  Split& split(std::string_view name) {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ValidationError("unknown split '" + std::string(name) + "'");
  }
};

inline constexpr std::size_t kMinClassPixels = 25;
inline constexpr int kPlacementAttempts = 200;

namespace detail {

struct ShapeDraw {
  ShapeKind kind;
  double cy, cx, a, b;  // centre; disk/ring radii (outer, inner) or rectangle half sizes
};

inline bool covers(const ShapeDraw& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  switch (s.kind) {
    case ShapeKind::disk: return dy * dy + dx * dx <= s.a * s.a;
    case ShapeKind::ring: {
      const double r2 = dy * dy + dx * dx;
      return r2 <= s.a * s.a && r2 >= s.b * s.b;
    }
    case ShapeKind::rectangle: return std::abs(dy) <= s.a && std::abs(dx) <= s.b;
  }
  return false;
}

inline ShapeDraw draw_shape(ShapeKind kind, std::size_t H, std::size_t W, Rng& rng) {
  const double S = static_cast<double>(std::min(H, W));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ShapeDraw s{kind, 0, 0, 0, 0};
  double ey = 0, ex = 0;
  switch (kind) {
    case ShapeKind::disk:
      s.a = S * (0.10 + 0.10 * u(rng));
      ey = ex = s.a;
      break;
    case ShapeKind::ring:
      s.a = S * (0.14 + 0.10 * u(rng));
      s.b = s.a * (0.45 + 0.15 * u(rng));
      ey = ex = s.a;
      break;
    case ShapeKind::rectangle:
      s.a = S * (0.08 + 0.12 * u(rng));
      s.b = S * (0.08 + 0.12 * u(rng));
      ey = s.a;
      ex = s.b;
      break;
  }
  // Keep the shape inside the image when possible.
  auto centre = [&](double extent, std::size_t n) {
    const double lo = extent, hi = static_cast<double>(n) - extent;
    return hi > lo ? lo + (hi - lo) * u(rng) : 0.5 * static_cast<double>(n);
  };
  s.cy = centre(ey, H);
  s.cx = centre(ex, W);
  return s;
}

inline void box_blur(std::vector<double>& img, std::size_t H, std::size_t W) {
  std::vector<double> out(img.size());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(H) - 1));
          const auto xx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(W) - 1));
          s += img[yy * W + xx];
        }
      out[y * W + x] = s / 9.0;
    }
  img.swap(out);
}

}  // namespace detail

/// Label map of sample `index` (global over train, val, test). Depends only on
/// the geometry fields and seed, so appearance shifts leave it unchanged.
inline std::vector<std::uint8_t> generate_mask(const TaskSpec& spec, std::size_t index) {
  const std::size_t H = spec.height, W = spec.width;
  auto rng = make_stream(spec.seed, "geometry", index);
  std::vector<std::uint8_t> mask(H * W);
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    std::fill(mask.begin(), mask.end(), 0);
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      const auto shape = detail::draw_shape(spec.classes[c], H, W, rng);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          if (detail::covers(shape, y + 0.5, x + 0.5)) mask[y * W + x] = static_cast<std::uint8_t>(c + 1);
    }
    std::vector<std::size_t> counts(spec.classes.size() + 1, 0);
    for (auto v : mask) ++counts[v];
    if (std::all_of(counts.begin() + 1, counts.end(), [](std::size_t n) { return n >= kMinClassPixels; })) return mask;
  }
  throw ValidationError("task '" + spec.task_id + "': image too small to place all shapes with " +
                        std::to_string(kMinClassPixels) + " visible pixels each");
}

inline Sample generate_sample(const TaskSpec& spec, std::size_t index) {
  const std::size_t H = spec.height, W = spec.width;
  Sample s;
  s.mask = generate_mask(spec, index);
  auto rng = make_stream(spec.seed, "appearance", index);
  std::normal_distribution<double> normal;
  std::vector<double> level(spec.appearance.size());
  for (std::size_t c = 0; c < level.size(); ++c) {
    const auto& a = spec.appearance[c];
    level[c] = a.std > 0.0 ? a.mean + a.std * normal(rng) : a.mean;
  }
  std::vector<double> img(H * W);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::clamp(level[s.mask[i]], 0.0, 1.0);
  if (spec.gamma != 1.0)
    for (auto& v : img) v = std::pow(v, spec.gamma);
  for (int r = 0; r < spec.blur_radius; ++r) detail::box_blur(img, H, W);
  if (spec.noise_sigma > 0.0)
    for (auto& v : img) v += spec.noise_sigma * normal(rng);
  s.image.resize(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) s.image[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
  return s;
}

inline Dataset generate_task(const TaskSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  const std::size_t px = spec.height * spec.width;
  std::size_t index = 0;
  for (auto [split, n] : {std::pair{&ds.train, spec.n_train}, {&ds.val, spec.n_val}, {&ds.test, spec.n_test}}) {
    split->count = n;
    split->images.reserve(n * px);
    split->masks.reserve(n * px);
    for (std::size_t i = 0; i < n; ++i, ++index) {
      auto s = generate_sample(spec, index);
      split->images.insert(split->images.end(), s.image.begin(), s.image.end());
      split->masks.insert(split->masks.end(), s.mask.begin(), s.mask.end());
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Built-in task sequences

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"prostate-like", "cardiac-like", "hippocampus-like"};
  return names;
}

/// Ordered task sequence of a preset. Every stage after the first is an
/// appearance shift of the first task drawn with its own geometry seed.
inline std::vector<TaskSpec> preset_tasks(std::string_view name) {
  TaskSpec base;
  base.height = base.width = 32;
  base.noise_sigma = 0.04;
  base.blur_radius = 1;
  base.n_train = 48;
  base.n_val = 16;
  base.n_test = 32;
  std::vector<AppearanceDelta> shifts;
  if (name == "prostate-like") {
    base.task_id = "prostate-site1";
    base.classes = {ShapeKind::disk};
    base.appearance = {{0.25, 0.03}, {0.65, 0.05}};
    shifts = {{"site2", {0.45, -0.40}, {}, 0.02, 0.0, 0},
              {"site3", {-0.15, 0.20}, {}, 0.02, 0.8, 0},
              {"site4", {0.35, 0.30}, {}, 0.0, 0.0, 1}};
  } else if (name == "cardiac-like") {
    base.task_id = "cardiac-site1";
    base.classes = {ShapeKind::ring, ShapeKind::disk, ShapeKind::rectangle};
    base.appearance = {{0.15, 0.03}, {0.45, 0.04}, {0.75, 0.04}, {0.95, 0.03}};
    shifts = {{"site2", {0.70, 0.10, -0.50, -0.90}, {}, 0.02, 0.0, 0},
              {"site3", {0.35, 0.45, -0.60, -0.25}, {}, 0.02, 0.0, 0}};
  } else if (name == "hippocampus-like") {
    base.task_id = "hippocampus-site1";
    base.classes = {ShapeKind::disk, ShapeKind::rectangle};
    base.appearance = {{0.20, 0.03}, {0.55, 0.04}, {0.85, 0.04}};
    shifts = {{"site2", {0.60, -0.10, -0.75}, {}, 0.02, 0.0, 0},
              {"site3", {0.30, 0.35, -0.75}, {}, 0.03, 0.0, 1}};
  } else {
    throw ValidationError("unknown preset '" + std::string(name) + "'");
  }
  base.seed = stream_seed(1, name, 0);
  std::vector<TaskSpec> tasks{base};
  for (std::size_t i = 0; i < shifts.size(); ++i) {
    auto t = domain_shift(base, shifts[i]);
    t.task_id = base.task_id.substr(0, base.task_id.find('-')) + "-" + shifts[i].name;
    t.seed = stream_seed(1, name, i + 1);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Batching

template <class T>
Tensor<T> image_batch(const Split& split, const TaskSpec& spec, std::span<const std::size_t> items) {
  const std::size_t px = spec.height * spec.width;
  std::vector<T> v;
  v.reserve(items.size() * px);
  for (auto i : items) {
    if (i >= split.count) throw ValidationError("image_batch: sample index out of range");
    v.insert(v.end(), split.images.begin() + i * px, split.images.begin() + (i + 1) * px);
  }
  return Tensor<T>({items.size(), 1, spec.height, spec.width}, std::move(v));
}

inline LabelBatch label_batch(const Split& split, const TaskSpec& spec, std::span<const std::size_t> items) {
  const std::size_t px = spec.height * spec.width;
  LabelBatch l{items.size(), spec.height, spec.width, {}};
  l.values.reserve(items.size() * px);
  for (auto i : items) {
    if (i >= split.count) throw ValidationError("label_batch: sample index out of range");
    l.values.insert(l.values.end(), split.masks.begin() + i * px, split.masks.begin() + (i + 1) * px);
  }
  return l;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json plus <split>.bin holding float32 LE images
// followed by uint8 masks.

inline constexpr int kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  OrderedJson splits = OrderedJson::object();
  for (std::string_view name : {"train", "val", "test"}) {
    const auto& s = ds.split(name);
    std::string bytes;
    bytes.reserve(s.images.size() * 5);
    detail::append_f32_le(bytes, s.images);
    bytes.append(reinterpret_cast<const char*>(s.masks.data()), s.masks.size());
    const std::string file = std::string(name) + ".bin";
    detail::write_file(dir / file, bytes);
    splits[std::string(name)] = {{"count", s.count}, {"file", file}};
  }
  OrderedJson manifest = {{"format", "segreg-dataset"},
                          {"format_version", kDatasetVersion},
                          {"height", ds.spec.height},
                          {"width", ds.spec.width},
                          {"num_classes", ds.spec.num_classes()},
                          {"spec", to_json(ds.spec)},
                          {"splits", splits}};
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) throw IoError("dataset: no manifest.json in " + dir.string());
  const Json manifest = detail::parse_json(detail::read_file(dir / "manifest.json"), (dir / "manifest.json").string());
  if (manifest.value("format", "") != "segreg-dataset" || manifest.value("format_version", 0) != kDatasetVersion) {
    throw IoError("dataset: unsupported format in " + dir.string());
  }
  Dataset ds;
  ds.spec = task_spec_from_json(manifest.at("spec"), "dataset spec");
  const std::size_t px = ds.spec.height * ds.spec.width;
  for (std::string_view name : {"train", "val", "test"}) {
    const auto& entry = manifest.at("splits").at(std::string(name));
    Split& s = ds.split(name);
    s.count = entry.at("count").get<std::size_t>();
    const std::size_t expected = name == "train" ? ds.spec.n_train : name == "val" ? ds.spec.n_val : ds.spec.n_test;
    if (s.count != expected) throw IoError("dataset: " + std::string(name) + " count disagrees with spec");
    const std::string bytes = detail::read_file(dir / entry.at("file").get<std::string>());
    if (bytes.size() != s.count * px * 5) throw IoError("dataset: " + std::string(name) + " split has wrong size");
    s.images = detail::read_f32_le(bytes.data(), s.count * px);
    s.masks.assign(bytes.begin() + static_cast<std::ptrdiff_t>(s.count * px * 4), bytes.end());
    for (auto m : s.masks)
      if (m > ds.spec.num_classes()) throw IoError("dataset: mask label out of range in " + std::string(name));
  }
  return ds;
}

}  // namespace segreg

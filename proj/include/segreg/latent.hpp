#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "segreg/tensor.hpp"

namespace segreg {

// Integer label maps for a batch, row-major (batch, H, W).
struct LabelBatch {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  std::size_t pixels() const { return batch * height * width; }

  void validate(std::size_t num_classes) const {
    if (values.size() != pixels()) throw ShapeError("labels: size does not match (batch,H,W)");
    for (auto v : values) {
      if (v > num_classes) {
        throw ValidationError("labels: value " + std::to_string(v) + " outside 0.." + std::to_string(num_classes));
      }
    }
  }
};

/// Sampled per-pixel embeddings (rows z_i) with their ground-truth classes.
///
/// Labels range over 0..num_classes, with 0 the background.
template <class T>
struct LatentBatch {
  Tensor<T> embeddings;  // (N, d)
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return embeddings.dim(1); }

  // Row indices per class 0..num_classes; together they partition 0..N-1.
  std::vector<std::vector<std::size_t>> index_sets() const {
    std::vector<std::vector<std::size_t>> sets(num_classes + 1);
    for (std::size_t i = 0; i < labels.size(); ++i) sets.at(static_cast<std::size_t>(labels[i])).push_back(i);
    return sets;
  }

  void validate() const {
    if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
      throw ShapeError("latent batch: embeddings " + shape_str(embeddings.shape()) + " do not match " +
                       std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) > num_classes) {
        throw ValidationError("latent batch: label " + std::to_string(l) + " out of range");
      }
    }
  }
};

}  // namespace segreg

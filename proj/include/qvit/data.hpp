// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qvit/config.hpp"
#include "qvit/rng.hpp"
#include "qvit/tensor.hpp"

namespace qvit {

// Image classification set. Images are flat CHW doubles in [-1, 1].
struct Dataset {
  long channels = 0;
  long height = 0;
  long width = 0;
  std::vector<std::vector<double>> images;
  std::vector<int> labels;
  std::string split;

  size_t size() const { return images.size(); }
  long pixels() const { return channels * height * width; }
  // Throws ValueError when a label is out of range or a pixel non-finite.
  void validate(long num_classes) const;
};

// Per-class template images, uniform(-1, 1), fixed by the seed alone.
std::vector<std::vector<double>> synthetic_templates(std::uint64_t seed,
                                                     const ModelConfig& cfg);

// Separable-by-construction synthetic data: sample s carries label s mod
// num_classes and equals that class's template plus Gaussian noise
// (noise_sigma), clipped to [-1, 1]. Deterministic per (seed, count), and a
// longer run extends a shorter one sample-for-sample.
Dataset gen_synthetic(std::uint64_t seed, long count, const ModelConfig& cfg,
                      double noise_sigma = 0.3,
                      const std::string& split = "train");

// Fraction of samples whose nearest template (L2) is their label. Verifies
// separability independently of any model.
double nearest_template_accuracy(const Dataset& ds,
                                 const std::vector<std::vector<double>>& tpl);

// IDX-format pair (big-endian magics 0x00000803 / 0x00000801). Pixels map
// through (p / 255 - 0.5) / 0.5. Errors: BadMagicError, TruncatedError,
// CountMismatchError; IoError when a file cannot be opened.
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);

// Inverse of load_idx for single-channel byte-representable data.
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path);

struct Batch {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

// Index batches covering the dataset exactly once; seeded Fisher-Yates
// permutation when shuffle is set; the final short batch is kept.
std::vector<std::vector<size_t>> batch_indices(size_t count, size_t batch_size,
                                               Rng& rng, bool shuffle);

// Materializes one batch as leaf tensors.
Batch gather(const Dataset& ds, const std::vector<size_t>& indices);

}  // namespace qvit

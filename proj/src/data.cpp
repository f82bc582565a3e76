// SPDX-License-Identifier: Apache-2.0
#include "qvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>

#include "fmt/format.h"

namespace qvit {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw TruncatedError("truncated IDX header: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

double normalize_pixel(unsigned char p) {
  return (static_cast<double>(p) / 255.0 - 0.5) / 0.5;
}

std::vector<std::vector<double>> draw_templates(Rng& rng,
                                                const ModelConfig& cfg) {
  const size_t pixels = static_cast<size_t>(cfg.in_channels) *
                        static_cast<size_t>(cfg.image_size) *
                        static_cast<size_t>(cfg.image_size);
  std::vector<std::vector<double>> tpl(static_cast<size_t>(cfg.num_classes));
  for (auto& t : tpl) {
    t.resize(pixels);
    for (double& v : t) v = rng.uniform(-1.0, 1.0);
  }
  return tpl;
}

}  // namespace

void Dataset::validate(long num_classes) const {
  if (images.size() != labels.size())
    throw ValueError("dataset: image/label count mismatch");
  for (size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ValueError(fmt::format("dataset: label {} outside [0, {})",
                                   labels[i], num_classes));
    if (static_cast<long>(images[i].size()) != pixels())
      throw ValueError("dataset: inconsistent image size");
    for (double v : images[i]) {
      if (!std::isfinite(v)) throw ValueError("dataset: non-finite pixel");
    }
  }
}

std::vector<std::vector<double>> synthetic_templates(std::uint64_t seed,
                                                     const ModelConfig& cfg) {
  Rng rng(seed);
  return draw_templates(rng, cfg);
}

Dataset gen_synthetic(std::uint64_t seed, long count, const ModelConfig& cfg,
                      double noise_sigma, const std::string& split) {
  if (count <= 0) throw ValueError("gen_synthetic: count must be positive");
  // The template stream is consumed first, then the noise stream continues
  // from it, so a longer run extends a shorter one sample-for-sample.
  Rng rng(seed);
  std::vector<std::vector<double>> tpl = draw_templates(rng, cfg);
  const size_t pixels = tpl.empty() ? 0 : tpl[0].size();

  Dataset ds;
  ds.channels = cfg.in_channels;
  ds.height = cfg.image_size;
  ds.width = cfg.image_size;
  ds.split = split;
  ds.images.reserve(static_cast<size_t>(count));
  ds.labels.reserve(static_cast<size_t>(count));
  for (long s = 0; s < count; ++s) {
    int label = static_cast<int>(s % cfg.num_classes);
    std::vector<double> img(pixels);
    const auto& t = tpl[static_cast<size_t>(label)];
    for (size_t i = 0; i < pixels; ++i) {
      double v = t[i] + rng.normal(0.0, noise_sigma);
      img[i] = std::min(std::max(v, -1.0), 1.0);
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

double nearest_template_accuracy(
    const Dataset& ds, const std::vector<std::vector<double>>& tpl) {
  if (ds.size() == 0) throw ValueError("nearest_template_accuracy: empty set");
  size_t hits = 0;
  for (size_t s = 0; s < ds.size(); ++s) {
    double best = std::numeric_limits<double>::infinity();
    size_t best_k = 0;
    for (size_t k = 0; k < tpl.size(); ++k) {
      double dist = 0.0;
      for (size_t i = 0; i < tpl[k].size(); ++i) {
        double d = ds.images[s][i] - tpl[k][i];
        dist += d * d;
      }
      if (dist < best) {
        best = dist;
        best_k = k;
      }
    }
    if (static_cast<int>(best_k) == ds.labels[s]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::ifstream img_in(images_path, std::ios::binary);
  if (!img_in) throw IoError("cannot open IDX image file: " + images_path);
  std::uint32_t magic = read_u32_be(img_in, images_path);
  if (magic != kImagesMagic)
    throw BadMagicError(fmt::format(
        "bad IDX image magic 0x{:08x} (expected 0x{:08x}) in {}", magic,
        kImagesMagic, images_path));
  const std::uint32_t count = read_u32_be(img_in, images_path);
  const std::uint32_t rows = read_u32_be(img_in, images_path);
  const std::uint32_t cols = read_u32_be(img_in, images_path);
  std::vector<unsigned char> pixels(static_cast<size_t>(count) * rows * cols);
  if (!img_in.read(reinterpret_cast<char*>(pixels.data()),
                   static_cast<std::streamsize>(pixels.size())))
    throw TruncatedError("truncated IDX image payload: " + images_path);
  if (img_in.peek() != std::char_traits<char>::eof())
    throw FormatError("trailing bytes after IDX image payload: " +
                      images_path);

  std::ifstream lab_in(labels_path, std::ios::binary);
  if (!lab_in) throw IoError("cannot open IDX label file: " + labels_path);
  magic = read_u32_be(lab_in, labels_path);
  if (magic != kLabelsMagic)
    throw BadMagicError(fmt::format(
        "bad IDX label magic 0x{:08x} (expected 0x{:08x}) in {}", magic,
        kLabelsMagic, labels_path));
  const std::uint32_t label_count = read_u32_be(lab_in, labels_path);
  if (label_count != count)
    throw CountMismatchError(
        fmt::format("IDX count mismatch: {} images vs {} labels", count,
                    label_count));
  std::vector<unsigned char> labels(label_count);
  if (!lab_in.read(reinterpret_cast<char*>(labels.data()),
                   static_cast<std::streamsize>(labels.size())))
    throw TruncatedError("truncated IDX label payload: " + labels_path);
  if (lab_in.peek() != std::char_traits<char>::eof())
    throw FormatError("trailing bytes after IDX label payload: " +
                      labels_path);

  Dataset ds;
  ds.channels = 1;
  ds.height = static_cast<long>(rows);
  ds.width = static_cast<long>(cols);
  ds.images.reserve(count);
  ds.labels.reserve(count);
  const size_t image_size = static_cast<size_t>(rows) * cols;
  for (std::uint32_t s = 0; s < count; ++s) {
    std::vector<double> img(image_size);
    for (size_t i = 0; i < image_size; ++i)
      img[i] = normalize_pixel(pixels[s * image_size + i]);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<int>(labels[s]));
  }
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path) {
  if (ds.channels != 1)
    throw ValueError("save_idx: IDX holds single-channel images");
  if (ds.images.size() != ds.labels.size())
    throw ValueError("save_idx: image/label count mismatch");

  std::ofstream img_out(images_path, std::ios::binary | std::ios::trunc);
  if (!img_out) throw IoError("cannot write IDX image file: " + images_path);
  write_u32_be(img_out, kImagesMagic);
  write_u32_be(img_out, static_cast<std::uint32_t>(ds.images.size()));
  write_u32_be(img_out, static_cast<std::uint32_t>(ds.height));
  write_u32_be(img_out, static_cast<std::uint32_t>(ds.width));
  for (const auto& img : ds.images) {
    for (double v : img) {
      // Inverse of the load normalization, clipped to the byte range.
      double p = round_even((v * 0.5 + 0.5) * 255.0);
      p = std::min(std::max(p, 0.0), 255.0);
      const char byte = static_cast<char>(static_cast<unsigned char>(p));
      img_out.write(&byte, 1);
    }
  }
  if (!img_out) throw IoError("failed writing IDX image file: " + images_path);

  std::ofstream lab_out(labels_path, std::ios::binary | std::ios::trunc);
  if (!lab_out) throw IoError("cannot write IDX label file: " + labels_path);
  write_u32_be(lab_out, kLabelsMagic);
  write_u32_be(lab_out, static_cast<std::uint32_t>(ds.labels.size()));
  for (int label : ds.labels) {
    if (label < 0 || label > 255)
      throw ValueError("save_idx: label outside byte range");
    const char byte = static_cast<char>(static_cast<unsigned char>(label));
    lab_out.write(&byte, 1);
  }
  if (!lab_out) throw IoError("failed writing IDX label file: " + labels_path);
}

std::vector<std::vector<size_t>> batch_indices(size_t count, size_t batch_size,
                                               Rng& rng, bool shuffle) {
  if (count == 0) throw ValueError("batch_indices: empty dataset");
  if (batch_size == 0) throw ValueError("batch_indices: zero batch size");
  std::vector<size_t> order(count);
  for (size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle) rng.shuffle(order);
  std::vector<std::vector<size_t>> batches;
  for (size_t begin = 0; begin < count; begin += batch_size) {
    size_t end = std::min(begin + batch_size, count);
    batches.emplace_back(order.begin() + static_cast<long>(begin),
                         order.begin() + static_cast<long>(end));
  }
  return batches;
}

Batch gather(const Dataset& ds, const std::vector<size_t>& indices) {
  Batch batch;
  batch.images.reserve(indices.size());
  batch.labels.reserve(indices.size());
  for (size_t idx : indices) {
    if (idx >= ds.size()) throw ValueError("gather: index out of range");
    batch.images.push_back(make_tensor(
        {ds.images[idx].size()}, ds.images[idx], /*requires_grad=*/false));
    batch.labels.push_back(ds.labels[idx]);
  }
  return batch;
}

}  // namespace qvit

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qaa/tensor.hpp"

namespace qaa {

/// Labelled images in [0, 1], stored [N, C, H, W].
struct Dataset {
  Tensor32 images;
  std::vector<int> labels;
  Index classes = 0;
  std::string split;
  std::string provenance;  // generator seed or source file hashes

  Index size() const { return static_cast<Index>(labels.size()); }
  Shape example_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  Dataset slice(Index begin, Index end) const;
  Dataset gather(const std::vector<Index>& idx) const;

  /// Throws ValidationError unless labels are in [0, classes), n >= 1 and
  /// pixels are in [0, 1].
  void validate() const;
};

/// Reads an IDX image file (magic 0x00000803, [n, rows, cols] unsigned bytes)
/// and an IDX label file (magic 0x00000801). Pixels are scaled by 1/255.
/// `classes` = 0 infers max(label) + 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, Index classes = 0);

/// Writes single-channel images as IDX, rounding pixels to the nearest 1/255.
void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path);

/// Class-conditional Gaussian blob images. Each class owns a smooth mean
/// pattern: a mid-grey background plus `bumps` Gaussian bumps of amplitude
/// +-contrast. Samples are the pattern shifted by up to max_shift pixels plus
/// i.i.d. N(0, noise^2) pixel noise, clamped to [0, 1]. With max_shift = 0
/// the classes are linearly separable whenever noise is well below the
/// smallest pattern distance; noise = 0 returns the mean patterns exactly.
struct SynthConfig {
  Index classes = 10;
  Index count = 1000;
  Index image_size = 16;
  Index channels = 1;
  double noise = 0.1;
  double contrast = 0.35;
  int bumps = 4;
  int max_shift = 0;
  std::uint64_t seed = 0;
  std::uint64_t pattern_seed = 0;  // shared by train/test splits of one task
};

Dataset synth_dataset(const SynthConfig& cfg);

/// Hex SHA-256 of a file or of a byte buffer; used in provenance records and
/// manifests.
std::string sha256_file(const std::string& path);
std::string sha256_bytes(const void* data, std::size_t size);

/// Hash of the dataset payload (pixels and labels).
std::string dataset_hash(const Dataset& data);

}  // namespace qaa

#pragma once

#include <array>
#include <string>
#include <vector>

#include "tmmnn/common.hpp"

namespace tmmnn {

// Exemplar/search set. Samples live in rows of an N x d matrix with every
// pixel in [0,1]; labels stay strictly below num_classes (the dummy class
// never appears in data).
struct Dataset {
  Mat samples;
  std::vector<int> labels;
  std::array<int, 3> extents{1, 0, 0};  // channels, height, width
  int num_classes = 0;
  std::string provenance;

  Index size() const { return samples.rows(); }
  Index dim() const { return samples.cols(); }
  void validate() const;
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

// Desk-scale stand-in for the image benchmarks: one random prototype per
// class plus Gaussian pixel jitter, clipped back into [0,1].
struct SyntheticSpec {
  int num_classes = 4;
  int side = 8;  // grayscale side x side
  std::uint64_t prototype_seed = 7001;
  Real jitter = Real(0.08);
  int samples_per_class = 250;

  void validate() const;
};

SplitDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Standard IDX container (big-endian u32 header words, u8 pixels scaled to
// [0,1] by /255). Errors name the offending byte offset.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& data, const std::string& images_path,
               const std::string& labels_path);

}  // namespace tmmnn

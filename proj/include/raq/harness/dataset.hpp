#pragma once

// Grayscale image sets: the synthetic-shapes generator and IDX (u8, 3-D)
// files. Pixels are stored row-major in [0, 1].

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "raq/harness/config.hpp"
#include "raq/tensor.hpp"

namespace raq::harness {

class idx_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // count × height × width

  std::size_t image_size() const { return height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }
};

/// `n` images of size×size, each holding 1 to 3 axis-aligned rectangles or
/// discs of random intensity in [0.3, 1] on a black background.
Dataset gen_synthetic_shapes(std::size_t n, std::size_t size, std::uint64_t seed);

/// IDX: magic 00 00 08 03, big-endian u32 count, rows, cols, then u8 pixels.
Dataset parse_idx(std::istream& is);
Dataset read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const Dataset& data);

/// Stacks the selected images into a B×1×H×W tensor.
Tensorf make_batch(const Dataset& data, std::span<const std::size_t> indices);

Dataset load_train_split(const ExperimentConfig& cfg);
/// Held-out split: the synthetic generator at data_seed + 1, or idx_eval_path.
Dataset load_eval_split(const ExperimentConfig& cfg);

}  // namespace raq::harness

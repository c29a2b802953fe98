#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace raq::harness {

/// 8-bit grayscale PNG; values in [0, 1] are clamped and rounded.
void write_png_gray(const std::filesystem::path& path, std::span<const float> pixels, std::size_t height,
                    std::size_t width);

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

GrayImage read_png_gray(const std::filesystem::path& path);

}  // namespace raq::harness

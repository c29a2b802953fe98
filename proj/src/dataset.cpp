#include "raq/harness/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "raq/io.hpp"

namespace raq::harness {

namespace {

void paint_shape(std::span<float> img, std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> intensity(0.3, 1.0);
  const float v = float(intensity(rng));
  const auto n = std::int64_t(size);
  if (std::bernoulli_distribution(0.5)(rng)) {
    std::uniform_int_distribution<std::int64_t> extent(3, n / 2);
    const auto w = extent(rng), h = extent(rng);
    const auto x0 = std::uniform_int_distribution<std::int64_t>(0, n - w)(rng);
    const auto y0 = std::uniform_int_distribution<std::int64_t>(0, n - h)(rng);
    for (auto y = y0; y < y0 + h; ++y)
      for (auto x = x0; x < x0 + w; ++x) img[std::size_t(y * n + x)] = v;
  } else {
    const double r = std::uniform_real_distribution<double>(2.0, double(n) / 4.0)(rng);
    const double cx = std::uniform_real_distribution<double>(r, double(n) - r)(rng);
    const double cy = std::uniform_real_distribution<double>(r, double(n) - r)(rng);
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
        if (dx * dx + dy * dy <= r * r) img[std::size_t(y * n + x)] = v;
      }
  }
}

std::uint32_t read_be32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (is.gcount() != 4) throw idx_error("IDX: truncated header");
  return std::uint32_t(b[0]) << 24 | std::uint32_t(b[1]) << 16 | std::uint32_t(b[2]) << 8 | std::uint32_t(b[3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  os.write(b, 4);
}

}  // namespace

Dataset gen_synthetic_shapes(std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size < 16) throw std::invalid_argument("gen_synthetic_shapes: size must be >= 16");
  Dataset d{n, size, size, std::vector<float>(n * size * size, 0.0f)};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> shapes(1, 3);
  for (std::size_t i = 0; i < n; ++i) {
    auto img = std::span<float>(d.pixels).subspan(i * size * size, size * size);
    const int count = shapes(rng);
    for (int s = 0; s < count; ++s) paint_shape(img, size, rng);
  }
  return d;
}

Dataset parse_idx(std::istream& is) {
  std::array<unsigned char, 4> magic{};
  is.read(reinterpret_cast<char*>(magic.data()), 4);
  if (is.gcount() != 4) throw idx_error("IDX: file shorter than its magic number");
  if (magic != std::array<unsigned char, 4>{0x00, 0x00, 0x08, 0x03}) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "IDX: bad magic %02x %02x %02x %02x, expected 00 00 08 03 (u8, 3-D)", magic[0],
                  magic[1], magic[2], magic[3]);
    throw idx_error(buf);
  }
  Dataset d;
  d.count = read_be32(is);
  d.height = read_be32(is);
  d.width = read_be32(is);
  if (d.height == 0 || d.width == 0) throw idx_error("IDX: zero image dimension");
  const std::size_t total = d.count * d.height * d.width;
  std::vector<unsigned char> raw(total);
  is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(total));
  if (std::size_t(is.gcount()) != total)
    throw idx_error("IDX: truncated payload, expected " + std::to_string(total) + " bytes, got " +
                    std::to_string(is.gcount()));
  d.pixels.resize(total);
  std::transform(raw.begin(), raw.end(), d.pixels.begin(), [](unsigned char c) { return float(c) / 255.0f; });
  return d;
}

Dataset read_idx(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw idx_error("cannot open " + path.string());
  try {
    return parse_idx(is);
  } catch (const idx_error& e) {
    throw idx_error(path.string() + ": " + e.what());
  }
}

void write_idx(const std::filesystem::path& path, const Dataset& data) {
  io::write_atomically(path, [&](std::ostream& os) {
    os.write("\x00\x00\x08\x03", 4);
    write_be32(os, std::uint32_t(data.count));
    write_be32(os, std::uint32_t(data.height));
    write_be32(os, std::uint32_t(data.width));
    for (float v : data.pixels) os.put(char(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  });
}

Tensorf make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<float> v;
  v.reserve(indices.size() * data.image_size());
  for (auto i : indices) {
    if (i >= data.count) throw std::out_of_range("make_batch: image index out of range");
    const auto img = data.image(i);
    v.insert(v.end(), img.begin(), img.end());
  }
  return Tensorf::from({indices.size(), 1, data.height, data.width}, std::move(v));
}

namespace {

Dataset checked(Dataset d, const ExperimentConfig& cfg, const std::string& what) {
  if (d.count == 0) throw std::invalid_argument(what + " split is empty");
  if (d.height != cfg.image_size || d.width != cfg.image_size)
    throw std::invalid_argument(what + " images are " + std::to_string(d.height) + "x" + std::to_string(d.width) +
                                ", config expects image_size " + std::to_string(cfg.image_size));
  return d;
}

}  // namespace

Dataset load_train_split(const ExperimentConfig& cfg) {
  if (cfg.dataset == DatasetKind::idx) return checked(read_idx(cfg.idx_path), cfg, "training");
  return checked(gen_synthetic_shapes(cfg.data_n, cfg.image_size, cfg.data_seed), cfg, "training");
}

Dataset load_eval_split(const ExperimentConfig& cfg) {
  if (cfg.dataset == DatasetKind::idx) return checked(read_idx(cfg.idx_eval_path), cfg, "evaluation");
  return checked(gen_synthetic_shapes(cfg.eval_n, cfg.image_size, cfg.data_seed + 1), cfg, "evaluation");
}

}  // namespace raq::harness

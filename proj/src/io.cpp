#include "raq/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace raq::io {

namespace {

constexpr std::uint16_t kVersion = 1;

void put(std::ostream& os, std::uint64_t v, int bytes) {
  std::array<char, 8> b{};
  for (int i = 0; i < bytes; ++i) b[std::size_t(i)] = char((v >> (8 * i)) & 0xffu);
  os.write(b.data(), bytes);
}

std::uint64_t get(std::istream& is, int bytes) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), bytes);
  if (is.gcount() != bytes) throw format_error("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(b[std::size_t(i)]) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put(os, v, 1); }
void write_u16(std::ostream& os, std::uint16_t v) { put(os, v, 2); }
void write_u32(std::ostream& os, std::uint32_t v) { put(os, v, 4); }
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v, 8); }
void write_f32(std::ostream& os, float v) { put(os, std::bit_cast<std::uint32_t>(v), 4); }
void write_f64(std::ostream& os, double v) { put(os, std::bit_cast<std::uint64_t>(v), 8); }
void write_f32s(std::ostream& os, std::span<const float> v) {
  for (float x : v) write_f32(os, x);
}

std::uint8_t read_u8(std::istream& is) { return std::uint8_t(get(is, 1)); }
std::uint16_t read_u16(std::istream& is) { return std::uint16_t(get(is, 2)); }
std::uint32_t read_u32(std::istream& is) { return std::uint32_t(get(is, 4)); }
std::uint64_t read_u64(std::istream& is) { return get(is, 8); }
float read_f32(std::istream& is) { return std::bit_cast<float>(std::uint32_t(get(is, 4))); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get(is, 8)); }
std::vector<float> read_f32s(std::istream& is, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = read_f32(is);
  return v;
}

void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4] = {};
  is.read(got, 4);
  if (is.gcount() != 4 || std::memcmp(got, magic, 4) != 0)
    throw format_error(std::string("bad magic, expected \"") + magic + "\"");
}

namespace {

void expect_version(std::istream& is, const char* what) {
  const auto v = read_u16(is);
  if (v != kVersion) throw format_error(std::string(what) + ": unsupported version " + std::to_string(v));
}

template <typename Fn>
auto load_file(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return fn(is);
  } catch (const format_error& e) {
    throw format_error(path.string() + ": " + e.what());
  }
}

}  // namespace

void write_codebook(std::ostream& os, const Codebook<float>& cb) {
  os.write("RQCB", 4);
  write_u16(os, kVersion);
  write_u32(os, std::uint32_t(cb.size()));
  write_u32(os, std::uint32_t(cb.dim()));
  write_f32s(os, cb.vectors().data());
  write_u8(os, cb.ema() ? 1 : 0);
  if (cb.ema()) {
    const auto& s = *cb.ema();
    write_f32s(os, std::span<const float>(s.counts.data(), std::size_t(s.counts.size())));
    write_f32s(os, std::span<const float>(s.sums.data(), std::size_t(s.sums.size())));
  }
}

Codebook<float> read_codebook(std::istream& is) {
  expect_magic(is, "RQCB");
  expect_version(is, "RQCB");
  const std::size_t k = read_u32(is);
  const std::size_t d = read_u32(is);
  if (k == 0 || d == 0) throw format_error("RQCB: empty codebook");
  auto flat = read_f32s(is, k * d);
  RowMatrix<float> v = Eigen::Map<RowMatrix<float>>(flat.data(), Eigen::Index(k), Eigen::Index(d));
  const auto flag = read_u8(is);
  if (flag > 1) throw format_error("RQCB: bad EMA flag " + std::to_string(flag));
  if (flag == 0) return Codebook<float>(std::move(v), UpdateMode::gradient);
  EmaState<float> s;
  auto counts = read_f32s(is, k);
  auto sums = read_f32s(is, k * d);
  s.counts = Eigen::Map<Eigen::VectorXf>(counts.data(), Eigen::Index(k));
  s.sums = Eigen::Map<RowMatrix<float>>(sums.data(), Eigen::Index(k), Eigen::Index(d));
  return Codebook<float>(std::move(v), std::move(s));
}

void save_codebook(const std::filesystem::path& path, const Codebook<float>& cb) {
  write_atomically(path, [&](std::ostream& os) { write_codebook(os, cb); });
}

Codebook<float> load_codebook(const std::filesystem::path& path) {
  return load_file(path, [](std::istream& is) { return read_codebook(is); });
}

void write_adapter(std::ostream& os, const RateAdapter<float>& a) {
  os.write("RQS2", 4);
  write_u16(os, kVersion);
  write_u32(os, std::uint32_t(a.num_layers()));
  write_u32(os, std::uint32_t(a.dim()));
  for (const auto& p : a.parameters()) write_f32s(os, p.data());
}

RateAdapter<float> read_adapter(std::istream& is) {
  expect_magic(is, "RQS2");
  expect_version(is, "RQS2");
  const std::size_t layers = read_u32(is);
  const std::size_t d = read_u32(is);
  if (layers == 0 || d == 0) throw format_error("RQS2: empty adapter");
  // Shapes come from a template adapter so the block order has one source.
  const auto shapes = RateAdapter<float>::zeros(d, layers).parameters();
  std::vector<Tensorf> ps;
  for (const auto& t : shapes) ps.push_back(Tensorf::from(t.shape(), read_f32s(is, t.size()), true));
  return RateAdapter<float>::from_parameters(d, layers, std::move(ps));
}

void save_adapter(const std::filesystem::path& path, const RateAdapter<float>& a) {
  write_atomically(path, [&](std::ostream& os) { write_adapter(os, a); });
}

RateAdapter<float> load_adapter(const std::filesystem::path& path) {
  return load_file(path, [](std::istream& is) { return read_adapter(is); });
}

}  // namespace raq::io

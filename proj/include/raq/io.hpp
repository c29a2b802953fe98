#pragma once

// Binary codebook and adapter files. All integers and floats little-endian.
//
// RQCB (codebook)
//   char[4] "RQCB" | u16 version = 1 | u32 K | u32 d
//   f32[K*d] vectors, row-major
//   u8 has_ema
//   if has_ema: f32[K] counts N_i, f32[K*d] sums m_i (row-major)
//
// RQS2 (rate adapter)
//   char[4] "RQS2" | u16 version = 1 | u32 num_layers | u32 d
//   then f32 blocks, H = d:
//     for each encoder layer: w_ih [d x 4H], w_hh [H x 4H], bias [4H]
//     for each decoder layer: w_ih [d x 4H], w_hh [H x 4H], bias [4H]
//     output weight [H x d], output bias [d]
//   Gate order inside each 4H block: input, forget, candidate, output.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "raq/seq2seq.hpp"
#include "raq/vq.hpp"

namespace raq::io {

class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Little-endian primitives shared by every binary format in the project.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
void write_f32s(std::ostream& os, std::span<const float> v);
std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);
std::vector<float> read_f32s(std::istream& is, std::size_t n);
void expect_magic(std::istream& is, const char (&magic)[5]);

void write_codebook(std::ostream& os, const Codebook<float>& codebook);
/// Codebooks without EMA state load in gradient mode.
Codebook<float> read_codebook(std::istream& is);
void save_codebook(const std::filesystem::path& path, const Codebook<float>& codebook);
Codebook<float> load_codebook(const std::filesystem::path& path);

void write_adapter(std::ostream& os, const RateAdapter<float>& adapter);
RateAdapter<float> read_adapter(std::istream& is);
void save_adapter(const std::filesystem::path& path, const RateAdapter<float>& adapter);
RateAdapter<float> load_adapter(const std::filesystem::path& path);

/// Writes to `path` via a temporary sibling and rename, so readers never see
/// a partial file.
template <typename Writer>
void write_atomically(const std::filesystem::path& path, Writer&& writer);

}  // namespace raq::io

#include <fstream>

namespace raq::io {

template <typename Writer>
void write_atomically(const std::filesystem::path& path, Writer&& writer) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    writer(os);
    os.flush();
    if (!os) throw std::runtime_error("write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace raq::io

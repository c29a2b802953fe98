#pragma once

// Reconstruction and codebook-usage metrics.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace raq::metrics {

inline constexpr double kPsnrCap = 100.0;

double mse(std::span<const float> x, std::span<const float> x_hat);

/// 10 log10(range^2 / mse), capped at kPsnrCap when mse is zero.
double psnr_from_mse(double mse, double data_range);
double psnr(std::span<const float> x, std::span<const float> x_hat, double data_range);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over every valid window position of one H×W image.
double ssim(std::span<const float> x, std::span<const float> x_hat, std::size_t height, std::size_t width,
            double data_range, const SsimOptions& options = {});

/// exp(-sum p_i log p_i) with 0 log 0 = 0.
double perplexity(std::span<const std::int64_t> counts);

/// Number of codes with a nonzero count.
std::size_t usage(std::span<const std::int64_t> counts);

struct EvalRecord {
  std::size_t k_tilde = 0;
  std::string method;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double perplexity = 0.0;
  std::size_t usage = 0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kCsvHeader = "k_tilde,method,mse,psnr,ssim,perplexity,usage,seed";

std::string to_csv_row(const EvalRecord& r);

}  // namespace raq::metrics

#include "raq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

namespace raq::metrics {

double mse(std::span<const float> x, std::span<const float> x_hat) {
  if (x.size() != x_hat.size() || x.empty()) throw std::invalid_argument("mse: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x[i]) - double(x_hat[i]);
    acc += d * d;
  }
  return acc / double(x.size());
}

double psnr_from_mse(double mse_value, double data_range) {
  if (data_range <= 0) throw std::invalid_argument("psnr: data range must be positive");
  if (mse_value <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse_value));
}

double psnr(std::span<const float> x, std::span<const float> x_hat, double data_range) {
  return psnr_from_mse(mse(x, x_hat), data_range);
}

double ssim(std::span<const float> x, std::span<const float> y, std::size_t height, std::size_t width,
            double data_range, const SsimOptions& opt) {
  if (x.size() != height * width || y.size() != x.size()) throw std::invalid_argument("ssim: size mismatch");
  if (height < opt.window || width < opt.window)
    throw std::invalid_argument("ssim: image " + std::to_string(height) + "x" + std::to_string(width) +
                                " smaller than window " + std::to_string(opt.window));
  const std::size_t w = opt.window;
  std::vector<double> kernel(w * w);
  double norm = 0.0;
  const double c = double(w - 1) / 2.0;
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double di = double(i) - c, dj = double(j) - c;
      kernel[i * w + j] = std::exp(-(di * di + dj * dj) / (2.0 * opt.sigma * opt.sigma));
      norm += kernel[i * w + j];
    }
  for (auto& k : kernel) k /= norm;

  const double c1 = (opt.k1 * data_range) * (opt.k1 * data_range);
  const double c2 = (opt.k2 * data_range) * (opt.k2 * data_range);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + w <= height; ++r)
    for (std::size_t q = 0; q + w <= width; ++q) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double k = kernel[i * w + j];
          const double a = x[(r + i) * width + q + j];
          const double b = y[(r + i) * width + q + j];
          mx += k * a;
          my += k * b;
          sxx += k * a * a;
          syy += k * b * b;
          sxy += k * a * b;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / double(count);
}

double perplexity(std::span<const std::int64_t> counts) {
  double total = 0.0;
  for (auto n : counts) {
    if (n < 0) throw std::invalid_argument("perplexity: negative count");
    total += double(n);
  }
  if (total <= 0) throw std::invalid_argument("perplexity: all counts are zero");
  double entropy = 0.0;
  for (auto n : counts) {
    if (n == 0) continue;
    const double p = double(n) / total;
    entropy -= p * std::log(p);
  }
  // Rounding can push exp(log K) a hair past K.
  return std::clamp(std::exp(entropy), 1.0, double(counts.size()));
}

std::size_t usage(std::span<const std::int64_t> counts) {
  std::size_t used = 0;
  for (auto n : counts) used += n > 0;
  return used;
}

std::string to_csv_row(const EvalRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.8g,%.6f,%.6f,%.6f,%zu,%llu", r.k_tilde, r.method.c_str(), r.mse, r.psnr,
                r.ssim, r.perplexity, r.usage, static_cast<unsigned long long>(r.seed));
  return buf;
}

}  // namespace raq::metrics

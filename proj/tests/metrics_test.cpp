#include <cmath>
#include <stdexcept>
#include <random>
#include <vector>

#include "doctest.h"
#include "raq/metrics.hpp"

using namespace raq::metrics;

TEST_SUITE("metrics") {

TEST_CASE("psnr from a known mse") {
  std::vector<float> x(100, 0.5f), y(100, 0.6f);
  CHECK(mse(x, y) == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(psnr(x, y, 1.0) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK(psnr_from_mse(0.01, 2.0) == doctest::Approx(20.0 + 20.0 * std::log10(2.0)));
  CHECK(psnr(x, x, 1.0) == kPsnrCap);
  CHECK(psnr_from_mse(1e-30, 1.0) == kPsnrCap);
  CHECK_THROWS_AS(mse(x, std::vector<float>(3)), std::invalid_argument);
  CHECK_THROWS_AS(psnr_from_mse(0.1, 0.0), std::invalid_argument);
}

TEST_CASE("ssim of an image with itself is one") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> x(16 * 16);
  for (auto& v : x) v = u(rng);
  CHECK(ssim(x, x, 16, 16, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim of constant images has a closed form") {
  const double a = 0.2, b = 0.7, c1 = 0.01 * 0.01;
  std::vector<float> x(16 * 16, float(a)), y(16 * 16, float(b));
  const double expected = (2 * double(float(a)) * double(float(b)) + c1) /
                          (double(float(a)) * double(float(a)) + double(float(b)) * double(float(b)) + c1);
  CHECK(ssim(x, y, 16, 16, 1.0) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("ssim on a single window matches a direct evaluation") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> x(11 * 11), y(11 * 11);
  for (auto& v : x) v = u(rng);
  for (auto& v : y) v = u(rng);
  std::vector<double> w(121);
  double s = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) s += w[std::size_t(i * 11 + j)] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < 121; ++k) {
    w[k] /= s;
    mx += w[k] * x[k];
    my += w[k] * y[k];
  }
  double vx = 0, vy = 0, cov = 0;
  for (std::size_t k = 0; k < 121; ++k) {
    vx += w[k] * (x[k] - mx) * (x[k] - mx);
    vy += w[k] * (y[k] - my) * (y[k] - my);
    cov += w[k] * (x[k] - mx) * (y[k] - my);
  }
  const double c1 = 1e-4, c2 = 9e-4;
  const double expected = (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  CHECK(ssim(x, y, 11, 11, 1.0) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("ssim of an inverted image is negative") {
  std::vector<float> x(16 * 16), y(16 * 16);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = float((i * 7 + i / 16) % 2);
    y[i] = 1.0f - x[i];
  }
  CHECK(ssim(x, y, 16, 16, 1.0) < 0.0);
  CHECK_THROWS_AS(ssim(std::vector<float>(64), std::vector<float>(64), 8, 8, 1.0), std::invalid_argument);
}

TEST_CASE("perplexity and usage") {
  const std::vector<std::int64_t> skew{3, 1};
  const double h = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
  CHECK(perplexity(skew) == doctest::Approx(std::exp(h)));
  CHECK(perplexity(skew) == doctest::Approx(1.7548).epsilon(1e-4));
  CHECK(perplexity(std::vector<std::int64_t>(37, 5)) == doctest::Approx(37.0));
  CHECK(perplexity(std::vector<std::int64_t>{0, 9, 0}) == 1.0);
  CHECK(usage(std::vector<std::int64_t>{0, 9, 0, 1}) == 2);
  CHECK_THROWS_AS(perplexity(std::vector<std::int64_t>{0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(perplexity(std::vector<std::int64_t>{1, -1}), std::invalid_argument);
}

TEST_CASE("csv header and row") {
  CHECK(std::string(kCsvHeader) == "k_tilde,method,mse,psnr,ssim,perplexity,usage,seed");
  EvalRecord r{16, "seq2seq", 0.0125, 19.030900, 0.5, 12.25, 14, 3};
  CHECK(to_csv_row(r) == "16,seq2seq,0.0125,19.030900,0.500000,12.250000,14,3");
}

}  // TEST_SUITE

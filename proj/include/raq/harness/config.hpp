#pragma once

// Experiment configuration: a flat "key = value" text file. Every key maps
// to one field; unknown keys and malformed values are errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "raq/vq.hpp"

namespace raq::harness {

enum class DatasetKind { synthetic_shapes, idx };

struct ExperimentConfig {
  DatasetKind dataset = DatasetKind::synthetic_shapes;
  std::size_t data_n = 512;
  std::uint64_t data_seed = 1;
  std::string idx_path;
  std::string idx_eval_path;
  std::size_t eval_n = 256;

  std::size_t image_size = 16;
  std::size_t latent_size = 4;  // M = N
  std::size_t dim = 8;          // d
  std::size_t hidden = 32;      // conv channels
  std::size_t codebook_size = 32;
  std::size_t k_min = 8;
  std::size_t k_max = 64;
  std::size_t adapter_layers = 2;
  bool train_adapter = true;
  bool cross_forcing = true;
  UpdateMode codebook_update = UpdateMode::ema;

  double beta = 0.25;
  double gamma = 0.99;
  double lr = 5e-4;
  double weight_decay = 0.01;
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  std::size_t checkpoint_every = 100;

  double tau = 0.01;
  std::size_t dkm_iters = 200;
  std::size_t ikm_iters = 5000;
  double ikm_lambda = 1e-4;
  double ikm_eta = 0.1;

  std::vector<std::size_t> eval_k = {8, 16, 32, 64};
  std::size_t eval_batch_size = 64;
  std::uint64_t seed = 0;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

const std::vector<std::string>& config_keys();
std::string get(const ExperimentConfig& cfg, const std::string& key);
void set(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Throws std::invalid_argument describing the first violated constraint.
void validate(const ExperimentConfig& cfg);

/// One "key = value" line per key, in config_keys() order.
std::string serialize(const ExperimentConfig& cfg);
ExperimentConfig parse(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg);

/// Applies RAQ_SEED from the environment, if set.
void apply_env_overrides(ExperimentConfig& cfg);

/// Training-time K̃ range: [k_min, min(k_max, 2K)].
std::size_t training_k_max(const ExperimentConfig& cfg);

}  // namespace raq::harness

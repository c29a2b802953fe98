#pragma once

// Training, adaptation and evaluation drivers behind the command line tool.
//
// A checkpoint directory holds
//   config.txt      the experiment configuration
//   model.rqmd      encoder/decoder weights, step count and optimiser state
//   codebook.rqcb   the trained codebook (with EMA state in ema mode)
//   adapter.rqs2    the rate adapter, when one is trained
//   train_log.csv   one row per completed step
//   manifest.txt    version, seed, step and the file list
//
// RQMD (model)
//   char[4] "RQMD" | u16 version = 1 | u32 hidden | u32 d | u64 step
//   u32 n, then n tensors: u32 rank, u32 dims[rank], f32 values
//   u32 m, then m optimiser slots in the order model, codebook (gradient
//   mode only), adapter: u8 present, and if present u64 step, f64 first
//   moments, f64 second moments

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "raq/harness/config.hpp"
#include "raq/harness/dataset.hpp"
#include "raq/harness/model.hpp"
#include "raq/metrics.hpp"
#include "raq/optim.hpp"
#include "raq/seq2seq.hpp"
#include "raq/train.hpp"
#include "raq/vq.hpp"

namespace raq::harness {

std::string code_version();

struct Checkpoint {
  ExperimentConfig config;
  std::size_t step = 0;
  ToyVqModel model;
  Codebook<float> codebook;
  std::optional<RateAdapter<float>> adapter;
  AdamW<float> optimizer;

  /// Every tensor the optimiser may step, in file order.
  std::vector<Tensorf> optimizer_params() const;
};

/// Fresh parameters, deterministic in cfg.seed.
Checkpoint init_checkpoint(const ExperimentConfig& cfg);
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void write_model(std::ostream& os, const Checkpoint& ckpt);
/// Restores weights, step and optimiser moments into `ckpt`, whose config,
/// codebook and adapter must already be loaded.
void read_model(std::istream& is, Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Training

struct StepPlan {
  std::vector<std::size_t> batch;
  std::size_t k_tilde = 0;
};

/// Batch indices and K̃ for step `step`, a pure function of (seed, step).
StepPlan plan_step(const ExperimentConfig& cfg, std::size_t dataset_size, std::size_t step);

struct TrainLogRow {
  std::size_t step = 0;  // 1-based count of completed steps
  StepMetrics metrics;
};

inline constexpr const char* kTrainLogHeader =
    "step,k_tilde,l_vq,l_raq,recon_vq,recon_raq,perplexity_vq,perplexity_raq";
std::string to_csv_row(const TrainLogRow& row);
std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path);

struct TrainOptions {
  bool resume = false;
  std::size_t stop_at = 0;  // 0: run to cfg.steps
  std::ostream* progress = nullptr;
  std::size_t progress_every = 50;
};

/// Trains into `dir`, checkpointing every cfg.checkpoint_every steps and at
/// the end. On a non-finite loss the last written checkpoint is left intact
/// and numeric_error is rethrown. Returns the full log, including rows from
/// earlier runs when resuming.
std::vector<TrainLogRow> run_train(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                   const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Adaptation

enum class AdaptMethod { original, seq2seq, dkm, ikm, model_based, random_subset };

std::string to_string(AdaptMethod m);
AdaptMethod parse_method(const std::string& name);

/// Empty when the method can produce K̃ codes from this checkpoint,
/// otherwise the reason it cannot.
std::string incompatibility(const Checkpoint& ckpt, AdaptMethod method, std::size_t k_tilde);

struct AdaptedCodebook {
  RowMatrix<float> vectors;
  bool extrapolated = false;  // seq2seq beyond the trained 2K range
};

/// Throws std::invalid_argument on an incompatible method and size.
AdaptedCodebook adapt_codebook(const Checkpoint& ckpt, AdaptMethod method, std::size_t k_tilde);

// ---------------------------------------------------------------------------
// Evaluation

struct CodebookFile {
  std::string label;
  std::filesystem::path path;
};

struct EvalOptions {
  std::vector<AdaptMethod> methods = {AdaptMethod::seq2seq};
  std::vector<std::size_t> k_list;    // empty: cfg.eval_k
  std::vector<CodebookFile> codebooks;  // evaluated as given, method column = label
  bool cache = true;                  // false: regenerate the codebook per mini-batch
  std::optional<std::filesystem::path> dump_dir;
  std::size_t dump_limit = 16;
  bool skip_incompatible = true;
};

struct EvalReport {
  std::vector<metrics::EvalRecord> records;
  std::vector<std::string> notes;  // skipped combinations and extrapolation flags
  double seconds = 0.0;
};

/// Reconstruction metrics of the split under one codebook. `make_codebook`
/// is called once when `cache` is set and once per mini-batch otherwise.
metrics::EvalRecord evaluate_codebook(const Checkpoint& ckpt, const Dataset& data,
                                      const std::function<RowMatrix<float>()>& make_codebook, bool cache,
                                      const std::string& method,
                                      const std::optional<std::filesystem::path>& dump_dir = std::nullopt,
                                      std::size_t dump_limit = 0);

EvalReport run_eval(const Checkpoint& ckpt, const Dataset& data, const EvalOptions& options);

std::string to_csv(const std::vector<metrics::EvalRecord>& records);

/// Writes the CSV and, beside it, `<csv>.manifest.txt`.
void write_eval_outputs(const std::filesystem::path& csv, const EvalReport& report, const Checkpoint& ckpt,
                        const std::filesystem::path& checkpoint_dir, const EvalOptions& options);

}  // namespace raq::harness

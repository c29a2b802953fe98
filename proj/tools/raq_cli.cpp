// raq: train, adapt and evaluate rate-adaptive VQ autoencoders.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include "raq/harness/config.hpp"
#include "raq/harness/dataset.hpp"
#include "raq/harness/experiment.hpp"
#include "raq/io.hpp"

namespace fs = std::filesystem;
using namespace raq;
using namespace raq::harness;

namespace {

// Keys that may be overridden at evaluation time; the rest are fixed by the
// trained checkpoint.
const std::vector<std::string> kEvalKeys = {"eval_k", "eval_batch_size", "eval_n", "idx_eval_path", "seed",
                                            "tau",    "dkm_iters",       "ikm_iters", "ikm_lambda", "ikm_eta"};

using Overrides = std::map<std::string, std::string>;

void add_config_flags(CLI::App* cmd, Overrides& values, const std::vector<std::string>& keys) {
  const ExperimentConfig defaults;
  for (const auto& key : keys)
    cmd->add_option("--" + key, values[key], "config key (default " + get(defaults, key) + ")");
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& values) {
  for (const auto& [key, value] : values)
    if (!value.empty()) set(cfg, key, value);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_gen_data(const fs::path& out, std::size_t n, std::size_t size, std::uint64_t seed) {
  write_idx(out, gen_synthetic_shapes(n, size, seed));
  std::cout << "wrote " << n << " images of " << size << "x" << size << " to " << out.string() << "\n";
  return 0;
}

int cmd_train(ExperimentConfig cfg, const fs::path& out, bool resume, std::size_t seeds) {
  validate(cfg);
  for (std::size_t s = 0; s < seeds; ++s) {
    auto run_cfg = cfg;
    run_cfg.seed = cfg.seed + s;
    const fs::path dir = seeds > 1 ? out / ("seed_" + std::to_string(run_cfg.seed)) : out;
    TrainOptions opt;
    opt.resume = resume;
    opt.progress = &std::cout;
    const auto rows = run_train(run_cfg, dir, opt);
    std::cout << "checkpoint " << dir.string() << " at step " << (rows.empty() ? 0 : rows.back().step) << "\n";
  }
  return 0;
}

int cmd_adapt(const fs::path& checkpoint, const std::string& method, std::size_t k_tilde, const fs::path& out) {
  const auto ckpt = load_checkpoint(checkpoint);
  const auto adapted = adapt_codebook(ckpt, parse_method(method), k_tilde);
  if (adapted.extrapolated)
    std::cerr << "warning: K̃=" << k_tilde << " exceeds the trained range 2K=" << 2 * ckpt.codebook.size()
              << "; the adapter is extrapolating\n";
  io::save_codebook(out, Codebook<float>(adapted.vectors, UpdateMode::gradient));
  std::cout << "wrote " << method << " codebook K̃=" << k_tilde << " d=" << adapted.vectors.cols() << " to "
            << out.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const Overrides& overrides, const std::string& methods,
             const std::vector<std::string>& codebooks, const fs::path& out, bool no_cache,
             const std::string& dump_dir, std::size_t dump_limit) {
  auto ckpt = load_checkpoint(checkpoint);
  apply_env_overrides(ckpt.config);
  apply_overrides(ckpt.config, overrides);
  validate(ckpt.config);
  EvalOptions opt;
  opt.methods.clear();
  for (const auto& m : split(methods)) opt.methods.push_back(parse_method(m));
  for (const auto& c : codebooks) {
    const auto eq = c.find('=');
    if (eq == std::string::npos)
      opt.codebooks.push_back({fs::path(c).stem().string(), c});
    else
      opt.codebooks.push_back({c.substr(0, eq), c.substr(eq + 1)});
  }
  opt.cache = !no_cache;
  if (!dump_dir.empty()) opt.dump_dir = fs::path(dump_dir);
  opt.dump_limit = dump_limit;
  const auto data = load_eval_split(ckpt.config);
  const auto report = run_eval(ckpt, data, opt);
  for (const auto& n : report.notes) std::cerr << "note: " << n << "\n";
  write_eval_outputs(out, report, ckpt, checkpoint, opt);
  std::cout << to_csv(report.records);
  std::fprintf(stderr, "evaluated %zu rows in %.3f s\n", report.records.size(), report.seconds);
  return 0;
}

int cmd_inspect(const fs::path& path) {
  const auto cb = io::load_codebook(path);
  const Eigen::MatrixXd m = cb.matrix().cast<double>();
  const Eigen::VectorXd norms = m.rowwise().norm();
  double min_gap = INFINITY;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = i + 1; j < m.rows(); ++j) min_gap = std::min(min_gap, (m.row(i) - m.row(j)).norm());
  std::printf("file        %s\n", path.c_str());
  std::printf("K           %zu\n", cb.size());
  std::printf("d           %zu\n", cb.dim());
  std::printf("mode        %s\n", cb.ema() ? "ema" : "gradient");
  std::printf("norm        min %.6g  mean %.6g  max %.6g\n", norms.minCoeff(), norms.mean(), norms.maxCoeff());
  if (m.rows() > 1) std::printf("min gap     %.6g\n", min_gap);
  if (cb.ema()) {
    const auto& c = cb.ema()->counts;
    std::size_t dead = 0;
    for (Eigen::Index i = 0; i < c.size(); ++i) dead += c(i) < 1e-3f ? 1 : 0;
    std::printf("ema counts  min %.6g  max %.6g  below 1e-3: %zu\n", double(c.minCoeff()), double(c.maxCoeff()),
                dead);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rate-adaptive quantisation for VQ autoencoders"};
  app.set_version_flag("--version", code_version());
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write a synthetic-shapes IDX file");
  fs::path gen_out;
  std::size_t gen_n = 512, gen_size = 16;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output IDX path")->required();
  gen->add_option("--n", gen_n, "number of images");
  gen->add_option("--size", gen_size, "image side length (>= 16)");
  gen->add_option("--seed", gen_seed, "generator seed");

  auto* train = app.add_subcommand("train", "train an autoencoder, codebook and rate adapter");
  fs::path train_config, train_out;
  bool resume = false;
  std::size_t seeds = 1;
  Overrides train_overrides;
  train->add_option("--config", train_config, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_flag("--resume", resume, "continue from the checkpoint in --out");
  train->add_option("--seeds", seeds, "train this many consecutive seeds into seed_<n> subdirectories")
      ->check(CLI::PositiveNumber);
  add_config_flags(train, train_overrides, config_keys());

  auto* adapt = app.add_subcommand("adapt", "write an adapted codebook of size K̃");
  fs::path adapt_ckpt, adapt_out;
  std::string adapt_method;
  std::size_t adapt_k = 0;
  adapt->add_option("--checkpoint", adapt_ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  adapt->add_option("--method", adapt_method, "seq2seq, dkm, ikm, model_based, random_subset or original")
      ->required();
  adapt->add_option("--k", adapt_k, "target codebook size K̃")->required();
  adapt->add_option("--out", adapt_out, "output RQCB path")->required();

  auto* eval = app.add_subcommand("eval", "rate-distortion report on the held-out split");
  fs::path eval_ckpt, eval_out;
  std::string eval_methods = "seq2seq", dump_dir;
  std::vector<std::string> eval_codebooks;
  bool no_cache = false;
  std::size_t dump_limit = 16;
  Overrides eval_overrides;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", eval_out, "output CSV path")->required();
  eval->add_option("--methods", eval_methods, "comma-separated adaptation methods");
  eval->add_option("--codebook", eval_codebooks, "extra RQCB file to evaluate, as path or label=path");
  eval->add_flag("--no-cache", no_cache, "regenerate the adapted codebook for every mini-batch");
  eval->add_option("--dump-recons", dump_dir, "write reconstructions as 8-bit grayscale PNGs here");
  eval->add_option("--dump-limit", dump_limit, "images to dump per codebook");
  add_config_flags(eval, eval_overrides, kEvalKeys);

  auto* inspect = app.add_subcommand("inspect-codebook", "summarise an RQCB file");
  fs::path inspect_path;
  inspect->add_option("path", inspect_path, "RQCB file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(gen_out, gen_n, gen_size, gen_seed);
    if (*train) {
      ExperimentConfig cfg = train_config.empty() ? ExperimentConfig{} : load_config(train_config);
      apply_env_overrides(cfg);
      apply_overrides(cfg, train_overrides);
      return cmd_train(cfg, train_out, resume, seeds);
    }
    if (*adapt) return cmd_adapt(adapt_ckpt, adapt_method, adapt_k, adapt_out);
    if (*eval)
      return cmd_eval(eval_ckpt, eval_overrides, eval_methods, eval_codebooks, eval_out, no_cache, dump_dir,
                      dump_limit);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include "raq/harness/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "raq/clustering.hpp"
#include "raq/harness/png.hpp"
#include "raq/io.hpp"

#ifndef RAQ_VERSION
#define RAQ_VERSION "unknown"
#endif

namespace raq::harness {

namespace fs = std::filesystem;

std::string code_version() { return RAQ_VERSION; }

namespace {

constexpr std::uint16_t kModelVersion = 1;

AdamWConfig optimizer_config(const ExperimentConfig& cfg) {
  AdamWConfig a;
  a.lr = cfg.lr;
  a.weight_decay = cfg.weight_decay;
  return a;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_text_atomically(const fs::path& path, const std::string& text) {
  io::write_atomically(path, [&](std::ostream& os) { os << text; });
}

}  // namespace

std::vector<Tensorf> Checkpoint::optimizer_params() const {
  auto ps = model.parameters();
  if (codebook.mode() == UpdateMode::gradient) ps.push_back(codebook.vectors());
  if (adapter)
    for (auto& p : adapter->parameters()) ps.push_back(p);
  return ps;
}

Checkpoint init_checkpoint(const ExperimentConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(cfg.seed);
  auto model = ToyVqModel::init(cfg.hidden, cfg.dim, rng);
  auto codebook = Codebook<float>::random(cfg.codebook_size, cfg.dim, cfg.codebook_update, rng);
  std::optional<RateAdapter<float>> adapter;
  if (cfg.train_adapter) adapter = RateAdapter<float>::init(cfg.dim, cfg.adapter_layers, rng);
  return Checkpoint{cfg, 0, std::move(model), std::move(codebook), std::move(adapter),
                    AdamW<float>(optimizer_config(cfg))};
}

// ---------------------------------------------------------------------------
// Checkpoint files

void write_model(std::ostream& os, const Checkpoint& ckpt) {
  os.write("RQMD", 4);
  io::write_u16(os, kModelVersion);
  io::write_u32(os, std::uint32_t(ckpt.model.hidden()));
  io::write_u32(os, std::uint32_t(ckpt.model.dim()));
  io::write_u64(os, ckpt.step);
  const auto ps = ckpt.model.parameters();
  io::write_u32(os, std::uint32_t(ps.size()));
  for (const auto& p : ps) {
    io::write_u32(os, std::uint32_t(p.rank()));
    for (auto d : p.shape()) io::write_u32(os, std::uint32_t(d));
    io::write_f32s(os, p.data());
  }
  const auto opt = ckpt.optimizer_params();
  io::write_u32(os, std::uint32_t(opt.size()));
  for (const auto& p : opt) {
    const auto* m = ckpt.optimizer.find(p);
    io::write_u8(os, m ? 1 : 0);
    if (!m) continue;
    io::write_u64(os, m->step);
    for (double v : m->m) io::write_f64(os, v);
    for (double v : m->v) io::write_f64(os, v);
  }
}

void read_model(std::istream& is, Checkpoint& ckpt) {
  io::expect_magic(is, "RQMD");
  if (const auto v = io::read_u16(is); v != kModelVersion)
    throw io::format_error("RQMD: unsupported version " + std::to_string(v));
  const std::size_t hidden = io::read_u32(is);
  const std::size_t dim = io::read_u32(is);
  if (hidden != ckpt.config.hidden || dim != ckpt.config.dim)
    throw io::format_error("RQMD: model is hidden=" + std::to_string(hidden) + " d=" + std::to_string(dim) +
                           ", config says hidden=" + std::to_string(ckpt.config.hidden) +
                           " d=" + std::to_string(ckpt.config.dim));
  ckpt.step = io::read_u64(is);
  const std::size_t n = io::read_u32(is);
  if (n > 1024) throw io::format_error("RQMD: implausible parameter count " + std::to_string(n));
  std::vector<Tensorf> ps;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t rank = io::read_u32(is);
    if (rank > 8) throw io::format_error("RQMD: implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = io::read_u32(is);
    ps.push_back(Tensorf::from(shape, io::read_f32s(is, numel(shape)), true));
  }
  ckpt.model = ToyVqModel::from_parameters(hidden, dim, std::move(ps));
  ckpt.optimizer = AdamW<float>(optimizer_config(ckpt.config));
  const auto opt = ckpt.optimizer_params();
  const std::size_t slots = io::read_u32(is);
  if (slots != opt.size())
    throw io::format_error("RQMD: " + std::to_string(slots) + " optimiser slots, expected " +
                           std::to_string(opt.size()));
  for (const auto& p : opt) {
    if (io::read_u8(is) == 0) continue;
    AdamW<float>::Moments m;
    m.step = io::read_u64(is);
    m.m.resize(p.size());
    m.v.resize(p.size());
    for (auto& x : m.m) x = io::read_f64(is);
    for (auto& x : m.v) x = io::read_f64(is);
    ckpt.optimizer.moments(p) = std::move(m);
  }
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  write_text_atomically(dir / "config.txt", serialize(ckpt.config));
  io::save_codebook(dir / "codebook.rqcb", ckpt.codebook);
  if (ckpt.adapter) io::save_adapter(dir / "adapter.rqs2", *ckpt.adapter);
  // The model file carries the step count, so it is written last among the
  // files a loader reads.
  io::write_atomically(dir / "model.rqmd", [&](std::ostream& os) { write_model(os, ckpt); });

  std::ostringstream m;
  m << "tool = raq\n"
    << "version = " << code_version() << "\n"
    << "step = " << ckpt.step << "\n"
    << "seed = " << ckpt.config.seed << "\n"
    << "files = config.txt model.rqmd codebook.rqcb" << (ckpt.adapter ? " adapter.rqs2" : "") << " train_log.csv\n"
    << "# config\n"
    << serialize(ckpt.config);
  write_text_atomically(dir / "manifest.txt", m.str());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "model.rqmd")) throw std::runtime_error("no checkpoint in " + dir.string());
  auto cfg = load_config(dir / "config.txt");
  validate(cfg);
  auto codebook = io::load_codebook(dir / "codebook.rqcb");
  if (codebook.size() != cfg.codebook_size || codebook.dim() != cfg.dim)
    throw io::format_error("codebook.rqcb does not match config.txt");
  if (codebook.mode() != cfg.codebook_update)
    throw io::format_error("codebook.rqcb update mode does not match config.txt");
  std::optional<RateAdapter<float>> adapter;
  if (cfg.train_adapter) {
    adapter = io::load_adapter(dir / "adapter.rqs2");
    if (adapter->dim() != cfg.dim || adapter->num_layers() != cfg.adapter_layers)
      throw io::format_error("adapter.rqs2 does not match config.txt");
  }
  Checkpoint ckpt{cfg, 0, ToyVqModel{}, std::move(codebook), std::move(adapter), AdamW<float>(optimizer_config(cfg))};
  std::ifstream is(dir / "model.rqmd", std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + (dir / "model.rqmd").string());
  try {
    read_model(is, ckpt);
  } catch (const io::format_error& e) {
    throw io::format_error((dir / "model.rqmd").string() + ": " + e.what());
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Training

StepPlan plan_step(const ExperimentConfig& cfg, std::size_t dataset_size, std::size_t step) {
  if (dataset_size == 0) throw std::invalid_argument("plan_step: empty dataset");
  std::seed_seq seq{std::uint64_t(cfg.seed), std::uint64_t(step), std::uint64_t(0x52415121)};
  std::mt19937_64 rng(seq);
  StepPlan p;
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  p.batch.resize(cfg.batch_size);
  for (auto& i : p.batch) i = pick(rng);
  p.k_tilde = sample_target_size(rng, cfg.k_min, training_k_max(cfg));
  return p;
}

std::string to_csv_row(const TrainLogRow& r) {
  const auto& m = r.metrics;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.8g,%.8g,%.8g,%.8g,%.6f,%.6f", r.step, m.k_tilde, m.vq.total,
                m.raq.total, m.vq.recon, m.raq.recon, m.perplexity_vq, m.perplexity_raq);
  return buf;
}

std::vector<TrainLogRow> read_train_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kTrainLogHeader)
    throw io::format_error(path.string() + ": unexpected header");
  std::vector<TrainLogRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TrainLogRow r;
    auto& m = r.metrics;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%lf,%lf,%lf,%lf", &r.step, &m.k_tilde, &m.vq.total,
                    &m.raq.total, &m.vq.recon, &m.raq.recon, &m.perplexity_vq, &m.perplexity_raq) != 8)
      throw io::format_error(path.string() + ": malformed row '" + line + "'");
    rows.push_back(r);
  }
  return rows;
}

namespace {

void write_train_log(const fs::path& path, const std::vector<TrainLogRow>& rows) {
  io::write_atomically(path, [&](std::ostream& os) {
    os << kTrainLogHeader << "\n";
    for (const auto& r : rows) os << to_csv_row(r) << "\n";
  });
}

bool same_run(ExperimentConfig a, ExperimentConfig b) {
  a.steps = b.steps;
  a.checkpoint_every = b.checkpoint_every;
  return a == b;
}

}  // namespace

std::vector<TrainLogRow> run_train(const ExperimentConfig& cfg, const fs::path& dir, const TrainOptions& options) {
  validate(cfg);
  const auto data = load_train_split(cfg);
  std::vector<TrainLogRow> rows;
  std::optional<Checkpoint> loaded;
  if (options.resume && fs::exists(dir / "model.rqmd")) {
    loaded = load_checkpoint(dir);
    if (!same_run(loaded->config, cfg))
      throw std::invalid_argument("resume: config differs from the checkpoint in " + dir.string() +
                                  " beyond steps/checkpoint_every");
    loaded->config = cfg;
    if (fs::exists(dir / "train_log.csv")) rows = read_train_log(dir / "train_log.csv");
    std::erase_if(rows, [&](const TrainLogRow& r) { return r.step > loaded->step; });
  }
  Checkpoint ckpt = loaded ? std::move(*loaded) : init_checkpoint(cfg);
  auto save = [&] {
    save_checkpoint(dir, ckpt);
    write_train_log(dir / "train_log.csv", rows);
  };
  if (!loaded) save();

  const std::size_t stop = options.stop_at ? std::min(options.stop_at, cfg.steps) : cfg.steps;
  const TrainStepConfig step_cfg{cfg.beta, cfg.gamma, cfg.cross_forcing};
  RateAdapter<float>* adapter = ckpt.adapter ? &*ckpt.adapter : nullptr;
  while (ckpt.step < stop) {
    const auto plan = plan_step(cfg, data.count, ckpt.step);
    const auto x = make_batch(data, plan.batch);
    StepMetrics m;
    try {
      m = train_step(ckpt.model, ckpt.codebook, adapter, ckpt.optimizer, x, plan.k_tilde, step_cfg);
    } catch (const numeric_error& e) {
      throw numeric_error("step " + std::to_string(ckpt.step + 1) + ": " + e.what() +
                          "; last good checkpoint retained in " + dir.string());
    }
    ++ckpt.step;
    rows.push_back({ckpt.step, m});
    if (options.progress && (ckpt.step % options.progress_every == 0 || ckpt.step == stop))
      *options.progress << "step " << ckpt.step << "/" << cfg.steps << "  k~=" << m.k_tilde
                        << "  l_vq=" << fmt("%.5f", m.vq.total) << "  l_raq=" << fmt("%.5f", m.raq.total)
                        << "  ppl_vq=" << fmt("%.2f", m.perplexity_vq) << "\n";
    if (ckpt.step % cfg.checkpoint_every == 0 || ckpt.step == stop) save();
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Adaptation

std::string to_string(AdaptMethod m) {
  switch (m) {
    case AdaptMethod::original: return "original";
    case AdaptMethod::seq2seq: return "seq2seq";
    case AdaptMethod::dkm: return "dkm";
    case AdaptMethod::ikm: return "ikm";
    case AdaptMethod::model_based: return "model_based";
    case AdaptMethod::random_subset: return "random_subset";
  }
  return "?";
}

AdaptMethod parse_method(const std::string& name) {
  for (auto m : {AdaptMethod::original, AdaptMethod::seq2seq, AdaptMethod::dkm, AdaptMethod::ikm,
                 AdaptMethod::model_based, AdaptMethod::random_subset})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown adaptation method '" + name +
                              "' (original, seq2seq, dkm, ikm, model_based, random_subset)");
}

std::string incompatibility(const Checkpoint& ckpt, AdaptMethod method, std::size_t k_tilde) {
  const std::size_t k = ckpt.codebook.size();
  const std::string sizes = "K̃=" + std::to_string(k_tilde) + ", K=" + std::to_string(k);
  if (k_tilde < 1) return "K̃ must be >= 1";
  switch (method) {
    case AdaptMethod::original:
      return k_tilde == k ? "" : "original needs K̃ = K (" + sizes + ")";
    case AdaptMethod::seq2seq:
      return ckpt.adapter ? "" : "seq2seq needs a checkpoint trained with train_adapter = true";
    case AdaptMethod::dkm:
      return k_tilde < k ? "" : "dkm reduces the rate and needs K̃ < K (" + sizes + ")";
    case AdaptMethod::ikm:
      return k_tilde > k ? "" : "ikm increases the rate and needs K̃ > K (" + sizes + ")";
    case AdaptMethod::model_based:
      return "";
    case AdaptMethod::random_subset:
      return k_tilde <= k ? "" : "random_subset needs K̃ <= K (" + sizes + ")";
  }
  return "unknown method";
}

AdaptedCodebook adapt_codebook(const Checkpoint& ckpt, AdaptMethod method, std::size_t k_tilde) {
  if (auto why = incompatibility(ckpt, method, k_tilde); !why.empty()) throw std::invalid_argument(why);
  const auto& cfg = ckpt.config;
  const std::size_t k = ckpt.codebook.size();
  if (method == AdaptMethod::model_based)
    method = k_tilde < k ? AdaptMethod::dkm : k_tilde > k ? AdaptMethod::ikm : AdaptMethod::original;
  AdaptedCodebook out;
  switch (method) {
    case AdaptMethod::original:
      out.vectors = ckpt.codebook.matrix();
      break;
    case AdaptMethod::seq2seq: {
      NoGradGuard no_grad;
      const auto t = generate_codebook(ckpt.codebook, k_tilde, *ckpt.adapter, cfg.cross_forcing);
      out.vectors = Eigen::Map<const RowMatrix<float>>(t.data().data(), Eigen::Index(k_tilde), Eigen::Index(cfg.dim));
      out.extrapolated = k_tilde > 2 * k;
      break;
    }
    case AdaptMethod::dkm: {
      DkmOptions o;
      o.tau = cfg.tau;
      o.max_iters = cfg.dkm_iters;
      o.seed = cfg.seed;
      out.vectors = dkm_reduce(ckpt.codebook.matrix(), k_tilde, o).state.centroids;
      break;
    }
    case AdaptMethod::ikm: {
      IkmOptions o;
      o.mmd.lambda = cfg.ikm_lambda;
      o.mmd.eta = cfg.ikm_eta;
      o.mmd.max_iters = cfg.ikm_iters;
      o.tau = cfg.tau;
      o.dkm_iters = cfg.dkm_iters;
      o.seed = cfg.seed;
      out.vectors = ikm_increase(ckpt.codebook.matrix(), k_tilde, o).codebook;
      break;
    }
    case AdaptMethod::random_subset: {
      std::vector<Eigen::Index> order(k);
      std::iota(order.begin(), order.end(), Eigen::Index(0));
      std::seed_seq seq{std::uint64_t(cfg.seed), std::uint64_t(k_tilde)};
      std::mt19937_64 rng(seq);
      std::shuffle(order.begin(), order.end(), rng);
      const auto full = ckpt.codebook.matrix();
      out.vectors.resize(Eigen::Index(k_tilde), full.cols());
      for (std::size_t i = 0; i < k_tilde; ++i) out.vectors.row(Eigen::Index(i)) = full.row(order[i]);
      break;
    }
    case AdaptMethod::model_based:
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

metrics::EvalRecord evaluate_codebook(const Checkpoint& ckpt, const Dataset& data,
                                      const std::function<RowMatrix<float>()>& make_codebook, bool cache,
                                      const std::string& method, const std::optional<fs::path>& dump_dir,
                                      std::size_t dump_limit) {
  NoGradGuard no_grad;
  const std::size_t bs = ckpt.config.eval_batch_size;
  auto as_tensor = [](const RowMatrix<float>& m) {
    return Tensorf::from({std::size_t(m.rows()), std::size_t(m.cols())},
                         std::vector<float>(m.data(), m.data() + m.size()));
  };
  std::optional<Tensorf> cached;
  if (cache) cached = as_tensor(make_codebook());
  if (dump_dir) fs::create_directories(*dump_dir);

  metrics::EvalRecord r;
  r.method = method;
  r.seed = ckpt.config.seed;
  double sq_err = 0.0, ssim_sum = 0.0;
  std::vector<std::int64_t> usage;
  for (std::size_t start = 0; start < data.count; start += bs) {
    const std::size_t n = std::min(bs, data.count - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto x = make_batch(data, idx);
    const Tensorf cb = cache ? *cached : as_tensor(make_codebook());
    if (usage.empty()) usage.assign(cb.dim(0), 0);
    const auto q = quantize(ckpt.model.encode(x), cb);
    const auto x_hat = ckpt.model.decode(q.quantized);
    for (std::size_t i = 0; i < usage.size(); ++i) usage[i] += q.usage_counts[i];
    const auto xv = x.data(), yv = x_hat.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = double(xv[i]) - double(yv[i]);
      sq_err += d * d;
    }
    const std::size_t px = data.image_size();
    for (std::size_t b = 0; b < n; ++b) {
      const auto xi = xv.subspan(b * px, px), yi = yv.subspan(b * px, px);
      ssim_sum += metrics::ssim(xi, yi, data.height, data.width, 1.0);
      if (dump_dir && start + b < dump_limit) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu.png", start + b);
        write_png_gray(*dump_dir / name, yi, data.height, data.width);
      }
    }
  }
  r.k_tilde = usage.size();
  r.mse = sq_err / double(data.pixels.size());
  r.psnr = metrics::psnr_from_mse(r.mse, 1.0);
  r.ssim = ssim_sum / double(data.count);
  r.perplexity = metrics::perplexity(usage);
  r.usage = metrics::usage(usage);
  return r;
}

EvalReport run_eval(const Checkpoint& ckpt, const Dataset& data, const EvalOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report;
  const auto& ks = options.k_list.empty() ? ckpt.config.eval_k : options.k_list;
  auto dump_for = [&](const std::string& label) -> std::optional<fs::path> {
    if (!options.dump_dir) return std::nullopt;
    return *options.dump_dir / label;
  };
  if (options.dump_dir) {
    fs::create_directories(*options.dump_dir / "input");
    for (std::size_t i = 0; i < std::min(options.dump_limit, data.count); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.png", i);
      write_png_gray(*options.dump_dir / "input" / name, data.image(i), data.height, data.width);
    }
  }
  for (const auto method : options.methods)
    for (const auto k : ks) {
      if (auto why = incompatibility(ckpt, method, k); !why.empty()) {
        if (!options.skip_incompatible) throw std::invalid_argument(why);
        report.notes.push_back("skipped " + to_string(method) + " at K̃=" + std::to_string(k) + ": " + why);
        continue;
      }
      bool extrapolated = false;
      auto make = [&] {
        auto a = adapt_codebook(ckpt, method, k);
        extrapolated = a.extrapolated;
        return a.vectors;
      };
      const std::string label = to_string(method);
      report.records.push_back(evaluate_codebook(ckpt, data, make, options.cache, label,
                                                 dump_for(label + "_k" + std::to_string(k)), options.dump_limit));
      if (extrapolated)
        report.notes.push_back("extrapolation: " + label + " at K̃=" + std::to_string(k) +
                               " exceeds the trained range 2K=" + std::to_string(2 * ckpt.codebook.size()));
    }
  for (const auto& f : options.codebooks) {
    const auto cb = io::load_codebook(f.path);
    if (cb.dim() != ckpt.config.dim)
      throw std::invalid_argument(f.path.string() + ": codebook dim " + std::to_string(cb.dim()) +
                                  " does not match the model's d=" + std::to_string(ckpt.config.dim));
    const auto m = cb.matrix();
    report.records.push_back(evaluate_codebook(ckpt, data, [&] { return m; }, true, f.label, dump_for(f.label),
                                               options.dump_limit));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string to_csv(const std::vector<metrics::EvalRecord>& records) {
  std::string out = std::string(metrics::kCsvHeader) + "\n";
  for (const auto& r : records) out += metrics::to_csv_row(r) + "\n";
  return out;
}

void write_eval_outputs(const fs::path& csv, const EvalReport& report, const Checkpoint& ckpt,
                        const fs::path& checkpoint_dir, const EvalOptions& options) {
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  write_text_atomically(csv, to_csv(report.records));
  std::ostringstream m;
  m << "tool = raq eval\n"
    << "version = " << code_version() << "\n"
    << "checkpoint = " << fs::absolute(checkpoint_dir).string() << "\n"
    << "checkpoint_step = " << ckpt.step << "\n"
    << "seed = " << ckpt.config.seed << "\n"
    << "methods =";
  for (auto meth : options.methods) m << " " << to_string(meth);
  m << "\nk_list =";
  for (auto k : options.k_list.empty() ? ckpt.config.eval_k : options.k_list) m << " " << k;
  m << "\ncodebook_files =";
  for (const auto& f : options.codebooks) m << " " << f.label << ":" << fs::absolute(f.path).string();
  m << "\ncodebook_cache = " << (options.cache ? "per_k" : "per_batch") << "\n"
    << "eval_images = " << (ckpt.config.dataset == DatasetKind::idx ? ckpt.config.idx_eval_path
                                                                      : "synthetic_shapes seed " +
                                                                            std::to_string(ckpt.config.data_seed + 1))
    << "\n"
    << "ikm_init = normal, per-coordinate variance d^-1/2\n"
    << "data_range = 1\n"
    << "ssim = gaussian window 11, sigma 1.5, k1 0.01, k2 0.03\n";
  for (const auto& n : report.notes) m << "note = " << n << "\n";
  m << "# config\n" << serialize(ckpt.config);
  auto manifest = csv;
  manifest += ".manifest.txt";
  write_text_atomically(manifest, m.str());
}

}  // namespace raq::harness

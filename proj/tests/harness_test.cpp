#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "raq/harness/config.hpp"
#include "raq/harness/dataset.hpp"
#include "raq/harness/experiment.hpp"
#include "raq/harness/model.hpp"
#include "raq/harness/png.hpp"
#include "raq/io.hpp"

using namespace raq;
using namespace raq::harness;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.data_n = 64;
  c.eval_n = 32;
  c.hidden = 8;
  c.dim = 4;
  c.codebook_size = 8;
  c.k_min = 2;
  c.k_max = 16;
  c.adapter_layers = 1;
  c.steps = 20;
  c.batch_size = 8;
  c.checkpoint_every = 10;
  c.eval_k = {4, 8, 16};
  c.eval_batch_size = 8;
  c.ikm_iters = 30;
  return c;
}

struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& name) : path(fs::temp_directory_path() / ("raq_harness_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool same_values(const Tensorf& a, const Tensorf& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void append_be32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(char((v >> shift) & 0xff));
}

}  // namespace

TEST_SUITE("harness_cli") {

TEST_CASE("config round trip and errors") {
  auto c = small_config();
  c.cross_forcing = false;
  c.codebook_update = UpdateMode::gradient;
  c.lr = 1.5e-3;
  c.idx_path = "some/file.idx";
  CHECK(parse(serialize(c)) == c);
  CHECK(parse("# comment\nsteps = 7\n\n  beta=0.5  \n").steps == 7);
  CHECK(parse("beta=0.5").beta == 0.5);
  CHECK_THROWS_AS(parse("no_such_key = 1"), std::invalid_argument);
  CHECK_THROWS_AS(parse("steps = many"), std::invalid_argument);
  CHECK_THROWS_AS(parse("steps"), std::invalid_argument);
  CHECK(get(c, "eval_k") == "4,8,16");
  set(c, "eval_k", "2, 3");
  CHECK(c.eval_k == std::vector<std::size_t>{2, 3});
  const auto text = serialize(c);
  CHECK(std::size_t(std::count(text.begin(), text.end(), '\n')) == config_keys().size());
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(validate(ExperimentConfig{}));
  CHECK_NOTHROW(validate(small_config()));
  auto bad = [](auto edit) {
    auto c = small_config();
    edit(c);
    return c;
  };
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.image_size = 18; })), std::invalid_argument);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.latent_size = 3; })), std::invalid_argument);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.codebook_size = 1; })), std::invalid_argument);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.gamma = 1.0; })), std::invalid_argument);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.dataset = DatasetKind::idx; })), std::invalid_argument);
  CHECK(training_k_max(ExperimentConfig{}) == 64);
  CHECK(training_k_max(small_config()) == 16);
  auto c = small_config();
  c.k_max = 100;
  CHECK(training_k_max(c) == 16);
}

TEST_CASE("seed environment override") {
  auto c = small_config();
  ::setenv("RAQ_SEED", "41", 1);
  apply_env_overrides(c);
  ::unsetenv("RAQ_SEED");
  CHECK(c.seed == 41);
  apply_env_overrides(c);
  CHECK(c.seed == 41);
}

TEST_CASE("synthetic shapes are deterministic and in range") {
  const auto a = gen_synthetic_shapes(1000, 16, 5);
  const auto b = gen_synthetic_shapes(1000, 16, 5);
  const auto other = gen_synthetic_shapes(1000, 16, 6);
  CHECK(a.pixels == b.pixels);
  CHECK(a.pixels != other.pixels);
  CHECK(a.count == 1000);
  CHECK(a.height == 16);
  double sum = 0;
  for (float v : a.pixels) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
    sum += v;
  }
  const double mean = sum / double(a.pixels.size());
  CHECK(mean >= 0.05);
  CHECK(mean <= 0.6);
  for (std::size_t i = 0; i < a.count; ++i) {
    const auto img = a.image(i);
    REQUIRE(*std::max_element(img.begin(), img.end()) >= 0.3f);
  }
  CHECK_THROWS_AS(gen_synthetic_shapes(4, 12, 0), std::invalid_argument);
}

TEST_CASE("idx parsing from a byte-level fixture") {
  std::string bytes{'\0', '\0', '\x08', '\x03'};
  append_be32(bytes, 2);
  append_be32(bytes, 2);
  append_be32(bytes, 3);
  for (int v : {0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6}) bytes.push_back(char(v));
  std::istringstream is(bytes);
  const auto d = parse_idx(is);
  CHECK(d.count == 2);
  CHECK(d.height == 2);
  CHECK(d.width == 3);
  CHECK(d.pixels[1] == 1.0f);
  CHECK(d.pixels[2] == doctest::Approx(0.2));
  CHECK(d.pixels[11] == doctest::Approx(6.0 / 255));

  std::string wrong = bytes;
  wrong[3] = '\x01';
  std::istringstream bad(wrong);
  try {
    parse_idx(bad);
    FAIL("expected idx_error");
  } catch (const idx_error& e) {
    CHECK(std::string(e.what()).find("00 00 08 01") != std::string::npos);
  }

  std::istringstream trunc(bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(parse_idx(trunc), idx_error);
  std::istringstream header(bytes.substr(0, 9));
  CHECK_THROWS_AS(parse_idx(header), idx_error);
}

TEST_CASE("idx files round trip at 8-bit precision") {
  ScratchDir dir("idx");
  const auto a = gen_synthetic_shapes(10, 16, 3);
  write_idx(dir.path / "a.idx", a);
  const auto b = read_idx(dir.path / "a.idx");
  CHECK(b.count == 10);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) REQUIRE(std::abs(a.pixels[i] - b.pixels[i]) <= 0.5f / 255 + 1e-6f);
  try {
    read_idx(dir.path / "missing.idx");
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("missing.idx") != std::string::npos);
  }

  auto cfg = small_config();
  cfg.dataset = DatasetKind::idx;
  cfg.idx_path = (dir.path / "a.idx").string();
  CHECK(load_train_split(cfg).pixels == b.pixels);
  cfg.image_size = 32;
  cfg.latent_size = 8;
  CHECK_THROWS(load_train_split(cfg));
}

TEST_CASE("model shapes and parameter order") {
  std::mt19937_64 rng(1);
  auto m = ToyVqModel::init(8, 4, rng);
  const auto data = gen_synthetic_shapes(3, 16, 1);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto x = make_batch(data, idx);
  CHECK(x.shape() == Shape{3, 1, 16, 16});
  const auto z = m.encode(x);
  CHECK(z.shape() == Shape{3, 4, 4, 4});
  const auto y = m.decode(z);
  CHECK(y.shape() == Shape{3, 1, 16, 16});
  for (float v : y.data()) {
    REQUIRE(v > 0.0f);
    REQUIRE(v < 1.0f);
  }
  const auto ps = m.parameters();
  const auto shapes = ToyVqModel::parameter_shapes(8, 4);
  REQUIRE(ps.size() == shapes.size());
  for (std::size_t i = 0; i < ps.size(); ++i) CHECK(ps[i].shape() == shapes[i]);
  const auto copy = ToyVqModel::from_parameters(8, 4, ps);
  CHECK(same_values(copy.decode(copy.encode(x)), y));
}

TEST_CASE("checkpoint round trip") {
  ScratchDir dir("ckpt");
  auto cfg = small_config();
  cfg.steps = 6;
  cfg.checkpoint_every = 3;
  run_train(cfg, dir.path);
  const auto a = load_checkpoint(dir.path);
  CHECK(a.step == 6);
  CHECK(a.config == cfg);
  CHECK(a.adapter.has_value());
  save_checkpoint(dir.path / "copy", a);
  const auto b = load_checkpoint(dir.path / "copy");
  CHECK(b.step == a.step);
  CHECK(b.codebook.matrix() == a.codebook.matrix());
  CHECK(b.codebook.ema()->counts == a.codebook.ema()->counts);
  const auto pa = a.optimizer_params(), pb = b.optimizer_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(same_values(pa[i], pb[i]));
    const auto* ma = a.optimizer.find(pa[i]);
    const auto* mb = b.optimizer.find(pb[i]);
    REQUIRE(ma != nullptr);
    REQUIRE(mb != nullptr);
    CHECK(ma->step == mb->step);
    CHECK(ma->m == mb->m);
    CHECK(ma->v == mb->v);
  }
  CHECK(slurp(dir.path / "manifest.txt").find("step = 6") != std::string::npos);
  CHECK_THROWS_AS(load_checkpoint(dir.path / "nothing"), std::runtime_error);
}

TEST_CASE("step plans are a pure function of seed and step") {
  const auto cfg = small_config();
  const auto a = plan_step(cfg, 64, 7), b = plan_step(cfg, 64, 7), c = plan_step(cfg, 64, 8);
  CHECK(a.batch == b.batch);
  CHECK(a.k_tilde == b.k_tilde);
  CHECK(a.batch != c.batch);
  CHECK(a.batch.size() == cfg.batch_size);
  for (std::size_t s = 0; s < 200; ++s) {
    const auto p = plan_step(cfg, 64, s);
    REQUIRE(p.k_tilde >= cfg.k_min);
    REQUIRE(p.k_tilde <= training_k_max(cfg));
    for (auto i : p.batch) REQUIRE(i < 64);
  }
}

TEST_CASE("interrupted and resumed training matches an uninterrupted run") {
  ScratchDir a("resume_a"), b("resume_b");
  const auto cfg = small_config();
  const auto straight = run_train(cfg, a.path);
  TrainOptions first;
  first.stop_at = 13;
  const auto partial = run_train(cfg, b.path, first);
  CHECK(partial.size() == 13);
  CHECK(load_checkpoint(b.path).step == 13);
  TrainOptions rest;
  rest.resume = true;
  const auto resumed = run_train(cfg, b.path, rest);
  REQUIRE(resumed.size() == straight.size());
  for (std::size_t i = 0; i < straight.size(); ++i) REQUIRE(to_csv_row(resumed[i]) == to_csv_row(straight[i]));
  CHECK(slurp(a.path / "train_log.csv") == slurp(b.path / "train_log.csv"));
  const auto ca = load_checkpoint(a.path), cb = load_checkpoint(b.path);
  const auto pa = ca.optimizer_params(), pb = cb.optimizer_params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(same_values(pa[i], pb[i]));

  auto changed = cfg;
  changed.lr = 1e-2;
  CHECK_THROWS_AS(run_train(changed, b.path, rest), std::invalid_argument);
}

TEST_CASE("adaptation method compatibility") {
  auto cfg = small_config();
  auto ckpt = init_checkpoint(cfg);
  CHECK(incompatibility(ckpt, AdaptMethod::original, 8).empty());
  CHECK(!incompatibility(ckpt, AdaptMethod::original, 4).empty());
  CHECK(incompatibility(ckpt, AdaptMethod::dkm, 4).empty());
  CHECK(!incompatibility(ckpt, AdaptMethod::dkm, 8).empty());
  CHECK(incompatibility(ckpt, AdaptMethod::ikm, 16).empty());
  CHECK(!incompatibility(ckpt, AdaptMethod::ikm, 8).empty());
  CHECK(!incompatibility(ckpt, AdaptMethod::random_subset, 9).empty());
  CHECK_THROWS_AS(adapt_codebook(ckpt, AdaptMethod::dkm, 8), std::invalid_argument);
  CHECK_THROWS_AS(parse_method("nearest"), std::invalid_argument);
  for (auto m : {AdaptMethod::original, AdaptMethod::seq2seq, AdaptMethod::dkm, AdaptMethod::ikm,
                 AdaptMethod::model_based, AdaptMethod::random_subset})
    CHECK(parse_method(to_string(m)) == m);

  cfg.train_adapter = false;
  const auto plain = init_checkpoint(cfg);
  CHECK(!plain.adapter);
  CHECK(!incompatibility(plain, AdaptMethod::seq2seq, 8).empty());

  const auto g = adapt_codebook(ckpt, AdaptMethod::seq2seq, 20);
  CHECK(g.vectors.rows() == 20);
  CHECK(g.extrapolated);
  CHECK(!adapt_codebook(ckpt, AdaptMethod::seq2seq, 16).extrapolated);
  CHECK(adapt_codebook(ckpt, AdaptMethod::model_based, 8).vectors == ckpt.codebook.matrix());
  CHECK(adapt_codebook(ckpt, AdaptMethod::model_based, 4).vectors.rows() == 4);
}

TEST_CASE("random subset at full size is a permutation of the codebook") {
  const auto ckpt = init_checkpoint(small_config());
  const auto e = ckpt.codebook.matrix();
  const auto p = adapt_codebook(ckpt, AdaptMethod::random_subset, 8).vectors;
  std::set<Eigen::Index> seen;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < e.rows(); ++j)
      if (p.row(i) == e.row(j)) seen.insert(j);
  CHECK(seen.size() == 8);
  CHECK(adapt_codebook(ckpt, AdaptMethod::random_subset, 3).vectors ==
        adapt_codebook(ckpt, AdaptMethod::random_subset, 3).vectors);
}

TEST_CASE("a codebook file equal to the trained one reproduces the baseline") {
  ScratchDir dir("cbfile");
  const auto cfg = small_config();
  const auto ckpt = init_checkpoint(cfg);
  io::save_codebook(dir.path / "same.rqcb", Codebook<float>(ckpt.codebook.matrix(), UpdateMode::gradient));
  EvalOptions opt;
  opt.methods = {AdaptMethod::original};
  opt.k_list = {8};
  opt.codebooks = {{"file", dir.path / "same.rqcb"}};
  const auto data = load_eval_split(cfg);
  const auto r = run_eval(ckpt, data, opt);
  REQUIRE(r.records.size() == 2);
  CHECK(r.records[1].method == "file");
  CHECK(r.records[0].mse == r.records[1].mse);
  CHECK(r.records[0].ssim == r.records[1].ssim);
  CHECK(r.records[0].perplexity == r.records[1].perplexity);
  CHECK(r.records[0].usage == r.records[1].usage);

  io::save_codebook(dir.path / "wide.rqcb", Codebook<float>(RowMatrix<float>::Zero(8, 5), UpdateMode::gradient));
  opt.codebooks = {{"wide", dir.path / "wide.rqcb"}};
  CHECK_THROWS_AS(run_eval(ckpt, data, opt), std::invalid_argument);
}

TEST_CASE("eval skips incompatible combinations with a note") {
  const auto cfg = small_config();
  const auto ckpt = init_checkpoint(cfg);
  EvalOptions opt;
  opt.methods = {AdaptMethod::dkm, AdaptMethod::seq2seq};
  opt.k_list = {4, 8, 20};
  const auto r = run_eval(ckpt, load_eval_split(cfg), opt);
  CHECK(r.records.size() == 4);
  std::size_t skipped = 0, extrapolated = 0;
  for (const auto& n : r.notes) {
    skipped += n.rfind("skipped", 0) == 0;
    extrapolated += n.rfind("extrapolation", 0) == 0;
  }
  CHECK(skipped == 2);
  CHECK(extrapolated == 1);
  opt.skip_incompatible = false;
  CHECK_THROWS_AS(run_eval(ckpt, load_eval_split(cfg), opt), std::invalid_argument);
}

TEST_CASE("cached adaptation gives identical metrics and is faster") {
  auto cfg = small_config();
  cfg.codebook_size = 64;
  cfg.k_max = 256;
  cfg.dim = 8;
  cfg.adapter_layers = 2;
  cfg.eval_n = 64;
  cfg.eval_batch_size = 4;
  const auto ckpt = init_checkpoint(cfg);
  const auto data = load_eval_split(cfg);
  std::size_t calls = 0;
  auto make = [&] {
    ++calls;
    return adapt_codebook(ckpt, AdaptMethod::seq2seq, 256).vectors;
  };
  auto timed = [&](bool cache) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = evaluate_codebook(ckpt, data, make, cache, "seq2seq");
    return std::make_pair(r, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };
  const auto [cached, t_cached] = timed(true);
  CHECK(calls == 1);
  const auto [fresh, t_fresh] = timed(false);
  CHECK(calls == 1 + 16);
  CHECK(to_csv_row(cached) == to_csv_row(fresh));
  CHECK(t_fresh > 2.0 * t_cached);
}

TEST_CASE("png round trip and reconstruction dumps") {
  ScratchDir dir("png");
  std::vector<float> px{0.0f, 0.5f, 1.0f, 1.2f, -0.1f, 0.25f};
  write_png_gray(dir.path / "a.png", px, 2, 3);
  const auto img = read_png_gray(dir.path / "a.png");
  CHECK(img.height == 2);
  CHECK(img.width == 3);
  CHECK(img.pixels == std::vector<std::uint8_t>{0, 128, 255, 255, 0, 64});

  const auto cfg = small_config();
  const auto ckpt = init_checkpoint(cfg);
  EvalOptions opt;
  opt.k_list = {4};
  opt.dump_dir = dir.path / "dump";
  opt.dump_limit = 5;
  run_eval(ckpt, load_eval_split(cfg), opt);
  CHECK(fs::exists(dir.path / "dump" / "input" / "00004.png"));
  CHECK(!fs::exists(dir.path / "dump" / "input" / "00005.png"));
  CHECK(fs::exists(dir.path / "dump" / "seq2seq_k4" / "00000.png"));
  CHECK(read_png_gray(dir.path / "dump" / "seq2seq_k4" / "00004.png").width == 16);
}

TEST_CASE("eval outputs a csv and a manifest") {
  ScratchDir dir("evalout");
  const auto cfg = small_config();
  const auto ckpt = init_checkpoint(cfg);
  EvalOptions opt;
  opt.methods = {AdaptMethod::seq2seq, AdaptMethod::model_based};
  const auto r = run_eval(ckpt, load_eval_split(cfg), opt);
  write_eval_outputs(dir.path / "out" / "eval.csv", r, ckpt, dir.path, opt);
  const auto csv = slurp(dir.path / "out" / "eval.csv");
  CHECK(csv.substr(0, csv.find('\n')) == metrics::kCsvHeader);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(fs::exists(dir.path / "out" / "eval.csv.manifest.txt"));
  for (const auto& rec : r.records) {
    CHECK(rec.psnr > 0.0);
    CHECK(rec.usage <= rec.k_tilde);
    CHECK(rec.perplexity <= double(rec.usage) + 1e-9);
  }
}

}  // TEST_SUITE

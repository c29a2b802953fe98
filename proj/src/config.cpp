#include "raq/harness/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace raq::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw std::invalid_argument("config: key '" + key + "' expects " + expected + ", got '" + value + "'");
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::string fmt_double(double v) {
  // Shortest representation that parses back to the same value.
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field size_field(T ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::to_string(c.*member); },
          [member](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*member = T(parse_uint(k, v)); }};
}

Field double_field(double ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return fmt_double(c.*member); },
          [member](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*member = parse_double(k, v); }};
}

Field bool_field(bool ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*member = parse_bool(k, v); }};
}

Field string_field(std::string ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return c.*member; },
          [member](ExperimentConfig& c, const std::string&, const std::string& v) { c.*member = v; }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"dataset",
       {[](const ExperimentConfig& c) {
          return std::string(c.dataset == DatasetKind::idx ? "idx" : "synthetic_shapes");
        },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          if (v == "synthetic_shapes") c.dataset = DatasetKind::synthetic_shapes;
          else if (v == "idx") c.dataset = DatasetKind::idx;
          else bad_value(k, v, "synthetic_shapes or idx");
        }}},
      {"data_n", size_field(&ExperimentConfig::data_n)},
      {"data_seed", size_field(&ExperimentConfig::data_seed)},
      {"idx_path", string_field(&ExperimentConfig::idx_path)},
      {"idx_eval_path", string_field(&ExperimentConfig::idx_eval_path)},
      {"eval_n", size_field(&ExperimentConfig::eval_n)},
      {"image_size", size_field(&ExperimentConfig::image_size)},
      {"latent_size", size_field(&ExperimentConfig::latent_size)},
      {"dim", size_field(&ExperimentConfig::dim)},
      {"hidden", size_field(&ExperimentConfig::hidden)},
      {"codebook_size", size_field(&ExperimentConfig::codebook_size)},
      {"k_min", size_field(&ExperimentConfig::k_min)},
      {"k_max", size_field(&ExperimentConfig::k_max)},
      {"adapter_layers", size_field(&ExperimentConfig::adapter_layers)},
      {"train_adapter", bool_field(&ExperimentConfig::train_adapter)},
      {"cross_forcing", bool_field(&ExperimentConfig::cross_forcing)},
      {"codebook_update",
       {[](const ExperimentConfig& c) { return std::string(c.codebook_update == UpdateMode::ema ? "ema" : "gradient"); },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          if (v == "ema") c.codebook_update = UpdateMode::ema;
          else if (v == "gradient") c.codebook_update = UpdateMode::gradient;
          else bad_value(k, v, "ema or gradient");
        }}},
      {"beta", double_field(&ExperimentConfig::beta)},
      {"gamma", double_field(&ExperimentConfig::gamma)},
      {"lr", double_field(&ExperimentConfig::lr)},
      {"weight_decay", double_field(&ExperimentConfig::weight_decay)},
      {"steps", size_field(&ExperimentConfig::steps)},
      {"batch_size", size_field(&ExperimentConfig::batch_size)},
      {"checkpoint_every", size_field(&ExperimentConfig::checkpoint_every)},
      {"tau", double_field(&ExperimentConfig::tau)},
      {"dkm_iters", size_field(&ExperimentConfig::dkm_iters)},
      {"ikm_iters", size_field(&ExperimentConfig::ikm_iters)},
      {"ikm_lambda", double_field(&ExperimentConfig::ikm_lambda)},
      {"ikm_eta", double_field(&ExperimentConfig::ikm_eta)},
      {"eval_k",
       {[](const ExperimentConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.eval_k.size(); ++i) out += (i ? "," : "") + std::to_string(c.eval_k[i]);
          return out;
        },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          std::vector<std::size_t> ks;
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ',')) ks.push_back(std::size_t(parse_uint(k, trim(item))));
          if (ks.empty()) bad_value(k, v, "a comma-separated list of sizes");
          c.eval_k = std::move(ks);
        }}},
      {"eval_batch_size", size_field(&ExperimentConfig::eval_batch_size)},
      {"seed", size_field(&ExperimentConfig::seed)},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& [k, f] : fields()) out.push_back(k);
    return out;
  }();
  return keys;
}

std::string get(const ExperimentConfig& cfg, const std::string& key) { return field(key).get(cfg); }

void set(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  field(key).set(cfg, key, trim(value));
}

void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (c.image_size < 16 || c.image_size % 4 != 0) fail("image_size must be a multiple of 4 and >= 16");
  if (c.latent_size != c.image_size / 4) fail("latent_size must equal image_size / 4 for the toy topology");
  if (c.dim < 1 || c.hidden < 1) fail("dim and hidden must be >= 1");
  if (c.k_min < 1 || c.k_min > c.k_max) fail("need 1 <= k_min <= k_max");
  if (c.codebook_size < c.k_min || c.codebook_size > c.k_max) fail("codebook_size must lie in [k_min, k_max]");
  if (c.adapter_layers < 1) fail("adapter_layers must be >= 1");
  if (c.beta < 0) fail("beta must be >= 0");
  if (c.gamma < 0 || c.gamma >= 1) fail("gamma must lie in [0, 1)");
  if (c.lr <= 0) fail("lr must be positive");
  if (c.batch_size < 1 || c.eval_batch_size < 1) fail("batch sizes must be >= 1");
  if (c.tau <= 0) fail("tau must be positive");
  if (c.ikm_eta <= 0 || c.ikm_lambda < 0) fail("need ikm_eta > 0 and ikm_lambda >= 0");
  for (auto k : c.eval_k)
    if (k < 1) fail("eval_k sizes must be >= 1");
  if (c.dataset == DatasetKind::idx && (c.idx_path.empty() || c.idx_eval_path.empty()))
    fail("idx datasets need idx_path and idx_eval_path");
  if (c.dataset == DatasetKind::synthetic_shapes && (c.data_n < 1 || c.eval_n < 1)) fail("data_n and eval_n must be >= 1");
}

std::string serialize(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(cfg) + "\n";
  return out;
}

ExperimentConfig parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
    set(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config " + path.string());
  os << serialize(cfg);
}

void apply_env_overrides(ExperimentConfig& cfg) {
  if (const char* s = std::getenv("RAQ_SEED"); s && *s) set(cfg, "seed", s);
}

std::size_t training_k_max(const ExperimentConfig& cfg) {
  return std::max(cfg.k_min, std::min(cfg.k_max, 2 * cfg.codebook_size));
}

}  // namespace raq::harness

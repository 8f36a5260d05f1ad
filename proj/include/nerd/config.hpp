#pragma once

// `key = value` configuration documents. Lines starting with '#' and blank
// lines are ignored; unknown keys and repeated keys are errors. The `variant`
// key selects a preset that the remaining keys then override.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "nerd/losses.hpp"
#include "nerd/model.hpp"

namespace nerd {

struct TrainConfig {
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 0;  // 0: one step per training image
  std::size_t batch = 1;
  std::size_t patch = 256;
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, eps_adam = 1e-8;
  double clip = 1.0;
  std::size_t val_every = 1;
  LossWeights loss;

  void validate() const {
    if (!(lr_min >= 0) || !(lr_min <= lr0)) throw ConfigError("train.lr_min must lie in [0, train.lr0]");
    if (batch == 0) throw ConfigError("train.batch must be >= 1");
    if (patch != 0 && patch < 8) throw ConfigError("train.patch must be 0 (whole image) or >= 8");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must lie in [0, 1)");
    if (!(eps_adam > 0)) throw ConfigError("train.eps_adam must be positive");
    if (!(clip > 0)) throw ConfigError("train.clip must be positive");
    if (val_every == 0) throw ConfigError("train.val_every must be >= 1");
    if (loss.freq < 0 || loss.edge < 0 || loss.inr < 0) throw ConfigError("loss weights must be non-negative");
  }
};

struct RunConfig {
  ModelConfig model = ModelConfig::full();
  TrainConfig train;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument("");
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a real number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::array<std::size_t, 3> parse_triple(const std::string& key, const std::string& v) {
  std::array<std::size_t, 3> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == 3) throw ConfigError(key + ": expected three comma-separated integers");
    out[n++] = parse_size(key, trim(item));
  }
  if (n != 3) throw ConfigError(key + ": expected three comma-separated integers");
  return out;
}

inline std::string triple(const std::array<std::size_t, 3>& a) {
  return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]);
}

inline std::string real(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace detail

inline RunConfig parse_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    auto key = detail::trim(std::string_view(t).substr(0, eq));
    auto value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + key);
  }

  RunConfig rc;
  if (auto it = kv.find("variant"); it != kv.end()) {
    if (it->second == "full") rc.model = ModelConfig::full();
    else if (it->second == "small") rc.model = ModelConfig::small();
    else if (it->second == "tiny") rc.model = ModelConfig::tiny();
    else throw ConfigError("variant: expected full, small or tiny, got '" + it->second + "'");
    kv.erase(it);
  }
  auto& m = rc.model;
  auto& t = rc.train;
  using namespace detail;
  for (const auto& [k, v] : kv) {
    if (k == "channels") m.unet.channels = parse_triple(k, v);
    else if (k == "blocks") m.unet.blocks = parse_triple(k, v);
    else if (k == "heads") m.unet.heads = parse_triple(k, v);
    else if (k == "unets_per_scale") m.unets_per_scale = parse_triple(k, v);
    else if (k == "inr.L") m.inr_L = parse_size(k, v);
    else if (k == "inr.hidden") m.inr_hidden = parse_size(k, v);
    else if (k == "use_inr") m.use_inr = parse_bool(k, v);
    else if (k == "inr_within_branch") m.inr_within_branch = parse_bool(k, v);
    else if (k == "inr_fixed_scale") m.inr_fixed_scale = parse_bool(k, v);
    else if (k == "use_position_encoding") m.use_position_encoding = parse_bool(k, v);
    else if (k == "use_interpolation") m.use_interpolation = parse_bool(k, v);
    else if (k == "shared_encoder") m.shared_encoder = parse_bool(k, v);
    else if (k == "feedback") {
      if (v == "bfpu") m.feedback = FeedbackMode::bfpu;
      else if (v == "concat") m.feedback = FeedbackMode::concat;
      else if (v == "none") m.feedback = FeedbackMode::none;
      else throw ConfigError("feedback: expected bfpu, concat or none, got '" + v + "'");
    }
    else if (k == "train.lr0") t.lr0 = parse_real(k, v);
    else if (k == "train.lr_min") t.lr_min = parse_real(k, v);
    else if (k == "train.epochs") t.epochs = parse_size(k, v);
    else if (k == "train.steps_per_epoch") t.steps_per_epoch = parse_size(k, v);
    else if (k == "train.batch") t.batch = parse_size(k, v);
    else if (k == "train.patch") t.patch = parse_size(k, v);
    else if (k == "train.seed") t.seed = parse_size(k, v);
    else if (k == "train.beta1") t.beta1 = parse_real(k, v);
    else if (k == "train.beta2") t.beta2 = parse_real(k, v);
    else if (k == "train.eps_adam") t.eps_adam = parse_real(k, v);
    else if (k == "train.clip") t.clip = parse_real(k, v);
    else if (k == "train.val_every") t.val_every = parse_size(k, v);
    else if (k == "loss.freq") t.loss.freq = parse_real(k, v);
    else if (k == "loss.edge") t.loss.edge = parse_real(k, v);
    else if (k == "loss.inr") t.loss.inr = parse_real(k, v);
    else throw ConfigError("unknown key: " + k);
  }
  try {
    m.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  t.validate();
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Model section in canonical form: every key, fixed order.
inline std::string canonical_model_text(const ModelConfig& m) {
  using namespace detail;
  auto b = [](bool x) { return x ? "true" : "false"; };
  std::ostringstream os;
  os << "variant = " << m.variant << "\n"
     << "channels = " << triple(m.unet.channels) << "\n"
     << "blocks = " << triple(m.unet.blocks) << "\n"
     << "heads = " << triple(m.unet.heads) << "\n"
     << "unets_per_scale = " << triple(m.unets_per_scale) << "\n"
     << "inr.L = " << m.inr_L << "\n"
     << "inr.hidden = " << m.inr_hidden << "\n"
     << "use_inr = " << b(m.use_inr) << "\n"
     << "inr_within_branch = " << b(m.inr_within_branch) << "\n"
     << "inr_fixed_scale = " << b(m.inr_fixed_scale) << "\n"
     << "use_position_encoding = " << b(m.use_position_encoding) << "\n"
     << "use_interpolation = " << b(m.use_interpolation) << "\n"
     << "shared_encoder = " << b(m.shared_encoder) << "\n"
     << "feedback = " << to_string(m.feedback) << "\n";
  return os.str();
}

inline std::string canonical_text(const RunConfig& rc) {
  using namespace detail;
  const auto& t = rc.train;
  std::ostringstream os;
  os << canonical_model_text(rc.model) << "train.lr0 = " << real(t.lr0) << "\n"
     << "train.lr_min = " << real(t.lr_min) << "\n"
     << "train.epochs = " << t.epochs << "\n"
     << "train.steps_per_epoch = " << t.steps_per_epoch << "\n"
     << "train.batch = " << t.batch << "\n"
     << "train.patch = " << t.patch << "\n"
     << "train.seed = " << t.seed << "\n"
     << "train.beta1 = " << real(t.beta1) << "\n"
     << "train.beta2 = " << real(t.beta2) << "\n"
     << "train.eps_adam = " << real(t.eps_adam) << "\n"
     << "train.clip = " << real(t.clip) << "\n"
     << "train.val_every = " << t.val_every << "\n"
     << "loss.freq = " << real(t.loss.freq) << "\n"
     << "loss.edge = " << real(t.loss.edge) << "\n"
     << "loss.inr = " << real(t.loss.inr) << "\n";
  return os.str();
}

/// Identifies a model architecture; checkpoints are only loadable into a
/// model with the same digest.
inline std::uint64_t model_digest(const ModelConfig& m) { return fnv1a(canonical_model_text(m)); }

}  // namespace nerd

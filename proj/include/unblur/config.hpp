#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "unblur/losses.hpp"
#include "unblur/networks.hpp"
#include "unblur/rng.hpp"

namespace unblur {

// Ablation variants, cumulative in the order of the paper's study.
enum class AblationPreset {
  deblur_only,
  add_blurring_branch,
  add_disentanglement,
  add_kl,
  full,  // adds the perceptual loss
};

inline const char* to_string(AblationPreset p) {
  switch (p) {
    case AblationPreset::deblur_only: return "deblur_only";
    case AblationPreset::add_blurring_branch: return "add_blurring_branch";
    case AblationPreset::add_disentanglement: return "add_disentanglement";
    case AblationPreset::add_kl: return "add_kl";
    case AblationPreset::full: return "full";
  }
  return "?";
}

inline AblationPreset ablation_from_string(const std::string& s) {
  if (s == "deblur_only") return AblationPreset::deblur_only;
  if (s == "add_blurring_branch") return AblationPreset::add_blurring_branch;
  if (s == "add_disentanglement") return AblationPreset::add_disentanglement;
  if (s == "add_kl") return AblationPreset::add_kl;
  if (s == "full" || s == "add_perceptual") return AblationPreset::full;
  throw ParamError("unknown ablation preset: " + s);
}

inline const char* to_string(TaskPreset p) {
  switch (p) {
    case TaskPreset::face: return "face";
    case TaskPreset::text: return "text";
    case TaskPreset::generic: return "generic";
  }
  return "?";
}

inline TaskPreset task_from_string(const std::string& s) {
  if (s == "face") return TaskPreset::face;
  if (s == "text") return TaskPreset::text;
  if (s == "generic") return TaskPreset::generic;
  throw ParamError("unknown task preset: " + s);
}

struct TrainConfig {
  LossWeights weights;
  NetworkConfig net;
  int batch_size = 16;
  int epochs_flat = 40;
  int epochs_decay = 40;
  double lr0 = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int d_steps_per_g = 2;
  TaskPreset task_preset = TaskPreset::generic;
  AblationPreset ablation_preset = AblationPreset::full;
  uint64_t master_seed = 0;
  int iters_per_epoch = 0;   // 0: ceil(max(|B|,|S|) / batch_size)
  double grad_clip = 0.0;    // 0: off
  int log_every = 1;
  int checkpoint_every = 1;  // epochs
  std::string extractor_file;  // optional pretrained feature network

  bool use_blurring_branch() const {
    return ablation_preset != AblationPreset::deblur_only;
  }
  bool use_blur_code() const {
    return ablation_preset == AblationPreset::add_disentanglement ||
           ablation_preset == AblationPreset::add_kl ||
           ablation_preset == AblationPreset::full;
  }
  bool use_kl() const {
    return ablation_preset == AblationPreset::add_kl ||
           ablation_preset == AblationPreset::full;
  }
  bool use_perceptual() const {
    return ablation_preset == AblationPreset::full &&
           task_preset != TaskPreset::text;
  }
  bool allow_flips() const { return task_preset != TaskPreset::text; }

  int total_epochs() const { return epochs_flat + epochs_decay; }

  void validate() const {
    weights.validate();
    net.validate();
    if (batch_size < 1) throw ParamError("batch_size must be >= 1");
    if (epochs_flat < 0 || epochs_decay < 0)
      throw ParamError("epoch counts must be nonnegative");
    if (total_epochs() < 1) throw ParamError("schedule has no epochs");
    if (!(lr0 > 0)) throw ParamError("lr0 must be positive");
    if (d_steps_per_g < 1) throw ParamError("d_steps_per_g must be >= 1");
    if (iters_per_epoch < 0) throw ParamError("iters_per_epoch must be >= 0");
    if (grad_clip < 0) throw ParamError("grad_clip must be >= 0");
    if (log_every < 1 || checkpoint_every < 1)
      throw ParamError("log_every/checkpoint_every must be >= 1");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ParamError("bad numeric value for " + key + ": '" + v + "'");
  return out;
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ParamError("bad integer value for " + key + ": '" + v + "'");
  return out;
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ParamError("bad unsigned value for " + key + ": '" + v + "'");
  return out;
}

}  // namespace detail

// Fully resolved key=value form; the echo of a run reproduces the run.
inline std::map<std::string, std::string> config_to_map(const TrainConfig& c) {
  using detail::fmt_double;
  std::map<std::string, std::string> m;
  m["lambda_adv"] = fmt_double(c.weights.lambda_adv);
  m["lambda_kl"] = fmt_double(c.weights.lambda_kl);
  m["lambda_cc"] = fmt_double(c.weights.lambda_cc);
  m["lambda_p"] = fmt_double(c.weights.lambda_p);
  m["image_channels"] = std::to_string(c.net.image_channels);
  m["base_width"] = std::to_string(c.net.base_width);
  m["latent_dim"] = std::to_string(c.net.latent_dim);
  m["disc_scales"] = std::to_string(c.net.disc_scales);
  m["crop_size"] = std::to_string(c.net.crop_size);
  m["batch_size"] = std::to_string(c.batch_size);
  m["epochs_flat"] = std::to_string(c.epochs_flat);
  m["epochs_decay"] = std::to_string(c.epochs_decay);
  m["lr0"] = fmt_double(c.lr0);
  m["adam_beta1"] = fmt_double(c.adam_beta1);
  m["adam_beta2"] = fmt_double(c.adam_beta2);
  m["d_steps_per_g"] = std::to_string(c.d_steps_per_g);
  m["task_preset"] = to_string(c.task_preset);
  m["ablation_preset"] = to_string(c.ablation_preset);
  m["master_seed"] = std::to_string(c.master_seed);
  m["iters_per_epoch"] = std::to_string(c.iters_per_epoch);
  m["grad_clip"] = fmt_double(c.grad_clip);
  m["log_every"] = std::to_string(c.log_every);
  m["checkpoint_every"] = std::to_string(c.checkpoint_every);
  m["extractor_file"] = c.extractor_file;
  return m;
}

// Unknown keys are rejected: silent typos in hyper-parameters are the
// costliest failure mode this tool has.
inline TrainConfig config_from_map(const std::map<std::string, std::string>& m) {
  using namespace detail;
  TrainConfig c;
  for (const auto& [key, v] : m) {
    if (key == "lambda_adv") c.weights.lambda_adv = parse_double(key, v);
    else if (key == "lambda_kl") c.weights.lambda_kl = parse_double(key, v);
    else if (key == "lambda_cc") c.weights.lambda_cc = parse_double(key, v);
    else if (key == "lambda_p") c.weights.lambda_p = parse_double(key, v);
    else if (key == "image_channels") c.net.image_channels = static_cast<int>(parse_int(key, v));
    else if (key == "base_width") c.net.base_width = static_cast<int>(parse_int(key, v));
    else if (key == "latent_dim") c.net.latent_dim = static_cast<int>(parse_int(key, v));
    else if (key == "disc_scales") c.net.disc_scales = static_cast<int>(parse_int(key, v));
    else if (key == "crop_size") c.net.crop_size = static_cast<int>(parse_int(key, v));
    else if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(key, v));
    else if (key == "epochs_flat") c.epochs_flat = static_cast<int>(parse_int(key, v));
    else if (key == "epochs_decay") c.epochs_decay = static_cast<int>(parse_int(key, v));
    else if (key == "lr0") c.lr0 = parse_double(key, v);
    else if (key == "adam_beta1") c.adam_beta1 = parse_double(key, v);
    else if (key == "adam_beta2") c.adam_beta2 = parse_double(key, v);
    else if (key == "d_steps_per_g") c.d_steps_per_g = static_cast<int>(parse_int(key, v));
    else if (key == "task_preset") c.task_preset = task_from_string(v);
    else if (key == "ablation_preset") c.ablation_preset = ablation_from_string(v);
    else if (key == "master_seed") c.master_seed = parse_u64(key, v);
    else if (key == "iters_per_epoch") c.iters_per_epoch = static_cast<int>(parse_int(key, v));
    else if (key == "grad_clip") c.grad_clip = parse_double(key, v);
    else if (key == "log_every") c.log_every = static_cast<int>(parse_int(key, v));
    else if (key == "checkpoint_every") c.checkpoint_every = static_cast<int>(parse_int(key, v));
    else if (key == "extractor_file") c.extractor_file = v;
    else throw ParamError("unknown config key: '" + key + "'");
  }
  c.validate();
  return c;
}

inline std::map<std::string, std::string> read_config_map(
    const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open config: " + file.string());
  std::map<std::string, std::string> m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParamError("expected key=value at " + file.string() + ":" +
                       std::to_string(lineno));
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (m.count(key))
      throw ParamError("duplicate config key '" + key + "' at " +
                       file.string() + ":" + std::to_string(lineno));
    m[key] = value;
  }
  return m;
}

inline TrainConfig read_config(const std::filesystem::path& file) {
  return config_from_map(read_config_map(file));
}

inline std::string config_echo(const TrainConfig& c) {
  std::ostringstream os;
  for (const auto& [k, v] : config_to_map(c)) os << k << "=" << v << "\n";
  return os.str();
}

inline void write_config_echo(const std::filesystem::path& file,
                              const TrainConfig& c) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write config echo: " + file.string());
  out << config_echo(c);
}

inline uint64_t config_hash(const TrainConfig& c) {
  const std::string echo = config_echo(c);
  return fnv1a64(echo.data(), echo.size());
}

}  // namespace unblur

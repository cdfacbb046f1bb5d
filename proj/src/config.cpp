// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hyperfield {

namespace {

enum class Kind { integer, real, boolean, text, choice };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* fallback;
  std::vector<std::string> choices{};
};

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s = {
      {"task.name", Kind::choice, "nvs", {"nvs", "audio", "image"}},
      {"model.algorithm", Kind::choice, "base", {"base", "ponp", "ipc"}},
      {"model.strategy", Kind::choice, "random", {"random", "finetuned", "frozen", "lora"}},
      {"model.width", Kind::integer, "64"},
      {"model.depth", Kind::integer, "4"},
      {"model.heads", Kind::integer, "4"},
      {"model.patch", Kind::integer, "8"},
      {"model.group_size", Kind::integer, "64"},
      {"model.token_init_std", Kind::real, "1.0"},
      {"inr.hidden", Kind::integer, "32"},
      {"inr.layers", Kind::integer, "3"},
      {"inr.full", Kind::boolean, "false"},
      {"inr.fourier_features", Kind::integer, "20"},
      {"inr.fourier_scale", Kind::real, "1.0"},
      {"lora.rank", Kind::integer, "4"},
      {"lora.alpha", Kind::real, "8.0"},
      {"lora.targets", Kind::choice, "attention", {"attention", "feed_forward", "all"}},
      {"ipc.rank", Kind::integer, "16"},
      {"ipc.target", Kind::integer, "1"},
      {"optim.lr", Kind::real, "1e-3"},
      {"optim.epochs", Kind::integer, "100"},
      {"optim.batch_size", Kind::integer, "4"},
      {"optim.max_steps", Kind::integer, "0"},
      {"optim.scheduler", Kind::choice, "cos", {"step", "cos"}},
      {"render.n_samples", Kind::integer, "32"},
      {"render.near", Kind::real, "0.5"},
      {"render.far", Kind::real, "3.5"},
      {"render.white_bg", Kind::boolean, "true"},
      {"render.rays_per_instance", Kind::integer, "128"},
      {"audio.samples_per_step", Kind::integer, "2048"},
      {"data.path", Kind::text, ""},
      {"data.train_classes", Kind::text, ""},
      {"data.max_instances", Kind::integer, "0"},
      {"backbone.path", Kind::text, ""},
      {"run.seed", Kind::integer, "0"},
      {"run.checkpoint_every", Kind::integer, "0"},
      {"run.log_every", Kind::integer, "0"},
  };
  return s;
}

const KeySpec* find_spec(const std::string& key) {
  for (const auto& s : schema()) {
    if (key == s.key) return &s;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::string where(int line) { return line > 0 ? "line " + std::to_string(line) + ": " : ""; }

bool parse_int(const std::string& v, long long& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_real(const std::string& v, double& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  return ec == std::errc() && p == end && std::isfinite(out);
}

}  // namespace

Config::Config() {
  for (const auto& s : schema()) values_[s.key] = s.fallback;
}

std::vector<std::string> Config::keys() {
  std::vector<std::string> k;
  for (const auto& s : schema()) k.emplace_back(s.key);
  return k;
}

void Config::set(const std::string& key, const std::string& value, int line) {
  const KeySpec* spec = find_spec(key);
  if (spec == nullptr) throw ConfigError(where(line) + "unknown key '" + key + "'", key, line);
  auto bad = [&](const std::string& what) {
    throw ConfigError(where(line) + "key '" + key + "' expects " + what + ", got '" + value + "'", key, line);
  };
  long long i = 0;
  double d = 0.0;
  switch (spec->kind) {
    case Kind::integer:
      if (!parse_int(value, i)) bad("an integer");
      break;
    case Kind::real:
      if (!parse_real(value, d)) bad("a number");
      break;
    case Kind::boolean:
      if (value != "true" && value != "false") bad("true or false");
      break;
    case Kind::choice:
      if (std::find(spec->choices.begin(), spec->choices.end(), value) == spec->choices.end()) {
        std::string opts;
        for (const auto& c : spec->choices) opts += (opts.empty() ? "" : "|") + c;
        bad("one of " + opts);
      }
      break;
    case Kind::text:
      break;
  }
  values_[key] = value;
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'", key);
  return it->second;
}

Config Config::from_text(const std::string& text, const std::string& source) {
  Config c;
  std::istringstream is(text);
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    std::string s = raw;
    if (const auto hash = s.find('#'); hash != std::string::npos) s.resize(hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ": line " + std::to_string(line) + ": expected 'section.key = value'", {}, line);
    }
    const std::string key = trim(s.substr(0, eq));
    if (key.empty() || key.find('.') == std::string::npos) {
      throw ConfigError(source + ": line " + std::to_string(line) + ": key must be 'section.key'", key, line);
    }
    try {
      c.set(key, trim(s.substr(eq + 1)), line);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": " + e.what(), e.key(), line);
    }
  }
  return c;
}

Config Config::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str(), path.string());
}

std::string Config::snapshot() const {
  std::ostringstream os;
  std::string section;
  for (const auto& s : schema()) {
    const std::string key = s.key;
    const std::string sec = key.substr(0, key.find('.'));
    if (sec != section) {
      if (!section.empty()) os << "\n";
      section = sec;
    }
    os << key << " = " << values_.at(key) << "\n";
  }
  return os.str();
}

const char* to_string(Task t) {
  switch (t) {
    case Task::nvs: return "nvs";
    case Task::audio: return "audio";
    case Task::image: return "image";
  }
  return "?";
}

const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::base: return "base";
    case Algorithm::ponp: return "ponp";
    case Algorithm::ipc: return "ipc";
  }
  return "?";
}

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::random: return "random";
    case Strategy::finetuned: return "finetuned";
    case Strategy::frozen: return "frozen";
    case Strategy::lora: return "lora";
  }
  return "?";
}

TrainConfig to_train_config(const Config& c) {
  TrainConfig t;
  auto integer = [&](const std::string& key, Index lo) {
    long long v = 0;
    parse_int(c.get(key), v);
    if (v < lo) throw ConfigError("key '" + key + "' must be >= " + std::to_string(lo), key);
    return static_cast<Index>(v);
  };
  auto real = [&](const std::string& key) {
    double v = 0.0;
    parse_real(c.get(key), v);
    return v;
  };
  auto positive = [&](const std::string& key) {
    const double v = real(key);
    if (!(v > 0.0)) throw ConfigError("key '" + key + "' must be positive", key);
    return v;
  };
  auto flag = [&](const std::string& key) { return c.get(key) == "true"; };

  const std::string task = c.get("task.name");
  t.task = task == "nvs" ? Task::nvs : task == "audio" ? Task::audio : Task::image;
  const std::string alg = c.get("model.algorithm");
  t.algorithm = alg == "base" ? Algorithm::base : alg == "ponp" ? Algorithm::ponp : Algorithm::ipc;
  const std::string strat = c.get("model.strategy");
  t.strategy = strat == "random"      ? Strategy::random
               : strat == "finetuned" ? Strategy::finetuned
               : strat == "frozen"    ? Strategy::frozen
                                      : Strategy::lora;

  t.width = integer("model.width", 1);
  t.depth = integer("model.depth", 0);
  t.heads = integer("model.heads", 1);
  if (t.width % t.heads != 0) throw ConfigError("model.width must be divisible by model.heads", "model.heads");
  t.patch = integer("model.patch", 1);
  t.group_size = integer("model.group_size", 1);
  t.token_init_std = positive("model.token_init_std");

  t.inr_hidden = integer("inr.hidden", 1);
  t.inr_layers = integer("inr.layers", 2);
  t.full_inr = flag("inr.full");
  t.fourier_features = integer("inr.fourier_features", 1);
  t.fourier_scale = positive("inr.fourier_scale");

  t.lora_rank = integer("lora.rank", 1);
  t.lora_alpha = positive("lora.alpha");
  const std::string targets = c.get("lora.targets");
  t.lora_targets = targets == "attention"      ? LoraTargets::attention
                   : targets == "feed_forward" ? LoraTargets::feed_forward
                                               : LoraTargets::all;

  t.ipc_rank = integer("ipc.rank", 1);
  t.ipc_target = integer("ipc.target", 0);

  t.lr = positive("optim.lr");
  t.epochs = integer("optim.epochs", 0);
  t.batch_size = integer("optim.batch_size", 1);
  t.max_steps = integer("optim.max_steps", 0);
  t.scheduler = c.get("optim.scheduler") == "step" ? Scheduler::step : Scheduler::cos;

  t.n_samples = integer("render.n_samples", 2);
  t.near = positive("render.near");
  t.far = positive("render.far");
  if (!(t.near < t.far)) throw ConfigError("render.near must be less than render.far", "render.near");
  t.white_bg = flag("render.white_bg");
  t.rays_per_instance = integer("render.rays_per_instance", 1);
  t.audio_samples_per_step = integer("audio.samples_per_step", 1);

  t.data_path = c.get("data.path");
  std::istringstream classes(c.get("data.train_classes"));
  for (std::string item; std::getline(classes, item, ',');) {
    item = trim(item);
    if (!item.empty()) t.train_classes.push_back(item);
  }
  t.max_instances = integer("data.max_instances", 0);
  t.backbone_path = c.get("backbone.path");

  t.seed = static_cast<std::uint64_t>(integer("run.seed", 0));
  t.checkpoint_every = integer("run.checkpoint_every", 0);
  t.log_every = integer("run.log_every", 0);

  if (t.needs_backbone() && t.backbone_path.empty()) {
    throw ConfigError("strategy '" + strat + "' requires backbone.path", "backbone.path");
  }
  if (t.strategy == Strategy::lora && t.lora_rank >= t.width) {
    throw ConfigError("lora.rank must be less than model.width", "lora.rank");
  }
  return t;
}

void validate_paths(const TrainConfig& t) {
  if (t.data_path.empty()) throw ConfigError("data.path is not set", "data.path");
  if (!std::filesystem::exists(std::filesystem::path(t.data_path) / "manifest.txt")) {
    throw ConfigError("data.path '" + t.data_path + "' has no manifest.txt", "data.path");
  }
  if (t.needs_backbone() && !std::filesystem::exists(t.backbone_path)) {
    throw ConfigError("backbone.path '" + t.backbone_path + "' does not exist", "backbone.path");
  }
}

}  // namespace hyperfield

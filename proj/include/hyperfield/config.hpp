// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/encoder.hpp"
#include "hyperfield/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperfield {

/// Invalid configuration. `key()` names the offending key, `line()` the
/// source line (0 when the value came from an override or a default).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& msg, std::string key = {}, int line = 0)
      : std::runtime_error(msg), key_(std::move(key)), line_(line) {}
  const std::string& key() const { return key_; }
  int line() const { return line_; }

 private:
  std::string key_;
  int line_;
};

/// Flat `section.key = value` configuration with a fixed key set.
/// Later sources win: defaults, then the file, then overrides.
class Config {
 public:
  Config();  // all defaults

  static Config from_text(const std::string& text, const std::string& source = "<config>");
  static Config from_file(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value, int line = 0);
  void apply_override(const std::string& assignment);  // "key=value"

  const std::string& get(const std::string& key) const;
  std::string snapshot() const;
  static std::vector<std::string> keys();

 private:
  std::map<std::string, std::string> values_;
};

enum class Task { nvs, audio, image };
enum class Algorithm { base, ponp, ipc };
enum class Strategy { random, finetuned, frozen, lora };

const char* to_string(Task t);
const char* to_string(Algorithm a);
const char* to_string(Strategy s);

struct TrainConfig {
  Task task = Task::nvs;
  Algorithm algorithm = Algorithm::base;
  Strategy strategy = Strategy::random;

  Index width = 64;
  Index depth = 4;
  Index heads = 4;
  Index patch = 8;
  Index group_size = 64;
  double token_init_std = 1.0;

  Index inr_hidden = 32;
  Index inr_layers = 3;
  bool full_inr = false;
  Index fourier_features = 20;
  double fourier_scale = 1.0;

  Index lora_rank = 4;
  double lora_alpha = 8.0;
  LoraTargets lora_targets = LoraTargets::attention;

  Index ipc_rank = 16;
  Index ipc_target = 1;

  double lr = 1e-3;
  Index epochs = 100;
  Index batch_size = 4;
  Index max_steps = 0;
  Scheduler scheduler = Scheduler::cos;

  Index n_samples = 32;
  double near = 0.5;
  double far = 3.5;
  bool white_bg = true;
  Index rays_per_instance = 128;
  Index audio_samples_per_step = 2048;

  std::string data_path;
  std::vector<std::string> train_classes;  // empty: all classes
  Index max_instances = 0;                 // 0: all
  std::string backbone_path;

  std::uint64_t seed = 0;
  Index checkpoint_every = 0;  // steps; 0 keeps only the first and last
  Index log_every = 0;         // steps; 0 logs once per epoch

  bool needs_backbone() const { return strategy != Strategy::random; }
};

/// Typed view of a resolved Config; validates value ranges and combinations.
TrainConfig to_train_config(const Config& config);

/// Checks that referenced paths exist; errors name the key.
void validate_paths(const TrainConfig& config);

}  // namespace hyperfield

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/archive.hpp"
#include "hyperfield/config.hpp"
#include "hyperfield/dataset.hpp"
#include "hyperfield/hypernetwork.hpp"
#include "hyperfield/optim.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperfield {

/// Raised when a loss or intermediate goes non-finite; the run directory
/// receives a `nan_dump.txt` with parameter and gradient norms.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ModelSpec model_spec(const TrainConfig& config, const Dataset& dataset);

/// Freeze rules for a strategy; empty for random and finetuned.
FreezeMask strategy_mask(Strategy strategy);

struct EvalRow {
  Index instance = 0;
  std::string klass;
  Index view = 0;
  double psnr = 0.0;
  double ssim = 0.0;  // NaN for audio
};

struct EvalTable {
  std::string split;
  std::vector<EvalRow> rows;

  double mean_psnr(const std::string& klass = "") const;
  double mean_ssim(const std::string& klass = "") const;
  std::vector<std::string> classes() const;
  std::string csv() const;
  std::string pretty() const;
};

/// Predicted signal for (instance, target view): an image, or a clip as a 1-row image.
using Predictor = std::function<Image(Index instance, Index view)>;

class Trainer {
 public:
  /// Builds the model for `config`, loading the backbone when the strategy needs one.
  Trainer(const TrainConfig& config, Dataset dataset, bool load_backbone = true);

  Hypernetwork<float>& model() { return model_; }
  const Hypernetwork<float>& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return ds_; }
  const FreezeSummary& freeze_summary() const { return freeze_; }
  const std::optional<LoraSummary>& lora_summary() const { return lora_; }

  Index steps_per_epoch() const;
  Index total_steps() const;
  Index steps_done() const { return step_; }

  /// One optimizer step over a batch of training instances; returns the mean loss.
  double step();
  /// Mean squared error of the last step's predictions.
  double last_mse() const { return last_mse_; }

  /// Instance indices for "train", "test" or "unseen".
  std::vector<Index> instances(const std::string& split) const;

  EvalTable evaluate(const std::string& split, const Predictor& predictor = {}) const;

  /// Ground truth paired with the model prediction for the same (instance, view).
  Image target(Index instance, Index view) const;
  Image predict(Index instance, Index view) const;
  Image render(Index instance, Index input_view, const Camera& camera) const;

  TensorArchive checkpoint() const;
  /// Writes parameter and gradient norms to `path`.
  void dump_norms(const std::filesystem::path& path, const std::string& reason) const;

 private:
  const Image& view_image(Index instance, Index view) const;
  Tensor<float> observation(Index instance, Index view) const;
  Tensor<float> instance_loss(Index instance, double& mse);
  std::vector<Index> eval_views(Index instance) const;

  TrainConfig cfg_;
  Dataset ds_;
  Hypernetwork<float> model_;
  FreezeSummary freeze_;
  std::optional<LoraSummary> lora_;
  std::optional<Adam<float>> adam_;
  std::vector<Index> train_set_;
  std::vector<Index> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
  Index step_ = 0;
  double last_mse_ = 0.0;
  mutable std::map<std::pair<Index, Index>, Image> cache_;
};

struct TrainOptions {
  std::ostream* log = nullptr;
  bool final_eval = true;
};

struct TrainResult {
  std::filesystem::path run_dir;
  Index steps = 0;
  double final_loss = 0.0;
  std::vector<std::filesystem::path> checkpoints;
  std::optional<EvalTable> train_eval;
};

/// Full run: `config.snapshot`, `metrics.csv` (step,split,psnr,ssim,loss) and `stepN.hfa`.
TrainResult train(const Config& config, const std::filesystem::path& run_dir, const TrainOptions& options = {});

std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);

/// Rebuilds the trainer from a run directory's snapshot and latest checkpoint.
Trainer load_run(const std::filesystem::path& run_dir);

/// Evaluates the latest checkpoint and writes `eval_<split>.csv`.
EvalTable evaluate_run(const std::filesystem::path& run_dir, const std::string& split);

struct PretrainResult {
  TensorArchive archive;            // encoder.* only
  std::vector<double> epoch_losses; // entry 0 is before any update
};

/// Masked-patch reconstruction of the encoder alone through a throwaway linear decoder.
PretrainResult pretrain_backbone(const TrainConfig& config, const Dataset& dataset, Index epochs,
                                 std::ostream* log = nullptr);

}  // namespace hyperfield

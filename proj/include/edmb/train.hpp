// SPDX-License-Identifier: Apache-2.0
//
// Training configuration, Adam, checkpoints and the two-stage loop.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "edmb/dataset.hpp"
#include "edmb/loss.hpp"
#include "edmb/model.hpp"
#include "edmb/tensor_io.hpp"

namespace edmb {

enum class Precision { f32, f64 };

struct TrainConfig {
  Stage stage = Stage::global;
  int batch_size = 0;  // 0: stage default (4 global, 3 fine)
  double lr_fresh = 1e-4;
  double lr_pretrained = 1e-5;
  std::vector<std::string> pretrained_prefixes;  // parameters trained at lr_pretrained
  double weight_decay = 5e-4;
  int max_steps = 1000;
  std::uint64_t seed = 0;
  LabelMode label_mode = LabelMode::mixed;
  double mixed_threshold = 0.5;
  AugmentRecipe augment = AugmentRecipe::none;
  int log_every = 1;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  Precision precision = Precision::f32;
  LossConfig loss;
  ModelConfig model;

  int effective_batch() const { return batch_size > 0 ? batch_size : (stage == Stage::global ? 4 : 3); }
};

/// Every recognised key with a one-line description, in file order.
const std::vector<std::pair<std::string, std::string>>& config_keys();

/// key=value lines; '#' starts a comment. Unknown keys and malformed values
/// are errors naming the line.
TrainConfig parse_config_text(const std::string& text, const std::string& origin = "config");
TrainConfig load_config(const std::string& path);

Stage parse_stage(const std::string& s);
Precision parse_precision(const std::string& s);

/// Named tensors in insertion order; values stored as f32.
struct Checkpoint {
  std::vector<std::pair<std::string, RawTensor>> entries;

  const RawTensor* find(const std::string& name) const;
  void put(const std::string& name, RawTensor t);
  std::int64_t step() const;
  std::uint64_t fingerprint() const;
};

/// Architecture stored in a checkpoint written by make_checkpoint.
ModelConfig model_config_from(const Checkpoint& ckpt);

/// Atomic write (temp file + rename).
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Adam with L2 weight decay folded into the gradient.
template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 5e-4)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  /// One update of `entries` (each with its rate). Parameters without a
  /// gradient are skipped.
  void step(const std::vector<std::pair<ParamEntry<T>, double>>& entries);

  std::int64_t steps() const { return t_; }
  void export_state(Checkpoint& ckpt) const;
  void import_state(const Checkpoint& ckpt);

 private:
  double beta1_, beta2_, eps_, wd_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> moments_;
};

/// Model parameters and buffers, plus step and fingerprint metadata.
template <typename T>
Checkpoint make_checkpoint(const EdmbModel<T>& model, std::int64_t step);

/// Copies every model tensor present in the checkpoint; throws on a
/// fingerprint or shape mismatch, or (when `require_all`) a missing tensor.
/// With `only_stage1` just the stage-1 parameters are read.
template <typename T>
void apply_checkpoint(EdmbModel<T>& model, const Checkpoint& ckpt, bool require_all, bool only_stage1 = false);

struct StepLog {
  int step = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::string out_dir;        // checkpoints written here when non-empty
  std::string init_from;      // stage-1 checkpoint (stage 2)
  std::string resume;         // resume from a checkpoint of the same stage
};

/// Builds a padded batch of images/labels for the given samples.
template <typename T>
struct Batch {
  Tensor<T> images;  // [B, 3, H, W]
  Tensor<T> y;       // [B, 1, H, W]
  Tensor<T> mask;
};

template <typename T>
Batch<T> make_batch(const std::vector<DatasetSample>& samples, const std::vector<int>& picks,
                    const TrainConfig& cfg, int size_unit, Rng& rng);

/// Runs the configured number of steps and returns the final checkpoint.
template <typename T>
Checkpoint train_stage(EdmbModel<T>& model, const std::vector<DatasetSample>& data, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});

/// Names of the parameters updated in a stage.
bool trained_in_stage(const std::string& name, Stage stage);

}  // namespace edmb

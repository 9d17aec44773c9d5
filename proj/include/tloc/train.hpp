#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tloc/cells.hpp"
#include "tloc/model.hpp"
#include "tloc/rng.hpp"
#include "tloc/synth.hpp"

namespace tloc::train {

using ad::Tensor;

/// Coefficients of L = (1 - α - β)·coarse + α·middle + β·fine + γ·scene.
struct LossWeights {
  double alpha = 0.3;
  double beta = 0.3;
  double gamma = 0.1;

  /// Throws std::invalid_argument for negative weights or α + β > 1.
  void validate() const;
};

struct Labels {
  std::vector<std::int32_t> coarse;
  std::vector<std::int32_t> middle;
  std::vector<std::int32_t> fine;
  std::vector<std::int32_t> scene;

  std::size_t size() const { return fine.size(); }
};

/// Weighted sum of the four head cross-entropies. An undefined scene tensor
/// drops the scene term.
Tensor total_loss(const Tensor& coarse, const Tensor& middle, const Tensor& fine, const Tensor& scene,
                  const Labels& labels, const LossWeights& weights);
Tensor total_loss(const model::ForwardResult& logits, const Labels& labels, const LossWeights& weights);

struct OptimConfig {
  double base_lr = 1e-3;
  double momentum = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 2;
  std::size_t batch_size = 32;

  void validate() const;
};

/// Linear warmup from 0 to base_lr over warmup_epochs, then cosine decay to 0
/// at the end of the last epoch.
double lr_at(std::size_t step, const OptimConfig& config, std::size_t steps_per_epoch);

/// Adaptive-moment state for AdamW.
struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

/// One AdamW update with decoupled weight decay applied after the adaptive
/// step. Throws NumericError naming the parameter when a gradient is not
/// finite.
void optimizer_step(std::span<const model::NamedTensor> params, OptimState& state, double lr,
                    const OptimConfig& config);

struct AugmentConfig {
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;

  void validate() const;
};

/// Horizontal flip of RGB and segmentation together, then color jitter of RGB
/// only (brightness, contrast, saturation, hue, in that order).
data::Sample augment(const data::Sample& sample, const AugmentConfig& config, Rng& rng);
data::Sample hflip(const data::Sample& sample, std::size_t h, std::size_t w);

/// Samples that fall in a retained cell at all three levels, with their labels.
struct LabeledSet {
  std::vector<std::size_t> indices;
  Labels labels;
  std::size_t unassigned = 0;
};

LabeledSet label_dataset(const data::Dataset& dataset, const cells::CellIndex& index);

model::ImageBatch make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices, bool with_seg);
model::ImageBatch make_batch(std::span<const data::Sample> samples, std::size_t h, std::size_t w, bool with_seg);

struct MetricsRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc_fine = 0.0;
  std::optional<double> val_acc_scene;
};

/// CSV with header `epoch,step,lr,train_loss,val_acc_fine,val_acc_scene`.
void write_metrics(std::ostream& out, const std::vector<MetricsRow>& rows);

struct TrainSettings {
  model::ModelConfig model;  // class counts are filled in from the data
  OptimConfig optim;
  AugmentConfig augment;
  LossWeights loss;
  std::uint64_t seed = 0;
  bool augment_enabled = true;
  // When set, the best checkpoint so far is rewritten here after every
  // improvement, so a numeric abort leaves the last good model on disk.
  std::string checkpoint_path;
  std::function<void(const MetricsRow&)> on_epoch;
};

struct TrainResult {
  model::Model model;  // parameters of the best validation epoch
  std::vector<MetricsRow> log;
  double best_val_acc_fine = 0.0;
  std::size_t best_epoch = 0;
};

/// Fills the class counts and head sizes of a model config from the index
/// and the dataset.
model::ModelConfig resolve_model_config(model::ModelConfig base, const cells::CellIndex& index,
                                        const data::Dataset& train_set, bool auto_hidden);

TrainResult train(const data::Dataset& train_set, const data::Dataset& val_set, const cells::CellIndex& index,
                  const TrainSettings& settings);

/// Fine-cell and scene accuracy of single-crop predictions on a labeled set.
struct SetAccuracy {
  double fine = 0.0;
  std::optional<double> scene;
};
SetAccuracy evaluate_accuracy(const model::Model& model, const data::Dataset& dataset, const LabeledSet& labeled,
                              std::size_t batch_size);

}  // namespace tloc::train

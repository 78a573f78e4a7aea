#pragma once

// Generator pretraining and surrogate-guided fine-tuning.
//
// Fine-tuning batches hold B/2 captioned training examples and B/2 unlabeled
// inputs. The loss is mean caption cross-entropy on the first half minus
// lambda times the frozen surrogate's mean estimated quality of the soft
// guidance produced for the second half. lambda = 0 is the caption-only
// baseline; it runs the identical schedule, including the random draws.

#include "slog/models.hpp"
#include "slog/synthworld.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace slog::train {

using nn::Matrix;

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  double lambda_weight = 10.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;  // even: half captioned, half unlabeled
  double learning_rate = 5e-4;
  double temperature = 1.0;  // softmax temperature of the soft guidance
  std::uint64_t seed = 0;

  void validate() const;
};

struct BatchStats {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double caption_ce = 0.0;
  double quality = 0.0;  // mean over inputs of (1/d) sum_i q-hat_i
  double combined = 0.0;
};

struct RoundStats {
  std::size_t epoch = 0;
  double caption_ce = 0.0;  // means over the epoch's batches
  double quality = 0.0;
  double combined = 0.0;
  std::size_t batches = 0;
};

/// Captioned batch: features stacked as rows plus one findings sequence each.
struct CaptionBatch {
  Matrix features;
  std::vector<const text::TokenSequence*> findings;
};

CaptionBatch caption_batch(std::span<const world::Instance> data, std::span<const std::size_t> indices);

/// Minibatch Adam on caption_nll; `loss_curve` receives per-epoch means.
models::Generator pretrain_generator(std::span<const world::Instance> train, const models::GeneratorConfig& arch,
                                     const PretrainConfig& config, std::vector<double>* loss_curve = nullptr);

/// The augmented loss and its two terms, recorded on `tape`.
struct AugmentedTerms {
  nn::Var loss;
  nn::Var caption_ce;
  nn::Var quality;
};

AugmentedTerms augmented_loss(nn::Tape& tape, const nn::Bound& gen, const models::GeneratorConfig& gen_config,
                              const models::Surrogate& surr, const CaptionBatch& batch_tr, const Matrix& batch_ft,
                              double lambda_weight, double temperature = 1.0);

/// Value (and generator gradients when `grads` is non-null).
double augmented_loss(const models::Generator& gen, const models::Surrogate& surr, const CaptionBatch& batch_tr,
                      const Matrix& batch_ft, double lambda_weight, nn::ParamTree* grads = nullptr,
                      double temperature = 1.0);

/// Mutable state carried across fine-tuning epochs.
struct FinetuneState {
  models::Generator gen;
  nn::OptimizerState optimizer;
};

FinetuneState start_finetune(models::Generator gen, const TrainConfig& config);

using BatchLogger = std::function<void(const BatchStats&)>;

/// One epoch: ceil(|D_tr| / (B/2)) batches. Caption examples follow a
/// shuffle of D_tr seeded by (seed, epoch), wrapping at the end; unlabeled
/// inputs are drawn uniformly with replacement from `ft_features` rows.
RoundStats slog_epoch(FinetuneState& state, const models::Surrogate& surr, std::span<const world::Instance> train,
                      const Matrix& ft_features, const TrainConfig& config, std::size_t epoch,
                      const BatchLogger& log = {});

struct RunOutputs {
  std::optional<std::filesystem::path> log_file;         // JSONL of batch and epoch records
  std::optional<std::filesystem::path> checkpoint_dir;   // epoch_NN.json per epoch
};

struct FinetuneResult {
  models::Generator gen;
  std::vector<RoundStats> rounds;
};

FinetuneResult slog_train(models::Generator gen, const models::Surrogate& surr, std::span<const world::Instance> train,
                          const Matrix& ft_features, const TrainConfig& config, const RunOutputs& outputs = {});

/// slog_train with lambda = 0. The surrogate still scores the unlabeled
/// half so the logged quality stays comparable.
FinetuneResult run_baseline_finetune(models::Generator gen, const models::Surrogate& surr,
                                     std::span<const world::Instance> train, const Matrix& ft_features,
                                     const TrainConfig& config, const RunOutputs& outputs = {});

std::string batch_stats_to_json(const BatchStats& s);
std::string round_stats_to_json(const RoundStats& s);

}  // namespace slog::train

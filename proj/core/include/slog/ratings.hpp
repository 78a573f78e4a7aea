#pragma once

// Quality-rating supervision: cross-fitted simulated humans rate both
// ground-truth and generated text, and a surrogate learns those ratings.

#include "slog/models.hpp"
#include "slog/synthworld.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace slog::ratings {

using nn::Matrix;

enum class TextSource : std::uint8_t { kGroundTruth = 0, kGenerated = 1 };
std::string_view to_string(TextSource s);
TextSource text_source_from_string(std::string_view s);

struct RatingRecord {
  std::string instance_id;
  TextSource source = TextSource::kGroundTruth;
  models::GuidanceEmbedding z;  // L x e, rows past `z.length` hold E[PAD]
  Eigen::VectorXd features;
  Eigen::VectorXd quality;  // binary, length d
  std::size_t fold = 0;
};

struct HumanTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 5e-3;
  std::uint64_t seed = 0;
};

struct SurrogateTrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct RatingConfig {
  std::size_t k = 5;
  HumanTrainConfig human;
  SurrogateTrainConfig surrogate;
  std::uint64_t seed = 0;
};

/// One supervised example for the simulated human.
struct HumanExample {
  const Eigen::VectorXd* features = nullptr;
  const text::TokenSequence* tokens = nullptr;
  const world::DecisionVector* labels = nullptr;
};

std::vector<HumanExample> human_examples(std::span<const world::Instance* const> instances);

/// Minibatch Adam on mean human_nll. `loss_curve` receives the mean batch
/// loss of every epoch. Zero epochs return the initialized model.
models::Human train_human_model(std::span<const HumanExample> data, const models::HumanConfig& arch,
                                const HumanTrainConfig& config, std::vector<double>* loss_curve = nullptr);

/// Seeded shuffle cut into k contiguous folds; sizes differ by at most one
/// and the first |indices| mod k folds are the larger ones.
std::vector<std::vector<std::size_t>> kfold_partition(std::span<const std::size_t> indices, std::size_t k,
                                                      std::uint64_t seed);

/// q_i = 1 exactly when decision_i == gt_i.
Eigen::VectorXd correctness(const world::DecisionVector& decision, const world::DecisionVector& gt);

struct Elicitation {
  std::vector<RatingRecord> records;  // fold order, ground-truth record first per instance
  std::vector<std::vector<std::size_t>> folds;  // positions into the rated instance list
  /// Instance ids each fold model was trained on, as passed to training.
  std::vector<std::vector<std::string>> fold_training_ids;
};

/// Cross-fitted rating collection over `instances` (the surrogate subset).
/// The ground-truth record reads the first L content tokens of the findings.
Elicitation elicit_quality_ratings(std::span<const world::Instance> instances, const models::Generator& gen,
                                   const models::HumanConfig& human_arch, const RatingConfig& config);

/// Throws DataError when a record was rated by a fold model whose training
/// set contained the record's instance.
void check_no_leakage(const Elicitation& e);

struct SurrogateFit {
  models::Surrogate model;
  std::vector<double> loss_curve;
  std::vector<std::size_t> holdout;  // positions into the record list
  double holdout_accuracy = 0.0;     // per-label, q-hat thresholded at 0.5
  double holdout_nll = 0.0;
};

/// `token_table` is the table the records' z were embedded with; it is
/// frozen into the surrogate.
SurrogateFit train_surrogate(std::span<const RatingRecord> records, const models::SurrogateConfig& arch,
                             const SurrogateTrainConfig& config, const Matrix& token_table);

/// Mean of q over records of one source.
double mean_quality(std::span<const RatingRecord> records, TextSource source);

// Persistence: ratings.jsonl, z.bin (float64 little-endian, record-major)
// and z_manifest.json.
void save_ratings(std::span<const RatingRecord> records, const std::filesystem::path& dir);
std::vector<RatingRecord> load_ratings(const std::filesystem::path& dir);

}  // namespace slog::ratings

#pragma once

// Experiment configuration, run manifest and the staged pipeline.
//
// Stage graph (each stage requires the ones listed after the arrow):
//   gen-data
//   pretrain        <- gen-data
//   elicit          <- pretrain
//   train-surrogate <- elicit
//   slog, baseline  <- train-surrogate
//   evaluate        <- train-surrogate and the fine-tuning stage of every arm
//   report          <- evaluate

#include "slog/ratings.hpp"
#include "slog/slogtrain.hpp"
#include "slog/synthworld.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace slog::experiment {

struct DataSizes {
  std::size_t train = 2000;
  std::size_t val = 200;
  std::size_t test = 400;
  [[nodiscard]] std::size_t total() const { return train + val + test; }
};

struct GeneratorSettings {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t max_decode_len = 16;
  train::PretrainConfig pretrain;
};

struct HumanSettings {
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 24;
  std::size_t scan_dim = 16;
  ratings::HumanTrainConfig train;
};

struct SurrogateSettings {
  std::size_t hidden_dim = 32;
  std::size_t scan_dim = 16;
  std::size_t mlp_dim = 32;
  ratings::SurrogateTrainConfig train;
};

inline const std::vector<std::string> kKnownArms = {"pretrained", "finetuned", "slog"};

struct ExperimentConfig {
  world::WorldConfig world;
  bool world_seed_from_config = false;  // otherwise derived from the master seed
  DataSizes data;
  double surr_fraction = 0.1;
  GeneratorSettings generator;
  HumanSettings human;
  SurrogateSettings surrogate;
  std::size_t rating_k = 5;
  train::TrainConfig train;
  std::vector<std::string> arms = kKnownArms;
  std::string out_dir;  // empty: $SLOG_OUTPUT_ROOT (or "runs") / seed_<seed>
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending key.
  void validate() const;
  /// Canonical JSON of every field (the echo written into run directories).
  [[nodiscard]] std::string to_json() const;
};

ExperimentConfig parse_config_text(std::string_view json);
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Hex FNV-1a of the canonical JSON, excluding out_dir.
std::string config_hash(const ExperimentConfig& config);

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> arm;  // restrict to a single arm
  std::optional<double> lambda_weight;
  std::optional<std::size_t> epochs;
};

/// Applies overrides and re-validates.
ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides);

std::filesystem::path run_directory(const ExperimentConfig& config);

/// Stage seeds are fixed streams of the master seed.
struct StageSeeds {
  std::uint64_t world, sample, partition, pretrain, ratings, final_human, surrogate, finetune;
};
StageSeeds stage_seeds(std::uint64_t master);

/// Effective world configuration (world seed resolved).
world::WorldConfig effective_world(const ExperimentConfig& config);

enum class Command { kGenData, kPretrain, kElicit, kTrainSurrogate, kSlog, kBaseline, kEvaluate, kReport, kRunAll };
Command command_from_string(std::string_view name);
std::string_view to_string(Command c);

struct StageRecord {
  std::string hash;
  std::string completed_at;  // UTC, ISO 8601
  std::vector<std::string> outputs;  // relative to the run directory
};

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, StageRecord>> stages;  // completion order

  [[nodiscard]] const StageRecord* find(std::string_view stage) const;
  void record(const std::string& stage, StageRecord r);
};

RunManifest load_manifest(const std::filesystem::path& run_dir);
void save_manifest(const RunManifest& m, const std::filesystem::path& run_dir);

/// Runs one command. Completed stages whose input hash is unchanged are
/// skipped. Throws PrerequisiteError naming the stage to run first.
void run_command(Command command, const ExperimentConfig& config, std::ostream& log);

}  // namespace slog::experiment

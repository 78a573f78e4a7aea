#pragma once

// Synthetic diagnosis world: latent findings, projected scan features,
// template findings text and three-class decision labels.

#include "slog/neural.hpp"
#include "slog/textmetrics.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace slog::world {

enum class Decision : std::uint8_t { kPositive = 0, kNegative = 1, kAmbiguous = 2 };
inline constexpr int kNumDecisionClasses = 3;
using DecisionVector = std::vector<Decision>;

std::string_view to_string(Decision d);
Decision decision_from_string(std::string_view s);

enum class RelevantState : std::uint8_t { kPresent = 0, kAbsent = 1, kEquivocal = 2 };
enum class NuisanceState : std::uint8_t { kSeen = 0, kUnseen = 1 };

struct WorldConfig {
  std::size_t num_labels = 6;     // d
  std::size_t num_nuisance = 6;   // r
  std::size_t feature_dim = 32;   // p
  double noise_std = 0.3;
  double ambiguous_prob = 0.15;
  /// Standard deviation of the projection entries.
  double signal_scale = 0.35;
  /// Caption horizon in tokens (BOS and EOS included). 0 selects the full
  /// template length 3(d+r)+2.
  std::size_t max_findings_len = 0;
  std::uint64_t world_seed = 0;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
  [[nodiscard]] std::size_t full_findings_length() const { return 3 * (num_labels + num_nuisance) + 2; }
  [[nodiscard]] std::size_t findings_horizon() const {
    return max_findings_len == 0 ? full_findings_length() : max_findings_len;
  }
  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct LatentState {
  std::vector<RelevantState> relevant;  // length d
  std::vector<NuisanceState> nuisance;  // length r
  friend bool operator==(const LatentState&, const LatentState&) = default;
};

struct World {
  WorldConfig config;
  /// p x (3d + 2r): column block 3i..3i+2 encodes relevant attribute i,
  /// block 3d + 2j..3d + 2j + 1 encodes nuisance attribute j.
  nn::Matrix projection;
  text::Vocab vocab;
  std::vector<int> relevant_name_ids;
  std::vector<int> nuisance_name_ids;
};

struct Instance {
  std::string id;
  Eigen::VectorXd features;
  text::TokenSequence findings;
  DecisionVector labels;
  LatentState latent;  // oracle only
};

World make_world(const WorldConfig& config);

/// One-hot encoding of a latent state, length 3d + 2r.
Eigen::VectorXd encode_latent(const LatentState& latent);
Eigen::VectorXd project_latent(const World& world, const LatentState& latent);

LatentState sample_latent(const WorldConfig& config, std::mt19937_64& rng);
Instance sample_instance(const World& world, std::mt19937_64& rng, std::string id = {});

/// Instance i draws from its own stream derived from (seed, i), so the
/// result does not depend on generation order.
std::vector<Instance> sample_instances(const World& world, std::size_t count, std::uint64_t seed);

DecisionVector derive_labels(const LatentState& latent);
text::TokenSequence render_findings(const LatentState& latent, const World& world);
/// Inverse of render_findings on full template text.
LatentState parse_findings(const text::TokenSequence& findings, const World& world);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetBundle {
  std::vector<Instance> train;
  std::vector<Instance> val;
  std::vector<Instance> test;
  std::vector<std::size_t> surr_indices;  // into train, ascending
  std::vector<std::string> warnings;
};

DatasetBundle partition_dataset(std::vector<Instance> instances, const SplitRatios& ratios, double surr_fraction,
                                std::uint64_t seed);

/// Per-(label, class) counts: result[i][c] over `instances` (or the
/// subset picked by `subset`).
std::vector<std::array<std::size_t, kNumDecisionClasses>> class_counts(
    const std::vector<Instance>& instances, std::size_t num_labels,
    const std::vector<std::size_t>* subset = nullptr);

// Persistence ---------------------------------------------------------------

std::string instance_to_jsonl(const Instance& inst, const World& world);
std::string latent_to_jsonl(const Instance& inst);

/// Writes train/val/test JSONL, oracle_{split}.jsonl and bundle.json.
void save_bundle(const DatasetBundle& bundle, const World& world, const std::filesystem::path& dir,
                 std::uint64_t seed, std::string_view config_hash);
DatasetBundle load_bundle(const std::filesystem::path& dir, const World& world);

}  // namespace slog::world

#pragma once

// Guidance generator, simulated human and quality surrogate.
//
// Every model is a plain (config, ParamTree) pair. Forward passes are
// expressed on an nn::Tape so the same code serves inference (non-recording
// tape) and training (recording tape, gradients via Bound::grads).

#include "slog/neural.hpp"
#include "slog/synthworld.hpp"
#include "slog/textmetrics.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace slog::models {

using nn::Matrix;
using nn::Var;

// ---------------------------------------------------------------------------
// Configurations and containers
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  std::size_t vocab_size = 0;
  std::size_t feature_dim = 0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t max_decode_len = 16;  // L: emitted tokens after BOS
  std::size_t train_horizon = 0;    // caption tokens seen by teacher forcing, BOS included
  int bos = 0;
  int eos = 0;
  int pad = 0;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct HumanConfig {
  std::size_t vocab_size = 0;
  std::size_t feature_dim = 0;
  std::size_t num_labels = 0;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 24;  // per direction
  std::size_t scan_dim = 16;
  int bos = 0;
  int eos = 0;
  int pad = 0;
  friend bool operator==(const HumanConfig&, const HumanConfig&) = default;
};

struct SurrogateConfig {
  std::size_t input_dim = 0;  // width of z rows (generator embedding size)
  std::size_t vocab_size = 0;
  std::size_t feature_dim = 0;
  std::size_t num_labels = 0;
  std::size_t max_len = 16;  // rows of z
  std::size_t hidden_dim = 32;
  std::size_t scan_dim = 16;
  std::size_t mlp_dim = 32;
  int bos = 0;
  int eos = 0;
  int pad = 0;
  friend bool operator==(const SurrogateConfig&, const SurrogateConfig&) = default;
};

struct Generator {
  GeneratorConfig config;
  nn::ParamTree params;
};

struct Human {
  HumanConfig config;
  nn::ParamTree params;
};

struct Surrogate {
  SurrogateConfig config;
  nn::ParamTree params;
};

/// Model dimensions implied by a world.
GeneratorConfig generator_config_for(const world::World& w, std::size_t max_decode_len);
HumanConfig human_config_for(const world::World& w);
SurrogateConfig surrogate_config_for(const world::World& w, const GeneratorConfig& gen);

Generator init_generator(const GeneratorConfig& config, std::uint64_t seed);
Human init_human(const HumanConfig& config, std::uint64_t seed);
/// `token_table` (vocab_size x input_dim) becomes the surrogate's frozen
/// embedding of guidance tokens, "surr/embed"; random when null.
Surrogate init_surrogate(const SurrogateConfig& config, std::uint64_t seed, const Matrix* token_table = nullptr);

/// Features of the given instances stacked as rows.
Matrix stack_features(std::span<const world::Instance* const> batch);
Matrix stack_features(const std::vector<world::Instance>& instances);

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Greedy decode of one input.
struct GuidanceOutput {
  text::TokenSequence tokens;  // emitted tokens: BOS excluded, EOS included when emitted
  Matrix step_distributions;   // tokens.size() x vocab_size
  Matrix z_hard;               // L x embed_dim; rows past the sequence hold E[PAD]
  Matrix z_soft;               // L x embed_dim; row t = sum_v p_t(v) E[v]
  [[nodiscard]] std::size_t length() const { return tokens.size(); }
};

/// Differentiable guidance embeddings for a batch, as recorded on a tape.
struct SoftGuidance {
  std::vector<Var> rows;                 // L entries, each B x embed_dim
  Matrix mask;                           // B x L, 1 for emitted positions
  std::vector<std::vector<int>> tokens;  // greedy tokens per row
  std::vector<Var> distributions;        // L entries, each B x vocab_size
};

/// Mean over the batch of per-instance teacher-forced cross-entropy, each
/// averaged over its non-PAD target positions. Findings longer than the
/// train horizon are truncated (with a warning).
Var caption_nll(nn::Tape& tape, const nn::Bound& gen, const GeneratorConfig& config, const Matrix& features,
                std::span<const text::TokenSequence* const> findings);
double caption_nll(const Generator& gen, const Eigen::VectorXd& features, const text::TokenSequence& findings);

/// Greedy decode recording the soft embedding of every step. The token fed
/// back at each step is the argmax (a constant on the tape); temperature
/// divides the logits before the softmax. Rows are expectations over the
/// generator's own table, or over the constant `z_table` when given.
SoftGuidance soft_guidance(nn::Tape& tape, const nn::Bound& gen, const GeneratorConfig& config,
                           const Matrix& features, double temperature = 1.0, const Matrix* z_table = nullptr);

std::vector<GuidanceOutput> decode_greedy(const Generator& gen, const Matrix& features, double temperature = 1.0);
GuidanceOutput decode_greedy(const Generator& gen, const Eigen::VectorXd& features);
Matrix soft_guidance_embedding(const Generator& gen, const Eigen::VectorXd& features, double temperature = 1.0);

/// Embeds the first L content tokens of `tokens` (specials removed) with the
/// generator's table; used for ground-truth text entering the surrogate.
Matrix hard_embedding(const Generator& gen, const text::TokenSequence& tokens, std::size_t* length = nullptr);

/// Rows of `table` for the tokens of `tokens`: BOS and PAD skipped, EOS kept
/// and terminal, at most `max_len` rows, the rest filled with table[pad].
Matrix embed_tokens(const Matrix& table, const text::TokenSequence& tokens, std::size_t max_len, int bos, int eos,
                    int pad, std::size_t* length = nullptr);

/// First `budget` content tokens of a sequence, specials removed.
text::TokenSequence content_prefix(const text::TokenSequence& tokens, const text::Vocab& vocab, std::size_t budget);

// ---------------------------------------------------------------------------
// Simulated human
// ---------------------------------------------------------------------------

struct HumanDecision {
  world::DecisionVector decisions;
  Matrix probabilities;  // d x 3, class order positive, negative, ambiguous
};

/// Per-label logits (each B x 3). Tokens are read with specials removed.
std::vector<Var> human_logits(nn::Tape& tape, const nn::Bound& human, const HumanConfig& config,
                              const Matrix& features, std::span<const text::TokenSequence* const> tokens);

Var human_nll(nn::Tape& tape, const nn::Bound& human, const HumanConfig& config, const Matrix& features,
              std::span<const text::TokenSequence* const> tokens, std::span<const world::DecisionVector* const> labels);
double human_nll(const Human& human, const Eigen::VectorXd& features, const text::TokenSequence& tokens,
                 const world::DecisionVector& labels);

/// Argmax per label; exact ties resolve to the earlier class.
world::DecisionVector decide_from_probabilities(const Matrix& probabilities);
std::vector<HumanDecision> human_decide(const Human& human, const Matrix& features,
                                        std::span<const text::TokenSequence* const> tokens);
HumanDecision human_decide(const Human& human, const Eigen::VectorXd& features, const text::TokenSequence& tokens);

// ---------------------------------------------------------------------------
// Quality surrogate
// ---------------------------------------------------------------------------

/// q-hat (B x d) from features and z rows (each B x input_dim) under `mask`.
Var surrogate_forward(nn::Tape& tape, const nn::Bound& surr, const SurrogateConfig& config, const Matrix& features,
                      std::span<const Var> z_rows, const Matrix& mask);

/// Mean over instances and labels of the clamped binary cross-entropy.
Var surrogate_nll(nn::Tape& tape, const nn::Bound& surr, const SurrogateConfig& config, const Matrix& features,
                  std::span<const Var> z_rows, const Matrix& mask, const Matrix& targets);

/// One guidance embedding entering the surrogate.
struct GuidanceEmbedding {
  Matrix z;  // rows x input_dim, rows <= max_len
  std::size_t length = 0;
};

/// Guidance tokens embedded with the surrogate's frozen table.
GuidanceEmbedding surrogate_view(const Surrogate& surr, const text::TokenSequence& tokens);

Eigen::VectorXd surrogate_predict(const Surrogate& surr, const Eigen::VectorXd& features, const GuidanceEmbedding& z);
Matrix surrogate_predict(const Surrogate& surr, const Matrix& features, std::span<const GuidanceEmbedding> z);

struct SurrogateExample {
  Eigen::VectorXd features;
  GuidanceEmbedding z;
  Eigen::VectorXd quality;
};
double surrogate_nll(const Surrogate& surr, std::span<const SurrogateExample> batch);

/// Places a batch of embeddings on a tape as constants: rows padded to the
/// longest z in the batch, mask from each length.
std::pair<std::vector<Var>, Matrix> embeddings_to_tape(nn::Tape& tape, std::span<const GuidanceEmbedding* const> z,
                                                        std::size_t input_dim);

inline constexpr double kProbabilityClamp = 1e-7;

// ---------------------------------------------------------------------------
// Checkpoints: <name>.json (parameters) plus <name>.arch.json
// ---------------------------------------------------------------------------

void save_generator(const Generator& m, const std::filesystem::path& file);
Generator load_generator(const std::filesystem::path& file);
void save_human(const Human& m, const std::filesystem::path& file);
Human load_human(const std::filesystem::path& file);
void save_surrogate(const Surrogate& m, const std::filesystem::path& file);
Surrogate load_surrogate(const std::filesystem::path& file);

std::filesystem::path arch_path(const std::filesystem::path& file);

}  // namespace slog::models

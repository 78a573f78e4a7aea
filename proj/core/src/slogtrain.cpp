#include "slog/slogtrain.hpp"

#include "slog/error.hpp"
#include "slog/seeding.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace slog::train {

namespace {

using nn::Index;

constexpr std::uint64_t kInitStream = 0;
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kEpochStream = 2;

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda_weight >= 0.0) || !std::isfinite(lambda_weight)) throw ConfigError("lambda_weight must be >= 0");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("batch_size must be even and at least 2");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
}

CaptionBatch caption_batch(std::span<const world::Instance> data, std::span<const std::size_t> indices) {
  CaptionBatch b;
  if (indices.empty()) return b;
  b.features.resize(static_cast<Index>(indices.size()), data[indices.front()].features.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& inst = data[indices[k]];
    b.features.row(static_cast<Index>(k)) = inst.features.transpose();
    b.findings.push_back(&inst.findings);
  }
  return b;
}

models::Generator pretrain_generator(std::span<const world::Instance> train, const models::GeneratorConfig& arch,
                                     const PretrainConfig& config, std::vector<double>* loss_curve) {
  if (train.empty()) throw DataError("pretrain_generator: empty training split");
  if (config.batch_size == 0) throw ConfigError("pretrain batch_size must be positive");
  models::Generator gen = models::init_generator(arch, derive_seed(config.seed, kInitStream));
  auto opt = nn::make_optimizer(gen.params, nn::AdamConfig{.learning_rate = config.learning_rate});
  std::mt19937_64 rng(derive_seed(config.seed, kShuffleStream));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const auto batch = caption_batch(train, std::span(order).subspan(start, end - start));
      nn::Tape tape;
      nn::Bound p(tape, gen.params, true);
      nn::Var loss = models::caption_nll(tape, p, arch, batch.features, batch.findings);
      tape.backward(loss);
      nn::adam_step(gen.params, p.grads(tape), opt);
      total += loss.scalar();
      ++batches;
    }
    if (loss_curve) loss_curve->push_back(total / static_cast<double>(batches));
  }
  return gen;
}

AugmentedTerms augmented_loss(nn::Tape& tape, const nn::Bound& gen, const models::GeneratorConfig& gen_config,
                              const models::Surrogate& surr, const CaptionBatch& batch_tr, const Matrix& batch_ft,
                              double lambda_weight, double temperature) {
  if (batch_tr.findings.empty() || batch_ft.rows() == 0) throw DataError("augmented_loss: empty batch");
  AugmentedTerms t;
  t.caption_ce = models::caption_nll(tape, gen, gen_config, batch_tr.features, batch_tr.findings);
  // Frozen surrogate: its parameters enter the tape as constants.
  const nn::Bound frozen(tape, surr.params, false);
  const auto guidance = models::soft_guidance(tape, gen, gen_config, batch_ft, temperature,
                                               &surr.params.at("surr/embed"));
  nn::Var qhat = models::surrogate_forward(tape, frozen, surr.config, batch_ft, guidance.rows, guidance.mask);
  t.quality = nn::mean_all(qhat);
  t.loss = lambda_weight == 0.0 ? t.caption_ce : nn::sub(t.caption_ce, nn::scale(t.quality, lambda_weight));
  return t;
}

double augmented_loss(const models::Generator& gen, const models::Surrogate& surr, const CaptionBatch& batch_tr,
                      const Matrix& batch_ft, double lambda_weight, nn::ParamTree* grads, double temperature) {
  nn::Tape tape(grads != nullptr);
  nn::Bound p(tape, gen.params, grads != nullptr);
  const auto t = augmented_loss(tape, p, gen.config, surr, batch_tr, batch_ft, lambda_weight, temperature);
  if (grads) {
    tape.backward(t.loss);
    *grads = p.grads(tape);
  }
  return t.loss.scalar();
}

FinetuneState start_finetune(models::Generator gen, const TrainConfig& config) {
  config.validate();
  auto opt = nn::make_optimizer(gen.params, nn::AdamConfig{.learning_rate = config.learning_rate});
  return {std::move(gen), std::move(opt)};
}

RoundStats slog_epoch(FinetuneState& state, const models::Surrogate& surr, std::span<const world::Instance> train,
                      const Matrix& ft_features, const TrainConfig& config, std::size_t epoch,
                      const BatchLogger& log) {
  config.validate();
  if (train.empty() || ft_features.rows() == 0) throw DataError("slog_epoch: empty training or fine-tuning pool");
  const std::size_t half = config.batch_size / 2;
  const std::size_t batches = (train.size() + half - 1) / half;

  std::mt19937_64 rng(derive_seed(derive_seed(config.seed, kEpochStream), epoch));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<Index> pick(0, ft_features.rows() - 1);

  RoundStats stats;
  stats.epoch = epoch;
  std::vector<std::size_t> tr_idx(half);
  Matrix ft(static_cast<Index>(half), ft_features.cols());
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t k = 0; k < half; ++k) tr_idx[k] = order[(b * half + k) % order.size()];
    for (std::size_t k = 0; k < half; ++k) ft.row(static_cast<Index>(k)) = ft_features.row(pick(rng));
    const auto batch = caption_batch(train, tr_idx);

    nn::Tape tape;
    nn::Bound p(tape, state.gen.params, true);
    const auto t = augmented_loss(tape, p, state.gen.config, surr, batch, ft, config.lambda_weight, config.temperature);
    tape.backward(t.loss);
    nn::adam_step(state.gen.params, p.grads(tape), state.optimizer);

    const BatchStats bs{epoch, b, t.caption_ce.scalar(), t.quality.scalar(), t.loss.scalar()};
    if (log) log(bs);
    stats.caption_ce += bs.caption_ce;
    stats.quality += bs.quality;
    stats.combined += bs.combined;
  }
  stats.batches = batches;
  const auto n = static_cast<double>(batches);
  stats.caption_ce /= n;
  stats.quality /= n;
  stats.combined /= n;
  return stats;
}

FinetuneResult slog_train(models::Generator gen, const models::Surrogate& surr, std::span<const world::Instance> train,
                          const Matrix& ft_features, const TrainConfig& config, const RunOutputs& outputs) {
  FinetuneState state = start_finetune(std::move(gen), config);
  std::ofstream log;
  if (outputs.log_file) {
    std::filesystem::create_directories(outputs.log_file->parent_path());
    log.open(*outputs.log_file, std::ios::binary | std::ios::trunc);
    if (!log) throw Error("cannot write training log " + outputs.log_file->string());
  }
  if (outputs.checkpoint_dir) std::filesystem::create_directories(*outputs.checkpoint_dir);

  BatchLogger logger;
  if (log.is_open()) logger = [&log](const BatchStats& s) { log << batch_stats_to_json(s) << '\n'; };

  FinetuneResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    result.rounds.push_back(slog_epoch(state, surr, train, ft_features, config, epoch, logger));
    if (log.is_open()) log << round_stats_to_json(result.rounds.back()) << '\n';
    if (outputs.checkpoint_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%02zu.json", epoch + 1);
      models::save_generator(state.gen, *outputs.checkpoint_dir / name);
    }
  }
  result.gen = std::move(state.gen);
  return result;
}

FinetuneResult run_baseline_finetune(models::Generator gen, const models::Surrogate& surr,
                                     std::span<const world::Instance> train, const Matrix& ft_features,
                                     const TrainConfig& config, const RunOutputs& outputs) {
  TrainConfig c = config;
  c.lambda_weight = 0.0;
  return slog_train(std::move(gen), surr, train, ft_features, c, outputs);
}

std::string batch_stats_to_json(const BatchStats& s) {
  nlohmann::ordered_json j;
  j["type"] = "batch";
  j["epoch"] = s.epoch;
  j["batch"] = s.batch;
  j["caption_ce"] = s.caption_ce;
  j["quality"] = s.quality;
  j["combined"] = s.combined;
  return j.dump();
}

std::string round_stats_to_json(const RoundStats& s) {
  nlohmann::ordered_json j;
  j["type"] = "epoch";
  j["epoch"] = s.epoch;
  j["caption_ce"] = s.caption_ce;
  j["quality"] = s.quality;
  j["combined"] = s.combined;
  j["batches"] = s.batches;
  return j.dump();
}

}  // namespace slog::train

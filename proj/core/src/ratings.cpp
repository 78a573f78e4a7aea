#include "slog/ratings.hpp"

#include "slog/error.hpp"
#include "slog/seeding.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace slog::ratings {

namespace {

using nn::Index;

constexpr std::uint64_t kFoldStream = 11;
constexpr std::uint64_t kFoldHumanStream = 12;

std::vector<std::size_t> shuffled_range(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// First `budget` tokens of `seq` that are not BOS, EOS or PAD.
text::TokenSequence content_prefix(const text::TokenSequence& seq, const models::GeneratorConfig& c,
                                   std::size_t budget) {
  text::TokenSequence out;
  for (int id : seq.ids) {
    if (out.ids.size() >= budget) break;
    if (id != c.bos && id != c.eos && id != c.pad) out.ids.push_back(id);
  }
  return out;
}

}  // namespace

std::string_view to_string(TextSource s) { return s == TextSource::kGroundTruth ? "ground_truth" : "generated"; }

TextSource text_source_from_string(std::string_view s) {
  if (s == "ground_truth") return TextSource::kGroundTruth;
  if (s == "generated") return TextSource::kGenerated;
  throw DataError("unknown text source '" + std::string(s) + "'");
}

std::vector<HumanExample> human_examples(std::span<const world::Instance* const> instances) {
  std::vector<HumanExample> out;
  out.reserve(instances.size());
  for (const auto* i : instances) out.push_back({&i->features, &i->findings, &i->labels});
  return out;
}

models::Human train_human_model(std::span<const HumanExample> data, const models::HumanConfig& arch,
                                const HumanTrainConfig& config, std::vector<double>* loss_curve) {
  if (data.empty()) throw DataError("train_human_model: no training data");
  if (config.batch_size == 0) throw ConfigError("human batch_size must be positive");
  models::Human human = models::init_human(arch, derive_seed(config.seed, 0));
  auto opt = nn::make_optimizer(human.params, nn::AdamConfig{.learning_rate = config.learning_rate});
  std::mt19937_64 rng(derive_seed(config.seed, 1));

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled_range(data.size(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Matrix X(static_cast<Index>(end - start), data.front().features->size());
      std::vector<const text::TokenSequence*> tokens;
      std::vector<const world::DecisionVector*> labels;
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = data[order[k]];
        X.row(static_cast<Index>(k - start)) = ex.features->transpose();
        tokens.push_back(ex.tokens);
        labels.push_back(ex.labels);
      }
      nn::Tape tape;
      nn::Bound p(tape, human.params, true);
      nn::Var loss = models::human_nll(tape, p, arch, X, tokens, labels);
      tape.backward(loss);
      nn::adam_step(human.params, p.grads(tape), opt);
      total += loss.scalar();
      ++batches;
    }
    if (loss_curve) loss_curve->push_back(total / static_cast<double>(batches));
  }
  return human;
}

std::vector<std::vector<std::size_t>> kfold_partition(std::span<const std::size_t> indices, std::size_t k,
                                                      std::uint64_t seed) {
  if (k == 0) throw ConfigError("k must be positive");
  if (k > indices.size()) {
    throw ConfigError("k = " + std::to_string(k) + " exceeds the " + std::to_string(indices.size()) + " items to fold");
  }
  std::mt19937_64 rng(seed);
  const auto order = shuffled_range(indices.size(), rng);
  const std::size_t base = indices.size() / k;
  const std::size_t extra = indices.size() % k;
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    for (std::size_t j = 0; j < size; ++j) folds[f].push_back(indices[order[pos++]]);
  }
  return folds;
}

Eigen::VectorXd correctness(const world::DecisionVector& decision, const world::DecisionVector& gt) {
  if (decision.size() != gt.size()) {
    throw ShapeError("correctness: decision has " + std::to_string(decision.size()) + " labels, ground truth " +
                     std::to_string(gt.size()));
  }
  Eigen::VectorXd q(static_cast<Index>(gt.size()));
  for (std::size_t i = 0; i < gt.size(); ++i) q(static_cast<Index>(i)) = decision[i] == gt[i] ? 1.0 : 0.0;
  return q;
}

Elicitation elicit_quality_ratings(std::span<const world::Instance> instances, const models::Generator& gen,
                                   const models::HumanConfig& human_arch, const RatingConfig& config) {
  if (config.k < 2) throw ConfigError("rating k must be at least 2");
  if (instances.size() < config.k) {
    throw ConfigError("rating k = " + std::to_string(config.k) + " exceeds the surrogate subset size " +
                      std::to_string(instances.size()));
  }
  std::vector<std::size_t> all(instances.size());
  std::iota(all.begin(), all.end(), 0);

  Elicitation out;
  out.folds = kfold_partition(all, config.k, derive_seed(config.seed, kFoldStream));
  const std::size_t L = gen.config.max_decode_len;

  for (std::size_t f = 0; f < config.k; ++f) {
    std::vector<const world::Instance*> train;
    std::vector<std::string> train_ids;
    for (std::size_t g = 0; g < config.k; ++g) {
      if (g == f) continue;
      for (std::size_t i : out.folds[g]) {
        train.push_back(&instances[i]);
        train_ids.push_back(instances[i].id);
      }
    }
    if (train.empty()) throw DataError("fold " + std::to_string(f) + " leaves no data to train its human model");
    HumanTrainConfig hc = config.human;
    hc.seed = derive_seed(derive_seed(config.seed, kFoldHumanStream), f);
    const auto examples = human_examples(train);
    const models::Human human = train_human_model(examples, human_arch, hc);
    out.fold_training_ids.push_back(std::move(train_ids));

    std::vector<const world::Instance*> rated;
    for (std::size_t i : out.folds[f]) rated.push_back(&instances[i]);
    const Matrix X = models::stack_features(rated);
    const auto generated = models::decode_greedy(gen, X);

    std::vector<text::TokenSequence> gt_text;
    for (const auto* inst : rated) gt_text.push_back(content_prefix(inst->findings, gen.config, L));
    std::vector<const text::TokenSequence*> gt_ptrs;
    std::vector<const text::TokenSequence*> gen_ptrs;
    for (std::size_t j = 0; j < rated.size(); ++j) {
      gt_ptrs.push_back(&gt_text[j]);
      gen_ptrs.push_back(&generated[j].tokens);
    }
    const auto gt_decisions = models::human_decide(human, X, gt_ptrs);
    const auto gen_decisions = models::human_decide(human, X, gen_ptrs);

    for (std::size_t j = 0; j < rated.size(); ++j) {
      const auto& inst = *rated[j];
      RatingRecord gt{inst.id, TextSource::kGroundTruth, {}, inst.features,
                      correctness(gt_decisions[j].decisions, inst.labels), f};
      gt.z.z = models::hard_embedding(gen, gt_text[j], &gt.z.length);
      out.records.push_back(std::move(gt));

      RatingRecord g{inst.id, TextSource::kGenerated, {generated[j].z_hard, generated[j].length()}, inst.features,
                     correctness(gen_decisions[j].decisions, inst.labels), f};
      out.records.push_back(std::move(g));
    }
  }
  return out;
}

void check_no_leakage(const Elicitation& e) {
  if (e.fold_training_ids.size() != e.folds.size()) throw DataError("leakage check: fold bookkeeping incomplete");
  std::vector<std::set<std::string>> trained(e.fold_training_ids.size());
  for (std::size_t f = 0; f < trained.size(); ++f)
    trained[f].insert(e.fold_training_ids[f].begin(), e.fold_training_ids[f].end());
  for (const auto& r : e.records) {
    if (r.fold >= trained.size()) throw DataError("leakage check: record fold out of range");
    if (trained[r.fold].contains(r.instance_id)) {
      throw DataError("instance " + r.instance_id + " was rated by fold model " + std::to_string(r.fold) +
                      " which trained on it");
    }
  }
}

SurrogateFit train_surrogate(std::span<const RatingRecord> records, const models::SurrogateConfig& arch,
                             const SurrogateTrainConfig& config, const Matrix& token_table) {
  if (records.empty()) throw DataError("train_surrogate: no rating records");
  if (config.batch_size == 0) throw ConfigError("surrogate batch_size must be positive");
  if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0))
    throw ConfigError("holdout_fraction must be in [0, 1)");

  SurrogateFit fit;
  fit.model = models::init_surrogate(arch, derive_seed(config.seed, 0), &token_table);
  std::mt19937_64 split_rng(derive_seed(config.seed, 1));
  auto order = shuffled_range(records.size(), split_rng);
  auto n_hold = static_cast<std::size_t>(config.holdout_fraction * static_cast<double>(records.size()));
  if (n_hold >= records.size()) n_hold = 0;
  fit.holdout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::sort(fit.holdout.begin(), fit.holdout.end());
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::sort(train.begin(), train.end());

  auto batch_of = [&](std::span<const std::size_t> idx) {
    std::vector<models::SurrogateExample> b;
    for (std::size_t i : idx) b.push_back({records[i].features, records[i].z, records[i].quality});
    return b;
  };

  auto opt = nn::make_optimizer(fit.model.params, nn::AdamConfig{.learning_rate = config.learning_rate});
  std::mt19937_64 rng(derive_seed(config.seed, 2));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train.size(); start += config.batch_size) {
      const std::size_t end = std::min(train.size(), start + config.batch_size);
      std::vector<const models::GuidanceEmbedding*> zs;
      Matrix X(static_cast<Index>(end - start), records.front().features.size());
      Matrix Q(static_cast<Index>(end - start), static_cast<Index>(arch.num_labels));
      for (std::size_t k = start; k < end; ++k) {
        const auto& r = records[train[k]];
        zs.push_back(&r.z);
        X.row(static_cast<Index>(k - start)) = r.features.transpose();
        Q.row(static_cast<Index>(k - start)) = r.quality.transpose();
      }
      nn::Tape tape;
      nn::Bound p(tape, fit.model.params, true);
      auto [rows, mask] = models::embeddings_to_tape(tape, zs, arch.input_dim);
      nn::Var loss = models::surrogate_nll(tape, p, arch, X, rows, mask, Q);
      tape.backward(loss);
      nn::adam_step(fit.model.params, p.grads(tape), opt);
      total += loss.scalar();
      ++batches;
    }
    fit.loss_curve.push_back(total / static_cast<double>(batches));
  }

  if (!fit.holdout.empty()) {
    const auto held = batch_of(fit.holdout);
    fit.holdout_nll = models::surrogate_nll(fit.model, held);
    std::vector<models::GuidanceEmbedding> zs;
    Matrix X(static_cast<Index>(held.size()), held.front().features.size());
    for (std::size_t i = 0; i < held.size(); ++i) {
      zs.push_back(held[i].z);
      X.row(static_cast<Index>(i)) = held[i].features.transpose();
    }
    const Matrix qhat = models::surrogate_predict(fit.model, X, zs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < held.size(); ++i)
      for (Index l = 0; l < qhat.cols(); ++l)
        hits += ((qhat(static_cast<Index>(i), l) >= 0.5) == (held[i].quality(l) >= 0.5)) ? 1 : 0;
    fit.holdout_accuracy = static_cast<double>(hits) / static_cast<double>(held.size() * static_cast<std::size_t>(qhat.cols()));
  }
  return fit;
}

double mean_quality(std::span<const RatingRecord> records, TextSource source) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.source != source) continue;
    total += r.quality.mean();
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_ratings(std::span<const RatingRecord> records, const std::filesystem::path& dir) {
  static_assert(std::endian::native == std::endian::little, "z sidecar is written in native little-endian order");
  std::filesystem::create_directories(dir);
  std::ofstream jsonl(dir / "ratings.jsonl", std::ios::binary);
  std::ofstream bin(dir / "z.bin", std::ios::binary);
  if (!jsonl || !bin) throw Error("cannot write ratings to " + dir.string());
  Index rows = 0;
  Index cols = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (i == 0) {
      rows = r.z.z.rows();
      cols = r.z.z.cols();
    } else if (r.z.z.rows() != rows || r.z.z.cols() != cols) {
      throw ShapeError("save_ratings: all z matrices must share one shape");
    }
    nlohmann::ordered_json j;
    j["id"] = r.instance_id;
    j["source"] = std::string(to_string(r.source));
    std::vector<int> q;
    for (Index l = 0; l < r.quality.size(); ++l) q.push_back(r.quality(l) >= 0.5 ? 1 : 0);
    j["q"] = q;
    j["fold"] = r.fold;
    j["z_file"] = "z.bin";
    j["z_index"] = i;
    j["z_length"] = r.z.length;
    j["x"] = std::vector<double>(r.features.data(), r.features.data() + r.features.size());
    jsonl << j.dump() << '\n';
    // Row-major on disk.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = r.z.z;
    bin.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  }
  nlohmann::ordered_json m;
  m["format"] = "slog-z";
  m["version"] = 1;
  m["dtype"] = "float64-le";
  m["layout"] = "record-major, row-major";
  m["records"] = records.size();
  m["rows"] = rows;
  m["cols"] = cols;
  std::ofstream(dir / "z_manifest.json", std::ios::binary) << m.dump(2) << '\n';
}

std::vector<RatingRecord> load_ratings(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "z_manifest.json", std::ios::binary);
  if (!mf) throw DataError("missing z manifest in " + dir.string());
  const auto m = nlohmann::json::parse(mf);
  const Index rows = m.at("rows");
  const Index cols = m.at("cols");
  const std::size_t count = m.at("records");
  std::ifstream bin(dir / "z.bin", std::ios::binary);
  std::ifstream jsonl(dir / "ratings.jsonl", std::ios::binary);
  if (!bin || !jsonl) throw DataError("missing ratings files in " + dir.string());

  std::vector<RatingRecord> out;
  std::string line;
  while (std::getline(jsonl, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    RatingRecord r;
    r.instance_id = j.at("id").get<std::string>();
    r.source = text_source_from_string(j.at("source").get<std::string>());
    const auto q = j.at("q").get<std::vector<int>>();
    r.quality.resize(static_cast<Index>(q.size()));
    for (std::size_t l = 0; l < q.size(); ++l) r.quality(static_cast<Index>(l)) = q[l];
    r.fold = j.at("fold");
    const auto x = j.at("x").get<std::vector<double>>();
    r.features = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Index>(x.size()));
    const std::size_t index = j.at("z_index");
    r.z.length = j.at("z_length");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    bin.seekg(static_cast<std::streamoff>(index * static_cast<std::size_t>(rows * cols) * sizeof(double)));
    bin.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    if (!bin) throw DataError("z sidecar truncated at record " + std::to_string(index));
    r.z.z = rm;
    out.push_back(std::move(r));
  }
  if (out.size() != count) throw DataError("ratings.jsonl and z manifest disagree on the record count");
  return out;
}

}  // namespace slog::ratings

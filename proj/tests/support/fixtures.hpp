#pragma once

// Shared fixtures for unit and acceptance tests: tiny worlds and models, the
// scalar losses used for finite-difference checks, and independent oracles.

#include "slog/evalreport.hpp"
#include "slog/models.hpp"
#include "slog/neural.hpp"
#include "slog/ratings.hpp"
#include "slog/seeding.hpp"
#include "slog/slogtrain.hpp"
#include "slog/synthworld.hpp"
#include "slog/textmetrics.hpp"

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace slog::testing {

using nn::Matrix;

/// d=2, r=0, p=4: an eleven-token vocabulary.
inline world::WorldConfig tiny_world_config(std::uint64_t seed = 3) {
  world::WorldConfig c;
  c.num_labels = 2;
  c.num_nuisance = 0;
  c.feature_dim = 4;
  c.noise_std = 0.2;
  c.ambiguous_prob = 0.3;
  c.signal_scale = 1.0;
  c.world_seed = seed;
  return c;
}

struct TinySetup {
  world::World world;
  std::vector<world::Instance> instances;
  models::Generator gen;
  models::Human human;
  models::Surrogate surr;
};

/// Random tiny models over a tiny world; every model is untrained.
inline TinySetup tiny_setup(std::uint64_t seed, std::size_t count = 4) {
  TinySetup s;
  s.world = world::make_world(tiny_world_config(seed));
  s.instances = world::sample_instances(s.world, count, derive_seed(seed, 1));
  auto gc = models::generator_config_for(s.world, 4);
  gc.embed_dim = 3;
  gc.hidden_dim = 4;
  s.gen = models::init_generator(gc, derive_seed(seed, 2));
  auto hc = models::human_config_for(s.world);
  hc.embed_dim = 3;
  hc.hidden_dim = 3;
  hc.scan_dim = 3;
  s.human = models::init_human(hc, derive_seed(seed, 3));
  auto sc = models::surrogate_config_for(s.world, gc);
  sc.hidden_dim = 3;
  sc.scan_dim = 3;
  sc.mlp_dim = 3;
  s.surr = models::init_surrogate(sc, derive_seed(seed, 4));
  return s;
}

inline Matrix features_of(const std::vector<world::Instance>& instances) {
  return models::stack_features(instances);
}

inline std::vector<const text::TokenSequence*> findings_of(const std::vector<world::Instance>& instances) {
  std::vector<const text::TokenSequence*> out;
  for (const auto& i : instances) out.push_back(&i.findings);
  return out;
}

// ---------------------------------------------------------------------------
// Scalar losses in the form grad_check expects
// ---------------------------------------------------------------------------

inline nn::LossFn caption_loss(const TinySetup& s) {
  return [&s](const nn::ParamTree& params, nn::ParamTree* grads) {
    nn::Tape tape(grads != nullptr);
    nn::Bound p(tape, params, grads != nullptr);
    auto loss = models::caption_nll(tape, p, s.gen.config, features_of(s.instances), findings_of(s.instances));
    if (grads) {
      tape.backward(loss);
      *grads = p.grads(tape);
    }
    return loss.scalar();
  };
}

inline nn::LossFn human_loss(const TinySetup& s) {
  return [&s](const nn::ParamTree& params, nn::ParamTree* grads) {
    std::vector<const world::DecisionVector*> labels;
    for (const auto& i : s.instances) labels.push_back(&i.labels);
    nn::Tape tape(grads != nullptr);
    nn::Bound p(tape, params, grads != nullptr);
    auto loss = models::human_nll(tape, p, s.human.config, features_of(s.instances), findings_of(s.instances), labels);
    if (grads) {
      tape.backward(loss);
      *grads = p.grads(tape);
    }
    return loss.scalar();
  };
}

/// Surrogate examples built from ground-truth text with random binary q.
inline std::vector<models::SurrogateExample> surrogate_examples(const TinySetup& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.6);
  std::vector<models::SurrogateExample> out;
  for (const auto& inst : s.instances) {
    models::SurrogateExample e;
    e.features = inst.features;
    e.z = models::surrogate_view(s.surr, inst.findings);
    e.quality = Eigen::VectorXd(static_cast<Eigen::Index>(s.surr.config.num_labels));
    for (Eigen::Index i = 0; i < e.quality.size(); ++i) e.quality(i) = coin(rng) ? 1.0 : 0.0;
    out.push_back(std::move(e));
  }
  return out;
}

inline nn::LossFn surrogate_loss(const TinySetup& s, const std::vector<models::SurrogateExample>& examples) {
  return [&s, &examples](const nn::ParamTree& params, nn::ParamTree* grads) {
    nn::Tape tape(grads != nullptr);
    nn::Bound p(tape, params, grads != nullptr);
    std::vector<const models::GuidanceEmbedding*> z;
    Matrix X(static_cast<Eigen::Index>(examples.size()), examples.front().features.size());
    Matrix Q(static_cast<Eigen::Index>(examples.size()), examples.front().quality.size());
    for (std::size_t b = 0; b < examples.size(); ++b) {
      z.push_back(&examples[b].z);
      X.row(static_cast<Eigen::Index>(b)) = examples[b].features.transpose();
      Q.row(static_cast<Eigen::Index>(b)) = examples[b].quality.transpose();
    }
    auto [rows, mask] = models::embeddings_to_tape(tape, z, s.surr.config.input_dim);
    auto loss = models::surrogate_nll(tape, p, s.surr.config, X, rows, mask, Q);
    if (grads) {
      tape.backward(loss);
      *grads = p.grads(tape);
    }
    return loss.scalar();
  };
}

/// Augmented loss as a function of the generator parameters.
inline nn::LossFn augmented_loss_fn(const TinySetup& s, double lambda_weight) {
  return [&s, lambda_weight](const nn::ParamTree& params, nn::ParamTree* grads) {
    models::Generator g{s.gen.config, params};
    std::vector<std::size_t> idx(s.instances.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto batch = train::caption_batch(s.instances, idx);
    return train::augmented_loss(g, s.surr, batch, batch.features, lambda_weight, grads);
  };
}

/// Mean surrogate quality of the soft guidance, as a function of the
/// generator parameters.
inline nn::LossFn soft_quality_fn(const TinySetup& s) {
  return [&s](const nn::ParamTree& params, nn::ParamTree* grads) {
    nn::Tape tape(grads != nullptr);
    nn::Bound p(tape, params, grads != nullptr);
    const nn::Bound frozen(tape, s.surr.params, false);
    const Matrix X = features_of(s.instances);
    const auto g = models::soft_guidance(tape, p, s.gen.config, X, 1.0, &s.surr.params.at("surr/embed"));
    auto q = nn::mean_all(models::surrogate_forward(tape, frozen, s.surr.config, X, g.rows, g.mask));
    if (grads) {
      tape.backward(q);
      *grads = p.grads(tape);
    }
    return q.scalar();
  };
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Corpus BLEU recomputed with ordered maps and explicit loops.
inline double bleu_oracle(const std::vector<std::vector<int>>& cands, const std::vector<std::vector<int>>& refs,
                          int n_max) {
  double c = 0.0, r = 0.0, log_p = 0.0;
  for (std::size_t s = 0; s < cands.size(); ++s) {
    c += static_cast<double>(cands[s].size());
    r += static_cast<double>(refs[s].size());
  }
  if (c == 0.0) return 0.0;
  for (int n = 1; n <= n_max; ++n) {
    double hit = 0.0, all = 0.0;
    for (std::size_t s = 0; s < cands.size(); ++s) {
      std::map<std::vector<int>, int> cc, rc;
      for (std::size_t i = 0; i + n <= cands[s].size(); ++i)
        ++cc[std::vector<int>(cands[s].begin() + static_cast<long>(i), cands[s].begin() + static_cast<long>(i) + n)];
      for (std::size_t i = 0; i + n <= refs[s].size(); ++i)
        ++rc[std::vector<int>(refs[s].begin() + static_cast<long>(i), refs[s].begin() + static_cast<long>(i) + n)];
      for (const auto& [g, k] : cc) {
        hit += std::min(k, rc.count(g) ? rc.at(g) : 0);
        all += k;
      }
    }
    if (hit == 0.0) return 0.0;
    log_p += std::log(hit / all);
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_p / n_max);
}

struct LabelCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Positive-class confusion counts per label by exhaustive comparison.
inline std::vector<LabelCounts> confusion_oracle(const std::vector<world::DecisionVector>& pred,
                                                 const std::vector<world::DecisionVector>& truth) {
  std::vector<LabelCounts> out(truth.front().size());
  for (std::size_t n = 0; n < truth.size(); ++n) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const int p = pred[n][i] == world::Decision::kPositive;
      const int t = truth[n][i] == world::Decision::kPositive;
      if (p == 1 && t == 1) ++out[i].tp;
      if (p == 1 && t == 0) ++out[i].fp;
      if (p == 0 && t == 1) ++out[i].fn;
    }
  }
  return out;
}

inline world::DecisionVector random_decisions(std::size_t d, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, world::kNumDecisionClasses - 1);
  world::DecisionVector v(d);
  for (auto& x : v) x = static_cast<world::Decision>(pick(rng));
  return v;
}

// ---------------------------------------------------------------------------
// Hand-computed BLEU cases
// ---------------------------------------------------------------------------

struct BleuCase {
  std::string name;
  std::vector<std::vector<int>> candidates;
  std::vector<std::vector<int>> references;
  int n;
  double expected;
};

/// Expected values are written as closed forms of the clipped counts and
/// lengths; ids stand for words (1 = "the", 2 = "cat", ...).
inline std::vector<BleuCase> hand_bleu_cases() {
  const double e = std::exp(1.0);
  return {
      {"identical single sentence, BLEU-1", {{1, 2, 3, 4}}, {{1, 2, 3, 4}}, 1, 1.0},
      {"identical single sentence, BLEU-4", {{1, 2, 3, 4}}, {{1, 2, 3, 4}}, 4, 1.0},
      {"repeated word is clipped", {{1, 1, 1}}, {{1, 2}}, 1, 1.0 / 3.0},
      {"short candidate pays brevity penalty", {{1, 2}}, {{1, 2, 3, 4}}, 1, 1.0 / e},
      {"short candidate, BLEU-2", {{1, 2}}, {{1, 2, 3, 4}}, 2, 1.0 / e},
      {"no shared unigram", {{5, 6}}, {{1, 2}}, 1, 0.0},
      {"unigram match without bigram match", {{2, 1}}, {{1, 2}}, 2, 0.0},
      {"half the unigrams match", {{1, 2, 5, 6}}, {{1, 2, 3, 4}}, 1, 0.5},
      {"half unigrams, one bigram of three", {{1, 2, 5, 6}}, {{1, 2, 3, 4}}, 2, std::sqrt(0.5 * (1.0 / 3.0))},
      {"one substitution, BLEU-3",
       {{1, 2, 3, 9, 5}},
       {{1, 2, 3, 4, 5}},
       3,
       std::cbrt((4.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0))},
      {"one substitution, BLEU-4 has no matching four-gram", {{1, 2, 3, 9, 5}}, {{1, 2, 3, 4, 5}}, 4, 0.0},
      {"longer candidate has no penalty",
       {{1, 2, 3, 4, 7}},
       {{1, 2, 3, 4}},
       2,
       std::sqrt((4.0 / 5.0) * (3.0 / 4.0))},
      {"pooled counts across two sentences",
       {{1, 2}, {3, 9}},
       {{1, 2}, {3, 4}},
       1,
       3.0 / 4.0},
      {"pooled bigrams across two sentences", {{1, 2}, {3, 9}}, {{1, 2}, {3, 4}}, 2, std::sqrt(0.75 * 0.5)},
      {"corpus brevity uses pooled lengths",
       {{1, 2}, {3, 4, 5}},
       {{1, 2, 7}, {3, 4, 5, 6}},
       1,
       std::exp(1.0 - 7.0 / 5.0)},
      {"clipping against reference counts", {{1, 1, 2, 2}}, {{1, 2, 1, 3}}, 1, 3.0 / 4.0},
      {"clipped bigrams", {{1, 1, 2, 2}}, {{1, 2, 1, 3}}, 2, std::sqrt(0.75 * (1.0 / 3.0))},
      {"empty candidate sentence in a corpus",
       {{}, {1, 2, 3}},
       {{4}, {1, 2, 3}},
       1,
       std::exp(1.0 - 4.0 / 3.0)},
      {"reordered words keep unigram precision", {{3, 2, 1}}, {{1, 2, 3}}, 1, 1.0},
      {"reordered words lose bigrams", {{3, 2, 1}}, {{1, 2, 3}}, 2, 0.0},
      {"three-sentence corpus, BLEU-2",
       {{1, 2, 3}, {4, 5}, {6, 7, 8}},
       {{1, 2, 3}, {4, 9}, {6, 7, 8}},
       2,
       std::sqrt((7.0 / 8.0) * (4.0 / 5.0))},
      {"template findings with one wrong state",
       {{10, 1, 20, 11, 2, 20}},
       {{10, 1, 20, 11, 3, 20}},
       4,
       std::pow((5.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0), 0.25)},
  };
}

}  // namespace slog::testing

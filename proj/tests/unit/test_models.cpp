#include "doctest.h"
#include "fixtures.hpp"

#include "slog/error.hpp"

#include <cmath>
#include <filesystem>

using namespace slog;
using nn::Matrix;

TEST_CASE("caption loss of a uniform generator is log vocabulary size per token") {
  auto s = testing::tiny_setup(1);
  s.gen.params.at("gen/out/W").setZero();
  s.gen.params.at("gen/out/b").setZero();
  const double v = static_cast<double>(s.gen.config.vocab_size);
  for (const auto& inst : s.instances)
    CHECK(models::caption_nll(s.gen, inst.features, inst.findings) == doctest::Approx(std::log(v)).epsilon(1e-12));
}

TEST_CASE("caption loss is a mean of per-instance means") {
  const auto s = testing::tiny_setup(2);
  double mean = 0.0;
  for (const auto& inst : s.instances) mean += models::caption_nll(s.gen, inst.features, inst.findings);
  mean /= static_cast<double>(s.instances.size());
  nn::Tape tape(false);
  nn::Bound p(tape, s.gen.params, false);
  const auto batch = models::caption_nll(tape, p, s.gen.config, testing::features_of(s.instances),
                                         testing::findings_of(s.instances));
  CHECK(batch.scalar() == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("greedy decoding invariants hold for random models") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = testing::tiny_setup(seed);
    const auto& c = s.gen.config;
    for (const auto& inst : s.instances) {
      const auto out = models::decode_greedy(s.gen, inst.features);
      CHECK(out.length() >= 1);
      CHECK(out.length() <= c.max_decode_len);
      for (std::size_t t = 0; t + 1 < out.tokens.size(); ++t) CHECK(out.tokens.ids[t] != c.eos);
      CHECK(out.step_distributions.rows() == static_cast<Eigen::Index>(out.length()));
      for (Eigen::Index t = 0; t < out.step_distributions.rows(); ++t) {
        CHECK(out.step_distributions.row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(out.step_distributions.row(t).minCoeff() >= 0.0);
        Eigen::Index arg;
        out.step_distributions.row(t).maxCoeff(&arg);
        CHECK(arg == out.tokens.ids[static_cast<std::size_t>(t)]);
      }
      const Matrix& E = s.gen.params.at("gen/embed");
      REQUIRE(out.z_hard.rows() == static_cast<Eigen::Index>(c.max_decode_len));
      for (Eigen::Index t = 0; t < out.z_hard.rows(); ++t) {
        const int id = t < static_cast<Eigen::Index>(out.length()) ? out.tokens.ids[static_cast<std::size_t>(t)] : c.pad;
        CHECK(out.z_hard.row(t) == E.row(id));
        if (t < static_cast<Eigen::Index>(out.length()))
          CHECK(out.z_soft.row(t).isApprox(out.step_distributions.row(t) * E, 1e-12));
      }
      CHECK(models::decode_greedy(s.gen, inst.features).tokens == out.tokens);
    }
  }
}

TEST_CASE("batch and single decoding agree") {
  const auto s = testing::tiny_setup(7, 6);
  const auto batch = models::decode_greedy(s.gen, testing::features_of(s.instances));
  for (std::size_t n = 0; n < s.instances.size(); ++n) {
    const auto one = models::decode_greedy(s.gen, s.instances[n].features);
    CHECK(batch[n].tokens == one.tokens);
    CHECK(batch[n].z_soft.isApprox(one.z_soft, 1e-12));
  }
}

TEST_CASE("soft guidance rows are expectations of the embedding table") {
  const auto s = testing::tiny_setup(3);
  const Matrix X = testing::features_of(s.instances);
  nn::Tape tape(false);
  nn::Bound p(tape, s.gen.params, false);
  const auto g = models::soft_guidance(tape, p, s.gen.config, X);
  const auto decoded = models::decode_greedy(s.gen, X);
  for (std::size_t n = 0; n < s.instances.size(); ++n) {
    for (std::size_t t = 0; t < decoded[n].length(); ++t) {
      CHECK(g.mask(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t)) == 1.0);
      CHECK(g.rows[t].value().row(static_cast<Eigen::Index>(n)).isApprox(
          decoded[n].z_soft.row(static_cast<Eigen::Index>(t)), 1e-12));
    }
  }
}

TEST_CASE("embed_tokens skips BOS and PAD, keeps a terminal EOS and pads with the PAD row") {
  Matrix table(5, 2);
  table << 0, 0, 1, 1, 2, 2, 3, 3, 4, 4;
  const int bos = 2, eos = 3, pad = 4;
  std::size_t len = 0;
  const Matrix z = models::embed_tokens(table, text::TokenSequence{{bos, 0, 1, eos}}, 5, bos, eos, pad, &len);
  CHECK(len == 3);
  CHECK(z.rows() == 5);
  CHECK(z.row(0) == table.row(0));
  CHECK(z.row(1) == table.row(1));
  CHECK(z.row(2) == table.row(eos));
  CHECK(z.row(3) == table.row(pad));
  const Matrix cut = models::embed_tokens(table, text::TokenSequence{{bos, 0, 1, 0, 1, eos}}, 2, bos, eos, pad, &len);
  CHECK(len == 2);
  CHECK(cut.rows() == 2);
}

TEST_CASE("human decisions take the first class on exact ties") {
  Matrix p(3, 3);
  p << 0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 1.0 / 3, 1.0 / 3, 1.0 / 3;
  CHECK(models::decide_from_probabilities(p) ==
        world::DecisionVector{world::Decision::kNegative, world::Decision::kPositive, world::Decision::kPositive});
}

TEST_CASE("human probabilities are stochastic and ignore special tokens") {
  const auto s = testing::tiny_setup(4);
  const auto& inst = s.instances.front();
  const auto d = models::human_decide(s.human, inst.features, inst.findings);
  CHECK(d.probabilities.rows() == 2);
  for (Eigen::Index i = 0; i < 2; ++i) CHECK(d.probabilities.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  auto padded = inst.findings;
  padded.ids.insert(padded.ids.begin() + 1, s.world.vocab.pad());
  padded.ids.pop_back();  // drop EOS
  CHECK(models::human_decide(s.human, inst.features, padded).probabilities.isApprox(d.probabilities, 1e-12));
}

TEST_CASE("surrogate outputs stay strictly inside the unit interval") {
  auto s = testing::tiny_setup(5);
  for (auto& [path, m] : s.surr.params)
    if (path != "surr/embed") m *= 3.0;
  for (const auto& inst : s.instances) {
    const auto q = models::surrogate_predict(s.surr, inst.features, models::surrogate_view(s.surr, inst.findings));
    CHECK(q.size() == 2);
    CHECK(q.minCoeff() > 0.0);
    CHECK(q.maxCoeff() < 1.0);
  }
}

TEST_CASE("surrogate ignores rows past the guidance length") {
  const auto s = testing::tiny_setup(6);
  const auto& inst = s.instances.front();
  auto z = models::surrogate_view(s.surr, text::tokenize("f1 present", s.world.vocab));
  REQUIRE(z.length == 3);
  const auto base = models::surrogate_predict(s.surr, inst.features, z);
  z.z.row(z.z.rows() - 1).setConstant(7.0);
  CHECK(models::surrogate_predict(s.surr, inst.features, z) == base);
}

TEST_CASE("surrogate loss of constant one-half predictions is log two") {
  auto s = testing::tiny_setup(7);
  for (auto& [path, m] : s.surr.params)
    if (path.starts_with("surr/out") || path.starts_with("surr/agree")) m.setZero();
  const auto ex = testing::surrogate_examples(s, 3);
  CHECK(models::surrogate_nll(s.surr, ex) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("surrogate loss is the double average of per-entry cross-entropies") {
  const auto s = testing::tiny_setup(8, 2);
  const auto ex = testing::surrogate_examples(s, 5);
  double by_hand = 0.0;
  for (const auto& e : ex) {
    const auto q = models::surrogate_predict(s.surr, e.features, e.z);
    for (Eigen::Index i = 0; i < q.size(); ++i)
      by_hand -= e.quality(i) * std::log(q(i)) + (1.0 - e.quality(i)) * std::log(1.0 - q(i));
  }
  by_hand /= 2.0 * 2.0;
  CHECK(std::abs(models::surrogate_nll(s.surr, ex) - by_hand) < 1e-9);
}

TEST_CASE("model losses have exact gradients on a tiny world") {
  const auto s = testing::tiny_setup(9);
  CHECK(nn::grad_check(testing::caption_loss(s), s.gen.params).max_relative_error < 1e-4);
  CHECK(nn::grad_check(testing::human_loss(s), s.human.params).max_relative_error < 1e-4);
  const auto ex = testing::surrogate_examples(s, 1);
  CHECK(nn::grad_check(testing::surrogate_loss(s, ex), s.surr.params).max_relative_error < 1e-4);
}

TEST_CASE("surrogate gradient with respect to guidance rows is exact") {
  const auto s = testing::tiny_setup(10);
  const auto& inst = s.instances.front();
  const auto view = models::surrogate_view(s.surr, inst.findings);
  nn::ParamTree z;
  z.add("z", view.z);
  const nn::LossFn f = [&](const nn::ParamTree& params, nn::ParamTree* grads) {
    nn::Tape tape(grads != nullptr);
    nn::Bound zp(tape, params, grads != nullptr);
    const nn::Bound sp(tape, s.surr.params, false);
    const Matrix& Z = zp["z"].value();
    std::vector<nn::Var> rows;
    Matrix mask = Matrix::Zero(1, Z.rows());
    for (Eigen::Index t = 0; t < Z.rows(); ++t) {
      rows.push_back(nn::slice_cols(nn::matmul(tape.constant(Matrix(Eigen::RowVectorXd::Unit(Z.rows(), t))), zp["z"]), 0,
                                    Z.cols()));
      mask(0, t) = t < static_cast<Eigen::Index>(view.length) ? 1.0 : 0.0;
    }
    auto q = nn::mean_all(models::surrogate_forward(tape, sp, s.surr.config, Matrix(inst.features.transpose()), rows, mask));
    if (grads) {
      tape.backward(q);
      *grads = zp.grads(tape);
    }
    return q.scalar();
  };
  CHECK(nn::grad_check(f, z).max_relative_error < 1e-4);
}

TEST_CASE("model checkpoints round-trip with their architecture") {
  const auto s = testing::tiny_setup(11);
  const auto dir = std::filesystem::temp_directory_path() / "slog_model_roundtrip";
  std::filesystem::remove_all(dir);
  models::save_generator(s.gen, dir / "gen.json");
  models::save_human(s.human, dir / "human.json");
  models::save_surrogate(s.surr, dir / "surr.json");
  CHECK(std::filesystem::exists(models::arch_path(dir / "gen.json")));
  const auto g = models::load_generator(dir / "gen.json");
  CHECK(g.config == s.gen.config);
  CHECK(g.params == s.gen.params);
  const auto h = models::load_human(dir / "human.json");
  CHECK(h.config == s.human.config);
  CHECK(h.params == s.human.params);
  const auto q = models::load_surrogate(dir / "surr.json");
  CHECK(q.config == s.surr.config);
  CHECK(q.params == s.surr.params);
  CHECK_THROWS_AS(models::load_generator(dir / "missing.json"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("surrogate token table must match the vocabulary") {
  const auto s = testing::tiny_setup(12);
  const Matrix wrong = Matrix::Zero(3, 3);
  CHECK_THROWS_AS(models::init_surrogate(s.surr.config, 1, &wrong), ShapeError);
  const Matrix& table = s.gen.params.at("gen/embed");
  CHECK(models::init_surrogate(s.surr.config, 1, &table).params.at("surr/embed") == table);
}

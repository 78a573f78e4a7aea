#include "doctest.h"
#include "fixtures.hpp"

#include "slog/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace slog;
using text::TokenSequence;

TEST_CASE("template vocabulary layout") {
  const auto v = text::build_vocab(6, 6);
  CHECK(v.size() == 21);
  CHECK(v.token(0) == "f1");
  CHECK(v.token(6) == "n1");
  CHECK(v.id("present") == 12);
  CHECK(v.id(".") == 17);
  CHECK(v.is_special(v.bos()));
  CHECK(v.is_special(v.eos()));
  CHECK(v.is_special(v.pad()));
  CHECK_FALSE(v.is_special(v.id("seen")));
  // One name, five states, the stop token and three specials.
  CHECK(text::build_vocab(1, 0).size() == 10);
}

TEST_CASE("vocabulary construction rejects duplicates and missing specials") {
  CHECK_THROWS_AS(text::Vocab({"a", "a", "<bos>", "<eos>", "<pad>"}, "<bos>", "<eos>", "<pad>"), DataError);
  CHECK_THROWS_AS(text::Vocab({"a", "<bos>", "<eos>"}, "<bos>", "<eos>", "<pad>"), DataError);
}

TEST_CASE("tokenize wraps in BOS and EOS and round-trips") {
  const auto v = text::build_vocab(2, 1);
  const std::string s = "f1 present . f2 equivocal . n1 seen .";
  const auto seq = text::tokenize(s, v);
  CHECK(seq.ids.front() == v.bos());
  CHECK(seq.ids.back() == v.eos());
  CHECK(seq.size() == 11);
  CHECK(text::detokenize(seq, v) == s);
  CHECK(text::tokenize("", v).ids == std::vector<int>{v.bos(), v.eos()});
  CHECK(text::tokenize("  f1   present  ", v) == text::tokenize("f1 present", v));
}

TEST_CASE("unknown tokens are reported by name") {
  const auto v = text::build_vocab(2, 0);
  try {
    static_cast<void>(text::tokenize("f1 xyz", v));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("xyz") != std::string::npos);
  }
}

TEST_CASE("validate enforces id range and terminal EOS") {
  const auto v = text::build_vocab(2, 0);
  CHECK_NOTHROW(text::validate(text::tokenize("f1 absent .", v), v));
  CHECK_THROWS_AS(text::validate(TokenSequence{{v.bos(), 99}}, v), DataError);
  CHECK_THROWS_AS(text::validate(TokenSequence{{v.bos(), v.eos(), 0}}, v), DataError);
  CHECK_THROWS_AS(text::validate(TokenSequence{{-1}}, v), DataError);
}

TEST_CASE("strip_specials removes BOS, EOS and PAD only") {
  const auto v = text::build_vocab(2, 0);
  const TokenSequence seq{{v.bos(), 0, v.pad(), 1, v.eos()}};
  CHECK(text::strip_specials(seq, v) == std::vector<int>{0, 1});
}

TEST_CASE("hand-computed BLEU values") {
  for (const auto& c : testing::hand_bleu_cases()) {
    CAPTURE(c.name);
    const auto r = text::corpus_bleu(c.candidates, c.references, 4);
    CHECK(std::abs(r.bleu[c.n - 1] - c.expected) <= 1e-9);
  }
}

TEST_CASE("BLEU on token sequences ignores specials") {
  const auto v = text::build_vocab(2, 0);
  const std::vector<TokenSequence> cand = {text::tokenize("f1 present .", v)};
  auto padded = cand;
  padded[0].ids.insert(padded[0].ids.end() - 1, {v.pad(), v.pad()});
  const auto a = text::corpus_bleu(cand, cand, v);
  const auto b = text::corpus_bleu(padded, cand, v);
  for (int n = 0; n < 3; ++n) {
    CHECK(a.bleu[n] == 1.0);
    CHECK(b.bleu[n] == 1.0);
  }
  CHECK(a.bleu[3] == 0.0);  // three tokens hold no four-gram
  CHECK(a.avg_length == 3.0);
}

TEST_CASE("BLEU matches the map-based oracle, is bounded and order-free on random corpora") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> word(0, 5), len(0, 9), size(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<int>> c, r;
    const int n = size(rng);
    for (int s = 0; s < n; ++s) {
      std::vector<int> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)) + 1);
      for (auto& x : a) x = word(rng);
      for (auto& x : b) x = word(rng);
      c.push_back(a);
      r.push_back(b);
    }
    const auto got = text::corpus_bleu(c, r, 4);
    for (int k = 1; k <= 4; ++k) {
      CHECK(got.bleu[k - 1] == doctest::Approx(testing::bleu_oracle(c, r, k)).epsilon(1e-12));
      CHECK(got.bleu[k - 1] >= 0.0);
      CHECK(got.bleu[k - 1] <= 1.0);
    }
    std::vector<std::size_t> perm(c.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<int>> pc, pr;
    for (auto i : perm) {
      pc.push_back(c[i]);
      pr.push_back(r[i]);
    }
    const auto shuffled = text::corpus_bleu(pc, pr, 4);
    for (int k = 0; k < 4; ++k) CHECK(shuffled.bleu[k] == got.bleu[k]);
  }
}

TEST_CASE("BLEU input validation") {
  CHECK_THROWS_AS(text::corpus_bleu({}, {}, 4), DataError);
  CHECK_THROWS_AS(text::corpus_bleu({{1}}, {{1}, {2}}, 4), DataError);
  CHECK_THROWS_AS(text::corpus_bleu({{1}}, {{1}}, 5), DataError);
  const auto empty = text::corpus_bleu({{}}, {{1, 2}}, 4);
  CHECK(empty.bleu[0] == 0.0);
  CHECK(empty.avg_length == 0.0);
}

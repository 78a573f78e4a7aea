#include "slog/textmetrics.hpp"

#include "slog/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace slog::text {

Vocab::Vocab(std::vector<std::string> tokens, std::string_view bos, std::string_view eos, std::string_view pad)
    : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("duplicate vocabulary token: " + tokens_[i]);
    }
  }
  bos_ = id(bos);
  eos_ = id(eos);
  pad_ = id(pad);
  if (bos_ == eos_ || bos_ == pad_ || eos_ == pad_) throw DataError("special tokens must be distinct");
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw DataError("unknown token '" + std::string(token) + "'");
  return it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

Vocab build_vocab(std::size_t num_relevant, std::size_t num_nuisance) {
  std::vector<std::string> tokens;
  for (std::size_t i = 1; i <= num_relevant; ++i) tokens.push_back("f" + std::to_string(i));
  for (std::size_t j = 1; j <= num_nuisance; ++j) tokens.push_back("n" + std::to_string(j));
  for (auto w : {kPresent, kAbsent, kEquivocal, kSeen, kUnseen, kStop}) tokens.emplace_back(w);
  for (auto w : {kBos, kEos, kPad}) tokens.emplace_back(w);
  return Vocab(std::move(tokens), kBos, kEos, kPad);
}

void validate(const TokenSequence& seq, const Vocab& vocab) {
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw DataError("token id out of range: " + std::to_string(id));
    }
    if (id == vocab.eos() && i + 1 != seq.ids.size()) throw DataError("EOS must be the final token");
  }
}

TokenSequence tokenize(std::string_view text, const Vocab& vocab) {
  TokenSequence seq;
  seq.ids.push_back(vocab.bos());
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) seq.ids.push_back(vocab.id(tok));
  seq.ids.push_back(vocab.eos());
  return seq;
}

std::vector<int> strip_specials(const TokenSequence& seq, const Vocab& vocab) {
  std::vector<int> out;
  out.reserve(seq.ids.size());
  for (int id : seq.ids) {
    if (!vocab.is_special(id)) out.push_back(id);
  }
  return out;
}

std::string detokenize(const TokenSequence& seq, const Vocab& vocab) {
  std::string out;
  for (int id : strip_specials(seq, vocab)) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

namespace {

using NGram = std::vector<int>;

std::map<NGram, int> count_ngrams(const std::vector<int>& ids, int n) {
  std::map<NGram, int> counts;
  if (static_cast<int>(ids.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= ids.size(); ++i) {
    ++counts[NGram(ids.begin() + static_cast<std::ptrdiff_t>(i), ids.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return counts;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<std::vector<int>>& candidates,
                       const std::vector<std::vector<int>>& references, int max_n) {
  if (candidates.empty() || candidates.size() != references.size()) {
    throw DataError("corpus_bleu: need equally many (>= 1) candidates and references");
  }
  if (max_n < 1 || max_n > 4) throw DataError("corpus_bleu: max_n must be in [1, 4]");

  std::vector<long long> matched(static_cast<std::size_t>(max_n), 0);
  std::vector<long long> total(static_cast<std::size_t>(max_n), 0);
  long long cand_len = 0;
  long long ref_len = 0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    cand_len += static_cast<long long>(candidates[s].size());
    ref_len += static_cast<long long>(references[s].size());
    for (int n = 1; n <= max_n; ++n) {
      const auto cand = count_ngrams(candidates[s], n);
      const auto ref = count_ngrams(references[s], n);
      for (const auto& [gram, c] : cand) {
        auto it = ref.find(gram);
        matched[static_cast<std::size_t>(n - 1)] += std::min(c, it == ref.end() ? 0 : it->second);
        total[static_cast<std::size_t>(n - 1)] += c;
      }
    }
  }

  BleuReport report;
  report.avg_length = static_cast<double>(cand_len) / static_cast<double>(candidates.size());
  if (cand_len == 0) return report;
  const double bp =
      std::min(1.0, std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len)));
  double log_sum = 0.0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    const auto i = static_cast<std::size_t>(n - 1);
    if (matched[i] == 0 || total[i] == 0) zero = true;
    if (!zero) log_sum += std::log(static_cast<double>(matched[i]) / static_cast<double>(total[i]));
    report.bleu[i] = zero ? 0.0 : bp * std::exp(log_sum / n);
  }
  return report;
}

BleuReport corpus_bleu(const std::vector<TokenSequence>& candidates, const std::vector<TokenSequence>& references,
                       const Vocab& vocab, int max_n) {
  std::vector<std::vector<int>> c;
  std::vector<std::vector<int>> r;
  c.reserve(candidates.size());
  r.reserve(references.size());
  for (const auto& s : candidates) c.push_back(strip_specials(s, vocab));
  for (const auto& s : references) r.push_back(strip_specials(s, vocab));
  return corpus_bleu(c, r, max_n);
}

}  // namespace slog::text

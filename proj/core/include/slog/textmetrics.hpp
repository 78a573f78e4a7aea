#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace slog::text {

/// Bijective token <-> id map with three distinguished special tokens.
class Vocab {
 public:
  Vocab() = default;
  /// `tokens` must be unique and contain the three special names.
  Vocab(std::vector<std::string> tokens, std::string_view bos, std::string_view eos, std::string_view pad);

  [[nodiscard]] std::size_t size() const { return tokens_.size(); }
  [[nodiscard]] const std::string& token(int id) const;
  /// Throws DataError naming the token when it is not in the vocabulary.
  [[nodiscard]] int id(std::string_view token) const;
  [[nodiscard]] bool contains(std::string_view token) const;
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

  [[nodiscard]] int bos() const { return bos_; }
  [[nodiscard]] int eos() const { return eos_; }
  [[nodiscard]] int pad() const { return pad_; }
  [[nodiscard]] bool is_special(int id) const { return id == bos_ || id == eos_ || id == pad_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_ && a.bos_ == b.bos_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int bos_ = -1;
  int eos_ = -1;
  int pad_ = -1;
};

inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kPad = "<pad>";

/// State words used by the finding templates.
inline constexpr std::string_view kPresent = "present";
inline constexpr std::string_view kAbsent = "absent";
inline constexpr std::string_view kEquivocal = "equivocal";
inline constexpr std::string_view kSeen = "seen";
inline constexpr std::string_view kUnseen = "unseen";
inline constexpr std::string_view kStop = ".";

/// Vocabulary of the finding templates: attribute names f1..fd and n1..nr,
/// the five state words, ".", then <bos>, <eos>, <pad>.
Vocab build_vocab(std::size_t num_relevant, std::size_t num_nuisance);

/// Token ids. Valid sequences hold at most one EOS, and only as the last id.
struct TokenSequence {
  std::vector<int> ids;

  [[nodiscard]] std::size_t size() const { return ids.size(); }
  [[nodiscard]] bool empty() const { return ids.empty(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Throws DataError when an id is out of range or EOS is not terminal.
void validate(const TokenSequence& seq, const Vocab& vocab);

/// Whitespace-separated tokens, wrapped in BOS ... EOS.
TokenSequence tokenize(std::string_view text, const Vocab& vocab);
/// Space-joined tokens with specials removed.
std::string detokenize(const TokenSequence& seq, const Vocab& vocab);
/// Ids with BOS/EOS/PAD removed.
std::vector<int> strip_specials(const TokenSequence& seq, const Vocab& vocab);

struct BleuReport {
  double bleu[4] = {0, 0, 0, 0};  // bleu[n-1] is BLEU-n
  double avg_length = 0.0;
};

/// Corpus BLEU over content ids (specials already removed): clipped n-gram
/// counts pooled over the corpus, uniform weights, brevity penalty
/// min(1, exp(1 - r/c)), no smoothing. A zero pooled precision at any order
/// i <= n makes BLEU-n zero.
BleuReport corpus_bleu(const std::vector<std::vector<int>>& candidates,
                       const std::vector<std::vector<int>>& references, int max_n = 4);

/// Same, stripping specials with `vocab` first.
BleuReport corpus_bleu(const std::vector<TokenSequence>& candidates, const std::vector<TokenSequence>& references,
                       const Vocab& vocab, int max_n = 4);

}  // namespace slog::text

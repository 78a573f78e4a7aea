#include "slog/models.hpp"

#include "slog/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>

namespace slog::models {

namespace {

using nn::Bound;
using nn::Index;
using nn::Tape;

std::string label_key(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "l%02zu", i);
  return buf;
}

void add_gru(nn::ParamTree& p, nn::Initializer& init, const std::string& prefix, Index in, Index hidden) {
  p.add(prefix + "/W_zr", init.weight(in + hidden, 2 * hidden));
  p.add(prefix + "/b_zr", nn::Initializer::bias(2 * hidden));
  p.add(prefix + "/W_n", init.weight(in, hidden));
  p.add(prefix + "/U_n", init.weight(hidden, hidden));
  p.add(prefix + "/b_n", nn::Initializer::bias(hidden));
  p.add(prefix + "/b_un", nn::Initializer::bias(hidden));
}

/// Gated recurrent unit: z, r = sigmoid([x, h] W_zr + b_zr);
/// n = tanh(x W_n + b_n + r * (h U_n + b_un)); h' = n + z * (h - n).
Var gru_step(const Bound& p, const std::string& prefix, Var x, Var h) {
  const Index H = h.cols();
  Var zr = nn::sigmoid(nn::add_row(nn::matmul(nn::concat_cols({x, h}), p[prefix + "/W_zr"]), p[prefix + "/b_zr"]));
  Var z = nn::slice_cols(zr, 0, H);
  Var r = nn::slice_cols(zr, H, H);
  Var hu = nn::add_row(nn::matmul(h, p[prefix + "/U_n"]), p[prefix + "/b_un"]);
  Var n = nn::tanh(nn::add(nn::add_row(nn::matmul(x, p[prefix + "/W_n"]), p[prefix + "/b_n"]), nn::mul(r, hu)));
  return nn::add(n, nn::mul(z, nn::sub(h, n)));
}

/// h + m * (h_new - h): rows with m = 0 keep their state.
Var masked_update(Var h, Var h_new, Var mask_col) { return nn::add(h, nn::row_scale(nn::sub(h_new, h), mask_col)); }

Var zeros(Tape& tape, Index rows, Index cols) { return tape.constant(Matrix::Zero(rows, cols)); }

std::atomic<bool> g_truncation_warned{false};

/// Content ids (specials stripped) for each sequence and the B x T mask.
std::pair<std::vector<std::vector<int>>, Matrix> content_batch(std::span<const text::TokenSequence* const> tokens,
                                                               int pad, int bos, int eos) {
  std::vector<std::vector<int>> ids;
  ids.reserve(tokens.size());
  std::size_t T = 1;
  for (const auto* seq : tokens) {
    std::vector<int> c;
    for (int id : seq->ids)
      if (id != pad && id != bos && id != eos) c.push_back(id);
    T = std::max(T, c.size());
    ids.push_back(std::move(c));
  }
  Matrix mask = Matrix::Zero(static_cast<Index>(tokens.size()), static_cast<Index>(T));
  for (std::size_t b = 0; b < ids.size(); ++b)
    for (std::size_t t = 0; t < ids[b].size(); ++t) mask(static_cast<Index>(b), static_cast<Index>(t)) = 1.0;
  return {std::move(ids), std::move(mask)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

GeneratorConfig generator_config_for(const world::World& w, std::size_t max_decode_len) {
  GeneratorConfig c;
  c.vocab_size = w.vocab.size();
  c.feature_dim = w.config.feature_dim;
  c.max_decode_len = max_decode_len;
  c.train_horizon = w.config.findings_horizon();
  c.bos = w.vocab.bos();
  c.eos = w.vocab.eos();
  c.pad = w.vocab.pad();
  return c;
}

HumanConfig human_config_for(const world::World& w) {
  HumanConfig c;
  c.vocab_size = w.vocab.size();
  c.feature_dim = w.config.feature_dim;
  c.num_labels = w.config.num_labels;
  c.bos = w.vocab.bos();
  c.eos = w.vocab.eos();
  c.pad = w.vocab.pad();
  return c;
}

SurrogateConfig surrogate_config_for(const world::World& w, const GeneratorConfig& gen) {
  SurrogateConfig c;
  c.input_dim = gen.embed_dim;
  c.vocab_size = gen.vocab_size;
  c.feature_dim = w.config.feature_dim;
  c.num_labels = w.config.num_labels;
  c.max_len = gen.max_decode_len;
  c.bos = gen.bos;
  c.eos = gen.eos;
  c.pad = gen.pad;
  return c;
}

Generator init_generator(const GeneratorConfig& c, std::uint64_t seed) {
  if (c.vocab_size == 0 || c.feature_dim == 0 || c.embed_dim == 0 || c.hidden_dim == 0 || c.max_decode_len == 0) {
    throw ConfigError("generator dimensions must be positive");
  }
  nn::Initializer init(seed);
  const auto V = static_cast<Index>(c.vocab_size);
  const auto p = static_cast<Index>(c.feature_dim);
  const auto e = static_cast<Index>(c.embed_dim);
  const auto H = static_cast<Index>(c.hidden_dim);
  Generator g{c, {}};
  g.params.add("gen/enc/W", init.weight(p, H));
  g.params.add("gen/enc/b", nn::Initializer::bias(H));
  g.params.add("gen/embed", init.weight(V, e));
  add_gru(g.params, init, "gen/dec", e + H, H);
  g.params.add("gen/out/W", init.weight(H, V));
  g.params.add("gen/out/b", nn::Initializer::bias(V));
  return g;
}

Human init_human(const HumanConfig& c, std::uint64_t seed) {
  if (c.vocab_size == 0 || c.feature_dim == 0 || c.num_labels == 0) throw ConfigError("human dimensions must be positive");
  nn::Initializer init(seed);
  const auto h = static_cast<Index>(c.hidden_dim);
  const auto s = static_cast<Index>(c.scan_dim);
  Human m{c, {}};
  m.params.add("human/embed", init.weight(static_cast<Index>(c.vocab_size), static_cast<Index>(c.embed_dim)));
  add_gru(m.params, init, "human/fwd", static_cast<Index>(c.embed_dim), h);
  add_gru(m.params, init, "human/bwd", static_cast<Index>(c.embed_dim), h);
  m.params.add("human/attn/Q", init.weight(static_cast<Index>(c.num_labels), 2 * h));
  m.params.add("human/scan/W", init.weight(static_cast<Index>(c.feature_dim), s));
  m.params.add("human/scan/b", nn::Initializer::bias(s));
  for (std::size_t i = 0; i < c.num_labels; ++i) {
    m.params.add("human/head/" + label_key(i) + "/W", init.weight(2 * h + s, world::kNumDecisionClasses));
    m.params.add("human/head/" + label_key(i) + "/b", nn::Initializer::bias(world::kNumDecisionClasses));
  }
  return m;
}

Surrogate init_surrogate(const SurrogateConfig& c, std::uint64_t seed, const Matrix* token_table) {
  if (c.input_dim == 0 || c.vocab_size == 0 || c.feature_dim == 0 || c.num_labels == 0)
    throw ConfigError("surrogate dimensions must be positive");
  if (token_table && (token_table->rows() != static_cast<Index>(c.vocab_size) ||
                      token_table->cols() != static_cast<Index>(c.input_dim))) {
    throw ShapeError("surrogate token table must be vocab_size x input_dim");
  }
  nn::Initializer init(seed);
  const auto h = static_cast<Index>(c.hidden_dim);
  const auto s = static_cast<Index>(c.scan_dim);
  const auto m = static_cast<Index>(c.mlp_dim);
  Surrogate out{c, {}};
  out.params.add("surr/embed", token_table ? *token_table
                                           : init.weight(static_cast<Index>(c.vocab_size), static_cast<Index>(c.input_dim)));
  add_gru(out.params, init, "surr/gru", static_cast<Index>(c.input_dim), h);
  out.params.add("surr/attn/Q", init.weight(static_cast<Index>(c.num_labels), h));
  out.params.add("surr/scan/W", init.weight(static_cast<Index>(c.feature_dim), s));
  out.params.add("surr/scan/b", nn::Initializer::bias(s));
  out.params.add("surr/mlp/W", init.weight(s, m));
  out.params.add("surr/mlp/b", nn::Initializer::bias(m));
  for (std::size_t i = 0; i < c.num_labels; ++i) {
    out.params.add("surr/out/" + label_key(i) + "/w", init.weight(m, 1));
    out.params.add("surr/agree/" + label_key(i), init.weight(h, s));
  }
  out.params.add("surr/out/b", nn::Initializer::bias(static_cast<Index>(c.num_labels)));
  return out;
}

Matrix stack_features(std::span<const world::Instance* const> batch) {
  if (batch.empty()) return Matrix(0, 0);
  Matrix X(static_cast<Index>(batch.size()), batch.front()->features.size());
  for (std::size_t b = 0; b < batch.size(); ++b) X.row(static_cast<Index>(b)) = batch[b]->features.transpose();
  return X;
}

Matrix stack_features(const std::vector<world::Instance>& instances) {
  std::vector<const world::Instance*> ptrs;
  for (const auto& i : instances) ptrs.push_back(&i);
  return stack_features(ptrs);
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

Var caption_nll(Tape& tape, const Bound& gen, const GeneratorConfig& c, const Matrix& features,
                std::span<const text::TokenSequence* const> findings) {
  const auto B = static_cast<Index>(findings.size());
  if (B == 0 || features.rows() != B) throw ShapeError("caption_nll: batch size mismatch");

  // Truncate to the train horizon; targets are positions 1..T.
  std::vector<std::vector<int>> seqs;
  std::size_t steps = 0;
  for (const auto* f : findings) {
    if (f->ids.size() < 2) throw DataError("caption_nll: findings must hold BOS and at least one token");
    std::vector<int> s = f->ids;
    if (s.size() > c.train_horizon) {
      if (!g_truncation_warned.exchange(true)) {
        warn("findings of " + std::to_string(s.size()) + " tokens truncated to the decoder horizon of " +
             std::to_string(c.train_horizon));
      }
      s.resize(c.train_horizon);
    }
    steps = std::max(steps, s.size() - 1);
    seqs.push_back(std::move(s));
  }

  std::vector<double> per_instance_weight(seqs.size());
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    std::size_t count = 0;
    for (std::size_t t = 1; t < seqs[b].size(); ++t)
      if (seqs[b][t] != c.pad) ++count;
    per_instance_weight[b] = count == 0 ? 0.0 : 1.0 / (static_cast<double>(count) * static_cast<double>(B));
  }

  Var X = tape.constant(features);
  Var ctx = nn::tanh(nn::add_row(nn::matmul(X, gen["gen/enc/W"]), gen["gen/enc/b"]));
  Var h = ctx;
  Var E = gen["gen/embed"];
  Var total;
  bool have_total = false;
  std::vector<int> in(seqs.size());
  std::vector<int> tgt(seqs.size());
  std::vector<double> w(seqs.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      const bool valid = t + 1 < seqs[b].size();
      in[b] = t < seqs[b].size() ? seqs[b][t] : c.pad;
      tgt[b] = valid ? seqs[b][t + 1] : c.pad;
      w[b] = valid && tgt[b] != c.pad ? per_instance_weight[b] : 0.0;
    }
    Var x = nn::concat_cols({nn::gather_rows(E, in), ctx});
    h = gru_step(gen, "gen/dec", x, h);
    Var logits = nn::add_row(nn::matmul(h, gen["gen/out/W"]), gen["gen/out/b"]);
    Var step_loss = nn::softmax_xent_sum(logits, tgt, w);
    total = have_total ? nn::add(total, step_loss) : step_loss;
    have_total = true;
  }
  return total;
}

double caption_nll(const Generator& gen, const Eigen::VectorXd& features, const text::TokenSequence& findings) {
  Tape tape(false);
  Bound p(tape, gen.params, false);
  const text::TokenSequence* f[] = {&findings};
  return caption_nll(tape, p, gen.config, features.transpose(), f).scalar();
}

SoftGuidance soft_guidance(Tape& tape, const Bound& gen, const GeneratorConfig& c, const Matrix& features,
                           double temperature, const Matrix* z_table) {
  if (!(temperature > 0.0)) throw Error("soft_guidance: temperature must be positive");
  const Index B = features.rows();
  const auto L = static_cast<Index>(c.max_decode_len);
  SoftGuidance out;
  out.mask = Matrix::Zero(B, L);
  out.tokens.assign(static_cast<std::size_t>(B), {});

  Var X = tape.constant(features);
  Var ctx = nn::tanh(nn::add_row(nn::matmul(X, gen["gen/enc/W"]), gen["gen/enc/b"]));
  Var h = ctx;
  Var E = gen["gen/embed"];
  Var Z = z_table ? tape.constant(*z_table) : E;
  if (Z.rows() != E.rows()) throw ShapeError("soft_guidance: z table must have one row per token");
  const std::vector<int> pad_ids(static_cast<std::size_t>(B), c.pad);
  Var pad_rows = nn::gather_rows(Z, pad_ids);

  std::vector<int> in(static_cast<std::size_t>(B), c.bos);
  std::vector<char> active(static_cast<std::size_t>(B), 1);
  for (Index t = 0; t < L; ++t) {
    Var x = nn::concat_cols({nn::gather_rows(E, in), ctx});
    h = gru_step(gen, "gen/dec", x, h);
    Var logits = nn::add_row(nn::matmul(h, gen["gen/out/W"]), gen["gen/out/b"]);
    if (temperature != 1.0) logits = nn::scale(logits, 1.0 / temperature);
    Var probs = nn::softmax_rows(logits);
    out.distributions.push_back(probs);

    Matrix m(B, 1);
    const Matrix& pv = probs.value();
    for (Index b = 0; b < B; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      m(b, 0) = active[bi] ? 1.0 : 0.0;
      out.mask(b, t) = m(b, 0);
      if (active[bi]) {
        Index arg = 0;
        pv.row(b).maxCoeff(&arg);  // first maximal index
        out.tokens[bi].push_back(static_cast<int>(arg));
        in[bi] = static_cast<int>(arg);
        if (arg == c.eos) active[bi] = 0;
      } else {
        in[bi] = c.pad;
      }
    }
    Var mv = tape.constant(m);
    Var soft = nn::matmul(probs, Z);
    out.rows.push_back(nn::add(nn::row_scale(soft, mv), nn::row_scale(pad_rows, nn::one_minus(mv))));
  }
  return out;
}

std::vector<GuidanceOutput> decode_greedy(const Generator& gen, const Matrix& features, double temperature) {
  Tape tape(false);
  Bound p(tape, gen.params, false);
  const SoftGuidance sg = soft_guidance(tape, p, gen.config, features, temperature);
  const Matrix& E = gen.params.at("gen/embed");
  const auto L = static_cast<Index>(gen.config.max_decode_len);
  std::vector<GuidanceOutput> out(static_cast<std::size_t>(features.rows()));
  for (Index b = 0; b < features.rows(); ++b) {
    GuidanceOutput& g = out[static_cast<std::size_t>(b)];
    g.tokens.ids = sg.tokens[static_cast<std::size_t>(b)];
    const auto n = static_cast<Index>(g.tokens.ids.size());
    g.step_distributions.resize(n, E.rows());
    g.z_hard.resize(L, E.cols());
    g.z_soft.resize(L, E.cols());
    for (Index t = 0; t < L; ++t) {
      if (t < n) {
        g.step_distributions.row(t) = sg.distributions[static_cast<std::size_t>(t)].value().row(b);
        g.z_hard.row(t) = E.row(g.tokens.ids[static_cast<std::size_t>(t)]);
      } else {
        g.z_hard.row(t) = E.row(gen.config.pad);
      }
      g.z_soft.row(t) = sg.rows[static_cast<std::size_t>(t)].value().row(b);
    }
  }
  return out;
}

GuidanceOutput decode_greedy(const Generator& gen, const Eigen::VectorXd& features) {
  return std::move(decode_greedy(gen, Matrix(features.transpose()), 1.0).front());
}

Matrix soft_guidance_embedding(const Generator& gen, const Eigen::VectorXd& features, double temperature) {
  return std::move(decode_greedy(gen, Matrix(features.transpose()), temperature).front().z_soft);
}

text::TokenSequence content_prefix(const text::TokenSequence& tokens, const text::Vocab& vocab, std::size_t budget) {
  text::TokenSequence out;
  for (int id : tokens.ids) {
    if (out.ids.size() >= budget) break;
    if (!vocab.is_special(id)) out.ids.push_back(id);
  }
  return out;
}

Matrix embed_tokens(const Matrix& table, const text::TokenSequence& tokens, std::size_t max_len, int bos, int eos,
                    int pad, std::size_t* length) {
  const auto L = static_cast<Index>(max_len);
  Matrix z(L, table.cols());
  Index t = 0;
  for (int id : tokens.ids) {
    if (t >= L) break;
    if (id == bos || id == pad) continue;
    if (id < 0 || id >= table.rows()) throw DataError("embed_tokens: token id out of range");
    z.row(t++) = table.row(id);
    if (id == eos) break;
  }
  if (length) *length = static_cast<std::size_t>(t);
  for (Index r = t; r < L; ++r) z.row(r) = table.row(pad);
  return z;
}

Matrix hard_embedding(const Generator& gen, const text::TokenSequence& tokens, std::size_t* length) {
  const auto& c = gen.config;
  return embed_tokens(gen.params.at("gen/embed"), tokens, c.max_decode_len, c.bos, c.eos, c.pad, length);
}

// ---------------------------------------------------------------------------
// Human
// ---------------------------------------------------------------------------

std::vector<Var> human_logits(Tape& tape, const Bound& p, const HumanConfig& c, const Matrix& features,
                              std::span<const text::TokenSequence* const> tokens) {
  const auto B = static_cast<Index>(tokens.size());
  if (B == 0 || features.rows() != B) throw ShapeError("human_logits: batch size mismatch");
  // Specials never reach the reader; PAD is also the filler id.
  auto [ids, mask] = content_batch(tokens, c.pad, c.bos, c.eos);
  for (auto& row : ids) {
    std::vector<int> kept;
    for (int id : row) {
      if (static_cast<std::size_t>(id) >= c.vocab_size) throw DataError("human: token id out of range");
      kept.push_back(id);
    }
    row = std::move(kept);
  }
  const Index T = mask.cols();
  const auto h = static_cast<Index>(c.hidden_dim);
  Var E = p["human/embed"];

  std::vector<Var> inputs;
  std::vector<Var> masks;
  std::vector<int> col(static_cast<std::size_t>(B));
  for (Index t = 0; t < T; ++t) {
    for (Index b = 0; b < B; ++b) {
      const auto& row = ids[static_cast<std::size_t>(b)];
      col[static_cast<std::size_t>(b)] = t < static_cast<Index>(row.size()) ? row[static_cast<std::size_t>(t)] : c.pad;
    }
    inputs.push_back(nn::gather_rows(E, col));
    masks.push_back(tape.constant(mask.col(t)));
  }

  std::vector<Var> fwd(static_cast<std::size_t>(T));
  std::vector<Var> bwd(static_cast<std::size_t>(T));
  Var hf = zeros(tape, B, h);
  for (Index t = 0; t < T; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    hf = masked_update(hf, gru_step(p, "human/fwd", inputs[ti], hf), masks[ti]);
    fwd[ti] = hf;
  }
  Var hb = zeros(tape, B, h);
  for (Index t = T; t-- > 0;) {
    const auto ti = static_cast<std::size_t>(t);
    hb = masked_update(hb, gru_step(p, "human/bwd", inputs[ti], hb), masks[ti]);
    bwd[ti] = hb;
  }
  std::vector<Var> states;
  for (Index t = 0; t < T; ++t) states.push_back(nn::concat_cols({fwd[static_cast<std::size_t>(t)], bwd[static_cast<std::size_t>(t)]}));

  Var pooled = nn::attention_pool(states, p["human/attn/Q"], mask);
  Var scan = nn::tanh(nn::add_row(nn::matmul(tape.constant(features), p["human/scan/W"]), p["human/scan/b"]));
  std::vector<Var> logits;
  for (std::size_t i = 0; i < c.num_labels; ++i) {
    Var ctx = nn::slice_cols(pooled, static_cast<Index>(i) * 2 * h, 2 * h);
    const std::string k = "human/head/" + label_key(i);
    logits.push_back(nn::add_row(nn::matmul(nn::concat_cols({ctx, scan}), p[k + "/W"]), p[k + "/b"]));
  }
  return logits;
}

Var human_nll(Tape& tape, const Bound& p, const HumanConfig& c, const Matrix& features,
              std::span<const text::TokenSequence* const> tokens, std::span<const world::DecisionVector* const> labels) {
  if (labels.size() != tokens.size()) throw ShapeError("human_nll: labels and tokens differ in batch size");
  for (const auto* l : labels)
    if (l->size() != c.num_labels) throw ShapeError("human_nll: label vector length must equal num_labels");
  const auto logits = human_logits(tape, p, c, features, tokens);
  const double w = 1.0 / (static_cast<double>(labels.size()) * static_cast<double>(c.num_labels));
  const std::vector<double> weights(labels.size(), w);
  std::vector<int> targets(labels.size());
  Var total;
  for (std::size_t i = 0; i < c.num_labels; ++i) {
    for (std::size_t b = 0; b < labels.size(); ++b) targets[b] = static_cast<int>((*labels[b])[i]);
    Var li = nn::softmax_xent_sum(logits[i], targets, weights);
    total = i == 0 ? li : nn::add(total, li);
  }
  return total;
}

double human_nll(const Human& human, const Eigen::VectorXd& features, const text::TokenSequence& tokens,
                 const world::DecisionVector& labels) {
  Tape tape(false);
  Bound p(tape, human.params, false);
  const text::TokenSequence* t[] = {&tokens};
  const world::DecisionVector* l[] = {&labels};
  return human_nll(tape, p, human.config, features.transpose(), t, l).scalar();
}

world::DecisionVector decide_from_probabilities(const Matrix& probabilities) {
  world::DecisionVector out;
  for (Index i = 0; i < probabilities.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < probabilities.cols(); ++k)
      if (probabilities(i, k) > probabilities(i, best)) best = k;
    out.push_back(static_cast<world::Decision>(best));
  }
  return out;
}

std::vector<HumanDecision> human_decide(const Human& human, const Matrix& features,
                                        std::span<const text::TokenSequence* const> tokens) {
  Tape tape(false);
  Bound p(tape, human.params, false);
  const auto logits = human_logits(tape, p, human.config, features, tokens);
  std::vector<HumanDecision> out(tokens.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Var probs = nn::softmax_rows(logits[i]);
    for (std::size_t b = 0; b < tokens.size(); ++b) {
      if (i == 0) out[b].probabilities.resize(static_cast<Index>(logits.size()), world::kNumDecisionClasses);
      out[b].probabilities.row(static_cast<Index>(i)) = probs.value().row(static_cast<Index>(b));
    }
  }
  for (auto& d : out) d.decisions = decide_from_probabilities(d.probabilities);
  return out;
}

HumanDecision human_decide(const Human& human, const Eigen::VectorXd& features, const text::TokenSequence& tokens) {
  const text::TokenSequence* t[] = {&tokens};
  return std::move(human_decide(human, Matrix(features.transpose()), t).front());
}

// ---------------------------------------------------------------------------
// Surrogate
// ---------------------------------------------------------------------------

Var surrogate_forward(Tape& tape, const Bound& p, const SurrogateConfig& c, const Matrix& features,
                      std::span<const Var> z_rows, const Matrix& mask) {
  const Index B = features.rows();
  const auto T = static_cast<Index>(z_rows.size());
  if (T == 0 || T > static_cast<Index>(c.max_len)) throw ShapeError("surrogate: z must have 1..max_len rows");
  if (mask.rows() != B || mask.cols() != T) throw ShapeError("surrogate: mask must be B x rows(z)");
  const auto h = static_cast<Index>(c.hidden_dim);

  std::vector<Var> states;
  Var hs = zeros(tape, B, h);
  for (Index t = 0; t < T; ++t) {
    Var zt = z_rows[static_cast<std::size_t>(t)];
    if (zt.rows() != B || zt.cols() != static_cast<Index>(c.input_dim)) throw ShapeError("surrogate: bad z row shape");
    hs = masked_update(hs, gru_step(p, "surr/gru", zt, hs), tape.constant(mask.col(t)));
    states.push_back(hs);
  }
  Var pooled = nn::attention_pool(states, p["surr/attn/Q"], mask);
  Var scan = nn::tanh(nn::add_row(nn::matmul(tape.constant(features), p["surr/scan/W"]), p["surr/scan/b"]));
  // Text enters only through its agreement with the scan: ctx_i^T A_i scan.
  Var u = nn::tanh(nn::add_row(nn::matmul(scan, p["surr/mlp/W"]), p["surr/mlp/b"]));
  Var ones = tape.constant(Matrix::Ones(scan.cols(), 1));
  std::vector<Var> logits;
  for (std::size_t i = 0; i < c.num_labels; ++i) {
    Var ctx = nn::slice_cols(pooled, static_cast<Index>(i) * h, h);
    Var agree = nn::matmul(nn::mul(nn::matmul(ctx, p["surr/agree/" + label_key(i)]), scan), ones);
    logits.push_back(nn::add(nn::matmul(u, p["surr/out/" + label_key(i) + "/w"]), agree));
  }
  return nn::sigmoid(nn::add_row(nn::concat_cols(logits), p["surr/out/b"]));
}

Var surrogate_nll(Tape& tape, const Bound& p, const SurrogateConfig& c, const Matrix& features,
                  std::span<const Var> z_rows, const Matrix& mask, const Matrix& targets) {
  Var q = surrogate_forward(tape, p, c, features, z_rows, mask);
  const double n = static_cast<double>(targets.rows()) * static_cast<double>(targets.cols());
  return nn::scale(nn::binary_xent_sum(q, targets, kProbabilityClamp), 1.0 / n);
}

std::pair<std::vector<Var>, Matrix> embeddings_to_tape(Tape& tape, std::span<const GuidanceEmbedding* const> z,
                                                        std::size_t input_dim) {
  Index T = 1;
  for (const auto* e : z) {
    if (e->z.cols() != static_cast<Index>(input_dim)) throw ShapeError("surrogate: z width mismatch");
    T = std::max(T, e->z.rows());
  }
  const auto B = static_cast<Index>(z.size());
  Matrix mask = Matrix::Zero(B, T);
  std::vector<Var> rows;
  for (Index t = 0; t < T; ++t) {
    Matrix r = Matrix::Zero(B, static_cast<Index>(input_dim));
    for (Index b = 0; b < B; ++b) {
      const auto* e = z[static_cast<std::size_t>(b)];
      if (t < e->z.rows()) r.row(b) = e->z.row(t);
      if (t < static_cast<Index>(e->length)) mask(b, t) = 1.0;
    }
    rows.push_back(tape.constant(std::move(r)));
  }
  return {std::move(rows), std::move(mask)};
}

Matrix surrogate_predict(const Surrogate& surr, const Matrix& features, std::span<const GuidanceEmbedding> z) {
  Tape tape(false);
  Bound p(tape, surr.params, false);
  std::vector<const GuidanceEmbedding*> ptrs;
  for (const auto& e : z) ptrs.push_back(&e);
  auto [rows, mask] = embeddings_to_tape(tape, ptrs, surr.config.input_dim);
  return surrogate_forward(tape, p, surr.config, features, rows, mask).value();
}

GuidanceEmbedding surrogate_view(const Surrogate& surr, const text::TokenSequence& tokens) {
  const auto& c = surr.config;
  GuidanceEmbedding g;
  g.z = embed_tokens(surr.params.at("surr/embed"), tokens, c.max_len, c.bos, c.eos, c.pad, &g.length);
  return g;
}

Eigen::VectorXd surrogate_predict(const Surrogate& surr, const Eigen::VectorXd& features, const GuidanceEmbedding& z) {
  const GuidanceEmbedding one[] = {z};
  return surrogate_predict(surr, Matrix(features.transpose()), one).row(0).transpose();
}

double surrogate_nll(const Surrogate& surr, std::span<const SurrogateExample> batch) {
  if (batch.empty()) throw DataError("surrogate_nll: empty batch");
  Tape tape(false);
  Bound p(tape, surr.params, false);
  std::vector<const GuidanceEmbedding*> ptrs;
  Matrix X(static_cast<Index>(batch.size()), batch.front().features.size());
  Matrix Q(static_cast<Index>(batch.size()), static_cast<Index>(surr.config.num_labels));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ptrs.push_back(&batch[b].z);
    X.row(static_cast<Index>(b)) = batch[b].features.transpose();
    Q.row(static_cast<Index>(b)) = batch[b].quality.transpose();
  }
  auto [rows, mask] = embeddings_to_tape(tape, ptrs, surr.config.input_dim);
  return surrogate_nll(tape, p, surr.config, X, rows, mask, Q).scalar();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

std::filesystem::path arch_path(const std::filesystem::path& file) {
  auto p = file;
  p.replace_extension(".arch.json");
  return p;
}

namespace {

void write_json(const std::filesystem::path& file, const nlohmann::ordered_json& j) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot read " + file.string());
  return nlohmann::json::parse(in);
}

}  // namespace

void save_generator(const Generator& m, const std::filesystem::path& file) {
  const auto& c = m.config;
  write_json(arch_path(file), {{"model", "generator"},
                               {"vocab_size", c.vocab_size},
                               {"feature_dim", c.feature_dim},
                               {"embed_dim", c.embed_dim},
                               {"hidden_dim", c.hidden_dim},
                               {"max_decode_len", c.max_decode_len},
                               {"train_horizon", c.train_horizon},
                               {"bos", c.bos},
                               {"eos", c.eos},
                               {"pad", c.pad}});
  nn::save_params(m.params, file);
}

Generator load_generator(const std::filesystem::path& file) {
  const auto j = read_json(arch_path(file));
  Generator m;
  auto& c = m.config;
  c.vocab_size = j.at("vocab_size");
  c.feature_dim = j.at("feature_dim");
  c.embed_dim = j.at("embed_dim");
  c.hidden_dim = j.at("hidden_dim");
  c.max_decode_len = j.at("max_decode_len");
  c.train_horizon = j.at("train_horizon");
  c.bos = j.at("bos");
  c.eos = j.at("eos");
  c.pad = j.at("pad");
  m.params = nn::load_params(file);
  return m;
}

void save_human(const Human& m, const std::filesystem::path& file) {
  const auto& c = m.config;
  write_json(arch_path(file), {{"model", "human"},
                               {"vocab_size", c.vocab_size},
                               {"feature_dim", c.feature_dim},
                               {"num_labels", c.num_labels},
                               {"embed_dim", c.embed_dim},
                               {"hidden_dim", c.hidden_dim},
                               {"scan_dim", c.scan_dim},
                               {"bos", c.bos},
                               {"eos", c.eos},
                               {"pad", c.pad}});
  nn::save_params(m.params, file);
}

Human load_human(const std::filesystem::path& file) {
  const auto j = read_json(arch_path(file));
  Human m;
  auto& c = m.config;
  c.vocab_size = j.at("vocab_size");
  c.feature_dim = j.at("feature_dim");
  c.num_labels = j.at("num_labels");
  c.embed_dim = j.at("embed_dim");
  c.hidden_dim = j.at("hidden_dim");
  c.scan_dim = j.at("scan_dim");
  c.bos = j.at("bos");
  c.eos = j.at("eos");
  c.pad = j.at("pad");
  m.params = nn::load_params(file);
  return m;
}

void save_surrogate(const Surrogate& m, const std::filesystem::path& file) {
  const auto& c = m.config;
  write_json(arch_path(file), {{"model", "surrogate"},
                               {"input_dim", c.input_dim},
                               {"vocab_size", c.vocab_size},
                               {"feature_dim", c.feature_dim},
                               {"num_labels", c.num_labels},
                               {"max_len", c.max_len},
                               {"hidden_dim", c.hidden_dim},
                               {"scan_dim", c.scan_dim},
                               {"mlp_dim", c.mlp_dim},
                               {"bos", c.bos},
                               {"eos", c.eos},
                               {"pad", c.pad}});
  nn::save_params(m.params, file);
}

Surrogate load_surrogate(const std::filesystem::path& file) {
  const auto j = read_json(arch_path(file));
  Surrogate m;
  auto& c = m.config;
  c.input_dim = j.at("input_dim");
  c.vocab_size = j.at("vocab_size");
  c.feature_dim = j.at("feature_dim");
  c.num_labels = j.at("num_labels");
  c.max_len = j.at("max_len");
  c.hidden_dim = j.at("hidden_dim");
  c.scan_dim = j.at("scan_dim");
  c.mlp_dim = j.at("mlp_dim");
  c.bos = j.at("bos");
  c.eos = j.at("eos");
  c.pad = j.at("pad");
  m.params = nn::load_params(file);
  return m;
}

}  // namespace slog::models

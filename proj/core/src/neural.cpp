#include "slog/neural.hpp"

#include "slog/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace slog::nn {

namespace {

std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamTree
// ---------------------------------------------------------------------------

void ParamTree::add(std::string path, Matrix value) {
  if (entries_.contains(path)) throw Error("duplicate parameter path: " + path);
  entries_.emplace(std::move(path), std::move(value));
}

bool ParamTree::contains(std::string_view path) const { return entries_.find(path) != entries_.end(); }

Matrix& ParamTree::at(std::string_view path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw Error("unknown parameter path: " + std::string(path));
  return it->second;
}

const Matrix& ParamTree::at(std::string_view path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw Error("unknown parameter path: " + std::string(path));
  return it->second;
}

std::size_t ParamTree::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, m] : entries_) n += static_cast<std::size_t>(m.size());
  return n;
}

bool ParamTree::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const auto& kv) { return kv.second.allFinite(); });
}

bool ParamTree::same_shapes(const ParamTree& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto it = other.entries_.begin();
  for (const auto& [path, m] : entries_) {
    if (path != it->first || m.rows() != it->second.rows() || m.cols() != it->second.cols()) return false;
    ++it;
  }
  return true;
}

ParamTree ParamTree::zeros_like() const {
  ParamTree out;
  for (const auto& [path, m] : entries_) out.add(path, Matrix::Zero(m.rows(), m.cols()));
  return out;
}

bool operator==(const ParamTree& a, const ParamTree& b) {
  if (!a.same_shapes(b)) return false;
  auto it = b.entries_.begin();
  for (const auto& [_, m] : a.entries_) {
    const Matrix& o = it->second;
    // memcmp-style comparison: distinguishes -0.0 from 0.0 and treats equal NaN payloads as equal.
    if (m.size() > 0 &&
        std::memcmp(m.data(), o.data(), sizeof(double) * static_cast<std::size_t>(m.size())) != 0) {
      return false;
    }
    ++it;
  }
  return true;
}

std::string params_to_json(const ParamTree& params) {
  nlohmann::ordered_json doc;
  doc["format"] = "slog-params";
  doc["version"] = 1;
  nlohmann::ordered_json shapes = nlohmann::ordered_json::object();
  nlohmann::ordered_json values = nlohmann::ordered_json::object();
  for (const auto& [path, m] : params) {
    shapes[path] = {m.rows(), m.cols()};
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Index r = 0; r < m.rows(); ++r) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(std::move(row));
    }
    values[path] = std::move(rows);
  }
  doc["shapes"] = std::move(shapes);
  doc["values"] = std::move(values);
  return doc.dump();
}

ParamTree params_from_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (doc.value("format", "") != "slog-params") throw DataError("checkpoint has wrong format tag");
  ParamTree out;
  const auto& shapes = doc.at("shapes");
  const auto& values = doc.at("values");
  for (auto it = shapes.begin(); it != shapes.end(); ++it) {
    const Index rows = it.value().at(0).get<Index>();
    const Index cols = it.value().at(1).get<Index>();
    const auto& v = values.at(it.key());
    if (static_cast<Index>(v.size()) != rows) throw DataError("checkpoint row count mismatch at " + it.key());
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const auto& row = v[static_cast<std::size_t>(r)];
      if (static_cast<Index>(row.size()) != cols) throw DataError("checkpoint column count mismatch at " + it.key());
      for (Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    out.add(it.key(), std::move(m));
  }
  return out;
}

void save_params(const ParamTree& params, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + file.string());
  out << params_to_json(params) << '\n';
}

ParamTree load_params(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return params_from_json(buf.str());
}

// ---------------------------------------------------------------------------
// Initializer
// ---------------------------------------------------------------------------

Initializer::Initializer(std::uint64_t seed) : engine_(seed) {}

Matrix Initializer::weight(Index rows, Index cols) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = dist(engine_);
  return m;
}

Matrix Initializer::normal(Index rows, Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = dist(engine_);
  return m;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), record_, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  if (record_) {
    for (const Var& p : parents) {
      if (p.tape != this) throw Error("operation mixes values from different tapes");
      needs = needs || nodes_[p.id].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(backward) : nullptr});
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(Var target, const Matrix& grad) { accumulate_expr(target, grad); }

void Tape::backward(Var root) {
  if (!record_) throw Error("backward() on a tape that does not record");
  Node& r = nodes_[root.id];
  if (r.value.rows() != 1 || r.value.cols() != 1) throw ShapeError("backward() root must be 1x1");
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) {
      // Moving the gradient out keeps it alive while the closure writes to
      // other nodes; it is restored afterwards so grad() still reports it.
      Matrix g = std::move(n.grad);
      n.backward(g);
      nodes_[i].grad = std::move(g);
    }
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.rows()) throw ShapeError("matmul: " + shape_str(A) + " * " + shape_str(B));
  Tape& t = *a.tape;
  const Var parents[] = {a, b};
  return t.push(A * B, parents, [&t, a, b](const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate_expr(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate_expr(b, t.value(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tape& t = *a.tape;
  const Var parents[] = {a, b};
  return t.push(a.value() + b.value(), parents, [&t, a, b](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tape& t = *a.tape;
  const Var parents[] = {a, b};
  return t.push(a.value() - b.value(), parents, [&t, a, b](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate_expr(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tape& t = *a.tape;
  const Var parents[] = {a, b};
  return t.push(a.value().cwiseProduct(b.value()), parents, [&t, a, b](const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate_expr(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate_expr(b, g.cwiseProduct(t.value(a)));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const Var parents[] = {a};
  return t.push(a.value() * s, parents, [&t, a, s](const Matrix& g) { t.accumulate_expr(a, g * s); });
}

Var add_row(Var a, Var row) {
  const Matrix& A = a.value();
  const Matrix& R = row.value();
  if (R.rows() != 1 || R.cols() != A.cols()) throw ShapeError("add_row: " + shape_str(A) + " + " + shape_str(R));
  Tape& t = *a.tape;
  const Var parents[] = {a, row};
  Matrix out = A.rowwise() + R.row(0);
  return t.push(std::move(out), parents, [&t, a, row](const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate_expr(row, g.colwise().sum());
  });
}

Var row_scale(Var a, Var column) {
  const Matrix& A = a.value();
  const Matrix& C = column.value();
  if (C.cols() != 1 || C.rows() != A.rows()) throw ShapeError("row_scale: " + shape_str(A) + " by " + shape_str(C));
  Tape& t = *a.tape;
  const Var parents[] = {a, column};
  Matrix out = C.col(0).asDiagonal() * A;
  return t.push(std::move(out), parents, [&t, a, column](const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate_expr(a, t.value(column).col(0).asDiagonal() * g);
    if (t.requires_grad(column)) t.accumulate_expr(column, g.cwiseProduct(t.value(a)).rowwise().sum());
  });
}

Var one_minus(Var a) {
  Tape& t = *a.tape;
  const Var parents[] = {a};
  Matrix out = (1.0 - a.value().array()).matrix();
  return t.push(std::move(out), parents, [&t, a](const Matrix& g) { t.accumulate_expr(a, -g); });
}

Var tanh(Var a) {
  Tape& t = *a.tape;
  const Var parents[] = {a};
  Matrix out = a.value().array().tanh().matrix();
  const std::size_t self = t.size();
  return t.push(std::move(out), parents, [&t, a, self](const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    t.accumulate_expr(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  const Var parents[] = {a};
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  const std::size_t self = t.size();
  return t.push(std::move(out), parents, [&t, a, self](const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    t.accumulate_expr(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var softmax_rows(Var a) {
  const Matrix& A = a.value();
  Matrix out(A.rows(), A.cols());
  for (Index r = 0; r < A.rows(); ++r) {
    const double m = A.row(r).maxCoeff();
    out.row(r) = (A.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  Tape& t = *a.tape;
  const Var parents[] = {a};
  const std::size_t self = t.size();
  return t.push(std::move(out), parents, [&t, a, self](const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    Matrix ga = y.cwiseProduct(g - dots.replicate(1, g.cols()));
    t.accumulate(a, ga);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  Tape& t = *parts[0].tape;
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), parts, [&t, ps](const Matrix& g) {
    Index off = 0;
    for (const Var& p : ps) {
      const Index c = t.value(p).cols();
      if (t.requires_grad(p)) t.accumulate_expr(p, g.middleCols(off, c));
      off += c;
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_cols(Var a, Index start, Index count) {
  const Matrix& A = a.value();
  if (start < 0 || count < 0 || start + count > A.cols()) throw ShapeError("slice_cols: out of range");
  Tape& t = *a.tape;
  const Var parents[] = {a};
  return t.push(A.middleCols(start, count), parents, [&t, a, start, count](const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& T = table.value();
  Matrix out(static_cast<Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows()) throw ShapeError("gather_rows: id out of range");
    out.row(static_cast<Index>(i)) = T.row(ids[i]);
  }
  Tape& t = *table.tape;
  const Var parents[] = {table};
  std::vector<int> idv(ids.begin(), ids.end());
  return t.push(std::move(out), parents, [&t, table, idv](const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(table).rows(), t.value(table).cols());
    for (std::size_t i = 0; i < idv.size(); ++i) full.row(idv[i]) += g.row(static_cast<Index>(i));
    t.accumulate(table, full);
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  const Var parents[] = {a};
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), parents, [&t, a](const Matrix& g) {
    t.accumulate_expr(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
  });
}

Var mean_all(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean_all: empty input");
  Tape& t = *a.tape;
  const Var parents[] = {a};
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return t.push(std::move(out), parents, [&t, a, n](const Matrix& g) {
    t.accumulate_expr(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0) / n));
  });
}

Var softmax_xent_sum(Var logits, std::span<const int> targets, std::span<const double> mask) {
  const Matrix& L = logits.value();
  if (static_cast<Index>(targets.size()) != L.rows() || static_cast<Index>(mask.size()) != L.rows()) {
    throw ShapeError("softmax_xent_sum: targets/mask length must equal rows");
  }
  Matrix probs(L.rows(), L.cols());
  double total = 0.0;
  for (Index r = 0; r < L.rows(); ++r) {
    const double m = L.row(r).maxCoeff();
    probs.row(r) = (L.row(r).array() - m).exp().matrix();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    if (mask[static_cast<std::size_t>(r)] != 0.0) {
      const int y = targets[static_cast<std::size_t>(r)];
      if (y < 0 || y >= L.cols()) throw ShapeError("softmax_xent_sum: target out of range");
      total += mask[static_cast<std::size_t>(r)] * (m + std::log(z) - L(r, y));
    }
  }
  Tape& t = *logits.tape;
  const Var parents[] = {logits};
  Matrix out(1, 1);
  out(0, 0) = total;
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<double> mv(mask.begin(), mask.end());
  return t.push(std::move(out), parents,
                [&t, logits, probs = std::move(probs), tv = std::move(tv), mv = std::move(mv)](const Matrix& g) {
                  Matrix ga = probs;
                  for (Index r = 0; r < ga.rows(); ++r) {
                    const double w = mv[static_cast<std::size_t>(r)];
                    if (w == 0.0) {
                      ga.row(r).setZero();
                    } else {
                      ga(r, tv[static_cast<std::size_t>(r)]) -= 1.0;
                      ga.row(r) *= w * g(0, 0);
                    }
                  }
                  t.accumulate(logits, ga);
                });
}

Var binary_xent_sum(Var p, const Matrix& targets, double clamp) {
  const Matrix& P = p.value();
  require_same_shape("binary_xent_sum", P, targets);
  double total = 0.0;
  Matrix dp(P.rows(), P.cols());
  for (Index r = 0; r < P.rows(); ++r) {
    for (Index c = 0; c < P.cols(); ++c) {
      const double raw = P(r, c);
      const double pc = std::clamp(raw, clamp, 1.0 - clamp);
      const double q = targets(r, c);
      total -= q * std::log(pc) + (1.0 - q) * std::log(1.0 - pc);
      dp(r, c) = (raw < clamp || raw > 1.0 - clamp) ? 0.0 : (-q / pc + (1.0 - q) / (1.0 - pc));
    }
  }
  Tape& t = *p.tape;
  const Var parents[] = {p};
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.push(std::move(out), parents,
                [&t, p, dp = std::move(dp)](const Matrix& g) { t.accumulate_expr(p, dp * g(0, 0)); });
}

Var attention_pool(std::span<const Var> states, Var queries, const Matrix& mask) {
  const Index T = static_cast<Index>(states.size());
  if (T == 0) throw ShapeError("attention_pool: no states");
  const Matrix& Q = queries.value();
  const Index B = states[0].rows();
  const Index h = states[0].cols();
  const Index heads = Q.rows();
  if (Q.cols() != h) throw ShapeError("attention_pool: query width must equal state width");
  if (mask.rows() != B || mask.cols() != T) throw ShapeError("attention_pool: mask must be B x T");
  for (const Var& s : states) {
    if (s.rows() != B || s.cols() != h) throw ShapeError("attention_pool: ragged states");
  }

  // weights[k] is (B x T), the attention distribution of head k.
  std::vector<Matrix> weights(static_cast<std::size_t>(heads), Matrix::Zero(B, T));
  std::vector<Matrix> scores(static_cast<std::size_t>(T));
  for (Index t = 0; t < T; ++t) scores[static_cast<std::size_t>(t)] = states[static_cast<std::size_t>(t)].value() * Q.transpose();

  Matrix out = Matrix::Zero(B, heads * h);
  for (Index k = 0; k < heads; ++k) {
    Matrix& A = weights[static_cast<std::size_t>(k)];
    for (Index b = 0; b < B; ++b) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index t = 0; t < T; ++t) {
        if (mask(b, t) != 0.0) mx = std::max(mx, scores[static_cast<std::size_t>(t)](b, k));
      }
      if (!std::isfinite(mx)) continue;
      double z = 0.0;
      for (Index t = 0; t < T; ++t) {
        if (mask(b, t) != 0.0) {
          A(b, t) = std::exp(scores[static_cast<std::size_t>(t)](b, k) - mx);
          z += A(b, t);
        }
      }
      A.row(b) /= z;
    }
    for (Index t = 0; t < T; ++t) {
      out.middleCols(k * h, h) += A.col(t).asDiagonal() * states[static_cast<std::size_t>(t)].value();
    }
  }

  Tape& tp = *queries.tape;
  std::vector<Var> parents(states.begin(), states.end());
  parents.push_back(queries);
  std::vector<Var> sv(states.begin(), states.end());
  return tp.push(std::move(out), parents,
                 [&tp, sv = std::move(sv), queries, weights = std::move(weights), B, h, heads, T](const Matrix& g) {
                   const Matrix& Qv = tp.value(queries);
                   std::vector<Matrix> dH(static_cast<std::size_t>(T), Matrix::Zero(B, h));
                   Matrix dQ = Matrix::Zero(heads, h);
                   Matrix da(B, T);
                   for (Index k = 0; k < heads; ++k) {
                     const Matrix& A = weights[static_cast<std::size_t>(k)];
                     const auto Gk = g.middleCols(k * h, h);
                     for (Index t = 0; t < T; ++t) {
                       da.col(t) = Gk.cwiseProduct(tp.value(sv[static_cast<std::size_t>(t)])).rowwise().sum();
                     }
                     const Eigen::VectorXd expect = A.cwiseProduct(da).rowwise().sum();
                     const Matrix ds = A.cwiseProduct(da - expect.replicate(1, T));
                     for (Index t = 0; t < T; ++t) {
                       const Matrix& H = tp.value(sv[static_cast<std::size_t>(t)]);
                       dH[static_cast<std::size_t>(t)] += A.col(t).asDiagonal() * Gk;
                       dH[static_cast<std::size_t>(t)] += ds.col(t) * Qv.row(k);
                       dQ.row(k) += ds.col(t).transpose() * H;
                     }
                   }
                   for (Index t = 0; t < T; ++t) {
                     if (tp.requires_grad(sv[static_cast<std::size_t>(t)])) tp.accumulate(sv[static_cast<std::size_t>(t)], dH[static_cast<std::size_t>(t)]);
                   }
                   if (tp.requires_grad(queries)) tp.accumulate(queries, dQ);
                 });
}

// ---------------------------------------------------------------------------
// Bound
// ---------------------------------------------------------------------------

Bound::Bound(Tape& tape, const ParamTree& params, bool trainable) {
  for (const auto& [path, m] : params) {
    vars_.emplace(path, trainable ? tape.variable(m) : tape.constant(m));
  }
}

Var Bound::operator[](std::string_view path) const {
  auto it = vars_.find(path);
  if (it == vars_.end()) throw Error("parameter not bound: " + std::string(path));
  return it->second;
}

ParamTree Bound::grads(const Tape& tape) const {
  ParamTree out;
  for (const auto& [path, v] : vars_) out.add(path, tape.grad(v));
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

OptimizerState make_optimizer(const ParamTree& params, const AdamConfig& config) {
  return OptimizerState{config, params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ParamTree& params, const ParamTree& grads, OptimizerState& state) {
  if (!params.same_shapes(grads) || !params.same_shapes(state.first_moment) ||
      !params.same_shapes(state.second_moment)) {
    throw ShapeError("adam_step: parameter, gradient and moment trees must share paths and shapes");
  }
  if (!grads.all_finite()) throw Error("adam_step: non-finite gradient");
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  auto g = grads.begin();
  auto m = state.first_moment.begin();
  auto v = state.second_moment.begin();
  for (auto& [path, p] : params) {
    m->second = c.beta1 * m->second + (1.0 - c.beta1) * g->second;
    v->second = (c.beta2 * v->second.array() + (1.0 - c.beta2) * g->second.array().square()).matrix();
    const auto mhat = m->second.array() / bc1;
    const auto vhat = v->second.array() / bc2;
    p.array() -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
    ++g;
    ++m;
    ++v;
  }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const LossFn& loss, const ParamTree& params, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw Error("grad_check: eps must be positive");
  ParamTree analytic;
  const double f0 = loss(params, &analytic);
  if (!std::isfinite(f0)) throw Error("grad_check: loss is not finite");
  if (!analytic.same_shapes(params)) throw ShapeError("grad_check: gradient tree does not match parameters");

  struct Coord {
    std::string path;
    Index r, c;
  };
  std::vector<Coord> coords;
  for (const auto& [path, m] : params) {
    if (!options.only_prefixes.empty() &&
        std::none_of(options.only_prefixes.begin(), options.only_prefixes.end(),
                     [&](const std::string& pre) { return path.starts_with(pre); })) {
      continue;
    }
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) coords.push_back({path, r, c});
  }
  if (coords.size() > options.max_coordinates) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coordinates);
  }

  GradCheckResult result;
  ParamTree work = params;
  for (const Coord& co : coords) {
    double& x = work.at(co.path)(co.r, co.c);
    const double saved = x;
    x = saved + options.eps;
    const double fp = loss(work, nullptr);
    x = saved - options.eps;
    const double fm = loss(work, nullptr);
    x = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("grad_check: loss is not finite");
    const double fd = (fp - fm) / (2.0 * options.eps);
    const double ga = analytic.at(co.path)(co.r, co.c);
    const double err = std::abs(ga - fd) / std::max(1e-8, std::abs(ga) + std::abs(fd));
    if (result.coordinates_checked == 0 || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_path = co.path;
      result.worst_row = co.r;
      result.worst_col = co.c;
    }
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace slog::nn

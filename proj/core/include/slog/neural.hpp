#pragma once

// Dense parameter containers, a reverse-mode gradient tape over 2-D
// matrices, the Adam optimizer and a finite-difference gradient checker.

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace slog::nn {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// ParamTree
// ---------------------------------------------------------------------------

/// Named collection of dense arrays. Iteration order is the lexicographic
/// order of the paths, which makes every traversal deterministic.
class ParamTree {
 public:
  using Map = std::map<std::string, Matrix, std::less<>>;

  void add(std::string path, Matrix value);
  [[nodiscard]] bool contains(std::string_view path) const;
  Matrix& at(std::string_view path);
  const Matrix& at(std::string_view path) const;

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t num_scalars() const;
  [[nodiscard]] bool all_finite() const;
  [[nodiscard]] bool same_shapes(const ParamTree& other) const;
  [[nodiscard]] ParamTree zeros_like() const;

  /// Bitwise equality of paths, shapes and values.
  friend bool operator==(const ParamTree& a, const ParamTree& b);

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  Map entries_;
};

/// Checkpoint format: {"format", "version", "shapes": {path: [rows, cols]},
/// "values": {path: [[row0...], [row1...]]}}.
std::string params_to_json(const ParamTree& params);
ParamTree params_from_json(std::string_view text);
void save_params(const ParamTree& params, const std::filesystem::path& file);
ParamTree load_params(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Deterministic initializer. Weights are uniform in [-a, a] with
/// a = sqrt(6 / (fan_in + fan_out)); biases are zero.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed);
  Matrix weight(Index rows, Index cols);
  Matrix normal(Index rows, Index cols, double stddev);
  static Matrix bias(Index cols) { return Matrix::Zero(1, cols); }

 private:
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(const Matrix& grad)>;

  /// A tape constructed with record=false stores values only; backward()
  /// is then unavailable.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Records an operation. `backward` receives the gradient of the output
  /// and must call accumulate() for each parent that requires a gradient.
  Var push(Matrix value, std::span<const Var> parents, Backward backward);

  [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  void accumulate(Var target, const Matrix& grad);
  template <typename Expr>
  void accumulate_expr(Var target, const Expr& expr);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to all leaves.
  void backward(Var root);

  [[nodiscard]] const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Accumulated gradient; a zero matrix of the value's shape when none.
  [[nodiscard]] Matrix grad(Var v) const;
  [[nodiscard]] bool recording() const { return record_; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
  bool record_;
};

template <typename Expr>
void Tape::accumulate_expr(Var target, const Expr& expr) {
  Node& n = nodes_[target.id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = expr;
  } else {
    n.grad += expr;
  }
}

// Elementwise and linear-algebra operations. All shapes are checked.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);          // a (n x m) + broadcast row (1 x m)
Var row_scale(Var a, Var column);     // a (n x m) * broadcast column (n x 1)
Var one_minus(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(Var a, Index start, Index count);
Var gather_rows(Var table, std::span<const int> ids);
Var sum_all(Var a);
Var mean_all(Var a);

/// Sum over rows with mask[r] != 0 of -log softmax(logits)[r, target[r]].
Var softmax_xent_sum(Var logits, std::span<const int> targets, std::span<const double> mask);

/// Sum over entries of the binary cross-entropy between probabilities p and
/// targets q, with p clamped to [clamp, 1 - clamp].
Var binary_xent_sum(Var p, const Matrix& targets, double clamp);

/// Masked dot-product attention pooling, one query per output head.
/// `states` holds T matrices of shape (B x h); `queries` is (heads x h);
/// `mask` is (B x T) with nonzero entries for valid positions. The result
/// is (B x heads*h): head k occupies columns [k*h, (k+1)*h). A row with no
/// valid position pools to zero.
Var attention_pool(std::span<const Var> states, Var queries, const Matrix& mask);

// ---------------------------------------------------------------------------
// Binding parameters to a tape
// ---------------------------------------------------------------------------

/// Parameters placed on a tape, addressable by path.
class Bound {
 public:
  Bound() = default;
  Bound(Tape& tape, const ParamTree& params, bool trainable);

  [[nodiscard]] Var operator[](std::string_view path) const;
  [[nodiscard]] ParamTree grads(const Tape& tape) const;

 private:
  std::map<std::string, Var, std::less<>> vars_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  ParamTree first_moment;
  ParamTree second_moment;
  std::int64_t step = 0;
};

OptimizerState make_optimizer(const ParamTree& params, const AdamConfig& config);

/// One bias-corrected Adam update. Throws ShapeError on mismatched trees and
/// Error on non-finite gradients.
void adam_step(ParamTree& params, const ParamTree& grads, OptimizerState& state);

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Evaluates a scalar loss; when `grads` is non-null it must also be filled
/// with the analytic gradient (same paths and shapes as the input tree).
using LossFn = std::function<double(const ParamTree& params, ParamTree* grads)>;

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t max_coordinates = 256;  // all coordinates when the tree is smaller
  std::uint64_t seed = 7;
  std::vector<std::string> only_prefixes;  // empty: every path is eligible
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::string worst_path;
  Index worst_row = 0;
  Index worst_col = 0;
};

GradCheckResult grad_check(const LossFn& loss, const ParamTree& params,
                           const GradCheckOptions& options = {});

}  // namespace slog::nn

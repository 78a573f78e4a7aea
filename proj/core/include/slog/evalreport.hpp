#pragma once

// Text-side and decision-side evaluation of each arm, and report emission.

#include "slog/models.hpp"
#include "slog/synthworld.hpp"
#include "slog/textmetrics.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace slog::eval {

/// Positive-class metrics; ambiguous counts as not positive. Precision,
/// recall and F1 are 0 when their denominator is 0.
struct LabelMetrics {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  friend bool operator==(const LabelMetrics&, const LabelMetrics&) = default;
};

struct DecisionMetrics {
  std::vector<LabelMetrics> per_label;
  LabelMetrics micro;  // from counts pooled over labels and instances
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  friend bool operator==(const DecisionMetrics&, const DecisionMetrics&) = default;
};

LabelMetrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn);

DecisionMetrics decision_metrics(std::span<const world::DecisionVector> predicted,
                                 std::span<const world::DecisionVector> truth);

struct TextEval {
  text::BleuReport bleu;
  double quality_mean = 0.0;  // mean over instances of (1/d) sum_i q-hat_i, in [0, 1]
  double quality_sum = 0.0;   // d * quality_mean
};

struct EvalReport {
  std::string arm;
  std::size_t num_instances = 0;
  std::size_t num_labels = 0;
  text::BleuReport bleu;
  double quality_mean = 0.0;
  double quality_sum = 0.0;
  DecisionMetrics decisions;
};

/// Greedy-decodes every test instance; BLEU against the full findings and
/// surrogate quality of the hard guidance embedding.
TextEval evaluate_text(const models::Generator& gen, const models::Surrogate& surr,
                       std::span<const world::Instance> test);

DecisionMetrics evaluate_decisions(const models::Generator& gen, const models::Human& human,
                                   std::span<const world::Instance> test);

EvalReport evaluate_arm(std::string arm, const models::Generator& gen, const models::Surrogate& surr,
                        const models::Human& human, std::span<const world::Instance> test);

inline constexpr int kReportSchemaVersion = 1;

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(std::string_view json);

/// Writes report.md and report.json. `context` is embedded verbatim in the
/// JSON under "context" (must be a JSON object or null).
void emit_report(std::span<const EvalReport> reports, const std::filesystem::path& dir,
                 const std::string& context_json = "null");

std::string render_markdown(std::span<const EvalReport> reports);

}  // namespace slog::eval

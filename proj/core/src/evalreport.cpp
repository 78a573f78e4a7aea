#include "slog/evalreport.hpp"

#include "slog/error.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace slog::eval {

namespace {

using nn::Index;
using nn::Matrix;

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::vector<int> content_ids(const std::vector<int>& ids, const models::GeneratorConfig& c) {
  std::vector<int> out;
  for (int id : ids)
    if (id != c.bos && id != c.eos && id != c.pad) out.push_back(id);
  return out;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

nlohmann::ordered_json label_json(const LabelMetrics& m) {
  return {{"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

LabelMetrics label_from_json(const nlohmann::json& j) {
  LabelMetrics m;
  m.tp = j.at("tp");
  m.fp = j.at("fp");
  m.fn = j.at("fn");
  m.precision = j.at("precision");
  m.recall = j.at("recall");
  m.f1 = j.at("f1");
  return m;
}

nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["arm"] = r.arm;
  j["num_instances"] = r.num_instances;
  j["num_labels"] = r.num_labels;
  j["bleu"] = {r.bleu.bleu[0], r.bleu.bleu[1], r.bleu.bleu[2], r.bleu.bleu[3]};
  j["avg_length"] = r.bleu.avg_length;
  j["quality_mean"] = r.quality_mean;
  j["quality_sum"] = r.quality_sum;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& m : r.decisions.per_label) per.push_back(label_json(m));
  j["decisions"] = {{"per_label", per},
                    {"macro", {{"precision", r.decisions.macro_precision},
                               {"recall", r.decisions.macro_recall},
                               {"f1", r.decisions.macro_f1}}},
                    {"micro", label_json(r.decisions.micro)}};
  return j;
}

}  // namespace

LabelMetrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  LabelMetrics m{tp, fp, fn};
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  return m;
}

DecisionMetrics decision_metrics(std::span<const world::DecisionVector> predicted,
                                 std::span<const world::DecisionVector> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("decision_metrics: prediction and truth counts differ");
  const std::size_t d = truth.empty() ? 0 : truth.front().size();
  std::vector<std::size_t> tp(d, 0), fp(d, 0), fn(d, 0);
  for (std::size_t n = 0; n < truth.size(); ++n) {
    if (predicted[n].size() != d || truth[n].size() != d) throw ShapeError("decision_metrics: ragged label vectors");
    for (std::size_t i = 0; i < d; ++i) {
      const bool p = predicted[n][i] == world::Decision::kPositive;
      const bool t = truth[n][i] == world::Decision::kPositive;
      tp[i] += p && t;
      fp[i] += p && !t;
      fn[i] += !p && t;
    }
  }
  DecisionMetrics out;
  std::size_t TP = 0, FP = 0, FN = 0;
  for (std::size_t i = 0; i < d; ++i) {
    out.per_label.push_back(metrics_from_counts(tp[i], fp[i], fn[i]));
    out.macro_precision += out.per_label.back().precision;
    out.macro_recall += out.per_label.back().recall;
    out.macro_f1 += out.per_label.back().f1;
    TP += tp[i];
    FP += fp[i];
    FN += fn[i];
  }
  if (d > 0) {
    out.macro_precision /= static_cast<double>(d);
    out.macro_recall /= static_cast<double>(d);
    out.macro_f1 /= static_cast<double>(d);
  }
  out.micro = metrics_from_counts(TP, FP, FN);
  return out;
}

TextEval evaluate_text(const models::Generator& gen, const models::Surrogate& surr,
                       std::span<const world::Instance> test) {
  if (test.empty()) throw DataError("evaluate_text: empty test set");
  const Matrix X = models::stack_features(std::vector<world::Instance>(test.begin(), test.end()));
  const auto decoded = models::decode_greedy(gen, X);
  std::vector<std::vector<int>> candidates;
  std::vector<std::vector<int>> references;
  std::vector<models::GuidanceEmbedding> zs;
  for (std::size_t n = 0; n < test.size(); ++n) {
    candidates.push_back(content_ids(decoded[n].tokens.ids, gen.config));
    references.push_back(content_ids(test[n].findings.ids, gen.config));
    zs.push_back(models::surrogate_view(surr, decoded[n].tokens));
  }
  TextEval out;
  out.bleu = text::corpus_bleu(candidates, references);
  const Matrix q = models::surrogate_predict(surr, X, zs);
  double total = 0.0;
  for (Index n = 0; n < q.rows(); ++n) total += q.row(n).mean();  // fixed instance order
  out.quality_mean = total / static_cast<double>(q.rows());
  out.quality_sum = static_cast<double>(q.cols()) * out.quality_mean;
  return out;
}

DecisionMetrics evaluate_decisions(const models::Generator& gen, const models::Human& human,
                                   std::span<const world::Instance> test) {
  const Matrix X = models::stack_features(std::vector<world::Instance>(test.begin(), test.end()));
  const auto decoded = models::decode_greedy(gen, X);
  std::vector<const text::TokenSequence*> tokens;
  for (const auto& g : decoded) tokens.push_back(&g.tokens);
  const auto decisions = models::human_decide(human, X, tokens);
  std::vector<world::DecisionVector> predicted;
  std::vector<world::DecisionVector> truth;
  for (std::size_t n = 0; n < test.size(); ++n) {
    predicted.push_back(decisions[n].decisions);
    truth.push_back(test[n].labels);
  }
  return decision_metrics(predicted, truth);
}

EvalReport evaluate_arm(std::string arm, const models::Generator& gen, const models::Surrogate& surr,
                        const models::Human& human, std::span<const world::Instance> test) {
  const TextEval t = evaluate_text(gen, surr, test);
  EvalReport r;
  r.arm = std::move(arm);
  r.num_instances = test.size();
  r.num_labels = surr.config.num_labels;
  r.bleu = t.bleu;
  r.quality_mean = t.quality_mean;
  r.quality_sum = t.quality_sum;
  r.decisions = evaluate_decisions(gen, human, test);
  return r;
}

std::string report_to_json(const EvalReport& r) { return report_json(r).dump(2); }

EvalReport report_from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  r.arm = j.at("arm").get<std::string>();
  r.num_instances = j.at("num_instances");
  r.num_labels = j.at("num_labels");
  const auto bleu = j.at("bleu").get<std::vector<double>>();
  if (bleu.size() != 4) throw DataError("report: bleu must hold four values");
  for (int n = 0; n < 4; ++n) r.bleu.bleu[n] = bleu[static_cast<std::size_t>(n)];
  r.bleu.avg_length = j.at("avg_length");
  r.quality_mean = j.at("quality_mean");
  r.quality_sum = j.at("quality_sum");
  const auto& d = j.at("decisions");
  for (const auto& m : d.at("per_label")) r.decisions.per_label.push_back(label_from_json(m));
  r.decisions.macro_precision = d.at("macro").at("precision");
  r.decisions.macro_recall = d.at("macro").at("recall");
  r.decisions.macro_f1 = d.at("macro").at("f1");
  r.decisions.micro = label_from_json(d.at("micro"));
  return r;
}

std::string render_markdown(std::span<const EvalReport> reports) {
  if (reports.empty()) throw Error("render_markdown: no reports");
  std::ostringstream md;
  md << "# Evaluation report\n\n## Guidance text\n\n";
  md << "| arm | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | avg length | quality (mean) | quality (sum) |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    md << "| " << r.arm;
    for (double b : r.bleu.bleu) md << " | " << fixed(b);
    md << " | " << fixed(r.bleu.avg_length, 2) << " | " << fixed(r.quality_mean) << " | " << fixed(r.quality_sum)
       << " |\n";
  }

  md << "\n## Downstream decisions (positive class)\n\n| label";
  for (const auto& r : reports) md << " | " << r.arm << " P | " << r.arm << " R | " << r.arm << " F1";
  md << " |\n|---";
  for (std::size_t a = 0; a < reports.size(); ++a) md << "|---|---|---";
  md << "|\n";
  const std::size_t d = reports.front().decisions.per_label.size();
  for (const auto& r : reports)
    if (r.decisions.per_label.size() != d) throw ShapeError("render_markdown: arms disagree on the label count");
  for (std::size_t i = 0; i < d; ++i) {
    md << "| f" << i + 1;
    for (const auto& r : reports) {
      const auto& m = r.decisions.per_label[i];
      md << " | " << fixed(m.precision) << " | " << fixed(m.recall) << " | " << fixed(m.f1);
    }
    md << " |\n";
  }
  md << "| macro";
  for (const auto& r : reports)
    md << " | " << fixed(r.decisions.macro_precision) << " | " << fixed(r.decisions.macro_recall) << " | "
       << fixed(r.decisions.macro_f1);
  md << " |\n| micro";
  for (const auto& r : reports)
    md << " | " << fixed(r.decisions.micro.precision) << " | " << fixed(r.decisions.micro.recall) << " | "
       << fixed(r.decisions.micro.f1);
  md << " |\n";
  return md.str();
}

void emit_report(std::span<const EvalReport> reports, const std::filesystem::path& dir,
                 const std::string& context_json) {
  if (reports.empty()) throw Error("emit_report: no reports");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["context"] = nlohmann::ordered_json::parse(context_json);
  nlohmann::ordered_json arms = nlohmann::ordered_json::array();
  for (const auto& r : reports) arms.push_back(report_json(r));
  j["arms"] = std::move(arms);

  std::ofstream md(dir / "report.md", std::ios::binary | std::ios::trunc);
  std::ofstream js(dir / "report.json", std::ios::binary | std::ios::trunc);
  if (!md || !js) throw Error("cannot write report files to " + dir.string());
  md << render_markdown(reports);
  js << j.dump(2) << '\n';
  if (!md || !js) throw Error("failed writing report files to " + dir.string());
}

}  // namespace slog::eval

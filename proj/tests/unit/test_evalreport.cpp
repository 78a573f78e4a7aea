#include "doctest.h"
#include "fixtures.hpp"

#include "slog/error.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace slog;
using world::Decision;

TEST_CASE("label metrics use zero for empty denominators") {
  const auto none = eval::metrics_from_counts(0, 0, 5);
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.f1 == 0.0);
  const auto m = eval::metrics_from_counts(3, 1, 2);
  CHECK(m.precision == doctest::Approx(0.75));
  CHECK(m.recall == doctest::Approx(0.6));
  CHECK(m.f1 == doctest::Approx(2 * 0.75 * 0.6 / (0.75 + 0.6)));
}

TEST_CASE("ambiguous decisions count as not positive") {
  using V = world::DecisionVector;
  const std::vector<V> pred = {V{Decision::kAmbiguous}, V{Decision::kPositive}, V{Decision::kNegative}};
  const std::vector<V> truth = {V{Decision::kPositive}, V{Decision::kAmbiguous}, V{Decision::kAmbiguous}};
  const auto m = eval::decision_metrics(pred, truth);
  CHECK(m.per_label[0].tp == 0);
  CHECK(m.per_label[0].fp == 1);
  CHECK(m.per_label[0].fn == 1);
}

TEST_CASE("decision metrics match the confusion-count oracle") {
  std::mt19937_64 rng(31);
  std::vector<world::DecisionVector> pred, truth;
  for (int n = 0; n < 300; ++n) {
    pred.push_back(testing::random_decisions(6, rng));
    truth.push_back(testing::random_decisions(6, rng));
  }
  const auto m = eval::decision_metrics(pred, truth);
  const auto oracle = testing::confusion_oracle(pred, truth);
  std::size_t TP = 0, FP = 0, FN = 0;
  double macro = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(m.per_label[i].tp == oracle[i].tp);
    CHECK(m.per_label[i].fp == oracle[i].fp);
    CHECK(m.per_label[i].fn == oracle[i].fn);
    TP += oracle[i].tp;
    FP += oracle[i].fp;
    FN += oracle[i].fn;
    macro += m.per_label[i].f1;
  }
  CHECK(m.micro.tp == TP);
  CHECK(m.micro.f1 == doctest::Approx(2.0 * TP / (2.0 * TP + FP + FN)).epsilon(1e-15));
  CHECK(m.macro_f1 == doctest::Approx(macro / 6.0).epsilon(1e-15));
  CHECK_THROWS_AS(eval::decision_metrics(std::span(pred).first(2), std::span(truth).first(3)), ShapeError);
}

TEST_CASE("evaluation of an arm is consistent with its parts") {
  const auto s = testing::tiny_setup(3, 6);
  const auto r = eval::evaluate_arm("slog", s.gen, s.surr, s.human, s.instances);
  CHECK(r.num_instances == 6);
  CHECK(r.num_labels == 2);
  CHECK(r.quality_mean > 0.0);
  CHECK(r.quality_mean < 1.0);
  CHECK(r.quality_sum == doctest::Approx(2.0 * r.quality_mean).epsilon(1e-15));
  CHECK(r.decisions == eval::evaluate_decisions(s.gen, s.human, s.instances));
  const auto t = eval::evaluate_text(s.gen, s.surr, s.instances);
  CHECK(t.quality_mean == r.quality_mean);
  for (int n = 0; n < 4; ++n) CHECK(t.bleu.bleu[n] == r.bleu.bleu[n]);
  CHECK_THROWS_AS(eval::evaluate_text(s.gen, s.surr, {}), DataError);
}

TEST_CASE("reports round-trip through JSON") {
  const auto s = testing::tiny_setup(4, 5);
  const auto r = eval::evaluate_arm("finetuned", s.gen, s.surr, s.human, s.instances);
  const auto back = eval::report_from_json(eval::report_to_json(r));
  CHECK(back.arm == r.arm);
  CHECK(back.quality_mean == r.quality_mean);
  CHECK(back.decisions == r.decisions);
  for (int n = 0; n < 4; ++n) CHECK(back.bleu.bleu[n] == r.bleu.bleu[n]);
}

TEST_CASE("emitted reports hold every arm in both formats") {
  const auto s = testing::tiny_setup(5, 5);
  std::vector<eval::EvalReport> reports;
  for (const char* arm : {"pretrained", "finetuned", "slog"})
    reports.push_back(eval::evaluate_arm(arm, s.gen, s.surr, s.human, s.instances));
  const auto dir = std::filesystem::temp_directory_path() / "slog_report_emit";
  std::filesystem::remove_all(dir);
  eval::emit_report(reports, dir, R"({"seed": 1})");
  std::ifstream js(dir / "report.json");
  const auto j = nlohmann::json::parse(js);
  CHECK(j.at("schema_version") == eval::kReportSchemaVersion);
  CHECK(j.at("context").at("seed") == 1);
  CHECK(j.at("arms").size() == 3);
  std::ifstream md(dir / "report.md");
  std::stringstream text;
  text << md.rdbuf();
  const std::string m = text.str();
  CHECK(m.find("| slog |") != std::string::npos);
  CHECK(m.find("| micro |") != std::string::npos);
  CHECK(m.find("| f2 |") != std::string::npos);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(eval::emit_report({}, dir), Error);
}

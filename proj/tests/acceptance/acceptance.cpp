// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only
// when every selected criterion passes.

#include "fixtures.hpp"

#include "slog/error.hpp"
#include "slog/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

using namespace slog;
namespace ex = slog::experiment;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

Verdict gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_where;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = testing::tiny_setup(seed);
    const auto ex = testing::surrogate_examples(s, seed);
    const std::pair<const char*, std::function<nn::GradCheckResult()>> checks[] = {
        {"caption_nll", [&] { return nn::grad_check(testing::caption_loss(s), s.gen.params); }},
        {"human_nll", [&] { return nn::grad_check(testing::human_loss(s), s.human.params); }},
        {"surrogate_nll", [&] { return nn::grad_check(testing::surrogate_loss(s, ex), s.surr.params); }},
        {"augmented_loss", [&] { return nn::grad_check(testing::augmented_loss_fn(s, 10.0), s.gen.params); }},
        {"soft guidance quality", [&] { return nn::grad_check(testing::soft_quality_fn(s), s.gen.params); }},
    };
    for (const auto& [name, run] : checks) {
      const auto r = run();
      if (r.max_relative_error >= worst) {
        worst = r.max_relative_error;
        worst_where = std::string(name) + " seed " + std::to_string(seed) + " at " + r.worst_path;
      }
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "worst relative error " << worst << " (" << worst_where << "), " << fmt(secs, 2) << " s";
  return {worst < 1e-4 && secs < 120.0, d.str()};
}

// ---------------------------------------------------------------------------
// 2. Metric oracles
// ---------------------------------------------------------------------------

Verdict metric_oracles() {
  const auto cases = testing::hand_bleu_cases();
  double worst = 0.0;
  for (const auto& c : cases) {
    const auto r = text::corpus_bleu(c.candidates, c.references, 4);
    worst = std::max(worst, std::abs(r.bleu[c.n - 1] - c.expected));
  }
  std::mt19937_64 rng(2024);
  std::vector<world::DecisionVector> pred, truth;
  for (int n = 0; n < 1000; ++n) {
    pred.push_back(testing::random_decisions(6, rng));
    truth.push_back(testing::random_decisions(6, rng));
  }
  const auto m = eval::decision_metrics(pred, truth);
  const auto oracle = testing::confusion_oracle(pred, truth);
  bool exact = true;
  std::size_t TP = 0, FP = 0, FN = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    exact &= m.per_label[i].tp == oracle[i].tp && m.per_label[i].fp == oracle[i].fp &&
             m.per_label[i].fn == oracle[i].fn;
    TP += oracle[i].tp;
    FP += oracle[i].fp;
    FN += oracle[i].fn;
  }
  exact &= m.micro.tp == TP && m.micro.fp == FP && m.micro.fn == FN;
  std::ostringstream d;
  d << cases.size() << " BLEU cases, worst error " << worst << "; confusion counts "
    << (exact ? "exact" : "MISMATCH") << " on 1000 pairs";
  return {cases.size() >= 20 && worst <= 1e-9 && exact, d.str()};
}

// ---------------------------------------------------------------------------
// Pipeline runs
// ---------------------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path dir;
  double seconds = 0.0;
  json report;
};

ex::ExperimentConfig default_config(std::uint64_t seed, const fs::path& dir) {
  auto c = ex::parse_config_text("{}");
  c.seed = seed;
  c.out_dir = dir.string();
  return c;
}

/// Fresh run-all; when `surrogate_bytes` is set the run pauses after the
/// surrogate stage to capture the frozen checkpoint.
SeedRun run_seed(std::uint64_t seed, const fs::path& dir, std::string* surrogate_bytes = nullptr) {
  fs::remove_all(dir);
  const auto config = default_config(seed, dir);
  std::ostringstream log;
  const auto t0 = std::chrono::steady_clock::now();
  if (surrogate_bytes) {
    for (auto c : {ex::Command::kGenData, ex::Command::kPretrain, ex::Command::kElicit, ex::Command::kTrainSurrogate})
      ex::run_command(c, config, log);
    *surrogate_bytes = slurp(dir / "models" / "surrogate.json");
  }
  ex::run_command(ex::Command::kRunAll, config, log);
  SeedRun r{seed, dir, seconds_since(t0), json::parse(slurp(dir / "report.json"))};
  std::cout << "  seed " << seed << ": pipeline " << fmt(r.seconds, 1) << " s\n" << std::flush;
  return r;
}

const json& arm(const json& report, const std::string& name) {
  for (const auto& a : report.at("arms"))
    if (a.at("arm") == name) return a;
  throw DataError("report lacks arm " + name);
}

// ---------------------------------------------------------------------------
// 3. Rating protocol
// ---------------------------------------------------------------------------

Verdict rating_protocol(const SeedRun& run) {
  const auto config = default_config(run.seed, run.dir);
  const auto w = world::make_world(ex::effective_world(config));
  const auto bundle = world::load_bundle(run.dir / "data", w);
  std::set<std::string> surr_ids;
  std::map<std::string, std::size_t> position;
  for (std::size_t i : bundle.surr_indices) {
    position.emplace(bundle.train[i].id, position.size());
    surr_ids.insert(bundle.train[i].id);
  }

  ratings::Elicitation e;
  e.records = ratings::load_ratings(run.dir / "ratings");
  std::set<std::string> rated;
  bool complement = true;
  for (const auto& f : json::parse(slurp(run.dir / "ratings" / "folds.json"))) {
    const auto r = f.at("rated").get<std::vector<std::string>>();
    const auto t = f.at("trained_on").get<std::vector<std::string>>();
    e.fold_training_ids.push_back(t);
    auto& fold = e.folds.emplace_back();
    for (const auto& id : r) fold.push_back(position.at(id));
    rated.insert(r.begin(), r.end());
    // Each fold model trains on exactly the subset minus its own fold.
    std::set<std::string> expected = surr_ids;
    for (const auto& id : r) expected.erase(id);
    complement &= std::set<std::string>(t.begin(), t.end()) == expected && t.size() == expected.size();
  }
  bool leak_free = true;
  std::string leak;
  try {
    ratings::check_no_leakage(e);
  } catch (const DataError& err) {
    leak_free = false;
    leak = std::string(" (") + err.what() + ")";
  }
  const bool count_ok = e.records.size() == 2 * surr_ids.size();

  const std::size_t n = surr_ids.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  bool folds_ok = true;
  for (std::size_t k : {std::size_t{2}, std::size_t{5}, n}) {
    const auto folds = ratings::kfold_partition(idx, k, 7);
    std::multiset<std::size_t> seen;
    std::size_t lo = n, hi = 0;
    for (const auto& f : folds) {
      seen.insert(f.begin(), f.end());
      lo = std::min(lo, f.size());
      hi = std::max(hi, f.size());
    }
    folds_ok &= folds.size() == k && seen == std::multiset<std::size_t>(idx.begin(), idx.end()) && hi - lo <= 1;
  }
  std::ostringstream d;
  d << e.records.size() << " records for |D_surr| = " << n << "; leakage check " << (leak_free ? "clean" : "FAILED" + leak)
    << "; fold complements " << (complement && rated == surr_ids ? "exact" : "WRONG") << "; k in {2, 5, " << n
    << "} partitions " << (folds_ok ? "valid" : "INVALID");
  return {count_ok && leak_free && complement && rated == surr_ids && folds_ok, d.str()};
}

// ---------------------------------------------------------------------------
// 4. Loss semantics
// ---------------------------------------------------------------------------

Verdict loss_semantics(const SeedRun& run, const std::string& surrogate_before) {
  const auto config = default_config(run.seed, run.dir);
  const auto w = world::make_world(ex::effective_world(config));
  const auto bundle = world::load_bundle(run.dir / "data", w);
  const auto gen = models::load_generator(run.dir / "models" / "generator_pretrained.json");
  const auto surr = models::load_surrogate(run.dir / "models" / "surrogate.json");

  bool bit_exact = true;
  const std::size_t bs = config.train.batch_size;
  std::size_t batches = 0;
  for (std::size_t start = 0; start + bs <= bundle.train.size() && batches < 8; start += bs, ++batches) {
    std::vector<std::size_t> idx(bs);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = train::caption_batch(bundle.train, idx);
    nn::Tape tape(false);
    nn::Bound p(tape, gen.params, false);
    const double ce = models::caption_nll(tape, p, gen.config, batch.features, batch.findings).scalar();
    bit_exact &= train::augmented_loss(gen, surr, batch, batch.features, 0.0) == ce;
  }

  const bool frozen = slurp(run.dir / "models" / "surrogate.json") == surrogate_before;

  double worst = 0.0;
  std::size_t lines = 0;
  const double lambda = config.train.lambda_weight;
  std::ifstream log(run.dir / "arms" / "slog" / "train_log.jsonl");
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = json::parse(line);
    const double recon = j.at("caption_ce").get<double>() - lambda * j.at("quality").get<double>();
    worst = std::max(worst, std::abs(j.at("combined").get<double>() - recon));
  }
  std::ostringstream d;
  d << "lambda=0 vs caption CE on " << batches << " batches " << (bit_exact ? "bit-exact" : "DIFFERS")
    << "; surrogate checkpoint " << (frozen ? "unchanged" : "CHANGED") << "; " << lines
    << " log lines reconstruct within " << worst;
  return {bit_exact && batches > 0 && frozen && lines > 0 && worst <= 1e-6, d.str()};
}

// ---------------------------------------------------------------------------
// 5-6. Quality and decision orderings across seeds
// ---------------------------------------------------------------------------

Verdict quality_ordering(const std::vector<SeedRun>& runs) {
  std::size_t wins = 0;
  double pre = 0, ft = 0, sl = 0, b_ft = 0, b_sl = 0, slowest = 0;
  std::ostringstream per;
  for (const auto& r : runs) {
    const double qp = arm(r.report, "pretrained").at("quality_mean");
    const double qf = arm(r.report, "finetuned").at("quality_mean");
    const double qs = arm(r.report, "slog").at("quality_mean");
    wins += qs - qf >= 0.05;
    pre += qp;
    ft += qf;
    sl += qs;
    b_ft += arm(r.report, "finetuned").at("bleu")[3].get<double>();
    b_sl += arm(r.report, "slog").at("bleu")[3].get<double>();
    slowest = std::max(slowest, r.seconds);
    per << " " << (qs - qf >= 0 ? "+" : "") << fmt(qs - qf);
  }
  const double n = static_cast<double>(runs.size());
  pre /= n, ft /= n, sl /= n, b_ft /= n, b_sl /= n;
  const std::size_t need = runs.size() >= 5 ? 4 : runs.size();
  const bool ordered = pre <= ft && ft < sl;
  const bool bleu_ok = std::abs(b_sl - b_ft) <= 0.02;
  std::ostringstream d;
  d << "slog - finetuned quality per seed:" << per.str() << " (" << wins << "/" << runs.size()
    << " >= 0.05); means pretrained " << fmt(pre) << ", finetuned " << fmt(ft) << ", slog " << fmt(sl)
    << (ordered ? " ordered" : " NOT ordered") << "; BLEU-4 finetuned " << fmt(b_ft) << " vs slog " << fmt(b_sl)
    << "; slowest seed " << fmt(slowest, 1) << " s";
  return {wins >= need && ordered && bleu_ok && slowest <= 900.0, d.str()};
}

Verdict decision_ordering(const std::vector<SeedRun>& runs) {
  std::size_t wins = 0;
  std::ostringstream per;
  for (const auto& r : runs) {
    const double f = arm(r.report, "finetuned").at("decisions").at("micro").at("f1");
    const double s = arm(r.report, "slog").at("decisions").at("micro").at("f1");
    wins += s >= f;
    per << " " << fmt(f) << "->" << fmt(s);
  }
  const std::size_t need = runs.size() >= 5 ? 4 : runs.size();
  std::ostringstream d;
  d << "micro-F1 finetuned->slog per seed:" << per.str() << " (" << wins << "/" << runs.size() << " slog >= finetuned)";
  return {wins >= need, d.str()};
}

// ---------------------------------------------------------------------------
// 7. Determinism
// ---------------------------------------------------------------------------

Verdict determinism(const SeedRun& first, const fs::path& repeat_dir) {
  const auto again = run_seed(first.seed, repeat_dir);
  const bool same = slurp(first.dir / "report.json") == slurp(again.dir / "report.json");
  return {same, std::string("report.json of two seed-") + std::to_string(first.seed) + " runs " +
                    (same ? "byte-identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  fs::path runs_dir = "acceptance_runs";
  std::size_t seeds = 5;
  std::vector<int> only;
  app.add_option("--runs-dir", runs_dir, "Directory for pipeline runs (wiped per seed)");
  app.add_option("--seeds", seeds, "Number of master seeds for the ordering criteria")->check(CLI::Range(1, 100));
  app.add_option("--only", only, "Run only these criteria (1-7)")->check(CLI::Range(1, 7));
  CLI11_PARSE(app, argc, argv);

  auto selected = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Verdict()>& check) {
    if (!selected(id)) return;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << v.detail << "\n" << std::flush;
  };

  report(1, "gradient fidelity", gradient_fidelity);
  report(2, "metric oracles", metric_oracles);

  const bool need_runs = [&] {
    for (int c = 3; c <= 7; ++c)
      if (selected(c)) return true;
    return false;
  }();
  std::vector<SeedRun> runs;
  std::string surrogate_before;
  if (need_runs) {
    const bool all_seeds = selected(5) || selected(6);
    const std::size_t count = all_seeds ? seeds : 1;
    std::cout << "running the default pipeline on " << count << " seed(s) under " << runs_dir.string() << "\n";
    try {
      for (std::uint64_t s = 1; s <= count; ++s)
        runs.push_back(run_seed(s, runs_dir / ("seed_" + std::to_string(s)), s == 1 ? &surrogate_before : nullptr));
    } catch (const std::exception& e) {
      std::cout << "pipeline error: " << e.what() << "\n";
    }
  }
  auto with_runs = [&](std::function<Verdict()> f) {
    return [&runs, f] { return runs.empty() ? Verdict{false, "pipeline did not complete"} : f(); };
  };
  report(3, "rating protocol soundness", with_runs([&] { return rating_protocol(runs.front()); }));
  report(4, "loss semantics", with_runs([&] { return loss_semantics(runs.front(), surrogate_before); }));
  report(5, "estimated quality gain without text loss", with_runs([&] { return quality_ordering(runs); }));
  report(6, "downstream decision gain", with_runs([&] { return decision_ordering(runs); }));
  report(7, "determinism", with_runs([&] { return determinism(runs.front(), runs_dir / "seed_1_repeat"); }));
  return failures == 0 ? 0 : 1;
}

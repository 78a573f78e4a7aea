#include "slog/synthworld.hpp"

#include "slog/error.hpp"
#include "slog/seeding.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace slog::world {

namespace {

constexpr std::array<std::string_view, 3> kDecisionNames = {"positive", "negative", "ambiguous"};

std::string_view relevant_word(RelevantState s) {
  switch (s) {
    case RelevantState::kPresent: return text::kPresent;
    case RelevantState::kAbsent: return text::kAbsent;
    case RelevantState::kEquivocal: return text::kEquivocal;
  }
  return {};
}

std::string_view nuisance_word(NuisanceState s) { return s == NuisanceState::kSeen ? text::kSeen : text::kUnseen; }

}  // namespace

std::string_view to_string(Decision d) { return kDecisionNames[static_cast<std::size_t>(d)]; }

Decision decision_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kDecisionNames.size(); ++i) {
    if (kDecisionNames[i] == s) return static_cast<Decision>(i);
  }
  throw DataError("unknown decision label '" + std::string(s) + "'");
}

void WorldConfig::validate() const {
  if (num_labels < 1) throw ConfigError("world.num_labels must be >= 1");
  if (feature_dim < num_labels + num_nuisance) throw ConfigError("world.feature_dim must be >= num_labels + num_nuisance");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("world.noise_std must be >= 0");
  if (!(ambiguous_prob >= 0.0 && ambiguous_prob <= 1.0)) throw ConfigError("world.ambiguous_prob must be in [0, 1]");
  if (!(signal_scale > 0.0) || !std::isfinite(signal_scale)) throw ConfigError("world.signal_scale must be > 0");
  if (max_findings_len == 1) throw ConfigError("world.max_findings_len must hold at least BOS and one token");
}

World make_world(const WorldConfig& config) {
  config.validate();
  World w;
  w.config = config;
  const auto d = static_cast<nn::Index>(config.num_labels);
  const auto r = static_cast<nn::Index>(config.num_nuisance);
  const auto p = static_cast<nn::Index>(config.feature_dim);
  std::mt19937_64 rng(derive_seed(config.world_seed, 0));
  std::normal_distribution<double> normal(0.0, config.signal_scale);
  w.projection.resize(p, 3 * d + 2 * r);
  for (nn::Index c = 0; c < w.projection.cols(); ++c)
    for (nn::Index row = 0; row < p; ++row) w.projection(row, c) = normal(rng);
  w.vocab = text::build_vocab(config.num_labels, config.num_nuisance);
  for (std::size_t i = 1; i <= config.num_labels; ++i) w.relevant_name_ids.push_back(w.vocab.id("f" + std::to_string(i)));
  for (std::size_t j = 1; j <= config.num_nuisance; ++j) w.nuisance_name_ids.push_back(w.vocab.id("n" + std::to_string(j)));
  return w;
}

Eigen::VectorXd encode_latent(const LatentState& latent) {
  const auto d = static_cast<Eigen::Index>(latent.relevant.size());
  const auto r = static_cast<Eigen::Index>(latent.nuisance.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(3 * d + 2 * r);
  for (Eigen::Index i = 0; i < d; ++i) v(3 * i + static_cast<Eigen::Index>(latent.relevant[static_cast<std::size_t>(i)])) = 1.0;
  for (Eigen::Index j = 0; j < r; ++j) v(3 * d + 2 * j + static_cast<Eigen::Index>(latent.nuisance[static_cast<std::size_t>(j)])) = 1.0;
  return v;
}

Eigen::VectorXd project_latent(const World& world, const LatentState& latent) {
  if (latent.relevant.size() != world.config.num_labels || latent.nuisance.size() != world.config.num_nuisance) {
    throw ShapeError("latent state does not match world dimensions");
  }
  return world.projection * encode_latent(latent);
}

LatentState sample_latent(const WorldConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  LatentState s;
  s.relevant.reserve(config.num_labels);
  for (std::size_t i = 0; i < config.num_labels; ++i) {
    if (unit(rng) < config.ambiguous_prob) {
      s.relevant.push_back(RelevantState::kEquivocal);
    } else {
      s.relevant.push_back(unit(rng) < 0.5 ? RelevantState::kPresent : RelevantState::kAbsent);
    }
  }
  for (std::size_t j = 0; j < config.num_nuisance; ++j) {
    s.nuisance.push_back(unit(rng) < 0.5 ? NuisanceState::kSeen : NuisanceState::kUnseen);
  }
  return s;
}

Instance sample_instance(const World& world, std::mt19937_64& rng, std::string id) {
  Instance inst;
  inst.id = std::move(id);
  inst.latent = sample_latent(world.config, rng);
  inst.features = project_latent(world, inst.latent);
  if (world.config.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, world.config.noise_std);
    for (Eigen::Index k = 0; k < inst.features.size(); ++k) inst.features(k) += noise(rng);
  }
  inst.findings = render_findings(inst.latent, world);
  inst.labels = derive_labels(inst.latent);
  return inst;
}

std::vector<Instance> sample_instances(const World& world, std::size_t count, std::uint64_t seed) {
  std::vector<Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    char id[32];
    std::snprintf(id, sizeof id, "case-%06zu", i);
    out.push_back(sample_instance(world, rng, id));
  }
  return out;
}

DecisionVector derive_labels(const LatentState& latent) {
  DecisionVector out;
  out.reserve(latent.relevant.size());
  for (RelevantState s : latent.relevant) {
    switch (s) {
      case RelevantState::kPresent: out.push_back(Decision::kPositive); break;
      case RelevantState::kAbsent: out.push_back(Decision::kNegative); break;
      case RelevantState::kEquivocal: out.push_back(Decision::kAmbiguous); break;
    }
  }
  return out;
}

text::TokenSequence render_findings(const LatentState& latent, const World& world) {
  const text::Vocab& v = world.vocab;
  const int stop = v.id(text::kStop);
  text::TokenSequence seq;
  seq.ids.reserve(3 * (latent.relevant.size() + latent.nuisance.size()) + 2);
  seq.ids.push_back(v.bos());
  for (std::size_t i = 0; i < latent.relevant.size(); ++i) {
    seq.ids.push_back(world.relevant_name_ids.at(i));
    seq.ids.push_back(v.id(relevant_word(latent.relevant[i])));
    seq.ids.push_back(stop);
  }
  for (std::size_t j = 0; j < latent.nuisance.size(); ++j) {
    seq.ids.push_back(world.nuisance_name_ids.at(j));
    seq.ids.push_back(v.id(nuisance_word(latent.nuisance[j])));
    seq.ids.push_back(stop);
  }
  seq.ids.push_back(v.eos());
  return seq;
}

LatentState parse_findings(const text::TokenSequence& findings, const World& world) {
  const auto ids = text::strip_specials(findings, world.vocab);
  const std::size_t d = world.config.num_labels;
  const std::size_t r = world.config.num_nuisance;
  if (ids.size() != 3 * (d + r)) throw DataError("findings do not cover every attribute");
  LatentState s;
  for (std::size_t k = 0; k < d + r; ++k) {
    const std::string& word = world.vocab.token(ids[3 * k + 1]);
    if (k < d) {
      if (ids[3 * k] != world.relevant_name_ids[k]) throw DataError("unexpected attribute order in findings");
      if (word == text::kPresent) s.relevant.push_back(RelevantState::kPresent);
      else if (word == text::kAbsent) s.relevant.push_back(RelevantState::kAbsent);
      else if (word == text::kEquivocal) s.relevant.push_back(RelevantState::kEquivocal);
      else throw DataError("bad relevant state '" + word + "'");
    } else {
      if (ids[3 * k] != world.nuisance_name_ids[k - d]) throw DataError("unexpected attribute order in findings");
      if (word == text::kSeen) s.nuisance.push_back(NuisanceState::kSeen);
      else if (word == text::kUnseen) s.nuisance.push_back(NuisanceState::kUnseen);
      else throw DataError("bad nuisance state '" + word + "'");
    }
  }
  return s;
}

std::vector<std::array<std::size_t, kNumDecisionClasses>> class_counts(const std::vector<Instance>& instances,
                                                                       std::size_t num_labels,
                                                                       const std::vector<std::size_t>* subset) {
  std::vector<std::array<std::size_t, kNumDecisionClasses>> counts(num_labels, {0, 0, 0});
  auto add = [&](const Instance& inst) {
    for (std::size_t i = 0; i < num_labels; ++i) ++counts[i][static_cast<std::size_t>(inst.labels.at(i))];
  };
  if (subset) {
    for (std::size_t idx : *subset) add(instances.at(idx));
  } else {
    for (const auto& inst : instances) add(inst);
  }
  return counts;
}

namespace {

/// Greedy multi-label stratified selection followed by pairwise swaps that
/// shrink the squared deviation from the proportional targets.
std::vector<std::size_t> stratified_subset(const std::vector<Instance>& train, std::size_t m, std::uint64_t seed,
                                           std::vector<std::string>& warnings) {
  const std::size_t n = train.size();
  if (m >= n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  const std::size_t d = train.empty() ? 0 : train.front().labels.size();
  const auto counts = class_counts(train, d);
  std::vector<std::array<double, kNumDecisionClasses>> target(d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t c = 0; c < kNumDecisionClasses; ++c)
      target[i][c] = static_cast<double>(m) * static_cast<double>(counts[i][c]) / static_cast<double>(n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::array<double, kNumDecisionClasses>> cur(d, {0, 0, 0});
  std::vector<char> chosen(n, 0);
  auto cls = [&](std::size_t j, std::size_t i) { return static_cast<std::size_t>(train[j].labels[i]); };

  for (std::size_t step = 0; step < m; ++step) {
    double best = -1e300;
    std::size_t best_j = n;
    for (std::size_t j : order) {
      if (chosen[j]) continue;
      double score = 0.0;
      for (std::size_t i = 0; i < d; ++i) score += target[i][cls(j, i)] - cur[i][cls(j, i)];
      if (score > best) {
        best = score;
        best_j = j;
      }
    }
    chosen[best_j] = 1;
    for (std::size_t i = 0; i < d; ++i) cur[i][cls(best_j, i)] += 1.0;
  }

  auto max_dev = [&] {
    double mx = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t c = 0; c < kNumDecisionClasses; ++c) mx = std::max(mx, std::abs(cur[i][c] - target[i][c]));
    return mx;
  };

  // Swapping selected s for unselected u changes count (i, c_s) by -1 and
  // (i, c_u) by +1 on every label where the classes differ.
  for (int pass = 0; pass < 20 && max_dev() > 1.0; ++pass) {
    bool improved = false;
    for (std::size_t s : order) {
      if (!chosen[s]) continue;
      for (std::size_t u : order) {
        if (chosen[u]) continue;
        double delta = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t cs = cls(s, i);
          const std::size_t cu = cls(u, i);
          if (cs == cu) continue;
          const double es = cur[i][cs] - target[i][cs];
          const double eu = cur[i][cu] - target[i][cu];
          delta += (es - 1) * (es - 1) - es * es + (eu + 1) * (eu + 1) - eu * eu;
        }
        if (delta < -1e-12) {
          chosen[s] = 0;
          chosen[u] = 1;
          for (std::size_t i = 0; i < d; ++i) {
            cur[i][cls(s, i)] -= 1.0;
            cur[i][cls(u, i)] += 1.0;
          }
          improved = true;
          break;
        }
      }
    }
    if (!improved) break;
  }

  if (max_dev() > 1.0) {
    warnings.push_back("stratified subset deviates from proportional class counts by more than one instance");
  }
  const double min_count_for_presence = std::ceil(static_cast<double>(n) / static_cast<double>(m));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < kNumDecisionClasses; ++c) {
      if (static_cast<double>(counts[i][c]) >= min_count_for_presence && cur[i][c] == 0.0) {
        warnings.push_back("label " + std::to_string(i + 1) + " class " +
                           std::string(to_string(static_cast<Decision>(c))) + " missing from the subset");
      }
    }
  }

  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < n; ++j)
    if (chosen[j]) out.push_back(j);
  return out;
}

}  // namespace

DatasetBundle partition_dataset(std::vector<Instance> instances, const SplitRatios& ratios, double surr_fraction,
                                std::uint64_t seed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be nonnegative and sum to 1");
  }
  if (!(surr_fraction > 0.0 && surr_fraction <= 1.0)) throw ConfigError("surr_fraction must be in (0, 1]");

  const std::size_t n = instances.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.train));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.val)));

  DatasetBundle b;
  for (std::size_t k = 0; k < n; ++k) {
    Instance& inst = instances[order[k]];
    if (k < n_train) b.train.push_back(std::move(inst));
    else if (k < n_train + n_val) b.val.push_back(std::move(inst));
    else b.test.push_back(std::move(inst));
  }

  const auto m = static_cast<std::size_t>(std::llround(surr_fraction * static_cast<double>(b.train.size())));
  if (m == 0 && !b.train.empty()) b.warnings.push_back("surrogate subset is empty");
  b.surr_indices = stratified_subset(b.train, m, derive_seed(seed, 2), b.warnings);
  return b;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::string instance_to_jsonl(const Instance& inst, const World& world) {
  nlohmann::ordered_json j;
  j["id"] = inst.id;
  j["features"] = std::vector<double>(inst.features.data(), inst.features.data() + inst.features.size());
  j["findings"] = text::detokenize(inst.findings, world.vocab);
  nlohmann::ordered_json labels = nlohmann::ordered_json::array();
  for (Decision dcs : inst.labels) labels.push_back(std::string(to_string(dcs)));
  j["labels"] = std::move(labels);
  return j.dump();
}

std::string latent_to_jsonl(const Instance& inst) {
  nlohmann::ordered_json j;
  j["id"] = inst.id;
  nlohmann::ordered_json rel = nlohmann::ordered_json::array();
  for (RelevantState s : inst.latent.relevant) rel.push_back(std::string(relevant_word(s)));
  nlohmann::ordered_json nui = nlohmann::ordered_json::array();
  for (NuisanceState s : inst.latent.nuisance) nui.push_back(std::string(nuisance_word(s)));
  j["relevant"] = std::move(rel);
  j["nuisance"] = std::move(nui);
  return j.dump();
}

namespace {

void write_lines(const std::filesystem::path& file, const std::vector<std::string>& lines) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<Instance> read_split(const std::filesystem::path& data_file, const std::filesystem::path& oracle_file,
                                 const World& world) {
  std::ifstream data(data_file, std::ios::binary);
  std::ifstream oracle(oracle_file, std::ios::binary);
  if (!data || !oracle) throw DataError("missing split file " + data_file.string());
  std::vector<Instance> out;
  std::string line;
  std::string oline;
  while (std::getline(data, line)) {
    if (line.empty()) continue;
    if (!std::getline(oracle, oline)) throw DataError("oracle file shorter than " + data_file.string());
    const auto j = nlohmann::json::parse(line);
    const auto o = nlohmann::json::parse(oline);
    Instance inst;
    inst.id = j.at("id").get<std::string>();
    if (o.at("id").get<std::string>() != inst.id) throw DataError("oracle id mismatch for " + inst.id);
    const auto feats = j.at("features").get<std::vector<double>>();
    inst.features = Eigen::Map<const Eigen::VectorXd>(feats.data(), static_cast<Eigen::Index>(feats.size()));
    inst.findings = text::tokenize(j.at("findings").get<std::string>(), world.vocab);
    for (const auto& l : j.at("labels")) inst.labels.push_back(decision_from_string(l.get<std::string>()));
    for (const auto& s : o.at("relevant")) {
      const auto w = s.get<std::string>();
      inst.latent.relevant.push_back(w == text::kPresent  ? RelevantState::kPresent
                                     : w == text::kAbsent ? RelevantState::kAbsent
                                                          : RelevantState::kEquivocal);
    }
    for (const auto& s : o.at("nuisance")) {
      inst.latent.nuisance.push_back(s.get<std::string>() == text::kSeen ? NuisanceState::kSeen
                                                                         : NuisanceState::kUnseen);
    }
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace

void save_bundle(const DatasetBundle& bundle, const World& world, const std::filesystem::path& dir,
                 std::uint64_t seed, std::string_view config_hash) {
  std::filesystem::create_directories(dir);
  auto dump = [&](const std::vector<Instance>& split, const std::string& name) {
    std::vector<std::string> data;
    std::vector<std::string> oracle;
    for (const auto& inst : split) {
      data.push_back(instance_to_jsonl(inst, world));
      oracle.push_back(latent_to_jsonl(inst));
    }
    write_lines(dir / (name + ".jsonl"), data);
    write_lines(dir / ("oracle_" + name + ".jsonl"), oracle);
  };
  dump(bundle.train, "train");
  dump(bundle.val, "val");
  dump(bundle.test, "test");

  nlohmann::ordered_json m;
  m["splits"] = {{"train", "train.jsonl"}, {"val", "val.jsonl"}, {"test", "test.jsonl"}};
  m["oracle"] = {{"train", "oracle_train.jsonl"}, {"val", "oracle_val.jsonl"}, {"test", "oracle_test.jsonl"}};
  m["seed"] = seed;
  m["config_hash"] = std::string(config_hash);
  m["surr_indices"] = bundle.surr_indices;
  m["warnings"] = bundle.warnings;
  std::ofstream out(dir / "bundle.json", std::ios::binary);
  if (!out) throw Error("cannot write bundle manifest in " + dir.string());
  out << m.dump(2) << '\n';
}

DatasetBundle load_bundle(const std::filesystem::path& dir, const World& world) {
  std::ifstream in(dir / "bundle.json", std::ios::binary);
  if (!in) throw DataError("missing bundle manifest in " + dir.string());
  const auto m = nlohmann::json::parse(in);
  DatasetBundle b;
  const auto& splits = m.at("splits");
  const auto& oracle = m.at("oracle");
  b.train = read_split(dir / splits.at("train").get<std::string>(), dir / oracle.at("train").get<std::string>(), world);
  b.val = read_split(dir / splits.at("val").get<std::string>(), dir / oracle.at("val").get<std::string>(), world);
  b.test = read_split(dir / splits.at("test").get<std::string>(), dir / oracle.at("test").get<std::string>(), world);
  b.surr_indices = m.at("surr_indices").get<std::vector<std::size_t>>();
  b.warnings = m.value("warnings", std::vector<std::string>{});
  return b;
}

}  // namespace slog::world

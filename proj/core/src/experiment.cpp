#include "slog/experiment.hpp"

#include "slog/error.hpp"
#include "slog/evalreport.hpp"
#include "slog/seeding.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

namespace slog::experiment {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Strict JSON section reader
// ---------------------------------------------------------------------------

class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("configuration section '" + display() + "' must be a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError("configuration key '" + qualified(key) + "' must be a nonnegative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("configuration key '" + qualified(key) + "' must be a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("configuration key '" + qualified(key) + "' must be a boolean");
    }
    try {
      out = v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("configuration key '" + qualified(key) + "' has the wrong type");
    }
  }

  /// Nested section, or nullopt when absent.
  std::optional<Section> sub(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), qualified(key));
  }

  [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

  /// Rejects keys that were never requested.
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError("unknown configuration key '" + qualified(k) + "'");
  }

 private:
  [[nodiscard]] std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[nodiscard]] std::string display() const { return path_.empty() ? "<root>" : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ojson world_json(const world::WorldConfig& w) {
  return {{"num_labels", w.num_labels},     {"num_nuisance", w.num_nuisance}, {"feature_dim", w.feature_dim},
          {"noise_std", w.noise_std},       {"ambiguous_prob", w.ambiguous_prob},
          {"signal_scale", w.signal_scale}, {"max_findings_len", w.max_findings_len},
          {"world_seed", w.world_seed}};
}

ojson generator_json(const GeneratorSettings& g) {
  return {{"embed_dim", g.embed_dim},
          {"hidden_dim", g.hidden_dim},
          {"max_decode_len", g.max_decode_len},
          {"pretrain",
           {{"epochs", g.pretrain.epochs},
            {"batch_size", g.pretrain.batch_size},
            {"learning_rate", g.pretrain.learning_rate}}}};
}

ojson human_json(const HumanSettings& h) {
  return {{"embed_dim", h.embed_dim},   {"hidden_dim", h.hidden_dim},         {"scan_dim", h.scan_dim},
          {"epochs", h.train.epochs},   {"batch_size", h.train.batch_size},   {"learning_rate", h.train.learning_rate}};
}

ojson surrogate_json(const SurrogateSettings& s) {
  return {{"hidden_dim", s.hidden_dim},
          {"scan_dim", s.scan_dim},
          {"mlp_dim", s.mlp_dim},
          {"epochs", s.train.epochs},
          {"batch_size", s.train.batch_size},
          {"learning_rate", s.train.learning_rate},
          {"holdout_fraction", s.train.holdout_fraction}};
}

ojson train_json(const train::TrainConfig& t) {
  return {{"lambda_weight", t.lambda_weight},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"temperature", t.temperature}};
}

ojson config_json(const ExperimentConfig& c, bool include_out_dir) {
  ojson j;
  j["seed"] = c.seed;
  if (include_out_dir) j["out_dir"] = c.out_dir;
  ojson w = world_json(c.world);
  if (!c.world_seed_from_config) w.erase("world_seed");
  j["world"] = w;
  j["data"] = {{"train", c.data.train}, {"val", c.data.val}, {"test", c.data.test}};
  j["surr_fraction"] = c.surr_fraction;
  j["generator"] = generator_json(c.generator);
  j["human"] = human_json(c.human);
  j["surrogate"] = surrogate_json(c.surrogate);
  j["rating"] = {{"k", c.rating_k}};
  j["train"] = train_json(c.train);
  j["arms"] = c.arms;
  return j;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out) throw Error("failed writing " + p.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  try {
    world.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  if (data.train == 0) throw ConfigError("data.train must be positive");
  if (data.test == 0) throw ConfigError("data.test must be positive");
  if (!(surr_fraction > 0.0 && surr_fraction <= 1.0)) throw ConfigError("surr_fraction must be in (0, 1]");
  if (generator.embed_dim == 0) throw ConfigError("generator.embed_dim must be positive");
  if (generator.hidden_dim == 0) throw ConfigError("generator.hidden_dim must be positive");
  if (generator.max_decode_len == 0) throw ConfigError("generator.max_decode_len must be positive");
  if (generator.pretrain.batch_size == 0) throw ConfigError("generator.pretrain.batch_size must be positive");
  if (!(generator.pretrain.learning_rate > 0)) throw ConfigError("generator.pretrain.learning_rate must be positive");
  if (human.embed_dim == 0 || human.hidden_dim == 0 || human.scan_dim == 0)
    throw ConfigError("human dimensions must be positive");
  if (human.train.batch_size == 0) throw ConfigError("human.batch_size must be positive");
  if (!(human.train.learning_rate > 0)) throw ConfigError("human.learning_rate must be positive");
  if (surrogate.hidden_dim == 0 || surrogate.scan_dim == 0 || surrogate.mlp_dim == 0)
    throw ConfigError("surrogate dimensions must be positive");
  if (surrogate.train.batch_size == 0) throw ConfigError("surrogate.batch_size must be positive");
  if (!(surrogate.train.learning_rate > 0)) throw ConfigError("surrogate.learning_rate must be positive");
  if (!(surrogate.train.holdout_fraction >= 0 && surrogate.train.holdout_fraction < 1))
    throw ConfigError("surrogate.holdout_fraction must be in [0, 1)");
  if (rating_k < 2) throw ConfigError("rating.k must be at least 2");
  const auto surr_size =
      static_cast<std::size_t>(std::llround(surr_fraction * static_cast<double>(data.train)));
  if (rating_k > surr_size) {
    throw ConfigError("rating.k = " + std::to_string(rating_k) + " exceeds the surrogate subset size " +
                      std::to_string(surr_size));
  }
  if (!(train.lambda_weight >= 0.0)) throw ConfigError("train.lambda_weight must be >= 0");
  if (train.epochs == 0) throw ConfigError("train.epochs must be positive");
  if (train.batch_size < 2 || train.batch_size % 2 != 0) throw ConfigError("train.batch_size must be even and >= 2");
  if (!(train.learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
  if (!(train.temperature > 0)) throw ConfigError("train.temperature must be positive");
  if (arms.empty()) throw ConfigError("arms must name at least one arm");
  std::set<std::string> seen;
  for (const auto& a : arms) {
    if (std::find(kKnownArms.begin(), kKnownArms.end(), a) == kKnownArms.end())
      throw ConfigError("arms: unknown arm '" + a + "' (expected pretrained, finetuned or slog)");
    if (!seen.insert(a).second) throw ConfigError("arms: duplicate arm '" + a + "'");
  }
}

std::string ExperimentConfig::to_json() const { return config_json(*this, true).dump(2); }

ExperimentConfig parse_config_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("out_dir", c.out_dir);
  if (auto w = root.sub("world")) {
    w->get("num_labels", c.world.num_labels);
    w->get("num_nuisance", c.world.num_nuisance);
    w->get("feature_dim", c.world.feature_dim);
    w->get("noise_std", c.world.noise_std);
    w->get("ambiguous_prob", c.world.ambiguous_prob);
    w->get("signal_scale", c.world.signal_scale);
    w->get("max_findings_len", c.world.max_findings_len);
    c.world_seed_from_config = w->has("world_seed");
    w->get("world_seed", c.world.world_seed);
    w->finish();
  }
  if (auto d = root.sub("data")) {
    d->get("train", c.data.train);
    d->get("val", c.data.val);
    d->get("test", c.data.test);
    d->finish();
  }
  root.get("surr_fraction", c.surr_fraction);
  if (auto g = root.sub("generator")) {
    g->get("embed_dim", c.generator.embed_dim);
    g->get("hidden_dim", c.generator.hidden_dim);
    g->get("max_decode_len", c.generator.max_decode_len);
    if (auto p = g->sub("pretrain")) {
      p->get("epochs", c.generator.pretrain.epochs);
      p->get("batch_size", c.generator.pretrain.batch_size);
      p->get("learning_rate", c.generator.pretrain.learning_rate);
      p->finish();
    }
    g->finish();
  }
  if (auto h = root.sub("human")) {
    h->get("embed_dim", c.human.embed_dim);
    h->get("hidden_dim", c.human.hidden_dim);
    h->get("scan_dim", c.human.scan_dim);
    h->get("epochs", c.human.train.epochs);
    h->get("batch_size", c.human.train.batch_size);
    h->get("learning_rate", c.human.train.learning_rate);
    h->finish();
  }
  if (auto s = root.sub("surrogate")) {
    s->get("hidden_dim", c.surrogate.hidden_dim);
    s->get("scan_dim", c.surrogate.scan_dim);
    s->get("mlp_dim", c.surrogate.mlp_dim);
    s->get("epochs", c.surrogate.train.epochs);
    s->get("batch_size", c.surrogate.train.batch_size);
    s->get("learning_rate", c.surrogate.train.learning_rate);
    s->get("holdout_fraction", c.surrogate.train.holdout_fraction);
    s->finish();
  }
  if (auto r = root.sub("rating")) {
    r->get("k", c.rating_k);
    r->finish();
  }
  if (auto t = root.sub("train")) {
    t->get("lambda_weight", c.train.lambda_weight);
    t->get("epochs", c.train.epochs);
    t->get("batch_size", c.train.batch_size);
    t->get("learning_rate", c.train.learning_rate);
    t->get("temperature", c.train.temperature);
    t->finish();
  }
  root.get("arms", c.arms);
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig parse_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("configuration file not found: " + path.string());
  return parse_config_text(read_file(path));
}

std::string config_hash(const ExperimentConfig& config) { return hex64(fnv1a64(config_json(config, false).dump())); }

ExperimentConfig apply_overrides(ExperimentConfig c, const Overrides& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (o.arm) c.arms = {*o.arm};
  if (o.lambda_weight) c.train.lambda_weight = *o.lambda_weight;
  if (o.epochs) c.train.epochs = *o.epochs;
  c.validate();
  return c;
}

fs::path run_directory(const ExperimentConfig& config) {
  if (!config.out_dir.empty()) return config.out_dir;
  const char* root = std::getenv("SLOG_OUTPUT_ROOT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / ("seed_" + std::to_string(config.seed));
}

StageSeeds stage_seeds(std::uint64_t m) {
  return {derive_seed(m, 1), derive_seed(m, 2), derive_seed(m, 3), derive_seed(m, 4),
          derive_seed(m, 5), derive_seed(m, 6), derive_seed(m, 7), derive_seed(m, 8)};
}

world::WorldConfig effective_world(const ExperimentConfig& config) {
  world::WorldConfig w = config.world;
  if (!config.world_seed_from_config) w.world_seed = stage_seeds(config.seed).world;
  return w;
}

// ---------------------------------------------------------------------------
// Commands and manifest
// ---------------------------------------------------------------------------

namespace {

constexpr std::pair<Command, std::string_view> kCommandNames[] = {
    {Command::kGenData, "gen-data"}, {Command::kPretrain, "pretrain"},
    {Command::kElicit, "elicit"},    {Command::kTrainSurrogate, "train-surrogate"},
    {Command::kSlog, "slog"},        {Command::kBaseline, "baseline"},
    {Command::kEvaluate, "evaluate"}, {Command::kReport, "report"},
    {Command::kRunAll, "run-all"}};

}  // namespace

Command command_from_string(std::string_view name) {
  for (const auto& [c, n] : kCommandNames)
    if (n == name) return c;
  throw ConfigError("unknown command '" + std::string(name) + "'");
}

std::string_view to_string(Command c) {
  for (const auto& [k, n] : kCommandNames)
    if (k == c) return n;
  return "?";
}

const StageRecord* RunManifest::find(std::string_view stage) const {
  for (const auto& [name, r] : stages)
    if (name == stage) return &r;
  return nullptr;
}

void RunManifest::record(const std::string& stage, StageRecord r) {
  std::erase_if(stages, [&](const auto& s) { return s.first == stage; });
  stages.emplace_back(stage, std::move(r));
}

RunManifest load_manifest(const fs::path& run_dir) {
  RunManifest m;
  const fs::path p = run_dir / "manifest.json";
  if (!fs::exists(p)) return m;
  const auto j = nlohmann::json::parse(read_file(p));
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed");
  for (const auto& s : j.at("stages")) {
    StageRecord r;
    r.hash = s.at("hash").get<std::string>();
    r.completed_at = s.at("completed_at").get<std::string>();
    r.outputs = s.at("outputs").get<std::vector<std::string>>();
    m.stages.emplace_back(s.at("stage").get<std::string>(), std::move(r));
  }
  return m;
}

void save_manifest(const RunManifest& m, const fs::path& run_dir) {
  ojson j;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["config"] = "config.json";
  ojson stages = ojson::array();
  for (const auto& [name, r] : m.stages)
    stages.push_back({{"stage", name}, {"hash", r.hash}, {"completed_at", r.completed_at}, {"outputs", r.outputs}});
  j["stages"] = std::move(stages);
  write_file(run_dir / "manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace {

const char* arm_stage(const std::string& arm) {
  if (arm == "slog") return "slog";
  if (arm == "finetuned") return "baseline";
  return nullptr;
}

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& config, std::ostream& log)
      : cfg_(config), log_(log), dir_(run_directory(config)), seeds_(stage_seeds(config.seed)),
        world_cfg_(effective_world(config)) {
    cfg_.validate();
    fs::create_directories(dir_);
    manifest_ = load_manifest(dir_);
    manifest_.config_hash = config_hash(cfg_);
    manifest_.seed = cfg_.seed;
    write_file(dir_ / "config.json", cfg_.to_json() + "\n");
  }

  void run(Command c) {
    switch (c) {
      case Command::kGenData: stage("gen-data"); break;
      case Command::kPretrain: stage("pretrain"); break;
      case Command::kElicit: stage("elicit"); break;
      case Command::kTrainSurrogate: stage("train-surrogate"); break;
      case Command::kSlog: stage("slog"); break;
      case Command::kBaseline: stage("baseline"); break;
      case Command::kEvaluate: stage("evaluate"); break;
      case Command::kReport: stage("report"); break;
      case Command::kRunAll:
        for (const char* s : {"gen-data", "pretrain", "elicit", "train-surrogate"}) stage(s);
        for (const auto& arm : cfg_.arms)
          if (const char* s = arm_stage(arm)) stage(s);
        stage("evaluate");
        stage("report");
        break;
    }
  }

 private:
  // Dependencies and input hashes -------------------------------------------

  [[nodiscard]] std::vector<std::string> deps(const std::string& s) const {
    if (s == "gen-data") return {};
    if (s == "pretrain") return {"gen-data"};
    if (s == "elicit") return {"pretrain"};
    if (s == "train-surrogate") return {"elicit"};
    if (s == "slog" || s == "baseline") return {"train-surrogate"};
    if (s == "evaluate") {
      std::vector<std::string> d = {"train-surrogate"};
      for (const auto& arm : cfg_.arms)
        if (const char* a = arm_stage(arm)) d.emplace_back(a);
      return d;
    }
    if (s == "report") return {"evaluate"};
    throw Error("unknown stage " + s);
  }

  [[nodiscard]] std::string expected_hash(const std::string& s) const {
    ojson j;
    j["stage"] = s;
    for (const auto& d : deps(s)) j["after"][d] = expected_hash(d);
    if (s == "gen-data") {
      j["world"] = world_json(world_cfg_);
      j["data"] = {cfg_.data.train, cfg_.data.val, cfg_.data.test};
      j["surr_fraction"] = cfg_.surr_fraction;
      j["seed"] = cfg_.seed;
    } else if (s == "pretrain") {
      j["generator"] = generator_json(cfg_.generator);
    } else if (s == "elicit") {
      j["human"] = human_json(cfg_.human);
      j["k"] = cfg_.rating_k;
    } else if (s == "train-surrogate") {
      j["surrogate"] = surrogate_json(cfg_.surrogate);
    } else if (s == "slog" || s == "baseline") {
      ojson t = train_json(cfg_.train);
      if (s == "baseline") t.erase("lambda_weight");
      j["train"] = t;
    } else if (s == "evaluate") {
      j["arms"] = cfg_.arms;
    }
    return hex64(fnv1a64(j.dump()));
  }

  [[nodiscard]] bool outputs_present(const StageRecord& r) const {
    return std::all_of(r.outputs.begin(), r.outputs.end(), [&](const auto& o) { return fs::exists(dir_ / o); });
  }

  void stage(const std::string& s) {
    for (const auto& d : deps(s)) {
      const StageRecord* r = manifest_.find(d);
      if (!r || !outputs_present(*r)) {
        throw PrerequisiteError("stage '" + s + "' requires '" + d + "'; run '" + d + "' first");
      }
      if (r->hash != expected_hash(d)) {
        throw PrerequisiteError("stage '" + d + "' is out of date for this configuration; run '" + d + "' first");
      }
    }
    const std::string hash = expected_hash(s);
    if (const StageRecord* r = manifest_.find(s); r && r->hash == hash && outputs_present(*r)) {
      log_ << "[" << s << "] up to date\n";
      return;
    }
    log_ << "[" << s << "] running\n" << std::flush;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> outputs;
    if (s == "gen-data") outputs = gen_data();
    else if (s == "pretrain") outputs = pretrain();
    else if (s == "elicit") outputs = elicit();
    else if (s == "train-surrogate") outputs = fit_surrogate();
    else if (s == "slog") outputs = finetune("slog", cfg_.train.lambda_weight);
    else if (s == "baseline") outputs = finetune("finetuned", 0.0);
    else if (s == "evaluate") outputs = evaluate();
    else if (s == "report") outputs = report();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_ << "[" << s << "] done in " << secs << " s\n" << std::flush;
    manifest_.record(s, {hash, utc_now(), std::move(outputs)});
    save_manifest(manifest_, dir_);
  }

  // Loaders -----------------------------------------------------------------

  const world::World& the_world() {
    if (!world_) world_ = world::make_world(world_cfg_);
    return *world_;
  }
  const world::DatasetBundle& bundle() {
    if (!bundle_) bundle_ = world::load_bundle(dir_ / "data", the_world());
    return *bundle_;
  }
  std::vector<world::Instance> surr_instances() {
    std::vector<world::Instance> out;
    for (std::size_t i : bundle().surr_indices) out.push_back(bundle().train[i]);
    return out;
  }
  models::Generator pretrained() { return models::load_generator(dir_ / "models" / "generator_pretrained.json"); }

  // Stages ------------------------------------------------------------------

  std::vector<std::string> gen_data() {
    const auto& w = the_world();
    auto instances = world::sample_instances(w, cfg_.data.total(), seeds_.sample);
    const double n = static_cast<double>(cfg_.data.total());
    const world::SplitRatios ratios{static_cast<double>(cfg_.data.train) / n, static_cast<double>(cfg_.data.val) / n,
                                    static_cast<double>(cfg_.data.test) / n};
    auto b = world::partition_dataset(std::move(instances), ratios, cfg_.surr_fraction, seeds_.partition);
    for (const auto& msg : b.warnings) warn(msg);
    world::save_bundle(b, w, dir_ / "data", seeds_.partition, manifest_.config_hash);
    bundle_ = std::move(b);
    return {"data/bundle.json",      "data/train.jsonl",      "data/val.jsonl",       "data/test.jsonl",
            "data/oracle_train.jsonl", "data/oracle_val.jsonl", "data/oracle_test.jsonl"};
  }

  std::vector<std::string> pretrain() {
    auto arch = models::generator_config_for(the_world(), cfg_.generator.max_decode_len);
    arch.embed_dim = cfg_.generator.embed_dim;
    arch.hidden_dim = cfg_.generator.hidden_dim;
    train::PretrainConfig pc = cfg_.generator.pretrain;
    pc.seed = seeds_.pretrain;
    std::vector<double> curve;
    const auto gen = train::pretrain_generator(bundle().train, arch, pc, &curve);
    models::save_generator(gen, dir_ / "models" / "generator_pretrained.json");
    write_file(dir_ / "models" / "pretrain_curve.json", ojson{{"loss", curve}}.dump(2) + "\n");
    log_ << "  pretrain loss " << curve.front() << " -> " << curve.back() << "\n";
    return {"models/generator_pretrained.json", "models/generator_pretrained.arch.json", "models/pretrain_curve.json"};
  }

  models::HumanConfig human_arch() {
    auto a = models::human_config_for(the_world());
    a.embed_dim = cfg_.human.embed_dim;
    a.hidden_dim = cfg_.human.hidden_dim;
    a.scan_dim = cfg_.human.scan_dim;
    return a;
  }

  std::vector<std::string> elicit() {
    const auto gen = pretrained();
    const auto subset = surr_instances();
    ratings::RatingConfig rc;
    rc.k = cfg_.rating_k;
    rc.human = cfg_.human.train;
    rc.seed = seeds_.ratings;
    const auto arch = human_arch();
    const auto e = ratings::elicit_quality_ratings(subset, gen, arch, rc);
    ratings::check_no_leakage(e);
    ratings::save_ratings(e.records, dir_ / "ratings");

    ojson folds = ojson::array();
    for (std::size_t f = 0; f < e.folds.size(); ++f) {
      std::vector<std::string> rated;
      for (std::size_t i : e.folds[f]) rated.push_back(subset[i].id);
      folds.push_back({{"fold", f}, {"rated", rated}, {"trained_on", e.fold_training_ids[f]}});
    }
    write_file(dir_ / "ratings" / "folds.json", folds.dump(2) + "\n");
    const double gt = ratings::mean_quality(e.records, ratings::TextSource::kGroundTruth);
    const double gn = ratings::mean_quality(e.records, ratings::TextSource::kGenerated);
    write_file(dir_ / "ratings" / "summary.json",
               ojson{{"records", e.records.size()}, {"mean_q_ground_truth", gt}, {"mean_q_generated", gn}}.dump(2) +
                   "\n");
    log_ << "  ratings: " << e.records.size() << " records, mean q ground truth " << gt << ", generated " << gn
         << "\n";

    // Final reader, trained on the whole surrogate subset.
    std::vector<const world::Instance*> ptrs;
    for (const auto& i : subset) ptrs.push_back(&i);
    auto hc = cfg_.human.train;
    hc.seed = seeds_.final_human;
    const auto human = ratings::train_human_model(ratings::human_examples(ptrs), arch, hc);
    models::save_human(human, dir_ / "models" / "human.json");
    return {"ratings/ratings.jsonl",  "ratings/z.bin",     "ratings/z_manifest.json", "ratings/folds.json",
            "ratings/summary.json",   "models/human.json", "models/human.arch.json"};
  }

  std::vector<std::string> fit_surrogate() {
    const auto gen = pretrained();
    const auto records = ratings::load_ratings(dir_ / "ratings");
    auto arch = models::surrogate_config_for(the_world(), gen.config);
    arch.hidden_dim = cfg_.surrogate.hidden_dim;
    arch.scan_dim = cfg_.surrogate.scan_dim;
    arch.mlp_dim = cfg_.surrogate.mlp_dim;
    auto sc = cfg_.surrogate.train;
    sc.seed = seeds_.surrogate;
    const auto fit = ratings::train_surrogate(records, arch, sc, gen.params.at("gen/embed"));
    models::save_surrogate(fit.model, dir_ / "models" / "surrogate.json");
    write_file(dir_ / "models" / "surrogate_fit.json", ojson{{"loss", fit.loss_curve},
                                                             {"holdout_size", fit.holdout.size()},
                                                             {"holdout_accuracy", fit.holdout_accuracy},
                                                             {"holdout_nll", fit.holdout_nll}}
                                                           .dump(2) +
                                                           "\n");
    log_ << "  surrogate holdout accuracy " << fit.holdout_accuracy << "\n";
    return {"models/surrogate.json", "models/surrogate.arch.json", "models/surrogate_fit.json"};
  }

  std::vector<std::string> finetune(const std::string& arm, double lambda) {
    const auto gen = pretrained();
    const auto surr = models::load_surrogate(dir_ / "models" / "surrogate.json");
    const auto& train_split = bundle().train;
    const auto ft = models::stack_features(train_split);
    train::TrainConfig tc = cfg_.train;
    tc.lambda_weight = lambda;
    tc.seed = seeds_.finetune;
    const fs::path arm_dir = dir_ / "arms" / arm;
    fs::remove_all(arm_dir);
    const auto result =
        train::slog_train(gen, surr, train_split, ft, tc, {arm_dir / "train_log.jsonl", arm_dir / "checkpoints"});
    models::save_generator(result.gen, arm_dir / "generator.json");
    ojson rounds = ojson::array();
    for (const auto& r : result.rounds) rounds.push_back(ojson::parse(train::round_stats_to_json(r)));
    write_file(arm_dir / "rounds.json", ojson{{"lambda_weight", lambda}, {"rounds", rounds}}.dump(2) + "\n");
    const auto& last = result.rounds.back();
    log_ << "  " << arm << " final epoch: ce " << last.caption_ce << ", quality " << last.quality << "\n";

    std::vector<std::string> out = {"arms/" + arm + "/train_log.jsonl", "arms/" + arm + "/rounds.json",
                                    "arms/" + arm + "/generator.json", "arms/" + arm + "/generator.arch.json"};
    for (std::size_t e = 1; e <= tc.epochs; ++e) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%02zu.json", e);
      out.push_back("arms/" + arm + "/checkpoints/" + name);
    }
    return out;
  }

  fs::path arm_generator(const std::string& arm) const {
    if (arm == "pretrained") return dir_ / "models" / "generator_pretrained.json";
    return dir_ / "arms" / arm / "generator.json";
  }

  std::vector<std::string> evaluate() {
    const auto surr = models::load_surrogate(dir_ / "models" / "surrogate.json");
    const auto human = models::load_human(dir_ / "models" / "human.json");
    std::vector<std::string> out;
    for (const auto& arm : cfg_.arms) {
      const auto gen = models::load_generator(arm_generator(arm));
      const auto r = eval::evaluate_arm(arm, gen, surr, human, bundle().test);
      write_file(dir_ / "eval" / (arm + ".json"), eval::report_to_json(r) + "\n");
      log_ << "  " << arm << ": quality " << r.quality_mean << ", BLEU-4 " << r.bleu.bleu[3] << ", micro F1 "
           << r.decisions.micro.f1 << "\n";
      out.push_back("eval/" + arm + ".json");
    }
    return out;
  }

  std::vector<std::string> report() {
    std::vector<eval::EvalReport> reports;
    for (const auto& arm : cfg_.arms) reports.push_back(eval::report_from_json(read_file(dir_ / "eval" / (arm + ".json"))));
    ojson ctx;
    ctx["seed"] = cfg_.seed;
    ctx["config_hash"] = manifest_.config_hash;
    ctx["ratings"] = ojson::parse(read_file(dir_ / "ratings" / "summary.json"));
    const auto fit = ojson::parse(read_file(dir_ / "models" / "surrogate_fit.json"));
    ctx["surrogate"] = {{"holdout_accuracy", fit.at("holdout_accuracy")}, {"holdout_nll", fit.at("holdout_nll")}};
    ojson training = ojson::object();
    for (const auto& arm : cfg_.arms) {
      if (!arm_stage(arm)) continue;
      training[arm] = ojson::parse(read_file(dir_ / "arms" / arm / "rounds.json"));
    }
    ctx["training"] = std::move(training);
    eval::emit_report(reports, dir_, ctx.dump());
    return {"report.md", "report.json"};
  }

  ExperimentConfig cfg_;
  std::ostream& log_;
  fs::path dir_;
  StageSeeds seeds_;
  world::WorldConfig world_cfg_;
  RunManifest manifest_;
  std::optional<world::World> world_;
  std::optional<world::DatasetBundle> bundle_;
};

}  // namespace

void run_command(Command command, const ExperimentConfig& config, std::ostream& log) {
  Pipeline(config, log).run(command);
}

}  // namespace slog::experiment

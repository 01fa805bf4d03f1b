#include "wmlab/pipeline.hpp"

#include "wmlab/errors.hpp"
#include "wmlab/packed_io.hpp"
#include "wmlab/remote.hpp"

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#ifndef WMLAB_DEFAULT_DATA_DIR
#define WMLAB_DEFAULT_DATA_DIR "data"
#endif

namespace wmlab {

using nlohmann::json;

namespace {

constexpr Shape kImageShape{3, 32, 32};

template <typename... Args>
void say(const RunContext& ctx, const Args&... args) {
  if (ctx.log == nullptr) return;
  ((*ctx.log) << ... << args) << std::endl;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int num_classes_of(const std::string& source) {
  if (source == "cifar10" || source == "synthetic") return 10;
  throw ConfigError("unknown dataset source '" + source + "'");
}

/// Writes into a scratch directory and renames it into place once complete.
class StagedDir {
 public:
  explicit StagedDir(fs::path final_dir) : final_(std::move(final_dir)) {
    tmp_ = final_;
    tmp_ += ".tmp-" + std::to_string(::getpid());
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~StagedDir() {
    std::error_code ec;
    if (!committed_) fs::remove_all(tmp_, ec);
  }
  const fs::path& path() const { return tmp_; }
  void commit() {
    std::error_code ec;
    fs::rename(tmp_, final_, ec);
    if (ec) fs::remove_all(tmp_, ec);
    committed_ = true;
  }

 private:
  fs::path final_, tmp_;
  bool committed_ = false;
};

json read_json(const fs::path& p) { return json::parse(read_text_file(p)); }

void write_json(const fs::path& p, const json& j) { write_text_file(p, j.dump(1) + "\n"); }

json manifest(const std::string& verb, const std::string& key, const ExperimentConfig& cfg, const fs::path& dir,
              const std::vector<std::string>& files, json extra = json::object()) {
  json artifacts = json::object();
  for (const auto& f : files) artifacts[f] = sha256_file(dir / f);
  json m = {{"verb", verb}, {"key", key}, {"config_hash", cfg.full_hash()}, {"config", cfg.to_json()}, {"artifacts", artifacts}};
  m.update(extra);
  return m;
}

Dataset load_named(const fs::path& data_root, const std::string& rel) {
  const fs::path dir = data_root / rel;
  if (!fs::exists(dir / "meta.json"))
    throw MissingArtifact("dataset " + dir.string() + " not found; run tools/fetch_data.py --out " + data_root.string());
  return load_dataset(dir);
}

Dataset pool_from(const std::string& source, std::size_t count, const fs::path& data_root, std::uint64_t seed, Split split) {
  Dataset d;
  if (source == "abstract") {
    d = make_abstract_images(count, kImageShape, seed);
  } else if (source == "ood") {
    d = load_named(data_root, "ood");
  } else if (source == "mnist") {
    const Dataset m = load_named(data_root, "mnist/train");
    auto idx = shuffled_indices(m.size(), seed);
    idx.resize(std::min(idx.size(), std::max<std::size_t>(count, 1)));
    d = make_unrelated_triggers(subset(m, idx), 0, idx.size(), kImageShape);
    d.name = "mnist";
  } else if (source == "synthetic") {
    d = make_synthetic_dataset(count, seed, split);
  } else {
    throw ConfigError("unknown image source '" + source + "'");
  }
  d.split = split;
  d.labels_ignored = true;
  return d;
}

}  // namespace

fs::path default_cache_root() {
  if (const char* env = std::getenv("WMLAB_CACHE"); env && *env) return env;
  return "wmlab-cache";
}

fs::path default_data_root() {
  if (const char* env = std::getenv("WMLAB_DATA"); env && *env) return env;
  return WMLAB_DEFAULT_DATA_DIR;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
  const std::string digest = sha256_hex(std::to_string(seed) + "/" + purpose);
  return std::stoull(digest.substr(0, 15), nullptr, 16);
}

Dataset make_synthetic_dataset(std::size_t count, std::uint64_t seed, Split split) {
  Dataset d;
  d.name = "synthetic";
  d.split = split;
  d.num_classes = 10;
  d.shape = kImageShape;
  d.provenance = "synthetic:seed=" + std::to_string(seed);
  d.pixels.resize(kImageShape.size(), static_cast<Eigen::Index>(count));
  d.labels.resize(count);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.08f);
  std::uniform_real_distribution<float> phase(0.0f, 6.2831853f);
  for (std::size_t n = 0; n < count; ++n) {
    const int c = static_cast<int>(n % 10);
    d.labels[n] = c;
    const float angle = static_cast<float>(c) * 0.314159f;
    const float freq = 0.35f + 0.05f * static_cast<float>(c % 5);
    const float ph = phase(rng);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const float s = 0.5f + 0.5f * std::sin(freq * (std::cos(angle) * static_cast<float>(x) + std::sin(angle) * static_cast<float>(y)) + ph);
        for (int ch = 0; ch < 3; ++ch) {
          const float base = 0.2f + 0.6f * static_cast<float>((c * (ch + 3)) % 10) / 9.0f;
          d.pixels((y * 32 + x) * 3 + ch, static_cast<Eigen::Index>(n)) = std::clamp(0.5f * base + 0.45f * s + noise(rng), 0.0f, 1.0f);
        }
      }
  }
  return d;
}

VictimData prepare_victim_data(const ExperimentConfig& cfg, const fs::path& data_root) {
  const auto& dc = cfg.dataset;
  const int classes = num_classes_of(dc.source);
  Dataset full_train, test;
  if (dc.source == "cifar10") {
    full_train = load_named(data_root, "cifar10/train");
    test = load_named(data_root, "cifar10/test");
  } else {
    full_train = make_synthetic_dataset(dc.train_size, derive_seed(cfg.seed, "synthetic-train"), Split::kTrain);
    test = make_synthetic_dataset(dc.test_size > 0 ? dc.test_size : 2000, derive_seed(cfg.seed, "synthetic-test"), Split::kTest);
  }
  VictimData v;
  if (dc.train_size >= full_train.size()) {
    v.train = std::move(full_train);
  } else {
    const auto idx = stratified_sample(full_train, dc.train_size, derive_seed(cfg.seed, "train-subset"));
    v.train = subset(full_train, idx, full_train.name + "-train");
    full_train = Dataset{};
  }
  v.train.split = Split::kTrain;

  if (dc.proxy.mode == "id") {
    auto [proxy, eval] = proxy_mode_split(test, derive_seed(cfg.seed, "id-split"));
    v.id_proxy = std::move(proxy);
    v.eval = std::move(eval);
  } else {
    v.eval = std::move(test);
  }
  if (dc.test_size > 0 && dc.test_size < v.eval.size()) {
    const auto idx = stratified_sample(v.eval, dc.test_size, derive_seed(cfg.seed, "eval-subset"));
    v.eval = subset(v.eval, idx);
  }
  if (v.eval.split != Split::kEval) v.eval.split = Split::kTest;
  if (dc.trace_size > 0) {
    auto idx = shuffled_indices(v.eval.size(), derive_seed(cfg.seed, "trace-subset"));
    idx.resize(std::min(idx.size(), dc.trace_size));
    v.trace = subset(v.eval, idx, v.eval.name + "-trace");
  }

  const auto& tc = dc.trigger;
  const std::uint64_t tseed = derive_seed(cfg.seed, "triggers");
  if (cfg.watermark.count == 0) {
    v.triggers.name = "no-triggers";
    v.triggers.split = Split::kTrigger;
    v.triggers.shape = kImageShape;
    v.triggers.pixels.resize(kImageShape.size(), 0);
  } else if (tc.kind == TriggerKind::kContent) {
    v.triggers = synthesize_triggers(v.train, content_trigger_spec(kImageShape, cfg.watermark.target_label, cfg.watermark.count, tseed, tc.stamp));
  } else if (tc.kind == TriggerKind::kNoise) {
    v.triggers = synthesize_triggers(
        v.train, noise_trigger_spec(kImageShape, cfg.watermark.target_label, cfg.watermark.count, tseed, static_cast<float>(tc.noise_std), tc.patch));
  } else {
    Dataset source;
    if (tc.unrelated_source == "mnist") {
      const Dataset m = filter_label(load_named(data_root, "mnist/train"), tc.unrelated_label);
      auto idx = shuffled_indices(m.size(), tseed);
      source = subset(m, idx);
    } else {
      source = pool_from(tc.unrelated_source, cfg.watermark.count, data_root, tseed, Split::kTrain);
    }
    v.triggers = make_unrelated_triggers(source, cfg.watermark.target_label, cfg.watermark.count, kImageShape);
  }
  v.triggers.num_classes = classes;
  v.triggers.validate();
  return v;
}

AttackerData prepare_attacker_data(const ExperimentConfig& cfg, const fs::path& data_root, const VictimData& victim_data) {
  const auto& pc = cfg.dataset.proxy;
  const int classes = num_classes_of(cfg.dataset.source);
  AttackerData a;
  const std::size_t wanted = pc.n_proxy + pc.n_holdout;
  if (pc.mode == "id") {
    a.proxy_pool = victim_data.id_proxy;
  } else {
    a.proxy_pool = pool_from(pc.source, wanted, data_root, derive_seed(cfg.seed, "proxy-pool"), Split::kProxy);
  }
  a.lure_pool = pool_from(pc.lure_source, std::max<std::size_t>(pc.n_lures, 100), data_root, derive_seed(cfg.seed, "lure-pool"),
                          Split::kLure);
  if (a.proxy_pool.size() < wanted)
    throw ConfigError("proxy pool has " + std::to_string(a.proxy_pool.size()) + " images, need " + std::to_string(wanted));
  a.aux = build_auxiliary(a.proxy_pool, a.lure_pool, wanted, pc.n_lures, cfg.attack.resolved_delta(classes), classes,
                          derive_seed(cfg.seed, "aux") + cfg.attack.seed);
  if (pc.n_holdout > 0) {
    std::vector<std::size_t> hold(pc.n_holdout), keep(pc.n_proxy);
    for (std::size_t i = 0; i < pc.n_proxy; ++i) keep[i] = i;
    for (std::size_t i = 0; i < pc.n_holdout; ++i) hold[i] = pc.n_proxy + i;
    a.holdout = subset(a.aux.proxy, hold, a.aux.proxy.name + "-holdout");
    a.aux.proxy = subset(a.aux.proxy, keep);
  }
  return a;
}

TappedClassifier<float> load_verified_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact("checkpoint " + path.string() + " does not exist");
  const fs::path m = path.parent_path() / "manifest.json";
  if (fs::exists(m)) {
    const json man = read_json(m);
    const std::string name = path.filename().string();
    if (man.contains("artifacts") && man["artifacts"].contains(name)) {
      const std::string want = man["artifacts"][name].get<std::string>();
      if (sha256_file(path) != want) throw HashMismatch("checkpoint " + path.string() + " does not match its manifest");
    }
  }
  return load_checkpoint<float>(path);
}

EmbedOutcome cmd_embed(const RunContext& ctx) {
  const ExperimentConfig& cfg = ctx.config;
  const std::string key = cfg.embed_key();
  const fs::path dir = ctx.cache_root / ("embed-" + key);
  if (fs::exists(dir / "manifest.json")) {
    const json man = read_json(dir / "manifest.json");
    EmbedOutcome out{dir, load_verified_checkpoint(dir / "victim.wmck"), {}, {}, 0, 0, true};
    if (fs::exists(dir / "triggers" / "meta.json")) out.triggers = load_dataset(dir / "triggers");
    for (const auto& r : read_json(dir / "trace.json")) {
      EpochRecord e;
      e.epoch = r.at("epoch").get<int>();
      e.lr = r.at("lr").get<double>();
      e.loss = r.at("loss").get<double>();
      e.mta = r.at("mta").get<double>();
      e.wma = r.at("wma").get<double>();
      e.seconds = r.at("seconds").get<double>();
      out.trace.push_back(e);
    }
    out.mta = man.at("metrics").at("mta").get<double>();
    out.wma = man.at("metrics").at("wma").get<double>();
    say(ctx, "embed: cache hit ", dir.string());
    return out;
  }

  say(ctx, "embed: preparing data (", cfg.dataset.source, ", ", cfg.dataset.train_size, " training images)");
  VictimData vd = prepare_victim_data(cfg, ctx.data_root);
  ModelSpec spec{cfg.model.arch, kImageShape, num_classes_of(cfg.dataset.source), derive_seed(cfg.seed, "init")};
  TappedClassifier<float> model = build_model<float>(spec);
  if (!cfg.model.tap.empty()) model.set_tap_layer(cfg.model.tap);
  TrainConfig tc = cfg.watermark.train;
  tc.seed = derive_seed(cfg.seed, "train-order") + cfg.watermark.train.seed;
  WatermarkTask task{vd.triggers, cfg.watermark.target_label, cfg.watermark.tau, cfg.watermark.alpha};
  const auto on_epoch = [&](const EpochRecord& r) {
    say(ctx, "embed: epoch ", r.epoch, "/", tc.epochs, " loss ", fixed(r.loss), " mta ", fixed(r.mta), " wma ", fixed(r.wma), " (",
        fixed(r.seconds, 1), " s)");
  };
  const Dataset* trace_set = vd.trace.empty() ? nullptr : &vd.trace;
  auto trace = embed_watermark(model, vd.train, task, tc, trace_set, on_epoch);
  model.provenance = "embed:" + key;

  EmbedOutcome out{dir, std::move(model), vd.triggers, std::move(trace), 0, -1, false};
  out.mta = mta(out.victim, vd.eval);
  if (!vd.triggers.empty()) out.wma = wma(out.victim, vd.triggers);
  say(ctx, "embed: final mta ", fixed(out.mta), " wma ", fixed(out.wma));

  StagedDir stage(dir);
  save_checkpoint(out.victim, stage.path() / "victim.wmck");
  std::vector<std::string> files = {"victim.wmck", "trace.json"};
  if (!vd.triggers.empty()) {
    save_dataset(vd.triggers, stage.path() / "triggers", key, cfg.seed);
    files.push_back("triggers/images.wmt");
  }
  json trace_json = json::array();
  for (const auto& r : out.trace) trace_json.push_back(to_json(r));
  write_json(stage.path() / "trace.json", trace_json);
  write_json(stage.path() / "manifest.json",
             manifest("embed", key, cfg, stage.path(), files, {{"metrics", {{"mta", out.mta}, {"wma", out.wma}}}}));
  stage.commit();
  return out;
}

namespace {

struct VictimRef {
  TappedClassifier<float> model;
  std::string id;
  Dataset triggers;
};

VictimRef resolve_victim(const RunContext& ctx, const std::optional<fs::path>& ckpt) {
  if (ckpt) {
    VictimRef v{load_verified_checkpoint(*ckpt), sha256_file(*ckpt).substr(0, 16), {}};
    const fs::path t = ckpt->parent_path() / "triggers";
    if (fs::exists(t / "meta.json")) v.triggers = load_dataset(t);
    return v;
  }
  EmbedOutcome e = cmd_embed(ctx);
  return {std::move(e.victim), ctx.config.embed_key(), std::move(e.triggers)};
}

SearchSpace search_space(const SearchConfig& s) {
  SearchSpace space;
  space.ranges = s.ranges;
  space.target = s.target;
  space.ratio = s.ratio;
  space.max_steps = s.max_steps;
  return space;
}

}  // namespace

AttackOutcome cmd_attack(const RunContext& ctx, const std::optional<fs::path>& victim_ckpt) {
  const ExperimentConfig& cfg = ctx.config;
  VictimRef victim = resolve_victim(ctx, victim_ckpt);
  const std::string key = json_hash({{"attack", cfg.attack_key()}, {"victim", victim.id}}).substr(0, 16);
  const fs::path dir = ctx.cache_root / ("attack-" + key);
  for (const auto& w : cfg.warnings()) say(ctx, "warning: ", w);
  if (fs::exists(dir / "manifest.json")) {
    say(ctx, "attack: cache hit ", dir.string());
    return {dir, load_verified_checkpoint(dir / "attacked.wmck"), attack_report_from_json(read_json(dir / "report.json")), true};
  }

  VictimData vd = prepare_victim_data(cfg, ctx.data_root);
  if (!victim.triggers.empty()) vd.triggers = victim.triggers;
  AttackerData ad = prepare_attacker_data(cfg, ctx.data_root, vd);

  ADConfig acfg = cfg.attack;
  if (acfg.tap_layer.empty() && !cfg.model.tap.empty()) acfg.tap_layer = cfg.model.tap;

  json search = nullptr;
  bool any_range = false;
  for (const auto& r : cfg.search.ranges) any_range = any_range || r.has_value();
  if (cfg.search.enabled && any_range) {
    if (ad.holdout.empty()) throw ConfigError("lambda search needs dataset.proxy.n_holdout > 0");
    say(ctx, "attack: lambda search (", cfg.search.epochs, " epochs per probe)");
    const auto scorer = agreement_scorer(victim.model, ad.aux, ad.holdout, cfg.search.epochs);
    const auto logged = [&](const ADConfig& c) {
      const double s = scorer(c);
      say(ctx, "attack: probe l1=", c.lambda1, " l2=", c.lambda2, " l3=", c.lambda3, " agreement ", fixed(s));
      return s;
    };
    const auto start = std::chrono::steady_clock::now();
    const SearchResult sr = lambda_search(acfg, search_space(cfg.search), logged);
    acfg.lambda1 = sr.best.lambda1;
    acfg.lambda2 = sr.best.lambda2;
    acfg.lambda3 = sr.best.lambda3;
    search = to_json(sr);
    search["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }

  AttackHooks hooks;
  hooks.eval_set = &vd.eval;
  hooks.triggers = vd.triggers.empty() ? nullptr : &vd.triggers;
  hooks.trace_set = vd.trace.empty() ? nullptr : &vd.trace;
  hooks.per_epoch_metrics = true;
  hooks.epsilon_forget = cfg.eval.epsilon_forget;
  hooks.negl = cfg.eval.negl;
  hooks.on_epoch = [&](const AttackEpoch& e) {
    say(ctx, "attack: epoch ", e.epoch, "/", acfg.finetune.epochs, " total ", fixed(e.loss.total), " lure ", fixed(e.loss.lure), " kl ",
        fixed(e.loss.kl), " align ", fixed(e.loss.align), " penalty ", fixed(e.loss.penalty), " mta ", fixed(e.mta), " wma ",
        fixed(e.wma));
  };
  say(ctx, "attack: ", to_string(acfg.variant), " with l1=", acfg.lambda1, " l2=", acfg.lambda2, " l3=", acfg.lambda3);
  AttackResult result = run_attack(victim.model, ad.aux, acfg, hooks);
  result.report.search = search;
  if (!cfg.warnings().empty()) result.report.warnings = cfg.warnings();
  result.report.checkpoints = {"attacked.wmck"};
  if (result.report.sfw)
    say(ctx, "attack: mta ", fixed(result.report.mta_before), " -> ", fixed(result.report.mta_after), ", wma ",
        fixed(result.report.wma_before), " -> ", fixed(result.report.wma_after), ", forget_ok ", result.report.sfw->forget_ok,
        " fidelity_ok ", result.report.sfw->fidelity_ok);

  StagedDir stage(dir);
  save_checkpoint(result.model, stage.path() / "attacked.wmck");
  write_json(stage.path() / "report.json", to_json(result.report));
  write_json(stage.path() / "manifest.json",
             manifest("attack", key, cfg, stage.path(), {"attacked.wmck", "report.json"}, {{"victim", victim.id}}));
  stage.commit();
  return {dir, std::move(result.model), std::move(result.report), false};
}

VerifyOutcome cmd_verify(const RunContext& ctx, const std::optional<fs::path>& ckpt, const std::string& remote_url,
                         double timeout_seconds, int retries) {
  const ExperimentConfig& cfg = ctx.config;
  Dataset triggers;
  const fs::path embed_triggers = ctx.cache_root / ("embed-" + cfg.embed_key()) / "triggers";
  if (fs::exists(embed_triggers / "meta.json"))
    triggers = load_dataset(embed_triggers);
  else
    triggers = prepare_victim_data(cfg, ctx.data_root).triggers;
  if (triggers.empty()) throw ConfigError("the configuration defines no triggers (watermark.count = 0)");

  VerifyOutcome out;
  out.tau = cfg.watermark.tau;
  out.triggers = triggers.size();
  if (!remote_url.empty()) {
    out.source = remote_url;
    out.result = verify(remote_predictor({remote_url, timeout_seconds, retries}), triggers, cfg.watermark.target_label, cfg.watermark.tau);
  } else {
    TappedClassifier<float> model = ckpt ? load_verified_checkpoint(*ckpt) : cmd_embed(ctx).victim;
    out.source = ckpt ? ckpt->string() : "embed-" + cfg.embed_key();
    out.result = verify(local_predictor(model), triggers, cfg.watermark.target_label, cfg.watermark.tau);
  }
  say(ctx, "verify: ", out.source, " trigger accuracy ", fixed(out.result.accuracy), " owned ", out.result.owned);
  return out;
}

EvalOutcome cmd_eval(const RunContext& ctx, const std::optional<fs::path>& victim_ckpt, const std::optional<fs::path>& attacked_ckpt) {
  const ExperimentConfig& cfg = ctx.config;
  VictimRef victim = resolve_victim(ctx, victim_ckpt);
  TappedClassifier<float> attacked = attacked_ckpt ? load_verified_checkpoint(*attacked_ckpt) : cmd_attack(ctx, victim_ckpt).attacked;
  const std::string attacked_id = parameter_hash(attacked).substr(0, 16);
  const std::string key = json_hash({{"victim", victim.id},
                                     {"attacked", attacked_id},
                                     {"eps", cfg.eval.epsilon_forget},
                                     {"negl", cfg.eval.negl},
                                     {"data", cfg.embed_key()}})
                              .substr(0, 16);
  const fs::path dir = ctx.cache_root / ("eval-" + key);
  EvalOutcome out;
  out.dir = dir;
  if (fs::exists(dir / "sfw.json")) {
    out.sfw = sfw_report_from_json(read_json(dir / "sfw.json"));
    out.table = result_table_from_json(read_json(dir / "eval.json"));
    say(ctx, "eval: cache hit ", dir.string());
    return out;
  }
  VictimData vd = prepare_victim_data(cfg, ctx.data_root);
  if (!victim.triggers.empty()) vd.triggers = victim.triggers;
  if (vd.triggers.empty()) throw ConfigError("the configuration defines no triggers (watermark.count = 0)");
  out.sfw = sfw_check(attacked, victim.model, vd.eval, vd.triggers, cfg.eval.epsilon_forget, cfg.eval.negl);
  ResultRow row;
  row.name = "eval";
  row.variant = attacked.provenance;
  row.delta = attacked.expanded() ? attacked.num_classes() : -1;
  row.seed = cfg.seed;
  row.mta_victim = out.sfw.mta_victim;
  row.wma_victim = out.sfw.wma_victim;
  row.mta = out.sfw.mta_attacked;
  row.wma = out.sfw.wma_attacked;
  row.wma_first_c = out.sfw.wma_attacked_first_c;
  row.forget_ok = out.sfw.forget_ok;
  row.fidelity_ok = out.sfw.fidelity_ok;
  out.table.name = "eval";
  out.table.rows.push_back(row);
  StagedDir stage(dir);
  write_json(stage.path() / "sfw.json", to_json(out.sfw));
  render_report(out.table, stage.path());
  stage.commit();
  say(ctx, "eval: victim ", mta_wma_cell(out.sfw.mta_victim, out.sfw.wma_victim), " attacked ",
      mta_wma_cell(out.sfw.mta_attacked, out.sfw.wma_attacked), " forget_ok ", out.sfw.forget_ok, " fidelity_ok ",
      out.sfw.fidelity_ok);
  return out;
}

std::vector<ResultTable> cmd_ablate(const RunContext& ctx, const std::vector<std::string>& sweeps) {
  const ExperimentConfig& cfg = ctx.config;
  const AttackOutcome base = cmd_attack(ctx);
  ADConfig acfg = ad_config_from_json(base.report.config);
  const EmbedOutcome emb = cmd_embed(ctx);
  VictimData vd = prepare_victim_data(cfg, ctx.data_root);
  if (!emb.triggers.empty()) vd.triggers = emb.triggers;
  const AttackerData ad = prepare_attacker_data(cfg, ctx.data_root, vd);
  const std::string key = json_hash({{"attack", base.report.attacked_hash}, {"sweeps", cfg.to_json()["eval"]["sweeps"]}}).substr(0, 16);
  const fs::path dir = ctx.cache_root / ("ablate-" + key);
  fs::create_directories(dir);

  SweepContext sc;
  sc.victim = &emb.victim;
  sc.proxy_pool = &ad.proxy_pool;
  sc.lure_pool = &ad.lure_pool;
  sc.eval_set = &vd.eval;
  sc.triggers = &vd.triggers;
  sc.n_proxy = cfg.dataset.proxy.n_proxy;
  sc.n_lures = cfg.dataset.proxy.n_lures;
  sc.data_seed = derive_seed(cfg.seed, "aux");
  sc.epsilon_forget = cfg.eval.epsilon_forget;
  sc.negl = cfg.eval.negl;
  sc.jobs = ctx.jobs;
  sc.work_dir = dir / "work";

  std::vector<ResultTable> tables;
  for (const auto& name : sweeps) {
    if (fs::exists(dir / (name + ".json"))) {
      say(ctx, "ablate: cache hit ", name);
      tables.push_back(result_table_from_json(read_json(dir / (name + ".json"))));
      continue;
    }
    say(ctx, "ablate: running ", name);
    ResultTable t;
    const auto& sw = cfg.eval.sweeps;
    if (name == "lure_budget") t = sweep_lure_budget(sc, acfg, sw.lure_budgets);
    else if (name == "proxy_budget") t = sweep_proxy_budget(sc, acfg, sw.proxy_budgets);
    else if (name == "lure_label") t = sweep_lure_label(sc, acfg, sw.lure_labels);
    else if (name == "variants") t = sweep_variants(sc, acfg, sw.variants, sw.seeds);
    else throw ConfigError("unknown sweep '" + name + "' (lure_budget, proxy_budget, lure_label, variants)");
    for (const auto& r : t.rows)
      say(ctx, "ablate: ", name, " ", r.variant, " ", r.parameter, "=", r.value, " -> ", mta_wma_cell(r.mta, r.wma));
    render_report(t, dir);
    tables.push_back(std::move(t));
  }
  fs::remove_all(dir / "work");
  return tables;
}

double mean_heatmap_similarity(const TappedClassifier<float>& victim, const TappedClassifier<float>& attacked, const Dataset& images,
                               std::size_t count) {
  count = std::min(count, images.size());
  if (count == 0) throw std::invalid_argument("no images for heatmap comparison");
  double sum = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto x = to_batch<float>(images, i, 1);
    const int cls = victim.predict(x, victim.num_classes()).front();
    sum += heatmap_similarity(grad_cam(victim, x, cls), grad_cam(attacked, x, cls));
  }
  return sum / static_cast<double>(count);
}

HeatmapOutcome cmd_heatmap(const RunContext& ctx, const fs::path& victim_ckpt, const std::vector<fs::path>& attacked_ckpts,
                           const std::vector<std::string>& labels, int images) {
  const ExperimentConfig& cfg = ctx.config;
  if (!labels.empty() && labels.size() != attacked_ckpts.size()) throw ConfigError("one label per attacked checkpoint is required");
  const TappedClassifier<float> victim = load_verified_checkpoint(victim_ckpt);
  std::vector<TappedClassifier<float>> attacked;
  std::vector<std::string> ids = {sha256_file(victim_ckpt)};
  for (const auto& p : attacked_ckpts) {
    attacked.push_back(load_verified_checkpoint(p));
    ids.push_back(sha256_file(p));
  }
  const int n = images > 0 ? images : cfg.eval.heatmap_images;
  const std::string key = json_hash({{"models", ids}, {"images", n}, {"data", cfg.embed_key()}}).substr(0, 16);
  HeatmapOutcome out;
  out.dir = ctx.cache_root / ("heatmap-" + key);
  for (std::size_t k = 0; k < attacked_ckpts.size(); ++k)
    out.labels.push_back(labels.empty() ? attacked_ckpts[k].parent_path().filename().string() : labels[k]);
  if (fs::exists(out.dir / "similarity.json")) {
    const json j = read_json(out.dir / "similarity.json");
    out.mean_similarity = j.at("mean_similarity").get<std::vector<double>>();
    say(ctx, "heatmap: cache hit ", out.dir.string());
    return out;
  }

  const VictimData vd = prepare_victim_data(cfg, ctx.data_root);
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(n), vd.eval.size());
  StagedDir stage(out.dir);
  std::vector<std::vector<RgbImage>> grid;
  std::vector<std::vector<double>> per_image(attacked.size());
  out.mean_similarity.assign(attacked.size(), 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto x = to_batch<float>(vd.eval, i, 1);
    const Eigen::ArrayXf pixels = vd.eval.pixels.col(static_cast<Eigen::Index>(i)).array();
    const int cls = victim.predict(x, victim.num_classes()).front();
    const Heatmap hv = grad_cam(victim, x, cls);
    export_heatmap(stage.path() / "maps" / ("img" + std::to_string(i) + "_victim"), hv, pixels, vd.eval.shape);
    std::vector<RgbImage> row = {to_rgb(pixels, 32, 32, 3, 4), overlay(hv, pixels, vd.eval.shape)};
    for (std::size_t k = 0; k < attacked.size(); ++k) {
      const Heatmap ha = grad_cam(attacked[k], x, cls);
      export_heatmap(stage.path() / "maps" / ("img" + std::to_string(i) + "_" + out.labels[k]), ha, pixels, vd.eval.shape);
      const double s = heatmap_similarity(hv, ha);
      per_image[k].push_back(s);
      out.mean_similarity[k] += s / static_cast<double>(count);
      row.push_back(overlay(ha, pixels, vd.eval.shape));
    }
    if (grid.size() < 8) grid.push_back(std::move(row));
  }
  std::vector<std::string> titles = {"input", "victim"};
  titles.insert(titles.end(), out.labels.begin(), out.labels.end());
  write_png(stage.path() / "grid.png", image_grid(grid, titles));
  write_json(stage.path() / "similarity.json",
             {{"labels", out.labels}, {"mean_similarity", out.mean_similarity}, {"per_image", per_image}, {"images", count}});
  stage.commit();
  for (std::size_t k = 0; k < attacked.size(); ++k) say(ctx, "heatmap: ", out.labels[k], " mean similarity ", fixed(out.mean_similarity[k]));
  return out;
}

ResultTable cmd_report(const std::vector<fs::path>& inputs, const fs::path& out_dir, const std::string& name) {
  ResultTable table;
  table.name = name;
  for (const auto& p : inputs) {
    const json j = read_json(p);
    if (j.contains("rows")) {
      for (const auto& r : result_table_from_json(j).rows) table.rows.push_back(r);
    } else if (j.contains("variant") && j.contains("trace")) {
      const AttackReport rep = attack_report_from_json(j);
      const ADConfig c = ad_config_from_json(rep.config);
      table.rows.push_back(row_from_report(rep, p.parent_path().filename().string(), 0, 0, c.seed));
    } else {
      throw FormatError(p.string() + " is neither an attack report nor a result table");
    }
  }
  render_report(table, out_dir);
  return table;
}

}  // namespace wmlab

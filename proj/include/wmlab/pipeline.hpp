#pragma once

#include "wmlab/attack.hpp"
#include "wmlab/config.hpp"
#include "wmlab/eval.hpp"
#include "wmlab/explain.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace wmlab {

namespace fs = std::filesystem;

/// $WMLAB_CACHE, else ./wmlab-cache.
fs::path default_cache_root();
/// $WMLAB_DATA, else the build-time default.
fs::path default_data_root();

struct RunContext {
  ExperimentConfig config;
  fs::path cache_root;
  fs::path data_root;
  std::ostream* log = nullptr;
  int jobs = 1;
};

/// Deterministic sub-seed for a named purpose.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

/// Victim-side data: training subset, evaluation set, per-epoch trace subset, triggers.
struct VictimData {
  Dataset train;
  Dataset eval;
  Dataset trace;
  Dataset triggers;
  /// ID mode: the half of the test set handed to the attacker.
  Dataset id_proxy;
};

VictimData prepare_victim_data(const ExperimentConfig& cfg, const fs::path& data_root);

/// Attacker-side pools and the crafted auxiliary data (plus held-out proxy).
struct AttackerData {
  Dataset proxy_pool;
  Dataset lure_pool;
  AuxiliaryData aux;
  Dataset holdout;
};

AttackerData prepare_attacker_data(const ExperimentConfig& cfg, const fs::path& data_root, const VictimData& victim_data);

/// Class-conditional procedural images (quick pipeline checks without downloads).
Dataset make_synthetic_dataset(std::size_t count, std::uint64_t seed, Split split);

struct EmbedOutcome {
  fs::path dir;
  TappedClassifier<float> victim;
  Dataset triggers;
  std::vector<EpochRecord> trace;
  double mta = 0;
  double wma = 0;
  bool cache_hit = false;
};

struct AttackOutcome {
  fs::path dir;
  TappedClassifier<float> attacked;
  AttackReport report;
  bool cache_hit = false;
};

/// Loads a checkpoint and, when a manifest sits next to it, checks the file hash.
TappedClassifier<float> load_verified_checkpoint(const fs::path& path);

EmbedOutcome cmd_embed(const RunContext& ctx);
AttackOutcome cmd_attack(const RunContext& ctx, const std::optional<fs::path>& victim_ckpt = std::nullopt);

struct VerifyOutcome {
  Verification result;
  double tau = 0;
  std::size_t triggers = 0;
  std::string source;
};

/// Ownership check through a black-box API: the checkpoint, or `remote_url` when set.
VerifyOutcome cmd_verify(const RunContext& ctx, const std::optional<fs::path>& ckpt, const std::string& remote_url = {},
                         double timeout_seconds = 10.0, int retries = 2);

struct EvalOutcome {
  fs::path dir;
  SfwReport sfw;
  ResultTable table;
};

EvalOutcome cmd_eval(const RunContext& ctx, const std::optional<fs::path>& victim_ckpt, const std::optional<fs::path>& attacked_ckpt);

/// Runs the named sweeps ("lure_budget", "proxy_budget", "lure_label", "variants").
std::vector<ResultTable> cmd_ablate(const RunContext& ctx, const std::vector<std::string>& sweeps);

struct HeatmapOutcome {
  fs::path dir;
  /// Mean similarity to the victim's maps, one per attacked model.
  std::vector<double> mean_similarity;
  std::vector<std::string> labels;
};

/// Grad-CAM grid over the first N clean evaluation images for the victim and
/// each attacked model.
HeatmapOutcome cmd_heatmap(const RunContext& ctx, const fs::path& victim_ckpt, const std::vector<fs::path>& attacked_ckpts,
                           const std::vector<std::string>& labels, int images = -1);

/// Collects report.json / table JSON files into one table under `out_dir`.
ResultTable cmd_report(const std::vector<fs::path>& inputs, const fs::path& out_dir, const std::string& name = "report");

/// Mean heatmap similarity between victim and attacked over the given images.
double mean_heatmap_similarity(const TappedClassifier<float>& victim, const TappedClassifier<float>& attacked, const Dataset& images,
                               std::size_t count);

}  // namespace wmlab

#pragma once

#include "wmlab/attack.hpp"
#include "wmlab/datasets.hpp"
#include "wmlab/models.hpp"
#include "wmlab/watermark.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace wmlab {

struct TriggerConfig {
  TriggerKind kind = TriggerKind::kContent;
  StampOptions stamp;
  double noise_std = 0.1;
  int patch = 0;
  std::string unrelated_source = "mnist";
  int unrelated_label = 1;
};

struct ProxyConfig {
  /// "ood": proxy from proxy_source; "id": half of the victim's test set.
  std::string mode = "ood";
  std::string source = "ood";
  std::string lure_source = "abstract";
  std::size_t n_proxy = 1000;
  std::size_t n_lures = 10;
  /// Extra proxy images held back for the attacker-side search score.
  std::size_t n_holdout = 200;
};

struct DatasetConfig {
  std::string source = "cifar10";
  std::size_t train_size = 10000;
  /// 0 means the whole test split.
  std::size_t test_size = 0;
  /// Test images scored after every training epoch (0 disables).
  std::size_t trace_size = 1000;
  TriggerConfig trigger;
  ProxyConfig proxy;
};

struct ModelConfig {
  Arch arch = Arch::kToyCnn;
  std::string tap;
};

struct WatermarkConfig {
  std::size_t count = 200;
  int target_label = 0;
  double tau = 0.9;
  double alpha = 5e-4;
  TrainConfig train;
};

struct SearchConfig {
  bool enabled = false;
  double target = 0.9;
  double ratio = 2.0;
  int max_steps = 4;
  int epochs = 10;
  std::array<std::optional<LambdaRange>, 3> ranges;
};

struct SweepConfig {
  std::vector<int> lure_budgets = {1, 5, 10, 20, 50};
  std::vector<int> proxy_budgets = {250, 500, 1000, 2000};
  std::vector<int> lure_labels = {0, 5, -1};
  std::vector<std::string> variants = {"AD", "vanilla", "AA", "AD-NRA", "AD-NLA", "AD-NRT"};
  std::vector<std::uint64_t> seeds = {0};
};

struct EvalConfig {
  double epsilon_forget = 0.1;
  double negl = 0.03;
  int heatmap_images = 50;
  SweepConfig sweeps;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  DatasetConfig dataset;
  ModelConfig model;
  WatermarkConfig watermark;
  ADConfig attack;
  SearchConfig search;
  EvalConfig eval;

  /// Fully resolved JSON (every field present).
  nlohmann::json to_json() const;
  /// Hex digest keyed on the fields that determine the victim.
  std::string embed_key() const;
  /// Hex digest keyed on the victim key plus attack-side fields.
  std::string attack_key() const;
  std::string full_hash() const;
  /// Warnings for legal but unusual settings (e.g. lure label = target).
  std::vector<std::string> warnings() const;
};

/// Default configuration as JSON (the schema: every legal key appears).
nlohmann::json default_config_json();

/// Validates `j` against the schema (unknown keys and type mismatches throw
/// ConfigError) and fills missing fields from defaults.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies "a.b.c=value" overrides; value is parsed as JSON, falling back to a string.
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& assignments);

/// Canonical (sorted-key, compact) SHA-256 of a JSON value.
std::string json_hash(const nlohmann::json& j);

}  // namespace wmlab

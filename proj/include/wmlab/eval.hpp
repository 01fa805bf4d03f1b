#pragma once

#include "wmlab/attack.hpp"
#include "wmlab/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace wmlab {

/// One attack run in a sweep or report table.
struct ResultRow {
  std::string name;
  std::string variant;
  std::string parameter;
  double value = 0;
  int delta = 0;
  std::size_t n_proxy = 0;
  std::size_t n_lures = 0;
  std::uint64_t seed = 0;
  double mta_victim = 0;
  double wma_victim = 0;
  double mta = 0;
  double wma = 0;
  double wma_first_c = 0;
  bool forget_ok = false;
  bool fidelity_ok = false;
  double seconds = 0;
};

struct ResultTable {
  std::string name;
  std::vector<ResultRow> rows;
};

nlohmann::json to_json(const ResultRow& r);
ResultRow result_row_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ResultTable& t);
ResultTable result_table_from_json(const nlohmann::json& j);

std::string table_csv(const ResultTable& t);
ResultTable parse_table_csv(const std::string& text, std::string name = {});

/// Builds a row from a finished attack.
ResultRow row_from_report(const AttackReport& r, const std::string& name, std::size_t n_proxy, std::size_t n_lures, std::uint64_t seed);

/// Everything a sweep needs to assemble auxiliary data and score a run.
struct SweepContext {
  const TappedClassifier<float>* victim = nullptr;
  const Dataset* proxy_pool = nullptr;
  const Dataset* lure_pool = nullptr;
  const Dataset* eval_set = nullptr;
  const Dataset* triggers = nullptr;
  std::size_t n_proxy = 1000;
  std::size_t n_lures = 10;
  /// Auxiliary data for a cell is drawn with data_seed + the cell's attack seed.
  std::uint64_t data_seed = 0;
  double epsilon_forget = 0.1;
  double negl = 0.03;
  /// Worker processes; > 1 forks one process per cell batch.
  int jobs = 1;
  /// Scratch directory for worker outputs.
  std::filesystem::path work_dir;
};

/// Runs one attack with the given budgets and returns its row.
ResultRow run_cell(const SweepContext& ctx, const ADConfig& cfg, std::size_t n_proxy, std::size_t n_lures, const std::string& name,
                   const std::string& parameter, double value);

ResultTable sweep_lure_budget(const SweepContext& ctx, const ADConfig& cfg, const std::vector<int>& budgets);
ResultTable sweep_proxy_budget(const SweepContext& ctx, const ADConfig& cfg, const std::vector<int>& budgets);
/// -1 in `deltas` stands for C.
ResultTable sweep_lure_label(const SweepContext& ctx, const ADConfig& cfg, const std::vector<int>& deltas);
ResultTable sweep_variants(const SweepContext& ctx, const ADConfig& cfg, const std::vector<std::string>& variants,
                           const std::vector<std::uint64_t>& seeds);

/// Evaluates fn(0..n-1) with up to `jobs` forked workers; each result
/// travels back as JSON through a file under `work_dir`.
std::vector<nlohmann::json> parallel_cells(std::size_t n, int jobs, const std::filesystem::path& work_dir,
                                           const std::function<nlohmann::json(std::size_t)>& fn);

/// Writes <dir>/<name>.csv, <name>.json and <name>.png (MTA/WMA bars).
void render_report(const ResultTable& table, const std::filesystem::path& dir);

/// "x/y" cell with MTA/WMA in percent.
std::string mta_wma_cell(double mta, double wma);

}  // namespace wmlab

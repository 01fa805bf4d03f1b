#include "wmlab/errors.hpp"
#include "wmlab/packed_io.hpp"
#include "wmlab/pipeline.hpp"
#include "wmlab/remote.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <iostream>

using nlohmann::json;
using namespace wmlab;

namespace {

struct Globals {
  std::string config;
  std::vector<std::string> overrides;
  std::string cache;
  std::string data;
  int jobs = 1;
  bool quiet = false;
};

RunContext make_context(const Globals& g) {
  if (!g.config.empty() && !fs::exists(g.config)) throw MissingArtifact("config file " + g.config + " does not exist");
  json j = g.config.empty() ? json::object() : json::parse(read_text_file(g.config));
  j = apply_overrides(std::move(j), g.overrides);
  RunContext ctx;
  ctx.config = parse_config(j);
  if (!g.cache.empty())
    ctx.cache_root = g.cache;
  else if (!ctx.config.output_dir.empty())
    ctx.cache_root = ctx.config.output_dir;
  else
    ctx.cache_root = default_cache_root();
  ctx.data_root = g.data.empty() ? default_data_root() : fs::path(g.data);
  ctx.jobs = std::max(1, g.jobs);
  ctx.log = g.quiet ? nullptr : &std::cerr;
  fs::create_directories(ctx.cache_root);
  return ctx;
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

ModelServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Watermark embedding, removal and verification lab"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config, "Experiment config (JSON)");
  app.add_option("-s,--set", g.overrides, "Override a config field, e.g. attack.lambda1=0.5")->take_all();
  app.add_option("--cache", g.cache, "Cache root (default: output_dir, $WMLAB_CACHE, ./wmlab-cache)");
  app.add_option("--data", g.data, "Dataset root (default: $WMLAB_DATA or the build data directory)");
  app.add_option("-j,--jobs", g.jobs, "Worker processes for sweeps");
  app.add_flag("-q,--quiet", g.quiet, "No progress output");

  auto* embed = app.add_subcommand("embed", "Train a watermarked victim");

  std::string victim, attacked, remote, out, name = "report", host = "127.0.0.1";
  double timeout = 10.0;
  int retries = 2, images = -1, port = 8080;
  std::vector<std::string> attacked_list, labels, sweeps, inputs;

  auto* attack = app.add_subcommand("attack", "Remove the watermark with a continual-learning attack");
  attack->add_option("--victim", victim, "Victim checkpoint (default: the embed run of this config)");

  auto* verify_cmd = app.add_subcommand("verify", "Query a model with the trigger set and decide ownership");
  verify_cmd->add_option("--ckpt", victim, "Checkpoint to query (default: the embed run of this config)");
  verify_cmd->add_option("--remote", remote, "Prediction endpoint, e.g. http://host:8080");
  verify_cmd->add_option("--timeout", timeout, "Per-request timeout in seconds");
  verify_cmd->add_option("--retries", retries, "Retries per request");

  auto* eval = app.add_subcommand("eval", "Check the forgetting and fidelity criteria");
  eval->add_option("--victim", victim, "Victim checkpoint");
  eval->add_option("--attacked", attacked, "Attacked checkpoint");

  auto* ablate = app.add_subcommand("ablate", "Run ablation sweeps");
  ablate->add_option("--sweep", sweeps, "lure_budget, proxy_budget, lure_label, variants (default: all)");

  auto* heatmap = app.add_subcommand("heatmap", "Grad-CAM comparison of victim and attacked models");
  heatmap->add_option("--victim", victim, "Victim checkpoint")->required();
  heatmap->add_option("--attacked", attacked_list, "Attacked checkpoints")->required();
  heatmap->add_option("--label", labels, "Column label per attacked checkpoint");
  heatmap->add_option("--images", images, "Number of clean test images");

  auto* report = app.add_subcommand("report", "Collect reports and tables into CSV/JSON/PNG");
  report->add_option("inputs", inputs, "report.json or table JSON files")->required();
  report->add_option("-o,--out", out, "Output directory")->required();
  report->add_option("--name", name, "Table name");

  auto* serve = app.add_subcommand("serve", "Serve a checkpoint over HTTP (POST /predict)");
  serve->add_option("--ckpt", victim, "Checkpoint")->required();
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free one)");

  auto* show = app.add_subcommand("config", "Print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*report) {
      const ResultTable t = cmd_report({inputs.begin(), inputs.end()}, out, name);
      emit(to_json(t));
      return 0;
    }
    RunContext ctx = make_context(g);
    if (*show) {
      emit(ctx.config.to_json());
    } else if (*embed) {
      const EmbedOutcome o = cmd_embed(ctx);
      emit({{"dir", o.dir.string()}, {"checkpoint", (o.dir / "victim.wmck").string()}, {"mta", o.mta}, {"wma", o.wma}, {"cache_hit", o.cache_hit}});
    } else if (*attack) {
      const AttackOutcome o = cmd_attack(ctx, opt_path(victim));
      json j = {{"dir", o.dir.string()}, {"checkpoint", (o.dir / "attacked.wmck").string()}, {"cache_hit", o.cache_hit},
                {"mta_before", o.report.mta_before}, {"wma_before", o.report.wma_before},
                {"mta_after", o.report.mta_after}, {"wma_after", o.report.wma_after}, {"warnings", o.report.warnings}};
      if (o.report.sfw) j["sfw"] = to_json(*o.report.sfw);
      emit(j);
    } else if (*verify_cmd) {
      const VerifyOutcome o = cmd_verify(ctx, opt_path(victim), remote, timeout, retries);
      emit({{"source", o.source}, {"accuracy", o.result.accuracy}, {"tau", o.tau}, {"triggers", o.triggers}, {"owned", o.result.owned}});
    } else if (*eval) {
      const EvalOutcome o = cmd_eval(ctx, opt_path(victim), opt_path(attacked));
      emit({{"dir", o.dir.string()}, {"sfw", to_json(o.sfw)}});
    } else if (*ablate) {
      if (sweeps.empty()) sweeps = {"lure_budget", "proxy_budget", "lure_label", "variants"};
      json j = json::array();
      for (const auto& t : cmd_ablate(ctx, sweeps)) j.push_back(to_json(t));
      emit(j);
    } else if (*heatmap) {
      const HeatmapOutcome o = cmd_heatmap(ctx, victim, {attacked_list.begin(), attacked_list.end()}, labels, images);
      emit({{"dir", o.dir.string()}, {"labels", o.labels}, {"mean_similarity", o.mean_similarity}});
    } else if (*serve) {
      ModelServer server(load_verified_checkpoint(victim), host, port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving " << victim << " at " << server.url() << std::endl;
      server.wait();
      g_server = nullptr;
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << std::endl;
    return 3;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << std::endl;
    return 4;
  } catch (const HashMismatch& e) {
    std::cerr << "hash mismatch: " << e.what() << std::endl;
    return 5;
  } catch (const FormatError& e) {
    std::cerr << "corrupt artifact: " << e.what() << std::endl;
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}

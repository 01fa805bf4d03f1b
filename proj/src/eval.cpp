#include "wmlab/eval.hpp"

#include "wmlab/errors.hpp"
#include "wmlab/image_io.hpp"
#include "wmlab/packed_io.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <sstream>

namespace wmlab {

using nlohmann::json;

json to_json(const ResultRow& r) {
  return {{"name", r.name},       {"variant", r.variant},       {"parameter", r.parameter},     {"value", r.value},
          {"delta", r.delta},     {"n_proxy", r.n_proxy},       {"n_lures", r.n_lures},         {"seed", r.seed},
          {"mta_victim", r.mta_victim}, {"wma_victim", r.wma_victim}, {"mta", r.mta},           {"wma", r.wma},
          {"wma_first_c", r.wma_first_c}, {"forget_ok", r.forget_ok}, {"fidelity_ok", r.fidelity_ok}, {"seconds", r.seconds}};
}

ResultRow result_row_from_json(const json& j) {
  ResultRow r;
  r.name = j.at("name").get<std::string>();
  r.variant = j.at("variant").get<std::string>();
  r.parameter = j.at("parameter").get<std::string>();
  r.value = j.at("value").get<double>();
  r.delta = j.at("delta").get<int>();
  r.n_proxy = j.at("n_proxy").get<std::size_t>();
  r.n_lures = j.at("n_lures").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.mta_victim = j.at("mta_victim").get<double>();
  r.wma_victim = j.at("wma_victim").get<double>();
  r.mta = j.at("mta").get<double>();
  r.wma = j.at("wma").get<double>();
  r.wma_first_c = j.at("wma_first_c").get<double>();
  r.forget_ok = j.at("forget_ok").get<bool>();
  r.fidelity_ok = j.at("fidelity_ok").get<bool>();
  r.seconds = j.at("seconds").get<double>();
  return r;
}

json to_json(const ResultTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back(to_json(r));
  return {{"name", t.name}, {"rows", rows}};
}

ResultTable result_table_from_json(const json& j) {
  ResultTable t;
  t.name = j.at("name").get<std::string>();
  for (const auto& r : j.at("rows")) t.rows.push_back(result_row_from_json(r));
  return t;
}

namespace {

const char* const kColumns[] = {"name",       "variant",    "parameter", "value",       "delta",     "n_proxy",
                                "n_lures",    "seed",       "mta_victim", "wma_victim", "mta",       "wma",
                                "wma_first_c", "forget_ok", "fidelity_ok", "seconds",   "mta/wma"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string mta_wma_cell(double mta, double wma) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f/%.2f", 100.0 * mta, 100.0 * wma);
  return buf;
}

std::string table_csv(const ResultTable& t) {
  std::ostringstream os;
  for (std::size_t i = 0; i < std::size(kColumns); ++i) os << (i ? "," : "") << kColumns[i];
  os << "\n";
  for (const auto& r : t.rows) {
    os << csv_field(r.name) << ',' << csv_field(r.variant) << ',' << csv_field(r.parameter) << ',' << num(r.value) << ',' << r.delta
       << ',' << r.n_proxy << ',' << r.n_lures << ',' << r.seed << ',' << num(r.mta_victim) << ',' << num(r.wma_victim) << ','
       << num(r.mta) << ',' << num(r.wma) << ',' << num(r.wma_first_c) << ',' << (r.forget_ok ? "true" : "false") << ','
       << (r.fidelity_ok ? "true" : "false") << ',' << num(r.seconds) << ',' << mta_wma_cell(r.mta, r.wma) << "\n";
  }
  return os.str();
}

ResultTable parse_table_csv(const std::string& text, std::string name) {
  ResultTable t;
  t.name = std::move(name);
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty CSV table");
  const auto header = split_csv_line(line);
  if (header.size() != std::size(kColumns)) throw FormatError("unexpected CSV header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != std::size(kColumns)) throw FormatError("CSV row has " + std::to_string(f.size()) + " fields");
    ResultRow r;
    r.name = f[0];
    r.variant = f[1];
    r.parameter = f[2];
    r.value = std::stod(f[3]);
    r.delta = std::stoi(f[4]);
    r.n_proxy = std::stoull(f[5]);
    r.n_lures = std::stoull(f[6]);
    r.seed = std::stoull(f[7]);
    r.mta_victim = std::stod(f[8]);
    r.wma_victim = std::stod(f[9]);
    r.mta = std::stod(f[10]);
    r.wma = std::stod(f[11]);
    r.wma_first_c = std::stod(f[12]);
    r.forget_ok = f[13] == "true";
    r.fidelity_ok = f[14] == "true";
    r.seconds = std::stod(f[15]);
    t.rows.push_back(r);
  }
  return t;
}

ResultRow row_from_report(const AttackReport& rep, const std::string& name, std::size_t n_proxy, std::size_t n_lures, std::uint64_t seed) {
  ResultRow r;
  r.name = name;
  r.variant = rep.variant;
  r.delta = rep.delta;
  r.n_proxy = n_proxy;
  r.n_lures = n_lures;
  r.seed = seed;
  r.mta_victim = rep.mta_before;
  r.wma_victim = rep.wma_before;
  r.mta = rep.mta_after;
  r.wma = rep.wma_after;
  if (rep.sfw) {
    r.wma_first_c = rep.sfw->wma_attacked_first_c;
    r.forget_ok = rep.sfw->forget_ok;
    r.fidelity_ok = rep.sfw->fidelity_ok;
  }
  r.seconds = rep.seconds;
  return r;
}

ResultRow run_cell(const SweepContext& ctx, const ADConfig& cfg, std::size_t n_proxy, std::size_t n_lures, const std::string& name,
                   const std::string& parameter, double value) {
  if (!ctx.victim || !ctx.proxy_pool || !ctx.lure_pool || !ctx.eval_set || !ctx.triggers)
    throw std::invalid_argument("sweep context is incomplete");
  const int c = ctx.victim->num_classes();
  if (uses_lures(cfg.variant) && n_lures == 0) throw ConfigError("a zero lure budget is only valid for the vanilla and AA variants");
  const AuxiliaryData aux =
      build_auxiliary(*ctx.proxy_pool, *ctx.lure_pool, n_proxy, n_lures, cfg.resolved_delta(c), c, ctx.data_seed + cfg.seed);
  AttackHooks hooks;
  hooks.eval_set = ctx.eval_set;
  hooks.triggers = ctx.triggers;
  hooks.epsilon_forget = ctx.epsilon_forget;
  hooks.negl = ctx.negl;
  const auto result = run_attack(*ctx.victim, aux, cfg, hooks);
  ResultRow row = row_from_report(result.report, name, n_proxy, n_lures, cfg.seed);
  row.parameter = parameter;
  row.value = value;
  return row;
}

std::vector<json> parallel_cells(std::size_t n, int jobs, const std::filesystem::path& work_dir, const std::function<json(std::size_t)>& fn) {
  std::vector<json> out(n);
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  if (work_dir.empty()) throw ConfigError("parallel sweeps need a work directory");
  std::filesystem::create_directories(work_dir);
  auto cell_file = [&](std::size_t i) { return work_dir / ("cell-" + std::to_string(i) + ".json"); };
  std::size_t next = 0, running = 0;
  std::vector<std::pair<pid_t, std::size_t>> children;
  bool failed = false;
  std::string failure;
  auto reap = [&]() {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid < 0) return;
    --running;
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      failed = true;
      for (auto& [p, i] : children)
        if (p == pid) failure = "sweep cell " + std::to_string(i) + " failed";
    }
  };
  while (next < n || running > 0) {
    if (next < n && running < static_cast<std::size_t>(jobs) && !failed) {
      const std::size_t i = next++;
      std::fflush(nullptr);
      const pid_t pid = ::fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        int code = 0;
        try {
          write_text_file(cell_file(i), fn(i).dump());
        } catch (const std::exception& ex) {
          std::fprintf(stderr, "cell %zu: %s\n", i, ex.what());
          code = 1;
        }
        std::_Exit(code);
      }
      children.emplace_back(pid, i);
      ++running;
    } else {
      reap();
      if (failed && next < n) next = n;
    }
  }
  if (failed) throw std::runtime_error(failure.empty() ? "a sweep worker failed" : failure);
  for (std::size_t i = 0; i < n; ++i) out[i] = json::parse(read_text_file(cell_file(i)));
  return out;
}

namespace {

ResultTable run_grid(const SweepContext& ctx, const std::string& name, std::size_t n,
                     const std::function<ResultRow(std::size_t)>& cell) {
  ResultTable t;
  t.name = name;
  const auto cells = parallel_cells(n, ctx.jobs, ctx.work_dir / name, [&](std::size_t i) { return to_json(cell(i)); });
  for (const auto& j : cells) t.rows.push_back(result_row_from_json(j));
  return t;
}

}  // namespace

ResultTable sweep_lure_budget(const SweepContext& ctx, const ADConfig& cfg, const std::vector<int>& budgets) {
  return run_grid(ctx, "lure_budget", budgets.size(), [&](std::size_t i) {
    const auto b = static_cast<std::size_t>(budgets[i]);
    return run_cell(ctx, cfg, ctx.n_proxy, b, "lure_budget", "n_lures", static_cast<double>(b));
  });
}

ResultTable sweep_proxy_budget(const SweepContext& ctx, const ADConfig& cfg, const std::vector<int>& budgets) {
  return run_grid(ctx, "proxy_budget", budgets.size(), [&](std::size_t i) {
    const auto b = static_cast<std::size_t>(budgets[i]);
    return run_cell(ctx, cfg, b, ctx.n_lures, "proxy_budget", "n_proxy", static_cast<double>(b));
  });
}

ResultTable sweep_lure_label(const SweepContext& ctx, const ADConfig& cfg, const std::vector<int>& deltas) {
  return run_grid(ctx, "lure_label", deltas.size(), [&](std::size_t i) {
    ADConfig c = cfg;
    c.delta = deltas[i];
    return run_cell(ctx, c, ctx.n_proxy, ctx.n_lures, "lure_label", "delta",
                    static_cast<double>(c.resolved_delta(ctx.victim->num_classes())));
  });
}

ResultTable sweep_variants(const SweepContext& ctx, const ADConfig& cfg, const std::vector<std::string>& variants,
                           const std::vector<std::uint64_t>& seeds) {
  return run_grid(ctx, "variants", variants.size() * seeds.size(), [&](std::size_t i) {
    ADConfig c = cfg;
    c.variant = parse_variant(variants[i / seeds.size()]);
    c.seed = seeds[i % seeds.size()];
    const std::size_t lures = uses_lures(c.variant) ? ctx.n_lures : 0;
    return run_cell(ctx, c, ctx.n_proxy, lures, "variants", "seed", static_cast<double>(c.seed));
  });
}

void render_report(const ResultTable& table, const std::filesystem::path& dir) {
  const std::string stem = table.name.empty() ? "results" : table.name;
  write_text_file(dir / (stem + ".csv"), table_csv(table));
  write_text_file(dir / (stem + ".json"), to_json(table).dump(1) + "\n");
  std::vector<std::string> categories;
  BarSeries m{"MTA", {}}, w{"WMA", {}};
  for (const auto& r : table.rows) {
    std::string label = r.variant;
    if (!r.parameter.empty() && r.parameter != "seed") {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%g", r.value);
      label = r.parameter == "delta" ? std::string("D=") + buf : buf;
    }
    categories.push_back(label);
    m.values.push_back(r.mta);
    w.values.push_back(r.wma);
  }
  write_png(dir / (stem + ".png"), bar_chart(stem, categories, {m, w}));
}

}  // namespace wmlab

#include "wmlab/config.hpp"

#include "wmlab/errors.hpp"
#include "wmlab/packed_io.hpp"

#include <cstdio>
#include <cstdlib>

namespace wmlab {

using nlohmann::json;

namespace {

/// The shortest decimal that reads back as the same float.
double short_decimal(float v) {
  for (int digits = 1; digits < 10; ++digits) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, static_cast<double>(v));
    if (std::strtof(buf, nullptr) == v) return std::strtod(buf, nullptr);
  }
  return v;
}

json range_json(const std::optional<LambdaRange>& r) {
  if (!r) return nullptr;
  return {{"lo", r->lo}, {"hi", r->hi}, {"prefer", r->prefer_small ? "small" : "large"}};
}

std::optional<LambdaRange> range_from(const json& j, const std::string& where) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_object()) throw ConfigError(where + " must be null or an object");
  for (const auto& [k, _] : j.items())
    if (k != "lo" && k != "hi" && k != "prefer") throw ConfigError("unknown key " + where + "." + k);
  LambdaRange r;
  r.lo = j.value("lo", r.lo);
  r.hi = j.value("hi", r.hi);
  const std::string prefer = j.value("prefer", std::string("small"));
  if (prefer != "small" && prefer != "large") throw ConfigError(where + ".prefer must be \"small\" or \"large\"");
  r.prefer_small = prefer == "small";
  if (!(r.lo > 0) || r.hi < r.lo) throw ConfigError(where + " must satisfy 0 < lo <= hi");
  return r;
}

const char* type_name(const json& j) { return j.type_name(); }

/// Checks `user` against `schema` and returns schema with user values merged in.
json merge_checked(const json& schema, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + " must be an object");
  json out = schema;
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    const json& def = schema.at(key);
    if (path == "search.ranges") {
      range_from(value, where);
      out[key] = value;
      continue;
    }
    if (def.is_object()) {
      out[key] = merge_checked(def, value, where);
      continue;
    }
    bool ok = false;
    if (def.is_boolean()) ok = value.is_boolean();
    else if (def.is_number_integer()) ok = value.is_number_integer();
    else if (def.is_number()) ok = value.is_number();
    else if (def.is_string()) ok = value.is_string();
    else if (def.is_array()) ok = value.is_array();
    else if (def.is_null()) ok = true;
    if (!ok) throw ConfigError("config key '" + where + "' expects " + type_name(def) + ", got " + type_name(value));
    if (def.is_number_unsigned() && value.is_number_integer() && value.get<long long>() < 0)
      throw ConfigError("config key '" + where + "' must be non-negative");
    out[key] = value;
  }
  return out;
}

int classes_of(const std::string& source) {
  if (source == "cifar10" || source == "synthetic") return 10;
  throw ConfigError("unknown dataset source '" + source + "'");
}

}  // namespace

json ExperimentConfig::to_json() const {
  const auto& t = dataset.trigger;
  json ranges = {{"lambda1", range_json(search.ranges[0])},
                 {"lambda2", range_json(search.ranges[1])},
                 {"lambda3", range_json(search.ranges[2])}};
  return {
      {"seed", seed},
      {"output_dir", output_dir},
      {"dataset",
       {{"source", dataset.source},
        {"train_size", dataset.train_size},
        {"test_size", dataset.test_size},
        {"trace_size", dataset.trace_size},
        {"trigger",
         {{"kind", wmlab::to_string(t.kind)},
          {"text", t.stamp.text},
          {"scale", t.stamp.scale},
          {"row", t.stamp.row},
          {"col", t.stamp.col},
          {"intensity", short_decimal(t.stamp.intensity)},
          {"color", short_decimal(t.stamp.color)},
          {"noise_std", t.noise_std},
          {"patch", t.patch},
          {"unrelated_source", t.unrelated_source},
          {"unrelated_label", t.unrelated_label}}},
        {"proxy",
         {{"mode", dataset.proxy.mode},
          {"source", dataset.proxy.source},
          {"lure_source", dataset.proxy.lure_source},
          {"n_proxy", dataset.proxy.n_proxy},
          {"n_lures", dataset.proxy.n_lures},
          {"n_holdout", dataset.proxy.n_holdout}}}}},
      {"model", {{"arch", wmlab::to_string(model.arch)}, {"tap", model.tap}}},
      {"watermark",
       {{"count", watermark.count},
        {"target_label", watermark.target_label},
        {"tau", watermark.tau},
        {"alpha", watermark.alpha},
        {"train", wmlab::to_json(watermark.train)}}},
      {"attack", wmlab::to_json(attack)},
      {"search",
       {{"enabled", search.enabled},
        {"target", search.target},
        {"ratio", search.ratio},
        {"max_steps", search.max_steps},
        {"epochs", search.epochs},
        {"ranges", ranges}}},
      {"eval",
       {{"epsilon_forget", eval.epsilon_forget},
        {"negl", eval.negl},
        {"heatmap_images", eval.heatmap_images},
        {"sweeps",
         {{"lure_budgets", eval.sweeps.lure_budgets},
          {"proxy_budgets", eval.sweeps.proxy_budgets},
          {"lure_labels", eval.sweeps.lure_labels},
          {"variants", eval.sweeps.variants},
          {"seeds", eval.sweeps.seeds}}}}},
  };
}

std::string json_hash(const json& j) { return sha256_hex(j.dump()); }

std::string ExperimentConfig::embed_key() const {
  json j = to_json();
  j["dataset"].erase("proxy");
  j["model"].erase("tap");
  json keyed = {{"format", "wmlab-1"}, {"seed", j["seed"]}, {"dataset", j["dataset"]}, {"model", j["model"]}, {"watermark", j["watermark"]}};
  return json_hash(keyed).substr(0, 16);
}

std::string ExperimentConfig::attack_key() const {
  const json j = to_json();
  json keyed = {{"victim", embed_key()},       {"proxy", j["dataset"]["proxy"]}, {"tap", j["model"]["tap"]},
                {"attack", j["attack"]},       {"search", j["search"]},          {"epsilon_forget", eval.epsilon_forget},
                {"negl", eval.negl}};
  return json_hash(keyed).substr(0, 16);
}

std::string ExperimentConfig::full_hash() const {
  json j = to_json();
  j.erase("output_dir");
  return json_hash(j);
}

std::vector<std::string> ExperimentConfig::warnings() const {
  std::vector<std::string> out;
  const int c = classes_of(dataset.source);
  if (attack.delta >= 0 && attack.delta < c) {
    std::string w = "lure label " + std::to_string(attack.delta) + " collides with an existing class";
    if (attack.delta == watermark.target_label) w += " (it equals the watermark target label)";
    out.push_back(w + "; running in label-collision mode");
  }
  return out;
}

json default_config_json() {
  ExperimentConfig c;
  c.search.ranges[0] = LambdaRange{0.1, 10.0, true};
  c.search.ranges[1] = LambdaRange{0.01, 1.0, true};
  return c.to_json();
}

ExperimentConfig parse_config(const json& user) {
  const json j = merge_checked(default_config_json(), user, "");
  ExperimentConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    const json& d = j.at("dataset");
    c.dataset.source = d.at("source").get<std::string>();
    c.dataset.train_size = d.at("train_size").get<std::size_t>();
    c.dataset.test_size = d.at("test_size").get<std::size_t>();
    c.dataset.trace_size = d.at("trace_size").get<std::size_t>();
    const json& t = d.at("trigger");
    c.dataset.trigger.kind = parse_trigger_kind(t.at("kind").get<std::string>());
    c.dataset.trigger.stamp.text = t.at("text").get<std::string>();
    c.dataset.trigger.stamp.scale = t.at("scale").get<int>();
    c.dataset.trigger.stamp.row = t.at("row").get<int>();
    c.dataset.trigger.stamp.col = t.at("col").get<int>();
    c.dataset.trigger.stamp.intensity = t.at("intensity").get<float>();
    c.dataset.trigger.stamp.color = t.at("color").get<float>();
    c.dataset.trigger.noise_std = t.at("noise_std").get<double>();
    c.dataset.trigger.patch = t.at("patch").get<int>();
    c.dataset.trigger.unrelated_source = t.at("unrelated_source").get<std::string>();
    c.dataset.trigger.unrelated_label = t.at("unrelated_label").get<int>();
    const json& p = d.at("proxy");
    c.dataset.proxy.mode = p.at("mode").get<std::string>();
    c.dataset.proxy.source = p.at("source").get<std::string>();
    c.dataset.proxy.lure_source = p.at("lure_source").get<std::string>();
    c.dataset.proxy.n_proxy = p.at("n_proxy").get<std::size_t>();
    c.dataset.proxy.n_lures = p.at("n_lures").get<std::size_t>();
    c.dataset.proxy.n_holdout = p.at("n_holdout").get<std::size_t>();
    c.model.arch = parse_arch(j.at("model").at("arch").get<std::string>());
    c.model.tap = j.at("model").at("tap").get<std::string>();
    const json& w = j.at("watermark");
    c.watermark.count = w.at("count").get<std::size_t>();
    c.watermark.target_label = w.at("target_label").get<int>();
    c.watermark.tau = w.at("tau").get<double>();
    c.watermark.alpha = w.at("alpha").get<double>();
    c.watermark.train = train_config_from_json(w.at("train"));
    c.attack = ad_config_from_json(j.at("attack"));
    const json& s = j.at("search");
    c.search.enabled = s.at("enabled").get<bool>();
    c.search.target = s.at("target").get<double>();
    c.search.ratio = s.at("ratio").get<double>();
    c.search.max_steps = s.at("max_steps").get<int>();
    c.search.epochs = s.at("epochs").get<int>();
    c.search.ranges[0] = range_from(s.at("ranges").at("lambda1"), "search.ranges.lambda1");
    c.search.ranges[1] = range_from(s.at("ranges").at("lambda2"), "search.ranges.lambda2");
    c.search.ranges[2] = range_from(s.at("ranges").at("lambda3"), "search.ranges.lambda3");
    const json& e = j.at("eval");
    c.eval.epsilon_forget = e.at("epsilon_forget").get<double>();
    c.eval.negl = e.at("negl").get<double>();
    c.eval.heatmap_images = e.at("heatmap_images").get<int>();
    const json& sw = e.at("sweeps");
    c.eval.sweeps.lure_budgets = sw.at("lure_budgets").get<std::vector<int>>();
    c.eval.sweeps.proxy_budgets = sw.at("proxy_budgets").get<std::vector<int>>();
    c.eval.sweeps.lure_labels = sw.at("lure_labels").get<std::vector<int>>();
    c.eval.sweeps.variants = sw.at("variants").get<std::vector<std::string>>();
    c.eval.sweeps.seeds = sw.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("malformed config: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }

  const int classes = classes_of(c.dataset.source);
  if (c.dataset.train_size < 1) throw ConfigError("dataset.train_size must be >= 1");
  if (c.dataset.proxy.mode != "ood" && c.dataset.proxy.mode != "id") throw ConfigError("dataset.proxy.mode must be \"ood\" or \"id\"");
  if (c.watermark.target_label < 0 || c.watermark.target_label >= classes) throw ConfigError("watermark.target_label outside [0, C)");
  if (!(c.watermark.tau > 0 && c.watermark.tau <= 1)) throw ConfigError("watermark.tau must lie in (0, 1]");
  if (c.watermark.alpha < 0) throw ConfigError("watermark.alpha must be >= 0");
  if (c.dataset.trigger.stamp.scale < 1) throw ConfigError("dataset.trigger.scale must be >= 1");
  if (c.dataset.trigger.stamp.intensity < 0 || c.dataset.trigger.stamp.intensity > 1)
    throw ConfigError("dataset.trigger.intensity must lie in [0, 1]");
  if (c.eval.epsilon_forget < 0 || c.eval.negl < 0) throw ConfigError("eval tolerances must be >= 0");
  if (c.search.max_steps < 0) throw ConfigError("search.max_steps must be >= 0");
  for (const auto& v : c.eval.sweeps.variants) parse_variant(v);
  for (int d : c.eval.sweeps.lure_labels)
    if (d < -1 || d > classes) throw ConfigError("eval.sweeps.lure_labels entries must lie in [-1, C]");
  c.watermark.train.validate();
  c.attack.validate(classes);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& ex) {
    throw ConfigError("cannot parse " + path.string() + ": " + ex.what());
  }
  return parse_config(j);
}

json apply_overrides(json j, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + a + "' is not of the form key=value");
    const std::string key = a.substr(0, eq), text = a.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = json::object();
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  return j;
}

}  // namespace wmlab

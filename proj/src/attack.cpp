#include "wmlab/attack.hpp"

#include "wmlab/errors.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/nn/optim.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace wmlab {

using nlohmann::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kAD: return "AD";
    case Variant::kVanilla: return "vanilla";
    case Variant::kAA: return "AA";
    case Variant::kADNRA: return "AD-NRA";
    case Variant::kADNLA: return "AD-NLA";
    case Variant::kADNRT: return "AD-NRT";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  for (Variant v : {Variant::kAD, Variant::kVanilla, Variant::kAA, Variant::kADNRA, Variant::kADNLA, Variant::kADNRT})
    if (to_string(v) == text) return v;
  if (text == "AD-NPA") return Variant::kADNRA;
  if (text == "AD-NAA") return Variant::kADNLA;
  throw ConfigError("unknown attack variant '" + text + "'");
}

bool uses_lures(Variant v) { return v != Variant::kVanilla && v != Variant::kAA; }

TrainConfig ADConfig::default_finetune() {
  TrainConfig t;
  t.learning_rate = 0.01;
  t.momentum = 0.9;
  t.schedule = "constant";
  t.batch_size = 100;
  t.epochs = 30;
  t.augment = false;
  t.weight_decay = 0.0;
  return t;
}

void ADConfig::validate(int num_classes) const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("lambda weights must be >= 0");
  if (delta > num_classes) throw ConfigError("lure label must lie in [0, C]");
  for (int j : penalty_taps)
    if (j != 1 && j != 2) throw ConfigError("penalty taps must be a subset of {1, 2}");
  if (penalty_taps.empty() && lambda3 > 0 && variant_weights(*this)[3] > 0)
    throw ConfigError("lambda3 > 0 needs at least one penalty tap");
  if (lure_batch < 0) throw ConfigError("lure_batch must be >= 0");
  if (kl_reverse && hard_labels) throw ConfigError("kl_reverse needs soft targets (hard_labels = false)");
  finetune.validate();
}

json to_json(const ADConfig& c) {
  return {{"lambda1", c.lambda1},         {"lambda2", c.lambda2}, {"lambda3", c.lambda3},
          {"delta", c.delta},             {"variant", to_string(c.variant)}, {"tap_layer", c.tap_layer},
          {"penalty_taps", c.penalty_taps}, {"kl_reverse", c.kl_reverse}, {"hard_labels", c.hard_labels}, {"lure_batch", c.lure_batch},
          {"finetune", to_json(c.finetune)}, {"seed", c.seed}};
}

ADConfig ad_config_from_json(const json& j, ADConfig c) {
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.lambda3 = j.value("lambda3", c.lambda3);
  c.delta = j.value("delta", c.delta);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  c.tap_layer = j.value("tap_layer", c.tap_layer);
  c.penalty_taps = j.value("penalty_taps", c.penalty_taps);
  c.kl_reverse = j.value("kl_reverse", c.kl_reverse);
  c.hard_labels = j.value("hard_labels", c.hard_labels);
  c.lure_batch = j.value("lure_batch", c.lure_batch);
  if (j.contains("finetune")) c.finetune = train_config_from_json(j.at("finetune"), c.finetune);
  c.seed = j.value("seed", c.seed);
  return c;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  lure += o.lure;
  kl += o.kl;
  align += o.align;
  penalty += o.penalty;
  total += o.total;
  w_lure = o.w_lure;
  w_kl = o.w_kl;
  w_align = o.w_align;
  w_penalty = o.w_penalty;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  LossBreakdown b = *this;
  b.lure *= s;
  b.kl *= s;
  b.align *= s;
  b.penalty *= s;
  b.total *= s;
  return b;
}

json to_json(const LossBreakdown& b) {
  return {{"lure", b.lure},       {"kl", b.kl},         {"align", b.align},         {"penalty", b.penalty},
          {"w_lure", b.w_lure},   {"w_kl", b.w_kl},     {"w_align", b.w_align},     {"w_penalty", b.w_penalty},
          {"total", b.total}};
}

std::array<double, 4> variant_weights(const ADConfig& c) {
  switch (c.variant) {
    case Variant::kAD: return {1.0, c.lambda1, c.lambda2, c.lambda3};
    case Variant::kVanilla: return {0.0, 1.0, 0.0, 0.0};
    case Variant::kAA: return {0.0, c.lambda1, c.lambda2, c.lambda3};
    case Variant::kADNRA: return {1.0, c.lambda1, c.lambda2, 0.0};
    case Variant::kADNLA: return {1.0, c.lambda1, 0.0, c.lambda3};
    case Variant::kADNRT: return {1.0, c.lambda1, 0.0, 0.0};
  }
  return {};
}

template <typename Scalar>
double lure_loss_terms(const Matrix<Scalar>& logits, int delta, Matrix<Scalar>* grad) {
  if (delta < 0 || delta >= logits.rows())
    throw ConfigError("lure label " + std::to_string(delta) + " is outside the model's " + std::to_string(logits.rows()) + " outputs");
  const Eigen::Index n = logits.cols();
  if (grad) *grad = Matrix<Scalar>::Zero(logits.rows(), n);
  if (n == 0) return 0.0;
  const Matrix<Scalar> logp = log_softmax_columns(logits);
  double loss = 0;
  for (Eigen::Index i = 0; i < n; ++i) loss -= static_cast<double>(logp(delta, i));
  if (grad) {
    *grad = logp.array().exp().matrix();
    grad->row(delta).array() -= Scalar(1);
    *grad /= static_cast<Scalar>(n);
  }
  return loss / static_cast<double>(n);
}

template <typename Scalar>
double kl_alignment_terms(const Matrix<Scalar>& logits, const Matrix<Scalar>& p_ref, bool reverse, Matrix<Scalar>* grad) {
  const Eigen::Index c = p_ref.rows(), n = p_ref.cols();
  if (logits.cols() != n || logits.rows() < c) throw std::invalid_argument("KL alignment: logits/reference shape mismatch");
  if (grad) *grad = Matrix<Scalar>::Zero(logits.rows(), n);
  if (n == 0) return 0.0;
  const Matrix<Scalar> logq = log_softmax_columns(logits.topRows(c));
  const Matrix<Scalar> q = logq.array().exp().matrix();
  constexpr Scalar kTiny = std::numeric_limits<Scalar>::min();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double kl = 0;
    if (!reverse) {
      for (Eigen::Index k = 0; k < c; ++k) {
        const Scalar p = p_ref(k, i);
        if (p > Scalar(0)) kl += static_cast<double>(p * (std::log(p) - logq(k, i)));
      }
      if (grad) grad->col(i).head(c) = (q.col(i) - p_ref.col(i)) / static_cast<Scalar>(n);
    } else {
      Vector<Scalar> logp(c);
      for (Eigen::Index k = 0; k < c; ++k) logp(k) = std::log(std::max(p_ref(k, i), kTiny));
      const Vector<Scalar> gap = logq.col(i) - logp;
      kl = static_cast<double>(q.col(i).dot(gap));
      if (grad) grad->col(i).head(c) = (q.col(i).array() * (gap.array() - static_cast<Scalar>(kl))).matrix() / static_cast<Scalar>(n);
    }
    total += kl;
  }
  return total / static_cast<double>(n);
}

template <typename Scalar>
double attention_alignment_terms(const Eigen::Ref<const Matrix<Scalar>>& a, const Eigen::Ref<const Matrix<Scalar>>& b, Matrix<Scalar>* grad) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("attention maps differ in shape");
  const Eigen::Index n = a.cols();
  if (grad) *grad = Matrix<Scalar>::Zero(a.rows(), n);
  if (n == 0) return 0.0;
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector<Scalar> d = a.col(i) - b.col(i);
    const Scalar norm = d.norm();
    total += static_cast<double>(norm);
    if (grad && norm > Scalar(0)) grad->col(i) = d / (norm * static_cast<Scalar>(n));
  }
  return total / static_cast<double>(n);
}

template <typename Scalar>
double attention_penalty_terms(const Eigen::Ref<const Matrix<Scalar>>& maps, const Matrix<Scalar>& logits, const std::vector<int>& taps,
                               Matrix<Scalar>* grad_maps, Matrix<Scalar>* grad_logits) {
  const Eigen::Index n = maps.cols();
  if (logits.cols() != n) throw std::invalid_argument("attention penalty: maps/logits batch mismatch");
  if (grad_maps) *grad_maps = Matrix<Scalar>::Zero(maps.rows(), n);
  if (grad_logits) *grad_logits = Matrix<Scalar>::Zero(logits.rows(), n);
  if (n == 0) return 0.0;
  double total = 0;
  for (int j : taps) {
    if (j == 1) {
      double s = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar norm = maps.col(i).norm();
        s += static_cast<double>(norm);
        if (grad_maps && norm > Scalar(0)) grad_maps->col(i) += maps.col(i) / (norm * static_cast<Scalar>(n));
      }
      total += s / static_cast<double>(n);
    } else if (j == 2) {
      const Matrix<Scalar> soft = softmax_columns(logits);
      double s = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar norm = soft.col(i).norm();
        s += static_cast<double>(norm);
        if (grad_logits) {
          const Vector<Scalar> g = soft.col(i) / (norm * static_cast<Scalar>(n));
          grad_logits->col(i) += (soft.col(i).array() * (g.array() - soft.col(i).dot(g))).matrix();
        }
      }
      total += s / static_cast<double>(n);
    } else {
      throw ConfigError("penalty taps must be a subset of {1, 2}");
    }
  }
  return total;
}

namespace {

template <typename Scalar>
Eigen::Map<const Matrix<Scalar>> flat(const Tensor<Scalar>& t) {
  return t.flat_view();
}

template <typename Scalar>
Matrix<Scalar> one_hot_top1(const Matrix<Scalar>& probs) {
  Matrix<Scalar> out = Matrix<Scalar>::Zero(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.cols(); ++i) {
    Eigen::Index k = 0;
    probs.col(i).maxCoeff(&k);
    out(k, i) = Scalar(1);
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> first_c_probs(const TappedClassifier<Scalar>& model, const Tensor<Scalar>& batch, bool hard) {
  Matrix<Scalar> p = softmax_columns(model.logits(batch).topRows(model.num_classes()));
  return hard ? one_hot_top1(p) : p;
}

template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>* b) {
  if (b == nullptr || b->batch == 0) return a;
  if (!(a.shape == b->shape)) throw std::invalid_argument("proxy and lure batches differ in shape");
  Matrix<Scalar> m(a.data.rows(), a.data.cols() + b->data.cols());
  m << a.data, b->data;
  return Tensor<Scalar>(a.shape, a.batch + b->batch, std::move(m));
}

}  // namespace

template <typename Scalar>
double lure_loss(const TappedClassifier<Scalar>& attacked, const Tensor<Scalar>& lure_batch, int delta) {
  if (delta >= attacked.out_dim()) throw ConfigError("lure label is outside the model's outputs; expand the output layer first");
  return lure_loss_terms<Scalar>(attacked.logits(lure_batch), delta);
}

template <typename Scalar>
double prediction_alignment_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                                 const Tensor<Scalar>& proxy_batch, bool reverse, bool hard_labels) {
  return kl_alignment_terms<Scalar>(attacked.logits(proxy_batch), first_c_probs(victim, proxy_batch, hard_labels), reverse);
}

template <typename Scalar>
double attention_alignment_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                                const Tensor<Scalar>& proxy_batch) {
  if (!(attacked.tap_shape() == victim.tap_shape()))
    throw std::invalid_argument("tap shapes differ: " + attacked.tap_shape().str() + " vs " + victim.tap_shape().str());
  const Tensor<Scalar> a = attacked.attention(proxy_batch), b = victim.attention(proxy_batch);
  return attention_alignment_terms<Scalar>(flat(a), flat(b));
}

template <typename Scalar>
double attention_penalty(const TappedClassifier<Scalar>& attacked, const Tensor<Scalar>& proxy_batch, const std::vector<int>& taps) {
  const Tensor<Scalar> maps = attacked.attention(proxy_batch);
  return attention_penalty_terms<Scalar>(flat(maps), attacked.logits(proxy_batch), taps);
}

template <typename Scalar>
LossBreakdown attention_anchoring_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                                       const Tensor<Scalar>& proxy_batch, const ADConfig& cfg) {
  if (cfg.penalty_taps.empty() && cfg.lambda3 > 0) throw ConfigError("lambda3 > 0 needs at least one penalty tap");
  LossBreakdown b;
  b.kl = prediction_alignment_loss(attacked, victim, proxy_batch, cfg.kl_reverse, cfg.hard_labels);
  b.align = attention_alignment_loss(attacked, victim, proxy_batch);
  b.penalty = attention_penalty(attacked, proxy_batch, cfg.penalty_taps);
  b.w_kl = cfg.lambda1;
  b.w_align = cfg.lambda2;
  b.w_penalty = cfg.lambda3;
  b.total = b.weighted_sum();
  return b;
}

template <typename Scalar>
LossBreakdown ad_total_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                            const Tensor<Scalar>* lure_batch, const Tensor<Scalar>& proxy_batch, const ADConfig& cfg) {
  const auto w = variant_weights(cfg);
  LossBreakdown b;
  b.kl = prediction_alignment_loss(attacked, victim, proxy_batch, cfg.kl_reverse, cfg.hard_labels);
  b.align = attention_alignment_loss(attacked, victim, proxy_batch);
  b.penalty = cfg.penalty_taps.empty() ? 0.0 : attention_penalty(attacked, proxy_batch, cfg.penalty_taps);
  if (lure_batch != nullptr && lure_batch->batch > 0 && w[0] != 0.0)
    b.lure = lure_loss(attacked, *lure_batch, cfg.resolved_delta(victim.num_classes()));
  b.w_lure = w[0];
  b.w_kl = w[1];
  b.w_align = w[2];
  b.w_penalty = w[3];
  b.total = b.weighted_sum();
  return b;
}

template <typename Scalar>
TeacherOutputs<Scalar> teacher_outputs(const TappedClassifier<Scalar>& victim, const Tensor<Scalar>& proxy_batch, bool hard_labels) {
  const auto split = victim.forward_split(proxy_batch);
  TeacherOutputs<Scalar> t;
  t.maps = flat(split.maps);
  const int c = victim.num_classes();
  if (victim.out_dim() == c) {
    t.probs = split.probs;
  } else {
    t.probs = split.probs.topRows(c);
    for (Eigen::Index i = 0; i < t.probs.cols(); ++i) t.probs.col(i) /= t.probs.col(i).sum();
  }
  if (hard_labels) t.probs = one_hot_top1(t.probs);
  return t;
}

template <typename Scalar>
LossBreakdown ad_loss_and_backward(TappedClassifier<Scalar>& attacked, const TeacherOutputs<Scalar>& teacher,
                                   const Tensor<Scalar>& proxy_batch, const Tensor<Scalar>* lure_batch, const ADConfig& cfg,
                                   nn::Mode mode) {
  const auto w = variant_weights(cfg);
  const Tensor<Scalar>* lures = (w[0] != 0.0 && lure_batch != nullptr && lure_batch->batch > 0) ? lure_batch : nullptr;
  const Eigen::Index np = proxy_batch.batch, nl = lures ? lures->batch : 0;
  if (teacher.probs.cols() != np) throw std::invalid_argument("teacher outputs do not match the proxy batch");

  const auto pass = attacked.forward_train(concat(proxy_batch, lures), mode);
  const auto maps = flat(pass.maps);
  const Matrix<Scalar> proxy_logits = pass.logits.leftCols(np);

  Matrix<Scalar> grad_logits = Matrix<Scalar>::Zero(pass.logits.rows(), np + nl);
  Tensor<Scalar> grad_maps(pass.maps.shape, pass.maps.batch);
  auto gmaps = grad_maps.flat_view();
  Matrix<Scalar> g, g2;

  LossBreakdown b;
  b.w_lure = w[0];
  b.w_kl = w[1];
  b.w_align = w[2];
  b.w_penalty = w[3];
  if (lures) {
    b.lure = lure_loss_terms<Scalar>(pass.logits.rightCols(nl), cfg.resolved_delta(attacked.num_classes()), &g);
    grad_logits.rightCols(nl) += static_cast<Scalar>(w[0]) * g;
  }
  b.kl = kl_alignment_terms<Scalar>(proxy_logits, teacher.probs, cfg.kl_reverse, &g);
  if (w[1] != 0.0) grad_logits.leftCols(np) += static_cast<Scalar>(w[1]) * g;
  b.align = attention_alignment_terms<Scalar>(maps.leftCols(np), teacher.maps, &g);
  if (w[2] != 0.0) gmaps.leftCols(np) += static_cast<Scalar>(w[2]) * g;
  if (!cfg.penalty_taps.empty()) {
    b.penalty = attention_penalty_terms<Scalar>(maps.leftCols(np), proxy_logits, cfg.penalty_taps, &g, &g2);
    if (w[3] != 0.0) {
      gmaps.leftCols(np) += static_cast<Scalar>(w[3]) * g;
      grad_logits.leftCols(np) += static_cast<Scalar>(w[3]) * g2;
    }
  }
  b.total = b.weighted_sum();

  attacked.zero_grad();
  attacked.backward(grad_logits, &grad_maps);
  return b;
}

json to_json(const AttackEpoch& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"loss", to_json(e.loss)}, {"mta", e.mta}, {"wma", e.wma}, {"seconds", e.seconds}};
}

json to_json(const AttackReport& r) {
  json trace = json::array(), steps = json::array();
  for (const auto& e : r.trace) trace.push_back(to_json(e));
  for (const auto& s : r.steps) steps.push_back(to_json(s));
  json j = {{"config", r.config},
            {"variant", r.variant},
            {"tap_layer", r.tap_layer},
            {"delta", r.delta},
            {"expanded", r.expanded},
            {"warnings", r.warnings},
            {"trace", trace},
            {"steps", steps},
            {"mta_before", r.mta_before},
            {"wma_before", r.wma_before},
            {"mta_expanded", r.mta_expanded},
            {"wma_expanded", r.wma_expanded},
            {"mta_after", r.mta_after},
            {"wma_after", r.wma_after},
            {"sfw", r.sfw ? to_json(*r.sfw) : json(nullptr)},
            {"seconds", r.seconds},
            {"victim_hash_before", r.victim_hash_before},
            {"victim_hash_after", r.victim_hash_after},
            {"attacked_hash", r.attacked_hash},
            {"search", r.search},
            {"checkpoints", r.checkpoints}};
  return j;
}

namespace {

LossBreakdown breakdown_from_json(const json& j) {
  LossBreakdown b;
  b.lure = j.at("lure").get<double>();
  b.kl = j.at("kl").get<double>();
  b.align = j.at("align").get<double>();
  b.penalty = j.at("penalty").get<double>();
  b.w_lure = j.at("w_lure").get<double>();
  b.w_kl = j.at("w_kl").get<double>();
  b.w_align = j.at("w_align").get<double>();
  b.w_penalty = j.at("w_penalty").get<double>();
  b.total = j.at("total").get<double>();
  return b;
}

}  // namespace

AttackReport attack_report_from_json(const json& j) {
  AttackReport r;
  r.config = j.at("config");
  r.variant = j.at("variant").get<std::string>();
  r.tap_layer = j.at("tap_layer").get<std::string>();
  r.delta = j.at("delta").get<int>();
  r.expanded = j.at("expanded").get<bool>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto& e : j.at("trace")) {
    AttackEpoch a;
    a.epoch = e.at("epoch").get<int>();
    a.lr = e.at("lr").get<double>();
    a.loss = breakdown_from_json(e.at("loss"));
    a.mta = e.at("mta").get<double>();
    a.wma = e.at("wma").get<double>();
    a.seconds = e.at("seconds").get<double>();
    r.trace.push_back(a);
  }
  for (const auto& s : j.at("steps")) r.steps.push_back(breakdown_from_json(s));
  r.mta_before = j.at("mta_before").get<double>();
  r.wma_before = j.at("wma_before").get<double>();
  r.mta_expanded = j.at("mta_expanded").get<double>();
  r.wma_expanded = j.at("wma_expanded").get<double>();
  r.mta_after = j.at("mta_after").get<double>();
  r.wma_after = j.at("wma_after").get<double>();
  if (!j.at("sfw").is_null()) r.sfw = sfw_report_from_json(j.at("sfw"));
  r.seconds = j.at("seconds").get<double>();
  r.victim_hash_before = j.at("victim_hash_before").get<std::string>();
  r.victim_hash_after = j.at("victim_hash_after").get<std::string>();
  r.attacked_hash = j.at("attacked_hash").get<std::string>();
  r.search = j.at("search");
  r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
  return r;
}

AttackResult run_attack(const TappedClassifier<float>& victim, const AuxiliaryData& aux, const ADConfig& cfg, const AttackHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  const int c = victim.num_classes();
  cfg.validate(c);
  if (victim.expanded()) throw ConfigError("the victim already has a lure class");
  const bool lures_on = uses_lures(cfg.variant);
  const int delta = cfg.resolved_delta(c);
  if (lures_on && aux.lures.empty()) throw ConfigError("variant " + to_string(cfg.variant) + " needs a non-empty lure set");
  if (aux.proxy.empty()) throw ConfigError("the attack needs a non-empty proxy set");
  if (!(aux.proxy.shape == victim.input_shape())) throw ConfigError("proxy images do not match the victim's input shape");

  const std::string tap = cfg.tap_layer.empty() ? victim.tap_layer() : cfg.tap_layer;
  ADConfig effective = cfg;
  effective.tap_layer = tap;
  effective.delta = delta;
  AttackReport report;
  report.config = to_json(effective);
  report.variant = to_string(cfg.variant);
  report.delta = delta;
  report.warnings = aux.warnings;

  TappedClassifier<float> teacher = victim.clone();
  teacher.set_tap_layer(tap);
  report.tap_layer = tap;
  report.victim_hash_before = parameter_hash(teacher);

  TappedClassifier<float> attacked = victim.clone();
  attacked.set_tap_layer(tap);
  attacked.provenance = "attack:" + report.variant;
  if (lures_on && delta == c) {
    attacked.expand_output_layer();
    report.expanded = true;
  }
  if (lures_on && delta < c)
    report.warnings.push_back("lure label " + std::to_string(delta) + " collides with an existing class (label-collision mode)");

  if (hooks.eval_set) {
    report.mta_before = mta(victim, *hooks.eval_set);
    report.mta_expanded = mta(attacked, *hooks.eval_set);
  }
  if (hooks.triggers) {
    report.wma_before = wma(victim, *hooks.triggers);
    report.wma_expanded = wma(attacked, *hooks.triggers);
  }

  // Teacher outputs for every proxy image, computed once unless batches are augmented.
  const std::size_t np = aux.proxy.size();
  TeacherOutputs<float> cache;
  for (std::size_t first = 0; !cfg.finetune.augment && first < np; first += 500) {
    const std::size_t n = std::min<std::size_t>(500, np - first);
    auto part = teacher_outputs(teacher, to_batch<float>(aux.proxy, first, n), cfg.hard_labels);
    if (first == 0) {
      cache.maps.resize(part.maps.rows(), static_cast<Eigen::Index>(np));
      cache.probs.resize(part.probs.rows(), static_cast<Eigen::Index>(np));
    }
    cache.maps.middleCols(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(n)) = part.maps;
    cache.probs.middleCols(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(n)) = part.probs;
  }

  const TrainConfig& ft = cfg.finetune;
  std::mt19937_64 rng(cfg.seed);
  auto params = attacked.parameters();
  nn::Sgd<float> opt(ft.momentum, ft.weight_decay);
  const std::size_t bs = static_cast<std::size_t>(ft.batch_size);
  const std::size_t nl = lures_on ? aux.lures.size() : 0;
  const std::size_t per_step = cfg.lure_batch == 0 ? nl : std::min<std::size_t>(static_cast<std::size_t>(cfg.lure_batch), nl);
  std::vector<std::size_t> lure_order = shuffled_indices(nl, rng());
  std::size_t lure_cursor = 0;

  for (int epoch = 0; epoch < ft.epochs; ++epoch) {
    const auto te = std::chrono::steady_clock::now();
    const double lr = nn::scheduled_lr(ft.schedule, ft.learning_rate, epoch, ft.epochs);
    const auto order = shuffled_indices(np, rng());
    LossBreakdown sum;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < np; first += bs) {
      const std::size_t count = std::min(bs, np - first);
      const std::span<const std::size_t> idx(order.data() + first, count);
      Tensor<float> proxy = to_batch<float>(aux.proxy, idx);
      TeacherOutputs<float> t;
      if (!ft.augment) {
        t.maps.resize(cache.maps.rows(), static_cast<Eigen::Index>(count));
        t.probs.resize(cache.probs.rows(), static_cast<Eigen::Index>(count));
        for (std::size_t k = 0; k < count; ++k) {
          t.maps.col(static_cast<Eigen::Index>(k)) = cache.maps.col(static_cast<Eigen::Index>(idx[k]));
          t.probs.col(static_cast<Eigen::Index>(k)) = cache.probs.col(static_cast<Eigen::Index>(idx[k]));
        }
      }
      Tensor<float> lures;
      if (per_step > 0) {
        std::vector<std::size_t> pick(per_step);
        for (auto& p : pick) {
          p = lure_order[lure_cursor];
          if (++lure_cursor == nl) lure_cursor = 0;
        }
        lures = to_batch<float>(aux.lures, pick);
      }
      if (ft.augment) {
        augment_batch(proxy, rng, ft.rotate_degrees, ft.shift_fraction);
        if (per_step > 0) augment_batch(lures, rng, ft.rotate_degrees, ft.shift_fraction);
        t = teacher_outputs(teacher, proxy, cfg.hard_labels);
      }
      const LossBreakdown b = ad_loss_and_backward(attacked, t, proxy, per_step > 0 ? &lures : nullptr, cfg);
      if (!std::isfinite(b.total)) throw NumericError("attack loss became non-finite in epoch " + std::to_string(epoch + 1));
      opt.step(params, lr);
      if (hooks.record_steps) report.steps.push_back(b);
      sum += b;
      ++steps;
    }
    AttackEpoch rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.loss = steps ? sum.scaled(1.0 / static_cast<double>(steps)) : sum;
    if (const Dataset* ts = hooks.trace_set ? hooks.trace_set : hooks.eval_set; hooks.per_epoch_metrics && ts) rec.mta = mta(attacked, *ts);
    if (hooks.per_epoch_metrics && hooks.triggers) rec.wma = wma(attacked, *hooks.triggers);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - te).count();
    report.trace.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }

  if (hooks.eval_set) report.mta_after = mta(attacked, *hooks.eval_set);
  if (hooks.triggers) report.wma_after = wma(attacked, *hooks.triggers);
  if (hooks.eval_set && hooks.triggers)
    report.sfw = sfw_check(attacked, victim, *hooks.eval_set, *hooks.triggers, hooks.epsilon_forget, hooks.negl);
  report.victim_hash_after = parameter_hash(teacher);
  report.attacked_hash = parameter_hash(attacked);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(attacked), std::move(report)};
}

json to_json(const SearchResult& r) {
  json steps = json::array();
  for (const auto& s : r.trace)
    steps.push_back({{"lambda", s.lambda_index}, {"value", s.value}, {"score", s.score}, {"feasible", s.feasible}});
  return {{"best", to_json(r.best)}, {"trace", steps}};
}

SearchResult lambda_search(const ADConfig& base, const SearchSpace& space, const SearchScorer& scorer) {
  bool any = false;
  for (const auto& r : space.ranges) any = any || r.has_value();
  if (!any) throw ConfigError("lambda search space is empty");
  if (!(space.ratio > 1.0)) throw ConfigError("search ratio must exceed 1");

  SearchResult result;
  result.best = base;
  auto set = [](ADConfig& c, int i, double v) { (i == 1 ? c.lambda1 : i == 2 ? c.lambda2 : c.lambda3) = v; };

  for (int i = 1; i <= 3; ++i) {
    const auto& range = space.ranges[static_cast<std::size_t>(i - 1)];
    if (!range) continue;
    if (!(range->lo > 0) || range->hi < range->lo) throw ConfigError("lambda range must satisfy 0 < lo <= hi");
    if (range->lo == range->hi) {
      set(result.best, i, range->lo);
      continue;
    }
    auto probe = [&](double v) {
      ADConfig c = result.best;
      set(c, i, v);
      const double s = scorer(c);
      const bool ok = s >= space.target;
      result.trace.push_back({i, v, s, ok});
      return ok;
    };
    // `good` is the end most likely feasible, `want` the preferred end.
    double want = range->prefer_small ? range->lo : range->hi;
    double good = range->prefer_small ? range->hi : range->lo;
    double chosen = good;
    if (!probe(good)) {
      chosen = good;
    } else if (probe(want)) {
      chosen = want;
    } else {
      for (int step = 0; step < space.max_steps; ++step) {
        const double ratio = std::max(want, good) / std::min(want, good);
        if (ratio <= space.ratio) break;
        const double mid = std::sqrt(want * good);
        if (probe(mid))
          good = mid;
        else
          want = mid;
      }
      chosen = good;
    }
    set(result.best, i, chosen);
  }
  return result;
}

SearchScorer agreement_scorer(const TappedClassifier<float>& victim, const AuxiliaryData& aux, const Dataset& holdout, int search_epochs) {
  if (holdout.empty()) throw std::invalid_argument("agreement scorer needs held-out proxy images");
  const auto reference = predict_all(victim, holdout, victim.num_classes());
  return [&victim, &aux, &holdout, reference, search_epochs](const ADConfig& cfg) {
    ADConfig c = cfg;
    if (search_epochs > 0) c.finetune.epochs = search_epochs;
    const auto result = run_attack(victim, aux, c);
    const auto pred = predict_all(result.model, holdout, victim.num_classes());
    std::size_t same = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) same += pred[i] == reference[i];
    return static_cast<double>(same) / static_cast<double>(pred.size());
  };
}

#define WMLAB_INSTANTIATE(S)                                                                                                          \
  template double lure_loss_terms<S>(const Matrix<S>&, int, Matrix<S>*);                                                            \
  template double kl_alignment_terms<S>(const Matrix<S>&, const Matrix<S>&, bool, Matrix<S>*);                                      \
  template double attention_alignment_terms<S>(const Eigen::Ref<const Matrix<S>>&, const Eigen::Ref<const Matrix<S>>&, Matrix<S>*); \
  template double attention_penalty_terms<S>(const Eigen::Ref<const Matrix<S>>&, const Matrix<S>&, const std::vector<int>&,         \
                                             Matrix<S>*, Matrix<S>*);                                                              \
  template double lure_loss<S>(const TappedClassifier<S>&, const Tensor<S>&, int);                                                  \
  template double prediction_alignment_loss<S>(const TappedClassifier<S>&, const TappedClassifier<S>&, const Tensor<S>&, bool, bool); \
  template double attention_alignment_loss<S>(const TappedClassifier<S>&, const TappedClassifier<S>&, const Tensor<S>&);            \
  template double attention_penalty<S>(const TappedClassifier<S>&, const Tensor<S>&, const std::vector<int>&);                      \
  template LossBreakdown attention_anchoring_loss<S>(const TappedClassifier<S>&, const TappedClassifier<S>&, const Tensor<S>&,      \
                                                     const ADConfig&);                                                             \
  template LossBreakdown ad_total_loss<S>(const TappedClassifier<S>&, const TappedClassifier<S>&, const Tensor<S>*,                 \
                                          const Tensor<S>&, const ADConfig&);                                                       \
  template TeacherOutputs<S> teacher_outputs<S>(const TappedClassifier<S>&, const Tensor<S>&, bool); \
  template LossBreakdown ad_loss_and_backward<S>(TappedClassifier<S>&, const TeacherOutputs<S>&, const Tensor<S>&, const Tensor<S>*, \
                                                 const ADConfig&, nn::Mode);

WMLAB_INSTANTIATE(float)
WMLAB_INSTANTIATE(double)

}  // namespace wmlab

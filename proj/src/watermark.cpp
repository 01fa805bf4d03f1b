#include "wmlab/watermark.hpp"

#include "wmlab/errors.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/nn/optim.hpp"

#include <chrono>
#include <cmath>

namespace wmlab {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
  if (augment && augment_policy != "rotate-shift") throw ConfigError("unknown augmentation policy '" + augment_policy + "'");
  nn::scheduled_lr(schedule, learning_rate, 0, 2);
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum},         {"schedule", c.schedule},
          {"batch_size", c.batch_size},       {"epochs", c.epochs},             {"augment", c.augment},
          {"augment_policy", c.augment_policy}, {"rotate_degrees", c.rotate_degrees}, {"shift_fraction", c.shift_fraction},
          {"weight_decay", c.weight_decay},   {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.schedule = j.value("schedule", c.schedule);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.augment = j.value("augment", c.augment);
  c.augment_policy = j.value("augment_policy", c.augment_policy);
  c.rotate_degrees = j.value("rotate_degrees", c.rotate_degrees);
  c.shift_fraction = j.value("shift_fraction", c.shift_fraction);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  return c;
}

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}, {"mta", r.mta}, {"wma", r.wma}, {"seconds", r.seconds}};
}

void augment_batch(Tensor<float>& batch, std::mt19937_64& rng, double rotate_degrees, double shift_fraction) {
  const int h = batch.shape.height, w = batch.shape.width;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix<float> src;
  for (int n = 0; n < batch.batch; ++n) {
    const double angle = u(rng) * rotate_degrees * M_PI / 180.0;
    const double tx = u(rng) * shift_fraction * w;
    const double ty = u(rng) * shift_fraction * h;
    src = batch.sample(n);
    auto dst = batch.sample(n);
    const double cs = std::cos(angle), sn = std::sin(angle);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double ox = x - cx - tx, oy = y - cy - ty;
        const double sx = cs * ox + sn * oy + cx;
        const double sy = -sn * ox + cs * oy + cy;
        const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
        const float fx = static_cast<float>(sx - x0), fy = static_cast<float>(sy - y0);
        auto tap = [&](int yy, int xx, float wgt, Eigen::Ref<Eigen::VectorXf> acc) {
          if (wgt == 0.0f || xx < 0 || yy < 0 || xx >= w || yy >= h) return;
          acc += wgt * src.col(yy * w + xx);
        };
        Eigen::VectorXf acc = Eigen::VectorXf::Zero(batch.shape.channels);
        tap(y0, x0, (1 - fx) * (1 - fy), acc);
        tap(y0, x0 + 1, fx * (1 - fy), acc);
        tap(y0 + 1, x0, (1 - fx) * fy, acc);
        tap(y0 + 1, x0 + 1, fx * fy, acc);
        dst.col(y * w + x) = acc;
      }
  }
}

std::vector<EpochRecord> train_classifier(TappedClassifier<float>& model, const Dataset& data, const TrainConfig& cfg, double alpha,
                                          const Dataset* eval_set, const Dataset* triggers, const EpochCallback& on_epoch) {
  cfg.validate();
  if (alpha < 0) throw ConfigError("regularization weight must be >= 0");
  if (data.empty()) throw std::invalid_argument("training set is empty");
  if (!(data.shape == model.input_shape())) throw std::invalid_argument("training data shape does not match the model input");
  for (int label : data.labels)
    if (label < 0 || label >= model.out_dim()) throw std::invalid_argument("training label outside the model's output range");

  std::mt19937_64 rng(cfg.seed);
  auto params = model.parameters();
  nn::Sgd<float> opt(cfg.momentum, alpha);
  std::vector<EpochRecord> trace;
  const std::size_t n = data.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = nn::scheduled_lr(cfg.schedule, cfg.learning_rate, epoch, cfg.epochs);
    const auto order = shuffled_indices(n, rng());
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < n; first += bs) {
      const std::size_t count = std::min(bs, n - first);
      if (count < 2 && n > 1) break;
      const std::span<const std::size_t> idx(order.data() + first, count);
      Tensor<float> batch = to_batch<float>(data, idx);
      if (cfg.augment) augment_batch(batch, rng, cfg.rotate_degrees, cfg.shift_fraction);
      const auto pass = model.forward_train(batch, nn::Mode::kTrain);
      const Matrix<float> logp = log_softmax_columns(pass.logits);
      Matrix<float> grad = logp.array().exp().matrix();
      double ce = 0;
      for (std::size_t k = 0; k < count; ++k) {
        const int y = data.labels[idx[k]];
        ce -= logp(y, static_cast<Eigen::Index>(k));
        grad(y, static_cast<Eigen::Index>(k)) -= 1.0f;
      }
      grad /= static_cast<float>(count);
      const double loss = ce / static_cast<double>(count) + alpha * nn::l2_half(params);
      if (!std::isfinite(loss)) throw NumericError("training loss became non-finite in epoch " + std::to_string(epoch + 1));
      model.zero_grad();
      model.backward(grad);
      opt.step(params, lr);
      loss_sum += loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if (eval_set != nullptr) rec.mta = mta(model, *eval_set);
    if (triggers != nullptr && !triggers->empty()) rec.wma = wma(model, *triggers);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    trace.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return trace;
}

std::vector<EpochRecord> embed_watermark(TappedClassifier<float>& model, const Dataset& clean, const WatermarkTask& task,
                                         const TrainConfig& cfg, const Dataset* eval_set, const EpochCallback& on_epoch) {
  if (model.out_dim() != clean.num_classes)
    throw ConfigError("model has " + std::to_string(model.out_dim()) + " outputs but the data has " +
                      std::to_string(clean.num_classes) + " classes");
  if (task.target_label < 0 || task.target_label >= clean.num_classes) throw ConfigError("target label outside [0, C)");
  for (int label : task.triggers.labels)
    if (label != task.target_label) throw ConfigError("trigger labels must all equal the target label");
  if (task.triggers.empty()) return train_classifier(model, clean, cfg, task.alpha, eval_set, nullptr, on_epoch);
  if (!(task.triggers.shape == clean.shape)) throw ConfigError("trigger shape does not match the clean data");

  Dataset merged = clean;
  merged.name = clean.name + "+" + task.triggers.name;
  merged.pixels.conservativeResize(Eigen::NoChange, clean.pixels.cols() + task.triggers.pixels.cols());
  merged.pixels.rightCols(task.triggers.pixels.cols()) = task.triggers.pixels;
  merged.labels.insert(merged.labels.end(), task.triggers.labels.begin(), task.triggers.labels.end());
  return train_classifier(model, merged, cfg, task.alpha, eval_set, &task.triggers, on_epoch);
}

Verification verify(const PredictFn& model_api, const Dataset& triggers, int target_label, double tau) {
  if (triggers.empty()) throw std::invalid_argument("verification needs a non-empty trigger set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < triggers.size(); ++i) hits += model_api(triggers.item(i)) == target_label;
  Verification v;
  v.accuracy = static_cast<double>(hits) / static_cast<double>(triggers.size());
  v.owned = v.accuracy > tau;
  return v;
}

PredictFn local_predictor(const TappedClassifier<float>& model) {
  return [&model](const LabeledImage& image) {
    Matrix<float> m = Eigen::Map<const Matrix<float>>(image.pixels.data(), image.shape.channels, image.shape.spatial());
    return model.predict(Tensor<float>(image.shape, 1, std::move(m))).front();
  };
}

json to_json(const SfwReport& r) {
  return {{"num_classes", r.num_classes},
          {"wma_attacked", r.wma_attacked},
          {"wma_attacked_first_c", r.wma_attacked_first_c},
          {"mta_attacked", r.mta_attacked},
          {"mta_victim", r.mta_victim},
          {"wma_victim", r.wma_victim},
          {"epsilon_forget", r.epsilon_forget},
          {"negl", r.negl},
          {"forget_ok", r.forget_ok},
          {"fidelity_ok", r.fidelity_ok}};
}

SfwReport sfw_report_from_json(const json& j) {
  SfwReport r;
  r.num_classes = j.at("num_classes").get<int>();
  r.wma_attacked = j.at("wma_attacked").get<double>();
  r.wma_attacked_first_c = j.value("wma_attacked_first_c", r.wma_attacked);
  r.mta_attacked = j.at("mta_attacked").get<double>();
  r.mta_victim = j.at("mta_victim").get<double>();
  r.wma_victim = j.value("wma_victim", 0.0);
  r.epsilon_forget = j.at("epsilon_forget").get<double>();
  r.negl = j.at("negl").get<double>();
  r.forget_ok = j.at("forget_ok").get<bool>();
  r.fidelity_ok = j.at("fidelity_ok").get<bool>();
  return r;
}

void apply_sfw_criteria(SfwReport& r) {
  constexpr double kSlack = 1e-12;
  r.forget_ok = std::abs(r.wma_attacked - 1.0 / r.num_classes) <= r.epsilon_forget + kSlack;
  r.fidelity_ok = std::abs(r.mta_attacked - r.mta_victim) <= r.negl + kSlack;
}

SfwReport sfw_check(const TappedClassifier<float>& attacked, const TappedClassifier<float>& victim, const Dataset& eval_set,
                    const Dataset& triggers, double epsilon_forget, double negl) {
  SfwReport r;
  r.num_classes = victim.num_classes();
  r.epsilon_forget = epsilon_forget;
  r.negl = negl;
  r.mta_attacked = mta(attacked, eval_set);
  r.mta_victim = mta(victim, eval_set);
  r.wma_attacked = wma(attacked, triggers);
  r.wma_attacked_first_c = wma(attacked, triggers, true);
  r.wma_victim = wma(victim, triggers);
  apply_sfw_criteria(r);
  return r;
}

}  // namespace wmlab

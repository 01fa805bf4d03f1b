#pragma once

#include "wmlab/datasets.hpp"
#include "wmlab/models.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace wmlab {

struct TrainConfig {
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::string schedule = "cosine";
  int batch_size = 128;
  int epochs = 30;
  bool augment = true;
  /// "rotate-shift": rotation within ±rotate_degrees and shifts within
  /// ±shift_fraction of the image side, bilinear with zero fill.
  std::string augment_policy = "rotate-shift";
  double rotate_degrees = 15.0;
  double shift_fraction = 0.1;
  /// Weight decay used by trainers that are not given a WatermarkTask.
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

struct WatermarkTask {
  Dataset triggers;
  int target_label = 0;
  double tau = 0.9;
  /// Strength of the ½‖θ‖² regularizer.
  double alpha = 5e-4;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double mta = -1;
  double wma = -1;
  double seconds = 0;
};

nlohmann::json to_json(const EpochRecord& r);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minimizes mean cross-entropy over `data` plus alpha·½‖θ‖² with SGD.
/// `eval_set`/`triggers` (optional) are scored after every epoch.
std::vector<EpochRecord> train_classifier(TappedClassifier<float>& model, const Dataset& data, const TrainConfig& cfg, double alpha,
                                          const Dataset* eval_set = nullptr, const Dataset* triggers = nullptr,
                                          const EpochCallback& on_epoch = {});

/// Trains on D ∪ T (uniform sampling over the union). Throws NumericError
/// naming the epoch if the loss becomes non-finite.
std::vector<EpochRecord> embed_watermark(TappedClassifier<float>& model, const Dataset& clean, const WatermarkTask& task,
                                         const TrainConfig& cfg, const Dataset* eval_set = nullptr, const EpochCallback& on_epoch = {});

/// Random rotation/shift of every sample in place.
void augment_batch(Tensor<float>& batch, std::mt19937_64& rng, double rotate_degrees, double shift_fraction);

/// Black-box top-1 predictor for a single image.
using PredictFn = std::function<int(const LabeledImage&)>;

struct Verification {
  double accuracy = 0;
  bool owned = false;
};

/// Queries `model_api` once per trigger; owned iff accuracy > tau.
Verification verify(const PredictFn& model_api, const Dataset& triggers, int target_label, double tau);

/// Local black-box adapter (top-1 over all outputs).
PredictFn local_predictor(const TappedClassifier<float>& model);

struct SfwReport {
  int num_classes = 0;
  double wma_attacked = 0;
  double wma_attacked_first_c = 0;
  double mta_attacked = 0;
  double mta_victim = 0;
  double wma_victim = 0;
  double epsilon_forget = 0.1;
  double negl = 0.03;
  bool forget_ok = false;
  bool fidelity_ok = false;

  bool passed() const { return forget_ok && fidelity_ok; }
};

nlohmann::json to_json(const SfwReport& r);
SfwReport sfw_report_from_json(const nlohmann::json& j);

/// Fills forget_ok / fidelity_ok from the metric fields.
void apply_sfw_criteria(SfwReport& r);

SfwReport sfw_check(const TappedClassifier<float>& attacked, const TappedClassifier<float>& victim, const Dataset& eval_set,
                    const Dataset& triggers, double epsilon_forget = 0.1, double negl = 0.03);

}  // namespace wmlab

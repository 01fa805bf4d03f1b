#pragma once

#include "wmlab/datasets.hpp"
#include "wmlab/models.hpp"
#include "wmlab/watermark.hpp"

#include <json.hpp>

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace wmlab {

enum class Variant { kAD, kVanilla, kAA, kADNRA, kADNLA, kADNRT };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);
/// Variants that add the lure class and train on lures.
bool uses_lures(Variant v);

struct ADConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1e-4;
  /// Lure label; -1 means C (a new class).
  int delta = -1;
  Variant variant = Variant::kAD;
  /// Empty means the architecture default.
  std::string tap_layer;
  std::vector<int> penalty_taps = {1, 2};
  /// KL(q_A || p_V) instead of KL(p_V || q_A).
  bool kl_reverse = false;
  /// Align to the victim's top-1 label (one-hot) rather than its softmax.
  bool hard_labels = true;
  /// Lures per optimizer step (cycled); 0 means all of them.
  int lure_batch = 0;
  TrainConfig finetune = default_finetune();
  std::uint64_t seed = 0;

  static TrainConfig default_finetune();
  int resolved_delta(int num_classes) const { return delta < 0 ? num_classes : delta; }
  /// Throws ConfigError on invalid combinations.
  void validate(int num_classes) const;
};

nlohmann::json to_json(const ADConfig& cfg);
ADConfig ad_config_from_json(const nlohmann::json& j, ADConfig defaults = {});

/// Individual loss terms (raw) and the weights the variant applies to them.
struct LossBreakdown {
  double lure = 0;
  double kl = 0;
  double align = 0;
  double penalty = 0;
  double w_lure = 0;
  double w_kl = 0;
  double w_align = 0;
  double w_penalty = 0;
  double total = 0;

  double weighted_sum() const { return w_lure * lure + w_kl * kl + w_align * align + w_penalty * penalty; }
  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
};

nlohmann::json to_json(const LossBreakdown& b);

/// Variant weights applied to (L_δ, L_v, L_a, R).
std::array<double, 4> variant_weights(const ADConfig& cfg);

// Loss terms on precomputed outputs. Each optionally writes the gradient with
// respect to its inputs (same layout, already divided by the batch size).

/// Mean cross-entropy of logit columns against `delta`.
template <typename Scalar>
double lure_loss_terms(const Matrix<Scalar>& logits, int delta, Matrix<Scalar>* grad = nullptr);

/// Mean KL(p_ref || softmax(first C rows of logits)), C = p_ref.rows().
/// With `reverse`, KL(softmax(...) || p_ref). Gradient rows beyond C are zero.
template <typename Scalar>
double kl_alignment_terms(const Matrix<Scalar>& logits, const Matrix<Scalar>& p_ref, bool reverse = false,
                          Matrix<Scalar>* grad = nullptr);

/// Mean over columns of ||a_i - b_i||_2, columns being flattened samples.
template <typename Scalar>
double attention_alignment_terms(const Eigen::Ref<const Matrix<Scalar>>& a, const Eigen::Ref<const Matrix<Scalar>>& b,
                                 Matrix<Scalar>* grad = nullptr);

/// Sum over j in taps of the mean column norm of maps (j=1) or of the full
/// softmax of logits (j=2).
template <typename Scalar>
double attention_penalty_terms(const Eigen::Ref<const Matrix<Scalar>>& maps, const Matrix<Scalar>& logits, const std::vector<int>& taps,
                               Matrix<Scalar>* grad_maps = nullptr, Matrix<Scalar>* grad_logits = nullptr);

// Model-level losses (inference mode, no parameter gradients).

template <typename Scalar>
double lure_loss(const TappedClassifier<Scalar>& attacked, const Tensor<Scalar>& lure_batch, int delta);
template <typename Scalar>
double prediction_alignment_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                                 const Tensor<Scalar>& proxy_batch, bool reverse = false, bool hard_labels = false);
template <typename Scalar>
double attention_alignment_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                                const Tensor<Scalar>& proxy_batch);
template <typename Scalar>
double attention_penalty(const TappedClassifier<Scalar>& attacked, const Tensor<Scalar>& proxy_batch, const std::vector<int>& taps);
/// λ1·L_v + λ2·L_a + λ3·R with the raw terms reported.
template <typename Scalar>
LossBreakdown attention_anchoring_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                                       const Tensor<Scalar>& proxy_batch, const ADConfig& cfg);
/// Full objective for cfg.variant.
template <typename Scalar>
LossBreakdown ad_total_loss(const TappedClassifier<Scalar>& attacked, const TappedClassifier<Scalar>& victim,
                            const Tensor<Scalar>* lure_batch, const Tensor<Scalar>& proxy_batch, const ADConfig& cfg);

/// Victim outputs on proxy samples, computed once per attack.
template <typename Scalar>
struct TeacherOutputs {
  Matrix<Scalar> maps;   // tap size x N, flattened samples
  Matrix<Scalar> probs;  // C x N
};

template <typename Scalar>
TeacherOutputs<Scalar> teacher_outputs(const TappedClassifier<Scalar>& victim, const Tensor<Scalar>& proxy_batch,
                                       bool hard_labels = false);

/// One training-mode step's loss: forwards [proxy; lures] through `attacked`,
/// accumulates parameter gradients (after zeroing them) and returns the
/// breakdown. `teacher` columns correspond to the proxy samples.
template <typename Scalar>
LossBreakdown ad_loss_and_backward(TappedClassifier<Scalar>& attacked, const TeacherOutputs<Scalar>& teacher,
                                   const Tensor<Scalar>& proxy_batch, const Tensor<Scalar>* lure_batch, const ADConfig& cfg,
                                   nn::Mode mode = nn::Mode::kTrain);

struct AttackEpoch {
  int epoch = 0;
  double lr = 0;
  LossBreakdown loss;
  double mta = -1;
  double wma = -1;
  double seconds = 0;
};

nlohmann::json to_json(const AttackEpoch& e);

struct AttackReport {
  nlohmann::json config;
  std::string variant;
  std::string tap_layer;
  int delta = 0;
  bool expanded = false;
  std::vector<std::string> warnings;
  std::vector<AttackEpoch> trace;
  std::vector<LossBreakdown> steps;
  double mta_before = -1, wma_before = -1;
  /// After the expansion step, before any update.
  double mta_expanded = -1, wma_expanded = -1;
  double mta_after = -1, wma_after = -1;
  std::optional<SfwReport> sfw;
  double seconds = 0;
  std::string victim_hash_before, victim_hash_after, attacked_hash;
  nlohmann::json search;
  std::vector<std::string> checkpoints;
};

nlohmann::json to_json(const AttackReport& r);
AttackReport attack_report_from_json(const nlohmann::json& j);

/// Optional measurement hooks. They only observe; nothing here feeds back
/// into the attack.
struct AttackHooks {
  const Dataset* eval_set = nullptr;
  const Dataset* triggers = nullptr;
  /// Per-epoch MTA uses this set when given, else eval_set.
  const Dataset* trace_set = nullptr;
  bool per_epoch_metrics = false;
  bool record_steps = false;
  double epsilon_forget = 0.1;
  double negl = 0.03;
  std::function<void(const AttackEpoch&)> on_epoch;
};

struct AttackResult {
  TappedClassifier<float> model;
  AttackReport report;
};

/// Fine-tunes a copy of `victim` on the auxiliary data under cfg.
AttackResult run_attack(const TappedClassifier<float>& victim, const AuxiliaryData& aux, const ADConfig& cfg,
                        const AttackHooks& hooks = {});

/// Log-space bounds for one λ and the direction the search leans towards.
struct LambdaRange {
  double lo = 1e-3;
  double hi = 10.0;
  /// Seek the smallest feasible value (true) or the largest (false).
  bool prefer_small = true;
};

struct SearchSpace {
  std::array<std::optional<LambdaRange>, 3> ranges;
  /// Feasible iff score >= target.
  double target = 0.9;
  /// Stop once hi/lo <= ratio.
  double ratio = 2.0;
  int max_steps = 8;
};

struct SearchStep {
  int lambda_index = 0;  // 1..3
  double value = 0;
  double score = 0;
  bool feasible = false;
};

struct SearchResult {
  ADConfig best;
  std::vector<SearchStep> trace;
};

nlohmann::json to_json(const SearchResult& r);

using SearchScorer = std::function<double(const ADConfig&)>;

/// Bisection in log space for each λ with a range (others fixed), one
/// round-robin pass over λ1, λ2, λ3. Each λ moves to the feasible value
/// closest to its preferred end of the range.
SearchResult lambda_search(const ADConfig& base, const SearchSpace& space, const SearchScorer& scorer);

/// Attacker-side scorer: runs the attack with `cfg` and returns top-1
/// agreement between attacked (first C outputs) and victim on `holdout`
/// proxy images that the attack did not train on.
SearchScorer agreement_scorer(const TappedClassifier<float>& victim, const AuxiliaryData& aux, const Dataset& holdout,
                              int search_epochs = -1);

}  // namespace wmlab

#pragma once

#include "wmlab/nn/layers.hpp"
#include "wmlab/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace wmlab {

/// kMicroCnn is a ~250-parameter net used by gradient checks.
enum class Arch { kToyCnn, kVgg16, kResNet18, kWrn16_4, kMicroCnn };

std::string to_string(Arch arch);
/// Throws std::invalid_argument for an unknown architecture id.
Arch parse_arch(std::string_view id);

struct ModelSpec {
  Arch arch = Arch::kToyCnn;
  Shape input_shape{3, 32, 32};
  int num_classes = 10;
  std::uint64_t seed = 0;
};

/// Name of the activation layer immediately preceding the final pooling /
/// flatten stage of `arch`.
std::string default_tap(Arch arch);

/// Output of the split forward pass: tap activations and softmax rows.
template <typename Scalar>
struct SplitOutput {
  Tensor<Scalar> maps;
  Matrix<Scalar> probs;  // out_dim x batch
};

/// Activations cached by a training-mode forward pass.
template <typename Scalar>
struct TrainPass {
  Tensor<Scalar> maps;
  Matrix<Scalar> logits;  // out_dim x batch
};

/// A classifier f = F2(F1(x)) split at a named activation layer.
///
/// F1 runs the top-level layers up to and including the tap; F2 runs the rest
/// and ends in logits (softmax is applied by callers that need it).
template <typename Scalar>
class TappedClassifier {
 public:
  TappedClassifier(ModelSpec spec, nn::Sequential<Scalar> body, std::string tap);

  TappedClassifier(TappedClassifier&&) noexcept = default;
  TappedClassifier& operator=(TappedClassifier&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  Arch arch() const { return spec_.arch; }
  Shape input_shape() const { return spec_.input_shape; }
  int num_classes() const { return spec_.num_classes; }
  int out_dim() const { return out_dim_; }
  bool expanded() const { return out_dim_ > spec_.num_classes; }

  /// Names of all registered activation layers, in network order.
  std::vector<std::string> activation_layers() const;
  const std::string& tap_layer() const { return tap_name_; }
  void set_tap_layer(const std::string& name);
  Shape layer_shape(const std::string& name) const;
  Shape tap_shape() const { return layer_shape(tap_name_); }

  Matrix<Scalar> logits(const Tensor<Scalar>& batch) const;
  Matrix<Scalar> probabilities(const Tensor<Scalar>& batch) const { return softmax_columns(logits(batch)); }
  /// (F1(x), softmax(F2(F1(x)))).
  SplitOutput<Scalar> forward_split(const Tensor<Scalar>& batch) const;
  Tensor<Scalar> attention(const Tensor<Scalar>& batch) const;
  /// Top-1 class over all outputs, or over the first `limit` when given.
  std::vector<int> predict(const Tensor<Scalar>& batch, int limit = -1) const;

  TrainPass<Scalar> forward_train(const Tensor<Scalar>& batch, nn::Mode mode = nn::Mode::kTrain);
  /// Backpropagates d(loss)/d(logits) and, when present, an extra gradient
  /// injected at the tap output. Parameter gradients accumulate.
  Tensor<Scalar> backward(const Matrix<Scalar>& grad_logits, const Tensor<Scalar>* grad_tap = nullptr);
  /// Like backward() but stops at the tap, returning d(loss)/d(maps).
  Tensor<Scalar> backward_to_tap(const Matrix<Scalar>& grad_logits);

  std::vector<nn::NamedParam<Scalar>> parameters();
  std::vector<nn::NamedBuffer<Scalar>> buffers();
  void zero_grad();
  std::size_t parameter_count();

  /// Appends a zero-initialized class to the output layer (at most once).
  void expand_output_layer();

  /// Named parameter and buffer values, keyed "param:<name>" / "buffer:<name>".
  std::map<std::string, Matrix<Scalar>> state();
  void load_state(const std::map<std::string, Matrix<Scalar>>& values);

  TappedClassifier clone() const;
  template <typename Other>
  TappedClassifier<Other> cast() const;

  /// Free-form provenance recorded into checkpoints.
  std::string provenance;

 private:
  std::size_t index_of(const std::string& name) const;

  ModelSpec spec_;
  nn::Sequential<Scalar> body_;
  std::string tap_name_;
  std::size_t tap_index_ = 0;
  int out_dim_ = 0;
};

template <typename Scalar>
TappedClassifier<Scalar> build_model(const ModelSpec& spec);

/// Hex digest of every parameter and buffer value (bitwise).
template <typename Scalar>
std::string parameter_hash(TappedClassifier<Scalar>& model);

template <typename Scalar>
template <typename Other>
TappedClassifier<Other> TappedClassifier<Scalar>::cast() const {
  auto self = clone();
  TappedClassifier<Other> out = build_model<Other>(spec_);
  if (expanded()) out.expand_output_layer();
  out.set_tap_layer(tap_name_);
  std::map<std::string, Matrix<Other>> values;
  for (auto& [name, m] : self.state()) values.emplace(name, m.template cast<Other>());
  out.load_state(values);
  out.provenance = provenance;
  return out;
}

/// Checkpoint file: parameters keyed by name plus metadata. Scalars are stored
/// in the model's native precision, so save/load is bit-exact.
template <typename Scalar>
void save_checkpoint(TappedClassifier<Scalar>& model, const std::filesystem::path& path);
template <typename Scalar>
TappedClassifier<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace wmlab

#pragma once

#include "wmlab/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace wmlab {

enum class Split { kTrain, kTest, kProxy, kLure, kTrigger, kEval };

std::string to_string(Split split);
Split parse_split(const std::string& text);

/// One image with its label. Pixels are HWC-interleaved intensities in [0, 1].
struct LabeledImage {
  Shape shape;
  Eigen::ArrayXf pixels;
  int label = 0;
};

/// An ordered image collection with a fixed per-item shape.
///
/// Pixels are stored one image per column (HWC order), which is exactly the
/// per-sample layout of Tensor, so batching is a column gather.
struct Dataset {
  std::string name;
  Split split = Split::kTrain;
  int num_classes = 0;
  Shape shape;
  Matrix<float> pixels;     // shape.size() x N
  std::vector<int> labels;  // N
  /// Labels are carried but must not be consulted (proxy data).
  bool labels_ignored = false;
  /// Where the items came from (source dataset, seed, selection); used to
  /// keep evaluation data apart from attack-side data.
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  LabeledImage item(std::size_t i) const;
  void push_back(const LabeledImage& image);
  /// Throws if pixels/labels are inconsistent or out of range for the split.
  void validate() const;
};

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices, std::string name = {});

/// Deterministic permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

/// Picks `count` items spread evenly over the classes (round-robin over
/// per-class shuffled lists), optionally skipping one class.
std::vector<std::size_t> stratified_sample(const Dataset& ds, std::size_t count, std::uint64_t seed,
                                           std::optional<int> exclude_class = std::nullopt);

template <typename Scalar>
Tensor<Scalar> to_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Matrix<Scalar> m(ds.shape.channels, static_cast<Eigen::Index>(indices.size()) * ds.shape.spatial());
  Eigen::Map<Matrix<Scalar>> flat(m.data(), ds.shape.size(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k)
    flat.col(static_cast<Eigen::Index>(k)) = ds.pixels.col(static_cast<Eigen::Index>(indices[k])).template cast<Scalar>();
  return Tensor<Scalar>(ds.shape, static_cast<int>(indices.size()), std::move(m));
}

template <typename Scalar>
Tensor<Scalar> to_batch(const Dataset& ds, std::size_t first, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) idx[k] = first + k;
  return to_batch<Scalar>(ds, idx);
}

enum class TriggerKind { kContent, kNoise, kUnrelated };

std::string to_string(TriggerKind kind);
TriggerKind parse_trigger_kind(const std::string& text);

/// Recipe for a trigger set: x_t = (1 - m) * x + m * pattern.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::kContent;
  /// HWC pattern; for noise triggers it is regenerated per trigger.
  Eigen::ArrayXf pattern;
  /// H x W mask, row-major, entries in [0, 1]; shared by all channels.
  Eigen::ArrayXf mask;
  Shape shape;
  int target_label = 0;
  std::size_t count = 1;
  std::uint64_t seed = 0;
  /// Noise triggers: per-trigger Gaussian std, added to the base image under the mask.
  float noise_std = 0.1f;
};

struct StampOptions {
  std::string text = "TEST";
  int scale = 1;
  /// Top-left corner; negative means centered.
  int row = -1;
  int col = -1;
  float intensity = 1.0f;
  float color = 1.0f;
};

/// 'TEST'-style content trigger: mask is 1 on the glyph strokes, pattern is a
/// flat `color` image.
TriggerSpec content_trigger_spec(Shape shape, int target_label, std::size_t count, std::uint64_t seed,
                                 const StampOptions& stamp = {});
/// Noise trigger: mask is 1 on a `patch` x `patch` square in the bottom-right corner.
TriggerSpec noise_trigger_spec(Shape shape, int target_label, std::size_t count, std::uint64_t seed, float noise_std = 0.1f,
                               int patch = 0);

/// Per-pixel blend of one image. Result is clipped to [0, 1].
Eigen::ArrayXf blend(const Eigen::ArrayXf& image, const Eigen::ArrayXf& pattern, const Eigen::ArrayXf& mask, Shape shape);

/// Stamps `spec.count` base images drawn stratified across classes.
Dataset synthesize_triggers(const Dataset& clean, const TriggerSpec& spec);

/// Relabels `count` images of an unrelated source as `target_label`,
/// resizing (bilinear) and replicating channels to `target_shape`.
Dataset make_unrelated_triggers(const Dataset& source, int target_label, std::size_t count, Shape target_shape);

/// Bilinear resize + channel replication of one HWC image.
Eigen::ArrayXf adapt_image(const Eigen::ArrayXf& pixels, Shape from, Shape to);

/// Procedural abstract images (overlapping colored shapes and gradients).
Dataset make_abstract_images(std::size_t count, Shape shape, std::uint64_t seed);

/// Crafted attacker data: unlabeled proxy set and lure set labeled delta.
struct AuxiliaryData {
  Dataset proxy;
  Dataset lures;
  int delta = 0;
  std::vector<std::string> warnings;
};

/// Samples n_proxy proxy images and n_lures lure images (labeled delta).
/// Throws if any proxy image is pixel-identical to a lure image. A delta
/// below num_classes is accepted with a warning (label-collision mode).
AuxiliaryData build_auxiliary(const Dataset& proxy_source, const Dataset& lure_source, std::size_t n_proxy,
                              std::size_t n_lures, int delta, int num_classes, std::uint64_t seed);

/// In-distribution proxy mode: splits a test set into a proxy half and an
/// evaluation half (the odd item goes to the evaluation half).
std::pair<Dataset, Dataset> proxy_mode_split(const Dataset& test_set, std::uint64_t seed);

/// Hex digest of pixel bytes and labels.
std::string dataset_hash(const Dataset& ds);

/// Dataset directory: images.wmt (packed N x H x W x C tensor, u8 or f32) and
/// meta.json (name, split, shape, num_classes, labels, seed, spec hash).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir, const std::string& spec_hash = {},
                  std::uint64_t seed = 0, bool quantize = false);
Dataset load_dataset(const std::filesystem::path& dir);

/// Keeps only the items with the given label.
Dataset filter_label(const Dataset& ds, int label);

}  // namespace wmlab

#pragma once

#include "wmlab/image_io.hpp"
#include "wmlab/models.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace wmlab {

/// H x W map in [0, 1] (all zero when degenerate).
struct Heatmap {
  Eigen::ArrayXXf values;
  std::string model_ref;
  std::string input_ref;
  int class_id = 0;
  std::string layer;
};

/// Grad-CAM of the class logit at `layer` (default: the model's last
/// spatial activation), upsampled bilinearly to the input size.
template <typename Scalar>
Heatmap grad_cam(const TappedClassifier<Scalar>& model, const Tensor<Scalar>& image, int class_id, std::string layer = {});

/// Last activation layer whose output still has a spatial extent.
template <typename Scalar>
std::string last_conv_activation(const TappedClassifier<Scalar>& model);

/// Pearson correlation of the flattened maps; 0 if either map is constant.
double heatmap_similarity(const Heatmap& a, const Heatmap& b);

/// Colormapped heatmap blended over the image (HWC in [0, 1]).
RgbImage overlay(const Heatmap& h, const Eigen::ArrayXf& image, Shape shape, int upscale = 4, float alpha = 0.5f);
RgbImage heatmap_image(const Heatmap& h, int upscale = 4);

/// Writes <stem>.png (grayscale), <stem>_overlay.png and <stem>.wmt (raw values).
void export_heatmap(const std::filesystem::path& stem, const Heatmap& h, const Eigen::ArrayXf& image, Shape shape);

/// Tiles equally sized cells into a grid with column titles.
RgbImage image_grid(const std::vector<std::vector<RgbImage>>& rows, const std::vector<std::string>& column_titles, int pad = 4);

}  // namespace wmlab

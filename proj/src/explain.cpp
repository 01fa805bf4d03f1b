#include "wmlab/explain.hpp"

#include "wmlab/datasets.hpp"
#include "wmlab/packed_io.hpp"

#include <cmath>

namespace wmlab {

template <typename Scalar>
std::string last_conv_activation(const TappedClassifier<Scalar>& model) {
  std::string best;
  for (const auto& name : model.activation_layers())
    if (!model.layer_shape(name).flat()) best = name;
  if (best.empty()) throw std::invalid_argument("model has no spatial activation layer");
  return best;
}

template <typename Scalar>
Heatmap grad_cam(const TappedClassifier<Scalar>& model, const Tensor<Scalar>& image, int class_id, std::string layer) {
  if (image.batch != 1) throw std::invalid_argument("grad_cam takes a single image");
  if (class_id < 0 || class_id >= model.out_dim())
    throw std::invalid_argument("class id " + std::to_string(class_id) + " outside the model's outputs");
  if (layer.empty()) layer = last_conv_activation(model);
  if (model.layer_shape(layer).flat()) throw std::invalid_argument("layer '" + layer + "' has no spatial extent");

  TappedClassifier<Scalar> m = model.clone();
  m.set_tap_layer(layer);
  const auto pass = m.forward_train(image, nn::Mode::kEval);
  Matrix<Scalar> seed = Matrix<Scalar>::Zero(m.out_dim(), 1);
  seed(class_id, 0) = Scalar(1);
  const Tensor<Scalar> grad = m.backward_to_tap(seed);

  const Shape s = pass.maps.shape;
  const Vector<Scalar> weights = grad.data.rowwise().mean();
  Eigen::ArrayXf cam(s.spatial());
  for (int p = 0; p < s.spatial(); ++p)
    cam(p) = std::max(0.0f, static_cast<float>(weights.dot(pass.maps.data.col(p))));

  Heatmap h;
  h.class_id = class_id;
  h.layer = layer;
  const Shape in = model.input_shape();
  const float peak = cam.maxCoeff();
  if (!(peak > 0.0f)) {
    h.values = Eigen::ArrayXXf::Zero(in.height, in.width);
    return h;
  }
  const Eigen::ArrayXf up = adapt_image(cam / peak, Shape{1, s.height, s.width}, Shape{1, in.height, in.width});
  const float lo = up.minCoeff(), hi = up.maxCoeff();
  h.values.resize(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) h.values(y, x) = hi > lo ? (up(y * in.width + x) - lo) / (hi - lo) : 0.0f;
  return h;
}

double heatmap_similarity(const Heatmap& a, const Heatmap& b) {
  if (a.values.rows() != b.values.rows() || a.values.cols() != b.values.cols())
    throw std::invalid_argument("heatmaps differ in size");
  const Eigen::ArrayXd x = a.values.cast<double>().reshaped();
  const Eigen::ArrayXd y = b.values.cast<double>().reshaped();
  const Eigen::ArrayXd dx = x - x.mean(), dy = y - y.mean();
  const double sxx = dx.square().sum(), syy = dy.square().sum();
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp((dx * dy).sum() / std::sqrt(sxx * syy), -1.0, 1.0);
}

RgbImage heatmap_image(const Heatmap& h, int upscale) {
  RgbImage img(static_cast<int>(h.values.cols()) * upscale, static_cast<int>(h.values.rows()) * upscale);
  for (int y = 0; y < h.values.rows(); ++y)
    for (int x = 0; x < h.values.cols(); ++x) img.fill_rect(x * upscale, y * upscale, upscale, upscale, colormap(h.values(y, x)));
  return img;
}

RgbImage overlay(const Heatmap& h, const Eigen::ArrayXf& image, Shape shape, int upscale, float alpha) {
  const RgbImage base = to_rgb(image, shape.height, shape.width, shape.channels, upscale);
  const RgbImage heat = heatmap_image(h, upscale);
  RgbImage out = base;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<std::uint8_t>(std::lround((1 - alpha) * base.data[i] + alpha * heat.data[i]));
  return out;
}

void export_heatmap(const std::filesystem::path& stem, const Heatmap& h, const Eigen::ArrayXf& image, Shape shape) {
  const int rows = static_cast<int>(h.values.rows()), cols = static_cast<int>(h.values.cols());
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(rows) * cols);
  std::vector<float> raw(gray.size());
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) {
      raw[static_cast<std::size_t>(y * cols + x)] = h.values(y, x);
      gray[static_cast<std::size_t>(y * cols + x)] = static_cast<std::uint8_t>(std::lround(255.0f * h.values(y, x)));
    }
  write_png_gray(stem.string() + ".png", cols, rows, gray);
  write_png(stem.string() + "_overlay.png", overlay(h, image, shape));
  write_packed(stem.string() + ".wmt",
               PackedTensor::from<float>(raw, {static_cast<std::uint64_t>(rows), static_cast<std::uint64_t>(cols)}));
}

RgbImage image_grid(const std::vector<std::vector<RgbImage>>& rows, const std::vector<std::string>& column_titles, int pad) {
  int cw = 0, ch = 0;
  std::size_t ncols = column_titles.size();
  for (const auto& r : rows) {
    ncols = std::max(ncols, r.size());
    for (const auto& c : r) {
      cw = std::max(cw, c.width);
      ch = std::max(ch, c.height);
    }
  }
  cw = std::max(cw, 1);
  for (const auto& t : column_titles) cw = std::max(cw, text_width(t));
  const int header = column_titles.empty() ? 0 : kGlyphHeight + 2 * pad;
  RgbImage out(pad + static_cast<int>(ncols) * (cw + pad), header + pad + static_cast<int>(rows.size()) * (ch + pad));
  for (std::size_t c = 0; c < column_titles.size(); ++c)
    draw_text(out, pad + static_cast<int>(c) * (cw + pad), pad, column_titles[c], {0, 0, 0});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      out.blit(rows[r][c], pad + static_cast<int>(c) * (cw + pad), header + pad + static_cast<int>(r) * (ch + pad));
  return out;
}

template Heatmap grad_cam<float>(const TappedClassifier<float>&, const Tensor<float>&, int, std::string);
template Heatmap grad_cam<double>(const TappedClassifier<double>&, const Tensor<double>&, int, std::string);
template std::string last_conv_activation<float>(const TappedClassifier<float>&);
template std::string last_conv_activation<double>(const TappedClassifier<double>&);

}  // namespace wmlab

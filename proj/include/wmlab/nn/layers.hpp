#pragma once

#include "wmlab/tensor.hpp"

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace wmlab::nn {

enum class Mode { kTrain, kEval };

template <typename Scalar>
struct Param {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  void resize(Eigen::Index rows, Eigen::Index cols) {
    value = Matrix<Scalar>::Zero(rows, cols);
    grad = Matrix<Scalar>::Zero(rows, cols);
  }
};

template <typename Scalar>
struct NamedParam {
  std::string name;
  Param<Scalar>* param;
};

/// Non-trainable state that is still part of a checkpoint (batch-norm statistics).
template <typename Scalar>
struct NamedBuffer {
  std::string name;
  Matrix<Scalar>* value;
};

/// A differentiable stage of a network.
///
/// infer() is const and keeps no state; forward() caches what backward()
/// needs. In eval mode both run the same arithmetic, so their outputs are
/// bitwise identical.
template <typename Scalar>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor<Scalar> infer(const Tensor<Scalar>& x) const = 0;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) = 0;
  /// Accumulates parameter gradients and returns d(loss)/d(input).
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& grad) = 0;

  virtual void parameters(const std::string&, std::vector<NamedParam<Scalar>>&) {}
  virtual void buffers(const std::string&, std::vector<NamedBuffer<Scalar>>&) {}
  virtual void initialize(std::mt19937_64&) {}
  /// Output is a post-activation feature map (eligible as an attention tap).
  virtual bool is_activation() const { return false; }
};

template <typename Scalar>
using LayerPtr = std::unique_ptr<Layer<Scalar>>;

namespace detail {

inline int conv_out(int in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }

/// Row (ky*k + kx)*C + c of column (n*Ho + oy)*Wo + ox holds input channel c at
/// the receptive-field offset (ky, kx); out-of-bounds taps stay zero.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, int k, int stride, int pad, Matrix<Scalar>& cols) {
  const int c = x.shape.channels, h = x.shape.height, w = x.shape.width;
  const int ho = conv_out(h, k, stride, pad), wo = conv_out(w, k, stride, pad);
  cols.setZero(static_cast<Eigen::Index>(k) * k * c, static_cast<Eigen::Index>(x.batch) * ho * wo);
  for (int n = 0; n < x.batch; ++n)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const Eigen::Index j = (static_cast<Eigen::Index>(n) * ho + oy) * wo + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            cols.col(j).segment((ky * k + kx) * c, c) = x.data.col((static_cast<Eigen::Index>(n) * h + iy) * w + ix);
          }
        }
      }
}

template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, int k, int stride, int pad, Tensor<Scalar>& dx) {
  const int c = dx.shape.channels, h = dx.shape.height, w = dx.shape.width;
  const int ho = conv_out(h, k, stride, pad), wo = conv_out(w, k, stride, pad);
  dx.data.setZero();
  for (int n = 0; n < dx.batch; ++n)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const Eigen::Index j = (static_cast<Eigen::Index>(n) * ho + oy) * wo + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            dx.data.col((static_cast<Eigen::Index>(n) * h + iy) * w + ix) += cols.col(j).segment((ky * k + kx) * c, c);
          }
        }
      }
}

template <typename Scalar>
void he_normal(Matrix<Scalar>& m, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(dist(rng));
}

}  // namespace detail

template <typename Scalar>
class Conv2d final : public Layer<Scalar> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int pad = -1, bool bias = true)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad < 0 ? kernel / 2 : pad), has_bias_(bias) {
    weight_.resize(out_, static_cast<Eigen::Index>(k_) * k_ * in_);
    if (has_bias_) bias_.resize(out_, 1);
  }

  std::string kind() const override { return "conv2d"; }

  Shape output_shape(const Shape& in) const override {
    check(in);
    return {out_, detail::conv_out(in.height, k_, stride_, pad_), detail::conv_out(in.width, k_, stride_, pad_)};
  }

  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override {
    Matrix<Scalar> cols;
    return compute(x, cols);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    in_shape_ = x.shape;
    return compute(x, cols_);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    weight_.grad.noalias() += grad.data * cols_.transpose();
    if (has_bias_) bias_.grad += grad.data.rowwise().sum();
    Matrix<Scalar> dcols = weight_.value.transpose() * grad.data;
    Tensor<Scalar> dx(in_shape_, grad.batch);
    detail::col2im(dcols, k_, stride_, pad_, dx);
    return dx;
  }

  void parameters(const std::string& prefix, std::vector<NamedParam<Scalar>>& out) override {
    out.push_back({prefix + "weight", &weight_});
    if (has_bias_) out.push_back({prefix + "bias", &bias_});
  }

  void initialize(std::mt19937_64& rng) override {
    detail::he_normal(weight_.value, k_ * k_ * in_, rng);
    if (has_bias_) bias_.value.setZero();
  }

 private:
  void check(const Shape& in) const {
    if (in.channels != in_)
      throw std::invalid_argument("conv2d expects " + std::to_string(in_) + " channels, got " + std::to_string(in.channels));
  }

  Tensor<Scalar> compute(const Tensor<Scalar>& x, Matrix<Scalar>& cols) const {
    const Shape out_shape = output_shape(x.shape);
    detail::im2col(x, k_, stride_, pad_, cols);
    Tensor<Scalar> y(out_shape, x.batch, weight_.value * cols);
    if (has_bias_) y.data.colwise() += bias_.value.col(0);
    return y;
  }

  int in_, out_, k_, stride_, pad_;
  bool has_bias_;
  Param<Scalar> weight_, bias_;
  Shape in_shape_;
  Matrix<Scalar> cols_;
};

/// Fully connected layer over flat features.
template <typename Scalar>
class Dense final : public Layer<Scalar> {
 public:
  Dense(int in_features, int out_features) : in_(in_features), out_(out_features) {
    weight_.resize(out_, in_);
    bias_.resize(out_, 1);
  }

  std::string kind() const override { return "dense"; }

  Shape output_shape(const Shape& in) const override {
    if (!in.flat() || in.channels != in_)
      throw std::invalid_argument("dense expects " + std::to_string(in_) + " flat features, got " + in.str());
    return {out_, 1, 1};
  }

  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override { return compute(x); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    input_ = x.data;
    return compute(x);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    weight_.grad.noalias() += grad.data * input_.transpose();
    bias_.grad += grad.data.rowwise().sum();
    return Tensor<Scalar>({in_, 1, 1}, grad.batch, weight_.value.transpose() * grad.data);
  }

  void parameters(const std::string& prefix, std::vector<NamedParam<Scalar>>& out) override {
    out.push_back({prefix + "weight", &weight_});
    out.push_back({prefix + "bias", &bias_});
  }

  void initialize(std::mt19937_64& rng) override {
    detail::he_normal(weight_.value, in_, rng);
    bias_.value.setZero();
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  /// Appends a zero-initialized output unit (row of weights plus bias).
  void append_zero_output() {
    ++out_;
    weight_.value.conservativeResize(out_, Eigen::NoChange);
    weight_.value.row(out_ - 1).setZero();
    bias_.value.conservativeResize(out_, Eigen::NoChange);
    bias_.value(out_ - 1, 0) = Scalar(0);
    weight_.grad = Matrix<Scalar>::Zero(out_, in_);
    bias_.grad = Matrix<Scalar>::Zero(out_, 1);
  }

 private:
  Tensor<Scalar> compute(const Tensor<Scalar>& x) const {
    output_shape(x.shape);
    Tensor<Scalar> y({out_, 1, 1}, x.batch, weight_.value * x.data);
    y.data.colwise() += bias_.value.col(0);
    return y;
  }

  int in_, out_;
  Param<Scalar> weight_, bias_;
  Matrix<Scalar> input_;
};

template <typename Scalar>
class ReLU final : public Layer<Scalar> {
 public:
  std::string kind() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override {
    return Tensor<Scalar>(x.shape, x.batch, x.data.cwiseMax(Scalar(0)));
  }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    Tensor<Scalar> y = infer(x);
    output_ = y.data;
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    return Tensor<Scalar>(grad.shape, grad.batch, (output_.array() > Scalar(0)).select(grad.data, Scalar(0)));
  }
  bool is_activation() const override { return true; }

 private:
  Matrix<Scalar> output_;
};

/// Non-overlapping max pooling (window == stride).
template <typename Scalar>
class MaxPool2d final : public Layer<Scalar> {
 public:
  explicit MaxPool2d(int window = 2) : window_(window) {}

  std::string kind() const override { return "maxpool"; }
  Shape output_shape(const Shape& in) const override {
    return {in.channels, in.height / window_, in.width / window_};
  }
  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override {
    Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> idx;
    return compute(x, idx);
  }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    in_shape_ = x.shape;
    return compute(x, argmax_);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> dx(in_shape_, grad.batch);
    for (Eigen::Index j = 0; j < grad.data.cols(); ++j)
      for (Eigen::Index c = 0; c < grad.data.rows(); ++c) dx.data(c, argmax_(c, j)) += grad.data(c, j);
    return dx;
  }

 private:
  Tensor<Scalar> compute(const Tensor<Scalar>& x, Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic>& idx) const {
    const Shape out_shape = output_shape(x.shape);
    const int h = x.shape.height, w = x.shape.width, ho = out_shape.height, wo = out_shape.width;
    const Eigen::Index channels = x.shape.channels;
    Tensor<Scalar> y(out_shape, x.batch);
    idx.resize(channels, y.data.cols());
    for (int n = 0; n < x.batch; ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index j = (static_cast<Eigen::Index>(n) * ho + oy) * wo + ox;
          const Eigen::Index first = (static_cast<Eigen::Index>(n) * h + oy * window_) * w + ox * window_;
          y.data.col(j) = x.data.col(first);
          idx.col(j).setConstant(first);
          for (int dy = 0; dy < window_; ++dy)
            for (int dx = 0; dx < window_; ++dx) {
              if (dy == 0 && dx == 0) continue;
              const Eigen::Index src = (static_cast<Eigen::Index>(n) * h + oy * window_ + dy) * w + ox * window_ + dx;
              for (Eigen::Index c = 0; c < channels; ++c)
                if (x.data(c, src) > y.data(c, j)) {
                  y.data(c, j) = x.data(c, src);
                  idx(c, j) = src;
                }
            }
        }
    return y;
  }

  int window_;
  Shape in_shape_;
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> argmax_;
};

/// Mean over all spatial positions; output is flat.
template <typename Scalar>
class GlobalAvgPool final : public Layer<Scalar> {
 public:
  std::string kind() const override { return "avgpool"; }
  Shape output_shape(const Shape& in) const override { return {in.channels, 1, 1}; }
  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override {
    Tensor<Scalar> y({x.shape.channels, 1, 1}, x.batch);
    const int hw = x.shape.spatial();
    for (int n = 0; n < x.batch; ++n) y.data.col(n) = x.sample(n).rowwise().sum() / Scalar(hw);
    return y;
  }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    in_shape_ = x.shape;
    return infer(x);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> dx(in_shape_, grad.batch);
    const int hw = in_shape_.spatial();
    for (int n = 0; n < grad.batch; ++n) dx.sample(n).colwise() = grad.data.col(n) / Scalar(hw);
    return dx;
  }

 private:
  Shape in_shape_;
};

template <typename Scalar>
class Flatten final : public Layer<Scalar> {
 public:
  std::string kind() const override { return "flatten"; }
  Shape output_shape(const Shape& in) const override { return {in.size(), 1, 1}; }
  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override {
    return Tensor<Scalar>(output_shape(x.shape), x.batch, x.flat_view());
  }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    in_shape_ = x.shape;
    return infer(x);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> dx(in_shape_, grad.batch);
    dx.flat_view() = grad.data;
    return dx;
  }

 private:
  Shape in_shape_;
};

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and updates the running estimates; eval mode uses the running
/// estimates.
template <typename Scalar>
class BatchNorm final : public Layer<Scalar> {
 public:
  explicit BatchNorm(int channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps) {
    gamma_.resize(channels, 1);
    beta_.resize(channels, 1);
    gamma_.value.setOnes();
    running_mean_ = Matrix<Scalar>::Zero(channels, 1);
    running_var_ = Matrix<Scalar>::Ones(channels, 1);
  }

  std::string kind() const override { return "batchnorm"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override {
    const Vector<Scalar> inv_std = (running_var_.col(0).array() + Scalar(eps_)).rsqrt().matrix();
    return affine(x, running_mean_.col(0), inv_std);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    mode_ = mode;
    if (mode == Mode::kEval) {
      inv_std_ = (running_var_.col(0).array() + Scalar(eps_)).rsqrt().matrix();
      normalized_ = inv_std_.asDiagonal() * (x.data.colwise() - running_mean_.col(0));
      return affine(x, running_mean_.col(0), inv_std_);
    }
    const Scalar count = Scalar(x.data.cols());
    const Vector<Scalar> mean = x.data.rowwise().mean();
    const Matrix<Scalar> centered = x.data.colwise() - mean;
    const Vector<Scalar> var = centered.array().square().rowwise().sum().matrix() / count;
    inv_std_ = (var.array() + Scalar(eps_)).rsqrt().matrix();
    normalized_ = inv_std_.asDiagonal() * centered;
    const Scalar unbiased = count > 1 ? count / (count - 1) : Scalar(1);
    running_mean_.col(0) = (Scalar(1 - momentum_) * running_mean_.col(0).array() + Scalar(momentum_) * mean.array()).matrix();
    running_var_.col(0) = (Scalar(1 - momentum_) * running_var_.col(0).array() + Scalar(momentum_) * unbiased * var.array()).matrix();
    Tensor<Scalar> y(x.shape, x.batch, gamma_.value.col(0).asDiagonal() * normalized_);
    y.data.colwise() += beta_.value.col(0);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    if (mode_ == Mode::kEval) {
      gamma_.grad.col(0) += (grad.data.cwiseProduct(normalized_)).rowwise().sum();
      beta_.grad += grad.data.rowwise().sum();
      const Vector<Scalar> scale = gamma_.value.col(0).cwiseProduct(inv_std_);
      return Tensor<Scalar>(grad.shape, grad.batch, scale.asDiagonal() * grad.data);
    }
    const Scalar count = Scalar(grad.data.cols());
    gamma_.grad.col(0) += grad.data.cwiseProduct(normalized_).rowwise().sum();
    beta_.grad += grad.data.rowwise().sum();
    const Matrix<Scalar> dnorm = gamma_.value.col(0).asDiagonal() * grad.data;
    const Vector<Scalar> sum_d = dnorm.rowwise().sum();
    const Vector<Scalar> sum_dx = dnorm.cwiseProduct(normalized_).rowwise().sum();
    Matrix<Scalar> dx = (dnorm * count).colwise() - sum_d;
    dx -= sum_dx.asDiagonal() * normalized_;
    dx = (inv_std_ / count).asDiagonal() * dx;
    return Tensor<Scalar>(grad.shape, grad.batch, std::move(dx));
  }

  void parameters(const std::string& prefix, std::vector<NamedParam<Scalar>>& out) override {
    out.push_back({prefix + "gamma", &gamma_});
    out.push_back({prefix + "beta", &beta_});
  }
  void buffers(const std::string& prefix, std::vector<NamedBuffer<Scalar>>& out) override {
    out.push_back({prefix + "running_mean", &running_mean_});
    out.push_back({prefix + "running_var", &running_var_});
  }
  void initialize(std::mt19937_64&) override {
    gamma_.value.setOnes();
    beta_.value.setZero();
    running_mean_.setZero();
    running_var_.setOnes();
  }

 private:
  Tensor<Scalar> affine(const Tensor<Scalar>& x, const Vector<Scalar>& mean, const Vector<Scalar>& inv_std) const {
    const Vector<Scalar> scale = gamma_.value.col(0).cwiseProduct(inv_std);
    const Vector<Scalar> shift = beta_.value.col(0) - scale.cwiseProduct(mean);
    Tensor<Scalar> y(x.shape, x.batch, scale.asDiagonal() * x.data);
    y.data.colwise() += shift;
    return y;
  }

  int channels_;
  double momentum_, eps_;
  Param<Scalar> gamma_, beta_;
  Matrix<Scalar> running_mean_, running_var_;
  Mode mode_ = Mode::kEval;
  Vector<Scalar> inv_std_;
  Matrix<Scalar> normalized_;
};

/// Ordered chain of named layers.
template <typename Scalar>
class Sequential final : public Layer<Scalar> {
 public:
  Sequential& add(std::string name, LayerPtr<Scalar> layer) {
    names_.push_back(std::move(name));
    layers_.push_back(std::move(layer));
    return *this;
  }

  bool empty() const { return layers_.empty(); }
  std::size_t size() const { return layers_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Layer<Scalar>& at(std::size_t i) { return *layers_[i]; }
  const Layer<Scalar>& at(std::size_t i) const { return *layers_[i]; }

  std::string kind() const override { return "sequential"; }

  Shape output_shape(const Shape& in) const override {
    Shape s = in;
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
  }

  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override { return infer_range(x, 0, layers_.size()); }

  Tensor<Scalar> infer_range(const Tensor<Scalar>& x, std::size_t begin, std::size_t end) const {
    Tensor<Scalar> y = x;
    for (std::size_t i = begin; i < end; ++i) y = layers_[i]->infer(y);
    return y;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override { return forward_range(x, 0, layers_.size(), mode); }

  Tensor<Scalar> forward_range(const Tensor<Scalar>& x, std::size_t begin, std::size_t end, Mode mode) {
    Tensor<Scalar> y = x;
    for (std::size_t i = begin; i < end; ++i) y = layers_[i]->forward(y, mode);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override { return backward_range(grad, 0, layers_.size()); }

  /// Backpropagates through layers [begin, end) in reverse order.
  Tensor<Scalar> backward_range(const Tensor<Scalar>& grad, std::size_t begin, std::size_t end) {
    Tensor<Scalar> g = grad;
    for (std::size_t i = end; i-- > begin;) g = layers_[i]->backward(g);
    return g;
  }

  void parameters(const std::string& prefix, std::vector<NamedParam<Scalar>>& out) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->parameters(prefix + names_[i] + ".", out);
  }
  void buffers(const std::string& prefix, std::vector<NamedBuffer<Scalar>>& out) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->buffers(prefix + names_[i] + ".", out);
  }
  void initialize(std::mt19937_64& rng) override {
    for (auto& l : layers_) l->initialize(rng);
  }

 private:
  std::vector<std::string> names_;
  std::vector<LayerPtr<Scalar>> layers_;
};

/// y = post(main(pre(x)) + shortcut(s)), where s is x, or pre(x) when
/// `shortcut_from_pre` is set. An empty shortcut is the identity.
template <typename Scalar>
class Residual final : public Layer<Scalar> {
 public:
  Residual(Sequential<Scalar> pre, Sequential<Scalar> main, Sequential<Scalar> shortcut, Sequential<Scalar> post,
           bool shortcut_from_pre)
      : pre_(std::move(pre)), main_(std::move(main)), shortcut_(std::move(shortcut)), post_(std::move(post)),
        shortcut_from_pre_(shortcut_from_pre) {}

  std::string kind() const override { return "residual"; }

  Shape output_shape(const Shape& in) const override {
    const Shape o = pre_.output_shape(in);
    const Shape m = main_.output_shape(o);
    const Shape s = shortcut_.output_shape(shortcut_from_pre_ ? o : in);
    if (!(m == s)) throw std::invalid_argument("residual branches disagree: " + m.str() + " vs " + s.str());
    return post_.output_shape(m);
  }

  Tensor<Scalar> infer(const Tensor<Scalar>& x) const override {
    const Tensor<Scalar> o = pre_.infer(x);
    Tensor<Scalar> m = main_.infer(o);
    m.data += shortcut_.infer(shortcut_from_pre_ ? o : x).data;
    return post_.infer(m);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    const Tensor<Scalar> o = pre_.forward(x, mode);
    Tensor<Scalar> m = main_.forward(o, mode);
    m.data += shortcut_.forward(shortcut_from_pre_ ? o : x, mode).data;
    return post_.forward(m, mode);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    const Tensor<Scalar> g = post_.backward(grad);
    Tensor<Scalar> d_o = main_.backward(g);
    const Tensor<Scalar> d_s = shortcut_.backward(g);
    if (shortcut_from_pre_) {
      d_o.data += d_s.data;
      return pre_.backward(d_o);
    }
    Tensor<Scalar> dx = pre_.backward(d_o);
    dx.data += d_s.data;
    return dx;
  }

  void parameters(const std::string& prefix, std::vector<NamedParam<Scalar>>& out) override {
    pre_.parameters(prefix, out);
    main_.parameters(prefix, out);
    shortcut_.parameters(prefix + "shortcut.", out);
    post_.parameters(prefix, out);
  }
  void buffers(const std::string& prefix, std::vector<NamedBuffer<Scalar>>& out) override {
    pre_.buffers(prefix, out);
    main_.buffers(prefix, out);
    shortcut_.buffers(prefix + "shortcut.", out);
    post_.buffers(prefix, out);
  }
  void initialize(std::mt19937_64& rng) override {
    pre_.initialize(rng);
    main_.initialize(rng);
    shortcut_.initialize(rng);
    post_.initialize(rng);
  }
  bool is_activation() const override { return !post_.empty() && post_.at(post_.size() - 1).is_activation(); }

 private:
  Sequential<Scalar> pre_, main_, shortcut_, post_;
  bool shortcut_from_pre_;
};

}  // namespace wmlab::nn

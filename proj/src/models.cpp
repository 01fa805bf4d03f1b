#include "wmlab/models.hpp"

#include "wmlab/errors.hpp"
#include "wmlab/packed_io.hpp"

#include <algorithm>
#include <random>

namespace wmlab {

using nn::LayerPtr;
using nn::Sequential;

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::kToyCnn: return "toy-cnn";
    case Arch::kVgg16: return "vgg16";
    case Arch::kResNet18: return "resnet18";
    case Arch::kWrn16_4: return "wrn-16-4";
    case Arch::kMicroCnn: return "micro-cnn";
  }
  return "?";
}

Arch parse_arch(std::string_view id) {
  if (id == "toy-cnn") return Arch::kToyCnn;
  if (id == "vgg16") return Arch::kVgg16;
  if (id == "resnet18") return Arch::kResNet18;
  if (id == "wrn-16-4") return Arch::kWrn16_4;
  if (id == "micro-cnn") return Arch::kMicroCnn;
  throw std::invalid_argument("unknown architecture '" + std::string(id) + "'");
}

std::string default_tap(Arch arch) {
  switch (arch) {
    case Arch::kToyCnn: return "relu4";
    case Arch::kVgg16: return "relu13";
    case Arch::kResNet18: return "layer4.1";
    case Arch::kWrn16_4: return "relu";
    case Arch::kMicroCnn: return "relu2";
  }
  return {};
}

namespace {

template <typename Scalar, typename L, typename... Args>
LayerPtr<Scalar> make(Args&&... args) {
  return std::make_unique<L>(std::forward<Args>(args)...);
}

template <typename Scalar>
Sequential<Scalar> toy_cnn(const ModelSpec& spec) {
  using namespace nn;
  const Shape in = spec.input_shape;
  Sequential<Scalar> s;
  s.add("conv1", make<Scalar, Conv2d<Scalar>>(in.channels, 32, 3))
      .add("relu1", make<Scalar, ReLU<Scalar>>())
      .add("conv2", make<Scalar, Conv2d<Scalar>>(32, 32, 3))
      .add("relu2", make<Scalar, ReLU<Scalar>>())
      .add("pool1", make<Scalar, MaxPool2d<Scalar>>(2))
      .add("conv3", make<Scalar, Conv2d<Scalar>>(32, 64, 3))
      .add("relu3", make<Scalar, ReLU<Scalar>>())
      .add("conv4", make<Scalar, Conv2d<Scalar>>(64, 64, 3))
      .add("relu4", make<Scalar, ReLU<Scalar>>())
      .add("pool2", make<Scalar, MaxPool2d<Scalar>>(2))
      .add("flatten", make<Scalar, Flatten<Scalar>>());
  const int flat = 64 * (in.height / 4) * (in.width / 4);
  s.add("fc1", make<Scalar, Dense<Scalar>>(flat, 64))
      .add("relu5", make<Scalar, ReLU<Scalar>>())
      .add("fc2", make<Scalar, Dense<Scalar>>(64, spec.num_classes));
  return s;
}

template <typename Scalar>
Sequential<Scalar> micro_cnn(const ModelSpec& spec) {
  using namespace nn;
  const Shape in = spec.input_shape;
  Sequential<Scalar> s;
  s.add("conv1", make<Scalar, Conv2d<Scalar>>(in.channels, 4, 3))
      .add("relu1", make<Scalar, ReLU<Scalar>>())
      .add("pool1", make<Scalar, MaxPool2d<Scalar>>(2))
      .add("conv2", make<Scalar, Conv2d<Scalar>>(4, 4, 3))
      .add("relu2", make<Scalar, ReLU<Scalar>>())
      .add("pool2", make<Scalar, MaxPool2d<Scalar>>(2))
      .add("flatten", make<Scalar, Flatten<Scalar>>())
      .add("fc", make<Scalar, Dense<Scalar>>(4 * (in.height / 4) * (in.width / 4), spec.num_classes));
  return s;
}

template <typename Scalar>
Sequential<Scalar> vgg16(const ModelSpec& spec) {
  using namespace nn;
  static constexpr int kCfg[] = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0};
  Sequential<Scalar> s;
  int channels = spec.input_shape.channels, conv = 0, pool = 0;
  Shape shape = spec.input_shape;
  for (int width : kCfg) {
    if (width == 0) {
      s.add("pool" + std::to_string(++pool), make<Scalar, MaxPool2d<Scalar>>(2));
      shape = {shape.channels, shape.height / 2, shape.width / 2};
      continue;
    }
    const std::string id = std::to_string(++conv);
    s.add("conv" + id, make<Scalar, Conv2d<Scalar>>(channels, width, 3))
        .add("bn" + id, make<Scalar, BatchNorm<Scalar>>(width))
        .add("relu" + id, make<Scalar, ReLU<Scalar>>());
    channels = width;
    shape.channels = width;
  }
  s.add("flatten", make<Scalar, Flatten<Scalar>>());
  s.add("fc", make<Scalar, Dense<Scalar>>(shape.size(), spec.num_classes));
  return s;
}

template <typename Scalar>
LayerPtr<Scalar> basic_block(int in, int out, int stride) {
  using namespace nn;
  Sequential<Scalar> main, shortcut, post;
  main.add("conv1", make<Scalar, Conv2d<Scalar>>(in, out, 3, stride, 1, false))
      .add("bn1", make<Scalar, BatchNorm<Scalar>>(out))
      .add("relu1", make<Scalar, ReLU<Scalar>>())
      .add("conv2", make<Scalar, Conv2d<Scalar>>(out, out, 3, 1, 1, false))
      .add("bn2", make<Scalar, BatchNorm<Scalar>>(out));
  if (stride != 1 || in != out) {
    shortcut.add("conv", make<Scalar, Conv2d<Scalar>>(in, out, 1, stride, 0, false))
        .add("bn", make<Scalar, BatchNorm<Scalar>>(out));
  }
  post.add("relu2", make<Scalar, ReLU<Scalar>>());
  return std::make_unique<Residual<Scalar>>(Sequential<Scalar>{}, std::move(main), std::move(shortcut), std::move(post), false);
}

template <typename Scalar>
Sequential<Scalar> resnet18(const ModelSpec& spec) {
  using namespace nn;
  Sequential<Scalar> s;
  s.add("conv1", make<Scalar, Conv2d<Scalar>>(spec.input_shape.channels, 64, 3, 1, 1, false))
      .add("bn1", make<Scalar, BatchNorm<Scalar>>(64))
      .add("relu", make<Scalar, ReLU<Scalar>>());
  int in = 64, stage = 0;
  for (auto [width, stride] : {std::pair{64, 1}, std::pair{128, 2}, std::pair{256, 2}, std::pair{512, 2}}) {
    const std::string id = "layer" + std::to_string(++stage);
    s.add(id + ".0", basic_block<Scalar>(in, width, stride));
    s.add(id + ".1", basic_block<Scalar>(width, width, 1));
    in = width;
  }
  s.add("avgpool", make<Scalar, GlobalAvgPool<Scalar>>());
  s.add("fc", make<Scalar, Dense<Scalar>>(512, spec.num_classes));
  return s;
}

template <typename Scalar>
LayerPtr<Scalar> wide_block(int in, int out, int stride) {
  using namespace nn;
  Sequential<Scalar> pre, main, shortcut;
  pre.add("bn1", make<Scalar, BatchNorm<Scalar>>(in)).add("relu1", make<Scalar, ReLU<Scalar>>());
  main.add("conv1", make<Scalar, Conv2d<Scalar>>(in, out, 3, stride, 1, false))
      .add("bn2", make<Scalar, BatchNorm<Scalar>>(out))
      .add("relu2", make<Scalar, ReLU<Scalar>>())
      .add("conv2", make<Scalar, Conv2d<Scalar>>(out, out, 3, 1, 1, false));
  const bool project = in != out || stride != 1;
  if (project) shortcut.add("conv", make<Scalar, Conv2d<Scalar>>(in, out, 1, stride, 0, false));
  return std::make_unique<Residual<Scalar>>(std::move(pre), std::move(main), std::move(shortcut), Sequential<Scalar>{}, project);
}

template <typename Scalar>
Sequential<Scalar> wrn16_4(const ModelSpec& spec) {
  using namespace nn;
  constexpr int kWiden = 4;
  Sequential<Scalar> s;
  s.add("conv1", make<Scalar, Conv2d<Scalar>>(spec.input_shape.channels, 16, 3, 1, 1, false));
  int in = 16, stage = 0;
  for (auto [width, stride] : {std::pair{16 * kWiden, 1}, std::pair{32 * kWiden, 2}, std::pair{64 * kWiden, 2}}) {
    const std::string id = "block" + std::to_string(++stage);
    s.add(id + ".0", wide_block<Scalar>(in, width, stride));
    s.add(id + ".1", wide_block<Scalar>(width, width, 1));
    in = width;
  }
  s.add("bn", make<Scalar, BatchNorm<Scalar>>(in))
      .add("relu", make<Scalar, ReLU<Scalar>>())
      .add("avgpool", make<Scalar, GlobalAvgPool<Scalar>>())
      .add("fc", make<Scalar, Dense<Scalar>>(in, spec.num_classes));
  return s;
}

template <typename Scalar>
nn::Dense<Scalar>& output_layer(Sequential<Scalar>& body) {
  auto* dense = dynamic_cast<nn::Dense<Scalar>*>(&body.at(body.size() - 1));
  if (dense == nullptr) throw std::logic_error("final layer is not dense");
  return *dense;
}

}  // namespace

template <typename Scalar>
TappedClassifier<Scalar>::TappedClassifier(ModelSpec spec, nn::Sequential<Scalar> body, std::string tap)
    : spec_(spec), body_(std::move(body)) {
  if (spec_.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  out_dim_ = body_.output_shape(spec_.input_shape).channels;
  set_tap_layer(tap);
}

template <typename Scalar>
std::size_t TappedClassifier<Scalar>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < body_.size(); ++i)
    if (body_.name(i) == name) return i;
  throw ConfigError("no layer named '" + name + "' in " + to_string(spec_.arch));
}

template <typename Scalar>
std::vector<std::string> TappedClassifier<Scalar>::activation_layers() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < body_.size(); ++i)
    if (body_.at(i).is_activation()) out.push_back(body_.name(i));
  return out;
}

template <typename Scalar>
void TappedClassifier<Scalar>::set_tap_layer(const std::string& name) {
  const std::size_t idx = index_of(name);
  if (!body_.at(idx).is_activation()) throw ConfigError("layer '" + name + "' is not a registered activation layer");
  tap_name_ = name;
  tap_index_ = idx;
}

template <typename Scalar>
Shape TappedClassifier<Scalar>::layer_shape(const std::string& name) const {
  const std::size_t idx = index_of(name);
  Shape s = spec_.input_shape;
  for (std::size_t i = 0; i <= idx; ++i) s = body_.at(i).output_shape(s);
  return s;
}

template <typename Scalar>
Matrix<Scalar> TappedClassifier<Scalar>::logits(const Tensor<Scalar>& batch) const {
  if (!(batch.shape == spec_.input_shape))
    throw std::invalid_argument("batch shape " + batch.shape.str() + " does not match model input " + spec_.input_shape.str());
  const Tensor<Scalar> maps = body_.infer_range(batch, 0, tap_index_ + 1);
  return body_.infer_range(maps, tap_index_ + 1, body_.size()).data;
}

template <typename Scalar>
SplitOutput<Scalar> TappedClassifier<Scalar>::forward_split(const Tensor<Scalar>& batch) const {
  if (!(batch.shape == spec_.input_shape))
    throw std::invalid_argument("batch shape " + batch.shape.str() + " does not match model input " + spec_.input_shape.str());
  SplitOutput<Scalar> out;
  out.maps = body_.infer_range(batch, 0, tap_index_ + 1);
  out.probs = softmax_columns(body_.infer_range(out.maps, tap_index_ + 1, body_.size()).data);
  return out;
}

template <typename Scalar>
Tensor<Scalar> TappedClassifier<Scalar>::attention(const Tensor<Scalar>& batch) const {
  if (!(batch.shape == spec_.input_shape)) throw std::invalid_argument("batch shape does not match model input");
  return body_.infer_range(batch, 0, tap_index_ + 1);
}

template <typename Scalar>
std::vector<int> TappedClassifier<Scalar>::predict(const Tensor<Scalar>& batch, int limit) const {
  const Matrix<Scalar> z = logits(batch);
  std::vector<int> out(static_cast<std::size_t>(z.cols()));
  for (Eigen::Index j = 0; j < z.cols(); ++j) out[static_cast<std::size_t>(j)] = argmax_column(z, j, limit);
  return out;
}

template <typename Scalar>
TrainPass<Scalar> TappedClassifier<Scalar>::forward_train(const Tensor<Scalar>& batch, nn::Mode mode) {
  if (!(batch.shape == spec_.input_shape)) throw std::invalid_argument("batch shape does not match model input");
  TrainPass<Scalar> pass;
  pass.maps = body_.forward_range(batch, 0, tap_index_ + 1, mode);
  pass.logits = body_.forward_range(pass.maps, tap_index_ + 1, body_.size(), mode).data;
  return pass;
}

template <typename Scalar>
Tensor<Scalar> TappedClassifier<Scalar>::backward_to_tap(const Matrix<Scalar>& grad_logits) {
  const Tensor<Scalar> g({out_dim_, 1, 1}, static_cast<int>(grad_logits.cols()), grad_logits);
  return body_.backward_range(g, tap_index_ + 1, body_.size());
}

template <typename Scalar>
Tensor<Scalar> TappedClassifier<Scalar>::backward(const Matrix<Scalar>& grad_logits, const Tensor<Scalar>* grad_tap) {
  Tensor<Scalar> g = backward_to_tap(grad_logits);
  if (grad_tap != nullptr) g.data += grad_tap->data;
  return body_.backward_range(g, 0, tap_index_ + 1);
}

template <typename Scalar>
std::vector<nn::NamedParam<Scalar>> TappedClassifier<Scalar>::parameters() {
  std::vector<nn::NamedParam<Scalar>> out;
  body_.parameters("", out);
  return out;
}

template <typename Scalar>
std::vector<nn::NamedBuffer<Scalar>> TappedClassifier<Scalar>::buffers() {
  std::vector<nn::NamedBuffer<Scalar>> out;
  body_.buffers("", out);
  return out;
}

template <typename Scalar>
void TappedClassifier<Scalar>::zero_grad() {
  for (auto& p : parameters()) p.param->grad.setZero();
}

template <typename Scalar>
std::size_t TappedClassifier<Scalar>::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += static_cast<std::size_t>(p.param->value.size());
  return n;
}

template <typename Scalar>
void TappedClassifier<Scalar>::expand_output_layer() {
  if (expanded()) throw ConfigError("output layer already expanded; only one lure class is supported");
  output_layer(body_).append_zero_output();
  out_dim_ = body_.output_shape(spec_.input_shape).channels;
}

template <typename Scalar>
std::map<std::string, Matrix<Scalar>> TappedClassifier<Scalar>::state() {
  std::map<std::string, Matrix<Scalar>> out;
  for (auto& p : parameters()) out.emplace("param:" + p.name, p.param->value);
  for (auto& b : buffers()) out.emplace("buffer:" + b.name, *b.value);
  return out;
}

template <typename Scalar>
void TappedClassifier<Scalar>::load_state(const std::map<std::string, Matrix<Scalar>>& values) {
  auto assign = [&](const std::string& key, Matrix<Scalar>& dst) {
    const auto it = values.find(key);
    if (it == values.end()) throw FormatError("state is missing " + key);
    if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols()) throw FormatError("shape mismatch for " + key);
    dst = it->second;
  };
  for (auto& p : parameters()) assign("param:" + p.name, p.param->value);
  for (auto& b : buffers()) assign("buffer:" + b.name, *b.value);
}

template <typename Scalar>
TappedClassifier<Scalar> TappedClassifier<Scalar>::clone() const {
  auto& self = const_cast<TappedClassifier&>(*this);
  TappedClassifier out = build_model<Scalar>(spec_);
  if (expanded()) out.expand_output_layer();
  out.set_tap_layer(tap_name_);
  out.load_state(self.state());
  out.provenance = provenance;
  return out;
}

template <typename Scalar>
TappedClassifier<Scalar> build_model(const ModelSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (spec.input_shape.height % 4 != 0 || spec.input_shape.width % 4 != 0)
    throw ConfigError("input height/width must be divisible by 4, got " + spec.input_shape.str());
  Sequential<Scalar> body;
  switch (spec.arch) {
    case Arch::kToyCnn: body = toy_cnn<Scalar>(spec); break;
    case Arch::kVgg16: body = vgg16<Scalar>(spec); break;
    case Arch::kResNet18: body = resnet18<Scalar>(spec); break;
    case Arch::kWrn16_4: body = wrn16_4<Scalar>(spec); break;
    case Arch::kMicroCnn: body = micro_cnn<Scalar>(spec); break;
  }
  std::mt19937_64 rng(spec.seed);
  body.initialize(rng);
  return TappedClassifier<Scalar>(spec, std::move(body), default_tap(spec.arch));
}

template <typename Scalar>
std::string parameter_hash(TappedClassifier<Scalar>& model) {
  std::string bytes;
  for (const auto& [name, m] : model.state()) {
    bytes += name;
    bytes.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(Scalar));
  }
  return sha256_hex(bytes);
}

template <typename Scalar>
void save_checkpoint(TappedClassifier<Scalar>& model, const std::filesystem::path& path) {
  Archive archive;
  archive.metadata = {{"arch_id", to_string(model.arch())},
                      {"input_shape", {model.input_shape().height, model.input_shape().width, model.input_shape().channels}},
                      {"num_classes", model.num_classes()},
                      {"out_dim", model.out_dim()},
                      {"tap_layer", model.tap_layer()},
                      {"seed", model.spec().seed},
                      {"dtype", to_string(dtype_of<Scalar>())},
                      {"provenance", model.provenance},
                      {"parameter_hash", parameter_hash(model)}};
  for (const auto& [name, m] : model.state()) {
    // Column-major storage; dims recorded as (cols, rows) so the row-major
    // reading of the blob is the transpose-free layout.
    archive.tensors.emplace_back(
        name, PackedTensor::from<Scalar>(std::span<const Scalar>(m.data(), static_cast<std::size_t>(m.size())),
                                         {static_cast<std::uint64_t>(m.cols()), static_cast<std::uint64_t>(m.rows())}));
  }
  write_archive(path, archive);
}

template <typename Scalar>
TappedClassifier<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  const auto& meta = archive.metadata;
  if (meta.at("dtype").get<std::string>() != to_string(dtype_of<Scalar>()))
    throw FormatError("checkpoint precision " + meta.at("dtype").get<std::string>() + " differs from requested");
  ModelSpec spec;
  spec.arch = parse_arch(meta.at("arch_id").get<std::string>());
  const auto shape = meta.at("input_shape").get<std::vector<int>>();
  spec.input_shape = {shape.at(2), shape.at(0), shape.at(1)};
  spec.num_classes = meta.at("num_classes").get<int>();
  spec.seed = meta.at("seed").get<std::uint64_t>();
  TappedClassifier<Scalar> model = build_model<Scalar>(spec);
  if (meta.at("out_dim").get<int>() == spec.num_classes + 1) model.expand_output_layer();
  model.set_tap_layer(meta.at("tap_layer").get<std::string>());
  std::map<std::string, Matrix<Scalar>> values;
  for (const auto& [name, t] : archive.tensors) {
    const auto v = t.template values<Scalar>();
    values.emplace(name, Eigen::Map<const Matrix<Scalar>>(v.data(), static_cast<Eigen::Index>(t.dims.at(1)),
                                                         static_cast<Eigen::Index>(t.dims.at(0))));
  }
  model.load_state(values);
  model.provenance = meta.value("provenance", "");
  if (parameter_hash(model) != meta.at("parameter_hash").get<std::string>())
    throw HashMismatch("checkpoint parameter hash mismatch: " + path.string());
  return model;
}

template class TappedClassifier<float>;
template class TappedClassifier<double>;
template TappedClassifier<float> build_model<float>(const ModelSpec&);
template TappedClassifier<double> build_model<double>(const ModelSpec&);
template std::string parameter_hash<float>(TappedClassifier<float>&);
template std::string parameter_hash<double>(TappedClassifier<double>&);
template void save_checkpoint<float>(TappedClassifier<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(TappedClassifier<double>&, const std::filesystem::path&);
template TappedClassifier<float> load_checkpoint<float>(const std::filesystem::path&);
template TappedClassifier<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace wmlab

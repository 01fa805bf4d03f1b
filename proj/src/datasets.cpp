#include "wmlab/datasets.hpp"

#include "wmlab/errors.hpp"
#include "wmlab/image_io.hpp"
#include "wmlab/packed_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <unordered_map>

namespace wmlab {
namespace {

using nlohmann::json;

std::size_t pixel_key(const Matrix<float>& pixels, Eigen::Index col) {
  const auto* p = reinterpret_cast<const unsigned char*>(pixels.col(col).data());
  std::size_t h = 1469598103934665603ull;
  for (Eigen::Index i = 0; i < pixels.rows() * static_cast<Eigen::Index>(sizeof(float)); ++i) h = (h ^ p[i]) * 1099511628211ull;
  return h;
}

void check_mask(const TriggerSpec& spec) {
  if (spec.mask.size() != spec.shape.spatial())
    throw std::invalid_argument("trigger mask has " + std::to_string(spec.mask.size()) + " entries, expected " +
                                std::to_string(spec.shape.spatial()));
  if (spec.mask.size() > 0 && (spec.mask.minCoeff() < 0.0f || spec.mask.maxCoeff() > 1.0f))
    throw std::invalid_argument("trigger mask entries must lie in [0, 1]");
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    case Split::kProxy: return "proxy";
    case Split::kLure: return "lure";
    case Split::kTrigger: return "trigger";
    case Split::kEval: return "eval";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  for (Split s : {Split::kTrain, Split::kTest, Split::kProxy, Split::kLure, Split::kTrigger, Split::kEval})
    if (to_string(s) == text) return s;
  throw std::invalid_argument("unknown split '" + text + "'");
}

LabeledImage Dataset::item(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("dataset index out of range");
  return {shape, pixels.col(static_cast<Eigen::Index>(i)).array(), labels[i]};
}

void Dataset::push_back(const LabeledImage& image) {
  if (empty() && pixels.size() == 0) {
    if (shape.size() == 0) shape = image.shape;
    pixels.resize(shape.size(), 0);
  }
  if (!(image.shape == shape) || image.pixels.size() != shape.size())
    throw std::invalid_argument("image shape " + image.shape.str() + " does not match dataset shape " + shape.str());
  pixels.conservativeResize(Eigen::NoChange, pixels.cols() + 1);
  pixels.col(pixels.cols() - 1) = image.pixels.matrix();
  labels.push_back(image.label);
}

void Dataset::validate() const {
  if (pixels.rows() != shape.size() || pixels.cols() != static_cast<Eigen::Index>(labels.size()))
    throw FormatError("dataset '" + name + "': pixel matrix does not match shape/labels");
  if (pixels.size() > 0 && (!pixels.allFinite() || pixels.minCoeff() < 0.0f || pixels.maxCoeff() > 1.0f))
    throw FormatError("dataset '" + name + "': pixel values outside [0, 1]");
  if (labels_ignored) return;
  const int limit = split == Split::kLure ? num_classes + 1 : num_classes;
  for (int label : labels)
    if (label < 0 || label >= limit) throw FormatError("dataset '" + name + "': label " + std::to_string(label) + " out of range");
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices, std::string name) {
  Dataset out;
  out.name = name.empty() ? ds.name : std::move(name);
  out.split = ds.split;
  out.num_classes = ds.num_classes;
  out.shape = ds.shape;
  out.labels_ignored = ds.labels_ignored;
  out.provenance = ds.provenance;
  out.pixels.resize(ds.shape.size(), static_cast<Eigen::Index>(indices.size()));
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= ds.size()) throw std::out_of_range("subset index out of range");
    out.pixels.col(static_cast<Eigen::Index>(k)) = ds.pixels.col(static_cast<Eigen::Index>(indices[k]));
    out.labels.push_back(ds.labels[indices[k]]);
  }
  return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

std::vector<std::size_t> stratified_sample(const Dataset& ds, std::size_t count, std::uint64_t seed, std::optional<int> exclude_class) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i : shuffled_indices(ds.size(), seed)) {
    const int label = ds.labels_ignored ? 0 : ds.labels[i];
    if (exclude_class && label == *exclude_class) continue;
    by_class[label].push_back(i);
  }
  std::size_t available = 0;
  for (auto& [_, v] : by_class) available += v.size();
  if (available < count)
    throw std::invalid_argument("dataset '" + ds.name + "' has " + std::to_string(available) + " eligible items, need " +
                                std::to_string(count));
  std::vector<std::size_t> out;
  out.reserve(count);
  for (std::size_t round = 0; out.size() < count; ++round)
    for (auto& [_, v] : by_class) {
      if (out.size() == count) break;
      if (round < v.size()) out.push_back(v[round]);
    }
  return out;
}

std::string to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::kContent: return "content";
    case TriggerKind::kNoise: return "noise";
    case TriggerKind::kUnrelated: return "unrelated";
  }
  return "?";
}

TriggerKind parse_trigger_kind(const std::string& text) {
  for (TriggerKind k : {TriggerKind::kContent, TriggerKind::kNoise, TriggerKind::kUnrelated})
    if (to_string(k) == text) return k;
  throw std::invalid_argument("unknown trigger kind '" + text + "'");
}

TriggerSpec content_trigger_spec(Shape shape, int target_label, std::size_t count, std::uint64_t seed, const StampOptions& stamp) {
  const Eigen::ArrayXXf glyphs = text_mask(stamp.text, stamp.scale);
  const int gh = static_cast<int>(glyphs.rows());
  const int gw = static_cast<int>(glyphs.cols());
  if (gh > shape.height || gw > shape.width)
    throw ConfigError("stamp '" + stamp.text + "' (" + std::to_string(gw) + "x" + std::to_string(gh) + ") does not fit a " +
                      shape.str() + " image");
  const int row = stamp.row < 0 ? (shape.height - gh) / 2 : stamp.row;
  const int col = stamp.col < 0 ? (shape.width - gw) / 2 : stamp.col;
  if (row + gh > shape.height || col + gw > shape.width) throw ConfigError("stamp position puts it outside the image");

  TriggerSpec spec;
  spec.kind = TriggerKind::kContent;
  spec.shape = shape;
  spec.target_label = target_label;
  spec.count = count;
  spec.seed = seed;
  spec.mask = Eigen::ArrayXf::Zero(shape.spatial());
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) spec.mask((row + y) * shape.width + col + x) = glyphs(y, x) * stamp.intensity;
  spec.pattern = Eigen::ArrayXf::Constant(shape.size(), stamp.color);
  return spec;
}

TriggerSpec noise_trigger_spec(Shape shape, int target_label, std::size_t count, std::uint64_t seed, float noise_std, int patch) {
  if (patch <= 0) patch = std::max(1, std::min(shape.height, shape.width) / 4);
  patch = std::min({patch, shape.height, shape.width});
  TriggerSpec spec;
  spec.kind = TriggerKind::kNoise;
  spec.shape = shape;
  spec.target_label = target_label;
  spec.count = count;
  spec.seed = seed;
  spec.noise_std = noise_std;
  spec.mask = Eigen::ArrayXf::Zero(shape.spatial());
  for (int y = shape.height - patch; y < shape.height; ++y)
    for (int x = shape.width - patch; x < shape.width; ++x) spec.mask(y * shape.width + x) = 1.0f;
  spec.pattern = Eigen::ArrayXf::Zero(shape.size());
  return spec;
}

Eigen::ArrayXf blend(const Eigen::ArrayXf& image, const Eigen::ArrayXf& pattern, const Eigen::ArrayXf& mask, Shape shape) {
  if (image.size() != shape.size() || pattern.size() != shape.size())
    throw std::invalid_argument("blend: image/pattern size does not match " + shape.str());
  if (mask.size() != shape.spatial()) throw std::invalid_argument("blend: mask size does not match " + shape.str());
  Eigen::ArrayXf out(shape.size());
  for (int p = 0; p < shape.spatial(); ++p) {
    const float m = mask(p);
    for (int c = 0; c < shape.channels; ++c) {
      const int i = p * shape.channels + c;
      out(i) = std::clamp((1.0f - m) * image(i) + m * pattern(i), 0.0f, 1.0f);
    }
  }
  return out;
}

Dataset synthesize_triggers(const Dataset& clean, const TriggerSpec& spec) {
  if (spec.kind == TriggerKind::kUnrelated)
    throw std::invalid_argument("unrelated triggers are built with make_unrelated_triggers");
  if (spec.count < 1) throw std::invalid_argument("trigger count must be at least 1");
  if (!(spec.shape == clean.shape)) throw std::invalid_argument("trigger shape " + spec.shape.str() + " does not match dataset");
  check_mask(spec);
  if (spec.kind == TriggerKind::kContent && spec.pattern.size() != spec.shape.size())
    throw std::invalid_argument("trigger pattern size does not match shape");

  const auto picks = stratified_sample(clean, spec.count, spec.seed);
  Dataset out;
  out.name = clean.name + "-" + to_string(spec.kind) + "-triggers";
  out.split = Split::kTrigger;
  out.num_classes = clean.num_classes;
  out.shape = clean.shape;
  out.provenance = clean.name + ":" + to_string(spec.kind) + ":seed=" + std::to_string(spec.seed);
  out.pixels.resize(clean.shape.size(), static_cast<Eigen::Index>(spec.count));
  out.labels.assign(spec.count, spec.target_label);

  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<float> noise(0.0f, spec.noise_std);
  for (std::size_t k = 0; k < picks.size(); ++k) {
    const Eigen::ArrayXf x = clean.pixels.col(static_cast<Eigen::Index>(picks[k])).array();
    Eigen::ArrayXf pattern = spec.pattern;
    if (spec.kind == TriggerKind::kNoise) {
      pattern = x;
      for (Eigen::Index i = 0; i < pattern.size(); ++i) pattern(i) = std::clamp(pattern(i) + noise(rng), 0.0f, 1.0f);
    }
    out.pixels.col(static_cast<Eigen::Index>(k)) = blend(x, pattern, spec.mask, spec.shape).matrix();
  }
  return out;
}

Eigen::ArrayXf adapt_image(const Eigen::ArrayXf& pixels, Shape from, Shape to) {
  if (pixels.size() != from.size()) throw std::invalid_argument("adapt_image: pixel count does not match source shape");
  if (from.channels != 1 && from.channels != to.channels)
    throw std::invalid_argument("adapt_image: cannot map " + std::to_string(from.channels) + " channels to " +
                                std::to_string(to.channels));
  Eigen::ArrayXf out(to.size());
  const float sy = static_cast<float>(from.height) / static_cast<float>(to.height);
  const float sx = static_cast<float>(from.width) / static_cast<float>(to.width);
  for (int y = 0; y < to.height; ++y) {
    const float fy = std::clamp((static_cast<float>(y) + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(from.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, from.height - 1);
    const float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < to.width; ++x) {
      const float fx = std::clamp((static_cast<float>(x) + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(from.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, from.width - 1);
      const float wx = fx - static_cast<float>(x0);
      for (int c = 0; c < to.channels; ++c) {
        const int sc = from.channels == 1 ? 0 : c;
        auto at = [&](int yy, int xx) { return pixels((yy * from.width + xx) * from.channels + sc); };
        const float v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) + wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out((y * to.width + x) * to.channels + c) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

Dataset make_unrelated_triggers(const Dataset& source, int target_label, std::size_t count, Shape target_shape) {
  if (count < 1) throw std::invalid_argument("trigger count must be at least 1");
  if (source.size() < count)
    throw std::invalid_argument("unrelated source '" + source.name + "' has " + std::to_string(source.size()) +
                                " images, need " + std::to_string(count));
  Dataset out;
  out.name = source.name + "-unrelated-triggers";
  out.split = Split::kTrigger;
  out.shape = target_shape;
  out.provenance = source.name + ":unrelated";
  out.pixels.resize(target_shape.size(), static_cast<Eigen::Index>(count));
  out.labels.assign(count, target_label);
  for (std::size_t k = 0; k < count; ++k)
    out.pixels.col(static_cast<Eigen::Index>(k)) =
        adapt_image(source.pixels.col(static_cast<Eigen::Index>(k)).array(), source.shape, target_shape).matrix();
  return out;
}

Dataset make_abstract_images(std::size_t count, Shape shape, std::uint64_t seed) {
  Dataset out;
  out.name = "abstract";
  out.split = Split::kLure;
  out.shape = shape;
  out.provenance = "abstract:seed=" + std::to_string(seed);
  out.pixels.resize(shape.size(), static_cast<Eigen::Index>(count));
  out.labels.assign(count, 0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  const float h = static_cast<float>(shape.height), w = static_cast<float>(shape.width);
  for (std::size_t n = 0; n < count; ++n) {
    // Background: linear gradient between two random colors.
    std::vector<float> c0(static_cast<std::size_t>(shape.channels)), c1(c0.size());
    for (auto& v : c0) v = u(rng);
    for (auto& v : c1) v = u(rng);
    const float angle = u(rng) * 6.2831853f;
    const float dx = std::cos(angle), dy = std::sin(angle);
    Eigen::ArrayXf img(shape.size());
    for (int y = 0; y < shape.height; ++y)
      for (int x = 0; x < shape.width; ++x) {
        const float t = std::clamp(0.5f + ((static_cast<float>(x) / w - 0.5f) * dx + (static_cast<float>(y) / h - 0.5f) * dy), 0.0f, 1.0f);
        for (int c = 0; c < shape.channels; ++c)
          img((y * shape.width + x) * shape.channels + c) = (1 - t) * c0[static_cast<std::size_t>(c)] + t * c1[static_cast<std::size_t>(c)];
      }
    // Overlapping discs, rectangles and stripes.
    const int shapes = 3 + static_cast<int>(rng() % 4);
    for (int s = 0; s < shapes; ++s) {
      const int type = static_cast<int>(rng() % 3);
      std::vector<float> col(static_cast<std::size_t>(shape.channels));
      for (auto& v : col) v = u(rng);
      const float cx = u(rng) * w, cy = u(rng) * h;
      const float r = (0.1f + 0.3f * u(rng)) * std::min(w, h);
      const float period = 2.0f + 6.0f * u(rng);
      const float alpha = 0.5f + 0.5f * u(rng);
      for (int y = 0; y < shape.height; ++y)
        for (int x = 0; x < shape.width; ++x) {
          const float fx = static_cast<float>(x), fy = static_cast<float>(y);
          bool inside = false;
          if (type == 0) inside = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy) <= r * r;
          else if (type == 1) inside = std::abs(fx - cx) <= r && std::abs(fy - cy) <= 0.6f * r;
          else inside = std::fmod(fx * dx + fy * dy + 1000.0f, period) < period / 2 && std::abs(fy - cy) <= r;
          if (!inside) continue;
          for (int c = 0; c < shape.channels; ++c) {
            float& v = img((y * shape.width + x) * shape.channels + c);
            v = (1 - alpha) * v + alpha * col[static_cast<std::size_t>(c)];
          }
        }
    }
    out.pixels.col(static_cast<Eigen::Index>(n)) = img.cwiseMax(0.0f).cwiseMin(1.0f).matrix();
  }
  return out;
}

AuxiliaryData build_auxiliary(const Dataset& proxy_source, const Dataset& lure_source, std::size_t n_proxy, std::size_t n_lures,
                              int delta, int num_classes, std::uint64_t seed) {
  if (!(proxy_source.shape == lure_source.shape) && n_lures > 0)
    throw std::invalid_argument("proxy and lure sources have different shapes");
  if (delta < 0 || delta > num_classes) throw ConfigError("lure label " + std::to_string(delta) + " outside [0, C]");
  if (proxy_source.size() < n_proxy)
    throw std::invalid_argument("proxy source has " + std::to_string(proxy_source.size()) + " images, need " + std::to_string(n_proxy));
  if (lure_source.size() < n_lures)
    throw std::invalid_argument("lure source has " + std::to_string(lure_source.size()) + " images, need " + std::to_string(n_lures));

  AuxiliaryData aux;
  aux.delta = delta;
  auto pidx = shuffled_indices(proxy_source.size(), seed);
  pidx.resize(n_proxy);
  auto lidx = shuffled_indices(lure_source.size(), seed + 1);
  lidx.resize(n_lures);

  aux.proxy = subset(proxy_source, pidx, proxy_source.name + "-proxy");
  aux.proxy.split = Split::kProxy;
  aux.proxy.labels_ignored = true;
  aux.proxy.num_classes = num_classes;
  aux.proxy.provenance = proxy_source.name + ":proxy:seed=" + std::to_string(seed);

  aux.lures = subset(lure_source, lidx, lure_source.name + "-lures");
  aux.lures.split = Split::kLure;
  aux.lures.labels_ignored = false;
  aux.lures.num_classes = num_classes;
  aux.lures.labels.assign(n_lures, delta);
  aux.lures.provenance = lure_source.name + ":lure:seed=" + std::to_string(seed);

  std::unordered_multimap<std::size_t, std::size_t> keys;
  for (std::size_t i = 0; i < aux.proxy.size(); ++i) keys.emplace(pixel_key(aux.proxy.pixels, static_cast<Eigen::Index>(i)), i);
  for (std::size_t j = 0; j < aux.lures.size(); ++j) {
    const auto [lo, hi] = keys.equal_range(pixel_key(aux.lures.pixels, static_cast<Eigen::Index>(j)));
    for (auto it = lo; it != hi; ++it)
      if (aux.proxy.pixels.col(static_cast<Eigen::Index>(it->second)) == aux.lures.pixels.col(static_cast<Eigen::Index>(j)))
        throw std::invalid_argument("proxy item " + std::to_string(it->second) + " (source index " + std::to_string(pidx[it->second]) +
                                    ") is identical to lure item " + std::to_string(j) + " (source index " +
                                    std::to_string(lidx[j]) + ")");
  }
  if (delta < num_classes)
    aux.warnings.push_back("lure label " + std::to_string(delta) + " collides with an existing class (label-collision mode)");
  return aux;
}

std::pair<Dataset, Dataset> proxy_mode_split(const Dataset& test_set, std::uint64_t seed) {
  if (test_set.empty()) throw std::invalid_argument("cannot split an empty test set");
  const auto order = shuffled_indices(test_set.size(), seed);
  const std::size_t half = test_set.size() / 2;
  std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(half), order.end());
  Dataset proxy = subset(test_set, a, test_set.name + "-proxy-half");
  proxy.split = Split::kProxy;
  proxy.labels_ignored = true;
  proxy.provenance = test_set.name + ":id-proxy:seed=" + std::to_string(seed);
  Dataset eval = subset(test_set, b, test_set.name + "-eval-half");
  eval.split = Split::kEval;
  eval.provenance = test_set.name + ":id-eval:seed=" + std::to_string(seed);
  return {std::move(proxy), std::move(eval)};
}

std::string dataset_hash(const Dataset& ds) {
  std::vector<std::byte> bytes(static_cast<std::size_t>(ds.pixels.size()) * sizeof(float) + ds.labels.size() * sizeof(int));
  std::memcpy(bytes.data(), ds.pixels.data(), static_cast<std::size_t>(ds.pixels.size()) * sizeof(float));
  std::memcpy(bytes.data() + ds.pixels.size() * static_cast<Eigen::Index>(sizeof(float)), ds.labels.data(), ds.labels.size() * sizeof(int));
  return sha256_hex(bytes);
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir, const std::string& spec_hash, std::uint64_t seed, bool quantize) {
  ds.validate();
  std::filesystem::create_directories(dir);
  const std::vector<std::uint64_t> dims = {ds.size(), static_cast<std::uint64_t>(ds.shape.height),
                                           static_cast<std::uint64_t>(ds.shape.width), static_cast<std::uint64_t>(ds.shape.channels)};
  if (quantize) {
    std::vector<std::uint8_t> q(static_cast<std::size_t>(ds.pixels.size()));
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = static_cast<std::uint8_t>(std::lround(ds.pixels.data()[i] * 255.0f));
    write_packed(dir / "images.wmt", PackedTensor::from<std::uint8_t>(q, dims));
  } else {
    write_packed(dir / "images.wmt",
                 PackedTensor::from<float>(std::span<const float>(ds.pixels.data(), static_cast<std::size_t>(ds.pixels.size())), dims));
  }
  json meta = {{"name", ds.name},
               {"split", to_string(ds.split)},
               {"shape", {ds.shape.height, ds.shape.width, ds.shape.channels}},
               {"num_classes", ds.num_classes},
               {"labels", ds.labels},
               {"labels_ignored", ds.labels_ignored},
               {"provenance", ds.provenance},
               {"seed", seed},
               {"spec_hash", spec_hash}};
  write_text_file(dir / "meta.json", meta.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "meta.json") || !std::filesystem::exists(dir / "images.wmt"))
    throw MissingArtifact("dataset directory " + dir.string() + " is missing images.wmt or meta.json");
  const json meta = json::parse(read_text_file(dir / "meta.json"));
  Dataset ds;
  ds.name = meta.at("name").get<std::string>();
  ds.split = parse_split(meta.at("split").get<std::string>());
  const auto s = meta.at("shape").get<std::vector<int>>();
  if (s.size() != 3) throw FormatError("dataset shape must be [H, W, C]");
  ds.shape = Shape{s[2], s[0], s[1]};
  ds.num_classes = meta.at("num_classes").get<int>();
  ds.labels = meta.at("labels").get<std::vector<int>>();
  ds.labels_ignored = meta.value("labels_ignored", false);
  ds.provenance = meta.value("provenance", std::string{});
  const PackedTensor t = read_packed(dir / "images.wmt");
  if (t.dims.size() != 4 || t.dims[0] != ds.labels.size() || t.numel() != ds.labels.size() * static_cast<std::size_t>(ds.shape.size()))
    throw FormatError("images.wmt in " + dir.string() + " does not match meta.json");
  ds.pixels.resize(ds.shape.size(), static_cast<Eigen::Index>(ds.labels.size()));
  if (t.dtype == DType::kU8) {
    const auto q = t.values<std::uint8_t>();
    for (std::size_t i = 0; i < q.size(); ++i) ds.pixels.data()[i] = static_cast<float>(q[i]) / 255.0f;
  } else {
    const auto f = t.values<float>();
    std::copy(f.begin(), f.end(), ds.pixels.data());
  }
  ds.validate();
  return ds;
}

Dataset filter_label(const Dataset& ds, int label) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] == label) keep.push_back(i);
  return subset(ds, keep);
}

}  // namespace wmlab

#pragma once

#include "wmlab/datasets.hpp"
#include "wmlab/models.hpp"

#include <random>

namespace wmlab::testing {

inline Dataset random_dataset(std::size_t n, Shape shape, int classes, std::uint64_t seed, Split split = Split::kTest) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::uniform_int_distribution<int> label(0, std::max(classes - 1, 0));
  Dataset d;
  d.name = "random";
  d.split = split;
  d.num_classes = classes;
  d.shape = shape;
  d.pixels.resize(shape.size(), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < d.pixels.size(); ++i) d.pixels.data()[i] = u(rng);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(label(rng));
  return d;
}

template <typename Scalar>
Tensor<Scalar> random_batch(Shape shape, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix<Scalar> m(shape.channels, static_cast<Eigen::Index>(n) * shape.spatial());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(u(rng));
  return Tensor<Scalar>(shape, n, std::move(m));
}

inline int predict_one(const TappedClassifier<float>& model, const Dataset& ds, std::size_t i, int limit = -1) {
  return model.predict(to_batch<float>(ds, i, 1), limit).front();
}

}  // namespace wmlab::testing

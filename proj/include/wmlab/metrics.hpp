#pragma once

#include "wmlab/datasets.hpp"
#include "wmlab/models.hpp"

#include <stdexcept>
#include <vector>

namespace wmlab {

/// Top-1 predictions for every item, in batches.
template <typename Scalar>
std::vector<int> predict_all(const TappedClassifier<Scalar>& model, const Dataset& ds, int limit = -1, std::size_t batch = 500) {
  std::vector<int> out;
  out.reserve(ds.size());
  for (std::size_t first = 0; first < ds.size(); first += batch) {
    const std::size_t n = std::min(batch, ds.size() - first);
    const auto p = model.predict(to_batch<Scalar>(ds, first, n), limit);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline void require_eval_split(const Dataset& ds, const char* what) {
  if (ds.split == Split::kProxy || ds.split == Split::kLure)
    throw std::logic_error(std::string(what) + " refuses attack-side data ('" + ds.name + "', split " + to_string(ds.split) + ")");
  if (ds.empty()) throw std::invalid_argument(std::string(what) + " on an empty dataset");
}

/// Main-task accuracy: top-1 over the first C outputs against the labels.
template <typename Scalar>
double mta(const TappedClassifier<Scalar>& model, const Dataset& eval_set) {
  require_eval_split(eval_set, "mta");
  const auto pred = predict_all(model, eval_set, model.num_classes());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == eval_set.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Watermark accuracy: fraction of triggers whose top-1 (over all outputs,
/// or the first C when `first_c`) equals the trigger label.
template <typename Scalar>
double wma(const TappedClassifier<Scalar>& model, const Dataset& triggers, bool first_c = false) {
  require_eval_split(triggers, "wma");
  const auto pred = predict_all(model, triggers, first_c ? model.num_classes() : -1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == triggers.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace wmlab

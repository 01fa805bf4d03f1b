#pragma once

#include "wmlab/models.hpp"
#include "wmlab/watermark.hpp"

#include <memory>
#include <string>

namespace wmlab {

struct RemoteOptions {
  /// Base URL, e.g. "http://127.0.0.1:8080".
  std::string url;
  double timeout_seconds = 10.0;
  int retries = 2;
};

/// Black-box predictor backed by POST <url>/predict. The request body is
/// {"shape": [H, W, C], "pixels": [...]} (HWC floats); the reply is
/// {"class_id": k}. Transport errors are retried, then thrown.
PredictFn remote_predictor(const RemoteOptions& options);

/// Serves a model behind the /predict contract on a background thread.
class ModelServer {
 public:
  ModelServer(TappedClassifier<float> model, std::string host = "127.0.0.1", int port = 0);
  ~ModelServer();
  ModelServer(const ModelServer&) = delete;
  ModelServer& operator=(const ModelServer&) = delete;

  int port() const;
  std::string url() const;
  /// Blocks until stop() is called from another thread or a signal.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace wmlab

#include "wmlab/remote.hpp"

#include "wmlab/errors.hpp"

#include <httplib.h>
#include <json.hpp>

#include <mutex>
#include <thread>

namespace wmlab {

using nlohmann::json;

PredictFn remote_predictor(const RemoteOptions& options) {
  if (options.url.empty()) throw ConfigError("remote predictor needs a URL");
  auto client = std::make_shared<httplib::Client>(options.url);
  const auto secs = static_cast<time_t>(options.timeout_seconds);
  const auto usecs = static_cast<time_t>((options.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client->set_connection_timeout(secs, usecs);
  client->set_read_timeout(secs, usecs);
  client->set_write_timeout(secs, usecs);
  const int retries = std::max(0, options.retries);
  const std::string url = options.url;
  return [client, retries, url](const LabeledImage& image) {
    const json body = {{"shape", {image.shape.height, image.shape.width, image.shape.channels}},
                       {"pixels", std::vector<float>(image.pixels.data(), image.pixels.data() + image.pixels.size())}};
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= retries; ++attempt) {
      auto res = client->Post("/predict", payload, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        if (res->status >= 500) continue;
        break;
      }
      try {
        return json::parse(res->body).at("class_id").get<int>();
      } catch (const json::exception& ex) {
        throw FormatError("malformed reply from " + url + ": " + ex.what());
      }
    }
    throw MissingArtifact("remote model " + url + " unavailable: " + last_error);
  };
}

struct ModelServer::Impl {
  TappedClassifier<float> model;
  std::mutex mutex;
  httplib::Server server;
  std::string host;
  int port = 0;
  std::thread thread;

  explicit Impl(TappedClassifier<float> m) : model(std::move(m)) {}
};

ModelServer::ModelServer(TappedClassifier<float> model, std::string host, int port) : impl_(std::make_unique<Impl>(std::move(model))) {
  Impl* impl = impl_.get();
  impl->host = host;
  impl->server.Post("/predict", [impl](const httplib::Request& req, httplib::Response& res) {
    try {
      const json body = json::parse(req.body);
      const auto s = body.at("shape").get<std::vector<int>>();
      const auto pixels = body.at("pixels").get<std::vector<float>>();
      const Shape shape{s.at(2), s.at(0), s.at(1)};
      if (!(shape == impl->model.input_shape()) || pixels.size() != static_cast<std::size_t>(shape.size())) {
        res.status = 400;
        res.set_content(json{{"error", "input shape mismatch"}}.dump(), "application/json");
        return;
      }
      Matrix<float> m = Eigen::Map<const Matrix<float>>(pixels.data(), shape.channels, shape.spatial());
      int k = 0;
      {
        std::lock_guard<std::mutex> lock(impl->mutex);
        k = impl->model.predict(Tensor<float>(shape, 1, std::move(m))).front();
      }
      res.set_content(json{{"class_id", k}}.dump(), "application/json");
    } catch (const std::exception& ex) {
      res.status = 400;
      res.set_content(json{{"error", ex.what()}}.dump(), "application/json");
    }
  });
  if (port == 0)
    impl->port = impl->server.bind_to_any_port(host);
  else
    impl->port = impl->server.bind_to_port(host, port) ? port : -1;
  if (impl->port <= 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl->thread = std::thread([impl] { impl->server.listen_after_bind(); });
  impl->server.wait_until_ready();
}

ModelServer::~ModelServer() { stop(); }

int ModelServer::port() const { return impl_->port; }

std::string ModelServer::url() const { return "http://" + impl_->host + ":" + std::to_string(impl_->port); }

void ModelServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void ModelServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace wmlab

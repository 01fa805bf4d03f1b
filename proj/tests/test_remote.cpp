#include <doctest.h>

#include "helpers.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/remote.hpp"

#include <chrono>

using namespace wmlab;
using namespace wmlab::testing;

TEST_SUITE("remote") {
  TEST_CASE("a served model answers like the local one") {
    auto model = build_model<float>({Arch::kMicroCnn, {3, 32, 32}, 10, 5});
    const auto local = model.clone();
    ModelServer server(std::move(model));
    REQUIRE(server.port() > 0);
    const PredictFn remote = remote_predictor({server.url(), 5.0, 1});
    Dataset triggers = random_dataset(25, {3, 32, 32}, 10, 3, Split::kTrigger);
    triggers.labels.assign(25, 0);
    const auto expected = predict_all(local, triggers);
    for (std::size_t i = 0; i < triggers.size(); ++i) CHECK(remote(triggers.item(i)) == expected[i]);
    const Verification a = verify(remote, triggers, 0, 0.05);
    const Verification b = verify(local_predictor(local), triggers, 0, 0.05);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.owned == b.owned);
    server.stop();
  }

  TEST_CASE("an unreachable endpoint fails after the retries") {
    int port = 0;
    {
      ModelServer probe(build_model<float>({Arch::kMicroCnn, {3, 8, 8}, 3, 1}));
      port = probe.port();
      probe.stop();
    }
    const PredictFn remote = remote_predictor({"http://127.0.0.1:" + std::to_string(port), 0.5, 2});
    Dataset one = random_dataset(1, {3, 8, 8}, 3, 1, Split::kTrigger);
    const auto start = std::chrono::steady_clock::now();
    CHECK_THROWS(remote(one.item(0)));
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(10));
  }

  TEST_CASE("malformed requests are rejected") {
    ModelServer server(build_model<float>({Arch::kMicroCnn, {3, 8, 8}, 3, 1}));
    const PredictFn remote = remote_predictor({server.url(), 2.0, 0});
    Dataset wrong = random_dataset(1, {3, 4, 4}, 3, 1, Split::kTrigger);
    CHECK_THROWS(remote(wrong.item(0)));
    server.stop();
  }
}

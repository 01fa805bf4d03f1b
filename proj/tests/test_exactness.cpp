#include <doctest.h>

#include "helpers.hpp"
#include "wmlab/attack.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/watermark.hpp"

#include <cmath>

using namespace wmlab;
using namespace wmlab::testing;

TEST_SUITE("exactness") {
  TEST_CASE("blend with an empty mask returns the image") {
    const Shape s{3, 6, 5};
    const Dataset d = random_dataset(2, s, 10, 1);
    const Eigen::ArrayXf x = d.pixels.col(0).array(), pattern = d.pixels.col(1).array();
    const Eigen::ArrayXf out = blend(x, pattern, Eigen::ArrayXf::Zero(s.spatial()), s);
    CHECK((out == x).all());
  }

  TEST_CASE("blend with a full mask returns the pattern") {
    const Shape s{3, 6, 5};
    const Dataset d = random_dataset(2, s, 10, 2);
    const Eigen::ArrayXf x = d.pixels.col(0).array(), pattern = d.pixels.col(1).array();
    const Eigen::ArrayXf out = blend(x, pattern, Eigen::ArrayXf::Ones(s.spatial()), s);
    CHECK((out == pattern).all());
  }

  TEST_CASE("blend of 0.2 and 0.8 at half mask is 0.5") {
    const Shape s{3, 4, 4};
    const Eigen::ArrayXf out =
        blend(Eigen::ArrayXf::Constant(s.size(), 0.2f), Eigen::ArrayXf::Constant(s.size(), 0.8f), Eigen::ArrayXf::Constant(s.spatial(), 0.5f), s);
    CHECK((out - 0.5f).abs().maxCoeff() < 1e-7f);
  }

  TEST_CASE("forward_split composes to the full forward pass bitwise") {
    for (Arch arch : {Arch::kMicroCnn, Arch::kToyCnn, Arch::kWrn16_4, Arch::kResNet18, Arch::kVgg16}) {
      const auto model = build_model<float>({arch, {3, 32, 32}, 10, 3});
      for (int n : {1, 2, 3}) {
        const auto x = random_batch<float>({3, 32, 32}, n, 10 + n);
        const SplitOutput<float> split = model.forward_split(x);
        const Matrix<float> probs = model.probabilities(x);
        INFO(to_string(arch) << " batch " << n);
        CHECK(split.probs.cwiseEqual(probs).all());
        CHECK(split.maps.data.cwiseEqual(model.attention(x).data).all());
        CHECK(split.maps.shape == model.tap_shape());
      }
    }
  }

  TEST_CASE("expanding the output layer keeps old logits exactly") {
    for (Arch arch : {Arch::kMicroCnn, Arch::kToyCnn, Arch::kWrn16_4, Arch::kResNet18, Arch::kVgg16}) {
      auto model = build_model<float>({arch, {3, 32, 32}, 10, 4});
      const auto x = random_batch<float>({3, 32, 32}, 100, 20);
      const Matrix<float> before = model.logits(x);
      const auto top_before = model.predict(x);
      model.expand_output_layer();
      const Matrix<float> after = model.logits(x);
      INFO(to_string(arch));
      REQUIRE(after.rows() == 11);
      CHECK(after.topRows(10).cwiseEqual(before).all());
      CHECK(after.row(10).isZero());
      CHECK(model.predict(x, 10) == top_before);
      const Matrix<float> p = softmax_columns(after);
      const Matrix<float> q = softmax_columns(before);
      for (Eigen::Index j = 0; j < p.cols(); ++j) {
        const Eigen::ArrayXf ratio = p.col(j).head(10).array() / q.col(j).array();
        CHECK((ratio - ratio(0)).abs().maxCoeff() <= 1e-5f * ratio(0));
      }
      CHECK_THROWS(model.expand_output_layer());
    }
  }

  TEST_CASE("KL is zero at identity and nonnegative on random pairs") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-4, 4);
    std::uniform_int_distribution<int> dims(2, 12);
    for (int t = 0; t < 1000; ++t) {
      const int k = dims(rng);
      Matrix<double> a(k, 1), b(k, 1);
      for (int i = 0; i < k; ++i) {
        a(i, 0) = u(rng);
        b(i, 0) = u(rng);
      }
      const Matrix<double> p = softmax_columns(a);
      CHECK(std::abs(kl_alignment_terms<double>(p.array().log().matrix(), p)) < 1e-12);
      CHECK(kl_alignment_terms<double>(b, p) >= -1e-12);
      CHECK(kl_alignment_terms<double>(b, p, true) >= -1e-12);
    }
  }

  TEST_CASE("KL of (0.9, 0.1) against (0.5, 0.5)") {
    Matrix<double> p(2, 1), logits = Matrix<double>::Zero(2, 1);
    p << 0.9, 0.1;
    const double expected = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
    CHECK(kl_alignment_terms<double>(logits, p) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.3680).epsilon(1e-3));
  }

  TEST_CASE("lure cross-entropy matches a scalar oracle") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0, 2);
    Matrix<double> logits(5, 7);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
    double oracle = 0;
    for (int j = 0; j < 7; ++j) {
      double z = 0;
      for (int i = 0; i < 5; ++i) z += std::exp(logits(i, j));
      oracle += -(logits(4, j) - std::log(z));
    }
    CHECK(lure_loss_terms<double>(logits, 4) == doctest::Approx(oracle / 7).epsilon(1e-12));
  }

  TEST_CASE("maps offset by a constant give c times sqrt(n)") {
    const int n = 36;
    const double c = 0.75;
    Matrix<double> a = Matrix<double>::Random(n, 1);
    Matrix<double> b = a.array() + c;
    CHECK(attention_alignment_terms<double>(a, b) == doctest::Approx(c * std::sqrt(n)).epsilon(1e-12));
  }

  TEST_CASE("penalty on uniform confidence is 1/sqrt(k)") {
    for (int k : {2, 10, 11}) {
      const Matrix<double> logits = Matrix<double>::Constant(k, 3, 0.4);
      const Matrix<double> maps = Matrix<double>::Zero(4, 3);
      CHECK(attention_penalty_terms<double>(maps, logits, {2}) == doctest::Approx(1.0 / std::sqrt(k)).epsilon(1e-12));
    }
  }

  TEST_CASE("objective equals the weighted sum of independent terms") {
    auto victim = build_model<double>({Arch::kMicroCnn, {3, 8, 8}, 3, 1});
    auto attacked = victim.clone();
    attacked.expand_output_layer();
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0, 0.05);
    for (auto& p : attacked.parameters())
      for (Eigen::Index i = 0; i < p.param->value.size(); ++i) p.param->value.data()[i] += g(rng);
    const auto proxy = random_batch<double>({3, 8, 8}, 6, 1);
    const auto lures = random_batch<double>({3, 8, 8}, 2, 2);
    ADConfig cfg;
    cfg.lambda1 = 0.8;
    cfg.lambda2 = 0.3;
    cfg.lambda3 = 0.05;
    const double l_delta = lure_loss(attacked, lures, 3);
    const double l_v = prediction_alignment_loss(attacked, victim, proxy, false, cfg.hard_labels);
    const double l_a = attention_alignment_loss(attacked, victim, proxy);
    const double r = attention_penalty(attacked, proxy, cfg.penalty_taps);
    const LossBreakdown aa = attention_anchoring_loss(attacked, victim, proxy, cfg);
    CHECK(aa.total == doctest::Approx(0.8 * l_v + 0.3 * l_a + 0.05 * r).epsilon(1e-6));
    const LossBreakdown ad = ad_total_loss(attacked, victim, &lures, proxy, cfg);
    CHECK(ad.total == doctest::Approx(l_delta + aa.total).epsilon(1e-12));
    CHECK(std::abs(ad.total - ad.weighted_sum()) < 1e-12);
    cfg.variant = Variant::kADNRT;
    CHECK(ad_total_loss(attacked, victim, &lures, proxy, cfg).total == l_delta + 0.8 * l_v);
    cfg.variant = Variant::kVanilla;
    CHECK(ad_total_loss(attacked, victim, &lures, proxy, cfg).total == l_v);
  }

  TEST_CASE("logged step totals equal their components") {
    const Shape s{3, 8, 8};
    auto victim = build_model<float>({Arch::kMicroCnn, s, 3, 2});
    AuxiliaryData aux;
    aux.proxy = random_dataset(40, s, 3, 3, Split::kProxy);
    aux.proxy.labels_ignored = true;
    aux.lures = random_dataset(4, s, 3, 4, Split::kLure);
    aux.lures.labels.assign(4, 3);
    aux.delta = 3;
    ADConfig cfg;
    cfg.lambda1 = 1.3;
    cfg.lambda2 = 0.4;
    cfg.lambda3 = 0.1;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 10;
    AttackHooks hooks;
    hooks.record_steps = true;
    const AttackResult res = run_attack(victim, aux, cfg, hooks);
    REQUIRE(res.report.steps.size() == 8);
    for (const auto& b : res.report.steps) CHECK(std::abs(b.total - b.weighted_sum()) <= 1e-5);
  }

  TEST_CASE("verify uses a strict threshold") {
    const Shape s{3, 4, 4};
    Dataset triggers = random_dataset(10, s, 2, 1, Split::kTrigger);
    triggers.labels.assign(10, 0);
    int calls = 0;
    const PredictFn nine_of_ten = [&](const LabeledImage&) { return calls++ == 3 ? 1 : 0; };
    const Verification at = verify(nine_of_ten, triggers, 0, 0.9);
    CHECK(at.accuracy == 0.9);
    CHECK_FALSE(at.owned);
    calls = 0;
    CHECK(verify(nine_of_ten, triggers, 0, 0.89).owned);
  }

  TEST_CASE("mta and wma equal per-sample tallies on random models") {
    const Shape s{3, 32, 32};
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      auto model = build_model<float>({seed == 3 ? Arch::kToyCnn : Arch::kMicroCnn, s, 10, seed});
      if (seed == 2) model.expand_output_layer();
      const Dataset eval = random_dataset(137, s, 10, seed + 100, Split::kTest);
      Dataset triggers = random_dataset(61, s, 10, seed + 200, Split::kTrigger);
      triggers.labels.assign(61, 0);
      std::size_t hits = 0, trig = 0, trig_c = 0;
      for (std::size_t i = 0; i < eval.size(); ++i) hits += predict_one(model, eval, i, 10) == eval.labels[i];
      for (std::size_t i = 0; i < triggers.size(); ++i) {
        trig += predict_one(model, triggers, i) == 0;
        trig_c += predict_one(model, triggers, i, 10) == 0;
      }
      CHECK(mta(model, eval) == static_cast<double>(hits) / 137.0);
      CHECK(wma(model, triggers) == static_cast<double>(trig) / 61.0);
      CHECK(wma(model, triggers, true) == static_cast<double>(trig_c) / 61.0);
    }
  }
}

#include <doctest.h>

#include "helpers.hpp"
#include "wmlab/attack.hpp"
#include "wmlab/config.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/eval.hpp"
#include "wmlab/explain.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/packed_io.hpp"
#include "wmlab/watermark.hpp"

#include <filesystem>
#include <set>

#include <unistd.h>

using namespace wmlab;
using namespace wmlab::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wmlab-test-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Dataset clean_set(std::size_t n, int classes, std::uint64_t seed) {
  Dataset d = random_dataset(n, {3, 32, 32}, classes, seed, Split::kTrain);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  return d;
}

}  // namespace

TEST_SUITE("datasets") {
  TEST_CASE("content triggers are convex blends labeled with the target") {
    const Dataset clean = clean_set(50, 10, 1);
    StampOptions stamp;
    stamp.color = 0.9f;
    const TriggerSpec spec = content_trigger_spec(clean.shape, 3, 20, 5, stamp);
    const Dataset t = synthesize_triggers(clean, spec);
    REQUIRE(t.size() == 20);
    CHECK(t.split == Split::kTrigger);
    for (int label : t.labels) CHECK(label == 3);
    CHECK(t.pixels.minCoeff() >= 0.0f);
    CHECK(t.pixels.maxCoeff() <= 1.0f);
    // Every trigger equals some clean image off the mask and the pattern on it.
    for (std::size_t i = 0; i < t.size(); ++i) {
      bool matched = false;
      for (std::size_t j = 0; j < clean.size() && !matched; ++j) {
        bool ok = true;
        for (int p = 0; p < clean.shape.spatial() && ok; ++p)
          for (int c = 0; c < 3 && ok; ++c) {
            const float x = clean.pixels(p * 3 + c, static_cast<Eigen::Index>(j));
            const float v = t.pixels(p * 3 + c, static_cast<Eigen::Index>(i));
            const float lo = std::min(x, spec.pattern(p * 3 + c)), hi = std::max(x, spec.pattern(p * 3 + c));
            ok = v >= lo - 1e-6f && v <= hi + 1e-6f && (spec.mask(p) != 0.0f || v == x);
          }
        matched = ok;
      }
      CHECK(matched);
    }
  }

  TEST_CASE("trigger base images are stratified across classes") {
    const Dataset clean = clean_set(100, 10, 2);
    const auto idx = stratified_sample(clean, 30, 9);
    std::vector<int> per_class(10, 0);
    for (auto i : idx) ++per_class[clean.labels[i]];
    for (int n : per_class) CHECK(n == 3);
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == idx.size());
  }

  TEST_CASE("noise triggers only change the corner patch") {
    const Dataset clean = clean_set(20, 10, 3);
    const TriggerSpec spec = noise_trigger_spec(clean.shape, 0, 10, 4, 0.2f, 6);
    CHECK(spec.mask.sum() == 36.0f);
    CHECK(spec.mask(31 * 32 + 31) == 1.0f);
    CHECK(spec.mask(0) == 0.0f);
    const Dataset t = synthesize_triggers(clean, spec);
    CHECK(t.size() == 10);
    CHECK(t.pixels.minCoeff() >= 0.0f);
    CHECK(t.pixels.maxCoeff() <= 1.0f);
  }

  TEST_CASE("unrelated triggers adapt grayscale digits to the victim shape") {
    Dataset digits = random_dataset(1000, {1, 28, 28}, 10, 4, Split::kTrain);
    digits.labels.assign(1000, 1);
    const Dataset t = make_unrelated_triggers(digits, 0, 1000, {3, 32, 32});
    REQUIRE(t.size() == 1000);
    CHECK(t.shape == Shape{3, 32, 32});
    for (int label : t.labels) CHECK(label == 0);
    CHECK(t.pixels.minCoeff() >= 0.0f);
    CHECK(t.pixels.maxCoeff() <= 1.0f);
    // Channels are replicated.
    CHECK(t.pixels(0, 0) == t.pixels(1, 0));
    CHECK(t.pixels(1, 0) == t.pixels(2, 0));
  }

  TEST_CASE("auxiliary data has the requested sizes and labels") {
    Dataset proxy = random_dataset(1500, {3, 32, 32}, 0, 5, Split::kProxy);
    proxy.labels_ignored = true;
    const Dataset lures = make_abstract_images(40, {3, 32, 32}, 6);
    const AuxiliaryData aux = build_auxiliary(proxy, lures, 1000, 10, 10, 10, 7);
    CHECK(aux.proxy.size() + aux.lures.size() == 1010);
    CHECK(aux.proxy.labels_ignored);
    CHECK(aux.proxy.split == Split::kProxy);
    CHECK(aux.lures.split == Split::kLure);
    for (int label : aux.lures.labels) CHECK(label == 10);
    CHECK(aux.warnings.empty());
    CHECK_FALSE(build_auxiliary(proxy, lures, 10, 2, 0, 10, 7).warnings.empty());
  }

  TEST_CASE("proxy and lure sets are disjoint for all seeds") {
    Dataset pool = random_dataset(60, {3, 8, 8}, 0, 8, Split::kProxy);
    pool.labels_ignored = true;
    const Dataset lures = make_abstract_images(20, {3, 8, 8}, 9);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const AuxiliaryData aux = build_auxiliary(pool, lures, 30, 5, 10, 10, seed);
      for (std::size_t i = 0; i < aux.proxy.size(); ++i)
        for (std::size_t j = 0; j < aux.lures.size(); ++j)
          CHECK_FALSE(aux.proxy.pixels.col(static_cast<Eigen::Index>(i)).isApprox(aux.lures.pixels.col(static_cast<Eigen::Index>(j)), 0.0f));
    }
  }

  TEST_CASE("an image present in both sources is rejected") {
    Dataset pool = random_dataset(5, {3, 8, 8}, 0, 10, Split::kProxy);
    pool.labels_ignored = true;
    Dataset lures = make_abstract_images(1, {3, 8, 8}, 11);
    lures.pixels.col(0) = pool.pixels.col(2);
    CHECK_THROWS(build_auxiliary(pool, lures, 5, 1, 10, 10, 0));
  }

  TEST_CASE("in-distribution split halves the test set reproducibly") {
    Dataset test = random_dataset(5000, {3, 4, 4}, 10, 12, Split::kTest);
    const auto [proxy, eval] = proxy_mode_split(test, 3);
    CHECK(proxy.size() == 2500);
    CHECK(eval.size() == 2500);
    CHECK(proxy.split == Split::kProxy);
    CHECK(eval.split == Split::kEval);
    const auto [proxy2, eval2] = proxy_mode_split(test, 3);
    CHECK(dataset_hash(proxy) == dataset_hash(proxy2));
    CHECK(dataset_hash(eval) == dataset_hash(eval2));
    test.labels.pop_back();
    test.pixels.conservativeResize(Eigen::NoChange, 4999);
    const auto [p3, e3] = proxy_mode_split(test, 3);
    CHECK(p3.size() == 2499);
    CHECK(e3.size() == 2500);
  }

  TEST_CASE("dataset operations are byte-reproducible") {
    CHECK(dataset_hash(make_abstract_images(10, {3, 16, 16}, 4)) == dataset_hash(make_abstract_images(10, {3, 16, 16}, 4)));
    CHECK(dataset_hash(make_abstract_images(10, {3, 16, 16}, 4)) != dataset_hash(make_abstract_images(10, {3, 16, 16}, 5)));
    CHECK(shuffled_indices(100, 7) == shuffled_indices(100, 7));
    const Dataset clean = clean_set(40, 10, 13);
    const auto spec = content_trigger_spec(clean.shape, 0, 10, 1);
    CHECK(dataset_hash(synthesize_triggers(clean, spec)) == dataset_hash(synthesize_triggers(clean, spec)));
  }

  TEST_CASE("dataset directories round-trip") {
    const fs::path dir = scratch("dataset");
    Dataset d = clean_set(7, 10, 14);
    d.provenance = "unit";
    save_dataset(d, dir / "f32");
    const Dataset back = load_dataset(dir / "f32");
    CHECK(back.pixels.cwiseEqual(d.pixels).all());
    CHECK(back.labels == d.labels);
    CHECK(back.shape == d.shape);
    CHECK(back.provenance == "unit");
    save_dataset(d, dir / "u8", {}, 0, true);
    const Dataset q = load_dataset(dir / "u8");
    CHECK((q.pixels - d.pixels).cwiseAbs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
    fs::remove_all(dir);
  }

  TEST_CASE("proxy and lure data are refused by accuracy metrics") {
    auto model = build_model<float>({Arch::kMicroCnn, {3, 8, 8}, 3, 1});
    Dataset proxy = random_dataset(4, {3, 8, 8}, 3, 1, Split::kProxy);
    CHECK_THROWS(mta(model, proxy));
    proxy.split = Split::kLure;
    CHECK_THROWS(wma(model, proxy));
  }
}

TEST_SUITE("models") {
  TEST_CASE("parameter counts match the recorded table") {
    struct Row {
      Arch arch;
      int classes;
      std::size_t count;
    };
    const Row rows[] = {{Arch::kVgg16, 10, 14728266},  {Arch::kVgg16, 43, 14745195},   {Arch::kResNet18, 10, 11173962},
                        {Arch::kResNet18, 43, 11190891}, {Arch::kWrn16_4, 10, 2748890}, {Arch::kWrn16_4, 43, 2757371},
                        {Arch::kToyCnn, 10, 328426},    {Arch::kToyCnn, 43, 330571}};
    for (const auto& r : rows) {
      auto m = build_model<float>({r.arch, {3, 32, 32}, r.classes, 0});
      INFO(to_string(r.arch) << " C=" << r.classes);
      CHECK(m.parameter_count() == r.count);
      CHECK(m.out_dim() == r.classes);
    }
  }

  TEST_CASE("same seed gives identical initial parameters") {
    for (Arch arch : {Arch::kToyCnn, Arch::kResNet18}) {
      auto a = build_model<float>({arch, {3, 32, 32}, 10, 42});
      auto b = build_model<float>({arch, {3, 32, 32}, 10, 42});
      auto c = build_model<float>({arch, {3, 32, 32}, 10, 43});
      CHECK(parameter_hash(a) == parameter_hash(b));
      CHECK(parameter_hash(a) != parameter_hash(c));
    }
  }

  TEST_CASE("default taps and their shapes") {
    const std::pair<Arch, Shape> expected[] = {{Arch::kToyCnn, {64, 16, 16}},
                                               {Arch::kVgg16, {512, 2, 2}},
                                               {Arch::kResNet18, {512, 4, 4}},
                                               {Arch::kWrn16_4, {256, 8, 8}},
                                               {Arch::kMicroCnn, {4, 16, 16}}};
    for (const auto& [arch, shape] : expected) {
      const auto m = build_model<float>({arch, {3, 32, 32}, 10, 0});
      INFO(to_string(arch));
      CHECK(m.tap_layer() == default_tap(arch));
      CHECK(m.tap_shape() == shape);
      CHECK(m.forward_split(random_batch<float>({3, 32, 32}, 2, 1)).maps.shape == shape);
    }
  }

  TEST_CASE("tap can move to any registered activation") {
    auto m = build_model<float>({Arch::kToyCnn, {3, 32, 32}, 10, 0});
    for (const auto& name : m.activation_layers()) {
      m.set_tap_layer(name);
      CHECK(m.attention(random_batch<float>({3, 32, 32}, 1, 2)).shape == m.layer_shape(name));
    }
    CHECK_THROWS(m.set_tap_layer("conv1"));
    CHECK_THROWS(m.set_tap_layer("nope"));
    CHECK_THROWS(parse_arch("vgg19"));
  }

  TEST_CASE("softmax rows are finite and sum to one") {
    for (Arch arch : {Arch::kToyCnn, Arch::kWrn16_4, Arch::kResNet18}) {
      const auto m = build_model<float>({arch, {3, 32, 32}, 10, 5});
      const Matrix<float> p = m.probabilities(random_batch<float>({3, 32, 32}, 8, 3));
      CHECK(p.allFinite());
      CHECK(((p.colwise().sum().array() - 1.0f).abs() <= 1e-5f).all());
    }
  }

  TEST_CASE("checkpoints round-trip bitwise, expanded or not") {
    const fs::path dir = scratch("ckpt");
    auto m = build_model<float>({Arch::kToyCnn, {3, 32, 32}, 10, 6});
    m.set_tap_layer("relu3");
    m.provenance = "unit";
    save_checkpoint(m, dir / "a.wmck");
    auto back = load_checkpoint<float>(dir / "a.wmck");
    CHECK(parameter_hash(back) == parameter_hash(m));
    CHECK(back.tap_layer() == "relu3");
    CHECK(back.provenance == "unit");
    m.expand_output_layer();
    save_checkpoint(m, dir / "b.wmck");
    auto expanded = load_checkpoint<float>(dir / "b.wmck");
    CHECK(expanded.out_dim() == 11);
    CHECK(parameter_hash(expanded) == parameter_hash(m));
    fs::remove_all(dir);
  }

  TEST_CASE("precision casts preserve predictions") {
    auto m = build_model<float>({Arch::kMicroCnn, {3, 8, 8}, 3, 7});
    const auto d = m.cast<double>();
    const auto x = random_batch<float>({3, 8, 8}, 5, 1);
    CHECK(((d.logits(x.cast<double>()).cast<float>() - m.logits(x)).cwiseAbs().maxCoeff()) < 1e-5f);
  }
}

TEST_SUITE("watermark") {
  TEST_CASE("verify is monotone in tau") {
    Dataset triggers = random_dataset(20, {3, 4, 4}, 2, 1, Split::kTrigger);
    triggers.labels.assign(20, 0);
    for (int hits = 0; hits <= 20; ++hits) {
      int i = 0;
      const PredictFn api = [&](const LabeledImage&) { return i++ % 20 < hits ? 0 : 1; };
      bool seen_false = false;
      for (double tau = 0.0; tau <= 1.0; tau += 0.05) {
        i = 0;
        const bool owned = verify(api, triggers, 0, tau).owned;
        if (seen_false) CHECK_FALSE(owned);
        seen_false = seen_false || !owned;
      }
    }
  }

  TEST_CASE("verify depends only on top-1 outputs") {
    auto model = build_model<float>({Arch::kMicroCnn, {3, 32, 32}, 10, 3});
    Dataset triggers = random_dataset(50, {3, 32, 32}, 10, 2, Split::kTrigger);
    triggers.labels.assign(50, 0);
    const auto top1 = predict_all(model, triggers);
    std::size_t k = 0;
    const PredictFn table = [&](const LabeledImage&) { return top1[k++]; };
    for (double tau : {0.0, 0.05, 0.1, 0.5}) {
      k = 0;
      const Verification a = verify(local_predictor(model), triggers, 0, tau);
      const Verification b = verify(table, triggers, 0, tau);
      CHECK(a.accuracy == b.accuracy);
      CHECK(a.owned == b.owned);
    }
  }

  TEST_CASE("embedding an empty trigger set is plain training") {
    const Dataset data = clean_set(60, 3, 4);
    Dataset relabeled = data;
    for (auto& l : relabeled.labels) l %= 3;
    relabeled.num_classes = 3;
    relabeled.shape = {3, 32, 32};
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.01;
    cfg.seed = 9;
    auto a = build_model<float>({Arch::kMicroCnn, {3, 32, 32}, 3, 1});
    auto b = build_model<float>({Arch::kMicroCnn, {3, 32, 32}, 3, 1});
    Dataset none;
    none.split = Split::kTrigger;
    none.shape = relabeled.shape;
    none.num_classes = 3;
    none.pixels.resize(relabeled.shape.size(), 0);
    const auto ta = embed_watermark(a, relabeled, {none, 0, 0.9, 5e-4}, cfg);
    const auto tb = train_classifier(b, relabeled, cfg, 5e-4);
    REQUIRE(ta.size() == tb.size());
    for (std::size_t e = 0; e < ta.size(); ++e) CHECK(std::abs(ta[e].loss - tb[e].loss) <= 1e-6);
    CHECK(parameter_hash(a) == parameter_hash(b));
  }

  TEST_CASE("embedding rejects mismatched trigger labels") {
    const Dataset data = clean_set(30, 10, 5);
    Dataset t = synthesize_triggers(data, content_trigger_spec(data.shape, 2, 5, 1));
    t.labels[0] = 3;
    auto m = build_model<float>({Arch::kMicroCnn, {3, 32, 32}, 10, 1});
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(embed_watermark(m, data, {t, 2, 0.9, 5e-4}, cfg), ConfigError);
  }

  TEST_CASE("selective forgetting criteria use absolute differences") {
    SfwReport r;
    r.num_classes = 10;
    r.epsilon_forget = 0.1;
    r.negl = 0.03;
    r.wma_attacked = 0.077;
    r.mta_attacked = 0.9358;
    r.mta_victim = 0.9382;
    apply_sfw_criteria(r);
    CHECK(r.forget_ok);
    CHECK(r.fidelity_ok);
    r.mta_attacked = 0.9382 + 0.02;
    apply_sfw_criteria(r);
    CHECK(r.fidelity_ok);
    r.mta_attacked = 0.9382 - 0.04;
    apply_sfw_criteria(r);
    CHECK_FALSE(r.fidelity_ok);
    r.mta_attacked = 0.9382 + 0.04;
    apply_sfw_criteria(r);
    CHECK_FALSE(r.fidelity_ok);
    r.wma_attacked = 0.0;
    apply_sfw_criteria(r);
    CHECK(r.forget_ok);
    r.wma_attacked = 0.25;
    apply_sfw_criteria(r);
    CHECK_FALSE(r.forget_ok);
    r.num_classes = 43;
    r.epsilon_forget = 0.12 - 1.0 / 43;
    r.wma_attacked = 0.12;
    apply_sfw_criteria(r);
    CHECK(r.forget_ok);
    CHECK(sfw_report_from_json(to_json(r)).forget_ok == r.forget_ok);
  }
}

TEST_SUITE("attack") {
  struct Setup {
    Shape s{3, 8, 8};
    TappedClassifier<float> victim = build_model<float>({Arch::kMicroCnn, s, 3, 2});
    AuxiliaryData aux;
    Dataset eval = random_dataset(30, s, 3, 5, Split::kTest);
    Dataset triggers = random_dataset(12, s, 3, 6, Split::kTrigger);
    Setup() {
      aux.proxy = random_dataset(40, s, 0, 3, Split::kProxy);
      aux.proxy.labels_ignored = true;
      aux.lures = make_abstract_images(4, s, 4);
      aux.lures.split = Split::kLure;
      aux.lures.labels.assign(4, 3);
      aux.delta = 3;
      triggers.labels.assign(12, 0);
    }
    ADConfig cfg(Variant v) const {
      ADConfig c;
      c.variant = v;
      c.finetune.epochs = 2;
      c.finetune.batch_size = 10;
      return c;
    }
  };

  TEST_CASE("variant weights") {
    ADConfig c;
    c.lambda1 = 2;
    c.lambda2 = 3;
    c.lambda3 = 4;
    const std::pair<Variant, std::array<double, 4>> table[] = {
        {Variant::kAD, {1, 2, 3, 4}},    {Variant::kVanilla, {0, 1, 0, 0}}, {Variant::kAA, {0, 2, 3, 4}},
        {Variant::kADNRA, {1, 2, 3, 0}}, {Variant::kADNLA, {1, 2, 0, 4}},   {Variant::kADNRT, {1, 2, 0, 0}}};
    for (const auto& [v, w] : table) {
      c.variant = v;
      CHECK(variant_weights(c) == w);
      CHECK(parse_variant(to_string(v)) == v);
    }
    CHECK(uses_lures(Variant::kAD));
    CHECK_FALSE(uses_lures(Variant::kAA));
    CHECK_FALSE(uses_lures(Variant::kVanilla));
    CHECK_THROWS_AS(parse_variant("PST"), ConfigError);
  }

  TEST_CASE("the victim is never updated") {
    Setup s;
    auto before = s.victim.clone();
    for (Variant v : {Variant::kAD, Variant::kVanilla, Variant::kAA, Variant::kADNRA, Variant::kADNLA, Variant::kADNRT}) {
      const AttackResult r = run_attack(s.victim, s.aux, s.cfg(v));
      CHECK(r.report.victim_hash_before == r.report.victim_hash_after);
    }
    CHECK(parameter_hash(before) == parameter_hash(s.victim));
  }

  TEST_CASE("zero weights and no lures leave the parameters unchanged") {
    Setup s;
    ADConfig c = s.cfg(Variant::kAA);
    c.lambda1 = c.lambda2 = c.lambda3 = 0;
    AttackResult r = run_attack(s.victim, s.aux, c);
    auto v = s.victim.clone();
    CHECK(parameter_hash(r.model) == parameter_hash(v));
  }

  TEST_CASE("expansion alone does not change accuracy") {
    Setup s;
    AttackHooks hooks;
    hooks.eval_set = &s.eval;
    hooks.triggers = &s.triggers;
    const AttackResult r = run_attack(s.victim, s.aux, s.cfg(Variant::kAD), hooks);
    CHECK(r.report.expanded);
    CHECK(r.model.out_dim() == 4);
    CHECK(r.report.mta_expanded == r.report.mta_before);
    CHECK(wma(r.model, s.triggers, true) >= 0.0);
    REQUIRE(r.report.sfw.has_value());
  }

  TEST_CASE("hard-label prediction alignment is cross-entropy on victim top-1") {
    Setup s;
    auto attacked = s.victim.clone();
    std::mt19937_64 rng(9);
    std::normal_distribution<float> nd(0.0f, 0.1f);
    for (auto& p : attacked.parameters()) p.param->value = p.param->value.unaryExpr([&](float v) { return v + nd(rng); });
    const auto batch = to_batch<float>(s.aux.proxy, 0, 20);
    const auto top1 = s.victim.predict(batch);
    const Matrix<float> logp = log_softmax_columns(Matrix<float>(attacked.logits(batch)));
    double ce = 0;
    for (int i = 0; i < 20; ++i) ce -= logp(top1[static_cast<std::size_t>(i)], i);
    CHECK(prediction_alignment_loss(attacked, s.victim, batch, false, true) == doctest::Approx(ce / 20).epsilon(1e-5));
    CHECK(prediction_alignment_loss(s.victim, s.victim, batch, false, false) == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    ADConfig c = s.cfg(Variant::kVanilla);
    c.kl_reverse = true;
    CHECK_THROWS_AS(c.validate(3), ConfigError);
  }

  TEST_CASE("lure label inside the label space does not expand") {
    Setup s;
    ADConfig c = s.cfg(Variant::kAD);
    c.delta = 0;
    AuxiliaryData aux = s.aux;
    aux.lures.labels.assign(4, 0);
    aux.delta = 0;
    const AttackResult r = run_attack(s.victim, aux, c);
    CHECK_FALSE(r.report.expanded);
    CHECK(r.model.out_dim() == 3);
  }

  TEST_CASE("lure variants need lures") {
    Setup s;
    AuxiliaryData aux = s.aux;
    aux.lures = Dataset{};
    aux.lures.split = Split::kLure;
    aux.lures.shape = s.s;
    aux.lures.pixels.resize(s.s.size(), 0);
    CHECK_THROWS(run_attack(s.victim, aux, s.cfg(Variant::kAD)));
    CHECK_NOTHROW(run_attack(s.victim, aux, s.cfg(Variant::kVanilla)));
  }

  TEST_CASE("attacks are reproducible") {
    Setup s;
    auto a = run_attack(s.victim, s.aux, s.cfg(Variant::kAD));
    auto b = run_attack(s.victim, s.aux, s.cfg(Variant::kAD));
    CHECK(parameter_hash(a.model) == parameter_hash(b.model));
  }

  TEST_CASE("attack reports round-trip") {
    Setup s;
    AttackHooks hooks;
    hooks.eval_set = &s.eval;
    hooks.triggers = &s.triggers;
    hooks.per_epoch_metrics = true;
    const AttackResult r = run_attack(s.victim, s.aux, s.cfg(Variant::kAD), hooks);
    CHECK(to_json(attack_report_from_json(to_json(r.report))) == to_json(r.report));
    CHECK(r.report.trace.size() == 2);
    const ADConfig back = ad_config_from_json(r.report.config);
    CHECK(back.variant == Variant::kAD);
    CHECK(back.tap_layer == "relu2");
  }

  TEST_CASE("lambda search converges to the feasibility boundary") {
    ADConfig base;
    SearchSpace space;
    space.ranges[0] = LambdaRange{1e-3, 100.0, true};
    space.target = 0.5;
    space.ratio = 1.5;
    space.max_steps = 20;
    int calls = 0;
    const SearchScorer scorer = [&](const ADConfig& c) {
      ++calls;
      return c.lambda1 >= 0.37 ? 1.0 : 0.0;
    };
    const SearchResult r = lambda_search(base, space, scorer);
    CHECK(r.best.lambda1 >= 0.37);
    CHECK(r.best.lambda1 <= 0.37 * 1.5);
    const double bound = std::ceil(std::log2(std::log(1e5) / std::log(1.5))) + 2;
    CHECK(calls <= bound);
    CHECK(to_json(lambda_search(base, space, scorer)) == to_json(r));

    space.ranges[0]->prefer_small = false;
    const SearchScorer upper = [](const ADConfig& c) { return c.lambda1 <= 2.0 ? 1.0 : 0.0; };
    const SearchResult u = lambda_search(base, space, upper);
    CHECK(u.best.lambda1 <= 2.0);
    CHECK(u.best.lambda1 >= 2.0 / 1.5);
  }

  TEST_CASE("degenerate and empty search spaces") {
    ADConfig base;
    SearchSpace space;
    space.ranges[1] = LambdaRange{0.25, 0.25, true};
    const SearchResult r = lambda_search(base, space, [](const ADConfig&) { return 1.0; });
    CHECK(r.best.lambda2 == 0.25);
    CHECK_THROWS_AS(lambda_search(base, SearchSpace{}, [](const ADConfig&) { return 1.0; }), ConfigError);
  }
}

TEST_SUITE("explain") {
  TEST_CASE("grad-cam matches an explicit-loop oracle") {
    const Shape in{3, 8, 8};
    const auto model = build_model<double>({Arch::kMicroCnn, in, 3, 21});
    const auto x = random_batch<double>(in, 1, 4);
    auto m = model.clone();
    m.set_tap_layer("relu2");
    const Tensor<double> a = m.attention(x);  // 4 channels, 4 x 4
    auto params = m.parameters();
    const Matrix<double>* w = nullptr;
    for (auto& p : params)
      if (p.name == "fc.weight") w = &p.param->value;
    REQUIRE(w != nullptr);
    for (int cls = 0; cls < 3; ++cls) {
      double weights[4] = {0, 0, 0, 0};
      for (int k = 0; k < 4; ++k)
        for (int py = 0; py < 2; ++py)
          for (int px = 0; px < 2; ++px) {
            int by = 2 * py, bx = 2 * px;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                if (a.data(k, (2 * py + dy) * 4 + 2 * px + dx) > a.data(k, by * 4 + bx)) {
                  by = 2 * py + dy;
                  bx = 2 * px + dx;
                }
            weights[k] += (*w)(cls, (py * 2 + px) * 4 + k) / 16.0;
          }
      double cam[16];
      double peak = 0;
      for (int p = 0; p < 16; ++p) {
        double v = 0;
        for (int k = 0; k < 4; ++k) v += weights[k] * a.data(k, p);
        cam[p] = std::max(0.0, v);
        peak = std::max(peak, cam[p]);
      }
      const Heatmap h = grad_cam(model, x, cls, "relu2");
      if (peak == 0) {
        CHECK(h.values.isZero());
        continue;
      }
      double up[64];
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) {
          const double fy = std::clamp((y + 0.5) * 0.5 - 0.5, 0.0, 3.0), fx = std::clamp((xx + 0.5) * 0.5 - 0.5, 0.0, 3.0);
          const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
          const int y1 = std::min(y0 + 1, 3), x1 = std::min(x0 + 1, 3);
          const double wy = fy - y0, wx = fx - x0;
          const auto c = [&](int yy, int xv) { return cam[yy * 4 + xv] / peak; };
          up[y * 8 + xx] = (1 - wy) * ((1 - wx) * c(y0, x0) + wx * c(y0, x1)) + wy * ((1 - wx) * c(y1, x0) + wx * c(y1, x1));
        }
      const double lo = *std::min_element(up, up + 64), hi = *std::max_element(up, up + 64);
      for (int p = 0; p < 64; ++p) {
        const double expected = hi > lo ? (up[p] - lo) / (hi - lo) : 0.0;
        CHECK(h.values(p / 8, p % 8) == doctest::Approx(expected).epsilon(1e-5));
      }
    }
  }

  TEST_CASE("grad-cam ignores positive rescaling of the class logit") {
    const Shape in{3, 32, 32};
    for (Arch arch : {Arch::kMicroCnn, Arch::kToyCnn}) {
      auto model = build_model<float>({arch, in, 10, 8});
      auto doubled = model.clone();
      auto params = doubled.parameters();
      params[params.size() - 2].param->value *= 2.0f;
      params[params.size() - 1].param->value *= 2.0f;
      for (int i = 0; i < 3; ++i) {
        const auto x = random_batch<float>(in, 1, 30 + i);
        const Heatmap a = grad_cam(model, x, i);
        const Heatmap b = grad_cam(doubled, x, i);
        CHECK((a.values - b.values).abs().maxCoeff() <= 1e-5f);
      }
    }
  }

  TEST_CASE("similarity is symmetric, bounded and matches the correlation formula") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0, 1);
    for (int t = 0; t < 50; ++t) {
      Heatmap a, b;
      a.values.resize(8, 8);
      b.values.resize(8, 8);
      for (int i = 0; i < 64; ++i) {
        a.values(i) = u(rng);
        b.values(i) = t % 5 == 0 ? a.values(i) * 0.5f + 0.1f : u(rng);
      }
      const double s = heatmap_similarity(a, b);
      CHECK(s == heatmap_similarity(b, a));
      CHECK(s >= -1.0);
      CHECK(s <= 1.0);
      double ma = 0, mb = 0;
      for (int i = 0; i < 64; ++i) {
        ma += a.values(i);
        mb += b.values(i);
      }
      ma /= 64;
      mb /= 64;
      double sab = 0, saa = 0, sbb = 0;
      for (int i = 0; i < 64; ++i) {
        sab += (a.values(i) - ma) * (b.values(i) - mb);
        saa += (a.values(i) - ma) * (a.values(i) - ma);
        sbb += (b.values(i) - mb) * (b.values(i) - mb);
      }
      CHECK(std::abs(s - sab / std::sqrt(saa * sbb)) < 1e-10);
    }
    Heatmap flat;
    flat.values = Eigen::ArrayXXf::Constant(4, 4, 0.3f);
    CHECK(heatmap_similarity(flat, flat) == 0.0);
  }
}

TEST_SUITE("eval") {
  TEST_CASE("result tables round-trip through JSON and CSV") {
    ResultTable t;
    t.name = "demo";
    ResultRow r;
    r.name = "demo";
    r.variant = "AD";
    r.parameter = "n_lures";
    r.value = 10;
    r.delta = 10;
    r.n_proxy = 1000;
    r.n_lures = 10;
    r.seed = 3;
    r.mta_victim = 0.8123456789;
    r.wma_victim = 1;
    r.mta = 0.8012345;
    r.wma = 0.0712345;
    r.wma_first_c = 0.08;
    r.forget_ok = true;
    r.fidelity_ok = true;
    r.seconds = 12.5;
    t.rows = {r, r};
    t.rows[1].variant = "AA";
    CHECK(to_json(result_table_from_json(to_json(t))) == to_json(t));
    CHECK(to_json(parse_table_csv(table_csv(t), "demo")) == to_json(t));
    ResultTable empty;
    empty.name = "none";
    const std::string csv = table_csv(empty);
    CHECK(csv.find("mta/wma") != std::string::npos);
    CHECK(parse_table_csv(csv).rows.empty());
    CHECK(mta_wma_cell(0.9358, 0.077) == "93.58/7.70");
  }

  TEST_CASE("sweeps produce one row per setting") {
    const Shape s{3, 8, 8};
    auto victim = build_model<float>({Arch::kMicroCnn, s, 3, 2});
    Dataset pool = random_dataset(60, s, 0, 1, Split::kProxy);
    pool.labels_ignored = true;
    const Dataset lures = make_abstract_images(20, s, 2);
    const Dataset eval = random_dataset(20, s, 3, 3, Split::kTest);
    Dataset triggers = random_dataset(10, s, 3, 4, Split::kTrigger);
    triggers.labels.assign(10, 0);
    SweepContext ctx;
    ctx.victim = &victim;
    ctx.proxy_pool = &pool;
    ctx.lure_pool = &lures;
    ctx.eval_set = &eval;
    ctx.triggers = &triggers;
    ctx.n_proxy = 30;
    ctx.n_lures = 4;
    ctx.work_dir = scratch("sweep");
    ADConfig cfg;
    cfg.finetune.epochs = 1;
    cfg.finetune.batch_size = 10;
    CHECK(sweep_lure_budget(ctx, cfg, {4}).rows.size() == 1);
    CHECK_THROWS(sweep_lure_budget(ctx, cfg, {0}));
    ADConfig vanilla = cfg;
    vanilla.variant = Variant::kVanilla;
    CHECK(sweep_lure_budget(ctx, vanilla, {0}).rows.size() == 1);
    const ResultTable labels = sweep_lure_label(ctx, cfg, {0, -1});
    REQUIRE(labels.rows.size() == 2);
    CHECK(labels.rows[0].delta == 0);
    CHECK(labels.rows[1].delta == 3);
    ctx.jobs = 2;
    const ResultTable variants = sweep_variants(ctx, cfg, {"AD", "vanilla"}, {0, 1});
    CHECK(variants.rows.size() == 4);
    ctx.jobs = 1;
    const ResultTable serial = sweep_variants(ctx, cfg, {"AD", "vanilla"}, {0, 1});
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(serial.rows[i].mta == variants.rows[i].mta);
      CHECK(serial.rows[i].wma == variants.rows[i].wma);
    }
    fs::remove_all(ctx.work_dir);
  }
}

TEST_SUITE("config") {
  TEST_CASE("defaults cover every field and round-trip") {
    const ExperimentConfig c = parse_config(nlohmann::json::object());
    CHECK(c.to_json() == default_config_json());
    CHECK(parse_config(c.to_json()).to_json() == c.to_json());
    CHECK(c.dataset.trigger.noise_std == 0.1);
    CHECK(c.to_json()["dataset"]["trigger"]["noise_std"].get<double>() == 0.1);
  }

  TEST_CASE("schema violations are reported") {
    CHECK_THROWS_AS(parse_config({{"bogus", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"attack", {{"lambda1", "x"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"attack", {{"variant", "PST"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"model", {{"arch", "vgg19"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"eval", {{"epsilon_forget", -1}}}}), ConfigError);
  }

  TEST_CASE("overrides and hashing") {
    const nlohmann::json base = nlohmann::json::object();
    const auto j = apply_overrides(base, {"attack.lambda1=0.5", "attack.variant=AA", "model.tap=relu3"});
    const ExperimentConfig c = parse_config(j);
    CHECK(c.attack.lambda1 == 0.5);
    CHECK(c.attack.variant == Variant::kAA);
    CHECK(c.model.tap == "relu3");
    const ExperimentConfig d = parse_config(base);
    CHECK(c.embed_key() == d.embed_key());
    CHECK(c.attack_key() != d.attack_key());
    CHECK(c.full_hash() != d.full_hash());
    const ExperimentConfig e = parse_config(apply_overrides(base, {"watermark.count=100"}));
    CHECK(e.embed_key() != d.embed_key());
    CHECK(d.embed_key() == parse_config(base).embed_key());
    CHECK_THROWS_AS(apply_overrides(base, {"novalue"}), ConfigError);
  }

  TEST_CASE("lure label equal to the target warns but is accepted") {
    const ExperimentConfig c = parse_config(apply_overrides(nlohmann::json::object(), {"attack.delta=0", "watermark.target_label=0"}));
    CHECK_FALSE(c.warnings().empty());
    CHECK(parse_config(nlohmann::json::object()).warnings().empty());
  }

  TEST_CASE("packed tensors and archives round-trip") {
    const fs::path dir = scratch("packed");
    const std::vector<float> v = {1.5f, -2.0f, 3.25f, 0.0f, 1e-8f, 7.0f};
    write_packed(dir / "t.wmt", PackedTensor::from<float>(std::span<const float>(v), {2, 3}));
    const PackedTensor back = read_packed(dir / "t.wmt");
    CHECK(back.dims == std::vector<std::uint64_t>{2, 3});
    CHECK(back.values<float>() == v);
    CHECK_THROWS_AS(back.values<double>(), FormatError);
    write_text_file(dir / "junk.wmt", "not a tensor");
    CHECK_THROWS_AS(read_packed(dir / "junk.wmt"), FormatError);
    CHECK_THROWS_AS(read_packed(dir / "missing.wmt"), MissingArtifact);
    CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    fs::remove_all(dir);
  }
}

#include <doctest.h>

#include "wmlab/attack.hpp"
#include "wmlab/models.hpp"
#include "wmlab/nn/layers.hpp"

#include <functional>
#include <random>

using namespace wmlab;
using Mat = Matrix<double>;

namespace {

constexpr double kTol = 1e-3;
constexpr double kStep = 1e-6;

double rel_error(const Mat& analytic, const Mat& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-10});
  return (analytic - numeric).norm() / scale;
}

Mat random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = u(rng);
  return m;
}

Tensor<double> random_tensor(Shape s, int n, std::mt19937_64& rng, double lo = 0, double hi = 1) {
  return Tensor<double>(s, n, random_matrix(s.channels, static_cast<Eigen::Index>(n) * s.spatial(), rng, lo, hi));
}

Mat central_difference(Mat& x, const std::function<double()>& f) {
  Mat g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + kStep;
    const double up = f();
    x.data()[i] = keep - kStep;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * kStep);
  }
  return g;
}

Mat softmax_cols(const Mat& logits) { return softmax_columns(logits); }

/// Checks input and parameter gradients of a layer under loss sum(w .* y).
void check_layer(nn::Layer<double>& layer, Tensor<double> x, std::mt19937_64& rng, nn::Mode mode = nn::Mode::kTrain) {
  layer.initialize(rng);
  std::vector<nn::NamedParam<double>> params;
  layer.parameters("", params);
  for (auto& p : params) p.param->value += random_matrix(p.param->value.rows(), p.param->value.cols(), rng, -0.1, 0.1);
  const Tensor<double> y0 = layer.forward(x, mode);
  const Mat w = random_matrix(y0.data.rows(), y0.data.cols(), rng);
  const auto loss = [&] { return layer.forward(x, mode).data.cwiseProduct(w).sum(); };

  for (auto& p : params) p.param->grad.setZero();
  layer.forward(x, mode);
  const Tensor<double> dx = layer.backward(Tensor<double>(y0.shape, y0.batch, w));
  CHECK(rel_error(dx.data, central_difference(x.data, loss)) < kTol);
  for (auto& p : params) {
    INFO(layer.kind() << " parameter " << p.name);
    CHECK(rel_error(p.param->grad, central_difference(p.param->value, loss)) < kTol);
  }
}

struct Fixture {
  std::mt19937_64 rng{7};
  Shape in{3, 8, 8};
  int classes = 3;
  TappedClassifier<double> victim = build_model<double>({Arch::kMicroCnn, in, classes, 11});
  TappedClassifier<double> attacked = build_model<double>({Arch::kMicroCnn, in, classes, 11});
  Tensor<double> proxy = random_tensor(in, 5, rng);
  Tensor<double> lures = random_tensor(in, 3, rng);

  Fixture() {
    attacked.expand_output_layer();
    for (auto& p : attacked.parameters()) p.param->value += random_matrix(p.param->value.rows(), p.param->value.cols(), rng, -0.2, 0.2);
  }

  void check(const ADConfig& cfg, bool with_lures) {
    const Tensor<double>* lb = with_lures ? &lures : nullptr;
    const TeacherOutputs<double> teacher = teacher_outputs(victim, proxy, cfg.hard_labels);
    const LossBreakdown b = ad_loss_and_backward(attacked, teacher, proxy, lb, cfg, nn::Mode::kEval);
    const LossBreakdown ref = ad_total_loss(attacked, victim, lb, proxy, cfg);
    CHECK(b.total == doctest::Approx(ref.total).epsilon(1e-9));
    const auto loss = [&] { return ad_total_loss(attacked, victim, lb, proxy, cfg).total; };
    double worst = 0;
    for (auto& p : attacked.parameters()) {
      const Mat analytic = p.param->grad;
      const double e = rel_error(analytic, central_difference(p.param->value, loss));
      INFO("parameter " << p.name << " relative error " << e);
      CHECK(e < kTol);
      worst = std::max(worst, e);
    }
    MESSAGE("worst relative error " << worst);
  }
};

ADConfig only(Variant v, double l1, double l2, double l3, std::vector<int> taps = {1, 2}) {
  ADConfig c;
  c.variant = v;
  c.lambda1 = l1;
  c.lambda2 = l2;
  c.lambda3 = l3;
  c.penalty_taps = std::move(taps);
  c.delta = 3;
  c.tap_layer = "relu2";
  return c;
}

}  // namespace

TEST_SUITE("gradients") {
  TEST_CASE("micro model stays under a thousand parameters") {
    Fixture f;
    CHECK(f.attacked.parameter_count() <= 1000);
  }

  TEST_CASE("conv2d") {
    std::mt19937_64 rng(1);
    nn::Conv2d<double> same(2, 3, 3);
    check_layer(same, random_tensor({2, 5, 5}, 2, rng), rng);
    nn::Conv2d<double> strided(2, 3, 3, 2, 1);
    check_layer(strided, random_tensor({2, 6, 6}, 2, rng), rng);
    nn::Conv2d<double> pointwise(3, 2, 1, 2, 0, false);
    check_layer(pointwise, random_tensor({3, 4, 4}, 2, rng), rng);
  }

  TEST_CASE("dense, relu, pooling, flatten") {
    std::mt19937_64 rng(2);
    nn::Dense<double> dense(6, 4);
    check_layer(dense, random_tensor({6, 1, 1}, 3, rng, -1, 1), rng);
    nn::ReLU<double> relu;
    check_layer(relu, random_tensor({2, 3, 3}, 2, rng, -1, 1), rng);
    nn::MaxPool2d<double> pool(2);
    check_layer(pool, random_tensor({2, 4, 4}, 2, rng), rng);
    nn::GlobalAvgPool<double> gap;
    check_layer(gap, random_tensor({3, 3, 3}, 2, rng), rng);
    nn::Flatten<double> flat;
    check_layer(flat, random_tensor({2, 3, 3}, 2, rng), rng);
  }

  TEST_CASE("batch norm in training mode") {
    std::mt19937_64 rng(3);
    nn::BatchNorm<double> bn(3);
    check_layer(bn, random_tensor({3, 3, 3}, 4, rng, -1, 2), rng);
  }

  TEST_CASE("residual block") {
    std::mt19937_64 rng(4);
    nn::Sequential<double> main, shortcut, post;
    main.add("c", std::make_unique<nn::Conv2d<double>>(2, 2, 3, 1, 1, false)).add("bn", std::make_unique<nn::BatchNorm<double>>(2));
    post.add("r", std::make_unique<nn::ReLU<double>>());
    nn::Residual<double> block({}, std::move(main), std::move(shortcut), std::move(post), false);
    check_layer(block, random_tensor({2, 4, 4}, 3, rng, -1, 1), rng);
  }

  TEST_CASE("lure cross-entropy against logits") {
    std::mt19937_64 rng(5);
    Mat logits = random_matrix(4, 6, rng, -2, 2);
    Mat g;
    lure_loss_terms<double>(logits, 3, &g);
    CHECK(rel_error(g, central_difference(logits, [&] { return lure_loss_terms<double>(logits, 3); })) < kTol);
  }

  TEST_CASE("prediction alignment against logits, both orientations") {
    std::mt19937_64 rng(6);
    Mat logits = random_matrix(4, 5, rng, -2, 2);
    const Mat p = softmax_cols(random_matrix(3, 5, rng, -2, 2));
    for (bool reverse : {false, true}) {
      Mat g;
      kl_alignment_terms<double>(logits, p, reverse, &g);
      CHECK(g.row(3).isZero());
      CHECK(rel_error(g, central_difference(logits, [&] { return kl_alignment_terms<double>(logits, p, reverse); })) < kTol);
    }
  }

  TEST_CASE("attention alignment against maps") {
    std::mt19937_64 rng(7);
    Mat a = random_matrix(12, 4, rng);
    const Mat b = random_matrix(12, 4, rng);
    Mat g;
    attention_alignment_terms<double>(a, b, &g);
    CHECK(rel_error(g, central_difference(a, [&] { return attention_alignment_terms<double>(a, b); })) < kTol);
  }

  TEST_CASE("attention penalty against maps and logits") {
    std::mt19937_64 rng(8);
    Mat maps = random_matrix(10, 4, rng);
    Mat logits = random_matrix(5, 4, rng, -2, 2);
    for (const std::vector<int>& taps : {std::vector<int>{1}, std::vector<int>{2}, std::vector<int>{1, 2}}) {
      Mat gm, gl;
      attention_penalty_terms<double>(maps, logits, taps, &gm, &gl);
      const auto f = [&] { return attention_penalty_terms<double>(maps, logits, taps); };
      CHECK(rel_error(gm, central_difference(maps, f)) < kTol);
      CHECK(rel_error(gl, central_difference(logits, f)) < kTol);
    }
  }

  TEST_CASE("lure loss through the model") {
    Fixture f;
    f.check(only(Variant::kAD, 0, 0, 0), true);
  }

  TEST_CASE("prediction alignment through the model") {
    Fixture f;
    f.check(only(Variant::kVanilla, 1, 0, 0), false);
    ADConfig soft = only(Variant::kVanilla, 1, 0, 0);
    soft.hard_labels = false;
    f.check(soft, false);
    ADConfig rev = soft;
    rev.kl_reverse = true;
    f.check(rev, false);
  }

  TEST_CASE("attention alignment through the model") {
    Fixture f;
    f.check(only(Variant::kAA, 0, 1, 0), false);
  }

  TEST_CASE("attention penalty through the model") {
    Fixture f;
    f.check(only(Variant::kAA, 0, 0, 1, {1}), false);
    f.check(only(Variant::kAA, 0, 0, 1, {2}), false);
  }

  TEST_CASE("full objective through the model") {
    Fixture f;
    f.check(only(Variant::kAD, 0.7, 0.3, 0.2), true);
  }
}

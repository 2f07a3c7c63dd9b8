#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "testers.h"
#include "xspec/adam.h"
#include "xspec/common.h"
#include "xspec/rng.h"
#include "xspec/tensor.h"

using namespace xspec;
using ad::Tensor;

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("square function gradient at x=3") {
  Tensor x = Tensor::scalar(3.0f, true);
  Tensor y = ad::mul(x, x);
  ad::backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0f));
}

TEST_CASE("sin gradient at x=0") {
  Tensor x = Tensor::scalar(0.0f, true);
  ad::backward(ad::sin(x));
  CHECK(x.grad()[0] == doctest::Approx(1.0f));
}

namespace {

// One generator per primitive: maps the leaf to the op's raw output; the
// harness contracts it with a random covector. Inputs are kept away from
// kinks (relu/max at 0) and singularities (log/power at 0).
struct PrimitiveCase {
  const char* name;
  float lo, hi;
  std::function<Tensor(const Tensor&)> build;
  std::function<float(float)> sanitize;  // optional kink avoidance
};

const std::vector<PrimitiveCase>& primitive_cases() {
  static const std::vector<PrimitiveCase> cases = {
      {"add", -2.f, 2.f,
       [](const Tensor& x) { return ad::add(x, ad::mul(x, 0.5f)); }},
      {"sub", -2.f, 2.f,
       [](const Tensor& x) { return ad::sub(ad::mul(x, 2.0f), x); }},
      {"mul", -2.f, 2.f,
       [](const Tensor& x) { return ad::mul(x, ad::add(x, 1.5f)); }},
      {"div", 0.5f, 2.f,
       [](const Tensor& x) { return ad::div(ad::add(x, 3.0f), x); }},
      {"sin", -3.f, 3.f, [](const Tensor& x) { return ad::sin(x); }},
      {"cos", -3.f, 3.f, [](const Tensor& x) { return ad::cos(x); }},
      {"exp", -2.f, 2.f, [](const Tensor& x) { return ad::exp(x); }},
      {"log", 0.2f, 3.f, [](const Tensor& x) { return ad::log(x); }},
      {"power", 0.3f, 2.f,
       [](const Tensor& x) { return ad::power(x, 1.7f); }},
      {"reciprocal", 0.4f, 2.f,
       [](const Tensor& x) { return ad::reciprocal(x); }},
      {"relu", 0.1f, 2.f, [](const Tensor& x) { return ad::relu(x); }},
      {"softplus", -4.f, 4.f,
       [](const Tensor& x) { return ad::softplus(x); }},
      {"sigmoid", -4.f, 4.f,
       [](const Tensor& x) { return ad::sigmoid(x); }},
      {"max", -2.f, 2.f,
       [](const Tensor& x) {
         // Tie sits at x = 0.4; the generator below nudges samples off it
         // (FD across the kink is meaningless).
         return ad::max(x, ad::add(ad::mul(x, 0.5f), 0.2f));
       },
       [](float v) { return std::fabs(v - 0.4f) < 0.05f ? v + 0.12f : v; }},
      {"sum", -2.f, 2.f, [](const Tensor& x) { return ad::sum(x); }},
      {"mean", -2.f, 2.f, [](const Tensor& x) { return ad::mean(x); }},
      {"sum_axis", -2.f, 2.f,
       [](const Tensor& x) { return ad::sum_axis(ad::reshape(x, {4, 5}), 1); }},
      {"matmul", -1.f, 1.f,
       [](const Tensor& x) {
         Tensor a = ad::reshape(ad::slice(x, 0, 0, 12), {3, 4});
         Tensor b = ad::reshape(ad::slice(x, 0, 12, 8), {4, 2});
         return ad::matmul(a, b);
       }},
      {"transpose", -1.f, 1.f,
       [](const Tensor& x) {
         return ad::transpose(ad::reshape(ad::slice(x, 0, 0, 12), {3, 4}));
       }},
      {"concat", -1.f, 1.f,
       [](const Tensor& x) {
         Tensor a = ad::reshape(ad::slice(x, 0, 0, 6), {3, 2});
         Tensor b = ad::reshape(ad::slice(x, 0, 6, 9), {3, 3});
         return ad::concat({a, b}, 1);
       }},
      {"slice", -1.f, 1.f,
       [](const Tensor& x) {
         return ad::slice(ad::reshape(x, {4, 5}), 1, 1, 3);
       }},
      {"broadcast", -1.f, 1.f,
       [](const Tensor& x) {
         Tensor a = ad::reshape(ad::slice(x, 0, 0, 4), {4, 1});
         return ad::broadcast_to(a, {4, 6});
       }},
      {"reshape", -1.f, 1.f,
       [](const Tensor& x) { return ad::reshape(x, {5, 4}); }},
      {"cumsum_exclusive", -1.f, 1.f,
       [](const Tensor& x) {
         return ad::cumsum_exclusive(ad::reshape(x, {4, 5}));
       }},
  };
  return cases;
}

}  // namespace

TEST_CASE("every primitive matches central finite differences") {
  Rng rng(20240511);
  for (const auto& c : primitive_cases()) {
    CAPTURE(std::string(c.name));
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
      auto data = testers::random_values(rng, 20, c.lo, c.hi);
      if (c.sanitize)
        for (auto& v : data) v = c.sanitize(v);
      Tensor x = Tensor::from_data({20}, data, true);
      auto rep_out =
          testers::check_gradient(x, [&] { return c.build(x); }, rep + 1);
      worst = std::max(worst, rep_out.max_rel_err);
    }
    CHECK_MESSAGE(worst < 1e-3, std::string(c.name), " worst rel err ", worst);
  }
}

TEST_CASE("three-layer MLP gradients match finite differences") {
  Rng rng(7);
  const int in = 5, hidden = 8, out = 1;
  Tensor w1 = Tensor::from_data({in, hidden},
                                testers::random_values(rng, in * hidden, -0.5f, 0.5f), true);
  Tensor b1 = Tensor::from_data({1, hidden},
                                testers::random_values(rng, hidden, -0.1f, 0.1f), true);
  Tensor w2 = Tensor::from_data({hidden, hidden},
                                testers::random_values(rng, hidden * hidden, -0.5f, 0.5f), true);
  Tensor b2 = Tensor::from_data({1, hidden},
                                testers::random_values(rng, hidden, -0.1f, 0.1f), true);
  Tensor w3 = Tensor::from_data({hidden, out},
                                testers::random_values(rng, hidden * out, -0.5f, 0.5f), true);
  Tensor x = Tensor::from_data({4, in}, testers::random_values(rng, 4 * in, -1.f, 1.f));

  auto forward = [&] {
    Tensor h1 = ad::sigmoid(ad::badd(ad::matmul(x, w1), b1));
    Tensor h2 = ad::sigmoid(ad::badd(ad::matmul(h1, w2), b2));
    return ad::matmul(h2, w3);
  };

  int seed = 0;
  for (Tensor leaf : {w1, b1, w2, b2, w3}) {
    auto rep = testers::check_gradient(leaf, forward, ++seed);
    CHECK(rep.max_rel_err < 1e-3);
    // Graph is rebuilt per check; clear accumulated grads between leaves.
    for (Tensor t : {w1, b1, w2, b2, w3}) t.zero_grad();
  }
}

TEST_CASE("backward on a sum of independent subgraphs is additive") {
  Rng rng(99);
  Tensor x = Tensor::from_data({6}, testers::random_values(rng, 6, -1.f, 1.f), true);
  Tensor y = Tensor::from_data({6}, testers::random_values(rng, 6, -1.f, 1.f), true);

  Tensor fx = ad::sum(ad::mul(x, ad::sin(x)));
  Tensor fy = ad::sum(ad::exp(ad::mul(y, 0.5f)));
  ad::backward(ad::add(fx, fy));
  std::vector<float> gx_joint(x.grad().begin(), x.grad().end());
  std::vector<float> gy_joint(y.grad().begin(), y.grad().end());

  x.zero_grad();
  y.zero_grad();
  ad::backward(ad::sum(ad::mul(x, ad::sin(x))));
  ad::backward(ad::sum(ad::exp(ad::mul(y, 0.5f))));
  for (int i = 0; i < 6; ++i) {
    CHECK(x.grad()[i] == doctest::Approx(gx_joint[i]).epsilon(1e-6));
    CHECK(y.grad()[i] == doctest::Approx(gy_joint[i]).epsilon(1e-6));
  }
}

TEST_CASE("repeated backward with grad reset is bitwise identical") {
  Rng rng(512);
  Tensor w = Tensor::from_data({8, 8}, testers::random_values(rng, 64, -1.f, 1.f), true);
  Tensor x = Tensor::from_data({4, 8}, testers::random_values(rng, 32, -1.f, 1.f));

  auto run = [&] {
    w.zero_grad();
    Tensor h = ad::softplus(ad::matmul(x, w));
    ad::backward(ad::sum(ad::mul(h, h)));
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  auto g1 = run();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (size_t i = 0; i < g1.size(); ++i) {
    CHECK(std::memcmp(&g1[i], &g2[i], sizeof(float)) == 0);
  }
}

TEST_CASE("backward rejects non-scalar roots") {
  Tensor x = Tensor::from_data({2}, {1.f, 2.f}, true);
  CHECK_THROWS_AS(ad::backward(ad::mul(x, x)), xspec::LogicError);
}

TEST_CASE("backward diagnoses non-finite roots with the op name") {
  Tensor x = Tensor::scalar(0.0f, true);
  Tensor y = ad::reciprocal(x);  // inf
  bool threw = false;
  try {
    ad::backward(y);
  } catch (const xspec::NumericError& e) {
    threw = true;
    CHECK(std::string(e.what()).find("reciprocal") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  Tensor p = Tensor::from_data({3}, {1.f, -2.f, 3.f}, true);
  std::vector<Tensor> params{p};
  auto st = ad::make_adam_state(params, 0.1f);
  for (int i = 0; i < 5; ++i) {
    p.grad_mut();  // allocated, all zero
    ad::adam_step(params, st);
  }
  CHECK(p.values()[0] == 1.f);
  CHECK(p.values()[1] == -2.f);
  CHECK(p.values()[2] == 3.f);
  CHECK(st.step_count == 5);
}

TEST_CASE("adam: closed-form first step") {
  Tensor p = Tensor::scalar(0.0f, true);
  std::vector<Tensor> params{p};
  auto st = ad::make_adam_state(params, 0.1f);
  p.grad_mut()[0] = 1.0f;
  ad::adam_step(params, st);
  // Bias correction gives mhat = vhat = 1 on step one.
  CHECK(p.values()[0] == doctest::Approx(-0.1f).epsilon(1e-5));
}

TEST_CASE("adam: ten steps on p^2 strictly decrease the objective") {
  Tensor p = Tensor::scalar(1.0f, true);
  std::vector<Tensor> params{p};
  auto st = ad::make_adam_state(params, 0.05f);
  float prev = 1.0f;
  for (int i = 0; i < 10; ++i) {
    p.zero_grad();
    Tensor loss = ad::mul(p, p);
    ad::backward(loss);
    ad::adam_step(params, st);
    const float now = p.values()[0] * p.values()[0];
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("adam: shape mismatch is fatal") {
  Tensor p = Tensor::from_data({2}, {0.f, 0.f}, true);
  Tensor q = Tensor::from_data({3}, {0.f, 0.f, 0.f}, true);
  std::vector<Tensor> params{p};
  auto st = ad::make_adam_state(params, 0.1f);
  std::vector<Tensor> wrong{q};
  CHECK_THROWS_AS(ad::adam_step(wrong, st), xspec::LogicError);
}

TEST_SUITE_END();

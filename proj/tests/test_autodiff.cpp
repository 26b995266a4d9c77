#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "grad_check.hpp"
#include "tmmnn/optim.hpp"
#include "tmmnn/tensor.hpp"

using namespace tmmnn;

namespace {

template <typename S>
MatT<S> random_mat(Index r, Index c, std::mt19937_64& rng, S lo = S(-1),
                   S hi = S(1)) {
  std::uniform_real_distribution<double> dist{double(lo), double(hi)};
  MatT<S> m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = S(dist(rng));
  return m;
}

// Two-layer MLP loss used by the gradient cross-checks: params are
// {W1, b1, W2, b2, X}; loss = CE(relu(X W1 + b1) W2 + b2, targets).
template <typename S>
TensorPtrT<S> two_layer_loss(TapeT<S>& tape,
                             const std::vector<TensorPtrT<S>>& p,
                             const std::vector<int>& targets) {
  auto h = relu(tape, add_row(tape, matmul(tape, p[4], p[0]), p[1]));
  auto logits = add_row(tape, matmul(tape, h, p[2]), p[3]);
  return softmax_cross_entropy(tape, logits, targets);
}

}  // namespace

TEST_CASE("matmul identity and scalar cases") {
  Tape tape;
  std::mt19937_64 rng(7);
  auto a = make_leaf<Real>(random_mat<Real>(3, 3, rng));
  auto eye = make_leaf<Real>(Mat::Identity(3, 3));
  auto out = matmul(tape, eye, a);
  CHECK(out->value.isApprox(a->value));

  auto x = make_scalar<Real>(2.0f);
  auto y = make_scalar<Real>(3.0f);
  CHECK(matmul(tape, x, y)->value(0, 0) == 6.0f);
}

TEST_CASE("matmul matches triple-loop reference") {
  std::mt19937_64 rng(11);
  Mat a = random_mat<Real>(5, 4, rng);
  Mat b = random_mat<Real>(4, 3, rng);
  Tape tape;
  Mat got = matmul(tape, make_leaf<Real>(a), make_leaf<Real>(b))->value;

  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (Index k = 0; k < 4; ++k) acc += double(a(i, k)) * double(b(k, j));
      CHECK(std::abs(double(got(i, j)) - acc) < 1e-6);
    }
  }
}

TEST_CASE("matmul shape mismatch raises dimension error") {
  Tape tape;
  std::mt19937_64 rng(3);
  auto a = make_leaf<Real>(random_mat<Real>(2, 3, rng));
  auto b = make_leaf<Real>(random_mat<Real>(2, 3, rng));
  CHECK_THROWS_AS((void)matmul(tape, a, b), DimensionError);
}

TEST_CASE("elementwise kinds") {
  Tape tape;
  Mat v(1, 3);
  v << -1.0f, 0.0f, 2.0f;
  auto r = relu(tape, make_leaf<Real>(v));
  CHECK(r->value(0, 0) == 0.0f);
  CHECK(r->value(0, 1) == 0.0f);
  CHECK(r->value(0, 2) == 2.0f);

  std::mt19937_64 rng(5);
  Mat x = random_mat<Real>(2, 4, rng);
  auto sum_id = add(tape, make_leaf<Real>(x), make_leaf<Real>(Mat::Zero(2, 4)));
  CHECK(sum_id->value == x);

  Mat c(1, 3);
  c << -0.5f, 0.3f, 1.7f;
  auto clipped = clip01(tape, make_leaf<Real>(c));
  CHECK(clipped->value(0, 0) == 0.0f);
  CHECK(clipped->value(0, 1) == 0.3f);
  CHECK(clipped->value(0, 2) == 1.0f);

  auto diff = sub(tape, make_leaf<Real>(x), make_leaf<Real>(x));
  CHECK(diff->value.isZero(0));
  auto prod = mul(tape, make_leaf<Real>(x), make_leaf<Real>(Mat::Ones(2, 4)));
  CHECK(prod->value == x);
  auto scaled = scale(tape, make_leaf<Real>(x), 2.0f);
  CHECK(scaled->value == Mat(2 * x));

  auto bad = make_leaf<Real>(Mat::Zero(3, 3));
  CHECK_THROWS_AS((void)add(tape, make_leaf<Real>(x), bad), DimensionError);
}

TEST_CASE("softmax cross entropy values") {
  Tape tape;
  // uniform logits over 3 classes -> ln 3 for any target
  auto uniform = make_leaf<Real>(Mat::Constant(1, 3, 0.4f));
  auto loss = softmax_cross_entropy(tape, uniform, {2});
  CHECK(double(loss->value(0, 0)) == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  // saturated target logit -> loss below 1e-9
  Mat sat = Mat::Zero(1, 4);
  sat(0, 1) = 30.0f;
  auto sloss = softmax_cross_entropy(tape, make_leaf<Real>(sat), {1});
  CHECK(double(sloss->value(0, 0)) < 1e-9);

  CHECK_THROWS_AS(
      (void)softmax_cross_entropy(tape, make_leaf<Real>(Mat::Zero(1, 3)), {3}),
      IndexError);
}

TEST_CASE("softmax cross entropy matches exp-normalize reference") {
  std::mt19937_64 rng(13);
  Mat logits = random_mat<Real>(4, 5, rng, -3.0f, 3.0f);
  std::vector<int> targets = {0, 3, 2, 4};
  Tape tape;
  double got =
      double(softmax_cross_entropy(tape, make_leaf<Real>(logits), targets)
                 ->value(0, 0));

  double acc = 0.0;
  for (Index i = 0; i < 4; ++i) {
    double denom = 0.0;
    for (Index j = 0; j < 5; ++j) denom += std::exp(double(logits(i, j)));
    acc += -std::log(std::exp(double(logits(i, targets[size_t(i)]))) / denom);
  }
  CHECK(std::abs(got - acc / 4.0) < 1e-6);
}

TEST_CASE("mse values and loop oracle") {
  Tape tape;
  std::mt19937_64 rng(17);
  Mat x = random_mat<Real>(3, 3, rng);
  CHECK(mse(tape, make_leaf<Real>(x), make_leaf<Real>(x))->value(0, 0) == 0.0f);

  auto a = make_scalar<Real>(0.0f);
  auto b = make_scalar<Real>(2.0f);
  CHECK(mse(tape, a, b)->value(0, 0) == 4.0f);

  Mat y = random_mat<Real>(3, 3, rng);
  double got = double(mse(tape, make_leaf<Real>(x), make_leaf<Real>(y))->value(0, 0));
  double acc = 0.0;
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) {
      double d = double(x(i, j)) - double(y(i, j));
      acc += d * d;
    }
  CHECK(std::abs(got - acc / 9.0) < 1e-7);
}

TEST_CASE("backward analytic cases") {
  // loss = x^2 at x = 3 -> grad 6
  auto x = make_scalar<Real>(3.0f, true);
  Tape tape;
  auto loss = mul(tape, x, x);
  tape.backward(loss);
  CHECK(x->grad(0, 0) == doctest::Approx(6.0f));

  // loss independent of y -> grad stays zero
  auto y = make_scalar<Real>(4.0f, true);
  Tape t2;
  auto z = make_scalar<Real>(2.0f, true);
  auto l2 = mul(t2, z, z);
  t2.backward(l2);
  y->ensure_grad();
  CHECK(y->grad(0, 0) == 0.0f);

  // non-scalar loss is a contract violation
  Tape t3;
  auto m = make_leaf<Real>(Mat::Ones(2, 2), true);
  auto out = add(t3, m, m);
  CHECK_THROWS_AS(t3.backward(out), ContractError);
}

TEST_CASE("backward is replayable") {
  std::mt19937_64 rng(23);
  auto w = make_leaf<Real>(random_mat<Real>(3, 2, rng), true);
  auto x = make_leaf<Real>(random_mat<Real>(1, 3, rng), false);
  Tape tape;
  auto loss = sum(tape, relu(tape, matmul(tape, x, w)));
  tape.backward(loss);
  Mat first = w->grad;
  w->zero_grad();
  tape.zero_grad();
  tape.backward(loss);
  CHECK(std::memcmp(first.data(), w->grad.data(),
                    sizeof(Real) * size_t(first.size())) == 0);
}

TEST_CASE("two-layer network gradients match finite differences") {
  // Five seeded networks; float backward against a double-precision
  // central-difference oracle over all ten parameter tensors.
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    std::mt19937_64 rng(seed);
    std::vector<Mat> leaves = {
        random_mat<Real>(6, 5, rng, -0.8f, 0.8f),  // W1
        random_mat<Real>(1, 5, rng, -0.5f, 0.5f),  // b1
        random_mat<Real>(5, 4, rng, -0.8f, 0.8f),  // W2
        random_mat<Real>(1, 4, rng, -0.5f, 0.5f),  // b2
        random_mat<Real>(3, 6, rng, -1.0f, 1.0f),  // X
    };
    std::vector<int> targets = {1, 0, 3};
    auto res = testing::check_gradients<Real>(
        [&](Tape& t, const std::vector<TensorPtr>& p) {
          return two_layer_loss<Real>(t, p, targets);
        },
        [&](TapeT<double>& t, const std::vector<TensorPtrT<double>>& p) {
          return two_layer_loss<double>(t, p, targets);
        },
        leaves);
    CAPTURE(seed);
    CAPTURE(res.max_rel_err);
    CHECK(res.ok);
  }
}

TEST_CASE("per-op gradients match finite differences on 5 seeds") {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    std::mt19937_64 rng(seed);
    Mat a = random_mat<Real>(3, 4, rng);
    Mat b = random_mat<Real>(3, 4, rng);
    Mat c = random_mat<Real>(4, 2, rng);
    Mat w = random_mat<Real>(1, 4, rng);
    CAPTURE(seed);

    // matmul + sum
    auto r1 = testing::check_gradients<Real>(
        [](Tape& t, const std::vector<TensorPtr>& p) {
          return sum(t, matmul(t, p[0], p[1]));
        },
        [](TapeT<double>& t, const std::vector<TensorPtrT<double>>& p) {
          return sum(t, matmul(t, p[0], p[1]));
        },
        {a, c});
    CHECK(r1.ok);

    // mixed elementwise chain: mse(clip01(relu(a*b + w_row)), b)
    auto r2 = testing::check_gradients<Real>(
        [](Tape& t, const std::vector<TensorPtr>& p) {
          auto z = add_row(t, mul(t, p[0], p[1]), p[2]);
          return mse(t, clip01(t, relu(t, z)), p[1]);
        },
        [](TapeT<double>& t, const std::vector<TensorPtrT<double>>& p) {
          auto z = add_row(t, mul(t, p[0], p[1]), p[2]);
          return mse(t, clip01(t, relu(t, z)), p[1]);
        },
        {a, b, w});
    CHECK(r2.ok);

    // scale + sub + reciprocal of sum of squares (trigger-style penalty)
    auto r3 = testing::check_gradients<Real>(
        [](Tape& t, const std::vector<TensorPtr>& p) {
          auto d = sub(t, scale(t, p[0], 1.7f), p[1]);
          return reciprocal(t, sum_squares(t, d));
        },
        [](TapeT<double>& t, const std::vector<TensorPtrT<double>>& p) {
          auto d = sub(t, scale(t, p[0], 1.7), p[1]);
          return reciprocal(t, sum_squares(t, d));
        },
        {a, b});
    CHECK(r3.ok);

    // softmax cross entropy on logits
    std::vector<int> targets = {1, 0, 1};
    Mat logits = random_mat<Real>(3, 3, rng, -2.0f, 2.0f);
    auto r4 = testing::check_gradients<Real>(
        [&](Tape& t, const std::vector<TensorPtr>& p) {
          return softmax_cross_entropy(t, p[0], targets);
        },
        [&](TapeT<double>& t, const std::vector<TensorPtrT<double>>& p) {
          return softmax_cross_entropy(t, p[0], targets);
        },
        {logits});
    CHECK(r4.ok);
  }
}

TEST_CASE("adam step behaviour") {
  // zero gradient leaves parameters unchanged
  auto p = make_leaf<Real>(Mat::Constant(2, 2, 1.5f), true);
  p->ensure_grad();
  std::vector<TensorPtr> params = {p};
  auto st = AdamState::for_params(params, 0.01f);
  adam_step(params, st);
  CHECK(p->value == Mat::Constant(2, 2, 1.5f));
  CHECK(st.step == 1);

  // first step moves by ~lr * g/(|g| + eps)
  auto q = make_scalar<Real>(0.0f, true);
  q->ensure_grad();
  q->grad(0, 0) = 0.37f;
  std::vector<TensorPtr> qs = {q};
  auto st2 = AdamState::for_params(qs, 0.01f);
  adam_step(qs, st2);
  CHECK(double(q->value(0, 0)) ==
        doctest::Approx(-0.01 * 0.37 / (0.37 + 1e-8)).epsilon(1e-4));

  // 200 steps on f(w) = (w-5)^2 from w=0 with lr 0.1 converges near 5
  auto w = make_scalar<Real>(0.0f, true);
  std::vector<TensorPtr> ws = {w};
  auto st3 = AdamState::for_params(ws, 0.1f);
  for (int i = 0; i < 200; ++i) {
    w->zero_grad();
    Tape tape;
    auto target = make_scalar<Real>(5.0f);
    auto d = sub(tape, w, target);
    auto loss = mul(tape, d, d);
    tape.backward(loss);
    adam_step(ws, st3);
  }
  CHECK(std::abs(double(w->value(0, 0)) - 5.0) < 0.5);
}

TEST_CASE("finite difference oracle basics") {
  // f(x) = x^2 at 3, h = 1e-3: central differences are exact for quadratics
  MatT<double> x0(1, 1);
  x0(0, 0) = 3.0;
  auto g = finite_diff_grad<double>(
      [](const MatT<double>& x) { return x(0, 0) * x(0, 0); }, x0, 1e-3);
  CHECK(std::abs(g(0, 0) - 6.0) < 1e-6);

  auto gc = finite_diff_grad<double>([](const MatT<double>&) { return 2.5; },
                                     x0, 1e-3);
  CHECK(gc(0, 0) == 0.0);

  CHECK_THROWS_AS((void)finite_diff_grad<double>(
                      [](const MatT<double>& x) { return x(0, 0); }, x0, 0.0),
                  ContractError);
}

TEST_CASE("operations are bitwise deterministic") {
  std::mt19937_64 rng(31);
  Mat a = random_mat<Real>(8, 8, rng);
  Mat b = random_mat<Real>(8, 8, rng);
  Tape t1, t2;
  Mat m1 = matmul(t1, make_leaf<Real>(a), make_leaf<Real>(b))->value;
  Mat m2 = matmul(t2, make_leaf<Real>(a), make_leaf<Real>(b))->value;
  CHECK(std::memcmp(m1.data(), m2.data(), sizeof(Real) * size_t(m1.size())) == 0);

  std::vector<int> targets = {0, 1, 2, 3, 4, 5, 6, 7};
  Mat c1 = softmax_cross_entropy(t1, make_leaf<Real>(a), targets)->value;
  Mat c2 = softmax_cross_entropy(t2, make_leaf<Real>(a), targets)->value;
  CHECK(c1(0, 0) == c2(0, 0));
}

TEST_CASE("no NaN or Inf for inputs up to 1e3") {
  std::mt19937_64 rng(37);
  Mat big = random_mat<Real>(4, 6, rng, -1e3f, 1e3f);
  Mat big2 = random_mat<Real>(4, 6, rng, -1e3f, 1e3f);
  Mat bigc = random_mat<Real>(6, 4, rng, -1e3f, 1e3f);
  Tape tape;
  auto a = make_leaf<Real>(big);
  auto b = make_leaf<Real>(big2);
  CHECK(matmul(tape, a, make_leaf<Real>(bigc))->value.allFinite());
  CHECK(add(tape, a, b)->value.allFinite());
  CHECK(sub(tape, a, b)->value.allFinite());
  CHECK(mul(tape, a, b)->value.allFinite());
  CHECK(relu(tape, a)->value.allFinite());
  CHECK(clip01(tape, a)->value.allFinite());
  CHECK(mse(tape, a, b)->value.allFinite());
  // saturated logits rely on max-subtraction to stay finite
  std::vector<int> targets = {0, 1, 2, 3};
  CHECK(softmax_cross_entropy(tape, a, targets)->value.allFinite());
}

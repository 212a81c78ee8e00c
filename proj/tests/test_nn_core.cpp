#include <doctest.h>

#include <cmath>
#include <random>

#include "ccm/nn.hpp"
#include "ccm/optim.hpp"
#include "ccm/parallel.hpp"
#include "oracles.hpp"

using namespace ccm;

namespace {

Tensor random_tensor(Shape s, uint64_t seed, double stddev = 1.0) {
  Tensor t(std::move(s));
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& v : t.storage()) v = static_cast<float>(n(rng));
  return t;
}

template <class T>
BasicTensor<T> random_t(Shape s, uint64_t seed) {
  BasicTensor<T> t(std::move(s));
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.storage()) v = static_cast<T>(n(rng));
  return t;
}

}  // namespace

TEST_CASE("forward with all-zero parameters is all-zero") {
  TinyUNet<float> net({}, 3);
  net.params().zero_values();
  Var x(random_tensor({2, 1, 16, 16}, 1));
  std::vector<int> t{10, 500}, y{0, 2};
  auto out = net.forward(x, t, y);
  CHECK(out.shape() == Shape{2, 1, 16, 16});
  for (float v : out.value().data()) CHECK(v == 0.0f);
}

TEST_CASE("forward is deterministic for a fixed seed") {
  TinyUNet<float> a({}, 42), b({}, 42);
  Var x(random_tensor({3, 1, 16, 16}, 2));
  std::vector<int> t{0, 999, 1000}, y{0, 1, 3};
  CHECK(a.forward(x, t, y).value() == b.forward(x, t, y).value());
  CHECK(a.forward(x, t, y).value() == a.forward(x, t, y).value());
}

TEST_CASE("forward rejects bad inputs") {
  TinyUNet<float> net({}, 0);
  std::vector<int> t{1}, y{0};
  CHECK_THROWS_AS(net.forward(Var(Tensor({1, 1, 8, 8})), t, y), ShapeError);
  CHECK_THROWS_AS(net.forward(Var(Tensor({1, 2, 16, 16})), t, y), ShapeError);
  Tensor bad({1, 1, 16, 16});
  bad[5] = std::nanf("");
  CHECK_THROWS_AS(net.forward(Var(bad), t, y), NumericError);
  std::vector<int> bad_t{1001};
  CHECK_THROWS_AS(net.forward(Var(Tensor({1, 1, 16, 16})), bad_t, y), RangeError);
  std::vector<int> bad_y{4};
  CHECK_THROWS_AS(net.forward(Var(Tensor({1, 1, 16, 16})), t, bad_y), RangeError);
}

TEST_CASE("3x3 convolution matches a direct scalar convolution") {
  ParameterSet ps;
  Rng rng(0);
  Conv2d<float> conv(ps, "c", 2, 3, 3, rng);
  // Hand-set kernel: small integers so the oracle is exact in float.
  for (int64_t i = 0; i < conv.weight.numel(); ++i)
    conv.weight.node()->value[i] = static_cast<float>((i * 7) % 5 - 2);
  for (int64_t i = 0; i < 3; ++i) conv.bias.node()->value[i] = 0.5f * static_cast<float>(i);
  Tensor x({1, 2, 4, 4});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(i % 6) - 2.5f;
  auto y = conv(Var(x));
  std::vector<double> xd(x.storage().begin(), x.storage().end());
  std::vector<double> kd(conv.weight.value().storage().begin(), conv.weight.value().storage().end());
  auto ref = oracle::direct_conv(xd, 2, 4, 4, kd, 3, 3, {0.0, 0.5, 1.0});
  REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
  for (size_t i = 0; i < ref.size(); ++i) CHECK(y.value()[static_cast<int64_t>(i)] == doctest::Approx(ref[i]));
}

TEST_CASE("backward of sum gives all-ones") {
  Var p(random_tensor({3, 4}, 5), true);
  backward(sum(p));
  for (float g : p.grad().data()) CHECK(g == 1.0f);
}

TEST_CASE("l1 distance gradient is sign(a - b) off the kink") {
  Var a(Tensor({1, 4}, {1.f, -2.f, 3.f, 0.5f}), true);
  Var b(Tensor({1, 4}, {0.f, 1.f, 2.f, 2.5f}));
  auto d = distance_per_sample(a, b, DistanceKind::L1);
  backward(sum(scale(d, 4.0f)));  // undo the per-element mean
  const float expect[] = {1.f, -1.f, 1.f, -1.f};
  for (int i = 0; i < 4; ++i) CHECK(a.grad()[i] == expect[i]);
}

TEST_CASE("backward on an untracked scalar is a usage error") {
  Var c(Tensor(Shape{}, {1.0f}));
  CHECK_THROWS_AS(backward(c), UsageError);
  Var p(Tensor({2}), false);
  CHECK_THROWS_AS(backward(sum(p)), UsageError);
  CHECK_THROWS_AS(backward(Var(Tensor({2}), true)), UsageError);
}

TEST_CASE("TinyUNet gradients match float64 central differences") {
  TinyUNet<double> net({}, 11);
  auto x = Var64(random_t<double>({2, 1, 16, 16}, 3));
  auto target = Var64(random_t<double>({2, 1, 16, 16}, 4));
  std::vector<int> t{120, 640}, y{1, 3};
  auto loss_fn = [&] { return mse(net.forward(x, t, y), target); };
  auto res = oracle::finite_difference_check(net.params(), loss_fn, 100, 1e-3, 9);
  for (const auto& [type, err] : res.max_rel_error) {
    INFO("layer type " << type << " checked " << res.coords_checked[type]);
    CHECK(err <= 1e-3);
  }
  CHECK(res.coords_checked["conv3x3"] >= 100);
  CHECK(res.coords_checked["linear"] >= 100);
  CHECK(res.coords_checked["groupnorm"] >= 100);
  CHECK(res.coords_checked["embedding"] >= 100);
  CHECK(res.coords_checked["conv1x1"] >= 100);
}

TEST_CASE("MLP gradients match float64 central differences") {
  MlpBackbone<double> net({}, 5);
  auto x = Var64(random_t<double>({4, 2}, 3));
  auto target = Var64(random_t<double>({4, 2}, 4));
  std::vector<int> t{10, 200, 500, 990}, y{0, 0, 0, 0};
  auto loss_fn = [&] { return mse(net.forward(x, t, y), target); };
  auto res = oracle::finite_difference_check(net.params(), loss_fn, 100, 1e-3, 1);
  for (const auto& [type, err] : res.max_rel_error) CHECK(err <= 1e-3);
}

TEST_CASE("adam: zero gradient on fresh state leaves parameters unchanged") {
  ParameterSet ps;
  auto p = ps.add("p", random_tensor({5}, 1));
  const Tensor before = p.value();
  p.node()->grad = Tensor({5});
  AdamState st;
  adam_step(ps, st);
  CHECK(p.value() == before);
  CHECK(st.step == 1);
}

TEST_CASE("adam: one step from p=1, g=1, lr=0.1") {
  ParameterSet ps;
  auto p = ps.add("p", Tensor({1}, {1.0f}));
  p.node()->grad = Tensor({1}, {1.0f});
  AdamState st;
  st.cfg.lr = 0.1;
  adam_step(ps, st);
  // m = 0.1, v = 0.001, m_hat = v_hat = 1, p' = 1 - 0.1 * 1 / (1 + 1e-8).
  const double expect = 1.0 - 0.1 / (1.0 + 1e-8);
  CHECK(p.value()[0] == static_cast<float>(expect));
}

TEST_CASE("adam: NaN gradient aborts and names the parameter") {
  ParameterSet ps;
  auto p = ps.add("enc.w", Tensor({2}, {1.f, 2.f}));
  p.node()->grad = Tensor({2}, {0.f, std::nanf("")});
  AdamState st;
  try {
    adam_step(ps, st);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("enc.w") != std::string::npos);
  }
  CHECK(p.value()[0] == 1.f);
}

TEST_CASE("adam trajectories are reproducible") {
  auto run = [] {
    TinyUNet<float> net({}, 8);
    AdamState st;
    Var x(random_tensor({2, 1, 16, 16}, 1)), tgt(random_tensor({2, 1, 16, 16}, 2));
    std::vector<int> t{5, 900}, y{0, 1};
    for (int i = 0; i < 3; ++i) {
      net.params().zero_grad();
      backward(mse(net.forward(x, t, y), tgt));
      adam_step(net.params(), st);
    }
    return net.params().hash();
  };
  CHECK(run() == run());
}

TEST_CASE("ema update") {
  ParameterSet teacher(Role::Teacher), student;
  teacher.add("w", Tensor({2}, {1.0f, -4.0f}));
  student.add("w", Tensor({2}, {3.0f, 0.25f}));
  SUBCASE("mu = 0 copies the student") {
    ema_update(teacher, student, 0.0);
    CHECK(teacher.at("w").value() == student.at("w").value());
  }
  SUBCASE("mu = 1 keeps the teacher") {
    ema_update(teacher, student, 1.0);
    CHECK(teacher.at("w").value()[0] == 1.0f);
    CHECK(teacher.at("w").value()[1] == -4.0f);
  }
  SUBCASE("mu = 0.95, 1 -> 3 gives 1.1") {
    ema_update(teacher, student, 0.95);
    CHECK(teacher.at("w").value()[0] == doctest::Approx(1.1).epsilon(1e-6));
  }
  SUBCASE("name mismatch is structural") {
    ParameterSet other;
    other.add("v", Tensor({2}));
    CHECK_THROWS_AS(ema_update(teacher, other, 0.5), StructuralError);
  }
}

TEST_CASE("ema fixed point: equal teacher and student is identity for any mu") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ParameterSet teacher(Role::Teacher), student;
  teacher.add("w", random_tensor({257}, 7, 10.0));
  student.add("w", teacher.at("w").value());
  for (int trial = 0; trial < 50; ++trial) {
    ema_update(teacher, student, u(rng));
    CHECK(teacher.at("w").value() == student.at("w").value());
  }
}

TEST_CASE("teacher parameter sets cannot be made trainable") {
  ParameterSet teacher(Role::Teacher);
  CHECK_THROWS_AS(teacher.set_trainable(true), UsageError);
}

TEST_CASE("stopgrad: teacher branch receives no gradient") {
  TinyUNet<float> student({}, 1), teacher({}, 1, Role::Teacher);
  Var x(random_tensor({2, 1, 16, 16}, 3));
  std::vector<int> t{50, 60}, y{0, 1};
  auto s = student.forward(x, t, y);
  auto tt = teacher.forward(x, t, y);
  Var target;
  {
    NoGradGuard ng;
    target = student.forward(x, t, y);
  }
  backward(add(mse(s, tt), mse(s, target)));
  CHECK_FALSE(teacher.params().any_grad());
  CHECK(student.params().any_grad());
  CHECK_NOTHROW(require_no_grad(teacher.params(), "teacher"));
  CHECK_THROWS_AS(require_no_grad(student.params(), "student"), InvariantViolation);
}

TEST_CASE("zero_init couplings") {
  ParameterSet ps;
  Rng rng(1);
  Conv2d<float> zc(ps, "zc", 4, 4, 1, rng, Init::Zero);
  Var x(random_tensor({2, 4, 8, 8}, 2));
  SUBCASE("any input maps to zero, and a residual sum is unchanged") {
    auto out = zc(x);
    for (float v : out.value().data()) CHECK(v == 0.0f);
    Var base(random_tensor({2, 4, 8, 8}, 9));
    CHECK(add(base, out).value() == base.value());
  }
  SUBCASE("zero_init resets a trained layer") {
    Conv2d<float> c(ps, "c", 4, 4, 1, rng);
    zero_init(ps, "c.");
    const auto out = c(x);
    for (float v : out.value().data()) CHECK(v == 0.0f);
  }
  SUBCASE("after one nonzero gradient step the output can be nonzero") {
    Var target(random_tensor({2, 4, 8, 8}, 4));
    backward(mse(zc(x), target));
    AdamState st;
    adam_step(ps, st);
    const auto out = zc(x);
    bool nonzero = false;
    for (float v : out.value().data()) nonzero = nonzero || v != 0.0f;
    CHECK(nonzero);
  }
}

TEST_CASE("forward and backward are bit-identical across thread counts") {
  auto run = [](int threads) {
    set_worker_threads(threads);
    TinyUNet<float> net({}, 21);
    Var x(random_tensor({5, 1, 16, 16}, 1)), tgt(random_tensor({5, 1, 16, 16}, 2));
    std::vector<int> t{1, 100, 400, 800, 1000}, y{0, 1, 2, 3, 0};
    auto out = net.forward(x, t, y);
    backward(mse(out, tgt));
    AdamState st;
    adam_step(net.params(), st);
    return std::make_pair(out.value(), net.params().hash());
  };
  const int saved = worker_threads();
  auto a = run(1), b = run(4), c = run(3);
  set_worker_threads(saved);
  CHECK(a.first == b.first);
  CHECK(a.first == c.first);
  CHECK(a.second == b.second);
  CHECK(a.second == c.second);
}

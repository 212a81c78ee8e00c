#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ccm/consistency.hpp"
#include "ccm/data.hpp"

using namespace ccm;

namespace {

NoiseSchedule default_schedule(int N = 200) {
  return enforce_zero_terminal_snr(make_schedule(1000, 1e-4, 2e-2, N));
}

// A backbone output that makes skip(t) x + out(t) F = g(x): F = (g(x) - skip x) / out,
// per sample, in double.
template <class G>
EpsFn net_for(const NoiseSchedule& s, G g) {
  return [&s, g](const Var& x, std::span<const int> t, std::span<const int>) {
    Tensor out(x.shape());
    const int64_t inner = x.numel() / x.dim(0);
    for (int64_t b = 0; b < x.dim(0); ++b) {
      const auto c = cm_scalings(s, t[static_cast<size_t>(b)]);
      for (int64_t i = b * inner; i < (b + 1) * inner; ++i)
        out[i] = static_cast<float>((g(x.value()[i]) - c.skip * x.value()[i]) / c.out);
    }
    return Var(out);
  };
}

Batch random_batch(int64_t n, uint64_t seed) {
  Rng rng(seed);
  Batch b{randn({n, 1, 16, 16}, rng), {}};
  for (int64_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(i % 3));
  return b;
}

}  // namespace

TEST_CASE("cm_scalings") {
  auto s = default_schedule();
  const double sd = 0.5;
  auto c0 = cm_scalings(s, 0);
  CHECK(c0.skip == 1.0);
  CHECK(c0.out == 0.0);
  for (int n : {1, 2, 50, 100, 199}) {
    const int t = s.t(n);
    const double r = s.sqrt_one_minus(t) / s.sqrt_alpha_bar(t);
    auto c = cm_scalings(s, t);
    CHECK(c.skip == doctest::Approx(sd * sd / (r * r + sd * sd)).epsilon(1e-12));
    CHECK(c.out == doctest::Approx(sd * r / std::sqrt(r * r + sd * sd)).epsilon(1e-12));
  }
  // r -> infinity at the zero-SNR terminal.
  auto cT = cm_scalings(s, 1000);
  CHECK(cT.skip == 0.0);
  CHECK(cT.out == doctest::Approx(sd));
}

TEST_CASE("boundary condition holds bit-exactly") {
  auto s = default_schedule();
  TinyUNet<float> net({}, 21);
  ConsistencyFunction f(eps_fn(net), s);
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor x = randn({1, 1, 16, 16}, rng);
    const std::vector<int> t{0}, y{trial % 4};
    CHECK(f(Var(x), t, y).value() == x);
  }
  // Mixed batch: the boundary sample still copies exactly.
  const Tensor x = randn({3, 1, 16, 16}, rng);
  const std::vector<int> t{0, s.t(100), 0}, y{0, 1, 2};
  auto out = f(Var(x), t, y).value();
  for (int64_t i = 0; i < 256; ++i) {
    CHECK(out[i] == x[i]);
    CHECK(out[512 + i] == x[512 + i]);
  }
}

TEST_CASE("consistency function basics") {
  auto s = default_schedule();
  TinyUNet<float> net({}, 3);
  Rng rng(9);
  const Tensor x = randn({2, 1, 16, 16}, rng);
  const std::vector<int> t{s.t(40), s.t(170)}, y{0, 1};
  SUBCASE("zero backbone gives skip(t) x") {
    TinyUNet<float> zero({}, 3);
    zero.params().zero_values();
    ConsistencyFunction f(eps_fn(zero), s);
    auto out = f(Var(x), t, y).value();
    for (int b = 0; b < 2; ++b) {
      const float k = static_cast<float>(cm_scalings(s, t[b]).skip);
      for (int64_t i = b * 256; i < (b + 1) * 256; ++i) CHECK(out[i] == k * x[i]);
    }
  }
  SUBCASE("deterministic") {
    ConsistencyFunction f(eps_fn(net), s);
    CHECK(f(Var(x), t, y).value() == f(Var(x), t, y).value());
  }
  SUBCASE("off-grid timestep") {
    ConsistencyFunction f(eps_fn(net), s);
    const std::vector<int> bad{3, s.t(10)};
    CHECK_THROWS_AS(f(Var(x), bad, y), RangeError);
  }
}

TEST_CASE("distance reduction is the elementwise mean") {
  Var a(Tensor({1, 2}, std::vector<float>{1.0f, 2.0f})), b(Tensor({1, 2}));
  const std::vector<float> w{1.0f};
  CHECK(weighted_mean<float>(distance_per_sample(a, b, DistanceKind::L1), w).value()[0] == 1.5f);
  CHECK(weighted_mean<float>(distance_per_sample(a, b, DistanceKind::L2), w).value()[0] == 2.5f);
  // Symmetric, zero on the diagonal.
  CHECK(distance_per_sample(b, a, DistanceKind::L1).value()[0] == 1.5f);
  CHECK(distance_per_sample(a, a, DistanceKind::L1).value()[0] == 0.0f);
}

TEST_CASE("loss weights") {
  ConsistencyLoss l;
  CHECK(l.weight(7) == 1.0);
  l.lambda = {1.0, 2.0, 0.0};
  CHECK(l.weight(1) == 2.0);
  CHECK_THROWS_AS(l.weight(2), ConfigError);
  CHECK_THROWS_AS(l.weight(3), RangeError);
}

TEST_CASE("draw_ct") {
  auto s = default_schedule();
  Rng rng(1);
  const Tensor x({500, 1, 2, 2});
  auto d = draw_ct(x, s, rng);
  REQUIRE(d.n.size() == 500);
  CHECK(d.eps.shape() == x.shape());
  for (size_t i = 0; i < 500; ++i) {
    CHECK(d.n[i] >= 1);
    CHECK(d.n[i] <= 199);
    CHECK(d.t_next[i] == s.t(d.n[i] + 1));
    CHECK(d.t_cur[i] == s.t(d.n[i]));
  }
}

TEST_CASE("ct_loss with an identity consistency function matches direct evaluation") {
  auto s = default_schedule();
  ConsistencyFunction f(net_for(s, [](double v) { return v; }), s);
  const Batch b = random_batch(6, 2);
  Rng rng(5);
  const auto d = draw_ct(b.x, s, rng);
  double want = 0.0;
  for (int64_t i = 0; i < 6; ++i) {
    const int tn = d.t_next[static_cast<size_t>(i)], tc = d.t_cur[static_cast<size_t>(i)];
    double acc = 0.0;
    for (int64_t j = i * 256; j < (i + 1) * 256; ++j)
      acc += std::abs((s.sqrt_alpha_bar(tn) - s.sqrt_alpha_bar(tc)) * b.x[j] +
                      (s.sqrt_one_minus(tn) - s.sqrt_one_minus(tc)) * d.eps[j]);
    want += acc / 256;
  }
  want /= 6;
  CHECK(ct_loss(f, f, b, d, ConsistencyLoss{}).value()[0] == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("ct_loss is invariant to batch order") {
  auto s = default_schedule();
  ConsistencyFunction f(net_for(s, [](double v) { return 0.5 * v + 0.1; }), s);
  const Batch b = random_batch(9, 3);
  Rng rng(6);
  const auto d = draw_ct(b.x, s, rng);
  std::vector<int64_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[4]);
  Batch pb{Tensor(b.x.shape()), {}};
  CtDraw pd{{}, {}, {}, Tensor(d.eps.shape())};
  for (int64_t i = 0; i < 9; ++i) {
    const auto j = static_cast<size_t>(perm[static_cast<size_t>(i)]);
    std::copy_n(b.x.ptr() + j * 256, 256, pb.x.ptr() + i * 256);
    std::copy_n(d.eps.ptr() + j * 256, 256, pd.eps.ptr() + i * 256);
    pb.labels.push_back(b.labels[j]);
    pd.n.push_back(d.n[j]);
    pd.t_next.push_back(d.t_next[j]);
    pd.t_cur.push_back(d.t_cur[j]);
  }
  CHECK(ct_loss(f, f, pb, pd, {}).value()[0] == ct_loss(f, f, b, d, {}).value()[0]);
}

TEST_CASE("constant consistency functions have zero loss") {
  auto s = default_schedule();
  ConsistencyFunction f(net_for(s, [](double) { return 0.25; }), s);
  const Batch b = random_batch(4, 8);
  Rng rng(7);
  const auto d = draw_ct(b.x, s, rng);
  CHECK(ct_loss(f, f, b, d, {}).value()[0] == doctest::Approx(0.0).epsilon(1e-6));
  EpsFn dm = [](const Var& x, std::span<const int>, std::span<const int>) { return Var(x.value()); };
  CHECK(cd_loss(f, f, dm, {5.0, 3}, b, d, {}).value()[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("cd_loss teacher input is one guided DDIM step") {
  auto s = default_schedule();
  ConsistencyFunction f(net_for(s, [](double v) { return v; }), s);
  // eps model whose guided output is (1 - w) 0.1 x + w 0.3 x for every label.
  EpsFn dm = [](const Var& x, std::span<const int>, std::span<const int> y) {
    Tensor out(x.shape());
    const int64_t inner = x.numel() / x.dim(0);
    for (int64_t b = 0; b < x.dim(0); ++b)
      for (int64_t i = b * inner; i < (b + 1) * inner; ++i)
        out[i] = (y[static_cast<size_t>(b)] == 3 ? 0.1f : 0.3f) * x.value()[i];
    return Var(out);
  };
  const Batch b = random_batch(5, 4);
  Rng rng(3);
  const auto d = draw_ct(b.x, s, rng);
  const double w = 2.0;
  double want = 0.0;
  for (int64_t i = 0; i < 5; ++i) {
    const int tn = d.t_next[static_cast<size_t>(i)], tc = d.t_cur[static_cast<size_t>(i)];
    const double an = s.sqrt_alpha_bar(tn), cn = s.sqrt_one_minus(tn);
    double acc = 0.0;
    for (int64_t j = i * 256; j < (i + 1) * 256; ++j) {
      const double xn = an * b.x[j] + cn * d.eps[j];
      const double e = ((1 - w) * 0.1 + w * 0.3) * xn;
      const double x0 = (xn - cn * e) / an;
      acc += std::abs(xn - (s.sqrt_alpha_bar(tc) * x0 + s.sqrt_one_minus(tc) * e));
    }
    want += acc / 256;
  }
  want /= 5;
  CHECK(cd_loss(f, f, dm, {w, 3}, b, d, {}).value()[0] == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("teacher branch carries no gradient") {
  auto s = default_schedule();
  TinyUNet<float> student({}, 1, Role::CmTheta), teacher({}, 2, Role::Teacher);
  TinyUNet<float> dm({}, 3, Role::DmPhi);
  teacher.params().set_trainable(false);
  dm.params().set_trainable(false);
  ConsistencyFunction fs(eps_fn(student), s), ft(eps_fn(teacher), s);
  const Batch b = random_batch(3, 5);
  Rng rng(2);
  const auto d = draw_ct(b.x, s, rng);
  const auto th = teacher.params().hash(), dh = dm.params().hash();
  auto l = cd_loss(fs, ft, eps_fn(dm), {5.0, 3}, b, d, {});
  backward(l);
  CHECK(student.params().any_grad());
  CHECK_FALSE(teacher.params().any_grad());
  CHECK_FALSE(dm.params().any_grad());
  student.params().zero_grad();
  // Stopgrad teacher: the same network on both sides.
  auto l2 = ct_loss(fs, fs, b, d, {});
  backward(l2);
  CHECK(student.params().any_grad());
  CHECK(teacher.params().hash() == th);
  CHECK(dm.params().hash() == dh);
}

TEST_CASE("score_estimate") {
  auto s = default_schedule();
  Rng rng(10);
  const int t = s.t(70);
  const Tensor64 x = randn<double>({4, 3}, rng);
  SUBCASE("x_t = sqrt(ab) x gives zero") {
    Tensor64 xt(x.shape());
    for (int64_t i = 0; i < 12; ++i) xt[i] = s.sqrt_alpha_bar(t) * x[i];
    const auto est = score_estimate(x, xt, t, s);
    for (double v : est.data()) CHECK(std::abs(v) < 1e-12);
  }
  SUBCASE("single-point dataset: the estimate is the Gaussian score for every draw") {
    for (int r = 0; r < 20; ++r) {
      const Tensor64 eps = randn<double>({4, 3}, rng);
      const std::vector<int> tv{t};
      const Tensor64 xt = sample_xt(s, x, tv, eps);
      auto est = score_estimate(x, xt, t, s);
      for (int64_t i = 0; i < 12; ++i) {
        const double analytic = -(xt[i] - s.sqrt_alpha_bar(t) * x[i]) / (1 - s.alpha_bar(t));
        CHECK(est[i] == doctest::Approx(analytic).epsilon(1e-9));
      }
    }
  }
  SUBCASE("t = 0 has no estimator") { CHECK_THROWS_AS(score_estimate(x, x, 0, s), NumericError); }
}

TEST_CASE("score_estimate averages to the GMM score") {
  auto s = default_schedule();
  const Gmm2D g = default_gmm();
  Rng rng(2024);
  std::uniform_int_distribution<int> pick(10, 190);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (int probe = 0; probe < 10; ++probe) {
    const int t = s.t(pick(rng));
    const std::array<double, 2> xt{nd(rng), nd(rng)};
    const int64_t M = 100000;
    const Tensor64 x0 = g.sample_posterior(xt, t, s, M, rng);
    Tensor64 xtm({M, 2});
    for (int64_t i = 0; i < M; ++i) xtm[2 * i] = xt[0], xtm[2 * i + 1] = xt[1];
    const Tensor64 est = score_estimate(x0, xtm, t, s);
    double m0 = 0, m1 = 0;
    for (int64_t i = 0; i < M; ++i) m0 += est[2 * i], m1 += est[2 * i + 1];
    m0 /= M;
    m1 /= M;
    const auto ref = gmm_score(g, xt, t, s);
    const double err = std::hypot(m0 - ref[0], m1 - ref[1]) / std::hypot(ref[0], ref[1]);
    CHECK(err <= 0.02);
  }
}

TEST_CASE("multistep_sample") {
  auto s = default_schedule();
  TinyUNet<float> net({}, 6);
  ConsistencyFunction f(eps_fn(net), s);
  const std::vector<int> labels{0, 1, 2, 3};
  SUBCASE("one step is a single evaluation at T") {
    Rng a(1), b(1);
    auto x = multistep_sample(f, 1, labels, net.sample_shape(), a);
    const Tensor xT = randn({4, 1, 16, 16}, b);
    const std::vector<int> tT(4, 1000);
    CHECK(x == f(Var(xT), tT, labels).value());
  }
  SUBCASE("same seed, same batch") {
    Rng a(3), b(3);
    CHECK(multistep_sample(f, 4, labels, net.sample_shape(), a) ==
          multistep_sample(f, 4, labels, net.sample_shape(), b));
  }
  SUBCASE("too many steps") {
    Rng a(3);
    CHECK_THROWS_AS(multistep_sample(f, 201, labels, net.sample_shape(), a), ConfigError);
    CHECK_THROWS_AS(multistep_sample(f, 0, labels, net.sample_shape(), a), ConfigError);
  }
}

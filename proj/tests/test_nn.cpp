#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "bivo/nn.hpp"

namespace
{

using namespace bivo::nn;

std::vector<double> random_params(const Mlp & mlp, std::uint64_t seed, double bias_scale = 0.1)
{
  std::vector<double> p(mlp.end());
  Rng rng(seed);
  mlp.initialize(p, rng);
  std::normal_distribution<double> n(0.0, bias_scale);
  // Shift every parameter a little so no ReLU sits exactly on its kink.
  for (auto & v : p) v += n(rng);
  return p;
}

Tensor random_input(std::size_t rows, std::size_t cols, std::uint64_t seed)
{
  Rng rng(seed);
  std::normal_distribution<double> n;
  Tensor t = Tensor::matrix(rows, cols);
  for (auto & v : t.data) v = n(rng);
  return t;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData)
{
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, ConcatAndSlice)
{
  const Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4});
  const Tensor b({2, 1}, std::vector<double>{5, 6});
  const auto c = hconcat(a, b);
  EXPECT_EQ(c.data, (std::vector<double>{1, 2, 5, 3, 4, 6}));
  EXPECT_EQ(column_slice(c, 1, 2).data, (std::vector<double>{2, 5, 4, 6}));
}

TEST(MlpSpec, Validation)
{
  EXPECT_THROW((MlpSpec{{3}, {}}).validate(), std::invalid_argument);
  EXPECT_THROW((MlpSpec{{3, 0}, {Activation::kRelu}}).validate(), std::invalid_argument);
  const auto spec = make_mlp_spec(3, {4, 5}, 2);
  EXPECT_EQ(spec.parameter_count(), 3u * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2);
  EXPECT_EQ(spec.activations.back(), Activation::kIdentity);
}

TEST(MlpForward, IdentityWeightsPassInputThrough)
{
  const Mlp mlp({{3, 3}, {Activation::kIdentity}}, 0);
  std::vector<double> p(mlp.end(), 0.0);
  for (int i = 0; i < 3; ++i) p[static_cast<std::size_t>(i * 3 + i)] = 1.0;
  const auto x = random_input(4, 3, 1);
  EXPECT_EQ(mlp.forward(p, x).data, x.data);
}

TEST(MlpForward, ZeroWeightsGiveBias)
{
  const Mlp mlp({{3, 2}, {Activation::kTanh}}, 0);
  std::vector<double> p(mlp.end(), 0.0);
  p[6] = 0.3;
  p[7] = -0.2;
  const auto y = mlp.forward(p, random_input(2, 3, 2));
  EXPECT_NEAR(y(1, 0), std::tanh(0.3), 1e-15);
  EXPECT_NEAR(y(1, 1), std::tanh(-0.2), 1e-15);
}

TEST(MlpForward, MatchesHandMatrixMultiply)
{
  const Mlp mlp(make_mlp_spec(4, {6}, 3), 5);
  const auto p = random_params(mlp, 7);
  const auto x = random_input(3, 4, 8);
  const auto y = mlp.forward(p, x);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> h(6);
    for (std::size_t o = 0; o < 6; ++o) {
      double s = p[5 + 24 + o];
      for (std::size_t i = 0; i < 4; ++i) s += p[5 + o * 4 + i] * x(r, i);
      h[o] = std::max(0.0, s);
    }
    const std::size_t l2 = 5 + 24 + 6;
    for (std::size_t o = 0; o < 3; ++o) {
      double s = p[l2 + 18 + o];
      for (std::size_t i = 0; i < 6; ++i) s += p[l2 + o * 6 + i] * h[i];
      EXPECT_NEAR(y(r, o), s, 1e-12);
    }
  }
}

TEST(MlpForward, WidthMismatchThrows)
{
  const Mlp mlp(make_mlp_spec(4, {6}, 3), 0);
  std::vector<double> p(mlp.end());
  EXPECT_THROW(mlp.forward(p, Tensor::matrix(1, 5)), std::invalid_argument);
}

TEST(Backward, SumOfLinearOutputGivesInputAndOnes)
{
  const Mlp mlp({{3, 1}, {Activation::kIdentity}}, 0);
  std::vector<double> p{0.2, -0.4, 0.7, 0.1};
  const Tensor x({1, 3}, std::vector<double>{1.0, 2.0, 3.0});
  ForwardCache cache;
  const auto y = mlp.forward(p, x, &cache);
  std::vector<double> g(p.size(), 0.0);
  backward_scalar(mlp, p, cache, y, g);
  EXPECT_EQ(g, (std::vector<double>{1.0, 2.0, 3.0, 1.0}));
}

TEST(Backward, NonScalarLossThrows)
{
  const Mlp mlp({{3, 2}, {Activation::kIdentity}}, 0);
  std::vector<double> p(mlp.end(), 0.1);
  ForwardCache cache;
  const auto y = mlp.forward(p, Tensor::matrix(1, 3), &cache);
  std::vector<double> g(p.size());
  EXPECT_THROW(backward_scalar(mlp, p, cache, y, g), std::invalid_argument);
}

TEST(Backward, MatchesFiniteDifferencesOnRandomShapes)
{
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const std::size_t in = 2 + seed % 3, hid = 3 + seed % 4, out = 1 + seed % 3;
    const auto act = seed % 2 ? Activation::kTanh : Activation::kRelu;
    const Mlp mlp(make_mlp_spec(in, {hid, hid}, out, act), 3);
    auto p = random_params(mlp, 100 + seed);
    const auto x = random_input(4, in, 200 + seed);
    const auto target = random_input(4, out, 300 + seed);
    auto loss = [&](std::span<const double> params) {
      const auto y = mlp.forward(params, x);
      double l = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) l += 0.5 * (y.data[i] - target.data[i]) * (y.data[i] - target.data[i]);
      return l;
    };
    ForwardCache cache;
    const auto y = mlp.forward(p, x, &cache);
    Tensor dy = y;
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.data[i] -= target.data[i];
    std::vector<double> g(p.size(), 0.0);
    const auto dx = mlp.backward(p, cache, dy, g);
    EXPECT_LT(finite_difference_check(loss, p, g), 1e-4) << "seed " << seed;
    EXPECT_EQ(dx.rows(), 4u);
    EXPECT_EQ(dx.cols(), in);
  }
}

TEST(KlGaussianStandard, ClosedFormValues)
{
  const std::vector<double> zero{0.0}, one{1.0};
  EXPECT_DOUBLE_EQ(kl_gaussian_standard(zero, zero), 0.0);
  EXPECT_DOUBLE_EQ(kl_gaussian_standard(one, zero), 0.5);
}

TEST(KlGaussian, NonNegativeAndZeroOnlyWhenEqual)
{
  Rng rng(4);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> mq(5), lq(5), mp(5), lp(5);
    for (std::size_t i = 0; i < 5; ++i) {
      mq[i] = n(rng);
      lq[i] = n(rng);
      mp[i] = n(rng);
      lp[i] = n(rng);
    }
    EXPECT_GE(kl_gaussian(mq, lq, mp, lp).value, 0.0);
    EXPECT_GE(kl_gaussian_standard(mq, lq), 0.0);
    EXPECT_NEAR(kl_gaussian(mq, lq, mq, lq).value, 0.0, 1e-9);
  }
}

TEST(KlGaussian, GradientsMatchFiniteDifferences)
{
  Rng rng(9);
  std::normal_distribution<double> n(0.0, 0.5);
  std::vector<double> x(12);
  for (auto & v : x) v = n(rng);
  auto split = [](std::span<const double> v, std::size_t k) { return v.subspan(k * 3, 3); };
  auto loss = [&](std::span<const double> v) { return kl_gaussian(split(v, 0), split(v, 1), split(v, 2), split(v, 3)).value; };
  const auto kl = kl_gaussian(split(x, 0), split(x, 1), split(x, 2), split(x, 3));
  std::vector<double> g;
  for (const auto * part : {&kl.d_mean_q, &kl.d_log_var_q, &kl.d_mean_p, &kl.d_log_var_p}) g.insert(g.end(), part->begin(), part->end());
  EXPECT_LT(finite_difference_check(loss, x, g), 1e-4);
}

TEST(KlCategorical, DirectSummation)
{
  const std::vector<double> u{0.5, 0.5}, q{1.0, 0.0};
  EXPECT_DOUBLE_EQ(kl_categorical(u, u), 0.0);
  EXPECT_NEAR(kl_categorical(q, u), std::log(2.0), 1e-15);
  const std::vector<double> a{0.9, 0.1}, b{0.5, 0.5};
  const double ab = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  const double ba = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  EXPECT_NEAR(kl_categorical(a, b), ab, 1e-15);
  EXPECT_NEAR(kl_categorical(b, a), ba, 1e-15);
  EXPECT_GT(std::abs(ab - ba), 0.1);
}

TEST(KlCategorical, Guards)
{
  const std::vector<double> q{0.5, 0.5}, p{1.0, 0.0}, bad{0.6, 0.6};
  EXPECT_THROW(kl_categorical(q, p), std::domain_error);
  EXPECT_THROW(kl_categorical(bad, q), std::invalid_argument);
}

TEST(Softmax, EntropyOfUniform)
{
  const std::vector<double> logits(4, 3.0);
  const auto p = softmax(logits);
  EXPECT_NEAR(entropy(p), std::log(4.0), 1e-15);
}

TEST(GumbelSoftmax, SumsToOneAndIsDeterministic)
{
  const std::vector<double> logits{0.3, -1.0, 2.0};
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) {
    const auto s = gumbel_softmax_sample(logits, 0.5, a);
    EXPECT_NEAR(std::accumulate(s.sample.begin(), s.sample.end(), 0.0), 1.0, 1e-12);
    EXPECT_EQ(s.sample, gumbel_softmax_sample(logits, 0.5, b).sample);
  }
}

TEST(GumbelSoftmax, LowTemperatureConcentratesOnPerturbedArgmax)
{
  const std::vector<double> logits{0.3, -1.0, 2.0};
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const auto s = gumbel_softmax_sample(logits, 1e-3, rng);
    std::size_t want = 0;
    for (std::size_t k = 1; k < 3; ++k) {
      if (logits[k] + s.noise[k] > logits[want] + s.noise[want]) want = k;
    }
    EXPECT_GT(s.sample[want], 0.99);
  }
}

TEST(GumbelSoftmax, ArgmaxFrequenciesMatchSoftmax)
{
  const std::vector<double> logits{0.5, -0.7, 1.2, 0.0};
  const auto p = softmax(logits);
  Rng rng(12);
  std::vector<double> freq(4, 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto s = gumbel_softmax_sample(logits, 1.0, rng);
    freq[static_cast<std::size_t>(std::max_element(s.sample.begin(), s.sample.end()) - s.sample.begin())] += 1.0 / n;
  }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(freq[k], p[k], 0.02);
}

TEST(GaussianReparam, ClampedVarianceReturnsMean)
{
  const std::vector<double> mean{1.5, -2.0}, lv{-std::numeric_limits<double>::infinity(), -1e6};
  Rng rng(1);
  const auto s = gaussian_reparam(mean, lv, rng);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(s.sample[i], mean[i], std::exp(-10.0) * 10);
}

TEST(GaussianReparam, MonteCarloMeanAndDeterminism)
{
  const std::vector<double> mean{0.7}, lv{std::log(4.0)};
  Rng rng(2), again(2);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto s = gaussian_reparam(mean, lv, rng);
    EXPECT_EQ(s.sample, gaussian_reparam(mean, lv, again).sample);
    EXPECT_DOUBLE_EQ(s.sample[0], 0.7 + 2.0 * s.eps[0]);
    sum += s.sample[0];
  }
  EXPECT_NEAR(sum / n, 0.7, 3.0 * 2.0 / std::sqrt(n));
}

TEST(Adam, HandComputedTwoStepTrace)
{
  AdamState st(1, 0.1);
  std::vector<double> p{1.0};
  const std::vector<double> g1{1.0}, g2{2.0};
  adam_step(st, p, g1);
  EXPECT_NEAR(p[0], 0.900000001, 1e-12);
  adam_step(st, p, g2);
  // m_hat = 0.29 / 0.19, v_hat = 0.004999 / 0.001999.
  EXPECT_NEAR(p[0], 0.8034817990281663, 1e-12);
  EXPECT_EQ(st.step, 2u);
}

TEST(Adam, ZeroGradientLeavesParams)
{
  AdamState st(3);
  std::vector<double> p{1.0, -2.0, 3.0};
  const auto before = p;
  adam_step(st, p, std::vector<double>(3, 0.0));
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ReducesQuadratic)
{
  AdamState st(1, 0.05);
  std::vector<double> p{3.0};
  for (int i = 0; i < 200; ++i) adam_step(st, p, std::vector<double>{2.0 * p[0]});
  EXPECT_LT(p[0] * p[0], 1.0);
  EXPECT_THROW(adam_step(st, p, std::vector<double>(2, 0.0)), std::invalid_argument);
}

TEST(Checkpoint, RoundTripAndCorruption)
{
  Checkpoint c{"mlp 3-4-1", {1.0, -0.0, 3.25e-300, std::numeric_limits<double>::max()}};
  const auto bytes = encode_checkpoint(c);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.descriptor, c.descriptor);
  EXPECT_EQ(back.params, c.params);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(flipped), std::runtime_error);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  EXPECT_THROW(decode_checkpoint("NOTACKPT" + bytes.substr(8)), std::runtime_error);
}

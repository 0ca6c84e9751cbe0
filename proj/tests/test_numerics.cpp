#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "encdot/encoder.hpp"
#include "encdot/numerics/adam.hpp"
#include "encdot/numerics/ops.hpp"
#include "encdot/numerics/parameters.hpp"

namespace nn = encdot::nn;
using nn::Tensor;

namespace {

Tensor random(nn::Shape shape, std::mt19937_64& rng, float scale = 1.0f) {
  std::normal_distribution<float> normal(0.0f, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = normal(rng);
  return t;
}

Tensor identity(std::size_t d) {
  Tensor t({1, d, d});
  for (std::size_t i = 0; i < d; ++i) t.data()[i * d + i] = 1.0f;
  return t;
}

TEST(Tensor, ShapeAndData) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.at(1, 2), 6.0f);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), encdot::DimensionError);
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor t({2, 1}, {1, 2}, true);
  EXPECT_THROW(t.backward(), encdot::Error);
}

TEST(Gelu, FixedPointsAndAsymptotes) {
  auto y = nn::gelu(Tensor({1, 3}, {0.0f, 10.0f, -10.0f}));
  EXPECT_EQ(y.data()[0], 0.0f);
  EXPECT_NEAR(y.data()[1], 10.0f, 1e-5);
  EXPECT_NEAR(y.data()[2], 0.0f, 1e-5);
}

TEST(Conv1d, OutputLengths) {
  std::mt19937_64 rng(1);
  auto w = random({3, 4, 5}, rng);
  Tensor b({5});
  EXPECT_EQ(nn::conv1d(random({16, 4}, rng), w, b, 2, 1, 16).rows(), 8u);
  EXPECT_EQ(nn::conv1d(random({256, 4}, rng), w, b, 2, 1, 256).rows(), 128u);
  EXPECT_EQ(nn::conv1d(random({2 * 7, 4}, rng), w, b, 2, 1, 7).rows(), 8u);
}

TEST(Conv1d, IdentityKernel) {
  std::mt19937_64 rng(2);
  auto x = random({9, 4}, rng);
  auto y = nn::conv1d(x, identity(4), Tensor({4}), 1, 0, 9);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv1d, MatchesDirectLoop) {
  std::mt19937_64 rng(3);
  const std::size_t n = 7, din = 3, dout = 2, width = 3, stride = 2, pad = 1;
  auto x = random({n, din}, rng), w = random({width, din, dout}, rng), b = random({dout}, rng);
  auto y = nn::conv1d(x, w, b, stride, pad, n);
  for (std::size_t p = 0; p < y.rows(); ++p)
    for (std::size_t o = 0; o < dout; ++o) {
      double s = b.data()[o];
      for (std::size_t k = 0; k < width; ++k) {
        const long t = static_cast<long>(p * stride + k) - static_cast<long>(pad);
        if (t < 0 || t >= static_cast<long>(n)) continue;
        for (std::size_t c = 0; c < din; ++c) s += x.at(t, c) * w.data()[(k * din + c) * dout + o];
      }
      EXPECT_NEAR(y.at(p, o), s, 1e-5);
    }
}

TEST(Conv1d, BadPaddingIsDimensionError) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(nn::conv1d(random({16, 2}, rng), random({3, 2, 2}, rng), Tensor({2}), 2, 0, 16), encdot::DimensionError);
  EXPECT_THROW(nn::conv1d(random({16, 3}, rng), random({3, 2, 2}, rng), Tensor({2}), 2, 1, 16), encdot::DimensionError);
}

TEST(Conv1dTransposed, Lengths) {
  std::mt19937_64 rng(5);
  auto w = random({3, 4, 4}, rng);
  Tensor b({4});
  EXPECT_EQ(nn::conv1d_transposed(random({128, 4}, rng), w, b, 2, 256).rows(), 256u);
  EXPECT_EQ(nn::conv1d_transposed(random({4, 4}, rng), w, b, 2, 7).rows(), 7u);
  EXPECT_THROW(nn::conv1d_transposed(random({5, 4}, rng), w, b, 2, 7), encdot::DimensionError);
}

TEST(Conv1dTransposed, IdentityKernel) {
  std::mt19937_64 rng(6);
  auto x = random({6, 3}, rng);
  auto y = nn::conv1d_transposed(x, identity(3), Tensor({3}), 1, 6);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv1dTransposed, IsAdjointOfConv) {
  // <conv(x), y> == <x, convT(y)> for zero biases.
  std::mt19937_64 rng(7);
  for (std::size_t n : {5u, 8u, 11u}) {
    auto w = random({3, 2, 3}, rng);
    auto x = random({n, 2}, rng);
    const std::size_t m = (n + 1) / 2;
    auto y = random({m, 3}, rng);
    Tensor wt({3, 3, 2});
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t o = 0; o < 3; ++o) wt.data()[(k * 3 + o) * 2 + c] = w.data()[(k * 2 + c) * 3 + o];
    auto cx = nn::conv1d(x, w, Tensor({3}), 2, 1, n);
    auto ty = nn::conv1d_transposed(y, wt, Tensor({2}), 2, n);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx.data()[i] * y.data()[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data()[i] * ty.data()[i];
    EXPECT_NEAR(lhs, rhs, 1e-4);
  }
}

TEST(Conv1dTransposed, RoundTripLengths) {
  std::mt19937_64 rng(8);
  auto w = random({3, 2, 2}, rng);
  Tensor b({2});
  for (std::size_t n = 1; n <= 64; ++n) {
    auto down = nn::conv1d(random({n, 2}, rng), w, b, 2, 1, n);
    EXPECT_EQ(nn::conv1d_transposed(down, w, b, 2, n).rows(), n) << n;
  }
}

TEST(LayerNorm, Examples) {
  Tensor gain = nn::filled({2}, 1.0f), bias({2});
  auto y = nn::layer_norm(Tensor({1, 2}, {3.0f, 3.0f}), gain, bias);
  EXPECT_EQ(y.data()[0], 0.0f);
  EXPECT_EQ(y.data()[1], 0.0f);
  y = nn::layer_norm(Tensor({1, 2}, {1.0f, -1.0f}), gain, bias);
  EXPECT_NEAR(y.data()[0], 1.0f, 1e-5);
  EXPECT_NEAR(y.data()[1], -1.0f, 1e-5);
}

// Loop-based attention: per head softmax(q k^T / sqrt(dh)) over allowed positions, times v.
std::vector<double> naive_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                                    std::size_t heads) {
  const std::size_t n = q.rows(), d = q.cols(), dh = d / heads;
  std::vector<double> out(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += double(q.at(i, h * dh + c)) * k.at(j, h * dh + c);
        s[j] = mask.at(i, j) != 0.0f ? dot / std::sqrt(double(dh)) : -1e300;
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < n; ++j) z += s[j] > -1e299 ? std::exp(s[j] - mx) : 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = s[j] > -1e299 ? std::exp(s[j] - mx) / z : 0.0;
        for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] += w * v.at(j, h * dh + c);
      }
    }
  return out;
}

TEST(Attention, MatchesNaiveOracle) {
  std::mt19937_64 rng(9);
  auto q = random({3, 8}, rng), k = random({3, 8}, rng), v = random({3, 8}, rng);
  for (const auto& mask : {encdot::full_mask(3), encdot::build_band_mask(3, 1)}) {
    auto y = nn::multi_head_attention(q, k, v, mask, 2);
    const auto ref = naive_attention(q, k, v, mask, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-5);
  }
}

TEST(Attention, SinglePosition) {
  std::mt19937_64 rng(10);
  auto q = random({1, 4}, rng), k = random({1, 4}, rng), v = random({1, 4}, rng);
  auto y = nn::multi_head_attention(q, k, v, encdot::full_mask(1), 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.data()[i], v.data()[i]);
}

TEST(Attention, BandMaskZerosWeights) {
  std::mt19937_64 rng(11);
  auto q = random({5, 4}, rng), k = random({5, 4}, rng);
  const auto w = nn::attention_weights(q, k, encdot::build_band_mask(5, 2), 2);
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(w[(h * 5 + 0) * 5 + 3], 0.0f);
    EXPECT_EQ(w[(h * 5 + 0) * 5 + 4], 0.0f);
    for (std::size_t i = 0; i < 5; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < 5; ++j) sum += w[(h * 5 + i) * 5 + j];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Attention, OutputIgnoresMaskedValues) {
  std::mt19937_64 rng(12);
  const std::size_t n = 9;
  auto q = random({2 * n, 4}, rng), k = random({2 * n, 4}, rng), v = random({2 * n, 4}, rng);
  const auto mask = encdot::build_band_mask(n, 2);
  const auto before = nn::multi_head_attention(q, k, v, mask, 2);
  auto changed = v.clone();
  for (std::size_t c = 0; c < 4; ++c) {
    changed.data()[6 * 4 + c] += 100.0f;       // sequence 0, position 6
    changed.data()[(n + 0) * 4 + c] -= 50.0f;  // sequence 1, position 0
  }
  const auto after = nn::multi_head_attention(q, k, changed, mask, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const bool seq0_sees = (i > 6 ? i - 6 : 6 - i) <= 2;
    const bool seq1_sees = i <= 2;
    for (std::size_t c = 0; c < 4; ++c) {
      if (!seq0_sees) {
        EXPECT_EQ(before.at(i, c), after.at(i, c));
      }
      if (!seq1_sees) {
        EXPECT_EQ(before.at(n + i, c), after.at(n + i, c));
      }
    }
  }
}

TEST(Attention, EmptyMaskRowIsError) {
  std::mt19937_64 rng(13);
  auto x = random({3, 4}, rng);
  auto mask = encdot::full_mask(3);
  for (std::size_t j = 0; j < 3; ++j) mask.data()[3 + j] = 0.0f;
  EXPECT_THROW(nn::multi_head_attention(x, x, x, mask, 2), encdot::DimensionError);
  EXPECT_THROW(nn::multi_head_attention(x, x, x, encdot::full_mask(3), 3), encdot::DimensionError);
}

TEST(Parameters, NamesUniqueAndTrainable) {
  nn::ParameterSet set;
  set.add("a", Tensor({2}));
  set.add("b", Tensor({3, 1}));
  EXPECT_THROW(set.add("a", Tensor({1})), encdot::Error);
  EXPECT_TRUE(set.at("a").requires_grad());
  EXPECT_EQ(set.scalar_count(), 5u);
  EXPECT_EQ(set.name(1), "b");
}

TEST(Parameters, TruncatedNormalDeterministicAndBounded) {
  std::mt19937_64 a(42), b(42);
  auto x = nn::truncated_normal({100, 10}, 0.02, a);
  auto y = nn::truncated_normal({100, 10}, 0.02, b);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x.data()[i], y.data()[i]);
    EXPECT_LE(std::abs(x.data()[i]), 0.04f + 1e-7f);
  }
}

nn::ParameterSet scalar_param(float value) {
  nn::ParameterSet set;
  set.add("w", Tensor({1, 1}, {value}));
  return set;
}

TEST(Adam, ZeroLearningRateKeepsParameters) {
  auto set = scalar_param(0.7f);
  auto state = nn::AdamState::for_parameters(set);
  set.at("w").zero_grad();
  auto loss = nn::scale(set.at("w"), 3.0f);
  loss.backward();
  nn::adam_step(set, state, 0.0);
  EXPECT_EQ(set.at("w").item(), 0.7f);
  EXPECT_EQ(set.at("w").grad()[0], 0.0f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto set = scalar_param(1.0f);
  auto state = nn::AdamState::for_parameters(set);
  set.at("w").zero_grad();
  nn::scale(set.at("w"), 1.0f).backward();
  nn::adam_step(set, state, 1e-3);
  EXPECT_NEAR(1.0f - set.at("w").item(), 1e-3, 1e-6);
}

TEST(Adam, MissingGradientNamesParameter) {
  auto set = scalar_param(1.0f);
  set.add("never_used", Tensor({2}));
  auto state = nn::AdamState::for_parameters(set);
  set.at("w").zero_grad();
  try {
    nn::adam_step(set, state, 1e-3);
    FAIL() << "expected an error";
  } catch (const encdot::Error& e) {
    EXPECT_NE(std::string(e.what()).find("never_used"), std::string::npos);
  }
}

TEST(Adam, QuadraticBowlMatchesScalarSimulation) {
  const double lr = 0.006;
  auto set = scalar_param(1.0f);
  auto state = nn::AdamState::for_parameters(set);
  set.at("w").zero_grad();
  double w = 1.0, m = 0.0, v = 0.0;
  double previous = 1.0;
  for (int t = 1; t <= 100; ++t) {
    auto& p = set.at("w");
    nn::weighted_squared_error(p, {0.0f}, {1.0f}).backward();
    nn::adam_step(set, state, lr);
    const double g = 2.0 * w;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    const double now = std::abs(set.at("w").item());
    EXPECT_NEAR(set.at("w").item(), w, 1e-4);
    EXPECT_LT(now, previous);
    previous = now;
  }
  EXPECT_LT(previous, 0.5);
}

TEST(NoGrad, GuardStopsTracking) {
  Tensor x({1, 1}, {2.0f}, true);
  {
    nn::NoGradGuard guard;
    EXPECT_FALSE(nn::scale(x, 2.0f).requires_grad());
  }
  EXPECT_TRUE(nn::scale(x, 2.0f).requires_grad());
}

TEST(Dropout, InvertedAndInactiveInEval) {
  std::mt19937_64 rng(14);
  auto x = nn::filled({1000, 10}, 1.0f);
  auto y = nn::dropout(x, 0.15, rng, true);
  double sum = 0;
  std::size_t zeros = 0;
  for (float v : y.data()) {
    sum += v;
    zeros += v == 0.0f;
  }
  EXPECT_NEAR(sum / 10000.0, 1.0, 0.03);
  EXPECT_NEAR(zeros / 10000.0, 0.15, 0.015);
  auto z = nn::dropout(x, 0.15, rng, false);
  EXPECT_TRUE(z.same_storage(x));
}

}  // namespace

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "moedis/autodiff.hpp"
#include "moedis/checkpoint.hpp"
#include "moedis/errors.hpp"
#include "primitive_cases.hpp"
#include "test_support.hpp"

namespace moedis {
namespace {

using testing::fd_directional;
using testing::fd_gradient;
using testing::random_tensor;
using testing::rel_error;

TEST(Tensor, RejectsNonFiniteAndBadShapes) {
  EXPECT_THROW(Tensor({2}, {1.0, std::nan("")}), NumericError);
  EXPECT_THROW(Tensor({2}, {1.0, INFINITY}), NumericError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  EXPECT_THROW(Tensor({0, 2}, {}), DimensionError);
}

TEST(MatMul, IdentityLeavesMatrixUnchanged) {
  Tape tape;
  const auto m = Tensor::matrix({{1.5, -2.0}, {0.25, 4.0}});
  EXPECT_EQ(matmul(tape.constant(Tensor::identity(2)), tape.constant(m)).value(), m);
}

TEST(MatMul, HandComputedProduct) {
  Tape tape;
  auto out = matmul(tape.constant(Tensor::matrix({{1, 2}, {3, 4}})), tape.constant(Tensor::matrix({{5}, {6}})));
  EXPECT_EQ(out.value(), Tensor::matrix({{17}, {39}}));
}

TEST(MatMul, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(matmul(tape.constant(Tensor::zeros({2, 3})), tape.constant(Tensor::zeros({2, 3}))), DimensionError);
}

TEST(MatMul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto a = random_tensor({3, 4}, rng);
  const auto b = random_tensor({4, 2}, rng);
  TracedFn f = [&](Tape& t, Var x) { return sum(matmul(x, t.constant(b))); };
  auto fd = fd_gradient([&](const Tensor& x) { return evaluate(f, x).item(); }, a);
  EXPECT_LT(rel_error(gradient(f, a), fd), 1e-6);
}

TEST(Elementwise, SymmetryPoints) {
  Tape tape;
  auto zero = tape.constant(Tensor::scalar(0.0));
  EXPECT_EQ(sigmoid(zero).value().item(), 0.5);
  EXPECT_EQ(tanh(zero).value().item(), 0.0);
}

TEST(Elementwise, SigmoidDerivativeAtOne) {
  TracedFn f = [](Tape&, Var x) { return sum(sigmoid(x)); };
  const auto x = Tensor::scalar(1.0);
  const double s = 1.0 / (1.0 + std::exp(-1.0));
  const double analytic = s * (1.0 - s);
  const double g = gradient(f, x).item();
  EXPECT_NEAR(analytic, 0.19661, 1e-5);
  EXPECT_NEAR(g, analytic, 1e-15);
  EXPECT_NEAR(g, fd_gradient([&](const Tensor& t) { return evaluate(f, t).item(); }, x).item(), 1e-8);
}

TEST(Elementwise, IncompatibleShapesThrow) {
  Tape tape;
  EXPECT_THROW(add(tape.constant(Tensor::zeros({2, 3})), tape.constant(Tensor::zeros({3, 2}))), DimensionError);
  EXPECT_THROW(mul(tape.constant(Tensor::zeros({1, 3})), tape.constant(Tensor::zeros({1, 2}))), DimensionError);
}

TEST(Softmax, UniformAndStable) {
  Tape tape;
  auto u = softmax(tape.constant(Tensor::row({0, 0, 0})));
  for (double v : u.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-16);
  auto big = softmax(tape.constant(Tensor::row({1000, 0})));
  EXPECT_EQ(big.value()[0], 1.0);
  EXPECT_GE(big.value()[1], 0.0);
  EXPECT_LT(big.value()[1], 1e-300);
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
  Tape tape;
  auto s = softmax(tape.constant(Tensor::row({1, 2, 3})));
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) {
    const long double expect = std::exp(static_cast<long double>(i + 1)) / z;
    EXPECT_NEAR(s.value()[static_cast<std::size_t>(i)], static_cast<double>(expect), 1e-12);
  }
}

TEST(Softmax, RowsSumToOneAndStayInOpenInterval) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    auto s = softmax(tape.constant(random_tensor({4, 6}, rng, -5.0, 5.0)));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        const double v = s.value().at(r, c);
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Conv1d, UnitKernelIsIdentity) {
  Tape tape;
  const auto x = Tensor::row({1, -2, 3, 4});
  EXPECT_EQ(conv1d(tape.constant(x), tape.constant(Tensor::row({1}))).value(), x);
}

TEST(Conv1d, ZeroPaddedShift) {
  Tape tape;
  auto y = conv1d(tape.constant(Tensor::row({1, 2, 3, 4})), tape.constant(Tensor::row({1, 0, 0})));
  EXPECT_EQ(y.value(), Tensor::row({0, 1, 2, 3}));
}

TEST(Conv1d, EvenOrOversizedKernelIsConfigError) {
  Tape tape;
  auto x = tape.constant(Tensor::row({1, 2, 3, 4}));
  EXPECT_THROW(conv1d(x, tape.constant(Tensor::row({1, 1}))), ConfigError);
  EXPECT_THROW(conv1d(x, tape.constant(Tensor::row({1, 1, 1, 1, 1}))), ConfigError);
}

TEST(Conv1d, KernelGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({1, 9}, rng);
  const auto w = random_tensor({1, 9}, rng);
  const auto ker = random_tensor({1, 5}, rng);
  TracedFn f = [&](Tape& t, Var k) { return sum(mul(conv1d(t.constant(x), k), t.constant(w))); };
  auto fd = fd_gradient([&](const Tensor& k) { return evaluate(f, k).item(); }, ker);
  EXPECT_LT(rel_error(gradient(f, ker), fd), 1e-6);
}

TEST(BatchNorm, ConstantFeaturesNormalizeToZero) {
  Tape tape;
  BatchNormStats stats{Tensor::zeros({1, 3}), Tensor::full({1, 3}, 1.0)};
  auto x = tape.constant(Tensor::matrix({{2, -1, 5}, {2, -1, 5}, {2, -1, 5}}));
  auto y = batch_norm_train(x, tape.constant(Tensor::full({1, 3}, 1.0)), tape.constant(Tensor::zeros({1, 3})), stats);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, SingleRowUsesVarianceFloorAndKeepsRunningVar) {
  Tape tape;
  BatchNormStats stats{Tensor::zeros({1, 2}), Tensor::full({1, 2}, 1.0)};
  auto y = batch_norm_train(tape.constant(Tensor::row({3.0, -4.0})), tape.constant(Tensor::row({2.0, 2.0})),
                            tape.constant(Tensor::row({0.5, -0.5})), stats);
  EXPECT_EQ(y.value(), Tensor::row({0.5, -0.5}));
  EXPECT_EQ(stats.running_var, Tensor::full({1, 2}, 1.0));
  EXPECT_NEAR(stats.running_mean[0], 0.3, 1e-15);
  EXPECT_NEAR(stats.running_mean[1], -0.4, 1e-15);
}

TEST(BatchNorm, EvalModeMatchesDirectFormula) {
  std::mt19937_64 rng(9);
  const auto x = random_tensor({3, 4}, rng);
  const auto gamma = random_tensor({1, 4}, rng);
  const auto beta = random_tensor({1, 4}, rng);
  const BatchNormStats stats{random_tensor({1, 4}, rng), random_tensor({1, 4}, rng, 0.5, 2.0)};
  Tape tape;
  auto y = batch_norm_eval(tape.constant(x), tape.constant(gamma), tape.constant(beta), stats);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double expect =
          (x.at(r, c) - stats.running_mean[c]) / std::sqrt(stats.running_var[c] + 1e-5) * gamma[c] + beta[c];
      EXPECT_NEAR(y.value().at(r, c), expect, 1e-14);
    }
  }
}

TEST(BatchNorm, TrainModeStandardizesEachFeature) {
  std::mt19937_64 rng(21);
  // Spread chosen so that eps / var stays below the 1e-6 tolerance.
  const auto x = random_tensor({16, 5}, rng, -20.0, 20.0);
  Tape tape;
  BatchNormStats stats{Tensor::zeros({1, 5}), Tensor::full({1, 5}, 1.0)};
  auto y = batch_norm_train(tape.constant(x), tape.constant(Tensor::full({1, 5}, 1.0)),
                            tape.constant(Tensor::zeros({1, 5})), stats);
  for (std::size_t c = 0; c < 5; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 16; ++r) mean += y.value().at(r, c) / 16.0;
    for (std::size_t r = 0; r < 16; ++r) var += std::pow(y.value().at(r, c) - mean, 2) / 16.0;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(BatchNorm, RunningStatsUseMomentumAndUnbiasedVariance) {
  Tape tape;
  BatchNormStats stats{Tensor::zeros({1, 1}), Tensor::full({1, 1}, 1.0)};
  batch_norm_train(tape.constant(Tensor::column({1.0, 3.0})), tape.constant(Tensor::scalar(1.0)),
                   tape.constant(Tensor::scalar(0.0)), stats);
  EXPECT_NEAR(stats.running_mean.item(), 0.2, 1e-15);
  // batch mean 2, unbiased variance 2
  EXPECT_NEAR(stats.running_var.item(), 0.9 + 0.1 * 2.0, 1e-15);
}

TEST(Jvp, IdentityReturnsTangent) {
  const auto z = Tensor::row({0.5, -1.0, 2.0});
  const auto v = Tensor::row({1.0, 2.0, -3.0});
  EXPECT_EQ(jvp([](Tape&, Var x) { return x; }, z, v), v);
}

TEST(Jvp, LinearMapIsExact) {
  std::mt19937_64 rng(4);
  const auto a = random_tensor({5, 3}, rng);
  const auto z = random_tensor({1, 3}, rng);
  const auto v = random_tensor({1, 3}, rng);
  TracedFn f = [&](Tape& t, Var x) { return matmul(x, transpose(t.constant(a))); };
  Tape tape;
  auto expect = matmul(tape.constant(v), transpose(tape.constant(a))).value();
  EXPECT_EQ(jvp(f, z, v), expect);
}

TracedFn small_mlp(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
  return [=](Tape& t, Var x) {
    auto h = tanh(add(matmul(x, transpose(t.constant(w1))), t.constant(b1)));
    auto o = add(matmul(h, transpose(t.constant(w2))), t.constant(b2));
    return sigmoid(o);
  };
}

TEST(Jvp, MlpMatchesCentralDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto f = small_mlp(random_tensor({6, 4}, rng), random_tensor({1, 6}, rng), random_tensor({7, 6}, rng),
                       random_tensor({1, 7}, rng));
    const auto z = random_tensor({1, 4}, rng);
    const auto v = random_tensor({1, 4}, rng);
    auto fd = fd_directional([&](const Tensor& x) { return evaluate(f, x); }, z, v);
    EXPECT_LT(rel_error(jvp(f, z, v), fd), 1e-5);
  }
}

TEST(Jvp, RejectsTangentShapeMismatchAndTrainModeBatchNorm) {
  EXPECT_THROW(jvp([](Tape&, Var x) { return x; }, Tensor::row({1, 2}), Tensor::row({1, 2, 3})), DimensionError);
  TracedFn bn = [](Tape& t, Var x) {
    BatchNormStats stats{Tensor::zeros({1, 3}), Tensor::full({1, 3}, 1.0)};
    return batch_norm_train(x, t.constant(Tensor::full({1, 3}, 1.0)), t.constant(Tensor::zeros({1, 3})), stats);
  };
  EXPECT_THROW(jvp(bn, Tensor::row({1, 2, 3}), Tensor::row({1, 0, 0})), CapabilityError);
}

TEST(Jvp, AgreesWithReverseMode) {
  // u^T J v computed as <u, jvp(v)> and as <grad(u^T f), v>.
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = small_mlp(random_tensor({6, 4}, rng), random_tensor({1, 6}, rng), random_tensor({5, 6}, rng),
                       random_tensor({1, 5}, rng));
    const auto z = random_tensor({1, 4}, rng);
    const auto v = random_tensor({1, 4}, rng);
    const auto u = random_tensor({1, 5}, rng);
    const auto jv = jvp(f, z, v);
    double forward = 0.0;
    for (std::size_t i = 0; i < 5; ++i) forward += u[i] * jv[i];
    const auto g = gradient([&](Tape& t, Var x) { return sum(mul(f(t, x), t.constant(u))); }, z);
    double reverse = 0.0;
    for (std::size_t i = 0; i < 4; ++i) reverse += g[i] * v[i];
    EXPECT_NEAR(forward, reverse, 1e-8);
  }
}

TEST(Jacobian, AssembledFromBasisTangents) {
  std::mt19937_64 rng(17);
  auto f = small_mlp(random_tensor({6, 4}, rng), random_tensor({1, 6}, rng), random_tensor({7, 6}, rng),
                     random_tensor({1, 7}, rng));
  const auto z = random_tensor({1, 4}, rng);
  const auto jac = jacobian(f, z);
  ASSERT_EQ(jac.shape(), (Shape{7, 4}));
  auto fd = testing::fd_jacobian([&](const Tensor& x) { return evaluate(f, x); }, z);
  EXPECT_LT(rel_error(jac, fd), 1e-5);
}

TEST(Primitives, ReverseModeMatchesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (const auto& pc : testing::primitive_cases()) {
    for (int trial = 0; trial < 5; ++trial) {
      EXPECT_LT(testing::primitive_gradient_error(pc, rng), 1e-5) << pc.name;
    }
  }
}

TEST(Primitives, ForwardModeMatchesReverseMode) {
  // For single-input primitives without batch coupling, check <w, J v> both ways.
  std::mt19937_64 rng(99);
  for (const auto& pc : testing::primitive_cases()) {
    if (pc.name == "batch_norm_train") continue;
    std::vector<Tensor> inputs;
    for (const auto& s : pc.shapes) inputs.push_back(random_tensor(s, rng, pc.lo, pc.hi));
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    Var out = pc.build(tape, vars);
    const auto w = random_tensor(out.shape(), rng, -1.0, 1.0);
    Var readout = sum(mul(out, tape.constant(w)));
    tape.backward(readout);
    std::vector<Tape::TangentSeed> seeds;
    double reverse = 0.0;
    for (std::size_t k = 0; k < vars.size(); ++k) {
      auto v = random_tensor(inputs[k].shape(), rng, -1.0, 1.0);
      const auto g = tape.grad(vars[k]);
      for (std::size_t i = 0; i < v.numel(); ++i) reverse += g[i] * v[i];
      seeds.push_back({vars[k], v});
    }
    const double forward = tape.tangent(seeds, readout).item();
    EXPECT_NEAR(forward, reverse, 1e-8 * std::max(1.0, std::abs(reverse))) << pc.name;
  }
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto f = small_mlp(random_tensor({6, 4}, rng), random_tensor({1, 6}, rng), random_tensor({1, 6}, rng),
                       random_tensor({1, 1}, rng));
    const auto z = random_tensor({1, 4}, rng);
    return std::make_pair(evaluate(f, z), gradient([&](Tape& t, Var x) { return sum(f(t, x)); }, z));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Tape, InputsAlwaysPrecedeOutputs) {
  Tape tape;
  auto x = tape.leaf(Tensor::row({1, 2}));
  auto y = mul(x, x);
  auto z = sum(y);
  EXPECT_LT(x.id(), y.id());
  EXPECT_LT(y.id(), z.id());
  EXPECT_EQ(tape.op_at(z.id()), Op::kSum);
}

TEST(Tape, MixingTapesIsAnError) {
  Tape a, b;
  EXPECT_THROW(add(a.leaf(Tensor::scalar(1)), b.leaf(Tensor::scalar(2))), ArgumentError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  Checkpoint ckpt;
  ckpt.meta["kind"] = "test";
  for (int i = 0; i < 5; ++i) {
    ckpt.put("t" + std::to_string(i), random_tensor({static_cast<std::size_t>(i + 1), 3}, rng, -1e3, 1e3));
  }
  const auto bytes = encode_checkpoint(ckpt);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.meta, ckpt.meta);
  EXPECT_EQ(back.tensors, ckpt.tensors);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, LayoutIsMagicHeaderThenLittleEndianBlobs) {
  Checkpoint ckpt;
  ckpt.put("x", Tensor::row({1.0}));
  const auto bytes = encode_checkpoint(ckpt);
  ASSERT_EQ(bytes.substr(0, 8), "MOEDCKPT");
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
  EXPECT_EQ(header["dtype"], "float64");
  EXPECT_EQ(header["tensors"][0]["name"], "x");
  // 1.0 == 0x3FF0000000000000, little-endian
  const auto blob = bytes.substr(16 + header_len);
  ASSERT_EQ(blob.size(), 8u);
  EXPECT_EQ(static_cast<unsigned char>(blob[7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(blob[6]), 0xF0);
}

TEST(Checkpoint, RejectsCorruptInput) {
  EXPECT_THROW(decode_checkpoint("garbage"), FormatError);
  Checkpoint ckpt;
  ckpt.put("x", Tensor::row({1.0, 2.0}));
  auto bytes = encode_checkpoint(ckpt);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
}

}  // namespace
}  // namespace moedis

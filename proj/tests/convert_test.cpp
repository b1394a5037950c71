#include "fgn/convert.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"

namespace fgn {
namespace {

using test::random_tensor;

TEST(CenterFromNeuron, Examples) {
  const std::vector<double> w1{-1, -2};
  EXPECT_EQ(center_from_neuron(w1, 5), (std::vector<double>{1, 2}));
  const std::vector<double> w2{1, 0};
  const auto c2 = center_from_neuron(w2, 0);
  EXPECT_EQ(c2[0], 0.0);
  EXPECT_EQ(c2[1], 0.0);
  const std::vector<double> w3{3, 4};
  const auto c3 = center_from_neuron(w3, -10);
  EXPECT_NEAR(c3[0], 1.2, 1e-15);
  EXPECT_NEAR(c3[1], 1.6, 1e-15);
  EXPECT_NEAR(3 * c3[0] + 4 * c3[1] - 10, 0.0, 1e-14);
  EXPECT_NEAR(c3[0] * 4 - c3[1] * 3, 0.0, 1e-14);
}

TEST(CenterFromNeuron, ZeroWeightsRejected) {
  const std::vector<double> w{0, 0, 0};
  EXPECT_THROW(center_from_neuron(w, 1), std::invalid_argument);
}

TEST(CenterFromNeuron, IsClosestPointOnHyperplane) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const Tensor w = random_tensor({5}, rng, -2, 2, 1e-2);
    const double b = random_tensor({1}, rng)[0];
    const auto c = center_from_neuron(w.data, b);
    double on = b, cc = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      on += w[i] * c[i];
      cc += c[i] * c[i];
    }
    EXPECT_NEAR(on, 0.0, 1e-9);
    // Any other point on the hyperplane is at least as far from the origin.
    const Tensor d = random_tensor({5}, rng);
    double wd = 0, ww = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      wd += w[i] * d[i];
      ww += w[i] * w[i];
    }
    double other = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      const double p = c[i] + d[i] - wd / ww * w[i];
      other += p * p;
    }
    EXPECT_LE(cc, other + 1e-12);
  }
}

Network random_classical(std::mt19937_64& rng, const std::vector<std::size_t>& dims, Activation hidden) {
  Network net;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    net.layers.emplace_back(DenseLayer(random_tensor({dims[i + 1], dims[i]}, rng, -1, 1),
                                       random_tensor({dims[i + 1]}, rng, -1, 1),
                                       i + 2 == dims.size() ? Activation::Identity : hidden));
  return net;
}

TEST(FindVariance, CenterInputStopsAtFirstProbe) {
  DenseLayer layer(Tensor::matrix(1, 2, {-1, -2}), Tensor::vector({5}), Activation::Identity);
  Network net;
  net.layers.emplace_back(layer);
  const SigmaSearch s = find_variance(net, net, 0, Tensor::matrix(1, 2, {1, 2}), 1e-12);
  EXPECT_EQ(s.sigma, 1.0);
  EXPECT_EQ(s.probes.size(), 1u);
}

TEST(FindVariance, ReturnsFirstPassingPowerOfTwo) {
  std::mt19937_64 rng(3);
  const Network net = random_classical(rng, {4, 6, 3}, Activation::Tanh);
  const Tensor inputs = random_tensor({100, 4}, rng, -1, 1);
  const SigmaSearch s = find_variance(net, net, 0, inputs, 1e-5);
  EXPECT_LE(s.deviation, 1e-5);
  EXPECT_EQ(std::exp2(std::round(std::log2(s.sigma))), s.sigma);
  ASSERT_GE(s.probes.size(), 2u);
  EXPECT_GT(s.probes[s.probes.size() - 2].deviation, 1e-5);
  EXPECT_LE(s.probes.size(), kMaxSigmaDoublings);
}

TEST(FindVariance, FailureCarriesBestDeviation) {
  std::mt19937_64 rng(4);
  Network net = random_classical(rng, {3, 2}, Activation::Identity);
  // A non-finite reference input keeps every probe at infinite deviation.
  Tensor inputs = random_tensor({4, 3}, rng);
  inputs[0] = 1e300;
  try {
    find_variance(net, net, 0, inputs, 1e-6);
    FAIL() << "expected ConversionError";
  } catch (const ConversionError& e) {
    EXPECT_GT(e.best_deviation(), 1e-6);
  }
  EXPECT_THROW(find_variance(net, net, 0, inputs, 0.0), std::invalid_argument);
}

TEST(ConvertNetwork, IdentityLayerIsExact) {
  std::mt19937_64 rng(5);
  const Network net = random_classical(rng, {3, 4}, Activation::Identity);
  const Tensor inputs = random_tensor({50, 3}, rng, -1, 1);
  const ConversionResult r = convert_network(net, inputs, 1e-12);
  EXPECT_LE(r.report.max_deviation, 1e-12);
  EXPECT_EQ(r.report.argmax_agreement, 1.0);
  EXPECT_LE(max_logit_deviation(net, r.network, inputs), 1e-12);
}

TEST(ConvertNetwork, RandomThreeLayerNetWithinTolerance) {
  std::mt19937_64 rng(6);
  for (Activation act : {Activation::Tanh, Activation::Relu}) {
    const Network net = random_classical(rng, {6, 10, 8, 3}, act);
    const Tensor inputs = random_tensor({500, 6}, rng, -1, 1);
    const double tol = 1e-4;
    const ConversionResult r = convert_network(net, inputs, tol);
    EXPECT_LE(r.report.max_deviation, tol);
    EXPECT_EQ(r.report.argmax_agreement, 1.0);
    EXPECT_EQ(r.report.layer_sigma.size(), 3u);
    EXPECT_LE(r.report.search_iterations, 3 * kMaxSigmaDoublings);
    for (const Layer& l : r.network.layers) {
      const auto& f = std::get<FgnDenseLayer>(l);
      EXPECT_TRUE(f.coupled);
      for (std::size_t n = 0; n < f.out_dim(); ++n) {
        double wc = f.bias[n];
        for (std::size_t j = 0; j < f.in_dim(); ++j) wc += f.weights.at(n, j) * f.centers.at(n, j);
        EXPECT_NEAR(wc, 0.0, 1e-9);
      }
    }
  }
}

TEST(ConvertNetwork, ConvLayersConvert) {
  std::mt19937_64 rng(7);
  Network net;
  Conv1dLayer conv;
  conv.weights = random_tensor({3, 5}, rng, -1, 1);
  conv.bias = random_tensor({3}, rng, -1, 1);
  conv.stride = 2;
  conv.activation = Activation::Relu;
  net.layers.emplace_back(conv);
  const std::size_t len = conv_output_length(32, 5, 2, 1);
  net.layers.emplace_back(DenseLayer(random_tensor({4, 3 * len}, rng, -0.3, 0.3), random_tensor({4}, rng),
                                     Activation::Identity));
  const Tensor inputs = random_tensor({100, 32}, rng, -1, 1);
  const ConversionResult r = convert_network(net, inputs, 1e-5);
  EXPECT_LE(r.report.max_deviation, 1e-5);
  EXPECT_TRUE(std::holds_alternative<FgnConv1dLayer>(r.network.layers[0]));
}

TEST(ConvertNetwork, RejectsFgnInput) {
  std::mt19937_64 rng(8);
  const Network net = random_classical(rng, {3, 4, 2}, Activation::Tanh);
  const Tensor inputs = random_tensor({10, 3}, rng);
  const ConversionResult r = convert_network(net, inputs, 1e-4);
  try {
    convert_network(r.network, inputs, 1e-4);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(Decouple, PreservesOutputs) {
  std::mt19937_64 rng(9);
  const Network net = random_classical(rng, {3, 5, 2}, Activation::Tanh);
  const Tensor inputs = random_tensor({40, 3}, rng);
  ConversionResult r = convert_network(net, inputs, 1e-6);
  Network d = r.network;
  decouple(d);
  for (const Layer& l : d.layers) EXPECT_FALSE(std::get<FgnDenseLayer>(l).coupled);
  EXPECT_LE(max_logit_deviation(r.network, d, inputs), 1e-12);
}

}  // namespace
}  // namespace fgn

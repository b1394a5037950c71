#include "fgn/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "fgn/attacks.hpp"
#include "fgn/train.hpp"
#include "test_util.hpp"

namespace fgn {
namespace {

using test::random_tensor;

// Dense layer with all-zero parameters: every logit is 0.
Network uniform_net(std::size_t in, std::size_t classes) {
  Network net;
  net.layers.emplace_back(DenseLayer(Tensor(Shape{classes, in}), Tensor(Shape{classes}), Activation::Identity));
  return net;
}

Prediction oracle_prediction(const Network& net, std::span<const double> x) {
  return confidence(network_forward(net, x).logits);
}

TEST(Confidence, Examples) {
  const std::vector<double> zeros(10, 0.0);
  EXPECT_DOUBLE_EQ(confidence(zeros).confidence, 0.1);
  EXPECT_EQ(confidence(zeros).class_index, 0u);
  std::vector<double> big(10, 0.0);
  big[0] = 1000;
  EXPECT_NEAR(confidence(big).confidence, 1.0, 1e-15);
  const std::vector<double> two{std::log(2.0), 0.0};
  EXPECT_NEAR(confidence(two).confidence, 2.0 / 3.0, 1e-15);
}

TEST(Confidence, TiesGoToLowestIndex) {
  const std::vector<double> z{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(confidence(z).class_index, 1u);
}

TEST(Confidence, RejectsBadLogits) {
  const std::vector<double> one{1.0};
  EXPECT_THROW(confidence(one), std::invalid_argument);
  const std::vector<double> nan{1.0, std::nan("")};
  EXPECT_THROW(confidence(nan), std::invalid_argument);
  const std::vector<double> inf{1.0, INFINITY};
  EXPECT_THROW(confidence(inf), std::invalid_argument);
}

TEST(Confidence, ShiftInvariantExactly) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> q(-64, 64);
  for (int t = 0; t < 500; ++t) {
    // Quarter-integers keep every shifted difference exact.
    std::vector<double> z(6), s(6);
    const double shift = q(rng) / 4.0;
    for (std::size_t i = 0; i < 6; ++i) {
      z[i] = q(rng) / 4.0;
      s[i] = z[i] + shift;
    }
    EXPECT_EQ(confidence(z).confidence, confidence(s).confidence);
    EXPECT_EQ(confidence(z).class_index, confidence(s).class_index);
  }
}

TEST(Histogram, UniformNetFillsTenthBin) {
  Dataset ds = gen_full_random(50, 4, -1, 1, 3);
  const auto h = histogram_confidences(uniform_net(4, 10), ds);
  ASSERT_EQ(h.counts.size(), 10u);
  ASSERT_EQ(h.edges.size(), 11u);
  EXPECT_EQ(h.counts[1], 50u);
  EXPECT_EQ(h.total(), 50u);
  EXPECT_EQ(h.fraction_above(0.5), 0.0);
  EXPECT_DOUBLE_EQ(rejection_rate(uniform_net(4, 10), ds, 0.5), 1.0);
}

TEST(Histogram, CountsPartitionAndFractionMatchesOracle) {
  Network net = make_mlp(3, {5}, 4, Activation::Tanh, false, 8);
  for (auto& l : net.layers) {
    auto& d = std::get<DenseLayer>(l);
    for (double& w : d.weights.data) w *= 4;
  }
  Dataset ds = gen_full_random(300, 3, -2, 2, 4);
  const auto h = histogram_confidences(net, ds, 7);
  std::size_t sum = 0;
  for (auto c : h.counts) sum += c;
  EXPECT_EQ(sum, 300u);
  EXPECT_DOUBLE_EQ(h.edges.front(), 0.0);
  EXPECT_DOUBLE_EQ(h.edges.back(), 1.0);
  std::size_t above = 0, below = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double c = oracle_prediction(net, ds.row(i)).confidence;
    EXPECT_GE(c, 0.25 - 1e-15);
    above += c > 0.5;
    below += c < 0.6;
  }
  EXPECT_DOUBLE_EQ(h.fraction_above(0.5), above / 300.0);
  EXPECT_DOUBLE_EQ(rejection_rate(net, ds, 0.6), below / 300.0);
  EXPECT_THROW(histogram_confidences(net, Dataset{}, 10), std::invalid_argument);
}

TEST(NeuronHeatmap, ClassicalZeroLevelSet) {
  const Layer layer = DenseLayer(Tensor(Shape{1, 2}, {-1, -2}), Tensor(Shape{1}, {5}), Activation::Tanh);
  const auto g = neuron_heatmap(layer, 0, {-5, 10}, {-5, 10}, 61);
  ASSERT_EQ(g.cells.size(), 61u * 61u);
  for (std::size_t r = 0; r < 61; ++r)
    for (std::size_t c = 0; c < 61; ++c) {
      const double x = -5 + 15.0 * c / 60, y = -5 + 15.0 * r / 60;
      const double l = -x - 2 * y + 5;
      EXPECT_NEAR(g.at(r, c).value, std::tanh(l), 1e-12);
      if (std::abs(l) > 1e-9) EXPECT_EQ(g.at(r, c).value > 0, l > 0);
    }
}

TEST(NeuronHeatmap, FgnSupportIsLocal) {
  const Layer layer = FgnDenseLayer(Tensor(Shape{1, 2}, {-1, -2}), Tensor(Shape{1}, {5}), Tensor(Shape{1, 2}, {1, 2}),
                                    Tensor(Shape{1}, {5}), Activation::Tanh);
  const auto g = neuron_heatmap(layer, 0, {-29, 31}, {-28, 32}, 121);
  std::size_t far = 0;
  for (std::size_t r = 0; r < 121; ++r)
    for (std::size_t c = 0; c < 121; ++c) {
      const double x = -29 + 60.0 * c / 120, y = -28 + 60.0 * r / 120;
      if (std::hypot(x - 1, y - 2) >= 20) {
        ++far;
        EXPECT_LT(std::abs(g.at(r, c).value), 1e-3);
      }
    }
  EXPECT_GT(far, 1000u);
  EXPECT_THROW(neuron_heatmap(layer, 1, {0, 1}, {0, 1}, 4), std::invalid_argument);
}

TEST(ActivityHeatmap, RejectsNon2dModels) {
  EXPECT_THROW(activity_heatmap(uniform_net(3, 2), {0, 1}, {0, 1}, 5), std::invalid_argument);
  const auto g = activity_heatmap(uniform_net(2, 2), {0, 1}, {0, 1}, 5);
  EXPECT_EQ(g.cells.size(), 25u);
}

TEST(ActivityHeatmap, GatelessFarFieldIsConstant) {
  Network net = make_mlp(2, {32, 16}, 2, Activation::Tanh, true, 1);
  const Dataset rings = gen_toy_rings(400, 1);
  for (auto& l : net.layers)
    if (auto* f = std::get_if<FgnDenseLayer>(&l)) {
      Tensor pts = rings.inputs;
      if (f->in_dim() != 2) pts = Tensor();
      if (pts.size()) init_fgn_layer(*f, {InitScheme::Kind::FromData}, pts, 1);
    }
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.lambda = 1e-4;
  cfg.epochs = 60;
  cfg.batch_size = 32;
  train(net, rings, cfg);

  Network gateless = net;
  gateless.use_gate = false;
  const auto far = activity_heatmap(gateless, {500, 600}, {-600, -500}, 9);
  const auto gated = activity_heatmap(net, {500, 600}, {-600, -500}, 9);
  for (const auto& cell : far.cells) {
    EXPECT_EQ(cell.class_index, far.cells[0].class_index);
    EXPECT_EQ(cell.confidence, far.cells[0].confidence);
  }
  for (const auto& cell : gated.cells) EXPECT_EQ(cell.confidence, 0.5);
}

TEST(CrossSection, ZeroWidthIsPlainPrediction) {
  Network net = make_mlp(5, {4}, 3, Activation::Tanh, false, 2);
  const std::vector<double> x{0.1, 0.2, -0.3, 0.4, 0.5};
  const std::vector<double> d1{1, 0, 0, 0, 0}, d2{0, 1, 0, 0, 0};
  const auto g = cross_section(net, x, d1, d2, 0.0, 1);
  ASSERT_EQ(g.cells.size(), 1u);
  const auto p = oracle_prediction(net, x);
  EXPECT_EQ(g.cells[0].class_index, p.class_index);
  EXPECT_NEAR(g.cells[0].confidence, p.confidence, 1e-12);

  const auto tiny = cross_section(net, x, d1, d2, 1e-9, 5);
  for (const auto& c : tiny.cells) EXPECT_NEAR(c.confidence, p.confidence, 1e-8);
}

TEST(CrossSection, BasisAndCellsMatchOracle) {
  std::mt19937_64 rng(32);
  Network net = make_mlp(6, {5}, 4, Activation::Relu, true, 3, 3.0);
  const Tensor x = random_tensor({6}, rng, -1, 1);
  const Tensor a = random_tensor({6}, rng), b = random_tensor({6}, rng);
  const auto g = cross_section(net, x.data, a.data, b.data, 2.0, 7);
  double d11 = 0, d22 = 0, d12 = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    d11 += g.dir1[i] * g.dir1[i];
    d22 += g.dir2[i] * g.dir2[i];
    d12 += g.dir1[i] * g.dir2[i];
  }
  EXPECT_NEAR(d11, 1, 1e-12);
  EXPECT_NEAR(d22, 1, 1e-12);
  EXPECT_LE(std::abs(d12), 1e-9);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 7; ++c) {
      const double u = -2 + 4.0 * c / 6, v = -2 + 4.0 * r / 6;
      std::vector<double> p(6);
      for (std::size_t i = 0; i < 6; ++i) p[i] = x[i] + u * g.dir1[i] + v * g.dir2[i];
      const auto want = oracle_prediction(net, p);
      EXPECT_EQ(g.at(r, c).class_index, want.class_index);
      EXPECT_NEAR(g.at(r, c).confidence, want.confidence, 1e-12);
    }
}

TEST(CrossSection, ParallelDirectionsRejected) {
  Network net = make_mlp(3, {2}, 2, Activation::Tanh, false, 2);
  const std::vector<double> x{0, 0, 0}, d{1, 2, 3}, d2{-2, -4, -6}, zero{0, 0, 0};
  EXPECT_THROW(cross_section(net, x, d, d2, 1.0, 3), std::invalid_argument);
  EXPECT_THROW(cross_section(net, x, d, zero, 1.0, 3), std::invalid_argument);
  EXPECT_THROW(cross_section(net, x, d, std::vector<double>{0, 1, 0}, -1.0, 3), std::invalid_argument);
}

TEST(RandomOrthogonal, UnitAndOrthogonal) {
  std::mt19937_64 rng(33);
  for (int t = 0; t < 20; ++t) {
    const Tensor a = random_tensor({50}, rng);
    const auto v = random_orthogonal(a.data, static_cast<std::uint64_t>(t));
    double dot = 0, nn = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      dot += v[i] * a[i];
      nn += v[i] * v[i];
    }
    EXPECT_NEAR(nn, 1.0, 1e-12);
    EXPECT_LE(std::abs(dot), 1e-9);
    EXPECT_EQ(v, random_orthogonal(a.data, static_cast<std::uint64_t>(t)));
  }
}

TEST(FgsmCrossSection, RightEndIsFgsmImage) {
  std::mt19937_64 rng(34);
  Network net = make_mlp(8, {6}, 3, Activation::Tanh, false, 4);
  const Tensor x = random_tensor({8}, rng, -1, 1);
  const double eps = 0.06;
  const auto g = fgsm_cross_section(net, x.data, 1, eps, 5, 9);
  const auto adv = fgsm(net, x.data, 1, eps);
  const auto want = oracle_prediction(net, adv.adversarial);
  EXPECT_EQ(g.at(2, 4).class_index, want.class_index);
  EXPECT_NEAR(g.at(2, 4).confidence, want.confidence, 1e-12);
  const auto center = oracle_prediction(net, x.data);
  EXPECT_NEAR(g.at(2, 2).confidence, center.confidence, 1e-12);
}

TEST(ImageCrossSection, RowRunsFromAToB) {
  std::mt19937_64 rng(35);
  Network net = make_mlp(8, {6}, 3, Activation::Tanh, false, 4);
  const Tensor a = random_tensor({8}, rng), b = random_tensor({8}, rng);
  const auto g = image_cross_section(net, a.data, b.data, 9, 1);
  EXPECT_NEAR(g.at(4, 0).confidence, oracle_prediction(net, a.data).confidence, 1e-12);
  EXPECT_NEAR(g.at(4, 8).confidence, oracle_prediction(net, b.data).confidence, 1e-12);
  EXPECT_THROW(image_cross_section(net, a.data, b.data, 8, 1), std::invalid_argument);
  EXPECT_THROW(image_cross_section(net, a.data, a.data, 9, 1), std::invalid_argument);
}

TEST(Render, PaletteIsDistinct) {
  std::set<std::array<std::uint8_t, 3>> colors;
  for (std::size_t k = 0; k < 10; ++k) colors.insert(class_color(k));
  EXPECT_EQ(colors.size(), 10u);
  EXPECT_EQ(class_color(13), class_color(3));
}

TEST(Render, PpmLayoutAndShading) {
  GridRender g = activity_heatmap(uniform_net(2, 10), {0, 1}, {0, 1}, 4);
  g.cells[0] = {3, 1.0, 0.0};  // bottom-left fully confident
  std::ostringstream out;
  write_grid_ppm(g, out);
  const std::string s = out.str();
  const std::string header = "P6\n4 4\n255\n";
  ASSERT_EQ(s.substr(0, header.size()), header);
  ASSERT_EQ(s.size(), header.size() + 48);
  // Uniform cells are black; grid row 0 is the last image row.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s[header.size() + i], 0);
  const auto c3 = class_color(3);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(static_cast<std::uint8_t>(s[header.size() + 36 + i]), c3[i]);
}

TEST(Render, RawPpmRamp) {
  const Layer layer = DenseLayer(Tensor(Shape{1, 2}, {1, 0}), Tensor(Shape{1}), Activation::Identity);
  const auto g = neuron_heatmap(layer, 0, {-1, 1}, {0, 1}, 3);
  std::ostringstream out;
  write_grid_ppm(g, out);
  const std::string s = out.str().substr(std::string("P6\n3 3\n255\n").size());
  // Left column is -1 (blue), middle 0 (white), right +1 (red).
  EXPECT_EQ(static_cast<std::uint8_t>(s[0]), 0);
  EXPECT_EQ(static_cast<std::uint8_t>(s[2]), 255);
  EXPECT_EQ(static_cast<std::uint8_t>(s[3]), 255);
  EXPECT_EQ(static_cast<std::uint8_t>(s[4]), 255);
  EXPECT_EQ(static_cast<std::uint8_t>(s[6]), 255);
  EXPECT_EQ(static_cast<std::uint8_t>(s[7]), 0);
}

TEST(Render, CsvHasOneRowPerCell) {
  const auto g = activity_heatmap(uniform_net(2, 3), {0, 2}, {0, 1}, 3);
  std::ostringstream out;
  write_grid_csv(g, out);
  const std::string s = out.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "row,col,u,v,class,confidence,value");
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 10);
  EXPECT_NE(s.find("\n2,1,1,1,0,"), std::string::npos);
}

}  // namespace
}  // namespace fgn

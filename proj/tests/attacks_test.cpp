#include "fgn/attacks.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <random>
#include <sstream>

#include "fgn/eval.hpp"
#include "fgn/parallel.hpp"
#include "fgn/train.hpp"
#include "test_util.hpp"

namespace fgn {
namespace {

using test::random_tensor;

// Cross-entropy through the plain single-input forward path.
double ce_oracle(const Network& net, std::span<const double> x, std::size_t label) {
  const auto z = network_forward(net, x).logits;
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s) - z[label];
}

Network toy_classifier(std::uint64_t seed = 3) {
  Network net = make_mlp(2, {8}, 2, Activation::Tanh, false, seed);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 60;
  cfg.batch_size = 32;
  cfg.seed = seed;
  train(net, gen_toy_linear(400, seed), cfg);
  return net;
}

TEST(SuccessPredicate, Table) {
  EXPECT_TRUE(attack_succeeded(3, 3, 5, 0.6));
  EXPECT_FALSE(attack_succeeded(3, 2, 5, 0.9));  // already wrong
  EXPECT_FALSE(attack_succeeded(3, 3, 3, 0.9));  // still right
  EXPECT_FALSE(attack_succeeded(3, 3, 5, 0.5));  // not confident
  EXPECT_EQ(attack_succeeded(1, 1, 0, 0.7), attack_succeeded(1, 1, 0, 0.7));
}

TEST(LossGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (bool fgn : {false, true}) {
    Network net = make_mlp(5, {6, 4}, 3, Activation::Tanh, fgn, 7, 3.0);
    for (int t = 0; t < 10; ++t) {
      const Tensor x = random_tensor({5}, rng, -1, 1);
      const std::size_t label = static_cast<std::size_t>(t % 3);
      const auto g = loss_gradient(net, x.data, label);
      for (std::size_t i = 0; i < 5; ++i) {
        std::vector<double> up = x.data, down = x.data;
        up[i] += 1e-6;
        down[i] -= 1e-6;
        const double num = (ce_oracle(net, up, label) - ce_oracle(net, down, label)) / 2e-6;
        EXPECT_LT(test::relative_error(g[i], num), 1e-5) << "fgn=" << fgn << " i=" << i;
      }
    }
  }
}

TEST(LossGradient, BatchRowsAreIndependent) {
  std::mt19937_64 rng(12);
  Network net = make_mlp(4, {5}, 3, Activation::Relu, true, 2, 2.0);
  const Tensor xs = random_tensor({6, 4}, rng, -1, 1);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  LossGradient lg(net, 6, 4);
  Tensor grad;
  const auto loss = lg(xs, labels, grad);
  for (std::size_t r = 0; r < 6; ++r) {
    const std::span<const double> row(xs.data.data() + r * 4, 4);
    const auto single = loss_gradient(net, row, labels[r]);
    EXPECT_NEAR(loss[r], ce_oracle(net, row, labels[r]), 1e-12);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(grad.at(r, i), single[i], 1e-12);
  }
}

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  Network net = toy_classifier();
  const std::vector<double> x{0.1, -0.2};
  const auto o = fgsm(net, x, confidence(network_forward(net, x).logits).class_index, 0.0);
  EXPECT_EQ(o.adversarial, x);
  EXPECT_FALSE(o.success);
}

TEST(Fgsm, StepIsSignedEpsilon) {
  std::mt19937_64 rng(13);
  Network net = make_mlp(8, {6}, 4, Activation::Tanh, false, 5);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = random_tensor({8}, rng);
    const double eps = 0.05 * (t + 1);
    const auto o = fgsm(net, x.data, static_cast<std::size_t>(t % 4), eps);
    const auto g = loss_gradient(net, x.data, static_cast<std::size_t>(t % 4));
    EXPECT_LE(o.distortion.linf, eps);
    for (std::size_t i = 0; i < 8; ++i) {
      const double expected = g[i] > 0 ? eps : g[i] < 0 ? -eps : 0.0;
      EXPECT_NEAR(o.adversarial[i] - x[i], expected, 1e-15);
      if (expected == 0) EXPECT_EQ(o.adversarial[i], x[i]);
    }
  }
}

TEST(Fgsm, ZeroGradientCoordinatesUntouched) {
  // Inputs 2 and 3 have zero weight everywhere, so their gradient is exactly 0.
  Network net = make_mlp(4, {3}, 2, Activation::Tanh, false, 9);
  auto& first = std::get<DenseLayer>(net.layers[0]);
  for (std::size_t r = 0; r < 3; ++r) first.weights.at(r, 2) = first.weights.at(r, 3) = 0.0;
  const std::vector<double> x{0.3, -0.4, 1.5, -2.5};
  const auto o = fgsm(net, x, 0, 0.7);
  EXPECT_EQ(o.adversarial[2], 1.5);
  EXPECT_EQ(o.adversarial[3], -2.5);
  const auto p = pgd(net, x, 0, 0.7, 0.1, 20);
  EXPECT_EQ(p.adversarial[2], 1.5);
  EXPECT_EQ(p.adversarial[3], -2.5);
}

TEST(Fgsm, GatedOffRegionIsFixedPoint) {
  Network net = make_mlp(3, {4}, 2, Activation::Tanh, true, 4, 1.0);
  const std::vector<double> far{1e6, -1e6, 1e6};
  const auto o = fgsm(net, far, 1, 0.5);
  EXPECT_EQ(o.adversarial, far);
  EXPECT_DOUBLE_EQ(o.adversarial_confidence, 0.5);
  EXPECT_FALSE(o.success);
}

TEST(Fgsm, NonFiniteInputFlagsFailure) {
  Network net = make_mlp(2, {3}, 2, Activation::Tanh, false, 4);
  const std::vector<double> x{std::nan(""), 0.0};
  const auto o = fgsm(net, x, 0, 0.1);
  EXPECT_TRUE(o.failed);
  EXPECT_FALSE(o.success);
}

TEST(Projection, ClipExample) {
  EXPECT_DOUBLE_EQ(project_linf(0.5, 0.75, 0.1), 0.6);
  EXPECT_DOUBLE_EQ(project_linf(0.5, 0.25, 0.1), 0.4);
  EXPECT_EQ(project_linf(0.5, 0.55, 0.1), 0.55);
}

TEST(Projection, HoldsExactlyInFloatingPoint) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> d(-3, 3), e(1e-6, 1.0);
  for (int t = 0; t < 100000; ++t) {
    const double x = d(rng), eps = e(rng);
    const double v = project_linf(x, x + d(rng), eps);
    ASSERT_LE(std::abs(v - x), eps);
  }
}

TEST(Pgd, OneFullStepEqualsFgsm) {
  std::mt19937_64 rng(15);
  Network net = make_mlp(6, {5}, 3, Activation::Tanh, true, 6, 4.0);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = random_tensor({6}, rng, -1, 1);
    const std::size_t label = static_cast<std::size_t>(t % 3);
    const auto a = fgsm(net, x.data, label, 0.3);
    const auto b = pgd(net, x.data, label, 0.3, 0.3, 1);
    EXPECT_EQ(a.adversarial, b.adversarial);
    EXPECT_EQ(a.success, b.success);
  }
}

TEST(Pgd, IteratesStayInBallAndBestLossIsReturned) {
  std::mt19937_64 rng(16);
  Network net = make_mlp(6, {8}, 3, Activation::Relu, false, 8);
  const Tensor xs = random_tensor({5, 6}, rng, -1, 1);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1};
  const double eps = 0.4;
  std::size_t calls = 0, violations = 0;
  std::vector<std::vector<double>> best_loss(5);
  const auto out = pgd_batch(net, xs, labels, eps, eps / 30, 50, [&](std::size_t step, const Tensor& it) {
    EXPECT_EQ(step, ++calls);
    for (std::size_t r = 0; r < 5; ++r) {
      std::span<const double> row(it.data.data() + r * 6, 6);
      for (std::size_t i = 0; i < 6; ++i) violations += std::abs(row[i] - xs.at(r, i)) > eps;
      best_loss[r].push_back(ce_oracle(net, row, labels[r]));
    }
  });
  EXPECT_EQ(calls, 50u);
  EXPECT_EQ(violations, 0u);
  for (std::size_t r = 0; r < 5; ++r) {
    const double returned = ce_oracle(net, out[r].adversarial, labels[r]);
    for (double l : best_loss[r]) EXPECT_GE(returned, l - 1e-12);
  }
}

TEST(Pgd, RejectsStepLargerThanEpsilon) {
  Network net = make_mlp(2, {3}, 2, Activation::Tanh, false, 4);
  const std::vector<double> x{0, 0};
  EXPECT_THROW(pgd(net, x, 0, 0.1, 0.2, 5), std::invalid_argument);
  EXPECT_THROW(pgd(net, x, 0, 0.1, 0.05, 0), std::invalid_argument);
}

TEST(CwPieces, BoxAndMargin) {
  EXPECT_DOUBLE_EQ(cw_to_box(0.0, 0.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(cw_to_box(0.0, -1.0, 3.0), 1.0);
  EXPECT_NEAR(cw_to_box(40.0, 0.0, 1.0), 1.0, 1e-15);
  const std::vector<double> z{1.0, 3.0, 2.0};
  EXPECT_DOUBLE_EQ(cw_margin(z, 0), 2.0);
  EXPECT_DOUBLE_EQ(cw_margin(z, 1), 0.0);
  EXPECT_DOUBLE_EQ(cw_margin(z, 2), 1.0);
  const std::vector<double> tie{2.0, 2.0};
  EXPECT_DOUBLE_EQ(cw_margin(tie, 1), 0.0);
  // f <= 0 exactly when the target is (weakly) maximal.
  std::mt19937_64 rng(17);
  for (int t = 0; t < 1000; ++t) {
    const Tensor l = random_tensor({4}, rng);
    for (std::size_t k = 0; k < 4; ++k) {
      bool maximal = true;
      for (std::size_t i = 0; i < 4; ++i) maximal &= l[i] <= l[k];
      EXPECT_EQ(cw_margin(l.data, k) <= 0, maximal);
    }
  }
}

TEST(Cw, OutputsStayInBox) {
  std::mt19937_64 rng(18);
  Network net = make_mlp(4, {6}, 3, Activation::Tanh, false, 10);
  CwConfig cfg;
  cfg.box_lo = -1;
  cfg.box_hi = 2;
  cfg.binary_steps = 4;
  cfg.inner_iters = 50;
  cfg.inner_lr = 0.5;
  cfg.eps_max = 100;
  for (int t = 0; t < 10; ++t) {
    const Tensor x = random_tensor({4}, rng, -1, 2);
    const std::size_t label = confidence(network_forward(net, x.data).logits).class_index;
    const auto o = cw(net, x.data, label, cfg);
    for (double v : o.outcome.adversarial) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 2.0);
    }
    EXPECT_NE(o.target, label);
  }
}

Network rings_classifier() {
  Network net = make_mlp(2, {16, 16}, 2, Activation::Tanh, false, 5);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.epochs = 80;
  cfg.batch_size = 32;
  cfg.seed = 5;
  train(net, gen_toy_rings(600, 5), cfg);
  return net;
}

TEST(Cw, SucceedsOnRingsNet) {
  // Every rings point lies within ~1.25 of the class boundary.
  Network net = rings_classifier();
  const Dataset pts = gen_toy_rings(60, 21);
  CwConfig cfg;
  cfg.box_lo = -4;
  cfg.box_hi = 6;
  cfg.eps_max = 2.0;
  cfg.c_low = 1e-2;
  cfg.c_high = 1e2;
  std::size_t attempted = 0, succeeded = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto x = pts.row(i);
    if (confidence(network_forward(net, x).logits).class_index != pts.labels[i]) continue;
    ++attempted;
    const auto o = cw(net, x, pts.labels[i], cfg);
    if (o.outcome.success) {
      ++succeeded;
      EXPECT_LE(o.outcome.distortion.l2, 2.0);
    }
  }
  ASSERT_GT(attempted, 50u);
  EXPECT_GE(static_cast<double>(succeeded), 0.9 * static_cast<double>(attempted));
}

TEST(Cw, BisectionReturnsSmallestDistortionProbe) {
  Network net = toy_classifier();
  CwConfig cfg;
  cfg.box_lo = -4;
  cfg.box_hi = 6;
  cfg.eps_max = 2.0;
  cfg.c_low = 0.01;
  cfg.c_high = 1.0;
  cfg.binary_steps = 7;
  const Dataset pts = gen_toy_linear(20, 22);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto x = pts.row(i);
    const std::size_t label = pts.labels[i];
    if (confidence(network_forward(net, x).logits).class_index != label) continue;
    const auto hi = cw_fixed(net, x, label, 1 - label, 1.0, cfg);
    const auto lo = cw_fixed(net, x, label, 1 - label, 0.01, cfg);
    const auto o = cw(net, x, label, cfg);
    ASSERT_EQ(o.probes.size(), 7u);
    // Independent re-run of every probed constant.
    double best = INFINITY, best_c = 0;
    for (const CwProbe& p : o.probes) {
      const auto r = cw_fixed(net, x, label, o.target, p.c, cfg);
      EXPECT_EQ(r.outcome.success, p.success);
      EXPECT_EQ(r.outcome.distortion.l2, p.l2);
      if (p.success && p.l2 < best) {
        best = p.l2;
        best_c = p.c;
      }
    }
    if (best_c > 0) {
      EXPECT_TRUE(o.outcome.success);
      EXPECT_EQ(o.outcome.distortion.l2, best);
      EXPECT_EQ(o.c, best_c);
    } else {
      EXPECT_FALSE(o.outcome.success);
    }
    if (hi.outcome.success && !lo.outcome.success) {
      ++checked;
      EXPECT_GT(o.c, 0.01);
      EXPECT_LE(o.c, 1.0);
      EXPECT_TRUE(o.outcome.success);
    }
  }
  EXPECT_GT(checked, 0u);
}

TEST(Cw, TinyBudgetAlwaysFails) {
  Network net = toy_classifier();
  CwConfig cfg;
  cfg.box_lo = -4;
  cfg.box_hi = 6;
  cfg.eps_max = 1e-9;
  const Dataset pts = gen_toy_linear(20, 23);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_FALSE(cw(net, pts.row(i), pts.labels[i], cfg).outcome.success);
}

TEST(Sweep, CountsAndCsv) {
  Network net = toy_classifier();
  const Dataset pts = gen_toy_linear(200, 24);
  AttackConfig cfg;
  const auto res = attack_sweep(net, pts, cfg, {0.0, 0.5, 1.0, 2.0}, 3);
  ASSERT_EQ(res.rows.size(), 4u);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    correct += confidence(network_forward(net, pts.row(i)).logits).class_index == pts.labels[i];
  for (const auto& r : res.rows) EXPECT_EQ(r.attempted, correct);
  EXPECT_EQ(res.rows[0].succeeded, 0u);
  for (std::size_t k = 1; k < 4; ++k) EXPECT_GE(res.rows[k].succeeded, res.rows[k - 1].succeeded);
  EXPECT_GT(res.rows[3].succeeded, 0u);
  EXPECT_EQ(res.samples[2].size(), 3u);
  EXPECT_THROW(attack_sweep(net, pts, cfg, {0.5, 0.1}), std::invalid_argument);

  std::ostringstream csv;
  write_sweep_csv(res.rows, csv);
  const std::string text = csv.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "epsilon,attempted,succeeded,mean_l2,mean_linf");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}

TEST(Sweep, PgdAtLeastFgsmOnToyNet) {
  Network net = toy_classifier();
  const Dataset pts = gen_toy_linear(200, 25);
  AttackConfig f, p;
  p.kind = AttackKind::Pgd;
  const std::vector<double> eps{0.25, 0.5, 1.0};
  const auto a = attack_sweep(net, pts, f, eps);
  const auto b = attack_sweep(net, pts, p, eps);
  for (std::size_t k = 0; k < eps.size(); ++k) EXPECT_GE(b.rows[k].succeeded, a.rows[k].succeeded);
}

TEST(Threads, EnvCapAndCoverage) {
  ::setenv("FGN_THREADS", "2", 1);
  EXPECT_LE(worker_count(), 2u);
  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) ++hits[i];
  });
  for (int h : hits) EXPECT_EQ(h, 1);
  ::setenv("FGN_THREADS", "zero", 1);
  EXPECT_THROW(worker_count(), std::invalid_argument);
  ::unsetenv("FGN_THREADS");
  EXPECT_GE(worker_count(), 1u);
}

}  // namespace
}  // namespace fgn

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mpt/adamw.hpp"

using namespace mpt;

TEST(AdamW, FirstStepMovesByLearningRateTimesSign) {
  Tensor<double> p({3}, {1.0, -2.0, 0.5}, true);
  p.mutable_grad()[0] = 3.0;
  p.mutable_grad()[1] = -1e-3;
  p.mutable_grad()[2] = 0.0;
  AdamW<double> opt({{"p", p, false}}, {0.01, 0.9, 0.999, 1e-8, 0.0});
  opt.step();
  EXPECT_NEAR(p.values()[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p.values()[1], -2.0 + 0.01, 1e-6);
  EXPECT_DOUBLE_EQ(p.values()[2], 0.5);
}

TEST(AdamW, MatchesHandRolledRecurrence) {
  const double lr = 0.05, b1 = 0.8, b2 = 0.95, eps = 1e-6, wd = 0.3;
  const std::vector<double> grads{0.7, -0.2, 1.5, 0.1};
  Tensor<double> p({1}, {2.0}, true);
  AdamW<double> opt({{"p", p, true}}, {lr, b1, b2, eps, wd});
  double x = 2.0, m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    p.zero_grad();
    p.mutable_grad()[0] = grads[t - 1];
    opt.step();
    x *= 1.0 - lr * wd;
    m = b1 * m + (1 - b1) * grads[t - 1];
    v = b2 * v + (1 - b2) * grads[t - 1] * grads[t - 1];
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(p.values()[0], x, 1e-12) << "step " << t;
  }
  EXPECT_EQ(opt.step_count(), 4);
}

TEST(AdamW, DecayAppliesOnlyToFlaggedParams) {
  Tensor<double> a({1}, {1.0}, true), b({1}, {1.0}, true);
  AdamW<double> opt({{"a", a, true}, {"b", b, false}}, {0.1, 0.9, 0.999, 1e-8, 0.5});
  opt.step();  // no gradients: only decay acts
  EXPECT_DOUBLE_EQ(a.values()[0], 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(b.values()[0], 1.0);
}

TEST(AdamW, NamesDivergingParameter) {
  Tensor<double> p({1}, {1.0}, true);
  p.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamW<double> opt({{"layer0.wq", p, true}}, {});
  try {
    opt.step();
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.wq"), std::string::npos);
  }
}

TEST(ClipGradNorm, RescalesToMaxNormAndReportsOriginal) {
  Tensor<double> a({2}, {0, 0}, true), b({1}, {0}, true);
  a.mutable_grad()[0] = 3.0;
  a.mutable_grad()[1] = 0.0;
  b.mutable_grad()[0] = 4.0;
  std::vector<Param<double>> params{{"a", a, true}, {"b", b, true}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(global_grad_norm(params), 1.0, 1e-9);
  EXPECT_NEAR(a.grad()[0] / b.grad()[0], 0.75, 1e-12);
}

TEST(ClipGradNorm, LeavesSmallGradientsAlone) {
  Tensor<double> a({1}, {0}, true);
  a.mutable_grad()[0] = 0.5;
  std::vector<Param<double>> params{{"a", a, true}};
  clip_grad_norm(params, 1.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.5);
}

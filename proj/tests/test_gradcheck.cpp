#include <gtest/gtest.h>

#include "fckit/gradcheck.hpp"

using namespace fckit;

TEST(RelativeError, Definition) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

TEST(GradCheck, DenseRandomInput) {
  auto r = grad_check("dense", 1);
  EXPECT_LE(r.max_rel_error, 1e-4);
  ASSERT_EQ(r.per_parameter.size(), 3u);
  EXPECT_EQ(r.per_parameter[0].name, "input");
}

TEST(GradCheck, Conv2dSmall) { EXPECT_LE(grad_check("conv2d", 1).max_rel_error, 1e-4); }

TEST(GradCheck, LstmRandomState) {
  auto r = grad_check("lstm_step", 1);
  EXPECT_LE(r.max_rel_error, 1e-4);
  EXPECT_EQ(r.per_parameter.size(), 11u);
}

class PrimitiveGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradients, TenSeedsWithinTolerance) {
  auto r = grad_check_seeds(GetParam(), 10);
  EXPECT_EQ(r.seeds, 10);
  EXPECT_TRUE(r.passed()) << GetParam() << " max rel err " << r.max_rel_error;
  for (const auto& p : r.per_parameter) EXPECT_LE(p.max_rel_error, 1e-4) << GetParam() << "/" << p.name;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradients, ::testing::ValuesIn(gradcheck_primitives()));

TEST(GradCheck, DetectsWrongGradient) {
  // sanity: the harness must flag a deliberately broken backward
  std::mt19937_64 rng(1);
  detail::GradProblem p = detail::make_problem("tanh", rng);
  auto good = p.analytic;
  p.analytic = [good](const std::vector<detail::NamedInput>& in) {
    auto g = good(in);
    g[0][0] *= 1.01;
    return g;
  };
  auto r = detail::evaluate("tanh", p, kGradCheckStep);
  EXPECT_GT(r.max_rel_error, 1e-3);
}

TEST(GradCheck, UnknownPrimitiveRejected) { EXPECT_THROW(grad_check("conv3d", 1), Error); }

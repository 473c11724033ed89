#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fckit/metrics.hpp"

using namespace fckit;

namespace {

// Textbook two-pass evaluation of 2*rho*sx*sy / (sx^2 + sy^2 + (mx - my)^2)
// in extended precision; shares no code with the shipped implementation.
long double ccc_two_pass(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double vx = 0, vy = 0, c = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    c += (x[i] - mx) * (y[i] - my);
  }
  vx /= n;
  vy /= n;
  c /= n;
  const long double sx = std::sqrt(vx), sy = std::sqrt(vy);
  const long double rho = c / (sx * sy);
  return 2 * rho * sx * sy / (vx + vy + (mx - my) * (mx - my));
}

PairedSeries random_pair(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::uniform_real_distribution<double> shift(-0.5, 0.5), scale(0.2, 2.0), mix(-1.0, 1.0);
  const double a = mix(rng), sh = shift(rng), sc = scale(rng);
  PairedSeries s;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = d(rng);
    s.annotations.push_back(y);
    s.predictions.push_back(sc * (a * y + (1 - std::abs(a)) * d(rng)) + sh);
  }
  return s;
}

}  // namespace

TEST(Pearson, LinearCases) {
  EXPECT_NEAR(pearson({{1, 2, 3}, {3, 5, 7}}).rho, 1.0, 1e-12);
  EXPECT_NEAR(pearson({{1, 2, 3}, {-1, -2, -3}}).rho, -1.0, 1e-12);
  auto d = pearson({{2, 2, 2}, {1, 5, 3}});
  EXPECT_EQ(d.rho, 0.0);
  EXPECT_TRUE(d.degenerate);
  EXPECT_FALSE(pearson({{1, 2, 3}, {3, 5, 7}}).degenerate);
}

TEST(Pearson, RejectsShortOrMismatched) {
  EXPECT_THROW(pearson({{1}, {1}}), Error);
  EXPECT_THROW(pearson({{1, 2}, {1, 2, 3}}), Error);
  EXPECT_THROW(ccc(PairedSeries{{1, NAN}, {1, 2}}), Error);
}

TEST(Ccc, HandCase) {
  // cov = 1/3, var_x = 2/3, var_y = 1/6  ->  (2/3) / (5/6) = 0.8
  EXPECT_NEAR(ccc({{-1, 0, 1}, {-0.5, 0, 0.5}}), 0.8, 1e-9);
  EXPECT_NEAR(static_cast<double>(ccc_two_pass({-1, 0, 1}, {-0.5, 0, 0.5})), 0.8, 1e-15);
}

TEST(Ccc, IdenticalAndConstant) {
  EXPECT_DOUBLE_EQ(ccc({{0.1, -0.4, 0.9}, {0.1, -0.4, 0.9}}), 1.0);
  EXPECT_EQ(ccc({{0.3, 0.3, 0.3}, {-0.2, 0.5, 0.1}}), 0.0);
  EXPECT_EQ(ccc({{0.3, 0.3}, {0.3, 0.3}}), 1.0);
  EXPECT_EQ(ccc({{0.3, 0.3}, {0.1, 0.1}}), 0.0);
}

TEST(Ccc, RejectsShort) { EXPECT_THROW(ccc(PairedSeries{{1}, {1}}), Error); }

TEST(CccProperties, OracleEquivalenceOnRandomPairs) {
  std::mt19937_64 rng(2020);
  std::uniform_int_distribution<std::size_t> len(2, 64);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto s = random_pair(rng, len(rng));
    const double shipped = ccc(s);
    const double oracle = static_cast<double>(ccc_two_pass(s.predictions, s.annotations));
    worst = std::max(worst, std::abs(shipped - oracle));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(CccProperties, SymmetryBoundsAndShiftInvariance) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> len(3, 64);
  std::uniform_real_distribution<double> shift(-10, 10);
  for (int trial = 0; trial < 500; ++trial) {
    auto s = random_pair(rng, len(rng));
    const double c = ccc(s);
    EXPECT_NEAR(ccc(s.annotations, s.predictions), c, 1e-15);
    EXPECT_NEAR(ccc(s.predictions, s.predictions), 1.0, 1e-12);
    EXPECT_LE(std::abs(c), std::abs(pearson(s).rho) + 1e-12);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    const double k = shift(rng);
    PairedSeries shifted = s;
    for (auto& v : shifted.predictions) v += k;
    for (auto& v : shifted.annotations) v += k;
    EXPECT_NEAR(ccc(shifted), c, 1e-12);
    auto m = moments(s);
    EXPECT_LE(m.cov * m.cov, m.var_x * m.var_y * (1 + 1e-12));
  }
}

TEST(Accuracy, Basics) {
  std::vector<int> gold{0, 1, 2, 3};
  EXPECT_DOUBLE_EQ(accuracy(std::vector<int>{0, 1, 2, 0}, gold), 0.75);
  EXPECT_DOUBLE_EQ(accuracy(gold, gold), 1.0);
  EXPECT_DOUBLE_EQ(accuracy(std::vector<int>{1, 2, 3, 0}, gold), 0.0);
  EXPECT_THROW(accuracy(std::vector<int>{1}, gold), Error);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), Error);
}

TEST(F1, PerfectAndHandCase) {
  std::vector<int> gold{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(f1_score(gold, gold, 2).f1, 1.0);
  auto r = f1_score(std::vector<int>{0, 0, 0, 0}, gold, 2);
  EXPECT_NEAR(r.per_class[0], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.per_class[1], 0.0);
  EXPECT_NEAR(r.f1, 1.0 / 3.0, 1e-15);
}

TEST(F1, AbsentClassesExcludedFromMacro) {
  // K=7 but only classes 0 and 1 occur anywhere
  std::vector<int> gold{0, 0, 1, 1};
  auto r = f1_score(std::vector<int>{0, 0, 0, 0}, gold, 7);
  EXPECT_NEAR(r.f1, 1.0 / 3.0, 1e-15);
  EXPECT_TRUE(std::isnan(r.per_class[4]));
  // a class that is only predicted counts with F1 0
  auto r2 = f1_score(std::vector<int>{0, 0, 1, 5}, gold, 7);
  EXPECT_NEAR(r2.f1, (1.0 + 2.0 / 3.0 + 0.0) / 3.0, 1e-15);
}

TEST(F1, Weighted) {
  std::vector<int> gold{0, 0, 0, 1};
  auto r = f1_score(std::vector<int>{0, 0, 0, 0}, gold, 2, F1Averaging::weighted);
  // class0: P=3/4 R=1 F1=6/7 (support 3); class1: 0 (support 1)
  EXPECT_NEAR(r.f1, (3 * 6.0 / 7.0) / 4.0, 1e-15);
}

TEST(F1, RejectsOutOfRange) {
  EXPECT_THROW(f1_score(std::vector<int>{2}, std::vector<int>{0}, 2), Error);
  EXPECT_THROW(f1_score(std::vector<int>{0}, std::vector<int>{-1}, 2), Error);
}

TEST(Confusion, ConservationAndTrace) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> cls(0, 6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> p(40), g(40);
    for (auto& v : p) v = cls(rng);
    for (auto& v : g) v = cls(rng);
    auto cm = confusion_matrix(p, g, 7);
    EXPECT_EQ(cm.total(), 40u);
    EXPECT_DOUBLE_EQ(accuracy(p, g), static_cast<double>(cm.trace()) / 40.0);
  }
}

TEST(Report, TableRowAndCsv) {
  MetricsReport r;
  r.ccc_arousal = 1.0;
  r.ccc_valence = 1.0;
  r.f1 = 1.0;
  r.accuracy = 1.0;
  EXPECT_EQ(table_header(), "Arousal,Valence,F1-Score,Accuracy");
  EXPECT_EQ(table_row(r), "1.0000,1.0000,1.0000,1.0000");
  MetricsReport partial;
  partial.ccc_arousal = 0.5;
  EXPECT_EQ(table_row(partial), "0.5000,-,-,-");
  EXPECT_NE(metrics_csv(r).find("metric,value\nccc_arousal,1\n"), std::string::npos);
  auto cm = confusion_matrix(std::vector<int>{0, 1}, std::vector<int>{0, 0}, 2);
  EXPECT_EQ(confusion_csv(cm, {"A", "B"}), "gold\\pred,A,B\nA,1,1\nB,0,0\n");
}

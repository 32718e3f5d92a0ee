#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "cotok/tensor.hpp"

using namespace cotok;

TEST(Tensor, ShapeHelpers) {
  EXPECT_EQ(shape_numel({2, 3, 4}), 24u);
  EXPECT_EQ(shape_numel({}), 1u);
  EXPECT_EQ(shape_str({2, 3}), "[2x3]");
}

TEST(Tensor, RowMajorAccess) {
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 0), 4.0f);
  EXPECT_EQ(t.row(1)[2], 6.0f);
  const auto d = t.cast<double>();
  EXPECT_EQ(d.shape, t.shape);
  EXPECT_DOUBLE_EQ(d(0, 2), 3.0);
}

TEST(Tensor, RejectsMismatchedData) { EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), Error); }

TEST(Tensor, AllFinite) {
  std::vector<double> v{1.0, 2.0};
  EXPECT_TRUE(all_finite<double>(v));
  v.push_back(std::numeric_limits<double>::quiet_NaN());
  EXPECT_FALSE(all_finite<double>(v));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs |= x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndIndexRanges) {
  Rng rng(1);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const double u = rng.uniform(-2.0, 3.0);
    ASSERT_GE(u, -2.0);
    ASSERT_LT(u, 3.0);
    ++counts[rng.index(7)];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
  EXPECT_THROW(rng.index(0), Error);
}

TEST(Rng, NormalMoments) {
  Rng rng(5);
  double sum = 0, sq = 0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.02);
  EXPECT_NEAR(sq / n, 1.0, 0.03);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(9);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(w.begin(), w.end());
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

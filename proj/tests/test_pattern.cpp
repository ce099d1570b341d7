#include <gtest/gtest.h>

#include <set>

#include "maskanneal/pattern.hpp"
#include "maskanneal/rng.hpp"
#include "oracle/oracles.hpp"

using namespace maskanneal;

TEST(IterGroups, Nofm24TilesRowMajor) {
  auto groups = iter_groups(SparsityPattern::nofm(2, 4), 1, 8);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].members.front(), std::make_pair(std::size_t(0), std::size_t(0)));
  EXPECT_EQ(groups[0].members.back(), std::make_pair(std::size_t(0), std::size_t(3)));
  EXPECT_EQ(groups[1].members.front(), std::make_pair(std::size_t(0), std::size_t(4)));
  EXPECT_EQ(groups[1].members.back(), std::make_pair(std::size_t(0), std::size_t(7)));
}

TEST(IterGroups, BlockHalfTiles) {
  auto groups = iter_groups(SparsityPattern::block_half(16, 16), 32, 32);
  ASSERT_EQ(groups.size(), 4u);
  for (const auto& g : groups) EXPECT_EQ(g.members.size(), 256u);
}

TEST(IterGroups, IncompatibleShapeThrows) {
  EXPECT_THROW(iter_groups(SparsityPattern::nofm(2, 4), 1, 6), std::invalid_argument);
  EXPECT_THROW(iter_groups(SparsityPattern::block_half(16, 16), 24, 32),
               std::invalid_argument);
}

TEST(IterGroups, PartitionCoversEveryCoordinateOnce) {
  RngStream rng(7, "partition");
  const SparsityPattern patterns[] = {SparsityPattern::nofm(2, 4), SparsityPattern::nofm(4, 8),
                                      SparsityPattern::nofm(1, 2),
                                      SparsityPattern::block_half(4, 4),
                                      SparsityPattern::block_half(2, 8)};
  const std::pair<std::size_t, std::size_t> shapes[] = {{4, 8}, {8, 16}, {16, 32}, {64, 64}};
  for (const auto& p : patterns) {
    for (auto [rows, cols] : shapes) {
      if (!p.shape_compatible(rows, cols)) continue;
      std::set<std::pair<std::size_t, std::size_t>> seen;
      std::size_t total = 0;
      for (const auto& g : iter_groups(p, rows, cols)) {
        EXPECT_EQ(int(g.members.size()), p.group_size());
        for (auto rc : g.members) {
          EXPECT_TRUE(seen.insert(rc).second) << "coordinate covered twice";
          ++total;
        }
      }
      EXPECT_EQ(total, rows * cols);
    }
  }
}

TEST(ProjectStructured, KeepsTopTwoOfFour) {
  Mat scores(1, 4);
  scores[0] = 3;
  scores[1] = 1;
  scores[2] = 2;
  scores[3] = 0;
  Mat mask = project_structured(scores, SparsityPattern::nofm(2, 4));
  EXPECT_EQ(mask[0], 1.0);
  EXPECT_EQ(mask[1], 0.0);
  EXPECT_EQ(mask[2], 1.0);
  EXPECT_EQ(mask[3], 0.0);
}

TEST(ProjectStructured, TieBreakPrefersLowestIndex) {
  Mat scores(1, 4, 5.0);
  Mat mask = project_structured(scores, SparsityPattern::nofm(2, 4));
  EXPECT_EQ(mask[0], 1.0);
  EXPECT_EQ(mask[1], 1.0);
  EXPECT_EQ(mask[2], 0.0);
  EXPECT_EQ(mask[3], 0.0);
}

TEST(ProjectStructured, BlockRampKeepsUpperHalf) {
  Mat scores(16, 16);
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = double(i);
  Mat mask = project_structured(scores, SparsityPattern::block_half(16, 16));
  for (std::size_t i = 0; i < scores.size(); ++i) EXPECT_EQ(mask[i], i >= 128 ? 1.0 : 0.0);
}

TEST(ProjectStructured, NonFiniteScoreThrows) {
  Mat scores(1, 4, 0.0);
  scores[2] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(project_structured(scores, SparsityPattern::nofm(2, 4)), std::invalid_argument);
}

TEST(ProjectStructured, MatchesExhaustiveEnumeration) {
  RngStream rng(11, "proj");
  for (int m : {4, 8}) {
    const int n = m / 2;
    const SparsityPattern p = SparsityPattern::nofm(n, m);
    for (int trial = 0; trial < 500; ++trial) {
      Mat scores(1, std::size_t(m));
      for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = rng.normal();
      Mat mask = project_structured(scores, p);
      auto res = oracle::exhaustive_group_project(scores.values(), n);
      double kept = 0.0;
      std::vector<int> kept_idx;
      for (int i = 0; i < m; ++i)
        if (mask[std::size_t(i)] == 1.0) {
          kept += scores[std::size_t(i)];
          kept_idx.push_back(i);
        }
      EXPECT_NEAR(kept, res.best_sum, 1e-12);
      bool found = false;
      for (const auto& opt : res.all_optima) found = found || opt == kept_idx;
      EXPECT_TRUE(found) << "projection picked a non-optimal keep set";
    }
  }
}

TEST(ProjectStructured, IdempotentOnOwnOutput) {
  RngStream rng(13, "idem");
  Mat scores(8, 16);
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = rng.normal();
  const SparsityPattern p = SparsityPattern::nofm(2, 4);
  Mat mask = project_structured(scores, p);
  Mat again = project_structured(mask, p);
  for (std::size_t i = 0; i < mask.size(); ++i) EXPECT_EQ(mask[i], again[i]);
}

TEST(CheckFeasible, ProjectionOutputIsFeasible) {
  RngStream rng(17, "feas");
  for (auto p : {SparsityPattern::nofm(2, 4), SparsityPattern::block_half(4, 4)}) {
    Mat scores(8, 16);
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = rng.normal();
    EXPECT_TRUE(check_feasible(project_structured(scores, p), p).ok);
  }
}

TEST(CheckFeasible, AllOnesAndAllZerosRejected) {
  const SparsityPattern p = SparsityPattern::nofm(2, 4);
  Mat ones(2, 8, 1.0);
  auto rep = check_feasible(ones, p);
  EXPECT_FALSE(rep.ok);
  EXPECT_EQ(rep.group_ordinal, 0u);
  EXPECT_EQ(rep.found, 4);
  EXPECT_EQ(rep.expected, 2);

  Mat zeros(2, 8, 0.0);
  EXPECT_FALSE(check_feasible(zeros, p).ok);
}

TEST(CheckFeasible, NonBinaryEntriesRejected) {
  const SparsityPattern p = SparsityPattern::nofm(2, 4);
  Mat m(1, 4, 0.0);
  m[0] = 1.0;
  m[1] = 0.5;
  EXPECT_FALSE(check_feasible(m, p).ok);
}

TEST(Pattern, ParseRoundTrip) {
  EXPECT_EQ(SparsityPattern::parse("2:4").to_string(), "2:4");
  EXPECT_EQ(SparsityPattern::parse("block16x16").to_string(), "block16x16");
  EXPECT_THROW(SparsityPattern::parse("junk"), std::exception);
  EXPECT_THROW(SparsityPattern::nofm(4, 4), std::invalid_argument);
  EXPECT_THROW(SparsityPattern::block_half(3, 3), std::invalid_argument);
}

#include <gtest/gtest.h>

#include <set>

#include "pcn/gradcheck.hpp"

using namespace pcn;

TEST(RelativeError, UsesTheLargestMagnitudeAndTheFloor) {
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-6), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0, 1e-6), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-4), 1e-5);
  EXPECT_DOUBLE_EQ(relative_error(-2.0, 2.0, 1e-6), 2.0);
}

TEST(GradCheck, PlainDoubleIsTight) {
  GradCheckOptions o;
  o.plain = true;
  o.cycles = 0;
  o.samples = 8;
  const auto rep = gradcheck_model<double>(o);
  EXPECT_LT(rep.max_rel_err, GradCheckTolerance<double>::threshold);
}

TEST(GradCheck, TiedPcnDoubleCoversEveryGroup) {
  GradCheckOptions o;
  o.tied = true;
  o.cycles = 2;
  o.samples = 6;
  const auto rep = gradcheck_model<double>(o);
  EXPECT_LT(rep.max_rel_err, GradCheckTolerance<double>::threshold);
  std::set<std::string> names;
  for (const auto& g : rep.groups) {
    EXPECT_GT(g.checked, 0u) << g.group;
    names.insert(g.group);
  }
  // feedforward, feedback and both rate families all take part in the loss
  for (const char* want : {"ff_w", "ff_b", "rate_a", "rate_b", "fc_w", "fc_b"})
    EXPECT_TRUE(std::any_of(names.begin(), names.end(), [&](const std::string& n) { return n.rfind(want, 0) == 0; }))
        << want;
}

TEST(GradCheck, UntiedPcnFloatWithinSinglePrecisionTolerance) {
  GradCheckOptions o;
  o.cycles = 1;
  o.samples = 6;
  const auto rep = gradcheck_model<float>(o);
  EXPECT_LT(rep.max_rel_err, GradCheckTolerance<float>::threshold);
  EXPECT_TRUE(std::any_of(rep.groups.begin(), rep.groups.end(),
                          [](const GroupResult& g) { return g.group.rfind("fb_w", 0) == 0; }));
}

#include <gtest/gtest.h>

#include "aqf/verify.hpp"

namespace aqf {
namespace {

TEST(Verify, SuitePasses) {
  VerifyOptions opt;
  opt.gradient_seeds = 20;
  const VerifyReport r = run_verify(opt);
  for (const auto& c : r.checks) EXPECT_TRUE(c.passed) << c.name << " value " << c.value << ": " << c.detail;
  EXPECT_TRUE(r.passed());
}

TEST(Verify, RatioCheckReportsTwo) {
  const CheckResult c = verify::prop1_ratio(20, 3);
  EXPECT_TRUE(c.passed);
  EXPECT_GE(c.value, 1.999);
  EXPECT_LE(c.value, 2.001);
}

TEST(Verify, InjectedNonMonotoneTransformerIsNamed) {
  VerifyOptions opt;
  opt.gradient_seeds = 2;
  opt.inject_nonmonotone = true;
  const VerifyReport r = run_verify(opt);
  EXPECT_FALSE(r.passed());
  int failed = 0;
  for (const auto& c : r.checks) {
    if (!c.passed) {
      ++failed;
      EXPECT_NE(c.name.find("fixture-nonmonotone"), std::string::npos) << c.name;
    }
  }
  EXPECT_EQ(failed, 1);
}

TEST(Verify, JsonListsEveryCheck) {
  VerifyOptions opt;
  opt.gradient_seeds = 2;
  const VerifyReport r = run_verify(opt);
  const json j = r.to_json();
  EXPECT_EQ(j.at("checks").size(), r.checks.size());
  EXPECT_EQ(j.at("passed").get<bool>(), r.passed());
}

}  // namespace
}  // namespace aqf

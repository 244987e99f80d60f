#include <gtest/gtest.h>

#include "ecgmamba/runtime.hpp"
#include "ecgmamba/verify.hpp"

using namespace ecgmamba;

TEST(Verify, RelativeErrorIsNormwise) {
  EXPECT_DOUBLE_EQ(verify::relative_error(Tensor({2}, {1.0, 0.0}), Tensor({2}, {1.0, 1e-3})), 1e-3);
  EXPECT_DOUBLE_EQ(verify::relative_error(Tensor({1}, 0.0), Tensor({1}, 1e-9)), 1e-3);
}

TEST(Verify, FilterSelectsByPrefix) {
  const std::vector<verify::CheckResult> r = verify::run_checks("metrics,tensor.examples");
  ASSERT_EQ(r.size(), 4u);
  for (const verify::CheckResult& c : r) EXPECT_TRUE(c.passed) << c.name << ": " << c.observed;
  EXPECT_EQ(verify::to_json(r)["checks"].size(), 4u);
  EXPECT_TRUE(verify::run_checks("no.such.check").empty());
}

TEST(Verify, FaultIsCaught) {
  runtime::ScopedFault fault(runtime::Fault::scan_backward_sign_flip);
  const std::vector<verify::CheckResult> r = verify::run_checks("grad.fused_scan");
  ASSERT_EQ(r.size(), 1u);
  EXPECT_FALSE(r[0].passed);
}

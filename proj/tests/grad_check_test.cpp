// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "ckstn/branch_trace.hpp"
#include "ckstn/errors.hpp"
#include "ckstn/grad_check.hpp"
#include "ckstn/ops.hpp"
#include "test_util.hpp"

namespace ckstn {
namespace {

// sin(w x) elementwise with a backward scaled by `grad_scale` (1 is exact).
Tensor wavy(const Tensor& x, double w, double grad_scale = 1.0) {
  Matrix out = x.value();
  for (double& v : out.data) v = std::sin(w * v);
  return Tensor::make("wavy", std::move(out), {x}, [x, w, grad_scale](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += grad_scale * g.data[i] * w * std::cos(w * x.value().data[i]);
  });
}

TEST(BranchRecorder, DigestTracksDecisionsAndNests) {
  EXPECT_FALSE(branch_recording());
  record_branch(1);  // no recorder: ignored
  BranchRecorder outer;
  const auto empty = outer.digest();
  record_branch(3);
  EXPECT_NE(outer.digest(), empty);
  EXPECT_EQ(outer.decisions(), 1u);
  const auto after_one = outer.digest();
  {
    BranchRecorder inner;
    record_branch(3);
    EXPECT_EQ(inner.decisions(), 1u);
  }
  EXPECT_EQ(outer.digest(), after_one);
  record_branch(4);
  BranchRecorder other;
  other.record(3);
  other.record(5);
  EXPECT_NE(other.digest(), outer.digest());
}

TEST(BranchRecorder, ReluRecordsSides) {
  BranchRecorder a;
  ops::relu(Tensor::from_rows({{1.0, -1.0}}));
  BranchRecorder b;  // shadows a from here on
  ops::relu(Tensor::from_rows({{1.0, 1.0}}));
  EXPECT_EQ(a.decisions(), 2u);
  EXPECT_EQ(b.decisions(), 2u);
  EXPECT_NE(a.digest(), b.digest());
}

TEST(GradCheck, SmoothExactGradientPasses) {
  Tensor x(Matrix{{0.1, -0.4, 0.7}}, true);
  auto reports = grad_check([&] { return ops::sum(wavy(x, 2.0)); }, {{"x", x}}, 1e-4);
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_TRUE(reports[0].pass);
  EXPECT_EQ(reports[0].probes, 3u);
  EXPECT_EQ(reports[0].kink_probes, 0u);
}

TEST(GradCheck, CorruptedBackwardFails) {
  Tensor x(Matrix{{0.1, -0.4, 0.7}}, true);
  auto reports = grad_check([&] { return ops::sum(wavy(x, 2.0, 1.01)); }, {{"x", x}}, 1e-4);
  EXPECT_FALSE(reports[0].pass);
  EXPECT_GT(reports[0].max_rel_error, 1e-3);
}

TEST(GradCheck, RichardsonRemovesTruncationError) {
  // At w = 100 the plain step's O(h^2) error is ~1e-3 relative.
  Tensor x(Matrix{{0.013, 0.021}}, true);
  auto loss = [&] { return ops::sum(wavy(x, 100.0)); };
  GradCheckOptions plain;
  plain.richardson = false;
  auto without = grad_check(loss, {{"x", x}}, plain);
  EXPECT_FALSE(without[0].pass);
  auto with = grad_check(loss, {{"x", x}}, GradCheckOptions{});
  EXPECT_TRUE(with[0].pass) << with[0].max_rel_error;
  EXPECT_GT(with[0].plain_max_rel_error, 1e-4);
  EXPECT_EQ(with[0].extrapolated, 2u);
}

TEST(GradCheck, KinkNearProbeIsReprobed) {
  // 2e-4 lies inside the standard step of the ReLU corner.
  Tensor x(Matrix{{2e-4, 0.5}}, true);
  auto loss = [&] { return ops::sum(ops::relu(x)); };
  auto with = grad_check(loss, {{"x", x}}, GradCheckOptions{});
  EXPECT_TRUE(with[0].pass);
  EXPECT_EQ(with[0].kink_probes, 1u);
  GradCheckOptions naive;
  naive.kink_aware = false;
  naive.richardson = false;
  EXPECT_FALSE(grad_check(loss, {{"x", x}}, naive)[0].pass);
}

TEST(GradCheck, ProbeOnTheCornerIsUnresolved) {
  Tensor x(Matrix{{0.0}}, true);
  auto reports = grad_check([&] { return ops::sum(ops::relu(x)); }, {{"x", x}}, GradCheckOptions{});
  EXPECT_FALSE(reports[0].pass);
  EXPECT_EQ(reports[0].unresolved, 1u);
}

TEST(GradCheck, NonFiniteProbeNamesCoordinate) {
  Tensor x(Matrix{{1.0, 2.0}}, true);
  // Blows up only when x[0,1] moves upward.
  auto loss = [&] {
    Matrix v = x.value();
    if (v(0, 1) > 2.0) v(0, 1) = INFINITY;
    return ops::sum(Tensor::make("fragile", v, {x}, [](const Matrix& g, std::span<Matrix* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += g.data[0];
    }));
  };
  try {
    grad_check(loss, {{"x", x}}, 1e-4);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("x[0,1]"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace ckstn

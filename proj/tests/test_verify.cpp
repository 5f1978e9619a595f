#include <distill/verify.hpp>

#include <gtest/gtest.h>

using namespace distill;

TEST(OracleSuite, EveryCheckPasses) {
  for (const auto& c : verify::run_oracle_suite()) {
    EXPECT_TRUE(c.passed()) << c.name << ": worst " << c.worst << " tolerance " << c.tolerance;
    EXPECT_GT(c.instances, 0u) << c.name;
  }
}

TEST(OracleSuite, CoversRequiredInstanceCounts) {
  EXPECT_GE(verify::unroll_vs_finite_differences().instances, 50u);
  EXPECT_GE(verify::unroll_vs_ift().instances, 20u);
}

TEST(OracleSuite, AnalyticReferenceCatchesTruncatedNeumann) {
  // The same quadratic family with the series cut after two terms must be
  // visibly wrong, otherwise the reference is not discriminating.
  std::mt19937_64 rng(77);
  double worst = 0;
  for (int i = 0; i < 5; ++i) {
    const auto q = verify::detail::Quadratic::random(rng);
    using V = Var<double>;
    const auto lam = V::leaf(verify::detail::to_tensor(q.lam));
    const InnerLoss<double> inner = [&](const std::vector<V>& th, std::size_t) { return q.inner(th[0], lam); };
    auto star = inner_train(inner, verify::detail::student_from({Tensor<double>({q.d(), 1})}), 200, 0.5);
    const auto& th = star.student.weights[0];
    const auto hg = hypergrad_ift(q.outer(th), q.inner(th, lam), {th}, {lam}, IFTConfig{0.5, 2, 1, 0.5})[0].value();
    worst = std::max(worst, verify::detail::rel_error(hg, verify::detail::to_tensor(q.analytic())));
  }
  EXPECT_GT(worst, 1e-2);
}

#include "doctest_torch.hpp"

#include <cmath>

#include "lfdlm/fusion.hpp"
#include "support.hpp"

using namespace lfdlm;

namespace {

double max_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

}  // namespace

TEST_CASE("two-class pixel matches direct exponentiation") {
  // 0.8^0.7 0.5^0.3 and 0.2^0.7 0.5^0.3, normalized; evaluated at 40 digits.
  constexpr double kClass0 = 0.72520042532400478201;
  constexpr double kClass1 = 0.27479957467599521799;
  auto a = torch::tensor({0.8, 0.2}, torch::kFloat64).reshape({2, 1, 1});
  auto b = torch::tensor({0.5, 0.5}, torch::kFloat64).reshape({2, 1, 1});
  const auto f = fuse({a, b}, FusionSpec::late_fusion(0.7));
  CHECK(std::abs(f[0][0][0].item<double>() - kClass0) < 1e-12);
  CHECK(std::abs(f[1][0][0].item<double>() - kClass1) < 1e-12);
}

TEST_CASE("degenerate weights and equal inputs are identities") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  const auto p = lfdlm::testing::random_distribution(13, 6, 6, gen);
  const auto q = lfdlm::testing::random_distribution(13, 6, 6, gen);
  CHECK(max_diff(fuse({p, q}, FusionSpec::late_fusion(1.0)), p) < 1e-6);
  CHECK(max_diff(fuse({p, q}, FusionSpec::late_fusion(0.0)), q) < 1e-6);
  CHECK(max_diff(fuse({p, p}, FusionSpec::late_fusion(0.4)), p) < 1e-6);
  CHECK(max_diff(fuse({p, p, p}, FusionSpec::ensemble()), p) < 1e-6);
}

TEST_CASE("fused maps are valid distributions in the input dtype") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  const auto p = lfdlm::testing::random_distribution(13, 5, 5, gen, torch::kFloat32);
  auto q = lfdlm::testing::random_distribution(13, 5, 5, gen, torch::kFloat32);
  q.index_put_({0}, 0.0);  // a hard zero must not annihilate the class
  q = q / q.sum(0, true);
  const auto f = fuse({p, q}, FusionSpec{});
  CHECK((f.scalar_type() == torch::kFloat32));
  CHECK(validate(f));
  CHECK((f[0] > 0).all().item<bool>());
  CHECK(validate(fuse({p.unsqueeze(0), q.unsqueeze(0)}, FusionSpec{})));
}

TEST_CASE("permuting members with their weights leaves the output unchanged") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  const auto a = lfdlm::testing::random_distribution(13, 4, 4, gen);
  const auto b = lfdlm::testing::random_distribution(13, 4, 4, gen);
  const auto c = lfdlm::testing::random_distribution(13, 4, 4, gen);
  FusionSpec s1{{{"a", 0.5}, {"b", 0.2}, {"c", 0.3}}, 1e-8};
  FusionSpec s2{{{"c", 0.3}, {"a", 0.5}, {"b", 0.2}}, 1e-8};
  CHECK(max_diff(fuse({a, b, c}, s1), fuse({c, a, b}, s2)) < 1e-12);
  // Swapping the two equally weighted aerial members.
  CHECK(max_diff(ensemble_lfdlm(ClassProbabilityMap(a), ClassProbabilityMap(b), ClassProbabilityMap(c)).probs(),
                 ensemble_lfdlm(ClassProbabilityMap(b), ClassProbabilityMap(a), ClassProbabilityMap(c)).probs()) < 1e-12);
}

TEST_CASE("raising one member's class probability never lowers the fused one") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = lfdlm::testing::random_distribution(13, 1, 1, gen);
    const auto b = lfdlm::testing::random_distribution(13, 1, 1, gen);
    const int64_t c = trial % 13;
    auto raised = a.clone();
    raised[c] += 0.3;
    raised = raised / raised.sum(0, true);
    const auto before = fuse({a, b}, FusionSpec{})[c].item<double>();
    const auto after = fuse({raised, b}, FusionSpec{})[c].item<double>();
    CHECK(after >= before - 1e-15);
  }
}

TEST_CASE("duplicated aerial maps at half weight equal the two-member fusion") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  const auto a = lfdlm::testing::random_distribution(13, 8, 8, gen);
  const auto t = lfdlm::testing::random_distribution(13, 8, 8, gen);
  const auto three = ensemble_lfdlm(ClassProbabilityMap(a), ClassProbabilityMap(a), ClassProbabilityMap(t));
  CHECK(max_diff(three.probs(), fuse({a, t}, FusionSpec{})) < 1e-6);
}

TEST_CASE("fusion rejects malformed inputs and specs") {
  const auto p = torch::full({13, 2, 2}, 1.0 / 13, torch::kFloat64);
  CHECK_THROWS_AS(fuse({p, torch::full({13, 3, 3}, 1.0 / 13)}, FusionSpec{}), DataError);
  CHECK_THROWS_AS(fuse({p}, FusionSpec{}), ConfigError);
  CHECK_THROWS_AS(fuse({p, p}, FusionSpec{{{"a", 0.7}, {"b", 0.4}}, 1e-8}), ConfigError);
  CHECK_THROWS_AS(fuse({p, p}, FusionSpec{{{"a", 1.2}, {"b", -0.2}}, 1e-8}), ConfigError);
  CHECK_THROWS_AS(FusionSpec({{{"a", 1.0}}, 0.0}).validate(), ConfigError);
  CHECK_THROWS_AS(FusionSpec({{}, 1e-8}).validate(), ConfigError);
  CHECK_NOTHROW(FusionSpec({{{"a", 0.1}, {"b", 0.2}, {"c", 0.7}}, 1e-8}).validate());
}

TEST_CASE("fusion specs round-trip through JSON") {
  const auto spec = FusionSpec::ensemble();
  REQUIRE(spec.members.size() == 3);
  CHECK(spec.weights() == std::vector<double>{0.35, 0.35, 0.3});
  const auto back = FusionSpec::from_json(spec.to_json());
  CHECK(back.weights() == spec.weights());
  CHECK(back.members[1].branch_id == spec.members[1].branch_id);
  CHECK(back.epsilon == spec.epsilon);
}

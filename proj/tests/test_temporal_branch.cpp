#include "doctest_torch.hpp"

#include "lfdlm/temporal_branch.hpp"
#include "support.hpp"

using namespace lfdlm;

namespace {

std::vector<int64_t> shape(const torch::Tensor& t) { return t.sizes().vec(); }

/// Batch of `b` sequences of length `t_max`; sequence i has lengths[i] valid frames.
TemporalBatch padded_batch(const std::vector<int64_t>& lengths, int64_t t_max, int64_t side, uint64_t seed,
                           torch::Dtype dtype = torch::kFloat32) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto b = static_cast<int64_t>(lengths.size());
  TemporalBatch batch;
  batch.frames = torch::zeros({b, t_max, kSitsBands, side, side}, torch::TensorOptions().dtype(dtype));
  batch.day_of_year = torch::ones({b, t_max}, torch::kInt64);
  batch.validity = torch::zeros({b, t_max}, torch::kBool);
  for (int64_t i = 0; i < b; ++i) {
    const int64_t t = lengths[static_cast<size_t>(i)];
    batch.frames[i].narrow(0, 0, t).copy_(torch::rand({t, kSitsBands, side, side}, gen).to(dtype));
    batch.day_of_year[i].narrow(0, 0, t).copy_(torch::arange(t, torch::kInt64) * 25 + 5);
    batch.validity[i].narrow(0, 0, t).fill_(true);
  }
  return batch;
}

}  // namespace

TEST_CASE("frame encoder level sizes halve from the input side") {
  torch::manual_seed(0);
  TemporalBranch net(TemporalBranchConfig::full(), 40);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto batch = padded_batch({3, 2}, 3, 40, 1);
  const auto levels = net->encode_frames(batch);
  REQUIRE(levels.size() == 4);
  const std::array<int64_t, 4> sides{40, 20, 10, 5};
  const std::array<int64_t, 4> widths{64, 64, 128, 128};
  for (size_t l = 0; l < 4; ++l) {
    CHECK(shape(levels[l]) == std::vector<int64_t>{2, 3, widths[l], sides[l], sides[l]});
  }
  const auto logits = net->forward(batch);
  CHECK(shape(logits) == std::vector<int64_t>{2, 13, 40, 40});
}

TEST_CASE("toy branch emits logits at SITS resolution") {
  torch::manual_seed(0);
  TemporalBranch net(TemporalBranchConfig::toy(), 8);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto batch = padded_batch({5, 3, 4}, 5, 8, 2);
  const auto collapsed = net->collapse_temporal(net->encode_frames(batch), batch.day_of_year, batch.validity);
  CHECK(shape(collapsed.maps[0]) == std::vector<int64_t>{3, 32, 8, 8});
  CHECK(shape(collapsed.maps[2]) == std::vector<int64_t>{3, 64, 2, 2});
  CHECK(shape(collapsed.attention) == std::vector<int64_t>{16, 3, 5, 2, 2});
  CHECK(shape(net->decode_to_logits(collapsed)) == std::vector<int64_t>{3, 13, 8, 8});
}

TEST_CASE("attention covers only valid frames and sums to one") {
  torch::manual_seed(1);
  TemporalBranch net(TemporalBranchConfig::toy(), 8);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto batch = padded_batch({6, 2, 4}, 6, 8, 3);
  const auto att = net->collapse_temporal(net->encode_frames(batch), batch.day_of_year, batch.validity).attention;
  const auto sums = att.sum(2);
  CHECK((sums - 1.0).abs().max().item<double>() < 1e-5);
  CHECK(att.select(1, 1).narrow(1, 2, 4).abs().max().item<double>() == 0.0);
  CHECK(att.select(1, 2).narrow(1, 4, 2).abs().max().item<double>() == 0.0);
}

TEST_CASE("padded frame contents do not change the output") {
  torch::manual_seed(2);
  TemporalBranch net(TemporalBranchConfig::toy(), 8);
  net->eval();
  torch::NoGradGuard no_grad;
  auto batch = padded_batch({6, 3}, 6, 8, 4);
  const auto base = net->forward(batch);
  batch.frames[1].narrow(0, 3, 3).normal_(0.0, 100.0);
  batch.day_of_year[1].narrow(0, 3, 3).fill_(200);
  CHECK(net->forward(batch).equal(base));
}

TEST_CASE("padding a batch with extra empty frames leaves logits unchanged") {
  torch::manual_seed(3);
  TemporalBranch net(TemporalBranchConfig::toy(), 8);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto tight = padded_batch({4}, 4, 8, 5);
  TemporalBatch loose{torch::cat({tight.frames, torch::randn({1, 3, kSitsBands, 8, 8})}, 1),
                      torch::cat({tight.day_of_year, torch::ones({1, 3}, torch::kInt64)}, 1),
                      torch::cat({tight.validity, torch::zeros({1, 3}, torch::kBool)}, 1)};
  CHECK((net->forward(tight) - net->forward(loose)).abs().max().item<double>() < 1e-5);
}

TEST_CASE("a sequence without valid frames is rejected") {
  TemporalBranch net(TemporalBranchConfig::toy(), 8);
  net->eval();
  auto batch = padded_batch({3, 1}, 3, 8, 6);
  batch.validity[1].fill_(false);
  CHECK_THROWS_AS(net->forward(batch), DataError);
}

TEST_CASE("temporal batch validation") {
  auto batch = padded_batch({2}, 2, 8, 7);
  CHECK_NOTHROW(batch.validate());
  auto bad = batch;
  bad.day_of_year = batch.day_of_year.clone();
  bad.day_of_year[0][0] = 400;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = batch;
  bad.validity = batch.validity.to(torch::kInt64);
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = batch;
  bad.frames = batch.frames[0];
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("config validation and size rules") {
  CHECK_NOTHROW(TemporalBranchConfig::full().validate(40));
  CHECK_THROWS_AS(TemporalBranchConfig::full().validate(36), ConfigError);
  CHECK_NOTHROW(TemporalBranchConfig::toy().validate(8));
  auto cfg = TemporalBranchConfig::full();
  cfg.widths.clear();
  CHECK_THROWS_AS(cfg.validate(40), ConfigError);
  cfg = TemporalBranchConfig::full();
  cfg.d_model = 250;
  CHECK_THROWS_AS(cfg.validate(40), ConfigError);
  const auto back = TemporalBranchConfig::from_json(TemporalBranchConfig::toy().to_json(), TemporalBranchConfig::full());
  CHECK(back.to_json() == TemporalBranchConfig::toy().to_json());
}

TEST_CASE("halving the widths shrinks the network") {
  auto half = TemporalBranchConfig::full();
  for (auto& w : half.widths) w /= 2;
  TemporalBranch full(TemporalBranchConfig::full(), 40);
  TemporalBranch small(half, 40);
  TemporalBranch toy(TemporalBranchConfig::toy(), 8);
  CHECK(small->count_parameters() < full->count_parameters());
  CHECK(toy->count_parameters() < full->count_parameters());
}

TEST_CASE("positional encoding is bounded and date dependent") {
  LTAE ltae(TemporalBranchConfig::toy());
  const auto pe = ltae->positional_encoding(torch::tensor({{1, 100, 365}}, torch::kInt64));
  CHECK(shape(pe) == std::vector<int64_t>{1, 3, 128});
  CHECK(pe.abs().max().item<double>() <= 1.0);
  CHECK_FALSE(pe[0][0].equal(pe[0][1]));
}

TEST_CASE("alignment crops the centre and upsamples to the aerial grid") {
  const auto toy = ScaleProfile::toy();
  auto maps = torch::zeros({1, 13, 8, 8});
  maps.index_put_({torch::indexing::Slice(), 4}, 1.0);
  // Centre 2x2 holds class 1; the ring around it holds class 0.
  maps.index_put_({torch::indexing::Slice(), 1, torch::indexing::Slice(3, 5), torch::indexing::Slice(3, 5)}, 1.0);
  maps.index_put_({torch::indexing::Slice(), 4, torch::indexing::Slice(3, 5), torch::indexing::Slice(3, 5)}, 0.0);
  const auto out = align_to_aerial(maps, toy, true);
  CHECK(shape(out) == std::vector<int64_t>{1, 13, 64, 64});
  CHECK((out[0][1] - 1.0).abs().max().item<double>() < 1e-6);
  CHECK(validate(out));

  const auto full = align_to_aerial(torch::softmax(torch::randn({2, 13, 40, 40}), 1), ScaleProfile::full(), true);
  CHECK(shape(full) == std::vector<int64_t>{2, 13, 512, 512});
  CHECK(validate(full));
  CHECK_THROWS_AS(align_to_aerial(torch::zeros({1, 13, 6, 6}), toy, true), DataError);
}

TEST_CASE("temporal forward passes a finite-difference gradient check") {
  torch::manual_seed(4);
  TemporalBranch net(TemporalBranchConfig::toy(), 8);
  net->to(torch::kFloat64);
  net->eval();
  const auto batch = padded_batch({4, 3}, 4, 8, 8, torch::kFloat64);
  const auto probe = torch::randn({2, 13, 8, 8}, torch::kFloat64);
  auto f = [&](const torch::Tensor& frames) {
    return (net->forward({frames, batch.day_of_year, batch.validity}) * probe).sum();
  };
  const auto check = lfdlm::testing::finite_difference_check(f, batch.frames, 16, 9);
  CHECK(check.checked >= 6);
  CHECK(check.max_relative_error < 1e-3);
}

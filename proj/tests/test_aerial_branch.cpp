#include "doctest_torch.hpp"

#include "lfdlm/aerial_branch.hpp"
#include "support.hpp"

using namespace lfdlm;

namespace {

std::vector<int64_t> shape(const torch::Tensor& t) { return t.sizes().vec(); }

}  // namespace

TEST_CASE("toy encoder pyramid halves the side at every stage") {
  torch::manual_seed(0);
  AerialBranch net(AerialBranchConfig::toy(), 64);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto x = torch::randn({2, 5, 64, 64});
  const auto pyramid = net->encode(x);
  const auto& cfg = net->config;
  for (size_t s = 0; s < 4; ++s) {
    const int64_t side = 64 >> (s + 2);
    CHECK(shape(pyramid.maps[s]) == std::vector<int64_t>{2, cfg.stage_channels[s], side, side});
  }
  CHECK(shape(net->decode(pyramid)) == std::vector<int64_t>{2, 13, 64, 64});
  CHECK(shape(net->forward(x)) == std::vector<int64_t>{2, 13, 64, 64});
}

TEST_CASE("full encoder pyramid at 512") {
  torch::manual_seed(0);
  AerialBranch net(AerialBranchConfig::full(), 512);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto x = torch::randn({1, 5, 512, 512});
  const auto pyramid = net->encode(x);
  const std::array<int64_t, 4> sides{128, 64, 32, 16};
  const std::array<int64_t, 4> channels{64, 128, 256, 512};
  for (size_t s = 0; s < 4; ++s) {
    CHECK(shape(pyramid.maps[s]) == std::vector<int64_t>{1, channels[s], sides[s], sides[s]});
  }
  CHECK(shape(net->decode(pyramid)) == std::vector<int64_t>{1, 13, 512, 512});
}

TEST_CASE("encode rejects wrong channel counts and sizes") {
  AerialBranch net(AerialBranchConfig::toy(), 64);
  net->eval();
  CHECK_THROWS_AS(net->encode(torch::randn({1, 4, 64, 64})), DataError);
  CHECK_THROWS_AS(net->encode(torch::randn({1, 5, 32, 32})), DataError);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(AerialBranchConfig::full().validate(512));
  CHECK_NOTHROW(AerialBranchConfig::toy().validate(64));
  CHECK_NOTHROW(AerialBranchConfig::toy().validate(32));
  CHECK_THROWS_AS(AerialBranchConfig::full().validate(500), ConfigError);
  auto cfg = AerialBranchConfig::full();
  cfg.stage_channels = {64, 128, 256, 256};
  CHECK_THROWS_AS(cfg.validate(512), ConfigError);
  cfg = AerialBranchConfig::full();
  cfg.head_dim = 48;
  CHECK_THROWS_AS(cfg.validate(512), ConfigError);
  cfg = AerialBranchConfig::full();
  cfg.attention_window = 6;
  CHECK_THROWS_AS(cfg.validate(512), ConfigError);
  cfg = AerialBranchConfig::full();
  cfg.head_dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(512), ConfigError);

  const auto back = AerialBranchConfig::from_json(AerialBranchConfig::toy().to_json(), AerialBranchConfig::full());
  CHECK(back.to_json() == AerialBranchConfig::toy().to_json());
  CHECK(effective_window(8, 2) == 2);
  CHECK(effective_window(8, 16) == 8);
}

TEST_CASE("the toy network is smaller than the full one") {
  AerialBranch toy(AerialBranchConfig::toy(), 64);
  AerialBranch full(AerialBranchConfig::full(), 512);
  CHECK(toy->count_parameters() < full->count_parameters());
  const double n = static_cast<double>(full->count_parameters());
  CHECK(n > 31e6 * 0.85);
  CHECK(n < 31e6 * 1.15);
}

TEST_CASE("input standardization happens inside the branch") {
  torch::manual_seed(3);
  AerialBranch net(AerialBranchConfig::toy(), 64);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto x = torch::randn({1, 5, 64, 64});
  const auto base = net->forward(x);
  net->set_input_statistics({1, 2, 3, 4, 5}, {2, 2, 2, 2, 2});
  const auto shifted = net->forward(x * 2 + torch::tensor({1.0, 2.0, 3.0, 4.0, 5.0}).view({1, 5, 1, 1}));
  CHECK((base - shifted).abs().max().item<double>() < 1e-4);
  CHECK_THROWS_AS(net->set_input_statistics({1, 2}, {1, 1}), ConfigError);
}

TEST_CASE("first-layer adaptation copies RGB and draws the extra channels") {
  const auto w3 = torch::randn({8, 3, 3, 3});
  const auto w5 = adapt_input_layer(w3, 5, 11);
  CHECK(shape(w5) == std::vector<int64_t>{8, 5, 3, 3});
  CHECK(w5.narrow(1, 0, 3).equal(w3));
  const auto extra = w5.narrow(1, 3, 2);
  CHECK(extra.abs().max().item<double>() <= 0.04 + 1e-7);
  CHECK(extra.abs().sum().item<double>() > 0.0);
  CHECK(adapt_input_layer(w3, 5, 11).equal(w5));
  CHECK_FALSE(adapt_input_layer(w3, 5, 12).equal(w5));
  CHECK_THROWS_AS(adapt_input_layer(torch::randn({8, 4, 3, 3}), 5, 0), ConfigError);
}

TEST_CASE("pretrained encoder weights load through the adapted stem") {
  lfdlm::testing::TempDir dir("pretrained");
  auto cfg = AerialBranchConfig::toy();
  cfg.in_channels = 3;
  AerialBranch rgb(cfg, 64);
  {
    torch::serialize::OutputArchive archive;
    for (const auto& p : rgb->encoder->named_parameters()) archive.write(p.key(), p.value());
    archive.save_to((dir / "enc.pt").string());
  }
  AerialBranch net(AerialBranchConfig::toy(), 64);
  net->load_pretrained((dir / "enc.pt").string(), 5);
  const auto stem = net->encoder->stem_conv1->weight;
  CHECK(stem.narrow(1, 0, 3).equal(rgb->encoder->stem_conv1->weight));
  CHECK_THROWS_AS(net->load_pretrained((dir / "absent.pt").string(), 5), DataError);
}

TEST_CASE("truncated normal init stays within two standard deviations") {
  auto t = torch::empty({20000});
  trunc_normal_(t, 0.02);
  CHECK(t.abs().max().item<double>() <= 0.04 + 1e-7);
  CHECK(t.std().item<double>() == doctest::Approx(0.0176).epsilon(0.05));
}

TEST_CASE("disabling the global attention path changes the decoder output") {
  torch::manual_seed(5);
  AerialBranch net(AerialBranchConfig::toy(), 64);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto x = torch::randn({1, 5, 64, 64});
  const auto with_global = net->forward(x);
  net->decoder->set_global_path_enabled(false);
  const auto local_only = net->forward(x);
  CHECK((with_global - local_only).abs().max().item<double>() > 0.0);
}

TEST_CASE("window attention bias is shared by relative offset") {
  WindowAttention attn(8, 2, 4);
  const auto bias = attn->relative_bias();
  CHECK(shape(bias) == std::vector<int64_t>{2, 16, 16});
  // Pairs (0 -> 1) and (4 -> 5) share an offset of one column.
  CHECK(bias[0][0][1].item<float>() == bias[0][4][5].item<float>());
}

TEST_CASE("aerial forward passes a finite-difference gradient check") {
  torch::manual_seed(1);
  AerialBranch net(AerialBranchConfig::toy(), 32);
  net->to(torch::kFloat64);
  net->eval();
  const auto probe = torch::randn({1, 13, 32, 32}, torch::kFloat64);
  auto f = [&](const torch::Tensor& x) { return (net->forward(x) * probe).sum(); };
  const auto x = torch::randn({1, 5, 32, 32}, torch::kFloat64);
  const auto check = lfdlm::testing::finite_difference_check(f, x, 12, 7);
  CHECK(check.checked >= 6);
  CHECK(check.max_relative_error < 1e-3);
}

#include "doctest_torch.hpp"

#include <cmath>
#include <fstream>

#include "lfdlm/io.hpp"
#include "lfdlm/training.hpp"
#include "support.hpp"

using namespace lfdlm;

namespace {

TrainConfig fast_config() {
  TrainConfig cfg;
  cfg.lr_init = 1e-3;
  cfg.lr_final = 1e-6;
  cfg.max_epochs = 3;
  cfg.patience = 3;
  cfg.batch_size = 2;
  cfg.augment = false;
  return cfg;
}

}  // namespace

TEST_CASE("combined loss closed form: uniform logits, two classes, four pixels of class 0") {
  const auto logits = torch::zeros({1, 2, 2, 2}, torch::kFloat64);
  const auto target = torch::zeros({1, 2, 2}, torch::kInt64);
  // CE = ln 2. Dice: class 0 (2*2 + 1) / (2 + 4 + 1) = 5/7, class 1 (0 + 1) / (2 + 0 + 1) = 1/3.
  const double expected = std::log(2.0) + (1.0 - (5.0 / 7.0 + 1.0 / 3.0) / 2.0);
  CHECK(combined_loss(logits, target).item<double>() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(combined_loss(logits, target, 1.0, 0.0).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(combined_loss(logits, target, 0.0, 2.0).item<double>() ==
        doctest::Approx(2.0 * (1.0 - 11.0 / 21.0)).epsilon(1e-12));
}

TEST_CASE("sharper correct logits drive the loss down") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  const auto target = torch::randint(0, 13, {2, 6, 6}, gen, torch::kInt64);
  const auto onehot = torch::one_hot(target, 13).permute({0, 3, 1, 2}).to(torch::kFloat64);
  double previous = 1e9;
  for (double sharp : {1.0, 4.0, 16.0, 64.0}) {
    const double loss = combined_loss(onehot * sharp, target, 1.0, 0.0).item<double>();
    CHECK(loss < previous);
    previous = loss;
  }
  CHECK(previous < 1e-20);
  // Dice keeps a floor from the absent classes only through smoothing, so the total stays small.
  CHECK(combined_loss(onehot * 64.0, target).item<double>() < 1e-6);
}

TEST_CASE("loss is invariant to a joint pixel shuffle") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  const auto logits = torch::randn({1, 13, 4, 4}, gen, torch::kFloat64);
  const auto target = torch::randint(0, 13, {1, 4, 4}, gen, torch::kInt64);
  const auto perm = torch::randperm(16, gen, torch::kInt64);
  const auto shuffled_logits = logits.flatten(2).index_select(2, perm).view({1, 13, 4, 4});
  const auto shuffled_target = target.flatten(1).index_select(1, perm).view({1, 4, 4});
  CHECK(combined_loss(logits, target).item<double>() ==
        doctest::Approx(combined_loss(shuffled_logits, shuffled_target).item<double>()).epsilon(1e-12));
}

TEST_CASE("invalid targets are rejected") {
  const auto logits = torch::zeros({1, 13, 2, 2});
  CHECK_THROWS_WITH_AS(combined_loss(logits, torch::full({1, 2, 2}, 13, torch::kInt64)),
                       doctest::Contains("invalid target values"), DataError);
  CHECK_THROWS_AS(combined_loss(logits, torch::full({1, 2, 2}, -1, torch::kInt64)), DataError);
  CHECK_THROWS_AS(combined_loss(logits, torch::zeros({1, 3, 3}, torch::kInt64)), DataError);
}

TEST_CASE("ignoring 'other' drops its pixels from both terms") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  const auto logits = torch::randn({1, 13, 4, 4}, gen, torch::kFloat64);
  auto target = torch::randint(0, 12, {1, 4, 4}, gen, torch::kInt64);
  const double clean = combined_loss(logits, target, 1.0, 0.0, 12).item<double>();
  auto with_other = target.clone();
  auto noisy_logits = logits.clone();
  with_other[0][0][0] = 12;
  // Changing the logits at an ignored pixel must not matter.
  noisy_logits.select(2, 0).select(2, 0).normal_();
  const double a = combined_loss(logits, with_other, 1.0, 1.0, 12).item<double>();
  const double b = combined_loss(noisy_logits, with_other, 1.0, 1.0, 12).item<double>();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK(std::isfinite(clean));
}

TEST_CASE("combined loss passes a finite-difference gradient check") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  const auto target = torch::randint(0, 13, {2, 4, 4}, gen, torch::kInt64);
  const auto logits = torch::randn({2, 13, 4, 4}, gen, torch::kFloat64);
  auto f = [&](const torch::Tensor& x) { return combined_loss(x, target); };
  const auto check = lfdlm::testing::finite_difference_check(f, logits, 40, 5, 1e-6, 1e-9);
  CHECK(check.checked >= 20);
  CHECK(check.max_relative_error < 1e-4);
}

TEST_CASE("polynomial schedule endpoints, midpoint and monotonicity") {
  const TrainConfig cfg;
  CHECK(lr_at(0, 1000, cfg) == 1e-4);
  CHECK(lr_at(1000, 1000, cfg) == 1e-7);
  CHECK(lr_at(500, 1000, cfg) == doctest::Approx(5.005e-5).epsilon(1e-12));
  double previous = lr_at(0, 1000, cfg);
  for (int64_t s = 1; s <= 1000; ++s) {
    const double lr = lr_at(s, 1000, cfg);
    CHECK(lr <= previous);
    previous = lr;
  }
  TrainConfig squared = cfg;
  squared.decay_power = 2.0;
  CHECK(lr_at(500, 1000, squared) == doctest::Approx(1e-7 + (1e-4 - 1e-7) * 0.25).epsilon(1e-12));
  CHECK_THROWS_AS(lr_at(-1, 10, cfg), std::out_of_range);
  CHECK_THROWS_AS(lr_at(11, 10, cfg), std::out_of_range);
}

TEST_CASE("early stopping counts epochs without strict improvement") {
  EarlyStopping stop(3);
  CHECK_FALSE(stop.update(1.0));
  CHECK_FALSE(stop.update(0.9));
  CHECK_FALSE(stop.update(0.9));  // equal is not an improvement
  CHECK(stop.epochs_since_improvement() == 1);
  CHECK_FALSE(stop.update(0.95));
  CHECK(stop.update(0.91));
  CHECK(stop.best() == 0.9);
}

TEST_CASE("train config invariants") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  auto bad = cfg;
  bad.lr_final = bad.lr_init;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.patience = 31;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const auto back = TrainConfig::from_json(cfg.to_json(), TrainConfig{});
  CHECK(back.to_json() == cfg.to_json());
  CHECK(cfg.lr_init == 1e-4);
  CHECK(cfg.max_epochs == 30);
  CHECK(cfg.patience == 15);
  CHECK(cfg.batch_size == 12);
}

TEST_CASE("label pooling takes the block majority with ties to the lowest id") {
  auto labels = torch::zeros({1, 4, 4}, torch::kInt64);
  labels[0][0][0] = 5;
  labels[0][0][1] = 5;
  labels[0][1][0] = 5;  // top-left block: 5,5,5,0
  labels[0][0][2] = 7;
  labels[0][0][3] = 7;
  labels[0][1][2] = 3;
  labels[0][1][3] = 3;  // top-right block: 7,7,3,3 tie
  const auto pooled = pool_labels(labels, 2);
  CHECK(pooled[0][0][0].item<int64_t>() == 5);
  CHECK(pooled[0][0][1].item<int64_t>() == 3);
  CHECK(pooled[0][1][0].item<int64_t>() == 0);
  CHECK_THROWS_AS(pool_labels(labels, 3), DataError);
}

TEST_CASE("sample preparation reduces long stacks to monthly composites") {
  auto sample = lfdlm::testing::toy_samples(1).front();
  REQUIRE(sample.sits.length() > 12);
  const auto prepared = prepare_sample(sample);
  CHECK(prepared.sits.length() <= 12);
  CHECK(prepared.aerial.pixels().equal(sample.aerial.pixels()));

  Sample cloudy = sample;
  cloudy.sits = SitsStack(sample.sits.frames(), sample.sits.dates(), torch::ones_like(sample.sits.cloud_snow_masks()),
                          sample.patch_id());
  const auto fallback = prepare_sample(cloudy);
  CHECK(fallback.sits.length() == monthly_average(cloudy.sits).length());
}

TEST_CASE("both branches share one training interface") {
  const auto samples = lfdlm::testing::toy_samples(2);
  const auto batch = collate(samples);
  for (auto kind : {BranchKind::aerial, BranchKind::temporal}) {
    BranchModel model({kind, ScaleProfile::toy(), AerialBranchConfig::toy(), TemporalBranchConfig::toy()});
    model.train(false);
    torch::NoGradGuard no_grad;
    const auto probs = model.probabilities(batch);
    CHECK(probs.sizes() == torch::IntArrayRef{2, 13, 64, 64});
    CHECK(validate(probs));
    CHECK(std::isfinite(model.loss(batch, TrainConfig{}).item<double>()));
  }
  auto pooled = TemporalBranchConfig::toy();
  pooled.supervise_at_aerial = false;
  BranchModel model({BranchKind::temporal, ScaleProfile::toy(), AerialBranchConfig::toy(), pooled});
  torch::NoGradGuard no_grad;
  CHECK(std::isfinite(model.loss(batch, TrainConfig{}).item<double>()));
  CHECK(branch_from_string("temporal") == BranchKind::temporal);
  CHECK_THROWS_AS(branch_from_string("radar"), ConfigError);
}

TEST_CASE("checkpoints round-trip and guard their config") {
  lfdlm::testing::TempDir dir("ckpt");
  const auto samples = lfdlm::testing::toy_samples(2);
  const auto batch = collate(samples);
  const BranchSpec spec{BranchKind::aerial, ScaleProfile::toy(), AerialBranchConfig::toy(), TemporalBranchConfig::toy()};
  torch::manual_seed(0);
  BranchModel model(spec);
  model.train(false);
  TrainState state;
  state.epoch = 4;
  save_checkpoint(model, state, dir / "m.pt");
  auto ck = load_checkpoint(dir / "m.pt");
  CHECK(ck.meta.at("state").at("epoch") == 4);
  torch::NoGradGuard no_grad;
  CHECK(ck.model.probabilities(batch).equal(model.probabilities(batch)));

  CHECK_THROWS_AS(load_checkpoint(dir / "absent.pt"), DataError);
  {
    torch::serialize::OutputArchive archive;
    model.module().save(archive);
    const nlohmann::json meta{{"format", 1}, {"branch", spec.to_json()}, {"config_digest", "0000"}, {"state", {}}};
    archive.write("meta", c10::IValue(meta.dump()));
    archive.save_to((dir / "tampered.pt").string());
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "tampered.pt"), doctest::Contains("digest"), DataError);
  io::write_text(dir / "junk.pt", "not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.pt"), DataError);
}

TEST_CASE("training keeps the best-mIoU checkpoint and stops on stalled validation loss") {
  lfdlm::testing::TempDir dir("train");
  const auto train = lfdlm::testing::toy_samples(4, 1);
  const auto val = lfdlm::testing::toy_samples(2, 2);
  auto cfg = fast_config();
  cfg.max_epochs = 10;
  cfg.patience = 3;
  // Scripted validation: loss improves once then stalls; mIoU peaks at epoch 3.
  const std::vector<std::pair<double, double>> script{{1.0, 0.1}, {0.8, 0.2}, {0.9, 0.5}, {0.85, 0.3},
                                                      {0.81, 0.4}, {0.5, 0.9}};
  TrainHooks hooks;
  hooks.validation_override = [&](int64_t epoch) -> std::optional<std::pair<double, double>> {
    return script.at(static_cast<size_t>(epoch - 1));
  };
  const BranchSpec spec{BranchKind::temporal, ScaleProfile::toy(), AerialBranchConfig::toy(), TemporalBranchConfig::toy()};
  const auto result = train_branch(spec, train, val, cfg, ChannelStats::identity(), dir.path(), hooks);
  REQUIRE(result.history.size() == 5);
  CHECK(result.state.epoch == 5);
  CHECK(result.state.best_val_metric == 0.5);
  CHECK(result.state.epochs_since_improvement == 3);
  CHECK(load_checkpoint(result.best_checkpoint).meta.at("state").at("epoch") == 3);

  std::ifstream history(dir / "history.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(history, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "global_step", "train_loss", "val_loss", "val_mIoU", "lr"}) CHECK(j.contains(key));
    ++lines;
  }
  CHECK(lines == 5);
  for (const auto& r : result.history) CHECK(r.lr <= cfg.lr_init);
}

TEST_CASE("training is reproducible under a fixed seed") {
  const auto train = lfdlm::testing::toy_samples(2, 1);
  const auto val = lfdlm::testing::toy_samples(1, 2);
  auto cfg = fast_config();
  cfg.max_epochs = 1;
  cfg.patience = 1;
  cfg.augment = true;
  const BranchSpec spec{BranchKind::temporal, ScaleProfile::toy(), AerialBranchConfig::toy(), TemporalBranchConfig::toy()};
  lfdlm::testing::TempDir a("seed-a"), b("seed-b");
  const auto ra = train_branch(spec, train, val, cfg, ChannelStats::identity(), a.path());
  const auto rb = train_branch(spec, train, val, cfg, ChannelStats::identity(), b.path());
  CHECK(ra.step_losses == rb.step_losses);
  CHECK_THROWS_AS(train_branch(spec, train, {}, cfg, ChannelStats::identity(), a.path()), DataError);
}

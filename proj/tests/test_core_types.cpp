#include "doctest_torch.hpp"

#include "lfdlm/core_types.hpp"

using namespace lfdlm;

TEST_CASE("nomenclature has twelve scored classes and a trailing other") {
  const auto& n = Nomenclature::flair();
  CHECK(n.classes().size() == 13);
  CHECK(n.name(n.other_index()) == "other");
  CHECK(n.other_index() == 12);
  const auto scored = n.scored();
  CHECK(scored.size() == 12);
  CHECK(std::find(scored.begin(), scored.end(), n.other_index()) == scored.end());
  CHECK(n.index_of("coniferous") == 5);
  CHECK(n.index_of("plowed land") == 11);
  CHECK_THROWS_AS(n.index_of("forest"), DataError);
}

TEST_CASE("dates parse, print and count days") {
  const auto d = Date::parse("2021-03-01");
  CHECK(d.year == 2021);
  CHECK(d.month == 3);
  CHECK(d.day == 1);
  CHECK(d.iso() == "2021-03-01");
  CHECK(d.day_of_year() == 60);
  CHECK(Date::parse("2020-03-01").day_of_year() == 61);
  CHECK(Date::parse("2020-12-31").day_of_year() == 366);
  CHECK(Date::parse("2021-01-01").day_of_year() == 1);
  CHECK(Date::parse("2021-01-01") < Date::parse("2021-01-02"));
  for (const char* bad : {"2021-02-29", "2021-13-01", "2021-1-01", "20210101", "2021-01-0x", ""}) {
    CHECK_THROWS_AS(Date::parse(bad), DataError);
  }
}

TEST_CASE("scale profiles keep the 10/40 crop ratio") {
  const auto full = ScaleProfile::full();
  CHECK(full.aerial_size() == 512);
  CHECK(full.sits_size() == 40);
  CHECK(full.center_crop() == 10);
  CHECK(full.sits_pixel_footprint() == doctest::Approx(51.2));
  const auto toy = ScaleProfile::toy();
  CHECK(toy.aerial_size() == 64);
  CHECK(toy.sits_size() == 8);
  CHECK(toy.center_crop() == 2);
  CHECK(ScaleProfile::toy(128, 16).center_crop() == 4);
  CHECK_THROWS_AS(ScaleProfile::make(ScaleName::full, 256, 40), ConfigError);
  CHECK_THROWS_AS(ScaleProfile::toy(48, 8), ConfigError);
  CHECK_THROWS_AS(ScaleProfile::toy(64, 10), ConfigError);
  CHECK_THROWS_AS(ScaleProfile::toy(64, 0), ConfigError);
  CHECK(scale_name_from_string("full") == ScaleName::full);
  CHECK_THROWS_AS(scale_name_from_string("medium"), ConfigError);
}

TEST_CASE("aerial patches must be square five-band rasters") {
  CHECK_NOTHROW(AerialPatch(torch::zeros({5, 8, 8}), "p"));
  CHECK_THROWS_AS(AerialPatch(torch::zeros({4, 8, 8}), "p"), DataError);
  CHECK_THROWS_AS(AerialPatch(torch::zeros({5, 8, 6}), "p"), DataError);
}

TEST_CASE("SITS stacks validate dates, shapes and masks") {
  const std::vector<Date> dates{{2021, 1, 5}, {2021, 2, 5}};
  CHECK_NOTHROW(SitsStack(torch::zeros({2, 10, 4, 4}), dates, torch::zeros({2, 4, 4}), "s"));
  const SitsStack ok(torch::zeros({2, 10, 4, 4}), dates, torch::zeros({2, 4, 4}), "s");
  CHECK(ok.day_of_year().equal(torch::tensor({5, 36}, torch::kInt64)));

  SUBCASE("non-increasing dates") {
    CHECK_THROWS_AS(SitsStack(torch::zeros({2, 10, 4, 4}), {{2021, 2, 5}, {2021, 2, 5}}, torch::zeros({2, 4, 4}), "s"),
                    DataError);
  }
  SUBCASE("two calendar years") {
    CHECK_THROWS_AS(SitsStack(torch::zeros({2, 10, 4, 4}), {{2020, 12, 5}, {2021, 1, 5}}, torch::zeros({2, 4, 4}), "s"),
                    DataError);
  }
  SUBCASE("date count") {
    CHECK_THROWS_AS(SitsStack(torch::zeros({3, 10, 4, 4}), dates, torch::zeros({3, 4, 4}), "s"), DataError);
  }
  SUBCASE("mask range") {
    CHECK_THROWS_AS(SitsStack(torch::zeros({2, 10, 4, 4}), dates, torch::full({2, 4, 4}, 1.5), "s"), DataError);
  }
  SUBCASE("band count") {
    CHECK_THROWS_AS(SitsStack(torch::zeros({2, 9, 4, 4}), dates, torch::zeros({2, 4, 4}), "s"), DataError);
  }
  SUBCASE("error names the patch") {
    try {
      SitsStack(torch::zeros({2, 9, 4, 4}), dates, torch::zeros({2, 4, 4}), "tile_42");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("tile_42") != std::string::npos);
    }
  }
}

TEST_CASE("label masks hold ids 0..12") {
  CHECK_NOTHROW(LabelMask(torch::full({4, 4}, 12, torch::kInt64)));
  CHECK_THROWS_AS(LabelMask(torch::full({4, 4}, 13, torch::kInt64)), DataError);
  CHECK_THROWS_AS(LabelMask(torch::full({4, 4}, -1, torch::kInt64)), DataError);
  CHECK((LabelMask(torch::zeros({4, 4}, torch::kUInt8)).labels().scalar_type() == torch::kInt64));
}

TEST_CASE("probability maps are validated per pixel") {
  auto probs = torch::softmax(torch::randn({13, 3, 3}, torch::kFloat64), 0);
  CHECK(validate(probs));
  CHECK(validate(probs.unsqueeze(0).repeat({2, 1, 1, 1})));
  CHECK_NOTHROW(ClassProbabilityMap{probs});

  auto off = probs.clone();
  off[0][1][1] += 2e-5;
  CHECK_FALSE(validate(off));
  CHECK_THROWS_AS(ClassProbabilityMap{off}, DataError);

  auto within = probs.clone();
  within[0][1][1] += 5e-6;
  CHECK(validate(within));

  auto negative = probs.clone();
  negative[0][0][0] = -1e-3;
  negative[1][0][0] += 1e-3;
  CHECK_FALSE(validate(negative));
  CHECK_THROWS_AS(ClassProbabilityMap(torch::full({12, 2, 2}, 1.0 / 12)), DataError);
}

TEST_CASE("argmax breaks ties toward the lowest class index") {
  auto probs = torch::full({13, 2, 2}, 0.0, torch::kFloat64);
  probs.index_put_({3}, 0.5);
  probs.index_put_({7}, 0.5);
  const auto labels = argmax_labels(probs);
  CHECK(labels.equal(torch::full({2, 2}, 3, torch::kInt64)));
  const auto batched = argmax_labels(probs.unsqueeze(0));
  CHECK(batched.sizes() == std::vector<int64_t>{1, 2, 2});

  auto uniform = torch::full({13, 1, 1}, 1.0 / 13, torch::kFloat64);
  CHECK(argmax_labels(ClassProbabilityMap(uniform)).labels().item<int64_t>() == 0);
}

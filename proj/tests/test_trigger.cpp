#include "ulp/trigger.hpp"

#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "ulp/errors.hpp"

using namespace ulp;

namespace {

ImageTensor zero_image(size_t h, size_t w, size_t c) {
  ImageTensor img;
  img.data = Tensor({h, w, c});
  img.label = 0;
  return img;
}

TriggerSpec ones_trigger(size_t h, size_t w, size_t c) {
  TriggerSpec t;
  t.id = "ones";
  t.pattern = Tensor({h, w, c});
  std::fill(t.pattern.data.begin(), t.pattern.data.end(), 1.0);
  return t;
}

}  // namespace

TEST_CASE("trigger bank: distinct binary patterns, deterministic") {
  auto bank = generate_trigger_bank(20, {5, 5}, 1, 0);
  CHECK(bank.size() == 20);
  std::set<std::vector<double>> seen;
  for (const auto& t : bank) {
    CHECK(t.pattern.shape == std::vector<size_t>{5, 5, 1});
    for (double v : t.pattern.data) CHECK((v == 0.0 || v == 1.0));
    CHECK(seen.insert(t.pattern.data).second);
  }
  auto bank2 = generate_trigger_bank(20, {5, 5}, 1, 0);
  for (size_t i = 0; i < bank.size(); ++i) CHECK(bank[i].pattern.data == bank2[i].pattern.data);

  auto rgb = generate_trigger_bank(20, {7, 7}, 3, 1);
  CHECK(rgb.size() == 20);
  CHECK(rgb[0].pattern.shape == std::vector<size_t>{7, 7, 3});
}

TEST_CASE("trigger bank: exhaustive 1x1 space") {
  auto bank = generate_trigger_bank(2, {1, 1}, 1, 0);
  std::set<double> values = {bank[0].pattern.data[0], bank[1].pattern.data[0]};
  CHECK(values == std::set<double>{0.0, 1.0});
  CHECK_THROWS_AS(generate_trigger_bank(3, {1, 1}, 1, 0), CapacityError);
}

TEST_CASE("split_trigger_bank: disjoint partition") {
  auto bank = generate_trigger_bank(20, {5, 5}, 1, 3);
  for (uint64_t seed : {0ULL, 1ULL, 42ULL}) {
    auto [train, test] = split_trigger_bank(bank, 10, seed);
    CHECK(train.size() == 10);
    CHECK(test.size() == 10);
    std::set<std::string> train_ids, test_ids;
    for (const auto& t : train) train_ids.insert(t.id);
    for (const auto& t : test) test_ids.insert(t.id);
    for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);
    CHECK(train_ids.size() + test_ids.size() == 20);
  }
  CHECK_THROWS_AS(split_trigger_bank(bank, 20, 0), InvalidArgument);
}

TEST_CASE("apply_trigger: fixed corner stamps exactly the patch region") {
  auto img = zero_image(8, 8, 1);
  auto trg = ones_trigger(2, 2, 1);
  Rng rng(0);

  PlacementPolicy tl{PlacementMode::FixedCorner, Corner::TL, 0};
  auto out = apply_trigger(img, trg, tl, rng);
  for (size_t y = 0; y < 8; ++y)
    for (size_t x = 0; x < 8; ++x)
      CHECK(out.data.at({y, x, 0}) == ((y < 2 && x < 2) ? 1.0 : 0.0));

  PlacementPolicy br{PlacementMode::FixedCorner, Corner::BR, 0};
  auto out2 = apply_trigger(img, trg, br, rng);
  for (size_t y = 0; y < 8; ++y)
    for (size_t x = 0; x < 8; ++x)
      CHECK(out2.data.at({y, x, 0}) == ((y >= 6 && x >= 6) ? 1.0 : 0.0));

  CHECK(out.label == img.label);
}

TEST_CASE("apply_trigger: margin and oversize") {
  auto img = zero_image(8, 8, 1);
  auto trg = ones_trigger(2, 2, 1);
  Rng rng(0);
  PlacementPolicy tl{PlacementMode::FixedCorner, Corner::TL, 1};
  auto out = apply_trigger(img, trg, tl, rng);
  CHECK(out.data.at({0, 0, 0}) == 0.0);
  CHECK(out.data.at({1, 1, 0}) == 1.0);
  CHECK(out.data.at({2, 2, 0}) == 1.0);
  CHECK(out.data.at({3, 3, 0}) == 0.0);

  auto big = ones_trigger(9, 9, 1);
  PlacementPolicy any{PlacementMode::FixedCorner, Corner::TL, 0};
  CHECK_THROWS_AS(apply_trigger(img, big, any, rng), InvalidArgument);
}

// Empirical frequency oracle: top-left offsets of random-location placement
// should be uniform over the 7x7 offset grid. Chi-square with 48 degrees of
// freedom; critical value at alpha = 0.01 is 73.683.
TEST_CASE("apply_trigger: random-location uniformity (chi-square)") {
  Rng rng(12345);
  PlacementPolicy policy{PlacementMode::RandomLocation, std::nullopt, 0};
  const int draws = 10000;
  std::vector<int> counts(49, 0);
  for (int i = 0; i < draws; ++i) {
    auto [oy, ox] = draw_placement(policy, 8, 8, 2, 2, rng);
    CHECK(oy <= 6);
    CHECK(ox <= 6);
    counts[oy * 7 + ox]++;
  }
  const double expected = draws / 49.0;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 73.683);
}

TEST_CASE("apply_trigger: random corner hits all four corners") {
  Rng rng(99);
  PlacementPolicy policy{PlacementMode::RandomCorner, std::nullopt, 0};
  std::set<std::pair<size_t, size_t>> offsets;
  for (int i = 0; i < 200; ++i) offsets.insert(draw_placement(policy, 8, 8, 2, 2, rng));
  CHECK(offsets == std::set<std::pair<size_t, size_t>>{{0, 0}, {0, 6}, {6, 0}, {6, 6}});
}

TEST_CASE("poison_dataset: bookkeeping") {
  auto ds = make_synthetic_dataset(5, 4, 100, {16, 16, 1});
  auto bank = generate_trigger_bank(1, {3, 3}, 1, 0);
  AttackSpec attack;
  attack.source = 1;
  attack.target = 2;
  attack.trigger = bank[0];
  attack.placement = {PlacementMode::FixedCorner, Corner::BR, 0};

  SUBCASE("ratio 0.5 appends 50") {
    attack.ratio = 0.5;
    Rng rng(0);
    auto poisoned = poison_dataset(ds, attack, rng);
    CHECK(poisoned.train_size() == ds.train_size() + 50);
    CHECK(poisoned.test_size() == ds.test_size());
    CHECK(poisoned.test_images.data == ds.test_images.data);
    for (size_t i = ds.train_size(); i < poisoned.train_size(); ++i)
      CHECK(poisoned.train_labels[i] == 2);
    // clean originals retained
    for (size_t i = 0; i < ds.train_size(); ++i)
      CHECK(poisoned.train_labels[i] == ds.train_labels[i]);
  }
  SUBCASE("ratio 1.0 appends all 100") {
    attack.ratio = 1.0;
    Rng rng(0);
    CHECK(poison_dataset(ds, attack, rng).train_size() == ds.train_size() + 100);
  }
  SUBCASE("ratio 0.01 appends one") {
    attack.ratio = 0.01;
    Rng rng(0);
    CHECK(poison_dataset(ds, attack, rng).train_size() == ds.train_size() + 1);
  }
  SUBCASE("source == target rejected") {
    attack.target = 1;
    Rng rng(0);
    CHECK_THROWS_AS(poison_dataset(ds, attack, rng), InvalidArgument);
  }
}

TEST_CASE("trigger bank archive round trip") {
  TempDir tmp;
  TriggerBank bank;
  bank.triggers = generate_trigger_bank(6, {3, 3}, 1, 17);
  bank.seed = 17;
  auto [train, test] = split_trigger_bank(bank.triggers, 3, 1);
  for (const auto& t : train) bank.train_ids.push_back(t.id);
  for (const auto& t : test) bank.test_ids.push_back(t.id);

  save_trigger_bank(bank, tmp.path / "bank");
  auto back = load_trigger_bank(tmp.path / "bank");
  CHECK(back.triggers.size() == 6);
  CHECK(back.train_ids == bank.train_ids);
  CHECK(back.test_ids == bank.test_ids);
  for (size_t i = 0; i < 6; ++i) {
    CHECK(back.triggers[i].id == bank.triggers[i].id);
    CHECK(back.triggers[i].pattern.data == bank.triggers[i].pattern.data);
  }
}

#include "ulp/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "nlohmann/json.hpp"
#include "ulp/npy.hpp"

namespace ulp {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<TriggerSpec> generate_trigger_bank(int n, std::pair<int, int> size, int channels,
                                               uint64_t seed) {
  if (n < 1) throw InvalidArgument("trigger bank size must be >= 1");
  if (size.first < 1 || size.second < 1 || channels < 1)
    throw InvalidArgument("trigger dims must be positive");
  const size_t bits = static_cast<size_t>(size.first) * size.second * channels;
  if (bits < 63 && static_cast<uint64_t>(n) > (uint64_t{1} << bits))
    throw CapacityError("pattern space too small for " + std::to_string(n) +
                        " distinct triggers");

  Rng rng(seed);
  std::set<std::vector<bool>> seen;
  std::vector<TriggerSpec> bank;
  bank.reserve(static_cast<size_t>(n));
  while (bank.size() < static_cast<size_t>(n)) {
    std::vector<bool> key(bits);
    for (size_t i = 0; i < bits; ++i) key[i] = rng.bernoulli(0.5);
    if (!seen.insert(key).second) continue;  // collision: resample
    TriggerSpec t;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "trigger-%03zu", bank.size());
    t.id = buf;
    t.pattern = Tensor({static_cast<size_t>(size.first), static_cast<size_t>(size.second),
                        static_cast<size_t>(channels)});
    for (size_t i = 0; i < bits; ++i) t.pattern.data[i] = key[i] ? 1.0 : 0.0;
    bank.push_back(std::move(t));
  }
  return bank;
}

std::pair<std::vector<TriggerSpec>, std::vector<TriggerSpec>> split_trigger_bank(
    const std::vector<TriggerSpec>& bank, int n_train, uint64_t seed) {
  if (n_train < 0 || static_cast<size_t>(n_train) >= bank.size())
    throw InvalidArgument("n_train must be < |bank|");
  std::vector<size_t> order(bank.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<TriggerSpec> train, test;
  for (size_t i = 0; i < order.size(); ++i) {
    (i < static_cast<size_t>(n_train) ? train : test).push_back(bank[order[i]]);
  }
  return {std::move(train), std::move(test)};
}

std::pair<size_t, size_t> draw_placement(const PlacementPolicy& policy, size_t img_h, size_t img_w,
                                         size_t trg_h, size_t trg_w, Rng& rng) {
  const size_t m = static_cast<size_t>(policy.margin);
  if (trg_h + 2 * m > img_h || trg_w + 2 * m > img_w)
    throw InvalidArgument("trigger does not fit inside image under placement policy");

  auto corner_offset = [&](Corner c) -> std::pair<size_t, size_t> {
    const size_t y1 = img_h - m - trg_h;
    const size_t x1 = img_w - m - trg_w;
    switch (c) {
      case Corner::TL: return {m, m};
      case Corner::TR: return {m, x1};
      case Corner::BL: return {y1, m};
      case Corner::BR: return {y1, x1};
    }
    throw InvalidArgument("bad corner");
  };

  switch (policy.mode) {
    case PlacementMode::FixedCorner:
      if (!policy.corner) throw InvalidArgument("fixed-corner placement requires a corner");
      return corner_offset(*policy.corner);
    case PlacementMode::RandomCorner:
      return corner_offset(static_cast<Corner>(rng.uniform_int(0, 3)));
    case PlacementMode::RandomLocation: {
      const size_t y = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(img_h - trg_h)));
      const size_t x = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(img_w - trg_w)));
      return {y, x};
    }
  }
  throw InvalidArgument("bad placement mode");
}

namespace {

// Overwrites the patch region in a packed image buffer.
void stamp_at(double* img, std::array<size_t, 3> shape, const TriggerSpec& trg, size_t oy,
              size_t ox) {
  const size_t w = shape[1], c = shape[2];
  for (size_t y = 0; y < trg.height(); ++y)
    for (size_t x = 0; x < trg.width(); ++x)
      for (size_t ch = 0; ch < c; ++ch)
        img[((oy + y) * w + (ox + x)) * c + ch] = trg.pattern.data[(y * trg.width() + x) * c + ch];
}

}  // namespace

ImageTensor apply_trigger(const ImageTensor& image, const TriggerSpec& trigger,
                          const PlacementPolicy& placement, Rng& rng) {
  const auto& sh = image.data.shape;
  if (sh.size() != 3) throw DimensionError("image must be H x W x C");
  if (trigger.channels() != sh[2])
    throw DimensionError("trigger channel count does not match image");
  if (trigger.height() > sh[0] || trigger.width() > sh[1])
    throw InvalidArgument("trigger larger than image");
  const auto [oy, ox] =
      draw_placement(placement, sh[0], sh[1], trigger.height(), trigger.width(), rng);
  ImageTensor out = image;
  stamp_at(out.data.data.data(), {sh[0], sh[1], sh[2]}, trigger, oy, ox);
  return out;
}

DatasetSplit poison_dataset(const DatasetSplit& split, const AttackSpec& attack, Rng& rng) {
  if (attack.source == attack.target) throw InvalidArgument("attack source must differ from target");
  if (attack.source < 0 || attack.source >= split.num_classes || attack.target < 0 ||
      attack.target >= split.num_classes)
    throw InvalidArgument("attack classes out of range");
  if (!(attack.ratio > 0.0 && attack.ratio <= 1.0))
    throw InvalidArgument("poison ratio must be in (0,1]");
  if (attack.trigger.channels() != split.shape[2] || attack.trigger.height() > split.shape[0] ||
      attack.trigger.width() > split.shape[1])
    throw DimensionError("trigger incompatible with dataset shape");

  std::vector<size_t> src = split.train_indices_of_class(attack.source);
  if (src.empty()) throw InvalidArgument("no source-class images to poison");
  const size_t n_poison =
      static_cast<size_t>(std::ceil(attack.ratio * static_cast<double>(src.size())));
  rng.shuffle(src);
  src.resize(n_poison);

  const size_t numel = split.image_numel();
  DatasetSplit out = split;
  out.train_images.shape[0] += n_poison;
  out.train_images.data.resize(out.train_images.shape[0] * numel);
  for (size_t j = 0; j < n_poison; ++j) {
    double* dst = out.train_images.data.data() + (split.train_size() + j) * numel;
    std::copy_n(split.train_images.data.begin() + static_cast<ptrdiff_t>(src[j] * numel), numel,
                dst);
    const auto [oy, ox] = draw_placement(attack.placement, split.shape[0], split.shape[1],
                                         attack.trigger.height(), attack.trigger.width(), rng);
    stamp_at(dst, split.shape, attack.trigger, oy, ox);
    out.train_labels.push_back(attack.target);
  }
  return out;
}

const TriggerSpec& TriggerBank::by_id(const std::string& id) const {
  for (const auto& t : triggers)
    if (t.id == id) return t;
  throw InvalidArgument("unknown trigger id " + id);
}

std::vector<TriggerSpec> TriggerBank::train_triggers() const {
  std::vector<TriggerSpec> out;
  for (const auto& id : train_ids) out.push_back(by_id(id));
  return out;
}

std::vector<TriggerSpec> TriggerBank::test_triggers() const {
  std::vector<TriggerSpec> out;
  for (const auto& id : test_ids) out.push_back(by_id(id));
  return out;
}

void TriggerBank::validate() const {
  std::set<std::string> ids;
  std::set<std::vector<double>> patterns;
  for (const auto& t : triggers) {
    if (!ids.insert(t.id).second) throw InvalidArgument("duplicate trigger id " + t.id);
    if (!patterns.insert(t.pattern.data).second)
      throw InvalidArgument("duplicate trigger pattern for " + t.id);
    for (double v : t.pattern.data)
      if (v != 0.0 && v != 1.0) throw InvalidArgument("trigger pattern must be binary");
  }
  std::set<std::string> train(train_ids.begin(), train_ids.end());
  for (const auto& id : test_ids)
    if (train.count(id)) throw InvalidArgument("train/test trigger banks overlap on " + id);
  for (const auto& id : train_ids) by_id(id);
  for (const auto& id : test_ids) by_id(id);
}

void save_trigger_bank(const TriggerBank& bank, const fs::path& base) {
  if (bank.triggers.empty()) throw InvalidArgument("cannot save empty trigger bank");
  const auto& first = bank.triggers.front().pattern.shape;
  Tensor packed({bank.triggers.size(), first[0], first[1], first[2]});
  json ids = json::array();
  const size_t numel = Tensor::numel(first);
  for (size_t i = 0; i < bank.triggers.size(); ++i) {
    const auto& t = bank.triggers[i];
    if (t.pattern.shape != first) throw DimensionError("mixed trigger sizes in one bank");
    std::copy_n(t.pattern.data.begin(), numel,
                packed.data.begin() + static_cast<ptrdiff_t>(i * numel));
    ids.push_back(t.id);
  }
  write_npz(base.string() + ".npz", {{"patterns", packed, Dtype::U1}});
  json side = {{"format", "ulplab-triggerbank-v1"},
               {"ids", ids},
               {"size", {first[0], first[1]}},
               {"channels", first[2]},
               {"seed", bank.seed},
               {"split", {{"train_ids", bank.train_ids}, {"test_ids", bank.test_ids}}}};
  std::ofstream out(base.string() + ".json");
  if (!out) throw IoError("cannot write " + base.string() + ".json");
  out << side.dump(2) << "\n";
}

TriggerBank load_trigger_bank(const fs::path& base) {
  std::ifstream in(base.string() + ".json");
  if (!in) throw IoError("cannot open " + base.string() + ".json");
  json side;
  try {
    in >> side;
  } catch (const json::exception& e) {
    throw CorruptFileError("bad trigger bank sidecar: " + std::string(e.what()));
  }
  if (side.value("format", "") != "ulplab-triggerbank-v1")
    throw CorruptFileError("unknown trigger bank format in " + base.string() + ".json");
  auto arrays = read_npz(base.string() + ".npz");
  if (!arrays.count("patterns"))
    throw CorruptFileError("trigger bank archive missing 'patterns' array");
  const Tensor& packed = arrays["patterns"];
  if (packed.ndim() != 4) throw CorruptFileError("trigger patterns must be n x h x w x C");

  TriggerBank bank;
  bank.seed = side.value("seed", 0ULL);
  const auto ids = side.at("ids");
  if (ids.size() != packed.shape[0])
    throw CorruptFileError("trigger id count does not match pattern count");
  const size_t numel = packed.shape[1] * packed.shape[2] * packed.shape[3];
  for (size_t i = 0; i < packed.shape[0]; ++i) {
    TriggerSpec t;
    t.id = ids.at(i).get<std::string>();
    t.pattern = Tensor({packed.shape[1], packed.shape[2], packed.shape[3]});
    std::copy_n(packed.data.begin() + static_cast<ptrdiff_t>(i * numel), numel,
                t.pattern.data.begin());
    bank.triggers.push_back(std::move(t));
  }
  bank.train_ids = side.at("split").at("train_ids").get<std::vector<std::string>>();
  bank.test_ids = side.at("split").at("test_ids").get<std::vector<std::string>>();
  bank.validate();
  return bank;
}

}  // namespace ulp

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ulp/dataset.hpp"
#include "ulp/rng.hpp"
#include "ulp/tensor.hpp"

namespace ulp {

// A binary patch pattern. `pattern` has shape h x w x C with values in {0,1}.
struct TriggerSpec {
  std::string id;
  Tensor pattern;

  size_t height() const { return pattern.shape[0]; }
  size_t width() const { return pattern.shape[1]; }
  size_t channels() const { return pattern.shape[2]; }
};

enum class Corner { TL, TR, BL, BR };
enum class PlacementMode { FixedCorner, RandomCorner, RandomLocation };

struct PlacementPolicy {
  PlacementMode mode = PlacementMode::RandomCorner;
  std::optional<Corner> corner;  // present iff mode == FixedCorner
  int margin = 0;
};

// One poisoning recipe: stamp `trigger` onto source-class images and relabel
// them to `target`. `ratio` is poisoned-per-clean-source-image in (0,1].
struct AttackSpec {
  int source = 0;
  int target = 1;
  TriggerSpec trigger;
  double ratio = 0.5;
  PlacementPolicy placement;
};

// n distinct binary patterns, fair-coin per pixel, deterministic in seed.
// Throws CapacityError when the pattern space cannot hold n distinct
// patterns.
std::vector<TriggerSpec> generate_trigger_bank(int n, std::pair<int, int> size, int channels,
                                               uint64_t seed);

// Disjoint partition of `bank` into (train, test) with |train| == n_train.
std::pair<std::vector<TriggerSpec>, std::vector<TriggerSpec>> split_trigger_bank(
    const std::vector<TriggerSpec>& bank, int n_train, uint64_t seed);

// Top-left stamp offset for a placement draw; exposed for tests.
std::pair<size_t, size_t> draw_placement(const PlacementPolicy& policy, size_t img_h, size_t img_w,
                                         size_t trg_h, size_t trg_w, Rng& rng);

// Copy of `image` with the patch region overwritten by the trigger pattern.
// Label is unchanged.
ImageTensor apply_trigger(const ImageTensor& image, const TriggerSpec& trigger,
                          const PlacementPolicy& placement, Rng& rng);

// Appends ceil(ratio * |source-class train images|) stamped, target-labeled
// copies of uniformly chosen source-class train images. Clean originals and
// the test part are untouched.
DatasetSplit poison_dataset(const DatasetSplit& split, const AttackSpec& attack, Rng& rng);

// A generated bank plus its train/test id partition.
struct TriggerBank {
  std::vector<TriggerSpec> triggers;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  uint64_t seed = 0;

  const TriggerSpec& by_id(const std::string& id) const;
  std::vector<TriggerSpec> train_triggers() const;
  std::vector<TriggerSpec> test_triggers() const;
  void validate() const;  // ids unique, split disjoint, patterns binary
};

// <base>.npz {patterns: n x h x w x C} + <base>.json {ids, size, seed, split}.
void save_trigger_bank(const TriggerBank& bank, const std::filesystem::path& base);
TriggerBank load_trigger_bank(const std::filesystem::path& base);

}  // namespace ulp

#include "ulp/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <fstream>
#include <map>

#include "doctest.h"
#include "test_util.hpp"
#include "ulp/errors.hpp"

using namespace ulp;

namespace {

// Writes a tiny IDX image/label pair so the MNIST loader can be exercised
// without the real files.
void write_idx_pair(const std::filesystem::path& root, const std::string& img_name,
                    const std::string& lbl_name, int n, bool gzip_labels) {
  std::vector<uint8_t> img = {0, 0, 8, 3};
  auto push32 = [](std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(x >> 24);
    v.push_back((x >> 16) & 0xff);
    v.push_back((x >> 8) & 0xff);
    v.push_back(x & 0xff);
  };
  push32(img, static_cast<uint32_t>(n));
  push32(img, 28);
  push32(img, 28);
  for (int i = 0; i < n * 28 * 28; ++i) img.push_back(static_cast<uint8_t>(i % 256));
  std::ofstream(root / img_name, std::ios::binary)
      .write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));

  std::vector<uint8_t> lbl = {0, 0, 8, 1};
  push32(lbl, static_cast<uint32_t>(n));
  for (int i = 0; i < n; ++i) lbl.push_back(static_cast<uint8_t>(i % 10));
  if (gzip_labels) {
    gzFile f = gzopen((root / (lbl_name + ".gz")).string().c_str(), "wb");
    gzwrite(f, lbl.data(), static_cast<unsigned>(lbl.size()));
    gzclose(f);
  } else {
    std::ofstream(root / lbl_name, std::ios::binary)
        .write(reinterpret_cast<const char*>(lbl.data()),
               static_cast<std::streamsize>(lbl.size()));
  }
}

}  // namespace

TEST_CASE("synthetic dataset: counts, balance, determinism") {
  auto ds = make_synthetic_dataset(0, 4, 200, {16, 16, 1});
  CHECK(ds.train_size() == 800);
  CHECK(ds.num_classes == 4);
  std::map<int, int> counts;
  for (int l : ds.train_labels) counts[l]++;
  for (int k = 0; k < 4; ++k) CHECK(counts[k] == 200);

  auto ds2 = make_synthetic_dataset(0, 4, 200, {16, 16, 1});
  CHECK(ds.train_images.data == ds2.train_images.data);
  CHECK(ds.test_images.data == ds2.test_images.data);
  CHECK(ds.train_labels == ds2.train_labels);

  auto ds3 = make_synthetic_dataset(1, 4, 200, {16, 16, 1});
  CHECK(ds.train_images.data != ds3.train_images.data);
}

TEST_CASE("synthetic dataset: values normalized to [0,1]") {
  auto ds = make_synthetic_dataset(7, 3, 20, {12, 12, 1});
  auto [mn, mx] = std::minmax_element(ds.train_images.data.begin(), ds.train_images.data.end());
  CHECK(*mn >= 0.0);
  CHECK(*mx <= 1.0);
  ds.validate();
}

TEST_CASE("synthetic dataset: contract errors") {
  CHECK_THROWS_AS(make_synthetic_dataset(0, 1, 100, {16, 16, 1}), InvalidArgument);
  CHECK_THROWS_AS(make_synthetic_dataset(0, 4, 1, {16, 16, 1}), InvalidArgument);
  CHECK_THROWS_AS(make_synthetic_dataset(0, 4, 100, {4, 4, 1}), InvalidArgument);
}

TEST_CASE("subsample: identity at fraction 1") {
  auto ds = make_synthetic_dataset(3, 4, 50, {16, 16, 1});
  auto sub = subsample(ds, 1.0, 0);
  CHECK(sub.train_images.data == ds.train_images.data);
  CHECK(sub.test_labels == ds.test_labels);
}

TEST_CASE("subsample: stratified counts") {
  auto ds = make_synthetic_dataset(3, 10, 100, {16, 16, 1});  // 1000 train
  auto sub = subsample(ds, 0.1, 7);
  CHECK(sub.train_size() == 100);
  std::map<int, int> counts;
  for (int l : sub.train_labels) counts[l]++;
  for (int k = 0; k < 10; ++k) CHECK(counts[k] == 10);
}

TEST_CASE("subsample: fraction bounds") {
  auto ds = make_synthetic_dataset(3, 3, 10, {16, 16, 1});
  CHECK_THROWS_AS(subsample(ds, 0.0, 0), InvalidArgument);
  CHECK_THROWS_AS(subsample(ds, 1.5, 0), InvalidArgument);
}

TEST_CASE("dataset archive round trip") {
  TempDir tmp;
  auto ds = make_synthetic_dataset(11, 3, 12, {10, 10, 1});
  save_dataset_archive(ds, tmp.path / "synth", 11);
  auto back = load_dataset_archive(tmp.path / "synth");
  CHECK(back.num_classes == 3);
  CHECK(back.shape == ds.shape);
  CHECK(back.train_size() == ds.train_size());
  CHECK(back.train_labels == ds.train_labels);
  // images stored as f4: equal to float precision
  for (size_t i = 0; i < ds.train_images.size(); ++i)
    CHECK(back.train_images.data[i] ==
          doctest::Approx(ds.train_images.data[i]).epsilon(1e-7));
}

TEST_CASE("load_dataset: unknown name") {
  CHECK_THROWS_AS(load_dataset("nosuch", "."), UnsupportedDatasetError);
}

TEST_CASE("load_dataset: missing files") {
  TempDir tmp;
  CHECK_THROWS_AS(load_dataset("mnist", tmp.path), IoError);
}

TEST_CASE("load_dataset: mnist idx parsing (raw + gz)") {
  TempDir tmp;
  write_idx_pair(tmp.path, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 20, true);
  write_idx_pair(tmp.path, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10, false);
  auto ds = load_dataset("mnist", tmp.path);
  CHECK(ds.num_classes == 10);
  CHECK(ds.shape == std::array<size_t, 3>{28, 28, 1});
  CHECK(ds.train_size() == 20);
  CHECK(ds.test_size() == 10);
  CHECK(ds.train_labels[3] == 3);
  CHECK(ds.train_images.data[1] == doctest::Approx(1.0 / 255.0));
}

TEST_CASE("load_dataset: corrupt idx rejected") {
  TempDir tmp;
  std::ofstream(tmp.path / "train-images-idx3-ubyte") << "bogus";
  write_idx_pair(tmp.path, "zz", "train-labels-idx1-ubyte", 4, false);
  CHECK_THROWS_AS(load_dataset("mnist", tmp.path), CorruptFileError);
}

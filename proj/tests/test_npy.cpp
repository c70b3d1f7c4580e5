#include "ulp/npy.hpp"

#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "ulp/errors.hpp"

using namespace ulp;

TEST_CASE("npy round trip preserves f8 bits and shape") {
  TempDir tmp;
  Tensor t({3, 4});
  for (size_t i = 0; i < t.size(); ++i) t.data[i] = 0.1 * static_cast<double>(i) - 0.7;
  const auto path = tmp.path / "a.npy";
  write_npy(path, t, Dtype::F8);
  Tensor back = read_npy(path);
  CHECK(back.shape == t.shape);
  for (size_t i = 0; i < t.size(); ++i) CHECK(back.data[i] == t.data[i]);
}

TEST_CASE("npy f4 narrows to float precision") {
  TempDir tmp;
  Tensor t({2});
  t.data = {1.0 / 3.0, -2.5};
  const auto path = tmp.path / "b.npy";
  write_npy(path, t, Dtype::F4);
  Tensor back = read_npy(path);
  CHECK(back.data[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  CHECK(back.data[1] == -2.5);
}

TEST_CASE("npz stores multiple named arrays") {
  TempDir tmp;
  Tensor a({2, 2});
  a.data = {1, 2, 3, 4};
  Tensor b({3});
  b.data = {9, 8, 7};
  const auto path = tmp.path / "multi.npz";
  write_npz(path, {{"alpha", a, Dtype::F8}, {"beta", b, Dtype::I8}});
  auto arrays = read_npz(path);
  REQUIRE(arrays.size() == 2);
  CHECK(arrays.at("alpha").shape == std::vector<size_t>{2, 2});
  CHECK(arrays.at("alpha").data == std::vector<double>{1, 2, 3, 4});
  CHECK(arrays.at("beta").data == std::vector<double>{9, 8, 7});
}

TEST_CASE("truncated npz is rejected") {
  TempDir tmp;
  Tensor a({8});
  const auto path = tmp.path / "t.npz";
  write_npz(path, {{"x", a, Dtype::F8}});
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS_AS(read_npz(path), CorruptFileError);
}

TEST_CASE("missing file raises IoError") {
  CHECK_THROWS_AS(read_npy("/nonexistent/x.npy"), IoError);
}

TEST_CASE("garbage npy is rejected") {
  TempDir tmp;
  const auto path = tmp.path / "junk.npy";
  std::ofstream(path) << "not a numpy file at all";
  CHECK_THROWS_AS(read_npy(path), CorruptFileError);
}

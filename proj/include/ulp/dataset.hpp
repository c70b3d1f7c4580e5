#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ulp/tensor.hpp"

namespace ulp {

// One image with its class label. `data` has shape H x W x C, values in [0,1].
struct ImageTensor {
  Tensor data;
  int label = 0;
};

// An immutable train/test split. Images are stored packed (N x H x W x C)
// for batch access; `image(i)` materializes a single ImageTensor copy.
struct DatasetSplit {
  std::string name;
  int num_classes = 0;
  std::array<size_t, 3> shape{};  // H, W, C
  Tensor train_images;            // N_train x H x W x C
  std::vector<int> train_labels;
  Tensor test_images;  // N_test x H x W x C
  std::vector<int> test_labels;

  size_t train_size() const { return train_labels.size(); }
  size_t test_size() const { return test_labels.size(); }
  size_t image_numel() const { return shape[0] * shape[1] * shape[2]; }

  ImageTensor train_image(size_t i) const;
  ImageTensor test_image(size_t i) const;

  std::vector<size_t> train_indices_of_class(int k) const;
  std::vector<size_t> test_indices_of_class(int k) const;

  // Throws if any invariant is violated (labels in range, values in [0,1],
  // both parts non-empty, shapes consistent).
  void validate() const;
};

// Loads a named on-disk dataset. Currently supported: "mnist" (IDX files,
// optionally gzipped, under `root`). Unknown names throw
// UnsupportedDatasetError; missing or malformed files throw IoError naming
// the offending file. Pixel values are scaled to [0,1].
DatasetSplit load_dataset(const std::string& name, const std::filesystem::path& root);

// Deterministic separable synthetic dataset: each class is a Gaussian blob
// at a class-specific location on a ring, over low background noise, with a
// couple of faint distractor blobs. A small CNN reaches >95% test accuracy.
// Test part holds max(8, n_per_class/5) images per class.
DatasetSplit make_synthetic_dataset(uint64_t seed, int num_classes, int n_per_class,
                                    std::array<size_t, 3> shape);

// Per-class stratified subsample of both parts. fraction == 1 returns an
// identical split.
DatasetSplit subsample(const DatasetSplit& split, double fraction, uint64_t seed);

// Portable archive: <base>.train.npz / <base>.test.npz each holding
// {images: N x H x W x C float32, labels: N int64}, plus sidecar
// <base>.json {name, K, shape, seed}.
void save_dataset_archive(const DatasetSplit& split, const std::filesystem::path& base,
                          uint64_t seed = 0);
DatasetSplit load_dataset_archive(const std::filesystem::path& base);

}  // namespace ulp

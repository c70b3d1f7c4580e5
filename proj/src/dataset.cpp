#include "ulp/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "nlohmann/json.hpp"
#include "ulp/npy.hpp"
#include "ulp/rng.hpp"

namespace ulp {

namespace fs = std::filesystem;
using nlohmann::json;

ImageTensor DatasetSplit::train_image(size_t i) const {
  const size_t n = image_numel();
  Tensor t({shape[0], shape[1], shape[2]});
  std::copy_n(train_images.data.begin() + static_cast<ptrdiff_t>(i * n), n, t.data.begin());
  return {std::move(t), train_labels[i]};
}

ImageTensor DatasetSplit::test_image(size_t i) const {
  const size_t n = image_numel();
  Tensor t({shape[0], shape[1], shape[2]});
  std::copy_n(test_images.data.begin() + static_cast<ptrdiff_t>(i * n), n, t.data.begin());
  return {std::move(t), test_labels[i]};
}

std::vector<size_t> DatasetSplit::train_indices_of_class(int k) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < train_labels.size(); ++i)
    if (train_labels[i] == k) out.push_back(i);
  return out;
}

std::vector<size_t> DatasetSplit::test_indices_of_class(int k) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < test_labels.size(); ++i)
    if (test_labels[i] == k) out.push_back(i);
  return out;
}

void DatasetSplit::validate() const {
  if (num_classes < 2) throw InvalidArgument("dataset must have at least 2 classes");
  if (train_labels.empty() || test_labels.empty())
    throw InvalidArgument("dataset parts must be non-empty");
  const size_t n = image_numel();
  if (train_images.size() != train_labels.size() * n ||
      test_images.size() != test_labels.size() * n)
    throw DimensionError("image buffer does not match label count and shape");
  auto check = [&](const Tensor& images, const std::vector<int>& labels, const char* part) {
    for (int l : labels)
      if (l < 0 || l >= num_classes)
        throw InvalidArgument(std::string("label out of range in ") + part);
    for (double v : images.data)
      if (!(v >= 0.0 && v <= 1.0))
        throw InvalidArgument(std::string("pixel outside [0,1] in ") + part);
  };
  check(train_images, train_labels, "train");
  check(test_images, test_labels, "test");
}

namespace {

// --- MNIST / IDX ---

// Reads a whole file through zlib's gz layer, which transparently handles
// both gzipped and raw files.
std::vector<uint8_t> read_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<uint8_t> out;
  uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw CorruptFileError("decompression failed for " + path.string());
  return out;
}

fs::path find_idx_file(const fs::path& root, const std::string& stem) {
  for (const char* suffix : {"", ".gz"}) {
    fs::path p = root / (stem + suffix);
    if (fs::exists(p)) return p;
  }
  throw IoError("missing dataset file " + (root / stem).string() + "[.gz]");
}

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void load_idx_images(const fs::path& path, Tensor& out, size_t expect_h, size_t expect_w) {
  const auto bytes = read_maybe_gz(path);
  if (bytes.size() < 16 || be32(bytes.data()) != 0x00000803)
    throw CorruptFileError("not an IDX3 image file: " + path.string());
  const size_t n = be32(bytes.data() + 4);
  const size_t h = be32(bytes.data() + 8);
  const size_t w = be32(bytes.data() + 12);
  if (h != expect_h || w != expect_w)
    throw CorruptFileError("unexpected image dims in " + path.string());
  if (bytes.size() < 16 + n * h * w) throw CorruptFileError("truncated IDX file: " + path.string());
  out = Tensor({n, h, w, 1});
  for (size_t i = 0; i < n * h * w; ++i) out.data[i] = bytes[16 + i] / 255.0;
}

void load_idx_labels(const fs::path& path, std::vector<int>& out) {
  const auto bytes = read_maybe_gz(path);
  if (bytes.size() < 8 || be32(bytes.data()) != 0x00000801)
    throw CorruptFileError("not an IDX1 label file: " + path.string());
  const size_t n = be32(bytes.data() + 4);
  if (bytes.size() < 8 + n) throw CorruptFileError("truncated IDX file: " + path.string());
  out.resize(n);
  for (size_t i = 0; i < n; ++i) out[i] = bytes[8 + i];
}

DatasetSplit load_mnist(const fs::path& root) {
  DatasetSplit ds;
  ds.name = "mnist";
  ds.num_classes = 10;
  ds.shape = {28, 28, 1};
  load_idx_images(find_idx_file(root, "train-images-idx3-ubyte"), ds.train_images, 28, 28);
  load_idx_labels(find_idx_file(root, "train-labels-idx1-ubyte"), ds.train_labels);
  load_idx_images(find_idx_file(root, "t10k-images-idx3-ubyte"), ds.test_images, 28, 28);
  load_idx_labels(find_idx_file(root, "t10k-labels-idx1-ubyte"), ds.test_labels);
  ds.validate();
  return ds;
}

// --- synthetic generator ---

void stamp_blob(Tensor& images, size_t img, std::array<size_t, 3> shape, double cy, double cx,
                double amp, double sigma) {
  const size_t h = shape[0], w = shape[1], c = shape[2];
  const double r2max = 9.0 * sigma * sigma;
  double* base = images.data.data() + img * h * w * c;
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      if (d2 > r2max) continue;
      const double v = amp * std::exp(-d2 / (2.0 * sigma * sigma));
      for (size_t ch = 0; ch < c; ++ch) {
        double& px = base[(y * w + x) * c + ch];
        px = std::max(px, v);
      }
    }
  }
}

}  // namespace

DatasetSplit load_dataset(const std::string& name, const fs::path& root) {
  if (name == "mnist") return load_mnist(root);
  throw UnsupportedDatasetError("unsupported dataset '" + name + "'");
}

DatasetSplit make_synthetic_dataset(uint64_t seed, int num_classes, int n_per_class,
                                    std::array<size_t, 3> shape) {
  if (num_classes < 2) throw InvalidArgument("synthetic dataset needs K >= 2");
  if (n_per_class < 2) throw InvalidArgument("synthetic dataset needs n_per_class >= 2");
  if (shape[0] < 8 || shape[1] < 8) throw InvalidArgument("synthetic images must be at least 8x8");
  if (shape[2] < 1) throw InvalidArgument("channel count must be >= 1");

  const int test_per_class = std::max(8, n_per_class / 5);
  const double ring = 0.30 * static_cast<double>(std::min(shape[0], shape[1]));
  const double cy0 = (shape[0] - 1) / 2.0;
  const double cx0 = (shape[1] - 1) / 2.0;

  auto make_part = [&](int per_class, uint64_t part_seed, Tensor& images,
                       std::vector<int>& labels) {
    Rng rng(part_seed);
    const size_t n = static_cast<size_t>(per_class) * num_classes;
    images = Tensor({n, shape[0], shape[1], shape[2]});
    labels.resize(n);
    for (size_t i = 0; i < n; ++i) {
      const int k = static_cast<int>(i % num_classes);
      labels[i] = k;
      double* px = images.data.data() + i * Tensor::numel({shape[0], shape[1], shape[2]});
      const size_t numel = shape[0] * shape[1] * shape[2];
      for (size_t j = 0; j < numel; ++j) px[j] = rng.uniform(0.0, 0.25);

      const double theta = 2.0 * M_PI * k / num_classes;
      const double cy = cy0 + ring * std::sin(theta) + rng.uniform(-1.5, 1.5);
      const double cx = cx0 + ring * std::cos(theta) + rng.uniform(-1.5, 1.5);
      stamp_blob(images, i, shape, cy, cx, rng.uniform(0.75, 1.0), 1.6);

      // Faint distractors keep per-image statistics varied without making
      // classes overlap.
      for (int d = 0; d < 2; ++d) {
        stamp_blob(images, i, shape, rng.uniform(0.0, shape[0] - 1.0),
                   rng.uniform(0.0, shape[1] - 1.0), rng.uniform(0.25, 0.45), 1.1);
      }
      for (size_t j = 0; j < numel; ++j) px[j] = std::clamp(px[j], 0.0, 1.0);
    }
  };

  DatasetSplit ds;
  ds.name = "synthetic";
  ds.num_classes = num_classes;
  ds.shape = shape;
  make_part(n_per_class, Rng::derive(seed, 1), ds.train_images, ds.train_labels);
  make_part(test_per_class, Rng::derive(seed, 2), ds.test_images, ds.test_labels);
  ds.validate();
  return ds;
}

DatasetSplit subsample(const DatasetSplit& split, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw InvalidArgument("subsample fraction must be in (0,1]");
  if (fraction == 1.0) return split;

  const size_t numel = split.image_numel();
  auto pick_part = [&](const Tensor& images, const std::vector<int>& labels, uint64_t part_seed,
                       Tensor& out_images, std::vector<int>& out_labels) {
    std::vector<size_t> selected;
    for (int k = 0; k < split.num_classes; ++k) {
      std::vector<size_t> idx;
      for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == k) idx.push_back(i);
      if (idx.empty()) continue;
      size_t m = static_cast<size_t>(std::llround(fraction * static_cast<double>(idx.size())));
      m = std::clamp<size_t>(m, 1, idx.size());
      Rng rng(Rng::derive(part_seed, static_cast<uint64_t>(k)));
      rng.shuffle(idx);
      idx.resize(m);
      selected.insert(selected.end(), idx.begin(), idx.end());
    }
    // Keep original ordering so fraction-1-like samples stay stable.
    std::sort(selected.begin(), selected.end());
    out_images = Tensor({selected.size(), split.shape[0], split.shape[1], split.shape[2]});
    out_labels.resize(selected.size());
    for (size_t j = 0; j < selected.size(); ++j) {
      std::copy_n(images.data.begin() + static_cast<ptrdiff_t>(selected[j] * numel), numel,
                  out_images.data.begin() + static_cast<ptrdiff_t>(j * numel));
      out_labels[j] = labels[selected[j]];
    }
  };

  DatasetSplit out;
  out.name = split.name;
  out.num_classes = split.num_classes;
  out.shape = split.shape;
  pick_part(split.train_images, split.train_labels, Rng::derive(seed, 101), out.train_images,
            out.train_labels);
  pick_part(split.test_images, split.test_labels, Rng::derive(seed, 202), out.test_images,
            out.test_labels);
  out.validate();
  return out;
}

void save_dataset_archive(const DatasetSplit& split, const fs::path& base, uint64_t seed) {
  auto labels_tensor = [](const std::vector<int>& labels) {
    Tensor t({labels.size()});
    for (size_t i = 0; i < labels.size(); ++i) t.data[i] = labels[i];
    return t;
  };
  write_npz(base.string() + ".train.npz", {{"images", split.train_images, Dtype::F4},
                                           {"labels", labels_tensor(split.train_labels), Dtype::I8}});
  write_npz(base.string() + ".test.npz", {{"images", split.test_images, Dtype::F4},
                                          {"labels", labels_tensor(split.test_labels), Dtype::I8}});
  json side = {{"format", "ulplab-dataset-v1"},
               {"name", split.name},
               {"K", split.num_classes},
               {"shape", {split.shape[0], split.shape[1], split.shape[2]}},
               {"seed", seed},
               {"train", base.filename().string() + ".train.npz"},
               {"test", base.filename().string() + ".test.npz"}};
  std::ofstream out(base.string() + ".json");
  if (!out) throw IoError("cannot write " + base.string() + ".json");
  out << side.dump(2) << "\n";
}

DatasetSplit load_dataset_archive(const fs::path& base) {
  std::ifstream in(base.string() + ".json");
  if (!in) throw IoError("cannot open " + base.string() + ".json");
  json side;
  try {
    in >> side;
  } catch (const json::exception& e) {
    throw CorruptFileError("bad dataset sidecar " + base.string() + ".json: " + e.what());
  }
  if (side.value("format", "") != "ulplab-dataset-v1")
    throw CorruptFileError("unknown dataset archive format in " + base.string() + ".json");

  DatasetSplit ds;
  ds.name = side.at("name").get<std::string>();
  ds.num_classes = side.at("K").get<int>();
  const auto sh = side.at("shape");
  ds.shape = {sh.at(0).get<size_t>(), sh.at(1).get<size_t>(), sh.at(2).get<size_t>()};

  auto read_part = [&](const std::string& key, Tensor& images, std::vector<int>& labels) {
    const fs::path p = base.parent_path() / side.at(key).get<std::string>();
    auto arrays = read_npz(p);
    if (!arrays.count("images") || !arrays.count("labels"))
      throw CorruptFileError("dataset archive missing arrays: " + p.string());
    images = std::move(arrays["images"]);
    const Tensor& lt = arrays["labels"];
    labels.resize(lt.size());
    for (size_t i = 0; i < lt.size(); ++i) labels[i] = static_cast<int>(lt.data[i]);
  };
  read_part("train", ds.train_images, ds.train_labels);
  read_part("test", ds.test_images, ds.test_labels);
  ds.validate();
  return ds;
}

}  // namespace ulp

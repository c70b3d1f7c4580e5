#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ulp/rng.hpp"

namespace ulp::nn {

// Activations are batch-major: one row per sample, features flattened in
// H x W x C (channel-last) order.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape3 {
  int h = 0, w = 0, c = 0;
  int size() const { return h * w * c; }
  bool operator==(const Shape3&) const = default;
};

// Per-call scratch written by forward and consumed by backward. Keeping it
// outside the layer keeps concurrent read-only forwards race-free.
struct LayerState {
  Mat m0, m1;
  std::vector<int> iv;
  std::vector<LayerState> kids;
  Mat dropout_mask;  // set by Network when dropout augmentation is active
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Shape3 output_shape() const = 0;
  virtual Mat forward(const Mat& x, LayerState& st) const = 0;
  // Returns dLoss/dInput. When pg != nullptr it holds one pre-zeroed matrix
  // per parameter (same order as params()) to accumulate gradients into.
  virtual Mat backward(const Mat& dy, const LayerState& st, std::vector<Mat>* pg) const = 0;
  virtual std::vector<Mat*> params() { return {}; }
  virtual std::vector<const Mat*> params() const { return {}; }
  virtual std::vector<std::string> param_names() const { return {}; }

  // Dropout augmentation attaches after block-boundary layers.
  bool block_boundary = false;
};

std::unique_ptr<Layer> make_conv2d(Shape3 in, int out_channels, int kernel, int stride,
                                   const std::string& name);
std::unique_ptr<Layer> make_relu(Shape3 in);
std::unique_ptr<Layer> make_maxpool2(Shape3 in);
std::unique_ptr<Layer> make_dense(int in_features, int out_features, const std::string& name);
std::unique_ptr<Layer> make_global_avg_pool(Shape3 in);
std::unique_ptr<Layer> make_residual_block(Shape3 in, int channels, int kernel, int stride,
                                           const std::string& name);

struct DropoutCfg {
  double rate = 0.0;
  Rng* rng = nullptr;
};

struct ForwardCtx {
  std::vector<LayerState> states;
  DropoutCfg dropout;
};

// A feed-forward stack ending in K logits. Move-only; clone via
// architecture rebuild plus parameter copy (see zoo).
class Network {
 public:
  Network() = default;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  void add(std::unique_ptr<Layer> layer);

  Shape3 input_shape;
  int num_classes = 0;

  // Inference forward (no scratch kept, no dropout).
  Mat forward(const Mat& x) const;
  // Training forward; ctx keeps per-layer scratch for backward.
  Mat forward(const Mat& x, ForwardCtx& ctx) const;
  // dlogits: B x K. Accumulates parameter grads into *pg when given (one
  // entry per params() element, pre-zeroed by grad_buffers()). Returns
  // dLoss/dInput when want_dx.
  Mat backward(const Mat& dlogits, ForwardCtx& ctx, std::vector<Mat>* pg, bool want_dx) const;

  std::vector<Mat*> params();
  std::vector<const Mat*> params() const;
  std::vector<std::string> param_names() const;
  std::vector<Mat> grad_buffers() const;  // zeroed, shapes matching params()

  size_t n_layers() const { return layers_.size(); }
  const Layer& layer(size_t i) const { return *layers_[i]; }
  Layer& layer(size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// Mean softmax cross-entropy over rows; writes batch-mean dlogits when asked.
double softmax_xent(const Mat& logits, const std::vector<int>& labels, Mat* dlogits);
// Row-wise softmax probabilities.
Mat softmax(const Mat& logits);
std::vector<int> argmax_rows(const Mat& m);
double accuracy(const Mat& logits, const std::vector<int>& labels);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<Mat*>& params, const std::vector<Mat>& grads) = 0;
};

class Sgd : public Optimizer {
 public:
  explicit Sgd(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}
  void step(const std::vector<Mat*>& params, const std::vector<Mat>& grads) override;

 private:
  double lr_, momentum_;
  std::vector<Mat> velocity_;
};

class Adam : public Optimizer {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const std::vector<Mat*>& params, const std::vector<Mat>& grads) override;

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double lr);

// Global count of images pushed through Network::forward; the timing
// benchmark asserts forward-pass budgets with it.
uint64_t forward_image_count();
void reset_forward_image_count();

}  // namespace ulp::nn

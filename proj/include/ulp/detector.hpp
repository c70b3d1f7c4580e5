#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "ulp/nn.hpp"
#include "ulp/tensor.hpp"

namespace ulp {

enum class Pooling { Concat, Max, Avg };
std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& s);
int pooled_dim(Pooling p, int m, int k);

// Pools an M x K logit matrix into a single row vector: concat flattens
// pattern-major (K*M values), max/avg reduce over patterns per class.
nn::Mat pool(const nn::Mat& logits, Pooling mode);

// Anisotropic total variation: sum over channels of |forward horizontal
// diffs| + |forward vertical diffs|, neighbors only (no padding).
double tv_norm(const double* data, int h, int w, int c);
double tv_norm(const Tensor& pattern);
// Accumulates the TV subgradient (sign convention: sign(0) = 0).
void tv_norm_grad(const double* data, int h, int w, int c, double scale, double* grad);

// Affine map from pooled vector to 2 logits (class 1 = poisoned).
struct DetectorHead {
  nn::Mat weight;  // D x 2
  nn::Mat bias;    // 1 x 2
};

struct ULPDetector {
  std::string kind = "ulp";  // "ulp" | "noise"
  nn::Mat patterns;          // M x (H*W*C), values in [0,1]
  nn::Shape3 pattern_shape;
  DetectorHead head;
  Pooling pooling = Pooling::Concat;
  double lambda_tv = 0.0;
  int num_classes = 0;
  double threshold = 0.5;
  std::vector<std::string> trained_on;  // model ids seen during training
  nlohmann::json provenance;

  int pattern_count() const { return static_cast<int>(patterns.rows()); }
  void validate() const;
};

// P(poisoned) for one frozen model; pure.
double detector_forward(const nn::Network& model, const ULPDetector& det);
// The pooled logit feature vector (input of the head).
nn::Mat pooled_response(const nn::Network& model, const ULPDetector& det);

enum class PatternInit { UniformRandom, MidGray };

nn::Mat init_patterns(int m, nn::Shape3 shape, PatternInit strategy, uint64_t seed);

// A frozen candidate model with its supervision label (0 clean, 1 poisoned).
struct ModelHandle {
  const nn::Network* net = nullptr;
  int label = 0;
  std::string id;
};

struct UlpTrainConfig {
  int M = 10;
  double lambda_tv = 1e-3;
  // When set, lambda_tv is chosen from this grid on a stratified validation
  // split of the training models before the final full training run.
  std::optional<std::vector<double>> lambda_grid;
  Pooling pooling = Pooling::Concat;
  int epochs = 120;
  double lr_patterns = 0.05;
  double lr_head = 0.02;
  double dropout_rate = 0.2;
  int batch_models = 16;
  uint64_t seed = 0;
  PatternInit init = PatternInit::UniformRandom;
  bool optimize_patterns = true;
  int workers = 1;

  nlohmann::json to_json() const;
  static UlpTrainConfig from_json(const nlohmann::json& j);
};

// Jointly optimizes patterns and head on frozen models (projected Adam on
// the patterns, clamped to [0,1] after every step). Dropout augmentation is
// applied to model activations during training forwards only. The decision
// threshold is picked on the training models by Youden's J.
ULPDetector train_ulps(const std::vector<ModelHandle>& train_models, nn::Shape3 input_shape,
                       int num_classes, const UlpTrainConfig& cfg);

// Full-batch training loss (mean cross-entropy + lambda * sum TV) and its
// analytic gradients wrt patterns and head, without dropout. This is the
// same per-model math the training loop runs; exposed for gradient checks.
struct UlpGradients {
  double loss = 0.0;
  nn::Mat d_patterns, d_weight, d_bias;
};
UlpGradients ulp_loss_gradients(const std::vector<ModelHandle>& models, const ULPDetector& det,
                                double lambda_tv);

// Noise baseline: patterns drawn once as integer pixels in [0,255] (stored
// /255) and frozen; only the head is trained. Shares the training loop with
// train_ulps; provenance records zero pattern-gradient steps.
ULPDetector train_noise_detector(const std::vector<ModelHandle>& train_models,
                                 nn::Shape3 input_shape, int num_classes, UlpTrainConfig cfg);

// <base>.npz {patterns, head_weight, head_bias} + <base>.json sidecar.
void save_detector(const ULPDetector& det, const std::filesystem::path& base);
ULPDetector load_detector(const std::filesystem::path& base);

}  // namespace ulp

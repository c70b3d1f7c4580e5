#include "ulp/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ulp/errors.hpp"
#include "ulp/metrics.hpp"
#include "ulp/npy.hpp"
#include "ulp/parallel.hpp"
#include "ulp/rng.hpp"

namespace ulp {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Mat;

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::Concat: return "concat";
    case Pooling::Max: return "max";
    case Pooling::Avg: return "avg";
  }
  throw InvalidArgument("bad pooling");
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "concat") return Pooling::Concat;
  if (s == "max") return Pooling::Max;
  if (s == "avg") return Pooling::Avg;
  throw InvalidArgument("unknown pooling mode '" + s + "'");
}

int pooled_dim(Pooling p, int m, int k) { return p == Pooling::Concat ? m * k : k; }

Mat pool(const Mat& logits, Pooling mode) {
  const int m = static_cast<int>(logits.rows());
  const int k = static_cast<int>(logits.cols());
  switch (mode) {
    case Pooling::Concat: {
      // Pattern-major: [f(z_0) row, f(z_1) row, ...]
      return Eigen::Map<const Mat>(logits.data(), 1, m * k);
    }
    case Pooling::Max: return logits.colwise().maxCoeff();
    case Pooling::Avg: return logits.colwise().mean();
  }
  throw InvalidArgument("bad pooling");
}

double tv_norm(const double* data, int h, int w, int c) {
  double total = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        total += std::abs(data[(y * w + x + 1) * c + ch] - data[(y * w + x) * c + ch]);
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        total += std::abs(data[((y + 1) * w + x) * c + ch] - data[(y * w + x) * c + ch]);
  return total;
}

double tv_norm(const Tensor& pattern) {
  if (pattern.ndim() != 3) throw DimensionError("tv_norm expects an H x W x C tensor");
  return tv_norm(pattern.data.data(), static_cast<int>(pattern.shape[0]),
                 static_cast<int>(pattern.shape[1]), static_cast<int>(pattern.shape[2]));
}

void tv_norm_grad(const double* data, int h, int w, int c, double scale, double* grad) {
  auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const double s = sign(data[(y * w + x + 1) * c + ch] - data[(y * w + x) * c + ch]);
        grad[(y * w + x + 1) * c + ch] += scale * s;
        grad[(y * w + x) * c + ch] -= scale * s;
      }
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const double s = sign(data[((y + 1) * w + x) * c + ch] - data[(y * w + x) * c + ch]);
        grad[((y + 1) * w + x) * c + ch] += scale * s;
        grad[(y * w + x) * c + ch] -= scale * s;
      }
}

void ULPDetector::validate() const {
  if (patterns.rows() < 1) throw InvalidArgument("detector needs at least one pattern");
  if (patterns.cols() != pattern_shape.size())
    throw DimensionError("pattern buffer does not match pattern shape");
  const int want = pooled_dim(pooling, pattern_count(), num_classes);
  if (head.weight.rows() != want || head.weight.cols() != 2)
    throw DimensionError("detector head expects " + std::to_string(want) +
                         "x2 weights, got " + std::to_string(head.weight.rows()) + "x" +
                         std::to_string(head.weight.cols()));
  if (head.bias.rows() != 1 || head.bias.cols() != 2)
    throw DimensionError("detector head bias must be 1x2");
  if (kind != "ulp" && kind != "noise") throw InvalidArgument("unknown detector kind " + kind);
}

namespace {

void check_model_compat(const nn::Network& model, const ULPDetector& det) {
  if (model.input_shape.size() != det.patterns.cols())
    throw DimensionError("model input size " + std::to_string(model.input_shape.size()) +
                         " does not match pattern size " + std::to_string(det.patterns.cols()));
  if (model.num_classes != det.num_classes)
    throw DimensionError("model has " + std::to_string(model.num_classes) +
                         " classes, detector expects " + std::to_string(det.num_classes));
}

}  // namespace

Mat pooled_response(const nn::Network& model, const ULPDetector& det) {
  check_model_compat(model, det);
  return pool(model.forward(det.patterns), det.pooling);
}

double detector_forward(const nn::Network& model, const ULPDetector& det) {
  Mat z = pooled_response(model, det) * det.head.weight;
  z.row(0) += det.head.bias.row(0);
  const Mat p = nn::softmax(z);
  return p(0, 1);
}

Mat init_patterns(int m, nn::Shape3 shape, PatternInit strategy, uint64_t seed) {
  if (m < 1) throw InvalidArgument("pattern count must be >= 1");
  if (shape.size() <= 0) throw DimensionError("bad pattern shape");
  Mat patterns(m, shape.size());
  if (strategy == PatternInit::MidGray) {
    patterns.setConstant(0.5);
  } else {
    Rng rng(Rng::derive(seed, 0x9A77));
    for (Eigen::Index i = 0; i < patterns.size(); ++i) patterns.data()[i] = rng.uniform();
  }
  return patterns;
}

json UlpTrainConfig::to_json() const {
  json j = {{"M", M},
            {"lambda_tv", lambda_tv},
            {"pooling", ulp::to_string(pooling)},
            {"epochs", epochs},
            {"lr_patterns", lr_patterns},
            {"lr_head", lr_head},
            {"dropout_rate", dropout_rate},
            {"batch_models", batch_models},
            {"seed", seed},
            {"init", init == PatternInit::MidGray ? "mid-gray" : "uniform-random"},
            {"optimize_patterns", optimize_patterns}};
  if (lambda_grid) j["lambda_grid"] = *lambda_grid;
  return j;
}

UlpTrainConfig UlpTrainConfig::from_json(const json& j) {
  UlpTrainConfig c;
  c.M = j.value("M", c.M);
  c.lambda_tv = j.value("lambda_tv", c.lambda_tv);
  if (j.contains("lambda_grid")) c.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
  if (j.contains("pooling")) c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  c.lr_patterns = j.value("lr_patterns", c.lr_patterns);
  c.lr_head = j.value("lr_head", c.lr_head);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.batch_models = j.value("batch_models", c.batch_models);
  c.seed = j.value("seed", c.seed);
  if (j.value("init", "uniform-random") == std::string("mid-gray")) c.init = PatternInit::MidGray;
  c.optimize_patterns = j.value("optimize_patterns", c.optimize_patterns);
  return c;
}

namespace {

struct PerModelGrad {
  double loss = 0.0;
  Mat d_weight, d_bias, d_patterns;
};

Mat unpool_grad(const Mat& dpooled, const Mat& logits, Pooling pooling, int m, int k) {
  switch (pooling) {
    case Pooling::Concat: return Eigen::Map<const Mat>(dpooled.data(), m, k);
    case Pooling::Max: {
      Mat dlogits = Mat::Zero(m, k);
      for (int c = 0; c < k; ++c) {
        Eigen::Index arg;
        logits.col(c).maxCoeff(&arg);
        dlogits(arg, c) = dpooled(0, c);
      }
      return dlogits;
    }
    case Pooling::Avg: {
      Mat dlogits(m, k);
      for (int c = 0; c < k; ++c) dlogits.col(c).setConstant(dpooled(0, c) / m);
      return dlogits;
    }
  }
  throw InvalidArgument("bad pooling");
}

// Loss and gradients contributed by a single frozen model.
PerModelGrad model_loss_grad(const nn::Network& net, int label, const Mat& patterns,
                             const DetectorHead& head, Pooling pooling, int num_classes,
                             const nn::DropoutCfg& dropout, bool want_pattern_grad) {
  nn::ForwardCtx ctx;
  ctx.dropout = dropout;
  const Mat logits = net.forward(patterns, ctx);  // M x K
  const Mat pooled = pool(logits, pooling);
  Mat z = pooled * head.weight;
  z.row(0) += head.bias.row(0);
  Mat dz;
  PerModelGrad g;
  g.loss = nn::softmax_xent(z, {label}, &dz);
  g.d_weight = pooled.transpose() * dz;
  g.d_bias = dz;
  if (want_pattern_grad) {
    const Mat dpooled = dz * head.weight.transpose();
    const Mat dlogits = unpool_grad(dpooled, logits, pooling,
                                    static_cast<int>(patterns.rows()), num_classes);
    g.d_patterns = net.backward(dlogits, ctx, nullptr, true);
  }
  return g;
}

// One joint optimization run over the given models at a fixed lambda.
ULPDetector run_training(const std::vector<ModelHandle>& models, nn::Shape3 input_shape,
                         int num_classes, const UlpTrainConfig& cfg, double lambda,
                         Mat initial_patterns) {
  const int n_models = static_cast<int>(models.size());
  const int dim = pooled_dim(cfg.pooling, cfg.M, num_classes);

  ULPDetector det;
  det.kind = cfg.optimize_patterns ? "ulp" : "noise";
  det.patterns = std::move(initial_patterns);
  det.pattern_shape = input_shape;
  det.head.weight = Mat::Zero(dim, 2);
  det.head.bias = Mat::Zero(1, 2);
  det.pooling = cfg.pooling;
  det.lambda_tv = lambda;
  det.num_classes = num_classes;

  nn::Adam head_opt(cfg.lr_head);
  nn::Adam pattern_opt(cfg.lr_patterns);
  uint64_t pattern_grad_steps = 0;

  std::vector<size_t> order(models.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(Rng::derive(cfg.seed, 0x5FFF));

  std::vector<double> epoch_losses;
  std::vector<double> pattern_min_curve, pattern_max_curve;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int steps = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_models)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_models));
      const size_t bsz = end - start;
      std::vector<PerModelGrad> slots(bsz);

      parallel_for(bsz, cfg.workers, [&](size_t bi) {
        const ModelHandle& handle = models[order[start + bi]];
        Rng dropout_rng(Rng::derive(cfg.seed, (static_cast<uint64_t>(epoch) << 32) ^
                                                  (order[start + bi] * 2654435761ULL)));
        nn::DropoutCfg dropout;
        if (cfg.dropout_rate > 0.0) dropout = {cfg.dropout_rate, &dropout_rng};
        slots[bi] = model_loss_grad(*handle.net, handle.label, det.patterns, det.head,
                                    cfg.pooling, num_classes, dropout, cfg.optimize_patterns);
      });

      // Reduce in model order so runs are bit-reproducible regardless of
      // thread scheduling.
      Mat d_weight = Mat::Zero(dim, 2);
      Mat d_bias = Mat::Zero(1, 2);
      Mat d_patterns = Mat::Zero(det.patterns.rows(), det.patterns.cols());
      double batch_loss = 0.0;
      for (const auto& g : slots) {
        batch_loss += g.loss;
        d_weight += g.d_weight;
        d_bias += g.d_bias;
        if (cfg.optimize_patterns) d_patterns += g.d_patterns;
      }
      const double inv = 1.0 / static_cast<double>(bsz);
      d_weight *= inv;
      d_bias *= inv;
      batch_loss *= inv;
      if (!std::isfinite(batch_loss))
        throw TrainingFailure("ULP training loss is not finite at epoch " +
                              std::to_string(epoch));

      head_opt.step({&det.head.weight, &det.head.bias}, {d_weight, d_bias});
      if (cfg.optimize_patterns) {
        d_patterns *= inv;
        for (int m = 0; m < cfg.M; ++m)
          tv_norm_grad(det.patterns.row(m).data(), input_shape.h, input_shape.w, input_shape.c,
                       lambda, d_patterns.row(m).data());
        std::vector<Mat> pg = {std::move(d_patterns)};
        pattern_opt.step({&det.patterns}, pg);
        det.patterns = det.patterns.cwiseMax(0.0).cwiseMin(1.0);
        ++pattern_grad_steps;
      }
      epoch_loss += batch_loss;
      ++steps;
    }
    epoch_losses.push_back(epoch_loss / std::max(1, steps));
    pattern_min_curve.push_back(det.patterns.minCoeff());
    pattern_max_curve.push_back(det.patterns.maxCoeff());
  }

  // Decision threshold from training models only (Youden's J).
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& h : models) {
    scores.push_back(detector_forward(*h.net, det));
    labels.push_back(h.label);
  }
  det.threshold = youden_threshold(scores, labels);
  for (const auto& h : models) det.trained_on.push_back(h.id);

  det.provenance = {{"config", cfg.to_json()},
                    {"lambda_tv", lambda},
                    {"n_train_models", n_models},
                    {"loss_curve", epoch_losses},
                    {"pattern_min_curve", pattern_min_curve},
                    {"pattern_max_curve", pattern_max_curve},
                    {"pattern_grad_steps", pattern_grad_steps}};
  det.validate();
  return det;
}

void check_training_set(const std::vector<ModelHandle>& models) {
  bool has0 = false, has1 = false;
  for (const auto& h : models) {
    if (!h.net) throw InvalidArgument("null model handle");
    has0 |= h.label == 0;
    has1 |= h.label == 1;
  }
  if (!has0 || !has1)
    throw InvalidArgument("detector training needs both clean and poisoned models");
}

}  // namespace

UlpGradients ulp_loss_gradients(const std::vector<ModelHandle>& models, const ULPDetector& det,
                                double lambda_tv) {
  if (models.empty()) throw InvalidArgument("need at least one model");
  det.validate();
  UlpGradients out;
  out.d_patterns = Mat::Zero(det.patterns.rows(), det.patterns.cols());
  out.d_weight = Mat::Zero(det.head.weight.rows(), det.head.weight.cols());
  out.d_bias = Mat::Zero(1, 2);
  for (const auto& h : models) {
    const PerModelGrad g = model_loss_grad(*h.net, h.label, det.patterns, det.head, det.pooling,
                                           det.num_classes, nn::DropoutCfg{}, true);
    out.loss += g.loss;
    out.d_weight += g.d_weight;
    out.d_bias += g.d_bias;
    out.d_patterns += g.d_patterns;
  }
  const double inv = 1.0 / static_cast<double>(models.size());
  out.loss *= inv;
  out.d_weight *= inv;
  out.d_bias *= inv;
  out.d_patterns *= inv;
  for (int m = 0; m < det.pattern_count(); ++m) {
    out.loss += lambda_tv * tv_norm(det.patterns.row(m).data(), det.pattern_shape.h,
                                    det.pattern_shape.w, det.pattern_shape.c);
    tv_norm_grad(det.patterns.row(m).data(), det.pattern_shape.h, det.pattern_shape.w,
                 det.pattern_shape.c, lambda_tv, out.d_patterns.row(m).data());
  }
  return out;
}

ULPDetector train_ulps(const std::vector<ModelHandle>& train_models, nn::Shape3 input_shape,
                       int num_classes, const UlpTrainConfig& cfg) {
  check_training_set(train_models);
  if (cfg.M < 1) throw InvalidArgument("M must be >= 1");

  double lambda = cfg.lambda_tv;
  json lambda_search;
  if (cfg.lambda_grid && cfg.lambda_grid->size() > 1 && train_models.size() >= 8) {
    // Stratified 80/20 validation split of the training models.
    std::vector<size_t> pos, neg;
    for (size_t i = 0; i < train_models.size(); ++i)
      (train_models[i].label == 1 ? pos : neg).push_back(i);
    Rng rng(Rng::derive(cfg.seed, 0x1A3B));
    rng.shuffle(pos);
    rng.shuffle(neg);
    std::vector<ModelHandle> tr, val;
    auto assign = [&](const std::vector<size_t>& idx) {
      const size_t n_val = std::max<size_t>(1, idx.size() / 5);
      for (size_t i = 0; i < idx.size(); ++i)
        (i < n_val ? val : tr).push_back(train_models[idx[i]]);
    };
    assign(pos);
    assign(neg);

    UlpTrainConfig probe_cfg = cfg;
    probe_cfg.epochs = std::max(10, cfg.epochs / 3);
    probe_cfg.lambda_grid.reset();
    double best_auc = -1.0;
    for (double cand : *cfg.lambda_grid) {
      ULPDetector d = run_training(tr, input_shape, num_classes, probe_cfg, cand,
                                   init_patterns(cfg.M, input_shape, cfg.init, cfg.seed));
      std::vector<double> scores;
      std::vector<int> labels;
      for (const auto& h : val) {
        scores.push_back(detector_forward(*h.net, d));
        labels.push_back(h.label);
      }
      const double auc = roc_auc(scores, labels).second;
      lambda_search[std::to_string(cand)] = auc;
      if (auc > best_auc + 1e-12) {
        best_auc = auc;
        lambda = cand;
      }
    }
  }

  ULPDetector det = run_training(train_models, input_shape, num_classes, cfg, lambda,
                                 init_patterns(cfg.M, input_shape, cfg.init, cfg.seed));
  if (!lambda_search.is_null()) det.provenance["lambda_search_auc"] = lambda_search;
  return det;
}

ULPDetector train_noise_detector(const std::vector<ModelHandle>& train_models,
                                 nn::Shape3 input_shape, int num_classes, UlpTrainConfig cfg) {
  check_training_set(train_models);
  if (cfg.M < 1) throw InvalidArgument("M must be >= 1");
  cfg.optimize_patterns = false;
  cfg.lambda_grid.reset();
  cfg.lambda_tv = 0.0;

  // Integer pixel values in [0,255], rescaled into the model input domain.
  Mat patterns(cfg.M, input_shape.size());
  Rng rng(Rng::derive(cfg.seed, 0xBEEF));
  for (Eigen::Index i = 0; i < patterns.size(); ++i)
    patterns.data()[i] = static_cast<double>(rng.uniform_int(0, 255)) / 255.0;

  return run_training(train_models, input_shape, num_classes, cfg, 0.0, std::move(patterns));
}

void save_detector(const ULPDetector& det, const fs::path& base) {
  det.validate();
  Tensor patterns({static_cast<size_t>(det.pattern_count()),
                   static_cast<size_t>(det.pattern_shape.h),
                   static_cast<size_t>(det.pattern_shape.w),
                   static_cast<size_t>(det.pattern_shape.c)});
  std::copy_n(det.patterns.data(), det.patterns.size(), patterns.data.begin());
  Tensor weight({static_cast<size_t>(det.head.weight.rows()), 2});
  std::copy_n(det.head.weight.data(), det.head.weight.size(), weight.data.begin());
  Tensor bias({1, 2});
  std::copy_n(det.head.bias.data(), det.head.bias.size(), bias.data.begin());
  write_npz(base.string() + ".npz", {{"patterns", patterns, Dtype::F8},
                                     {"head_weight", weight, Dtype::F8},
                                     {"head_bias", bias, Dtype::F8}});
  json side = {{"format", "ulplab-detector-v1"},
               {"kind", det.kind},
               {"M", det.pattern_count()},
               {"K", det.num_classes},
               {"pattern_shape", {det.pattern_shape.h, det.pattern_shape.w, det.pattern_shape.c}},
               {"pooling", to_string(det.pooling)},
               {"lambda_tv", det.lambda_tv},
               {"threshold", det.threshold},
               {"trained_on", det.trained_on},
               {"provenance", det.provenance}};
  std::ofstream out(base.string() + ".json");
  if (!out) throw IoError("cannot write " + base.string() + ".json");
  out << side.dump(2) << "\n";
}

ULPDetector load_detector(const fs::path& base) {
  std::ifstream in(base.string() + ".json");
  if (!in) throw IoError("cannot open " + base.string() + ".json");
  json side;
  try {
    in >> side;
  } catch (const json::exception& e) {
    throw CorruptFileError("bad detector sidecar: " + std::string(e.what()));
  }
  if (side.value("format", "") != "ulplab-detector-v1")
    throw CorruptFileError("unknown detector format in " + base.string() + ".json");

  auto arrays = read_npz(base.string() + ".npz");
  for (const char* key : {"patterns", "head_weight", "head_bias"})
    if (!arrays.count(key))
      throw CorruptFileError(std::string("detector archive missing ") + key);

  ULPDetector det;
  det.kind = side.at("kind").get<std::string>();
  const auto ps = side.at("pattern_shape");
  det.pattern_shape = {ps.at(0).get<int>(), ps.at(1).get<int>(), ps.at(2).get<int>()};
  det.pooling = pooling_from_string(side.at("pooling").get<std::string>());
  det.lambda_tv = side.at("lambda_tv").get<double>();
  det.num_classes = side.at("K").get<int>();
  det.threshold = side.at("threshold").get<double>();
  det.trained_on = side.value("trained_on", std::vector<std::string>{});
  det.provenance = side.value("provenance", json::object());

  const Tensor& patterns = arrays["patterns"];
  if (patterns.ndim() != 4) throw CorruptFileError("patterns must be M x H x W x C");
  const int m = side.at("M").get<int>();
  if (patterns.shape[0] != static_cast<size_t>(m))
    throw DimensionError("pattern count does not match sidecar M");
  det.patterns = Mat(m, det.pattern_shape.size());
  if (static_cast<Eigen::Index>(patterns.size()) != det.patterns.size())
    throw DimensionError("pattern payload does not match pattern shape");
  std::copy_n(patterns.data.begin(), patterns.size(), det.patterns.data());

  const Tensor& weight = arrays["head_weight"];
  if (weight.ndim() != 2 || weight.shape[1] != 2)
    throw DimensionError("head weight must be D x 2");
  det.head.weight = Mat(weight.shape[0], 2);
  std::copy_n(weight.data.begin(), weight.size(), det.head.weight.data());
  const Tensor& bias = arrays["head_bias"];
  det.head.bias = Mat(1, 2);
  if (bias.size() != 2) throw DimensionError("head bias must have 2 entries");
  std::copy_n(bias.data.begin(), 2, det.head.bias.data());

  det.validate();  // throws DimensionError on K / pooling inconsistency
  return det;
}

}  // namespace ulp

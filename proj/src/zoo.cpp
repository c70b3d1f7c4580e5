#include <cstdio>
#include "ulp/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ulp/metrics.hpp"
#include "ulp/npy.hpp"
#include "ulp/parallel.hpp"

namespace ulp {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Mat;

json Hyper::to_json() const {
  return {{"epochs", epochs}, {"lr", lr}, {"batch", batch}, {"seed", seed},
          {"optimizer", optimizer}};
}

Hyper Hyper::from_json(const json& j) {
  Hyper h;
  h.epochs = j.value("epochs", h.epochs);
  h.lr = j.value("lr", h.lr);
  h.batch = j.value("batch", h.batch);
  h.seed = j.value("seed", h.seed);
  h.optimizer = j.value("optimizer", h.optimizer);
  return h;
}

std::string to_string(ModelLabel l) {
  switch (l) {
    case ModelLabel::Clean: return "clean";
    case ModelLabel::Poisoned: return "poisoned";
    case ModelLabel::AdaptivePoisoned: return "adaptive-poisoned";
  }
  throw InvalidArgument("bad model label");
}

ModelLabel model_label_from_string(const std::string& s) {
  if (s == "clean") return ModelLabel::Clean;
  if (s == "poisoned") return ModelLabel::Poisoned;
  if (s == "adaptive-poisoned") return ModelLabel::AdaptivePoisoned;
  throw InvalidArgument("unknown model label '" + s + "'");
}

namespace {

json placement_to_json(const PlacementPolicy& p) {
  json j = {{"margin", p.margin}};
  switch (p.mode) {
    case PlacementMode::FixedCorner: j["mode"] = "fixed-corner"; break;
    case PlacementMode::RandomCorner: j["mode"] = "random-corner"; break;
    case PlacementMode::RandomLocation: j["mode"] = "random-location"; break;
  }
  if (p.corner) {
    const char* names[] = {"TL", "TR", "BL", "BR"};
    j["corner"] = names[static_cast<int>(*p.corner)];
  }
  return j;
}

PlacementPolicy placement_from_json(const json& j) {
  PlacementPolicy p;
  const std::string mode = j.value("mode", "random-corner");
  if (mode == "fixed-corner")
    p.mode = PlacementMode::FixedCorner;
  else if (mode == "random-corner")
    p.mode = PlacementMode::RandomCorner;
  else if (mode == "random-location")
    p.mode = PlacementMode::RandomLocation;
  else
    throw InvalidArgument("unknown placement mode '" + mode + "'");
  p.margin = j.value("margin", 0);
  if (j.contains("corner")) {
    const std::string c = j.at("corner").get<std::string>();
    if (c == "TL") p.corner = Corner::TL;
    else if (c == "TR") p.corner = Corner::TR;
    else if (c == "BL") p.corner = Corner::BL;
    else if (c == "BR") p.corner = Corner::BR;
    else throw InvalidArgument("unknown corner '" + c + "'");
  }
  if (p.mode == PlacementMode::FixedCorner && !p.corner)
    throw InvalidArgument("fixed-corner placement requires a corner");
  return p;
}

Mat batch_rows(const Tensor& images, const std::vector<size_t>& idx, size_t numel) {
  Mat x(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(numel));
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(images.data.begin() + static_cast<ptrdiff_t>(idx[r] * numel), numel,
                x.data() + r * numel);
  return x;
}

// Extra per-step loss term; accumulates already-scaled gradients into pg.
using ExtraGrad = std::function<double(nn::Network&, std::vector<Mat>&)>;

TrainResult train_model_impl(nn::Network& net, const DatasetSplit& split, const Hyper& hyper,
                             const ExtraGrad* extra) {
  if (net.num_classes != split.num_classes)
    throw InvalidArgument("model expects " + std::to_string(net.num_classes) +
                          " classes, dataset has " + std::to_string(split.num_classes));
  if (net.input_shape.size() != static_cast<int>(split.image_numel()))
    throw DimensionError("model input shape does not match dataset");
  if (hyper.batch < 1) throw InvalidArgument("batch size must be >= 1");

  const size_t numel = split.image_numel();
  auto optimizer = nn::make_optimizer(hyper.optimizer, hyper.lr);
  Rng rng(Rng::derive(hyper.seed, 0x7A1));

  std::vector<size_t> order(split.train_size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t steps = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hyper.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(hyper.batch));
      std::vector<size_t> idx(order.begin() + static_cast<ptrdiff_t>(start),
                              order.begin() + static_cast<ptrdiff_t>(end));
      Mat x = batch_rows(split.train_images, idx, numel);
      std::vector<int> labels(idx.size());
      for (size_t i = 0; i < idx.size(); ++i) labels[i] = split.train_labels[idx[i]];

      nn::ForwardCtx ctx;
      Mat logits = net.forward(x, ctx);
      Mat dlogits;
      double loss = nn::softmax_xent(logits, labels, &dlogits);
      auto grads = net.grad_buffers();
      net.backward(dlogits, ctx, &grads, false);
      if (extra) loss += (*extra)(net, grads);
      if (!std::isfinite(loss))
        throw TrainingFailure("training loss not finite at epoch " + std::to_string(epoch) +
                              " step " + std::to_string(steps));
      optimizer->step(net.params(), grads);
      epoch_loss += loss;
      ++steps;
    }
    result.loss_curve.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
  }
  result.clean_accuracy = evaluate_accuracy(net, split.test_images, split.test_labels);
  return result;
}

}  // namespace

TrainResult train_model(nn::Network& net, const DatasetSplit& split, const Hyper& hyper) {
  return train_model_impl(net, split, hyper, nullptr);
}

double evaluate_accuracy(const nn::Network& net, const Tensor& images,
                         const std::vector<int>& labels) {
  if (labels.empty()) throw InvalidArgument("empty evaluation set");
  const size_t numel = images.size() / labels.size();
  // Chunked forward keeps im2col buffers small.
  const size_t chunk = 256;
  size_t hit = 0;
  for (size_t start = 0; start < labels.size(); start += chunk) {
    const size_t end = std::min(labels.size(), start + chunk);
    std::vector<size_t> idx(end - start);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Mat logits = net.forward(batch_rows(images, idx, numel));
    const auto pred = nn::argmax_rows(logits);
    for (size_t i = 0; i < idx.size(); ++i) hit += (pred[i] == labels[start + i]);
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double evaluate_attack_success(const nn::Network& net, const DatasetSplit& split,
                               const AttackSpec& attack, uint64_t eval_seed) {
  const auto src = split.test_indices_of_class(attack.source);
  if (src.empty()) throw InvalidArgument("attack source class has no test images");
  const size_t numel = split.image_numel();
  Rng rng(Rng::derive(eval_seed, 0xA5A5));
  Mat x(static_cast<Eigen::Index>(src.size()), static_cast<Eigen::Index>(numel));
  for (size_t i = 0; i < src.size(); ++i) {
    ImageTensor img = split.test_image(src[i]);
    ImageTensor stamped = apply_trigger(img, attack.trigger, attack.placement, rng);
    std::copy_n(stamped.data.data.begin(), numel, x.data() + i * numel);
  }
  const auto pred = nn::argmax_rows(net.forward(x));
  size_t flipped = 0;
  for (int p : pred) flipped += (p == attack.target);
  return static_cast<double>(flipped) / static_cast<double>(src.size());
}

json AttackRef::to_json() const {
  return {{"source", source},
          {"target", target},
          {"trigger_id", trigger_id},
          {"ratio", ratio},
          {"placement", placement_to_json(placement)}};
}

AttackRef AttackRef::from_json(const json& j) {
  AttackRef a;
  a.source = j.at("source").get<int>();
  a.target = j.at("target").get<int>();
  a.trigger_id = j.at("trigger_id").get<std::string>();
  a.ratio = j.at("ratio").get<double>();
  a.placement = placement_from_json(j.at("placement"));
  return a;
}

json ModelRecord::to_json() const {
  json j = {{"id", id},
            {"arch", arch.to_json()},
            {"weights", weights_ref},
            {"label", to_string(label)},
            {"clean_accuracy", clean_accuracy},
            {"train_seed", train_seed},
            {"gate_relaxed", gate_relaxed}};
  if (attack) j["attack"] = attack->to_json();
  if (attack_success_rate) j["attack_success_rate"] = *attack_success_rate;
  return j;
}

ModelRecord ModelRecord::from_json(const json& j) {
  ModelRecord r;
  r.id = j.at("id").get<std::string>();
  r.arch = ArchitectureSpec::from_json(j.at("arch"));
  r.weights_ref = j.at("weights").get<std::string>();
  r.label = model_label_from_string(j.at("label").get<std::string>());
  if (j.contains("attack")) r.attack = AttackRef::from_json(j.at("attack"));
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  if (j.contains("attack_success_rate"))
    r.attack_success_rate = j.at("attack_success_rate").get<double>();
  r.train_seed = j.at("train_seed").get<uint64_t>();
  r.gate_relaxed = j.value("gate_relaxed", false);
  r.validate();
  return r;
}

void ModelRecord::validate() const {
  const bool is_clean = label == ModelLabel::Clean;
  if (is_clean && attack) throw InvalidArgument("clean record must not carry an attack: " + id);
  if (!is_clean && !attack) throw InvalidArgument("poisoned record missing attack: " + id);
  if (!is_clean && !attack_success_rate)
    throw InvalidArgument("poisoned record missing attack_success_rate: " + id);
}

const ModelRecord& ZooManifest::by_id(const std::string& id) const {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw InvalidArgument("unknown model id " + id);
}

std::vector<const ModelRecord*> ZooManifest::split_records(bool train_split) const {
  const auto& ids = train_split ? train_model_ids : test_model_ids;
  std::vector<const ModelRecord*> out;
  for (const auto& id : ids) out.push_back(&by_id(id));
  return out;
}

json ZooManifest::to_json() const {
  json recs = json::array();
  for (const auto& r : records) recs.push_back(r.to_json());
  return {{"format", "ulplab-zoo-v1"},
          {"dataset", dataset},
          {"trigger_bank", trigger_bank_ref},
          {"records", recs},
          {"split", {{"train_model_ids", train_model_ids}, {"test_model_ids", test_model_ids}}},
          {"pair_policy", pair_policy},
          {"config_hash", config_hash},
          {"config", config_snapshot}};
}

ZooManifest ZooManifest::from_json(const json& j) {
  if (j.value("format", "") != "ulplab-zoo-v1")
    throw CorruptFileError("unknown zoo manifest format");
  ZooManifest m;
  m.dataset = j.at("dataset").get<std::string>();
  m.trigger_bank_ref = j.at("trigger_bank").get<std::string>();
  for (const auto& r : j.at("records")) m.records.push_back(ModelRecord::from_json(r));
  m.train_model_ids = j.at("split").at("train_model_ids").get<std::vector<std::string>>();
  m.test_model_ids = j.at("split").at("test_model_ids").get<std::vector<std::string>>();
  m.pair_policy = j.value("pair_policy", "random");
  m.config_hash = j.value("config_hash", "");
  m.config_snapshot = j.value("config", json::object());
  return m;
}

void validate_manifest(const ZooManifest& manifest, const TriggerBank& bank) {
  bank.validate();
  std::set<std::string> train_set(manifest.train_model_ids.begin(),
                                  manifest.train_model_ids.end());
  std::set<std::string> test_set(manifest.test_model_ids.begin(), manifest.test_model_ids.end());
  for (const auto& id : test_set)
    if (train_set.count(id))
      throw ProtocolViolation("model " + id + " appears in both zoo splits");
  if (train_set.size() + test_set.size() != manifest.records.size())
    throw ProtocolViolation("zoo split does not cover the record set exactly");

  const std::set<std::string> train_triggers(bank.train_ids.begin(), bank.train_ids.end());
  const std::set<std::string> test_triggers(bank.test_ids.begin(), bank.test_ids.end());
  std::set<std::pair<int, int>> train_pairs, test_pairs;
  for (const auto& r : manifest.records) {
    r.validate();
    const bool in_train = train_set.count(r.id) > 0;
    if (!in_train && !test_set.count(r.id))
      throw ProtocolViolation("record " + r.id + " missing from zoo split");
    if (!r.attack) continue;
    const auto& allowed = in_train ? train_triggers : test_triggers;
    if (!allowed.count(r.attack->trigger_id))
      throw ProtocolViolation("record " + r.id + " uses trigger " + r.attack->trigger_id +
                              " from the wrong bank side");
    (in_train ? train_pairs : test_pairs).emplace(r.attack->source, r.attack->target);
    if (!r.gate_relaxed && r.attack_success_rate && *r.attack_success_rate < 0.9)
      throw ProtocolViolation("record " + r.id + " below ASR gate without relaxation");
  }
  if (manifest.pair_policy == "disjoint-split") {
    for (const auto& p : test_pairs)
      if (train_pairs.count(p))
        throw ProtocolViolation("source/target pair shared across zoo splits under disjoint-split");
  }
}

json GatePolicy::to_json() const {
  json j = {{"asr_min", asr_min}, {"eps_acc", eps_acc}, {"retries", retries},
            {"enforce", enforce}};
  if (clean_acc_ref) j["clean_acc_ref"] = *clean_acc_ref;
  return j;
}

GatePolicy GatePolicy::from_json(const json& j) {
  GatePolicy g;
  g.asr_min = j.value("asr_min", g.asr_min);
  g.eps_acc = j.value("eps_acc", g.eps_acc);
  if (j.contains("clean_acc_ref")) g.clean_acc_ref = j.at("clean_acc_ref").get<double>();
  g.retries = j.value("retries", g.retries);
  g.enforce = j.value("enforce", g.enforce);
  return g;
}

TrainedModel train_clean_model(const ArchitectureSpec& arch, const DatasetSplit& split,
                               const Hyper& hyper, const std::string& id) {
  TrainedModel out{ModelRecord{}, build_model(arch)};
  const TrainResult r = train_model(out.net, split, hyper);
  out.record.id = id;
  out.record.arch = arch;
  out.record.label = ModelLabel::Clean;
  out.record.clean_accuracy = r.clean_accuracy;
  out.record.train_seed = hyper.seed;
  return out;
}

namespace {

AttackRef make_attack_ref(const AttackSpec& attack) {
  return {attack.source, attack.target, attack.trigger.id, attack.ratio, attack.placement};
}

TrainedModel train_attack_model(const ArchitectureSpec& arch, const DatasetSplit& split,
                                const AttackSpec& attack, const Hyper& hyper,
                                const GatePolicy& gate, const std::string& id, ModelLabel label,
                                const ExtraGrad* extra) {
  if (attack.source == attack.target)
    throw InvalidArgument("attack source must differ from target");
  const int attempts = gate.enforce ? std::max(1, gate.retries) : 1;
  double best_asr = -1.0, best_acc = 0.0;

  for (int attempt = 0; attempt < attempts; ++attempt) {
    Hyper h = hyper;
    h.seed = Rng::derive(hyper.seed, static_cast<uint64_t>(attempt));
    ArchitectureSpec a = arch;
    a.seed = Rng::derive(arch.seed, static_cast<uint64_t>(attempt));

    Rng poison_rng(Rng::derive(h.seed, 0xF00D));
    const DatasetSplit poisoned = poison_dataset(split, attack, poison_rng);

    TrainedModel out{ModelRecord{}, build_model(a)};
    const TrainResult r = train_model_impl(out.net, poisoned, h, extra);
    const double asr = evaluate_attack_success(out.net, split, attack, h.seed);

    const bool asr_ok = asr >= gate.asr_min;
    const bool acc_ok =
        !gate.clean_acc_ref || std::abs(r.clean_accuracy - *gate.clean_acc_ref) <= gate.eps_acc;
    if (!gate.enforce || (asr_ok && acc_ok)) {
      out.record.id = id;
      out.record.arch = a;
      out.record.label = label;
      out.record.attack = make_attack_ref(attack);
      out.record.clean_accuracy = r.clean_accuracy;
      out.record.attack_success_rate = asr;
      out.record.train_seed = h.seed;
      out.record.gate_relaxed = !gate.enforce;
      return out;
    }
    if (asr > best_asr) {
      best_asr = asr;
      best_acc = r.clean_accuracy;
    }
  }
  throw GatingFailure("model " + id + " failed quality gates after " +
                          std::to_string(attempts) + " attempts (best ASR " +
                          std::to_string(best_asr) + ", clean acc " + std::to_string(best_acc) +
                          ")",
                      best_asr, best_acc);
}

}  // namespace

TrainedModel train_poisoned_model(const ArchitectureSpec& arch, const DatasetSplit& split,
                                  const AttackSpec& attack, const Hyper& hyper,
                                  const GatePolicy& gate, const std::string& id) {
  return train_attack_model(arch, split, attack, hyper, gate, id, ModelLabel::Poisoned, nullptr);
}

double adaptive_detector_loss(const nn::Network& net, const ULPDetector& detector, double beta,
                              std::vector<Mat>& grads) {
  nn::ForwardCtx ctx;
  const Mat logits = net.forward(detector.patterns, ctx);
  const Mat pooled = pool(logits, detector.pooling);
  Mat z = pooled * detector.head.weight;
  z.row(0) += detector.head.bias.row(0);
  Mat dz;
  const double ce = nn::softmax_xent(z, {0}, &dz);  // target: "clean"
  const Mat dpooled = dz * detector.head.weight.transpose();
  const int m = detector.pattern_count();
  const int k = detector.num_classes;
  Mat dlogits = Mat::Zero(m, k);
  switch (detector.pooling) {
    case Pooling::Concat:
      dlogits = Eigen::Map<const Mat>(dpooled.data(), m, k);
      break;
    case Pooling::Max:
      for (int c = 0; c < k; ++c) {
        Eigen::Index arg;
        logits.col(c).maxCoeff(&arg);
        dlogits(arg, c) = dpooled(0, c);
      }
      break;
    case Pooling::Avg:
      for (int c = 0; c < k; ++c) dlogits.col(c).setConstant(dpooled(0, c) / m);
      break;
  }
  dlogits *= beta;
  net.backward(dlogits, ctx, &grads, false);
  return beta * ce;
}

TrainedModel train_adaptive_poisoned_model(const ArchitectureSpec& arch,
                                           const DatasetSplit& split, const AttackSpec& attack,
                                           const Hyper& hyper, const GatePolicy& gate,
                                           const ULPDetector& detector, double beta,
                                           const std::string& id) {
  detector.validate();
  // The detector is a frozen constant; gradients flow into the model weights
  // through its logits on the litmus patterns.
  ExtraGrad extra = [&detector, beta](nn::Network& net, std::vector<Mat>& grads) -> double {
    return adaptive_detector_loss(net, detector, beta, grads);
  };
  return train_attack_model(arch, split, attack, hyper, gate, id, ModelLabel::AdaptivePoisoned,
                            &extra);
}

void save_model_weights(const nn::Network& net, const fs::path& npz_path) {
  const auto names = net.param_names();
  const auto params = net.params();
  std::vector<NamedTensor> arrays;
  for (size_t i = 0; i < names.size(); ++i) {
    Tensor t({static_cast<size_t>(params[i]->rows()), static_cast<size_t>(params[i]->cols())});
    std::copy_n(params[i]->data(), params[i]->size(), t.data.begin());
    arrays.push_back({names[i], std::move(t), Dtype::F8});
  }
  write_npz(npz_path, arrays);
}

void load_model_weights(nn::Network& net, const fs::path& npz_path) {
  auto arrays = read_npz(npz_path);
  const auto names = net.param_names();
  const auto params = net.params();
  for (size_t i = 0; i < names.size(); ++i) {
    auto it = arrays.find(names[i]);
    if (it == arrays.end())
      throw CorruptFileError("weights archive missing parameter " + names[i]);
    const Tensor& t = it->second;
    if (t.ndim() != 2 || static_cast<Eigen::Index>(t.shape[0]) != params[i]->rows() ||
        static_cast<Eigen::Index>(t.shape[1]) != params[i]->cols())
      throw DimensionError("parameter " + names[i] + " has wrong shape in " + npz_path.string());
    std::copy_n(t.data.begin(), t.size(), params[i]->data());
  }
}

void save_model(const TrainedModel& model, const fs::path& model_dir) {
  fs::create_directories(model_dir);
  save_model_weights(model.net, model_dir / "weights.npz");
  std::ofstream out(model_dir / "meta.json");
  if (!out) throw IoError("cannot write " + (model_dir / "meta.json").string());
  out << model.record.to_json().dump(2) << "\n";
}

nn::Network load_model(const fs::path& model_dir) {
  std::ifstream in(model_dir / "meta.json");
  if (!in) throw IoError("cannot open " + (model_dir / "meta.json").string());
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw CorruptFileError("bad model meta: " + std::string(e.what()));
  }
  nn::Network net = build_model(ArchitectureSpec::from_json(meta.at("arch")));
  load_model_weights(net, model_dir / "weights.npz");
  return net;
}

nn::Network load_zoo_model(const fs::path& zoo_dir, const ModelRecord& record) {
  nn::Network net = build_model(record.arch);
  load_model_weights(net, zoo_dir / record.weights_ref);
  return net;
}

json ZooConfig::to_json() const {
  return {{"dataset", dataset},
          {"n_clean", n_clean},
          {"n_poisoned", n_poisoned},
          {"trigger_bank", trigger_bank},
          {"pair_policy", pair_policy},
          {"ratio", ratio},
          {"placement", placement_to_json(placement)},
          {"arch_policy", arch_policy},
          {"arch", arch.to_json()},
          {"hyper", hyper.to_json()},
          {"gate", gate.to_json()},
          {"seed", seed},
          {"min_success_fraction", min_success_fraction},
          {"label", label}};
}

ZooConfig ZooConfig::from_json(const json& j) {
  ZooConfig c;
  c.dataset = j.at("dataset");
  c.n_clean = j.value("n_clean", c.n_clean);
  c.n_poisoned = j.value("n_poisoned", c.n_poisoned);
  c.trigger_bank = j.at("trigger_bank").get<std::string>();
  c.pair_policy = j.value("pair_policy", c.pair_policy);
  c.ratio = j.value("ratio", c.ratio);
  if (j.contains("placement")) c.placement = placement_from_json(j.at("placement"));
  c.arch_policy = j.value("arch_policy", c.arch_policy);
  if (j.contains("arch")) c.arch = ArchitectureSpec::from_json(j.at("arch"));
  if (j.contains("hyper")) c.hyper = Hyper::from_json(j.at("hyper"));
  if (j.contains("gate")) c.gate = GatePolicy::from_json(j.at("gate"));
  c.seed = j.value("seed", c.seed);
  c.min_success_fraction = j.value("min_success_fraction", c.min_success_fraction);
  c.label = j.value("label", c.label);
  return c;
}

DatasetSplit resolve_dataset(const json& dataset_cfg) {
  const std::string type = dataset_cfg.at("type").get<std::string>();
  if (type == "synthetic") {
    const auto sh = dataset_cfg.at("shape");
    DatasetSplit ds = make_synthetic_dataset(
        dataset_cfg.value("seed", 0ULL), dataset_cfg.at("K").get<int>(),
        dataset_cfg.at("n_per_class").get<int>(),
        {sh.at(0).get<size_t>(), sh.at(1).get<size_t>(), sh.at(2).get<size_t>()});
    return ds;
  }
  if (type == "mnist" || type == "named") {
    DatasetSplit ds = load_dataset(type == "mnist" ? "mnist" : dataset_cfg.at("name"),
                                   dataset_cfg.at("root").get<std::string>());
    const double fraction = dataset_cfg.value("fraction", 1.0);
    if (fraction < 1.0)
      ds = subsample(ds, fraction, dataset_cfg.value("subsample_seed", 0ULL));
    return ds;
  }
  if (type == "archive") return load_dataset_archive(dataset_cfg.at("base").get<std::string>());
  throw UnsupportedDatasetError("unknown dataset config type '" + type + "'");
}

std::string config_hash(const json& j) {
  // FNV-1a over the canonical (sorted-key) dump.
  const std::string s = j.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ZooManifest build_zoo(const ZooConfig& config, const fs::path& out_dir, int workers,
                      const ULPDetector* adaptive_target, double adaptive_beta) {
  if (config.n_clean < 0 || config.n_poisoned < 0 || config.n_clean + config.n_poisoned == 0)
    throw InvalidArgument("zoo needs a positive model count");
  const DatasetSplit split = resolve_dataset(config.dataset);
  const TriggerBank bank = load_trigger_bank(config.trigger_bank);
  bank.validate();
  if (!config.n_poisoned) {
    // nothing to stamp
  } else if (bank.train_ids.empty() || bank.test_ids.empty()) {
    throw InvalidArgument("trigger bank must carry a non-empty train/test split");
  }
  const ModelLabel attack_label = model_label_from_string(config.label);
  if (attack_label == ModelLabel::AdaptivePoisoned && !adaptive_target)
    throw InvalidArgument("adaptive zoo requires a frozen detector");

  struct Job {
    std::string id;
    bool poisoned = false;
    bool train_split = false;
    ArchitectureSpec arch;
    Hyper hyper;
    std::optional<AttackSpec> attack;
  };

  // Plan all jobs up front so the parallel phase is deterministic.
  std::vector<Job> jobs;
  Rng plan_rng(Rng::derive(config.seed, 0xC0FFEE));
  auto arch_for = [&](uint64_t model_seed) {
    ArchitectureSpec a = config.arch_policy == "random"
                             ? sample_random_architecture(config.arch.family, model_seed,
                                                          config.arch.input_shape,
                                                          config.arch.num_classes)
                             : config.arch;
    a.seed = Rng::derive(model_seed, 0xABC);
    return a;
  };

  const int n_clean_train = config.n_clean / 2;
  const int n_poison_train = config.n_poisoned / 2;
  for (int i = 0; i < config.n_clean; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clean-%03d", i);
    const uint64_t mseed = Rng::derive(config.seed, 1000 + static_cast<uint64_t>(i));
    Job job;
    job.id = buf;
    job.train_split = i < n_clean_train;
    job.arch = arch_for(mseed);
    job.hyper = config.hyper;
    job.hyper.seed = mseed;
    jobs.push_back(std::move(job));
  }

  // Ordered (source, target) pair pools per zoo side.
  const int K = config.arch.num_classes;
  std::vector<std::pair<int, int>> all_pairs;
  for (int s = 0; s < K; ++s)
    for (int t = 0; t < K; ++t)
      if (s != t) all_pairs.emplace_back(s, t);
  plan_rng.shuffle(all_pairs);
  std::vector<std::pair<int, int>> train_pool = all_pairs, test_pool = all_pairs;
  if (config.pair_policy == "disjoint-split") {
    if (all_pairs.size() < 2)
      throw InvalidArgument("disjoint-split pair policy needs at least 2 ordered pairs");
    const size_t half = all_pairs.size() / 2;
    train_pool.assign(all_pairs.begin(), all_pairs.begin() + static_cast<ptrdiff_t>(half));
    test_pool.assign(all_pairs.begin() + static_cast<ptrdiff_t>(half), all_pairs.end());
  } else if (config.pair_policy != "random" && config.pair_policy != "exhaustive") {
    throw InvalidArgument("unknown pair policy '" + config.pair_policy + "'");
  }

  const auto train_triggers = bank.train_triggers();
  const auto test_triggers = bank.test_triggers();
  int train_pair_cursor = 0, test_pair_cursor = 0;
  for (int i = 0; i < config.n_poisoned; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s-%03d",
                  attack_label == ModelLabel::AdaptivePoisoned ? "adaptive" : "poison", i);
    const uint64_t mseed = Rng::derive(config.seed, 5000 + static_cast<uint64_t>(i));
    Job job;
    job.id = buf;
    job.poisoned = true;
    job.train_split = i < n_poison_train;
    job.arch = arch_for(mseed);
    job.hyper = config.hyper;
    job.hyper.seed = mseed;

    const auto& triggers = job.train_split ? train_triggers : test_triggers;
    const auto& pool = job.train_split ? train_pool : test_pool;
    int& cursor = job.train_split ? train_pair_cursor : test_pair_cursor;
    std::pair<int, int> pair;
    if (config.pair_policy == "exhaustive" || config.pair_policy == "disjoint-split") {
      pair = pool[static_cast<size_t>(cursor) % pool.size()];
      ++cursor;
    } else {
      pair = pool[static_cast<size_t>(plan_rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
    }
    AttackSpec attack;
    attack.source = pair.first;
    attack.target = pair.second;
    attack.trigger =
        triggers[static_cast<size_t>(plan_rng.uniform_int(0, static_cast<int64_t>(triggers.size()) - 1))];
    attack.ratio = config.ratio;
    attack.placement = config.placement;
    job.attack = attack;
    jobs.push_back(std::move(job));
  }

  // Phase 1: clean models (their mean accuracy anchors the parity gate).
  std::vector<std::optional<TrainedModel>> trained(jobs.size());
  std::vector<std::string> failures;
  std::mutex failures_mu;
  std::vector<size_t> clean_idx, poison_idx;
  for (size_t i = 0; i < jobs.size(); ++i)
    (jobs[i].poisoned ? poison_idx : clean_idx).push_back(i);

  parallel_for(clean_idx.size(), workers, [&](size_t j) {
    const Job& job = jobs[clean_idx[j]];
    try {
      trained[clean_idx[j]] = train_clean_model(job.arch, split, job.hyper, job.id);
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(failures_mu);
      failures.push_back(job.id + ": " + e.what());
    }
  });

  GatePolicy gate = config.gate;
  if (!gate.clean_acc_ref && config.n_clean > 0) {
    double sum = 0.0;
    int n = 0;
    for (size_t i : clean_idx)
      if (trained[i]) {
        sum += trained[i]->record.clean_accuracy;
        ++n;
      }
    if (n > 0) gate.clean_acc_ref = sum / n;
  }

  parallel_for(poison_idx.size(), workers, [&](size_t j) {
    const Job& job = jobs[poison_idx[j]];
    try {
      if (adaptive_target) {
        trained[poison_idx[j]] =
            train_adaptive_poisoned_model(job.arch, split, *job.attack, job.hyper, gate,
                                          *adaptive_target, adaptive_beta, job.id);
      } else {
        trained[poison_idx[j]] =
            train_poisoned_model(job.arch, split, *job.attack, job.hyper, gate, job.id);
      }
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(failures_mu);
      failures.push_back(job.id + ": " + e.what());
    }
  });

  size_t n_ok = 0;
  for (const auto& t : trained) n_ok += t.has_value();
  const double success = static_cast<double>(n_ok) / static_cast<double>(jobs.size());
  if (success < config.min_success_fraction) {
    std::string msg = "zoo build below success fraction (" + std::to_string(n_ok) + "/" +
                      std::to_string(jobs.size()) + ")";
    for (const auto& f : failures) msg += "\n  " + f;
    throw TrainingFailure(msg);
  }

  fs::create_directories(out_dir);
  ZooManifest manifest;
  manifest.dataset = split.name;
  manifest.trigger_bank_ref = config.trigger_bank;
  manifest.pair_policy = config.pair_policy;
  manifest.config_snapshot = config.to_json();
  manifest.config_hash = config_hash(manifest.config_snapshot);
  for (size_t i = 0; i < jobs.size(); ++i) {
    if (!trained[i]) continue;
    TrainedModel& tm = *trained[i];
    tm.record.weights_ref = tm.record.id + "/weights.npz";
    save_model(tm, out_dir / tm.record.id);
    manifest.records.push_back(tm.record);
    (jobs[i].train_split ? manifest.train_model_ids : manifest.test_model_ids)
        .push_back(tm.record.id);
  }
  validate_manifest(manifest, bank);
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

void save_manifest(const ZooManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest.to_json().dump(2) << "\n";
}

ZooManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CorruptFileError("bad zoo manifest: " + std::string(e.what()));
  }
  return ZooManifest::from_json(j);
}

}  // namespace ulp

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "ulp/architecture.hpp"
#include "ulp/dataset.hpp"
#include "ulp/detector.hpp"
#include "ulp/trigger.hpp"

namespace ulp {

struct Hyper {
  int epochs = 6;
  double lr = 3e-3;
  int batch = 32;
  uint64_t seed = 0;
  std::string optimizer = "adam";

  nlohmann::json to_json() const;
  static Hyper from_json(const nlohmann::json& j);
};

struct TrainResult {
  double clean_accuracy = 0.0;
  std::vector<double> loss_curve;
};

// In-place supervised training; reports clean test accuracy. Throws
// TrainingFailure when the loss goes non-finite.
TrainResult train_model(nn::Network& net, const DatasetSplit& split, const Hyper& hyper);

double evaluate_accuracy(const nn::Network& net, const Tensor& images,
                         const std::vector<int>& labels);

// Fraction of test-set source-class images classified as attack.target after
// stamping. Throws InvalidArgument when the source class has no test images.
double evaluate_attack_success(const nn::Network& net, const DatasetSplit& split,
                               const AttackSpec& attack, uint64_t eval_seed);

enum class ModelLabel { Clean, Poisoned, AdaptivePoisoned };
std::string to_string(ModelLabel l);
ModelLabel model_label_from_string(const std::string& s);

// Serializable attack description; the trigger pattern lives in the bank.
struct AttackRef {
  int source = 0;
  int target = 1;
  std::string trigger_id;
  double ratio = 0.5;
  PlacementPolicy placement;

  nlohmann::json to_json() const;
  static AttackRef from_json(const nlohmann::json& j);
};

struct ModelRecord {
  std::string id;
  ArchitectureSpec arch;
  std::string weights_ref;  // path relative to the zoo directory
  ModelLabel label = ModelLabel::Clean;
  std::optional<AttackRef> attack;
  double clean_accuracy = 0.0;
  std::optional<double> attack_success_rate;
  uint64_t train_seed = 0;
  bool gate_relaxed = false;

  nlohmann::json to_json() const;
  static ModelRecord from_json(const nlohmann::json& j);
  void validate() const;  // attack present iff label != clean, etc.
};

struct ZooManifest {
  std::string dataset;
  std::string trigger_bank_ref;  // base path relative to the zoo directory
  std::vector<ModelRecord> records;
  std::vector<std::string> train_model_ids;
  std::vector<std::string> test_model_ids;
  std::string pair_policy = "random";
  std::string config_hash;
  nlohmann::json config_snapshot;

  const ModelRecord& by_id(const std::string& id) const;
  std::vector<const ModelRecord*> split_records(bool train_split) const;

  nlohmann::json to_json() const;
  static ZooManifest from_json(const nlohmann::json& j);
};

// Enforces manifest invariants against its trigger bank: disjoint model
// split, per-split trigger provenance, optional disjoint (source,target)
// pairs, ASR gating on non-relaxed records.
void validate_manifest(const ZooManifest& manifest, const TriggerBank& bank);

struct GatePolicy {
  double asr_min = 0.9;
  double eps_acc = 0.02;
  std::optional<double> clean_acc_ref;  // mean clean-model accuracy
  int retries = 3;
  bool enforce = true;

  nlohmann::json to_json() const;
  static GatePolicy from_json(const nlohmann::json& j);
};

struct TrainedModel {
  ModelRecord record;
  nn::Network net;
};

TrainedModel train_clean_model(const ArchitectureSpec& arch, const DatasetSplit& split,
                               const Hyper& hyper, const std::string& id);

// Trains on poison_dataset output and gates on ASR >= gate.asr_min and
// |clean_acc - gate.clean_acc_ref| <= gate.eps_acc (when a reference is
// given); retried with fresh seeds up to gate.retries, then GatingFailure.
// With gate.enforce == false the first attempt is kept and marked relaxed.
TrainedModel train_poisoned_model(const ArchitectureSpec& arch, const DatasetSplit& split,
                                  const AttackSpec& attack, const Hyper& hyper,
                                  const GatePolicy& gate, const std::string& id);

// Adaptive attacker: adds beta * cross-entropy(detector(model), clean) to
// every training step, treating the detector's patterns and head as
// constants. beta == 0 reduces exactly to train_poisoned_model.
TrainedModel train_adaptive_poisoned_model(const ArchitectureSpec& arch,
                                           const DatasetSplit& split, const AttackSpec& attack,
                                           const Hyper& hyper, const GatePolicy& gate,
                                           const ULPDetector& detector, double beta,
                                           const std::string& id);

// The adaptive regularizer itself: beta * CE(detector(model), "clean").
// Accumulates the model-weight gradient into `grads` and returns the loss
// term; exposed for gradient checking.
double adaptive_detector_loss(const nn::Network& net, const ULPDetector& detector, double beta,
                              std::vector<nn::Mat>& grads);

// --- persistence ---

void save_model_weights(const nn::Network& net, const std::filesystem::path& npz_path);
void load_model_weights(nn::Network& net, const std::filesystem::path& npz_path);
void save_model(const TrainedModel& model, const std::filesystem::path& model_dir);
// Rebuilds the network from meta.json and loads weights.
nn::Network load_model(const std::filesystem::path& model_dir);
nn::Network load_zoo_model(const std::filesystem::path& zoo_dir, const ModelRecord& record);

struct ZooConfig {
  nlohmann::json dataset;  // {"type": "synthetic"|"mnist"|"archive", ...}
  int n_clean = 10;
  int n_poisoned = 10;
  std::string trigger_bank;           // base path of a saved TriggerBank
  std::string pair_policy = "random";  // exhaustive | random | disjoint-split
  double ratio = 0.5;
  PlacementPolicy placement{PlacementMode::RandomCorner, std::nullopt, 0};
  std::string arch_policy = "fixed";  // fixed | random
  ArchitectureSpec arch;              // base architecture (family used by "random")
  Hyper hyper;
  GatePolicy gate;
  uint64_t seed = 0;
  double min_success_fraction = 0.9;
  std::string label = "poisoned";  // label given to attack models

  nlohmann::json to_json() const;
  static ZooConfig from_json(const nlohmann::json& j);
};

// Materializes the dataset a zoo config points at.
DatasetSplit resolve_dataset(const nlohmann::json& dataset_cfg);

// Trains the whole zoo (parallel across models), writes
// <out_dir>/<model_id>/{weights.npz, meta.json} plus manifest.json, and
// returns the manifest. Fails without writing a manifest when more than
// (1 - min_success_fraction) of the models are rejected.
ZooManifest build_zoo(const ZooConfig& config, const std::filesystem::path& out_dir, int workers,
                      const ULPDetector* adaptive_target = nullptr, double adaptive_beta = 1.0);

void save_manifest(const ZooManifest& manifest, const std::filesystem::path& path);
ZooManifest load_manifest(const std::filesystem::path& path);

// Content hash used for experiment caching.
std::string config_hash(const nlohmann::json& j);

}  // namespace ulp

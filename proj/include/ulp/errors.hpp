#pragma once

#include <stdexcept>
#include <string>

namespace ulp {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class UnsupportedDatasetError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public IoError {
 public:
  using IoError::IoError;
};

// Requested more distinct items than the space holds.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Optimization diverged (NaN/inf loss).
class TrainingFailure : public Error {
 public:
  using Error::Error;
};

// A trained model failed quality gates after exhausting retries.
// Carries the metrics of the best attempt.
class GatingFailure : public Error {
 public:
  GatingFailure(const std::string& msg, double best_asr, double best_clean_acc)
      : Error(msg), best_attack_success_rate(best_asr), best_clean_accuracy(best_clean_acc) {}
  double best_attack_success_rate;
  double best_clean_accuracy;
};

// Experiment hygiene violation, e.g. evaluating a detector on its own
// training models.
class ProtocolViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace ulp

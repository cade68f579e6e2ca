#pragma once

#include <stdexcept>
#include <string>

namespace thalsynth {

// All engine failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidGridError : public Error { using Error::Error; };
class GridMismatchError : public Error { using Error::Error; };
class InvalidInputError : public Error { using Error::Error; };
class UnderdeterminedFitError : public Error { using Error::Error; };
class DegenerateResolutionError : public Error { using Error::Error; };
class FoldingError : public Error { using Error::Error; };
class CropInfeasibleError : public Error { using Error::Error; };
class NormalizationError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

// Wraps a failure with the pipeline stage and case it happened in.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string case_id, const std::string& what)
      : Error("[" + case_id + "] " + stage + ": " + what),
        stage_(std::move(stage)),
        case_id_(std::move(case_id)) {}

  const std::string& stage() const { return stage_; }
  const std::string& case_id() const { return case_id_; }

 private:
  std::string stage_;
  std::string case_id_;
};

}  // namespace thalsynth

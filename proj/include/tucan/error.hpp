#pragma once

#include <stdexcept>
#include <string>

namespace tucan {

/// Tensor or raster dimensions that do not fit the operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Input values outside the accepted domain (non-finite chroma, empty data, ...).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Operation called in the wrong model/trainer state.
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid configuration; `key()` names the first offending entry when known.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Unreadable, corrupt or mismatched artifact (checkpoint, bin table, image).
struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tucan

#pragma once

#include <stdexcept>
#include <string>

namespace ranktuner {

// Invalid hyperparameters, unknown enum names, malformed rank configurations.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid data handed to an operation (token ids, empty splits, mismatches).
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// A requested target cannot be met under the operation's constraints.
class InfeasibleError : public std::runtime_error {
 public:
  explicit InfeasibleError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ranktuner

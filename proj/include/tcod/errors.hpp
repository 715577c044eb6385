#pragma once

#include <stdexcept>

namespace tcod {

// bad configuration or input data (user-facing)
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: dimension mismatch, stepping a finished episode, empty batch
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace tcod

#pragma once

#include <algorithm>
#include <string>

#include "errors.hpp"

namespace tcod {

struct CurriculumSchedule {
  int k_start = 1;
  int eta = 2;
  int cap = 12;
  int total_steps = 400;

  void validate() const {
    if (k_start < 1) throw ConfigError("curriculum.k_start must be >= 1");
    if (eta < 1) throw ConfigError("curriculum.eta must be >= 1");
    if (cap < k_start) throw ConfigError("curriculum.cap must be >= curriculum.k_start");
    if (total_steps < 1) throw ConfigError("curriculum.total_steps must be >= 1");
  }
};

/// min(k_start + floor(n / eta), cap)
inline int horizon_at(const CurriculumSchedule& s, int n) {
  if (n < 0 || n > s.total_steps)
    throw UsageError("horizon_at: step " + std::to_string(n) + " outside [0, total_steps]");
  return std::min(s.k_start + n / s.eta, s.cap);
}

/// Teacher turns replayed before the student takes over.
inline int b2f_prefix_len(int L, int k) {
  if (k < 1) throw UsageError("b2f_prefix_len: k must be >= 1");
  return std::max(L - k, 0);
}

/// First step at which horizon_at reaches L (or -1 if it never does within total_steps).
inline int first_step_reaching(const CurriculumSchedule& s, int L) {
  if (std::min(L, s.cap) <= s.k_start) return 0;
  if (s.cap < L) return -1;
  const int n = (L - s.k_start) * s.eta;
  return n <= s.total_steps ? n : -1;
}

/// True when every stored trajectory of length <= L_max will be played with an empty prefix before training ends.
inline bool prefix_vanishes(const CurriculumSchedule& s, int L_max) {
  return first_step_reaching(s, L_max) >= 0;
}

}  // namespace tcod

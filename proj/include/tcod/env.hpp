#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace tcod {

enum class EnvKind { CompoundingChain, MemoryLock };

inline const char* to_string(EnvKind k) {
  return k == EnvKind::CompoundingChain ? "compounding_chain" : "memory_lock";
}

struct EnvConfig {
  EnvKind kind = EnvKind::CompoundingChain;
  int horizon_cap = 12;
  int num_actions = 6;
  int chain_length = 8;
  int off_support_depth = 2;
  std::uint64_t seed = 0;
  int task_count = 32;

  void validate() const {
    if (horizon_cap < 1) throw ConfigError("env.horizon_cap must be >= 1");
    if (num_actions < 2) throw ConfigError("env.num_actions must be >= 2");
    if (chain_length < 1) throw ConfigError("env.chain_length must be >= 1");
    if (off_support_depth < 0) throw ConfigError("env.off_support_depth must be >= 0");
    if (task_count < 1) throw ConfigError("env.task_count must be >= 1");
    if (chain_length > horizon_cap)
      throw ConfigError("env.chain_length exceeds env.horizon_cap; no task would be solvable");
  }
};

struct Observation {
  int token_id = 0;
  bool on_support = true;  // diagnostic; never part of a HistoryKey
};

struct StepResult {
  Observation observation;
  bool done = false;
  bool success = false;
};

struct EnvState {
  int task = 0;
  int pos = 0;    // rooms cleared
  int debt = 0;   // recovery turns still owed; 0 means on-support
  int turn = 0;
  bool done = false;
  bool success = false;
};

/** Corridor of chain_length rooms per task. Each room has one correct action;
 *  any other action sends the agent off-support with a recovery debt that is
 *  paid down one turn at a time by a room-specific recovery action. A wrong
 *  recovery action adds a further off_support_depth to the debt.
 *
 *  Tokens: CompoundingChain opens with the task id. MemoryLock opens with
 *  task_id * num_actions + key, and the final room only opens to the key.
 *  Room tokens follow the opening alphabet and show the current room only,
 *  so debt is hidden from the observation stream. */
class Env {
 public:
  explicit Env(EnvConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const auto A = static_cast<std::uint64_t>(cfg_.num_actions);
    Rng r(cfg_.seed, 0x656e76);
    correct_.resize(static_cast<std::size_t>(cfg_.task_count));
    recovery_.resize(correct_.size());
    key_.resize(correct_.size());
    for (std::size_t t = 0; t < correct_.size(); ++t) {
      key_[t] = static_cast<int>(r.below(A));
      for (int p = 0; p < cfg_.chain_length; ++p) {
        int c = static_cast<int>(r.below(A));
        if (cfg_.kind == EnvKind::MemoryLock && p + 1 == cfg_.chain_length) c = key_[t];
        const int u = static_cast<int>((static_cast<std::uint64_t>(c) + 1 + r.below(A - 1)) % A);
        correct_[t].push_back(c);
        recovery_[t].push_back(u);
      }
    }
  }

  const EnvConfig& config() const { return cfg_; }
  int num_actions() const { return cfg_.num_actions; }

  int opening_alphabet() const {
    return cfg_.kind == EnvKind::MemoryLock ? cfg_.task_count * cfg_.num_actions : cfg_.task_count;
  }
  int observation_alphabet_size() const { return opening_alphabet() + cfg_.chain_length + 1; }

  int correct_action(const EnvState& s) const { return correct_[idx(s.task)][idx(s.pos)]; }
  int recovery_action(const EnvState& s) const { return recovery_[idx(s.task)][idx(s.pos)]; }
  int secret_key(int task) const { return key_.at(idx(task)); }
  const std::vector<int>& optimal_actions(int task) const { return correct_.at(idx(task)); }

  std::pair<EnvState, Observation> reset(int task_id) const {
    if (task_id < 0 || task_id >= cfg_.task_count)
      throw ConfigError("reset: task_id " + std::to_string(task_id) + " out of range [0, " +
                        std::to_string(cfg_.task_count) + ")");
    EnvState s;
    s.task = task_id;
    const int tok = cfg_.kind == EnvKind::MemoryLock ? task_id * cfg_.num_actions + key_[idx(task_id)] : task_id;
    return {s, Observation{tok, true}};
  }

  std::pair<EnvState, StepResult> step(EnvState s, int action) const {
    if (s.done || s.turn >= cfg_.horizon_cap) throw UsageError("step: episode already finished");
    if (action < 0 || action >= cfg_.num_actions) throw UsageError("step: action out of range");
    if (s.debt == 0) {
      if (action == correct_action(s))
        ++s.pos;
      else
        s.debt = cfg_.off_support_depth;
    } else if (action == recovery_action(s)) {
      --s.debt;
    } else {
      s.debt = std::min(s.debt + cfg_.off_support_depth, cfg_.horizon_cap);
    }
    ++s.turn;
    s.success = s.pos == cfg_.chain_length;
    s.done = s.success || s.turn >= cfg_.horizon_cap;
    StepResult r;
    r.observation = Observation{opening_alphabet() + s.pos, s.debt == 0};
    r.done = s.done;
    r.success = s.success;
    return {s, r};
  }

 private:
  static std::size_t idx(int v) { return static_cast<std::size_t>(v); }

  EnvConfig cfg_;
  std::vector<std::vector<int>> correct_;
  std::vector<std::vector<int>> recovery_;
  std::vector<int> key_;
};

// ---------------------------------------------------------------------------
// constructed teacher

struct TeacherConfig {
  double on_support_temperature = 0.35;
  double off_support_floor = 0.05;
  /// logits are scaled by (1 + sharpening * turn): the teacher commits harder as the deadline nears
  double sharpening = 1.0;
  double off_support_temperature = 2.0;

  void validate() const {
    if (!(on_support_temperature > 0)) throw ConfigError("teacher.on_support_temperature must be > 0");
    if (!(off_support_floor > 0 && off_support_floor <= 1)) throw ConfigError("teacher.off_support_floor must be in (0, 1]");
    if (!(sharpening >= 0)) throw ConfigError("teacher.sharpening must be >= 0");
    if (!(off_support_temperature >= on_support_temperature))
      throw ConfigError("teacher.off_support_temperature must be >= teacher.on_support_temperature");
  }
};

/** Fixed teacher. On-support: softmax over a one-hot on the correct action.
 *  Off-support: floor/A on every action plus (1 - floor) of a soft preference
 *  for the recovery action. Reads the env state, which the history determines. */
class TeacherPolicy {
 public:
  TeacherPolicy(std::shared_ptr<const Env> env, TeacherConfig cfg) : env_(std::move(env)), cfg_(cfg) {
    cfg_.validate();
  }

  const TeacherConfig& config() const { return cfg_; }
  const Env& env() const { return *env_; }
  int num_actions() const { return env_->num_actions(); }

  Distribution dist(const EnvState& s) const {
    const int A = env_->num_actions();
    const double g = 1.0 + cfg_.sharpening * s.turn;
    std::vector<double> z(static_cast<std::size_t>(A), 0.0);
    if (s.debt == 0) {
      z[static_cast<std::size_t>(env_->correct_action(s))] = g;
      return softmax(z, cfg_.on_support_temperature);
    }
    z[static_cast<std::size_t>(env_->recovery_action(s))] = g;
    auto p = softmax(z, cfg_.off_support_temperature);
    const double f = cfg_.off_support_floor;
    for (auto& v : p) v = f / A + (1 - f) * v;
    return p;
  }

  Distribution dist(const HistoryKey&, const EnvState& s, double temperature) const {
    return temper(dist(s), temperature);
  }

 private:
  std::shared_ptr<const Env> env_;
  TeacherConfig cfg_;
};

inline TeacherPolicy make_teacher(std::shared_ptr<const Env> env, double on_support_temperature,
                                  double off_support_floor, TeacherConfig rest = {}) {
  if (!(on_support_temperature > 0)) throw UsageError("make_teacher: temperature must be positive");
  rest.on_support_temperature = on_support_temperature;
  rest.off_support_floor = off_support_floor;
  rest.off_support_temperature = std::max(rest.off_support_temperature, on_support_temperature);
  return TeacherPolicy(std::move(env), rest);
}

// A teacher checkpoint names the construction parameters; the env comes from the run config.

inline void save_teacher_checkpoint(const TeacherConfig& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write teacher checkpoint " + path);
  f << "tcod-teacher 1\n"
    << "on_support_temperature " << detail::fmt17(t.on_support_temperature) << "\n"
    << "off_support_floor " << detail::fmt17(t.off_support_floor) << "\n"
    << "sharpening " << detail::fmt17(t.sharpening) << "\n"
    << "off_support_temperature " << detail::fmt17(t.off_support_temperature) << "\n";
}

inline bool is_teacher_checkpoint(const std::string& path) {
  std::ifstream f(path);
  std::string tag;
  return f && (f >> tag) && tag == "tcod-teacher";
}

inline TeacherConfig load_teacher_checkpoint(const std::string& path) {
  std::ifstream f(path);
  std::string tag;
  int v = 0;
  if (!f || !(f >> tag >> v) || tag != "tcod-teacher" || v != 1)
    throw ConfigError("not a teacher checkpoint: " + path);
  TeacherConfig t;
  std::string name;
  double val = 0;
  while (f >> name >> val) {
    if (name == "on_support_temperature") t.on_support_temperature = val;
    else if (name == "off_support_floor") t.off_support_floor = val;
    else if (name == "sharpening") t.sharpening = val;
    else if (name == "off_support_temperature") t.off_support_temperature = val;
    else throw ConfigError("teacher checkpoint " + path + ": unknown field " + name);
  }
  t.validate();
  return t;
}

}  // namespace tcod

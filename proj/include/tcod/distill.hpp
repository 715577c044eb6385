#pragma once

#include <climits>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "curriculum.hpp"
#include "env.hpp"
#include "errors.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace tcod {

enum class Executor { Student, TeacherPrefix };
enum class Algo { OPD, F2B, B2F, SFT, SFTCollect };

inline const char* to_string(Algo a) {
  switch (a) {
    case Algo::OPD: return "opd";
    case Algo::F2B: return "f2b";
    case Algo::B2F: return "b2f";
    case Algo::SFT: return "sft";
    case Algo::SFTCollect: return "sft_collect";
  }
  return "?";
}

struct TurnRecord {
  HistoryKey history_key;
  int action = 0;
  Distribution student_dist;  // temperature 1, whatever temperature was used to act
  Distribution teacher_dist;
  int turn_index = 0;
  Executor executed_by = Executor::Student;
  double turn_kl = 0;  // 0 for prefix turns
};

struct Trajectory {
  int task_id = 0;
  std::vector<TurnRecord> turns;
  bool success = false;
  int rounds = 0;
  int prefix_turns = 0;
  std::uint64_t policy_version = 0;
  Algo algo = Algo::OPD;

  double kl_sum() const {
    double s = 0;
    for (const auto& t : turns)
      if (t.executed_by == Executor::Student) s += t.turn_kl;
    return s;
  }
};

// policy lookups used by the rollout templates

inline Distribution policy_dist(const PolicyParams& p, const HistoryKey& k, const EnvState&, double temperature) {
  return action_dist(p, k, temperature);
}
inline Distribution policy_dist(const TeacherPolicy& t, const HistoryKey&, const EnvState& s, double temperature) {
  return temper(t.dist(s), temperature);
}
inline std::uint64_t policy_version(const PolicyParams& p) { return p.version; }
inline std::uint64_t policy_version(const TeacherPolicy&) { return 0; }
inline int policy_actions(const PolicyParams& p) { return p.num_actions; }
inline int policy_actions(const TeacherPolicy& t) { return t.num_actions(); }

struct RolloutOptions {
  int student_turn_limit = INT_MAX;
  const std::vector<int>* prefix = nullptr;
  int prefix_len = 0;
  double temperature = 1.0;
  int window = -1;
  Algo algo = Algo::OPD;
};

/// One episode: replay prefix actions, then let the student act until done or the turn limit.
template <class Student>
Trajectory run_episode(const Env& env, const Student& student, const TeacherPolicy& teacher, int task_id, Rng& rng,
                       const RolloutOptions& opt) {
  if (policy_actions(student) != env.num_actions() || teacher.num_actions() != env.num_actions())
    throw UsageError("rollout: action counts of student, teacher and env differ");
  auto [state, obs] = env.reset(task_id);
  History hist{obs.token_id};
  Trajectory tr;
  tr.task_id = task_id;
  tr.policy_version = policy_version(student);
  tr.algo = opt.algo;

  for (int i = 0; i < opt.prefix_len && !state.done; ++i) {
    TurnRecord rec;
    rec.history_key = make_key(hist, opt.window);
    rec.action = (*opt.prefix)[static_cast<std::size_t>(i)];
    rec.teacher_dist = teacher.dist(state);
    rec.student_dist = policy_dist(student, rec.history_key, state, 1.0);
    rec.turn_index = state.turn;
    rec.executed_by = Executor::TeacherPrefix;
    auto [next, res] = env.step(state, rec.action);
    state = next;
    hist.push_back(rec.action);
    hist.push_back(res.observation.token_id);
    tr.turns.push_back(std::move(rec));
    ++tr.prefix_turns;
  }

  while (!state.done && tr.rounds < opt.student_turn_limit) {
    TurnRecord rec;
    rec.history_key = make_key(hist, opt.window);
    rec.student_dist = policy_dist(student, rec.history_key, state, 1.0);
    rec.teacher_dist = teacher.dist(state);
    rec.turn_index = state.turn;
    rec.turn_kl = forward_kl(rec.teacher_dist, rec.student_dist);
    if (opt.temperature == 1.0)
      rec.action = sample_action(rec.student_dist, rng);
    else
      rec.action = sample_action(policy_dist(student, rec.history_key, state, opt.temperature), rng);
    auto [next, res] = env.step(state, rec.action);
    state = next;
    hist.push_back(rec.action);
    hist.push_back(res.observation.token_id);
    tr.turns.push_back(std::move(rec));
    ++tr.rounds;
  }
  tr.success = state.success;
  return tr;
}

template <class Student>
Trajectory rollout_opd(const Env& env, const Student& student, const TeacherPolicy& teacher, int task_id, Rng& rng,
                       int window = -1, double temperature = 1.0) {
  RolloutOptions o;
  o.window = window;
  o.temperature = temperature;
  o.algo = Algo::OPD;
  return run_episode(env, student, teacher, task_id, rng, o);
}

template <class Student>
Trajectory rollout_f2b(const Env& env, const Student& student, const TeacherPolicy& teacher, int task_id, int k,
                       Rng& rng, int window = -1, double temperature = 1.0) {
  if (k < 1) throw UsageError("rollout_f2b: k must be >= 1");
  RolloutOptions o;
  o.student_turn_limit = std::min(k, env.config().horizon_cap);
  o.window = window;
  o.temperature = temperature;
  o.algo = Algo::F2B;
  return run_episode(env, student, teacher, task_id, rng, o);
}

// ---------------------------------------------------------------------------
// teacher trajectories

struct StoredTrajectory {
  int task_id = 0;
  std::vector<int> actions;
  int L = 0;
  std::uint64_t seed = 0;
};

struct TeacherTrajectoryStore {
  std::map<int, StoredTrajectory> by_task;
  std::vector<int> missing;  // tasks with no success within pass_m attempts
  std::uint64_t seed = 0;

  bool empty() const { return by_task.empty(); }
  std::vector<int> tasks() const {
    std::vector<int> t;
    for (const auto& kv : by_task) t.push_back(kv.first);
    return t;
  }
  int max_length() const {
    int m = 0;
    for (const auto& kv : by_task) m = std::max(m, kv.second.L);
    return m;
  }
  double mean_length() const {
    if (by_task.empty()) return 0;
    double s = 0;
    for (const auto& kv : by_task) s += kv.second.L;
    return s / static_cast<double>(by_task.size());
  }
  const StoredTrajectory& at(int task) const {
    auto it = by_task.find(task);
    if (it == by_task.end()) throw ConfigError("teacher store has no trajectory for task " + std::to_string(task));
    return it->second;
  }
  void require_non_empty() const {
    if (by_task.empty()) throw ConfigError("teacher store is empty: no task was solved by the teacher");
  }
};

template <class Student>
Trajectory rollout_b2f(const Env& env, const TeacherTrajectoryStore& store, const Student& student,
                       const TeacherPolicy& teacher, int task_id, int k, Rng& rng, int window = -1,
                       double temperature = 1.0) {
  const auto& st = store.at(task_id);
  RolloutOptions o;
  o.prefix = &st.actions;
  o.prefix_len = b2f_prefix_len(st.L, k);
  o.window = window;
  o.temperature = temperature;
  o.algo = Algo::B2F;
  return run_episode(env, student, teacher, task_id, rng, o);
}

/// pass@m: up to pass_m teacher rollouts per task, keeping the first success.
inline TeacherTrajectoryStore collect_teacher_trajectories(const Env& env, const TeacherPolicy& teacher, int pass_m,
                                                           Rng& rng, std::uint64_t seed_tag = 0) {
  if (pass_m < 1) throw ConfigError("pass_m must be >= 1");
  TeacherTrajectoryStore store;
  store.seed = seed_tag;
  RolloutOptions o;
  o.algo = Algo::SFTCollect;
  for (int task = 0; task < env.config().task_count; ++task) {
    bool ok = false;
    for (int attempt = 0; attempt < pass_m && !ok; ++attempt) {
      auto tr = run_episode(env, teacher, teacher, task, rng, o);
      if (!tr.success) continue;
      StoredTrajectory st;
      st.task_id = task;
      for (const auto& t : tr.turns) st.actions.push_back(t.action);
      st.L = static_cast<int>(st.actions.size());
      st.seed = seed_tag;
      store.by_task.emplace(task, std::move(st));
      ok = true;
    }
    if (!ok) store.missing.push_back(task);
  }
  return store;
}

inline bool replay_succeeds(const Env& env, int task, const std::vector<int>& actions) {
  auto [s, o] = env.reset(task);
  for (int a : actions) {
    if (s.done) return false;
    if (a < 0 || a >= env.num_actions()) return false;
    s = env.step(s, a).first;
  }
  return s.success;
}

/** Line-delimited store file. First line is a header object
 *  {"format":"tcod-store","version":1,"seed":..,"task_count":..,"missing":[..]};
 *  every following line is {"task_id":..,"actions":[..],"L":..,"seed":..}. */
inline std::string store_text(const TeacherTrajectoryStore& store, const Env& env) {
  using nlohmann::json;
  std::string out = json{{"format", "tcod-store"},
                         {"version", 1},
                         {"seed", store.seed},
                         {"task_count", env.config().task_count},
                         {"missing", store.missing}}
                        .dump();
  out += '\n';
  for (const auto& [task, st] : store.by_task) {
    out += json{{"task_id", task}, {"actions", st.actions}, {"L", st.L}, {"seed", st.seed}}.dump();
    out += '\n';
  }
  return out;
}

inline void save_store(const TeacherTrajectoryStore& store, const Env& env, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write teacher store " + path);
  f << store_text(store, env);
}

/// Loads and revalidates every trajectory against env.
inline TeacherTrajectoryStore load_store(const std::string& path, const Env& env) {
  using nlohmann::json;
  std::ifstream f(path);
  if (!f) throw ConfigError("teacher store not found: " + path);
  std::string line;
  if (!std::getline(f, line)) throw ConfigError("teacher store " + path + " is empty");
  TeacherTrajectoryStore store;
  try {
    auto h = json::parse(line);
    if (h.at("format") != "tcod-store" || h.at("version") != 1)
      throw ConfigError("teacher store " + path + ": unsupported header");
    if (h.at("task_count").get<int>() != env.config().task_count)
      throw ConfigError("teacher store " + path + ": task_count does not match env");
    store.seed = h.at("seed").get<std::uint64_t>();
    store.missing = h.at("missing").get<std::vector<int>>();
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      auto j = json::parse(line);
      StoredTrajectory st;
      st.task_id = j.at("task_id").get<int>();
      st.actions = j.at("actions").get<std::vector<int>>();
      st.L = j.at("L").get<int>();
      st.seed = j.at("seed").get<std::uint64_t>();
      if (st.task_id < 0 || st.task_id >= env.config().task_count)
        throw ConfigError("teacher store " + path + ": task " + std::to_string(st.task_id) + " out of range");
      if (st.L != static_cast<int>(st.actions.size()) || !replay_succeeds(env, st.task_id, st.actions))
        throw ConfigError("teacher store " + path + ": trajectory for task " + std::to_string(st.task_id) +
                          " does not replay to success");
      store.by_task[st.task_id] = std::move(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("teacher store " + path + ": " + e.what());
  }
  return store;
}

// ---------------------------------------------------------------------------
// losses and updates

using GradientTable = std::unordered_map<HistoryKey, std::vector<double>, HistoryKeyHash>;

struct LossResult {
  double loss = 0;
  GradientTable gradient;
};

/// Sum of turn KL over student turns; gradient sums q - p per visited key.
inline LossResult trajectory_loss(const Trajectory& traj) {
  LossResult r;
  for (const auto& t : traj.turns) {
    if (t.executed_by != Executor::Student) continue;
    if (t.student_dist.empty() || t.teacher_dist.size() != t.student_dist.size())
      throw UsageError("trajectory_loss: student turn without both distributions");
    r.loss += forward_kl(t.teacher_dist, t.student_dist);
    auto g = kl_logit_gradient(t.teacher_dist, t.student_dist);
    auto& acc = r.gradient[t.history_key];
    if (acc.empty()) acc.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }
  return r;
}

struct ExperienceEntry {
  HistoryKey history_key;
  Distribution teacher_dist;
  Distribution student_dist_at_collection;
  int action = 0;
  std::uint64_t policy_version = 0;
  std::uint64_t traj_id = 0;
  int turn_index = 0;
};

struct LearnerStats {
  double loss = 0;       // mean KL over the batch at pre-update params
  double grad_norm = 0;  // L2 norm of the applied per-key mean gradients
};

namespace detail {
inline double apply_mean_gradients(PolicyParams& params, const GradientTable& sum,
                                   const std::unordered_map<HistoryKey, int, HistoryKeyHash>& count, double lr) {
  std::vector<const HistoryKey*> keys;
  keys.reserve(sum.size());
  for (const auto& kv : sum) keys.push_back(&kv.first);
  std::sort(keys.begin(), keys.end(), [](auto* a, auto* b) { return *a < *b; });
  double sq = 0;
  for (const HistoryKey* k : keys) {
    const auto& g = sum.at(*k);
    const double n = count.at(*k);
    auto& z = params.slot(*k);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] / n;
      z[i] -= lr * gi;
      sq += gi * gi;
    }
  }
  return std::sqrt(sq);
}
}  // namespace detail

/** Gradient step on the batch KL. The student side of each gradient is
 *  recomputed from the current params; the teacher side comes from the entry. */
inline LearnerStats learner_step(const std::vector<ExperienceEntry>& batch, PolicyParams& params, double lr) {
  if (batch.empty()) throw UsageError("learner_step: empty batch");
  GradientTable sum;
  std::unordered_map<HistoryKey, int, HistoryKeyHash> count;
  LearnerStats st;
  for (const auto& e : batch) {
    auto q = action_dist(params, e.history_key, 1.0);
    st.loss += forward_kl(e.teacher_dist, q);
    auto g = kl_logit_gradient(e.teacher_dist, q);
    auto& acc = sum[e.history_key];
    if (acc.empty()) acc.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    ++count[e.history_key];
  }
  st.loss /= static_cast<double>(batch.size());
  st.grad_norm = detail::apply_mean_gradients(params, sum, count, lr);
  ++params.version;
  return st;
}

/// One full-batch epoch of NLL descent on the stored teacher actions.
inline LearnerStats sft_update(const Env& env, const TeacherTrajectoryStore& store, PolicyParams& params, double lr,
                               int window = -1) {
  store.require_non_empty();
  GradientTable sum;
  std::unordered_map<HistoryKey, int, HistoryKeyHash> count;
  LearnerStats st;
  int turns = 0;
  for (const auto& [task, traj] : store.by_task) {
    auto [s, o] = env.reset(task);
    History hist{o.token_id};
    for (int a : traj.actions) {
      const auto key = make_key(hist, window);
      const auto& z = params.at(key);
      const auto p = softmax(z);
      st.loss -= std::log(std::max(p[static_cast<std::size_t>(a)], kProbFloor));
      auto g = nll_logit_gradient(z, a);
      auto& acc = sum[key];
      if (acc.empty()) acc.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      ++count[key];
      ++turns;
      auto [next, res] = env.step(s, a);
      s = next;
      hist.push_back(a);
      hist.push_back(res.observation.token_id);
    }
  }
  st.loss /= std::max(turns, 1);
  st.grad_norm = detail::apply_mean_gradients(params, sum, count, lr);
  ++params.version;
  return st;
}

}  // namespace tcod

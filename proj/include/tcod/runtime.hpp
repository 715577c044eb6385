#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "curriculum.hpp"
#include "distill.hpp"
#include "env.hpp"
#include "metrics.hpp"
#include "policy.hpp"
#include "replay.hpp"
#include "rng.hpp"

namespace tcod {

enum class Mode { Sync, Async };

inline const char* to_string(Mode m) { return m == Mode::Sync ? "sync" : "async"; }

struct RunConfig {
  Algo algo = Algo::OPD;
  CurriculumSchedule schedule;
  EnvConfig env;
  TeacherConfig teacher;
  double lr = 0.1;
  int batch_size = 32;
  int actor_count = 4;
  int delta_max = 2;
  int eval_every = 5;
  int eval_episodes = 64;
  std::uint64_t seed = 0;
  Mode mode = Mode::Sync;
  int pass_m = 10;
  int window = -1;  // history window W; negative keeps the full history
  double train_temperature = 1.0;
  double eval_temperature = 0.4;
  int buffer_capacity = 4096;

  void validate() const {
    env.validate();
    teacher.validate();
    schedule.validate();
    if (algo == Algo::SFTCollect) throw ConfigError("run.algo must be one of opd, f2b, b2f, sft");
    if (!(lr > 0)) throw ConfigError("policy.lr must be > 0");
    if (batch_size < 1) throw ConfigError("replay.batch_size must be >= 1");
    if (actor_count < 1) throw ConfigError("runtime.actor_count must be >= 1");
    if (delta_max < 0) throw ConfigError("replay.delta_max must be >= 0");
    if (eval_every < 1) throw ConfigError("runtime.eval_every must be >= 1");
    if (eval_episodes < 1) throw ConfigError("runtime.eval_episodes must be >= 1");
    if (pass_m < 1) throw ConfigError("teacher.pass_m must be >= 1");
    if (!(train_temperature > 0)) throw ConfigError("policy.train_temperature must be > 0");
    if (!(eval_temperature > 0)) throw ConfigError("policy.eval_temperature must be > 0");
    if (buffer_capacity < 1) throw ConfigError("replay.capacity must be >= 1");
  }
};

inline nlohmann::json config_json(const RunConfig& c) {
  using nlohmann::json;
  return json{
      {"run", {{"algo", to_string(c.algo)}, {"seed", c.seed}}},
      {"env",
       {{"kind", to_string(c.env.kind)},
        {"horizon_cap", c.env.horizon_cap},
        {"num_actions", c.env.num_actions},
        {"chain_length", c.env.chain_length},
        {"off_support_depth", c.env.off_support_depth},
        {"seed", c.env.seed},
        {"task_count", c.env.task_count}}},
      {"teacher",
       {{"on_support_temperature", c.teacher.on_support_temperature},
        {"off_support_floor", c.teacher.off_support_floor},
        {"sharpening", c.teacher.sharpening},
        {"off_support_temperature", c.teacher.off_support_temperature},
        {"pass_m", c.pass_m}}},
      {"policy",
       {{"lr", c.lr},
        {"window", c.window},
        {"train_temperature", c.train_temperature},
        {"eval_temperature", c.eval_temperature}}},
      {"curriculum",
       {{"k_start", c.schedule.k_start},
        {"eta", c.schedule.eta},
        {"cap", c.schedule.cap},
        {"total_steps", c.schedule.total_steps}}},
      {"replay", {{"capacity", c.buffer_capacity}, {"delta_max", c.delta_max}, {"batch_size", c.batch_size}}},
      {"runtime",
       {{"mode", to_string(c.mode)},
        {"actor_count", c.actor_count},
        {"eval_every", c.eval_every},
        {"eval_episodes", c.eval_episodes}}}};
}

/// FNV-1a over the canonical JSON form, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  const std::string s = config_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// evaluation

/// Full-horizon episodes with no prefix and no truncation; task i % task_count for episode i.
template <class Policy>
EvalRecord evaluate(const Policy& policy, const Env& env, const TeacherPolicy& teacher, int episodes, Rng& rng,
                    int window = -1, double temperature = 0.4, int step = 0, int active_k = 0) {
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  std::vector<Trajectory> trajs;
  trajs.reserve(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e) {
    trajs.push_back(rollout_opd(env, policy, teacher, e % env.config().task_count, rng, window, temperature));
    if (trajs.back().prefix_turns != 0) throw UsageError("evaluation episode contains teacher turns");
  }
  return summarize(trajs, step, active_k, Split::Eval);
}

// ---------------------------------------------------------------------------
// training

/// The teacher store a run collects for itself when none is supplied.
inline TeacherTrajectoryStore collect_for(const RunConfig& cfg) {
  auto env = std::make_shared<const Env>(cfg.env);
  TeacherPolicy teacher(env, cfg.teacher);
  Rng rng(cfg.seed, 0xc011ec7);
  return collect_teacher_trajectories(*env, teacher, cfg.pass_m, rng, cfg.seed);
}

struct RunResult {
  MetricsLog log;
  PolicyParams params;
  std::vector<std::string> warnings;
  std::uint64_t consumed = 0;
  std::uint64_t staleness_violations = 0;
};

namespace detail {

struct RunContext {
  const RunConfig& cfg;
  std::shared_ptr<const Env> env;
  TeacherPolicy teacher;
  const TeacherTrajectoryStore* store;
  std::vector<int> pool;

  Trajectory produce(const PolicyParams& snap, int n, Rng& rng) const {
    const int task = pool[static_cast<std::size_t>(rng.below(pool.size()))];
    const int k = horizon_at(cfg.schedule, n);
    switch (cfg.algo) {
      case Algo::F2B:
        return rollout_f2b(*env, snap, teacher, task, k, rng, cfg.window, cfg.train_temperature);
      case Algo::B2F:
        return rollout_b2f(*env, *store, snap, teacher, task, k, rng, cfg.window, cfg.train_temperature);
      default:
        return rollout_opd(*env, snap, teacher, task, rng, cfg.window, cfg.train_temperature);
    }
  }

  int logged_k(int n) const {
    return cfg.algo == Algo::OPD || cfg.algo == Algo::SFT ? cfg.env.horizon_cap : horizon_at(cfg.schedule, n);
  }
};

inline TrainRecord train_record(int n, const LearnerStats& st, const std::vector<ExperienceEntry>& batch,
                                std::uint64_t version_before, const RunConfig& cfg, std::uint64_t buffer_size,
                                std::uint64_t discarded_total, int active_k, std::uint64_t& violations) {
  TrainRecord r;
  r.step = n;
  r.loss = st.loss;
  r.grad_norm = st.grad_norm;
  r.buffer_size = buffer_size;
  r.discarded_stale = discarded_total;
  r.active_k = active_k;
  r.staleness_hist.assign(static_cast<std::size_t>(cfg.delta_max) + 1, 0);
  double s = 0;
  for (const auto& e : batch) {
    const std::uint64_t age = version_before - e.policy_version;
    s += static_cast<double>(age);
    if (age > static_cast<std::uint64_t>(cfg.delta_max)) {
      ++violations;
      ++r.staleness_violations;
    } else {
      ++r.staleness_hist[age];
    }
  }
  r.mean_staleness = batch.empty() ? 0.0 : s / static_cast<double>(batch.size());
  return r;
}

}  // namespace detail

/** Runs cfg.schedule.total_steps learner steps.
 *  B2F and SFT need a teacher store; when none is given one is collected with
 *  a stream derived from cfg.seed. */
inline RunResult run_training(const RunConfig& cfg, const TeacherTrajectoryStore* given_store = nullptr) {
  cfg.validate();
  auto env = std::make_shared<const Env>(cfg.env);
  detail::RunContext ctx{cfg, env, TeacherPolicy(env, cfg.teacher), given_store, {}};
  RunResult out;
  out.log.config_hash = config_hash(cfg);
  out.params = PolicyParams(cfg.env.num_actions);

  std::optional<TeacherTrajectoryStore> own_store;
  if ((cfg.algo == Algo::B2F || cfg.algo == Algo::SFT) && !ctx.store) {
    own_store = collect_for(cfg);
    ctx.store = &*own_store;
  }
  if (cfg.algo == Algo::B2F) {
    ctx.store->require_non_empty();
    ctx.pool = ctx.store->tasks();
    if (!prefix_vanishes(cfg.schedule, ctx.store->max_length()))
      out.warnings.push_back("curriculum.total_steps too small for the teacher prefix to reach 0 on every task");
  } else {
    for (int t = 0; t < cfg.env.task_count; ++t) ctx.pool.push_back(t);
  }
  if (cfg.algo == Algo::SFT) ctx.store->require_non_empty();

  const int N = cfg.schedule.total_steps;
  PolicyParams& params = out.params;
  auto maybe_eval = [&](int n) {
    if (n % cfg.eval_every != 0 && n != N) return;
    Rng erng(cfg.seed, 0xe7a1000000ULL + static_cast<std::uint64_t>(n));
    out.log.records.push_back(evaluate(params, *env, ctx.teacher, cfg.eval_episodes, erng, cfg.window,
                                       cfg.eval_temperature, n, ctx.logged_k(n)));
  };

  if (cfg.algo == Algo::SFT) {
    for (int n = 1; n <= N; ++n) {
      auto st = sft_update(*env, *ctx.store, params, cfg.lr, cfg.window);
      TrainRecord r;
      r.step = n;
      r.loss = st.loss;
      r.grad_norm = st.grad_norm;
      r.active_k = ctx.logged_k(n);
      r.staleness_hist.assign(static_cast<std::size_t>(cfg.delta_max) + 1, 0);
      out.log.records.push_back(r);
      maybe_eval(n);
    }
    return out;
  }

  RingBuffer buffer(static_cast<std::size_t>(cfg.buffer_capacity));
  Rng learner_rng(cfg.seed, 1);
  std::uint64_t discarded_total = 0;
  const auto B = static_cast<std::size_t>(cfg.batch_size);

  auto learn = [&](int n, std::vector<Trajectory>& produced, SampleResult& sample, std::size_t buffer_size) {
    out.log.records.push_back(summarize(produced, n, ctx.logged_k(n), Split::Rollout));
    discarded_total += sample.discarded;
    const auto before = params.version;
    auto st = learner_step(sample.batch, params, cfg.lr);
    out.consumed += sample.batch.size();
    out.log.records.push_back(detail::train_record(n, st, sample.batch, before, cfg, buffer_size, discarded_total,
                                                   ctx.logged_k(n), out.staleness_violations));
    maybe_eval(n);
  };

  if (cfg.mode == Mode::Sync) {
    std::vector<Rng> actors;
    for (int i = 0; i < cfg.actor_count; ++i) actors.emplace_back(cfg.seed, 100 + static_cast<std::uint64_t>(i));
    std::uint64_t traj_id = 0, rr = 0;
    for (int n = 1; n <= N; ++n) {
      std::vector<Trajectory> produced;
      std::size_t fresh = 0;
      while (fresh < B) {
        auto& rng = actors[rr++ % actors.size()];
        produced.push_back(ctx.produce(params, n, rng));
        auto entries = decompose(produced.back(), traj_id++);
        fresh += entries.size();
        buffer.push(entries);
      }
      auto sample = sample_batch(buffer, params.version, static_cast<std::uint64_t>(cfg.delta_max), B, learner_rng);
      learn(n, produced, sample, buffer.size());
    }
    return out;
  }

  // async: actors append under one mutex; the learner waits for batch_size fresh entries
  struct Shared {
    std::mutex m;
    std::condition_variable cv;
    std::shared_ptr<const PolicyParams> snap;
    int step = 1;
    bool stop = false;
    std::size_t fresh = 0;
    std::uint64_t traj_id = 0;
    std::vector<Trajectory> produced;
  } sh;
  sh.snap = std::make_shared<const PolicyParams>(params);

  auto actor = [&](int i) {
    Rng rng(cfg.seed, 100 + static_cast<std::uint64_t>(i));
    for (;;) {
      std::shared_ptr<const PolicyParams> snap;
      int n;
      {
        std::lock_guard lk(sh.m);
        if (sh.stop) return;
        snap = sh.snap;
        n = std::min(sh.step, N);
      }
      auto tr = ctx.produce(*snap, n, rng);
      std::lock_guard lk(sh.m);
      if (sh.stop) return;
      auto entries = decompose(tr, sh.traj_id++);
      sh.fresh += entries.size();
      buffer.push(entries);
      sh.produced.push_back(std::move(tr));
      sh.cv.notify_all();
    }
  };

  std::vector<std::thread> pool;
  for (int i = 0; i < cfg.actor_count; ++i) pool.emplace_back(actor, i);
  try {
    for (int n = 1; n <= N; ++n) {
      std::vector<Trajectory> produced;
      SampleResult sample;
      std::size_t occupancy = 0;
      {
        std::unique_lock lk(sh.m);
        sh.cv.wait(lk, [&] { return sh.fresh >= B; });
        sh.fresh = 0;
        produced.swap(sh.produced);
        sample = sample_batch(buffer, params.version, static_cast<std::uint64_t>(cfg.delta_max), B, learner_rng);
        occupancy = buffer.size();
      }
      learn(n, produced, sample, occupancy);
      auto next = std::make_shared<const PolicyParams>(params);
      std::lock_guard lk(sh.m);
      sh.snap = std::move(next);
      sh.step = n + 1;
    }
  } catch (...) {
    {
      std::lock_guard lk(sh.m);
      sh.stop = true;
    }
    for (auto& t : pool) t.join();
    throw;
  }
  {
    std::lock_guard lk(sh.m);
    sh.stop = true;
  }
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace tcod

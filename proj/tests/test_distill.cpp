#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include <tcod/distill.hpp>

using namespace tcod;

namespace {

struct Fixture {
  std::shared_ptr<const Env> env;
  TeacherPolicy teacher;
  explicit Fixture(std::uint64_t seed = 0, TeacherConfig tc = {})
      : env(std::make_shared<const Env>(make_cfg(seed))), teacher(env, tc) {}
  static EnvConfig make_cfg(std::uint64_t seed) {
    EnvConfig c;
    c.seed = seed;
    return c;
  }
};

// Student whose logits put almost all mass on the optimal path of every task.
PolicyParams optimal_student(const Env& env) {
  PolicyParams p(env.num_actions());
  for (int t = 0; t < env.config().task_count; ++t) {
    auto [s, o] = env.reset(t);
    History h{o.token_id};
    for (int a : env.optimal_actions(t)) {
      p.slot(make_key(h, -1))[static_cast<std::size_t>(a)] = 50.0;
      auto [nx, r] = env.step(s, a);
      s = nx;
      h.push_back(a);
      h.push_back(r.observation.token_id);
    }
  }
  return p;
}

TeacherConfig uniform_teacher() {
  TeacherConfig tc;
  tc.on_support_temperature = 1e6;
  tc.off_support_temperature = 1e6;
  tc.off_support_floor = 1.0;
  tc.sharpening = 0;
  return tc;
}

TurnRecord student_turn(HistoryKey k, Distribution p, Distribution q) {
  TurnRecord t;
  t.history_key = std::move(k);
  t.teacher_dist = std::move(p);
  t.student_dist = std::move(q);
  t.turn_kl = forward_kl(t.teacher_dist, t.student_dist);
  return t;
}

}  // namespace

TEST(Rollout, TeacherAsStudentHasZeroKL) {
  Fixture f;
  Rng rng(0, 1);
  for (int t = 0; t < 32; ++t) {
    auto tr = rollout_opd(*f.env, f.teacher, f.teacher, t, rng);
    for (const auto& turn : tr.turns) EXPECT_NEAR(turn.turn_kl, 0.0, 1e-12);
  }
}

TEST(Rollout, UniformStudentFirstTurnKLClosedForm) {
  Fixture f;
  PolicyParams student(6);
  Rng rng(0, 2);
  auto tr = rollout_opd(*f.env, student, f.teacher, 0, rng);
  const auto& p = tr.turns.front().teacher_dist;
  double want = 0;
  for (double v : p) want += v * std::log(v * 6);
  EXPECT_NEAR(tr.turns.front().turn_kl, want, 1e-12);
}

TEST(Rollout, SameSeedSameTrajectory) {
  Fixture f;
  PolicyParams student(6);
  Rng a(4, 4), b(4, 4);
  for (int t = 0; t < 10; ++t) {
    auto x = rollout_opd(*f.env, student, f.teacher, t, a);
    auto y = rollout_opd(*f.env, student, f.teacher, t, b);
    ASSERT_EQ(x.turns.size(), y.turns.size());
    for (std::size_t i = 0; i < x.turns.size(); ++i) EXPECT_EQ(x.turns[i].action, y.turns[i].action);
  }
}

TEST(Rollout, ActionCountMismatchThrows) {
  Fixture f;
  PolicyParams student(4);
  Rng rng(0, 0);
  EXPECT_THROW(rollout_opd(*f.env, student, f.teacher, 0, rng), UsageError);
}

TEST(Rollout, OpdRoundsWithinHorizon) {
  Fixture f;
  PolicyParams student(6);
  Rng rng(1, 1);
  for (int i = 0; i < 200; ++i) {
    auto tr = rollout_opd(*f.env, student, f.teacher, i % 32, rng);
    EXPECT_GE(tr.rounds, 1);
    EXPECT_LE(tr.rounds, 12);
    EXPECT_EQ(tr.prefix_turns, 0);
    EXPECT_EQ(static_cast<int>(tr.turns.size()), tr.rounds);
  }
}

TEST(F2B, KOneGivesSingleTurn) {
  Fixture f;
  PolicyParams student(6);
  Rng rng(0, 3);
  auto tr = rollout_f2b(*f.env, student, f.teacher, 0, 1, rng);
  EXPECT_EQ(tr.rounds, 1);
  EXPECT_EQ(tr.turns.size(), 1u);
  EXPECT_FALSE(tr.success);
}

TEST(F2B, TruncationBeforeChainEndNeverSucceeds) {
  Fixture f;
  auto student = optimal_student(*f.env);
  Rng rng(0, 3);
  for (int t = 0; t < 32; ++t) {
    auto tr = rollout_f2b(*f.env, student, f.teacher, t, 3, rng);
    EXPECT_EQ(tr.rounds, 3);
    EXPECT_FALSE(tr.success);
  }
}

TEST(F2B, AtHorizonMatchesOpd) {
  Fixture f;
  PolicyParams student(6);
  Rng a(8, 8), b(8, 8);
  for (int t = 0; t < 32; ++t) {
    auto x = rollout_f2b(*f.env, student, f.teacher, t, 12, a);
    auto y = rollout_opd(*f.env, student, f.teacher, t, b);
    ASSERT_EQ(x.rounds, y.rounds);
    EXPECT_EQ(x.success, y.success);
    for (std::size_t i = 0; i < x.turns.size(); ++i) {
      EXPECT_EQ(x.turns[i].action, y.turns[i].action);
      EXPECT_EQ(x.turns[i].turn_kl, y.turns[i].turn_kl);
    }
  }
  EXPECT_THROW(rollout_f2b(*f.env, student, f.teacher, 0, 0, a), UsageError);
}

TEST(F2B, RoundsNeverExceedK) {
  Fixture f;
  PolicyParams student(6);
  Rng rng(2, 2);
  for (int k = 1; k <= 12; ++k)
    for (int i = 0; i < 20; ++i) EXPECT_LE(rollout_f2b(*f.env, student, f.teacher, i, k, rng).rounds, k);
}

namespace {
TeacherTrajectoryStore optimal_store(const Env& env) {
  TeacherTrajectoryStore st;
  for (int t = 0; t < env.config().task_count; ++t) {
    StoredTrajectory s;
    s.task_id = t;
    s.actions = env.optimal_actions(t);
    s.L = static_cast<int>(s.actions.size());
    st.by_task[t] = s;
  }
  return st;
}
}  // namespace

TEST(B2F, PrefixLengthFollowsSchedule) {
  Fixture f;
  auto store = optimal_store(*f.env);
  PolicyParams student(6);
  Rng rng(0, 5);
  auto tr = rollout_b2f(*f.env, store, student, f.teacher, 0, 1, rng);
  EXPECT_EQ(tr.prefix_turns, 7);
  for (int i = 0; i < 7; ++i) {
    EXPECT_EQ(tr.turns[static_cast<std::size_t>(i)].executed_by, Executor::TeacherPrefix);
    EXPECT_EQ(tr.turns[static_cast<std::size_t>(i)].turn_kl, 0.0);
    EXPECT_EQ(tr.turns[static_cast<std::size_t>(i)].action, f.env->optimal_actions(0)[static_cast<std::size_t>(i)]);
  }
  EXPECT_EQ(tr.turns[7].executed_by, Executor::Student);
  EXPECT_EQ(tr.turns[7].turn_index, 7);
}

TEST(B2F, FullHorizonMatchesOpd) {
  Fixture f;
  auto store = optimal_store(*f.env);
  PolicyParams student(6);
  Rng a(3, 3), b(3, 3);
  for (int t = 0; t < 32; ++t) {
    auto x = rollout_b2f(*f.env, store, student, f.teacher, t, 8, a);
    auto y = rollout_opd(*f.env, student, f.teacher, t, b);
    EXPECT_EQ(x.prefix_turns, 0);
    ASSERT_EQ(x.rounds, y.rounds);
    for (std::size_t i = 0; i < x.turns.size(); ++i) EXPECT_EQ(x.turns[i].action, y.turns[i].action);
  }
}

TEST(B2F, StudentActsToHorizonAfterPrefix) {
  Fixture f;
  auto store = optimal_store(*f.env);
  PolicyParams student(6);
  Rng rng(6, 6);
  for (int i = 0; i < 50; ++i) {
    auto tr = rollout_b2f(*f.env, store, student, f.teacher, i % 32, 2, rng);
    EXPECT_EQ(tr.prefix_turns, 6);
    EXPECT_LE(tr.prefix_turns + tr.rounds, 12);
    if (!tr.success) { EXPECT_EQ(tr.prefix_turns + tr.rounds, 12); }
  }
}

TEST(B2F, PrefixTurnsCarryNoGradient) {
  Fixture f;
  auto store = optimal_store(*f.env);
  PolicyParams student(6);
  Rng rng(0, 7);
  auto tr = rollout_b2f(*f.env, store, student, f.teacher, 0, 3, rng);
  auto base = trajectory_loss(tr);
  for (auto& t : tr.turns)
    if (t.executed_by == Executor::TeacherPrefix) {
      t.student_dist.assign(6, 0.0);
      t.student_dist[0] = 1.0;
    }
  auto perturbed = trajectory_loss(tr);
  EXPECT_EQ(base.loss, perturbed.loss);
  EXPECT_EQ(base.gradient, perturbed.gradient);
}

TEST(B2F, MissingTaskThrows) {
  Fixture f;
  TeacherTrajectoryStore empty;
  PolicyParams student(6);
  Rng rng(0, 0);
  EXPECT_THROW(rollout_b2f(*f.env, empty, student, f.teacher, 0, 1, rng), ConfigError);
}

TEST(Loss, SingleTurnExample) {
  Trajectory tr;
  tr.turns.push_back(student_turn(HistoryKey{{0}}, {1.0, 0.0}, {0.5, 0.5}));
  tr.rounds = 1;
  auto r = trajectory_loss(tr);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
  const auto& g = r.gradient.at(HistoryKey{{0}});
  EXPECT_NEAR(g[0], -0.5, 1e-15);
  EXPECT_NEAR(g[1], 0.5, 1e-15);
}

TEST(Loss, AllPrefixTrajectoryIsZero) {
  Trajectory tr;
  auto t = student_turn(HistoryKey{{0}}, {1.0, 0.0}, {0.5, 0.5});
  t.executed_by = Executor::TeacherPrefix;
  tr.turns.push_back(t);
  auto r = trajectory_loss(tr);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_TRUE(r.gradient.empty());
}

TEST(Loss, MalformedTurnThrows) {
  Trajectory tr;
  TurnRecord t;
  t.teacher_dist = {1.0, 0.0};
  tr.turns.push_back(t);
  EXPECT_THROW(trajectory_loss(tr), UsageError);
}

TEST(Loss, NonNegativeAndEqualsKLSum) {
  Fixture f;
  Rng rng(9, 9);
  auto student = optimal_student(*f.env);
  for (auto& [k, z] : student.logits)
    for (auto& v : z) v = v * 0.02 + rng.uniform();
  for (int i = 0; i < 100; ++i) {
    auto tr = rollout_opd(*f.env, student, f.teacher, i % 32, rng);
    auto r = trajectory_loss(tr);
    EXPECT_GE(r.loss, 0.0);
    EXPECT_NEAR(r.loss, tr.kl_sum(), 1e-12);
  }
}

TEST(Collect, NearDeterministicTeacherCoversEveryTask) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Fixture f(seed);
    Rng rng(seed, 10);
    auto store = collect_teacher_trajectories(*f.env, f.teacher, 10, rng, seed);
    EXPECT_EQ(store.by_task.size(), 32u);
    EXPECT_TRUE(store.missing.empty());
    for (const auto& [t, st] : store.by_task) {
      EXPECT_TRUE(replay_succeeds(*f.env, t, st.actions));
      EXPECT_EQ(st.L, static_cast<int>(st.actions.size()));
      EXPECT_GE(st.L, 8);
      EXPECT_LE(st.L, 12);
    }
  }
}

TEST(Collect, DeterministicTeacherGivesOptimalLength) {
  auto env = std::make_shared<const Env>(Fixture::make_cfg(0));
  auto teacher = make_teacher(env, 1e-3, 0.05);
  Rng rng(0, 10);
  auto store = collect_teacher_trajectories(*env, teacher, 1, rng);
  ASSERT_EQ(store.by_task.size(), 32u);
  for (const auto& [t, st] : store.by_task) EXPECT_EQ(st.actions, env->optimal_actions(t));
}

TEST(Collect, UniformTeacherLeavesStoreEmpty) {
  Fixture f(0, uniform_teacher());
  Rng rng(0, 10);
  auto store = collect_teacher_trajectories(*f.env, f.teacher, 1, rng);
  EXPECT_TRUE(store.empty());
  EXPECT_EQ(store.missing.size(), 32u);
  EXPECT_THROW(store.require_non_empty(), ConfigError);
}

TEST(Collect, PassMMustBePositive) {
  Fixture f;
  Rng rng(0, 0);
  EXPECT_THROW(collect_teacher_trajectories(*f.env, f.teacher, 0, rng), ConfigError);
}

TEST(Store, SaveLoadRoundTrip) {
  Fixture f;
  Rng rng(0, 10);
  auto store = collect_teacher_trajectories(*f.env, f.teacher, 10, rng, 0);
  const std::string path = ::testing::TempDir() + "store.jsonl";
  save_store(store, *f.env, path);
  auto back = load_store(path, *f.env);
  EXPECT_EQ(store_text(back, *f.env), store_text(store, *f.env));
}

TEST(Store, TamperedTrajectoryRejected) {
  Fixture f;
  auto store = optimal_store(*f.env);
  store.by_task[0].actions[0] = (store.by_task[0].actions[0] + 1) % 6;
  const std::string path = ::testing::TempDir() + "bad_store.jsonl";
  save_store(store, *f.env, path);
  EXPECT_THROW(load_store(path, *f.env), ConfigError);
  EXPECT_THROW(load_store(::testing::TempDir() + "missing_store.jsonl", *f.env), ConfigError);
}

TEST(SFT, UniformSingleTurnStep) {
  EnvConfig c;
  c.num_actions = 2;
  c.chain_length = 1;
  c.horizon_cap = 1;
  c.task_count = 1;
  Env env(c);
  TeacherTrajectoryStore store;
  store.by_task[0] = StoredTrajectory{0, {env.optimal_actions(0)[0]}, 1, 0};
  PolicyParams p(2);
  auto st = sft_update(env, store, p, 0.1);
  const auto& z = p.at(HistoryKey{{0}});
  const auto a = static_cast<std::size_t>(env.optimal_actions(0)[0]);
  EXPECT_NEAR(z[a], 0.05, 1e-15);
  EXPECT_NEAR(z[1 - a], -0.05, 1e-15);
  EXPECT_NEAR(st.loss, std::log(2.0), 1e-12);
  EXPECT_EQ(p.version, 1u);
}

TEST(SFT, MatchedStudentHasTinyGradient) {
  Fixture f;
  auto store = optimal_store(*f.env);
  auto p = optimal_student(*f.env);
  auto st = sft_update(*f.env, store, p, 0.1);
  EXPECT_LT(st.grad_norm, 1e-12);
  EXPECT_LT(st.loss, 1e-12);
}

TEST(SFT, EmptyStoreThrows) {
  Fixture f;
  PolicyParams p(6);
  EXPECT_THROW(sft_update(*f.env, TeacherTrajectoryStore{}, p, 0.1), ConfigError);
}

namespace {
ExperienceEntry entry(HistoryKey k, Distribution p) {
  ExperienceEntry e;
  e.history_key = std::move(k);
  e.teacher_dist = std::move(p);
  return e;
}
}  // namespace

TEST(Learner, SingleEntryArithmetic) {
  PolicyParams p(2);
  auto st = learner_step({entry(HistoryKey{{0}}, {1.0, 0.0})}, p, 0.1);
  EXPECT_NEAR(p.at(HistoryKey{{0}})[0], 0.05, 1e-15);
  EXPECT_NEAR(p.at(HistoryKey{{0}})[1], -0.05, 1e-15);
  EXPECT_NEAR(st.loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(st.grad_norm, std::sqrt(0.5), 1e-12);
  EXPECT_EQ(p.version, 1u);
}

TEST(Learner, TeacherEqualsStudentLeavesParamsUnchanged) {
  PolicyParams p(3);
  p.slot(HistoryKey{{1}}) = {0.3, -0.2, 0.1};
  const auto before = p.logits;
  auto q = action_dist(p, HistoryKey{{1}}, 1.0);
  auto st = learner_step({entry(HistoryKey{{1}}, q), entry(HistoryKey{{2}}, {1.0 / 3, 1.0 / 3, 1.0 / 3})}, p, 0.5);
  EXPECT_NEAR(st.grad_norm, 0.0, 1e-15);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.at(HistoryKey{{1}})[i], before.at(HistoryKey{{1}})[i], 1e-15);
  EXPECT_EQ(p.version, 1u);
}

TEST(Learner, DuplicateKeysAverage) {
  PolicyParams a(2), b(2);
  learner_step({entry(HistoryKey{{0}}, {1.0, 0.0}), entry(HistoryKey{{0}}, {0.0, 1.0})}, a, 1.0);
  EXPECT_NEAR(a.at(HistoryKey{{0}})[0], 0.0, 1e-15);
  learner_step({entry(HistoryKey{{0}}, {1.0, 0.0}), entry(HistoryKey{{0}}, {1.0, 0.0})}, b, 1.0);
  EXPECT_NEAR(b.at(HistoryKey{{0}})[0], 0.5, 1e-15);
}

TEST(Learner, EmptyBatchThrows) {
  PolicyParams p(2);
  EXPECT_THROW(learner_step({}, p, 0.1), UsageError);
}

TEST(Learner, FixedBatchKLDecreases) {
  Fixture f;
  Rng rng(1, 1);
  PolicyParams p(6);
  std::vector<ExperienceEntry> batch;
  for (int i = 0; i < 32; ++i) {
    auto tr = rollout_opd(*f.env, p, f.teacher, i, rng);
    for (const auto& t : tr.turns) batch.push_back(entry(t.history_key, t.teacher_dist));
  }
  for (double lr : {0.1, 0.5, 1.0}) {
    PolicyParams q(6);
    double prev = learner_step(batch, q, lr).loss;
    for (int n = 1; n < 100; ++n) {
      const double cur = learner_step(batch, q, lr).loss;
      EXPECT_LE(cur, prev + 1e-12) << "lr " << lr << " step " << n;
      prev = cur;
    }
    EXPECT_EQ(q.version, 100u);
  }
}

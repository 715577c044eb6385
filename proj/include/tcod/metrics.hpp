#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "distill.hpp"
#include "errors.hpp"

namespace tcod {

inline constexpr int kMetricsSchemaVersion = 1;

struct SchemaVersionError : ConfigError {
  using ConfigError::ConfigError;
};

enum class Split { Eval, Rollout };

inline const char* to_string(Split s) { return s == Split::Eval ? "eval" : "rollout"; }

/** traj_kl_mean averages the per-episode KL sum; traj_kl_turn_mean averages
 *  the per-episode mean over student turns. Prefix fields are zero for Eval. */
struct EvalRecord {
  int step = 0;
  double success_rate = 0;
  double avg_rounds = 0;
  double traj_kl_mean = 0;
  double traj_kl_turn_mean = 0;
  std::vector<double> per_turn_kl;  // NaN where no student turn had that index
  int active_k = 0;
  Split split = Split::Eval;
  int episodes = 0;
  double mean_prefix = 0;
  int max_prefix = 0;
};

struct TrainRecord {
  int step = 0;
  double loss = 0;
  double grad_norm = 0;
  std::uint64_t buffer_size = 0;
  std::uint64_t discarded_stale = 0;  // cumulative
  int active_k = 0;
  double mean_staleness = 0;
  std::vector<std::uint64_t> staleness_hist;  // batch counts at staleness 0..delta_max
  std::uint64_t staleness_violations = 0;
};

using Record = std::variant<TrainRecord, EvalRecord>;

struct MetricsLog {
  std::string config_hash;
  std::vector<Record> records;

  std::vector<EvalRecord> evals(Split s) const {
    std::vector<EvalRecord> out;
    for (const auto& r : records)
      if (auto* e = std::get_if<EvalRecord>(&r); e && e->split == s) out.push_back(*e);
    return out;
  }
  std::vector<TrainRecord> train() const {
    std::vector<TrainRecord> out;
    for (const auto& r : records)
      if (auto* t = std::get_if<TrainRecord>(&r)) out.push_back(*t);
    return out;
  }
};

/// Mean turn KL per absolute turn index over student turns; prefix turns only advance the index.
inline std::vector<double> per_turn_kl_profile(const std::vector<Trajectory>& trajs) {
  std::vector<double> sum;
  std::vector<int> cnt;
  for (const auto& tr : trajs) {
    for (const auto& t : tr.turns) {
      const auto i = static_cast<std::size_t>(t.turn_index);
      if (i >= sum.size()) {
        sum.resize(i + 1, 0.0);
        cnt.resize(i + 1, 0);
      }
      if (t.executed_by != Executor::Student) continue;
      sum[i] += t.turn_kl;
      ++cnt[i];
    }
  }
  std::vector<double> out(sum.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (cnt[i] > 0) out[i] = sum[i] / cnt[i];
  return out;
}

/// Aggregates a batch of trajectories into one record.
inline EvalRecord summarize(const std::vector<Trajectory>& trajs, int step, int active_k, Split split) {
  EvalRecord r;
  r.step = step;
  r.active_k = active_k;
  r.split = split;
  r.episodes = static_cast<int>(trajs.size());
  if (trajs.empty()) return r;
  int wins = 0;
  double rounds = 0, kl = 0, klm = 0, pre = 0;
  for (const auto& t : trajs) {
    wins += t.success ? 1 : 0;
    rounds += t.rounds;
    const double s = t.kl_sum();
    kl += s;
    klm += t.rounds > 0 ? s / t.rounds : 0.0;
    pre += t.prefix_turns;
    r.max_prefix = std::max(r.max_prefix, t.prefix_turns);
  }
  const double n = static_cast<double>(trajs.size());
  r.success_rate = wins / n;
  r.avg_rounds = rounds / n;
  r.traj_kl_mean = kl / n;
  r.traj_kl_turn_mean = klm / n;
  r.mean_prefix = pre / n;
  r.per_turn_kl = per_turn_kl_profile(trajs);
  return r;
}

// ---------------------------------------------------------------------------
// serialization

/// Round to 9 significant digits; this is exactly what a written log holds.
inline double round9(double v) {
  if (!std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

namespace detail {
using nlohmann::json;

inline json num(double v) { return std::isfinite(v) ? json(round9(v)) : json(nullptr); }
inline double num_of(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline json to_json(const TrainRecord& t) {
  return json{{"record", "train"},
              {"step", t.step},
              {"loss", num(t.loss)},
              {"grad_norm", num(t.grad_norm)},
              {"buffer_size", t.buffer_size},
              {"discarded_stale", t.discarded_stale},
              {"active_k", t.active_k},
              {"mean_staleness", num(t.mean_staleness)},
              {"staleness_hist", t.staleness_hist},
              {"staleness_violations", t.staleness_violations}};
}

inline json to_json(const EvalRecord& e) {
  json kl = json::array();
  for (double v : e.per_turn_kl) kl.push_back(num(v));
  return json{{"record", "eval"},
              {"step", e.step},
              {"success_rate", num(e.success_rate)},
              {"avg_rounds", num(e.avg_rounds)},
              {"traj_kl_mean", num(e.traj_kl_mean)},
              {"traj_kl_turn_mean", num(e.traj_kl_turn_mean)},
              {"per_turn_kl", kl},
              {"active_k", e.active_k},
              {"split", to_string(e.split)},
              {"episodes", e.episodes},
              {"mean_prefix", num(e.mean_prefix)},
              {"max_prefix", e.max_prefix}};
}

inline Record from_json(const json& j) {
  const auto kind = j.at("record").get<std::string>();
  if (kind == "train") {
    TrainRecord t;
    t.step = j.at("step");
    t.loss = num_of(j.at("loss"));
    t.grad_norm = num_of(j.at("grad_norm"));
    t.buffer_size = j.at("buffer_size");
    t.discarded_stale = j.at("discarded_stale");
    t.active_k = j.at("active_k");
    t.mean_staleness = num_of(j.at("mean_staleness"));
    t.staleness_hist = j.at("staleness_hist").get<std::vector<std::uint64_t>>();
    t.staleness_violations = j.at("staleness_violations");
    return t;
  }
  if (kind == "eval") {
    EvalRecord e;
    e.step = j.at("step");
    e.success_rate = num_of(j.at("success_rate"));
    e.avg_rounds = num_of(j.at("avg_rounds"));
    e.traj_kl_mean = num_of(j.at("traj_kl_mean"));
    e.traj_kl_turn_mean = num_of(j.at("traj_kl_turn_mean"));
    for (const auto& v : j.at("per_turn_kl")) e.per_turn_kl.push_back(num_of(v));
    e.active_k = j.at("active_k");
    const auto s = j.at("split").get<std::string>();
    if (s != "eval" && s != "rollout") throw ConfigError("unknown split " + s);
    e.split = s == "eval" ? Split::Eval : Split::Rollout;
    e.episodes = j.at("episodes");
    e.mean_prefix = num_of(j.at("mean_prefix"));
    e.max_prefix = j.at("max_prefix");
    return e;
  }
  throw ConfigError("unknown record kind " + kind);
}
}  // namespace detail

inline std::string header_line(const std::string& config_hash) {
  return nlohmann::json{{"record", "header"}, {"schema_version", kMetricsSchemaVersion}, {"config_hash", config_hash}}
      .dump();
}

inline std::string record_line(const Record& r) {
  return std::visit([](const auto& x) { return detail::to_json(x).dump(); }, r);
}

inline void write_records(const MetricsLog& log, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open metrics log for writing: " + path);
  f << header_line(log.config_hash) << '\n';
  for (const auto& r : log.records) f << record_line(r) << '\n';
  if (!f) throw ConfigError("write failed for metrics log: " + path);
}

inline MetricsLog read_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open metrics log: " + path);
  MetricsLog log;
  std::string line;
  if (!std::getline(f, line)) throw ConfigError("metrics log " + path + " has no header line");
  try {
    auto h = nlohmann::json::parse(line);
    if (h.at("record") != "header") throw ConfigError("metrics log " + path + " has no header line");
    const int v = h.at("schema_version");
    if (v != kMetricsSchemaVersion)
      throw SchemaVersionError("metrics log " + path + ": schema version " + std::to_string(v) + ", expected " +
                               std::to_string(kMetricsSchemaVersion));
    log.config_hash = h.at("config_hash");
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      log.records.push_back(detail::from_json(nlohmann::json::parse(line)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("metrics log " + path + ": " + e.what());
  }
  return log;
}

/// One row per EvalRecord with per_turn_kl spread over kl_t0..kl_tK; empty cells for missing turns.
inline void write_csv(const MetricsLog& log, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open csv for writing: " + path);
  std::size_t K = 0;
  for (const auto& r : log.records)
    if (auto* e = std::get_if<EvalRecord>(&r)) K = std::max(K, e->per_turn_kl.size());
  f << "step,split,success_rate,avg_rounds,traj_kl_mean,traj_kl_turn_mean,active_k,episodes,mean_prefix,max_prefix";
  for (std::size_t i = 0; i < K; ++i) f << ",kl_t" << i;
  f << '\n';
  char buf[32];
  auto put = [&](double v) {
    if (std::isfinite(v)) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      f << buf;
    }
  };
  for (const auto& r : log.records) {
    auto* e = std::get_if<EvalRecord>(&r);
    if (!e) continue;
    f << e->step << ',' << to_string(e->split) << ',';
    put(e->success_rate);
    f << ',';
    put(e->avg_rounds);
    f << ',';
    put(e->traj_kl_mean);
    f << ',';
    put(e->traj_kl_turn_mean);
    f << ',' << e->active_k << ',' << e->episodes << ',';
    put(e->mean_prefix);
    f << ',' << e->max_prefix;
    for (std::size_t i = 0; i < K; ++i) {
      f << ',';
      if (i < e->per_turn_kl.size()) put(e->per_turn_kl[i]);
    }
    f << '\n';
  }
}

}  // namespace tcod

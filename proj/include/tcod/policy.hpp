#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace tcod {

using Distribution = std::vector<double>;

inline constexpr double kProbFloor = 1e-12;

/// softmax(z / temperature), max-shifted.
inline Distribution softmax(const std::vector<double>& z, double temperature = 1.0) {
  if (!(temperature > 0)) throw UsageError("softmax: temperature must be positive");
  Distribution p(z.size());
  if (z.empty()) return p;
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp((z[i] - m) / temperature);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

/// Raise to 1/temperature and renormalize; used to temper policies that only expose probabilities.
inline Distribution temper(const Distribution& p, double temperature) {
  if (temperature == 1.0) return p;
  std::vector<double> z(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    z[i] = p[i] > 0 ? std::log(p[i]) : -1e300;
  return softmax(z, temperature);
}

inline double entropy(const Distribution& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

/// D_KL(p || q) over the full action set; q is floored at 1e-12 inside the log.
inline double forward_kl(const Distribution& p, const Distribution& q) {
  if (p.size() != q.size()) throw UsageError("forward_kl: dimension mismatch");
  double d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0) continue;
    d += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kProbFloor)));
  }
  return std::max(d, 0.0);
}

/// Gradient of forward_kl(p, softmax(z)) with respect to z, evaluated at q = softmax(z).
inline std::vector<double> kl_logit_gradient(const Distribution& p_teacher, const Distribution& q_student) {
  if (p_teacher.size() != q_student.size()) throw UsageError("kl_logit_gradient: dimension mismatch");
  std::vector<double> g(p_teacher.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = q_student[i] - p_teacher[i];
  return g;
}

/// Gradient of -ln softmax(z)[target] with respect to z.
inline std::vector<double> nll_logit_gradient(const std::vector<double>& logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
    throw UsageError("nll_logit_gradient: target out of range");
  auto g = softmax(logits);
  g[static_cast<std::size_t>(target)] -= 1.0;
  return g;
}

/// Inverse-CDF draw, scanning actions in ascending index order.
inline int sample_action(const Distribution& dist, Rng& rng) {
  const double u = rng.uniform();
  double c = 0;
  int last = -1;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0) continue;
    c += dist[i];
    last = static_cast<int>(i);
    if (u < c) return last;
  }
  if (last < 0) throw UsageError("sample_action: distribution has no mass");
  return last;  // rounding left u >= c
}

// ---------------------------------------------------------------------------
// history keys

/** Flattened history token stream: o_0, a_0, o_1, ..., o_t.
 *  Observation tokens and action indices share the int domain; their position
 *  in the stream tells them apart. */
using History = std::vector<std::int32_t>;

struct HistoryKey {
  std::vector<std::int32_t> seq;
  bool operator==(const HistoryKey&) const = default;
  bool operator<(const HistoryKey& o) const { return seq < o.seq; }
};

struct HistoryKeyHash {
  std::size_t operator()(const HistoryKey& k) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto v : k.seq) {
      h ^= static_cast<std::uint32_t>(v);
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(mix64(h ^ k.seq.size()));
  }
};

/** Key for a history under window W.
 *  W < 0 keeps everything. Otherwise o_0, then the most recent W (action, observation)
 *  pairs; with W = 0 the current observation is appended on its own. */
inline HistoryKey make_key(const History& h, int window) {
  if (h.empty()) throw UsageError("make_key: empty history");
  if (window < 0) return HistoryKey{h};
  HistoryKey k;
  k.seq.push_back(h[0]);
  const std::size_t pairs = (h.size() - 1) / 2;
  if (window == 0) {
    if (pairs > 0) k.seq.push_back(h.back());
    return k;
  }
  const std::size_t take = std::min<std::size_t>(pairs, static_cast<std::size_t>(window));
  k.seq.insert(k.seq.end(), h.end() - static_cast<std::ptrdiff_t>(2 * take), h.end());
  return k;
}

inline std::string key_to_string(const HistoryKey& k) {
  std::string s;
  for (std::size_t i = 0; i < k.seq.size(); ++i) {
    if (i) s += '.';
    s += std::to_string(k.seq[i]);
  }
  return s;
}

inline HistoryKey key_from_string(const std::string& s) {
  HistoryKey k;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, '.')) k.seq.push_back(std::stoi(part));
  return k;
}

// ---------------------------------------------------------------------------
// tabular parameters

struct PolicyParams {
  int num_actions = 0;
  std::unordered_map<HistoryKey, std::vector<double>, HistoryKeyHash> logits;
  std::vector<double> default_logits;
  std::uint64_t version = 0;

  PolicyParams() = default;
  explicit PolicyParams(int actions)
      : num_actions(actions), default_logits(static_cast<std::size_t>(actions), 0.0) {}

  const std::vector<double>& at(const HistoryKey& k) const {
    auto it = logits.find(k);
    return it == logits.end() ? default_logits : it->second;
  }
  std::vector<double>& slot(const HistoryKey& k) {
    auto it = logits.find(k);
    if (it == logits.end()) it = logits.emplace(k, default_logits).first;
    return it->second;
  }
};

inline Distribution action_dist(const PolicyParams& params, const HistoryKey& key, double temperature) {
  return softmax(params.at(key), temperature);
}

/// Adapter giving tabular params the policy interface used by rollouts.
struct TabularPolicy {
  const PolicyParams* params;
  int window = -1;
  template <class State>
  Distribution dist(const HistoryKey& key, const State&, double temperature) const {
    return action_dist(*params, key, temperature);
  }
  int num_actions() const { return params->num_actions; }
};

// ---------------------------------------------------------------------------
// checkpoint files
//
//   tcod-policy 1
//   num_actions <A>
//   version <n>
//   default <A logits>
//   entries <count>
//   <dotted key> <A logits>      (sorted by key)
//
// Logits are written with 17 significant digits so reloading is exact.

inline constexpr int kCheckpointFormat = 1;

namespace detail {
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline std::string checkpoint_text(const PolicyParams& p) {
  std::ostringstream os;
  os << "tcod-policy " << kCheckpointFormat << "\n";
  os << "num_actions " << p.num_actions << "\n";
  os << "version " << p.version << "\n";
  os << "default";
  for (double v : p.default_logits) os << ' ' << detail::fmt17(v);
  os << "\nentries " << p.logits.size() << "\n";
  std::vector<const std::pair<const HistoryKey, std::vector<double>>*> rows;
  rows.reserve(p.logits.size());
  for (const auto& kv : p.logits) rows.push_back(&kv);
  std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->first < b->first; });
  for (auto* kv : rows) {
    os << key_to_string(kv->first);
    for (double v : kv->second) os << ' ' << detail::fmt17(v);
    os << '\n';
  }
  return os.str();
}

inline void save_checkpoint(const PolicyParams& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write checkpoint " + path);
  f << checkpoint_text(p);
  if (!f) throw ConfigError("write failed for checkpoint " + path);
}

inline PolicyParams parse_checkpoint(std::istream& in, const std::string& where) {
  auto fail = [&](const std::string& why) { return ConfigError("checkpoint " + where + ": " + why); };
  std::string tag;
  int fmt = 0;
  if (!(in >> tag >> fmt) || tag != "tcod-policy") throw fail("not a policy checkpoint");
  if (fmt != kCheckpointFormat) throw fail("unsupported format " + std::to_string(fmt));
  PolicyParams p;
  std::size_t n = 0;
  if (!(in >> tag >> p.num_actions) || tag != "num_actions" || p.num_actions < 2) throw fail("bad num_actions");
  if (!(in >> tag >> p.version) || tag != "version") throw fail("bad version");
  if (!(in >> tag) || tag != "default") throw fail("bad default row");
  p.default_logits.resize(static_cast<std::size_t>(p.num_actions));
  for (auto& v : p.default_logits)
    if (!(in >> v)) throw fail("bad default row");
  if (!(in >> tag >> n) || tag != "entries") throw fail("bad entry count");
  for (std::size_t i = 0; i < n; ++i) {
    std::string key;
    if (!(in >> key)) throw fail("truncated");
    std::vector<double> z(static_cast<std::size_t>(p.num_actions));
    for (auto& v : z)
      if (!(in >> v)) throw fail("bad row for key " + key);
    p.logits.emplace(key_from_string(key), std::move(z));
  }
  return p;
}

inline PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read checkpoint " + path);
  return parse_checkpoint(f, path);
}

}  // namespace tcod

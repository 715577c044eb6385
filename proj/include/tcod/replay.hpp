#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "distill.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace tcod {

/// One entry per student turn; the key already encodes the prefix up to that turn.
inline std::vector<ExperienceEntry> decompose(const Trajectory& traj, std::uint64_t traj_id = 0) {
  std::vector<ExperienceEntry> out;
  out.reserve(static_cast<std::size_t>(traj.rounds));
  for (const auto& t : traj.turns) {
    if (t.executed_by != Executor::Student) continue;
    ExperienceEntry e;
    e.history_key = t.history_key;
    e.teacher_dist = t.teacher_dist;
    e.student_dist_at_collection = t.student_dist;
    e.action = t.action;
    e.policy_version = traj.policy_version;
    e.traj_id = traj_id;
    e.turn_index = t.turn_index;
    out.push_back(std::move(e));
  }
  return out;
}

struct SampleResult {
  std::vector<ExperienceEntry> batch;
  std::size_t discarded = 0;  // stale entries removed by this call
};

/** Fixed-capacity FIFO store. Not synchronized: the async runtime serializes
 *  pushes and samples through one mutex. */
class RingBuffer {
 public:
  explicit RingBuffer(std::size_t capacity) : slots_(capacity) {
    if (capacity == 0) throw ConfigError("replay.capacity must be >= 1");
  }

  std::size_t capacity() const { return slots_.size(); }
  std::size_t size() const { return size_; }
  std::uint64_t evicted() const { return evicted_; }

  void push(const ExperienceEntry& e) {
    if (size_ == slots_.size()) {
      slots_[head_] = e;
      head_ = (head_ + 1) % slots_.size();
      ++evicted_;
      return;
    }
    slots_[(head_ + size_) % slots_.size()] = e;
    ++size_;
  }

  void push(const std::vector<ExperienceEntry>& es) {
    for (const auto& e : es) push(e);
  }

  // i-th oldest surviving entry
  const ExperienceEntry& operator[](std::size_t i) const { return slots_[(head_ + i) % slots_.size()]; }

  std::vector<ExperienceEntry> contents() const {
    std::vector<ExperienceEntry> v;
    v.reserve(size_);
    for (std::size_t i = 0; i < size_; ++i) v.push_back((*this)[i]);
    return v;
  }

  /// Drops entries with current - version > delta_max, keeping survivors in order.
  std::size_t discard_stale(std::uint64_t current_version, std::uint64_t delta_max) {
    std::vector<ExperienceEntry> keep;
    keep.reserve(size_);
    for (std::size_t i = 0; i < size_; ++i) {
      const auto& e = (*this)[i];
      if (!is_stale(e, current_version, delta_max)) keep.push_back(e);
    }
    const std::size_t dropped = size_ - keep.size();
    if (dropped == 0) return 0;
    head_ = 0;
    size_ = keep.size();
    for (std::size_t i = 0; i < keep.size(); ++i) slots_[i] = std::move(keep[i]);
    return dropped;
  }

  static bool is_stale(const ExperienceEntry& e, std::uint64_t current_version, std::uint64_t delta_max) {
    return current_version > e.policy_version && current_version - e.policy_version > delta_max;
  }

 private:
  std::vector<ExperienceEntry> slots_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
  std::uint64_t evicted_ = 0;
};

inline void push(RingBuffer& buffer, const std::vector<ExperienceEntry>& entries) { buffer.push(entries); }

/// Removes stale entries, then draws up to batch_size survivors uniformly without replacement.
inline SampleResult sample_batch(RingBuffer& buffer, std::uint64_t current_version, std::uint64_t delta_max,
                                 std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw UsageError("sample_batch: batch_size must be >= 1");
  SampleResult r;
  r.discarded = buffer.discard_stale(current_version, delta_max);
  const std::size_t n = buffer.size();
  const std::size_t m = std::min(n, batch_size);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
    r.batch.push_back(buffer[idx[i]]);
  }
  return r;
}

}  // namespace tcod

#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "smmrec/session_data.hpp"

namespace smmrec {

// Generators for the desk-scale fixtures used by tests and the CLI.
struct SyntheticOptions {
  std::size_t train_sessions = 500;
  std::size_t test_pairs = 100;
  int num_items = 10;
  std::size_t min_length = 2;
  std::size_t max_length = 10;
  // Probability that a transition jumps to a uniformly random item
  // (proximity fixture only).
  double noise = 0.2;
  std::uint64_t seed = 42;
};

// Every session follows item i -> i+1 (mod num_items) from a random start, so
// the next item is a deterministic function of the last one. Items are named
// "item0".."item{n-1}" and map to token indices 2..n+1. Test sessions are
// sized so their prefix augmentation yields exactly `test_pairs` pairs.
SessionDataset make_cycle_dataset(const SyntheticOptions& options);

// Each transition moves a small signed distance along the item ring
// ({-1, +1, +2, +3}, weighted toward +1), and with probability `noise` jumps
// to a uniformly random item instead.
SessionDataset make_proximity_dataset(const SyntheticOptions& options);

// Writes the sessions of `dataset` as a session_id,item_id,timestamp log.
// Test sessions start after every train session, so a chronological split at
// the returned boundary recovers the partition.
std::int64_t write_event_log(std::ostream& out, const SessionDataset& dataset);

}  // namespace smmrec

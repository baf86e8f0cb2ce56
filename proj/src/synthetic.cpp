#include "smmrec/synthetic.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "smmrec/errors.hpp"
#include "smmrec/random.hpp"

namespace smmrec {
namespace {

Vocabulary ring_vocab(int num_items) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(num_items));
  for (int i = 0; i < num_items; ++i) names.push_back(fmt::format("item{}", i));
  return Vocabulary(std::move(names));
}

template <typename Step>
std::vector<int> walk(Rng& rng, std::size_t length, int num_items, Step&& step) {
  std::vector<int> ring;
  ring.reserve(length);
  int current = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(num_items)));
  ring.push_back(current);
  while (ring.size() < length) {
    current = step(rng, current);
    ring.push_back(current);
  }
  for (auto& r : ring) r += kFirstItemIndex;
  return ring;
}

template <typename Step>
SessionDataset make_ring_dataset(const SyntheticOptions& o, const char* prefix, Step&& step) {
  if (o.num_items < 2 || o.min_length < 2 || o.max_length < o.min_length) {
    throw ConfigError("synthetic dataset needs num_items >= 2 and 2 <= min_length <= max_length");
  }
  Rng rng = make_rng({o.seed, 0x51u});
  SessionDataset ds;
  ds.vocab = ring_vocab(o.num_items);
  const std::size_t span = o.max_length - o.min_length + 1;
  std::int64_t clock = 0;
  for (std::size_t s = 0; s < o.train_sessions; ++s) {
    std::size_t len = o.min_length + uniform_index(rng, span);
    ds.train.push_back({fmt::format("{}-tr{}", prefix, s), walk(rng, len, o.num_items, step), clock});
    clock += 1000;
  }
  std::size_t remaining = o.test_pairs;
  for (std::size_t s = 0; remaining > 0; ++s) {
    std::size_t len = o.min_length + uniform_index(rng, span);
    len = std::min(len, remaining + 1);
    remaining -= len - 1;
    ds.test.push_back({fmt::format("{}-te{}", prefix, s), walk(rng, len, o.num_items, step), clock});
    clock += 1000;
  }
  return ds;
}

}  // namespace

SessionDataset make_cycle_dataset(const SyntheticOptions& options) {
  const int n = options.num_items;
  return make_ring_dataset(options, "cyc", [n](Rng&, int current) { return (current + 1) % n; });
}

SessionDataset make_proximity_dataset(const SyntheticOptions& options) {
  const int n = options.num_items;
  const double noise = options.noise;
  return make_ring_dataset(options, "prox", [n, noise](Rng& rng, int current) {
    if (uniform01(rng) < noise) {
      return static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n)));
    }
    static constexpr int kMoves[] = {1, 1, 1, 2, 2, 3, -1};
    int move = kMoves[uniform_index(rng, std::size(kMoves))];
    return ((current + move) % n + n) % n;
  });
}

std::int64_t write_event_log(std::ostream& out, const SessionDataset& dataset) {
  out << "session_id,item_id,timestamp\n";
  std::int64_t clock = 1'600'000'000'000;
  auto emit = [&](const Session& s) {
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      out << s.session_id << ',' << dataset.vocab.item_at(s.items[i]) << ','
          << clock + static_cast<std::int64_t>(i) * 10 << '\n';
    }
    clock += 60'000;
  };
  for (const auto& s : dataset.train) emit(s);
  const std::int64_t boundary = clock;
  for (const auto& s : dataset.test) emit(s);
  return boundary;
}

}  // namespace smmrec

#include "smmrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "smmrec/errors.hpp"

namespace smmrec {

nlohmann::ordered_json to_json(const EvalReport& report, bool with_ranks) {
  nlohmann::ordered_json j;
  j["k"] = report.k;
  j["hit_rate"] = report.hit_rate;
  j["mrr"] = report.mrr;
  j["n_instances"] = report.n_instances;
  if (with_ranks) {
    j["ranks"] = nlohmann::ordered_json::array();
    for (const auto& r : report.ranks) {
      nlohmann::ordered_json row;
      row["origin"] = {r.session_id, r.step};
      row["rank"] = r.rank ? nlohmann::ordered_json(*r.rank) : nlohmann::ordered_json(nullptr);
      j["ranks"].push_back(row);
    }
  }
  return j;
}

template <typename T>
std::optional<std::size_t> rank_target(std::span<const T> scores, int target) {
  if (Vocabulary::is_special(target)) {
    throw UsageError(fmt::format("special token {} cannot be a ranking target", target));
  }
  const auto t = static_cast<std::size_t>(target);
  if (t >= scores.size()) return std::nullopt;
  const T st = scores[t];
  std::size_t rank = 1;
  for (std::size_t j = kFirstItemIndex; j < scores.size(); ++j) {
    if (scores[j] > st || (scores[j] == st && j < t)) ++rank;
  }
  return rank;
}

template std::optional<std::size_t> rank_target(std::span<const float>, int);
template std::optional<std::size_t> rank_target(std::span<const double>, int);

EvalReport summarize_ranks(std::vector<InstanceRank> ranks, std::size_t k, bool keep_ranks) {
  if (ranks.empty()) throw InputError("evaluation over an empty test set");
  if (k == 0) throw ConfigError("cutoff k must be >= 1");
  EvalReport report;
  report.k = k;
  report.n_instances = ranks.size();
  std::size_t hits = 0;
  double reciprocal = 0.0;
  for (const auto& r : ranks) {
    if (r.rank && *r.rank <= k) {
      ++hits;
      reciprocal += 1.0 / static_cast<double>(*r.rank);
    }
  }
  report.hit_rate = static_cast<double>(hits) / static_cast<double>(ranks.size());
  report.mrr = reciprocal / static_cast<double>(ranks.size());
  if (keep_ranks) report.ranks = std::move(ranks);
  return report;
}

EvalReport evaluate(const Model<float>& model, std::span<const PrefixPair> test_pairs,
                    const MaskingStrategy& strategy, const EvalOptions& options) {
  if (test_pairs.empty()) throw InputError("evaluation over an empty test set");
  if (strategy.max_len > model.config().max_len) {
    throw ConfigError(fmt::format("strategy max_len {} exceeds model max_len {}",
                                  strategy.max_len, model.config().max_len));
  }
  if ((strategy.kind == Objective::kClm) != model.config().causal) {
    throw ConfigError(fmt::format("strategy {} does not match a {} model", to_string(strategy.kind),
                                  model.config().causal ? "causal" : "bidirectional"));
  }
  const std::size_t n = test_pairs.size();
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  const std::size_t readout = eval_readout_position(strategy);
  const std::size_t vsz = model.config().vocab_size;
  std::vector<InstanceRank> ranks(n);

  auto score_batch = [&](std::size_t begin) {
    const std::size_t end = std::min(n, begin + bs);
    std::vector<TrainingExample> examples;
    examples.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      examples.push_back(eval_example(test_pairs[i], strategy));
    }
    auto batch = make_batch(examples);
    std::vector<std::size_t> slots;
    for (std::size_t r = 0; r < examples.size(); ++r) slots.push_back(r * batch.length + readout);
    ad::Tape<float> tape(false);
    auto logits = model.forward_at(tape, batch, slots);
    auto values = logits.values();
    for (std::size_t r = 0; r < examples.size(); ++r) {
      const auto& pair = test_pairs[begin + r];
      ranks[begin + r] = {pair.session_id, pair.step,
                          rank_target<float>(values.subspan(r * vsz, vsz), pair.target)};
    }
  };

  std::vector<std::size_t> starts;
  for (std::size_t b = 0; b < n; b += bs) starts.push_back(b);
  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, starts.size());
  if (workers == 1) {
    for (auto b : starts) score_batch(b);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> failures(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < starts.size(); i += workers) score_batch(starts[i]);
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }
  return summarize_ranks(std::move(ranks), options.k, options.keep_ranks);
}

EvalReport pop_baseline(const std::vector<Session>& train, std::span<const PrefixPair> test_pairs,
                        std::size_t vocab_size, std::size_t k) {
  std::vector<double> counts(vocab_size, 0.0);
  for (const auto& s : train) {
    for (int item : s.items) {
      if (static_cast<std::size_t>(item) < vocab_size) counts[static_cast<std::size_t>(item)] += 1;
    }
  }
  std::vector<InstanceRank> ranks;
  ranks.reserve(test_pairs.size());
  for (const auto& pair : test_pairs) {
    ranks.push_back({pair.session_id, pair.step,
                     rank_target(std::span<const double>(counts), pair.target)});
  }
  return summarize_ranks(std::move(ranks), k, false);
}

EvalReport item_knn_baseline(const std::vector<Session>& train,
                             std::span<const PrefixPair> test_pairs, std::size_t vocab_size,
                             std::size_t k, bool session_sum) {
  std::vector<double> support(vocab_size, 0.0);
  std::vector<std::unordered_map<int, double>> overlap(vocab_size);
  for (const auto& s : train) {
    std::vector<int> unique(s.items.begin(), s.items.end());
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    std::erase_if(unique, [&](int i) { return static_cast<std::size_t>(i) >= vocab_size; });
    for (int a : unique) {
      support[static_cast<std::size_t>(a)] += 1;
      for (int b : unique) {
        if (a != b) overlap[static_cast<std::size_t>(a)][b] += 1;
      }
    }
  }
  auto accumulate_similarity = [&](int query, std::vector<double>& scores) {
    if (query < 0 || static_cast<std::size_t>(query) >= vocab_size) return;
    const double sq = support[static_cast<std::size_t>(query)];
    if (sq == 0) return;
    for (const auto& [other, shared] : overlap[static_cast<std::size_t>(query)]) {
      scores[static_cast<std::size_t>(other)] +=
          shared / std::sqrt(sq * support[static_cast<std::size_t>(other)]);
    }
  };
  std::vector<InstanceRank> ranks;
  ranks.reserve(test_pairs.size());
  std::vector<double> scores(vocab_size);
  for (const auto& pair : test_pairs) {
    if (pair.prefix.empty()) throw InputError("test pair with an empty prefix");
    std::fill(scores.begin(), scores.end(), 0.0);
    if (session_sum) {
      for (int item : pair.prefix) accumulate_similarity(item, scores);
    } else {
      accumulate_similarity(pair.prefix.back(), scores);
    }
    ranks.push_back(
        {pair.session_id, pair.step, rank_target(std::span<const double>(scores), pair.target)});
  }
  return summarize_ranks(std::move(ranks), k, false);
}

}  // namespace smmrec

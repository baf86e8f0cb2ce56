#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smmrec/masking.hpp"
#include "smmrec/model.hpp"
#include "smmrec/session_data.hpp"

namespace smmrec {

struct InstanceRank {
  std::string session_id;
  int step = 0;
  std::optional<std::size_t> rank;
};

struct EvalReport {
  std::size_t k = 20;
  double hit_rate = 0.0;
  double mrr = 0.0;
  std::size_t n_instances = 0;
  std::vector<InstanceRank> ranks;  // filled only when requested
};

nlohmann::ordered_json to_json(const EvalReport& report, bool with_ranks = false);

// 1-based rank of `target` among the non-special slots of `scores`, ordered
// by descending score with ties going to the lower index. Empty when the
// target lies beyond the score vector.
template <typename T>
std::optional<std::size_t> rank_target(std::span<const T> scores, int target);

// Aggregates ranks into hit rate and MRR, both cut off at k.
EvalReport summarize_ranks(std::vector<InstanceRank> ranks, std::size_t k, bool keep_ranks);

struct EvalOptions {
  std::size_t k = 20;
  std::size_t batch_size = 256;
  std::size_t workers = 1;
  bool keep_ranks = false;
};

EvalReport evaluate(const Model<float>& model, std::span<const PrefixPair> test_pairs,
                    const MaskingStrategy& strategy, const EvalOptions& options = {});

// One global ranking by train frequency.
EvalReport pop_baseline(const std::vector<Session>& train, std::span<const PrefixPair> test_pairs,
                        std::size_t vocab_size, std::size_t k = 20);

// Cosine similarity over binary item-session incidence vectors. Scores are
// similarities to the last prefix item, or summed over every prefix item
// when `session_sum` is set. Self-similarity counts as 0.
EvalReport item_knn_baseline(const std::vector<Session>& train,
                             std::span<const PrefixPair> test_pairs, std::size_t vocab_size,
                             std::size_t k = 20, bool session_sum = false);

}  // namespace smmrec

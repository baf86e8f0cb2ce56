#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smmrec/session_data.hpp"

namespace smmrec {

// Target value for positions that carry no supervision.
inline constexpr int kIgnoreTarget = kPadIndex;

enum class Objective { kSmm, kMlm, kClm };

std::string to_string(Objective objective);
Objective objective_from_string(const std::string& name);

struct MaskingStrategy {
  Objective kind = Objective::kSmm;
  int k = 2;                 // SMM: mask the K-th token from the window end
  double mlm_ratio = 0.15;   // MLM: per-position selection probability
  std::size_t max_len = 30;

  // Throws ConfigError when K < 1, ratio outside (0, 1) or max_len < 2.
  void validate() const;
};

struct TrainingExample {
  // Left-padded with kPadIndex to exactly max_len tokens.
  std::vector<int> input_ids;
  // Per-position targets, kIgnoreTarget where unsupervised.
  std::vector<int> targets;
  // Set when exactly one position is masked.
  std::optional<std::size_t> mask_position;
  std::string session_id;
  int step = 0;
  // Exclusive session index of the last token inside the window; used to map
  // window positions back onto session tokens.
  std::size_t window_end = 0;

  std::vector<bool> attention_flags() const;
  std::size_t supervised_count() const;
};

// Window of `items` ending at `end` (exclusive), at most max_len long,
// left-padded to max_len.
std::vector<int> left_padded_window(std::span<const int> items, std::size_t end,
                                    std::size_t max_len);

// Base example (last token masked) followed by one example per prefix
// [v1..vk], k = n..2, whose window has the K-th-from-last token masked
// (the first token when the window is shorter than K).
std::vector<TrainingExample> smm_examples(std::span<const int> session, std::size_t max_len,
                                          int k, const std::string& session_id = {});

// One example over the last max_len items. Each position is masked with
// probability `ratio`; one uniform position is forced if none was drawn. The
// pattern is a pure function of (seed, epoch, ordinal).
TrainingExample mlm_example(std::span<const int> session, std::size_t max_len, double ratio,
                            std::uint64_t seed, std::uint64_t epoch, std::uint64_t ordinal,
                            const std::string& session_id = {});

// MLM over overlapping fixed windows of a long session (stride < max_len),
// the setup that biases coverage toward interior tokens.
std::vector<TrainingExample> mlm_window_examples(std::span<const int> session,
                                                 std::size_t max_len, std::size_t stride,
                                                 double ratio, std::uint64_t seed,
                                                 const std::string& session_id = {});

// Next-token targets over the last max_len items.
TrainingExample clm_example(std::span<const int> session, std::size_t max_len,
                            const std::string& session_id = {});

// Inference-side example for a prefix pair. SMM/MLM append MASK after the
// last max_len-1 prefix items; CLM reads the prediction at the final slot.
TrainingExample eval_example(const PrefixPair& pair, const MaskingStrategy& strategy);

// Position of the prediction read-out in an eval example.
std::size_t eval_readout_position(const MaskingStrategy& strategy);

// Examples of one training epoch. SMM: Σ n_i examples; MLM and CLM: one per
// session.
std::vector<TrainingExample> epoch_examples(const std::vector<Session>& sessions,
                                            const MaskingStrategy& strategy, std::uint64_t seed,
                                            std::uint64_t epoch);

struct MaskHistogram {
  // Times masked, keyed by distance from the session end (0 = last token).
  std::map<std::size_t, std::size_t> by_offset_from_end;
  // Times masked per session token, keyed by session id.
  std::map<std::string, std::vector<std::size_t>> per_token;
  // Minimum per-token count of each session.
  std::map<std::string, std::size_t> min_coverage;
  std::size_t total_masked = 0;
};

MaskHistogram masking_coverage_histogram(const std::vector<TrainingExample>& examples,
                                         const std::vector<Session>& sessions);

}  // namespace smmrec

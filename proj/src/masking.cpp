#include "smmrec/masking.hpp"

#include <algorithm>
#include <cctype>
#include <iterator>

#include <fmt/format.h>

#include "smmrec/errors.hpp"
#include "smmrec/random.hpp"

namespace smmrec {

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::kSmm: return "smm";
    case Objective::kMlm: return "mlm";
    case Objective::kClm: return "clm";
  }
  return "unknown";
}

Objective objective_from_string(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "smm") return Objective::kSmm;
  if (lower == "mlm") return Objective::kMlm;
  if (lower == "clm") return Objective::kClm;
  throw ConfigError(fmt::format("unknown strategy '{}' (expected smm, mlm or clm)", name));
}

void MaskingStrategy::validate() const {
  if (k < 1) throw ConfigError(fmt::format("mask K must be >= 1, got {}", k));
  if (!(mlm_ratio > 0.0 && mlm_ratio < 1.0)) {
    throw ConfigError(fmt::format("mlm ratio must lie in (0, 1), got {}", mlm_ratio));
  }
  if (max_len < 2) throw ConfigError(fmt::format("max_len must be >= 2, got {}", max_len));
}

std::vector<bool> TrainingExample::attention_flags() const {
  std::vector<bool> flags(input_ids.size());
  for (std::size_t i = 0; i < input_ids.size(); ++i) flags[i] = input_ids[i] != kPadIndex;
  return flags;
}

std::size_t TrainingExample::supervised_count() const {
  return static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [](int t) { return t != kIgnoreTarget; }));
}

std::vector<int> left_padded_window(std::span<const int> items, std::size_t end,
                                    std::size_t max_len) {
  std::vector<int> window(max_len, kPadIndex);
  std::size_t take = std::min(end, max_len);
  std::copy(items.begin() + static_cast<std::ptrdiff_t>(end - take),
            items.begin() + static_cast<std::ptrdiff_t>(end),
            window.begin() + static_cast<std::ptrdiff_t>(max_len - take));
  return window;
}

namespace {

TrainingExample single_mask(std::span<const int> items, std::size_t end, std::size_t max_len,
                            std::size_t offset_from_end, const std::string& sid, int step) {
  TrainingExample ex;
  ex.input_ids = left_padded_window(items, end, max_len);
  ex.targets.assign(max_len, kIgnoreTarget);
  std::size_t pos = max_len - 1 - offset_from_end;
  ex.targets[pos] = ex.input_ids[pos];
  ex.input_ids[pos] = kMaskIndex;
  ex.mask_position = pos;
  ex.session_id = sid;
  ex.step = step;
  ex.window_end = end;
  return ex;
}

void require_session(std::span<const int> session, const char* what) {
  if (session.size() < 2) {
    throw InputError(fmt::format("{} needs a session of length >= 2, got {}", what,
                                 session.size()));
  }
  for (int item : session) {
    if (item < kFirstItemIndex) {
      throw InputError(fmt::format("{}: session holds special token {}", what, item));
    }
  }
}

}  // namespace

std::vector<TrainingExample> smm_examples(std::span<const int> session, std::size_t max_len,
                                          int k, const std::string& session_id) {
  require_session(session, "smm_examples");
  if (k < 1) throw ConfigError(fmt::format("mask K must be >= 1, got {}", k));
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  const std::size_t n = session.size();
  std::vector<TrainingExample> out;
  out.reserve(n);
  out.push_back(single_mask(session, n, max_len, 0, session_id, 0));
  int step = 1;
  for (std::size_t end = n; end >= 2; --end, ++step) {
    std::size_t window = std::min(end, max_len);
    std::size_t offset = static_cast<std::size_t>(k) <= window ? static_cast<std::size_t>(k) - 1
                                                               : window - 1;
    out.push_back(single_mask(session, end, max_len, offset, session_id, step));
  }
  return out;
}

TrainingExample mlm_example(std::span<const int> session, std::size_t max_len, double ratio,
                            std::uint64_t seed, std::uint64_t epoch, std::uint64_t ordinal,
                            const std::string& session_id) {
  require_session(session, "mlm_example");
  const std::size_t n = session.size();
  TrainingExample ex;
  ex.input_ids = left_padded_window(session, n, max_len);
  ex.targets.assign(max_len, kIgnoreTarget);
  ex.session_id = session_id;
  ex.window_end = n;

  Rng rng = make_rng({seed, epoch, ordinal, 0x4D4Cu});
  const std::size_t first = max_len - std::min(n, max_len);
  std::vector<std::size_t> selected;
  for (std::size_t p = first; p < max_len; ++p) {
    if (uniform01(rng) < ratio) selected.push_back(p);
  }
  if (selected.empty()) selected.push_back(first + uniform_index(rng, max_len - first));
  for (auto p : selected) {
    ex.targets[p] = ex.input_ids[p];
    ex.input_ids[p] = kMaskIndex;
  }
  if (selected.size() == 1) ex.mask_position = selected.front();
  return ex;
}

std::vector<TrainingExample> mlm_window_examples(std::span<const int> session,
                                                 std::size_t max_len, std::size_t stride,
                                                 double ratio, std::uint64_t seed,
                                                 const std::string& session_id) {
  if (stride == 0) throw ConfigError("window stride must be >= 1");
  require_session(session, "mlm_window_examples");
  const std::size_t n = session.size();
  std::vector<std::size_t> ends;
  for (std::size_t start = 0;; start += stride) {
    std::size_t end = std::min(start + max_len, n);
    ends.push_back(end);
    if (end == n) break;
  }
  std::vector<TrainingExample> out;
  for (std::size_t w = 0; w < ends.size(); ++w) {
    auto window = session.first(ends[w]);
    auto ex = mlm_example(window.last(std::min(max_len, window.size())), max_len, ratio, seed, 0,
                          w, session_id);
    ex.step = static_cast<int>(w);
    ex.window_end = ends[w];
    out.push_back(std::move(ex));
  }
  return out;
}

TrainingExample clm_example(std::span<const int> session, std::size_t max_len,
                            const std::string& session_id) {
  require_session(session, "clm_example");
  const std::size_t n = session.size();
  TrainingExample ex;
  ex.input_ids = left_padded_window(session, n, max_len);
  ex.targets.assign(max_len, kIgnoreTarget);
  for (std::size_t p = 0; p + 1 < max_len; ++p) {
    if (ex.input_ids[p] != kPadIndex) ex.targets[p] = ex.input_ids[p + 1];
  }
  ex.session_id = session_id;
  ex.window_end = n;
  return ex;
}

std::size_t eval_readout_position(const MaskingStrategy& strategy) {
  return strategy.max_len - 1;
}

TrainingExample eval_example(const PrefixPair& pair, const MaskingStrategy& strategy) {
  if (pair.prefix.empty()) throw InputError("eval_example needs a non-empty prefix");
  const std::size_t max_len = strategy.max_len;
  TrainingExample ex;
  ex.targets.assign(max_len, kIgnoreTarget);
  ex.session_id = pair.session_id;
  ex.step = pair.step;
  ex.window_end = pair.prefix.size();
  if (strategy.kind == Objective::kClm) {
    ex.input_ids = left_padded_window(pair.prefix, pair.prefix.size(), max_len);
  } else {
    auto body = left_padded_window(pair.prefix, pair.prefix.size(), max_len - 1);
    ex.input_ids = std::move(body);
    ex.input_ids.push_back(kMaskIndex);
    ex.mask_position = max_len - 1;
  }
  ex.targets[max_len - 1] = pair.target;
  return ex;
}

std::vector<TrainingExample> epoch_examples(const std::vector<Session>& sessions,
                                            const MaskingStrategy& strategy, std::uint64_t seed,
                                            std::uint64_t epoch) {
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    const auto& s = sessions[i];
    switch (strategy.kind) {
      case Objective::kSmm: {
        auto batch = smm_examples(s.items, strategy.max_len, strategy.k, s.session_id);
        std::move(batch.begin(), batch.end(), std::back_inserter(out));
        break;
      }
      case Objective::kMlm:
        out.push_back(
            mlm_example(s.items, strategy.max_len, strategy.mlm_ratio, seed, epoch, i, s.session_id));
        break;
      case Objective::kClm:
        out.push_back(clm_example(s.items, strategy.max_len, s.session_id));
        break;
    }
  }
  return out;
}

MaskHistogram masking_coverage_histogram(const std::vector<TrainingExample>& examples,
                                         const std::vector<Session>& sessions) {
  MaskHistogram hist;
  std::map<std::string, std::size_t> lengths;
  for (const auto& s : sessions) {
    lengths[s.session_id] = s.items.size();
    hist.per_token[s.session_id].assign(s.items.size(), 0);
  }
  for (const auto& ex : examples) {
    auto it = hist.per_token.find(ex.session_id);
    if (it == hist.per_token.end()) {
      throw InputError(fmt::format("example references unknown session '{}'", ex.session_id));
    }
    const std::size_t n = lengths[ex.session_id];
    const std::size_t max_len = ex.input_ids.size();
    for (std::size_t p = 0; p < max_len; ++p) {
      if (ex.input_ids[p] != kMaskIndex) continue;
      // position p holds session token window_end - max_len + p
      if (ex.window_end + p < max_len) {
        throw InputError("masked position falls outside the session");
      }
      std::size_t index = ex.window_end + p - max_len;
      ++it->second.at(index);
      ++hist.by_offset_from_end[n - 1 - index];
      ++hist.total_masked;
    }
  }
  for (const auto& [sid, counts] : hist.per_token) {
    hist.min_coverage[sid] = counts.empty() ? 0 : *std::min_element(counts.begin(), counts.end());
  }
  return hist;
}

}  // namespace smmrec

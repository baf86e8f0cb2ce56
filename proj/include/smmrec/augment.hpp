#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include <json.hpp>

#include "smmrec/masking.hpp"
#include "smmrec/session_data.hpp"

namespace smmrec {

inline constexpr const char* kMaskLabel = "[MASK]";

// {"input", "mask_pos", "target", "origin": [session, step]} with PAD slots
// dropped and positions counted in the unpadded window. Single-mask examples
// carry scalar mask_pos/target; otherwise both are aligned arrays.
nlohmann::ordered_json example_record(const TrainingExample& example,
                                      const std::function<nlohmann::ordered_json(int)>& label);

// Examples of one session given as raw item values, labelled by those values.
std::string augment_jsonl(std::span<const std::int64_t> raw_session,
                          const MaskingStrategy& strategy, std::uint64_t seed,
                          const std::string& session_id = "session");

// Examples of every train session, labelled by raw item ids.
std::string augment_jsonl(const SessionDataset& dataset, const MaskingStrategy& strategy,
                          std::uint64_t seed);

}  // namespace smmrec

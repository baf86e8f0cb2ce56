#include "smmrec/augment.hpp"

#include <map>

#include "smmrec/errors.hpp"

namespace smmrec {

nlohmann::ordered_json example_record(const TrainingExample& example,
                                      const std::function<nlohmann::ordered_json(int)>& label) {
  nlohmann::ordered_json input = nlohmann::ordered_json::array();
  nlohmann::ordered_json positions = nlohmann::ordered_json::array();
  nlohmann::ordered_json targets = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  while (offset < example.input_ids.size() && example.input_ids[offset] == kPadIndex) ++offset;
  for (std::size_t p = offset; p < example.input_ids.size(); ++p) {
    const int id = example.input_ids[p];
    input.push_back(id == kMaskIndex ? nlohmann::ordered_json(kMaskLabel) : label(id));
    if (example.targets[p] != kIgnoreTarget) {
      positions.push_back(p - offset);
      targets.push_back(label(example.targets[p]));
    }
  }
  nlohmann::ordered_json record;
  record["input"] = std::move(input);
  if (example.mask_position && positions.size() == 1) {
    record["mask_pos"] = positions[0];
    record["target"] = targets[0];
  } else {
    record["mask_pos"] = std::move(positions);
    record["target"] = std::move(targets);
  }
  record["origin"] = {example.session_id, example.step};
  return record;
}

std::string augment_jsonl(std::span<const std::int64_t> raw_session,
                          const MaskingStrategy& strategy, std::uint64_t seed,
                          const std::string& session_id) {
  strategy.validate();
  std::map<std::int64_t, int> to_index;
  std::vector<std::int64_t> values;
  Session session{session_id, {}, 0};
  for (auto v : raw_session) {
    auto [it, inserted] = to_index.emplace(v, kFirstItemIndex + static_cast<int>(values.size()));
    if (inserted) values.push_back(v);
    session.items.push_back(it->second);
  }
  auto label = [&](int id) {
    return nlohmann::ordered_json(values.at(static_cast<std::size_t>(id - kFirstItemIndex)));
  };
  std::string out;
  for (const auto& ex : epoch_examples({session}, strategy, seed, 0)) {
    out += example_record(ex, label).dump();
    out += '\n';
  }
  return out;
}

std::string augment_jsonl(const SessionDataset& dataset, const MaskingStrategy& strategy,
                          std::uint64_t seed) {
  strategy.validate();
  auto label = [&](int id) { return nlohmann::ordered_json(dataset.vocab.item_at(id)); };
  std::string out;
  for (const auto& ex : epoch_examples(dataset.train, strategy, seed, 0)) {
    out += example_record(ex, label).dump();
    out += '\n';
  }
  return out;
}

}  // namespace smmrec

#pragma once

#include <filesystem>
#include <iosfwd>

#include <json.hpp>

#include "smmrec/model.hpp"

namespace smmrec {

// Layout: "SMM1", u64 little-endian header length, JSON header
// {"config", "parameters": [{"name", "shape"}...], "meta"}, then each
// parameter as little-endian float32 in manifest order.
void write_checkpoint(std::ostream& out, const Model<float>& model,
                      const nlohmann::ordered_json& meta = nlohmann::ordered_json::object());
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const nlohmann::ordered_json& meta = nlohmann::ordered_json::object());

struct LoadedCheckpoint {
  Model<float> model;
  nlohmann::json meta;
};

// Throws FormatError on a bad magic, truncated payload or manifest mismatch.
LoadedCheckpoint read_checkpoint(std::istream& in);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace smmrec

#include "smmrec/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "smmrec/errors.hpp"

namespace smmrec {

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'M', 'M', '1'};
constexpr std::uint64_t kMaxHeader = 1ull << 30;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  std::memcpy(bytes, &v, 8);
  out.write(bytes, 8);
}

std::uint64_t read_u64(std::istream& in) {
  char bytes[8];
  if (!in.read(bytes, 8)) throw FormatError("checkpoint truncated in header length");
  std::uint64_t v;
  std::memcpy(&v, bytes, 8);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Model<float>& model,
                      const nlohmann::ordered_json& meta) {
  nlohmann::ordered_json header;
  header["config"] = to_json(model.config());
  header["parameters"] = nlohmann::ordered_json::array();
  for (const auto& p : model.parameters()) {
    header["parameters"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  }
  header["meta"] = meta;
  const std::string text = header.dump();
  out.write(kMagic.data(), kMagic.size());
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    auto v = p.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!out) throw Error("failed writing checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const nlohmann::ordered_json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot open '{}' for writing", path.string()));
  write_checkpoint(out, model, meta);
}

LoadedCheckpoint read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("not a checkpoint (bad magic bytes)");
  }
  const std::uint64_t length = read_u64(in);
  if (length > kMaxHeader) throw FormatError("checkpoint header length is implausible");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
    throw FormatError("checkpoint truncated in header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("checkpoint header is not JSON: {}", e.what()));
  }
  if (!header.contains("config") || !header.contains("parameters")) {
    throw FormatError("checkpoint header lacks config or parameter manifest");
  }
  ModelConfig config;
  try {
    update_from_json(config, header.at("config"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  LoadedCheckpoint loaded{Model<float>(config), header.value("meta", nlohmann::json::object())};
  const auto& manifest = header.at("parameters");
  const auto params = loaded.model.parameters();
  if (manifest.size() != params.size()) {
    throw FormatError(fmt::format("manifest lists {} parameters, model has {}", manifest.size(),
                                  params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.value("name", "") != params[i].name ||
        entry.value("shape", ad::Shape{}) != params[i].tensor.shape()) {
      throw FormatError(fmt::format("manifest entry {} does not match parameter '{}'", i,
                                    params[i].name));
    }
    auto tensor = params[i].tensor;
    auto v = tensor.values();
    if (!in.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(float)))) {
      throw FormatError(fmt::format("checkpoint truncated in '{}'", params[i].name));
    }
  }
  return loaded;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot open checkpoint '{}'", path.string()));
  return read_checkpoint(in);
}

}  // namespace smmrec

#include "smmrec/model.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string_view>

#include <fmt/format.h>

#include "smmrec/errors.hpp"
#include "smmrec/random.hpp"

namespace smmrec {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

void ModelConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kFirstItemIndex)) {
    throw ConfigError(fmt::format("vocab_size must exceed the {} special tokens, got {}",
                                  kFirstItemIndex, vocab_size));
  }
  if (hidden == 0 || heads == 0) throw ConfigError("hidden and heads must be positive");
  if (hidden % heads != 0) {
    throw ConfigError(fmt::format("hidden size {} is not divisible by {} heads", hidden, heads));
  }
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
  if (max_len == 0) throw ConfigError("max_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError(fmt::format("dropout must lie in [0, 1), got {}", dropout));
  }
  if (cope && effective_p_max() < 1) throw ConfigError("cope_p_max must be >= 1");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  if (!(norm_eps >= 0.0)) throw ConfigError("norm_eps must be >= 0");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden"] = c.hidden;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["ffn_mult"] = c.ffn_mult;
  j["max_len"] = c.max_len;
  j["dropout"] = c.dropout;
  j["causal"] = c.causal;
  j["weight_tying"] = c.weight_tying;
  j["pre_ln_rmsnorm"] = c.pre_ln_rmsnorm;
  j["cope"] = c.cope;
  j["cope_p_max"] = c.cope_p_max;
  j["seed"] = c.seed;
  j["init_std"] = c.init_std;
  j["norm_eps"] = c.norm_eps;
  return j;
}

void update_from_json(ModelConfig& c, const nlohmann::json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    take("vocab_size", c.vocab_size);
    take("hidden", c.hidden);
    take("layers", c.layers);
    take("heads", c.heads);
    take("ffn_mult", c.ffn_mult);
    take("max_len", c.max_len);
    take("dropout", c.dropout);
    take("causal", c.causal);
    take("weight_tying", c.weight_tying);
    take("pre_ln_rmsnorm", c.pre_ln_rmsnorm);
    take("cope", c.cope);
    take("cope_p_max", c.cope_p_max);
    take("seed", c.seed);
    take("init_std", c.init_std);
    take("norm_eps", c.norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("model config: {}", e.what()));
  }
}

TokenBatch make_batch(std::span<const TrainingExample> examples) {
  TokenBatch batch;
  if (examples.empty()) throw InputError("empty batch");
  batch.rows = examples.size();
  batch.length = examples.front().input_ids.size();
  batch.ids.reserve(batch.rows * batch.length);
  for (const auto& ex : examples) {
    if (ex.input_ids.size() != batch.length) {
      throw InputError(fmt::format("batch rows differ in length ({} vs {})", ex.input_ids.size(),
                                   batch.length));
    }
    batch.ids.insert(batch.ids.end(), ex.input_ids.begin(), ex.input_ids.end());
  }
  return batch;
}

template <typename T>
Tensor<T> Model<T>::add_param(const std::string& name, Shape shape, double init) {
  if (index_.contains(name)) throw ConfigError(fmt::format("duplicate parameter '{}'", name));
  const std::size_t n = ad::numel(shape);
  std::vector<T> values(n);
  if (std::isnan(init)) {
    Rng rng = make_rng({config_.seed, static_cast<std::uint64_t>(params_.size()), 0x1417u});
    for (auto& v : values) {
      double z = standard_normal(rng);
      while (std::abs(z) > 2.0) z = standard_normal(rng);
      v = static_cast<T>(z * config_.init_std);
    }
  } else {
    std::fill(values.begin(), values.end(), static_cast<T>(init));
  }
  Tensor<T> t(std::move(shape), std::move(values), true);
  index_[name] = params_.size();
  params_.push_back({name, t});
  return t;
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const double kRandom = std::numeric_limits<double>::quiet_NaN();
  const std::size_t h = config_.hidden, v = config_.vocab_size, f = config_.ffn_dim();
  const bool pre = config_.pre_ln_rmsnorm;

  add_param("embed.tokens", {v, h}, kRandom);
  if (!config_.cope) add_param("embed.positions", {config_.max_len, h}, kRandom);
  auto add_norm = [&](const std::string& prefix) {
    add_param(prefix + ".gain", {h}, 1.0);
    if (!pre) add_param(prefix + ".bias", {h}, 0.0);
  };
  if (!pre) add_norm("embed.norm");
  for (std::size_t b = 0; b < config_.layers; ++b) {
    const std::string blk = fmt::format("block{}", b);
    for (const char* proj : {"q_proj", "k_proj", "v_proj", "o_proj"}) {
      add_param(fmt::format("{}.attn.{}.weight", blk, proj), {h, h}, kRandom);
      // a key bias only shifts each score row by a constant
      if (std::string_view(proj) != "k_proj") {
        add_param(fmt::format("{}.attn.{}.bias", blk, proj), {h}, 0.0);
      }
    }
    if (config_.cope) {
      add_param(blk + ".attn.cope_table", {config_.effective_p_max() + 1, config_.head_dim()},
                kRandom);
    }
    add_norm(blk + ".attn_norm");
    add_param(blk + ".ffn.up.weight", {h, f}, kRandom);
    add_param(blk + ".ffn.up.bias", {f}, 0.0);
    add_param(blk + ".ffn.down.weight", {f, h}, kRandom);
    add_param(blk + ".ffn.down.bias", {h}, 0.0);
    add_norm(blk + ".ffn_norm");
  }
  if (pre) add_param("final_norm.gain", {h}, 1.0);
  if (!config_.weight_tying) add_param("output.weight", {h, v}, kRandom);
}

template <typename T>
const Tensor<T>& Model<T>::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError(fmt::format("no parameter named '{}'", name));
  return params_[it->second].tensor;
}

template <typename T>
bool Model<T>::has_parameter(const std::string& name) const {
  return index_.contains(name);
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> Model<T>::norm(Tape<T>& tape, const std::string& prefix, const Tensor<T>& x) const {
  const T eps = static_cast<T>(config_.norm_eps);
  if (config_.pre_ln_rmsnorm) return tape.rms_norm(x, parameter(prefix + ".gain"), eps);
  return tape.layer_norm(x, parameter(prefix + ".gain"), parameter(prefix + ".bias"), eps);
}

template <typename T>
Tensor<T> Model<T>::attention(Tape<T>& tape, std::size_t layer, const Tensor<T>& x,
                              const ad::Mask& mask, std::size_t rows, std::size_t len,
                              const ForwardOptions<T>& options) const {
  const std::size_t nh = config_.heads, hd = config_.head_dim(), h = config_.hidden;
  const std::string blk = fmt::format("block{}.attn.", layer);
  auto project_heads = [&](const char* name) {
    auto y = tape.matmul(x, parameter(blk + name + ".weight"));
    if (has_parameter(blk + name + ".bias")) y = tape.add(y, parameter(blk + name + ".bias"));
    return tape.permute(tape.reshape(y, {rows, len, nh, hd}), {0, 2, 1, 3});
  };
  auto q = project_heads("q_proj");
  auto k = project_heads("k_proj");
  auto v = project_heads("v_proj");

  auto scores = tape.scale(tape.matmul(q, tape.transpose(k)),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  if (config_.cope) {
    ad::CopeState<T> state;
    auto positional =
        tape.cope_position_logits(q, scores, mask, parameter(blk + "cope_table"),
                                  config_.effective_p_max(), options.trace ? &state : nullptr);
    if (options.trace) options.trace->cope.push_back(std::move(state));
    scores = tape.add(scores, positional);
  }
  auto probs = tape.softmax(tape.masked_fill(scores, mask, -std::numeric_limits<T>::infinity()));
  if (options.trace) {
    options.trace->attention.emplace_back(probs.values().begin(), probs.values().end());
  }
  auto ctx = tape.reshape(tape.permute(tape.matmul(probs, v), {0, 2, 1, 3}), {rows, len, h});
  if (options.training) {
    ctx = tape.dropout(ctx, static_cast<T>(config_.dropout),
                       mix_seed({options.dropout_seed, layer, 1}));
  }
  return tape.add(tape.matmul(ctx, parameter(blk + "o_proj.weight")),
                  parameter(blk + "o_proj.bias"));
}

template <typename T>
Tensor<T> Model<T>::feed_forward(Tape<T>& tape, std::size_t layer, const Tensor<T>& x,
                                 const ForwardOptions<T>& options) const {
  const std::string blk = fmt::format("block{}.ffn.", layer);
  auto hidden = tape.gelu(
      tape.add(tape.matmul(x, parameter(blk + "up.weight")), parameter(blk + "up.bias")));
  if (options.training) {
    hidden = tape.dropout(hidden, static_cast<T>(config_.dropout),
                          mix_seed({options.dropout_seed, layer, 2}));
  }
  return tape.add(tape.matmul(hidden, parameter(blk + "down.weight")),
                  parameter(blk + "down.bias"));
}

template <typename T>
Tensor<T> Model<T>::hidden_states(Tape<T>& tape, const TokenBatch& batch,
                                  const ForwardOptions<T>& options) const {
  const std::size_t rows = batch.rows, len = batch.length;
  if (len > config_.max_len) {
    throw InputError(fmt::format("example of length {} exceeds max_len {}", len, config_.max_len));
  }
  if (rows == 0 || len == 0 || batch.ids.size() != rows * len) {
    throw InputError("malformed token batch");
  }

  auto x = tape.embedding_lookup(parameter("embed.tokens"), batch.ids, {rows, len});
  if (!config_.cope) {
    std::vector<int> slots(len);
    std::iota(slots.begin(), slots.end(), 0);
    x = tape.add(x, tape.embedding_lookup(parameter("embed.positions"), slots, {len}));
  }
  if (!config_.pre_ln_rmsnorm) x = norm(tape, "embed.norm", x);

  const std::size_t nh = config_.heads;
  ad::Mask mask(rows * nh * len * len, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t hh = 0; hh < nh; ++hh) {
      for (std::size_t i = 0; i < len; ++i) {
        std::uint8_t* row = mask.data() + ((r * nh + hh) * len + i) * len;
        for (std::size_t j = 0; j < len; ++j) {
          row[j] = batch.ids[r * len + j] == kPadIndex || (config_.causal && j > i);
        }
      }
    }
  }
  if (options.trace) options.trace->key_mask = mask;

  for (std::size_t layer = 0; layer < config_.layers; ++layer) {
    const std::string blk = fmt::format("block{}", layer);
    if (config_.pre_ln_rmsnorm) {
      x = tape.add(x, attention(tape, layer, norm(tape, blk + ".attn_norm", x), mask, rows, len,
                                options));
      x = tape.add(x, feed_forward(tape, layer, norm(tape, blk + ".ffn_norm", x), options));
    } else {
      x = norm(tape, blk + ".attn_norm",
               tape.add(x, attention(tape, layer, x, mask, rows, len, options)));
      x = norm(tape, blk + ".ffn_norm", tape.add(x, feed_forward(tape, layer, x, options)));
    }
  }
  if (config_.pre_ln_rmsnorm) x = norm(tape, "final_norm", x);
  return x;
}

template <typename T>
Tensor<T> Model<T>::project(Tape<T>& tape, const Tensor<T>& hidden) const {
  if (config_.weight_tying) return tape.matmul(hidden, tape.transpose(parameter("embed.tokens")));
  return tape.matmul(hidden, parameter("output.weight"));
}

template <typename T>
Tensor<T> Model<T>::forward(Tape<T>& tape, const TokenBatch& batch,
                            const ForwardOptions<T>& options) const {
  return project(tape, hidden_states(tape, batch, options));
}

template <typename T>
Tensor<T> Model<T>::forward_at(Tape<T>& tape, const TokenBatch& batch,
                               std::span<const std::size_t> flat_positions,
                               const ForwardOptions<T>& options) const {
  auto hidden = hidden_states(tape, batch, options);
  return project(tape, tape.gather_rows(hidden, flat_positions));
}

namespace {

std::string component_of(const std::string& name) { return name.substr(0, name.find('.')); }

}  // namespace

template <typename T>
ParameterCount count_parameters(const Model<T>& model) {
  ParameterCount count;
  for (const auto& p : model.parameters()) {
    count.by_component[component_of(p.name)] += p.tensor.size();
    count.total += p.tensor.size();
  }
  return count;
}

ParameterCount count_parameters(const ModelConfig& c) {
  c.validate();
  ParameterCount count;
  const std::size_t h = c.hidden, v = c.vocab_size, f = c.ffn_dim();
  const std::size_t norm = c.pre_ln_rmsnorm ? h : 2 * h;
  count.by_component["embed"] =
      v * h + (c.cope ? 0 : c.max_len * h) + (c.pre_ln_rmsnorm ? 0 : norm);
  for (std::size_t b = 0; b < c.layers; ++b) {
    std::size_t block = 4 * h * h + 3 * h + 2 * norm + (h * f + f) + (f * h + h);
    if (c.cope) block += (c.effective_p_max() + 1) * c.head_dim();
    count.by_component[fmt::format("block{}", b)] = block;
  }
  if (c.pre_ln_rmsnorm) count.by_component["final_norm"] = h;
  if (!c.weight_tying) count.by_component["output"] = h * v;
  for (const auto& [name, n] : count.by_component) count.total += n;
  return count;
}

template class Model<float>;
template class Model<double>;
template ParameterCount count_parameters(const Model<float>&);
template ParameterCount count_parameters(const Model<double>&);

}  // namespace smmrec

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smmrec/masking.hpp"
#include "smmrec/tensor.hpp"

namespace smmrec {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 512;
  std::size_t layers = 8;
  std::size_t heads = 8;
  std::size_t ffn_mult = 4;
  std::size_t max_len = 30;
  double dropout = 0.1;
  bool causal = false;
  bool weight_tying = true;
  bool pre_ln_rmsnorm = true;
  bool cope = true;
  std::size_t cope_p_max = 0;  // 0 means max_len
  std::uint64_t seed = 42;
  double init_std = 0.02;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return hidden / heads; }
  std::size_t ffn_dim() const { return hidden * ffn_mult; }
  std::size_t effective_p_max() const { return cope_p_max == 0 ? max_len : cope_p_max; }

  // Throws ConfigError (e.g. hidden not divisible by heads).
  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
// Missing keys keep the values already in `config`.
void update_from_json(ModelConfig& config, const nlohmann::json& j);

// Token ids of a batch of equal-length rows.
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<int> ids;  // rows * length, row-major
};

TokenBatch make_batch(std::span<const TrainingExample> examples);

// Per-layer attention internals captured during a forward pass.
template <typename T>
struct ForwardTrace {
  // [batch, heads, L, L] per layer
  std::vector<std::vector<T>> attention;
  std::vector<ad::CopeState<T>> cope;
  std::vector<std::uint8_t> key_mask;  // [batch, heads, L, L], nonzero = excluded
};

template <typename T>
struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  ForwardTrace<T>* trace = nullptr;
};

struct ParameterCount {
  std::map<std::string, std::size_t> by_component;
  std::size_t total = 0;
};

template <typename T>
class Model {
 public:
  // Weights ~ Normal(0, init_std) truncated at 2 sigma, norm gains 1, biases 0.
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  // Every distinct parameter exactly once; the tied embedding/output matrix
  // appears a single time as "embed.tokens".
  std::span<const ad::Parameter<T>> parameters() const { return params_; }
  const ad::Tensor<T>& parameter(const std::string& name) const;
  bool has_parameter(const std::string& name) const;

  void zero_grad();

  // Final hidden states [rows, L, hidden].
  ad::Tensor<T> hidden_states(ad::Tape<T>& tape, const TokenBatch& batch,
                              const ForwardOptions<T>& options = {}) const;
  // Logits over the token vocabulary for hidden vectors [..., hidden].
  ad::Tensor<T> project(ad::Tape<T>& tape, const ad::Tensor<T>& hidden) const;
  // [rows, L, vocab_size]
  ad::Tensor<T> forward(ad::Tape<T>& tape, const TokenBatch& batch,
                        const ForwardOptions<T>& options = {}) const;
  // Logits [positions.size(), vocab] at flattened (row * L + position) slots.
  ad::Tensor<T> forward_at(ad::Tape<T>& tape, const TokenBatch& batch,
                           std::span<const std::size_t> flat_positions,
                           const ForwardOptions<T>& options = {}) const;

  // Copies values by parameter name (precision conversion allowed).
  template <typename U>
  void load_values_from(const Model<U>& other);

 private:
  ad::Tensor<T> add_param(const std::string& name, ad::Shape shape, double init);
  ad::Tensor<T> attention(ad::Tape<T>& tape, std::size_t layer, const ad::Tensor<T>& x,
                          const ad::Mask& mask, std::size_t rows, std::size_t len,
                          const ForwardOptions<T>& options) const;
  ad::Tensor<T> feed_forward(ad::Tape<T>& tape, std::size_t layer, const ad::Tensor<T>& x,
                             const ForwardOptions<T>& options) const;
  ad::Tensor<T> norm(ad::Tape<T>& tape, const std::string& prefix, const ad::Tensor<T>& x) const;

  ModelConfig config_;
  std::vector<ad::Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
template <typename U>
void Model<T>::load_values_from(const Model<U>& other) {
  for (auto& p : params_) {
    const auto& src = other.parameter(p.name);
    auto dst = p.tensor;
    auto values = dst.values();
    auto sv = src.values();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(sv[i]);
  }
}

template <typename T>
ParameterCount count_parameters(const Model<T>& model);

// Closed-form count for a configuration, without allocating weights.
ParameterCount count_parameters(const ModelConfig& config);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace smmrec

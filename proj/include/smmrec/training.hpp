#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smmrec/evaluation.hpp"
#include "smmrec/masking.hpp"
#include "smmrec/model.hpp"
#include "smmrec/session_data.hpp"

namespace smmrec {

struct TrainConfig {
  std::size_t batch_size = 128;
  double learning_rate = 5e-5;
  std::size_t epochs = 5;
  std::size_t lr_drop_epoch = 3;  // 0-indexed
  double lr_drop_factor = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  std::uint64_t seed = 42;
  MaskingStrategy strategy;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
void update_from_json(TrainConfig& config, const nlohmann::json& j);

// Flattened (row * L + position) slots and targets a strategy supervises:
// masked positions for SMM/MLM, every non-ignore target for CLM. Special
// tokens are never targets.
struct Supervision {
  std::vector<std::size_t> slots;
  std::vector<int> targets;
};

Supervision supervision(std::span<const TrainingExample> batch, Objective objective);

// Mean cross-entropy over supervised slots. `logits` is [rows, L, V].
// Throws InputError when nothing is supervised.
template <typename T>
ad::Tensor<T> objective_loss(ad::Tape<T>& tape, const ad::Tensor<T>& logits,
                             std::span<const TrainingExample> batch, Objective objective);

// Same loss computed from logits at the supervised slots only.
template <typename T>
ad::Tensor<T> batch_loss(ad::Tape<T>& tape, const Model<T>& model,
                         std::span<const TrainingExample> batch, Objective objective,
                         const ForwardOptions<T>& options = {});

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. A parameter without a gradient is treated as having a
// zero gradient. Throws NumericError naming the first non-finite gradient.
template <typename T>
void adam_step(std::span<const ad::Parameter<T>> params, AdamState<T>& state, double lr,
               const AdamHyper& hyper = {});

double lr_schedule(std::size_t epoch, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t examples = 0;
  std::size_t steps = 0;
  double lr = 0.0;
  std::optional<EvalReport> validation;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t total_steps = 0;
  double wall_seconds = 0.0;
  nlohmann::ordered_json config;
};

nlohmann::ordered_json to_json(const TrainReport& report);

struct FitOptions {
  // Writes epoch-{e}.smm and final.smm when set.
  std::optional<std::filesystem::path> checkpoint_dir;
  bool validate_each_epoch = false;
  std::size_t eval_k = 20;
  std::size_t workers = 1;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Throws ConfigError when the strategy does not fit the model (CLM needs a
// causal model, SMM/MLM a bidirectional one).
TrainReport fit(Model<float>& model, const SessionDataset& dataset, const TrainConfig& config,
                const FitOptions& options = {});

struct HarnessRow {
  std::string name;
  nlohmann::ordered_json model_config;
  Objective objective = Objective::kSmm;
  double final_loss = 0.0;
  EvalReport metrics;
};

nlohmann::ordered_json to_json(std::span<const HarnessRow> rows);

// Base has weight tying, pre-LN RMSNorm and CoPE all off; every later row
// switches on one more toggle in the listed order.
std::vector<HarnessRow> ablate(const SessionDataset& dataset, const ModelConfig& base,
                               const TrainConfig& train, std::span<const std::string> toggles,
                               const FitOptions& options = {});

// Trains one model per objective; CLM runs on the causal variant of `model`.
std::vector<HarnessRow> compare_objectives(const SessionDataset& dataset,
                                           const ModelConfig& model, const TrainConfig& train,
                                           const FitOptions& options = {});

// Gradient check of the strategy loss on `batch` for a 64-bit copy of a
// model built from `config`. Dropout is off.
// The 2-layer, hidden-8, 2-head verification model with one SMM batch from a
// small cycle fixture. Toggle bits: 1 weight_tying, 2 pre_ln_rmsnorm, 4 cope,
// 8 causal.
struct GradCheckCase {
  ModelConfig config;
  std::vector<TrainingExample> batch;
};

GradCheckCase tiny_gradcheck_case(unsigned toggles, std::uint64_t seed = 42,
                                  double init_std = 0.5);
std::string toggle_label(const ModelConfig& config);

ad::GradCheckResult check_model_gradients(const ModelConfig& config,
                                          std::span<const TrainingExample> batch,
                                          Objective objective, double eps = 1e-5);

}  // namespace smmrec

#include "smmrec/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "smmrec/checkpoint.hpp"
#include "smmrec/errors.hpp"
#include "smmrec/random.hpp"
#include "smmrec/synthetic.hpp"

namespace smmrec {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_drop_factor > 0.0 && lr_drop_factor <= 1.0)) {
    throw ConfigError(fmt::format("lr_drop_factor must lie in (0, 1], got {}", lr_drop_factor));
  }
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
  strategy.validate();
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["lr_drop_epoch"] = c.lr_drop_epoch;
  j["lr_drop_factor"] = c.lr_drop_factor;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["grad_clip"] = c.grad_clip;
  j["seed"] = c.seed;
  j["strategy"] = to_string(c.strategy.kind);
  j["mask_k"] = c.strategy.k;
  j["mlm_ratio"] = c.strategy.mlm_ratio;
  j["max_len"] = c.strategy.max_len;
  return j;
}

void update_from_json(TrainConfig& c, const nlohmann::json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    take("batch_size", c.batch_size);
    take("learning_rate", c.learning_rate);
    take("epochs", c.epochs);
    take("lr_drop_epoch", c.lr_drop_epoch);
    take("lr_drop_factor", c.lr_drop_factor);
    take("adam_beta1", c.adam_beta1);
    take("adam_beta2", c.adam_beta2);
    take("adam_eps", c.adam_eps);
    take("grad_clip", c.grad_clip);
    take("seed", c.seed);
    if (j.contains("strategy")) c.strategy.kind = objective_from_string(j.at("strategy"));
    take("mask_k", c.strategy.k);
    take("mlm_ratio", c.strategy.mlm_ratio);
    take("max_len", c.strategy.max_len);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("train config: {}", e.what()));
  }
}

Supervision supervision(std::span<const TrainingExample> batch, Objective objective) {
  Supervision sup;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto& ex = batch[r];
    const std::size_t len = ex.input_ids.size();
    if (ex.targets.size() != len) throw InputError("example targets do not match its inputs");
    for (std::size_t p = 0; p < len; ++p) {
      const int t = ex.targets[p];
      if (t == kIgnoreTarget || Vocabulary::is_special(t)) continue;
      if (objective != Objective::kClm && ex.input_ids[p] != kMaskIndex) continue;
      sup.slots.push_back(r * len + p);
      sup.targets.push_back(t);
    }
  }
  if (sup.slots.empty()) throw InputError("batch has no supervised positions");
  return sup;
}

template <typename T>
ad::Tensor<T> objective_loss(ad::Tape<T>& tape, const ad::Tensor<T>& logits,
                             std::span<const TrainingExample> batch, Objective objective) {
  if (logits.rank() != 3 || logits.shape()[0] != batch.size()) {
    throw DimensionError(fmt::format("logits {} do not match a batch of {}",
                                     ad::shape_str(logits.shape()), batch.size()));
  }
  auto sup = supervision(batch, objective);
  auto rows = tape.gather_rows(logits, sup.slots);
  return tape.cross_entropy(rows, sup.targets);
}

template <typename T>
ad::Tensor<T> batch_loss(ad::Tape<T>& tape, const Model<T>& model,
                         std::span<const TrainingExample> batch, Objective objective,
                         const ForwardOptions<T>& options) {
  auto sup = supervision(batch, objective);
  auto tokens = make_batch(batch);
  auto logits = model.forward_at(tape, tokens, sup.slots, options);
  return tape.cross_entropy(logits, sup.targets);
}

template <typename T>
void adam_step(std::span<const ad::Parameter<T>> params, AdamState<T>& state, double lr,
               const AdamHyper& hyper) {
  if (state.m.size() != params.size()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].tensor.grad();
    for (T x : g) {
      if (!std::isfinite(x)) {
        throw NumericError(fmt::format("non-finite gradient in '{}'", params[i].name));
      }
    }
    const std::size_t n = params[i].tensor.size();
    if (state.m[i].size() != n) {
      state.m[i].assign(n, T(0));
      state.v[i].assign(n, T(0));
    }
  }
  ++state.step;
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].tensor;
    auto w = tensor.values();
    const auto g = tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      w[j] = static_cast<T>(w[j] - lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

double lr_schedule(std::size_t epoch, const TrainConfig& config) {
  return epoch >= config.lr_drop_epoch ? config.lr_drop_factor : 1.0;
}

nlohmann::ordered_json to_json(const TrainReport& report) {
  nlohmann::ordered_json j;
  j["config"] = report.config;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : report.epochs) {
    nlohmann::ordered_json row;
    row["epoch"] = e.epoch;
    row["mean_loss"] = e.mean_loss;
    row["examples"] = e.examples;
    row["steps"] = e.steps;
    row["lr"] = e.lr;
    if (e.validation) row["validation"] = to_json(*e.validation);
    j["epochs"].push_back(row);
  }
  j["total_steps"] = report.total_steps;
  j["wall_seconds"] = report.wall_seconds;
  return j;
}

namespace {

void check_compatible(const ModelConfig& model, const MaskingStrategy& strategy) {
  const bool wants_causal = strategy.kind == Objective::kClm;
  if (wants_causal != model.causal) {
    throw ConfigError(fmt::format("strategy {} requires a {} model, but causal={}",
                                  to_string(strategy.kind),
                                  wants_causal ? "causal" : "bidirectional", model.causal));
  }
  if (strategy.max_len > model.max_len) {
    throw ConfigError(fmt::format("strategy max_len {} exceeds model max_len {}", strategy.max_len,
                                  model.max_len));
  }
}

template <typename T>
void clip_gradients(std::span<const ad::Parameter<T>> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const T factor = static_cast<T>(max_norm / norm);
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto tensor = p.tensor;
    for (auto& g : tensor.mutable_grad()) g *= factor;
  }
}

}  // namespace

TrainReport fit(Model<float>& model, const SessionDataset& dataset, const TrainConfig& config,
                const FitOptions& options) {
  config.validate();
  check_compatible(model.config(), config.strategy);
  if (dataset.train.empty()) throw InputError("training set is empty");
  const auto started = std::chrono::steady_clock::now();

  TrainReport report;
  report.config["model"] = to_json(model.config());
  report.config["train"] = to_json(config);

  std::vector<PrefixPair> validation_pairs;
  if (options.validate_each_epoch && !dataset.test.empty()) {
    validation_pairs = prefix_augment(dataset.test, config.strategy.max_len);
  }

  AdamState<float> state;
  const AdamHyper hyper{config.adam_beta1, config.adam_beta2, config.adam_eps};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto examples = epoch_examples(dataset.train, config.strategy, config.seed, epoch);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng({config.seed, epoch, 0x5348u});
    shuffle_range(order.begin(), order.end(), rng);

    EpochRecord record;
    record.epoch = epoch;
    record.examples = examples.size();
    record.lr = config.learning_rate * lr_schedule(epoch, config);
    double loss_sum = 0.0;
    std::vector<TrainingExample> batch;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(examples[order[i]]);

      model.zero_grad();
      ad::Tape<float> tape;
      ForwardOptions<float> fwd;
      fwd.training = true;
      fwd.dropout_seed = mix_seed({config.seed, epoch, record.steps});
      auto loss = batch_loss(tape, model, std::span<const TrainingExample>(batch),
                             config.strategy.kind, fwd);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError(fmt::format("non-finite loss at epoch {} step {}", epoch, record.steps));
      }
      tape.backward(loss);
      if (config.grad_clip > 0.0) clip_gradients(model.parameters(), config.grad_clip);
      adam_step(model.parameters(), state, record.lr, hyper);
      loss_sum += value;
      ++record.steps;
    }
    record.mean_loss = record.steps == 0 ? 0.0 : loss_sum / static_cast<double>(record.steps);
    report.total_steps += record.steps;
    if (!validation_pairs.empty()) {
      EvalOptions eval;
      eval.k = options.eval_k;
      eval.workers = options.workers;
      record.validation = evaluate(model, validation_pairs, config.strategy, eval);
    }
    if (options.checkpoint_dir) {
      nlohmann::ordered_json meta;
      meta["epoch"] = epoch;
      meta["strategy"] = to_string(config.strategy.kind);
      meta["train"] = to_json(config);
      save_checkpoint(*options.checkpoint_dir / fmt::format("epoch-{}.smm", epoch), model, meta);
      if (epoch + 1 == config.epochs) {
        save_checkpoint(*options.checkpoint_dir / "final.smm", model, meta);
      }
    }
    if (options.on_epoch) options.on_epoch(record);
    report.epochs.push_back(std::move(record));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

nlohmann::ordered_json to_json(std::span<const HarnessRow> rows) {
  auto table = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["name"] = r.name;
    row["objective"] = to_string(r.objective);
    row["config"] = r.model_config;
    row["final_loss"] = r.final_loss;
    row["hit_rate"] = r.metrics.hit_rate;
    row["mrr"] = r.metrics.mrr;
    row["k"] = r.metrics.k;
    row["n_instances"] = r.metrics.n_instances;
    table.push_back(row);
  }
  return table;
}

namespace {

HarnessRow run_row(const std::string& name, const SessionDataset& dataset,
                   const ModelConfig& model_config, const TrainConfig& train,
                   const std::vector<PrefixPair>& test_pairs, const FitOptions& options) {
  FitOptions row_options = options;
  row_options.validate_each_epoch = false;
  if (options.checkpoint_dir) row_options.checkpoint_dir = *options.checkpoint_dir / name;
  Model<float> model(model_config);
  auto report = fit(model, dataset, train, row_options);
  EvalOptions eval;
  eval.k = options.eval_k;
  eval.workers = options.workers;
  HarnessRow row;
  row.name = name;
  row.model_config = to_json(model_config);
  row.objective = train.strategy.kind;
  row.final_loss = report.epochs.empty() ? 0.0 : report.epochs.back().mean_loss;
  row.metrics = evaluate(model, test_pairs, train.strategy, eval);
  return row;
}

}  // namespace

std::vector<HarnessRow> ablate(const SessionDataset& dataset, const ModelConfig& base,
                               const TrainConfig& train, std::span<const std::string> toggles,
                               const FitOptions& options) {
  for (const auto& t : toggles) {
    if (t != "weight_tying" && t != "pre_ln_rmsnorm" && t != "cope") {
      throw ConfigError(fmt::format("unknown ablation toggle '{}'", t));
    }
  }
  if (dataset.test.empty()) throw InputError("ablation needs a test split");
  const auto test_pairs = prefix_augment(dataset.test, train.strategy.max_len);
  ModelConfig config = base;
  config.weight_tying = false;
  config.pre_ln_rmsnorm = false;
  config.cope = false;
  std::vector<HarnessRow> rows;
  rows.push_back(run_row("base", dataset, config, train, test_pairs, options));
  for (const auto& t : toggles) {
    if (t == "weight_tying") config.weight_tying = true;
    if (t == "pre_ln_rmsnorm") config.pre_ln_rmsnorm = true;
    if (t == "cope") config.cope = true;
    rows.push_back(run_row("+" + t, dataset, config, train, test_pairs, options));
  }
  return rows;
}

std::vector<HarnessRow> compare_objectives(const SessionDataset& dataset,
                                           const ModelConfig& model, const TrainConfig& train,
                                           const FitOptions& options) {
  if (dataset.test.empty()) throw InputError("comparison needs a test split");
  const auto test_pairs = prefix_augment(dataset.test, train.strategy.max_len);
  std::vector<HarnessRow> rows;
  for (Objective objective : {Objective::kSmm, Objective::kMlm, Objective::kClm}) {
    ModelConfig config = model;
    config.causal = objective == Objective::kClm;
    TrainConfig tc = train;
    tc.strategy.kind = objective;
    rows.push_back(run_row(to_string(objective), dataset, config, tc, test_pairs, options));
  }
  return rows;
}

GradCheckCase tiny_gradcheck_case(unsigned toggles, std::uint64_t seed, double init_std) {
  SyntheticOptions data;
  data.train_sessions = 2;
  data.test_pairs = 1;
  data.num_items = 6;
  data.seed = 3;
  const auto dataset = make_cycle_dataset(data);
  GradCheckCase c;
  c.config.vocab_size = dataset.vocab.size();
  c.config.hidden = 8;
  c.config.layers = 2;
  c.config.heads = 2;
  c.config.max_len = 6;
  c.config.dropout = 0.0;
  c.config.seed = seed;
  c.config.init_std = init_std;
  c.config.weight_tying = (toggles & 1u) != 0;
  c.config.pre_ln_rmsnorm = (toggles & 2u) != 0;
  c.config.cope = (toggles & 4u) != 0;
  c.config.causal = (toggles & 8u) != 0;
  MaskingStrategy smm;
  smm.max_len = c.config.max_len;
  c.batch = epoch_examples(dataset.train, smm, seed, 0);
  return c;
}

std::string toggle_label(const ModelConfig& config) {
  return fmt::format("tying={} rmsnorm={} cope={} causal={}", config.weight_tying ? 1 : 0,
                     config.pre_ln_rmsnorm ? 1 : 0, config.cope ? 1 : 0, config.causal ? 1 : 0);
}

ad::GradCheckResult check_model_gradients(const ModelConfig& config,
                                          std::span<const TrainingExample> batch,
                                          Objective objective, double eps) {
  Model<double> model(config);
  return ad::gradient_check(
      [&](ad::Tape<double>& tape) { return batch_loss(tape, model, batch, objective); },
      model.parameters(), eps);
}

template ad::Tensor<float> objective_loss(ad::Tape<float>&, const ad::Tensor<float>&,
                                          std::span<const TrainingExample>, Objective);
template ad::Tensor<double> objective_loss(ad::Tape<double>&, const ad::Tensor<double>&,
                                           std::span<const TrainingExample>, Objective);
template ad::Tensor<float> batch_loss(ad::Tape<float>&, const Model<float>&,
                                      std::span<const TrainingExample>, Objective,
                                      const ForwardOptions<float>&);
template ad::Tensor<double> batch_loss(ad::Tape<double>&, const Model<double>&,
                                       std::span<const TrainingExample>, Objective,
                                       const ForwardOptions<double>&);
template void adam_step(std::span<const ad::Parameter<float>>, AdamState<float>&, double,
                        const AdamHyper&);
template void adam_step(std::span<const ad::Parameter<double>>, AdamState<double>&, double,
                        const AdamHyper&);

}  // namespace smmrec

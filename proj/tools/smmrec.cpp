#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "smmrec/augment.hpp"
#include "smmrec/checkpoint.hpp"
#include "smmrec/errors.hpp"
#include "smmrec/evaluation.hpp"
#include "smmrec/session_data.hpp"
#include "smmrec/synthetic.hpp"
#include "smmrec/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using namespace smmrec;

namespace {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e) ||
      dynamic_cast<const FormatError*>(&e)) {
    return 2;
  }
  return 1;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("smmrec");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("SMMREC_LOG");
  std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

void require_exists(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw ConfigError(fmt::format("{} '{}' does not exist", what, path));
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  require_exists(path, "config file");
  std::ifstream in(path);
  try {
    auto j = json::parse(in);
    if (!j.is_object()) throw ConfigError(fmt::format("config '{}' is not a JSON object", path));
    return j;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config '{}': {}", path, e.what()));
  }
}

json section(const json& config, const char* name) {
  return config.contains(name) ? config.at(name) : json::object();
}

void emit(const ojson& j, const std::string& path = {}) {
  const std::string text = j.dump(2) + "\n";
  std::cout << text;
  if (!path.empty()) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
  }
}

std::vector<std::int64_t> parse_int_list(const std::string& text) {
  std::vector<std::int64_t> values;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stoll(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("'{}' is not an integer", part));
    }
  }
  return values;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

// Flags shared by the training-related subcommands. Unset flags leave the
// config-file value (or the built-in default) in place.
struct TrainFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> max_len;
  std::optional<int> mask_k;
  std::optional<double> lr;
  std::optional<std::size_t> hidden;
  std::optional<std::size_t> layers;
  std::optional<std::size_t> heads;
  std::size_t workers = 1;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON config with \"model\" and \"train\" sections");
    app->add_option("--seed", seed, "Random seed (default 42)");
    app->add_option("--strategy", strategy, "smm, mlm or clm");
    app->add_option("--batch-size", batch_size);
    app->add_option("--epochs", epochs);
    app->add_option("--max-len", max_len);
    app->add_option("--mask-k", mask_k, "SMM: mask the K-th token from the window end");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--hidden", hidden);
    app->add_option("--layers", layers);
    app->add_option("--heads", heads);
    app->add_option("--workers", workers, "Evaluation threads");
  }

  // Resolves model and train configs: flag > config file > default.
  std::pair<ModelConfig, TrainConfig> resolve(std::size_t vocab_size) const {
    const json file = read_config(config);
    const json model_json = section(file, "model");
    const json train_json = section(file, "train");
    TrainConfig tc;
    ModelConfig mc;
    if (file.contains("seed")) tc.seed = file.at("seed").get<std::uint64_t>();
    update_from_json(tc, train_json);
    if (model_json.contains("max_len") && !train_json.contains("max_len")) {
      tc.strategy.max_len = model_json.at("max_len").get<std::size_t>();
    }
    update_from_json(mc, model_json);
    if (seed) tc.seed = *seed;
    if (strategy) tc.strategy.kind = objective_from_string(*strategy);
    if (batch_size) tc.batch_size = *batch_size;
    if (epochs) tc.epochs = *epochs;
    if (max_len) tc.strategy.max_len = *max_len;
    if (mask_k) tc.strategy.k = *mask_k;
    if (lr) tc.learning_rate = *lr;
    if (hidden) mc.hidden = *hidden;
    if (layers) mc.layers = *layers;
    if (heads) mc.heads = *heads;
    mc.vocab_size = vocab_size;
    mc.max_len = tc.strategy.max_len;
    mc.seed = tc.seed;
    if (!model_json.contains("causal")) mc.causal = tc.strategy.kind == Objective::kClm;
    mc.validate();
    tc.validate();
    return {mc, tc};
  }
};

int cmd_synth(const std::string& kind, const SyntheticOptions& options, const std::string& out,
              const std::string& dataset_dir) {
  SessionDataset dataset;
  if (kind == "cycle") {
    dataset = make_cycle_dataset(options);
  } else if (kind == "proximity") {
    dataset = make_proximity_dataset(options);
  } else {
    throw ConfigError(fmt::format("unknown synthetic kind '{}'", kind));
  }
  ojson result;
  result["kind"] = kind;
  result["seed"] = options.seed;
  if (!out.empty()) {
    fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream file(p);
    result["events"] = out;
    result["split_time"] = write_event_log(file, dataset);
  }
  const auto stats = dataset_stats(dataset);
  if (!dataset_dir.empty()) {
    save_dataset(dataset_dir, dataset, stats);
    result["dataset"] = dataset_dir;
  }
  result["train_sessions"] = dataset.train.size();
  result["test_sessions"] = dataset.test.size();
  result["items"] = stats.items;
  emit(result);
  return 0;
}

struct PreprocessFlags {
  std::string input;
  std::string out = "data";
  std::string config;
  std::optional<std::int64_t> split_time;
  std::optional<double> split_fraction;
  std::optional<std::size_t> min_item_count;
  std::optional<std::size_t> min_session_length;
};

int cmd_preprocess(const PreprocessFlags& flags) {
  require_exists(flags.input, "input");
  const json file = section(read_config(flags.config), "preprocess");
  PreprocessOptions options;
  try {
    options.columns.session_column = file.value("session_column", options.columns.session_column);
    options.columns.item_column = file.value("item_column", options.columns.item_column);
    options.columns.timestamp_column =
        file.value("timestamp_column", options.columns.timestamp_column);
    if (file.contains("delimiter")) {
      const auto d = file.at("delimiter").get<std::string>();
      if (d.size() != 1) throw ConfigError("delimiter must be a single character");
      options.columns.delimiter = d[0];
    }
    if (file.contains("split_time")) {
      options.boundary = SplitBoundary::at_time(file.at("split_time").get<std::int64_t>());
    }
    if (file.contains("split_fraction")) {
      options.boundary = SplitBoundary::trailing_fraction(file.at("split_fraction").get<double>());
    }
    options.filter.min_item_count = file.value("min_item_count", options.filter.min_item_count);
    options.filter.min_session_length =
        file.value("min_session_length", options.filter.min_session_length);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("preprocess config: {}", e.what()));
  }
  if (flags.split_time && flags.split_fraction) {
    throw ConfigError("--split-time and --split-fraction are mutually exclusive");
  }
  if (flags.split_time) options.boundary = SplitBoundary::at_time(*flags.split_time);
  if (flags.split_fraction) {
    options.boundary = SplitBoundary::trailing_fraction(*flags.split_fraction);
  }
  if (flags.min_item_count) options.filter.min_item_count = *flags.min_item_count;
  if (flags.min_session_length) options.filter.min_session_length = *flags.min_session_length;

  std::ifstream in(flags.input, std::ios::binary);
  auto result = preprocess(in, options);
  for (const auto& err : result.row_errors) {
    spdlog::warn("line {}: {}", err.line, err.message);
  }
  save_dataset(flags.out, result.dataset, result.stats);
  spdlog::info("wrote dataset to {}", flags.out);

  ojson report;
  report["train_sessions"] = result.stats.train_sessions;
  report["test_sessions"] = result.stats.test_sessions;
  report["raw_train_sessions"] = result.stats.raw_train_sessions;
  report["raw_test_sessions"] = result.stats.raw_test_sessions;
  report["items"] = result.stats.items;
  report["avg_length"] = result.stats.avg_length;
  report["row_errors"] = result.row_errors.size();
  report["out"] = flags.out;
  emit(report);
  return 0;
}

int cmd_augment(const std::string& session, const std::string& data, const TrainFlags& flags,
                const std::string& out) {
  if (session.empty() == data.empty()) {
    throw ConfigError("augment needs exactly one of --session or --data");
  }
  const json file = read_config(flags.config);
  TrainConfig tc;
  update_from_json(tc, section(file, "train"));
  if (flags.seed) tc.seed = *flags.seed;
  if (flags.strategy) tc.strategy.kind = objective_from_string(*flags.strategy);
  if (flags.max_len) tc.strategy.max_len = *flags.max_len;
  if (flags.mask_k) tc.strategy.k = *flags.mask_k;
  tc.strategy.validate();

  std::string text;
  if (!session.empty()) {
    text = augment_jsonl(parse_int_list(session), tc.strategy, tc.seed);
  } else {
    require_exists(data, "dataset directory");
    text = augment_jsonl(load_dataset(data), tc.strategy, tc.seed);
  }
  if (out.empty()) {
    std::cout << text;
  } else {
    std::ofstream(out) << text;
  }
  return 0;
}

int cmd_train(const std::string& data, const std::string& out, bool validate,
              const TrainFlags& flags) {
  require_exists(data, "dataset directory");
  const auto dataset = load_dataset(data);
  auto [mc, tc] = flags.resolve(dataset.vocab.size());
  Model<float> model(mc);
  FitOptions options;
  options.checkpoint_dir = fs::path(out);
  options.validate_each_epoch = validate;
  options.workers = flags.workers;
  options.on_epoch = [&](const EpochRecord& r) {
    spdlog::info("epoch {}: loss {:.5f} ({} steps, lr {:g})", r.epoch, r.mean_loss, r.steps, r.lr);
  };
  const auto report = fit(model, dataset, tc, options);
  emit(to_json(report), (fs::path(out) / "report.json").string());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, std::size_t k,
             const std::string& baseline, const std::string& ranks_path, const TrainFlags& flags) {
  require_exists(data, "dataset directory");
  const auto dataset = load_dataset(data);
  if (dataset.test.empty()) throw ConfigError("dataset has no test sessions");
  ojson config;
  config["data"] = data;
  config["k"] = k;
  config["baseline"] = baseline;

  EvalReport report;
  if (baseline == "model") {
    if (checkpoint.empty()) throw ConfigError("--checkpoint is required unless --baseline is set");
    require_exists(checkpoint, "checkpoint");
    auto loaded = load_checkpoint(checkpoint);
    const auto& mc = loaded.model.config();
    if (mc.vocab_size != dataset.vocab.size()) {
      throw ConfigError(fmt::format("checkpoint vocabulary {} does not match dataset vocabulary {}",
                                    mc.vocab_size, dataset.vocab.size()));
    }
    TrainConfig tc;
    if (loaded.meta.contains("train")) update_from_json(tc, loaded.meta.at("train"));
    if (flags.strategy) tc.strategy.kind = objective_from_string(*flags.strategy);
    if (flags.max_len) tc.strategy.max_len = *flags.max_len;
    tc.strategy.validate();
    EvalOptions options;
    options.k = k;
    options.workers = flags.workers;
    options.keep_ranks = !ranks_path.empty();
    const auto pairs = prefix_augment(dataset.test, tc.strategy.max_len);
    report = evaluate(loaded.model, pairs, tc.strategy, options);
    config["checkpoint"] = checkpoint;
    config["strategy"] = to_string(tc.strategy.kind);
    config["max_len"] = tc.strategy.max_len;
    config["model"] = to_json(mc);
    config["seed"] = tc.seed;
  } else {
    const std::size_t max_len = flags.max_len.value_or(30);
    const auto pairs = prefix_augment(dataset.test, max_len);
    config["max_len"] = max_len;
    if (baseline == "pop") {
      report = pop_baseline(dataset.train, pairs, dataset.vocab.size(), k);
    } else if (baseline == "itemknn" || baseline == "itemknn-sum") {
      report = item_knn_baseline(dataset.train, pairs, dataset.vocab.size(), k,
                                 baseline == "itemknn-sum");
    } else {
      throw ConfigError(fmt::format("unknown baseline '{}'", baseline));
    }
  }
  if (!ranks_path.empty()) {
    std::ofstream dump(ranks_path);
    for (const auto& r : report.ranks) {
      ojson line;
      line["origin"] = {r.session_id, r.step};
      line["rank"] = r.rank ? ojson(*r.rank) : ojson(nullptr);
      dump << line.dump() << '\n';
    }
  }
  ojson j = to_json(report);
  j["label"] = fmt::format("P@{}-compat (hit rate)", k);
  j["config"] = config;
  emit(j);
  return 0;
}

int cmd_ablate(const std::string& data, const std::string& out, const std::string& toggles,
               bool compare, const TrainFlags& flags) {
  require_exists(data, "dataset directory");
  const auto dataset = load_dataset(data);
  auto [mc, tc] = flags.resolve(dataset.vocab.size());
  FitOptions options;
  options.workers = flags.workers;
  if (!out.empty()) options.checkpoint_dir = fs::path(out);
  std::vector<HarnessRow> rows;
  if (compare) {
    rows = compare_objectives(dataset, mc, tc, options);
  } else {
    const auto names = split_list(toggles);
    rows = ablate(dataset, mc, tc, names, options);
  }
  ojson j;
  j["rows"] = to_json(rows);
  j["train"] = to_json(tc);
  emit(j, out.empty() ? std::string() : (fs::path(out) / "table.json").string());
  return 0;
}

int cmd_gradcheck(bool all, std::uint64_t seed, double eps, double init_std) {
  std::vector<unsigned> combos;
  if (all) {
    for (unsigned t = 0; t < 16; ++t) combos.push_back(t);
  } else {
    combos.push_back(1u | 2u | 4u);
  }
  double worst = 0.0;
  ojson rows = ojson::array();
  for (unsigned t : combos) {
    const auto c = tiny_gradcheck_case(t, seed, init_std);
    const auto r = check_model_gradients(c.config, c.batch, Objective::kSmm, eps);
    spdlog::debug("{}: {:.3g} at {}[{}]", toggle_label(c.config), r.max_rel_error,
                  r.worst_parameter, r.worst_index);
    ojson row;
    row["toggles"] = toggle_label(c.config);
    row["max_rel_error"] = r.max_rel_error;
    row["worst_parameter"] = r.worst_parameter;
    row["worst_index"] = r.worst_index;
    row["components"] = r.components;
    rows.push_back(row);
    worst = std::max(worst, r.max_rel_error);
  }
  ojson j;
  j["seed"] = seed;
  j["eps"] = eps;
  j["init_std"] = init_std;
  j["tolerance"] = 1e-4;
  j["results"] = rows;
  j["max_rel_error"] = worst;
  j["passed"] = worst < 1e-4;
  emit(j);
  return worst < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Session-based next-item recommendation with sequential masked modeling"};
  app.require_subcommand(1);

  TrainFlags flags;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic event log or dataset");
  std::string synth_kind = "cycle", synth_out, synth_dataset;
  SyntheticOptions synth_options;
  synth->add_option("--kind", synth_kind, "cycle or proximity");
  synth->add_option("--out", synth_out, "Event log CSV to write");
  synth->add_option("--dataset", synth_dataset, "Dataset directory to write");
  synth->add_option("--train-sessions", synth_options.train_sessions);
  synth->add_option("--test-pairs", synth_options.test_pairs);
  synth->add_option("--items", synth_options.num_items);
  synth->add_option("--min-length", synth_options.min_length);
  synth->add_option("--max-length", synth_options.max_length);
  synth->add_option("--noise", synth_options.noise);
  synth->add_option("--seed", synth_options.seed);

  auto* pre = app.add_subcommand("preprocess", "Sessionize, split and filter an event log");
  PreprocessFlags pre_flags;
  pre->add_option("input,--input", pre_flags.input, "Event log (CSV or TSV)")->required();
  pre->add_option("--out", pre_flags.out, "Dataset directory");
  pre->add_option("--config", pre_flags.config, "JSON config with a \"preprocess\" section");
  pre->add_option("--split-time", pre_flags.split_time, "Test sessions start at or after (ms)");
  pre->add_option("--split-fraction", pre_flags.split_fraction, "Trailing fraction for test");
  pre->add_option("--min-item-count", pre_flags.min_item_count);
  pre->add_option("--min-session-length", pre_flags.min_session_length);

  auto* aug = app.add_subcommand("augment", "Dump training examples as JSON lines");
  std::string aug_session, aug_data, aug_out;
  aug->add_option("--session", aug_session, "Comma-separated raw item ids");
  aug->add_option("--data", aug_data, "Dataset directory");
  aug->add_option("--out", aug_out, "Output file (default stdout)");
  aug->add_option("--config", flags.config);
  aug->add_option("--seed", flags.seed);
  aug->add_option("--strategy", flags.strategy);
  aug->add_option("--max-len", flags.max_len);
  aug->add_option("--mask-k", flags.mask_k);

  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_data, train_out = "runs/train";
  bool train_validate = false;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Directory for checkpoints and report.json");
  train->add_flag("--validate", train_validate, "Evaluate on the test split after every epoch");
  flags.attach(train);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or a baseline");
  std::string eval_ckpt, eval_data, eval_baseline = "model", eval_ranks;
  std::size_t eval_k = 20;
  eval->add_option("checkpoint,--checkpoint", eval_ckpt, "Checkpoint file");
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--k", eval_k, "Cutoff");
  eval->add_option("--baseline", eval_baseline, "model, pop, itemknn or itemknn-sum");
  eval->add_option("--ranks", eval_ranks, "Write per-instance ranks as JSON lines");
  eval->add_option("--strategy", flags.strategy);
  eval->add_option("--max-len", flags.max_len);
  eval->add_option("--workers", flags.workers);

  auto* abl = app.add_subcommand("ablate", "Cumulative optimization ablation");
  std::string abl_data, abl_out, abl_toggles = "weight_tying,pre_ln_rmsnorm,cope";
  bool abl_compare = false;
  abl->add_option("--data", abl_data, "Dataset directory")->required();
  abl->add_option("--out", abl_out, "Directory for checkpoints and table.json");
  abl->add_option("--toggles", abl_toggles, "Comma-separated toggles, applied in order");
  abl->add_flag("--compare-objectives", abl_compare, "Compare SMM, MLM and CLM instead");
  flags.attach(abl);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  bool grad_all = false;
  std::uint64_t grad_seed = 42;
  double grad_eps = 1e-5, grad_std = 0.5;
  grad->add_flag("--all", grad_all, "Check all 16 toggle combinations");
  grad->add_option("--seed", grad_seed);
  grad->add_option("--eps", grad_eps);
  grad->add_option("--init-std", grad_std);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(synth_kind, synth_options, synth_out, synth_dataset);
    if (*pre) return cmd_preprocess(pre_flags);
    if (*aug) return cmd_augment(aug_session, aug_data, flags, aug_out);
    if (*train) return cmd_train(train_data, train_out, train_validate, flags);
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_k, eval_baseline, eval_ranks, flags);
    if (*abl) return cmd_ablate(abl_data, abl_out, abl_toggles, abl_compare, flags);
    if (*grad) return cmd_gradcheck(grad_all, grad_seed, grad_eps, grad_std);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e);
  }
  return 0;
}

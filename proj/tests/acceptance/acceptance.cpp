// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is 0 when every criterion passes, except for those listed in
// kKnownDefects, whose FAIL line is still printed. See README.md.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <json.hpp>

#include "smmrec/augment.hpp"
#include "smmrec/evaluation.hpp"
#include "smmrec/masking.hpp"
#include "smmrec/model.hpp"
#include "smmrec/session_data.hpp"
#include "smmrec/synthetic.hpp"
#include "smmrec/training.hpp"

using namespace smmrec;

namespace {

// Criterion 4 asks an untied output layer to land near 41M; the untied
// configuration counts about 56.7M and only the tied one is near 41M.
const std::set<int> kKnownDefects = {4};

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Tally {
  int passed = 0;
  int failed = 0;
  int unexpected = 0;
};

void report(Tally& tally, int id, const std::string& name, const std::function<Outcome()>& check) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, fmt::format("exception: {}", e.what())};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool known = kKnownDefects.contains(id);
  std::printf("%s %2d %-24s %s [%.2fs]%s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(),
              o.detail.c_str(), secs, !o.pass && known ? " (known defect)" : "");
  std::fflush(stdout);
  if (o.pass) {
    ++tally.passed;
  } else {
    ++tally.failed;
    if (!known) ++tally.unexpected;
  }
}

// 1. The eleven windows as printed, visible tokens only, [M] for the mask.
Outcome smm_windows() {
  const std::vector<std::string> expected = {
      "[54,74,23,56,[M]]", "[54,74,23,[M],57]", "[56,54,74,[M],56]", "[98,56,54,[M],23]",
      "[4,98,56,[M],74]",  "[8,4,98,[M],54]",   "[6,8,4,[M],56]",    "[5,6,8,[M],98]",
      "[5,6,[M],4]",       "[5,[M],8]",         "[[M],6]"};
  const std::vector<std::int64_t> session = {5, 6, 8, 4, 98, 56, 54, 74, 23, 56, 57};
  MaskingStrategy st;
  st.max_len = 5;
  st.k = 2;
  std::istringstream lines(augment_jsonl(session, st, 42));
  std::vector<std::string> got;
  for (std::string line; std::getline(lines, line);) {
    auto j = nlohmann::json::parse(line);
    std::string text = "[";
    for (std::size_t i = 0; i < j["input"].size(); ++i) {
      const auto& t = j["input"][i];
      text += (i ? "," : "") + (t.is_string() ? std::string("[M]") : std::to_string(t.get<long>()));
    }
    got.push_back(text + "]");
  }
  std::size_t matching = 0;
  for (std::size_t i = 0; i < std::min(got.size(), expected.size()); ++i) {
    if (got[i] == expected[i]) ++matching;
  }
  const bool pass = got == expected;
  return {pass, fmt::format("{}/{} windows identical, {} emitted (tolerance: exact)", matching,
                            expected.size(), got.size())};
}

// 2. Coverage over random sessions.
Outcome coverage() {
  std::mt19937_64 rng(2024);
  std::size_t under = 0, not_exact = 0, sessions = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 59;
    Session s{fmt::format("s{}", trial), {}, 0};
    for (std::size_t i = 0; i < n; ++i) s.items.push_back(2 + static_cast<int>(rng() % 500));
    auto hist = masking_coverage_histogram(smm_examples(s.items, 30, 2, s.session_id), {s});
    const auto& counts = hist.per_token[s.session_id];
    if (*std::min_element(counts.begin(), counts.end()) < 1) ++under;
    if (n <= 30 && std::any_of(counts.begin(), counts.end(), [](auto c) { return c != 1; })) {
      ++not_exact;
    }
    ++sessions;
  }
  return {under == 0 && not_exact == 0,
          fmt::format("{} sessions, {} with an unmasked token, {} short ones not masked exactly "
                      "once (tolerance: exact)",
                      sessions, under, not_exact)};
}

// 3. Gradient check over the 16 toggle combinations.
Outcome gradients() {
  constexpr double kTolerance = 1e-4;
  double worst = 0;
  std::string where;
  for (unsigned t = 0; t < 16; ++t) {
    auto c = tiny_gradcheck_case(t);
    auto r = check_model_gradients(c.config, c.batch, Objective::kSmm, 1e-5);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = fmt::format("{} {}", toggle_label(c.config), r.worst_parameter);
    }
  }
  return {worst < kTolerance,
          fmt::format("max relative error {:.3e} over 16 combinations (at {}; tolerance < {:g})",
                      worst, where, kTolerance)};
}

// 4. Parameter count of the medium configuration, untied as stated.
Outcome parameter_count() {
  constexpr double kTarget = 41e6, kRel = 0.05;
  ModelConfig c;
  c.vocab_size = 30522;
  c.hidden = 512;
  c.layers = 8;
  c.heads = 8;
  c.ffn_mult = 4;
  c.max_len = 512;
  c.cope = false;
  c.weight_tying = false;
  const auto untied = count_parameters(c).total;
  c.weight_tying = true;
  const auto tied = count_parameters(c).total;
  const bool pass = std::abs(static_cast<double>(untied) - kTarget) <= kRel * kTarget;
  return {pass, fmt::format("untied {} ({:+.1f}% vs 41M); tied {} ({:+.1f}%) (tolerance ±5%)",
                            untied, 100.0 * (static_cast<double>(untied) / kTarget - 1), tied,
                            100.0 * (static_cast<double>(tied) / kTarget - 1))};
}

// 5. Causal models: perturbing token t leaves logits before t untouched.
Outcome causal() {
  std::mt19937_64 rng(5);
  std::size_t violations = 0, moved_later = 0;
  const std::size_t instances = 100;
  for (std::size_t n = 0; n < instances; ++n) {
    ModelConfig c;
    c.vocab_size = 30;
    c.hidden = 16;
    c.layers = 2;
    c.heads = 2;
    c.max_len = 12;
    c.dropout = 0.0;
    c.causal = true;
    c.weight_tying = rng() & 1;
    c.pre_ln_rmsnorm = rng() & 1;
    c.cope = rng() & 1;
    c.seed = n;
    c.init_std = 0.2;
    Model<double> m(c);
    TokenBatch b{1, c.max_len, {}};
    const std::size_t pad = rng() % 4;
    for (std::size_t i = 0; i < c.max_len; ++i) {
      b.ids.push_back(i < pad ? kPadIndex : 2 + static_cast<int>(rng() % 28));
    }
    const std::size_t t = pad + 1 + rng() % (c.max_len - pad - 1);
    ad::Tape<double> t1(false), t2(false);
    auto before = m.forward(t1, b);
    b.ids[t] = b.ids[t] == 2 ? 3 : 2;
    auto after = m.forward(t2, b);
    const std::size_t V = c.vocab_size;
    for (std::size_t i = 0; i < t * V; ++i) {
      if (before.values()[i] != after.values()[i]) {
        ++violations;
        break;
      }
    }
    if (before.values()[t * V] != after.values()[t * V]) ++moved_later;
  }
  return {violations == 0,
          fmt::format("{}/{} instances changed an earlier logit; position t itself moved in {} "
                      "(tolerance: exact)",
                      violations, instances, moved_later)};
}

// 6. Hit rate and MRR against a full-sort oracle.
Outcome metrics() {
  constexpr double kTolerance = 1e-12;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal;
  const std::size_t V = 202;
  std::vector<InstanceRank> ranks;
  double hits = 0, rr = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> scores(V);
    for (auto& s : scores) s = normal(rng);
    for (int k = 0; k < 5; ++k) scores[2 + rng() % 200] = scores[2 + rng() % 200];
    const int target = 2 + static_cast<int>(rng() % 200);
    std::vector<int> order;
    for (int j = 2; j < static_cast<int>(V); ++j) order.push_back(j);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    });
    const auto rank =
        static_cast<std::size_t>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
    if (rank <= 20) {
      hits += 1;
      rr += 1.0 / static_cast<double>(rank);
    }
    ranks.push_back({"s", i, rank_target<double>(scores, target)});
  }
  auto r = summarize_ranks(ranks, 20, false);
  const double dh = std::abs(r.hit_rate - hits / 1000), dm = std::abs(r.mrr - rr / 1000);
  return {dh <= kTolerance && dm <= kTolerance,
          fmt::format("hit_rate {:.6f} (|Δ| {:.1e}), mrr {:.6f} (|Δ| {:.1e}) on 1000 instances "
                      "(tolerance {:g})",
                      r.hit_rate, dh, r.mrr, dm, kTolerance)};
}

// 7. Learning-rate multipliers.
Outcome schedule() {
  const std::vector<double> expected = {1, 1, 1, 0.1, 0.1, 0.1};
  TrainConfig c;
  std::vector<double> got;
  for (std::size_t e = 0; e < 6; ++e) got.push_back(lr_schedule(e, c));
  return {got == expected, fmt::format("epochs 0..5 -> [{}] (tolerance: exact)",
                                       fmt::join(got, ", "))};
}

// 8. Learning the deterministic cycle.
Outcome learning() {
  constexpr double kHitAt1 = 0.95, kMrrAt20 = 0.95, kSeconds = 300;
  SyntheticOptions so;
  so.train_sessions = 500;
  so.test_pairs = 100;
  so.num_items = 10;
  auto data = make_cycle_dataset(so);
  ModelConfig mc;
  mc.vocab_size = data.vocab.size();
  mc.hidden = 64;
  mc.layers = 2;
  mc.heads = 4;
  mc.max_len = 10;
  mc.cope = false;
  TrainConfig tc;
  tc.batch_size = 32;
  tc.learning_rate = 1e-3;
  tc.epochs = 5;
  tc.strategy.max_len = 10;
  const auto start = std::chrono::steady_clock::now();
  Model<float> model(mc);
  auto rep = fit(model, data, tc);
  const auto pairs = prefix_augment(data.test, tc.strategy.max_len);
  EvalOptions at1, at20;
  at1.k = 1;
  at20.k = 20;
  const auto h1 = evaluate(model, pairs, tc.strategy, at1);
  const auto m20 = evaluate(model, pairs, tc.strategy, at20);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {h1.hit_rate >= kHitAt1 && m20.mrr >= kMrrAt20 && secs < kSeconds,
          fmt::format("vocab {}, {} test pairs, {} epochs: hit@1 {:.3f}, MRR@20 {:.3f}, final loss "
                      "{:.4f}, {:.0f}s (need >= {}, >= {}, < {:g}s)",
                      data.vocab.size(), h1.n_instances, tc.epochs, h1.hit_rate, m20.mrr,
                      rep.epochs.back().mean_loss, secs, kHitAt1, kMrrAt20, kSeconds)};
}

// 9. Fixed-point filtering on the bundled fixture; counts traced by hand.
Outcome preprocessing() {
  std::ifstream in(std::filesystem::path(SMMREC_TEST_DATA) / "cascade_events.csv");
  PreprocessOptions options;
  options.boundary = SplitBoundary::at_time(100000);
  options.filter = {3, 2};
  auto r = preprocess(in, options);
  const DatasetStats expected{3, 3, 3, 2, 2, 2.2};
  const auto& s = r.stats;
  return {s == expected,
          fmt::format("train pairs {}, test pairs {}, train sessions {}, test sessions {}, items "
                      "{}, avg length {:g} (expected 3, 3, 3, 2, 2, 2.2; tolerance: exact)",
                      s.train_sessions, s.test_sessions, s.raw_train_sessions,
                      s.raw_test_sessions, s.items, s.avg_length)};
}

// 10. Weight tying is observable in the parameter list and the count.
Outcome tying() {
  ModelConfig c;
  c.vocab_size = 100;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.max_len = 8;
  Model<float> tied(c);
  std::size_t exposures = 0;
  for (const auto& p : tied.parameters()) {
    if (p.tensor.same_storage(tied.parameter("embed.tokens"))) ++exposures;
  }
  const auto n_tied = count_parameters(tied).total;
  c.weight_tying = false;
  Model<float> untied(c);
  const auto delta = count_parameters(untied).total - n_tied;
  return {exposures == 1 && delta == 1600,
          fmt::format("embedding exposed {} time(s); untied - tied = {} (expected 1, 100*16 = "
                      "1600; tolerance: exact)",
                      exposures, delta)};
}

// 11. Objective comparison on the proximity dataset.
Outcome harness() {
  SyntheticOptions so;
  so.train_sessions = 400;
  so.test_pairs = 200;
  so.num_items = 30;
  so.max_length = 12;
  so.noise = 0.2;
  auto data = make_proximity_dataset(so);
  ModelConfig mc;
  mc.vocab_size = data.vocab.size();
  mc.hidden = 32;
  mc.layers = 2;
  mc.heads = 2;
  mc.max_len = 12;
  TrainConfig tc;
  tc.batch_size = 32;
  tc.learning_rate = 1e-3;
  tc.epochs = 3;
  tc.strategy.max_len = 12;
  auto rows = compare_objectives(data, mc, tc);
  bool in_range = rows.size() == 3;
  std::vector<std::string> cells;
  for (const auto& r : rows) {
    in_range = in_range && r.metrics.hit_rate >= 0 && r.metrics.hit_rate <= 1 &&
               r.metrics.mrr >= 0 && r.metrics.mrr <= 1 && std::isfinite(r.final_loss);
    cells.push_back(fmt::format("{} HR@20 {:.3f} MRR@20 {:.3f}", r.name, r.metrics.hit_rate,
                                r.metrics.mrr));
  }
  return {in_range, fmt::format("{} rows: {} (need 3 rows, metrics in [0,1])", rows.size(),
                                fmt::join(cells, "; "))};
}

}  // namespace

int main() {
  Tally tally;
  report(tally, 1, "smm-windows", smm_windows);
  report(tally, 2, "smm-coverage", coverage);
  report(tally, 3, "gradient-check", gradients);
  report(tally, 4, "parameter-count", parameter_count);
  report(tally, 5, "causal-contract", causal);
  report(tally, 6, "metric-oracle", metrics);
  report(tally, 7, "lr-schedule", schedule);
  report(tally, 8, "cycle-learning", learning);
  report(tally, 9, "preprocess-fixture", preprocessing);
  report(tally, 10, "weight-tying", tying);
  report(tally, 11, "objective-harness", harness);
  std::printf("%d passed, %d failed (%d outside the known-defect list)\n", tally.passed,
              tally.failed, tally.unexpected);
  return tally.unexpected == 0 ? 0 : 1;
}

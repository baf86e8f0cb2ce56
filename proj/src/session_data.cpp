#include "smmrec/session_data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include <json.hpp>

#include "smmrec/errors.hpp"

namespace smmrec {
namespace {

std::string trim(std::string_view s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  auto end = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(begin, end - begin + 1));
}

// Splits one delimited line. Double-quoted fields may contain the delimiter;
// a doubled quote inside a quoted field is a literal quote.
std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          current.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        current.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      fields.push_back(trim(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  fields.push_back(trim(current));
  return fields;
}

bool parse_int(std::string_view text, std::int64_t& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

bool parse_fixed_digits(std::string_view text, std::size_t pos, std::size_t width,
                        int& out) {
  if (pos + width > text.size()) return false;
  out = 0;
  for (std::size_t i = pos; i < pos + width; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(text[i]))) return false;
    out = out * 10 + (text[i] - '0');
  }
  return true;
}

}  // namespace

std::string IngestResult::error_summary() const {
  if (errors.empty()) return "no row errors";
  std::string summary = fmt::format("{} malformed row(s)", errors.size());
  std::size_t shown = std::min<std::size_t>(errors.size(), 5);
  for (std::size_t i = 0; i < shown; ++i) {
    summary += fmt::format("; line {}: {}", errors[i].line, errors[i].message);
  }
  if (shown < errors.size()) summary += "; ...";
  return summary;
}

std::optional<std::int64_t> parse_timestamp(const std::string& raw) {
  std::string text = trim(raw);
  std::int64_t value = 0;
  if (parse_int(text, value)) {
    if (value < 0) return std::nullopt;
    return value;
  }

  // YYYY-MM-DD[(T| )HH:MM[:SS[.fff]]][Z|(+|-)HH:MM]
  int year = 0, month = 0, day = 0;
  if (!parse_fixed_digits(text, 0, 4, year) || text.size() < 10 || text[4] != '-' ||
      !parse_fixed_digits(text, 5, 2, month) || text[7] != '-' ||
      !parse_fixed_digits(text, 8, 2, day)) {
    return std::nullopt;
  }
  std::chrono::year_month_day ymd{std::chrono::year{year},
                                  std::chrono::month{static_cast<unsigned>(month)},
                                  std::chrono::day{static_cast<unsigned>(day)}};
  if (!ymd.ok()) return std::nullopt;

  std::int64_t ms = 0;
  std::size_t pos = 10;
  if (pos < text.size()) {
    if (text[pos] != 'T' && text[pos] != ' ') return std::nullopt;
    int hour = 0, minute = 0, second = 0;
    if (!parse_fixed_digits(text, pos + 1, 2, hour) || pos + 3 >= text.size() ||
        text[pos + 3] != ':' || !parse_fixed_digits(text, pos + 4, 2, minute)) {
      return std::nullopt;
    }
    pos += 6;
    if (pos < text.size() && text[pos] == ':') {
      if (!parse_fixed_digits(text, pos + 1, 2, second)) return std::nullopt;
      pos += 3;
      if (pos < text.size() && text[pos] == '.') {
        ++pos;
        int digits = 0;
        int frac_ms = 0;
        while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
          if (digits < 3) frac_ms = frac_ms * 10 + (text[pos] - '0');
          ++digits;
          ++pos;
        }
        if (digits == 0) return std::nullopt;
        for (int d = digits; d < 3; ++d) frac_ms *= 10;
        ms += frac_ms;
      }
    }
    if (hour > 23 || minute > 59 || second > 60) return std::nullopt;
    ms += (static_cast<std::int64_t>(hour) * 3600 + minute * 60 + second) * 1000;

    if (pos < text.size()) {
      if (text[pos] == 'Z' && pos + 1 == text.size()) {
        pos += 1;
      } else if ((text[pos] == '+' || text[pos] == '-') && pos + 6 == text.size() &&
                 text[pos + 3] == ':') {
        int off_h = 0, off_m = 0;
        if (!parse_fixed_digits(text, pos + 1, 2, off_h) ||
            !parse_fixed_digits(text, pos + 4, 2, off_m)) {
          return std::nullopt;
        }
        std::int64_t offset = (static_cast<std::int64_t>(off_h) * 60 + off_m) * 60000;
        ms += text[pos] == '+' ? -offset : offset;
        pos = text.size();
      } else {
        return std::nullopt;
      }
    }
  }

  auto days = std::chrono::sys_days{ymd}.time_since_epoch().count();
  std::int64_t total = static_cast<std::int64_t>(days) * 86'400'000 + ms;
  if (total < 0) return std::nullopt;
  return total;
}

IngestResult ingest_events(std::istream& source, const ColumnMapping& format) {
  IngestResult result;
  std::string header;
  if (!std::getline(source, header)) {
    throw ConfigError("event log has no header row");
  }
  if (!header.empty() && header.back() == '\r') header.pop_back();
  // Strip a UTF-8 byte order mark.
  if (header.rfind("\xEF\xBB\xBF", 0) == 0) header.erase(0, 3);

  char delim = format.delimiter.value_or(header.find('\t') != std::string::npos ? '\t' : ',');
  auto columns = split_fields(header, delim);

  auto column_index = [&](const std::string& name) -> std::size_t {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) {
      throw ConfigError(fmt::format("missing mandatory column '{}' in header '{}'", name, header));
    }
    return static_cast<std::size_t>(it - columns.begin());
  };
  const std::size_t sid_col = column_index(format.session_column);
  const std::size_t item_col = column_index(format.item_column);
  const std::size_t ts_col = column_index(format.timestamp_column);
  const std::size_t needed = std::max({sid_col, item_col, ts_col}) + 1;

  std::string line;
  std::size_t line_no = 1;
  while (std::getline(source, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_fields(line, delim);
    if (fields.size() < needed) {
      result.errors.push_back(
          {line_no, fmt::format("expected at least {} fields, found {}", needed, fields.size())});
      continue;
    }
    if (fields[sid_col].empty() || fields[item_col].empty()) {
      result.errors.push_back({line_no, "empty session or item id"});
      continue;
    }
    auto ts = parse_timestamp(fields[ts_col]);
    if (!ts) {
      result.errors.push_back(
          {line_no, fmt::format("unparseable timestamp '{}'", fields[ts_col])});
      continue;
    }
    result.events.push_back({fields[sid_col], fields[item_col], *ts});
  }
  return result;
}

std::vector<RawSession> build_sessions(const std::vector<RawEvent>& events) {
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::vector<const RawEvent*>> grouped;
  std::vector<std::string> ids;
  for (const auto& e : events) {
    auto [it, inserted] = slot.try_emplace(e.session_id, grouped.size());
    if (inserted) {
      grouped.emplace_back();
      ids.push_back(e.session_id);
    }
    grouped[it->second].push_back(&e);
  }

  std::vector<RawSession> sessions;
  sessions.reserve(grouped.size());
  for (std::size_t s = 0; s < grouped.size(); ++s) {
    auto& group = grouped[s];
    std::stable_sort(group.begin(), group.end(), [](const RawEvent* a, const RawEvent* b) {
      return a->timestamp < b->timestamp;
    });
    RawSession session;
    session.session_id = ids[s];
    session.start_time = group.front()->timestamp;
    session.items.reserve(group.size());
    for (const auto* e : group) session.items.push_back(e->item_id);
    sessions.push_back(std::move(session));
  }
  std::stable_sort(sessions.begin(), sessions.end(),
                   [](const RawSession& a, const RawSession& b) {
                     return a.start_time < b.start_time;
                   });
  return sessions;
}

SplitResult chronological_split(const std::vector<RawSession>& sessions,
                                const SplitBoundary& boundary) {
  std::vector<RawSession> sorted = sessions;
  std::stable_sort(sorted.begin(), sorted.end(), [](const RawSession& a, const RawSession& b) {
    return a.start_time < b.start_time;
  });

  std::size_t cut = 0;
  if (const auto* t = std::get_if<std::int64_t>(&boundary.value)) {
    cut = static_cast<std::size_t>(
        std::lower_bound(sorted.begin(), sorted.end(), *t,
                         [](const RawSession& s, std::int64_t v) { return s.start_time < v; }) -
        sorted.begin());
  } else {
    double f = std::get<double>(boundary.value);
    if (!(f > 0.0 && f < 1.0)) {
      throw ConfigError(fmt::format("split fraction must lie in (0, 1), got {}", f));
    }
    auto n_test = static_cast<std::size_t>(std::ceil(f * static_cast<double>(sorted.size())));
    cut = sorted.size() - std::min(n_test, sorted.size());
  }

  SplitResult result;
  result.train.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(cut));
  result.test.assign(sorted.begin() + static_cast<std::ptrdiff_t>(cut), sorted.end());
  return result;
}

SplitResult filter_dataset(const std::vector<RawSession>& train,
                           const std::vector<RawSession>& test, const FilterOptions& options) {
  SplitResult out{train, test};
  auto drop_short = [&](std::vector<RawSession>& sessions) {
    auto before = sessions.size();
    std::erase_if(sessions, [&](const RawSession& s) {
      return s.items.size() < options.min_session_length;
    });
    return before != sessions.size();
  };

  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& s : out.train) {
      for (const auto& item : s.items) ++counts[item];
    }
    std::unordered_set<std::string> kept;
    for (const auto& [item, count] : counts) {
      if (count >= options.min_item_count) kept.insert(item);
    }
    auto strip = [&](std::vector<RawSession>& sessions) {
      for (auto& s : sessions) {
        auto removed = std::erase_if(s.items, [&](const std::string& item) {
          return !kept.contains(item);
        });
        if (removed > 0) changed = true;
      }
    };
    strip(out.train);
    strip(out.test);
    if (drop_short(out.train)) changed = true;
    if (drop_short(out.test)) changed = true;
  }

  if (out.train.empty()) {
    throw DataError("no training sessions survive filtering");
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> ordered_items)
    : index_to_item_(std::move(ordered_items)) {
  item_to_index_.reserve(index_to_item_.size());
  for (std::size_t i = 0; i < index_to_item_.size(); ++i) {
    auto [it, inserted] =
        item_to_index_.emplace(index_to_item_[i], static_cast<int>(i) + kFirstItemIndex);
    if (!inserted) {
      throw DataError(fmt::format("duplicate item '{}' in vocabulary", index_to_item_[i]));
    }
  }
}

std::optional<int> Vocabulary::index_of(const std::string& item) const {
  auto it = item_to_index_.find(item);
  if (it == item_to_index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::item_at(int index) const {
  if (index < kFirstItemIndex || static_cast<std::size_t>(index - kFirstItemIndex) >= num_items()) {
    throw IndexError(fmt::format("token index {} is not a real item", index));
  }
  return index_to_item_[static_cast<std::size_t>(index - kFirstItemIndex)];
}

Vocabulary build_vocab(const std::vector<RawSession>& train) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : train) {
    for (const auto& item : s.items) ++counts[item];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> ordered;
  ordered.reserve(ranked.size());
  for (auto& [item, count] : ranked) ordered.push_back(item);
  return Vocabulary(std::move(ordered));
}

std::vector<Session> apply_vocab(const std::vector<RawSession>& sessions,
                                 const Vocabulary& vocab) {
  std::vector<Session> mapped;
  mapped.reserve(sessions.size());
  for (const auto& s : sessions) {
    Session m{s.session_id, {}, s.start_time};
    m.items.reserve(s.items.size());
    for (const auto& item : s.items) {
      auto index = vocab.index_of(item);
      if (!index) {
        throw DataError(fmt::format("item '{}' of session '{}' is not in the vocabulary", item,
                                    s.session_id));
      }
      m.items.push_back(*index);
    }
    mapped.push_back(std::move(m));
  }
  return mapped;
}

std::vector<PrefixPair> prefix_augment(const std::vector<Session>& sessions, std::size_t window) {
  std::vector<PrefixPair> pairs;
  for (const auto& s : sessions) {
    const std::size_t n = s.items.size();
    for (std::size_t end = n - 1, step = 1; end >= 1 && n >= 2; --end, ++step) {
      std::size_t begin = end > window ? end - window : 0;
      PrefixPair pair;
      pair.prefix.assign(s.items.begin() + static_cast<std::ptrdiff_t>(begin),
                         s.items.begin() + static_cast<std::ptrdiff_t>(end));
      pair.target = s.items[end];
      pair.session_id = s.session_id;
      pair.step = static_cast<int>(step);
      pairs.push_back(std::move(pair));
    }
  }
  return pairs;
}

DatasetStats dataset_stats(const SessionDataset& dataset) {
  DatasetStats stats;
  stats.raw_train_sessions = dataset.train.size();
  stats.raw_test_sessions = dataset.test.size();
  std::size_t total_length = 0;
  for (const auto& s : dataset.train) {
    total_length += s.items.size();
    stats.train_sessions += s.items.size() > 0 ? s.items.size() - 1 : 0;
  }
  for (const auto& s : dataset.test) {
    total_length += s.items.size();
    stats.test_sessions += s.items.size() > 0 ? s.items.size() - 1 : 0;
  }
  stats.items = dataset.vocab.num_items();
  std::size_t n = dataset.train.size() + dataset.test.size();
  stats.avg_length = n == 0 ? 0.0 : static_cast<double>(total_length) / static_cast<double>(n);
  return stats;
}

PreprocessResult preprocess(std::istream& source, const PreprocessOptions& options) {
  auto ingested = ingest_events(source, options.columns);
  auto sessions = build_sessions(ingested.events);
  auto split = chronological_split(sessions, options.boundary);
  auto filtered = filter_dataset(split.train, split.test, options.filter);

  PreprocessResult result;
  result.dataset.vocab = build_vocab(filtered.train);
  result.dataset.train = apply_vocab(filtered.train, result.dataset.vocab);
  result.dataset.test = apply_vocab(filtered.test, result.dataset.vocab);
  result.stats = dataset_stats(result.dataset);
  result.row_errors = std::move(ingested.errors);
  return result;
}

namespace {

void write_sessions(const std::filesystem::path& path, const std::vector<Session>& sessions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError(fmt::format("cannot write {}", path.string()));
  for (const auto& s : sessions) {
    nlohmann::ordered_json line;
    line["sid"] = s.session_id;
    line["items"] = s.items;
    out << line.dump() << '\n';
  }
}

std::vector<Session> read_sessions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read {}", path.string()));
  std::vector<Session> sessions;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Session s;
      s.session_id = j.at("sid").get<std::string>();
      s.items = j.at("items").get<std::vector<int>>();
      sessions.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  }
  return sessions;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const SessionDataset& dataset,
                  const DatasetStats& stats) {
  std::filesystem::create_directories(dir);
  write_sessions(dir / "train.jsonl", dataset.train);
  write_sessions(dir / "test.jsonl", dataset.test);

  nlohmann::ordered_json vocab;
  vocab["pad"] = kPadIndex;
  vocab["mask"] = kMaskIndex;
  vocab["num_items"] = dataset.vocab.num_items();
  vocab["items"] = dataset.vocab.items();
  std::ofstream(dir / "vocab.json", std::ios::binary) << vocab.dump(2) << '\n';

  nlohmann::ordered_json s;
  s["train_sessions"] = stats.train_sessions;
  s["test_sessions"] = stats.test_sessions;
  s["raw_train_sessions"] = stats.raw_train_sessions;
  s["raw_test_sessions"] = stats.raw_test_sessions;
  s["items"] = stats.items;
  s["avg_length"] = stats.avg_length;
  std::ofstream(dir / "stats.json", std::ios::binary) << s.dump(2) << '\n';
}

SessionDataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ConfigError(fmt::format("dataset directory {} does not exist", dir.string()));
  }
  SessionDataset dataset;
  std::ifstream vin(dir / "vocab.json");
  if (!vin) throw ConfigError(fmt::format("missing {}", (dir / "vocab.json").string()));
  try {
    auto vocab = nlohmann::json::parse(vin);
    if (vocab.at("pad").get<int>() != kPadIndex || vocab.at("mask").get<int>() != kMaskIndex) {
      throw FormatError("vocab.json declares unexpected special indices");
    }
    dataset.vocab = Vocabulary(vocab.at("items").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("vocab.json: {}", e.what()));
  }
  dataset.train = read_sessions(dir / "train.jsonl");
  dataset.test = read_sessions(dir / "test.jsonl");

  const int limit = static_cast<int>(dataset.vocab.size());
  for (const auto* part : {&dataset.train, &dataset.test}) {
    for (const auto& s : *part) {
      for (int item : s.items) {
        if (item < kFirstItemIndex || item >= limit) {
          throw FormatError(
              fmt::format("session '{}' holds token {} outside the vocabulary", s.session_id, item));
        }
      }
    }
  }
  return dataset;
}

}  // namespace smmrec

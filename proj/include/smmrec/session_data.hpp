#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace smmrec {

// Token index reserved for left padding.
inline constexpr int kPadIndex = 0;
// Token index that replaces a masked item.
inline constexpr int kMaskIndex = 1;
// First index assigned to a real item.
inline constexpr int kFirstItemIndex = 2;

struct RawEvent {
  std::string session_id;
  std::string item_id;
  std::int64_t timestamp = 0;  // epoch milliseconds
};

// Column mapping for delimited event logs. The delimiter is detected from the
// header line when left unset (tab if the header contains one, else comma).
struct ColumnMapping {
  std::string session_column = "session_id";
  std::string item_column = "item_id";
  std::string timestamp_column = "timestamp";
  std::optional<char> delimiter;
};

struct RowError {
  std::size_t line = 0;  // 1-based, header is line 1
  std::string message;
};

struct IngestResult {
  std::vector<RawEvent> events;
  std::vector<RowError> errors;

  std::string error_summary() const;
};

// A session before vocabulary mapping holds raw item ids.
struct RawSession {
  std::string session_id;
  std::vector<std::string> items;
  std::int64_t start_time = 0;
};

// A session after vocabulary mapping holds item indices (>= kFirstItemIndex).
struct Session {
  std::string session_id;
  std::vector<int> items;
  std::int64_t start_time = 0;

  bool operator==(const Session&) const = default;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  // Builds the mapping from items already ordered by their final index.
  explicit Vocabulary(std::vector<std::string> ordered_items);

  std::optional<int> index_of(const std::string& item) const;
  const std::string& item_at(int index) const;

  std::size_t num_items() const { return index_to_item_.size(); }
  // Number of token slots including the specials.
  std::size_t size() const { return num_items() + kFirstItemIndex; }
  const std::vector<std::string>& items() const { return index_to_item_; }

  static bool is_special(int index) { return index < kFirstItemIndex; }

 private:
  std::unordered_map<std::string, int> item_to_index_;
  std::vector<std::string> index_to_item_;
};

struct PrefixPair {
  std::vector<int> prefix;
  int target = kPadIndex;
  std::string session_id;
  int step = 0;  // 1 for the longest prefix of its session

  bool operator==(const PrefixPair&) const = default;
};

struct DatasetStats {
  // Train/test counts follow the usual reporting convention: one entry per
  // prefix-augmented pair. The raw session counts are kept alongside.
  std::size_t train_sessions = 0;
  std::size_t test_sessions = 0;
  std::size_t raw_train_sessions = 0;
  std::size_t raw_test_sessions = 0;
  std::size_t items = 0;
  double avg_length = 0.0;

  bool operator==(const DatasetStats&) const = default;
};

struct SessionDataset {
  std::vector<Session> train;
  std::vector<Session> test;
  Vocabulary vocab;
};

// Reads a header-bearing delimited stream. Rows that cannot be parsed are
// reported in `errors` and skipped; a missing mandatory column throws
// ConfigError.
IngestResult ingest_events(std::istream& source, const ColumnMapping& format);

// Parses integer epoch milliseconds or an ISO-8601 date/time
// ("2016-05-09", "2016-05-09T10:51:09.277Z", "2016-05-09 10:51:09").
std::optional<std::int64_t> parse_timestamp(const std::string& text);

std::vector<RawSession> build_sessions(const std::vector<RawEvent>& events);

struct SplitBoundary {
  // Either an absolute timestamp (ms) or a trailing fraction in (0, 1).
  std::variant<std::int64_t, double> value = 0.1;

  static SplitBoundary at_time(std::int64_t t) { return {t}; }
  static SplitBoundary trailing_fraction(double f) { return {f}; }
};

struct SplitResult {
  std::vector<RawSession> train;
  std::vector<RawSession> test;
};

SplitResult chronological_split(const std::vector<RawSession>& sessions,
                                const SplitBoundary& boundary);

struct FilterOptions {
  std::size_t min_item_count = 5;
  std::size_t min_session_length = 2;
};

// Iterates frequency filtering, test-only item removal and short-session
// removal until nothing changes. Throws DataError if train ends up empty.
SplitResult filter_dataset(const std::vector<RawSession>& train,
                           const std::vector<RawSession>& test,
                           const FilterOptions& options = {});

// Items sorted by (descending train frequency, ascending raw id).
Vocabulary build_vocab(const std::vector<RawSession>& train);

std::vector<Session> apply_vocab(const std::vector<RawSession>& sessions,
                                 const Vocabulary& vocab);

// For a session of length n emits n-1 pairs, longest prefix first; every
// prefix is cut to its last `window` items.
std::vector<PrefixPair> prefix_augment(const std::vector<Session>& sessions,
                                       std::size_t window = 30);

DatasetStats dataset_stats(const SessionDataset& dataset);

struct PreprocessOptions {
  ColumnMapping columns;
  SplitBoundary boundary;
  FilterOptions filter;
};

struct PreprocessResult {
  SessionDataset dataset;
  DatasetStats stats;
  std::vector<RowError> row_errors;
};

PreprocessResult preprocess(std::istream& source, const PreprocessOptions& options);

// Dataset directory layout: train.jsonl, test.jsonl, vocab.json, stats.json.
void save_dataset(const std::filesystem::path& dir, const SessionDataset& dataset,
                  const DatasetStats& stats);
SessionDataset load_dataset(const std::filesystem::path& dir);

}  // namespace smmrec

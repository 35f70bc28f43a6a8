#pragma once

// The policy database: an append-only JSON Lines file of trial records keyed
// by (task, policy, lambda, seed). One writer at a time; readers of the file
// always see whole lines because each record goes out in a single write.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/policy_json.hpp"
#include "lrforge/trainer.hpp"
#include "lrforge/tuner.hpp"

namespace lrforge {

inline constexpr int kRecordVersion = 1;
inline constexpr const char* kArtifactVersion = "lrforge-0.1.0";

struct TrialRecord {
  std::string task;  // "dataset/model/objective"
  Json policy;       // serialized policy template
  double lambda = 1.0;
  std::uint64_t seed = 0;
  TrialOutcome outcome;
  std::int64_t timestamp = 0;
  std::string artifact = kArtifactVersion;
};

/// Canonical task id.
inline std::string task_id(const std::string& dataset, const std::string& model, Objective objective) {
  return dataset + "/" + model + "/" + std::string(objective_name(objective));
}

using RecordKey = std::tuple<std::string, std::string, double, std::uint64_t>;

inline RecordKey record_key(const TrialRecord& r) { return {r.task, r.policy.dump(), r.lambda, r.seed}; }

/// Outcomes agree when everything but wall time matches.
inline bool same_outcome(const TrialOutcome& a, const TrialOutcome& b) {
  return a.final_accuracy == b.final_accuracy && a.best_accuracy == b.best_accuracy &&
         a.iterations_to_target == b.iterations_to_target && a.iterations_run == b.iterations_run &&
         a.diverged == b.diverged;
}

inline Json record_to_json(const TrialRecord& r) {
  return {{"v", kRecordVersion},
          {"task", r.task},
          {"policy", r.policy},
          {"lambda", r.lambda},
          {"seed", r.seed},
          {"outcome", outcome_to_json(r.outcome, r.outcome.wall_time_s != 0.0)},
          {"timestamp", r.timestamp},
          {"artifact", r.artifact}};
}

inline TrialRecord record_from_json(const Json& j, const std::string& context = "record") {
  detail::ParamReader r(j, context);
  const auto v = r.integer("v");
  if (v != kRecordVersion) detail::fail(context + ".v: unsupported record version " + std::to_string(v));
  TrialRecord rec;
  rec.task = r.string("task");
  rec.policy = r.raw("policy");
  if (!rec.policy.is_object()) detail::fail(context + ".policy must be an object");
  rec.lambda = r.number("lambda");
  rec.seed = static_cast<std::uint64_t>(r.integer("seed"));
  rec.outcome = outcome_from_json(r.raw("outcome"), context + ".outcome");
  rec.timestamp = r.integer("timestamp", 0);
  rec.artifact = r.string("artifact", "");
  r.finish();
  return rec;
}

/// Best first. By accuracy: diverged last, then final accuracy, fewer
/// iterations, policy text, lambda, seed. By cost: records that reached their
/// target first in ascending iterations, then as by accuracy.
inline bool record_ranks_before(const TrialRecord& a, const TrialRecord& b, Objective objective) {
  const auto& x = a.outcome;
  const auto& y = b.outcome;
  if (x.diverged != y.diverged) return !x.diverged;
  if (objective == Objective::MinCostToTarget) {
    const bool rx = x.iterations_to_target.has_value();
    const bool ry = y.iterations_to_target.has_value();
    if (rx != ry) return rx;
    if (rx && *x.iterations_to_target != *y.iterations_to_target) return *x.iterations_to_target < *y.iterations_to_target;
  }
  if (x.final_accuracy != y.final_accuracy) return x.final_accuracy > y.final_accuracy;
  if (x.iterations_run != y.iterations_run) return x.iterations_run < y.iterations_run;
  const auto pa = a.policy.dump();
  const auto pb = b.policy.dump();
  if (pa != pb) return pa < pb;
  if (a.lambda != b.lambda) return a.lambda < b.lambda;
  return a.seed < b.seed;
}

class PolicyDb {
 public:
  /// Opens (without creating) the database at `path`. A missing file is an
  /// empty database; the file appears on the first append.
  explicit PolicyDb(std::filesystem::path path) : path_(std::move(path)) { load(); }

  /// Appends a record and returns its id (its line index). An identical
  /// record already present returns the existing id; the same key with a
  /// different outcome throws KeyConflictError.
  std::size_t append(const TrialRecord& rec) {
    std::lock_guard lock(mutex_);
    const auto key = record_key(rec);
    if (auto it = index_.find(key); it != index_.end()) {
      if (!same_outcome(records_[it->second].outcome, rec.outcome)) {
        throw KeyConflictError("record conflict for task " + rec.task + ", lambda " + format_double(rec.lambda) +
                               ", seed " + std::to_string(rec.seed) + ": a different outcome is already stored");
      }
      return it->second;
    }
    // Canonicalize through JSON so the in-memory copy matches what a reload sees.
    const std::string line = record_to_json(rec).dump() + "\n";
    write_line(line);
    records_.push_back(record_from_json(Json::parse(line)));
    index_.emplace(key, records_.size() - 1);
    return records_.size() - 1;
  }

  std::vector<TrialRecord> query_top_k(const std::string& task, std::size_t k,
                                       Objective objective = Objective::MaxAccuracy) const {
    detail::require(k >= 1, "top-k: K must be >= 1");
    std::lock_guard lock(mutex_);
    std::vector<TrialRecord> hits;
    for (const auto& r : records_) {
      if (r.task == task) hits.push_back(r);
    }
    std::sort(hits.begin(), hits.end(),
              [&](const TrialRecord& a, const TrialRecord& b) { return record_ranks_before(a, b, objective); });
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

  std::vector<TrialRecord> records() const {
    std::lock_guard lock(mutex_);
    return records_;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
  }

  /// Problems noticed while loading (a dropped partial trailing line).
  const std::vector<std::string>& warnings() const { return warnings_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  void load() {
    std::error_code ec;
    if (!std::filesystem::exists(path_, ec)) return;
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw IoError("cannot open database " + path_.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();

    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      if (nl == std::string::npos) {
        // A crash mid-write leaves an unterminated tail; it was never a record.
        warnings_.push_back(path_.string() + ": ignoring partial trailing line (" + std::to_string(text.size() - pos) +
                            " bytes)");
        truncate_to_ = pos;
        return;
      }
      ++line_no;
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      const Json j = Json::parse(line, nullptr, false);
      if (j.is_discarded()) throw IoError(path_.string() + ":" + std::to_string(line_no) + ": malformed record");
      TrialRecord rec;
      try {
        rec = record_from_json(j, "line " + std::to_string(line_no));
      } catch (const ValidationError& e) {
        throw IoError(path_.string() + ": " + e.what());
      }
      index_.emplace(record_key(rec), records_.size());
      records_.push_back(std::move(rec));
    }
  }

  void write_line(const std::string& line) {
    if (truncate_to_) {
      // Drop the partial tail found at load before the first append.
      std::error_code ec;
      std::filesystem::resize_file(path_, *truncate_to_, ec);
      if (ec) throw IoError("cannot truncate partial line in " + path_.string() + ": " + ec.message());
      truncate_to_.reset();
    }
    if (path_.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(path_.parent_path(), ec);
    }
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw IoError("cannot open database " + path_.string() + ": " + std::strerror(errno));
    const ssize_t n = ::write(fd, line.data(), line.size());
    const int sync = ::fsync(fd);
    ::close(fd);
    if (n != static_cast<ssize_t>(line.size()) || sync != 0) {
      throw IoError("write to database " + path_.string() + " failed");
    }
  }

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::vector<TrialRecord> records_;
  std::map<RecordKey, std::size_t> index_;
  std::vector<std::string> warnings_;
  std::optional<std::size_t> truncate_to_;
};

}  // namespace lrforge

#pragma once

// `lr` subcommands. run() is the whole program minus process plumbing, so the
// tests can drive it with string streams and a fake environment.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/format.hpp"
#include "lrforge/policy_json.hpp"
#include "lrforge/schedule.hpp"
#include "lrforge/store.hpp"
#include "lrforge/trainer.hpp"
#include "lrforge/tuner.hpp"
#include "manifest.hpp"

namespace lrforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitDiverged = 4;

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline EnvLookup process_env() {
  return [](const std::string& name) -> std::optional<std::string> {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
  };
}

// Text helpers.

class Table {
 public:
  explicit Table(std::vector<std::string> headers) : headers_(std::move(headers)) {}
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  void print(std::ostream& os) const {
    std::vector<std::size_t> width(headers_.size());
    for (std::size_t c = 0; c < headers_.size(); ++c) width[c] = headers_[c].size();
    for (const auto& r : rows_) {
      for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
    }
    const auto line = [&](const std::vector<std::string>& cells) {
      std::string s;
      for (std::size_t c = 0; c < width.size(); ++c) {
        const std::string& v = c < cells.size() ? cells[c] : std::string();
        s += v;
        if (c + 1 < width.size()) s += std::string(width[c] - v.size() + 2, ' ');
      }
      while (!s.empty() && s.back() == ' ') s.pop_back();
      os << s << '\n';
    };
    line(headers_);
    std::size_t total = 0;
    for (auto w : width) total += w + 2;
    os << std::string(total > 2 ? total - 2 : 0, '-') << '\n';
    for (const auto& r : rows_) line(r);
  }

 private:
  std::vector<std::string> headers_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string value_text(const Json& v);

/// "FAMILY(k=0.1, l=25)" for nested policies, bare params otherwise.
inline std::string params_text(const Json& params) {
  std::string s;
  if (params.contains("segments")) {
    for (const auto& seg : params.at("segments")) {
      if (!s.empty()) s += "; ";
      s += value_text(seg.at("start")) + "-" + value_text(seg.at("end")) + " iter:" + value_text(seg.at("policy"));
    }
    return s;
  }
  for (const auto& [key, v] : params.items()) {
    if (!s.empty()) s += ", ";
    s += key + "=" + value_text(v);
  }
  return s;
}

inline std::string value_text(const Json& v) {
  if (v.is_object() && v.contains("family")) {
    return v.at("family").get<std::string>() + "(" + params_text(v.value("params", Json::object())) + ")";
  }
  if (v.is_array()) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + value_text(v[i]);
    return s + "]";
  }
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

inline std::string family_of(const Json& policy) { return policy.value("family", std::string("?")); }
inline std::string parameters_of(const Json& policy) { return params_text(policy.value("params", Json::object())); }

inline std::string percent(double accuracy) { return format_fixed(100.0 * accuracy, 2) + "%"; }

inline std::string iterations_text(const std::optional<Iteration>& it) {
  return it ? std::to_string(*it) : std::string("-");
}

// Files.

inline void write_output(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  body(out);
  out.flush();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

inline void write_json(const fs::path& path, const Json& j) {
  write_output(path, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

inline Json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ValidationError(what + ": malformed JSON: " + e.what());
  }
}

// Shared options and run state.

struct CommonOptions {
  std::string manifest;
  std::string db;
  std::string out_dir;
  std::size_t workers = 0;  // 0: available parallelism
  bool wall_clock = false;
};

struct Session {
  std::ostream& out;
  std::ostream& err;
  EnvLookup env;
  CommonOptions opt;

  /// --db, then $LRFORGE_DB, then the manifest's "db".
  std::optional<fs::path> db_path(const std::optional<fs::path>& from_manifest = std::nullopt) const {
    if (!opt.db.empty()) return fs::path(opt.db);
    if (auto v = env("LRFORGE_DB"); v && !v->empty()) return fs::path(*v);
    return from_manifest;
  }

  fs::path output_dir(const std::optional<fs::path>& from_manifest) const {
    if (!opt.out_dir.empty()) return fs::path(opt.out_dir);
    if (from_manifest) return *from_manifest;
    detail::fail("no output directory: set \"output_dir\" in the manifest or pass --out-dir");
  }

  /// Record timestamps stay 0 (byte-reproducible output) unless
  /// SOURCE_DATE_EPOCH is set or --wall-clock asks for the real time.
  std::int64_t timestamp() const {
    if (auto v = env("SOURCE_DATE_EPOCH"); v && !v->empty()) {
      try {
        return std::stoll(*v);
      } catch (const std::exception&) {
        detail::fail("SOURCE_DATE_EPOCH must be an integer, got \"" + *v + "\"");
      }
    }
    if (!opt.wall_clock) return 0;
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  TrialOutcome scrub(TrialOutcome o) const {
    if (!opt.wall_clock) o.wall_time_s = 0.0;
    return o;
  }
};

inline RunManifest load_run_manifest(const std::string& path) {
  detail::require(!path.empty(), "--manifest is required");
  const fs::path p(path);
  return parse_run_manifest(read_json_file(p), p.parent_path());
}

inline void append_records(Session& s, const std::optional<fs::path>& db, const std::vector<TrialRecord>& records) {
  if (!db) {
    s.err << "note: no database configured (--db or LRFORGE_DB); " << records.size() << " record(s) not stored\n";
    return;
  }
  PolicyDb store(*db);
  for (const auto& w : store.warnings()) s.err << "warning: " << w << '\n';
  for (const auto& r : records) store.append(r);
  s.out << "stored " << records.size() << " record(s) in " << db->string() << '\n';
}

// Commands.

struct EvalOptions {
  std::string policy;
  double lambda = 1.0;
  Iteration t_max = 0;
  Iteration stride = 1;
  std::string out;
};

inline int cmd_eval(Session& s, const EvalOptions& o) {
  std::string text = o.policy;
  if (!text.empty() && text.front() == '@') {
    std::ifstream in(text.substr(1), std::ios::binary);
    if (!in) throw IoError("cannot read " + text.substr(1));
    std::ostringstream buf;
    buf << in.rdbuf();
    text = buf.str();
  }
  const Json j = parse_json_text(text, "--policy");
  detail::require(!is_plateau_family(j), "--policy: plateau policies depend on training metrics; use `lr train`");
  detail::require(std::isfinite(o.lambda) && o.lambda > 0.0, "--lambda must be finite and > 0");
  const Schedule sched(policy_from_json(j, "policy"));
  const auto trace = sample_trace(ScaledSchedule(o.lambda, sched), o.t_max, o.stride);
  if (o.out.empty()) {
    write_trace_csv(s.out, trace);
  } else {
    write_output(o.out, [&](std::ostream& os) { write_trace_csv(os, trace); });
  }
  return kExitOk;
}

inline int cmd_train(Session& s) {
  const auto m = load_run_manifest(s.opt.manifest);
  detail::require(m.policy.has_value(), "manifest.policy is required for `lr train`");
  const auto dir = s.output_dir(m.output_dir);
  const auto trace = run_trial(m.model, *m.dataset.data, instantiate(*m.policy, m.lambda), m.optimizer, m.train);
  const auto outcome = s.scrub(trace.outcome);

  write_output(dir / "iterations.csv", [&](std::ostream& os) { write_iterations_csv(os, trace); });
  write_output(dir / "evals.csv", [&](std::ostream& os) { write_evals_csv(os, trace); });
  const Json policy = template_to_json(*m.policy);
  write_json(dir / "outcome.json", {{"policy", policy},
                                    {"lambda", m.lambda},
                                    {"model", model_to_json(m.model)},
                                    {"optimizer", optimizer_to_json(m.optimizer)},
                                    {"train", train_config_to_json(m.train)},
                                    {"outcome", outcome_to_json(outcome, s.opt.wall_clock)}});

  const auto objective = m.train.target_accuracy ? Objective::MinCostToTarget : Objective::MaxAccuracy;
  const auto task = task_id(m.dataset.name, model_kind(m.model), objective);
  Table t({"LR Policy", "Parameters", "lambda", "Accuracy", "Best", "#Iter @ Target Acc", "Status"});
  t.add({family_of(policy), parameters_of(policy), format_double(m.lambda), percent(outcome.final_accuracy),
         percent(outcome.best_accuracy), iterations_text(outcome.iterations_to_target),
         outcome.diverged ? "diverged" : "ok"});
  s.out << "task " << task << ", " << outcome.iterations_run << " of " << m.train.budget << " iterations\n";
  t.print(s.out);
  if (s.opt.wall_clock) s.out << "wall time " << format_fixed(trace.outcome.wall_time_s, 3) << " s\n";

  TrialRecord rec{task, policy, m.lambda, m.train.seed, outcome, s.timestamp()};
  append_records(s, s.db_path(m.db), {rec});
  if (outcome.diverged) {
    s.err << "lr: the trial diverged\n";
    return kExitDiverged;
  }
  return kExitOk;
}

inline void print_ranking(Session& s, const TuneResult& r, const std::string& title) {
  s.out << title << '\n';
  if (r.objective == Objective::MinCostToTarget) {
    Table t({"Rank", "LR Policy", "Parameters", "lambda", "Accuracy", "#Iter @ Target Acc", "Speedup"});
    for (std::size_t i = 0; i < r.ranking.size(); ++i) {
      const auto& c = r.ranking[i];
      const Json p = template_to_json(c.policy);
      const auto sp = r.speedup(c);
      t.add({std::to_string(i + 1), family_of(p), parameters_of(p), format_double(c.lambda), percent(c.metric_mean),
             c.all_diverged ? "diverged" : c.reached_target ? format_fixed(c.cost_iters, 0) : "-",
             sp ? format_fixed(*sp, 2) + "x" : "-"});
    }
    t.print(s.out);
  } else {
    Table t({"Rank", "LR Policy", "Parameters", "lambda", "Accuracy (mean)", "Std", "Iterations"});
    for (std::size_t i = 0; i < r.ranking.size(); ++i) {
      const auto& c = r.ranking[i];
      const Json p = template_to_json(c.policy);
      t.add({std::to_string(i + 1), family_of(p), parameters_of(p), format_double(c.lambda),
             c.all_diverged ? "diverged" : percent(c.metric_mean), format_fixed(100.0 * c.metric_std, 2),
             format_fixed(c.cost_iters, 0)});
    }
    t.print(s.out);
  }
}

inline std::vector<TrialRecord> cell_records(const Session& s, const std::string& task, const TuneResult& r,
                                             std::int64_t stamp) {
  std::vector<TrialRecord> out;
  for (const auto& c : r.ranking) {
    for (const auto& tr : c.trials) {
      out.push_back({task, template_to_json(c.policy), c.lambda, tr.seed, s.scrub(tr.outcome), stamp});
    }
  }
  return out;
}

inline int cmd_tune(Session& s) {
  const auto m = load_run_manifest(s.opt.manifest);
  detail::require(m.search.has_value(), "manifest.search is required for `lr tune`");
  const auto dir = s.output_dir(m.output_dir);
  const auto& space = *m.search;
  const auto ctx = m.context();
  const auto task = task_id(m.dataset.name, model_kind(m.model), space.objective);
  const auto stamp = s.timestamp();
  std::vector<TrialRecord> records;
  TuneResult final_result;

  if (!m.phases.empty()) {
    detail::require(!m.random, "manifest: \"phases\" and \"random\" cannot be combined");
    const auto tuned = tune_phases(space, m.phases, ctx, s.opt.workers);
    std::vector<policy::Segment> fixed;
    for (std::size_t i = 0; i < tuned.phases.size(); ++i) {
      const auto& phase = tuned.phases[i];
      write_output(dir / ("phase_" + std::to_string(i) + "_leaderboard.csv"),
                   [&](std::ostream& os) { write_leaderboard_csv(os, phase); });
      print_ranking(s, phase, "phase " + std::to_string(i) + ": iterations [" + std::to_string(m.phases[i]) + ", " +
                                  std::to_string(m.phases[i + 1]) + ")");
      s.out << '\n';
      // Each phase trial trained the composite of the earlier winners plus
      // its own segment; that composite is the policy stored.
      for (const auto& c : phase.ranking) {
        policy::Composite trained;
        trained.segments = fixed;
        trained.segments.push_back(
            {m.phases[i], m.phases[i + 1], scale_policy(std::get<PolicySpec>(c.policy), c.lambda)});
        const Json pj = policy_to_json(PolicySpec(std::move(trained)));
        for (const auto& tr : c.trials) records.push_back({task, pj, 1.0, tr.seed, s.scrub(tr.outcome), stamp});
      }
      const auto& w = phase.winner();
      fixed.push_back({m.phases[i], m.phases[i + 1], scale_policy(std::get<PolicySpec>(w.policy), w.lambda)});
    }
    const Json composite = policy_to_json(tuned.composite);
    write_json(dir / "composite.json", composite);
    Json phases = Json::array();
    for (const auto& p : tuned.phases) phases.push_back(tune_result_to_json(p));
    write_json(dir / "tune.json", {{"task", task}, {"phases", phases}, {"composite", composite}});
    s.out << "composed MULTI: " << parameters_of(composite) << '\n';
    final_result = tuned.phases.back();
  } else {
    if (m.random) {
      final_result = random_search(space, ctx, m.random->n, m.random->seed, s.opt.workers);
    } else if (space.objective == Objective::MinCostToTarget) {
      final_result = cost_effective(space, ctx, s.opt.workers);
    } else {
      final_result = grid_search(space, ctx, s.opt.workers);
    }
    write_output(dir / "leaderboard.csv", [&](std::ostream& os) { write_leaderboard_csv(os, final_result); });
    Json j = tune_result_to_json(final_result);
    j["task"] = task;
    write_json(dir / "tune.json", j);
    print_ranking(s, final_result, "task " + task + ", budget " + std::to_string(final_result.budget) + " iterations");
    records = cell_records(s, task, final_result, stamp);
  }

  append_records(s, s.db_path(m.db), records);
  const bool all_diverged = std::all_of(final_result.ranking.begin(), final_result.ranking.end(),
                                        [](const CellResult& c) { return c.all_diverged; });
  if (all_diverged) {
    s.err << "lr: every trial diverged\n";
    return kExitDiverged;
  }
  return kExitOk;
}

inline int cmd_range_test(Session& s) {
  const auto m = load_run_manifest(s.opt.manifest);
  detail::require(!m.k_grid.empty(), "manifest.k_grid is required for `lr range-test`");
  const auto dir = s.output_dir(m.output_dir);
  const auto r = range_test(m.context(), m.k_grid, m.range, s.opt.workers);

  write_output(dir / "range_test.csv", [&](std::ostream& os) {
    os << "k,accuracy,diverged\n";
    for (const auto& p : r.points) os << format_double(p.k) << ',' << format_double(p.accuracy) << ',' << p.diverged << '\n';
  });
  Json points = Json::array();
  for (const auto& p : r.points) points.push_back({{"k", p.k}, {"accuracy", p.accuracy}, {"diverged", p.diverged}});
  write_json(dir / "range_test.json",
             {{"points", points}, {"best_k", r.best_k}, {"k_low", r.k_low}, {"k_high", r.k_high}});

  Table t({"k", "Accuracy", "Status"});
  for (const auto& p : r.points) {
    t.add({format_double(p.k), p.diverged ? "-" : percent(p.accuracy),
           p.diverged ? "diverged" : p.k == r.best_k ? "best" : ""});
  }
  t.print(s.out);
  s.out << "recommended k range [" << format_double(r.k_low) << ", " << format_double(r.k_high) << "]\n";
  return kExitOk;
}

struct TopKOptions {
  std::string task;
  std::size_t k = 5;
  std::string objective;
};

inline int cmd_top_k(Session& s, const TopKOptions& o) {
  const auto db = s.db_path();
  detail::require(db.has_value(), "no database: pass --db or set LRFORGE_DB");
  // The task id ends in its objective; that is the default ranking.
  std::string name = o.objective;
  if (name.empty()) name = o.task.ends_with("/min-cost") ? "min-cost" : "max-accuracy";
  detail::require(name == "max-accuracy" || name == "min-cost", "--objective must be max-accuracy or min-cost");
  const auto objective = name == "min-cost" ? Objective::MinCostToTarget : Objective::MaxAccuracy;

  const PolicyDb store(*db);
  for (const auto& w : store.warnings()) s.err << "warning: " << w << '\n';
  const auto top = store.query_top_k(o.task, o.k, objective);
  if (top.empty()) {
    s.out << "no records for task " << o.task << '\n';
    return kExitOk;
  }
  Table t({"Rank", "LR Policy", "Parameters", "lambda", "Seed", "Accuracy", "#Iter @ Target Acc"});
  for (std::size_t i = 0; i < top.size(); ++i) {
    const auto& r = top[i];
    t.add({std::to_string(i + 1), family_of(r.policy), parameters_of(r.policy), format_double(r.lambda),
           std::to_string(r.seed), r.outcome.diverged ? "diverged" : percent(r.outcome.final_accuracy),
           iterations_text(r.outcome.iterations_to_target)});
  }
  s.out << "top " << top.size() << " for " << o.task << " by " << name << '\n';
  t.print(s.out);
  return kExitOk;
}

inline int cmd_surface(Session& s) {
  detail::require(!s.opt.manifest.empty(), "--manifest is required");
  const fs::path p(s.opt.manifest);
  const auto m = parse_surface_manifest(read_json_file(p), p.parent_path());
  const auto dir = s.output_dir(m.output_dir);
  const auto target = global_minimizer(m.surface);

  Table t({"LR Policy", "Parameters", "Final x", "Final y", "Final value", "Distance to global min"});
  bool any_finite = false;
  for (const auto& np : m.policies) {
    const auto path = run_surface_trial(m.surface, m.start, Schedule(np.policy), m.optimizer, m.iterations);
    write_output(dir / ("path_" + np.name + ".csv"), [&](std::ostream& os) { write_path_csv(os, path); });
    const Json pj = policy_to_json(np.policy);
    if (path.diverged) {
      t.add({np.name, parameters_of(pj), "-", "-", "diverged", "-"});
      continue;
    }
    any_finite = true;
    const auto& last = path.points.back();
    const double dist = std::hypot(last.point[0] - target[0], last.point[1] - target[1]);
    t.add({np.name, parameters_of(pj), format_fixed(last.point[0], 4), format_fixed(last.point[1], 4),
           format_fixed(last.value, 4), format_fixed(dist, 4)});
  }
  s.out << m.iterations << " iterations from (" << format_double(m.start[0]) << ", " << format_double(m.start[1])
        << "); global minimum at (" << format_double(target[0]) << ", " << format_double(target[1]) << ")\n";
  t.print(s.out);
  if (!any_finite) {
    s.err << "lr: every path diverged\n";
    return kExitDiverged;
  }
  return kExitOk;
}

// Entry point.

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
               EnvLookup env = process_env()) {
  CLI::App app{"Learning-rate policy evaluation, training and tuning", "lr"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Session session{out, err, std::move(env), {}};
  auto& common = session.opt;
  const auto add_manifest = [&](CLI::App* sub) {
    sub->add_option("--manifest", common.manifest, "Run manifest (JSON)")->required();
    sub->add_option("--out-dir", common.out_dir, "Output directory (overrides the manifest's output_dir)");
  };
  const auto add_run = [&](CLI::App* sub) {
    add_manifest(sub);
    sub->add_option("--db", common.db, "Policy database (JSONL); overrides $LRFORGE_DB and the manifest's db");
    sub->add_option("--workers", common.workers, "Concurrent trials (0 = available parallelism)")
        ->check(CLI::NonNegativeNumber);
    sub->add_flag("--wall-clock", common.wall_clock,
                  "Record wall time and the current timestamp (outputs are then not reproducible)");
  };

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Write the iteration,lr trace of a policy");
  eval_cmd->add_option("--policy", eval.policy, "Policy JSON, or @file to read it from a file")->required();
  eval_cmd->add_option("--t-max", eval.t_max, "Last iteration to sample")->required()->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--stride", eval.stride, "Sampling stride")->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_option("--lambda", eval.lambda, "Scale factor applied to the policy")->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "Output CSV (default: stdout)");

  auto* train_cmd = app.add_subcommand("train", "Run one training trial from a manifest");
  add_run(train_cmd);
  auto* tune_cmd = app.add_subcommand("tune", "Grid, random, cost-to-target or multi-phase LR tuning");
  add_run(tune_cmd);
  auto* range_cmd = app.add_subcommand("range-test", "Short fixed-LR trials to bracket a good k");
  add_manifest(range_cmd);
  range_cmd->add_option("--workers", common.workers, "Concurrent trials (0 = available parallelism)")
      ->check(CLI::NonNegativeNumber);

  TopKOptions topk;
  auto* topk_cmd = app.add_subcommand("top-k", "Best stored records for a task");
  topk_cmd->add_option("--task", topk.task, "Task id, dataset/model/objective")->required();
  topk_cmd->add_option("--k", topk.k, "Number of records")->capture_default_str()->check(CLI::PositiveNumber);
  topk_cmd->add_option("--objective", topk.objective, "max-accuracy or min-cost (default: from the task id)");
  topk_cmd->add_option("--db", common.db, "Policy database (JSONL); overrides $LRFORGE_DB");

  auto* surface_cmd = app.add_subcommand("surface", "Optimizer paths on a 2-D surface, one CSV per policy");
  add_manifest(surface_cmd);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*eval_cmd) return cmd_eval(session, eval);
    if (*train_cmd) return cmd_train(session);
    if (*tune_cmd) return cmd_tune(session);
    if (*range_cmd) return cmd_range_test(session);
    if (*topk_cmd) return cmd_top_k(session, topk);
    if (*surface_cmd) return cmd_surface(session);
  } catch (const ValidationError& e) {
    err << "lr: error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const Json::exception& e) {
    err << "lr: error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const AllDivergedError& e) {
    err << "lr: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const KeyConflictError& e) {
    err << "lr: error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "lr: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace lrforge::cli

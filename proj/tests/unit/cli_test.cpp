#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"

namespace lrforge {
namespace {

namespace fs = std::filesystem;

const fs::path kManifests = fs::path(LRFORGE_SOURCE_DIR) / "manifests";

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result lr(std::vector<std::string> args, std::map<std::string, std::string> env = {}) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err, [env](const std::string& k) -> std::optional<std::string> {
    if (auto it = env.find(k); it != env.end()) return it->second;
    return std::nullopt;
  });
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("lrforge_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_manifest(const std::string& name, const Json& j) const {
    const auto p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }
  static Json moons_manifest() {
    return Json::parse(R"({
      "dataset": {"kind": "moons", "n": 300, "noise": 0.2, "seed": 1},
      "model": {"kind": "mlp", "d_in": 2, "hidden": 8, "n_classes": 2},
      "train": {"batch_size": 16, "budget": 200, "eval_every": 50, "seed": 0},
      "output_dir": "out"
    })");
  }
  fs::path dir_;
};

TEST_F(Cli, EvalFixTrace) {
  const auto r = lr({"eval", "--policy", R"({"family":"FIX","params":{"k":0.1}})", "--t-max", "10", "--stride", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "iteration,lr\n0,0.1\n5,0.1\n10,0.1\n");
}

TEST_F(Cli, EvalMatchesTheLibraryPointForPoint) {
  const PolicySpec triexp = policy::TriExp{0.05, 0.25, 25, 0.9};
  const auto out = dir_ / "trace.csv";
  const auto r = lr({"eval", "--policy", policy_to_json(triexp).dump(), "--t-max", "140", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(slurp(out));
  ASSERT_EQ(rows.size(), 142u);
  const Schedule s(triexp);
  for (Iteration t = 0; t <= 140; ++t) {
    EXPECT_EQ(rows[static_cast<std::size_t>(t) + 1], std::to_string(t) + "," + format_double(s(t)));
  }
}

TEST_F(Cli, EvalReadsPolicyFilesAndScales) {
  const auto p = write_manifest("p.json", Json::parse(R"({"family":"STEP","params":{"k":1,"gamma":0.5,"l":2}})"));
  const auto r = lr({"eval", "--policy", "@" + p.string(), "--t-max", "4", "--stride", "2", "--lambda", "0.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "iteration,lr\n0,0.5\n2,0.25\n4,0.125\n");
}

TEST_F(Cli, EvalValidationErrorsExitTwo) {
  EXPECT_EQ(lr({"eval", "--policy", R"({"family":"FIX")", "--t-max", "10"}).code, 2);
  const auto bad = lr({"eval", "--policy", R"({"family":"TRI","params":{"k0":0.5,"k1":0.1,"l":10}})", "--t-max", "10"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("k1"), std::string::npos) << bad.err;
  EXPECT_EQ(lr({"eval", "--policy", R"({"family":"NOPE"})", "--t-max", "10"}).code, 2);
  EXPECT_EQ(lr({"eval", "--policy", R"({"family":"PLATEAU_REDUCE","params":{"lr":0.1}})", "--t-max", "3"}).code, 2);
  EXPECT_EQ(lr({"eval", "--policy", R"({"family":"FIX","params":{"k":0.1}})", "--t-max", "10", "--stride", "0"}).code,
            2);
  EXPECT_EQ(lr({"eval", "--t-max", "10"}).code, 2);
  EXPECT_EQ(lr({"frobnicate"}).code, 2);
  EXPECT_EQ(lr({}).code, 2);
}

TEST_F(Cli, HelpOnEverySubcommand) {
  const std::map<std::string, std::vector<std::string>> flags = {
      {"eval", {"--policy", "--t-max", "--stride", "--lambda", "--out"}},
      {"train", {"--manifest", "--out-dir", "--db", "--workers", "--wall-clock"}},
      {"tune", {"--manifest", "--out-dir", "--db", "--workers", "--wall-clock"}},
      {"range-test", {"--manifest", "--out-dir", "--workers"}},
      {"top-k", {"--task", "--k", "--objective", "--db"}},
      {"surface", {"--manifest", "--out-dir"}},
  };
  for (const auto& [cmd, expected] : flags) {
    const auto r = lr({cmd, "--help"});
    EXPECT_EQ(r.code, 0) << cmd;
    for (const auto& f : expected) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " " << f;
  }
  EXPECT_EQ(lr({"--help"}).code, 0);
}

TEST_F(Cli, SurfaceWritesOnePathPerPolicy) {
  const auto r = lr({"surface", "--manifest", (kManifests / "surface_basins.json").string(), "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"FIX", "NSTEP", "TRIEXP"}) {
    const auto rows = lines(slurp(dir_ / (std::string("path_") + name + ".csv")));
    ASSERT_EQ(rows.size(), 142u) << name;
    EXPECT_EQ(rows[0], "iteration,x,y,value");
  }
  const auto last_value = [&](const char* name) {
    const auto row = lines(slurp(dir_ / (std::string("path_") + name + ".csv"))).back();
    return std::stod(row.substr(row.rfind(',') + 1));
  };
  EXPECT_LT(last_value("NSTEP"), last_value("FIX"));
}

TEST_F(Cli, TuneGridWritesTwentyFiveRows) {
  const auto db = dir_ / "db.jsonl";
  const auto r = lr({"tune", "--manifest", (kManifests / "tune_grid.json").string(), "--out-dir", dir_.string(),
                     "--db", db.string(), "--workers", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(slurp(dir_ / "leaderboard.csv"));
  ASSERT_EQ(rows.size(), 26u);
  EXPECT_EQ(rows[0], "rank,policy,lambda,metric_mean,metric_std,cost_iters");
  EXPECT_EQ(lines(slurp(db)).size(), 25u);
  // Only the declared outputs appear.
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir_)) names.insert(e.path().filename().string());
  EXPECT_EQ(names, (std::set<std::string>{"db.jsonl", "leaderboard.csv", "tune.json"}));
  // Rerunning against the same database is idempotent.
  const auto before = slurp(db);
  const auto again = lr({"tune", "--manifest", (kManifests / "tune_grid.json").string(), "--out-dir", dir_.string(),
                         "--db", db.string()});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(slurp(db), before);
}

TEST_F(Cli, TrainIsByteReproducible) {
  auto m = moons_manifest();
  m["policy"] = Json::parse(R"({"family":"SIN2","params":{"k0":0.01,"k1":0.3,"l":40}})");
  const auto path = write_manifest("run.json", m);
  const auto a = lr({"train", "--manifest", path.string(), "--out-dir", (dir_ / "a").string()},
                    {{"LRFORGE_DB", (dir_ / "a.jsonl").string()}});
  const auto b = lr({"train", "--manifest", path.string(), "--out-dir", (dir_ / "b").string(), "--workers", "8"},
                    {{"LRFORGE_DB", (dir_ / "b.jsonl").string()}});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  for (const char* f : {"iterations.csv", "evals.csv", "outcome.json"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(dir_ / "a.jsonl"), slurp(dir_ / "b.jsonl"));
  EXPECT_EQ(lines(slurp(dir_ / "a" / "iterations.csv")).size(), 201u);
  const Json rec = Json::parse(slurp(dir_ / "a.jsonl"));
  EXPECT_EQ(rec.at("task"), "moons/mlp/max-accuracy");
  EXPECT_EQ(rec.at("timestamp"), 0);
  EXPECT_FALSE(rec.at("outcome").contains("wall_time_s"));

  const auto stamped = lr({"train", "--manifest", path.string(), "--out-dir", (dir_ / "c").string(), "--db",
                           (dir_ / "c.jsonl").string()},
                          {{"SOURCE_DATE_EPOCH", "1700000000"}});
  ASSERT_EQ(stamped.code, 0) << stamped.err;
  EXPECT_EQ(Json::parse(slurp(dir_ / "c.jsonl")).at("timestamp"), 1700000000);
}

TEST_F(Cli, ManifestDbAndOutputDirResolveAgainstTheManifest) {
  auto m = moons_manifest();
  m["policy"] = Json::parse(R"({"family":"FIX","params":{"k":0.1}})");
  m["db"] = "records.jsonl";
  const auto path = write_manifest("run.json", m);
  const auto r = lr({"train", "--manifest", path.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "out" / "evals.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "records.jsonl"));
}

TEST_F(Cli, ManifestErrors) {
  auto m = moons_manifest();
  m["policy"] = Json::parse(R"({"family":"FIX","params":{"k":0.1}})");
  m["surprise"] = 1;
  EXPECT_EQ(lr({"train", "--manifest", write_manifest("a.json", m).string()}).code, 2);
  m.erase("surprise");
  m["model"]["d_in"] = 3;
  EXPECT_EQ(lr({"train", "--manifest", write_manifest("b.json", m).string()}).code, 2);
  m = moons_manifest();
  EXPECT_EQ(lr({"train", "--manifest", write_manifest("c.json", m).string()}).code, 2);  // no policy
  m.erase("output_dir");
  m["policy"] = Json::parse(R"({"family":"FIX","params":{"k":0.1}})");
  EXPECT_EQ(lr({"train", "--manifest", write_manifest("d.json", m).string()}).code, 2);  // no output dir
  std::ofstream(dir_ / "broken.json") << "{";
  EXPECT_EQ(lr({"train", "--manifest", (dir_ / "broken.json").string()}).code, 2);
  EXPECT_EQ(lr({"train", "--manifest", (dir_ / "missing.json").string()}).code, 3);
  m = moons_manifest();
  m["dataset"] = Json::parse(R"({"kind":"idx","train_images":"nope","train_labels":"nope",
                                 "test_images":"nope","test_labels":"nope"})");
  m["model"]["d_in"] = 784;
  EXPECT_EQ(lr({"train", "--manifest", write_manifest("e.json", m).string()}).code, 3);
}

TEST_F(Cli, DivergenceExitsFour) {
  auto m = moons_manifest();
  m["policy"] = Json::parse(R"({"family":"FIX","params":{"k":1e6}})");
  const auto r = lr({"train", "--manifest", write_manifest("run.json", m).string()});
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "out" / "outcome.json"));

  m.erase("policy");
  m["k_grid"] = {1e6, 1e7};
  m["range_test"] = {{"trial_fraction", 1.0}};
  EXPECT_EQ(lr({"range-test", "--manifest", write_manifest("rt.json", m).string()}).code, 4);

  m.erase("k_grid");
  m.erase("range_test");
  m["search"] = Json::parse(R"({"templates":[{"family":"FIX","params":{"k":1}}],"lambda_grid":[1e6,1e7]})");
  EXPECT_EQ(lr({"tune", "--manifest", write_manifest("tune.json", m).string()}).code, 4);
}

TEST_F(Cli, ConflictingRecordExitsThree) {
  auto m = moons_manifest();
  m["policy"] = Json::parse(R"({"family":"FIX","params":{"k":0.1}})");
  const auto db = (dir_ / "db.jsonl").string();
  ASSERT_EQ(lr({"train", "--manifest", write_manifest("a.json", m).string(), "--db", db}).code, 0);
  m["train"]["budget"] = 100;  // same key, different outcome
  const auto r = lr({"train", "--manifest", write_manifest("b.json", m).string(), "--db", db});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("conflict"), std::string::npos) << r.err;
}

TEST_F(Cli, TopKOnASeededDatabase) {
  const auto db = dir_ / "db.jsonl";
  {
    PolicyDb store(db);
    const std::vector<std::pair<std::string, double>> seeded = {
        {"NSTEP", 0.9238}, {"POLY", 0.9239}, {"TRIEXP", 0.9276}, {"SINEXP", 0.9281}, {"MULTI", 0.9291}};
    for (const auto& [family, acc] : seeded) {
      TrialRecord r;
      r.task = "cifar10/resnet/max-accuracy";
      r.policy = {{"family", family}, {"params", Json::object()}};
      r.outcome.final_accuracy = acc;
      r.outcome.best_accuracy = acc;
      r.outcome.iterations_run = 64000;
      store.append(r);
    }
  }
  const auto r = lr({"top-k", "--task", "cifar10/resnet/max-accuracy", "--k", "3"},
                    {{"LRFORGE_DB", db.string()}});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 6u) << r.out;  // title, header, rule, 3 rows
  EXPECT_EQ(rows[3].substr(0, 9), "1     MUL");
  EXPECT_NE(rows[3].find("92.91%"), std::string::npos);
  EXPECT_NE(rows[4].find("92.81%"), std::string::npos);

  const auto none = lr({"top-k", "--task", "nope/x/max-accuracy", "--db", db.string()});
  EXPECT_EQ(none.code, 0);
  EXPECT_NE(none.out.find("no records"), std::string::npos);
  EXPECT_EQ(lr({"top-k", "--task", "t"}).code, 2);  // no database configured
  EXPECT_EQ(lr({"top-k", "--task", "t", "--k", "0", "--db", db.string()}).code, 2);
}

TEST_F(Cli, CostTuneReportsSpeedup) {
  auto m = moons_manifest();
  m["train"]["budget"] = 1000;
  m["search"] = Json::parse(R"({"templates":[{"family":"FIX","params":{"k":0.2}},{"family":"FIX","params":{"k":1e-4}}],
                                "lambda_grid":[1],"objective":"min-cost","target_accuracy":0.8})");
  const auto r = lr({"tune", "--manifest", write_manifest("tune.json", m).string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("#Iter @ Target Acc"), std::string::npos);
  EXPECT_NE(r.out.find("Speedup"), std::string::npos);
  const Json j = Json::parse(slurp(dir_ / "out" / "tune.json"));
  EXPECT_EQ(j.at("task"), "moons/mlp/min-cost");
  EXPECT_TRUE(j.at("ranking")[0].contains("speedup"));
}

}  // namespace
}  // namespace lrforge

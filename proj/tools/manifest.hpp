#pragma once

// Run manifests: the JSON documents `lr train/tune/range-test/surface` read.
// Relative paths inside a manifest resolve against the manifest's directory.

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/model.hpp"
#include "lrforge/optim.hpp"
#include "lrforge/policy_json.hpp"
#include "lrforge/problems.hpp"
#include "lrforge/trainer.hpp"
#include "lrforge/tuner.hpp"

namespace lrforge::cli {

namespace fs = std::filesystem;

inline Json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return Json::parse(buf.str());
  } catch (const Json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

struct LoadedData {
  std::string name;  // dataset part of the task id
  std::shared_ptr<const SplitDataset> data;
};

/// {"kind": "moons" | "blobs" | "idx", ...}; "name" overrides the task name.
inline LoadedData load_dataset(const Json& j, const fs::path& base, const std::string& context = "dataset") {
  detail::ParamReader r(j, context);
  const std::string kind = r.string("kind");
  LoadedData out;
  out.name = r.string("name", kind);
  detail::require(!out.name.empty() && out.name.find('/') == std::string::npos,
                  context + ".name must be non-empty and contain no '/'");
  auto data = std::make_shared<SplitDataset>();
  if (kind == "moons") {
    const auto seed = static_cast<std::uint64_t>(r.integer("seed", 0));
    const auto n = r.integer("n", 1000);
    detail::require(n >= 10, context + ".n must be >= 10");
    *data = gen_moons(seed, static_cast<std::size_t>(n), r.number("noise", 0.1));
  } else if (kind == "blobs") {
    const auto seed = static_cast<std::uint64_t>(r.integer("seed", 0));
    const auto per_class = r.integer("n_per_class", 200);
    const auto classes = r.integer("n_classes", 3);
    const auto d = r.integer("d", 2);
    detail::require(per_class >= 5 && classes >= 2 && d >= 1, context + ": blobs need n_per_class >= 5, n_classes >= 2, d >= 1");
    *data = gen_blobs(seed, static_cast<std::size_t>(per_class), static_cast<int>(classes), static_cast<std::size_t>(d),
                      r.number("separation", 4.0));
  } else if (kind == "idx") {
    const auto classes = static_cast<int>(r.integer("n_classes", 0));
    data->train = load_idx(resolve(base, r.string("train_images")).string(),
                           resolve(base, r.string("train_labels")).string(), Split::Train, classes);
    data->test = load_idx(resolve(base, r.string("test_images")).string(),
                          resolve(base, r.string("test_labels")).string(), Split::Test, classes);
    detail::require(data->train.n_features == data->test.n_features, context + ": train and test image sizes differ");
    const int c = std::max(data->train.n_classes, data->test.n_classes);
    data->train.n_classes = c;
    data->test.n_classes = c;
    if (r.has("limit_train")) {
      const auto limit = static_cast<std::size_t>(r.integer("limit_train"));
      if (limit < data->train.size()) {
        data->train.labels.resize(limit);
        data->train.features.resize(limit * data->train.n_features);
      }
    }
  } else {
    detail::fail(context + ".kind: unknown dataset \"" + kind + "\" (expected moons, blobs or idx)");
  }
  r.finish();
  out.data = std::move(data);
  return out;
}

inline std::string model_kind(const ModelSpec& m) {
  return std::holds_alternative<model::Linear>(m) ? "linear" : "mlp";
}

/// Converts time parameters given in epochs into iterations.
inline PolicyTemplate template_in_iterations(const PolicyTemplate& t, Iteration epoch_len) {
  if (const auto* spec = std::get_if<PolicySpec>(&t)) return epochs_to_iterations(*spec, epoch_len);
  auto c = std::get<PlateauConfig>(t);
  for (auto& p : c.next_policies) p = epochs_to_iterations(p, epoch_len);
  return c;
}

struct RandomDraws {
  std::size_t n = 5;
  std::uint64_t seed = 0;
};

struct RunManifest {
  fs::path base_dir;
  LoadedData dataset;
  ModelSpec model = model::Linear{};
  OptimizerSpec optimizer;
  TrainConfig train;
  std::optional<PolicyTemplate> policy;  // train
  double lambda = 1.0;                   // train
  std::optional<SearchSpace> search;     // tune
  std::optional<RandomDraws> random;     // tune, random mode
  std::vector<Iteration> phases;         // tune, multi-policy composition
  std::vector<double> k_grid;            // range-test
  RangeTestOptions range;
  std::optional<fs::path> output_dir;
  std::optional<fs::path> db;

  TrialContext context() const { return {model, dataset.data, optimizer, train}; }
};

inline RunManifest parse_run_manifest(const Json& j, const fs::path& base_dir) {
  detail::ParamReader r(j, "manifest");
  RunManifest m;
  m.base_dir = base_dir;
  m.dataset = load_dataset(r.raw("dataset"), base_dir);
  m.model = model_from_json(r.raw("model"));
  validate(m.model);
  if (r.has("optimizer")) m.optimizer = optimizer_from_json(r.raw("optimizer"));
  if (r.has("train")) m.train = train_config_from_json(r.raw("train"));
  const auto& d = m.dataset.data->train;
  detail::require(input_dim(m.model) == d.n_features,
                  "manifest.model: d_in " + std::to_string(input_dim(m.model)) + " does not match the dataset's " +
                      std::to_string(d.n_features) + " features");
  detail::require(static_cast<int>(output_dim(m.model)) >= d.n_classes,
                  "manifest.model: n_classes is smaller than the dataset's " + std::to_string(d.n_classes));

  const std::string unit = r.string("schedule_unit", "iterations");
  detail::require(unit == "iterations" || unit == "epochs",
                  "manifest.schedule_unit must be \"iterations\" or \"epochs\"");
  const auto convert = [&](PolicyTemplate t) {
    return unit == "epochs" ? template_in_iterations(t, epoch_length(m.train, d.size())) : t;
  };

  if (r.has("policy")) {
    m.policy = convert(template_from_json(r.raw("policy"), "manifest.policy"));
    if (const auto* spec = std::get_if<PolicySpec>(&*m.policy)) validate(*spec);
  }
  m.lambda = r.number("lambda", 1.0);
  detail::require(std::isfinite(m.lambda) && m.lambda > 0.0, "manifest.lambda must be finite and > 0");
  if (r.has("search")) {
    m.search = search_space_from_json(r.raw("search"), "manifest.search");
    for (auto& t : m.search->templates) t = convert(t);
  }
  if (r.has("random")) {
    detail::ParamReader rr(r.raw("random"), "manifest.random");
    RandomDraws draws;
    const auto n = rr.integer("n", 5);
    detail::require(n >= 1, "manifest.random.n must be >= 1");
    draws.n = static_cast<std::size_t>(n);
    draws.seed = static_cast<std::uint64_t>(rr.integer("seed", 0));
    rr.finish();
    m.random = draws;
  }
  if (r.has("phases")) {
    for (auto b : r.integers("phases")) m.phases.push_back(b);
  }
  if (r.has("k_grid")) m.k_grid = r.numbers("k_grid");
  if (r.has("range_test")) {
    detail::ParamReader rr(r.raw("range_test"), "manifest.range_test");
    m.range.trial_fraction = rr.number("trial_fraction", m.range.trial_fraction);
    m.range.tolerance = rr.number("tolerance", m.range.tolerance);
    rr.finish();
  }
  if (r.has("output_dir")) m.output_dir = resolve(base_dir, r.string("output_dir"));
  if (r.has("db")) m.db = resolve(base_dir, r.string("db"));
  r.finish();
  return m;
}

struct NamedPolicy {
  std::string name;
  PolicySpec policy;
};

struct SurfaceManifest {
  Surface2D surface;
  Vec2 start{};
  Iteration iterations = 0;
  OptimizerSpec optimizer;
  std::vector<NamedPolicy> policies;
  std::optional<fs::path> output_dir;
};

inline Vec2 read_point(const Json& j, const std::string& context) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    detail::fail(context + " must be a pair of numbers [x, y]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

/// {"kind": "quadratic" | "rosenbrock" | "multi_basin", ...}
inline Surface2D surface_from_json(const Json& j, const std::string& context = "surface") {
  detail::ParamReader r(j, context);
  const std::string kind = r.string("kind");
  Surface2D out;
  if (kind == "quadratic") {
    surface::Quadratic q;
    if (r.has("a")) {
      const auto a = r.numbers("a");
      detail::require(a.size() == 4, context + ".a must hold 4 numbers (row-major 2x2)");
      std::copy(a.begin(), a.end(), q.a.begin());
    }
    out = q;
  } else if (kind == "rosenbrock") {
    out = surface::Rosenbrock{r.number("a", 1.0), r.number("b", 100.0)};
  } else if (kind == "multi_basin") {
    const Json& wells = r.raw("wells");
    if (!wells.is_array()) detail::fail(context + ".wells must be an array");
    surface::MultiBasin mb;
    for (std::size_t i = 0; i < wells.size(); ++i) {
      const std::string c = context + ".wells[" + std::to_string(i) + "]";
      detail::ParamReader w(wells[i], c);
      mb.wells.push_back({read_point(w.raw("center"), c + ".center"), w.number("depth"), w.number("width")});
      w.finish();
    }
    out = std::move(mb);
  } else {
    detail::fail(context + ".kind: unknown surface \"" + kind + "\" (expected quadratic, rosenbrock or multi_basin)");
  }
  r.finish();
  validate(out);
  return out;
}

inline bool is_safe_name(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

inline SurfaceManifest parse_surface_manifest(const Json& j, const fs::path& base_dir) {
  detail::ParamReader r(j, "manifest");
  SurfaceManifest m;
  m.surface = surface_from_json(r.raw("surface"), "manifest.surface");
  m.start = read_point(r.raw("start"), "manifest.start");
  m.iterations = r.integer("iterations");
  detail::require(m.iterations >= 0, "manifest.iterations must be >= 0");
  if (r.has("optimizer")) m.optimizer = optimizer_from_json(r.raw("optimizer"));
  const Json& policies = r.raw("policies");
  if (!policies.is_array() || policies.empty()) detail::fail("manifest.policies must be a non-empty array");
  for (std::size_t i = 0; i < policies.size(); ++i) {
    const std::string c = "manifest.policies[" + std::to_string(i) + "]";
    detail::ParamReader p(policies[i], c);
    PolicySpec spec = policy_from_json(p.raw("policy"), c + ".policy");
    validate(spec);
    std::string name = p.string("name", std::string(family_name(spec)));
    detail::require(is_safe_name(name), c + ".name may only contain letters, digits, '_' and '-'");
    for (const auto& q : m.policies) detail::require(q.name != name, c + ".name \"" + name + "\" is used twice");
    p.finish();
    m.policies.push_back({std::move(name), std::move(spec)});
  }
  if (r.has("output_dir")) m.output_dir = resolve(base_dir, r.string("output_dir"));
  r.finish();
  return m;
}

}  // namespace lrforge::cli

#pragma once

// Softmax classifiers over a flat parameter buffer: a linear model and a
// one-hidden-layer ReLU MLP. Loss is the batch-mean cross-entropy; gradients
// are exact backpropagation.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/policy_json.hpp"
#include "lrforge/problems.hpp"
#include "lrforge/rng.hpp"

namespace lrforge {

namespace model {

struct Linear {
  std::size_t d_in = 1;
  std::size_t n_classes = 2;
  friend bool operator==(const Linear&, const Linear&) = default;
};

/// d_in -> hidden (ReLU) -> n_classes
struct Mlp {
  std::size_t d_in = 1;
  std::size_t hidden = 16;
  std::size_t n_classes = 2;
  friend bool operator==(const Mlp&, const Mlp&) = default;
};

}  // namespace model

using ModelSpec = std::variant<model::Linear, model::Mlp>;

inline std::size_t input_dim(const ModelSpec& s) {
  return std::visit([](const auto& m) { return m.d_in; }, s);
}
inline std::size_t output_dim(const ModelSpec& s) {
  return std::visit([](const auto& m) { return m.n_classes; }, s);
}

inline void validate(const ModelSpec& s) {
  detail::require(input_dim(s) >= 1, "model: d_in must be >= 1");
  detail::require(output_dim(s) >= 1, "model: n_classes must be >= 1");
  if (const auto* m = std::get_if<model::Mlp>(&s)) detail::require(m->hidden >= 1, "model: hidden must be >= 1");
}

/// A rows x cols weight matrix (row-major) or a bias vector (cols == 1).
struct Tensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct ParamVector {
  std::vector<Tensor> layout;
  std::vector<double> values;

  std::span<double> view(std::size_t i) { return {values.data() + layout[i].offset, layout[i].size()}; }
  std::span<const double> view(std::size_t i) const { return {values.data() + layout[i].offset, layout[i].size()}; }
  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

/// Linear: W (C x d), b (C). MLP: W1 (h x d), b1 (h), W2 (C x h), b2 (C).
inline std::vector<Tensor> param_layout(const ModelSpec& spec) {
  validate(spec);
  std::vector<Tensor> layout;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    layout.push_back({std::move(name), rows, cols, offset});
    offset += rows * cols;
  };
  if (const auto* m = std::get_if<model::Linear>(&spec)) {
    add("W", m->n_classes, m->d_in);
    add("b", m->n_classes, 1);
  } else {
    const auto& p = std::get<model::Mlp>(spec);
    add("W1", p.hidden, p.d_in);
    add("b1", p.hidden, 1);
    add("W2", p.n_classes, p.hidden);
    add("b2", p.n_classes, 1);
  }
  return layout;
}

inline std::size_t param_count(const ModelSpec& spec) {
  const auto layout = param_layout(spec);
  return layout.back().offset + layout.back().size();
}

inline ParamVector zero_params(const ModelSpec& spec) {
  ParamVector p{param_layout(spec), {}};
  p.values.assign(p.layout.back().offset + p.layout.back().size(), 0.0);
  return p;
}

/// Glorot-uniform weights, zero biases.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  auto p = zero_params(spec);
  Rng rng(seed);
  for (std::size_t i = 0; i < p.layout.size(); ++i) {
    const auto& t = p.layout[i];
    if (t.cols == 1 && t.name[0] == 'b') continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(t.rows + t.cols));
    for (double& w : p.view(i)) w = rng.uniform(-bound, bound);
  }
  return p;
}

struct LossGrad {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> grad;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

// out[r] = b[r] + sum_c W[r, c] x[c]
inline void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
                   std::span<double> out) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = w.data() + r * cols;
    double acc = b[r];
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

// Turns logits into softmax probabilities in place; returns -log p[label].
inline double softmax_xent(std::span<double> z, int label) {
  const double zmax = *std::max_element(z.begin(), z.end());
  const double shifted_label = z[static_cast<std::size_t>(label)] - zmax;
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - zmax);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return std::log(sum) - shifted_label;
}

inline std::size_t argmax(std::span<const double> z) {
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

inline void check_batch(const ModelSpec& spec, const ParamVector& params, std::span<const double> features,
                        std::span<const int> labels) {
  require(!labels.empty(), "empty batch");
  require(features.size() == labels.size() * input_dim(spec),
          "dimension mismatch: batch has " + std::to_string(features.size()) + " feature values for " +
              std::to_string(labels.size()) + " rows of width " + std::to_string(input_dim(spec)));
  require(params.values.size() == param_count(spec), "parameter count does not match the model");
  const auto c = static_cast<int>(output_dim(spec));
  for (int y : labels) require(y >= 0 && y < c, "label out of range for the model");
}

// Shared forward (and optional backward) pass over a contiguous batch.
inline LossGrad run_batch(const ModelSpec& spec, const ParamVector& params, std::span<const double> features,
                          std::span<const int> labels, bool want_grad) {
  check_batch(spec, params, features, labels);
  const std::size_t n = labels.size();
  const std::size_t d = input_dim(spec);
  const std::size_t c = output_dim(spec);
  const double inv_n = 1.0 / static_cast<double>(n);
  LossGrad out;
  if (want_grad) out.grad.assign(params.values.size(), 0.0);
  std::vector<double> z(c);
  std::size_t correct = 0;

  if (std::holds_alternative<model::Linear>(spec)) {
    const auto w = params.view(0);
    const auto b = params.view(1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = features.subspan(i * d, d);
      affine(w, b, x, z);
      if (argmax(z) == static_cast<std::size_t>(labels[i])) ++correct;
      out.loss += softmax_xent(z, labels[i]);
      if (!want_grad) continue;
      z[static_cast<std::size_t>(labels[i])] -= 1.0;
      double* gw = out.grad.data() + params.layout[0].offset;
      double* gb = out.grad.data() + params.layout[1].offset;
      for (std::size_t r = 0; r < c; ++r) {
        const double delta = z[r] * inv_n;
        gb[r] += delta;
        double* row = gw + r * d;
        for (std::size_t k = 0; k < d; ++k) row[k] += delta * x[k];
      }
    }
  } else {
    const std::size_t h = std::get<model::Mlp>(spec).hidden;
    const auto w1 = params.view(0);
    const auto b1 = params.view(1);
    const auto w2 = params.view(2);
    const auto b2 = params.view(3);
    std::vector<double> a(h);
    std::vector<double> da(h);
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = features.subspan(i * d, d);
      affine(w1, b1, x, a);
      for (double& v : a) v = std::max(v, 0.0);
      affine(w2, b2, a, z);
      if (argmax(z) == static_cast<std::size_t>(labels[i])) ++correct;
      out.loss += softmax_xent(z, labels[i]);
      if (!want_grad) continue;
      z[static_cast<std::size_t>(labels[i])] -= 1.0;
      double* gw1 = out.grad.data() + params.layout[0].offset;
      double* gb1 = out.grad.data() + params.layout[1].offset;
      double* gw2 = out.grad.data() + params.layout[2].offset;
      double* gb2 = out.grad.data() + params.layout[3].offset;
      std::fill(da.begin(), da.end(), 0.0);
      for (std::size_t r = 0; r < c; ++r) {
        const double delta = z[r] * inv_n;
        gb2[r] += delta;
        double* row = gw2 + r * h;
        const double* wrow = w2.data() + r * h;
        for (std::size_t k = 0; k < h; ++k) {
          row[k] += delta * a[k];
          da[k] += delta * wrow[k];
        }
      }
      for (std::size_t k = 0; k < h; ++k) {
        if (a[k] <= 0.0) continue;
        gb1[k] += da[k];
        double* row = gw1 + k * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += da[k] * x[j];
      }
    }
  }
  out.loss *= inv_n;
  out.accuracy = static_cast<double>(correct) * inv_n;
  return out;
}

}  // namespace detail

/// Mean cross-entropy, its exact gradient, and argmax accuracy over a
/// contiguous batch (row-major features, one label per row).
inline LossGrad forward_loss_grad(const ModelSpec& spec, const ParamVector& params, std::span<const double> features,
                                  std::span<const int> labels) {
  return detail::run_batch(spec, params, features, labels, true);
}

/// Loss and accuracy on a whole dataset, without gradients.
inline Evaluation evaluate(const ModelSpec& spec, const ParamVector& params, const Dataset& data) {
  const auto r = detail::run_batch(spec, params, data.features, data.labels, false);
  return {r.loss, r.accuracy};
}

inline Json model_to_json(const ModelSpec& s) {
  if (const auto* m = std::get_if<model::Linear>(&s)) {
    return {{"kind", "linear"}, {"d_in", m->d_in}, {"n_classes", m->n_classes}};
  }
  const auto& p = std::get<model::Mlp>(s);
  return {{"kind", "mlp"}, {"d_in", p.d_in}, {"hidden", p.hidden}, {"n_classes", p.n_classes}, {"activation", "relu"}};
}

inline ModelSpec model_from_json(const Json& j, const std::string& context = "model") {
  detail::ParamReader r(j, context);
  const std::string kind = r.string("kind");
  auto dim = [&](const std::string& key) {
    const auto v = r.integer(key);
    if (v < 1) detail::fail(context + "." + key + " must be >= 1");
    return static_cast<std::size_t>(v);
  };
  ModelSpec spec;
  if (kind == "linear") {
    model::Linear m;
    m.d_in = dim("d_in");
    m.n_classes = dim("n_classes");
    spec = m;
  } else if (kind == "mlp") {
    model::Mlp m;
    m.d_in = dim("d_in");
    m.hidden = dim("hidden");
    m.n_classes = dim("n_classes");
    if (r.has("activation") && r.string("activation") != "relu") {
      detail::fail(context + ".activation must be \"relu\"");
    }
    spec = m;
  } else {
    detail::fail(context + ".kind must be \"linear\" or \"mlp\"");
  }
  r.finish();
  validate(spec);
  return spec;
}

// Parameter blob: "LRFP", uint32 header length, JSON header, then the values
// as little-endian IEEE doubles.

inline constexpr char kParamMagic[4] = {'L', 'R', 'F', 'P'};

namespace detail {

inline std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xff) << (8 * (7 - i));
    return r;
  }
  return v;
}

inline void put_le32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  out.write(b, 4);
}

}  // namespace detail

inline void write_params(std::ostream& out, const ModelSpec& spec, const ParamVector& params) {
  detail::require(params.values.size() == param_count(spec), "parameter count does not match the model");
  Json layout = Json::array();
  for (const auto& t : params.layout) {
    layout.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}});
  }
  const std::string header =
      Json{{"version", 1}, {"model", model_to_json(spec)}, {"layout", layout}, {"count", params.values.size()}}.dump();
  out.write(kParamMagic, 4);
  detail::put_le32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (double v : params.values) {
    const std::uint64_t bits = detail::to_little(std::bit_cast<std::uint64_t>(v));
    out.write(reinterpret_cast<const char*>(&bits), 8);
  }
  if (!out) throw IoError("failed to write parameter blob");
}

struct LoadedParams {
  ModelSpec spec;
  ParamVector params;
};

inline LoadedParams read_params(std::istream& in) {
  char magic[4] = {};
  unsigned char len[4] = {};
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(len), 4);
  if (!in) throw IoError("parameter blob: truncated header");
  if (!std::equal(magic, magic + 4, kParamMagic)) throw IoError("parameter blob: bad magic");
  const std::uint32_t n = std::uint32_t{len[0]} | (std::uint32_t{len[1]} << 8) | (std::uint32_t{len[2]} << 16) |
                          (std::uint32_t{len[3]} << 24);
  std::string header(n, '\0');
  in.read(header.data(), n);
  if (!in) throw IoError("parameter blob: truncated header");
  const Json h = Json::parse(header, nullptr, false);
  if (h.is_discarded() || !h.is_object()) throw IoError("parameter blob: header is not JSON");

  LoadedParams out{model_from_json(h.at("model")), {}};
  out.params = zero_params(out.spec);
  const auto& layout = h.at("layout");
  detail::require(layout.size() == out.params.layout.size(), "parameter blob: layout does not match the model");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const Tensor t{layout[i].at("name").get<std::string>(), layout[i].at("rows").get<std::size_t>(),
                   layout[i].at("cols").get<std::size_t>(), layout[i].at("offset").get<std::size_t>()};
    detail::require(t == out.params.layout[i], "parameter blob: layout does not match the model");
  }
  detail::require(h.at("count").get<std::size_t>() == out.params.values.size(),
                  "parameter blob: count does not match the model");
  for (double& v : out.params.values) {
    std::uint64_t bits = 0;
    in.read(reinterpret_cast<char*>(&bits), 8);
    if (!in) throw IoError("parameter blob: truncated values");
    v = std::bit_cast<double>(detail::to_little(bits));
  }
  return out;
}

}  // namespace lrforge

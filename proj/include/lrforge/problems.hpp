#pragma once

// Training problems small enough for a desk: analytic 2-D surfaces for
// trajectory runs, synthetic classification sets, and an IDX (MNIST) reader.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <iterator>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/format.hpp"
#include "lrforge/rng.hpp"

namespace lrforge {

using Vec2 = std::array<double, 2>;

namespace surface {

/// f(x) = 0.5 x^T A x with A row-major {a00, a01, a10, a11}.
struct Quadratic {
  std::array<double, 4> a{1.0, 0.0, 0.0, 1.0};
  friend bool operator==(const Quadratic&, const Quadratic&) = default;
};

/// f(x, y) = (a - x)^2 + b (y - x^2)^2
struct Rosenbrock {
  double a = 1.0;
  double b = 100.0;
  friend bool operator==(const Rosenbrock&, const Rosenbrock&) = default;
};

struct Well {
  Vec2 center{};
  double depth = 1.0;
  double width = 1.0;
  friend bool operator==(const Well&, const Well&) = default;
};

/// f(x) = -sum_i depth_i exp(-|x - c_i|^2 / (2 width_i^2))
struct MultiBasin {
  std::vector<Well> wells;
  friend bool operator==(const MultiBasin&, const MultiBasin&) = default;
};

}  // namespace surface

using Surface2D = std::variant<surface::Quadratic, surface::Rosenbrock, surface::MultiBasin>;

inline void validate(const Surface2D& s) {
  if (const auto* q = std::get_if<surface::Quadratic>(&s)) {
    const auto& a = q->a;
    for (double v : a) detail::require(std::isfinite(v), "Quadratic: A has a non-finite entry");
    detail::require(a[1] == a[2], "Quadratic: A must be symmetric");
    detail::require(a[0] > 0.0 && a[0] * a[3] - a[1] * a[2] > 0.0, "Quadratic: A must be positive-definite");
  } else if (const auto* r = std::get_if<surface::Rosenbrock>(&s)) {
    detail::require(std::isfinite(r->a) && std::isfinite(r->b) && r->b > 0.0, "Rosenbrock: b must be finite and > 0");
  } else {
    const auto& wells = std::get<surface::MultiBasin>(s).wells;
    detail::require(!wells.empty(), "MultiBasin: needs at least one well");
    for (const auto& w : wells) {
      detail::require(std::isfinite(w.center[0]) && std::isfinite(w.center[1]), "MultiBasin: non-finite center");
      detail::require(std::isfinite(w.depth) && w.depth > 0.0, "MultiBasin: depth must be > 0");
      detail::require(std::isfinite(w.width) && w.width > 0.0, "MultiBasin: width must be > 0");
    }
    const double deepest = std::max_element(wells.begin(), wells.end(), [](auto& x, auto& y) {
                             return x.depth < y.depth;
                           })->depth;
    const auto ties = std::count_if(wells.begin(), wells.end(), [&](auto& w) { return w.depth == deepest; });
    detail::require(ties == 1, "MultiBasin: the deepest well must be unique");
  }
}

struct SurfaceSample {
  double value = 0.0;
  Vec2 grad{};
};

inline SurfaceSample surface_eval_grad(const Surface2D& s, const Vec2& p) {
  detail::require(std::isfinite(p[0]) && std::isfinite(p[1]), "surface point is not finite");
  const double x = p[0];
  const double y = p[1];
  if (const auto* q = std::get_if<surface::Quadratic>(&s)) {
    const auto& a = q->a;
    const Vec2 ax{a[0] * x + a[1] * y, a[2] * x + a[3] * y};
    return {0.5 * (x * ax[0] + y * ax[1]), ax};
  }
  if (const auto* r = std::get_if<surface::Rosenbrock>(&s)) {
    const double u = r->a - x;
    const double v = y - x * x;
    return {u * u + r->b * v * v, {-2.0 * u - 4.0 * r->b * x * v, 2.0 * r->b * v}};
  }
  SurfaceSample out;
  for (const auto& w : std::get<surface::MultiBasin>(s).wells) {
    const double dx = x - w.center[0];
    const double dy = y - w.center[1];
    const double s2 = w.width * w.width;
    const double e = w.depth * std::exp(-(dx * dx + dy * dy) / (2.0 * s2));
    out.value -= e;
    out.grad[0] += e * dx / s2;
    out.grad[1] += e * dy / s2;
  }
  return out;
}

/// Center of the deepest well, or the analytic minimizer for the others.
inline Vec2 global_minimizer(const Surface2D& s) {
  if (std::holds_alternative<surface::Quadratic>(s)) return {0.0, 0.0};
  if (const auto* r = std::get_if<surface::Rosenbrock>(&s)) return {r->a, r->a * r->a};
  const auto& wells = std::get<surface::MultiBasin>(s).wells;
  return std::max_element(wells.begin(), wells.end(), [](auto& x, auto& y) { return x.depth < y.depth; })->center;
}

enum class Split { Train, Test };

/// Row-major n x d features with class labels. Treated as immutable once built.
struct Dataset {
  std::size_t n_features = 0;
  int n_classes = 0;
  std::vector<double> features;
  std::vector<int> labels;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * n_features, n_features}; }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

inline void validate(const Dataset& d) {
  detail::require(d.n_features >= 1, "dataset: feature dimension must be >= 1");
  detail::require(d.n_classes >= 1, "dataset: n_classes must be >= 1");
  detail::require(d.features.size() == d.labels.size() * d.n_features, "dataset: feature matrix has the wrong size");
  for (int y : d.labels) detail::require(y >= 0 && y < d.n_classes, "dataset: label out of range");
  for (double v : d.features) detail::require(std::isfinite(v), "dataset: non-finite feature");
}

namespace detail {

// Seeded shuffle, then the first 80% trains and the rest tests.
inline SplitDataset shuffle_split(Rng& rng, std::size_t d, int n_classes, const std::vector<double>& x,
                                  const std::vector<int>& y) {
  const std::size_t n = y.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t n_test = n / 5;
  const std::size_t n_train = n - n_test;

  SplitDataset out;
  out.train = {d, n_classes, {}, {}, Split::Train};
  out.test = {d, n_classes, {}, {}, Split::Test};
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& dst = i < n_train ? out.train : out.test;
    const std::size_t src = order[i];
    dst.features.insert(dst.features.end(), x.begin() + static_cast<std::ptrdiff_t>(src * d),
                        x.begin() + static_cast<std::ptrdiff_t>((src + 1) * d));
    dst.labels.push_back(y[src]);
  }
  return out;
}

}  // namespace detail

/// Isotropic unit-variance Gaussian blobs. Centers sit on a regular polygon in
/// the first two coordinates with adjacent centers `separation` apart (for two
/// classes: on a segment of length `separation`).
inline SplitDataset gen_blobs(std::uint64_t seed, std::size_t n_per_class, int n_classes, std::size_t d,
                              double separation) {
  detail::require(n_per_class >= 1, "blobs: n per class must be >= 1");
  detail::require(n_classes >= 1, "blobs: n_classes must be >= 1");
  detail::require(d >= 1, "blobs: d must be >= 1");
  detail::require(std::isfinite(separation) && separation >= 0.0, "blobs: separation must be >= 0");
  detail::require(d >= 2 || n_classes <= 2, "blobs: more than two classes need d >= 2");

  const double pi = std::numbers::pi;
  const double radius = n_classes > 1 ? separation / (2.0 * std::sin(pi / n_classes)) : 0.0;
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(n_classes), std::vector<double>(d, 0.0));
  for (int c = 0; c < n_classes; ++c) {
    const double angle = 2.0 * pi * c / n_classes;
    centers[c][0] = radius * std::cos(angle);
    if (d >= 2) centers[c][1] = radius * std::sin(angle);
  }

  Rng rng(seed);
  std::vector<double> x;
  std::vector<int> y;
  x.reserve(n_per_class * static_cast<std::size_t>(n_classes) * d);
  for (int c = 0; c < n_classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      for (std::size_t j = 0; j < d; ++j) x.push_back(centers[c][j] + rng.normal());
      y.push_back(c);
    }
  }
  return detail::shuffle_split(rng, d, n_classes, x, y);
}

/// Two interleaving half circles: label 0 on the upper arc, label 1 on the
/// lower arc shifted by (1, 0.5). Gaussian noise of std `noise` per coordinate.
inline SplitDataset gen_moons(std::uint64_t seed, std::size_t n, double noise) {
  detail::require(n >= 2, "moons: n must be >= 2");
  detail::require(std::isfinite(noise) && noise >= 0.0, "moons: noise must be >= 0");
  const std::size_t n_outer = n / 2;
  const std::size_t n_inner = n - n_outer;
  const double pi = std::numbers::pi;
  auto angle = [&](std::size_t i, std::size_t count) {
    return count > 1 ? pi * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
  };

  Rng rng(seed);
  std::vector<double> x;
  std::vector<int> y;
  for (std::size_t i = 0; i < n_outer; ++i) {
    const double a = angle(i, n_outer);
    x.push_back(std::cos(a));
    x.push_back(std::sin(a));
    y.push_back(0);
  }
  for (std::size_t i = 0; i < n_inner; ++i) {
    const double a = angle(i, n_inner);
    x.push_back(1.0 - std::cos(a));
    x.push_back(0.5 - std::sin(a));
    y.push_back(1);
  }
  if (noise > 0.0) {
    for (auto& v : x) v += noise * rng.normal();
  }
  return detail::shuffle_split(rng, 2, 2, x, y);
}

/// `label,f0,f1,...` with a header row; values in shortest round-trip form.
inline void write_dataset_csv(std::ostream& out, const Dataset& d) {
  out << "label";
  for (std::size_t j = 0; j < d.n_features; ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    out << d.labels[i];
    for (double v : d.row(i)) out << ',' << format_double(v);
    out << '\n';
  }
}

// IDX: big-endian uint32 magic (0x0000TTNN, TT = 0x08 for ubyte, NN = number
// of dimensions), one uint32 per dimension, then the raw bytes.

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& path) {
  if (buf.size() < offset + 4) throw IoError(path + ": truncated header");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace detail

/// Reads an IDX image/label pair. Pixels are scaled to [0,1] by /255.
/// n_classes is max label + 1 unless `n_classes` is given.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, Split split = Split::Train,
                        int n_classes = 0) {
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);
  if (detail::read_be32(images, 0, images_path) != kIdxImagesMagic) throw IoError(images_path + ": bad magic");
  if (detail::read_be32(labels, 0, labels_path) != kIdxLabelsMagic) throw IoError(labels_path + ": bad magic");

  const std::uint64_t n_images = detail::read_be32(images, 4, images_path);
  const std::uint64_t rows = detail::read_be32(images, 8, images_path);
  const std::uint64_t cols = detail::read_be32(images, 12, images_path);
  const std::uint64_t n_labels = detail::read_be32(labels, 4, labels_path);
  if (n_images != n_labels) {
    throw IoError("length mismatch: " + std::to_string(n_images) + " images, " + std::to_string(n_labels) + " labels");
  }
  const std::uint64_t d = rows * cols;
  if (d == 0) throw IoError(images_path + ": zero-sized images");
  if (images.size() < 16 + n_images * d) throw IoError(images_path + ": truncated");
  if (labels.size() < 8 + n_labels) throw IoError(labels_path + ": truncated");

  Dataset out;
  out.n_features = static_cast<std::size_t>(d);
  out.split = split;
  out.features.resize(static_cast<std::size_t>(n_images * d));
  for (std::size_t i = 0; i < out.features.size(); ++i) out.features[i] = images[16 + i] / 255.0;
  out.labels.resize(static_cast<std::size_t>(n_labels));
  int max_label = 0;
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    out.labels[i] = labels[8 + i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.n_classes = n_classes > 0 ? n_classes : max_label + 1;
  validate(out);
  return out;
}

/// Writes raw ubyte images (n x rows x cols) and labels as an IDX pair.
inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      const std::vector<unsigned char>& pixels, const std::vector<unsigned char>& labels,
                      std::uint32_t rows, std::uint32_t cols) {
  detail::require(pixels.size() == labels.size() * rows * cols, "idx: pixel count does not match labels x rows x cols");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IoError("cannot write idx files " + images_path + ", " + labels_path);
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(labels.size()));
  detail::put_be32(img, rows);
  detail::put_be32(img, cols);
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!img || !lab) throw IoError("write failed for " + images_path + ", " + labels_path);
}

}  // namespace lrforge

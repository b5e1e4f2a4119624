#pragma once

// Synthetic multi-task data, batching, and per-frame CSV records.
//
// Generative rules (all tasks are functions of one latent (v, a)):
//   (v, a) ~ U[-1,1]^2
//   expression: neutral (0) iff v^2 + a^2 < 0.15^2, otherwise by the octant of
//     atan2(a, v) in [0, 2pi):
//       octant   0    1    2    3    4    5    6    7
//       class    4    6    3    1    2    5    5    4
//     classes: 0 neutral, 1 anger, 2 disgust, 3 fear, 4 happiness,
//              5 sadness, 6 surprise
//   AU k active iff cos(phi_k) v + sin(phi_k) a + c_k > 0,
//     phi_k = k pi/4 + pi/8, c = kAuOffsets
//   image: background 0.1 + N(0, 0.05) per pixel, plus 8 gaussian blobs
//     (sigma 0.07 S, S = min(H, W)) on a ring about the centre of radius
//     (0.3 + 0.08 v) S rotated by a pi/8; blob k is drawn into channel k mod C
//     with amplitude 0.25 + 0.6 AU_k. Pixels are clipped to [0, 1].
//   VA target: (v, a) + label_noise * N(0,1), clipped to [-1, 1].
//   Task masks: each task dropped independently with its probability; a
//     sample that lost all three keeps the task with the lowest drop
//     probability (ties: VA, then AU).
// Sample i draws from its own stream seeded by (seed, i).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "affectnet/config.hpp"
#include "affectnet/container.hpp"
#include "affectnet/error.hpp"
#include "affectnet/objectives.hpp"
#include "affectnet/tensor.hpp"

namespace affectnet {

inline constexpr std::array<std::size_t, 8> kOctantExpression{4, 6, 3, 1, 2, 5, 5, 4};
inline constexpr std::array<double, kNumAUs> kAuOffsets{0.0, -0.2, 0.1, -0.1, 0.2, 0.0, -0.3, 0.3};
inline constexpr double kNeutralRadius = 0.15;
inline constexpr const char* kImagesFormat = "affect-images/1";

inline std::size_t expression_for(double v, double a) {
  if (v * v + a * a < kNeutralRadius * kNeutralRadius) return 0;
  double angle = std::atan2(a, v);
  if (angle < 0) angle += 2 * std::numbers::pi;
  const auto octant = std::min<std::size_t>(7, static_cast<std::size_t>(angle / (std::numbers::pi / 4)));
  return kOctantExpression[octant];
}

inline double au_projection(std::size_t k, double v, double a) {
  const double phi = static_cast<double>(k) * std::numbers::pi / 4 + std::numbers::pi / 8;
  return std::cos(phi) * v + std::sin(phi) * a + kAuOffsets[k];
}

inline bool au_active(std::size_t k, double v, double a) { return au_projection(k, v, a) > 0; }

struct SyntheticSpec {
  std::size_t n_samples = 256;
  std::size_t channels = 3, height = 32, width = 32;
  std::uint64_t seed = 0;
  double label_noise = 0.02;
  std::array<double, 3> drop_probs{0.0, 0.0, 0.0};  // VA, AU, EXPR

  static SyntheticSpec from(const KeyValues& kv, const std::string& prefix = "") {
    SyntheticSpec s;
    s.n_samples = kv.get_size(prefix + "n_samples", s.n_samples);
    s.channels = kv.get_size(prefix + "channels", s.channels);
    s.height = kv.get_size(prefix + "height", s.height);
    s.width = kv.get_size(prefix + "width", s.width);
    s.seed = kv.get_u64(prefix + "seed", s.seed);
    s.label_noise = kv.get_double(prefix + "label_noise", s.label_noise);
    const auto p = kv.get_list<double>(prefix + "partial_annotation", {0.0, 0.0, 0.0});
    if (p.size() != 3) throw ValidationError("synthetic spec: partial_annotation needs three probabilities (va,au,expr)");
    std::copy(p.begin(), p.end(), s.drop_probs.begin());
    s.validate();
    return s;
  }

  void validate() const {
    if (n_samples == 0) throw ValidationError("synthetic spec: n_samples must be positive");
    if (channels == 0 || height == 0 || width == 0) throw ValidationError("synthetic spec: image size must be positive");
    if (!(label_noise >= 0)) throw ValidationError("synthetic spec: label_noise must be >= 0");
    for (double p : drop_probs)
      if (!(p >= 0 && p <= 1)) throw ValidationError("synthetic spec: drop probabilities must lie in [0,1]");
  }
};

struct Dataset {
  Shape image_shape;              // (C,H,W)
  std::vector<float> images;      // N x C x H x W
  BatchLabels labels;
  std::vector<std::string> ids;
  std::vector<double> latent;     // N x 2, generator ground truth (empty when loaded)

  std::size_t size() const { return ids.size(); }
  std::size_t image_numel() const { return shape_numel(image_shape); }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset d;
    d.image_shape = image_shape;
    d.labels.resize(rows.size());
    const std::size_t px = image_numel();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::size_t i = rows[r];
      d.images.insert(d.images.end(), images.begin() + static_cast<std::ptrdiff_t>(i * px),
                      images.begin() + static_cast<std::ptrdiff_t>((i + 1) * px));
      d.ids.push_back(ids[i]);
      if (!latent.empty()) {
        d.latent.push_back(latent[2 * i]);
        d.latent.push_back(latent[2 * i + 1]);
      }
      copy_label_row(labels, i, d.labels, r);
    }
    return d;
  }

  static void copy_label_row(const BatchLabels& src, std::size_t i, BatchLabels& dst, std::size_t r) {
    dst.va[2 * r] = src.va[2 * i];
    dst.va[2 * r + 1] = src.va[2 * i + 1];
    std::copy_n(src.au.begin() + static_cast<std::ptrdiff_t>(i * kNumAUs), kNumAUs,
                dst.au.begin() + static_cast<std::ptrdiff_t>(r * kNumAUs));
    dst.expr[r] = src.expr[i];
    dst.va_mask[r] = src.va_mask[i];
    dst.au_mask[r] = src.au_mask[i];
    dst.expr_mask[r] = src.expr_mask[i];
  }
};

namespace detail {

inline void render_sample(double v, const std::array<std::uint8_t, kNumAUs>& au, double a, std::size_t channels,
                          std::size_t height, std::size_t width, std::mt19937_64& rng, float* out) {
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t plane = height * width;
  std::vector<double> img(channels * plane);
  for (auto& px : img) px = 0.1 + 0.05 * noise(rng);
  const double s = static_cast<double>(std::min(height, width));
  const double sigma = 0.07 * s;
  const double radius = (0.3 + 0.08 * v) * s;
  const double rotation = a * std::numbers::pi / 8;
  const double cy = (static_cast<double>(height) - 1) / 2, cx = (static_cast<double>(width) - 1) / 2;
  for (std::size_t k = 0; k < kNumAUs; ++k) {
    const double theta = 2 * std::numbers::pi * static_cast<double>(k) / kNumAUs + rotation;
    const double by = cy - radius * std::sin(theta), bx = cx + radius * std::cos(theta);
    const double amp = 0.25 + 0.6 * au[k];
    double* dst = img.data() + (k % channels) * plane;
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = static_cast<double>(y) - by, dx = static_cast<double>(x) - bx;
        dst[y * width + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
  }
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
}

}  // namespace detail

inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.image_shape = {spec.channels, spec.height, spec.width};
  const std::size_t n = spec.n_samples, px = d.image_numel();
  d.images.resize(n * px);
  d.labels.resize(n);
  d.latent.resize(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(static_cast<std::uint64_t>(i) >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, 1.0);
    const double v = unif(rng), a = unif(rng);
    d.latent[2 * i] = v;
    d.latent[2 * i + 1] = a;

    std::array<std::uint8_t, kNumAUs> au{};
    for (std::size_t k = 0; k < kNumAUs; ++k) au[k] = au_active(k, v, a) ? 1 : 0;
    std::copy(au.begin(), au.end(), d.labels.au.begin() + static_cast<std::ptrdiff_t>(i * kNumAUs));
    d.labels.expr[i] = expression_for(v, a);
    const double jv = jitter(rng), ja = jitter(rng);
    d.labels.va[2 * i] = static_cast<float>(std::clamp(v + spec.label_noise * jv, -1.0, 1.0));
    d.labels.va[2 * i + 1] = static_cast<float>(std::clamp(a + spec.label_noise * ja, -1.0, 1.0));

    std::array<bool, 3> keep{};
    for (std::size_t t = 0; t < 3; ++t) keep[t] = coin(rng) >= spec.drop_probs[t];
    if (!keep[0] && !keep[1] && !keep[2]) {
      const auto lowest = std::min_element(spec.drop_probs.begin(), spec.drop_probs.end()) - spec.drop_probs.begin();
      keep[static_cast<std::size_t>(lowest)] = true;
    }
    d.labels.va_mask[i] = keep[0];
    d.labels.au_mask[i] = keep[1];
    d.labels.expr_mask[i] = keep[2];

    detail::render_sample(v, au, a, spec.channels, spec.height, spec.width, rng, d.images.data() + i * px);
    char id[32];
    std::snprintf(id, sizeof id, "f%06zu", i);
    d.ids.emplace_back(id);
  }
  return d;
}

// Index batches over [0, n). With a seed the order is a seeded shuffle;
// without one it is sequential. A short final batch is kept only if it holds
// at least two VA-annotated samples, else it is merged into the previous one.
inline std::vector<std::vector<std::size_t>> batch_iter(const BatchLabels& labels, std::size_t batch_size,
                                                        std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size < 2) throw ValidationError("batch_iter: batch_size must be >= 2");
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  if (batches.size() > 1 && batches.back().size() < batch_size) {
    const auto& last = batches.back();
    const auto va = std::count_if(last.begin(), last.end(), [&](std::size_t i) { return labels.va_mask[i] != 0; });
    if (va < 2) {
      auto tail = std::move(batches.back());
      batches.pop_back();
      batches.back().insert(batches.back().end(), tail.begin(), tail.end());
    }
  }
  return batches;
}

template <class T = float>
std::pair<BasicTensor<T>, BatchLabels> make_batch(const Dataset& d, std::span<const std::size_t> rows) {
  const std::size_t px = d.image_numel();
  std::vector<T> pixels(rows.size() * px);
  BatchLabels labels;
  labels.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(d.images.begin() + static_cast<std::ptrdiff_t>(rows[r] * px), px,
                pixels.begin() + static_cast<std::ptrdiff_t>(r * px));
    Dataset::copy_label_row(d.labels, rows[r], labels, r);
  }
  Shape shape{rows.size()};
  shape.insert(shape.end(), d.image_shape.begin(), d.image_shape.end());
  return {BasicTensor<T>(std::move(shape), std::move(pixels)), std::move(labels)};
}

// Deterministic split: a seeded permutation, first `fraction` of it held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                                   std::uint64_t seed) {
  if (!(fraction >= 0 && fraction < 1)) throw ValidationError("split: validation fraction must lie in [0,1)");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed ^ 0x5eed5eed5eedULL);
  std::shuffle(order.begin(), order.end(), rng);
  const auto held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

// ---------------------------------------------------------------------------
// CSV records

inline constexpr const char* kCsvHeader = "frame_id,valence,arousal,au0,au1,au2,au3,au4,au5,au6,au7,expr";
inline constexpr const char* kAbsent = "-";

struct LabelRecord {
  std::string frame_id;
  std::optional<double> valence, arousal;
  std::array<std::optional<int>, kNumAUs> au{};
  std::optional<int> expr;

  bool has_va() const { return valence.has_value(); }
  bool has_au() const { return au[0].has_value(); }
  bool has_expr() const { return expr.has_value(); }
};

struct PredictionRecord {
  std::string frame_id;
  double valence = 0, arousal = 0;
  std::array<double, kNumAUs> au{};  // activation scores in [0,1]; active iff >= 0.5
  int expr = 0;
};

// Shortest decimal that round-trips.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline const std::array<std::string, 12>& csv_columns() {
  static const std::array<std::string, 12> cols{"frame_id", "valence", "arousal", "au0", "au1", "au2",
                                                "au3",      "au4",     "au5",     "au6", "au7", "expr"};
  return cols;
}

struct CsvContext {
  const std::string& path;
  std::size_t line;
  [[noreturn]] void fail(const std::string& field, const std::string& msg) const {
    throw ParseError(path, line, "field '" + field + "': " + msg);
  }
};

inline double parse_real(const CsvContext& ctx, const std::string& field, const std::string& text, double lo, double hi) {
  double v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end || !std::isfinite(v)) ctx.fail(field, "invalid number '" + text + "'");
  if (v < lo || v > hi) ctx.fail(field, "value " + text + " outside [" + format_double(lo) + "," + format_double(hi) + "]");
  return v;
}

inline int parse_int(const CsvContext& ctx, const std::string& field, const std::string& text, int lo, int hi) {
  int v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) ctx.fail(field, "invalid integer '" + text + "'");
  if (v < lo || v > hi) ctx.fail(field, "value " + text + " outside [" + std::to_string(lo) + "," + std::to_string(hi) + "]");
  return v;
}

// Calls row(fields, ctx) for each data row after validating header, field
// count and frame_id uniqueness.
template <class Row>
void read_csv(const std::string& path, Row&& row) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(path, 1, "missing header");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw ParseError(path, 1, std::string("header must be exactly '") + kCsvHeader + "'");
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 12) {
      throw ParseError(path, lineno, "expected 12 fields, got " + std::to_string(fields.size()));
    }
    CsvContext ctx{path, lineno};
    if (fields[0].empty()) ctx.fail("frame_id", "empty");
    if (!seen.insert(fields[0]).second) ctx.fail("frame_id", "duplicate frame_id '" + fields[0] + "'");
    row(fields, ctx);
  }
}

}  // namespace detail

inline std::vector<LabelRecord> load_labels_csv(const std::string& path) {
  std::vector<LabelRecord> out;
  const auto& cols = detail::csv_columns();
  detail::read_csv(path, [&](const std::vector<std::string>& f, const detail::CsvContext& ctx) {
    LabelRecord r;
    r.frame_id = f[0];
    auto present = [&](std::size_t i) { return f[i] != kAbsent; };
    if (present(1) != present(2)) ctx.fail("arousal", "valence and arousal must both be present or both be '-'");
    if (present(1)) {
      r.valence = detail::parse_real(ctx, cols[1], f[1], -1.0, 1.0);
      r.arousal = detail::parse_real(ctx, cols[2], f[2], -1.0, 1.0);
    }
    for (std::size_t k = 0; k < kNumAUs; ++k) {
      if (present(3 + k) != present(3)) ctx.fail(cols[3 + k], "AU fields must all be present or all be '-'");
      if (present(3 + k)) r.au[k] = detail::parse_int(ctx, cols[3 + k], f[3 + k], 0, 1);
    }
    if (present(11)) r.expr = detail::parse_int(ctx, cols[11], f[11], 0, static_cast<int>(kNumExpressions) - 1);
    out.push_back(std::move(r));
  });
  return out;
}

inline std::vector<PredictionRecord> load_predictions_csv(const std::string& path) {
  std::vector<PredictionRecord> out;
  const auto& cols = detail::csv_columns();
  detail::read_csv(path, [&](const std::vector<std::string>& f, const detail::CsvContext& ctx) {
    PredictionRecord r;
    r.frame_id = f[0];
    for (std::size_t i = 1; i < 12; ++i)
      if (f[i] == kAbsent) ctx.fail(cols[i], "absent-annotation sentinel is not allowed in predictions");
    r.valence = detail::parse_real(ctx, cols[1], f[1], -1.0, 1.0);
    r.arousal = detail::parse_real(ctx, cols[2], f[2], -1.0, 1.0);
    for (std::size_t k = 0; k < kNumAUs; ++k) r.au[k] = detail::parse_real(ctx, cols[3 + k], f[3 + k], 0.0, 1.0);
    r.expr = detail::parse_int(ctx, cols[11], f[11], 0, static_cast<int>(kNumExpressions) - 1);
    out.push_back(std::move(r));
  });
  return out;
}

inline std::string format_labels_csv(const std::vector<LabelRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  auto opt = [](const auto& v) { return v ? format_double(static_cast<double>(*v)) : std::string(kAbsent); };
  for (const auto& r : records) {
    out += r.frame_id + "," + opt(r.valence) + "," + opt(r.arousal);
    for (const auto& a : r.au) out += "," + opt(a);
    out += "," + opt(r.expr) + "\n";
  }
  return out;
}

inline std::string format_predictions_csv(const std::vector<PredictionRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : records) {
    out += r.frame_id + "," + format_double(r.valence) + "," + format_double(r.arousal);
    for (double a : r.au) out += "," + format_double(a);
    out += "," + std::to_string(r.expr) + "\n";
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << text;
}

inline std::vector<LabelRecord> to_label_records(const Dataset& d) {
  std::vector<LabelRecord> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto& r = out[i];
    r.frame_id = d.ids[i];
    if (d.labels.va_mask[i]) {
      r.valence = d.labels.va[2 * i];
      r.arousal = d.labels.va[2 * i + 1];
    }
    if (d.labels.au_mask[i])
      for (std::size_t k = 0; k < kNumAUs; ++k) r.au[k] = d.labels.au[i * kNumAUs + k];
    if (d.labels.expr_mask[i]) r.expr = static_cast<int>(d.labels.expr[i]);
  }
  return out;
}

// labels.csv + images.bin (manifest + float32 payload).
inline void export_dataset(const Dataset& d, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir + "/labels.csv", format_labels_csv(to_label_records(d)));
  Container c;
  c.format = kImagesFormat;
  c.meta.emplace_back("frames", std::to_string(d.size()));
  Shape shape{d.size()};
  shape.insert(shape.end(), d.image_shape.begin(), d.image_shape.end());
  c.tensors.push_back({"images", shape, d.images});
  write_container(dir + "/images.bin", c);
}

inline Dataset import_dataset(const std::string& dir) {
  const auto records = load_labels_csv(dir + "/labels.csv");
  const Container c = read_container(dir + "/images.bin", kImagesFormat);
  const auto* images = c.find("images");
  if (!images || images->shape.size() != 4 || images->shape[0] != records.size()) {
    throw ValidationError(dir + ": images.bin does not hold one (C,H,W) image per labels.csv row");
  }
  Dataset d;
  d.image_shape = {images->shape[1], images->shape[2], images->shape[3]};
  d.images = images->values;
  d.labels.resize(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    d.ids.push_back(r.frame_id);
    d.labels.va_mask[i] = r.has_va();
    d.labels.au_mask[i] = r.has_au();
    d.labels.expr_mask[i] = r.has_expr();
    if (r.has_va()) {
      d.labels.va[2 * i] = static_cast<float>(*r.valence);
      d.labels.va[2 * i + 1] = static_cast<float>(*r.arousal);
    }
    if (r.has_au())
      for (std::size_t k = 0; k < kNumAUs; ++k) d.labels.au[i * kNumAUs + k] = static_cast<std::uint8_t>(*r.au[k]);
    if (r.has_expr()) d.labels.expr[i] = static_cast<std::size_t>(*r.expr);
  }
  d.labels.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Joining predictions with labels

struct JoinedSeries {
  std::vector<double> pred_valence, label_valence, pred_arousal, label_arousal;
  std::vector<std::string> va_ids;
  std::vector<int> pred_au, label_au;  // row-major N x 8
  std::vector<int> pred_expr, label_expr;
  std::size_t matched = 0;
  std::size_t unmatched_predictions = 0;  // prediction ids with no label row
  std::size_t unmatched_labels = 0;       // label ids with no prediction row
};

// Inner join on frame_id in label-file order. Each task series only takes rows
// whose label for that task is present.
inline JoinedSeries join_for_eval(const std::vector<PredictionRecord>& preds, const std::vector<LabelRecord>& labels) {
  std::unordered_map<std::string, const PredictionRecord*> by_id;
  for (const auto& p : preds) by_id.emplace(p.frame_id, &p);
  JoinedSeries j;
  std::unordered_set<std::string> label_ids;
  for (const auto& l : labels) {
    label_ids.insert(l.frame_id);
    const auto it = by_id.find(l.frame_id);
    if (it == by_id.end()) {
      ++j.unmatched_labels;
      continue;
    }
    ++j.matched;
    const PredictionRecord& p = *it->second;
    if (l.has_va()) {
      j.pred_valence.push_back(p.valence);
      j.label_valence.push_back(*l.valence);
      j.pred_arousal.push_back(p.arousal);
      j.label_arousal.push_back(*l.arousal);
      j.va_ids.push_back(l.frame_id);
    }
    if (l.has_au()) {
      for (std::size_t k = 0; k < kNumAUs; ++k) {
        j.pred_au.push_back(p.au[k] >= 0.5 ? 1 : 0);
        j.label_au.push_back(*l.au[k]);
      }
    }
    if (l.has_expr()) {
      j.pred_expr.push_back(p.expr);
      j.label_expr.push_back(*l.expr);
    }
  }
  for (const auto& p : preds) j.unmatched_predictions += label_ids.count(p.frame_id) == 0;
  if (j.matched == 0) throw ValidationError("join: predictions and labels share no frame_id");
  return j;
}

}  // namespace affectnet

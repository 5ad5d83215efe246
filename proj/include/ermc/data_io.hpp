#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ermc/curve.hpp"
#include "ermc/error.hpp"
#include "ermc/mlp.hpp"
#include "ermc/random.hpp"
#include "ermc/robustness.hpp"
#include "ermc/tensor.hpp"

namespace ermc {

enum class Split { train, test };

struct Dataset : LabeledBatch {
  std::size_t num_classes = 2;
  Split split = Split::train;

  bool operator==(const Dataset& other) const {
    return inputs == other.inputs && labels == other.labels && num_classes == other.num_classes;
  }
};

// ---------------------------------------------------------------------------
// Generators

namespace detail {

// Per-feature min-max rescale into [0, 1]. Constant features map to 0.5.
inline void rescale_unit(Matrix& x) {
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double lo = x(0, c), hi = x(0, c);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      lo = std::min(lo, x(r, c));
      hi = std::max(hi, x(r, c));
    }
    const double range = hi - lo;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      x(r, c) = range > 0.0 ? (x(r, c) - lo) / range : 0.5;
    }
  }
}

inline Dataset shuffled(const Matrix& x, const std::vector<int>& y, std::size_t k, Rng& rng) {
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  Dataset d;
  d.inputs = gather_rows(x, order);
  for (auto i : order) d.labels.push_back(y[i]);
  d.num_classes = k;
  return d;
}

}  // namespace detail

// Two interleaving half circles, n/2 points each at evenly spaced angles:
// class 0 on (cos a, sin a), class 1 on (1 - cos a, 1/2 - sin a), a in [0, pi].
// Gaussian noise (in those raw units) is added, rows are shuffled, and each
// feature is min-max rescaled into [0, 1].
inline Dataset gen_two_moons(std::size_t n, double noise_sd, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw Error(ErrorCode::domain, "two-moons needs an even n >= 2");
  if (!(noise_sd >= 0.0)) throw Error(ErrorCode::domain, "noise must be nonnegative");
  const std::size_t half = n / 2;
  Rng rng(seed);
  Matrix x(n, 2);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < half; ++i) {
    const double a =
        half > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
    x(i, 0) = std::cos(a);
    x(i, 1) = std::sin(a);
    y[i] = 0;
    x(half + i, 0) = 1.0 - std::cos(a);
    x(half + i, 1) = 0.5 - std::sin(a);
    y[half + i] = 1;
  }
  if (noise_sd > 0.0) {
    for (double& v : x.values()) v += noise_sd * rng.normal();
  }
  Dataset d = detail::shuffled(x, y, 2, rng);
  detail::rescale_unit(d.inputs);
  return d;
}

// Isotropic Gaussian clusters labelled by center index. Cluster sizes differ
// by at most one (earlier centers take the remainder). No rescaling.
inline Dataset gen_blobs(std::size_t n, const std::vector<std::vector<double>>& centers,
                         double spread, std::uint64_t seed) {
  const std::size_t k = centers.size();
  if (k < 2) throw Error(ErrorCode::domain, "blobs need at least two centers");
  if (n < k) throw Error(ErrorCode::domain, "fewer points than centers");
  if (!(spread >= 0.0)) throw Error(ErrorCode::domain, "spread must be nonnegative");
  const std::size_t d = centers.front().size();
  if (d == 0) throw Error(ErrorCode::domain, "centers must have positive dimension");
  for (const auto& c : centers) {
    if (c.size() != d) throw Error(ErrorCode::domain, "centers differ in dimension");
  }
  Rng rng(seed);
  Matrix x(n, d);
  std::vector<int> y(n);
  std::size_t row = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t count = n / k + (c < n % k ? 1 : 0);
    for (std::size_t i = 0; i < count; ++i, ++row) {
      for (std::size_t j = 0; j < d; ++j) x(row, j) = centers[c][j] + spread * rng.normal();
      y[row] = static_cast<int>(c);
    }
  }
  return detail::shuffled(x, y, k, rng);
}

// Shuffles once and cuts off the last round(n * test_fraction) rows as test.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& data, double test_fraction,
                                                    std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorCode::domain, "test fraction must lie in (0, 1)");
  }
  const std::size_t n = data.size();
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  if (n_test == 0 || n_test >= n) throw Error(ErrorCode::domain, "split leaves an empty side");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  const std::span<const std::size_t> all(order);
  Dataset train, test;
  static_cast<LabeledBatch&>(train) = gather(data, all.first(n - n_test));
  static_cast<LabeledBatch&>(test) = gather(data, all.last(n_test));
  train.num_classes = test.num_classes = data.num_classes;
  train.split = Split::train;
  test.split = Split::test;
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Files

// Writes via a sibling temp file and a rename.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, "cannot rename onto " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const int len = std::snprintf(buf.data(), buf.size(), "%.17g", v);
  return {buf.data(), static_cast<std::size_t>(len)};
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> csv_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = end + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

}  // namespace detail

// Header f0,...,f{d-1},label then one row per sample.
inline std::string dataset_to_csv(const Dataset& data) {
  std::string out;
  for (std::size_t c = 0; c < data.dim(); ++c) out += "f" + std::to_string(c) + ",";
  out += "label\n";
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (double v : data.inputs.row(r)) out += format_double(v) + ",";
    out += std::to_string(data.labels[r]) + "\n";
  }
  return out;
}

inline void save_csv(const std::filesystem::path& path, const Dataset& data) {
  write_file_atomic(path, dataset_to_csv(data));
}

// num_classes, when given, bounds the labels; otherwise it is max label + 1
// (at least 2).
inline Dataset dataset_from_csv(std::string_view text,
                                std::optional<std::size_t> num_classes = std::nullopt) {
  const auto lines = detail::csv_lines(text);
  if (lines.empty()) throw ParseError(1, "missing header");
  const auto header = detail::split_csv_line(lines[0]);
  if (header.size() < 2 || header.back() != "label") {
    throw ParseError(1, "header must end with a label column");
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t c = 0; c < d; ++c) {
    if (header[c] != "f" + std::to_string(c)) {
      throw ParseError(1, "expected column f" + std::to_string(c));
    }
  }
  if (lines.size() < 2) throw ParseError(2, "no data rows");
  std::vector<double> values;
  std::vector<int> labels;
  int max_label = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    const auto cells = detail::split_csv_line(lines[i]);
    if (cells.size() != d + 1) {
      throw ParseError(line_no, "expected " + std::to_string(d + 1) + " cells, found " +
                                    std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < d; ++c) {
      const auto v = detail::parse_double(cells[c]);
      if (!v) throw ParseError(line_no, "not a number: '" + std::string(cells[c]) + "'");
      if (!std::isfinite(*v)) throw ParseError(line_no, "non-finite feature");
      values.push_back(*v);
    }
    const auto label = detail::parse_int(cells[d]);
    if (!label || *label < 0) {
      throw ParseError(line_no, "label must be a nonnegative integer: '" + std::string(cells[d]) + "'");
    }
    if (num_classes && static_cast<std::size_t>(*label) >= *num_classes) {
      throw ParseError(line_no, "label " + std::to_string(*label) + " >= class count " +
                                    std::to_string(*num_classes));
    }
    if (*label > INT32_MAX) throw ParseError(line_no, "label too large");
    labels.push_back(static_cast<int>(*label));
    max_label = std::max(max_label, labels.back());
  }
  Dataset out;
  out.inputs = Matrix(labels.size(), d, std::move(values));
  out.labels = std::move(labels);
  out.num_classes = num_classes.value_or(std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1));
  return out;
}

inline Dataset load_csv(const std::filesystem::path& path,
                        std::optional<std::size_t> num_classes = std::nullopt) {
  return dataset_from_csv(read_file(path), num_classes);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "ERMC" | u32 version | u32 kind (1 model, 2 curve) | u32 width count |
// u32 widths... | f64 payload. All little-endian. A curve stores theta1,
// control, theta2 in that order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { model = 1, curve = 2 };

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  void raw(std::string_view s) { bytes_.append(s); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw CorruptCheckpointError(pos_, "truncated checkpoint");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline void write_header(ByteWriter& w, CheckpointKind kind, const LayerDims& dims) {
  w.raw("ERMC");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (auto width : dims) w.u32(static_cast<std::uint32_t>(width));
}

inline void write_payload(ByteWriter& w, const ParamVector& p) {
  for (double v : p.values()) w.f64(v);
}

inline ParamVector read_payload(ByteReader& r, std::size_t n) {
  ParamVector p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = r.f64();
  return p;
}

}  // namespace detail

inline std::string encode_checkpoint(const MlpModel& model) {
  detail::ByteWriter w;
  detail::write_header(w, CheckpointKind::model, model.dims());
  detail::write_payload(w, model.params());
  return w.take();
}

inline std::string encode_checkpoint(const CurveSpec& curve) {
  detail::ByteWriter w;
  detail::write_header(w, CheckpointKind::curve, curve.dims());
  detail::write_payload(w, curve.theta1());
  detail::write_payload(w, curve.control());
  detail::write_payload(w, curve.theta2());
  return w.take();
}

using Checkpoint = std::variant<MlpModel, CurveSpec>;

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(4) != "ERMC") throw CorruptCheckpointError(0, "bad magic");
  const auto version_at = r.offset();
  if (r.u32() != kCheckpointVersion) throw CorruptCheckpointError(version_at, "unsupported version");
  const auto kind_at = r.offset();
  const auto kind = r.u32();
  if (kind != 1 && kind != 2) throw CorruptCheckpointError(kind_at, "unknown kind tag");
  const auto count_at = r.offset();
  const auto count = r.u32();
  if (count < 2 || count > 4096) throw CorruptCheckpointError(count_at, "implausible layer count");
  LayerDims dims;
  for (std::uint32_t i = 0; i < count; ++i) dims.push_back(r.u32());
  try {
    validate_architecture(dims);
  } catch (const Error& e) {
    throw CorruptCheckpointError(count_at, e.what());
  }
  const std::size_t n = param_count(dims);
  const std::size_t blocks = kind == 1 ? 1 : 3;
  if (r.remaining() != blocks * n * 8) {
    throw CorruptCheckpointError(r.offset(), r.remaining() < blocks * n * 8
                                                 ? "truncated checkpoint"
                                                 : "trailing bytes after payload");
  }
  if (kind == 1) return MlpModel(dims, detail::read_payload(r, n));
  auto theta1 = detail::read_payload(r, n);
  auto control = detail::read_payload(r, n);
  auto theta2 = detail::read_payload(r, n);
  return CurveSpec(dims, std::move(theta1), std::move(control), std::move(theta2));
}

inline void save_checkpoint(const std::filesystem::path& path, const MlpModel& model) {
  write_file_atomic(path, encode_checkpoint(model));
}

inline void save_checkpoint(const std::filesystem::path& path, const CurveSpec& curve) {
  write_file_atomic(path, encode_checkpoint(curve));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

inline MlpModel load_model(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (auto* m = std::get_if<MlpModel>(&ck)) return std::move(*m);
  throw CorruptCheckpointError(8, path.string() + " holds a curve, expected a model");
}

inline CurveSpec load_curve(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (auto* c = std::get_if<CurveSpec>(&ck)) return std::move(*c);
  throw CorruptCheckpointError(8, path.string() + " holds a model, expected a curve");
}

// ---------------------------------------------------------------------------
// Robustness profiles

inline constexpr std::string_view kProfileHeader =
    "t,clean_acc,acc_linf,acc_l2,acc_l1,union_acc,clean_loss,loss_linf,loss_l2,loss_l1";

inline std::string profile_to_csv(const RobustnessProfile& profile) {
  std::string out(kProfileHeader);
  out += "\n";
  for (const auto& p : profile.points) {
    for (double v : {p.t, p.clean_acc, p.acc_linf, p.acc_l2, p.acc_l1, p.union_acc, p.clean_loss,
                     p.loss_linf, p.loss_l2, p.loss_l1}) {
      out += format_double(v) + ",";
    }
    out.back() = '\n';
  }
  return out;
}

inline RobustnessProfile profile_from_csv(std::string_view text) {
  const auto lines = detail::csv_lines(text);
  if (lines.empty() || lines[0] != kProfileHeader) throw ParseError(1, "not a profile header");
  RobustnessProfile profile;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = detail::split_csv_line(lines[i]);
    if (cells.size() != 10) throw ParseError(i + 1, "expected 10 cells");
    std::array<double, 10> v{};
    for (std::size_t c = 0; c < 10; ++c) {
      const auto x = detail::parse_double(cells[c]);
      if (!x || !std::isfinite(*x)) throw ParseError(i + 1, "bad number");
      v[c] = *x;
    }
    profile.points.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]});
  }
  if (profile.points.empty()) throw ParseError(2, "profile has no rows");
  return profile;
}

inline void save_profile_csv(const std::filesystem::path& path, const RobustnessProfile& profile) {
  write_file_atomic(path, profile_to_csv(profile));
}

inline RobustnessProfile load_profile_csv(const std::filesystem::path& path) {
  return profile_from_csv(read_file(path));
}

// ---------------------------------------------------------------------------
// Ensemble specs (JSON)

inline std::string ensemble_spec_to_json(const EnsembleSpec& spec) {
  nlohmann::json j;
  j["n"] = spec.n;
  j["alpha_inf"] = spec.alpha_inf;
  j["alpha_1"] = spec.alpha_1;
  j["intervals"] = nlohmann::json::array();
  for (const auto& iv : spec.intervals) j["intervals"].push_back({iv.a, iv.b});
  j["member_ts"] = spec.member_ts;
  return j.dump(2) + "\n";
}

inline EnsembleSpec ensemble_spec_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EnsembleSpec spec;
    spec.n = j.at("n").get<std::size_t>();
    spec.alpha_inf = j.at("alpha_inf").get<double>();
    spec.alpha_1 = j.at("alpha_1").get<double>();
    for (const auto& iv : j.at("intervals")) spec.intervals.push_back({iv.at(0), iv.at(1)});
    spec.member_ts = j.at("member_ts").get<std::vector<double>>();
    if (spec.member_ts.size() != spec.n || spec.n == 0) {
      throw Error(ErrorCode::parse, "member count does not match n");
    }
    for (double t : spec.member_ts) check_curve_t(t);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("ensemble spec: ") + e.what());
  }
}

}  // namespace ermc

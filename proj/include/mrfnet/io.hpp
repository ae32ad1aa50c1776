#pragma once

// File formats.
//
// Tensor file (little-endian):
//   offset 0   "MRFT"
//          4   u32 format version (1)
//          8   u8  dtype (0 = float32, 1 = float64)
//          9   u8  ndim
//          10  u64 dims[ndim]
//          ..  payload, row-major
// Grid2D fields are stored as [H, W, C], label fields as [H, W] (integral
// values), kernels as [out, in, kh, kw] and vectors as [n].
//
// Model file:
//   "MRFM", u32 version (1), u32 classes, u32 features, u32 kernel_size,
//   u32 hidden_layers, f64 alpha, u8 mode, u8 variant, u8 bias_trainable,
//   u8 reserved (0), u32 block count, then one tensor file per parameter block:
//     linear:    filters [K,K,k,k], bias [K]
//     nonlinear: first [F,K,k,k], (hidden weight [F,F,1,1], hidden bias [F])*,
//                final weight [K,F,1,1], final bias [K]
// Parameters are held as doubles in memory and written as float32 unless
// double-precision output is requested.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include "mrfnet/error.hpp"
#include "mrfnet/layers.hpp"
#include "mrfnet/tensor.hpp"
#include "mrfnet/train.hpp"

namespace mrfnet {

namespace fs = std::filesystem;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct RawTensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
  DType dtype = DType::f32;
};

// ---------------------------------------------------------------------------
// Byte-level helpers

namespace detail {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.append(s); }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string context) : data_(data), ctx_(std::move(context)) {}

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return data_.size() - pos_; }

  void need(std::uint64_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError(ctx_ + ": truncated " + what + ": expected " + std::to_string(n) +
                            " bytes, found " + std::to_string(remaining()),
                        pos_);
    }
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  [[noreturn]] void fail(const std::string& msg, std::uint64_t at) const { throw FormatError(ctx_ + ": " + msg, at); }
  const std::string& context() const noexcept { return ctx_; }

 private:
  std::string_view data_;
  std::uint64_t pos_ = 0;
  std::string ctx_;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Writes `contents` to a temporary sibling and renames it into place.
inline void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Tensor files

inline void encode_tensor(detail::ByteWriter& w, const RawTensor& t) {
  std::uint64_t n = 1;
  for (auto d : t.dims) n *= d;
  require(n == t.values.size(), "encode_tensor: value count does not match dims");
  require(t.dims.size() <= 255, "encode_tensor: too many dimensions");
  w.bytes("MRFT");
  w.le<std::uint32_t>(kTensorFormatVersion);
  w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
  w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) w.le<std::uint64_t>(d);
  for (double v : t.values) {
    if (t.dtype == DType::f32) {
      w.f32(static_cast<float>(v));
    } else {
      w.f64(v);
    }
  }
}

inline RawTensor decode_tensor(detail::ByteReader& r) {
  const auto start = r.offset();
  if (r.bytes(4, "magic") != "MRFT") r.fail("bad magic, expected MRFT", start);
  const auto version_at = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kTensorFormatVersion) r.fail("unsupported tensor format version " + std::to_string(version), version_at);
  const auto dtype_at = r.offset();
  const auto dtype = r.le<std::uint8_t>("dtype");
  if (dtype > 1) r.fail("unknown dtype code " + std::to_string(dtype), dtype_at);
  const auto ndim = r.le<std::uint8_t>("ndim");
  RawTensor t;
  t.dtype = static_cast<DType>(dtype);
  std::uint64_t n = 1;
  for (std::uint8_t i = 0; i < ndim; ++i) {
    t.dims.push_back(r.le<std::uint64_t>("dims"));
    n *= t.dims.back();
  }
  const std::uint64_t width = t.dtype == DType::f32 ? 4 : 8;
  const auto payload_at = r.offset();
  if (r.remaining() < n * width) {
    r.fail("truncated payload: expected " + std::to_string(n * width) + " bytes, found " +
               std::to_string(r.remaining()),
           payload_at);
  }
  t.values.resize(n);
  for (std::uint64_t j = 0; j < n; ++j) {
    if (t.dtype == DType::f32) {
      t.values[j] = static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>("payload")));
    } else {
      t.values[j] = std::bit_cast<double>(r.le<std::uint64_t>("payload"));
    }
  }
  return t;
}

inline void write_tensor(const fs::path& path, const RawTensor& t) {
  detail::ByteWriter w;
  encode_tensor(w, t);
  write_file_atomic(path, w.str());
}

inline RawTensor read_tensor(const fs::path& path) {
  const std::string data = detail::read_file(path);
  detail::ByteReader r(data, path.string());
  RawTensor t = decode_tensor(r);
  if (r.remaining() != 0) r.fail("unexpected trailing bytes", r.offset());
  return t;
}

inline RawTensor to_raw(const Grid2D& g, DType dtype = DType::f32) {
  return {{g.height(), g.width(), g.channels()}, g.values(), dtype};
}
inline RawTensor to_raw(const LabelField& l) {
  RawTensor t{{l.height(), l.width()}, {}, DType::f32};
  t.values.assign(l.data().begin(), l.data().end());
  return t;
}

inline Grid2D grid_from_raw(const RawTensor& t, const std::string& what = "tensor") {
  if (t.dims.size() != 3) throw ContractError(what + ": expected a 3-d [H, W, C] tensor");
  return Grid2D(t.dims[0], t.dims[1], t.dims[2], t.values);
}
inline LabelField labels_from_raw(const RawTensor& t, const std::string& what = "labels") {
  if (t.dims.size() != 2) throw ContractError(what + ": expected a 2-d [H, W] label tensor");
  std::vector<int> labels(t.values.size());
  for (std::size_t j = 0; j < labels.size(); ++j) {
    const double v = t.values[j];
    if (v != std::floor(v) || v < 0.0) throw ContractError(what + ": labels must be non-negative integers");
    labels[j] = static_cast<int>(v);
  }
  return LabelField(t.dims[0], t.dims[1], std::move(labels));
}

inline void write_grid(const fs::path& p, const Grid2D& g, DType dtype = DType::f32) { write_tensor(p, to_raw(g, dtype)); }
inline Grid2D read_grid(const fs::path& p) { return grid_from_raw(read_tensor(p), p.string()); }
inline void write_labels(const fs::path& p, const LabelField& l) { write_tensor(p, to_raw(l)); }
inline LabelField read_labels(const fs::path& p) { return labels_from_raw(read_tensor(p), p.string()); }

// ---------------------------------------------------------------------------
// Model files

namespace detail {

struct Block {
  std::vector<std::uint64_t> dims;
  std::span<double> values;
  bool mrf_filter = false;
};

inline std::vector<Block> model_blocks(MrfModel& m) {
  auto kdims = [](const Kernel& k) {
    return std::vector<std::uint64_t>{k.out_channels(), k.in_channels(), k.kh(), k.kw()};
  };
  std::vector<Block> out;
  if (m.is_linear()) {
    auto& lin = m.linear();
    out.push_back({kdims(lin.filters.kernel()), lin.filters.weights(), true});
    out.push_back({{lin.bias.size()}, lin.bias, false});
    return out;
  }
  auto& net = m.nonlinear();
  out.push_back({kdims(net.first.kernel()), net.first.weights(), true});
  for (auto& h : net.hidden) {
    out.push_back({kdims(h.kernel), h.kernel.weights(), false});
    out.push_back({{h.bias.size()}, h.bias, false});
  }
  out.push_back({kdims(net.final.kernel), net.final.kernel.weights(), false});
  out.push_back({{net.final.bias.size()}, net.final.bias, false});
  return out;
}

}  // namespace detail

inline std::string encode_model(const MrfModel& model, DType dtype = DType::f32) {
  MrfModel m = model;
  const ModelConfig& c = m.config();
  detail::ByteWriter w;
  w.bytes("MRFM");
  w.le<std::uint32_t>(kModelFormatVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.classes));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.features));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.kernel_size));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.hidden_layers));
  w.f64(c.alpha);
  w.le<std::uint8_t>(c.mode == Mode::generative ? 0 : 1);
  w.le<std::uint8_t>(c.variant == Variant::linear ? 0 : 1);
  w.le<std::uint8_t>(c.bias_trainable ? 1 : 0);
  w.le<std::uint8_t>(0);
  const auto blocks = detail::model_blocks(m);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) encode_tensor(w, {b.dims, {b.values.begin(), b.values.end()}, dtype});
  return std::move(w.str());
}

inline MrfModel decode_model(std::string_view data, const std::string& context = "model") {
  detail::ByteReader r(data, context);
  if (r.bytes(4, "magic") != "MRFM") r.fail("bad magic, expected MRFM", 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kModelFormatVersion) r.fail("unsupported model format version " + std::to_string(version), 4);
  ModelConfig c;
  c.classes = r.le<std::uint32_t>("header");
  c.features = r.le<std::uint32_t>("header");
  c.kernel_size = r.le<std::uint32_t>("header");
  c.hidden_layers = r.le<std::uint32_t>("header");
  c.alpha = std::bit_cast<double>(r.le<std::uint64_t>("header"));
  const auto mode_at = r.offset();
  const auto mode = r.le<std::uint8_t>("header");
  const auto variant = r.le<std::uint8_t>("header");
  const auto bias = r.le<std::uint8_t>("header");
  (void)r.le<std::uint8_t>("header");
  if (mode > 1 || variant > 1 || bias > 1) r.fail("invalid mode/variant/bias flags", mode_at);
  c.mode = mode == 0 ? Mode::generative : Mode::postprocess;
  c.variant = variant == 0 ? Variant::linear : Variant::nonlinear;
  c.bias_trainable = bias == 1;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(e.what(), 8);
  }
  MrfModel m = MrfModel::zeros(c);
  auto blocks = detail::model_blocks(m);
  const auto count_at = r.offset();
  const auto count = r.le<std::uint32_t>("block count");
  if (count != blocks.size()) {
    r.fail("expected " + std::to_string(blocks.size()) + " parameter blocks, found " + std::to_string(count), count_at);
  }
  for (auto& b : blocks) {
    const auto at = r.offset();
    RawTensor t = decode_tensor(r);
    if (t.dims != b.dims) r.fail("parameter block has unexpected shape", at);
    std::copy(t.values.begin(), t.values.end(), b.values.begin());
    if (!std::all_of(t.values.begin(), t.values.end(), [](double v) { return std::isfinite(v); })) {
      r.fail("parameter block contains non-finite values", at);
    }
  }
  if (!m.center_is_zero()) r.fail("MRF filter has a nonzero centre tap", count_at + 4);
  if (r.remaining() != 0) r.fail("unexpected trailing bytes", r.offset());
  return m;
}

inline void save_model(const fs::path& path, const MrfModel& model, DType dtype = DType::f32) {
  write_file_atomic(path, encode_model(model, dtype));
}
inline MrfModel load_model(const fs::path& path) { return decode_model(detail::read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Dataset manifests (JSON)

struct ManifestEntry {
  std::string id;
  std::string split = "train";
  std::string r;
  std::optional<std::string> c;
  std::optional<std::string> x;
  std::string target;
};

struct DatasetManifest {
  std::size_t classes = 2;
  std::size_t height = 0, width = 0;
  std::vector<ManifestEntry> samples;
  nlohmann::json provenance = nlohmann::json::object();
  fs::path root;  // directory the relative paths resolve against

  std::vector<const ManifestEntry*> split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& s : samples)
      if (name.empty() || s.split == name) out.push_back(&s);
    return out;
  }
};

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = "mrfnet-dataset";
  j["version"] = 1;
  j["classes"] = m.classes;
  j["height"] = m.height;
  j["width"] = m.width;
  j["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : m.samples) {
    nlohmann::ordered_json e;
    e["id"] = s.id;
    e["split"] = s.split;
    e["r"] = s.r;
    if (s.c) e["c"] = *s.c;
    if (s.x) e["x"] = *s.x;
    e["target"] = s.target;
    j["samples"].push_back(e);
  }
  j["provenance"] = nlohmann::ordered_json::parse(m.provenance.dump());
  write_file_atomic(path, j.dump(2) + "\n");
}

/// Parses a manifest and checks that every referenced file exists.
inline DatasetManifest read_manifest(const fs::path& path) {
  const std::string text = detail::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what(), e.byte);
  }
  try {
    if (j.at("format").get<std::string>() != "mrfnet-dataset") throw FormatError(path.string() + ": not a dataset manifest", 0);
    DatasetManifest m;
    m.root = path.parent_path();
    m.classes = j.at("classes").get<std::size_t>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    if (j.contains("provenance")) m.provenance = j["provenance"];
    for (const auto& e : j.at("samples")) {
      ManifestEntry s;
      s.id = e.at("id").get<std::string>();
      s.split = e.value("split", "train");
      s.r = e.at("r").get<std::string>();
      if (e.contains("c")) s.c = e["c"].get<std::string>();
      if (e.contains("x")) s.x = e["x"].get<std::string>();
      s.target = e.at("target").get<std::string>();
      for (const auto* rel : {&s.r, &s.target}) {
        if (!fs::exists(m.root / *rel)) throw IoError("manifest references missing file " + (m.root / *rel).string());
      }
      if (s.c && !fs::exists(m.root / *s.c)) throw IoError("manifest references missing file " + (m.root / *s.c).string());
      m.samples.push_back(std::move(s));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed manifest: " + e.what(), 0);
  }
}

/// How a Sample's input field is built from the manifest entry.
enum class InputKind {
  soft,    // the stored soft segmentation R
  onehot,  // one-hot encoding of the target labels
};

inline Sample load_sample(const DatasetManifest& m, const ManifestEntry& e, InputKind input = InputKind::soft) {
  Sample s;
  s.target = read_labels(m.root / e.target);
  s.r = input == InputKind::soft ? read_grid(m.root / e.r) : one_hot(s.target, m.classes);
  if (e.c) s.c = read_grid(m.root / *e.c);
  if (!s.r.same_extent(m.height, m.width) || s.r.channels() != m.classes) {
    throw ContractError("sample " + e.id + ": R shape does not match the manifest");
  }
  s.validate(m.classes);
  return s;
}

inline std::vector<Sample> load_samples(const DatasetManifest& m, const std::string& split,
                                        InputKind input = InputKind::soft) {
  std::vector<Sample> out;
  for (const auto* e : m.split(split)) out.push_back(load_sample(m, *e, input));
  return out;
}

// ---------------------------------------------------------------------------
// PGM export

namespace detail {
inline void write_pgm(const fs::path& path, std::size_t h, std::size_t w, const std::vector<unsigned char>& px) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(px.begin(), px.end());
  write_file_atomic(path, out);
}
}  // namespace detail

/// Labels map to evenly spaced grey levels round(255 k / (K - 1)).
inline void export_pgm(const LabelField& labels, std::size_t classes, const fs::path& path) {
  std::vector<unsigned char> px(labels.pixels());
  const double step = classes > 1 ? 255.0 / static_cast<double>(classes - 1) : 0.0;
  for (std::size_t p = 0; p < px.size(); ++p) {
    px[p] = static_cast<unsigned char>(std::lround(step * static_cast<double>(labels[p])));
  }
  detail::write_pgm(path, labels.height(), labels.width(), px);
}

/// One channel rescaled min-max to [0, 255]; a constant channel maps to 128.
inline void export_pgm(const Grid2D& field, std::size_t channel, const fs::path& path) {
  require(channel < field.channels(), "export_pgm: channel out of range");
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t p = 0; p < field.pixels(); ++p) {
    lo = std::min(lo, field.pixel(p)[channel]);
    hi = std::max(hi, field.pixel(p)[channel]);
  }
  std::vector<unsigned char> px(field.pixels(), 128);
  if (hi > lo) {
    for (std::size_t p = 0; p < px.size(); ++p) {
      px[p] = static_cast<unsigned char>(std::lround(255.0 * (field.pixel(p)[channel] - lo) / (hi - lo)));
    }
  }
  detail::write_pgm(path, field.height(), field.width(), px);
}

// ---------------------------------------------------------------------------
// Plain-text helpers

/// Grid from CSV text: one image row per line, W * channels values per line
/// with channels interleaved.
inline Grid2D grid_from_csv(std::string_view text, std::size_t channels) {
  require(channels >= 1, "grid_from_csv: need at least one channel");
  std::vector<double> values;
  std::size_t rows = 0, per_row = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string cell;
    std::size_t count = 0;
    while (std::getline(ls, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError("csv: cannot parse '" + cell + "' on row " + std::to_string(rows), rows);
      }
      ++count;
    }
    if (rows == 0) per_row = count;
    if (count != per_row) throw FormatError("csv: row " + std::to_string(rows) + " has a different length", rows);
    ++rows;
  }
  if (rows == 0 || per_row % channels != 0) throw FormatError("csv: row length is not a multiple of the channel count", 0);
  return Grid2D(rows, per_row / channels, channels, std::move(values));
}

/// Flat key=value configuration; '#' starts a comment, blank lines are ignored.
inline std::map<std::string, std::string> read_kv_config(const fs::path& path) {
  const std::string text = detail::read_file(path);
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace mrfnet

// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "fbquant/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>

#include "json.hpp"

namespace fbq {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace {

using ojson = nlohmann::ordered_json;

constexpr char kMagic[4] = {'F', 'B', 'Q', '1'};
constexpr const char* kWeightSuffix = ".weight";
constexpr const char* kCalibSuffix = ".calib_x";

std::uint64_t read_u64(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint64_t v = 0;
  std::memcpy(&v, bytes.data() + at, sizeof v);
  return v;
}

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

template <typename T>
void append_values(std::vector<std::uint8_t>& out, std::span<const T> values) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
  out.insert(out.end(), p, p + values.size_bytes());
}

template <typename T>
std::vector<T> read_values(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t count) {
  std::vector<T> v(count);
  if (count) std::memcpy(v.data(), bytes.data() + offset, count * sizeof(T));
  return v;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -v : v;
  }
  std::uint32_t bits = 0;
  if (exp == 31) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 112u) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F64") return 8;
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  return 0;
}

struct TensorEntry {
  std::string dtype;
  std::vector<std::size_t> shape;
  std::size_t begin = 0;
  std::size_t end = 0;
};

MatrixD decode_tensor(const std::string& name, const TensorEntry& e, std::span<const std::uint8_t> data,
                      bool flatten_leading) {
  std::size_t rows = 1;
  std::size_t cols = 1;
  if (e.shape.size() == 1 && flatten_leading) {
    cols = e.shape[0];
  } else if (e.shape.size() == 2 || (e.shape.size() > 2 && flatten_leading)) {
    cols = e.shape.back();
    for (std::size_t i = 0; i + 1 < e.shape.size(); ++i) rows *= e.shape[i];
  } else {
    throw SchemaError("tensor '" + name + "' has unsupported rank " + std::to_string(e.shape.size()));
  }
  const std::size_t n = rows * cols;
  const std::uint8_t* p = data.data() + e.begin;
  std::vector<double> v(n);
  if (e.dtype == "F64") {
    std::memcpy(v.data(), p, n * 8);
  } else if (e.dtype == "F32") {
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, p + 4 * i, 4);
      v[i] = f;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t h;
      std::memcpy(&h, p + 2 * i, 2);
      v[i] = e.dtype == "F16" ? half_to_float(h) : std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(v[i])) {
      throw DataError("tensor '" + name + "' contains a non-finite value at flat index " + std::to_string(i));
    }
  }
  return MatrixD(rows, cols, std::move(v));
}

ojson parse_header(std::span<const std::uint8_t> bytes, std::size_t at, std::size_t len) {
  const auto* first = reinterpret_cast<const char*>(bytes.data() + at);
  try {
    return ojson::parse(first, first + len);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("malformed JSON header at byte offset " + std::to_string(at + e.byte) + ": " + e.what());
  }
}

}  // namespace

std::vector<LayerRecord> parse_bundle(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw FormatError("bundle truncated at byte offset 0: missing header length");
  const std::uint64_t header_len = read_u64(bytes, 0);
  if (header_len > bytes.size() - 8) {
    throw FormatError("bundle header length " + std::to_string(header_len) + " runs past end of file at byte offset 8");
  }
  const ojson header = parse_header(bytes, 8, header_len);
  if (!header.is_object()) throw FormatError("bundle header at byte offset 8 is not a JSON object");
  const auto data = bytes.subspan(8 + header_len);

  std::vector<std::string> order;
  std::map<std::string, std::pair<std::optional<TensorEntry>, std::optional<TensorEntry>>> pairs;
  for (const auto& [name, meta] : header.items()) {
    if (name == "__metadata__") continue;
    TensorEntry e;
    try {
      e.dtype = meta.at("dtype").get<std::string>();
      e.shape = meta.at("shape").get<std::vector<std::size_t>>();
      const auto offs = meta.at("data_offsets").get<std::vector<std::size_t>>();
      if (offs.size() != 2) throw FormatError("");
      e.begin = offs[0];
      e.end = offs[1];
    } catch (const std::exception&) {
      throw FormatError("tensor '" + name + "' has a malformed header entry (header at byte offset 8)");
    }
    const std::size_t esz = dtype_size(e.dtype);
    if (esz == 0) throw FormatError("tensor '" + name + "' has unsupported dtype " + e.dtype);
    std::size_t numel = 1;
    for (std::size_t s : e.shape) numel *= s;
    if (e.end < e.begin || e.end > data.size() || e.end - e.begin != numel * esz) {
      throw FormatError("tensor '" + name + "' data_offsets [" + std::to_string(e.begin) + ", " +
                        std::to_string(e.end) + ") do not match its shape or the payload at byte offset " +
                        std::to_string(8 + header_len + e.begin));
    }
    std::string layer;
    bool is_weight = false;
    if (ends_with(name, kWeightSuffix)) {
      layer = name.substr(0, name.size() - std::strlen(kWeightSuffix));
      is_weight = true;
    } else if (ends_with(name, kCalibSuffix)) {
      layer = name.substr(0, name.size() - std::strlen(kCalibSuffix));
    } else {
      continue;
    }
    auto [it, inserted] = pairs.try_emplace(layer);
    if (inserted) order.push_back(layer);
    (is_weight ? it->second.first : it->second.second) = e;
  }

  std::vector<LayerRecord> layers;
  for (const auto& name : order) {
    const auto& [w, x] = pairs.at(name);
    if (!w) throw SchemaError("layer '" + name + "' has calibration inputs but no '" + name + kWeightSuffix + "'");
    if (!x) throw SchemaError("layer '" + name + "' has weights but no '" + name + kCalibSuffix + "'");
    LayerRecord rec;
    rec.name = name;
    rec.w = decode_tensor(name + kWeightSuffix, *w, data, false);
    rec.x = decode_tensor(name + kCalibSuffix, *x, data, true);
    if (rec.w.cols() != rec.x.cols()) {
      throw SchemaError("layer '" + name + "': weight in_dim " + std::to_string(rec.w.cols()) +
                        " does not match calibration width " + std::to_string(rec.x.cols()));
    }
    if (rec.x.rows() == 0) throw SchemaError("layer '" + name + "' has no calibration samples");
    layers.push_back(std::move(rec));
  }
  return layers;
}

std::vector<std::uint8_t> encode_bundle(const std::vector<LayerRecord>& layers, TensorDtype dtype) {
  ojson header = ojson::object();
  header["__metadata__"] = {{"format", "fbquant-calibration"}};
  const std::string dt = dtype == TensorDtype::kF64 ? "F64" : "F32";
  const std::size_t esz = dtype == TensorDtype::kF64 ? 8 : 4;
  std::size_t offset = 0;
  auto add = [&](const std::string& name, const MatrixD& m) {
    const std::size_t len = m.size() * esz;
    header[name] = {{"dtype", dt}, {"shape", {m.rows(), m.cols()}}, {"data_offsets", {offset, offset + len}}};
    offset += len;
  };
  for (const auto& l : layers) {
    add(l.name + kWeightSuffix, l.w);
    add(l.name + kCalibSuffix, l.x);
  }
  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + offset);
  append_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  auto put = [&](const MatrixD& m) {
    if (dtype == TensorDtype::kF64) {
      append_values<double>(out, m.values());
    } else {
      const MatrixF f = m.cast<float>();
      append_values<float>(out, f.values());
    }
  };
  for (const auto& l : layers) {
    put(l.w);
    put(l.x);
  }
  return out;
}

std::vector<LayerRecord> load_bundle(const std::filesystem::path& path) { return parse_bundle(read_file(path)); }

void save_bundle(const std::filesystem::path& path, const std::vector<LayerRecord>& layers, TensorDtype dtype) {
  write_file(path, encode_bundle(layers, dtype));
}

namespace {

ojson qconfig_json(const QuantConfig& c) {
  return {{"bits", c.bits},
          {"group_size", c.group_size},
          {"scheme", "asymmetric_minmax"},
          {"rounding", "half_away_from_zero"}};
}

QuantConfig qconfig_from_json(const ojson& j) {
  QuantConfig c;
  c.bits = j.at("bits").get<int>();
  c.group_size = j.at("group_size").get<std::size_t>();
  if (j.value("scheme", "asymmetric_minmax") != "asymmetric_minmax")
    throw FormatError("unsupported quantization scheme " + j.at("scheme").dump());
  if (j.value("rounding", "half_away_from_zero") != "half_away_from_zero")
    throw FormatError("unsupported rounding " + j.at("rounding").dump());
  c.validate();
  return c;
}

struct Span {
  std::size_t offset;
  std::size_t length;
};

}  // namespace

std::vector<std::uint8_t> encode_fbq(const std::vector<LayerResult>& results) {
  QuantConfig qc;
  if (!results.empty()) qc = results.front().q.config;
  ojson layers = ojson::array();
  std::vector<std::uint8_t> payload;
  auto region = [&](auto&& append) {
    const std::size_t begin = payload.size();
    append();
    return ojson{{"offset", begin}, {"length", payload.size() - begin}};
  };
  for (const auto& r : results) {
    if (!(r.q.config == qc)) throw ValueError("encode_fbq: layer '" + r.name + "' uses a different quant config");
    r.q.validate();
    r.sub.validate(r.q.out_dim, r.q.in_dim);
    ojson entry;
    entry["name"] = r.name;
    entry["out_dim"] = r.q.out_dim;
    entry["in_dim"] = r.q.in_dim;
    entry["rank"] = r.sub.rank();
    entry["codes"] = region([&] { payload.insert(payload.end(), r.q.codes.begin(), r.q.codes.end()); });
    entry["scales"] = region([&] { append_values<float>(payload, r.q.scales); });
    entry["zeros"] = region([&] { append_values<std::int32_t>(payload, r.q.zero_points); });
    const MatrixF a = r.sub.a.cast<float>();
    const MatrixF b = r.sub.b.cast<float>();
    entry["a"] = region([&] { append_values<float>(payload, a.values()); });
    entry["b"] = region([&] { append_values<float>(payload, b.values()); });
    layers.push_back(std::move(entry));
  }
  ojson header;
  header["format_version"] = kFbqFormatVersion;
  header["toolkit_version"] = kToolkitVersion;
  header["qconfig"] = qconfig_json(qc);
  header["layers"] = std::move(layers);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  append_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

FbqModel decode_fbq(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("FBQ container truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an FBQ container: bad magic at byte offset 0");
  const std::uint64_t header_len = read_u64(bytes, 4);
  if (header_len > bytes.size() - 12) throw FormatError("FBQ header length runs past end of file at byte offset 4");
  const ojson header = parse_header(bytes, 12, header_len);
  const auto payload = bytes.subspan(12 + header_len);

  FbqModel model;
  std::vector<std::pair<std::string, Span>> spans;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kFbqFormatVersion) {
      throw FormatError("FBQ format version mismatch: file has " + std::to_string(version) + ", expected " +
                        std::to_string(kFbqFormatVersion));
    }
    model.qconfig = qconfig_from_json(header.at("qconfig"));
    for (const auto& entry : header.at("layers")) {
      FbqLayer layer;
      layer.name = entry.at("name").get<std::string>();
      const auto out_dim = entry.at("out_dim").get<std::size_t>();
      const auto in_dim = entry.at("in_dim").get<std::size_t>();
      const auto rank = entry.at("rank").get<std::size_t>();
      const QuantConfig& qc = model.qconfig;
      const std::size_t groups = out_dim * qc.groups_per_row(in_dim);
      const std::pair<const char*, std::size_t> expected[] = {
          {"codes", out_dim * packed_row_bytes(in_dim, qc.bits)},
          {"scales", groups * 4},
          {"zeros", groups * 4},
          {"a", rank * in_dim * 4},
          {"b", out_dim * rank * 4},
      };
      std::map<std::string, Span> mine;
      for (const auto& [key, len] : expected) {
        Span s{entry.at(key).at("offset").get<std::size_t>(), entry.at(key).at("length").get<std::size_t>()};
        if (s.length != len) {
          throw FormatError("layer '" + layer.name + "': " + key + " length " + std::to_string(s.length) +
                            " does not match the declared shape (expected " + std::to_string(len) + ")");
        }
        if (s.offset > payload.size() || s.length > payload.size() - s.offset) {
          throw FormatError("layer '" + layer.name + "': " + key + " runs past the end of the payload (file truncated?)");
        }
        mine[key] = s;
        spans.emplace_back(layer.name + "." + key, s);
      }
      layer.q.out_dim = out_dim;
      layer.q.in_dim = in_dim;
      layer.q.config = qc;
      const Span c = mine["codes"];
      layer.q.codes.assign(payload.begin() + static_cast<std::ptrdiff_t>(c.offset),
                           payload.begin() + static_cast<std::ptrdiff_t>(c.offset + c.length));
      layer.q.scales = read_values<float>(payload, mine["scales"].offset, groups);
      layer.q.zero_points = read_values<std::int32_t>(payload, mine["zeros"].offset, groups);
      const auto a = read_values<float>(payload, mine["a"].offset, rank * in_dim);
      const auto b = read_values<float>(payload, mine["b"].offset, out_dim * rank);
      layer.sub.a = MatrixF(rank, in_dim, a).cast<double>();
      layer.sub.b = MatrixF(out_dim, rank, b).cast<double>();
      if (!layer.sub.a.all_finite() || !layer.sub.b.all_finite())
        throw DataError("layer '" + layer.name + "': sub-branch contains non-finite values");
      layer.q.validate();
      model.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("FBQ header is missing a required field: ") + e.what());
  }

  std::sort(spans.begin(), spans.end(),
            [](const auto& x, const auto& y) {
              return std::pair(x.second.offset, x.second.length) < std::pair(y.second.offset, y.second.length);
            });
  std::size_t cursor = 0;
  for (const auto& [name, s] : spans) {
    if (s.offset != cursor) {
      throw FormatError("FBQ payload buffer '" + name + "' starts at " + std::to_string(s.offset) + ", expected " +
                        std::to_string(cursor) + " (gap or overlap)");
    }
    cursor += s.length;
  }
  if (cursor != payload.size()) {
    throw FormatError("FBQ payload has " + std::to_string(payload.size() - cursor) + " trailing bytes");
  }
  return model;
}

void save_fbq(const std::filesystem::path& path, const std::vector<LayerResult>& results) {
  write_file(path, encode_fbq(results));
}

FbqModel load_fbq(const std::filesystem::path& path) { return decode_fbq(read_file(path)); }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    throw IoError("failed reading '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace fbq

#include "cora/model_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <utility>

#include "json.hpp"

namespace cora::io {
namespace {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

using json = nlohmann::ordered_json;

constexpr char kMagic[4] = {'C', 'O', 'R', 'A'};
constexpr std::size_t kHeaderSize = 16;
constexpr std::size_t kTrailerSize = 4;

[[noreturn]] void fail(Errc code, const std::string& what) { throw Error(code, what); }

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
T get(std::span<const std::uint8_t> in, std::size_t pos) {
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  return v;
}

// ---------------------------------------------------------------------------
// Blob sections

class BlobWriter {
 public:
  json add_f32(std::span<const double> values) {
    const std::size_t offset = bytes_.size();
    for (double v : values) put(bytes_, static_cast<float>(v));
    return ref("f32", offset);
  }
  json add_i8(std::span<const std::int8_t> values) {
    const std::size_t offset = bytes_.size();
    for (auto v : values) bytes_.push_back(static_cast<std::uint8_t>(v));
    return ref("i8", offset);
  }
  json add_i32(std::span<const std::int32_t> values) {
    const std::size_t offset = bytes_.size();
    for (auto v : values) put(bytes_, v);
    return ref("i32", offset);
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  json ref(const char* dtype, std::size_t offset) {
    json j;
    j["dtype"] = dtype;
    j["offset"] = offset;
    j["length"] = bytes_.size() - offset;
    return j;
  }
  std::vector<std::uint8_t> bytes_;
};

class BlobReader {
 public:
  explicit BlobReader(std::span<const std::uint8_t> blob) : blob_(blob) {}

  std::vector<double> f32(const json& ref, std::size_t count, const std::string& what) {
    const auto raw = section(ref, "f32", count, 4, what);
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = get<float>(raw, 4 * i);
    return out;
  }
  std::vector<std::int8_t> i8(const json& ref, std::size_t count, const std::string& what) {
    const auto raw = section(ref, "i8", count, 1, what);
    std::vector<std::int8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<std::int8_t>(raw[i]);
    return out;
  }
  std::vector<std::int32_t> i32(const json& ref, std::size_t count, const std::string& what) {
    const auto raw = section(ref, "i32", count, 4, what);
    std::vector<std::int32_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = get<std::int32_t>(raw, 4 * i);
    return out;
  }

  void check_disjoint() {
    std::sort(used_.begin(), used_.end());
    for (std::size_t i = 1; i < used_.size(); ++i)
      if (used_[i].first < used_[i - 1].second) fail(Errc::format, "blob sections overlap");
  }

 private:
  std::span<const std::uint8_t> section(const json& ref, const char* dtype, std::size_t count,
                                        std::size_t width, const std::string& what) {
    if (ref.value("dtype", "") != dtype)
      fail(Errc::format, what + ": expected dtype " + dtype);
    const auto offset = ref.at("offset").get<std::size_t>();
    const auto length = ref.at("length").get<std::size_t>();
    if (length != count * width)
      fail(Errc::shape_composition, what + ": declared shape does not match blob length");
    if (offset > blob_.size() || length > blob_.size() - offset)
      fail(Errc::format, what + ": section lies outside the blob");
    used_.emplace_back(offset, offset + length);
    return blob_.subspan(offset, length);
  }

  std::span<const std::uint8_t> blob_;
  std::vector<std::pair<std::size_t, std::size_t>> used_;
};

// ---------------------------------------------------------------------------
// Container

std::vector<std::uint8_t> encode(json manifest, const std::vector<std::uint8_t>& blob) {
  manifest["blob_length"] = blob.size();
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blob.begin(), blob.end());
  put<std::uint32_t>(out, crc32_of(out));
  return out;
}

struct Decoded {
  json manifest;
  std::span<const std::uint8_t> blob;
};

Decoded decode(std::span<const std::uint8_t> bytes, const char* format) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail(Errc::bad_magic, "not a CORA file");
  if (bytes.size() < kHeaderSize) fail(Errc::truncated, "file ends inside the header");
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kFormatVersion)
    fail(Errc::version_mismatch, "unsupported format version " + std::to_string(version) +
                                     " (expected " + std::to_string(kFormatVersion) + ")");
  const auto manifest_len = get<std::uint64_t>(bytes, 8);
  if (manifest_len > bytes.size() - kHeaderSize)
    fail(Errc::truncated, "file ends inside the manifest");

  const auto* text = reinterpret_cast<const char*>(bytes.data() + kHeaderSize);
  json manifest = json::parse(text, text + manifest_len, nullptr, false);
  const std::size_t body_end = kHeaderSize + manifest_len;
  std::optional<std::uint64_t> expected;
  if (!manifest.is_discarded() && manifest.is_object() && manifest.contains("blob_length") &&
      manifest["blob_length"].is_number_unsigned())
    expected = body_end + manifest["blob_length"].get<std::uint64_t>() + kTrailerSize;
  const bool short_file = expected ? bytes.size() < *expected : bytes.size() < body_end + kTrailerSize;
  if (bytes.size() < body_end + kTrailerSize) fail(Errc::truncated, "file ends before the checksum");
  const std::size_t crc_pos = bytes.size() - kTrailerSize;
  if (crc32_of(bytes.first(crc_pos)) != get<std::uint32_t>(bytes, crc_pos)) {
    if (short_file) fail(Errc::truncated, "file is shorter than its manifest declares");
    fail(Errc::integrity, "checksum mismatch");
  }
  if (expected && bytes.size() != *expected) fail(Errc::format, "blob length disagrees with the manifest");
  if (manifest.is_discarded() || !manifest.is_object()) fail(Errc::format, "manifest is not JSON");
  if (format && manifest.value("format", "") != format)
    fail(Errc::format, std::string("expected a ") + format + " file, found '" +
                           manifest.value("format", "?") + "'");
  if (manifest.value("format_version", 0u) != kFormatVersion)
    fail(Errc::version_mismatch, "manifest version differs from header version");
  return {std::move(manifest), bytes.subspan(body_end, crc_pos - body_end)};
}

json header(const char* format) {
  json j;
  j["format"] = format;
  j["format_version"] = kFormatVersion;
  return j;
}

// ---------------------------------------------------------------------------
// Shared pieces

json spec_json(const QuantSpec& spec) {
  json j;
  j["bits"] = spec.bits;
  j["clip"] = spec.clip.kind == ClipScheme::Kind::min_max ? "minmax" : "normal";
  j["k"] = spec.clip.k;
  j["mode"] = spec.mode == QuantMode::symmetric ? "symmetric" : "asymmetric";
  return j;
}

QuantSpec spec_from(const json& j) {
  QuantSpec s;
  s.bits = j.at("bits").get<int>();
  const auto clip = j.at("clip").get<std::string>();
  if (clip == "minmax")
    s.clip = ClipScheme::min_max();
  else if (clip == "normal")
    s.clip = ClipScheme::normal(j.at("k").get<double>());
  else
    fail(Errc::format, "unknown clip scheme '" + clip + "'");
  const auto mode = j.at("mode").get<std::string>();
  if (mode != "symmetric" && mode != "asymmetric") fail(Errc::format, "unknown quant mode");
  s.mode = mode == "symmetric" ? QuantMode::symmetric : QuantMode::asymmetric;
  validate(s);
  return s;
}

json quantized_json(const QuantizedTensor& q, BlobWriter& blob) {
  json j;
  j["shape"] = q.shape;
  j["spec"] = spec_json(q.spec);
  j["scale"] = q.params.scale;
  j["zero"] = q.params.zero;
  j["alpha"] = q.params.alpha;
  j["beta"] = q.params.beta;
  j["codes"] = blob.add_i8(q.codes);
  return j;
}

QuantizedTensor quantized_from(const json& j, BlobReader& blob, const std::string& what) {
  QuantizedTensor q;
  q.shape = j.at("shape").get<Shape>();
  q.spec = spec_from(j.at("spec"));
  q.params.scale = j.at("scale").get<double>();
  q.params.zero = j.at("zero").get<std::int32_t>();
  q.params.alpha = j.at("alpha").get<double>();
  q.params.beta = j.at("beta").get<double>();
  if (q.shape.empty() || std::find(q.shape.begin(), q.shape.end(), 0u) != q.shape.end())
    fail(Errc::format, what + ": shape has zero dimensions");
  q.codes = blob.i8(j.at("codes"), shape_size(q.shape), what);
  const auto [lo, hi] = code_range(q.spec.bits);
  for (auto c : q.codes)
    if (c < lo || c > hi) fail(Errc::format, what + ": code outside the bit-width range");
  return q;
}

DenseTensor tensor_from(const json& ref, const Shape& shape, BlobReader& blob,
                        const std::string& what) {
  if (shape.empty() || std::find(shape.begin(), shape.end(), 0u) != shape.end())
    fail(Errc::format, what + ": shape has zero dimensions");
  return DenseTensor(shape, blob.f32(ref, shape_size(shape), what));
}

// Layer descriptors without weights; `weights` writes or reads the parameter tensors.
json layer_json(const Layer& layer) {
  json j;
  std::visit(
      [&](const auto& l) {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, ConvLayer>) {
          j["type"] = "conv";
          j["name"] = l.name;
          j["shape"] = {l.out_channels, l.in_channels, l.kernel_h, l.kernel_w};
          j["stride"] = {l.geometry.stride_h, l.geometry.stride_w};
          j["padding"] = {l.geometry.pad_h, l.geometry.pad_w};
        } else if constexpr (std::is_same_v<T, DenseLayer>) {
          j["type"] = "dense";
          j["name"] = l.name;
          j["shape"] = {l.out_features, l.in_features};
        } else if constexpr (std::is_same_v<T, ReluLayer>) {
          j["type"] = "relu";
        } else if constexpr (std::is_same_v<T, FlattenLayer>) {
          j["type"] = "flatten";
        } else {
          j["type"] = std::is_same_v<T, MaxPoolLayer> ? "maxpool" : "avgpool";
          j["kernel"] = l.kernel;
          j["stride"] = l.stride;
        }
      },
      layer);
  return j;
}

std::vector<double> bias_from(const json& j, std::size_t count, BlobReader& blob,
                              const std::string& what) {
  if (!j.contains("bias") || j["bias"].is_null()) return {};
  return blob.f32(j["bias"], count, what + " bias");
}

// Parses a layer list; weight tensors come from `load_weight(index, json, shape, name)`.
template <class LoadWeight>
std::vector<Layer> layers_from(const json& list, BlobReader& blob, LoadWeight load_weight) {
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const json& j = list[i];
    const auto type = j.at("type").get<std::string>();
    if (type == "conv") {
      ConvLayer c;
      c.name = j.value("name", "");
      const auto shape = j.at("shape").get<Shape>();
      if (shape.size() != 4) fail(Errc::format, "conv shape must have 4 entries");
      c.out_channels = shape[0];
      c.in_channels = shape[1];
      c.kernel_h = shape[2];
      c.kernel_w = shape[3];
      const auto stride = j.at("stride").get<std::vector<std::size_t>>();
      const auto pad = j.at("padding").get<std::vector<std::size_t>>();
      if (stride.size() != 2 || pad.size() != 2) fail(Errc::format, "conv stride/padding need 2 entries");
      c.geometry = {stride[0], stride[1], pad[0], pad[1]};
      c.weight = load_weight(i, j, shape, c.name);
      c.bias = bias_from(j, c.out_channels, blob, c.name);
      layers.emplace_back(std::move(c));
    } else if (type == "dense") {
      DenseLayer d;
      d.name = j.value("name", "");
      const auto shape = j.at("shape").get<Shape>();
      if (shape.size() != 2) fail(Errc::format, "dense shape must have 2 entries");
      d.out_features = shape[0];
      d.in_features = shape[1];
      d.weight = load_weight(i, j, shape, d.name);
      d.bias = bias_from(j, d.out_features, blob, d.name);
      layers.emplace_back(std::move(d));
    } else if (type == "relu") {
      layers.emplace_back(ReluLayer{});
    } else if (type == "flatten") {
      layers.emplace_back(FlattenLayer{});
    } else if (type == "maxpool") {
      layers.emplace_back(MaxPoolLayer{j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>()});
    } else if (type == "avgpool") {
      layers.emplace_back(AvgPoolLayer{j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>()});
    } else {
      fail(Errc::format, "unknown layer type '" + type + "'");
    }
  }
  return layers;
}

const std::vector<double>* bias_of(const Layer& layer) {
  if (const auto* c = std::get_if<ConvLayer>(&layer)) return &c->bias;
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return &d->bias;
  return nullptr;
}

template <class Fn>
auto guarded(const std::string& path, Fn fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw Error(Errc::format, path + ": malformed manifest: " + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::io) throw;
    throw Error(e.code(), path + ": " + e.what());
  }
}

}  // namespace

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io, "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::io, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io, "failed writing " + path);
}

std::string peek_format(const std::string& path) {
  const auto bytes = read_bytes(path);
  return guarded(path, [&] { return decode(bytes, nullptr).manifest.value("format", ""); });
}

// ---------------------------------------------------------------------------

void save_model(const std::string& path, const Model& model) {
  validate(model);
  BlobWriter blob;
  json m = header("cora-model");
  m["input_shape"] = model.input_shape;
  m["num_classes"] = model.num_classes;
  m["provenance"] = model.provenance;
  json layers = json::array();
  for (const Layer& layer : model.layers) {
    json j = layer_json(layer);
    std::visit(
        [&](const auto& l) {
          if constexpr (requires { l.weight; }) {
            j["weight"] = blob.add_f32(l.weight.data());
            if (!l.bias.empty()) j["bias"] = blob.add_f32(l.bias);
          }
        },
        layer);
    layers.push_back(std::move(j));
  }
  m["layers"] = std::move(layers);
  write_bytes(path, encode(std::move(m), blob.bytes()));
}

Model load_model(const std::string& path) {
  const auto bytes = read_bytes(path);
  return guarded(path, [&] {
    auto [m, raw] = decode(bytes, "cora-model");
    BlobReader blob(raw);
    Model model;
    model.input_shape = m.at("input_shape").get<Shape>();
    model.num_classes = m.at("num_classes").get<std::size_t>();
    model.provenance = m.value("provenance", "");
    model.layers = layers_from(m.at("layers"), blob, [&](std::size_t, const json& j, const Shape& shape,
                                                          const std::string& name) {
      return tensor_from(j.at("weight"), shape, blob, name);
    });
    blob.check_disjoint();
    validate(model);
    return model;
  });
}

void save_quantized(const std::string& path, const AdaptedQuantModel& model) {
  if (model.mode == AdapterMode::soft)
    fail(Errc::invalid_argument, "finalize the search before saving: soft adapters are not storable");
  validate(model);
  BlobWriter blob;
  json m = header("cora-qmodel");
  m["input_shape"] = model.network.input_shape;
  m["num_classes"] = model.network.num_classes;
  m["provenance"] = model.network.provenance;
  m["weight_spec"] = spec_json(model.weight_spec);
  json layers = json::array();
  for (std::size_t i = 0; i < model.network.layers.size(); ++i) {
    const Layer& layer = model.network.layers[i];
    json j = layer_json(layer);
    if (const auto& q = model.quantized.at(i)) j["quant"] = quantized_json(*q, blob);
    if (const auto* bias = bias_of(layer); bias && !bias->empty()) j["bias"] = blob.add_f32(*bias);
    layers.push_back(std::move(j));
  }
  m["layers"] = std::move(layers);
  m["adapter_mode"] = model.mode == AdapterMode::hard ? "hard" : "none";
  m["order"] = model.order;
  m["budget"] = model.target_budget;
  m["adapter_spec"] = model.adapter_spec ? spec_json(*model.adapter_spec) : json(nullptr);
  json adapters = json::array();
  if (model.mode == AdapterMode::hard) {
    for (const AdaptedConv& ac : model.adapters) {
      if (!ac.adapter) fail(Errc::invalid_argument, "hard mode adapter without tensors");
      json j;
      j["layer"] = ac.layer;
      j["max_rank"] = ac.max_rank;
      j["rank"] = ac.adapter->rank;
      for (const char* key : {"a", "b"}) {
        const bool is_a = key[0] == 'a';
        const auto& codes = is_a ? ac.a_codes : ac.b_codes;
        const DenseTensor& t = is_a ? ac.adapter->a : ac.adapter->b;
        json f;
        if (codes) {
          f["quant"] = quantized_json(*codes, blob);
        } else {
          f["shape"] = t.shape();
          f["values"] = blob.add_f32(t.data());
        }
        j[key] = std::move(f);
      }
      adapters.push_back(std::move(j));
    }
  }
  m["adapters"] = std::move(adapters);
  write_bytes(path, encode(std::move(m), blob.bytes()));
}

AdaptedQuantModel load_quantized(const std::string& path) {
  const auto bytes = read_bytes(path);
  return guarded(path, [&] {
    auto [m, raw] = decode(bytes, "cora-qmodel");
    BlobReader blob(raw);
    AdaptedQuantModel out;
    out.weight_spec = spec_from(m.at("weight_spec"));
    Model& net = out.network;
    net.input_shape = m.at("input_shape").get<Shape>();
    net.num_classes = m.at("num_classes").get<std::size_t>();
    net.provenance = m.value("provenance", "");
    const json& list = m.at("layers");
    out.quantized.resize(list.size());
    net.layers = layers_from(list, blob, [&](std::size_t index, const json& j, const Shape& shape,
                                             const std::string& name) {
      QuantizedTensor q = quantized_from(j.at("quant"), blob, name);
      if (q.shape != shape) fail(Errc::shape_composition, name + ": code shape differs from layer shape");
      DenseTensor w = dequantize(q);
      out.quantized[index] = std::move(q);
      return w;
    });
    validate(net);

    const auto mode = m.at("adapter_mode").get<std::string>();
    if (mode != "hard" && mode != "none") fail(Errc::format, "unknown adapter mode '" + mode + "'");
    out.mode = mode == "hard" ? AdapterMode::hard : AdapterMode::none;
    out.order = m.at("order").get<int>();
    out.target_budget = m.at("budget").get<double>();
    if (!m.at("adapter_spec").is_null()) out.adapter_spec = spec_from(m["adapter_spec"]);
    for (const json& j : m.at("adapters")) {
      AdaptedConv ac;
      ac.layer = j.at("layer").get<std::size_t>();
      ac.max_rank = j.at("max_rank").get<std::size_t>();
      const auto rank = j.at("rank").get<std::size_t>();
      if (ac.layer >= net.layers.size() || !std::holds_alternative<ConvLayer>(net.layers[ac.layer]))
        fail(Errc::shape_composition, "adapter attached to a non-conv layer");
      const auto& host = std::get<ConvLayer>(net.layers[ac.layer]);
      LowRankAdapter adapter{{}, {}, rank, host.geometry};
      for (const char* key : {"a", "b"}) {
        const bool is_a = key[0] == 'a';
        const json& f = j.at(key);
        const std::string what = host.name + " adapter " + key;
        DenseTensor t;
        if (f.contains("quant")) {
          QuantizedTensor q = quantized_from(f["quant"], blob, what);
          t = dequantize(q);
          (is_a ? ac.a_codes : ac.b_codes) = std::move(q);
        } else {
          t = tensor_from(f.at("values"), f.at("shape").get<Shape>(), blob, what);
        }
        (is_a ? adapter.a : adapter.b) = std::move(t);
      }
      ac.adapter = std::move(adapter);
      out.ranks.push_back(static_cast<double>(rank));
      out.adapters.push_back(std::move(ac));
    }
    blob.check_disjoint();
    validate(out);
    return out;
  });
}

void save_dataset(const std::string& path, const Dataset& data) {
  validate(data.batch, data.num_classes);
  if (data.split != "calibration" && data.split != "validation")
    fail(Errc::invalid_argument, "split must be 'calibration' or 'validation'");
  BlobWriter blob;
  json m = header("cora-data");
  m["split"] = data.split;
  m["count"] = data.batch.size();
  m["image_shape"] = data.batch.sample_shape();
  m["num_classes"] = data.num_classes;
  m["images"] = blob.add_f32(data.batch.images.data());
  m["labels"] = blob.add_i32(data.batch.labels);
  write_bytes(path, encode(std::move(m), blob.bytes()));
}

Dataset load_dataset(const std::string& path) {
  const auto bytes = read_bytes(path);
  return guarded(path, [&] {
    auto [m, raw] = decode(bytes, "cora-data");
    BlobReader blob(raw);
    Dataset d;
    d.split = m.at("split").get<std::string>();
    if (d.split != "calibration" && d.split != "validation")
      fail(Errc::format, "unknown split '" + d.split + "'");
    d.num_classes = m.at("num_classes").get<std::size_t>();
    const auto count = m.at("count").get<std::size_t>();
    Shape shape = m.at("image_shape").get<Shape>();
    if (shape.size() != 3) fail(Errc::format, "image shape must be channels x height x width");
    shape.insert(shape.begin(), count);
    d.batch.images = tensor_from(m.at("images"), shape, blob, "images");
    d.batch.labels = blob.i32(m.at("labels"), count, "labels");
    blob.check_disjoint();
    validate(d.batch, d.num_classes);
    return d;
  });
}

}  // namespace cora::io

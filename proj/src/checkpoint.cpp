// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include "checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "config.hpp"
#include "errors.hpp"

namespace d2lora {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::string_view kLayerMagic = "D2LA";
constexpr std::string_view kNetMagic = "D2LN";

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_doubles(std::string& out, std::span<const double> v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    std::memcpy(&v, take(4, what).data(), 4);
    return v;
  }
  void doubles(std::span<double> out, const char* what) {
    auto s = take(out.size() * sizeof(double), what);
    if (!out.empty()) std::memcpy(out.data(), s.data(), s.size());
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

struct ArraySpec {
  std::string name;
  std::size_t rows, cols;
};

std::string frame(std::string_view magic, const json& header, std::string_view payload) {
  const std::string h = header.dump();
  std::string out;
  out.reserve(magic.size() + 8 + h.size() + payload.size());
  out.append(magic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out.append(h);
  out.append(payload);
  return out;
}

json header_for(const char* kind, bool merged, std::size_t d_out, std::size_t d_in, const std::vector<ArraySpec>& arrays) {
  json a = json::array();
  for (const auto& s : arrays) a.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  return {{"kind", kind}, {"merged", merged}, {"d_out", d_out}, {"d_in", d_in}, {"arrays", a}};
}

json parse_header(Reader& r, std::string_view magic) {
  if (r.take(4, "magic") != magic) throw FormatError("bad magic: expected " + std::string(magic));
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = r.u32("header length");
  auto text = r.take(len, "header");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
}

}  // namespace

std::string encode_layer(const AdapterLayer& layer) {
  const std::size_t d_out = layer.d_out();
  const std::size_t d_in = layer.d_in();
  std::string payload;
  json header;
  if (layer.merged()) {
    const Matrix w_hat = layer.merged_weight();
    header = header_for("merged", true, d_out, d_in, {{"W_hat", d_out, d_in}, {"b", 1, d_out}});
    put_doubles(payload, w_hat.values());
    put_doubles(payload, layer.bias());
  } else {
    const auto& f = layer.factors();
    const std::size_t rp = f.a_plus.cols();
    const std::size_t rm = f.a_minus.cols();
    header = header_for("adapter", false, d_out, d_in,
                        {{"W0", d_out, d_in},
                         {"b", 1, d_out},
                         {"m", 1, d_in},
                         {"A_plus", d_in, rp},
                         {"B_plus", rp, d_out},
                         {"A_minus", d_in, rm},
                         {"B_minus", rm, d_out},
                         {"tau", 1, 1}});
    put_doubles(payload, layer.base_weight().values());
    put_doubles(payload, layer.bias());
    put_doubles(payload, layer.magnitudes());
    put_doubles(payload, f.a_plus.values());
    put_doubles(payload, f.b_plus.values());
    put_doubles(payload, f.a_minus.values());
    put_doubles(payload, f.b_minus.values());
    put_doubles(payload, std::span<const double>(&f.tau, 1));
  }
  header["config"] = adapter_to_json(layer.config());
  return frame(kLayerMagic, header, payload);
}

std::string encode_linear(const Matrix& weight, const Vector& bias) {
  if (bias.size() != weight.rows()) throw ShapeError("encode_linear: bias length must equal rows");
  std::string payload;
  put_doubles(payload, weight.values());
  put_doubles(payload, bias);
  auto header = header_for("linear", false, weight.rows(), weight.cols(),
                           {{"W", weight.rows(), weight.cols()}, {"b", 1, weight.rows()}});
  return frame(kLayerMagic, header, payload);
}

LayerRecord decode_layer(std::string_view bytes) {
  Reader r(bytes);
  json h = parse_header(r, kLayerMagic);
  LayerRecord rec;
  std::size_t d_out = 0, d_in = 0;
  std::vector<ArraySpec> arrays;
  std::string kind;
  try {
    kind = h.at("kind").get<std::string>();
    d_out = h.at("d_out").get<std::size_t>();
    d_in = h.at("d_in").get<std::size_t>();
    for (const auto& a : h.at("arrays")) {
      arrays.push_back({a.at("name").get<std::string>(), a.at("rows").get<std::size_t>(), a.at("cols").get<std::size_t>()});
    }
    if (kind != "linear") rec.config = adapter_from_json(h.at("config"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  std::vector<std::string> expected;
  if (kind == "adapter") {
    rec.kind = CheckpointKind::adapter;
    expected = {"W0", "b", "m", "A_plus", "B_plus", "A_minus", "B_minus", "tau"};
  } else if (kind == "merged") {
    rec.kind = CheckpointKind::merged;
    expected = {"W_hat", "b"};
  } else if (kind == "linear") {
    rec.kind = CheckpointKind::linear;
    expected = {"W", "b"};
  } else {
    throw FormatError("unknown checkpoint kind '" + kind + "'");
  }
  if (h.value("merged", false) != (rec.kind == CheckpointKind::merged)) {
    throw FormatError("checkpoint merged flag disagrees with kind");
  }
  if (arrays.size() != expected.size()) throw FormatError("checkpoint array list does not match kind");
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    if (arrays[i].name != expected[i]) throw FormatError("checkpoint array " + std::to_string(i) + " must be " + expected[i]);
  }

  auto read_matrix = [&](const ArraySpec& s, std::size_t rows, std::size_t cols) {
    if (s.rows != rows || s.cols != cols) throw FormatError("checkpoint array " + s.name + " has wrong shape");
    Matrix m(rows, cols);
    r.doubles(m.values(), s.name.c_str());
    return m;
  };
  auto read_vector = [&](const ArraySpec& s, std::size_t n) {
    if (s.rows != 1 || s.cols != n) throw FormatError("checkpoint array " + s.name + " has wrong shape");
    Vector v(n);
    r.doubles(v, s.name.c_str());
    return v;
  };

  rec.weight = read_matrix(arrays[0], d_out, d_in);
  rec.bias = read_vector(arrays[1], d_out);
  if (rec.kind == CheckpointKind::adapter) {
    const std::size_t rp = arrays[3].cols;
    const std::size_t rm = arrays[5].cols;
    if (rp != rec.config.rank_plus || rm != rec.config.rank_minus) {
      throw FormatError("checkpoint factor ranks disagree with config");
    }
    rec.magnitudes = read_vector(arrays[2], d_in);
    rec.factors.a_plus = read_matrix(arrays[3], d_in, rp);
    rec.factors.b_plus = read_matrix(arrays[4], rp, d_out);
    rec.factors.a_minus = read_matrix(arrays[5], d_in, rm);
    rec.factors.b_minus = read_matrix(arrays[6], rm, d_out);
    rec.factors.tau = read_vector(arrays[7], 1)[0];
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return rec;
}

AdapterLayer layer_from_record(LayerRecord record) {
  if (record.kind != CheckpointKind::adapter) {
    throw StateError("checkpoint holds merged or plain weights; adapter factors are not available");
  }
  AdapterLayer layer(std::move(record.weight), std::move(record.bias), record.config, std::move(record.factors));
  if (layer.magnitudes() != record.magnitudes) {
    throw FormatError("checkpoint magnitudes do not match the stored base weight");
  }
  return layer;
}

LinearModule module_from_record(std::string name, LayerRecord record) {
  LinearModule m;
  m.name = std::move(name);
  if (record.kind == CheckpointKind::adapter) {
    m.weight = record.weight;
    m.bias = record.bias;
    m.adapter.emplace(layer_from_record(std::move(record)));
  } else {
    m.weight = std::move(record.weight);
    m.bias = std::move(record.bias);
  }
  return m;
}

std::string encode_net(const ToyNet& net) {
  std::string payload;
  json modules = json::array();
  for (const auto& m : net.modules()) {
    std::string blob = m.adapter ? encode_layer(*m.adapter) : encode_linear(m.weight, m.bias);
    const char* kind = m.adapter ? (m.adapter->merged() ? "merged" : "adapter") : "linear";
    modules.push_back({{"name", m.name}, {"kind", kind}, {"offset", payload.size()}, {"length", blob.size()}});
    payload += blob;
  }
  json manifest = {{"embed_dim", net.embed_dim()},
                   {"n_classes", net.n_classes()},
                   {"seq_len", net.seq_len()},
                   {"activation", net.activation() == HeadActivation::tanh ? "tanh" : "identity"},
                   {"modules", modules}};
  return frame(kNetMagic, manifest, payload);
}

ToyNet decode_net(std::string_view bytes) {
  Reader r(bytes);
  json manifest = parse_header(r, kNetMagic);
  const std::string_view payload = r.take(r.remaining(), "payload");
  std::vector<LinearModule> modules;
  std::size_t seq_len = 0;
  HeadActivation act = HeadActivation::tanh;
  std::size_t covered = 0;
  try {
    seq_len = manifest.at("seq_len").get<std::size_t>();
    const auto a = manifest.at("activation").get<std::string>();
    if (a == "tanh") {
      act = HeadActivation::tanh;
    } else if (a == "identity") {
      act = HeadActivation::identity;
    } else {
      throw FormatError("unknown activation '" + a + "'");
    }
    for (const auto& m : manifest.at("modules")) {
      const auto offset = m.at("offset").get<std::size_t>();
      const auto length = m.at("length").get<std::size_t>();
      if (offset != covered || length > payload.size() - offset) throw FormatError("net manifest offsets are inconsistent");
      covered += length;
      auto rec = decode_layer(payload.substr(offset, length));
      modules.push_back(module_from_record(m.at("name").get<std::string>(), std::move(rec)));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("net manifest: ") + e.what());
  }
  if (covered != payload.size()) throw FormatError("net checkpoint has trailing bytes");
  ToyNet net(seq_len, act, std::move(modules));
  if (net.embed_dim() != manifest["embed_dim"].get<std::size_t>() ||
      net.n_classes() != manifest["n_classes"].get<std::size_t>()) {
    throw FormatError("net manifest dims disagree with module shapes");
  }
  return net;
}

void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename " + tmp + " to " + path);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sniff_magic(std::string_view bytes) {
  if (bytes.size() < 4) return {};
  auto m = bytes.substr(0, 4);
  if (m == kLayerMagic || m == kNetMagic) return std::string(m);
  return {};
}

}  // namespace d2lora

// SPDX-License-Identifier: Apache-2.0
#include "qvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fmt/format.h"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads assume a little-endian host");

namespace qvit {

namespace {

constexpr char kMagic[4] = {'Q', 'V', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32_le(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

double through_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

const Tensor* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Json header;
  header["meta"] = ck.meta;

  Json tensors_json = Json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    Json tj;
    tj["shape"] = t->shape;
    tj["dtype"] = "f32";
    tj["offset"] = offset;
    tensors_json[name] = std::move(tj);
    offset += t->numel() * sizeof(float);
  }
  header["tensors"] = std::move(tensors_json);

  Json quants_json = Json::object();
  for (const auto& [name, q] : ck.quantizers) {
    Json qj;
    qj["b_tilde"] = q.b_tilde;
    qj["scales"] = q.scales;
    if (q.frozen_bit)
      qj["frozen_bit"] = *q.frozen_bit;
    else
      qj["frozen_bit"] = nullptr;
    qj["is_signed"] = q.is_signed;
    qj["role"] = q.role;
    quants_json[name] = std::move(qj);
  }
  header["quantizers"] = std::move(quants_json);

  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_u32_le(out, kFormatVersion);
  write_u64_le(out, header_str.size());
  out.write(header_str.data(),
            static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : ck.tensors) {
    for (double v : t->data) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  char magic[4];
  if (!in.read(magic, sizeof(magic)))
    throw TruncatedError("truncated checkpoint header: " + path);
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw BadMagicError("bad checkpoint magic in " + path);

  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof(version)) ||
      !in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len)))
    throw TruncatedError("truncated checkpoint header: " + path);
  if (version != kFormatVersion)
    throw FormatError(fmt::format(
        "unsupported checkpoint format version {} (expected {}) in {}",
        version, kFormatVersion, path));

  std::string header_str(header_len, '\0');
  if (!in.read(header_str.data(), static_cast<std::streamsize>(header_len)))
    throw TruncatedError("truncated checkpoint header JSON: " + path);

  Json header;
  try {
    header = Json::parse(header_str);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") +
                      e.what());
  }

  Checkpoint ck;
  ck.meta = header.value("meta", Json::object());

  // Payload length check before any tensor is materialized.
  const auto payload_begin = in.tellg();
  in.seekg(0, std::ios::end);
  const std::uint64_t payload_size =
      static_cast<std::uint64_t>(in.tellg() - payload_begin);
  std::uint64_t expected = 0;
  for (const auto& item : header.at("tensors").items()) {
    std::uint64_t numel = 1;
    for (const auto& d : item.value().at("shape"))
      numel *= d.get<std::uint64_t>();
    expected += numel * sizeof(float);
  }
  if (payload_size != expected)
    throw TruncatedError(fmt::format(
        "checkpoint payload is {} bytes, header declares {}: {}",
        payload_size, expected, path));

  for (const auto& item : header.at("tensors").items()) {
    const Json& tj = item.value();
    if (tj.at("dtype").get<std::string>() != "f32")
      throw FormatError("unsupported tensor dtype in " + path);
    std::vector<size_t> shape = tj.at("shape").get<std::vector<size_t>>();
    std::uint64_t numel = 1;
    for (size_t d : shape) numel *= d;
    const std::uint64_t offset = tj.at("offset").get<std::uint64_t>();
    if (offset + numel * sizeof(float) > payload_size)
      throw TruncatedError("tensor payload out of bounds in " + path);
    in.seekg(payload_begin + static_cast<std::streamoff>(offset));
    std::vector<double> data(numel);
    for (std::uint64_t i = 0; i < numel; ++i) {
      float f = 0.0f;
      if (!in.read(reinterpret_cast<char*>(&f), sizeof(f)))
        throw TruncatedError("truncated tensor payload in " + path);
      data[i] = static_cast<double>(f);
    }
    ck.tensors.emplace_back(item.key(),
                            make_tensor(std::move(shape), std::move(data)));
  }

  if (header.contains("quantizers")) {
    for (const auto& item : header.at("quantizers").items()) {
      const Json& qj = item.value();
      QuantizerSnapshot q;
      q.b_tilde = qj.at("b_tilde").get<double>();
      const auto scales = qj.at("scales").get<std::vector<double>>();
      if (scales.size() != static_cast<size_t>(kNumCandidateBits))
        throw FormatError("quantizer scales must have 7 entries in " + path);
      std::copy(scales.begin(), scales.end(), q.scales.begin());
      if (!qj.at("frozen_bit").is_null())
        q.frozen_bit = qj.at("frozen_bit").get<int>();
      q.is_signed = qj.at("is_signed").get<bool>();
      q.role = qj.at("role").get<std::string>();
      ck.quantizers.emplace(item.key(), std::move(q));
    }
  }
  return ck;
}

Checkpoint snapshot_model(QuantizedViT& model, Json meta) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  for (const auto& [name, t] : model.parameters()) {
    std::vector<double> rounded(t->data.size());
    for (size_t i = 0; i < t->data.size(); ++i)
      rounded[i] = through_f32(t->data[i]);
    ck.tensors.emplace_back(name,
                            make_tensor(t->shape, std::move(rounded)));
  }
  for (const auto& [name, q] :
       static_cast<const QuantizedViT&>(model).quantizers()) {
    QuantizerSnapshot snap;
    snap.b_tilde = q->b_tilde->item();
    for (int i = 0; i < kNumCandidateBits; ++i)
      snap.scales[static_cast<size_t>(i)] = q->scales->data[static_cast<size_t>(i)];
    snap.frozen_bit = q->frozen_bit;
    snap.is_signed = q->is_signed;
    snap.role = role_name(q->role);
    ck.quantizers.emplace(name, std::move(snap));
  }
  return ck;
}

void restore_model(QuantizedViT& model, const Checkpoint& ck) {
  for (auto& [name, t] : model.parameters()) {
    const Tensor* saved = ck.find_tensor(name);
    if (!saved) throw ValueError("checkpoint missing tensor: " + name);
    if ((*saved)->shape != t->shape)
      throw ValueError("checkpoint shape mismatch for tensor: " + name);
    t->data = (*saved)->data;
    t->zero_grad();
  }
  for (auto& [name, q] : model.quantizers()) {
    auto it = ck.quantizers.find(name);
    if (it == ck.quantizers.end())
      throw ValueError("checkpoint missing quantizer: " + name);
    const QuantizerSnapshot& snap = it->second;
    q->b_tilde->data[0] = snap.b_tilde;
    q->b_tilde->zero_grad();
    for (int i = 0; i < kNumCandidateBits; ++i)
      q->scales->data[static_cast<size_t>(i)] =
          snap.scales[static_cast<size_t>(i)];
    q->scales->zero_grad();
    q->frozen_bit = snap.frozen_bit;
    q->is_signed = snap.is_signed;
    q->role = role_from_name(snap.role);
  }
}

}  // namespace qvit

#include "dpn/weights.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "dpn/env.hpp"  // crc32

namespace dpn {

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "dpn") return ModelKind::kDpn;
  if (s == "vae") return ModelKind::kVae;
  if (s == "inverse") return ModelKind::kInverse;
  if (s == "upn") return ModelKind::kUpn;
  throw std::invalid_argument("unknown model kind: " + s);
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kDpn: return "dpn";
    case ModelKind::kVae: return "vae";
    case ModelKind::kInverse: return "inverse";
    case ModelKind::kUpn: return "upn";
  }
  return "?";
}

namespace {

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back((v >> (8 * i)) & 0xFF);
}

uint32_t take_u32(const std::vector<uint8_t>& buf, size_t& pos) {
  if (pos + 4 > buf.size()) {
    throw WeightsIoError(WeightsIoError::Kind::kTruncated, "file truncated");
  }
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

void save_weights(const std::string& path, ModelKind kind,
                  const std::string& config_json, const ParamSet& params) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), {'D', 'P', 'N', 'W'});
  put_u32(buf, 1);
  buf.push_back(static_cast<uint8_t>(kind));
  put_u32(buf, static_cast<uint32_t>(config_json.size()));
  buf.insert(buf.end(), config_json.begin(), config_json.end());
  for (const ParamTensor& p : params.items()) {
    put_u32(buf, static_cast<uint32_t>(p.name.size()));
    buf.insert(buf.end(), p.name.begin(), p.name.end());
    put_u32(buf, static_cast<uint32_t>(p.shape.size()));
    for (int d : p.shape) put_u32(buf, static_cast<uint32_t>(d));
    for (double v : p.value) {
      float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(buf, bits);
    }
  }
  uint32_t crc = crc32(buf.data(), buf.size());
  put_u32(buf, crc);

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw WeightsIoError(WeightsIoError::Kind::kIo, "cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
    if (!f) throw WeightsIoError(WeightsIoError::Kind::kIo, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw WeightsIoError(WeightsIoError::Kind::kIo,
                         "rename to " + path + " failed: " + ec.message());
  }
}

WeightsFile load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw WeightsIoError(WeightsIoError::Kind::kIo, "cannot open " + path);
  f.seekg(0, std::ios::end);
  auto size = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(buf.data()), size);
  if (!f) throw WeightsIoError(WeightsIoError::Kind::kIo, "read failed: " + path);

  if (buf.size() < 4 || std::memcmp(buf.data(), "DPNW", 4) != 0) {
    throw WeightsIoError(WeightsIoError::Kind::kMagic, "bad magic in " + path);
  }
  if (buf.size() < 13) {
    throw WeightsIoError(WeightsIoError::Kind::kTruncated, "file truncated");
  }
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<uint32_t>(buf[buf.size() - 4 + i]) << (8 * i);
  }
  if (stored != crc32(buf.data(), buf.size() - 4)) {
    throw WeightsIoError(WeightsIoError::Kind::kCrc, "checksum mismatch in " + path);
  }

  size_t pos = 4;
  uint32_t version = take_u32(buf, pos);
  if (version != 1) {
    throw WeightsIoError(WeightsIoError::Kind::kVersion,
                         "unsupported version " + std::to_string(version));
  }
  WeightsFile out;
  uint8_t kind = buf[pos++];
  if (kind > 3) {
    throw WeightsIoError(WeightsIoError::Kind::kHeader,
                         "unknown model kind " + std::to_string(kind));
  }
  out.kind = static_cast<ModelKind>(kind);
  uint32_t cfg_len = take_u32(buf, pos);
  if (pos + cfg_len > buf.size() - 4) {
    throw WeightsIoError(WeightsIoError::Kind::kTruncated, "file truncated");
  }
  out.config_json.assign(buf.begin() + pos, buf.begin() + pos + cfg_len);
  pos += cfg_len;

  // Parameter blocks fill the remainder up to the trailing checksum.
  while (pos < buf.size() - 4) {
    uint32_t name_len = take_u32(buf, pos);
    if (pos + name_len > buf.size() - 4) {
      throw WeightsIoError(WeightsIoError::Kind::kTruncated, "file truncated");
    }
    std::string name(buf.begin() + pos, buf.begin() + pos + name_len);
    pos += name_len;
    uint32_t rank = take_u32(buf, pos);
    if (rank > 8) {
      throw WeightsIoError(WeightsIoError::Kind::kHeader,
                           "implausible shape rank for " + name);
    }
    Shape shape(rank);
    size_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int>(take_u32(buf, pos));
      count *= static_cast<size_t>(shape[i]);
    }
    if (pos + count * 4 > buf.size() - 4) {
      throw WeightsIoError(WeightsIoError::Kind::kTruncated, "file truncated");
    }
    std::vector<double> value(count);
    for (size_t i = 0; i < count; ++i) {
      uint32_t bits = take_u32(buf, pos);
      float fv;
      std::memcpy(&fv, &bits, 4);
      value[i] = fv;
    }
    out.params.add(std::move(name), std::move(shape), std::move(value));
  }
  if (pos != buf.size() - 4) {
    throw WeightsIoError(WeightsIoError::Kind::kHeader, "misaligned blocks");
  }
  return out;
}

}  // namespace dpn

#pragma once

#include <cstdint>
#include <string>

#include "dpn/networks.hpp"

namespace dpn {

enum class ModelKind : uint8_t { kDpn = 0, kVae = 1, kInverse = 2, kUpn = 3 };

ModelKind model_kind_from_string(const std::string& s);
std::string to_string(ModelKind kind);

struct WeightsFile {
  ModelKind kind = ModelKind::kDpn;
  std::string config_json;
  ParamSet params;  // float32-quantized values
};

struct WeightsIoError : std::runtime_error {
  enum class Kind { kIo, kMagic, kVersion, kTruncated, kCrc, kHeader };
  WeightsIoError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind(kind) {}
  Kind kind;
};

// DPNW binary format (little-endian): magic "DPNW", version u32 = 1,
// model-kind u8, config-JSON length u32 + bytes, then one block per
// parameter: name-length u32, name, shape-rank u32, shape dims u32 each,
// f32 data; trailing CRC32 of all preceding bytes.
void save_weights(const std::string& path, ModelKind kind,
                  const std::string& config_json, const ParamSet& params);
WeightsFile load_weights(const std::string& path);

}  // namespace dpn

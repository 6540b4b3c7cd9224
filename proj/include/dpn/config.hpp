#pragma once

#include <cstdint>
#include <string>

#include "dpn/env.hpp"
#include "dpn/networks.hpp"
#include "dpn/sac.hpp"
#include "dpn/training.hpp"

namespace dpn {

// One JSON document covering every tunable of the pipeline. Unknown keys are
// rejected; every field has a default; the resolved document is echoed into
// every output directory so a run can be replayed exactly.
struct RunConfig {
  uint64_t seed = 0;
  std::string scale = "desk";  // desk | paper
  RenderConfig render;
  DpnConfig model;
  BaselineConfig baseline;
  TrainConfig train;
  double metric_delta = 0.85;
  RlConfig rl;

  static RunConfig defaults(const std::string& scale = "desk");
  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path);

  std::string to_json_text() const;  // fully resolved
  void save(const std::string& path) const;

  // Propagates shared fields (render geometry into the encoders, the top
  // seed into the per-phase configs) and validates.
  void resolve();
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dpn

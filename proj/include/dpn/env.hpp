#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpn/rng.hpp"

namespace dpn {

enum class EnvKind : uint8_t { kPointMass = 0, kReacher = 1 };

EnvKind env_kind_from_string(const std::string& s);
std::string to_string(EnvKind kind);

// Point mass: position in the closed unit box. Reacher: two joint angles in
// [-pi, pi) with link lengths 0.5 and 0.4. The optional distractor is a
// second blob with its own position, moved only by explicit calls.
struct EnvState {
  EnvKind kind = EnvKind::kPointMass;
  double a = 0.0;  // x position | first joint angle
  double b = 0.0;  // y position | second joint angle
  bool has_distractor = false;
  double dx = 0.0;
  double dy = 0.0;
};

inline constexpr double kPointMassStep = 0.1;
inline constexpr double kReacherStep = 0.15;
inline constexpr double kLink1 = 0.5;
inline constexpr double kLink2 = 0.4;

EnvState pointmass_step(EnvState s, std::array<double, 2> action);
EnvState reacher_step(EnvState s, std::array<double, 2> action);
EnvState env_step(EnvState s, std::array<double, 2> action);
// Random walk of the distractor; `u` is a U(-1,1)^2 draw supplied by the
// caller so stepping stays a pure function.
EnvState distractor_step(EnvState s, std::array<double, 2> u);

std::array<double, 2> reacher_end_effector(const EnvState& s);

// Ground-truth distance, for evaluation only: Euclidean position distance
// (point mass) or end-effector distance (reacher).
double true_distance(const EnvState& s1, const EnvState& s2);

EnvState random_state(EnvKind kind, bool distractor, Rng& rng);

struct RenderConfig {
  int height = 16;
  int width = 16;
  int channels = 1;
  double blob_radius = 3.0;  // pixels; Gaussian sigma is radius/2
  bool distractor = false;
  double distractor_intensity = 0.6;

  void validate() const;
};

// Renders the state as grayscale intensities in [0,1] (replicated across
// channels when channels > 1): a Gaussian blob at the agent position, or
// anti-aliased segments for the two reacher links, plus the distractor blob
// when enabled. Values are float32-quantized so rendered observations match
// the persisted dataset encoding bit for bit.
std::vector<float> render(const EnvState& s, const RenderConfig& cfg);

int state_dim(EnvKind kind, bool distractor);
std::vector<double> state_vector(const EnvState& s);

// ---------------------------------------------------------------------------
// Episodes and the persisted dataset

struct Episode {
  int length = 0;              // number of actions; observations are length+1
  std::vector<float> obs;      // (length+1) * C * H * W
  std::vector<float> actions;  // length * action_dim
  std::vector<float> states;   // (length+1) * state_dim
};

struct Dataset {
  EnvKind kind = EnvKind::kPointMass;
  int channels = 1;
  int height = 16;
  int width = 16;
  int action_dim = 2;
  int state_dim = 2;
  std::vector<Episode> episodes;

  int obs_size() const { return channels * height * width; }
};

// Uniform random actions from a fresh uniform random initial state per
// episode. Episode e uses seed (seed + e), so collection is
// parallelism-invariant.
Dataset collect_random(EnvKind kind, int episodes, int horizon,
                       const RenderConfig& cfg, uint64_t seed);

// Binary dataset file errors, each distinct.
struct DatasetIoError : std::runtime_error {
  enum class Kind { kIo, kMagic, kVersion, kTruncated, kCrc, kHeader };
  DatasetIoError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind(kind) {}
  Kind kind;
};

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// CRC32 (IEEE) over a byte range, used by both file formats.
uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

}  // namespace dpn

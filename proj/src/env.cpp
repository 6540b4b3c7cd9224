#include "dpn/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace dpn {

namespace {

double clip(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a < 0) a += 2.0 * M_PI;
  return a - M_PI;
}

std::array<double, 2> clip_action(std::array<double, 2> a) {
  return {clip(a[0], -1.0, 1.0), clip(a[1], -1.0, 1.0)};
}

}  // namespace

EnvKind env_kind_from_string(const std::string& s) {
  if (s == "pointmass") return EnvKind::kPointMass;
  if (s == "reacher") return EnvKind::kReacher;
  throw std::invalid_argument("unknown environment: " + s);
}

std::string to_string(EnvKind kind) {
  return kind == EnvKind::kPointMass ? "pointmass" : "reacher";
}

EnvState pointmass_step(EnvState s, std::array<double, 2> action) {
  if (s.kind != EnvKind::kPointMass) {
    throw std::invalid_argument("pointmass_step on non-pointmass state");
  }
  auto a = clip_action(action);
  s.a = clip(s.a + kPointMassStep * a[0], -1.0, 1.0);
  s.b = clip(s.b + kPointMassStep * a[1], -1.0, 1.0);
  return s;
}

EnvState reacher_step(EnvState s, std::array<double, 2> action) {
  if (s.kind != EnvKind::kReacher) {
    throw std::invalid_argument("reacher_step on non-reacher state");
  }
  auto a = clip_action(action);
  s.a = wrap_angle(s.a + kReacherStep * a[0]);
  s.b = wrap_angle(s.b + kReacherStep * a[1]);
  return s;
}

EnvState env_step(EnvState s, std::array<double, 2> action) {
  return s.kind == EnvKind::kPointMass ? pointmass_step(s, action)
                                       : reacher_step(s, action);
}

EnvState distractor_step(EnvState s, std::array<double, 2> u) {
  if (!s.has_distractor) return s;
  auto a = clip_action(u);
  s.dx = clip(s.dx + kPointMassStep * a[0], -1.0, 1.0);
  s.dy = clip(s.dy + kPointMassStep * a[1], -1.0, 1.0);
  return s;
}

std::array<double, 2> reacher_end_effector(const EnvState& s) {
  if (s.kind != EnvKind::kReacher) {
    throw std::invalid_argument("end effector of non-reacher state");
  }
  double x = kLink1 * std::cos(s.a) + kLink2 * std::cos(s.a + s.b);
  double y = kLink1 * std::sin(s.a) + kLink2 * std::sin(s.a + s.b);
  return {x, y};
}

double true_distance(const EnvState& s1, const EnvState& s2) {
  if (s1.kind != s2.kind) {
    throw std::invalid_argument("true_distance across environment kinds");
  }
  if (s1.kind == EnvKind::kPointMass) {
    return std::hypot(s1.a - s2.a, s1.b - s2.b);
  }
  auto e1 = reacher_end_effector(s1);
  auto e2 = reacher_end_effector(s2);
  return std::hypot(e1[0] - e2[0], e1[1] - e2[1]);
}

EnvState random_state(EnvKind kind, bool distractor, Rng& rng) {
  EnvState s;
  s.kind = kind;
  if (kind == EnvKind::kPointMass) {
    s.a = rng.uniform(-1.0, 1.0);
    s.b = rng.uniform(-1.0, 1.0);
  } else {
    s.a = rng.uniform(-M_PI, M_PI);
    s.b = rng.uniform(-M_PI, M_PI);
  }
  s.has_distractor = distractor;
  if (distractor) {
    s.dx = rng.uniform(-1.0, 1.0);
    s.dy = rng.uniform(-1.0, 1.0);
  }
  return s;
}

void RenderConfig::validate() const {
  if (height < 5 || width < 5 || channels < 1) {
    throw std::invalid_argument("render size must be at least 5x5 with >= 1 channel");
  }
  if (blob_radius <= 0 || blob_radius >= std::min(height, width) / 2.0) {
    throw std::invalid_argument("blob radius must be in (0, min(H,W)/2)");
  }
}

namespace {

// World [-1,1] to pixel-center coordinates.
double to_px(double v, int n) { return (v + 1.0) * 0.5 * (n - 1); }

double gauss_blob(double px, double py, double cx, double cy, double sigma) {
  double d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

// Distance from point to segment, in pixels.
double segment_distance(double px, double py, double x0, double y0, double x1,
                        double y1) {
  double vx = x1 - x0, vy = y1 - y0;
  double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - x0) * vx + (py - y0) * vy) / len2 : 0.0;
  t = clip(t, 0.0, 1.0);
  double qx = x0 + t * vx, qy = y0 + t * vy;
  return std::hypot(px - qx, py - qy);
}

}  // namespace

std::vector<float> render(const EnvState& s, const RenderConfig& cfg) {
  cfg.validate();
  int h = cfg.height, w = cfg.width;
  double sigma = cfg.blob_radius / 2.0;
  std::vector<float> out(static_cast<size_t>(cfg.channels) * h * w);
  std::vector<double> plane(static_cast<size_t>(h) * w, 0.0);

  if (s.kind == EnvKind::kPointMass) {
    double cx = to_px(s.a, w), cy = to_px(s.b, h);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        plane[i * w + j] = gauss_blob(j, i, cx, cy, sigma);
      }
    }
  } else {
    auto elbow_x = kLink1 * std::cos(s.a);
    auto elbow_y = kLink1 * std::sin(s.a);
    auto tip = reacher_end_effector(s);
    double x0 = to_px(0.0, w), y0 = to_px(0.0, h);
    double x1 = to_px(elbow_x, w), y1 = to_px(elbow_y, h);
    double x2 = to_px(tip[0], w), y2 = to_px(tip[1], h);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double d = std::min(segment_distance(j, i, x0, y0, x1, y1),
                            segment_distance(j, i, x1, y1, x2, y2));
        plane[i * w + j] = std::exp(-d * d / (2.0 * sigma * sigma));
      }
    }
  }

  if (cfg.distractor && s.has_distractor) {
    double cx = to_px(s.dx, w), cy = to_px(s.dy, h);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        plane[i * w + j] = std::min(
            1.0, plane[i * w + j] +
                     cfg.distractor_intensity * gauss_blob(j, i, cx, cy, sigma));
      }
    }
  }

  for (int c = 0; c < cfg.channels; ++c) {
    for (int i = 0; i < h * w; ++i) {
      out[static_cast<size_t>(c) * h * w + i] = static_cast<float>(plane[i]);
    }
  }
  return out;
}

int state_dim(EnvKind kind, bool distractor) {
  (void)kind;
  return distractor ? 4 : 2;
}

std::vector<double> state_vector(const EnvState& s) {
  if (s.has_distractor) return {s.a, s.b, s.dx, s.dy};
  return {s.a, s.b};
}

Dataset collect_random(EnvKind kind, int episodes, int horizon,
                       const RenderConfig& cfg, uint64_t seed) {
  if (episodes < 1 || horizon < 1) {
    throw std::invalid_argument("collect_random: episodes and horizon must be >= 1");
  }
  cfg.validate();
  Dataset ds;
  ds.kind = kind;
  ds.channels = cfg.channels;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.action_dim = 2;
  ds.state_dim = state_dim(kind, cfg.distractor);
  ds.episodes.reserve(episodes);

  for (int e = 0; e < episodes; ++e) {
    Rng rng(seed + static_cast<uint64_t>(e));
    EnvState s = random_state(kind, cfg.distractor, rng);
    Episode ep;
    ep.length = horizon;
    ep.obs.reserve(static_cast<size_t>(horizon + 1) * ds.obs_size());
    ep.actions.reserve(static_cast<size_t>(horizon) * ds.action_dim);
    ep.states.reserve(static_cast<size_t>(horizon + 1) * ds.state_dim);

    auto record_state = [&](const EnvState& st) {
      auto obs = render(st, cfg);
      ep.obs.insert(ep.obs.end(), obs.begin(), obs.end());
      for (double v : state_vector(st)) ep.states.push_back(static_cast<float>(v));
    };
    record_state(s);
    for (int t = 0; t < horizon; ++t) {
      std::array<double, 2> a{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      ep.actions.push_back(static_cast<float>(a[0]));
      ep.actions.push_back(static_cast<float>(a[1]));
      s = env_step(s, a);
      if (cfg.distractor) {
        std::array<double, 2> u{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        s = distractor_step(s, u);
      }
      record_state(s);
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// DPND binary format (little-endian):
//   magic "DPND", version u32 = 1, env-kind u8, channels u16, H u16, W u16,
//   action-dim u16, state-dim u16, episode-count u32; per episode: length L
//   u32, observations f32[(L+1)*C*H*W], actions f32[L*A], states f32[(L+1)*S];
//   trailing CRC32 of all preceding bytes.

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace {

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) {
    buf_.push_back(v & 0xFF);
    buf_.push_back((v >> 8) & 0xFF);
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back((v >> (8 * i)) & 0xFF);
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void bytes(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void f32_array(const std::vector<float>& v) {
    // Little-endian host: bulk copy; float layout is IEEE-754.
    bytes(v.data(), v.size() * 4);
  }
  const std::vector<uint8_t>& data() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}
  size_t remaining() const { return n_ - pos_; }
  size_t pos() const { return pos_; }

  uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(p_[pos_]) |
                 static_cast<uint16_t>(p_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::vector<float> f32_array(size_t count) {
    need(count * 4);
    std::vector<float> v(count);
    std::memcpy(v.data(), p_ + pos_, count * 4);
    pos_ += count * 4;
    return v;
  }
  std::vector<uint8_t> raw(size_t count) {
    need(count);
    std::vector<uint8_t> v(p_ + pos_, p_ + pos_ + count);
    pos_ += count;
    return v;
  }

 private:
  void need(size_t n) const {
    if (pos_ + n > n_) {
      throw DatasetIoError(DatasetIoError::Kind::kTruncated, "file truncated");
    }
  }
  const uint8_t* p_;
  size_t n_;
  size_t pos_ = 0;
};

void write_file_atomic(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw DatasetIoError(DatasetIoError::Kind::kIo, "cannot open " + tmp);
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) {
      throw DatasetIoError(DatasetIoError::Kind::kIo, "write failed: " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw DatasetIoError(DatasetIoError::Kind::kIo,
                         "rename to " + path + " failed: " + ec.message());
  }
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetIoError(DatasetIoError::Kind::kIo, "cannot open " + path);
  f.seekg(0, std::ios::end);
  auto size = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw DatasetIoError(DatasetIoError::Kind::kIo, "read failed: " + path);
  return bytes;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  ByteWriter w;
  w.bytes("DPND", 4);
  w.u32(1);
  w.u8(static_cast<uint8_t>(ds.kind));
  w.u16(static_cast<uint16_t>(ds.channels));
  w.u16(static_cast<uint16_t>(ds.height));
  w.u16(static_cast<uint16_t>(ds.width));
  w.u16(static_cast<uint16_t>(ds.action_dim));
  w.u16(static_cast<uint16_t>(ds.state_dim));
  w.u32(static_cast<uint32_t>(ds.episodes.size()));
  for (const Episode& ep : ds.episodes) {
    w.u32(static_cast<uint32_t>(ep.length));
    w.f32_array(ep.obs);
    w.f32_array(ep.actions);
    w.f32_array(ep.states);
  }
  uint32_t crc = crc32(w.data().data(), w.data().size());
  std::vector<uint8_t> bytes = w.data();
  for (int i = 0; i < 4; ++i) bytes.push_back((crc >> (8 * i)) & 0xFF);
  write_file_atomic(path, bytes);
}

Dataset load_dataset(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DPND", 4) != 0) {
    throw DatasetIoError(DatasetIoError::Kind::kMagic, "bad magic in " + path);
  }
  if (bytes.size() < 8) {
    throw DatasetIoError(DatasetIoError::Kind::kTruncated, "file truncated");
  }
  ByteReader r(bytes.data(), bytes.size());
  r.raw(4);  // magic
  uint32_t version = r.u32();
  if (version != 1) {
    throw DatasetIoError(DatasetIoError::Kind::kVersion,
                         "unsupported version " + std::to_string(version));
  }
  if (bytes.size() < 4) {
    throw DatasetIoError(DatasetIoError::Kind::kTruncated, "missing checksum");
  }
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  }
  uint32_t computed = crc32(bytes.data(), bytes.size() - 4);
  if (stored != computed) {
    throw DatasetIoError(DatasetIoError::Kind::kCrc, "checksum mismatch in " + path);
  }

  Dataset ds;
  uint8_t kind = r.u8();
  if (kind > 1) {
    throw DatasetIoError(DatasetIoError::Kind::kHeader,
                         "unknown environment kind " + std::to_string(kind));
  }
  ds.kind = static_cast<EnvKind>(kind);
  ds.channels = r.u16();
  ds.height = r.u16();
  ds.width = r.u16();
  ds.action_dim = r.u16();
  ds.state_dim = r.u16();
  uint32_t count = r.u32();
  ds.episodes.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    Episode ep;
    ep.length = static_cast<int>(r.u32());
    size_t frames = static_cast<size_t>(ep.length) + 1;
    ep.obs = r.f32_array(frames * ds.obs_size());
    ep.actions = r.f32_array(static_cast<size_t>(ep.length) * ds.action_dim);
    ep.states = r.f32_array(frames * ds.state_dim);
    ds.episodes.push_back(std::move(ep));
  }
  if (r.remaining() != 4) {
    throw DatasetIoError(DatasetIoError::Kind::kHeader,
                         "trailing bytes beyond episodes");
  }
  return ds;
}

}  // namespace dpn

#include "dpn/config.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

namespace dpn {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
  }
}

template <typename T>
void get_to(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) {
    try {
      obj.at(key).get_to(out);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for \"") + key + "\": " + e.what());
    }
  }
}

}  // namespace

RunConfig RunConfig::defaults(const std::string& scale) {
  RunConfig c;
  c.scale = scale;
  if (scale == "desk") {
    // Defaults already desk scale.
  } else if (scale == "paper") {
    c.render.height = 100;
    c.render.width = 100;
    c.render.channels = 3;
    c.render.blob_radius = 10.0;
    c.model.enc.conv_channels = {64, 64, 64, 64};
    c.model.enc.conv_strides = {2, 2, 2, 1};
    c.model.n_p = 20;
    c.train.iters = 20000;
  } else {
    throw ConfigError("unknown scale preset \"" + scale + "\"");
  }
  c.resolve();
  return c;
}

void RunConfig::resolve() {
  model.enc.channels_in = render.channels;
  model.enc.height = render.height;
  model.enc.width = render.width;
  baseline.enc = model.enc;
  baseline.action_dim = model.action_dim;
  train.seed = seed;
  rl.seed = seed;
  model.enc.validate();
  render.validate();
  rl.validate();
  if (metric_delta <= 0) throw ConfigError("metric delta must be positive");
  if (train.segment_len < 1) throw ConfigError("segment length must be >= 1");
  if (model.n_p < 0) throw ConfigError("planner step count must be >= 0");
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be an object");
  check_keys(j, "config", {"seed", "scale", "render", "model", "train", "metric", "rl"});

  std::string scale = "desk";
  get_to(j, "scale", scale);
  RunConfig c = defaults(scale);
  get_to(j, "seed", c.seed);

  if (j.contains("render")) {
    const json& r = j.at("render");
    check_keys(r, "render", {"height", "width", "channels", "blob_radius",
                             "distractor", "distractor_intensity"});
    get_to(r, "height", c.render.height);
    get_to(r, "width", c.render.width);
    get_to(r, "channels", c.render.channels);
    get_to(r, "blob_radius", c.render.blob_radius);
    get_to(r, "distractor", c.render.distractor);
    get_to(r, "distractor_intensity", c.render.distractor_intensity);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model",
               {"conv_channels", "conv_strides", "ssam_temperature", "z_dim",
                "dyn_hidden", "inf_hidden", "dec_hidden", "n_p", "alpha_init",
                "delta_plan", "action_dim", "head_hidden", "forward_weight"});
    get_to(m, "conv_channels", c.model.enc.conv_channels);
    get_to(m, "conv_strides", c.model.enc.conv_strides);
    get_to(m, "ssam_temperature", c.model.enc.ssam_temperature);
    get_to(m, "z_dim", c.model.z_dim);
    get_to(m, "dyn_hidden", c.model.dyn_hidden);
    get_to(m, "inf_hidden", c.model.inf_hidden);
    get_to(m, "dec_hidden", c.model.dec_hidden);
    get_to(m, "n_p", c.model.n_p);
    get_to(m, "alpha_init", c.model.alpha_init);
    get_to(m, "delta_plan", c.model.delta_plan);
    get_to(m, "action_dim", c.model.action_dim);
    get_to(m, "head_hidden", c.baseline.head_hidden);
    get_to(m, "forward_weight", c.baseline.forward_weight);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train", {"beta", "segment_len", "lr", "batch", "iters"});
    get_to(t, "beta", c.train.beta);
    get_to(t, "segment_len", c.train.segment_len);
    get_to(t, "lr", c.train.lr);
    get_to(t, "batch", c.train.batch);
    get_to(t, "iters", c.train.iters);
  }
  if (j.contains("metric")) {
    const json& m = j.at("metric");
    check_keys(m, "metric", {"delta"});
    get_to(m, "delta", c.metric_delta);
  }
  if (j.contains("rl")) {
    const json& r = j.at("rl");
    check_keys(r, "rl",
               {"horizon", "episodes", "discount", "replay_capacity", "polyak",
                "entropy_coef", "hidden", "batch", "warmup_steps", "lr",
                "normalize_rewards"});
    get_to(r, "horizon", c.rl.horizon);
    get_to(r, "episodes", c.rl.episodes);
    get_to(r, "discount", c.rl.discount);
    get_to(r, "replay_capacity", c.rl.replay_capacity);
    get_to(r, "polyak", c.rl.polyak);
    get_to(r, "entropy_coef", c.rl.entropy_coef);
    get_to(r, "hidden", c.rl.hidden);
    get_to(r, "batch", c.rl.batch);
    get_to(r, "warmup_steps", c.rl.warmup_steps);
    get_to(r, "lr", c.rl.lr);
    get_to(r, "normalize_rewards", c.rl.normalize_rewards);
  }
  c.resolve();
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
  json j;
  j["seed"] = seed;
  j["scale"] = scale;
  j["render"] = {{"height", render.height},
                 {"width", render.width},
                 {"channels", render.channels},
                 {"blob_radius", render.blob_radius},
                 {"distractor", render.distractor},
                 {"distractor_intensity", render.distractor_intensity}};
  j["model"] = {{"conv_channels", model.enc.conv_channels},
                {"conv_strides", model.enc.conv_strides},
                {"ssam_temperature", model.enc.ssam_temperature},
                {"z_dim", model.z_dim},
                {"dyn_hidden", model.dyn_hidden},
                {"inf_hidden", model.inf_hidden},
                {"dec_hidden", model.dec_hidden},
                {"n_p", model.n_p},
                {"alpha_init", model.alpha_init},
                {"delta_plan", model.delta_plan},
                {"action_dim", model.action_dim},
                {"head_hidden", baseline.head_hidden},
                {"forward_weight", baseline.forward_weight}};
  j["train"] = {{"beta", train.beta},
                {"segment_len", train.segment_len},
                {"lr", train.lr},
                {"batch", train.batch},
                {"iters", train.iters}};
  j["metric"] = {{"delta", metric_delta}};
  j["rl"] = {{"horizon", rl.horizon},
             {"episodes", rl.episodes},
             {"discount", rl.discount},
             {"replay_capacity", rl.replay_capacity},
             {"polyak", rl.polyak},
             {"entropy_coef", rl.entropy_coef},
             {"hidden", rl.hidden},
             {"batch", rl.batch},
             {"warmup_steps", rl.warmup_steps},
             {"lr", rl.lr},
             {"normalize_rewards", rl.normalize_rewards}};
  return j.dump(2) + "\n";
}

void RunConfig::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write config to " + path);
  f << to_json_text();
}

}  // namespace dpn

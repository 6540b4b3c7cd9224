// Command-line driver: collect data, train models, evaluate metrics, run the
// actor-critic, and plot curves. Every command is deterministic given its
// flags, and every output directory receives the fully resolved config.
//
// Exit codes: 0 success, 2 flag validation, 3 I/O, 4 shape/config mismatch,
// 5 malformed input data.

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "dpn/config.hpp"
#include "dpn/env.hpp"
#include "dpn/metric.hpp"
#include "dpn/report.hpp"
#include "dpn/sac.hpp"
#include "dpn/training.hpp"
#include "dpn/weights.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitFlags = 2;
constexpr int kExitIo = 3;
constexpr int kExitShape = 4;
constexpr int kExitMalformed = 5;

struct ExitWith {
  int code;
  std::string message;
};

void write_text_atomic(const std::string& path, const std::string& text) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ExitWith{kExitIo, "cannot open " + tmp};
    f << text;
    if (!f) throw ExitWith{kExitIo, "write failed: " + tmp};
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw ExitWith{kExitIo, "rename to " + path + " failed"};
}

// Invocation record: the subcommand, its flags, and the resolved run config.
void echo_invocation(const std::string& path, const std::string& command,
                     const json& flags, const dpn::RunConfig& cfg) {
  json j;
  j["command"] = command;
  j["flags"] = flags;
  j["config"] = json::parse(cfg.to_json_text());
  write_text_atomic(path, j.dump(2) + "\n");
}

dpn::RunConfig load_config(const std::string& path, uint64_t* seed_override) {
  dpn::RunConfig cfg =
      path.empty() ? dpn::RunConfig::defaults() : dpn::RunConfig::from_file(path);
  if (seed_override) {
    cfg.seed = *seed_override;
    cfg.resolve();
  }
  return cfg;
}

uint32_t file_trailing_crc(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  f.seekg(-4, std::ios::end);
  uint8_t b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

// ---------------------------------------------------------------------------

int cmd_collect(const std::string& env, int episodes, int horizon, uint64_t seed,
                const std::string& out, bool distractor,
                const std::string& config_path) {
  dpn::RunConfig cfg = load_config(config_path, &seed);
  cfg.render.distractor = distractor;
  cfg.resolve();
  dpn::EnvKind kind = dpn::env_kind_from_string(env);
  dpn::Dataset ds = dpn::collect_random(kind, episodes, horizon, cfg.render, seed);
  dpn::save_dataset(ds, out);
  echo_invocation(out + ".config.json", "collect",
                  json{{"env", env},
                       {"episodes", episodes},
                       {"horizon", horizon},
                       {"seed", seed},
                       {"out", out},
                       {"distractor", distractor}},
                  cfg);
  std::cout << "episodes: " << ds.episodes.size() << "\n"
            << "bytes: " << fs::file_size(out) << "\n"
            << "crc32: " << std::hex << file_trailing_crc(out) << std::dec << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& config_path,
              const std::string& model, const std::string& out,
              uint64_t* seed_override) {
  dpn::RunConfig cfg = load_config(config_path, seed_override);
  dpn::Dataset ds = dpn::load_dataset(data);
  if (ds.channels != cfg.model.enc.channels_in ||
      ds.height != cfg.model.enc.height || ds.width != cfg.model.enc.width ||
      ds.action_dim != cfg.model.action_dim) {
    std::cerr << "error: dataset observations {" << ds.channels << "," << ds.height
              << "," << ds.width << "} x actions " << ds.action_dim
              << " do not match config {" << cfg.model.enc.channels_in << ","
              << cfg.model.enc.height << "," << cfg.model.enc.width
              << "} x actions " << cfg.model.action_dim << "\n";
    return kExitShape;
  }

  dpn::ModelKind kind = dpn::model_kind_from_string(model);
  dpn::TrainResult result;
  switch (kind) {
    case dpn::ModelKind::kDpn:
      result = dpn::train_dpn(ds, cfg.model, cfg.train);
      break;
    case dpn::ModelKind::kVae:
      result = dpn::train_baseline(dpn::BaselineKind::kVae, ds, cfg.model,
                                   cfg.baseline, cfg.train);
      break;
    case dpn::ModelKind::kInverse:
      result = dpn::train_baseline(dpn::BaselineKind::kInverse, ds, cfg.model,
                                   cfg.baseline, cfg.train);
      break;
    case dpn::ModelKind::kUpn:
      result = dpn::train_baseline(dpn::BaselineKind::kUpnDeterministic, ds,
                                   cfg.model, cfg.baseline, cfg.train);
      break;
  }

  fs::create_directories(out);
  dpn::save_weights(out + "/weights.dpnw", kind, cfg.to_json_text(), result.params);
  dpn::write_loss_csv(out + "/loss.csv", result.history);
  echo_invocation(out + "/config.json", "train",
                  json{{"data", data}, {"model", model}, {"out", out}}, cfg);
  std::cout << "iterations: " << result.history.size() << "\n";
  if (!result.history.empty()) {
    std::cout << "final loss: " << result.history.back().total << "\n";
  }
  return 0;
}

dpn::Metric metric_from_weights(const dpn::WeightsFile& wf, double delta) {
  dpn::RunConfig cfg = dpn::RunConfig::from_json_text(wf.config_json);
  switch (wf.kind) {
    case dpn::ModelKind::kDpn:
    case dpn::ModelKind::kUpn:
      return dpn::Metric(dpn::MetricKind::kDpn, delta, wf.params, cfg.model,
                         cfg.baseline);
    case dpn::ModelKind::kInverse:
      return dpn::Metric(dpn::MetricKind::kInverse, delta, wf.params, cfg.model,
                         cfg.baseline);
    case dpn::ModelKind::kVae:
      return dpn::Metric(dpn::MetricKind::kVae, delta, wf.params, cfg.model,
                         cfg.baseline);
  }
  throw ExitWith{kExitMalformed, "unknown model kind in weights"};
}

int cmd_eval(const std::vector<std::string>& weights, const std::string& env,
             int pairs, uint64_t seed, const std::string& out_dir,
             const std::string& config_path, bool distractor) {
  dpn::RunConfig cfg = load_config(config_path, &seed);
  cfg.render.distractor = distractor;
  cfg.resolve();
  dpn::EnvKind kind = dpn::env_kind_from_string(env);
  fs::create_directories(out_dir);

  std::vector<std::pair<std::string, dpn::Metric>> metrics;
  metrics.emplace_back("pixel", dpn::Metric(cfg.metric_delta));
  for (const std::string& path : weights) {
    dpn::WeightsFile wf = dpn::load_weights(path);
    dpn::RunConfig wcfg = dpn::RunConfig::from_json_text(wf.config_json);
    if (wcfg.render.height != cfg.render.height ||
        wcfg.render.width != cfg.render.width ||
        wcfg.render.channels != cfg.render.channels) {
      std::cerr << "error: weights " << path << " were trained on {"
                << wcfg.render.channels << "," << wcfg.render.height << ","
                << wcfg.render.width << "} observations, eval renders {"
                << cfg.render.channels << "," << cfg.render.height << ","
                << cfg.render.width << "}\n";
      return kExitShape;
    }
    dpn::Metric m = metric_from_weights(wf, cfg.metric_delta);
    metrics.emplace_back(dpn::to_string(m.kind()), std::move(m));
  }

  // A shared deterministic trajectory for the latent-distance traces: the
  // scripted controller walking toward a goal.
  dpn::Rng traj_rng(seed ^ 0x9E3779B97F4A7C15ull);
  dpn::EnvState goal = dpn::random_state(kind, cfg.render.distractor, traj_rng);
  dpn::EnvState s = dpn::random_state(kind, cfg.render.distractor, traj_rng);
  dpn::PolicyFn controller = dpn::scripted_controller(kind, goal);
  std::vector<std::vector<float>> frames;
  frames.push_back(dpn::render(s, cfg.render));
  for (int t = 0; t < cfg.rl.horizon; ++t) {
    s = dpn::env_step(s, controller(s));
    if (cfg.render.distractor) {
      s = dpn::distractor_step(
          s, {traj_rng.uniform(-1.0, 1.0), traj_rng.uniform(-1.0, 1.0)});
    }
    frames.push_back(dpn::render(s, cfg.render));
  }
  std::vector<float> goal_obs = dpn::render(goal, cfg.render);

  std::vector<std::string> summary_kinds;
  std::vector<dpn::CorrelationResult> summaries;
  bool wrote_true = false;
  for (auto& [name, metric] : metrics) {
    dpn::CorrelationResult corr =
        dpn::metric_correlation(metric, kind, cfg.render, pairs, seed);
    dpn::write_curve_csv(out_dir + "/pairs_" + name + ".csv", "pair_id",
                         corr.metric_values, name, seed);
    if (!wrote_true) {
      dpn::write_curve_csv(out_dir + "/pairs_true.csv", "pair_id",
                           corr.true_distances, "true", seed);
      wrote_true = true;
    }
    dpn::DistanceTrace trace = dpn::latent_distance_trace(metric, frames, goal_obs);
    dpn::write_curve_csv(out_dir + "/trace_" + name + ".csv", "step", trace.values,
                         name, seed);
    summary_kinds.push_back(name);
    summaries.push_back(std::move(corr));
    std::cout << name << " spearman: " << summaries.back().spearman_rho << "\n";
  }
  {
    std::ofstream f(out_dir + "/correlations.csv",
                    std::ios::binary | std::ios::trunc);
    if (!f) throw ExitWith{kExitIo, "cannot open " + out_dir + "/correlations.csv"};
    f << "kind,rho,degenerate,seed\n";
    f.precision(17);
    for (size_t i = 0; i < summaries.size(); ++i) {
      f << summary_kinds[i] << "," << summaries[i].spearman_rho << ","
        << (summaries[i].degenerate ? 1 : 0) << "," << seed << "\n";
    }
  }
  json flags;
  flags["weights"] = weights;
  flags["env"] = env;
  flags["pairs"] = pairs;
  flags["seed"] = seed;
  flags["distractor"] = distractor;
  echo_invocation(out_dir + "/config.json", "eval", flags, cfg);
  return 0;
}

int cmd_rl(const std::string& weights_path, const std::string& metric_name,
           const std::string& env, uint64_t goal_seed, int episodes, uint64_t seed,
           const std::string& out_dir, const std::string& config_path,
           bool distractor) {
  dpn::RunConfig cfg = load_config(config_path, &seed);
  cfg.render.distractor = distractor;
  if (episodes > 0) cfg.rl.episodes = episodes;
  cfg.resolve();
  dpn::EnvKind kind = dpn::env_kind_from_string(env);
  fs::create_directories(out_dir);

  dpn::Rng goal_rng(goal_seed);
  dpn::EnvState goal = dpn::random_state(kind, cfg.render.distractor, goal_rng);

  json flags;
  flags["weights"] = weights_path;
  flags["metric"] = metric_name;
  flags["env"] = env;
  flags["goal_seed"] = goal_seed;
  flags["episodes"] = cfg.rl.episodes;
  flags["seed"] = seed;
  flags["distractor"] = distractor;

  if (metric_name == "oracle") {
    // Scripted-controller harness check; no learning involved.
    dpn::PolicyFn controller = dpn::scripted_controller(kind, goal);
    std::vector<double> finals =
        dpn::evaluate_policy(controller, kind, goal, cfg.rl.episodes,
                             cfg.rl.horizon, seed, cfg.render.distractor);
    dpn::write_curve_csv(out_dir + "/curve.csv", "episode", finals, "oracle", seed);
    dpn::write_curve_csv(out_dir + "/final.csv", "episode", finals, "oracle", seed);
    echo_invocation(out_dir + "/config.json", "rl", flags, cfg);
    std::vector<double> sorted = finals;
    std::sort(sorted.begin(), sorted.end());
    std::cout << "median final distance: " << sorted[sorted.size() / 2] << "\n";
    return 0;
  }

  dpn::Metric metric = [&] {
    if (metric_name == "pixel") return dpn::Metric(cfg.metric_delta);
    dpn::WeightsFile wf = dpn::load_weights(weights_path);
    dpn::Metric m = metric_from_weights(wf, cfg.metric_delta);
    if (dpn::to_string(m.kind()) != metric_name) {
      throw ExitWith{kExitFlags, "weights file holds a " + dpn::to_string(m.kind()) +
                                     " model, --metric says " + metric_name};
    }
    return m;
  }();

  dpn::SacResult result = dpn::sac_train(kind, goal, metric, cfg.render, cfg.rl);
  std::vector<double> rewards, train_finals;
  for (const auto& stat : result.curve) {
    rewards.push_back(stat.reward_sum);
    train_finals.push_back(stat.final_true_distance);
  }
  dpn::write_curve_csv(out_dir + "/curve.csv", "episode", rewards, metric_name, seed);
  dpn::write_curve_csv(out_dir + "/train_final.csv", "episode", train_finals,
                       metric_name, seed);
  std::vector<double> finals =
      dpn::evaluate_policy(dpn::make_policy(result), kind, goal, 10, cfg.rl.horizon,
                           seed + 1, cfg.render.distractor);
  dpn::write_curve_csv(out_dir + "/final.csv", "episode", finals, metric_name, seed);
  echo_invocation(out_dir + "/config.json", "rl", flags, cfg);
  std::vector<double> sorted = finals;
  std::sort(sorted.begin(), sorted.end());
  std::cout << "median final distance: " << sorted[sorted.size() / 2] << "\n";
  return 0;
}

int cmd_plot(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<dpn::CsvTable> tables;
  std::vector<std::string> names;
  for (const std::string& path : inputs) {
    tables.push_back(dpn::read_csv(path));
    names.push_back(fs::path(path).stem().string());
  }
  write_text_atomic(out, dpn::render_svg_chart(tables, names));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"control-centric goal-metric learning on toy environments"};
  app.require_subcommand(1);

  auto* collect = app.add_subcommand("collect", "collect a random-interaction dataset");
  std::string c_env = "pointmass", c_out, c_config;
  int c_episodes = 0, c_horizon = 0;
  uint64_t c_seed = 0;
  bool c_distractor = false;
  collect->add_option("--env", c_env)->check(CLI::IsMember({"pointmass", "reacher"}));
  collect->add_option("--episodes", c_episodes)->required();
  collect->add_option("--horizon", c_horizon)->required();
  collect->add_option("--seed", c_seed);
  collect->add_option("--out", c_out)->required();
  collect->add_option("--config", c_config);
  collect->add_flag("--distractor", c_distractor);

  auto* train = app.add_subcommand("train", "train a model on a dataset");
  std::string t_data, t_config, t_model = "dpn", t_out;
  uint64_t t_seed = 0;
  bool t_seed_set = false;
  train->add_option("--data", t_data)->required();
  train->add_option("--config", t_config);
  train->add_option("--model", t_model)
      ->check(CLI::IsMember({"dpn", "vae", "inverse", "upn"}));
  train->add_option("--out", t_out)->required();
  train->add_option("--seed", t_seed)->each([&](const std::string&) {
    t_seed_set = true;
  });

  auto* eval = app.add_subcommand("eval", "evaluate goal metrics");
  std::vector<std::string> e_weights;
  std::string e_env = "pointmass", e_out, e_config;
  int e_pairs = 200;
  uint64_t e_seed = 0;
  bool e_distractor = false;
  eval->add_option("--weights", e_weights);
  eval->add_option("--env", e_env)->check(CLI::IsMember({"pointmass", "reacher"}));
  eval->add_option("--pairs", e_pairs);
  eval->add_option("--seed", e_seed);
  eval->add_option("--out-dir", e_out)->required();
  eval->add_option("--config", e_config);
  eval->add_flag("--distractor", e_distractor);

  auto* rl = app.add_subcommand("rl", "train the actor-critic against a metric");
  std::string r_weights, r_metric = "dpn", r_env = "pointmass", r_out, r_config;
  uint64_t r_goal_seed = 0, r_seed = 0;
  int r_episodes = 0;
  bool r_distractor = false;
  rl->add_option("--weights", r_weights);
  rl->add_option("--metric", r_metric)
      ->check(CLI::IsMember({"dpn", "vae", "inverse", "pixel", "oracle"}));
  rl->add_option("--env", r_env)->check(CLI::IsMember({"pointmass", "reacher"}));
  rl->add_option("--goal-seed", r_goal_seed);
  rl->add_option("--episodes", r_episodes);
  rl->add_option("--seed", r_seed);
  rl->add_option("--out-dir", r_out)->required();
  rl->add_option("--config", r_config);
  rl->add_flag("--distractor", r_distractor);

  auto* plot = app.add_subcommand("plot", "render CSV curves to a static SVG");
  std::vector<std::string> p_in;
  std::string p_out;
  plot->add_option("--in", p_in)->required();
  plot->add_option("--out", p_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitFlags;
  }

  try {
    if (*collect) {
      if (c_episodes < 1 || c_horizon < 1) {
        std::cerr << "error: --episodes and --horizon must be >= 1\n";
        return kExitFlags;
      }
      return cmd_collect(c_env, c_episodes, c_horizon, c_seed, c_out, c_distractor,
                         c_config);
    }
    if (*train) {
      return cmd_train(t_data, t_config, t_model, t_out,
                       t_seed_set ? &t_seed : nullptr);
    }
    if (*eval) {
      if (e_pairs < 10) {
        std::cerr << "error: --pairs must be >= 10\n";
        return kExitFlags;
      }
      return cmd_eval(e_weights, e_env, e_pairs, e_seed, e_out, e_config,
                      e_distractor);
    }
    if (*rl) {
      if (r_metric != "oracle" && r_metric != "pixel" && r_weights.empty()) {
        std::cerr << "error: --metric " << r_metric << " requires --weights\n";
        return kExitFlags;
      }
      return cmd_rl(r_weights, r_metric, r_env, r_goal_seed, r_episodes, r_seed,
                    r_out, r_config, r_distractor);
    }
    if (*plot) {
      return cmd_plot(p_in, p_out);
    }
  } catch (const ExitWith& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const dpn::DatasetIoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind == dpn::DatasetIoError::Kind::kIo ? kExitIo : kExitMalformed;
  } catch (const dpn::WeightsIoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind == dpn::WeightsIoError::Kind::kIo ? kExitIo : kExitMalformed;
  } catch (const dpn::CsvError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMalformed;
  } catch (const dpn::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitShape;
  } catch (const dpn::TrainDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

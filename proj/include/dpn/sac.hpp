#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "dpn/env.hpp"
#include "dpn/metric.hpp"
#include "dpn/networks.hpp"
#include "dpn/training.hpp"

namespace dpn {

struct RlConfig {
  int horizon = 20;
  int episodes = 300;
  double discount = 0.99;
  int replay_capacity = 100000;
  double polyak = 0.995;  // target <- polyak*target + (1-polyak)*online
  double entropy_coef = 0.1;
  int hidden = 64;
  int batch = 64;
  int warmup_steps = 200;  // uniform-random actions and no updates before this
  double lr = 3e-4;
  uint64_t seed = 0;
  // Rewards are standardized by recency-weighted moments (EMA over pushes),
  // keeping TD targets O(1) regardless of the metric's scale and restoring
  // resolution near the goal once behavior concentrates there. A constant
  // shift leaves the optimal policy unchanged for these continuing episodes.
  bool normalize_rewards = true;
  double reward_norm_decay = 0.999;

  void validate() const;
};

struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::vector<double> next_state;
  bool done = false;
};

// Off-policy actor-critic: twin Q networks with polyak-averaged targets and
// a tanh-squashed Gaussian policy with a fixed entropy bonus.
class SacLearner {
 public:
  SacLearner(int state_dim, int action_dim, const RlConfig& cfg, Rng& rng);

  std::vector<double> act(const std::vector<double>& state, Rng& rng) const;
  std::vector<double> act_mean(const std::vector<double>& state) const;

  void push(Transition t);
  size_t buffer_size() const { return buffer_.size(); }
  const Transition& transition(size_t i) const { return buffer_[i]; }

  // One gradient update on a batch sampled from the replay buffer.
  void update(Rng& rng);

  // target <- factor*target + (1-factor)*online.
  void polyak_update(double factor);

  double q_value(const std::vector<double>& state,
                 const std::vector<double>& action) const;

  const ParamSet& policy_params() const { return policy_; }

 private:
  int state_dim_;
  int action_dim_;
  RlConfig cfg_;
  ParamSet policy_, q1_, q2_, q1t_, q2t_;
  std::vector<Transition> buffer_;
  size_t buffer_next_ = 0;
  double norm_mean_ = 0.0;
  double norm_sq_ = 0.0;
  double norm_weight_ = 0.0;
  Adam adam_pi_, adam_q1_, adam_q2_;
};

struct EpisodeStat {
  double reward_sum = 0.0;
  double final_true_distance = 0.0;
};

struct SacResult {
  ParamSet policy_params;
  RlConfig cfg;
  std::vector<EpisodeStat> curve;
};

// Trains against the metric-derived reward on rendered observations; the
// policy itself observes the low-dimensional true state. Deterministic given
// cfg.seed.
SacResult sac_train(EnvKind env, const EnvState& goal, const Metric& metric,
                    const RenderConfig& render_cfg, const RlConfig& cfg);

using PolicyFn =
    std::function<std::array<double, 2>(const EnvState& state)>;

PolicyFn make_policy(const SacResult& result);

// Proportional controller toward the goal; validates the rollout harness
// independently of learning.
PolicyFn scripted_controller(EnvKind env, const EnvState& goal);

// Deterministic rollouts; returns the true distance to the goal at the final
// timestep of each episode.
std::vector<double> evaluate_policy(const PolicyFn& policy, EnvKind env,
                                    const EnvState& goal, int episodes,
                                    int horizon, uint64_t seed,
                                    bool distractor = false);

}  // namespace dpn

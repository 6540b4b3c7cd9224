#include "dpn/sac.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dpn {

void RlConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("rl horizon must be >= 1");
  if (discount <= 0.0 || discount >= 1.0) {
    throw std::invalid_argument("rl discount must lie in (0,1)");
  }
  if (episodes < 1 || replay_capacity < 1 || batch < 1 || hidden < 1) {
    throw std::invalid_argument("rl sizes must be positive");
  }
  if (polyak < 0.0 || polyak > 1.0) {
    throw std::invalid_argument("rl polyak factor must lie in [0,1]");
  }
}

namespace {

constexpr double kLogStdLo = -5.0;
constexpr double kLogStdHi = 2.0;
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5*ln(2*pi)

std::vector<double> fan_in_uniform(int count, int fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(count);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

void add_linear(ParamSet& ps, const std::string& name, int out, int in, Rng& rng) {
  ps.add(name + ".w", Shape{out, in}, fan_in_uniform(out * in, in, rng));
  ps.add(name + ".b", Shape{out}, std::vector<double>(out, 0.0));
}

// Policy: shared tanh trunk with mean and log-std heads.
ParamSet init_policy(int state_dim, int action_dim, int hidden, Rng& rng) {
  ParamSet ps;
  add_linear(ps, "pi.fc0", hidden, state_dim, rng);
  add_linear(ps, "pi.fc1", hidden, hidden, rng);
  add_linear(ps, "pi.mu", action_dim, hidden, rng);
  add_linear(ps, "pi.logstd", action_dim, hidden, rng);
  return ps;
}

ParamSet init_q(int state_dim, int action_dim, int hidden, Rng& rng) {
  ParamSet ps;
  add_linear(ps, "q.fc0", hidden, state_dim + action_dim, rng);
  add_linear(ps, "q.fc1", hidden, hidden, rng);
  add_linear(ps, "q.out", 1, hidden, rng);
  return ps;
}

Tensor affine_rows(const Bound& p, const std::string& name, const Tensor& x) {
  return add(matmul(x, transpose(p[name + ".w"])),
             broadcast_rows(p[name + ".b"], x.shape()[0]));
}

Tensor trunk_rows(const Bound& p, const std::string& prefix, const Tensor& x) {
  Tensor h = tanh(affine_rows(p, prefix + ".fc0", x));
  return tanh(affine_rows(p, prefix + ".fc1", h));
}

// log(1 - tanh(u)^2) = 2*(ln 2 - u - softplus(-2u)), stable for large |u|.
Tensor log_one_minus_tanh_sq(const Tensor& u) {
  return mul(Tensor(2.0),
             sub(sub(Tensor(std::log(2.0)), u), softplus(mul(Tensor(-2.0), u))));
}

// Sum over columns of a {r,c} matrix -> {r}.
Tensor sum_cols(const Tensor& m) { return sum_rows(transpose(m)); }

struct PolicyOut {
  Tensor actions;   // {B, A}, tanh squashed
  Tensor log_prob;  // {B}
};

PolicyOut policy_sample(const Bound& p, const Tensor& states, const Tensor& eps) {
  Tensor h = trunk_rows(p, "pi", states);
  Tensor mu = affine_rows(p, "pi.mu", h);
  Tensor log_std = clamp(affine_rows(p, "pi.logstd", h), kLogStdLo, kLogStdHi);
  Tensor std = exp(log_std);
  Tensor u = add(mu, mul(std, eps));
  Tensor actions = tanh(u);
  // Gaussian log density of u plus the tanh change of variables.
  Tensor gauss = neg(add(add(mul(Tensor(0.5), square(eps)), log_std),
                         Tensor(kHalfLog2Pi)));
  Tensor log_prob = sum_cols(sub(gauss, log_one_minus_tanh_sq(u)));
  return {actions, log_prob};
}

Tensor policy_mean(const Bound& p, const Tensor& states) {
  return tanh(affine_rows(p, "pi.mu", trunk_rows(p, "pi", states)));
}

Tensor q_values(const Bound& p, const Tensor& states, const Tensor& actions) {
  int b = states.shape()[0];
  int cols = states.shape()[1] + actions.shape()[1];
  // Row-wise concatenation via flat slicing.
  std::vector<Tensor> rows;
  rows.reserve(b);
  for (int i = 0; i < b; ++i) {
    rows.push_back(concat({row(states, i), row(actions, i)}));
  }
  Tensor joined = reshape(concat(rows), Shape{b, cols});
  Tensor h = trunk_rows(p, "q", joined);
  return reshape(affine_rows(p, "q.out", h), Shape{b});
}

Tensor matrix_of(const std::vector<std::vector<double>>& rows) {
  int r = static_cast<int>(rows.size());
  int c = static_cast<int>(rows[0].size());
  std::vector<double> v;
  v.reserve(static_cast<size_t>(r) * c);
  for (const auto& row : rows) v.insert(v.end(), row.begin(), row.end());
  return Tensor(Shape{r, c}, std::move(v));
}

}  // namespace

SacLearner::SacLearner(int state_dim, int action_dim, const RlConfig& cfg,
                       Rng& rng)
    : state_dim_(state_dim),
      action_dim_(action_dim),
      cfg_(cfg),
      policy_(init_policy(state_dim, action_dim, cfg.hidden, rng)),
      q1_(init_q(state_dim, action_dim, cfg.hidden, rng)),
      q2_(init_q(state_dim, action_dim, cfg.hidden, rng)),
      q1t_(q1_),
      q2t_(q2_),
      adam_pi_(cfg.lr),
      adam_q1_(cfg.lr),
      adam_q2_(cfg.lr) {
  cfg.validate();
  buffer_.reserve(std::min<size_t>(cfg.replay_capacity, 1 << 20));
}

std::vector<double> SacLearner::act(const std::vector<double>& state,
                                    Rng& rng) const {
  std::vector<double> eps(action_dim_);
  for (double& e : eps) e = rng.normal();
  Graph g;
  Bound p(g, policy_);
  Tensor s = g.input(Shape{1, state_dim_}, state);
  Tensor e = g.input(Shape{1, action_dim_}, eps);
  return policy_sample(p, s, e).actions.data();
}

std::vector<double> SacLearner::act_mean(const std::vector<double>& state) const {
  Graph g;
  Bound p(g, policy_);
  Tensor s = g.input(Shape{1, state_dim_}, state);
  return policy_mean(p, s).data();
}

void SacLearner::push(Transition t) {
  // Debiased exponential moving moments of the reward stream.
  double d = cfg_.reward_norm_decay;
  norm_weight_ = d * norm_weight_ + (1.0 - d);
  norm_mean_ = d * norm_mean_ + (1.0 - d) * t.reward;
  norm_sq_ = d * norm_sq_ + (1.0 - d) * t.reward * t.reward;
  if (buffer_.size() < static_cast<size_t>(cfg_.replay_capacity)) {
    buffer_.push_back(std::move(t));
  } else {
    buffer_[buffer_next_] = std::move(t);
    buffer_next_ = (buffer_next_ + 1) % buffer_.size();
  }
}

void SacLearner::polyak_update(double factor) {
  auto mix = [&](ParamSet& target, const ParamSet& online) {
    for (size_t i = 0; i < target.items().size(); ++i) {
      auto& tv = target.items()[i].value;
      const auto& ov = online.items()[i].value;
      for (size_t j = 0; j < tv.size(); ++j) {
        tv[j] = factor * tv[j] + (1.0 - factor) * ov[j];
      }
    }
  };
  mix(q1t_, q1_);
  mix(q2t_, q2_);
}

double SacLearner::q_value(const std::vector<double>& state,
                           const std::vector<double>& action) const {
  Graph g;
  Bound b1(g, q1_), b2(g, q2_);
  Tensor s = g.input(Shape{1, state_dim_}, state);
  Tensor a = g.input(Shape{1, action_dim_}, action);
  return std::min(q_values(b1, s, a).item(), q_values(b2, s, a).item());
}

void SacLearner::update(Rng& rng) {
  int b = cfg_.batch;
  if (buffer_.empty()) return;  // batches sample with replacement
  double shift = 0.0, scale = 1.0;
  if (cfg_.normalize_rewards && norm_weight_ > 0) {
    shift = norm_mean_ / norm_weight_;
    double var = std::max(0.0, norm_sq_ / norm_weight_ - shift * shift);
    scale = std::max(1e-6, std::sqrt(var));
  }

  std::vector<std::vector<double>> s_rows(b), a_rows(b), s2_rows(b);
  std::vector<double> rewards(b);
  std::vector<bool> done(b);
  for (int i = 0; i < b; ++i) {
    const Transition& t = buffer_[rng.uniform_int(static_cast<int>(buffer_.size()))];
    s_rows[i] = t.state;
    a_rows[i] = t.action;
    s2_rows[i] = t.next_state;
    rewards[i] = (t.reward - shift) / scale;
    done[i] = t.done;
  }
  std::vector<double> eps2(static_cast<size_t>(b) * action_dim_);
  for (double& e : eps2) e = rng.normal();
  std::vector<double> eps_pi(static_cast<size_t>(b) * action_dim_);
  for (double& e : eps_pi) e = rng.normal();

  // TD targets from the target critics and the current policy; no gradients
  // flow here, so the values are read out as plain numbers.
  std::vector<double> y(b);
  {
    Graph g;
    Bound bpi(g, policy_), b1(g, q1t_), b2(g, q2t_);
    Tensor s2 = g.input(matrix_of(s2_rows));
    Tensor e2 = g.input(Shape{b, action_dim_}, eps2);
    PolicyOut next = policy_sample(bpi, s2, e2);
    Tensor q1n = q_values(b1, s2, next.actions);
    Tensor q2n = q_values(b2, s2, next.actions);
    const auto& q1v = q1n.data();
    const auto& q2v = q2n.data();
    const auto& lp = next.log_prob.data();
    for (int i = 0; i < b; ++i) {
      double bootstrap = std::min(q1v[i], q2v[i]) - cfg_.entropy_coef * lp[i];
      y[i] = rewards[i] + (done[i] ? 0.0 : cfg_.discount * bootstrap);
    }
  }

  Tensor target(Shape{b}, y);

  // Critic step.
  {
    Graph g;
    Bound b1(g, q1_), b2(g, q2_);
    Tensor s = g.input(matrix_of(s_rows));
    Tensor a = g.input(matrix_of(a_rows));
    Tensor q1v = q_values(b1, s, a);
    Tensor q2v = q_values(b2, s, a);
    Tensor loss = mul(Tensor(1.0 / b), add(sum(square(sub(q1v, target))),
                                           sum(square(sub(q2v, target)))));
    std::vector<Tensor> wrt = b1.leaves();
    wrt.insert(wrt.end(), b2.leaves().begin(), b2.leaves().end());
    std::vector<Tensor> grads = grad(loss, wrt);
    size_t n1 = b1.leaves().size();
    std::vector<std::vector<double>> g1, g2;
    for (size_t i = 0; i < n1; ++i) g1.push_back(grads[i].data());
    for (size_t i = n1; i < grads.size(); ++i) g2.push_back(grads[i].data());
    adam_q1_.step(q1_, g1);
    adam_q2_.step(q2_, g2);
  }

  // Actor step against the updated critics.
  {
    Graph g;
    Bound bpi(g, policy_), b1(g, q1_), b2(g, q2_);
    Tensor s = g.input(matrix_of(s_rows));
    Tensor e = g.input(Shape{b, action_dim_}, eps_pi);
    PolicyOut cur = policy_sample(bpi, s, e);
    Tensor q = minimum(q_values(b1, s, cur.actions), q_values(b2, s, cur.actions));
    Tensor loss = mul(Tensor(1.0 / b),
                      sum(sub(mul(Tensor(cfg_.entropy_coef), cur.log_prob), q)));
    std::vector<Tensor> grads = grad(loss, bpi.leaves());
    std::vector<std::vector<double>> gp;
    for (const Tensor& t : grads) gp.push_back(t.data());
    adam_pi_.step(policy_, gp);
  }

  polyak_update(cfg_.polyak);
}

namespace {

std::vector<double> policy_state(const EnvState& s) { return {s.a, s.b}; }

}  // namespace

SacResult sac_train(EnvKind env, const EnvState& goal, const Metric& metric,
                    const RenderConfig& render_cfg, const RlConfig& cfg) {
  cfg.validate();
  render_cfg.validate();
  Rng rng(cfg.seed);
  std::vector<float> goal_obs = render(goal, render_cfg);
  SacLearner learner(2, 2, cfg, rng);

  SacResult result;
  result.cfg = cfg;
  result.curve.reserve(cfg.episodes);
  long steps = 0;
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    EnvState s = random_state(env, render_cfg.distractor, rng);
    EpisodeStat stat;
    for (int t = 0; t < cfg.horizon; ++t) {
      std::vector<double> state = policy_state(s);
      std::vector<double> action(2);
      if (steps < cfg.warmup_steps) {
        action[0] = rng.uniform(-1.0, 1.0);
        action[1] = rng.uniform(-1.0, 1.0);
      } else {
        action = learner.act(state, rng);
      }
      EnvState s2 = env_step(s, {action[0], action[1]});
      if (render_cfg.distractor) {
        std::array<double, 2> u{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        s2 = distractor_step(s2, u);
      }
      double r = metric.reward(render(s2, render_cfg), goal_obs);
      if (!std::isfinite(r)) {
        throw TrainDiverged("non-finite reward during actor-critic training");
      }
      learner.push({state, action, r, policy_state(s2), false});
      stat.reward_sum += r;
      if (steps >= cfg.warmup_steps) learner.update(rng);
      s = s2;
      ++steps;
    }
    stat.final_true_distance = true_distance(s, goal);
    result.curve.push_back(stat);
  }
  result.policy_params = learner.policy_params();
  return result;
}

PolicyFn make_policy(const SacResult& result) {
  ParamSet params = result.policy_params;
  return [params](const EnvState& s) -> std::array<double, 2> {
    Graph g;
    Bound p(g, params);
    Tensor st = g.input(Shape{1, 2}, policy_state(s));
    Tensor a = policy_mean(p, st);
    return {a.data()[0], a.data()[1]};
  };
}

PolicyFn scripted_controller(EnvKind env, const EnvState& goal) {
  if (env == EnvKind::kPointMass) {
    return [goal](const EnvState& s) -> std::array<double, 2> {
      double kp = 5.0;
      auto clip1 = [](double v) { return v < -1 ? -1.0 : (v > 1 ? 1.0 : v); };
      return {clip1(kp * (goal.a - s.a)), clip1(kp * (goal.b - s.b))};
    };
  }
  return [goal](const EnvState& s) -> std::array<double, 2> {
    double kp = 5.0;
    auto wrap_diff = [](double d) { return std::atan2(std::sin(d), std::cos(d)); };
    auto clip1 = [](double v) { return v < -1 ? -1.0 : (v > 1 ? 1.0 : v); };
    return {clip1(kp * wrap_diff(goal.a - s.a)), clip1(kp * wrap_diff(goal.b - s.b))};
  };
}

std::vector<double> evaluate_policy(const PolicyFn& policy, EnvKind env,
                                    const EnvState& goal, int episodes,
                                    int horizon, uint64_t seed, bool distractor) {
  if (episodes < 1) throw std::invalid_argument("evaluate_policy: episodes >= 1");
  Rng rng(seed);
  std::vector<double> finals;
  finals.reserve(episodes);
  for (int ep = 0; ep < episodes; ++ep) {
    EnvState s = random_state(env, distractor, rng);
    for (int t = 0; t < horizon; ++t) {
      auto a = policy(s);
      s = env_step(s, a);
      if (distractor) {
        std::array<double, 2> u{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        s = distractor_step(s, u);
      }
    }
    finals.push_back(true_distance(s, goal));
  }
  return finals;
}

}  // namespace dpn

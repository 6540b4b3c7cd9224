#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dpn/planner.hpp"
#include "dpn/rng.hpp"
#include "testutil.hpp"

using namespace dpn;
using testutil::close;

namespace {

DpnConfig micro_config() {
  DpnConfig cfg;
  cfg.enc.channels_in = 1;
  cfg.enc.height = 6;
  cfg.enc.width = 6;
  cfg.enc.conv_channels = {4, 4};
  cfg.enc.conv_strides = {1, 2};
  cfg.action_dim = 2;
  cfg.z_dim = 2;
  cfg.dyn_hidden = 16;
  cfg.inf_hidden = 8;
  cfg.dec_hidden = 8;
  cfg.n_p = 2;
  return cfg;
}

Tensor random_obs(const EncoderConfig& enc, Rng& rng) {
  std::vector<double> v(enc.channels_in * enc.height * enc.width);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor(Shape{enc.channels_in, enc.height, enc.width}, std::move(v));
}

Tensor random_mat(int r, int c, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(r) * c);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(Shape{r, c}, std::move(v));
}

// Scalar-loop re-implementation of the rollout + Huber objective.
double plan_loss_oracle(const ParamSet& ps, const DpnConfig& cfg,
                        const std::vector<double>& x_start,
                        const std::vector<double>& z,
                        const std::vector<double>& x_goal, double delta) {
  int xd = cfg.x_dim(), zd = cfg.z_dim, hd = cfg.dyn_hidden;
  const auto& w0 = ps.at("dyn.fc0.w").value;
  const auto& b0 = ps.at("dyn.fc0.b").value;
  const auto& w1 = ps.at("dyn.fc1.w").value;
  const auto& b1 = ps.at("dyn.fc1.b").value;
  std::vector<double> x = x_start;
  int horizon = static_cast<int>(z.size()) / zd;
  for (int t = 0; t < horizon; ++t) {
    std::vector<double> in(x);
    in.insert(in.end(), z.begin() + t * zd, z.begin() + (t + 1) * zd);
    std::vector<double> h(hd);
    for (int i = 0; i < hd; ++i) {
      double acc = b0[i];
      for (size_t j = 0; j < in.size(); ++j) acc += w0[i * in.size() + j] * in[j];
      h[i] = std::tanh(acc);
    }
    std::vector<double> nx(xd);
    for (int i = 0; i < xd; ++i) {
      double acc = b1[i];
      for (int j = 0; j < hd; ++j) acc += w1[i * hd + j] * h[j];
      nx[i] = acc;
    }
    x = nx;
  }
  double loss = 0;
  for (int i = 0; i < xd; ++i) {
    double d = x[i] - x_goal[i];
    double a = std::abs(d);
    loss += a <= delta ? 0.5 * d * d : delta * a - 0.5 * delta * delta;
  }
  return loss;
}

}  // namespace

TEST_CASE("plan loss vanishes when the goal equals the rolled-out terminal state") {
  DpnConfig cfg = micro_config();
  Rng rng(1);
  ParamSet params = init_dpn_params(cfg, rng);
  Tensor z = random_mat(3, cfg.z_dim, rng);
  Tensor x0 = random_mat(1, cfg.x_dim(), rng);
  std::vector<double> x0v = x0.data();

  // Roll out once to find the terminal embedding.
  Graph g;
  Bound p(g, params);
  Tensor x = Tensor(Shape{cfg.x_dim()}, x0v);
  Tensor xt = x;
  for (int t = 0; t < 3; ++t) xt = dynamics_step(p, xt, row(g.input(z), t));
  Tensor goal = xt.detach();

  Tensor loss = plan_loss(p, Tensor(Shape{cfg.x_dim()}, x0v), g.input(z), goal,
                          cfg.delta_plan);
  CHECK(loss.item() == 0.0);
}

TEST_CASE("plan loss with a single-step horizon and against the scalar oracle") {
  DpnConfig cfg = micro_config();
  Rng rng(2);
  ParamSet params = init_dpn_params(cfg, rng);
  for (int trial = 0; trial < 10; ++trial) {
    int horizon = trial % 3 + 1;  // includes the degenerate T = 0 case
    Tensor z = random_mat(horizon, cfg.z_dim, rng);
    Tensor x0 = random_mat(1, cfg.x_dim(), rng);
    Tensor xg = random_mat(1, cfg.x_dim(), rng);
    Graph g;
    Bound p(g, params);
    Tensor loss = plan_loss(p, reshape(g.input(x0), Shape{cfg.x_dim()}),
                            g.input(z), reshape(g.input(xg), Shape{cfg.x_dim()}),
                            cfg.delta_plan);
    double oracle = plan_loss_oracle(params, cfg, x0.data(), z.data(), xg.data(),
                                     cfg.delta_plan);
    CHECK(std::abs(loss.item() - oracle) <= 1e-12);
  }
}

TEST_CASE("planner with no steps returns the initialization") {
  DpnConfig cfg = micro_config();
  Rng rng(3);
  ParamSet params = init_dpn_params(cfg, rng);
  Graph g;
  Bound p(g, params);
  Tensor init = random_mat(3, cfg.z_dim, rng);
  Tensor x0 = Tensor::full({cfg.x_dim()}, 0.1);
  Tensor xg = Tensor::full({cfg.x_dim()}, -0.2);
  LatentPlan plan = gdp_plan(p, x0, xg, init, g.input(Shape{0}, {}), cfg.delta_plan);
  CHECK(plan.iterates.size() == 1);
  CHECK(plan.losses.size() == 1);
  CHECK(plan.final_plan().data() == init.data());
}

TEST_CASE("a zero-loss initialization is a fixed point of the planner") {
  DpnConfig cfg = micro_config();
  Rng rng(4);
  ParamSet params = init_dpn_params(cfg, rng);
  Graph g;
  Bound p(g, params);
  Tensor init = random_mat(2, cfg.z_dim, rng);
  Tensor x0 = random_mat(1, cfg.x_dim(), rng);
  Tensor x0v = reshape(g.input(x0), Shape{cfg.x_dim()});

  Tensor xt = x0v;
  for (int t = 0; t < 2; ++t) xt = dynamics_step(p, xt, row(g.input(init), t));
  Tensor goal = xt.detach();

  Tensor alphas = g.input(Shape{4}, {0.05, 0.05, 0.05, 0.05});
  LatentPlan plan = gdp_plan(p, x0v, goal, init, alphas, cfg.delta_plan);
  for (const Tensor& it : plan.iterates) CHECK(it.data() == init.data());
  for (double l : plan.losses) CHECK(l == 0.0);
}

TEST_CASE("per-iteration losses start at the direct evaluation and compose") {
  DpnConfig cfg = micro_config();
  Rng rng(5);
  ParamSet params = init_dpn_params(cfg, rng);
  Graph g;
  Bound p(g, params);
  Tensor init = random_mat(3, cfg.z_dim, rng);
  Tensor x0 = Tensor(Shape{cfg.x_dim()}, random_mat(1, cfg.x_dim(), rng).data());
  Tensor xg = Tensor(Shape{cfg.x_dim()}, random_mat(1, cfg.x_dim(), rng).data());
  Tensor alphas = g.input(Shape{4}, {0.01, 0.02, 0.01, 0.02});

  LatentPlan plan = gdp_plan(p, x0, xg, init, alphas, cfg.delta_plan);
  CHECK(plan.losses.size() == 5);
  CHECK(plan.losses[0] ==
        plan_loss(p, x0, g.input(init), xg, cfg.delta_plan).item());

  // Splitting the step-size list and restarting from the midpoint iterate
  // reproduces the full run exactly.
  LatentPlan first = gdp_plan(p, x0, xg, init, slice(alphas, 0, 2), cfg.delta_plan);
  LatentPlan second = gdp_plan(p, x0, xg, first.final_plan().detach(),
                               slice(alphas, 2, 2), cfg.delta_plan);
  CHECK(second.final_plan().data() == plan.final_plan().data());
}

TEST_CASE("small fixed step sizes do not increase the planning loss") {
  DpnConfig cfg = micro_config();
  Rng rng(6);
  int satisfied = 0;
  const int instances = 25;
  for (int i = 0; i < instances; ++i) {
    ParamSet params = init_dpn_params(cfg, rng);
    Graph g;
    Bound p(g, params);
    Tensor init = random_mat(3, cfg.z_dim, rng);
    Tensor x0 = Tensor(Shape{cfg.x_dim()}, random_mat(1, cfg.x_dim(), rng).data());
    Tensor xg = Tensor(Shape{cfg.x_dim()}, random_mat(1, cfg.x_dim(), rng).data());
    double alpha = 1e-2;
    for (int attempt = 0; attempt < 10; ++attempt) {
      Graph gg;
      Bound pp(gg, params);
      Tensor alphas = gg.input(Shape{5}, std::vector<double>(5, alpha));
      LatentPlan plan = gdp_plan(pp, x0, xg, init, alphas, cfg.delta_plan);
      if (plan.losses.back() <= plan.losses.front()) {
        ++satisfied;
        break;
      }
      alpha *= 0.5;
    }
  }
  CHECK(satisfied == instances);
}

TEST_CASE("full forward pass is deterministic with the contracted shape") {
  DpnConfig cfg = micro_config();
  Rng rng(7);
  ParamSet params = init_dpn_params(cfg, rng);
  Tensor o0 = random_obs(cfg.enc, rng);
  Tensor og = random_obs(cfg.enc, rng);
  Tensor actions = random_mat(3, cfg.action_dim, rng);
  Tensor noise = random_mat(3, cfg.z_dim, rng);

  Graph g;
  Bound p(g, params);
  DpnForward a = dpn_forward(p, cfg, o0, og, actions, noise);
  DpnForward b = dpn_forward(p, cfg, o0, og, actions, noise);
  CHECK(a.predicted_actions.data() == b.predicted_actions.data());
  CHECK(a.predicted_actions.shape() == Shape{3, cfg.action_dim});
  CHECK(a.trace.iterates.size() == static_cast<size_t>(cfg.n_p) + 1);

  // Prior-sample variant takes the draw as the initialization.
  DpnForward c = dpn_forward(p, cfg, o0, og, std::nullopt, noise);
  CHECK(c.trace.iterates.front().data() == noise.data());
}

TEST_CASE("likelihood gradient w.r.t. the first step size matches finite differences") {
  DpnConfig cfg = micro_config();
  Rng rng(8);
  ParamSet params = init_dpn_params(cfg, rng);
  Tensor o0 = random_obs(cfg.enc, rng);
  Tensor og = random_obs(cfg.enc, rng);
  Tensor actions = random_mat(3, cfg.action_dim, rng);
  Tensor noise = random_mat(3, cfg.z_dim, rng);

  auto nll_of = [&](const ParamSet& ps) {
    Graph g;
    Bound p(g, params);
    (void)p;
    Graph gg;
    Bound pp(gg, ps);
    DpnForward out = dpn_forward(pp, cfg, o0, og, actions, noise);
    return sum(square(sub(out.predicted_actions, actions))).item();
  };

  Graph g;
  Bound p(g, params);
  DpnForward out = dpn_forward(p, cfg, o0, og, actions, noise);
  Tensor nll = sum(square(sub(out.predicted_actions, actions)));
  Tensor dalpha = grad(nll, {p["alpha"]})[0];

  ParamSet shifted = params;
  double h = 1e-5;
  shifted.at("alpha").value[0] += h;
  double hi = nll_of(shifted);
  shifted.at("alpha").value[0] -= 2 * h;
  double lo = nll_of(shifted);
  CHECK(close(dalpha.data()[0], (hi - lo) / (2 * h)));
}

TEST_CASE("action-space planner ablation") {
  DpnConfig cfg = micro_config();
  cfg.z_dim = cfg.action_dim;
  Rng rng(9);
  ParamSet params = init_upn_params(cfg, rng);
  Tensor o0 = random_obs(cfg.enc, rng);
  Tensor og = random_obs(cfg.enc, rng);

  // No steps: the uniform draw comes back unchanged.
  ParamSet no_steps = params;
  no_steps.at("alpha").shape = Shape{0};
  no_steps.at("alpha").value.clear();
  Tensor draw = random_mat(3, cfg.action_dim, rng);
  {
    Graph g;
    Bound p(g, no_steps);
    Tensor out = upn_forward_deterministic(p, cfg, o0, og, draw);
    CHECK(out.data() == draw.data());
  }

  // Twenty steps keep the plan finite.
  ParamSet many = params;
  many.at("alpha").shape = Shape{20};
  many.at("alpha").value.assign(20, 0.05);
  {
    Graph g;
    Bound p(g, many);
    Tensor out = upn_forward_deterministic(p, cfg, o0, og, draw);
    for (double v : out.data()) CHECK(std::isfinite(v));
  }

  // Imitation-style objective gradient against finite differences.
  Tensor target = random_mat(3, cfg.action_dim, rng);
  auto build = [&](const Bound& pp) {
    Tensor planned = upn_forward_deterministic(pp, cfg, o0, og, draw);
    return sum(square(sub(planned, target)));
  };
  auto analytic = testutil::param_gradient(
      params, [&](Graph&, const Bound& pp) { return build(pp); });
  auto fd = testutil::fd_param_gradient(params, [&](const ParamSet& ps) {
    Graph gg;
    Bound pp(gg, ps);
    return build(pp).item();
  });
  CHECK(testutil::first_gradient_mismatch(analytic, fd) == std::pair{-1, -1});
}

TEST_CASE("one unrolled step reproduces the hand-derived second-order gradient") {
  // Linear scalar model: xh = w*x + z, inner loss 0.5*(xh-g)^2 (inside the
  // quadratic Huber branch), one update z1 = z0 - a*(w*x + z0 - g), outer
  // loss 0.5*(z1 - t)^2. Then dL/dw = (z1 - t) * (-a*x).
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    double wv = rng.uniform(-1.5, 1.5);
    double xv = rng.uniform(-1.5, 1.5);
    double zv = rng.uniform(-1.0, 1.0);
    double gv = rng.uniform(-1.0, 1.0);
    double tv = rng.uniform(-1.0, 1.0);
    double av = 0.1;
    if (std::abs(wv * xv + zv - gv) >= 10.0) continue;  // stay on the branch

    Graph g;
    Tensor w = g.input(Shape{1}, {wv});
    Tensor z = g.input(Shape{1}, {zv});
    Tensor xh = add(mul(w, Tensor(xv)), z);
    Tensor inner = sum(huber_elementwise(sub(xh, Tensor(gv)), 10.0));
    Tensor gz = grad(inner, {z})[0];
    Tensor z1 = sub(z, mul(Tensor(av), gz));
    Tensor outer = mul(Tensor(0.5), square(sub(z1, Tensor(tv))));
    double engine = grad(outer, {w})[0].item();

    double z1v = zv - av * (wv * xv + zv - gv);
    double hand = (z1v - tv) * (-av * xv);
    CHECK(std::abs(engine - hand) <= 1e-8);
  }
}

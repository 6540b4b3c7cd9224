#include "dpn/planner.hpp"

#include <stdexcept>

namespace dpn {

Tensor plan_loss(const Bound& p, const Tensor& x_start, const Tensor& z_prime,
                 const Tensor& x_goal, double delta_plan) {
  const Shape& sz = z_prime.shape();
  if (sz.size() != 2) {
    throw std::invalid_argument("plan_loss: latent actions must be {T+1, z}, got " +
                                shape_str(sz));
  }
  if (x_start.shape() != x_goal.shape()) {
    throw std::invalid_argument("plan_loss: start/goal embedding mismatch");
  }
  int horizon = sz[0];
  Tensor x = x_start;
  for (int t = 0; t < horizon; ++t) {
    x = dynamics_step(p, x, row(z_prime, t));
  }
  return sum(huber_elementwise(sub(x, x_goal), delta_plan));
}

LatentPlan gdp_plan(const Bound& p, const Tensor& x_start, const Tensor& x_goal,
                    const Tensor& init_z, const Tensor& alphas, double delta_plan) {
  if (alphas.shape().size() != 1) {
    throw std::invalid_argument("gdp_plan: alphas must be 1-D");
  }
  Graph* g = nullptr;
  for (const Tensor* t : {&alphas, &x_start, &x_goal, &init_z}) {
    if (t->in_graph()) {
      g = t->graph();
      break;
    }
  }
  if (!g) {
    throw std::invalid_argument("gdp_plan requires graph tensors");
  }
  int n_p = alphas.size();
  LatentPlan plan;
  plan.iterates.reserve(n_p + 1);
  plan.losses.reserve(n_p + 1);
  Tensor z = init_z.in_graph() ? init_z : g->input(init_z);
  plan.iterates.push_back(z);
  for (int i = 0; i < n_p; ++i) {
    Tensor loss = plan_loss(p, x_start, z, x_goal, delta_plan);
    plan.losses.push_back(loss.item());
    Tensor g = grad(loss, {z})[0];
    z = sub(z, mul(slice(alphas, i, 1), g));
    plan.iterates.push_back(z);
  }
  plan.losses.push_back(plan_loss(p, x_start, z, x_goal, delta_plan).item());
  return plan;
}

DpnForward dpn_forward(const Bound& p, const DpnConfig& cfg, const Tensor& o_start,
                       const Tensor& o_goal,
                       const std::optional<Tensor>& executed_actions,
                       const Tensor& noise) {
  Tensor x_start = encode(p, cfg.enc, o_start);
  Tensor x_goal = encode(p, cfg.enc, o_goal);
  Tensor init_z;
  if (executed_actions.has_value()) {
    PosteriorGaussian post = infer_posterior(p, cfg, *executed_actions);
    init_z = sample_latents(post, noise);
  } else {
    // The prior is standard normal, so the draw itself is the sample.
    if (noise.shape().size() != 2 ||
        noise.shape()[1] != cfg.z_dim) {
      throw std::invalid_argument("dpn_forward: prior draw must be {T+1, z}");
    }
    init_z = noise;
  }
  LatentPlan trace =
      gdp_plan(p, x_start, x_goal, init_z, p["alpha"], cfg.delta_plan);
  Tensor actions = decode_actions(p, cfg, trace.final_plan());
  return {actions, std::move(trace)};
}

Tensor upn_forward_deterministic(const Bound& p, const DpnConfig& cfg,
                                 const Tensor& o_start, const Tensor& o_goal,
                                 const Tensor& uniform_init) {
  if (uniform_init.shape().size() != 2 ||
      uniform_init.shape()[1] != cfg.action_dim) {
    throw std::invalid_argument(
        "upn_forward_deterministic: init must be {T+1, action_dim}");
  }
  Tensor x_start = encode(p, cfg.enc, o_start);
  Tensor x_goal = encode(p, cfg.enc, o_goal);
  LatentPlan trace =
      gdp_plan(p, x_start, x_goal, uniform_init, p["alpha"], cfg.delta_plan);
  return trace.final_plan();
}

}  // namespace dpn

#pragma once

#include <optional>
#include <vector>

#include "dpn/networks.hpp"
#include "dpn/tensor.hpp"

namespace dpn {

// Record of one inner-loop optimization. `iterates[i]` is the latent action
// trajectory after i gradient steps (iterate 0 is the supplied
// initialization); `losses[i]` is the planning loss evaluated at iterate i,
// so `losses` has one more entry than gradient steps were taken.
struct LatentPlan {
  std::vector<Tensor> iterates;
  std::vector<double> losses;
  const Tensor& final_plan() const { return iterates.back(); }
};

// Rolls the latent state forward through the dynamics for every row of
// z_prime and returns the Huber distance between the terminal state and the
// goal embedding, summed over coordinates.
Tensor plan_loss(const Bound& p, const Tensor& x_start, const Tensor& z_prime,
                 const Tensor& x_goal, double delta_plan);

// Unrolled gradient descent on the latent action trajectory. Runs one update
// per entry of `alphas` (z' <- z' - alpha_i * d(plan_loss)/dz'); the whole
// unroll stays differentiable with respect to the encoder, the dynamics, the
// step sizes, and the initialization.
LatentPlan gdp_plan(const Bound& p, const Tensor& x_start, const Tensor& x_goal,
                    const Tensor& init_z, const Tensor& alphas, double delta_plan);

struct DpnForward {
  Tensor predicted_actions;  // {T+1, action_dim}
  LatentPlan trace;
};

// Full forward pass: encode both observations, initialize the latent plan
// from the posterior over executed actions (when given) or directly from the
// prior draw in `noise`, run the planner, decode action means.
DpnForward dpn_forward(const Bound& p, const DpnConfig& cfg, const Tensor& o_start,
                       const Tensor& o_goal,
                       const std::optional<Tensor>& executed_actions,
                       const Tensor& noise);

// Ablation that plans directly in action space: no latent variables and no
// decoder. `uniform_init` supplies the U(-1,1) initialization.
Tensor upn_forward_deterministic(const Bound& p, const DpnConfig& cfg,
                                 const Tensor& o_start, const Tensor& o_goal,
                                 const Tensor& uniform_init);

}  // namespace dpn

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpn/env.hpp"
#include "dpn/networks.hpp"
#include "dpn/planner.hpp"
#include "dpn/tensor.hpp"

namespace dpn {

struct TrainConfig {
  double beta = 0.5;     // KL weight
  int segment_len = 4;   // T; segments hold T+1 actions
  double lr = 0.0005;
  int batch = 16;
  int iters = 2000;
  uint64_t seed = 0;
};

// One training example: (o_t, a_{t..t+T}, o_{t+T+1}) from a contiguous slice
// of a single episode.
struct Segment {
  Tensor obs_start;   // {C,H,W}
  Tensor actions;     // {T+1, action_dim}
  Tensor obs_goal;    // {C,H,W}
  int episode = 0;
  int start = 0;
};

Segment sample_segment(const Dataset& ds, int segment_len, Rng& rng);

// Sum over dims of 0.5*(mu^2 + sigma^2 - 1 - 2*ln sigma).
Tensor kl_standard_normal(const Tensor& means, const Tensor& stds);

// 0.5*||a - a_hat||^2 + (D/2)*ln(2*pi) for a unit-covariance Gaussian.
Tensor gaussian_nll(const Tensor& true_actions, const Tensor& predicted_means);

struct DpnLoss {
  Tensor total;
  double nll = 0.0;
  double kl = 0.0;
};

// Single-sample estimate of the training objective: NLL of the executed
// actions under the decoded plan plus beta times the KL of the amortized
// posterior against the standard-normal prior.
DpnLoss dpn_loss(const Bound& p, const DpnConfig& cfg, const Segment& seg,
                 double beta, const Tensor& noise);

// Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8.
class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}
  void step(ParamSet& params, const std::vector<std::vector<double>>& grads);

 private:
  double lr_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LossRecord {
  double total = 0.0;
  double nll = 0.0;
  double kl = 0.0;
};

struct TrainResult {
  ParamSet params;
  std::vector<LossRecord> history;
};

// Raised when a loss goes non-finite; carries a diagnostic snapshot.
struct TrainDiverged : std::runtime_error {
  explicit TrainDiverged(const std::string& what) : std::runtime_error(what) {}
};

TrainResult train_dpn(const Dataset& ds, const DpnConfig& model,
                      const TrainConfig& cfg);

enum class BaselineKind { kVae, kInverse, kUpnDeterministic };
BaselineKind baseline_kind_from_string(const std::string& s);

// VAE: reconstruction + KL on single observations. Inverse: action MSE plus
// weighted forward-consistency MSE on one-step pairs. Deterministic planner
// ablation: MSE between planned and executed actions on segments.
TrainResult train_baseline(BaselineKind kind, const Dataset& ds,
                           const DpnConfig& model, const BaselineConfig& baseline,
                           const TrainConfig& cfg);

void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history);

}  // namespace dpn

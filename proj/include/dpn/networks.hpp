#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpn/rng.hpp"
#include "dpn/tensor.hpp"

namespace dpn {

// ---------------------------------------------------------------------------
// Parameters

struct ParamTensor {
  std::string name;
  Shape shape;
  std::vector<double> value;
};

// Named flat parameter storage shared by training, checkpointing, and the
// optimizer. Order is fixed at construction and is part of the determinism
// contract.
class ParamSet {
 public:
  void add(std::string name, Shape shape, std::vector<double> value);
  bool has(const std::string& name) const;
  ParamTensor& at(const std::string& name);
  const ParamTensor& at(const std::string& name) const;
  size_t size() const { return items_.size(); }
  std::vector<ParamTensor>& items() { return items_; }
  const std::vector<ParamTensor>& items() const { return items_; }

 private:
  std::vector<ParamTensor> items_;
  std::unordered_map<std::string, int> index_;
};

// Leaf tensors for every parameter of a ParamSet within one graph.
class Bound {
 public:
  Bound(Graph& graph, const ParamSet& params);
  const Tensor& operator[](const std::string& name) const;
  const std::vector<Tensor>& leaves() const { return leaves_; }

 private:
  std::vector<Tensor> leaves_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Architecture configuration

struct EncoderConfig {
  int channels_in = 1;
  int height = 16;
  int width = 16;
  std::vector<int> conv_channels = {8, 8, 8};  // 5x5 kernels per layer
  // Every layer's input must stay at least 5x5; on 16x16 this schedule keeps
  // the maps at 16 -> 16 -> 8 -> 8, leaving the soft-argmax an 8x8 grid.
  std::vector<int> conv_strides = {1, 2, 1};
  // Sharp enough that freshly initialized feature maps already localize;
  // 1.0 leaves the softmax nearly uniform on 16x16 inputs and the embedding
  // spread is then too small for the planning loss to carry signal.
  double ssam_temperature = 0.02;

  int latent_dim() const { return 2 * conv_channels.back(); }
  void validate() const;
};

struct DpnConfig {
  EncoderConfig enc;
  int action_dim = 2;
  int z_dim = 2;  // latent action width; defaults to the action width
  int dyn_hidden = 128;
  int inf_hidden = 16;
  int dec_hidden = 16;
  int n_p = 5;
  double alpha_init = 0.05;
  double delta_plan = 1.0;

  int x_dim() const { return enc.latent_dim(); }
};

struct BaselineConfig {
  EncoderConfig enc;
  int action_dim = 2;
  int head_hidden = 64;         // inverse-model heads
  double forward_weight = 1.0;  // forward-consistency regularizer weight
};

// Parameter construction. Weights are fan-in-scaled uniform, biases zero,
// planner step sizes alpha_init.
ParamSet init_dpn_params(const DpnConfig& cfg, Rng& rng);
ParamSet init_vae_params(const BaselineConfig& cfg, Rng& rng);
ParamSet init_inverse_params(const BaselineConfig& cfg, Rng& rng);
// The action-space planner ablation: same structure as DPN but with latent
// actions identical to actions and no inference/decoder networks.
ParamSet init_upn_params(const DpnConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Forward passes. All are deterministic; stochasticity enters only through
// explicitly passed noise tensors.

// Conv stack with ReLU between layers, then spatial soft-argmax. Output lies
// in [-1,1]^{latent_dim}.
Tensor encode(const Bound& p, const EncoderConfig& cfg, const Tensor& obs,
              const std::string& prefix = "enc");

// One latent dynamics step x' = g(x, z').
Tensor dynamics_step(const Bound& p, const Tensor& x, const Tensor& z_prime);

struct PosteriorGaussian {
  Tensor means;  // {T+1, z_dim}
  Tensor stds;   // {T+1, z_dim}, >= kSigmaFloor
};

inline constexpr double kSigmaFloor = 1e-4;

// Per-timestep Gaussian over latent actions conditioned on the executed
// action at the same timestep; weights shared across timesteps.
PosteriorGaussian infer_posterior(const Bound& p, const DpnConfig& cfg,
                                  const Tensor& actions);

// Reparameterized draw z = mu + sigma * noise.
Tensor sample_latents(const PosteriorGaussian& post, const Tensor& noise);

// Per-timestep decoder from latent actions to action means.
Tensor decode_actions(const Bound& p, const DpnConfig& cfg, const Tensor& z_prime);

struct VaeForward {
  Tensor latent;          // reparameterized sample
  Tensor reconstruction;  // same shape as the observation
  Tensor kl;              // scalar, closed form against the standard normal
};

VaeForward vae_forward(const Bound& p, const BaselineConfig& cfg,
                       const Tensor& obs, const Tensor& noise);

// Deterministic VAE embedding (posterior mean), used as its goal metric.
Tensor vae_embed(const Bound& p, const BaselineConfig& cfg, const Tensor& obs);

struct InverseForward {
  Tensor embedding_t;
  Tensor embedding_next;
  Tensor predicted_action;
  Tensor predicted_next_embedding;  // from (embedding_t, executed action)
};

InverseForward inverse_forward(const Bound& p, const BaselineConfig& cfg,
                               const Tensor& o_t, const Tensor& o_next,
                               const Tensor& action);

}  // namespace dpn

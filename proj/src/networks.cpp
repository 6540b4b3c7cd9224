#include "dpn/networks.hpp"

#include <cmath>
#include <stdexcept>

namespace dpn {

// ---------------------------------------------------------------------------
// ParamSet / Bound

void ParamSet::add(std::string name, Shape shape, std::vector<double> value) {
  if (index_.count(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  if (numel(shape) != static_cast<int>(value.size())) {
    throw std::invalid_argument("parameter " + name + " value size mismatch");
  }
  index_[name] = static_cast<int>(items_.size());
  items_.push_back({std::move(name), std::move(shape), std::move(value)});
}

bool ParamSet::has(const std::string& name) const { return index_.count(name) > 0; }

ParamTensor& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return items_[it->second];
}

const ParamTensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return items_[it->second];
}

Bound::Bound(Graph& graph, const ParamSet& params) {
  leaves_.reserve(params.size());
  for (const ParamTensor& p : params.items()) {
    index_[p.name] = static_cast<int>(leaves_.size());
    leaves_.push_back(graph.input(p.shape, p.value));
  }
}

const Tensor& Bound::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return leaves_[it->second];
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

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

void add_conv_stack(ParamSet& ps, const std::string& prefix,
                    const EncoderConfig& cfg, Rng& rng) {
  int cin = cfg.channels_in;
  for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    int cout = cfg.conv_channels[i];
    int fan_in = cin * 5 * 5;
    ps.add(prefix + ".conv" + std::to_string(i) + ".w", Shape{cout, cin, 5, 5},
           fan_in_uniform(cout * fan_in, fan_in, rng));
    ps.add(prefix + ".conv" + std::to_string(i) + ".b", Shape{cout},
           std::vector<double>(cout, 0.0));
    cin = cout;
  }
}

}  // namespace

void EncoderConfig::validate() const {
  if (conv_channels.empty() || conv_channels.size() != conv_strides.size()) {
    throw std::invalid_argument("encoder layer/stride lists inconsistent");
  }
  if (height < 5 || width < 5) {
    throw std::invalid_argument("encoder input must be at least 5x5");
  }
  int h = height, w = width;
  for (size_t i = 0; i < conv_strides.size(); ++i) {
    int s = conv_strides[i];
    if (s < 1) throw std::invalid_argument("conv stride must be positive");
    if (h < 5 || w < 5) {
      throw std::invalid_argument(
          "conv layer " + std::to_string(i) + " input is " + std::to_string(h) +
          "x" + std::to_string(w) + "; every layer needs at least 5x5");
    }
    h = (h + s - 1) / s;
    w = (w + s - 1) / s;
  }
}

ParamSet init_dpn_params(const DpnConfig& cfg, Rng& rng) {
  cfg.enc.validate();
  ParamSet ps;
  add_conv_stack(ps, "enc", cfg.enc, rng);
  int x = cfg.x_dim();
  add_linear(ps, "dyn.fc0", cfg.dyn_hidden, x + cfg.z_dim, rng);
  add_linear(ps, "dyn.fc1", x, cfg.dyn_hidden, rng);
  add_linear(ps, "inf.fc0", cfg.inf_hidden, cfg.action_dim, rng);
  add_linear(ps, "inf.mu", cfg.z_dim, cfg.inf_hidden, rng);
  add_linear(ps, "inf.sigma", cfg.z_dim, cfg.inf_hidden, rng);
  add_linear(ps, "dec.fc0", cfg.dec_hidden, cfg.z_dim, rng);
  add_linear(ps, "dec.fc1", cfg.action_dim, cfg.dec_hidden, rng);
  ps.add("alpha", Shape{cfg.n_p},
         std::vector<double>(cfg.n_p, cfg.alpha_init));
  return ps;
}

ParamSet init_upn_params(const DpnConfig& cfg, Rng& rng) {
  if (cfg.z_dim != cfg.action_dim) {
    throw std::invalid_argument(
        "action-space planner requires z_dim == action_dim");
  }
  cfg.enc.validate();
  ParamSet ps;
  add_conv_stack(ps, "enc", cfg.enc, rng);
  int x = cfg.x_dim();
  add_linear(ps, "dyn.fc0", cfg.dyn_hidden, x + cfg.action_dim, rng);
  add_linear(ps, "dyn.fc1", x, cfg.dyn_hidden, rng);
  ps.add("alpha", Shape{cfg.n_p},
         std::vector<double>(cfg.n_p, cfg.alpha_init));
  return ps;
}

namespace {

// Upsampling schedule of the VAE decoder: encoder strides reversed, applied
// from the encoder's final spatial size back up to the observation size.
std::vector<int> vae_strides(const BaselineConfig& cfg) {
  return {cfg.enc.conv_strides.rbegin(), cfg.enc.conv_strides.rend()};
}

struct VaeGeometry {
  int h0, w0;                       // spatial size entering the first deconv
  std::vector<int> hs, ws;          // output sizes per deconv layer
  std::vector<int> channels;        // output channels per deconv layer
};

VaeGeometry vae_geometry(const BaselineConfig& cfg) {
  auto out_dim = [](int in, int s) { return (in + s - 1) / s; };
  int h = cfg.enc.height, w = cfg.enc.width;
  std::vector<int> enc_h{h}, enc_w{w};
  for (int s : cfg.enc.conv_strides) {
    h = out_dim(h, s);
    w = out_dim(w, s);
    enc_h.push_back(h);
    enc_w.push_back(w);
  }
  VaeGeometry g;
  g.h0 = enc_h.back();
  g.w0 = enc_w.back();
  size_t n = cfg.enc.conv_strides.size();
  for (size_t i = 0; i < n; ++i) {
    // Mirror the encoder sizes so the final layer lands on the input size.
    g.hs.push_back(enc_h[n - 1 - i]);
    g.ws.push_back(enc_w[n - 1 - i]);
    g.channels.push_back(i + 1 == n ? cfg.enc.channels_in
                                    : cfg.enc.conv_channels[n - 2 - i]);
  }
  return g;
}

}  // namespace

ParamSet init_vae_params(const BaselineConfig& cfg, Rng& rng) {
  cfg.enc.validate();
  ParamSet ps;
  add_conv_stack(ps, "vae.enc", cfg.enc, rng);
  int feat = cfg.enc.latent_dim();
  add_linear(ps, "vae.mu", feat, feat, rng);
  add_linear(ps, "vae.sigma", feat, feat, rng);
  VaeGeometry g = vae_geometry(cfg);
  int c0 = cfg.enc.conv_channels.back();
  add_linear(ps, "vae.fc", c0 * g.h0 * g.w0, feat, rng);
  int cin = c0;
  for (size_t i = 0; i < g.channels.size(); ++i) {
    int cout = g.channels[i];
    // Deconv kernels follow the conv layout {cin, cout, 5, 5}: the layer is
    // the adjoint of a conv mapping cout -> cin channels.
    int fan_in = cin * 5 * 5;
    ps.add("vae.deconv" + std::to_string(i) + ".w", Shape{cin, cout, 5, 5},
           fan_in_uniform(cin * cout * 25, fan_in, rng));
    ps.add("vae.deconv" + std::to_string(i) + ".b", Shape{cout},
           std::vector<double>(cout, 0.0));
    cin = cout;
  }
  return ps;
}

ParamSet init_inverse_params(const BaselineConfig& cfg, Rng& rng) {
  cfg.enc.validate();
  ParamSet ps;
  add_conv_stack(ps, "inv.enc", cfg.enc, rng);
  int e = cfg.enc.latent_dim();
  add_linear(ps, "inv.act.fc0", cfg.head_hidden, 2 * e, rng);
  add_linear(ps, "inv.act.fc1", cfg.action_dim, cfg.head_hidden, rng);
  add_linear(ps, "inv.fwd.fc0", cfg.head_hidden, e + cfg.action_dim, rng);
  add_linear(ps, "inv.fwd.fc1", e, cfg.head_hidden, rng);
  return ps;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

// y = W x + b for a 1-D x.
Tensor affine(const Bound& p, const std::string& name, const Tensor& x) {
  const Tensor& w = p[name + ".w"];
  const Tensor& b = p[name + ".b"];
  int in = w.shape()[1];
  Tensor y = matmul(w, reshape(x, Shape{in, 1}));
  return add(reshape(y, Shape{w.shape()[0]}), b);
}

// Y = X W^T + b applied to every row of X.
Tensor affine_rows(const Bound& p, const std::string& name, const Tensor& x) {
  const Tensor& w = p[name + ".w"];
  const Tensor& b = p[name + ".b"];
  Tensor y = matmul(x, transpose(w));
  return add(y, broadcast_rows(b, x.shape()[0]));
}

}  // namespace

Tensor encode(const Bound& p, const EncoderConfig& cfg, const Tensor& obs,
              const std::string& prefix) {
  const Shape& s = obs.shape();
  if (s.size() != 3 || s[0] != cfg.channels_in || s[1] != cfg.height ||
      s[2] != cfg.width) {
    throw std::invalid_argument("encode: observation shape " + shape_str(s) +
                                " does not match encoder config {" +
                                std::to_string(cfg.channels_in) + "," +
                                std::to_string(cfg.height) + "," +
                                std::to_string(cfg.width) + "}");
  }
  Tensor h = obs;
  for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    std::string layer = prefix + ".conv" + std::to_string(i);
    h = conv2d(h, p[layer + ".w"], cfg.conv_strides[i]);
    h = add(h, broadcast_chan(p[layer + ".b"], h.shape()[1], h.shape()[2]));
    if (i + 1 < cfg.conv_channels.size()) h = relu(h);
  }
  return spatial_soft_argmax(h, cfg.ssam_temperature);
}

Tensor dynamics_step(const Bound& p, const Tensor& x, const Tensor& z_prime) {
  Tensor in = concat({x, z_prime});
  Tensor h = tanh(affine(p, "dyn.fc0", in));
  return affine(p, "dyn.fc1", h);
}

PosteriorGaussian infer_posterior(const Bound& p, const DpnConfig& cfg,
                                  const Tensor& actions) {
  const Shape& s = actions.shape();
  if (s.size() != 2 || s[1] != cfg.action_dim) {
    throw std::invalid_argument("infer_posterior: actions shape " + shape_str(s) +
                                " does not match action dim " +
                                std::to_string(cfg.action_dim));
  }
  Tensor h = tanh(affine_rows(p, "inf.fc0", actions));
  Tensor means = affine_rows(p, "inf.mu", h);
  Tensor stds = add(softplus(affine_rows(p, "inf.sigma", h)), Tensor(kSigmaFloor));
  return {means, stds};
}

Tensor sample_latents(const PosteriorGaussian& post, const Tensor& noise) {
  if (noise.shape() != post.means.shape()) {
    throw std::invalid_argument("sample_latents: noise shape " +
                                shape_str(noise.shape()) + " vs means " +
                                shape_str(post.means.shape()));
  }
  return add(post.means, mul(post.stds, noise));
}

Tensor decode_actions(const Bound& p, const DpnConfig& cfg, const Tensor& z_prime) {
  const Shape& s = z_prime.shape();
  if (s.size() != 2 || s[1] != cfg.z_dim) {
    throw std::invalid_argument("decode_actions: latent shape " + shape_str(s) +
                                " does not match z dim " +
                                std::to_string(cfg.z_dim));
  }
  Tensor h = tanh(affine_rows(p, "dec.fc0", z_prime));
  return affine_rows(p, "dec.fc1", h);
}

VaeForward vae_forward(const Bound& p, const BaselineConfig& cfg,
                       const Tensor& obs, const Tensor& noise) {
  Tensor feat = encode(p, cfg.enc, obs, "vae.enc");
  Tensor mu = affine(p, "vae.mu", feat);
  Tensor sigma = add(softplus(affine(p, "vae.sigma", feat)), Tensor(kSigmaFloor));
  if (noise.shape() != mu.shape()) {
    throw std::invalid_argument("vae_forward: noise shape mismatch");
  }
  Tensor z = add(mu, mul(sigma, noise));

  VaeGeometry g = vae_geometry(cfg);
  int c0 = cfg.enc.conv_channels.back();
  Tensor h = reshape(affine(p, "vae.fc", z), Shape{c0, g.h0, g.w0});
  std::vector<int> strides = vae_strides(cfg);
  for (size_t i = 0; i < g.channels.size(); ++i) {
    std::string layer = "vae.deconv" + std::to_string(i);
    h = conv2d_input_grad(h, p[layer + ".w"], strides[i], g.hs[i], g.ws[i]);
    h = add(h, broadcast_chan(p[layer + ".b"], g.hs[i], g.ws[i]));
    if (i + 1 < g.channels.size()) h = relu(h);
  }

  // KL(N(mu, sigma^2) || N(0, I)) in closed form.
  Tensor kl = mul(Tensor(0.5),
                  sum(sub(add(square(mu), square(sigma)),
                          add(Tensor(1.0), mul(Tensor(2.0), log(sigma))))));
  return {z, h, kl};
}

Tensor vae_embed(const Bound& p, const BaselineConfig& cfg, const Tensor& obs) {
  Tensor feat = encode(p, cfg.enc, obs, "vae.enc");
  return affine(p, "vae.mu", feat);
}

InverseForward inverse_forward(const Bound& p, const BaselineConfig& cfg,
                               const Tensor& o_t, const Tensor& o_next,
                               const Tensor& action) {
  Tensor e_t = encode(p, cfg.enc, o_t, "inv.enc");
  Tensor e_next = encode(p, cfg.enc, o_next, "inv.enc");
  Tensor act_h = tanh(affine(p, "inv.act.fc0", concat({e_t, e_next})));
  Tensor predicted_action = affine(p, "inv.act.fc1", act_h);
  Tensor fwd_h = tanh(affine(p, "inv.fwd.fc0", concat({e_t, action})));
  Tensor predicted_next = affine(p, "inv.fwd.fc1", fwd_h);
  return {e_t, e_next, predicted_action, predicted_next};
}

}  // namespace dpn

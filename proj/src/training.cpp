#include "dpn/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dpn {

namespace {

Tensor obs_tensor(const Dataset& ds, const Episode& ep, int frame) {
  int n = ds.obs_size();
  std::vector<double> v(n);
  const float* src = ep.obs.data() + static_cast<size_t>(frame) * n;
  for (int i = 0; i < n; ++i) v[i] = src[i];
  return Tensor(Shape{ds.channels, ds.height, ds.width}, std::move(v));
}

Tensor actions_tensor(const Dataset& ds, const Episode& ep, int start, int count) {
  std::vector<double> v(static_cast<size_t>(count) * ds.action_dim);
  const float* src = ep.actions.data() + static_cast<size_t>(start) * ds.action_dim;
  for (size_t i = 0; i < v.size(); ++i) v[i] = src[i];
  return Tensor(Shape{count, ds.action_dim}, std::move(v));
}

Tensor normal_noise(const Shape& shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

}  // namespace

Segment sample_segment(const Dataset& ds, int segment_len, Rng& rng) {
  if (ds.episodes.empty()) {
    throw std::invalid_argument("sample_segment: empty dataset");
  }
  int need = segment_len + 2;  // frames required: o_t .. o_{t+T+1}
  for (const Episode& ep : ds.episodes) {
    if (ep.length + 1 < need) {
      throw std::invalid_argument("sample_segment: episode with " +
                                  std::to_string(ep.length + 1) +
                                  " frames is shorter than " + std::to_string(need));
    }
  }
  int e = rng.uniform_int(static_cast<int>(ds.episodes.size()));
  const Episode& ep = ds.episodes[e];
  int max_start = ep.length - segment_len - 1;  // inclusive
  int t = rng.uniform_int(max_start + 1);
  Segment seg;
  seg.obs_start = obs_tensor(ds, ep, t);
  seg.actions = actions_tensor(ds, ep, t, segment_len + 1);
  seg.obs_goal = obs_tensor(ds, ep, t + segment_len + 1);
  seg.episode = e;
  seg.start = t;
  return seg;
}

Tensor kl_standard_normal(const Tensor& means, const Tensor& stds) {
  for (double s : stds.data()) {
    if (s <= 0) throw std::domain_error("kl_standard_normal: non-positive std");
  }
  Tensor inner = sub(add(square(means), square(stds)),
                     add(Tensor(1.0), mul(Tensor(2.0), log(stds))));
  return mul(Tensor(0.5), sum(inner));
}

Tensor gaussian_nll(const Tensor& true_actions, const Tensor& predicted_means) {
  if (true_actions.shape() != predicted_means.shape()) {
    throw std::invalid_argument("gaussian_nll: shape mismatch " +
                                shape_str(true_actions.shape()) + " vs " +
                                shape_str(predicted_means.shape()));
  }
  int d = true_actions.size();
  Tensor sq = mul(Tensor(0.5), sum(square(sub(true_actions, predicted_means))));
  return add(sq, Tensor(0.5 * d * std::log(2.0 * M_PI)));
}

DpnLoss dpn_loss(const Bound& p, const DpnConfig& cfg, const Segment& seg,
                 double beta, const Tensor& noise) {
  PosteriorGaussian post = infer_posterior(p, cfg, seg.actions);
  Tensor init_z = sample_latents(post, noise);
  Tensor x_start = encode(p, cfg.enc, seg.obs_start);
  Tensor x_goal = encode(p, cfg.enc, seg.obs_goal);
  LatentPlan trace =
      gdp_plan(p, x_start, x_goal, init_z, p["alpha"], cfg.delta_plan);
  Tensor predicted = decode_actions(p, cfg, trace.final_plan());

  Tensor nll = gaussian_nll(seg.actions, predicted);
  Tensor kl = kl_standard_normal(post.means, post.stds);
  Tensor total = beta == 0.0 ? nll : add(nll, mul(Tensor(beta), kl));
  return {total, nll.item(), kl.item()};
}

void Adam::step(ParamSet& params, const std::vector<std::vector<double>>& grads) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  auto& items = params.items();
  if (grads.size() != items.size()) {
    throw std::invalid_argument("Adam: gradient count mismatch");
  }
  if (m_.empty()) {
    m_.resize(items.size());
    v_.resize(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
      m_[i].assign(items[i].value.size(), 0.0);
      v_[i].assign(items[i].value.size(), 0.0);
    }
  }
  ++t_;
  double c1 = 1.0 - std::pow(kBeta1, t_);
  double c2 = 1.0 - std::pow(kBeta2, t_);
  for (size_t i = 0; i < items.size(); ++i) {
    auto& value = items[i].value;
    const auto& g = grads[i];
    if (g.size() != value.size()) {
      throw std::invalid_argument("Adam: gradient size mismatch for " +
                                  items[i].name);
    }
    for (size_t j = 0; j < value.size(); ++j) {
      m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g[j];
      v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g[j] * g[j];
      double mhat = m_[i][j] / c1;
      double vhat = v_[i][j] / c2;
      value[j] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
    }
  }
}

namespace {

// Shared outer loop: builds a fresh graph per iteration, averages the batch
// loss, and applies one Adam step. `sample_loss` must consume rng draws in a
// fixed order so runs are bit-reproducible.
template <typename SampleLoss>
TrainResult run_training(ParamSet params, const TrainConfig& cfg, Rng& rng,
                         SampleLoss&& sample_loss) {
  Adam adam(cfg.lr);
  TrainResult result;
  result.history.reserve(cfg.iters);
  for (int it = 0; it < cfg.iters; ++it) {
    Graph graph;
    Bound bound(graph, params);
    Tensor total;
    LossRecord rec;
    for (int b = 0; b < cfg.batch; ++b) {
      DpnLoss piece = sample_loss(bound, rng);
      total = b == 0 ? piece.total : add(total, piece.total);
      rec.nll += piece.nll;
      rec.kl += piece.kl;
    }
    Tensor mean_loss = mul(Tensor(1.0 / cfg.batch), total);
    rec.total = mean_loss.item();
    rec.nll /= cfg.batch;
    rec.kl /= cfg.batch;
    if (!std::isfinite(rec.total)) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << it << ": total=" << rec.total
         << " nll=" << rec.nll << " kl=" << rec.kl;
      throw TrainDiverged(os.str());
    }
    std::vector<Tensor> grads = grad(mean_loss, bound.leaves());
    std::vector<std::vector<double>> gvals;
    gvals.reserve(grads.size());
    for (const Tensor& g : grads) gvals.push_back(g.data());
    adam.step(params, gvals);
    result.history.push_back(rec);
  }
  result.params = std::move(params);
  return result;
}

void check_dims(const Dataset& ds, const DpnConfig& model) {
  if (ds.channels != model.enc.channels_in || ds.height != model.enc.height ||
      ds.width != model.enc.width) {
    throw std::invalid_argument(
        "dataset observations {" + std::to_string(ds.channels) + "," +
        std::to_string(ds.height) + "," + std::to_string(ds.width) +
        "} do not match encoder config {" + std::to_string(model.enc.channels_in) +
        "," + std::to_string(model.enc.height) + "," +
        std::to_string(model.enc.width) + "}");
  }
  if (ds.action_dim != model.action_dim) {
    throw std::invalid_argument("dataset action dim " +
                                std::to_string(ds.action_dim) +
                                " does not match config action dim " +
                                std::to_string(model.action_dim));
  }
}

}  // namespace

TrainResult train_dpn(const Dataset& ds, const DpnConfig& model,
                      const TrainConfig& cfg) {
  check_dims(ds, model);
  Rng rng(cfg.seed);
  ParamSet params = init_dpn_params(model, rng);
  return run_training(std::move(params), cfg, rng, [&](const Bound& p, Rng& r) {
    Segment seg = sample_segment(ds, cfg.segment_len, r);
    Tensor noise = normal_noise(Shape{cfg.segment_len + 1, model.z_dim}, r);
    return dpn_loss(p, model, seg, cfg.beta, noise);
  });
}

BaselineKind baseline_kind_from_string(const std::string& s) {
  if (s == "vae") return BaselineKind::kVae;
  if (s == "inverse") return BaselineKind::kInverse;
  if (s == "upn") return BaselineKind::kUpnDeterministic;
  throw std::invalid_argument("unknown baseline kind: " + s);
}

TrainResult train_baseline(BaselineKind kind, const Dataset& ds,
                           const DpnConfig& model, const BaselineConfig& baseline,
                           const TrainConfig& cfg) {
  check_dims(ds, model);
  Rng rng(cfg.seed);
  switch (kind) {
    case BaselineKind::kVae: {
      ParamSet params = init_vae_params(baseline, rng);
      return run_training(std::move(params), cfg, rng,
                          [&](const Bound& p, Rng& r) -> DpnLoss {
        int e = r.uniform_int(static_cast<int>(ds.episodes.size()));
        const Episode& ep = ds.episodes[e];
        int frame = r.uniform_int(ep.length + 1);
        Tensor obs = obs_tensor(ds, ep, frame);
        Tensor noise = normal_noise(Shape{baseline.enc.latent_dim()}, r);
        VaeForward out = vae_forward(p, baseline, obs, noise);
        Tensor recon =
            mul(Tensor(0.5), sum(square(sub(out.reconstruction, obs))));
        Tensor total = add(recon, out.kl);
        return {total, recon.item(), out.kl.item()};
      });
    }
    case BaselineKind::kInverse: {
      ParamSet params = init_inverse_params(baseline, rng);
      return run_training(std::move(params), cfg, rng,
                          [&](const Bound& p, Rng& r) -> DpnLoss {
        int e = r.uniform_int(static_cast<int>(ds.episodes.size()));
        const Episode& ep = ds.episodes[e];
        int t = r.uniform_int(ep.length);
        Tensor o_t = obs_tensor(ds, ep, t);
        Tensor o_next = obs_tensor(ds, ep, t + 1);
        Tensor action = reshape(actions_tensor(ds, ep, t, 1), Shape{ds.action_dim});
        InverseForward out = inverse_forward(p, baseline, o_t, o_next, action);
        Tensor act_mse = sum(square(sub(out.predicted_action, action)));
        Tensor fwd_mse =
            sum(square(sub(out.predicted_next_embedding, out.embedding_next)));
        Tensor total =
            baseline.forward_weight == 0.0
                ? act_mse
                : add(act_mse, mul(Tensor(baseline.forward_weight), fwd_mse));
        return {total, act_mse.item(), fwd_mse.item()};
      });
    }
    case BaselineKind::kUpnDeterministic: {
      DpnConfig upn_model = model;
      upn_model.z_dim = model.action_dim;  // plans directly in action space
      ParamSet params = init_upn_params(upn_model, rng);
      return run_training(std::move(params), cfg, rng,
                          [&, upn_model](const Bound& p, Rng& r) -> DpnLoss {
        Segment seg = sample_segment(ds, cfg.segment_len, r);
        std::vector<double> init(static_cast<size_t>(cfg.segment_len + 1) *
                                 upn_model.action_dim);
        for (double& x : init) x = r.uniform(-1.0, 1.0);
        Tensor init_actions(Shape{cfg.segment_len + 1, upn_model.action_dim},
                            std::move(init));
        Tensor planned = upn_forward_deterministic(p, upn_model, seg.obs_start,
                                                   seg.obs_goal, init_actions);
        Tensor total = sum(square(sub(planned, seg.actions)));
        return {total, total.item(), 0.0};
      });
    }
  }
  throw std::logic_error("unreachable");
}

void write_loss_csv(const std::string& path,
                    const std::vector<LossRecord>& history) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "iteration,total,nll,kl\n";
  f.precision(17);
  for (size_t i = 0; i < history.size(); ++i) {
    f << i << "," << history[i].total << "," << history[i].nll << ","
      << history[i].kl << "\n";
  }
}

}  // namespace dpn

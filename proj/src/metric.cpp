#include "dpn/metric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dpn {

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "dpn") return MetricKind::kDpn;
  if (s == "inverse") return MetricKind::kInverse;
  if (s == "vae") return MetricKind::kVae;
  if (s == "pixel") return MetricKind::kPixel;
  throw std::invalid_argument("unknown metric kind: " + s);
}

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::kDpn: return "dpn";
    case MetricKind::kInverse: return "inverse";
    case MetricKind::kVae: return "vae";
    case MetricKind::kPixel: return "pixel";
  }
  return "?";
}

Metric::Metric(double delta) : delta_(delta) {
  if (delta <= 0) throw std::invalid_argument("metric delta must be positive");
}

Metric::Metric(MetricKind kind, double delta, ParamSet params, DpnConfig model,
               BaselineConfig baseline)
    : kind_(kind),
      delta_(delta),
      params_(std::move(params)),
      model_(std::move(model)),
      baseline_(std::move(baseline)) {
  if (delta <= 0) throw std::invalid_argument("metric delta must be positive");
}

namespace {

Tensor obs_to_tensor(const std::vector<float>& obs, const EncoderConfig& enc) {
  std::vector<double> v(obs.begin(), obs.end());
  return Tensor(Shape{enc.channels_in, enc.height, enc.width}, std::move(v));
}

}  // namespace

std::vector<double> Metric::embed(const std::vector<float>& obs) const {
  switch (kind_) {
    case MetricKind::kPixel:
      return {obs.begin(), obs.end()};
    case MetricKind::kDpn: {
      Graph g;
      Bound p(g, params_);
      return encode(p, model_.enc, obs_to_tensor(obs, model_.enc)).data();
    }
    case MetricKind::kInverse: {
      Graph g;
      Bound p(g, params_);
      return encode(p, baseline_.enc, obs_to_tensor(obs, baseline_.enc), "inv.enc")
          .data();
    }
    case MetricKind::kVae: {
      Graph g;
      Bound p(g, params_);
      return vae_embed(p, baseline_, obs_to_tensor(obs, baseline_.enc)).data();
    }
  }
  throw std::logic_error("unreachable");
}

double Metric::loss(const std::vector<float>& obs,
                    const std::vector<float>& obs_goal) const {
  if (obs.size() != obs_goal.size()) {
    throw std::invalid_argument("metric loss on observations of different sizes");
  }
  std::vector<double> e1 = embed(obs);
  std::vector<double> e2 = embed(obs_goal);
  double total = 0.0;
  for (size_t i = 0; i < e1.size(); ++i) {
    double x = e1[i] - e2[i];
    double ax = std::abs(x);
    total += ax <= delta_ ? 0.5 * x * x : delta_ * ax - 0.5 * delta_ * delta_;
  }
  return total;
}

double Metric::reward(const std::vector<float>& obs,
                      const std::vector<float>& obs_goal) const {
  double l = loss(obs, obs_goal);
  if (l > kOverflowLoss) {
    ++overflow_count_;
    return kOverflowSentinel;
  }
  return -std::exp(l);
}

namespace {

std::vector<double> ranks_with_ties(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = 0.5 * (i + j) + 1.0;  // 1-based average rank of the tie group
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b,
                bool* degenerate) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman needs two equal-length samples");
  }
  std::vector<double> ra = ranks_with_ties(a);
  std::vector<double> rb = ranks_with_ties(b);
  size_t n = ra.size();
  double ma = 0, mb = 0;
  for (size_t i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < n; ++i) {
    double da = ra[i] - ma, db = rb[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return sab / std::sqrt(saa * sbb);
}

CorrelationResult metric_correlation(
    const std::function<double(const std::vector<float>&,
                               const std::vector<float>&)>& metric,
    EnvKind env, const RenderConfig& render_cfg, int n_pairs, uint64_t seed) {
  if (n_pairs < 10) {
    throw std::invalid_argument("metric_correlation needs at least 10 pairs");
  }
  Rng rng(seed);
  CorrelationResult res;
  res.metric_values.reserve(n_pairs);
  res.true_distances.reserve(n_pairs);
  for (int i = 0; i < n_pairs; ++i) {
    EnvState s1 = random_state(env, render_cfg.distractor, rng);
    EnvState s2 = random_state(env, render_cfg.distractor, rng);
    res.metric_values.push_back(metric(render(s1, render_cfg), render(s2, render_cfg)));
    res.true_distances.push_back(true_distance(s1, s2));
  }
  res.spearman_rho = spearman(res.metric_values, res.true_distances, &res.degenerate);
  return res;
}

CorrelationResult metric_correlation(const Metric& metric, EnvKind env,
                                     const RenderConfig& render_cfg, int n_pairs,
                                     uint64_t seed) {
  return metric_correlation(
      [&](const std::vector<float>& a, const std::vector<float>& b) {
        return metric.loss(a, b);
      },
      env, render_cfg, n_pairs, seed);
}

DistanceTrace latent_distance_trace(const Metric& metric,
                                    const std::vector<std::vector<float>>& frames,
                                    const std::vector<float>& goal) {
  DistanceTrace trace;
  trace.values.reserve(frames.size());
  for (const auto& frame : frames) trace.values.push_back(metric.loss(frame, goal));
  if (trace.values.empty()) return trace;
  double base = trace.values.front();
  if (base < 1e-9) {
    trace.normalized = false;
    return trace;
  }
  for (double& v : trace.values) v /= base;
  return trace;
}

}  // namespace dpn

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpn/env.hpp"
#include "dpn/networks.hpp"

namespace dpn {

enum class MetricKind { kDpn, kInverse, kVae, kPixel };

MetricKind metric_kind_from_string(const std::string& s);
std::string to_string(MetricKind kind);

// Goal metric over image observations: embeds both images and sums the
// elementwise Huber of the embedding difference. The pixel kind uses the
// identity embedding.
class Metric {
 public:
  // Pixel metric; no parameters.
  explicit Metric(double delta = 0.85);
  // Learned metric backed by an embedding.
  Metric(MetricKind kind, double delta, ParamSet params, DpnConfig model,
         BaselineConfig baseline);

  MetricKind kind() const { return kind_; }
  double delta() const { return delta_; }

  std::vector<double> embed(const std::vector<float>& obs) const;
  double loss(const std::vector<float>& obs,
              const std::vector<float>& obs_goal) const;

  // r = -exp(loss); -1 exactly at the goal. Losses above kOverflowLoss clamp
  // to the sentinel and bump the counter.
  double reward(const std::vector<float>& obs,
                const std::vector<float>& obs_goal) const;

  static constexpr double kOverflowLoss = 700.0;
  static constexpr double kOverflowSentinel = -1e304;
  long overflow_count() const { return overflow_count_; }

 private:
  MetricKind kind_ = MetricKind::kPixel;
  double delta_ = 0.85;
  ParamSet params_;
  DpnConfig model_;
  BaselineConfig baseline_;
  mutable long overflow_count_ = 0;
};

struct CorrelationResult {
  double spearman_rho = 0.0;
  bool degenerate = false;  // all-equal ranks on either side
  std::vector<double> metric_values;
  std::vector<double> true_distances;
};

// Spearman rank correlation (average ranks on ties) between paired samples.
double spearman(const std::vector<double>& a, const std::vector<double>& b,
                bool* degenerate = nullptr);

// Samples random state pairs, renders them, and correlates the metric with
// the ground-truth distance. The metric is injectable so oracle metrics can
// exercise the harness.
CorrelationResult metric_correlation(
    const std::function<double(const std::vector<float>&,
                               const std::vector<float>&)>& metric,
    EnvKind env, const RenderConfig& render_cfg, int n_pairs, uint64_t seed);

CorrelationResult metric_correlation(const Metric& metric, EnvKind env,
                                     const RenderConfig& render_cfg, int n_pairs,
                                     uint64_t seed);

struct DistanceTrace {
  std::vector<double> values;  // per-timestep metric, normalized by t=0
  bool normalized = true;      // false when the t=0 value was below 1e-9
};

// Per-timestep metric against the goal frame, divided by its value at t=0.
DistanceTrace latent_distance_trace(const Metric& metric,
                                    const std::vector<std::vector<float>>& frames,
                                    const std::vector<float>& goal);

}  // namespace dpn

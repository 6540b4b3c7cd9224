#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpn/metric.hpp"
#include "dpn/sac.hpp"

using namespace dpn;

namespace {

EncoderConfig desk_encoder() {
  EncoderConfig enc;  // 16x16 defaults
  return enc;
}

std::vector<Metric> all_metrics(uint64_t seed) {
  DpnConfig model;
  model.enc = desk_encoder();
  BaselineConfig baseline;
  baseline.enc = desk_encoder();
  Rng rng(seed);
  std::vector<Metric> out;
  out.emplace_back(MetricKind::kDpn, 0.85, init_dpn_params(model, rng), model,
                   baseline);
  out.emplace_back(MetricKind::kInverse, 0.85, init_inverse_params(baseline, rng),
                   model, baseline);
  out.emplace_back(MetricKind::kVae, 0.85, init_vae_params(baseline, rng), model,
                   baseline);
  out.emplace_back(0.85);  // pixel
  return out;
}

std::vector<float> random_obs(Rng& rng) {
  std::vector<float> v(256);
  for (float& x : v) x = static_cast<float>(rng.uniform(0.0, 1.0));
  return v;
}

// O(n^2) counting ranks plus textbook Pearson, independent of the library
// implementation.
double spearman_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  auto rank_of = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (size_t j = 0; j < v.size(); ++j) {
        if (v[j] < v[i]) ++less;
        if (v[j] == v[i]) ++equal;
      }
      r[i] = less + 0.5 * (equal + 1);
    }
    return r;
  };
  std::vector<double> ra = rank_of(a), rb = rank_of(b);
  double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("goal metric: zero at the goal, symmetric, matches the scalar form") {
  Rng rng(1);
  for (Metric& m : all_metrics(2)) {
    for (int i = 0; i < 5; ++i) {
      auto o1 = random_obs(rng);
      auto o2 = random_obs(rng);
      CHECK(m.loss(o1, o1) == 0.0);
      CHECK(m.loss(o1, o2) == m.loss(o2, o1));
      CHECK(m.loss(o1, o2) >= 0.0);

      // Scalar recomputation from the embeddings.
      auto e1 = m.embed(o1);
      auto e2 = m.embed(o2);
      double expect = 0;
      for (size_t j = 0; j < e1.size(); ++j) {
        double x = e1[j] - e2[j];
        double ax = std::abs(x);
        expect += ax <= 0.85 ? 0.5 * x * x : 0.85 * ax - 0.5 * 0.85 * 0.85;
      }
      CHECK(std::abs(m.loss(o1, o2) - expect) <= 1e-12);
    }
  }
}

TEST_CASE("reward: exactly -1 at the goal, -e at unit loss, decreasing in loss") {
  Rng rng(3);
  for (Metric& m : all_metrics(4)) {
    for (int i = 0; i < 10; ++i) {
      auto o = random_obs(rng);
      CHECK(m.reward(o, o) == -1.0);
    }
  }

  // Pixel metric with a single differing pixel solving the linear branch
  // 0.85*x - 0.5*0.85^2 = 1.
  Metric pixel(0.85);
  std::vector<float> z(256, 0.0f), one(256, 0.0f);
  one[7] = static_cast<float>((1.0 + 0.5 * 0.85 * 0.85) / 0.85);
  CHECK(pixel.reward(z, one) == doctest::Approx(-std::exp(1.0)).epsilon(1e-6));

  // Strictly decreasing in the loss over a sweep of random pairs.
  std::vector<std::pair<double, double>> pairs;  // (loss, reward)
  for (int i = 0; i < 100; ++i) {
    auto o1 = random_obs(rng);
    auto o2 = random_obs(rng);
    pairs.emplace_back(pixel.loss(o1, o2), pixel.reward(o1, o2));
  }
  std::sort(pairs.begin(), pairs.end());
  for (size_t i = 1; i < pairs.size(); ++i) {
    if (pairs[i].first > pairs[i - 1].first) {
      CHECK(pairs[i].second < pairs[i - 1].second);
    }
  }
}

TEST_CASE("reward overflow clamps to the sentinel and is counted") {
  Metric pixel(0.85);
  // 3000 coordinates at distance 2 give a Huber sum far above the cap.
  std::vector<float> a(3000, 0.0f), b(3000, 2.0f);
  CHECK(pixel.loss(a, b) > Metric::kOverflowLoss);
  CHECK(pixel.overflow_count() == 0);
  CHECK(pixel.reward(a, b) == Metric::kOverflowSentinel);
  CHECK(pixel.overflow_count() == 1);
}

TEST_CASE("rank correlation matches the brute-force oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> a(20), b(20);
    for (double& v : a) v = rng.uniform(-3, 3);
    for (double& v : b) v = rng.uniform(-3, 3);
    a[3] = a[7];  // exercise tie handling
    CHECK(std::abs(spearman(a, b) - spearman_oracle(a, b)) <= 1e-12);
  }

  std::vector<double> inc{1, 2, 3, 4, 5}, dec{5, 4, 3, 2, 1};
  CHECK(spearman(inc, inc) == doctest::Approx(1.0));
  CHECK(spearman(inc, dec) == doctest::Approx(-1.0));

  bool degenerate = false;
  std::vector<double> flat{2, 2, 2, 2, 2};
  CHECK(spearman(flat, inc, &degenerate) == 0.0);  // sizes differ -> throws first
}

TEST_CASE("metric correlation harness with oracle metrics") {
  RenderConfig cfg;
  // The injected metric sees only renderings, so recover the state pair by
  // re-walking the generator: instead, use the blob centroid as a position
  // proxy; simpler and still exact for ranking: use true distance via a
  // side-channel table.
  // The library supports this directly by injecting a functor that computes
  // the pixel metric; for the oracle case we inject a functor derived from
  // the centroids of the two renderings.
  auto centroid = [&](const std::vector<float>& img) {
    double sum = 0, cx = 0, cy = 0;
    for (int r = 0; r < cfg.height; ++r) {
      for (int c = 0; c < cfg.width; ++c) {
        double v = img[r * cfg.width + c];
        sum += v;
        cx += v * c;
        cy += v * r;
      }
    }
    return std::pair{cx / sum, cy / sum};
  };
  auto true_like = [&](const std::vector<float>& a, const std::vector<float>& b) {
    auto ca = centroid(a), cb = centroid(b);
    return std::hypot(ca.first - cb.first, ca.second - cb.second);
  };
  CorrelationResult pos =
      metric_correlation(true_like, EnvKind::kPointMass, cfg, 200, 7);
  CHECK(pos.spearman_rho > 0.95);

  auto negated = [&](const std::vector<float>& a, const std::vector<float>& b) {
    return -true_like(a, b);
  };
  CorrelationResult neg =
      metric_correlation(negated, EnvKind::kPointMass, cfg, 200, 7);
  CHECK(neg.spearman_rho < -0.95);

  auto constant = [](const std::vector<float>&, const std::vector<float>&) {
    return 1.0;
  };
  CorrelationResult flat =
      metric_correlation(constant, EnvKind::kPointMass, cfg, 50, 7);
  CHECK(flat.degenerate);
  CHECK(flat.spearman_rho == 0.0);

  CHECK_THROWS_AS(metric_correlation(constant, EnvKind::kPointMass, cfg, 5, 7),
                  std::invalid_argument);
}

TEST_CASE("normalized distance trace") {
  Metric pixel(0.85);
  RenderConfig cfg;
  EnvState goal;
  goal.a = 0.8;
  goal.b = 0.0;
  EnvState s;
  s.a = -0.8;
  s.b = 0.0;

  std::vector<std::vector<float>> frames;
  std::vector<double> true_d;
  for (int t = 0; t < 12; ++t) {
    frames.push_back(render(s, cfg));
    true_d.push_back(true_distance(s, goal));
    s = pointmass_step(s, {1.0, 0.0});  // straight line toward the goal
  }
  // The straight-line trajectory has non-increasing true distance.
  for (size_t i = 1; i < true_d.size(); ++i) CHECK(true_d[i] <= true_d[i - 1]);

  DistanceTrace trace = latent_distance_trace(pixel, frames, render(goal, cfg));
  CHECK(trace.normalized);
  CHECK(trace.values.front() == 1.0);

  // A constant trajectory yields a constant trace.
  std::vector<std::vector<float>> constant(5, frames[0]);
  DistanceTrace flat = latent_distance_trace(pixel, constant, render(goal, cfg));
  for (double v : flat.values) CHECK(v == 1.0);

  // Goal-started trajectory cannot be normalized.
  std::vector<std::vector<float>> at_goal(3, render(goal, cfg));
  DistanceTrace un = latent_distance_trace(pixel, at_goal, render(goal, cfg));
  CHECK_FALSE(un.normalized);
  for (double v : un.values) CHECK(v == 0.0);
}

TEST_CASE("replay buffer keeps transitions intact") {
  RlConfig cfg;
  cfg.hidden = 8;
  cfg.batch = 2;
  Rng rng(11);
  SacLearner learner(2, 2, cfg, rng);
  Transition t;
  t.state = {0.25, -0.5};
  t.action = {0.1, 0.9};
  t.reward = -2.5;
  t.next_state = {0.3, -0.4};
  t.done = true;
  learner.push(t);
  REQUIRE(learner.buffer_size() == 1);
  const Transition& back = learner.transition(0);
  CHECK(back.state == t.state);
  CHECK(back.action == t.action);
  CHECK(back.reward == t.reward);
  CHECK(back.next_state == t.next_state);
  CHECK(back.done == t.done);
}

TEST_CASE("polyak mixing endpoints") {
  RlConfig cfg;
  cfg.hidden = 8;
  Rng rng(12);
  SacLearner learner(2, 2, cfg, rng);

  // Drive the online critics away from the targets with a few updates.
  Rng step_rng(13);
  for (int i = 0; i < 4; ++i) {
    Transition t;
    t.state = {step_rng.uniform(-1, 1), step_rng.uniform(-1, 1)};
    t.action = {step_rng.uniform(-1, 1), step_rng.uniform(-1, 1)};
    t.reward = step_rng.uniform(-2, 0);
    t.next_state = {step_rng.uniform(-1, 1), step_rng.uniform(-1, 1)};
    learner.push(t);
  }
  std::vector<double> s{0.2, 0.2}, a{0.1, -0.1};
  for (int i = 0; i < 50; ++i) learner.update(step_rng);
  double before = learner.q_value(s, a);

  // Mixing factor 0 copies the online weights into the targets: afterwards a
  // factor-1 mix (keep everything) must leave the value unchanged.
  learner.polyak_update(0.0);
  learner.polyak_update(1.0);
  double after = learner.q_value(s, a);
  CHECK(before == after);
}

TEST_CASE("critic regresses to the reward on a one-step bandit") {
  RlConfig cfg;
  cfg.hidden = 16;
  cfg.batch = 8;
  cfg.lr = 3e-3;
  cfg.normalize_rewards = false;
  Rng rng(14);
  SacLearner learner(2, 2, cfg, rng);
  Transition t;
  t.state = {0.0, 0.0};
  t.action = {0.3, -0.2};
  t.reward = -2.5;
  t.next_state = {0.0, 0.0};
  t.done = true;  // no bootstrap: the target is the reward itself
  learner.push(t);
  Rng step_rng(15);
  for (int i = 0; i < 5000; ++i) learner.update(step_rng);
  CHECK(learner.q_value(t.state, t.action) == doctest::Approx(-2.5).epsilon(4e-3));
}

TEST_CASE("scripted controller validates the evaluation harness") {
  EnvState goal;
  goal.a = 0.5;
  goal.b = -0.3;
  PolicyFn pi = scripted_controller(EnvKind::kPointMass, goal);
  std::vector<double> finals =
      evaluate_policy(pi, EnvKind::kPointMass, goal, 20, 20, 16);
  REQUIRE(finals.size() == 20);
  std::vector<double> sorted = finals;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted[sorted.size() / 2] < 0.05);
  for (double d : finals) CHECK(d >= 0.0);

  // Reacher variant reaches its goal angles too.
  EnvState rgoal;
  rgoal.kind = EnvKind::kReacher;
  rgoal.a = 1.0;
  rgoal.b = 0.5;
  PolicyFn rpi = scripted_controller(EnvKind::kReacher, rgoal);
  std::vector<double> rfinals =
      evaluate_policy(rpi, EnvKind::kReacher, rgoal, 10, 40, 17);
  std::sort(rfinals.begin(), rfinals.end());
  CHECK(rfinals[rfinals.size() / 2] < 0.05);
}

TEST_CASE("actor-critic training is reproducible") {
  RlConfig cfg;
  cfg.hidden = 8;
  cfg.batch = 4;
  cfg.episodes = 3;
  cfg.horizon = 5;
  cfg.warmup_steps = 5;
  cfg.seed = 21;
  RenderConfig render_cfg;
  EnvState goal;
  goal.a = 0.4;
  Metric pixel(0.85);
  SacResult a = sac_train(EnvKind::kPointMass, goal, pixel, render_cfg, cfg);
  SacResult b = sac_train(EnvKind::kPointMass, goal, pixel, render_cfg, cfg);
  REQUIRE(a.curve.size() == b.curve.size());
  for (size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].reward_sum == b.curve[i].reward_sum);
    CHECK(a.curve[i].final_true_distance == b.curve[i].final_true_distance);
  }
  for (size_t i = 0; i < a.policy_params.items().size(); ++i) {
    CHECK(a.policy_params.items()[i].value == b.policy_params.items()[i].value);
  }
}

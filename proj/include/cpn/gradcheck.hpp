#pragma once

// Finite-difference audit of every hand-derived gradient: the gradcore
// primitives, the pre-training batch loss, and the episode query loss under
// each parameterized variant.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpn/gradcore.hpp"
#include "cpn/model.hpp"
#include "cpn/rng.hpp"
#include "cpn/training.hpp"

namespace cpn {

struct GradCheckEntry {
  std::string name;
  std::size_t points = 0;
  double max_rel_err = 0.0;
};

struct GradSuiteReport {
  std::vector<GradCheckEntry> entries;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_err);
    return w;
  }
  bool passed(double tol = 1e-6) const { return worst() <= tol; }
};

namespace gradcheck_detail {

inline Vec gaussian_vec(std::size_t n, RngStream& rng, double sd = 1.0) {
  Vec v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

/// Sparse non-negative attribute vector with at least one positive entry.
inline Vec attribute_vec(std::size_t m, RngStream& rng) {
  Vec z(m);
  for (double& x : z) x = rng.bernoulli(0.5) ? rng.uniform(0.5, 1.5) : 0.0;
  z[rng.uniform_below(m)] = rng.uniform(0.5, 1.5);
  return z;
}

/// Flattens the parameter groups an episode loss depends on:
/// R, w, b, tau2, then the concat head when present.
inline std::vector<double> pack(const CpnParams& p) {
  std::vector<double> x(p.protos.R.flat().begin(), p.protos.R.flat().end());
  x.insert(x.end(), p.gen.w.begin(), p.gen.w.end());
  x.push_back(p.gen.b);
  x.push_back(p.temps.tau2);
  if (p.concat_head) {
    x.insert(x.end(), p.concat_head->W.flat().begin(), p.concat_head->W.flat().end());
    x.insert(x.end(), p.concat_head->b.begin(), p.concat_head->b.end());
  }
  return x;
}

inline std::vector<double> pack(const CpnGrads& g) {
  std::vector<double> x(g.R.flat().begin(), g.R.flat().end());
  x.insert(x.end(), g.w.begin(), g.w.end());
  x.push_back(g.b);
  x.push_back(g.tau2);
  if (g.concat_head) {
    x.insert(x.end(), g.concat_head->W.flat().begin(), g.concat_head->W.flat().end());
    x.insert(x.end(), g.concat_head->b.begin(), g.concat_head->b.end());
  }
  return x;
}

inline CpnParams unpack(const CpnParams& shape, std::span<const double> x) {
  CpnParams p = shape;
  std::size_t at = 0;
  auto take = [&](std::span<double> dst) {
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(at), x.begin() + static_cast<std::ptrdiff_t>(at + dst.size()),
              dst.begin());
    at += dst.size();
  };
  take(p.protos.R.flat());
  take(p.gen.w.span());
  p.gen.b = x[at++];
  p.temps.tau2 = x[at++];
  if (p.concat_head) {
    take(p.concat_head->W.flat());
    take(p.concat_head->b.span());
  }
  return p;
}

struct RandomEpisode {
  CpnParams params;
  LabeledTask task;
};

inline RandomEpisode random_episode(RngStream& rng, GenInputMode mode, bool concat_head) {
  const std::size_t m = 3 + rng.uniform_below(4);
  const std::size_t d = 3 + rng.uniform_below(4);
  const std::size_t n = 2 + rng.uniform_below(3);
  const std::size_t k = 1 + rng.uniform_below(3);
  const std::size_t q = 1 + rng.uniform_below(3);
  RandomEpisode r;
  r.params = init_params(m, d, mode, rng, concat_head);
  r.params.gen.w = gaussian_vec(r.params.gen.w.size(), rng, 0.5);
  r.params.gen.b = rng.normal();
  r.params.temps.tau2 = rng.uniform(1.0, 10.0);
  if (concat_head) r.params.concat_head->b = gaussian_vec(d, rng, 0.1);
  auto& t = r.task.task;
  for (std::size_t s = 0; s < n; ++s) {
    t.classes.push_back(static_cast<ClassId>(s));
    t.attributes.push_back(attribute_vec(m, rng));
    t.support.emplace_back();
    for (std::size_t i = 0; i < k; ++i) t.support.back().push_back(gaussian_vec(d, rng));
    for (std::size_t i = 0; i < q; ++i) {
      t.queries.push_back(gaussian_vec(d, rng));
      r.task.query_labels.push_back(s);
    }
  }
  return r;
}

}  // namespace gradcheck_detail

/// Runs every check at `points` seeded random points; each entry reports the
/// worst relative error seen.
inline GradSuiteReport run_grad_suite(std::uint64_t seed, std::size_t points = 100, double step = 1e-5) {
  using namespace gradcheck_detail;
  GradSuiteReport report;
  auto run = [&](std::string name, std::uint64_t stream, auto&& one_point) {
    RngStream rng(seed, stream);
    GradCheckEntry e{std::move(name), points, 0.0};
    for (std::size_t i = 0; i < points; ++i) e.max_rel_err = std::max(e.max_rel_err, one_point(rng));
    report.entries.push_back(std::move(e));
  };

  run("l2_normalize jacobian", 1, [&](RngStream& rng) {
    const Vec v = gaussian_vec(2 + rng.uniform_below(9), rng);
    return jacobian_check([](std::span<const double> x) { return l2_normalize(x); }, v, l2_normalize_jacobian(v), step);
  });

  run("l2_normalize vjp", 2, [&](RngStream& rng) {
    const std::size_t n = 2 + rng.uniform_below(9);
    const Vec v = gaussian_vec(n, rng);
    const Vec u = gaussian_vec(n, rng);
    return grad_check([&](std::span<const double> x) { return dot(u, l2_normalize(x)); }, v, l2_normalize_vjp(v, u),
                      step);
  });

  run("weighted_sum", 3, [&](RngStream& rng) {
    const std::size_t m = 1 + rng.uniform_below(6);
    const std::size_t d = 1 + rng.uniform_below(6);
    const Vec z = gaussian_vec(m, rng);
    Mat rows(m, d);
    for (double& x : rows.flat()) x = rng.normal();
    const Vec u = gaussian_vec(d, rng);
    const auto g = weighted_sum_vjp(z, rows, u);
    std::vector<double> point(z.begin(), z.end());
    point.insert(point.end(), rows.flat().begin(), rows.flat().end());
    std::vector<double> analytic(g.dz.begin(), g.dz.end());
    analytic.insert(analytic.end(), g.drows.flat().begin(), g.drows.flat().end());
    return grad_check(
        [&](std::span<const double> x) {
          Mat r(m, d, std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(m), x.end()));
          return dot(u, weighted_sum(x.first(m), r));
        },
        point, analytic, step);
  });

  run("cosine_sim", 4, [&](RngStream& rng) {
    const std::size_t n = 2 + rng.uniform_below(9);
    const Vec a = gaussian_vec(n, rng);
    const Vec b = gaussian_vec(n, rng);
    const auto g = cosine_sim_grad(a, b);
    return grad_check([&](std::span<const double> x) { return cosine_sim(x.first(n), x.subspan(n)); },
                      concat(a, b), concat(g.grads[0], g.grads[1]), step);
  });

  run("sigmoid", 5, [&](RngStream& rng) {
    const Vec x{rng.uniform(-20.0, 20.0)};
    const Vec g{sigmoid_grad(x[0])};
    return grad_check([](std::span<const double> p) { return sigmoid(p[0]); }, x, g, step);
  });

  run("softmax_xent", 6, [&](RngStream& rng) {
    const std::size_t n = 2 + rng.uniform_below(9);
    const Vec logits = gaussian_vec(n, rng, 3.0);
    const std::size_t target = rng.uniform_below(n);
    const auto r = softmax_xent(logits, target);
    return grad_check([&](std::span<const double> x) { return softmax_xent(x, target).value; }, logits, r.grads[0],
                      step);
  });

  run("pretrain batch loss (R, tau1)", 7, [&](RngStream& rng) {
    const std::size_t m = 3 + rng.uniform_below(4);
    const std::size_t d = 3 + rng.uniform_below(4);
    const std::size_t c = 2 + rng.uniform_below(4);
    const std::size_t b = 1 + rng.uniform_below(6);
    Mat R = random_component_prototypes(m, d, rng);
    const double tau1 = rng.uniform(1.0, 10.0);
    std::vector<Vec> attrs;
    for (std::size_t i = 0; i < c; ++i) attrs.push_back(attribute_vec(m, rng));
    std::vector<Vec> feats;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < b; ++i) {
      feats.push_back(gaussian_vec(d, rng));
      labels.push_back(rng.uniform_below(c));
    }
    std::vector<std::span<const double>> views(feats.begin(), feats.end());
    const auto bl = base_classification_loss(R, tau1, attrs, views, labels);
    std::vector<double> point(R.flat().begin(), R.flat().end());
    point.push_back(tau1);
    std::vector<double> analytic(bl.dR.flat().begin(), bl.dR.flat().end());
    analytic.push_back(bl.dtau1);
    return grad_check(
        [&](std::span<const double> x) {
          Mat r(m, d, std::vector<double>(x.begin(), x.end() - 1));
          return base_classification_loss(r, x.back(), attrs, views, labels).loss;
        },
        point, analytic, step);
  });

  struct EpisodeCase {
    const char* name;
    Variant variant;
    GenInputMode mode;
    bool head;
  };
  const EpisodeCase cases[] = {
      {"episode loss ADAPTIVE/comp (R, w, b, tau2)", Variant::ADAPTIVE, GenInputMode::comp, false},
      {"episode loss ADAPTIVE/vis (R, w, b, tau2)", Variant::ADAPTIVE, GenInputMode::vis, false},
      {"episode loss ADAPTIVE/concat (R, w, b, tau2)", Variant::ADAPTIVE, GenInputMode::concat, false},
      {"episode loss CONCAT (R, head, tau2)", Variant::CONCAT, GenInputMode::comp, true},
      {"episode loss LCP (R, tau2)", Variant::LCP, GenInputMode::comp, false},
      {"episode loss VP (tau2)", Variant::VP, GenInputMode::comp, false},
  };
  std::uint64_t stream = 100;
  for (const auto& c : cases) {
    run(c.name, stream++, [&](RngStream& rng) {
      const auto ep = random_episode(rng, c.mode, c.head);
      const auto el = episode_query_loss(ep.params, c.variant, ep.task);
      return grad_check(
          [&](std::span<const double> x) { return episode_query_loss(unpack(ep.params, x), c.variant, ep.task).loss; },
          pack(ep.params), pack(el.grads), step);
    });
  }
  return report;
}

}  // namespace cpn

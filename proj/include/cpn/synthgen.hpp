#pragma once

// Synthetic attribute-grounded datasets with known geometry.
//
// Unit "true" component directions R_true are drawn uniformly on the sphere.
// Each class gets sparse non-negative scores z (Bernoulli(sparsity) times
// Uniform(0.5, 1.5)) and a direction mu = normalize(sum_j z_j R_true_j);
// classes are redrawn until every pair of directions is at least min_angle
// apart. Records are mu + eps with eps ~ N(0, sigma^2 / d * I), so ||eps|| is
// about sigma whatever d is.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpn/checkpoint.hpp"
#include "cpn/dataio.hpp"
#include "cpn/error.hpp"
#include "cpn/eval.hpp"
#include "cpn/gradcore.hpp"
#include "cpn/model.hpp"
#include "cpn/rng.hpp"

namespace cpn {

struct SynthConfig {
  std::size_t num_attributes = 20;  // M
  std::size_t dim = 32;             // d
  std::size_t n_base = 40;
  std::size_t n_val = 10;
  std::size_t n_novel = 10;
  std::size_t per_class = 50;
  double sigma = 0.05;
  double sparsity = 0.25;
  double min_angle = 0.5;  // radians
  std::uint64_t seed = 0;

  std::size_t num_classes() const noexcept { return n_base + n_val + n_novel; }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw Error(ErrorCode::InvalidConfig, field + " " + why);
    };
    if (num_attributes < 1) fail("M", "must be >= 1");
    if (dim < 2) fail("d", "must be >= 2");
    if (n_base < 1) fail("n_base", "must be >= 1");
    if (n_val < 1) fail("n_val", "must be >= 1");
    if (n_novel < 1) fail("n_novel", "must be >= 1");
    if (per_class < 1) fail("per_class", "must be >= 1");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) fail("sigma", "must be >= 0");
    if (!(sparsity > 0.0 && sparsity <= 1.0)) fail("sparsity", "must lie in (0, 1]");
    if (!(min_angle >= 0.0) || !std::isfinite(min_angle)) fail("min_angle", "must be >= 0");
  }
};

struct GroundTruth {
  Mat R_true;                      // unit rows
  std::map<ClassId, Vec> z_true;   // per class
  std::map<ClassId, Vec> mu_true;  // per class, unit
};

inline constexpr std::size_t kRejectionBudget = 10'000;
inline constexpr std::uint64_t kGeometryStream = 1;
inline constexpr std::uint64_t kNoiseStream = 2;

inline double angle_between(std::span<const double> a, std::span<const double> b) {
  return std::acos(std::clamp(cosine_sim(a, b), -1.0, 1.0));
}

struct SynthData {
  DatasetBundle bundle;
  GroundTruth truth;
};

inline SynthData generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t m = cfg.num_attributes;
  const std::size_t d = cfg.dim;
  RngStream geo(cfg.seed, kGeometryStream);

  GroundTruth truth;
  truth.R_true = Mat(m, d);
  for (std::size_t j = 0; j < m; ++j) {
    auto row = truth.R_true.row(j);
    double n = 0.0;
    while (n < kNormFloor) {
      for (double& x : row) x = geo.normal();
      n = norm(row);
    }
    for (double& x : row) x /= n;
  }

  std::size_t rejections = 0;
  auto reject = [&] {
    if (++rejections > kRejectionBudget) {
      throw Error(ErrorCode::RejectionBudgetExceeded,
                  "could not place " + std::to_string(cfg.num_classes()) + " classes at min_angle " +
                      std::to_string(cfg.min_angle));
    }
  };
  for (ClassId c = 0; c < cfg.num_classes(); ++c) {
    while (true) {
      Vec z(m);
      for (std::size_t j = 0; j < m; ++j) z[j] = geo.bernoulli(cfg.sparsity) ? geo.uniform(0.5, 1.5) : 0.0;
      if (std::all_of(z.begin(), z.end(), [](double x) { return x == 0.0; })) {
        reject();
        continue;
      }
      const Vec raw = weighted_sum(z, truth.R_true);
      if (norm(raw) < kNormFloor) {
        reject();
        continue;
      }
      Vec mu = l2_normalize(raw);
      const bool separated = std::all_of(truth.mu_true.begin(), truth.mu_true.end(),
                                         [&](const auto& kv) { return angle_between(mu, kv.second) >= cfg.min_angle; });
      if (!separated) {
        reject();
        continue;
      }
      truth.z_true.emplace(c, std::move(z));
      truth.mu_true.emplace(c, std::move(mu));
      break;
    }
  }

  RngStream noise(cfg.seed, kNoiseStream);
  const double coord_sd = cfg.sigma / std::sqrt(static_cast<double>(d));
  EmbeddingTable emb{Mat(cfg.num_classes() * cfg.per_class, d), {}};
  std::size_t row = 0;
  for (const auto& [c, mu] : truth.mu_true) {
    for (std::size_t i = 0; i < cfg.per_class; ++i, ++row) {
      for (std::size_t k = 0; k < d; ++k) emb.features(row, k) = mu[k] + coord_sd * noise.normal();
      emb.labels.push_back(c);
    }
  }

  AttributeTable attrs{m, truth.z_true};
  std::vector<ClassId> base, val, novel;
  for (ClassId c = 0; c < cfg.num_classes(); ++c) {
    if (c < cfg.n_base) {
      base.push_back(c);
    } else if (c < cfg.n_base + cfg.n_val) {
      val.push_back(c);
    } else {
      novel.push_back(c);
    }
  }
  auto bundle = validate_bundle(std::move(emb), std::move(attrs), make_split(base, val, novel));
  return SynthData{std::move(bundle), std::move(truth)};
}

/// Ground truth stored as a checkpoint whose R section holds R_true.
inline void save_ground_truth(const std::filesystem::path& path, const GroundTruth& truth) {
  CpnParams p;
  p.protos.R = truth.R_true;
  p.gen.w = Vec(truth.R_true.cols());
  save_checkpoint(path, p, {{"kind", "ground_truth"}});
}

/// Rebuilds class directions from a stored R_true and the bundle's attributes.
inline GroundTruth load_ground_truth(const std::filesystem::path& path, const AttributeTable& attrs) {
  const Checkpoint ck = load_checkpoint(path);
  GroundTruth truth;
  truth.R_true = ck.params.protos.R;
  for (const auto& [c, z] : attrs.vectors) {
    truth.z_true.emplace(c, z);
    truth.mu_true.emplace(c, l2_normalize(weighted_sum(z, truth.R_true)));
  }
  return truth;
}

/// Accuracy of classifying each query by cosine to the true direction of the
/// episode's classes. Upper reference for learned compositional prototypes.
inline EvalReport oracle_accuracy(const DatasetBundle& bundle, const GroundTruth& truth,
                                  std::span<const ClassId> pool, const EpisodeSpec& spec, std::size_t n_episodes,
                                  std::uint64_t seed, unsigned threads = 1) {
  return evaluate_episodes(bundle, pool, spec, n_episodes, seed, threads, "ORACLE", [&](const Episode& ep, std::size_t) {
    std::size_t hit = 0;
    for (const Shot& q : ep.query) {
      const auto f = bundle.embeddings().feature(q.record);
      std::size_t best = 0;
      double best_cos = -2.0;
      for (std::size_t s = 0; s < ep.classes.size(); ++s) {
        const double c = cosine_sim(f, truth.mu_true.at(ep.classes[s]));
        if (c > best_cos) {
          best_cos = c;
          best = s;
        }
      }
      hit += ep.classes[best] == q.label ? 1 : 0;
    }
    return 100.0 * static_cast<double>(hit) / static_cast<double>(ep.query.size());
  });
}

}  // namespace cpn

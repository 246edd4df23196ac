#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "cpn/model.hpp"
#include "cpn/training.hpp"
#include "test_util.hpp"

using namespace cpn;
using cpn::testing::expect_code;

namespace {

Vec random_vec(RngStream& rng, std::size_t n, double sd = 1.0) {
  Vec v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

Vec random_attrs(RngStream& rng, std::size_t m) {
  Vec z(m);
  for (double& x : z) x = rng.bernoulli(0.4) ? rng.uniform(0.1, 3.0) : 0.0;
  z[rng.uniform_below(m)] = rng.uniform(0.5, 1.5);
  return z;
}

// Classes with parallel attribute vectors share a compositional prototype
// exactly, so their LCP scores tie and any rescaling decides the tie by
// rounding. Real classes have distinct signatures; draw them that way.
Vec distinct_attrs(RngStream& rng, std::size_t m, const std::vector<Vec>& taken) {
  for (;;) {
    Vec z = random_attrs(rng, m);
    bool parallel = false;
    for (const Vec& t : taken) parallel = parallel || dot(z, t) >= (1.0 - 1e-9) * norm(z) * norm(t);
    if (!parallel) return z;
  }
}

double sum(const Vec& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

struct RandomCase {
  CpnParams params;
  LabeledTask lt;
};

RandomCase random_case(RngStream& rng, GenInputMode mode = GenInputMode::comp, bool head = false) {
  const std::size_t m = 2 + rng.uniform_below(8), d = 2 + rng.uniform_below(8);
  const std::size_t n = 2 + rng.uniform_below(5), k = 1 + rng.uniform_below(4), q = 1 + rng.uniform_below(4);
  RandomCase c;
  c.params = init_params(m, d, mode, rng, head);
  c.params.gen.w = random_vec(rng, c.params.gen.w.size());
  c.params.gen.b = rng.normal(0.0, 2.0);
  c.params.temps.tau2 = rng.uniform(0.5, 20.0);
  for (std::size_t s = 0; s < n; ++s) {
    c.lt.task.classes.push_back(static_cast<ClassId>(100 + s));
    c.lt.task.attributes.push_back(distinct_attrs(rng, m, c.lt.task.attributes));
    c.lt.task.support.emplace_back();
    for (std::size_t i = 0; i < k; ++i) c.lt.task.support.back().push_back(random_vec(rng, d));
    for (std::size_t i = 0; i < q; ++i) {
      c.lt.task.queries.push_back(random_vec(rng, d));
      c.lt.query_labels.push_back(s);
    }
  }
  return c;
}

// Plain prototypical network: mean of support, argmax cosine, lowest index on ties.
std::vector<std::size_t> protonet_oracle(const EpisodeTask& t) {
  std::vector<std::vector<double>> protos;
  for (const auto& shots : t.support) {
    std::vector<double> m(shots[0].size(), 0.0);
    for (const auto& f : shots) {
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += f[i];
    }
    for (double& x : m) x /= static_cast<double>(shots.size());
    protos.push_back(m);
  }
  std::vector<std::size_t> out;
  for (const auto& q : t.queries) {
    std::size_t best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < protos.size(); ++s) {
      double qp = 0, qq = 0, pp = 0;
      for (std::size_t i = 0; i < q.size(); ++i) {
        qp += q[i] * protos[s][i];
        qq += q[i] * q[i];
        pp += protos[s][i] * protos[s][i];
      }
      const double c = qp / (std::sqrt(qq) * std::sqrt(pp));
      if (c > best_cos) {
        best_cos = c;
        best = s;
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST(ClassPrototype, Examples) {
  const ComponentPrototypes p{Mat::from_rows({{3, 4}, {0, 2}})};
  const Vec a = class_prototype(p, Vec{1, 0});
  EXPECT_NEAR(a[0], 0.6, 1e-15);
  EXPECT_NEAR(a[1], 0.8, 1e-15);
  const Vec b = class_prototype(p, Vec{1, 2});
  EXPECT_NEAR(b[0], 0.6, 1e-15);
  EXPECT_NEAR(b[1], 2.8, 1e-15);
  const Vec u = l2_normalize(class_prototype(p, Vec{7, 14}));
  const Vec v = l2_normalize(b);
  EXPECT_NEAR(u[0], v[0], 1e-12);
  EXPECT_NEAR(u[1], v[1], 1e-12);
}

TEST(ClassPrototype, Errors) {
  const ComponentPrototypes p{Mat::from_rows({{3, 4}, {0, 0}})};
  expect_code(ErrorCode::NearZeroNorm, [&] { class_prototype(p, Vec{1, 1}); });
  const ComponentPrototypes ok{Mat::from_rows({{3, 4}, {0, 2}})};
  expect_code(ErrorCode::ZeroAttributeVector, [&] { class_prototype(ok, Vec{0, 0}); });
  expect_code(ErrorCode::DimMismatch, [&] { class_prototype(ok, Vec{1, 0, 1}); });
}

TEST(BaseClassProbs, TwoClassClosedForm) {
  const std::vector<Vec> protos{Vec{1, 0}, Vec{0, 1}};
  const Vec p = base_class_probs(Vec{1, 0}, protos, 10.0);
  const double e = std::exp(10.0);
  EXPECT_NEAR(p[0], e / (e + 1), 1e-15);
  EXPECT_NEAR(p[1], 1 / (e + 1), 1e-15);
  EXPECT_NEAR(p[0], 0.9999546, 1e-7);
}

TEST(BaseClassProbs, IdenticalPrototypesAndZeroTemperatureAreUniform) {
  const std::vector<Vec> same{Vec{1, 2}, Vec{1, 2}, Vec{1, 2}};
  for (double x : base_class_probs(Vec{5, -1}, same, 10.0)) EXPECT_NEAR(x, 1.0 / 3, 1e-15);
  const std::vector<Vec> diff{Vec{1, 0}, Vec{0, 1}, Vec{-1, 1}, Vec{2, 2}};
  for (double x : base_class_probs(Vec{0.3, 0.9}, diff, 0.0)) EXPECT_EQ(x, 0.25);
}

TEST(BaseClassProbs, NearZeroNorm) {
  const std::vector<Vec> protos{Vec{1, 0}, Vec{0, 0}};
  expect_code(ErrorCode::NearZeroNorm, [&] { base_class_probs(Vec{1, 0}, protos, 1.0); });
}

TEST(VisualPrototype, Examples) {
  const std::vector<Vec> f{Vec{1, 0}, Vec{0, 2}};
  const Vec m = visual_prototype(f);
  EXPECT_EQ(m[0], 0.5);
  EXPECT_EQ(m[1], 1.0);
  const std::vector<Vec> one{Vec{0.3, -7}};
  EXPECT_EQ(visual_prototype(one), one[0]);
  expect_code(ErrorCode::EmptySupport, [] { visual_prototype(std::vector<Vec>{}); });
}

TEST(VisualPrototype, PermutationInvariant) {
  RngStream rng(21, 0);
  for (int t = 0; t < 200; ++t) {
    std::vector<Vec> f;
    const std::size_t k = 1 + rng.uniform_below(8);
    for (std::size_t i = 0; i < k; ++i) f.push_back(random_vec(rng, 5));
    const Vec ref = visual_prototype(f);
    for (std::size_t i = k; i > 1; --i) std::swap(f[i - 1], f[rng.uniform_below(i)]);
    const Vec perm = visual_prototype(f);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(perm[i], ref[i], 1e-14);
  }
}

TEST(FusionWeight, Examples) {
  const Vec a = l2_normalize(Vec{1, 2, 3});
  const Vec b = l2_normalize(Vec{-1, 0, 1});
  EXPECT_EQ(fusion_weight(WeightGenerator{Vec(3), 0.0}, GenInputMode::comp, a, b), 0.5);
  EXPECT_EQ(fusion_weight(WeightGenerator{Vec(6), 0.0}, GenInputMode::concat, a, b), 0.5);
  const double hi = fusion_weight(WeightGenerator{Vec(3), 1000.0}, GenInputMode::vis, a, b);
  EXPECT_LT(hi, 1.0);
  EXPECT_NEAR(hi, 1.0, 1e-12);
  const double lo = fusion_weight(WeightGenerator{Vec(3), -1000.0}, GenInputMode::vis, a, b);
  EXPECT_GT(lo, 0.0);
  expect_code(ErrorCode::DimMismatch,
              [&] { fusion_weight(WeightGenerator{Vec(3), 0.0}, GenInputMode::concat, a, b); });
}

TEST(FusionWeight, ModeSelectsInput) {
  const Vec comp{1, 0};
  const Vec vis{0, 1};
  const WeightGenerator g{Vec{2, 0}, 0.0};
  EXPECT_NEAR(fusion_weight(g, GenInputMode::comp, comp, vis), sigmoid(2.0), 1e-15);
  EXPECT_NEAR(fusion_weight(g, GenInputMode::vis, comp, vis), 0.5, 1e-15);
  // concat order is [vis, comp]
  const WeightGenerator gc{Vec{3, 0, 0, 0}, 0.0};
  EXPECT_NEAR(fusion_weight(gc, GenInputMode::concat, comp, vis), 0.5, 1e-15);
  const WeightGenerator gc2{Vec{0, 3, 0, 0}, 0.0};
  EXPECT_NEAR(fusion_weight(gc2, GenInputMode::concat, comp, vis), sigmoid(3.0), 1e-15);
}

TEST(Fuse, Examples) {
  const Vec e1{1, 0}, e2{0, 1};
  const Vec h = fuse(0.5, e1, e2);
  EXPECT_EQ(h[0], 0.5);
  EXPECT_EQ(h[1], 0.5);
  EXPECT_NEAR(norm(h), std::sqrt(0.5), 1e-15);
  EXPECT_EQ(fuse(0.0, e1, e2), e2);
  EXPECT_EQ(fuse(1.0, e1, e2), e1);
  const Vec u = l2_normalize(Vec{1, 2, 2});
  for (double lam : {0.0, 0.1, 0.5, 0.77, 1.0}) EXPECT_NEAR(norm(fuse(lam, u, u)), 1.0, 1e-12);
}

TEST(QueryProbs, Examples) {
  const std::vector<Vec> same{Vec{0.6, 0.8}, Vec{0.6, 0.8}};
  for (double x : query_probs(Vec{1, 0}, same, 10.0)) EXPECT_EQ(x, 0.5);
  const std::vector<Vec> ortho{Vec{1, 0}, Vec{0, 1}};
  const Vec p = query_probs(Vec{1, 0}, ortho, 10.0);
  EXPECT_NEAR(p[0], 0.9999546, 1e-7);
  EXPECT_NEAR(p[1], 0.0000454, 1e-7);
}

TEST(QueryProbs, InvariantToQueryScale) {
  RngStream rng(22, 0);
  for (int t = 0; t < 500; ++t) {
    std::vector<Vec> protos;
    for (int s = 0; s < 5; ++s) protos.push_back(random_vec(rng, 6));
    const Vec q = random_vec(rng, 6);
    const Vec p = query_probs(q, protos, 10.0);
    const Vec ps = query_probs(scaled(q, std::exp(rng.uniform(-8, 8))), protos, 10.0);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], ps[i], 1e-12);
  }
}

TEST(Probabilities, SumToOneAndStrictlyPositive) {
  RngStream rng(23, 0);
  for (int t = 0; t < 10000; ++t) {
    const std::size_t c = 2 + rng.uniform_below(10), d = 1 + rng.uniform_below(10);
    std::vector<Vec> protos;
    for (std::size_t s = 0; s < c; ++s) protos.push_back(random_vec(rng, d));
    const Vec f = random_vec(rng, d);
    const double tau = rng.uniform(-30, 30);
    const Vec p1 = base_class_probs(f, protos, tau);
    const Vec p2 = query_probs(f, protos, tau);
    EXPECT_NEAR(sum(p1), 1.0, 1e-12);
    EXPECT_NEAR(sum(p2), 1.0, 1e-12);
    for (double x : p1) EXPECT_GT(x, 0.0);
  }
}

TEST(Fusion, WeightInOpenIntervalAndFusedNormBounded) {
  RngStream rng(24, 0);
  for (int t = 0; t < 10000; ++t) {
    const std::size_t d = 1 + rng.uniform_below(10);
    const auto mode = static_cast<GenInputMode>(rng.uniform_below(3));
    const Vec a = l2_normalize(random_vec(rng, d));
    const Vec b = l2_normalize(random_vec(rng, d));
    const WeightGenerator g{random_vec(rng, gen_input_size(mode, d), std::exp(rng.uniform(-3, 7))),
                            rng.normal(0, 300)};
    const double lam = fusion_weight(g, mode, a, b);
    EXPECT_GT(lam, 0.0);
    EXPECT_LT(lam, 1.0);
    EXPECT_LE(norm(fuse(lam, a, b)), 1.0 + 1e-12);
  }
}

TEST(EpisodePrototypes, VariantDefinitions) {
  RngStream rng(25, 0);
  for (int t = 0; t < 200; ++t) {
    const auto c = random_case(rng, GenInputMode::comp, true);
    const auto& task = c.lt.task;
    const auto vp = episode_prototypes(c.params, Variant::VP, task);
    const auto lcp = episode_prototypes(c.params, Variant::LCP, task);
    const auto fused = episode_prototypes(c.params, Variant::ADAPTIVE, task);
    const auto cat = episode_prototypes(c.params, Variant::CONCAT, task);
    for (std::size_t s = 0; s < task.classes.size(); ++s) {
      const Vec v = l2_normalize(visual_prototype(task.support[s]));
      const Vec p = l2_normalize(class_prototype(c.params.protos, task.attributes[s]));
      const double lam = fusion_weight(c.params.gen, c.params.mode, p, v);
      const Vec f = fuse(lam, p, v);
      Vec h = c.params.concat_head->b;
      const Vec x = concat(v, p);
      for (std::size_t i = 0; i < h.size(); ++i) h[i] += dot(c.params.concat_head->W.row(i), x);
      h = l2_normalize(h);
      for (std::size_t i = 0; i < v.size(); ++i) {
        EXPECT_NEAR(vp[s][i], v[i], 1e-14);
        EXPECT_NEAR(lcp[s][i], p[i], 1e-14);
        EXPECT_NEAR(fused[s][i], f[i], 1e-14);
        EXPECT_NEAR(cat[s][i], h[i], 1e-12);
      }
    }
  }
}

TEST(EpisodePrototypes, ZeroGeneratorGivesPlainAverage) {
  RngStream rng(26, 0);
  for (int t = 0; t < 100; ++t) {
    auto c = random_case(rng);
    c.params = with_generator_mode(c.params, GenInputMode::comp);
    const auto& task = c.lt.task;
    const auto fused = episode_prototypes(c.params, Variant::ADAPTIVE, task);
    for (std::size_t s = 0; s < task.classes.size(); ++s) {
      const Vec v = l2_normalize(visual_prototype(task.support[s]));
      const Vec p = l2_normalize(class_prototype(c.params.protos, task.attributes[s]));
      for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(fused[s][i], 0.5 * (v[i] + p[i]), 1e-15);
    }
  }
}

TEST(EpisodePrototypes, LcpVpAndRicpVpUseTheGenerator) {
  RngStream rng(27, 0);
  const auto c = random_case(rng);
  const auto a = episode_prototypes(c.params, Variant::ADAPTIVE, c.lt.task);
  const auto b = episode_prototypes(c.params, Variant::LCP_VP, c.lt.task);
  EXPECT_EQ(a, b);
  // RICP variants use whatever R they are handed; randomness comes from the caller
  EXPECT_EQ(episode_prototypes(c.params, Variant::RICP, c.lt.task),
            episode_prototypes(c.params, Variant::LCP, c.lt.task));
}

TEST(Predict, VpMatchesPlainPrototypicalNetworkOracle) {
  RngStream rng(28, 0);
  for (int t = 0; t < 500; ++t) {
    const auto c = random_case(rng);
    const auto preds = predict(c.params, Variant::VP, c.lt.task);
    const auto oracle = protonet_oracle(c.lt.task);
    ASSERT_EQ(preds.size(), oracle.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      EXPECT_EQ(preds[i].class_index, oracle[i]);
      EXPECT_EQ(preds[i].label, c.lt.task.classes[oracle[i]]);
    }
  }
}

TEST(Predict, ArgmaxMatchesExhaustiveRecomputation) {
  RngStream rng(29, 0);
  for (int t = 0; t < 300; ++t) {
    const auto c = random_case(rng, static_cast<GenInputMode>(rng.uniform_below(3)));
    const auto& task = c.lt.task;
    const auto preds = predict(c.params, Variant::ADAPTIVE, task);
    for (std::size_t i = 0; i < task.queries.size(); ++i) {
      std::size_t best = 0;
      double best_p = -1.0;
      double z = 0.0;
      std::vector<double> e;
      for (std::size_t s = 0; s < task.classes.size(); ++s) {
        const Vec v = l2_normalize(visual_prototype(task.support[s]));
        const Vec p = l2_normalize(class_prototype(c.params.protos, task.attributes[s]));
        const Vec f = fuse(fusion_weight(c.params.gen, c.params.mode, p, v), p, v);
        e.push_back(std::exp(c.params.temps.tau2 * cosine_sim(task.queries[i], f)));
        z += e.back();
      }
      for (std::size_t s = 0; s < e.size(); ++s) {
        EXPECT_NEAR(preds[i].probs[s], e[s] / z, 1e-12);
        if (e[s] / z > best_p) {
          best_p = e[s] / z;
          best = s;
        }
      }
      EXPECT_EQ(preds[i].class_index, best);
    }
  }
}

TEST(Predict, OneShotQueryEqualToSupportIsThatClass) {
  RngStream rng(30, 0);
  for (int t = 0; t < 100; ++t) {
    auto c = random_case(rng);
    auto& task = c.lt.task;
    for (auto& s : task.support) s.resize(1);
    const std::size_t target = rng.uniform_below(task.classes.size());
    task.queries = {task.support[target][0]};
    EXPECT_EQ(predict(c.params, Variant::VP, task)[0].class_index, target);
  }
}

TEST(Predict, TiesBrokenByLowestIndex) {
  EXPECT_EQ(argmax(Vec{0.25, 0.25, 0.25, 0.25}), 0u);
  EXPECT_EQ(argmax(Vec{0.1, 0.45, 0.45}), 1u);
  EpisodeTask task;
  task.classes = {5, 6, 7};
  task.attributes = {Vec{1}, Vec{1}, Vec{1}};
  task.support = {{Vec{1, 0}}, {Vec{1, 0}}, {Vec{1, 0}}};
  task.queries = {Vec{0, 1}};
  CpnParams p;
  p.protos.R = Mat::from_rows({{1, 0}});
  p.gen.w = Vec(2);
  const auto pred = predict(p, Variant::VP, task);
  EXPECT_EQ(pred[0].class_index, 0u);
  EXPECT_EQ(pred[0].label, 5u);
}

TEST(Predict, Deterministic) {
  RngStream rng(31, 0);
  const auto c = random_case(rng);
  const auto a = predict(c.params, Variant::ADAPTIVE, c.lt.task);
  const auto b = predict(c.params, Variant::ADAPTIVE, c.lt.task);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].class_index, b[i].class_index);
    EXPECT_EQ(a[i].probs, b[i].probs);
  }
}

TEST(Predict, AttributeRescalingChangesNothing) {
  RngStream rng(32, 0);
  const Variant comp_variants[] = {Variant::LCP, Variant::LCP_VP, Variant::ADAPTIVE, Variant::CONCAT};
  for (int t = 0; t < 300; ++t) {
    const auto c = random_case(rng, static_cast<GenInputMode>(rng.uniform_below(3)), true);
    auto scaled_task = c.lt.task;
    const std::size_t s = rng.uniform_below(scaled_task.classes.size());
    const double alpha = rng.uniform(1e-6, 100.0);
    scaled_task.attributes[s] = scaled(scaled_task.attributes[s], alpha);
    const Vec p0 = l2_normalize(class_prototype(c.params.protos, c.lt.task.attributes[s]));
    const Vec p1 = l2_normalize(class_prototype(c.params.protos, scaled_task.attributes[s]));
    for (std::size_t i = 0; i < p0.size(); ++i) EXPECT_NEAR(p0[i], p1[i], 1e-12);
    for (Variant v : comp_variants) {
      const auto a = predict(c.params, v, c.lt.task);
      const auto b = predict(c.params, v, scaled_task);
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].class_index, b[i].class_index) << to_string(v);
    }
  }
}

TEST(Variants, NamesRoundTrip) {
  for (Variant v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_EQ(to_string(Variant::LCP_VP), "LCP+VP");
  expect_code(ErrorCode::InvalidConfig, [] { parse_variant("FANCY"); });
  for (auto m : {GenInputMode::comp, GenInputMode::vis, GenInputMode::concat}) {
    EXPECT_EQ(parse_gen_input_mode(to_string(m)), m);
  }
}

TEST(Params, ValidateCatchesGeneratorLength) {
  CpnParams p;
  p.protos.R = Mat(3, 4);
  p.gen.w = Vec(4);
  p.mode = GenInputMode::concat;
  expect_code(ErrorCode::DimMismatch, [&] { p.validate(); });
  p.gen.w = Vec(8);
  EXPECT_NO_THROW(p.validate());
}

TEST(RandomComponents, FreshDrawPerStream) {
  RngStream rng(33, 0);
  const CpnParams p = init_params(6, 10, GenInputMode::comp, rng);
  const auto a = with_random_components(p, 1, 0);
  const auto b = with_random_components(p, 1, 0);
  const auto c = with_random_components(p, 1, 1);
  EXPECT_EQ(a.protos.R, b.protos.R);
  EXPECT_NE(a.protos.R, c.protos.R);
  EXPECT_NE(a.protos.R, p.protos.R);
}

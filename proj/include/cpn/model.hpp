#pragma once

// The compositional prototype head.
//
// Per support class s with attribute scores z_s:
//   p_comp = sum_j z_sj * r_j / ||r_j||            compositional prototype
//   p_vis  = mean of the class's support features  visual prototype
//   lambda = sigmoid(w . g(p̂_comp, p̂_vis) + b)     g picks the generator input
//   p_fuse = lambda * p̂_comp + (1 - lambda) * p̂_vis
// and queries are scored by softmax over tau2 * cos(q, p_fuse^s).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpn/dataio.hpp"
#include "cpn/episodes.hpp"
#include "cpn/error.hpp"
#include "cpn/gradcore.hpp"
#include "cpn/rng.hpp"

namespace cpn {

// ---------------------------------------------------------------------------
// Variants

/// Prototype variants compared in the ablation grid.
enum class Variant {
  RICP,      // compositional prototype from randomly initialized components
  VP,        // visual prototype only
  LCP,       // compositional prototype from learned components
  RICP_VP,   // adaptive fusion of RICP and VP
  LCP_VP,    // adaptive fusion of LCP (frozen) and VP
  CONCAT,    // fully connected reduction of [p̂_vis, p̂_comp]
  ADAPTIVE,  // adaptive fusion of VP and meta-optimized components
};

inline constexpr std::array<Variant, 7> kAllVariants = {Variant::RICP,    Variant::VP,     Variant::LCP,
                                                        Variant::RICP_VP, Variant::LCP_VP, Variant::CONCAT,
                                                        Variant::ADAPTIVE};

constexpr std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::RICP: return "RICP";
    case Variant::VP: return "VP";
    case Variant::LCP: return "LCP";
    case Variant::RICP_VP: return "RICP+VP";
    case Variant::LCP_VP: return "LCP+VP";
    case Variant::CONCAT: return "CONCAT";
    case Variant::ADAPTIVE: return "ADAPTIVE";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants) {
    if (s == to_string(v)) return v;
  }
  if (s == "RICP_VP") return Variant::RICP_VP;
  if (s == "LCP_VP") return Variant::LCP_VP;
  throw Error(ErrorCode::InvalidConfig, "unknown variant '" + std::string(s) + "'");
}

constexpr bool uses_components(Variant v) { return v != Variant::VP; }
constexpr bool uses_visual(Variant v) { return v != Variant::LCP && v != Variant::RICP; }
constexpr bool uses_generator(Variant v) {
  return v == Variant::RICP_VP || v == Variant::LCP_VP || v == Variant::ADAPTIVE;
}
constexpr bool uses_random_components(Variant v) { return v == Variant::RICP || v == Variant::RICP_VP; }

enum class GenInputMode { comp, vis, concat };

constexpr std::string_view to_string(GenInputMode m) {
  switch (m) {
    case GenInputMode::comp: return "comp";
    case GenInputMode::vis: return "vis";
    case GenInputMode::concat: return "concat";
  }
  return "?";
}

inline GenInputMode parse_gen_input_mode(std::string_view s) {
  if (s == "comp") return GenInputMode::comp;
  if (s == "vis") return GenInputMode::vis;
  if (s == "concat") return GenInputMode::concat;
  throw Error(ErrorCode::InvalidConfig, "unknown generator input mode '" + std::string(s) + "'");
}

constexpr std::size_t gen_input_size(GenInputMode m, std::size_t dim) {
  return m == GenInputMode::concat ? 2 * dim : dim;
}

// ---------------------------------------------------------------------------
// Parameters

struct ComponentPrototypes {
  Mat R;  // one row per attribute

  std::size_t count() const noexcept { return R.rows(); }
  std::size_t dim() const noexcept { return R.cols(); }
  friend bool operator==(const ComponentPrototypes&, const ComponentPrototypes&) = default;
};

struct WeightGenerator {
  Vec w;
  double b = 0.0;
  friend bool operator==(const WeightGenerator&, const WeightGenerator&) = default;
};

struct Temperatures {
  double tau1 = 10.0;
  double tau2 = 10.0;
  friend bool operator==(const Temperatures&, const Temperatures&) = default;
};

struct ConcatFusionHead {
  Mat W;  // dim x 2*dim
  Vec b;  // dim
  friend bool operator==(const ConcatFusionHead&, const ConcatFusionHead&) = default;
};

struct CpnParams {
  ComponentPrototypes protos;
  WeightGenerator gen;
  Temperatures temps;
  std::optional<ConcatFusionHead> concat_head;
  GenInputMode mode = GenInputMode::comp;

  std::size_t num_attributes() const noexcept { return protos.count(); }
  std::size_t dim() const noexcept { return protos.dim(); }

  void validate() const {
    if (num_attributes() == 0 || dim() == 0) throw Error(ErrorCode::ShapeMismatch, "empty component prototypes");
    detail::require_finite(protos.R.flat(), "component prototypes");
    if (gen.w.size() != gen_input_size(mode, dim())) {
      throw Error(ErrorCode::DimMismatch, "generator has " + std::to_string(gen.w.size()) + " weights, mode " +
                                              std::string(to_string(mode)) + " needs " +
                                              std::to_string(gen_input_size(mode, dim())));
    }
    detail::require_finite(gen.w.span(), "generator weights");
    if (!std::isfinite(gen.b) || !std::isfinite(temps.tau1) || !std::isfinite(temps.tau2)) {
      throw Error(ErrorCode::NonFinite, "generator bias or temperature");
    }
    if (concat_head) {
      if (concat_head->W.rows() != dim() || concat_head->W.cols() != 2 * dim() || concat_head->b.size() != dim()) {
        throw Error(ErrorCode::ShapeMismatch, "concat head must be d x 2d with a length-d bias");
      }
      detail::require_finite(concat_head->W.flat(), "concat head");
      detail::require_finite(concat_head->b.span(), "concat head bias");
    }
  }

  friend bool operator==(const CpnParams&, const CpnParams&) = default;
};

inline Mat gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, RngStream& rng) {
  Mat m(rows, cols);
  for (double& x : m.flat()) x = rng.normal(0.0, stddev);
  return m;
}

/// Component prototypes drawn like the pre-training initializer: N(0, 1/sqrt(d)).
inline Mat random_component_prototypes(std::size_t num_attributes, std::size_t dim, RngStream& rng) {
  return gaussian_matrix(num_attributes, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
}

/// Seed used for RICP draws unless the caller overrides it.
inline constexpr std::uint64_t kDefaultRicpSeed = 0x52494350ULL;  // "RICP"

/// Copy of `params` whose components are replaced by a fresh random draw
/// from stream (seed, stream).
inline CpnParams with_random_components(const CpnParams& params, std::uint64_t seed, std::uint64_t stream) {
  RngStream rng(seed, stream);
  CpnParams out = params;
  out.protos.R = random_component_prototypes(params.num_attributes(), params.dim(), rng);
  return out;
}

// ---------------------------------------------------------------------------
// Single operations

inline void check_attribute_vector(std::span<const double> z) {
  bool any = false;
  for (double x : z) {
    if (x < 0.0) throw Error(ErrorCode::NegativeScore, "attribute score below zero");
    any = any || x != 0.0;
  }
  if (!any) throw Error(ErrorCode::ZeroAttributeVector, "attribute vector is all zeros");
}

/// Sum of attribute-weighted, row-normalized component prototypes. Takes the
/// already-normalized rows so callers can share them across classes.
inline Vec class_prototype_normalized(const Mat& unit_rows, std::span<const double> z) {
  check_attribute_vector(z);
  return weighted_sum(z, unit_rows);
}

inline Vec class_prototype(const ComponentPrototypes& protos, std::span<const double> z) {
  detail::require_same_size(z.size(), protos.count(), "attribute vector vs component prototypes");
  check_attribute_vector(z);
  return weighted_sum(z, normalized_rows(protos.R));
}

/// softmax over temperature * cos(feature, prototype).
inline Vec cosine_softmax(std::span<const double> feature, std::span<const Vec> prototypes, double temperature) {
  std::vector<double> logits(prototypes.size());
  for (std::size_t c = 0; c < prototypes.size(); ++c) logits[c] = temperature * cosine_sim(feature, prototypes[c]);
  return softmax(logits);
}

inline Vec base_class_probs(std::span<const double> feature, std::span<const Vec> prototypes, double tau1) {
  return cosine_softmax(feature, prototypes, tau1);
}

inline Vec query_probs(std::span<const double> query, std::span<const Vec> fused, double tau2) {
  return cosine_softmax(query, fused, tau2);
}

inline Vec visual_prototype(std::span<const Vec> features) {
  if (features.empty()) throw Error(ErrorCode::EmptySupport, "no support features");
  Vec mean(features[0].size());
  for (const Vec& f : features) axpy(1.0, f, mean.span());
  for (double& x : mean) x /= static_cast<double>(features.size());
  return mean;
}

inline Vec generator_input(GenInputMode mode, std::span<const double> comp_hat, std::span<const double> vis_hat) {
  switch (mode) {
    case GenInputMode::comp: return Vec(comp_hat);
    case GenInputMode::vis: return Vec(vis_hat);
    case GenInputMode::concat: return concat(vis_hat, comp_hat);
  }
  return {};
}

/// sigmoid(a) kept strictly inside (0, 1) even when it saturates in double.
inline double open_unit_sigmoid(double a) {
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  return std::clamp(sigmoid(a), lo, hi);
}

inline double fusion_weight(const WeightGenerator& gen, GenInputMode mode, std::span<const double> comp_hat,
                            std::span<const double> vis_hat) {
  detail::require_same_size(comp_hat.size(), vis_hat.size(), "fusion inputs");
  if (gen.w.size() != gen_input_size(mode, comp_hat.size())) {
    throw Error(ErrorCode::DimMismatch, "generator length " + std::to_string(gen.w.size()) + " does not fit mode " +
                                            std::string(to_string(mode)));
  }
  const Vec in = generator_input(mode, comp_hat, vis_hat);
  return open_unit_sigmoid(dot(gen.w, in) + gen.b);
}

inline Vec fuse(double lambda, std::span<const double> comp_hat, std::span<const double> vis_hat) {
  detail::require_same_size(comp_hat.size(), vis_hat.size(), "fuse");
  Vec out(comp_hat.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * comp_hat[i] + (1.0 - lambda) * vis_hat[i];
  return out;
}

// ---------------------------------------------------------------------------
// Episodes as seen by the head

/// What the head may see of an episode. Queries are bare features: there is
/// no field through which a query's attributes or label could leak in.
struct EpisodeTask {
  std::vector<ClassId> classes;
  std::vector<Vec> attributes;            // z_s, one per class
  std::vector<std::vector<Vec>> support;  // K features per class
  std::vector<Vec> queries;
};

struct LabeledTask {
  EpisodeTask task;
  std::vector<std::size_t> query_labels;  // index into task.classes
};

inline LabeledTask make_task(const DatasetBundle& bundle, const Episode& ep) {
  LabeledTask lt;
  auto& t = lt.task;
  t.classes = ep.classes;
  t.support.resize(ep.classes.size());
  auto index_of = [&](ClassId c) {
    auto it = std::find(ep.classes.begin(), ep.classes.end(), c);
    if (it == ep.classes.end()) throw Error(ErrorCode::IndexOutOfRange, "shot class not in episode");
    return static_cast<std::size_t>(it - ep.classes.begin());
  };
  for (ClassId c : ep.classes) t.attributes.push_back(bundle.attributes().at(c));
  for (const Shot& s : ep.support) t.support[index_of(s.label)].emplace_back(bundle.embeddings().feature(s.record));
  for (const Shot& s : ep.query) {
    t.queries.emplace_back(bundle.embeddings().feature(s.record));
    lt.query_labels.push_back(index_of(s.label));
  }
  return lt;
}

// ---------------------------------------------------------------------------
// Forward / backward over one episode

struct CpnGrads {
  Mat R;
  Vec w;
  double b = 0.0;
  double tau1 = 0.0;
  double tau2 = 0.0;
  std::optional<ConcatFusionHead> concat_head;

  static CpnGrads zeros_like(const CpnParams& p) {
    CpnGrads g{Mat(p.num_attributes(), p.dim()), Vec(p.gen.w.size()), 0.0, 0.0, 0.0, std::nullopt};
    if (p.concat_head) {
      g.concat_head = ConcatFusionHead{Mat(p.concat_head->W.rows(), p.concat_head->W.cols()),
                                       Vec(p.concat_head->b.size())};
    }
    return g;
  }
};

namespace detail {

struct ClassForward {
  Vec comp_raw, comp_hat;
  Vec vis_hat;
  Vec gen_in;
  double lambda = 0.0;
  Vec concat_in, head_out;
  Vec proto;
};

struct EpisodeForward {
  Mat unit_rows;
  std::vector<ClassForward> classes;
};

inline Vec mat_vec(const Mat& W, std::span<const double> x) {
  detail::require_same_size(W.cols(), x.size(), "mat_vec");
  Vec out(W.rows());
  for (std::size_t r = 0; r < W.rows(); ++r) out[r] = dot(W.row(r), x);
  return out;
}

inline EpisodeForward forward_prototypes(const CpnParams& params, Variant variant, const EpisodeTask& task) {
  const std::size_t n = task.classes.size();
  if (task.attributes.size() != n || task.support.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, "episode task class lists disagree");
  }
  EpisodeForward fw;
  if (uses_components(variant)) fw.unit_rows = normalized_rows(params.protos.R);
  fw.classes.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    ClassForward& cf = fw.classes[s];
    if (uses_components(variant)) {
      detail::require_same_size(task.attributes[s].size(), params.num_attributes(), "attribute vector");
      cf.comp_raw = class_prototype_normalized(fw.unit_rows, task.attributes[s]);
      cf.comp_hat = l2_normalize(cf.comp_raw);
    }
    if (uses_visual(variant)) {
      cf.vis_hat = l2_normalize(visual_prototype(task.support[s]));
      detail::require_same_size(cf.vis_hat.size(), params.dim(), "support feature");
    }
    switch (variant) {
      case Variant::VP: cf.proto = cf.vis_hat; break;
      case Variant::LCP:
      case Variant::RICP: cf.proto = cf.comp_hat; break;
      case Variant::RICP_VP:
      case Variant::LCP_VP:
      case Variant::ADAPTIVE:
        cf.lambda = fusion_weight(params.gen, params.mode, cf.comp_hat, cf.vis_hat);
        cf.gen_in = generator_input(params.mode, cf.comp_hat, cf.vis_hat);
        cf.proto = fuse(cf.lambda, cf.comp_hat, cf.vis_hat);
        break;
      case Variant::CONCAT: {
        if (!params.concat_head) throw Error(ErrorCode::MissingCheckpoint, "CONCAT variant needs a concat head");
        cf.concat_in = concat(cf.vis_hat, cf.comp_hat);
        cf.head_out = mat_vec(params.concat_head->W, cf.concat_in);
        axpy(1.0, params.concat_head->b, cf.head_out.span());
        cf.proto = l2_normalize(cf.head_out);
        break;
      }
    }
  }
  return fw;
}

}  // namespace detail

/// Per-class prototypes used to classify the episode's queries.
inline std::vector<Vec> episode_prototypes(const CpnParams& params, Variant variant, const EpisodeTask& task) {
  auto fw = detail::forward_prototypes(params, variant, task);
  std::vector<Vec> out;
  out.reserve(fw.classes.size());
  for (auto& c : fw.classes) out.push_back(std::move(c.proto));
  return out;
}

struct Prediction {
  std::size_t class_index = 0;
  ClassId label = 0;
  Vec probs;
};

/// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) best = i;
  }
  return best;
}

inline std::vector<Prediction> predict(const CpnParams& params, Variant variant, const EpisodeTask& task) {
  const auto protos = episode_prototypes(params, variant, task);
  std::vector<Prediction> out;
  out.reserve(task.queries.size());
  for (const Vec& q : task.queries) {
    Vec p = query_probs(q, protos, params.temps.tau2);
    const std::size_t k = argmax(p);
    out.push_back({k, task.classes[k], std::move(p)});
  }
  return out;
}

inline std::vector<Prediction> predict(const DatasetBundle& bundle, const Episode& ep, const CpnParams& params,
                                       Variant variant) {
  return predict(params, variant, make_task(bundle, ep).task);
}

/// Percentage of predictions matching labels.
inline double accuracy_percent(std::span<const Prediction> preds, std::span<const std::size_t> labels) {
  detail::require_same_size(preds.size(), labels.size(), "predictions vs labels");
  if (preds.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i].class_index == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(preds.size());
}

struct EpisodeLoss {
  double loss = 0.0;
  CpnGrads grads;
};

/// Mean query cross-entropy of the episode and its gradient with respect to
/// R, w, b, tau2 and the concat head. tau1 is not involved.
inline EpisodeLoss episode_query_loss(const CpnParams& params, Variant variant, const LabeledTask& lt) {
  const EpisodeTask& task = lt.task;
  detail::require_same_size(task.queries.size(), lt.query_labels.size(), "queries vs labels");
  if (task.queries.empty()) throw Error(ErrorCode::EmptySupport, "episode has no queries");
  const auto fw = detail::forward_prototypes(params, variant, task);
  const std::size_t n = fw.classes.size();
  const double inv_q = 1.0 / static_cast<double>(task.queries.size());
  const double tau2 = params.temps.tau2;

  EpisodeLoss out{0.0, CpnGrads::zeros_like(params)};
  CpnGrads& g = out.grads;
  std::vector<Vec> g_proto(n, Vec(params.dim()));

  std::vector<double> logits(n);
  std::vector<double> cosines(n);
  std::vector<Vec> dcos(n);
  for (std::size_t qi = 0; qi < task.queries.size(); ++qi) {
    for (std::size_t s = 0; s < n; ++s) {
      auto cg = cosine_sim_grad(task.queries[qi], fw.classes[s].proto);
      cosines[s] = cg.value;
      logits[s] = tau2 * cg.value;
      dcos[s] = std::move(cg.grads[1]);
    }
    auto xe = softmax_xent(logits, lt.query_labels[qi]);
    out.loss += xe.value * inv_q;
    const Vec& gl = xe.grads[0];
    for (std::size_t s = 0; s < n; ++s) {
      g.tau2 += gl[s] * cosines[s] * inv_q;
      axpy(tau2 * gl[s] * inv_q, dcos[s], g_proto[s].span());
    }
  }

  if (!uses_components(variant)) return out;

  const std::size_t d = params.dim();
  Mat g_unit(params.num_attributes(), d);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& cf = fw.classes[s];
    Vec g_comp_hat(d);
    switch (variant) {
      case Variant::VP: break;
      case Variant::LCP:
      case Variant::RICP: g_comp_hat = g_proto[s]; break;
      case Variant::RICP_VP:
      case Variant::LCP_VP:
      case Variant::ADAPTIVE: {
        const double lam = cf.lambda;
        double g_lam = 0.0;
        for (std::size_t k = 0; k < d; ++k) g_lam += g_proto[s][k] * (cf.comp_hat[k] - cf.vis_hat[k]);
        g_comp_hat = scaled(g_proto[s], lam);
        const double g_pre = g_lam * lam * (1.0 - lam);
        axpy(g_pre, cf.gen_in, g.w.span());
        g.b += g_pre;
        if (params.mode == GenInputMode::comp) {
          axpy(g_pre, params.gen.w, g_comp_hat.span());
        } else if (params.mode == GenInputMode::concat) {
          axpy(g_pre, params.gen.w.span().subspan(d), g_comp_hat.span());
        }
        break;
      }
      case Variant::CONCAT: {
        const auto& head = *params.concat_head;
        auto& gh = *g.concat_head;
        const Vec g_out = l2_normalize_vjp(cf.head_out, g_proto[s]);
        for (std::size_t r = 0; r < d; ++r) {
          axpy(g_out[r], cf.concat_in, gh.W.row(r));
          gh.b[r] += g_out[r];
          // only the p̂_comp half of the input depends on parameters
          for (std::size_t k = 0; k < d; ++k) g_comp_hat[k] += head.W(r, d + k) * g_out[r];
        }
        break;
      }
    }
    const Vec g_comp_raw = l2_normalize_vjp(cf.comp_raw, g_comp_hat);
    const auto& z = task.attributes[s];
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (z[j] != 0.0) axpy(z[j], g_comp_raw, g_unit.row(j));
    }
  }
  for (std::size_t j = 0; j < params.num_attributes(); ++j) {
    const Vec gr = l2_normalize_vjp(params.protos.R.row(j), g_unit.row(j));
    std::copy(gr.begin(), gr.end(), g.R.row(j).begin());
  }
  return out;
}

}  // namespace cpn

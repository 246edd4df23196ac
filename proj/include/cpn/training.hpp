#pragma once

// Two training stages over frozen embeddings:
//   pretrain   - global cosine-softmax classification over all base classes,
//                learning the component prototypes R and tau1;
//   meta_train - episodic query cross-entropy on base classes, learning the
//                fusion generator, tau2 and (for ADAPTIVE / CONCAT) R again,
//                with best-validation-epoch selection.
// Both use SGD with momentum; weight decay touches R, w and the concat head
// matrix only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpn/dataio.hpp"
#include "cpn/episodes.hpp"
#include "cpn/error.hpp"
#include "cpn/eval.hpp"
#include "cpn/gradcore.hpp"
#include "cpn/model.hpp"
#include "cpn/rng.hpp"

namespace cpn {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;          // pre-training only
  std::size_t episodes_per_epoch = 100;  // meta-training only
  std::size_t val_episodes = 600;        // meta-training only

  static SgdConfig pretrain_defaults() { return {}; }

  static SgdConfig metatrain_defaults() {
    SgdConfig c;
    c.lr = 0.001;
    c.epochs = 10;
    return c;
  }

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::InvalidConfig, "lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorCode::InvalidConfig, "momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
      throw Error(ErrorCode::InvalidConfig, "weight_decay must be >= 0");
    }
    if (batch_size == 0) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  }
};

/// Which parameter groups an optimizer step may change.
struct TrainableSet {
  bool R = false;
  bool gen = false;
  bool tau1 = false;
  bool tau2 = false;
  bool concat_head = false;

  friend bool operator==(const TrainableSet&, const TrainableSet&) = default;
};

inline constexpr TrainableSet kPretrainTrainable{.R = true, .tau1 = true};

inline TrainableSet meta_trainable(Variant v) {
  switch (v) {
    case Variant::ADAPTIVE: return {.R = true, .gen = true, .tau2 = true};
    case Variant::LCP_VP:
    case Variant::RICP_VP: return {.gen = true, .tau2 = true};
    case Variant::CONCAT: return {.R = true, .tau2 = true, .concat_head = true};
    case Variant::VP:
    case Variant::LCP:
    case Variant::RICP: return {.tau2 = true};
  }
  return {};
}

/// Momentum buffers, shaped like the gradients and zero-initialized.
struct OptState {
  CpnGrads velocity;

  static OptState zeros_like(const CpnParams& p) { return {CpnGrads::zeros_like(p)}; }
};

/// g' = g + wd * p (when decayed); v = momentum * v + g'; p -= lr * v.
inline void sgd_update(std::span<double> p, std::span<const double> g, std::span<double> v, const SgdConfig& cfg,
                       bool decay) {
  if (p.size() != g.size() || p.size() != v.size()) {
    throw Error(ErrorCode::ShapeMismatch, "parameter " + std::to_string(p.size()) + ", gradient " +
                                              std::to_string(g.size()) + ", velocity " + std::to_string(v.size()));
  }
  const double wd = decay ? cfg.weight_decay : 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = cfg.momentum * v[i] + g[i] + wd * p[i];
    p[i] -= cfg.lr * v[i];
  }
}

inline void sgd_step(CpnParams& p, const CpnGrads& g, OptState& state, const SgdConfig& cfg, const TrainableSet& which) {
  cfg.validate();
  auto& v = state.velocity;
  auto scalar = [&](double& param, double grad, double& vel) {
    sgd_update({&param, 1}, {&grad, 1}, {&vel, 1}, cfg, false);
  };
  if (which.R) sgd_update(p.protos.R.flat(), g.R.flat(), v.R.flat(), cfg, true);
  if (which.gen) {
    sgd_update(p.gen.w.span(), g.w.span(), v.w.span(), cfg, true);
    scalar(p.gen.b, g.b, v.b);
  }
  if (which.tau1) scalar(p.temps.tau1, g.tau1, v.tau1);
  if (which.tau2) scalar(p.temps.tau2, g.tau2, v.tau2);
  if (which.concat_head) {
    if (!p.concat_head || !g.concat_head || !v.concat_head) {
      throw Error(ErrorCode::ShapeMismatch, "concat head missing from params, gradient or optimizer state");
    }
    sgd_update(p.concat_head->W.flat(), g.concat_head->W.flat(), v.concat_head->W.flat(), cfg, true);
    sgd_update(p.concat_head->b.span(), g.concat_head->b.span(), v.concat_head->b.span(), cfg, false);
  }
}

// ---------------------------------------------------------------------------
// Initialization

inline constexpr std::uint64_t kInitStream = 0xFFFF'FFFF'0000'0001ULL;
inline constexpr std::uint64_t kConcatInitStream = 0xFFFF'FFFF'0000'0002ULL;
inline constexpr std::uint64_t kPretrainStreamBase = 0xFFFF'FFFE'0000'0000ULL;

inline ConcatFusionHead init_concat_head(std::size_t dim, RngStream& rng) {
  return {gaussian_matrix(dim, 2 * dim, 1.0 / std::sqrt(2.0 * static_cast<double>(dim)), rng), Vec(dim)};
}

/// R ~ N(0, 1/sqrt(d)), zero generator, tau1 = tau2 = 10.
inline CpnParams init_params(std::size_t num_attributes, std::size_t dim, GenInputMode mode, RngStream& rng,
                             bool with_concat_head = false) {
  if (num_attributes == 0 || dim == 0) throw Error(ErrorCode::InvalidConfig, "M and d must be >= 1");
  CpnParams p;
  p.protos.R = random_component_prototypes(num_attributes, dim, rng);
  p.gen.w = Vec(gen_input_size(mode, dim));
  p.gen.b = 0.0;
  p.temps = Temperatures{10.0, 10.0};
  p.mode = mode;
  if (with_concat_head) p.concat_head = init_concat_head(dim, rng);
  return p;
}

/// Swaps in a zero generator for `mode`, keeping everything else.
inline CpnParams with_generator_mode(CpnParams p, GenInputMode mode) {
  p.mode = mode;
  p.gen = WeightGenerator{Vec(gen_input_size(mode, p.dim())), 0.0};
  return p;
}

// ---------------------------------------------------------------------------
// Logs

struct EpochRecord {
  std::size_t epoch = 0;
  std::optional<double> train_loss;
  std::optional<double> val_acc;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t selected_epoch = 0;

  /// One JSON object per epoch: {"epoch", "train_loss", "val_acc"}; absent
  /// values are null.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& e : epochs) {
      nlohmann::ordered_json j;
      j["epoch"] = e.epoch;
      j["train_loss"] = e.train_loss ? nlohmann::ordered_json(*e.train_loss) : nlohmann::ordered_json(nullptr);
      j["val_acc"] = e.val_acc ? nlohmann::ordered_json(*e.val_acc) : nlohmann::ordered_json(nullptr);
      out += j.dump() + "\n";
    }
    return out;
  }

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

struct TrainResult {
  CpnParams params;
  TrainLog log;
};

// ---------------------------------------------------------------------------
// Pre-training

struct BaseClassLoss {
  double loss = 0.0;
  Mat dR;
  double dtau1 = 0.0;
};

/// Mean cross-entropy of softmax(tau1 * cos(f_i, p_c)) over a batch, where
/// p_c = sum_j z_cj r̂_j for every class c in `class_attributes`.
inline BaseClassLoss base_classification_loss(const Mat& R, double tau1, std::span<const Vec> class_attributes,
                                              std::span<const std::span<const double>> features,
                                              std::span<const std::size_t> labels) {
  detail::require_same_size(features.size(), labels.size(), "features vs labels");
  if (features.empty()) throw Error(ErrorCode::EmptySupport, "empty batch");
  const std::size_t n_classes = class_attributes.size();
  const Mat unit = normalized_rows(R);
  std::vector<Vec> protos;
  protos.reserve(n_classes);
  for (const Vec& z : class_attributes) protos.push_back(class_prototype_normalized(unit, z));

  BaseClassLoss out{0.0, Mat(R.rows(), R.cols()), 0.0};
  const double inv_b = 1.0 / static_cast<double>(features.size());
  std::vector<Vec> g_proto(n_classes, Vec(R.cols()));
  std::vector<double> logits(n_classes), cosines(n_classes);
  std::vector<Vec> dcos(n_classes);
  for (std::size_t i = 0; i < features.size(); ++i) {
    for (std::size_t c = 0; c < n_classes; ++c) {
      auto cg = cosine_sim_grad(features[i], protos[c]);
      cosines[c] = cg.value;
      logits[c] = tau1 * cg.value;
      dcos[c] = std::move(cg.grads[1]);
    }
    auto xe = softmax_xent(logits, labels[i]);
    out.loss += xe.value * inv_b;
    for (std::size_t c = 0; c < n_classes; ++c) {
      const double gl = xe.grads[0][c] * inv_b;
      out.dtau1 += gl * cosines[c];
      axpy(tau1 * gl, dcos[c], g_proto[c].span());
    }
  }
  Mat g_unit(R.rows(), R.cols());
  for (std::size_t c = 0; c < n_classes; ++c) {
    const Vec& z = class_attributes[c];
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (z[j] != 0.0) axpy(z[j], g_proto[c], g_unit.row(j));
    }
  }
  for (std::size_t j = 0; j < R.rows(); ++j) {
    const Vec gr = l2_normalize_vjp(R.row(j), g_unit.row(j));
    std::copy(gr.begin(), gr.end(), out.dR.row(j).begin());
  }
  return out;
}

/// Mini-batch SGD on the base-class classification loss. Optimizes only R
/// and tau1; returns the final-epoch parameters (no selection in this stage).
inline TrainResult pretrain(const DatasetBundle& bundle, CpnParams params, const SgdConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  params.validate();
  if (params.num_attributes() != bundle.num_attributes() || params.dim() != bundle.dim()) {
    throw Error(ErrorCode::ShapeMismatch, "parameters do not match the bundle's M or d");
  }
  const auto& base = bundle.split().base;
  std::vector<Vec> class_attrs;
  std::map<ClassId, std::size_t> local;
  for (ClassId c : base) {
    local[c] = class_attrs.size();
    class_attrs.push_back(bundle.attributes().at(c));
  }
  std::vector<std::size_t> records;
  for (ClassId c : base) {
    const auto r = bundle.records_of(c);
    records.insert(records.end(), r.begin(), r.end());
  }

  TrainResult result{std::move(params), {}};
  OptState state = OptState::zeros_like(result.params);
  const auto& emb = bundle.embeddings();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    RngStream rng(seed, kPretrainStreamBase + e);
    detail::partial_shuffle(records, records.size(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < records.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(records.size(), start + cfg.batch_size);
      std::vector<std::span<const double>> feats;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < end; ++i) {
        feats.push_back(emb.feature(records[i]));
        labels.push_back(local.at(emb.labels[records[i]]));
      }
      auto bl = base_classification_loss(result.params.protos.R, result.params.temps.tau1, class_attrs, feats, labels);
      CpnGrads g = CpnGrads::zeros_like(result.params);
      g.R = std::move(bl.dR);
      g.tau1 = bl.dtau1;
      sgd_step(result.params, g, state, cfg, kPretrainTrainable);
      epoch_loss += bl.loss * static_cast<double>(end - start);
    }
    epoch_loss /= static_cast<double>(records.size());
    if (!std::isfinite(epoch_loss)) {
      throw Error(ErrorCode::NonFinite, "pre-training loss diverged at epoch " + std::to_string(e + 1));
    }
    result.log.epochs.push_back({e + 1, epoch_loss, std::nullopt});
  }
  result.log.selected_epoch = cfg.epochs;
  return result;
}

// ---------------------------------------------------------------------------
// Meta-training

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ tag;
  return splitmix64(s);
}

inline constexpr std::uint64_t kValSeedTag = 0x56414C4944415445ULL;  // "VALIDATE"

struct MetaTrainOptions {
  EvalOptions eval;
};

/// Episodic training of `params` for `variant`. Epoch 0 (the incoming
/// parameters) is a selection candidate, so the returned parameters never
/// validate worse than the input. Validation episodes are the same for every
/// epoch.
inline TrainResult meta_train(const DatasetBundle& bundle, CpnParams params, Variant variant, const EpisodeSpec& spec,
                              const SgdConfig& cfg, std::uint64_t seed, const MetaTrainOptions& opts = {}) {
  cfg.validate();
  spec.validate();
  params.validate();
  if (params.num_attributes() != bundle.num_attributes() || params.dim() != bundle.dim()) {
    throw Error(ErrorCode::ShapeMismatch, "parameters do not match the bundle's M or d");
  }
  if (variant == Variant::CONCAT && !params.concat_head) {
    throw Error(ErrorCode::MissingCheckpoint, "CONCAT meta-training needs a concat head");
  }
  const auto& base = bundle.split().base;
  const auto& val = bundle.split().val;
  const std::uint64_t val_seed = derive_seed(seed, kValSeedTag);
  const TrainableSet which = meta_trainable(variant);

  auto validate_acc = [&](const CpnParams& p) {
    return evaluate(bundle, p, variant, val, spec, cfg.val_episodes, val_seed, opts.eval).mean_acc;
  };

  TrainResult best{params, {}};
  double best_acc = validate_acc(params);
  best.log.epochs.push_back({0, std::nullopt, best_acc});
  best.log.selected_epoch = 0;

  OptState state = OptState::zeros_like(params);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double epoch_loss = 0.0;
    for (std::size_t i = 0; i < cfg.episodes_per_epoch; ++i) {
      const std::uint64_t stream = meta_train_stream(e, i);
      const Episode ep = sample_episode(bundle, base, spec, seed, stream);
      const LabeledTask lt = make_task(bundle, ep);
      EpisodeLoss el = uses_random_components(variant)
                           ? episode_query_loss(params_for_episode(params, variant, opts.eval.ricp_seed, stream),
                                                variant, lt)
                           : episode_query_loss(params, variant, lt);
      sgd_step(params, el.grads, state, cfg, which);
      epoch_loss += el.loss;
    }
    if (cfg.episodes_per_epoch > 0) epoch_loss /= static_cast<double>(cfg.episodes_per_epoch);
    if (!std::isfinite(epoch_loss)) {
      throw Error(ErrorCode::NonFinite, "meta-training loss diverged at epoch " + std::to_string(e + 1));
    }
    const double acc = validate_acc(params);
    best.log.epochs.push_back({e + 1, epoch_loss, acc});
    if (acc > best_acc) {
      best_acc = acc;
      best.params = params;
      best.log.selected_epoch = e + 1;
    }
  }
  return best;
}

}  // namespace cpn

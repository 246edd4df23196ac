#pragma once

// Episodic evaluation: mean accuracy with a normal-approximation 95% interval
// (1.96 * s / sqrt(n), s with n-1 denominator) over per-episode accuracies.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cpn/binary_io.hpp"
#include "cpn/dataio.hpp"
#include "cpn/episodes.hpp"
#include "cpn/model.hpp"

namespace cpn {

inline unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs fn(i) for i in [0, n) across `threads` workers; results land in slot i,
/// so the output never depends on scheduling.
template <class Fn>
std::vector<double> parallel_map(std::size_t n, unsigned threads, Fn&& fn) {
  std::vector<double> out(n);
  threads = std::min<unsigned>(resolve_threads(threads), static_cast<unsigned>(std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

struct AccuracySummary {
  double mean = 0.0;
  double ci95 = 0.0;
};

inline AccuracySummary summarize(std::span<const double> accs) {
  AccuracySummary s;
  if (accs.empty()) return s;
  double sum = 0.0;
  for (double a : accs) sum += a;
  s.mean = sum / static_cast<double>(accs.size());
  const auto [lo, hi] = std::minmax_element(accs.begin(), accs.end());
  if (accs.size() < 2 || *lo == *hi) return s;
  double ss = 0.0;
  for (double a : accs) ss += (a - s.mean) * (a - s.mean);
  const double sd = std::sqrt(ss / static_cast<double>(accs.size() - 1));
  s.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(accs.size()));
  return s;
}

struct EvalReport {
  std::string label;
  EpisodeSpec spec;
  std::size_t n_episodes = 0;
  double mean_acc = 0.0;
  double ci95 = 0.0;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const {
    return {{"variant", label},
            {"N", spec.ways},
            {"K", spec.shots},
            {"Q", spec.queries},
            {"n_episodes", n_episodes},
            {"mean_acc", mean_acc},
            {"ci95", ci95},
            {"seed", seed}};
  }

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalOptions {
  unsigned threads = 1;
  std::uint64_t ricp_seed = kDefaultRicpSeed;
};

/// Samples episodes i = 0..n-1 from stream (seed, i) and scores each with
/// per_episode(episode, i) -> accuracy percent.
template <class PerEpisode>
EvalReport evaluate_episodes(const DatasetBundle& bundle, std::span<const ClassId> pool, const EpisodeSpec& spec,
                             std::size_t n_episodes, std::uint64_t seed, unsigned threads, std::string label,
                             PerEpisode&& per_episode) {
  spec.validate();
  const auto accs = parallel_map(n_episodes, threads, [&](std::size_t i) {
    const Episode ep = sample_episode(bundle, pool, spec, seed, i);
    return per_episode(ep, i);
  });
  const auto s = summarize(accs);
  return EvalReport{std::move(label), spec, n_episodes, s.mean, s.ci95, seed};
}

/// Parameters the given variant actually runs with for episode `stream`:
/// RICP variants get fresh random components, others use `params` as is.
inline CpnParams params_for_episode(const CpnParams& params, Variant variant, std::uint64_t ricp_seed,
                                    std::uint64_t stream) {
  if (uses_random_components(variant)) return with_random_components(params, ricp_seed, stream);
  return params;
}

inline double episode_accuracy(const DatasetBundle& bundle, const Episode& ep, const CpnParams& params,
                               Variant variant) {
  const LabeledTask lt = make_task(bundle, ep);
  const auto preds = predict(params, variant, lt.task);
  return accuracy_percent(preds, lt.query_labels);
}

inline EvalReport evaluate(const DatasetBundle& bundle, const CpnParams& params, Variant variant,
                           std::span<const ClassId> pool, const EpisodeSpec& spec, std::size_t n_episodes,
                           std::uint64_t seed, const EvalOptions& opts = {}) {
  return evaluate_episodes(bundle, pool, spec, n_episodes, seed, opts.threads, std::string(to_string(variant)),
                           [&](const Episode& ep, std::size_t i) {
                             if (uses_random_components(variant)) {
                               return episode_accuracy(bundle, ep, params_for_episode(params, variant, opts.ricp_seed, i),
                                                       variant);
                             }
                             return episode_accuracy(bundle, ep, params, variant);
                           });
}

// ---------------------------------------------------------------------------
// Visualization export

struct VizEntry {
  Variant variant;
  const CpnParams* params;
};

/// CSV rows: role,variant,class_id,v_1..v_d. One "query" row per query
/// feature (variant column empty), then one "proto" row per class per entry.
/// Values are printed at single precision.
inline std::string format_viz(const DatasetBundle& bundle, const Episode& ep, std::span<const VizEntry> entries,
                              std::uint64_t ricp_seed = kDefaultRicpSeed, std::uint64_t ricp_stream = 0) {
  const std::size_t d = bundle.dim();
  std::string out = "role,variant,class_id";
  for (std::size_t k = 1; k <= d; ++k) out += ",v_" + std::to_string(k);
  out += '\n';
  char buf[32];
  auto put_row = [&](std::string_view role, std::string_view variant, ClassId c, std::span<const double> xs) {
    out.append(role);
    out += ',';
    out.append(variant);
    out += ',' + std::to_string(c);
    for (double x : xs) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, static_cast<float>(x));
      out += ',';
      out.append(buf, ptr);
    }
    out += '\n';
  };
  for (const Shot& q : ep.query) put_row("query", "", q.label, bundle.embeddings().feature(q.record));
  const EpisodeTask task = make_task(bundle, ep).task;
  for (const VizEntry& e : entries) {
    if (e.params == nullptr) throw Error(ErrorCode::MissingCheckpoint, std::string(to_string(e.variant)));
    const auto protos =
        episode_prototypes(params_for_episode(*e.params, e.variant, ricp_seed, ricp_stream), e.variant, task);
    for (std::size_t s = 0; s < protos.size(); ++s) put_row("proto", to_string(e.variant), task.classes[s], protos[s]);
  }
  return out;
}

inline void export_viz(const DatasetBundle& bundle, const Episode& ep, std::span<const VizEntry> entries,
                       const std::filesystem::path& path, std::uint64_t ricp_seed = kDefaultRicpSeed,
                       std::uint64_t ricp_stream = 0) {
  io::write_text(path, format_viz(bundle, ep, entries, ricp_seed, ricp_stream));
}

}  // namespace cpn

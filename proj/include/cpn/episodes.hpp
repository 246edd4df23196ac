#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cpn/dataio.hpp"
#include "cpn/error.hpp"
#include "cpn/rng.hpp"

namespace cpn {

struct EpisodeSpec {
  std::size_t ways = 5;     // N
  std::size_t shots = 1;    // K
  std::size_t queries = 15; // Q per class

  void validate() const {
    if (ways < 2) throw Error(ErrorCode::InvalidSpec, "N must be >= 2");
    if (shots < 1) throw Error(ErrorCode::InvalidSpec, "K must be >= 1");
    if (queries < 1) throw Error(ErrorCode::InvalidSpec, "Q must be >= 1");
  }

  friend bool operator==(const EpisodeSpec&, const EpisodeSpec&) = default;
};

struct Shot {
  std::size_t record = 0;
  ClassId label = 0;

  friend bool operator==(const Shot&, const Shot&) = default;
};

/// Support and query shots are grouped by class in the order of `classes`.
struct Episode {
  std::vector<ClassId> classes;
  std::vector<Shot> support;  // N*K
  std::vector<Shot> query;    // N*Q

  friend bool operator==(const Episode&, const Episode&) = default;
};

namespace detail {
/// Moves a uniformly drawn k-subset to the front of xs (partial Fisher-Yates).
template <class T>
void partial_shuffle(std::vector<T>& xs, std::size_t k, RngStream& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_below(xs.size() - i));
    std::swap(xs[i], xs[j]);
  }
}
}  // namespace detail

/// Draws N classes from `pool` without replacement, then K+Q records of
/// each class; the first K go to the support set and the next Q to the
/// query set. The pool is sorted first so its order does not matter.
inline Episode sample_episode(const DatasetBundle& bundle, std::span<const ClassId> pool, const EpisodeSpec& spec,
                              RngStream& rng) {
  spec.validate();
  std::vector<ClassId> classes(pool.begin(), pool.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < spec.ways) {
    throw Error(ErrorCode::PoolTooSmall,
                "pool has " + std::to_string(classes.size()) + " classes, need " + std::to_string(spec.ways));
  }
  const std::size_t per_class = spec.shots + spec.queries;
  for (ClassId c : classes) {
    if (bundle.records_of(c).size() < per_class) {
      throw Error(ErrorCode::ClassTooSmall, "class " + std::to_string(c) + " has " +
                                                std::to_string(bundle.records_of(c).size()) + " records, need " +
                                                std::to_string(per_class));
    }
  }

  detail::partial_shuffle(classes, spec.ways, rng);
  classes.resize(spec.ways);

  Episode ep;
  ep.classes = classes;
  ep.support.reserve(spec.ways * spec.shots);
  ep.query.reserve(spec.ways * spec.queries);
  for (ClassId c : classes) {
    const auto recs = bundle.records_of(c);
    std::vector<std::size_t> idx(recs.begin(), recs.end());
    detail::partial_shuffle(idx, per_class, rng);
    for (std::size_t i = 0; i < spec.shots; ++i) ep.support.push_back({idx[i], c});
    for (std::size_t i = spec.shots; i < per_class; ++i) ep.query.push_back({idx[i], c});
  }
  return ep;
}

inline Episode sample_episode(const DatasetBundle& bundle, std::span<const ClassId> pool, const EpisodeSpec& spec,
                              std::uint64_t seed, std::uint64_t stream) {
  RngStream rng(seed, stream);
  return sample_episode(bundle, pool, spec, rng);
}

}  // namespace cpn

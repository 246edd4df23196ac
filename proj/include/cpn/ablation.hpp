#pragma once

// Ablation grid: every prototype variant, then every generator input mode of
// the adaptive variant, each at a 1-shot and a K-shot setting on the novel
// split. Rows whose parameters are not supplied are meta-trained here from the
// pre-trained checkpoint.

#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpn/error.hpp"
#include "cpn/eval.hpp"
#include "cpn/model.hpp"
#include "cpn/training.hpp"

namespace cpn {

struct AblationRow {
  std::string name;
  EvalReport one_shot;
  EvalReport five_shot;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  const AblationRow& row(std::string_view name) const {
    for (const auto& r : rows) {
      if (r.name == name) return r;
    }
    throw Error(ErrorCode::IndexOutOfRange, "no ablation row " + std::string(name));
  }

  nlohmann::ordered_json to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      arr.push_back({{"row", r.name}, {"one_shot", r.one_shot.to_json()}, {"five_shot", r.five_shot.to_json()}});
    }
    return arr;
  }

  std::string to_text() const {
    std::string out;
    char line[160];
    const std::string k1 = rows.empty() ? "1" : std::to_string(rows.front().one_shot.spec.shots);
    const std::string k5 = rows.empty() ? "5" : std::to_string(rows.front().five_shot.spec.shots);
    std::snprintf(line, sizeof line, "%-12s  %-18s  %-18s\n", "row", (k1 + "-shot").c_str(), (k5 + "-shot").c_str());
    out += line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-12s  %7.2f +- %-7.2f  %7.2f +- %-7.2f\n", r.name.c_str(), r.one_shot.mean_acc,
                    r.one_shot.ci95, r.five_shot.mean_acc, r.five_shot.ci95);
      out += line;
    }
    return out;
  }
};

struct AblationConfig {
  EpisodeSpec one_shot{5, 1, 15};
  EpisodeSpec five_shot{5, 5, 15};
  std::size_t n_episodes = 5000;
  std::uint64_t seed = 0;
  // used for rows that need their own meta-trained parameters
  EpisodeSpec meta_spec{5, 1, 15};
  SgdConfig meta_cfg = SgdConfig::metatrain_defaults();
  std::uint64_t meta_seed = 0;
  EvalOptions eval;
};

inline std::string generator_row_name(GenInputMode m) { return "gen:" + std::string(to_string(m)); }

/// `pretrained` is the pre-training-only checkpoint (LCP rows); `adaptive`
/// the run's meta-trained ADAPTIVE checkpoint. Both are required.
inline AblationTable run_ablation(const DatasetBundle& bundle, const CpnParams* pretrained, const CpnParams* adaptive,
                                  const AblationConfig& cfg) {
  if (pretrained == nullptr) throw Error(ErrorCode::MissingCheckpoint, "ablation needs the pre-trained checkpoint");
  if (adaptive == nullptr) throw Error(ErrorCode::MissingCheckpoint, "ablation needs the meta-trained checkpoint");
  const auto& novel = bundle.split().novel;
  const MetaTrainOptions mopts{cfg.eval};

  auto row = [&](std::string name, const CpnParams& p, Variant v) {
    return AblationRow{name, evaluate(bundle, p, v, novel, cfg.one_shot, cfg.n_episodes, cfg.seed, cfg.eval),
                       evaluate(bundle, p, v, novel, cfg.five_shot, cfg.n_episodes, cfg.seed, cfg.eval)};
  };
  auto train = [&](CpnParams start, Variant v) {
    return meta_train(bundle, std::move(start), v, cfg.meta_spec, cfg.meta_cfg, cfg.meta_seed, mopts).params;
  };

  const CpnParams base = with_generator_mode(*pretrained, GenInputMode::comp);
  AblationTable t;
  t.rows.push_back(row("RICP", base, Variant::RICP));
  t.rows.push_back(row("VP", base, Variant::VP));
  t.rows.push_back(row("LCP", base, Variant::LCP));
  t.rows.push_back(row("RICP+VP", train(base, Variant::RICP_VP), Variant::RICP_VP));
  t.rows.push_back(row("LCP+VP", train(base, Variant::LCP_VP), Variant::LCP_VP));
  {
    CpnParams with_head = base;
    RngStream rng(cfg.meta_seed, kConcatInitStream);
    with_head.concat_head = init_concat_head(base.dim(), rng);
    t.rows.push_back(row("CONCAT", train(std::move(with_head), Variant::CONCAT), Variant::CONCAT));
  }
  t.rows.push_back(row("ADAPTIVE", *adaptive, Variant::ADAPTIVE));

  for (GenInputMode m : {GenInputMode::concat, GenInputMode::vis, GenInputMode::comp}) {
    if (adaptive->mode == m) {
      t.rows.push_back(row(generator_row_name(m), *adaptive, Variant::ADAPTIVE));
    } else {
      t.rows.push_back(
          row(generator_row_name(m), train(with_generator_mode(*pretrained, m), Variant::ADAPTIVE), Variant::ADAPTIVE));
    }
  }
  return t;
}

}  // namespace cpn

#include <charconv>
#include <sstream>

#include <gtest/gtest.h>

#include "cpn/ablation.hpp"
#include "cpn/eval.hpp"
#include "cpn/synthgen.hpp"
#include "test_util.hpp"

using namespace cpn;
using cpn::testing::expect_code;
using cpn::testing::TempDir;

namespace {

const SynthData& data() {
  static const SynthData d = [] {
    SynthConfig c;
    c.num_attributes = 10;
    c.dim = 16;
    c.n_base = 12;
    c.n_val = 6;
    c.n_novel = 6;
    c.per_class = 45;
    c.sigma = 0.5;
    c.seed = 8;
    return generate(c);
  }();
  return d;
}

CpnParams params() {
  RngStream rng(2, kInitStream);
  CpnParams p = init_params(10, 16, GenInputMode::comp, rng, true);
  p.gen.w = Vec(16);
  p.gen.w[0] = 0.7;
  p.gen.b = 0.2;
  return p;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(f));
  }
  return rows;
}

}  // namespace

TEST(Summarize, StatedFormula) {
  const std::vector<double> accs{80, 90, 100};
  const auto s = summarize(accs);
  EXPECT_DOUBLE_EQ(s.mean, 90.0);
  EXPECT_NEAR(s.ci95, 1.96 * 10 / std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(s.ci95, 11.316, 1e-3);
}

TEST(Summarize, ZeroIffAllEqual) {
  const std::vector<double> same(50, 100.0);
  EXPECT_EQ(summarize(same).ci95, 0.0);
  EXPECT_EQ(summarize(same).mean, 100.0);
  std::vector<double> thirds(30, 1.0 / 3.0 * 100);
  EXPECT_EQ(summarize(thirds).ci95, 0.0);
  auto diff = same;
  diff[17] = 93.3;
  EXPECT_GT(summarize(diff).ci95, 0.0);
  const std::vector<double> one{42.0};
  EXPECT_EQ(summarize(one).ci95, 0.0);
}

TEST(Evaluate, AllCorrectPredictor) {
  const auto& b = data().bundle;
  const auto rep = evaluate_episodes(b, b.split().novel, EpisodeSpec{5, 1, 15}, 100, 1, 1, "PERFECT",
                                     [](const Episode&, std::size_t) { return 100.0; });
  EXPECT_EQ(rep.mean_acc, 100.0);
  EXPECT_EQ(rep.ci95, 0.0);
}

TEST(Evaluate, UniformRandomPredictorIsNearChance) {
  const auto& b = data().bundle;
  const auto rep = evaluate_episodes(b, b.split().novel, EpisodeSpec{5, 1, 15}, 2000, 4, 1, "RANDOM",
                                     [](const Episode& ep, std::size_t i) {
                                       RngStream rng(99, i);
                                       std::size_t hit = 0;
                                       for (const Shot& q : ep.query) {
                                         hit += ep.classes[rng.uniform_below(ep.classes.size())] == q.label ? 1 : 0;
                                       }
                                       return 100.0 * static_cast<double>(hit) / static_cast<double>(ep.query.size());
                                     });
  EXPECT_NEAR(rep.mean_acc, 20.0, 3.0);
}

TEST(Evaluate, SameSeedSameReportAndParallelEqualsSequential) {
  const auto& b = data().bundle;
  const CpnParams p = params();
  for (Variant v : kAllVariants) {
    const auto a = evaluate(b, p, v, b.split().novel, EpisodeSpec{5, 1, 15}, 200, 7, {1, kDefaultRicpSeed});
    const auto again = evaluate(b, p, v, b.split().novel, EpisodeSpec{5, 1, 15}, 200, 7, {1, kDefaultRicpSeed});
    const auto par = evaluate(b, p, v, b.split().novel, EpisodeSpec{5, 1, 15}, 200, 7, {4, kDefaultRicpSeed});
    EXPECT_EQ(a, again) << to_string(v);
    EXPECT_EQ(a, par) << to_string(v);
    EXPECT_EQ(a.to_json().dump(), par.to_json().dump());
    EXPECT_GE(a.mean_acc, 0.0);
    EXPECT_LE(a.mean_acc, 100.0);
    EXPECT_GE(a.ci95, 0.0);
  }
}

TEST(Evaluate, ReadOnly) {
  const auto& b = data().bundle;
  const CpnParams p = params();
  const CpnParams before = p;
  const auto emb_before = encode_embeddings(b.embeddings());
  evaluate(b, p, Variant::ADAPTIVE, b.split().novel, EpisodeSpec{5, 1, 15}, 50, 7);
  evaluate(b, p, Variant::RICP, b.split().novel, EpisodeSpec{5, 1, 15}, 50, 7);
  EXPECT_EQ(p, before);
  EXPECT_EQ(encode_embeddings(b.embeddings()), emb_before);
}

TEST(Evaluate, MatchesPerEpisodePredictAveraging) {
  const auto& b = data().bundle;
  const CpnParams p = params();
  const EpisodeSpec spec{5, 2, 4};
  const auto rep = evaluate(b, p, Variant::ADAPTIVE, b.split().novel, spec, 30, 12);
  double total = 0.0;
  for (std::uint64_t i = 0; i < 30; ++i) {
    const Episode ep = sample_episode(b, b.split().novel, spec, 12, i);
    const auto preds = predict(b, ep, p, Variant::ADAPTIVE);
    std::size_t hit = 0;
    for (std::size_t k = 0; k < preds.size(); ++k) hit += preds[k].label == ep.query[k].label ? 1 : 0;
    total += 100.0 * static_cast<double>(hit) / static_cast<double>(preds.size());
  }
  EXPECT_NEAR(rep.mean_acc, total / 30, 1e-9);
  EXPECT_EQ(rep.n_episodes, 30u);
  EXPECT_EQ(rep.seed, 12u);
  EXPECT_EQ(rep.label, "ADAPTIVE");
}

TEST(Evaluate, RicpIsChanceLevel) {
  const auto& b = data().bundle;
  const auto rep = evaluate(b, params(), Variant::RICP, b.split().novel, EpisodeSpec{5, 1, 15}, 2000, 3);
  EXPECT_NEAR(rep.mean_acc, 20.0, 3.0);
}

TEST(Evaluate, ReportJsonFields) {
  const EvalReport r{"VP", EpisodeSpec{5, 1, 15}, 5000, 81.5, 0.25, 9};
  const auto j = r.to_json();
  EXPECT_EQ(j.at("variant"), "VP");
  EXPECT_EQ(j.at("N"), 5);
  EXPECT_EQ(j.at("K"), 1);
  EXPECT_EQ(j.at("Q"), 15);
  EXPECT_EQ(j.at("n_episodes"), 5000);
  EXPECT_EQ(j.at("mean_acc"), 81.5);
  EXPECT_EQ(j.at("ci95"), 0.25);
  EXPECT_EQ(j.at("seed"), 9);
}

TEST(ExportViz, RowCountsAndRoundTrip) {
  TempDir tmp;
  const auto& b = data().bundle;
  const CpnParams p = params();
  const Episode ep = sample_episode(b, b.split().novel, EpisodeSpec{5, 1, 40}, 5, 0);
  const std::vector<VizEntry> entries{{Variant::VP, &p}, {Variant::ADAPTIVE, &p}};
  export_viz(b, ep, entries, tmp / "viz.csv");
  const auto rows = parse_csv(io::read_text(tmp / "viz.csv"));
  ASSERT_EQ(rows.size(), 1u + 5 * 40 + 5 * 2);
  ASSERT_EQ(rows[0].size(), 3u + 16);
  EXPECT_EQ(rows[0][0], "role");
  EXPECT_EQ(rows[0][3], "v_1");
  std::size_t queries = 0, protos = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    ASSERT_EQ(rows[r].size(), 19u);
    if (rows[r][0] == "query") {
      const std::size_t rec = ep.query[queries].record;
      EXPECT_EQ(rows[r][1], "");
      EXPECT_EQ(std::stoul(rows[r][2]), ep.query[queries].label);
      for (std::size_t k = 0; k < 16; ++k) {
        float v = 0;
        std::from_chars(rows[r][3 + k].data(), rows[r][3 + k].data() + rows[r][3 + k].size(), v);
        EXPECT_EQ(v, static_cast<float>(b.embeddings().feature(rec)[k]));
      }
      ++queries;
    } else {
      EXPECT_EQ(rows[r][0], "proto");
      ++protos;
    }
  }
  EXPECT_EQ(queries, 200u);
  EXPECT_EQ(protos, 10u);
}

TEST(ExportViz, VpRowsAreNormalizedSupportMeans) {
  const auto& b = data().bundle;
  const CpnParams p = params();
  const Episode ep = sample_episode(b, b.split().novel, EpisodeSpec{5, 3, 2}, 5, 1);
  const std::vector<VizEntry> entries{{Variant::VP, &p}};
  const auto rows = parse_csv(format_viz(b, ep, entries));
  std::size_t seen = 0;
  for (const auto& row : rows) {
    if (row[0] != "proto") continue;
    EXPECT_EQ(row[1], "VP");
    const ClassId c = static_cast<ClassId>(std::stoul(row[2]));
    std::vector<double> mean(16, 0.0);
    for (const Shot& s : ep.support) {
      if (s.label != c) continue;
      for (std::size_t k = 0; k < 16; ++k) mean[k] += b.embeddings().feature(s.record)[k];
    }
    const Vec expect = l2_normalize(Vec(mean));
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(std::stof(row[3 + k]), static_cast<float>(expect[k]));
    ++seen;
  }
  EXPECT_EQ(seen, 5u);
}

TEST(ExportViz, UnwritablePathIsIoError) {
  const auto& b = data().bundle;
  const CpnParams p = params();
  const Episode ep = sample_episode(b, b.split().novel, EpisodeSpec{5, 1, 1}, 5, 1);
  const std::vector<VizEntry> entries{{Variant::VP, &p}};
  expect_code(ErrorCode::IoError, [&] { export_viz(b, ep, entries, "/proc/cpn_no_such_dir/viz.csv"); });
}

TEST(Ablation, RowsAndMissingCheckpoints) {
  const auto& b = data().bundle;
  const CpnParams p = params();
  CpnParams pre = p;
  pre.concat_head.reset();
  AblationConfig cfg;
  cfg.n_episodes = 20;
  cfg.meta_cfg.epochs = 1;
  cfg.meta_cfg.episodes_per_epoch = 5;
  cfg.meta_cfg.val_episodes = 10;
  expect_code(ErrorCode::MissingCheckpoint, [&] { run_ablation(b, nullptr, &p, cfg); });
  expect_code(ErrorCode::MissingCheckpoint, [&] { run_ablation(b, &pre, nullptr, cfg); });
  const auto t = run_ablation(b, &pre, &p, cfg);
  const std::vector<std::string> names{"RICP",     "VP",         "LCP",     "RICP+VP",  "LCP+VP",
                                       "CONCAT",   "ADAPTIVE",   "gen:concat", "gen:vis", "gen:comp"};
  ASSERT_EQ(t.rows.size(), names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    EXPECT_EQ(t.rows[i].name, names[i]);
    EXPECT_EQ(t.rows[i].one_shot.spec.shots, 1u);
    EXPECT_EQ(t.rows[i].five_shot.spec.shots, 5u);
    EXPECT_EQ(t.rows[i].one_shot.seed, t.rows[0].one_shot.seed);
  }
  EXPECT_EQ(t.row("gen:comp").one_shot, t.row("ADAPTIVE").one_shot);
  EXPECT_EQ(t.to_json().size(), 10u);
  const std::string text = t.to_text();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 11);
}

// cpn: command-line driver for synthetic data generation, two-stage training,
// evaluation, ablation, gradient checking and prototype export.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpn/cpn.hpp"
#include "exit_codes.hpp"
#include "run_config.hpp"

namespace {

using namespace cpn;
using namespace cpn::cli;
using ojson = nlohmann::ordered_json;

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<std::string> variant;
  std::optional<std::size_t> shots;
  std::optional<std::size_t> episodes;
  std::size_t grad_points = 100;
};

RunConfig resolve_config(const Overrides& o) {
  RunConfig c = o.config_path.empty() ? parse_run_config(nlohmann::json::object(), ".") : load_run_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.threads) c.threads = *o.threads;
  if (o.variant) c.variant = parse_variant(*o.variant);
  if (o.shots) {
    if (*o.shots < 1) throw Error(ErrorCode::InvalidConfig, "--shots must be >= 1");
    c.eval_episode.shots = *o.shots;
  }
  if (o.episodes) {
    if (*o.episodes < 1) throw Error(ErrorCode::InvalidConfig, "--episodes must be >= 1");
    c.eval_episodes = *o.episodes;
    c.ablation_episodes = *o.episodes;
  }
  return c;
}

EvalOptions eval_options(const RunConfig& c) { return EvalOptions{resolve_threads(c.threads), c.ricp_seed}; }

DatasetBundle bundle_of(const RunConfig& c) {
  return load_bundle({c.resolve(c.data.embeddings), c.resolve(c.data.attributes), c.resolve(c.data.split)},
                     c.attribute_level, c.normalize_attributes_max);
}

void check_shape(const CpnParams& p, const DatasetBundle& b, const std::string& what) {
  if (p.num_attributes() != b.num_attributes() || p.dim() != b.dim()) {
    throw Error(ErrorCode::ShapeMismatch, what + " checkpoint does not match the dataset's M or d");
  }
}

std::string tag_or(const Checkpoint& ck, const std::string& key, const std::string& fallback) {
  auto it = ck.tags.find(key);
  return it == ck.tags.end() ? fallback : it->second;
}

/// Parameters a variant runs with: variants without trained fusion parts use
/// the pre-trained checkpoint, the rest the meta-trained one.
CpnParams params_for_variant(const RunConfig& c, Variant v, const DatasetBundle& b) {
  const bool needs_meta = uses_generator(v) || v == Variant::CONCAT;
  const auto path = c.resolve(needs_meta ? c.metatrain_checkpoint : c.pretrain_checkpoint);
  const Checkpoint ck = load_checkpoint(path);
  check_shape(ck.params, b, needs_meta ? "meta-trained" : "pre-trained");
  if (needs_meta) {
    const std::string trained_for = tag_or(ck, "variant", "");
    if (v == Variant::CONCAT && !ck.params.concat_head) {
      throw Error(ErrorCode::MissingCheckpoint, path.string() + " has no concat head; meta-train with variant CONCAT");
    }
    if (trained_for != to_string(v)) {
      std::cerr << "warning: " << path.string() << " was meta-trained for " << trained_for << ", evaluating as "
                << to_string(v) << "\n";
    }
  }
  return ck.params;
}

void emit(const ojson& j, const std::filesystem::path& path) {
  const std::string text = j.dump(2) + "\n";
  io::write_text(path, text);
  std::cout << text;
}

ojson with_config(const RunConfig& c, const char* key, ojson body) {
  ojson j;
  j[key] = std::move(body);
  j["seed"] = c.seed;
  j["config"] = to_json(c);
  return j;
}

int cmd_synth(const RunConfig& c) {
  SynthConfig sc = c.synth;
  sc.seed = c.seed;
  const SynthData data = generate(sc);
  write_bundle({c.resolve(c.data.embeddings), c.resolve(c.data.attributes), c.resolve(c.data.split)}, data.bundle);
  save_ground_truth(c.resolve(c.ground_truth), data.truth);
  const auto& s = data.bundle.split();
  std::printf("synth: %zu records, %zu classes (base %zu, val %zu, novel %zu), M=%zu d=%zu sigma=%g seed=%llu\n",
              data.bundle.embeddings().size(), sc.num_classes(), s.base.size(), s.val.size(), s.novel.size(),
              sc.num_attributes, sc.dim, sc.sigma, static_cast<unsigned long long>(c.seed));
  return kOk;
}

int cmd_pretrain(const RunConfig& c) {
  const DatasetBundle b = bundle_of(c);
  RngStream rng(c.seed, kInitStream);
  const CpnParams init = init_params(b.num_attributes(), b.dim(), c.gen_input_mode, rng);
  const TrainResult r = pretrain(b, init, c.pretrain, c.seed);
  save_checkpoint(c.resolve(c.pretrain_checkpoint), r.params, {{"stage", "pretrain"}, {"seed", std::to_string(c.seed)}});
  io::write_text(c.resolve(c.pretrain_log), r.log.to_jsonl());
  if (!r.log.epochs.empty()) {
    std::printf("pretrain: %zu epochs, loss %.6f -> %.6f\n", r.log.epochs.size(), *r.log.epochs.front().train_loss,
                *r.log.epochs.back().train_loss);
  } else {
    std::printf("pretrain: 0 epochs, parameters unchanged\n");
  }
  return kOk;
}

int cmd_metatrain(const RunConfig& c) {
  const auto pre_path = c.resolve(c.pretrain_checkpoint);
  const Checkpoint pre = load_checkpoint(pre_path);
  const DatasetBundle b = bundle_of(c);
  check_shape(pre.params, b, "pre-trained");
  CpnParams start = with_generator_mode(pre.params, c.gen_input_mode);
  if (c.variant == Variant::CONCAT) {
    RngStream rng(c.seed, kConcatInitStream);
    start.concat_head = init_concat_head(b.dim(), rng);
  }
  const TrainResult r = meta_train(b, std::move(start), c.variant, c.meta_episode, c.metatrain, c.seed,
                                   MetaTrainOptions{eval_options(c)});
  save_checkpoint(c.resolve(c.metatrain_checkpoint), r.params,
                  {{"stage", "metatrain"},
                   {"variant", std::string(to_string(c.variant))},
                   {"seed", std::to_string(c.seed)},
                   {"selected_epoch", std::to_string(r.log.selected_epoch)}});
  const double best = *r.log.epochs.at(r.log.selected_epoch).val_acc;
  ojson tail{{"selected_epoch", r.log.selected_epoch}, {"val_acc", best}};
  io::write_text(c.resolve(c.metatrain_log), r.log.to_jsonl() + tail.dump() + "\n");
  std::printf("metatrain %s/%s: baseline val %.2f, selected epoch %zu with val %.2f\n",
              std::string(to_string(c.variant)).c_str(), std::string(to_string(c.gen_input_mode)).c_str(),
              *r.log.epochs.front().val_acc, r.log.selected_epoch, best);
  return kOk;
}

int cmd_eval(const RunConfig& c) {
  const DatasetBundle b = bundle_of(c);
  const CpnParams p = params_for_variant(c, c.variant, b);
  const EvalReport rep =
      evaluate(b, p, c.variant, b.split().novel, c.eval_episode, c.eval_episodes, c.seed, eval_options(c));
  emit(with_config(c, "report", rep.to_json()), c.resolve(c.eval_report));
  return kOk;
}

int cmd_ablate(const RunConfig& c) {
  const DatasetBundle b = bundle_of(c);
  const Checkpoint pre = load_checkpoint(c.resolve(c.pretrain_checkpoint));
  const Checkpoint meta = load_checkpoint(c.resolve(c.metatrain_checkpoint));
  check_shape(pre.params, b, "pre-trained");
  check_shape(meta.params, b, "meta-trained");
  if (tag_or(meta, "variant", "") != to_string(Variant::ADAPTIVE)) {
    throw Error(ErrorCode::MissingCheckpoint, "ablation needs a meta-trained ADAPTIVE checkpoint");
  }
  AblationConfig ac;
  ac.one_shot = {c.eval_episode.ways, c.ablation_shots_low, c.eval_episode.queries};
  ac.five_shot = {c.eval_episode.ways, c.ablation_shots_high, c.eval_episode.queries};
  ac.n_episodes = c.ablation_episodes;
  ac.seed = c.seed;
  ac.meta_spec = c.meta_episode;
  ac.meta_cfg = c.metatrain;
  ac.meta_seed = c.seed;
  ac.eval = eval_options(c);
  const AblationTable t = run_ablation(b, &pre.params, &meta.params, ac);
  const ojson j = with_config(c, "table", t.to_json());
  io::write_text(c.resolve(c.ablation_report), j.dump(2) + "\n");
  std::cout << t.to_text() << "\n" << j.dump(2) << "\n";
  return kOk;
}

int cmd_gradcheck(const RunConfig& c, std::size_t points) {
  const GradSuiteReport r = run_grad_suite(c.seed, points);
  for (const auto& e : r.entries) {
    std::printf("%-48s points=%zu max_rel_err=%.3e\n", e.name.c_str(), e.points, e.max_rel_err);
  }
  const bool ok = r.passed(1e-6);
  std::printf("gradcheck %s: worst %.3e (tolerance 1e-6)\n", ok ? "PASS" : "FAIL", r.worst());
  return ok ? kOk : kCheckFailed;
}

int cmd_export_viz(const RunConfig& c) {
  const DatasetBundle b = bundle_of(c);
  std::vector<CpnParams> params;
  params.reserve(c.viz.variants.size());
  for (Variant v : c.viz.variants) params.push_back(params_for_variant(c, v, b));
  std::vector<VizEntry> entries;
  for (std::size_t i = 0; i < params.size(); ++i) entries.push_back({c.viz.variants[i], &params[i]});
  const EpisodeSpec spec{c.eval_episode.ways, c.viz.shots, c.viz.queries};
  const Episode ep = sample_episode(b, b.split().novel, spec, c.seed, c.viz.episode);
  io::write_text(c.resolve(c.viz_csv), format_viz(b, ep, entries, c.ricp_seed, c.viz.episode));
  std::printf("export-viz: %zu query rows, %zu prototype rows -> %s\n", ep.query.size(),
              entries.size() * ep.classes.size(), c.resolve(c.viz_csv).string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional prototypical networks over precomputed embeddings"};
  app.require_subcommand(1);
  app.fallthrough();
  Overrides o;
  app.add_option("--config", o.config_path, "JSON run configuration");
  app.add_option("--seed", o.seed, "master seed (overrides the config)");
  app.add_option("--threads", o.threads, "evaluation worker threads, 0 = all cores");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset and its ground truth");
  auto* pre = app.add_subcommand("pretrain", "base-class pre-training of R and tau1");
  auto* meta = app.add_subcommand("metatrain", "episodic meta-training of the configured variant");
  auto* ev = app.add_subcommand("eval", "evaluate a variant on novel-class episodes");
  ev->add_option("--variant", o.variant, "RICP, VP, LCP, RICP+VP, LCP+VP, CONCAT or ADAPTIVE");
  ev->add_option("--shots", o.shots, "support examples per class (K)");
  ev->add_option("--episodes", o.episodes, "number of test episodes");
  auto* ab = app.add_subcommand("ablate", "evaluate every variant and generator input mode");
  ab->add_option("--episodes", o.episodes, "number of test episodes per cell");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every analytic gradient");
  gc->add_option("--points", o.grad_points, "random points per check");
  auto* viz = app.add_subcommand("export-viz", "write query features and prototypes of one episode as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    const RunConfig c = resolve_config(o);
    if (synth->parsed()) return cmd_synth(c);
    if (pre->parsed()) return cmd_pretrain(c);
    if (meta->parsed()) return cmd_metatrain(c);
    if (ev->parsed()) return cmd_eval(c);
    if (ab->parsed()) return cmd_ablate(c);
    if (gc->parsed()) return cmd_gradcheck(c, o.grad_points);
    if (viz->parsed()) return cmd_export_viz(c);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kConfigError;
}

#pragma once

// JSON run configuration for the cpn command-line tool. Every field is
// optional; relative paths resolve against the config file's directory.
// Unknown keys are rejected so typos surface as config errors.

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpn/cpn.hpp"

namespace cpn::cli {

struct VizSettings {
  std::size_t shots = 1;
  std::size_t queries = 40;
  std::uint64_t episode = 0;
  std::vector<Variant> variants{Variant::VP, Variant::LCP, Variant::ADAPTIVE};
};

struct RunConfig {
  std::filesystem::path base_dir = ".";

  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0: one per core
  std::uint64_t ricp_seed = kDefaultRicpSeed;

  BundlePaths data{"data/embeddings.emb1", "data/attributes.csv", "data/split.json"};
  std::filesystem::path ground_truth = "data/ground_truth.ckpt";
  AttributeLevel attribute_level = AttributeLevel::category;
  bool normalize_attributes_max = false;

  SynthConfig synth;

  std::filesystem::path pretrain_checkpoint = "out/pretrain.ckpt";
  std::filesystem::path metatrain_checkpoint = "out/metatrain.ckpt";

  std::filesystem::path pretrain_log = "out/pretrain_log.jsonl";
  std::filesystem::path metatrain_log = "out/metatrain_log.jsonl";
  std::filesystem::path eval_report = "out/eval.json";
  std::filesystem::path ablation_report = "out/ablation.json";
  std::filesystem::path viz_csv = "out/viz.csv";

  SgdConfig pretrain = SgdConfig::pretrain_defaults();
  SgdConfig metatrain = SgdConfig::metatrain_defaults();
  EpisodeSpec meta_episode{5, 1, 15};

  EpisodeSpec eval_episode{5, 1, 15};
  std::size_t eval_episodes = 5000;

  std::size_t ablation_episodes = 5000;
  std::size_t ablation_shots_low = 1;
  std::size_t ablation_shots_high = 5;

  VizSettings viz;

  Variant variant = Variant::ADAPTIVE;
  GenInputMode gen_input_mode = GenInputMode::comp;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : (base_dir / p).lexically_normal();
  }
};

namespace detail {

using json = nlohmann::json;

[[noreturn]] inline void config_error(const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); }

inline void allow_keys(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) config_error(where + " must be a JSON object");
  const std::set<std::string> ok(keys.begin(), keys.end());
  for (const auto& [k, v] : obj.items()) {
    if (!ok.contains(k)) config_error("unknown field '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

/// Runs a library validator and re-raises its message with the field path.
template <class F>
void prefixed(const std::string& where, F&& validate) {
  try {
    validate();
  } catch (const Error& e) {
    std::string msg = e.what();
    const auto colon = msg.find(": ");
    if (colon != std::string::npos) msg = msg.substr(colon + 2);
    config_error("field " + where + "." + msg);
  }
}

template <class T>
void read(const json& obj, const char* key, const std::string& where, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    config_error("field '" + (where.empty() ? std::string(key) : where + "." + key) + "' has the wrong type");
  }
}

inline void read_path(const json& obj, const char* key, const std::string& where, std::filesystem::path& out) {
  std::string s;
  if (!obj.contains(key)) return;
  read(obj, key, where, s);
  out = s;
}

inline void read_sgd(const json& obj, const std::string& where, SgdConfig& cfg, bool meta) {
  if (meta) {
    allow_keys(obj, where,
               {"lr", "momentum", "weight_decay", "epochs", "episodes_per_epoch", "val_episodes", "episode"});
  } else {
    allow_keys(obj, where, {"lr", "momentum", "weight_decay", "epochs", "batch_size"});
  }
  read(obj, "lr", where, cfg.lr);
  read(obj, "momentum", where, cfg.momentum);
  read(obj, "weight_decay", where, cfg.weight_decay);
  read(obj, "epochs", where, cfg.epochs);
  read(obj, "batch_size", where, cfg.batch_size);
  read(obj, "episodes_per_epoch", where, cfg.episodes_per_epoch);
  read(obj, "val_episodes", where, cfg.val_episodes);
  prefixed(where, [&] { cfg.validate(); });
}

inline void read_episode(const json& obj, const std::string& where, EpisodeSpec& spec,
                         std::initializer_list<const char*> extra_keys = {}) {
  std::vector<const char*> keys{"N", "K", "Q"};
  keys.insert(keys.end(), extra_keys.begin(), extra_keys.end());
  if (!obj.is_object()) config_error(where + " must be a JSON object");
  for (const auto& [k, v] : obj.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* x) { return k == x; }) == keys.end()) {
      config_error("unknown field '" + where + "." + k + "'");
    }
  }
  read(obj, "N", where, spec.ways);
  read(obj, "K", where, spec.shots);
  read(obj, "Q", where, spec.queries);
  if (spec.ways < 2) config_error("field '" + where + ".N' must be >= 2");
  if (spec.shots < 1) config_error("field '" + where + ".K' must be >= 1");
  if (spec.queries < 1) config_error("field '" + where + ".Q' must be >= 1");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, std::filesystem::path base_dir) {
  using namespace detail;
  RunConfig c;
  c.base_dir = std::move(base_dir);
  allow_keys(j, "",
             {"seed", "threads", "ricp_seed", "data", "synth", "checkpoints", "reports", "pretrain", "metatrain", "eval",
              "ablation", "viz", "variant", "gen_input_mode"});
  read(j, "seed", "", c.seed);
  read(j, "threads", "", c.threads);
  read(j, "ricp_seed", "", c.ricp_seed);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    allow_keys(d, "data",
               {"embeddings", "attributes", "split", "ground_truth", "attribute_level", "normalize_attributes"});
    read_path(d, "embeddings", "data", c.data.embeddings);
    read_path(d, "attributes", "data", c.data.attributes);
    read_path(d, "split", "data", c.data.split);
    read_path(d, "ground_truth", "data", c.ground_truth);
    std::string level = "category", norm = "none";
    read(d, "attribute_level", "data", level);
    read(d, "normalize_attributes", "data", norm);
    if (level == "category") {
      c.attribute_level = AttributeLevel::category;
    } else if (level == "image") {
      c.attribute_level = AttributeLevel::image;
    } else {
      config_error("field 'data.attribute_level' must be category or image");
    }
    if (norm != "none" && norm != "max") config_error("field 'data.normalize_attributes' must be none or max");
    c.normalize_attributes_max = norm == "max";
  }

  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    allow_keys(s, "synth", {"M", "d", "n_base", "n_val", "n_novel", "per_class", "sigma", "sparsity", "min_angle"});
    read(s, "M", "synth", c.synth.num_attributes);
    read(s, "d", "synth", c.synth.dim);
    read(s, "n_base", "synth", c.synth.n_base);
    read(s, "n_val", "synth", c.synth.n_val);
    read(s, "n_novel", "synth", c.synth.n_novel);
    read(s, "per_class", "synth", c.synth.per_class);
    read(s, "sigma", "synth", c.synth.sigma);
    read(s, "sparsity", "synth", c.synth.sparsity);
    read(s, "min_angle", "synth", c.synth.min_angle);
    prefixed("synth", [&] { c.synth.validate(); });
  }

  if (j.contains("checkpoints")) {
    const auto& k = j.at("checkpoints");
    allow_keys(k, "checkpoints", {"pretrain", "metatrain"});
    read_path(k, "pretrain", "checkpoints", c.pretrain_checkpoint);
    read_path(k, "metatrain", "checkpoints", c.metatrain_checkpoint);
  }

  if (j.contains("reports")) {
    const auto& r = j.at("reports");
    allow_keys(r, "reports", {"pretrain_log", "metatrain_log", "eval", "ablation", "viz"});
    read_path(r, "pretrain_log", "reports", c.pretrain_log);
    read_path(r, "metatrain_log", "reports", c.metatrain_log);
    read_path(r, "eval", "reports", c.eval_report);
    read_path(r, "ablation", "reports", c.ablation_report);
    read_path(r, "viz", "reports", c.viz_csv);
  }

  if (j.contains("pretrain")) read_sgd(j.at("pretrain"), "pretrain", c.pretrain, false);
  if (j.contains("metatrain")) {
    read_sgd(j.at("metatrain"), "metatrain", c.metatrain, true);
    if (j.at("metatrain").contains("episode")) {
      read_episode(j.at("metatrain").at("episode"), "metatrain.episode", c.meta_episode);
    }
  }

  if (j.contains("eval")) {
    read_episode(j.at("eval"), "eval", c.eval_episode, {"episodes"});
    read(j.at("eval"), "episodes", "eval", c.eval_episodes);
  }

  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    allow_keys(a, "ablation", {"episodes", "shots"});
    read(a, "episodes", "ablation", c.ablation_episodes);
    if (a.contains("shots")) {
      std::vector<std::size_t> shots;
      read(a, "shots", "ablation", shots);
      if (shots.size() != 2 || shots[0] < 1 || shots[1] < 1) {
        config_error("field 'ablation.shots' must be two positive shot counts");
      }
      c.ablation_shots_low = shots[0];
      c.ablation_shots_high = shots[1];
    }
  }

  if (j.contains("viz")) {
    const auto& v = j.at("viz");
    allow_keys(v, "viz", {"K", "Q", "episode", "variants"});
    read(v, "K", "viz", c.viz.shots);
    read(v, "Q", "viz", c.viz.queries);
    read(v, "episode", "viz", c.viz.episode);
    if (v.contains("variants")) {
      std::vector<std::string> names;
      read(v, "variants", "viz", names);
      c.viz.variants.clear();
      for (const auto& n : names) c.viz.variants.push_back(parse_variant(n));
    }
  }

  if (j.contains("variant")) {
    std::string v;
    read(j, "variant", "", v);
    c.variant = parse_variant(v);
  }
  if (j.contains("gen_input_mode")) {
    std::string m;
    read(j, "gen_input_mode", "", m);
    c.gen_input_mode = parse_gen_input_mode(m);
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error&) {
    detail::config_error("cannot read config file " + path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    detail::config_error("config file is not valid JSON: " + std::string(e.what()));
  }
  return parse_run_config(j, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

/// Fully resolved configuration, embedded in every report.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  auto sgd = [](const SgdConfig& s, bool meta) {
    nlohmann::ordered_json j{{"lr", s.lr}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay},
                             {"epochs", s.epochs}};
    if (meta) {
      j["episodes_per_epoch"] = s.episodes_per_epoch;
      j["val_episodes"] = s.val_episodes;
    } else {
      j["batch_size"] = s.batch_size;
    }
    return j;
  };
  auto episode = [](const EpisodeSpec& e) { return nlohmann::ordered_json{{"N", e.ways}, {"K", e.shots}, {"Q", e.queries}}; };
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["ricp_seed"] = c.ricp_seed;
  j["data"] = {{"embeddings", c.resolve(c.data.embeddings).string()},
               {"attributes", c.resolve(c.data.attributes).string()},
               {"split", c.resolve(c.data.split).string()},
               {"ground_truth", c.resolve(c.ground_truth).string()},
               {"attribute_level", c.attribute_level == AttributeLevel::category ? "category" : "image"},
               {"normalize_attributes", c.normalize_attributes_max ? "max" : "none"}};
  j["synth"] = {{"M", c.synth.num_attributes}, {"d", c.synth.dim},           {"n_base", c.synth.n_base},
                {"n_val", c.synth.n_val},      {"n_novel", c.synth.n_novel}, {"per_class", c.synth.per_class},
                {"sigma", c.synth.sigma},      {"sparsity", c.synth.sparsity}, {"min_angle", c.synth.min_angle}};
  j["checkpoints"] = {{"pretrain", c.resolve(c.pretrain_checkpoint).string()},
                      {"metatrain", c.resolve(c.metatrain_checkpoint).string()}};
  j["pretrain"] = sgd(c.pretrain, false);
  j["metatrain"] = sgd(c.metatrain, true);
  j["metatrain"]["episode"] = episode(c.meta_episode);
  j["eval"] = episode(c.eval_episode);
  j["eval"]["episodes"] = c.eval_episodes;
  j["ablation"] = {{"episodes", c.ablation_episodes}, {"shots", {c.ablation_shots_low, c.ablation_shots_high}}};
  j["variant"] = std::string(to_string(c.variant));
  j["gen_input_mode"] = std::string(to_string(c.gen_input_mode));
  return j;
}

}  // namespace cpn::cli

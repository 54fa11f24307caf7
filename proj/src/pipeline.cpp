#include "propcache/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>

#include "propcache/errors.hpp"
#include "propcache/propmine.hpp"
#include "propcache/synth.hpp"
#include "propcache/tensor_io.hpp"

namespace propcache {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum class SeedSalt : std::uint64_t { kCluster = 0, kMpgInit = 1, kContrast = 2, kCache = 3 };

std::uint64_t derived_seed(const RunConfig& cfg, SeedSalt salt) {
  return cfg.seed * 4 + static_cast<std::uint64_t>(salt);
}

struct Inputs {
  Manifest manifest;
  EmbeddingBundle bundle;
  DescriptionSet descs;
};

Inputs load_inputs(const RunConfig& cfg) {
  Inputs in;
  in.manifest = Manifest::read(cfg.data / "manifest.json");
  in.bundle = validate_bundle(in.manifest);
  in.descs = load_descriptions(in.manifest, in.bundle);
  return in;
}

std::size_t props_for(const RunConfig& cfg, const Manifest& m) {
  const std::size_t p = cfg.props ? cfg.props : m.props;
  if (p < 1) throw ArgumentError("M must be >= 1");
  return p;
}

void require_artifact(const fs::path& p, const char* stage) {
  if (!fs::exists(p))
    throw DataError("missing " + p.string() + "; run `" + stage + "` first");
}

class StageTimer {
 public:
  StageTimer(const RunConfig& cfg, std::string stage)
      : cfg_(cfg), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    if (!cfg_.record_timings) return;
    try {
      const fs::path path = cfg_.out / artifacts::kTimings;
      json j = json::object();
      if (fs::exists(path)) j = read_json_file(path);
      j["format_version"] = kFormatVersion;
      j["seconds"][stage_] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
      write_text_file(path, j.dump(2) + "\n");
    } catch (...) {
      // Timings are advisory; never mask the stage's own outcome.
    }
  }

 private:
  const RunConfig& cfg_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

MpgConfig mpg_config(const RunConfig& cfg, std::size_t props, std::size_t dim) {
  MpgConfig m;
  m.props = props;
  m.dim = dim;
  m.layers = cfg.mpg_layers;
  m.hidden = cfg.mpg_hidden;
  m.heads = cfg.mpg_heads;
  m.seed = derived_seed(cfg, SeedSalt::kMpgInit);
  return m;
}

ContrastConfig contrast_config(const RunConfig& cfg) {
  ContrastConfig c = cfg.contrast;
  c.seed = derived_seed(cfg, SeedSalt::kContrast);
  return c;
}

CacheTrainConfig cache_config(const RunConfig& cfg) {
  CacheTrainConfig c = cfg.cache;
  c.seed = derived_seed(cfg, SeedSalt::kCache);
  return c;
}

json config_echo(const RunConfig& cfg, std::size_t props, std::size_t k) {
  const ContrastConfig cc = contrast_config(cfg);
  const CacheTrainConfig ct = cache_config(cfg);
  return {{"seed", cfg.seed},
          {"M", props},
          {"k_clusters", k},
          {"confusion_top", cfg.confusion_top},
          {"mpg", {{"layers", cfg.mpg_layers}, {"hidden", cfg.mpg_hidden}, {"heads", cfg.mpg_heads}}},
          {"contrast",
           {{"tau", cc.tau},
            {"negatives", cc.negatives},
            {"hard_frac_start", cc.hard_frac_start},
            {"hard_frac_end", cc.hard_frac_end},
            {"epochs", cc.epochs},
            {"lr", cc.lr},
            {"batch", cc.batch},
            {"normalize_tokens", cc.normalize_tokens}}},
          {"cache",
           {{"epochs", ct.epochs},
            {"lr", ct.lr},
            {"batch", ct.batch},
            {"warmup_fraction", ct.warmup_fraction},
            {"beta_s", cfg.sharpness},
            {"logit_scale", cfg.logit_scale}}},
          {"adamw",
           {{"beta1", cc.adamw.beta1},
            {"beta2", cc.adamw.beta2},
            {"eps", cc.adamw.eps},
            {"weight_decay", cc.adamw.weight_decay}}}};
}

void flatten_numbers(const json& j, const std::string& prefix, std::map<std::string, double>& out) {
  if (j.is_number()) {
    out[prefix] = j.get<double>();
  } else if (j.is_object()) {
    for (const auto& [key, val] : j.items()) {
      if (prefix.empty() && (key == "config" || key == "format_version")) continue;
      flatten_numbers(val, prefix.empty() ? key : prefix + "." + key, out);
    }
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i)
      flatten_numbers(j[i], prefix + "[" + std::to_string(i) + "]", out);
  } else if (j.is_boolean()) {
    out[prefix] = j.get<bool>() ? 1.0 : 0.0;
  }
}

}  // namespace

json read_json_file(const fs::path& path) {
  const auto raw = read_file_bytes(path);
  try {
    return json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void stage_cluster(const RunConfig& cfg) {
  StageTimer timer(cfg, "cluster");
  const Inputs in = load_inputs(cfg);
  const DescriptionPool pool = build_pool(in.descs);
  const std::size_t k = cfg.k_clusters.value_or(
      std::max(default_cluster_count(in.bundle.num_classes), props_for(cfg, in.manifest)));
  save_clusters(cfg.out, kmeans(pool.plain, k, derived_seed(cfg, SeedSalt::kCluster)));
}

void stage_select(const RunConfig& cfg) {
  StageTimer timer(cfg, "select");
  const Inputs in = load_inputs(cfg);
  require_artifact(cfg.out / "clusters.json", "cluster");
  const ClusterSet clusters = load_clusters(cfg.out);
  const PropertyAssignment a = assemble_assignment(in.bundle, in.descs, clusters,
                                                   props_for(cfg, in.manifest), cfg.confusion_top);
  save_assignment(cfg.out / artifacts::kAssignment, a);
}

void stage_train_mpg(const RunConfig& cfg) {
  StageTimer timer(cfg, "train-mpg");
  const Inputs in = load_inputs(cfg);
  require_artifact(cfg.out / artifacts::kAssignment, "select");
  const PropertyAssignment a = load_assignment(cfg.out / artifacts::kAssignment);
  const MpgParams init = init_params(mpg_config(cfg, a.m, in.bundle.dim));
  const ContrastConfig cc = contrast_config(cfg);
  const MpgTrainResult res = train_mpg(in.bundle, a, build_pool(in.descs), init, cc);
  save_mpg(cfg.out / artifacts::kMpgDir, res.params);
  save_trace(cfg.out / artifacts::kMpgTrace, res.trace, cc);
}

void stage_train_cache(const RunConfig& cfg) {
  StageTimer timer(cfg, "train-cache");
  const Inputs in = load_inputs(cfg);
  require_artifact(cfg.out / artifacts::kMpgDir / "mpg.json", "train-mpg");
  const MpgParams params = load_mpg(cfg.out / artifacts::kMpgDir);
  const HybridCache built = build_caches(in.bundle, params, cfg.sharpness, cfg.logit_scale);
  const CacheTrainConfig ct = cache_config(cfg);
  const CacheTrainResult res = train_cache(in.bundle, built, params, ct);
  save_cache(cfg.out / artifacts::kCacheDir, res.cache);
  json trace = {{"format_version", kFormatVersion},
                {"epoch_loss", res.epoch_loss},
                {"alpha", res.cache.alpha},
                {"beta", res.cache.beta}};
  write_text_file(cfg.out / artifacts::kCacheTrace, trace.dump(2) + "\n");
}

json stage_eval(const RunConfig& cfg) {
  StageTimer timer(cfg, "eval");
  const Inputs in = load_inputs(cfg);
  require_artifact(cfg.out / artifacts::kMpgDir / "mpg.json", "train-mpg");
  const MpgParams params = load_mpg(cfg.out / artifacts::kMpgDir);
  const fs::path cache_dir = cfg.out / artifacts::kCacheDir;
  const HybridCache cache = fs::exists(cache_dir / "cache.json")
                                ? load_cache(cache_dir)
                                : build_caches(in.bundle, params, cfg.sharpness, cfg.logit_scale);
  if (cache.num_classes() != in.bundle.num_classes || cache.m != params.cfg.props)
    throw DataError("cache checkpoint does not match the bundle and generator");

  const EmbeddingBundle& b = in.bundle;
  if (b.query.empty()) throw EmptyInput("bundle has no query images");
  std::size_t hits[4] = {0, 0, 0, 0};
  std::vector<Tensor> tokens;
  for (const std::size_t j : b.query) {
    tokens.push_back(property_tokens(params, b.patches[j]));
    const ScoreBreakdown s = hybrid_scores(b.class_token(j), tokens.back(), cache);
    const std::size_t y = b.labels[j];
    hits[0] += ops::argmax(s.s_clip) == y;
    hits[1] += ops::argmax(s.s_cls_cache) == y;
    hits[2] += ops::argmax(s.s_mp_cache) == y;
    hits[3] += ops::argmax(s.s_ours) == y;
  }
  const double q = static_cast<double>(b.query.size());

  json angles = json::array();
  for (const auto& a : mutual_token_angles(tokens))
    angles.push_back({{"slots", {a.a, a.b}}, {"mean_degrees", a.mean_degrees}});

  std::size_t k = 0, fallbacks = 0;
  if (fs::exists(cfg.out / "clusters.json")) k = load_clusters(cfg.out).k;
  if (fs::exists(cfg.out / artifacts::kAssignment)) {
    for (const auto& c : load_assignment(cfg.out / artifacts::kAssignment).classes)
      fallbacks += c.fallbacks.size();
  }

  json report = {{"format_version", kFormatVersion},
                 {"accuracies",
                  {{"zero_shot", hits[0] / q},
                   {"cls_cache_only", hits[1] / q},
                   {"mp_cache_only", hits[2] / q},
                   {"combined", hits[3] / q}}},
                 {"alpha", cache.alpha},
                 {"beta", cache.beta},
                 {"trained", cache.trained},
                 {"query_count", b.query.size()},
                 {"num_classes", b.num_classes},
                 {"token_angles", angles},
                 {"cluster_fallbacks", fallbacks},
                 {"config", config_echo(cfg, params.cfg.props, k)}};
  if (in.manifest.has("plant")) {
    const PlantRecord plant = load_plant(cfg.data);
    if (plant.description_property.size() == b.num_classes)
      report["plant_alignment"] = alignment_rate(b, in.descs, params, plant);
  }
  write_text_file(cfg.out / artifacts::kReport, report.dump(2) + "\n");
  return report;
}

json run_all(const RunConfig& cfg) {
  stage_cluster(cfg);
  stage_select(cfg);
  stage_train_mpg(cfg);
  stage_train_cache(cfg);
  return stage_eval(cfg);
}

std::string report_diff(const json& a, const json& b) {
  for (const json* r : {&a, &b}) {
    if (!r->is_object() || !r->contains("accuracies"))
      throw FormatError("not a report: missing \"accuracies\"");
  }
  std::map<std::string, double> fa, fb;
  flatten_numbers(a, "", fa);
  flatten_numbers(b, "", fb);
  std::string out;
  char line[256];
  for (const auto& [key, va] : fa) {
    const auto it = fb.find(key);
    if (it == fb.end()) {
      out += key + ": only in first\n";
    } else if (va != it->second) {
      std::snprintf(line, sizeof line, "%s: %.6f -> %.6f (%+.6f)\n", key.c_str(), va, it->second,
                    it->second - va);
      out += line;
    }
  }
  for (const auto& [key, vb] : fb) {
    if (!fa.count(key)) out += key + ": only in second\n";
  }
  return out.empty() ? "no differences\n" : out;
}

}  // namespace propcache

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "propcache/cache.hpp"
#include "propcache/contrast.hpp"

namespace propcache {

// Stage artifacts inside a run directory.
namespace artifacts {
inline constexpr const char* kAssignment = "assignment.json";
inline constexpr const char* kMpgDir = "mpg";
inline constexpr const char* kMpgTrace = "train_mpg.json";
inline constexpr const char* kCacheDir = "cache";
inline constexpr const char* kCacheTrace = "train_cache.json";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kTimings = "timings.json";
}  // namespace artifacts

struct RunConfig {
  std::filesystem::path data;  // directory holding manifest.json
  std::filesystem::path out;   // run directory
  std::size_t props = 0;       // 0: take M from the manifest
  std::optional<std::size_t> k_clusters;  // empty: max(ceil(N/2), M)
  std::size_t confusion_top = 5;
  std::size_t mpg_layers = 2;
  std::size_t mpg_hidden = 0;  // 0: D
  std::size_t mpg_heads = 1;
  ContrastConfig contrast;
  CacheTrainConfig cache;
  double sharpness = kDefaultSharpness;
  double logit_scale = kDefaultLogitScale;
  std::uint64_t seed = 0;
  bool record_timings = true;  // timings go to timings.json, never into report.json
};

void stage_cluster(const RunConfig& cfg);
void stage_select(const RunConfig& cfg);
void stage_train_mpg(const RunConfig& cfg);
void stage_train_cache(const RunConfig& cfg);
nlohmann::json stage_eval(const RunConfig& cfg);
nlohmann::json run_all(const RunConfig& cfg);

// Field-wise deltas of the numeric report fields, or "no differences".
// Throws FormatError when either document is not a report.
std::string report_diff(const nlohmann::json& a, const nlohmann::json& b);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace propcache

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "propcache/autodiff.hpp"
#include "propcache/datastore.hpp"
#include "propcache/mpg.hpp"
#include "propcache/optim.hpp"

namespace propcache {

inline constexpr double kDefaultSharpness = 5.5;
inline constexpr double kDefaultLogitScale = 100.0;

struct HybridCache {
  std::size_t m = 0;
  Tensor class_prompts;  // N×D, zero-shot weights
  Tensor class_keys;     // N×D
  Tensor class_labels;   // N×N identity
  Tensor prop_keys;      // (N·M)×D, row n·M + i
  Tensor prop_labels;    // (N·M)×N, one-hot by owning class
  double alpha = 1.0;
  double beta = 1.0;
  double sharpness = kDefaultSharpness;  // β_s of φ
  double logit_scale = kDefaultLogitScale;
  bool trained = false;

  std::size_t num_classes() const { return class_keys.rows(); }
};

struct ScoreBreakdown {
  std::vector<double> s_clip;
  std::vector<double> s_cls_cache;
  std::vector<double> s_mp_cache;
  std::vector<double> s_ours;
};

std::vector<double> zero_shot(std::span<const double> f_cls, const Tensor& class_prompts);

// exp(−β_s·(1 − x)).
double phi(double x, double sharpness);

// φ(f·keysᵀ)·labels.
std::vector<double> cache_logits(std::span<const double> f, const Tensor& keys,
                                 const Tensor& labels, double sharpness);

// Unit-normalized property tokens of one image, M×D.
Tensor property_tokens(const MpgParams& params, const Tensor& patches);

// Prototype caches from the support split. Throws DegeneratePrototype when a
// mean has norm below 1e-8.
HybridCache build_caches(const EmbeddingBundle& bundle, const MpgParams& params,
                         double sharpness = kDefaultSharpness,
                         double logit_scale = kDefaultLogitScale);

ScoreBreakdown hybrid_scores(std::span<const double> f_cls, const Tensor& tokens,
                             const HybridCache& cache);

struct Prediction {
  std::size_t label = 0;
  ScoreBreakdown scores;
};
Prediction predict(std::span<const double> f_cls, const Tensor& tokens, const HybridCache& cache);

struct CacheTrainConfig {
  std::size_t epochs = 15;
  double lr = 1e-3;
  std::size_t batch = 128;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
  AdamWConfig adamw{};

  void validate() const;
};

// lr·min(1, (step + 1)/W), W = ceil(warmup_fraction · total_steps).
double warmup_lr(std::size_t step, std::size_t total_steps, const CacheTrainConfig& cfg);

// Differentiable pieces of the fine-tuning objective over a batch of B images.
struct CacheVars {
  ad::Var class_keys, prop_keys, alpha, beta;
};
struct CacheBatch {
  Tensor f_cls;                // B×D
  std::vector<Tensor> tokens;  // M entries of B×D, slot-major
  Tensor one_hot;              // B×N
};
// Σ_j CE(s_cls_cache_j) + CE(s_mp_cache_j).
ad::Var cache_loss(const CacheVars& vars, const CacheBatch& batch, const HybridCache& cache);

CacheBatch make_cache_batch(const EmbeddingBundle& bundle, std::span<const std::size_t> images,
                            const std::vector<Tensor>& tokens_per_image);

struct CacheTrainResult {
  HybridCache cache;
  std::vector<double> epoch_loss;  // mean per image
};

// Trains keys, α and β with the generator frozen. Keys are renormalized and
// α, β clamped at 0 after every step.
CacheTrainResult train_cache(const EmbeddingBundle& bundle, const HybridCache& cache,
                             const MpgParams& params, const CacheTrainConfig& cfg);

void save_cache(const std::filesystem::path& dir, const HybridCache& cache);
HybridCache load_cache(const std::filesystem::path& dir);

}  // namespace propcache

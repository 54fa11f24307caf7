#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "propcache/autodiff.hpp"
#include "propcache/datastore.hpp"
#include "propcache/mpg.hpp"
#include "propcache/optim.hpp"
#include "propcache/propmine.hpp"
#include "propcache/rng.hpp"
#include "propcache/synth.hpp"

namespace propcache {

struct ContrastConfig {
  double tau = 0.3;
  std::size_t negatives = 100;
  double hard_frac_start = 0.1;
  double hard_frac_end = 0.4;
  std::size_t epochs = 30;
  double lr = 5e-4;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  bool normalize_tokens = true;
  AdamWConfig adamw{};

  // Throws ArgumentError on out-of-range fields.
  void validate() const;
};

struct NegativeQuota {
  std::size_t hard = 0;
  std::size_t general = 0;
  friend bool operator==(const NegativeQuota&, const NegativeQuota&) = default;
};

// Hard fraction rises linearly from hard_frac_start at epoch 0 to
// hard_frac_end at the last epoch.
NegativeQuota schedule(std::size_t epoch, const ContrastConfig& cfg);

// Moves a quota off an empty pool. Throws NoPositives when both pools are empty.
NegativeQuota fit_quota(NegativeQuota quota, std::size_t hard_pool, std::size_t general_pool);

// `count` entries of `pool`: distinct when the pool is large enough, otherwise
// drawn with replacement.
std::vector<std::size_t> sample_pool(const std::vector<std::size_t>& pool, std::size_t count,
                                     Rng& rng);

struct ContrastItem {
  std::size_t image = 0;
  std::size_t slot = 0;
  std::size_t positive = 0;  // pool row
  std::vector<std::size_t> hard;
  std::vector<std::size_t> general;
};

// Draw order is positive, hard, general.
ContrastItem sample_item(const ClassProperties& props, std::size_t image, std::size_t slot,
                         NegativeQuota quota, Rng& rng);

// −log softmax(s/τ)[0] over s = [token·w_p, token·W_hnᵀ, token·W_gnᵀ]. `token`
// is a 1×D row; callers normalize it. Returns a 1×1 node.
ad::Var info_nce(const ad::Var& token, const Tensor& positive, const Tensor& hard,
                 const Tensor& general, double tau);
double info_nce_value(std::span<const double> token, const Tensor& positive, const Tensor& hard,
                      const Tensor& general, double tau);

// Property tokens of one image as fed to similarities.
ad::Var similarity_tokens(const MpgParams& params, const ad::Var& patches, bool normalize);

// Σ over `images` and slots of info_nce with freshly sampled pools. Samples
// are drawn image by image, slot by slot, from `rng`.
ad::Var total_property_loss(const EmbeddingBundle& bundle, const MpgParams& params,
                            const PropertyAssignment& assignment, const DescriptionPool& pool,
                            std::span<const std::size_t> images, NegativeQuota quota,
                            const ContrastConfig& cfg, Rng& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;  // per (image, slot) term
  NegativeQuota quota;
};

struct MpgTrainResult {
  MpgParams params;
  std::vector<EpochRecord> trace;
};

// Minibatch AdamW on total_property_loss over the support split. `init` is
// cloned, never modified. Throws NonFiniteLoss with epoch and step context.
MpgTrainResult train_mpg(const EmbeddingBundle& bundle, const PropertyAssignment& assignment,
                         const DescriptionPool& pool, const MpgParams& init,
                         const ContrastConfig& cfg);

void save_trace(const std::filesystem::path& path, const std::vector<EpochRecord>& trace,
                const ContrastConfig& cfg);

// Fraction of (support image, slot i) pairs whose nearest own-class extended
// description is one planted for property i.
double alignment_rate(const EmbeddingBundle& bundle, const DescriptionSet& descs,
                      const MpgParams& params, const PlantRecord& plant, bool normalize = true);

}  // namespace propcache

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "propcache/autodiff.hpp"
#include "propcache/tensor.hpp"

namespace propcache {

struct MpgConfig {
  std::size_t props = 3;   // M, number of property tokens
  std::size_t dim = 0;     // D
  std::size_t layers = 2;  // L
  std::size_t hidden = 0;  // H of each FFN group; 0 means D
  std::size_t heads = 1;
  bool layer_norm = true;
  double ln_eps = 1e-5;
  std::uint64_t seed = 0;

  std::size_t hidden_width() const { return hidden ? hidden : dim; }
};

struct MpgLayer {
  ad::Var wq, wk, wv, wo;          // D×D
  ad::Var attn_gain, attn_bias;    // 1×D
  std::vector<ad::Var> ffn_w1;     // per token group: D×H
  std::vector<ad::Var> ffn_b1;     // 1×H
  std::vector<ad::Var> ffn_w2;     // H×D
  std::vector<ad::Var> ffn_b2;     // 1×D
  ad::Var ffn_gain, ffn_bias;      // 1×D
};

// Learnable property-token seeds plus L cross-attention layers. Parameters are
// autodiff leaves, so copies of MpgParams share storage; use clone() for an
// independent copy.
struct MpgParams {
  MpgConfig cfg;
  ad::Var seeds;  // M×D
  std::vector<MpgLayer> layers;

  // Stable order, paired with names().
  std::vector<ad::Var> all() const;
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;
  MpgParams clone() const;
};

// Seeds and Q/K/V and first FFN layer ~ N(0, 0.02²); output projection and
// second FFN layer start at zero so a fresh generator is a pure residual path.
MpgParams init_params(const MpgConfig& cfg);

// One image: f_patch (P×D) -> property tokens (M×D). Differentiable w.r.t.
// params and patches.
ad::Var mpg_forward(const MpgParams& params, const ad::Var& patches);
Tensor mpg_tokens(const MpgParams& params, const Tensor& patches);

// Mean pairwise angle (degrees) between unit-normalized token slots, averaged
// over images. Entry order: (0,1), (0,2), ..., (M−2,M−1).
struct SlotAngle {
  std::size_t a = 0, b = 0;
  double mean_degrees = 0.0;
};
std::vector<SlotAngle> mutual_token_angles(const std::vector<Tensor>& tokens_per_image);

// Checkpoint directory: one PCT1 file per parameter plus mpg.json.
void save_mpg(const std::filesystem::path& dir, const MpgParams& params);
MpgParams load_mpg(const std::filesystem::path& dir);

}  // namespace propcache

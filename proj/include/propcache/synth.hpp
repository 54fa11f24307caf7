#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "propcache/datastore.hpp"
#include "propcache/tensor.hpp"

namespace propcache {

// Planted structure for desk-scale runs.
//
// Classes come in sibling pairs whose global directions differ only by
// `sibling_gap`, so the class token alone barely separates them. Each class
// carries `props` local properties, visible only in the patches. Property i
// of a class is a class-specific variant of a shared property type; types are
// partitioned into `props` families and slot i always draws from family i.
// There are max(props, ceil(N/2)) types, matching the default cluster count.
// The class direction leans towards its property types with decreasing
// weight, which is what orders the property clusters by support similarity.
struct SynthConfig {
  std::size_t classes = 10;
  std::size_t shots = 16;
  std::size_t queries = 20;
  std::size_t dim = 64;
  std::size_t patches = 9;
  std::size_t props = 3;
  double noise = 0.1;
  std::uint64_t seed = 7;

  std::size_t descriptions_per_property = 6;
  double sibling_gap = 0.01;
  double property_spread = 0.6;      // weight of the class-specific variant over its type
  double prompt_noise_ratio = 0.02;  // prompt noise relative to `noise`
  double extended_class_weight = 0.5;
};

struct PlantRecord {
  Tensor class_directions;     // N×D
  Tensor property_directions;  // (N·M)×D, row n·M + i
  std::vector<std::vector<std::size_t>> property_types;          // [class][slot] -> type
  std::vector<std::vector<std::size_t>> description_property;    // [class][desc] -> slot
  std::size_t type_count = 0;
};

struct SynthResult {
  EmbeddingBundle bundle;
  DescriptionSet descriptions;
  PlantRecord plant;
};

// Throws ArgumentError on invalid configuration.
SynthResult gen_synthetic(const SynthConfig& cfg);

// Writes manifest.json, tensors, descriptions.jsonl and plant.json into `dir`.
void write_synthetic(const std::filesystem::path& dir, const SynthConfig& cfg,
                     const SynthResult& result);
PlantRecord load_plant(const std::filesystem::path& dir);

}  // namespace propcache

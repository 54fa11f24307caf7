#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "propcache/tensor.hpp"

namespace propcache {

inline constexpr int kFormatVersion = 1;
inline constexpr double kUnitNormTolerance = 1e-6;
inline constexpr const char* kExtendedTemplate = "{class name}, {description}";

struct FileEntry {
  std::string path;  // relative to the manifest directory
  Shape shape;
  std::uint32_t crc32 = 0;
};

// manifest.json: version, D, N, K, M, seed and a checksummed file table.
struct Manifest {
  int version = kFormatVersion;
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::size_t shots = 0;
  std::size_t props = 0;
  std::uint64_t seed = 0;
  std::string extended_template = kExtendedTemplate;
  std::map<std::string, FileEntry> files;
  std::filesystem::path root;  // directory holding manifest.json; not serialized

  static Manifest read(const std::filesystem::path& manifest_path);
  void write(const std::filesystem::path& manifest_path) const;

  bool has(const std::string& name) const { return files.count(name) > 0; }
  std::filesystem::path resolve(const std::string& name) const;

  // Loads a PCT1 file and checks it against the table's shape and checksum.
  Tensor load(const std::string& name) const;
  // Writes a PCT1 file under root and records it.
  void store(const std::string& name, const std::string& rel_path, const Tensor& t);
  // Non-tensor files: crc32 covers the whole file.
  std::vector<std::uint8_t> load_raw(const std::string& name) const;
  void store_raw(const std::string& name, const std::string& rel_path, const std::string& bytes,
                 Shape logical_shape);
};

// Validated, immutable view of the images and class prompts.
struct EmbeddingBundle {
  std::size_t dim = 0;
  std::size_t patch_count = 0;
  std::size_t num_classes = 0;
  std::size_t shots = 0;
  Tensor class_tokens;          // I×D, unit rows
  std::vector<Tensor> patches;  // I entries of P×D
  std::vector<std::size_t> labels;
  Tensor class_prompts;  // N×D, unit rows
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  std::vector<std::string> class_names;

  std::size_t image_count() const { return labels.size(); }
  std::span<const double> class_token(std::size_t image) const {
    return class_tokens.row_span(image);
  }
};

struct ClassDescriptions {
  std::string class_name;
  std::vector<std::string> texts;
  Tensor plain;     // cnt×D, name-free phrase embeddings (clustering input)
  Tensor extended;  // cnt×D, "{class name}, {description}" embeddings (supervision)

  std::size_t size() const { return texts.size(); }
};

struct DescriptionSet {
  std::vector<ClassDescriptions> classes;
  std::size_t num_classes() const { return classes.size(); }
};

// The only way into a bundle: every invariant is checked here, and the first
// violation is reported as ValidationError(<invariant>).
EmbeddingBundle validate_bundle(const Manifest& manifest);
EmbeddingBundle load_bundle(const std::filesystem::path& manifest_path);
DescriptionSet load_descriptions(const Manifest& manifest, const EmbeddingBundle& bundle);

// Writes the bundle and descriptions under manifest.root and fills the file
// table. Callers write manifest.json afterwards.
void store_bundle(Manifest& manifest, const EmbeddingBundle& bundle, const DescriptionSet& descs);

// Tensor names inside the manifest file table.
namespace files {
inline constexpr const char* kClassTokens = "class_tokens";
inline constexpr const char* kPatches = "patches";
inline constexpr const char* kLabels = "labels";
inline constexpr const char* kClassPrompts = "class_prompts";
inline constexpr const char* kSupport = "support_index";
inline constexpr const char* kQuery = "query_index";
inline constexpr const char* kDescriptions = "descriptions";
std::string desc_plain(std::size_t cls);
std::string desc_extended(std::size_t cls);
}  // namespace files

}  // namespace propcache

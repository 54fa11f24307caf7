#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "propcache/datastore.hpp"
#include "propcache/tensor.hpp"

namespace propcache {

// All descriptions of all classes, concatenated class-major.
struct DescriptionPool {
  Tensor plain;     // P_total×D
  Tensor extended;  // P_total×D, same row order
  std::vector<std::size_t> owner;        // row -> class
  std::vector<std::size_t> local_index;  // row -> index within its class
};

DescriptionPool build_pool(const DescriptionSet& descs);

struct ClusterSet {
  std::size_t k = 0;
  std::vector<std::size_t> assignment;  // pool row -> cluster
  Tensor centroids;                     // k×D
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // after seeding, then after every Lloyd iteration
  std::size_t iterations = 0;
  std::uint64_t seed = 0;

  std::vector<std::size_t> members(std::size_t cluster) const;
};

// Lloyd iterations from k-means++ seeding; stops at an assignment fixpoint or
// max_iter. Empty clusters are re-seeded with the point farthest from its
// centroid. Throws ArgumentError when k is 0 or exceeds the point count.
ClusterSet kmeans(const Tensor& points, std::size_t k, std::uint64_t seed,
                  std::size_t max_iter = 100);

std::size_t default_cluster_count(std::size_t num_classes);

// Mean cosine between K support tokens and P_i cluster members.
double score_cluster(const Tensor& support_tokens, const Tensor& members);

// Top-M cluster ids by descending score, ties to the lower id.
std::vector<std::size_t> select_top_m(std::span<const double> scores, std::size_t m);

// Classes whose zero-shot scores, averaged over class n's supports, are
// highest (class n excluded; fewer than `top` when N−1 < top).
std::vector<std::size_t> confusion_classes(const EmbeddingBundle& bundle, std::size_t cls,
                                           std::size_t top = 5);

struct FallbackEvent {
  std::size_t slot = 0;
  std::size_t selected_cluster = 0;
  std::size_t replacement_cluster = 0;
};

struct ClassProperties {
  std::vector<double> cluster_scores;         // S_pcs for every cluster
  std::vector<std::size_t> clusters;          // M ids, slot order
  std::vector<std::size_t> confusion;         // up to 5 class ids
  std::vector<std::vector<std::size_t>> positives;  // [slot] -> pool rows (own class)
  std::vector<std::size_t> hard;     // pool rows: positives of confusion classes
  std::vector<std::size_t> general;  // pool rows: positives of all remaining classes
  std::vector<FallbackEvent> fallbacks;

  // Union of all slots' positive rows.
  std::vector<std::size_t> all_positives() const;
};

struct PropertyAssignment {
  std::size_t m = 0;
  std::vector<ClassProperties> classes;
};

PropertyAssignment assemble_assignment(const EmbeddingBundle& bundle, const DescriptionSet& descs,
                                       const ClusterSet& clusters, std::size_t m,
                                       std::size_t confusion_top = 5);

// clusters.json (+ centroids PCT1 next to it) and assignment.json.
void save_clusters(const std::filesystem::path& dir, const ClusterSet& clusters);
ClusterSet load_clusters(const std::filesystem::path& dir);
void save_assignment(const std::filesystem::path& path, const PropertyAssignment& assignment);
PropertyAssignment load_assignment(const std::filesystem::path& path);

}  // namespace propcache

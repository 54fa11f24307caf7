#include "propcache/propmine.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "propcache/errors.hpp"
#include "propcache/rng.hpp"
#include "propcache/tensor_io.hpp"

namespace propcache {

using nlohmann::json;

DescriptionPool build_pool(const DescriptionSet& descs) {
  DescriptionPool pool;
  std::vector<Tensor> plain, extended;
  for (std::size_t n = 0; n < descs.num_classes(); ++n) {
    const auto& cd = descs.classes[n];
    if (cd.size() == 0) throw EmptyClass("class " + std::to_string(n) + " has no descriptions");
    plain.push_back(cd.plain);
    extended.push_back(cd.extended);
    for (std::size_t i = 0; i < cd.size(); ++i) {
      pool.owner.push_back(n);
      pool.local_index.push_back(i);
    }
  }
  pool.plain = ops::vstack(plain);
  pool.extended = ops::vstack(extended);
  return pool;
}

std::vector<std::size_t> ClusterSet::members(std::size_t cluster) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == cluster) out.push_back(i);
  return out;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Nearest centroid, ties to the lower id. Returns whether any label changed.
bool assign_points(const Tensor& x, const Tensor& c, std::vector<std::size_t>& labels) {
  bool changed = false;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c.rows(); ++j) {
      const double d = sq_dist(x.row_span(i), c.row_span(j));
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    if (labels[i] != best) {
      labels[i] = best;
      changed = true;
    }
  }
  return changed;
}

double inertia_of(const Tensor& x, const Tensor& c, const std::vector<std::size_t>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += sq_dist(x.row_span(i), c.row_span(labels[i]));
  return s;
}

void update_centroids(const Tensor& x, Tensor& c, const std::vector<std::size_t>& labels,
                      std::vector<std::size_t>& counts) {
  const std::size_t d = x.cols();
  Tensor sums = Tensor::matrix(c.rows(), d);
  counts.assign(c.rows(), 0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = sums.row_span(labels[i]);
    auto xi = x.row_span(i);
    for (std::size_t k = 0; k < d; ++k) row[k] += xi[k];
    ++counts[labels[i]];
  }
  for (std::size_t j = 0; j < c.rows(); ++j) {
    if (counts[j] == 0) continue;  // left for repair
    auto row = c.row_span(j);
    auto s = sums.row_span(j);
    for (std::size_t k = 0; k < d; ++k) row[k] = s[k] / static_cast<double>(counts[j]);
  }
}

// Moves the point farthest from its centroid into each empty cluster.
void repair_empty(const Tensor& x, Tensor& c, std::vector<std::size_t>& labels,
                  std::vector<std::size_t>& counts) {
  for (std::size_t j = 0; j < c.rows(); ++j) {
    if (counts[j] != 0) continue;
    std::size_t far = x.rows();
    double far_d = -1.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (counts[labels[i]] < 2) continue;
      const double d = sq_dist(x.row_span(i), c.row_span(labels[i]));
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far == x.rows()) throw std::logic_error("k-means repair found no donor cluster");
    --counts[labels[far]];
    labels[far] = j;
    counts[j] = 1;
    std::copy(x.row_span(far).begin(), x.row_span(far).end(), c.row_span(j).begin());
  }
}

}  // namespace

ClusterSet kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  const std::size_t n = points.rows();
  if (k == 0 || k > n) {
    throw ArgumentError("k-means needs 1 <= k <= " + std::to_string(n) + ", got " +
                        std::to_string(k));
  }
  Rng rng(seed);
  ClusterSet cs;
  cs.k = k;
  cs.seed = seed;
  cs.centroids = Tensor::matrix(k, points.cols());

  // k-means++ seeding.
  std::vector<bool> chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(n);
  for (std::size_t j = 0; j < k; ++j) {
    chosen[pick] = true;
    std::copy(points.row_span(pick).begin(), points.row_span(pick).end(),
              cs.centroids.row_span(j).begin());
    if (j + 1 == k) break;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points.row_span(i), cs.centroids.row_span(j)));
      if (!chosen[i]) total += d2[i];
    }
    if (total > 0.0) {
      double r = rng.uniform() * total;
      pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i] || d2[i] == 0.0) continue;
        pick = i;
        r -= d2[i];
        if (r < 0.0) break;
      }
    } else {
      // Remaining points coincide with chosen centers.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[rng.below(rest.size())];
    }
  }

  cs.assignment.assign(n, k);
  assign_points(points, cs.centroids, cs.assignment);
  double prev = inertia_of(points, cs.centroids, cs.assignment);
  cs.inertia_trace.push_back(prev);

  std::vector<std::size_t> counts;
  for (std::size_t it = 0; it < max_iter; ++it) {
    update_centroids(points, cs.centroids, cs.assignment, counts);
    repair_empty(points, cs.centroids, cs.assignment, counts);
    const bool changed = assign_points(points, cs.centroids, cs.assignment);
    const double cur = inertia_of(points, cs.centroids, cs.assignment);
    if (cur > prev + 1e-9 * std::max(1.0, prev))
      throw std::logic_error("k-means inertia increased");
    cs.inertia_trace.push_back(cur);
    prev = cur;
    cs.iterations = it + 1;
    if (!changed) break;
  }
  update_centroids(points, cs.centroids, cs.assignment, counts);
  repair_empty(points, cs.centroids, cs.assignment, counts);
  cs.inertia = inertia_of(points, cs.centroids, cs.assignment);
  return cs;
}

std::size_t default_cluster_count(std::size_t num_classes) { return (num_classes + 1) / 2; }

double score_cluster(const Tensor& support_tokens, const Tensor& members) {
  if (support_tokens.rows() == 0 || members.rows() == 0)
    throw EmptyInput("cluster scoring needs supports and members");
  double total = 0.0;
  for (std::size_t a = 0; a < support_tokens.rows(); ++a)
    for (std::size_t b = 0; b < members.rows(); ++b)
      total += ops::dot(support_tokens.row_span(a), members.row_span(b));
  return total / static_cast<double>(support_tokens.rows() * members.rows());
}

std::vector<std::size_t> select_top_m(std::span<const double> scores, std::size_t m) {
  if (m > scores.size()) {
    throw ArgumentError("need at least " + std::to_string(m) + " scored clusters, have " +
                        std::to_string(scores.size()));
  }
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  ids.resize(m);
  return ids;
}

std::vector<std::size_t> confusion_classes(const EmbeddingBundle& bundle, std::size_t cls,
                                           std::size_t top) {
  std::vector<double> avg(bundle.num_classes, 0.0);
  std::size_t count = 0;
  for (std::size_t i : bundle.support) {
    if (bundle.labels[i] != cls) continue;
    for (std::size_t c = 0; c < bundle.num_classes; ++c)
      avg[c] += ops::dot(bundle.class_token(i), bundle.class_prompts.row_span(c));
    ++count;
  }
  if (count == 0) throw EmptyInput("class " + std::to_string(cls) + " has no support images");
  std::vector<std::size_t> others;
  for (std::size_t c = 0; c < bundle.num_classes; ++c)
    if (c != cls) others.push_back(c);
  std::stable_sort(others.begin(), others.end(),
                   [&](std::size_t a, std::size_t b) { return avg[a] > avg[b]; });
  if (others.size() > top) others.resize(top);
  return others;
}

std::vector<std::size_t> ClassProperties::all_positives() const {
  std::vector<std::size_t> out;
  for (const auto& slot : positives) out.insert(out.end(), slot.begin(), slot.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

PropertyAssignment assemble_assignment(const EmbeddingBundle& bundle, const DescriptionSet& descs,
                                       const ClusterSet& clusters, std::size_t m,
                                       std::size_t confusion_top) {
  if (descs.num_classes() != bundle.num_classes)
    throw ArgumentError("description classes do not match bundle");
  const DescriptionPool pool = build_pool(descs);
  if (pool.owner.size() != clusters.assignment.size())
    throw ArgumentError("cluster assignment does not cover the description pool");
  if (m == 0) throw ArgumentError("M must be >= 1");

  std::vector<Tensor> cluster_members(clusters.k);
  std::vector<std::vector<std::size_t>> member_rows(clusters.k);
  for (std::size_t c = 0; c < clusters.k; ++c) {
    member_rows[c] = clusters.members(c);
    cluster_members[c] = ops::select_rows(pool.plain, member_rows[c]);
  }

  PropertyAssignment out;
  out.m = m;
  out.classes.resize(bundle.num_classes);
  for (std::size_t n = 0; n < bundle.num_classes; ++n) {
    ClassProperties& cp = out.classes[n];
    std::vector<std::size_t> sup_rows;
    for (std::size_t i : bundle.support)
      if (bundle.labels[i] == n) sup_rows.push_back(i);
    const Tensor support = ops::select_rows(bundle.class_tokens, sup_rows);

    cp.cluster_scores.resize(clusters.k);
    for (std::size_t c = 0; c < clusters.k; ++c) {
      cp.cluster_scores[c] = member_rows[c].empty()
                                 ? std::numeric_limits<double>::lowest()
                                 : score_cluster(support, cluster_members[c]);
    }
    cp.clusters = select_top_m(cp.cluster_scores, m);

    auto owned_rows = [&](std::size_t c) {
      std::vector<std::size_t> rows;
      for (std::size_t r : member_rows[c])
        if (pool.owner[r] == n) rows.push_back(r);
      return rows;
    };
    std::vector<std::size_t> owning;
    for (std::size_t c = 0; c < clusters.k; ++c)
      if (!owned_rows(c).empty()) owning.push_back(c);
    if (owning.empty()) throw NoPositives("class " + std::to_string(n) + " owns no descriptions");

    cp.positives.resize(m);
    for (std::size_t slot = 0; slot < m; ++slot) {
      const std::size_t sel = cp.clusters[slot];
      auto rows = owned_rows(sel);
      if (rows.empty()) {
        // Nearest owning cluster by centroid, preferring ones no slot uses yet.
        std::size_t best = clusters.k;
        double best_d = std::numeric_limits<double>::infinity();
        for (int pass = 0; pass < 2 && best == clusters.k; ++pass) {
          for (std::size_t c : owning) {
            const bool used =
                std::find(cp.clusters.begin(), cp.clusters.end(), c) != cp.clusters.end();
            if (pass == 0 && used) continue;
            const double d = sq_dist(clusters.centroids.row_span(sel), clusters.centroids.row_span(c));
            if (d < best_d) {
              best_d = d;
              best = c;
            }
          }
        }
        cp.fallbacks.push_back({slot, sel, best});
        rows = owned_rows(best);
      }
      cp.positives[slot] = std::move(rows);
    }
    cp.confusion = confusion_classes(bundle, n, confusion_top);
  }

  // Negative pools are built from the final positives of other classes.
  for (std::size_t n = 0; n < bundle.num_classes; ++n) {
    ClassProperties& cp = out.classes[n];
    const std::set<std::size_t> conf(cp.confusion.begin(), cp.confusion.end());
    for (std::size_t o = 0; o < bundle.num_classes; ++o) {
      if (o == n) continue;
      const auto pos = out.classes[o].all_positives();
      auto& dst = conf.count(o) ? cp.hard : cp.general;
      dst.insert(dst.end(), pos.begin(), pos.end());
    }
  }
  return out;
}

void save_clusters(const std::filesystem::path& dir, const ClusterSet& clusters) {
  save_tensor(dir / "centroids.pct1", clusters.centroids);
  json j = {{"format_version", kFormatVersion},
            {"k", clusters.k},
            {"seed", clusters.seed},
            {"inertia", clusters.inertia},
            {"iterations", clusters.iterations},
            {"inertia_trace", clusters.inertia_trace},
            {"assignment", clusters.assignment},
            {"centroids", {{"path", "centroids.pct1"},
                           {"shape", clusters.centroids.shape()},
                           {"crc32", payload_crc32(clusters.centroids)}}}};
  write_text_file(dir / "clusters.json", j.dump(2) + "\n");
}

ClusterSet load_clusters(const std::filesystem::path& dir) {
  ClusterSet cs;
  std::uint32_t crc = 0;
  std::string centroid_path;
  try {
    const auto raw = read_file_bytes(dir / "clusters.json");
    const json j = json::parse(raw.begin(), raw.end());
    cs.k = j.at("k").get<std::size_t>();
    cs.seed = j.at("seed").get<std::uint64_t>();
    cs.inertia = j.at("inertia").get<double>();
    cs.iterations = j.at("iterations").get<std::size_t>();
    cs.inertia_trace = j.at("inertia_trace").get<std::vector<double>>();
    cs.assignment = j.at("assignment").get<std::vector<std::size_t>>();
    centroid_path = j.at("centroids").at("path").get<std::string>();
    crc = j.at("centroids").at("crc32").get<std::uint32_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("clusters.json: ") + e.what());
  }
  cs.centroids = load_tensor(dir / centroid_path);
  if (payload_crc32(cs.centroids) != crc) throw ChecksumError("centroids checksum mismatch");
  if (cs.centroids.rows() != cs.k) throw ShapeHeaderMismatch("centroid count differs from k");
  for (std::size_t a : cs.assignment)
    if (a >= cs.k) throw ValidationError("clusters", "assignment outside [0, k)");
  return cs;
}

void save_assignment(const std::filesystem::path& path, const PropertyAssignment& assignment) {
  json classes = json::array();
  for (std::size_t n = 0; n < assignment.classes.size(); ++n) {
    const auto& cp = assignment.classes[n];
    json fb = json::array();
    for (const auto& f : cp.fallbacks)
      fb.push_back({{"slot", f.slot},
                    {"selected_cluster", f.selected_cluster},
                    {"replacement_cluster", f.replacement_cluster}});
    classes.push_back({{"class_id", n},
                       {"cluster_scores", cp.cluster_scores},
                       {"clusters", cp.clusters},
                       {"confusion", cp.confusion},
                       {"positives", cp.positives},
                       {"hard", cp.hard},
                       {"general", cp.general},
                       {"fallbacks", fb}});
  }
  json j = {{"format_version", kFormatVersion}, {"M", assignment.m}, {"classes", classes}};
  write_text_file(path, j.dump(2) + "\n");
}

PropertyAssignment load_assignment(const std::filesystem::path& path) {
  PropertyAssignment a;
  try {
    const auto raw = read_file_bytes(path);
    const json j = json::parse(raw.begin(), raw.end());
    a.m = j.at("M").get<std::size_t>();
    for (const auto& c : j.at("classes")) {
      ClassProperties cp;
      cp.cluster_scores = c.at("cluster_scores").get<std::vector<double>>();
      cp.clusters = c.at("clusters").get<std::vector<std::size_t>>();
      cp.confusion = c.at("confusion").get<std::vector<std::size_t>>();
      cp.positives = c.at("positives").get<std::vector<std::vector<std::size_t>>>();
      cp.hard = c.at("hard").get<std::vector<std::size_t>>();
      cp.general = c.at("general").get<std::vector<std::size_t>>();
      for (const auto& f : c.at("fallbacks"))
        cp.fallbacks.push_back({f.at("slot").get<std::size_t>(),
                                f.at("selected_cluster").get<std::size_t>(),
                                f.at("replacement_cluster").get<std::size_t>()});
      if (cp.positives.size() != a.m)
        throw ValidationError("assignment", "class positives do not cover M slots");
      a.classes.push_back(std::move(cp));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("assignment.json: ") + e.what());
  }
  return a;
}

}  // namespace propcache

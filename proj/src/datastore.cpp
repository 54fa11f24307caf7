#include "propcache/datastore.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"
#include "propcache/errors.hpp"
#include "propcache/tensor_io.hpp"

namespace propcache {

using nlohmann::json;

namespace files {
std::string desc_plain(std::size_t cls) { return "desc_plain_" + std::to_string(cls); }
std::string desc_extended(std::size_t cls) { return "desc_extended_" + std::to_string(cls); }
}  // namespace files

Manifest Manifest::read(const std::filesystem::path& manifest_path) {
  json j;
  try {
    const auto bytes = read_file_bytes(manifest_path);
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError("manifest " + manifest_path.string() + ": " + e.what());
  }
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    m.dim = j.at("D").get<std::size_t>();
    m.num_classes = j.at("N").get<std::size_t>();
    m.shots = j.at("K").get<std::size_t>();
    m.props = j.at("M").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.extended_template = j.value("extended_template", std::string(kExtendedTemplate));
    for (const auto& [name, entry] : j.at("files").items()) {
      FileEntry fe;
      fe.path = entry.at("path").get<std::string>();
      fe.shape = entry.at("shape").get<Shape>();
      fe.crc32 = entry.at("crc32").get<std::uint32_t>();
      m.files.emplace(name, std::move(fe));
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest " + manifest_path.string() + ": " + e.what());
  }
  if (m.version != kFormatVersion)
    throw FormatError("unsupported manifest version " + std::to_string(m.version));
  m.root = manifest_path.parent_path();
  return m;
}

void Manifest::write(const std::filesystem::path& manifest_path) const {
  json j;
  j["format_version"] = kFormatVersion;
  j["version"] = version;
  j["D"] = dim;
  j["N"] = num_classes;
  j["K"] = shots;
  j["M"] = props;
  j["seed"] = seed;
  j["extended_template"] = extended_template;
  json table = json::object();
  for (const auto& [name, fe] : files) {
    table[name] = {{"path", fe.path}, {"shape", fe.shape}, {"crc32", fe.crc32}};
  }
  j["files"] = std::move(table);
  write_text_file(manifest_path, j.dump(2) + "\n");
}

std::filesystem::path Manifest::resolve(const std::string& name) const {
  auto it = files.find(name);
  if (it == files.end()) throw ValidationError("files", "manifest has no entry '" + name + "'");
  return root / it->second.path;
}

Tensor Manifest::load(const std::string& name) const {
  const auto path = resolve(name);
  if (!std::filesystem::exists(path))
    throw ValidationError("files", "missing file " + path.string());
  Tensor t = load_tensor(path);
  const FileEntry& fe = files.at(name);
  if (t.shape() != fe.shape) {
    throw ShapeHeaderMismatch(name + ": manifest shape " + shape_str(fe.shape) + " vs file " +
                              shape_str(t.shape()));
  }
  if (payload_crc32(t) != fe.crc32) throw ChecksumError(name + ": checksum differs from manifest");
  return t;
}

void Manifest::store(const std::string& name, const std::string& rel_path, const Tensor& t) {
  save_tensor(root / rel_path, t);
  files[name] = FileEntry{rel_path, t.shape(), payload_crc32(t)};
}

std::vector<std::uint8_t> Manifest::load_raw(const std::string& name) const {
  const auto path = resolve(name);
  if (!std::filesystem::exists(path))
    throw ValidationError("files", "missing file " + path.string());
  auto bytes = read_file_bytes(path);
  if (crc32_bytes(bytes) != files.at(name).crc32)
    throw ChecksumError(name + ": checksum differs from manifest");
  return bytes;
}

void Manifest::store_raw(const std::string& name, const std::string& rel_path,
                         const std::string& bytes, Shape logical_shape) {
  write_text_file(root / rel_path, bytes);
  const std::span<const std::uint8_t> view(reinterpret_cast<const std::uint8_t*>(bytes.data()),
                                           bytes.size());
  files[name] = FileEntry{rel_path, std::move(logical_shape), crc32_bytes(view)};
}

namespace {

void require(bool ok, const char* invariant, const std::string& detail) {
  if (!ok) throw ValidationError(invariant, detail);
}

void require_unit_rows(const Tensor& t, const std::string& what) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const double n = ops::norm(t.row_span(r));
    require(std::abs(n - 1.0) <= kUnitNormTolerance, "unit-norm",
            what + " row " + std::to_string(r) + " has norm " + std::to_string(n));
  }
}

std::vector<std::size_t> as_indices(const Tensor& t, std::size_t limit, const char* invariant,
                                    const std::string& what) {
  std::vector<std::size_t> out;
  out.reserve(t.size());
  for (double v : t.data()) {
    require(v >= 0.0 && v == std::floor(v) && v < static_cast<double>(limit), invariant,
            what + " entry " + std::to_string(v) + " outside [0, " + std::to_string(limit) + ")");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

struct JsonlClass {
  std::size_t class_id;
  std::string class_name;
  std::vector<std::string> descriptions;
};

std::vector<JsonlClass> parse_jsonl(const std::vector<std::uint8_t>& bytes) {
  std::vector<JsonlClass> out;
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("class_id").get<std::size_t>(), j.at("class_name").get<std::string>(),
                     j.at("descriptions").get<std::vector<std::string>>()});
    } catch (const json::exception& e) {
      throw FormatError("descriptions.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

EmbeddingBundle validate_bundle(const Manifest& manifest) {
  EmbeddingBundle b;
  b.dim = manifest.dim;
  b.num_classes = manifest.num_classes;
  b.shots = manifest.shots;
  require(b.dim >= 1 && b.num_classes >= 1, "shape", "D and N must be positive");

  b.class_tokens = manifest.load(files::kClassTokens);
  require(b.class_tokens.ndim() == 2 && b.class_tokens.cols() == b.dim, "shape",
          "class_tokens must be I×D");
  const std::size_t images = b.class_tokens.rows();

  const Tensor patches = manifest.load(files::kPatches);
  require(patches.ndim() == 3 && patches.shape()[0] == images && patches.shape()[2] == b.dim &&
              patches.shape()[1] >= 1,
          "shape", "patches must be I×P×D with P ≥ 1");
  b.patch_count = patches.shape()[1];

  const Tensor labels = manifest.load(files::kLabels);
  require(labels.ndim() == 1 && labels.size() == images, "shape", "labels must have I entries");
  b.labels = as_indices(labels, b.num_classes, "labels", "label");

  b.class_prompts = manifest.load(files::kClassPrompts);
  require(b.class_prompts.ndim() == 2 && b.class_prompts.rows() == b.num_classes &&
              b.class_prompts.cols() == b.dim,
          "shape", "class_prompts must be N×D");

  require_unit_rows(b.class_tokens, "class token");
  require_unit_rows(b.class_prompts, "class prompt");

  const Tensor support = manifest.load(files::kSupport);
  const Tensor query = manifest.load(files::kQuery);
  require(support.ndim() == 1 && query.ndim() == 1, "shape", "split indices must be rank 1");
  b.support = as_indices(support, images, "split", "support index");
  b.query = as_indices(query, images, "split", "query index");
  std::set<std::size_t> seen;
  for (std::size_t i : b.support) require(seen.insert(i).second, "split", "duplicate support index");
  for (std::size_t i : b.query)
    require(seen.insert(i).second, "split", "query index repeats or overlaps support");

  std::vector<std::size_t> per_class(b.num_classes, 0);
  for (std::size_t i : b.support) ++per_class[b.labels[i]];
  for (std::size_t n = 0; n < b.num_classes; ++n) {
    require(per_class[n] == b.shots, "shots",
            "class " + std::to_string(n) + " has " + std::to_string(per_class[n]) +
                " support images, expected K=" + std::to_string(b.shots));
  }

  b.patches.reserve(images);
  const std::size_t block = b.patch_count * b.dim;
  for (std::size_t i = 0; i < images; ++i) {
    std::vector<double> rows(patches.data().begin() + i * block,
                             patches.data().begin() + (i + 1) * block);
    b.patches.emplace_back(Shape{b.patch_count, b.dim}, std::move(rows));
  }

  b.class_names.resize(b.num_classes);
  for (std::size_t n = 0; n < b.num_classes; ++n) b.class_names[n] = "class_" + std::to_string(n);
  if (manifest.has(files::kDescriptions)) {
    for (const auto& c : parse_jsonl(manifest.load_raw(files::kDescriptions))) {
      if (c.class_id < b.num_classes) b.class_names[c.class_id] = c.class_name;
    }
  }
  return b;
}

EmbeddingBundle load_bundle(const std::filesystem::path& manifest_path) {
  return validate_bundle(Manifest::read(manifest_path));
}

DescriptionSet load_descriptions(const Manifest& manifest, const EmbeddingBundle& bundle) {
  const auto parsed = parse_jsonl(manifest.load_raw(files::kDescriptions));
  require(parsed.size() == bundle.num_classes, "classes",
          "descriptions cover " + std::to_string(parsed.size()) + " classes, bundle has " +
              std::to_string(bundle.num_classes));
  DescriptionSet set;
  set.classes.resize(bundle.num_classes);
  std::vector<bool> seen(bundle.num_classes, false);
  for (const auto& c : parsed) {
    require(c.class_id < bundle.num_classes && !seen[c.class_id], "classes",
            "class_id " + std::to_string(c.class_id) + " out of range or repeated");
    seen[c.class_id] = true;
    ClassDescriptions& cd = set.classes[c.class_id];
    cd.class_name = c.class_name;
    cd.texts = c.descriptions;
    const std::size_t cnt = cd.texts.size();
    if (cnt == 0) {
      cd.plain = Tensor::matrix(0, bundle.dim);
      cd.extended = Tensor::matrix(0, bundle.dim);
      continue;
    }
    cd.plain = manifest.load(files::desc_plain(c.class_id));
    cd.extended = manifest.load(files::desc_extended(c.class_id));
    for (const Tensor* t : {&cd.plain, &cd.extended}) {
      require(t->ndim() == 2 && t->rows() == cnt && t->cols() == bundle.dim, "shape",
              "class " + std::to_string(c.class_id) + " needs " + std::to_string(cnt) +
                  "×D plain and extended embeddings");
    }
    require_unit_rows(cd.plain, "plain description of class " + std::to_string(c.class_id));
    require_unit_rows(cd.extended, "extended description of class " + std::to_string(c.class_id));
  }
  return set;
}

void store_bundle(Manifest& manifest, const EmbeddingBundle& bundle, const DescriptionSet& descs) {
  const std::size_t images = bundle.image_count();
  manifest.dim = bundle.dim;
  manifest.num_classes = bundle.num_classes;
  manifest.shots = bundle.shots;

  manifest.store(files::kClassTokens, "tensors/class_tokens.pct1", bundle.class_tokens);
  std::vector<double> flat;
  flat.reserve(images * bundle.patch_count * bundle.dim);
  for (const auto& p : bundle.patches) flat.insert(flat.end(), p.data().begin(), p.data().end());
  manifest.store(files::kPatches, "tensors/patches.pct1",
                 Tensor({images, bundle.patch_count, bundle.dim}, std::move(flat)));
  auto index_tensor = [](const std::vector<std::size_t>& idx) {
    std::vector<double> v(idx.begin(), idx.end());
    return Tensor({idx.size()}, std::move(v));
  };
  manifest.store(files::kLabels, "tensors/labels.pct1", index_tensor(bundle.labels));
  manifest.store(files::kClassPrompts, "tensors/class_prompts.pct1", bundle.class_prompts);
  manifest.store(files::kSupport, "tensors/support_index.pct1", index_tensor(bundle.support));
  manifest.store(files::kQuery, "tensors/query_index.pct1", index_tensor(bundle.query));

  std::string jsonl;
  for (std::size_t n = 0; n < descs.num_classes(); ++n) {
    const auto& cd = descs.classes[n];
    json line = {{"class_id", n}, {"class_name", cd.class_name}, {"descriptions", cd.texts}};
    jsonl += line.dump() + "\n";
    if (cd.size() == 0) continue;
    manifest.store(files::desc_plain(n), "tensors/" + files::desc_plain(n) + ".pct1", cd.plain);
    manifest.store(files::desc_extended(n), "tensors/" + files::desc_extended(n) + ".pct1",
                   cd.extended);
  }
  manifest.store_raw(files::kDescriptions, "descriptions.jsonl", jsonl, {descs.num_classes()});
}

}  // namespace propcache

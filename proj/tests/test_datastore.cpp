#include <cmath>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "propcache/datastore.hpp"
#include "propcache/errors.hpp"
#include "propcache/synth.hpp"
#include "propcache/tensor_io.hpp"
#include "test_util.hpp"

using namespace propcache;
using testutil::TempDir;

namespace {

// Bitwise CRC-32 (reflected, poly 0xEDB88320), independent of zlib.
std::uint32_t crc32_oracle(const std::uint8_t* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

SynthConfig small_config() {
  SynthConfig c;
  c.classes = 4;
  c.shots = 2;
  c.queries = 2;
  c.dim = 16;
  c.patches = 5;
  return c;
}

std::string validation_invariant(const std::filesystem::path& manifest) {
  try {
    load_bundle(manifest);
  } catch (const ValidationError& e) {
    return e.invariant();
  }
  return "";
}

// Writes `res` after `mutate` has edited its bundle.
template <typename F>
std::filesystem::path write_mutated(const TempDir& dir, F&& mutate) {
  SynthResult res = gen_synthetic(small_config());
  mutate(res.bundle);
  Manifest m;
  m.root = dir.path();
  store_bundle(m, res.bundle, res.descriptions);
  m.write(dir / "manifest.json");
  return dir / "manifest.json";
}

}  // namespace

TEST_CASE("tensor files roundtrip bit-exactly") {
  TempDir dir("roundtrip");
  Rng rng(3);
  const Tensor cases[] = {testutil::random_matrix(rng, 3, 7), Tensor({5}, 0.25),
                          Tensor({2, 3, 4}, 1.5), Tensor::matrix(0, 4),
                          Tensor::from_rows({{-0.0, 1e-308, 1.7976931348623157e308}})};
  for (const auto& t : cases) {
    save_tensor(dir / "t.pct1", t);
    const Tensor back = load_tensor(dir / "t.pct1");
    CHECK(back.shape() == t.shape());
    REQUIRE(back.size() == t.size());
    CHECK(std::memcmp(back.data().data(), t.data().data(), t.size() * sizeof(double)) == 0);
    CHECK(encode_tensor(back) == read_file_bytes(dir / "t.pct1"));
  }
}

TEST_CASE("PCT1 layout") {
  const Tensor t = Tensor::from_rows({{1.0, -2.0, 0.5}, {3.0, 4.0, 8.0}});
  const auto b = encode_tensor(t);
  const std::size_t header = 4 + 2 + 1 + 1 + 2 * 4;
  REQUIRE(b.size() == header + 6 * 8 + 4);
  CHECK(std::string(b.begin(), b.begin() + 4) == "PCT1");
  CHECK(b[4] == 1);
  CHECK(b[5] == 0);
  CHECK(b[6] == 1);
  CHECK(b[7] == 2);
  CHECK(read_u32(b, 8) == 2);
  CHECK(read_u32(b, 12) == 3);
  double first;
  std::memcpy(&first, b.data() + header, 8);
  CHECK(first == 1.0);
  CHECK(read_u32(b, header + 48) == crc32_oracle(b.data() + header, 48));
  CHECK(payload_crc32(t) == crc32_oracle(b.data() + header, 48));
  const std::uint8_t check[] = {'1', '2', '3', '4', '5', '6', '7', '8', '9'};
  CHECK(crc32_bytes(check) == 0xCBF43926u);
}

TEST_CASE("corrupt tensor files are rejected") {
  const auto good = encode_tensor(Tensor::from_rows({{1, 2, 3}, {4, 5, 6}}));

  auto bad = good;
  std::memcpy(bad.data(), "XXXX", 4);
  CHECK_THROWS_AS(decode_tensor(bad), FormatError);

  bad = good;
  bad[4] = 2;
  CHECK_THROWS_AS(decode_tensor(bad), FormatError);

  bad = good;
  bad[6] = 7;
  CHECK_THROWS_AS(decode_tensor(bad), FormatError);

  // Header 2×3, payload of 5 values.
  bad = good;
  bad.erase(bad.end() - 12, bad.end() - 4);
  CHECK_THROWS_AS(decode_tensor(bad), ShapeHeaderMismatch);

  bad = good;
  bad[20] ^= 0x01;
  CHECK_THROWS_AS(decode_tensor(bad), ChecksumError);

  CHECK_THROWS_AS(decode_tensor(std::vector<std::uint8_t>(good.begin(), good.begin() + 6)),
                  FormatError);

  const Tensor nan_t = Tensor::from_rows({{std::nan(""), 1.0}});
  CHECK_THROWS_AS(decode_tensor(encode_tensor(nan_t)), FormatError);
}

TEST_CASE("synthetic bundle passes validation") {
  TempDir dir("bundle");
  const SynthConfig cfg = small_config();
  const SynthResult res = gen_synthetic(cfg);
  write_synthetic(dir.path(), cfg, res);

  const Manifest m = Manifest::read(dir / "manifest.json");
  CHECK(m.dim == 16);
  CHECK(m.num_classes == 4);
  CHECK(m.shots == 2);
  CHECK(m.props == 3);
  CHECK(m.seed == cfg.seed);
  CHECK(m.extended_template == "{class name}, {description}");

  const EmbeddingBundle b = validate_bundle(m);
  CHECK(b.image_count() == 16);
  CHECK(b.patch_count == 5);
  CHECK(b.support.size() == 8);
  CHECK(b.query.size() == 8);
  CHECK(b.class_tokens == res.bundle.class_tokens);
  for (std::size_t i = 0; i < b.image_count(); ++i) CHECK(b.patches[i] == res.bundle.patches[i]);
  CHECK(b.class_names == res.bundle.class_names);

  const DescriptionSet d = load_descriptions(m, b);
  REQUIRE(d.num_classes() == 4);
  for (std::size_t n = 0; n < 4; ++n) {
    CHECK(d.classes[n].texts == res.descriptions.classes[n].texts);
    CHECK(d.classes[n].plain == res.descriptions.classes[n].plain);
    CHECK(d.classes[n].extended == res.descriptions.classes[n].extended);
    CHECK(d.classes[n].size() >= 6 * 3);
  }

  const auto raw = read_file_bytes(dir / "descriptions.jsonl");
  std::size_t lines = 0;
  for (auto c : raw) lines += c == '\n';
  CHECK(lines == 4);
  const std::string text(raw.begin(), raw.end());
  const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
  CHECK(first.at("class_id") == 0);
  CHECK(first.at("descriptions").size() == 18);
}

TEST_CASE("validation names the violated invariant") {
  SUBCASE("unit-norm") {
    TempDir dir("unitnorm");
    const auto path = write_mutated(dir, [](EmbeddingBundle& b) {
      for (auto& v : b.class_tokens.row_span(3)) v *= 0.5;
    });
    CHECK(validation_invariant(path) == "unit-norm");
  }
  SUBCASE("shots") {
    TempDir dir("shots");
    const auto path = write_mutated(dir, [](EmbeddingBundle& b) {
      b.query.push_back(b.support.back());
      b.support.pop_back();
    });
    CHECK(validation_invariant(path) == "shots");
  }
  SUBCASE("labels") {
    TempDir dir("labels");
    const auto path = write_mutated(dir, [](EmbeddingBundle& b) { b.labels[0] = b.num_classes; });
    CHECK(validation_invariant(path) == "labels");
  }
  SUBCASE("split overlap") {
    TempDir dir("split");
    const auto path = write_mutated(dir, [](EmbeddingBundle& b) { b.query[0] = b.support[0]; });
    CHECK(validation_invariant(path) == "split");
  }
  SUBCASE("prompt shape") {
    TempDir dir("shape");
    const auto path = write_mutated(dir, [](EmbeddingBundle& b) {
      b.class_prompts = ops::select_rows(b.class_prompts, std::vector<std::size_t>{0, 1, 2});
    });
    CHECK(validation_invariant(path) == "shape");
  }
}

TEST_CASE("manifest checksums and file table are enforced") {
  TempDir dir("tamper");
  write_synthetic(dir.path(), small_config(), gen_synthetic(small_config()));
  const auto path = dir / "manifest.json";
  auto j = nlohmann::json::parse(std::ifstream(path));

  SUBCASE("tampered checksum") {
    j["files"]["class_tokens"]["crc32"] = j["files"]["class_tokens"]["crc32"].get<std::uint32_t>() ^ 1u;
    write_text_file(path, j.dump());
    CHECK_THROWS_AS(load_bundle(path), ChecksumError);
  }
  SUBCASE("tampered descriptions") {
    auto raw = read_file_bytes(dir / "descriptions.jsonl");
    raw[raw.size() / 2] ^= 0x20;
    write_file_bytes(dir / "descriptions.jsonl", raw);
    CHECK_THROWS_AS(load_bundle(path), ChecksumError);
  }
  SUBCASE("shape in the table differs from the file") {
    j["files"]["labels"]["shape"] = {99};
    write_text_file(path, j.dump());
    CHECK_THROWS_AS(load_bundle(path), ShapeHeaderMismatch);
  }
  SUBCASE("missing file") {
    std::filesystem::remove(dir / "tensors/query_index.pct1");
    CHECK(validation_invariant(path) == "files");
  }
  SUBCASE("missing entry") {
    j["files"].erase("patches");
    write_text_file(path, j.dump());
    CHECK(validation_invariant(path) == "files");
  }
  SUBCASE("malformed manifest") {
    write_text_file(path, "{\"version\": 1,");
    CHECK_THROWS_AS(load_bundle(path), FormatError);
  }
  SUBCASE("unknown version") {
    j["version"] = 2;
    write_text_file(path, j.dump());
    CHECK_THROWS_AS(load_bundle(path), FormatError);
  }
}

TEST_CASE("gen_synthetic argument contract") {
  SynthConfig c = small_config();
  c.dim = 7;
  CHECK_THROWS_AS(gen_synthetic(c), ArgumentError);
  c = small_config();
  c.props = 0;
  CHECK_THROWS_AS(gen_synthetic(c), ArgumentError);
  c = small_config();
  c.patches = 2;
  CHECK_THROWS_AS(gen_synthetic(c), ArgumentError);
  c.patches = 3;
  CHECK_NOTHROW(gen_synthetic(c));
}

TEST_CASE("same seed writes byte-identical bundles") {
  TempDir a("det_a"), b("det_b");
  const SynthConfig cfg = small_config();
  write_synthetic(a.path(), cfg, gen_synthetic(cfg));
  write_synthetic(b.path(), cfg, gen_synthetic(cfg));
  std::size_t compared = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    CHECK(read_file_bytes(entry.path()) == read_file_bytes(b.path() / rel));
    ++compared;
  }
  CHECK(compared > 10);

  SynthConfig other = cfg;
  other.seed = cfg.seed + 1;
  CHECK_FALSE(gen_synthetic(other).bundle.class_tokens == gen_synthetic(cfg).bundle.class_tokens);
}

TEST_CASE("noise-free plant reproduces its directions") {
  SynthConfig cfg = small_config();
  cfg.noise = 0.0;
  cfg.shots = 1;
  const SynthResult res = gen_synthetic(cfg);
  const auto& b = res.bundle;
  const auto& plant = res.plant;
  const std::size_t M = cfg.props;

  for (std::size_t j = 0; j < b.image_count(); ++j) {
    const std::size_t n = b.labels[j];
    CHECK(Tensor::row(b.class_token(j)) == Tensor::row(b.class_prompts.row_span(n)));
    CHECK(ops::dot(b.class_token(j), plant.class_directions.row_span(n)) ==
          doctest::Approx(1.0).epsilon(1e-14));
    // Every planted property occupies a patch.
    for (std::size_t i = 0; i < M; ++i) {
      const auto u = plant.property_directions.row_span(n * M + i);
      double best = -2.0;
      for (std::size_t p = 0; p < b.patch_count; ++p)
        best = std::max(best, ops::dot(u, b.patches[j].row_span(p)));
      CHECK(best == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  for (std::size_t n = 0; n < cfg.classes; ++n) {
    const auto& cd = res.descriptions.classes[n];
    for (std::size_t r = 0; r < cd.size(); ++r) {
      const std::size_t i = plant.description_property[n][r];
      const double cos = ops::dot(cd.plain.row_span(r), plant.property_directions.row_span(n * M + i));
      CHECK(cos == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("default plant: zero-shot beats chance") {
  const SynthResult res = gen_synthetic(SynthConfig{});
  const auto& b = res.bundle;
  CHECK(b.num_classes == 10);
  CHECK(b.dim == 64);
  CHECK(b.support.size() == 160);
  CHECK(b.query.size() == 200);
  std::size_t hits = 0;
  for (std::size_t j : b.query) {
    std::size_t best = 0;
    double best_s = -2.0;
    for (std::size_t n = 0; n < b.num_classes; ++n) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.dim; ++k) s += b.class_tokens(j, k) * b.class_prompts(n, k);
      if (s > best_s) best_s = s, best = n;
    }
    hits += best == b.labels[j];
  }
  CHECK(static_cast<double>(hits) / b.query.size() > 1.0 / b.num_classes);
}

TEST_CASE("plant record roundtrips through disk") {
  TempDir dir("plant");
  const SynthConfig cfg = small_config();
  const SynthResult res = gen_synthetic(cfg);
  write_synthetic(dir.path(), cfg, res);
  const PlantRecord p = load_plant(dir.path());
  CHECK(p.class_directions == res.plant.class_directions);
  CHECK(p.property_directions == res.plant.property_directions);
  CHECK(p.property_types == res.plant.property_types);
  CHECK(p.description_property == res.plant.description_property);
}

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "json.hpp"
#include "propcache/cache.hpp"
#include "propcache/contrast.hpp"
#include "propcache/errors.hpp"
#include "propcache/gradcheck.hpp"
#include "propcache/propmine.hpp"
#include "propcache/synth.hpp"
#include "propcache/tensor_io.hpp"
#include "test_util.hpp"

using namespace propcache;
using testutil::TempDir;

namespace {

MpgParams fresh_mpg(std::size_t m, std::size_t d) {
  MpgConfig c;
  c.props = m;
  c.dim = d;
  c.seed = 11;
  return init_params(c);
}

// Σ_r exp(−β_s(1 − f·k_r)) · labels[r], written out.
std::vector<double> naive_cache(std::span<const double> f, const Tensor& keys, const Tensor& labels,
                                double bs) {
  std::vector<double> out(labels.cols(), 0.0);
  for (std::size_t c = 0; c < labels.cols(); ++c) {
    for (std::size_t r = 0; r < keys.rows(); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < f.size(); ++k) s += f[k] * keys(r, k);
      out[c] += std::exp(-bs * (1.0 - s)) * labels(r, c);
    }
  }
  return out;
}

Tensor one_hot_labels(std::size_t n, std::size_t per_class) {
  Tensor t = Tensor::matrix(n * per_class, n);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < per_class; ++i) t(c * per_class + i, c) = 1.0;
  return t;
}

HybridCache random_cache(Rng& rng, std::size_t n, std::size_t m, std::size_t d) {
  HybridCache c;
  c.m = m;
  c.class_prompts = testutil::random_unit_rows(rng, n, d);
  c.class_keys = testutil::random_unit_rows(rng, n, d);
  c.class_labels = Tensor::identity(n);
  c.prop_keys = testutil::random_unit_rows(rng, n * m, d);
  c.prop_labels = one_hot_labels(n, m);
  c.alpha = 2.0 * rng.uniform();
  c.beta = 2.0 * rng.uniform();
  c.sharpness = 1.0 + 9.0 * rng.uniform();
  c.logit_scale = 1.0 + 99.0 * rng.uniform();
  return c;
}

std::vector<double> oracle_ours(std::span<const double> f, const Tensor& tokens, const HybridCache& c) {
  const std::size_t n = c.class_prompts.rows();
  std::vector<double> out(n);
  const auto cls = naive_cache(f, c.class_keys, c.class_labels, c.sharpness);
  std::vector<double> mp(n, 0.0);
  for (std::size_t i = 0; i < tokens.rows(); ++i) {
    const auto part = naive_cache(tokens.row_span(i), c.prop_keys, c.prop_labels, c.sharpness);
    for (std::size_t k = 0; k < n; ++k) mp[k] += part[k];
  }
  for (std::size_t k = 0; k < n; ++k) {
    double clip = 0.0;
    for (std::size_t q = 0; q < f.size(); ++q) clip += f[q] * c.class_prompts(k, q);
    clip *= c.logit_scale;
    out[k] = (clip + c.alpha * mp[k] / static_cast<double>(tokens.rows())) + (clip + c.beta * cls[k]);
  }
  return out;
}

double support_accuracy(const EmbeddingBundle& b, const MpgParams& p, const HybridCache& c) {
  std::size_t hits = 0;
  for (std::size_t j : b.support)
    hits += predict(b.class_token(j), property_tokens(p, b.patches[j]), c).label == b.labels[j];
  return static_cast<double>(hits) / static_cast<double>(b.support.size());
}

}  // namespace

TEST_CASE("zero-shot and phi examples") {
  const Tensor eye = Tensor::identity(2);
  const std::vector<double> e1{1.0, 0.0};
  CHECK(zero_shot(e1, eye) == std::vector<double>{1.0, 0.0});
  const std::vector<double> f{0.6, 0.8};
  CHECK(zero_shot(f, eye) == std::vector<double>{0.6, 0.8});
  CHECK_THROWS_AS(zero_shot(f, Tensor::identity(3)), ShapeMismatch);
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const Tensor q = testutil::random_unit_rows(rng, 1, 7);
    for (double v : zero_shot(q.row_span(0), testutil::random_unit_rows(rng, 5, 7))) {
      CHECK(v >= -1.0 - 1e-12);
      CHECK(v <= 1.0 + 1e-12);
    }
  }

  for (double bs : {0.5, 1.0, 5.5, 40.0}) CHECK(phi(1.0, bs) == 1.0);
  CHECK(phi(0.0, 1.0) == doctest::Approx(0.36788).epsilon(1e-5));
  CHECK(phi(0.8, 5.5) == doctest::Approx(0.33287).epsilon(1e-5));
  CHECK(std::abs(phi(0.8, 5.5) - std::exp(-1.1)) < 1e-15);
  for (double x = -1.0; x < 1.0; x += 0.125) CHECK(phi(x, 5.5) < phi(x + 0.125, 5.5));
}

TEST_CASE("cache_logits examples") {
  const Tensor keys = Tensor::identity(2);
  const std::vector<double> f{1.0, 0.0};
  const auto out = cache_logits(f, keys, Tensor::identity(2), 1.0);
  CHECK(out[0] == 1.0);
  CHECK(out[1] == doctest::Approx(0.36788).epsilon(1e-5));

  const Tensor to_zero = Tensor::from_rows({{1, 0}, {1, 0}});
  const auto collapsed = cache_logits(std::vector<double>{0.0, 1.0}, keys, to_zero, 5.5);
  CHECK(collapsed[0] > 0.0);
  CHECK(collapsed[1] == 0.0);

  Rng rng(4);
  const Tensor k3 = testutil::random_unit_rows(rng, 3, 6);
  const auto self = cache_logits(k3.row_span(1), k3, Tensor::identity(3), 5.5);
  CHECK(self[1] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(self[0] < 1.0);
  CHECK(self[2] < 1.0);

  CHECK_THROWS_AS(cache_logits(f, Tensor::identity(3), Tensor::identity(3), 1.0), ShapeMismatch);
  CHECK_THROWS_AS(cache_logits(f, keys, Tensor::identity(3), 1.0), ShapeMismatch);
}

TEST_CASE("cache_logits matches a double-loop oracle") {
  Rng rng(10);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(10), per = 1 + rng.below(4) * (1 + rng.below(3));
    const std::size_t d = 2 + rng.below(15);
    const Tensor keys = testutil::random_unit_rows(rng, n * per, d);
    const Tensor labels = one_hot_labels(n, per);
    const Tensor f = testutil::random_unit_rows(rng, 1, d);
    const double bs = 0.5 + 10.0 * rng.uniform();
    const auto got = cache_logits(f.row_span(0), keys, labels, bs);
    const auto want = naive_cache(f.row_span(0), keys, labels, bs);
    for (std::size_t c = 0; c < n; ++c) CHECK(std::abs(got[c] - want[c]) <= 1e-10);
  }
}

TEST_CASE("build_caches prototypes") {
  SynthConfig cfg;
  cfg.classes = 4;
  cfg.shots = 1;
  cfg.queries = 1;
  cfg.dim = 16;
  cfg.patches = 4;
  cfg.props = 2;
  const SynthResult s = gen_synthetic(cfg);
  const MpgParams p = fresh_mpg(2, 16);
  const HybridCache c = build_caches(s.bundle, p);
  CHECK(c.alpha == 1.0);
  CHECK(c.beta == 1.0);
  CHECK(c.class_labels == Tensor::identity(4));
  CHECK(c.prop_labels == one_hot_labels(4, 2));
  CHECK_FALSE(c.trained);
  for (std::size_t j : s.bundle.support) {
    const std::size_t n = s.bundle.labels[j];
    const auto tok = s.bundle.class_token(j);
    const auto expect = ops::normalized(tok);
    for (std::size_t k = 0; k < 16; ++k) CHECK(c.class_keys(n, k) == doctest::Approx(expect[k]).epsilon(1e-14));
    const Tensor pt = property_tokens(p, s.bundle.patches[j]);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 16; ++k)
        CHECK(c.prop_keys(n * 2 + i, k) == doctest::Approx(pt(i, k)).epsilon(1e-12));
  }

  SynthConfig two = cfg;
  two.shots = 2;
  SynthResult anti = gen_synthetic(two);
  std::size_t first = anti.bundle.support.size(), second = first;
  for (std::size_t j : anti.bundle.support) {
    if (anti.bundle.labels[j] != 0) continue;
    (first == anti.bundle.support.size() ? first : second) = j;
  }
  const auto src = anti.bundle.class_token(first);
  const std::vector<double> copy(src.begin(), src.end());
  for (std::size_t k = 0; k < 16; ++k) anti.bundle.class_tokens(second, k) = -copy[k];
  CHECK_THROWS_AS(build_caches(anti.bundle, p), DegeneratePrototype);

  CHECK_THROWS_AS(build_caches(s.bundle, fresh_mpg(2, 8)), ShapeMismatch);
}

TEST_CASE("noise-free prototypes equal the planted class directions") {
  SynthConfig cfg;
  cfg.noise = 0.0;
  const SynthResult s = gen_synthetic(cfg);
  const HybridCache c = build_caches(s.bundle, fresh_mpg(3, cfg.dim));
  for (std::size_t n = 0; n < cfg.classes; ++n)
    CHECK(ops::dot(c.class_keys.row_span(n), s.plant.class_directions.row_span(n)) ==
          doctest::Approx(1.0).epsilon(1e-14));

  // Queries predict their own class.
  const MpgParams p = fresh_mpg(3, cfg.dim);
  for (std::size_t j : s.bundle.query)
    CHECK(predict(s.bundle.class_token(j), property_tokens(p, s.bundle.patches[j]), c).label ==
          s.bundle.labels[j]);
}

TEST_CASE("hybrid score reductions") {
  Rng rng(21);
  for (int t = 0; t < 30; ++t) {
    HybridCache c = random_cache(rng, 5, 3, 8);
    c.alpha = c.beta = 0.0;
    const Tensor f = testutil::random_unit_rows(rng, 1, 8);
    const Tensor tokens = testutil::random_unit_rows(rng, 3, 8);
    const ScoreBreakdown s = hybrid_scores(f.row_span(0), tokens, c);
    const auto zs = zero_shot(f.row_span(0), c.class_prompts);
    for (std::size_t n = 0; n < 5; ++n) {
      CHECK(s.s_ours[n] == 2.0 * s.s_clip[n]);
      CHECK(s.s_clip[n] == c.logit_scale * zs[n]);
    }
    CHECK(predict(f.row_span(0), tokens, c).label == ops::argmax(zs));
  }

  HybridCache c = random_cache(rng, 4, 1, 6);
  const Tensor f = testutil::random_unit_rows(rng, 1, 6);
  const Tensor tok = testutil::random_unit_rows(rng, 1, 6);
  const ScoreBreakdown s = hybrid_scores(f.row_span(0), tok, c);
  const auto single = cache_logits(tok.row_span(0), c.prop_keys, c.prop_labels, c.sharpness);
  for (std::size_t n = 0; n < 4; ++n) CHECK(s.s_mp_cache[n] == s.s_clip[n] + c.alpha * single[n]);
  CHECK_THROWS_AS(hybrid_scores(f.row_span(0), testutil::random_unit_rows(rng, 2, 6), c),
                  ShapeMismatch);
}

TEST_CASE("hybrid scores match a straight-line reimplementation") {
  // Hand-sized instance: N=2, D=2, one key per class.
  HybridCache h;
  h.m = 1;
  h.class_prompts = Tensor::identity(2);
  h.class_keys = Tensor::from_rows({{0.6, 0.8}, {0.8, -0.6}});
  h.class_labels = Tensor::identity(2);
  h.prop_keys = Tensor::from_rows({{1, 0}, {0, 1}});
  h.prop_labels = Tensor::identity(2);
  h.alpha = 0.7;
  h.beta = 1.3;
  h.sharpness = 5.5;
  h.logit_scale = 1.0;
  const std::vector<double> f{0.6, 0.8};
  const Tensor tok = Tensor::from_rows({{0.0, 1.0}});
  const ScoreBreakdown s = hybrid_scores(f, tok, h);
  const double e0 = std::exp(-5.5), e1 = std::exp(-5.5 * (1.0 - (0.6 * 0.8 - 0.8 * 0.6)));
  const double ours0 = (0.6 + 0.7 * e0) + (0.6 + 1.3 * 1.0);
  const double ours1 = (0.8 + 0.7 * 1.0) + (0.8 + 1.3 * e1);
  CHECK(std::abs(s.s_ours[0] - ours0) <= 1e-12);
  CHECK(std::abs(s.s_ours[1] - ours1) <= 1e-12);

  Rng rng(33);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(10), m = 1 + rng.below(3), d = 2 + rng.below(15);
    const HybridCache c = random_cache(rng, n, m, d);
    const Tensor fq = testutil::random_unit_rows(rng, 1, d);
    const Tensor tokens = testutil::random_unit_rows(rng, m, d);
    const ScoreBreakdown got = hybrid_scores(fq.row_span(0), tokens, c);
    const auto want = oracle_ours(fq.row_span(0), tokens, c);
    for (std::size_t k = 0; k < n; ++k) {
      CHECK(std::abs(got.s_ours[k] - want[k]) <= 1e-10 * std::max(1.0, std::abs(want[k])));
      CHECK(got.s_ours[k] == got.s_mp_cache[k] + got.s_cls_cache[k]);
    }
  }
}

TEST_CASE("predict ties and shift invariance") {
  CHECK(ops::argmax(std::vector<double>{0.2, 0.9, 0.9}) == 1);
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    HybridCache c = random_cache(rng, 6, 2, 5);
    const Tensor f = testutil::random_unit_rows(rng, 1, 5);
    const Tensor tokens = testutil::random_unit_rows(rng, 2, 5);
    const std::size_t base = predict(f.row_span(0), tokens, c).label;
    std::vector<double> s = predict(f.row_span(0), tokens, c).scores.s_ours;
    const double k = 10.0 * (rng.uniform() - 0.5);
    for (auto& v : s) v += k;
    CHECK(ops::argmax(s) == base);
  }
}

TEST_CASE("cross-entropy example and cache loss gradients") {
  // One image, logits [ln 2, 0] for both heads: loss = 2·ln(3/2).
  HybridCache c;
  c.m = 1;
  c.class_prompts = Tensor::from_rows({{1, 0}, {0, 1}});
  c.class_labels = Tensor::identity(2);
  c.prop_labels = Tensor::identity(2);
  c.logit_scale = std::log(2.0);
  c.sharpness = 1.0;
  CacheBatch b{Tensor::from_rows({{1, 0}}), {Tensor::from_rows({{1, 0}})}, Tensor::from_rows({{1, 0}})};
  const CacheVars zero{ad::parameter(Tensor::identity(2)), ad::parameter(Tensor::identity(2)),
                       ad::parameter(Tensor::from_rows({{0}})), ad::parameter(Tensor::from_rows({{0}}))};
  const double ce = cache_loss(zero, b, c).value().item();
  CHECK(ce / 2.0 == doctest::Approx(0.40546).epsilon(1e-5));
  CHECK(std::abs(ce / 2.0 - std::log(1.5)) < 1e-15);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(70 + seed);
    const std::size_t n = 3, m = 2, d = 6, batch = 5;
    HybridCache h = random_cache(rng, n, m, d);
    h.logit_scale = 10.0;
    h.sharpness = 5.5;
    CacheBatch cb;
    cb.f_cls = testutil::random_unit_rows(rng, batch, d);
    for (std::size_t i = 0; i < m; ++i) cb.tokens.push_back(testutil::random_unit_rows(rng, batch, d));
    cb.one_hot = Tensor::matrix(batch, n);
    for (std::size_t r = 0; r < batch; ++r) cb.one_hot(r, rng.below(n)) = 1.0;
    const CacheVars v{ad::parameter(h.class_keys), ad::parameter(h.prop_keys),
                      ad::parameter(Tensor::from_rows({{h.alpha}})),
                      ad::parameter(Tensor::from_rows({{h.beta}}))};
    const GradCheckResult r = check_gradients([&] { return cache_loss(v, cb, h); },
                                              {v.class_keys, v.prop_keys, v.alpha, v.beta});
    CAPTURE(seed);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("warm-up schedule") {
  CacheTrainConfig cfg;
  CHECK(warmup_lr(0, 100, cfg) == doctest::Approx(1e-4));
  CHECK(warmup_lr(4, 100, cfg) == doctest::Approx(5e-4));
  CHECK(warmup_lr(9, 100, cfg) == doctest::Approx(1e-3));
  CHECK(warmup_lr(50, 100, cfg) == doctest::Approx(1e-3));
  CHECK(warmup_lr(0, 15, cfg) == doctest::Approx(5e-4));
  cfg.warmup_fraction = 0.0;
  CHECK(warmup_lr(0, 15, cfg) == 1e-3);
}

TEST_CASE("train_cache fixed point, unit keys and determinism") {
  SynthConfig sc;
  sc.classes = 4;
  sc.shots = 4;
  sc.queries = 1;
  sc.dim = 16;
  sc.patches = 4;
  sc.props = 2;
  const SynthResult s = gen_synthetic(sc);
  Rng rng(8);
  const MpgParams p = fresh_mpg(2, 16);
  testutil::perturb_params(p, rng);
  const HybridCache c = build_caches(s.bundle, p);

  CacheTrainConfig frozen;
  frozen.lr = 0.0;
  frozen.epochs = 2;
  frozen.adamw.weight_decay = 0.0;
  const HybridCache still = train_cache(s.bundle, c, p, frozen).cache;
  CHECK(still.trained);
  CHECK(still.alpha == c.alpha);
  CHECK(still.beta == c.beta);
  for (std::size_t i = 0; i < c.class_keys.size(); ++i)
    CHECK(std::abs(still.class_keys[i] - c.class_keys[i]) <= 1e-12);
  for (std::size_t i = 0; i < c.prop_keys.size(); ++i)
    CHECK(std::abs(still.prop_keys[i] - c.prop_keys[i]) <= 1e-12);

  CacheTrainConfig cfg;
  cfg.batch = 3;
  cfg.lr = 0.05;
  for (std::size_t epochs = 1; epochs <= 4; ++epochs) {
    cfg.epochs = epochs;
    const CacheTrainResult r = train_cache(s.bundle, c, p, cfg);
    for (const Tensor* k : {&r.cache.class_keys, &r.cache.prop_keys})
      for (std::size_t row = 0; row < k->rows(); ++row)
        CHECK(std::abs(ops::norm(k->row_span(row)) - 1.0) <= 1e-9);
    CHECK(r.cache.alpha >= 0.0);
    CHECK(r.cache.beta >= 0.0);
    CHECK(r.epoch_loss.size() == epochs);
  }
  const CacheTrainResult a = train_cache(s.bundle, c, p, cfg);
  const CacheTrainResult b = train_cache(s.bundle, c, p, cfg);
  CHECK(a.cache.class_keys == b.cache.class_keys);
  CHECK(a.cache.prop_keys == b.cache.prop_keys);
  CHECK(a.epoch_loss == b.epoch_loss);

  CacheTrainConfig bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(train_cache(s.bundle, c, p, bad), ArgumentError);
}

TEST_CASE("training on the default plant") {
  const SynthResult s = gen_synthetic(SynthConfig{});
  const DescriptionPool pool = build_pool(s.descriptions);
  const ClusterSet cs = kmeans(pool.plain, default_cluster_count(10), 0);
  const PropertyAssignment asg = assemble_assignment(s.bundle, s.descriptions, cs, 3);
  ContrastConfig cc;
  cc.seed = 1;
  const MpgParams p = train_mpg(s.bundle, asg, pool, fresh_mpg(3, 64), cc).params;
  const HybridCache c = build_caches(s.bundle, p);
  CacheTrainConfig cfg;
  cfg.seed = 3;
  const CacheTrainResult r = train_cache(s.bundle, c, p, cfg);
  REQUIRE(r.epoch_loss.size() == 15);
  CHECK(r.epoch_loss.back() < r.epoch_loss.front());
  CHECK(support_accuracy(s.bundle, p, r.cache) >= support_accuracy(s.bundle, p, c));
}

TEST_CASE("cache checkpoint roundtrip") {
  Rng rng(90);
  HybridCache c = random_cache(rng, 4, 3, 8);
  c.trained = true;
  TempDir dir("cache_ckpt");
  save_cache(dir.path(), c);
  const HybridCache d = load_cache(dir.path());
  CHECK(d.m == 3);
  CHECK(d.class_prompts == c.class_prompts);
  CHECK(d.class_keys == c.class_keys);
  CHECK(d.prop_keys == c.prop_keys);
  CHECK(d.class_labels == Tensor::identity(4));
  CHECK(d.prop_labels == one_hot_labels(4, 3));
  CHECK(d.alpha == c.alpha);
  CHECK(d.beta == c.beta);
  CHECK(d.sharpness == c.sharpness);
  CHECK(d.logit_scale == c.logit_scale);
  CHECK(d.trained);

  const auto bytes = read_file_bytes(dir / "cache.json");
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
  for (const char* key : {"alpha", "beta", "beta_s", "logit_scale", "M", "N"}) CHECK(j.contains(key));
  auto key = load_tensor(dir / "prop_keys.pct1");
  key[0] += 0.5;
  save_tensor(dir / "prop_keys.pct1", key);
  CHECK_THROWS_AS(load_cache(dir.path()), ChecksumError);
}

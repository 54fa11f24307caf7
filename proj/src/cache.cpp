#include "propcache/cache.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "json.hpp"
#include "propcache/errors.hpp"
#include "propcache/rng.hpp"
#include "propcache/tensor_io.hpp"

namespace propcache {

using nlohmann::json;

namespace {

constexpr double kMinPrototypeNorm = 1e-8;

std::vector<double> mean_direction(const std::vector<std::span<const double>>& rows,
                                   const std::string& what) {
  std::vector<double> acc(rows.front().size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += r[k];
  for (auto& v : acc) v /= static_cast<double>(rows.size());
  const double n = ops::norm(acc);
  if (!(n >= kMinPrototypeNorm))
    throw DegeneratePrototype(what + " prototype has norm " + std::to_string(n));
  for (auto& v : acc) v /= n;
  return acc;
}

Tensor class_label_matrix(std::size_t n) { return Tensor::identity(n); }

Tensor prop_label_matrix(std::size_t n, std::size_t m) {
  Tensor t = Tensor::matrix(n * m, n);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < m; ++i) t(c * m + i, c) = 1.0;
  return t;
}

void check_width(std::span<const double> f, const Tensor& keys, const char* what) {
  if (keys.ndim() != 2 || f.size() != keys.cols())
    throw ShapeMismatch(std::string(what) + ": vector of length " + std::to_string(f.size()) +
                        " against " + shape_str(keys.shape()));
}

// φ(F·keysᵀ) as a graph node.
ad::Var affinity(const ad::Var& f, const ad::Var& keys, double sharpness) {
  return ad::exp(ad::add_scalar(ad::scale(ad::matmul_nt(f, keys), sharpness), -sharpness));
}

ad::Var cross_entropy_sum(const ad::Var& logits, const ad::Var& one_hot) {
  return ad::scale(ad::sum(ad::mul(ad::log_softmax_rows(logits), one_hot)), -1.0);
}

void renormalize_rows(Tensor& keys, const char* what) {
  for (std::size_t r = 0; r < keys.rows(); ++r) {
    auto row = keys.row_span(r);
    const double n = ops::norm(row);
    if (!(n >= kMinPrototypeNorm))
      throw DegeneratePrototype(std::string(what) + " key " + std::to_string(r) + " collapsed");
    for (auto& v : row) v /= n;
  }
}

}  // namespace

std::vector<double> zero_shot(std::span<const double> f_cls, const Tensor& class_prompts) {
  check_width(f_cls, class_prompts, "zero_shot");
  std::vector<double> out(class_prompts.rows());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = ops::dot(f_cls, class_prompts.row_span(n));
  return out;
}

double phi(double x, double sharpness) { return std::exp(-sharpness * (1.0 - x)); }

std::vector<double> cache_logits(std::span<const double> f, const Tensor& keys,
                                 const Tensor& labels, double sharpness) {
  check_width(f, keys, "cache_logits");
  if (labels.ndim() != 2 || labels.rows() != keys.rows())
    throw ShapeMismatch("cache labels " + shape_str(labels.shape()) + " do not match keys " +
                        shape_str(keys.shape()));
  std::vector<double> out(labels.cols(), 0.0);
  for (std::size_t r = 0; r < keys.rows(); ++r) {
    const double a = phi(ops::dot(f, keys.row_span(r)), sharpness);
    const auto lab = labels.row_span(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += a * lab[c];
  }
  return out;
}

Tensor property_tokens(const MpgParams& params, const Tensor& patches) {
  return ops::l2_normalize_rows(mpg_tokens(params, patches));
}

HybridCache build_caches(const EmbeddingBundle& bundle, const MpgParams& params, double sharpness,
                         double logit_scale) {
  const std::size_t N = bundle.num_classes, M = params.cfg.props, D = bundle.dim;
  if (params.cfg.dim != D) throw ShapeMismatch("generator width differs from bundle width");
  std::vector<std::vector<std::size_t>> by_class(N);
  for (const std::size_t j : bundle.support) by_class.at(bundle.labels[j]).push_back(j);

  HybridCache c;
  c.m = M;
  c.class_prompts = bundle.class_prompts;
  c.class_keys = Tensor::matrix(N, D);
  c.prop_keys = Tensor::matrix(N * M, D);
  c.class_labels = class_label_matrix(N);
  c.prop_labels = prop_label_matrix(N, M);
  c.sharpness = sharpness;
  c.logit_scale = logit_scale;

  for (std::size_t n = 0; n < N; ++n) {
    if (by_class[n].empty()) throw EmptyClass("class " + std::to_string(n) + " has no supports");
    std::vector<std::span<const double>> cls_rows;
    std::vector<Tensor> tokens;
    for (const std::size_t j : by_class[n]) {
      cls_rows.push_back(bundle.class_token(j));
      tokens.push_back(property_tokens(params, bundle.patches[j]));
    }
    const auto key = mean_direction(cls_rows, "class " + std::to_string(n));
    std::copy(key.begin(), key.end(), c.class_keys.row_span(n).begin());
    for (std::size_t i = 0; i < M; ++i) {
      std::vector<std::span<const double>> slot_rows;
      for (const auto& t : tokens) slot_rows.push_back(t.row_span(i));
      const auto pk =
          mean_direction(slot_rows, "class " + std::to_string(n) + " slot " + std::to_string(i));
      std::copy(pk.begin(), pk.end(), c.prop_keys.row_span(n * M + i).begin());
    }
  }
  return c;
}

ScoreBreakdown hybrid_scores(std::span<const double> f_cls, const Tensor& tokens,
                             const HybridCache& cache) {
  if (tokens.ndim() != 2 || tokens.rows() != cache.m)
    throw ShapeMismatch("expected " + std::to_string(cache.m) + " property tokens, got " +
                        shape_str(tokens.shape()));
  ScoreBreakdown s;
  s.s_clip = zero_shot(f_cls, cache.class_prompts);
  for (auto& v : s.s_clip) v *= cache.logit_scale;
  const std::size_t N = s.s_clip.size();

  std::vector<double> mp(N, 0.0);
  for (std::size_t i = 0; i < cache.m; ++i) {
    const auto part = cache_logits(tokens.row_span(i), cache.prop_keys, cache.prop_labels,
                                   cache.sharpness);
    for (std::size_t n = 0; n < N; ++n) mp[n] += part[n];
  }
  const auto cls =
      cache_logits(f_cls, cache.class_keys, cache.class_labels, cache.sharpness);

  s.s_mp_cache.resize(N);
  s.s_cls_cache.resize(N);
  s.s_ours.resize(N);
  const double inv_m = 1.0 / static_cast<double>(cache.m);
  for (std::size_t n = 0; n < N; ++n) {
    s.s_mp_cache[n] = s.s_clip[n] + cache.alpha * inv_m * mp[n];
    s.s_cls_cache[n] = s.s_clip[n] + cache.beta * cls[n];
    s.s_ours[n] = s.s_mp_cache[n] + s.s_cls_cache[n];
  }
  return s;
}

Prediction predict(std::span<const double> f_cls, const Tensor& tokens, const HybridCache& cache) {
  Prediction p;
  p.scores = hybrid_scores(f_cls, tokens, cache);
  p.label = ops::argmax(p.scores.s_ours);
  return p;
}

void CacheTrainConfig::validate() const {
  if (epochs < 1) throw ArgumentError("cache epochs must be >= 1");
  if (batch < 1) throw ArgumentError("cache batch must be >= 1");
  if (!(lr >= 0.0)) throw ArgumentError("cache lr must be >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0))
    throw ArgumentError("warm-up fraction must lie in [0, 1]");
}

double warmup_lr(std::size_t step, std::size_t total_steps, const CacheTrainConfig& cfg) {
  const auto warm = static_cast<std::size_t>(
      std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (warm == 0) return cfg.lr;
  return cfg.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warm));
}

ad::Var cache_loss(const CacheVars& vars, const CacheBatch& batch, const HybridCache& cache) {
  const ad::Var s_clip =
      ad::constant(ops::matmul_nt(batch.f_cls, cache.class_prompts));
  const ad::Var clip = ad::scale(s_clip, cache.logit_scale);
  const ad::Var f = ad::constant(batch.f_cls);
  const ad::Var cls = ad::matmul(affinity(f, vars.class_keys, cache.sharpness),
                                 ad::constant(cache.class_labels));
  const ad::Var prop_labels = ad::constant(cache.prop_labels);
  ad::Var mp;
  for (const auto& t : batch.tokens) {
    const ad::Var part =
        ad::matmul(affinity(ad::constant(t), vars.prop_keys, cache.sharpness), prop_labels);
    mp = mp ? ad::add(mp, part) : part;
  }
  mp = ad::scale(mp, 1.0 / static_cast<double>(batch.tokens.size()));
  const ad::Var y = ad::constant(batch.one_hot);
  const ad::Var s_cls = ad::add(clip, ad::mul_scalar(vars.beta, cls));
  const ad::Var s_mp = ad::add(clip, ad::mul_scalar(vars.alpha, mp));
  return ad::add(cross_entropy_sum(s_cls, y), cross_entropy_sum(s_mp, y));
}

CacheBatch make_cache_batch(const EmbeddingBundle& bundle, std::span<const std::size_t> images,
                            const std::vector<Tensor>& tokens_per_image) {
  if (images.empty()) throw EmptyInput("empty cache batch");
  const std::size_t B = images.size(), D = bundle.dim, N = bundle.num_classes;
  const std::size_t M = tokens_per_image.at(images[0]).rows();
  CacheBatch b;
  b.f_cls = ops::select_rows(bundle.class_tokens, images);
  b.tokens.assign(M, Tensor::matrix(B, D));
  b.one_hot = Tensor::matrix(B, N);
  for (std::size_t r = 0; r < B; ++r) {
    const Tensor& t = tokens_per_image.at(images[r]);
    for (std::size_t i = 0; i < M; ++i)
      std::copy(t.row_span(i).begin(), t.row_span(i).end(), b.tokens[i].row_span(r).begin());
    b.one_hot(r, bundle.labels[images[r]]) = 1.0;
  }
  return b;
}

CacheTrainResult train_cache(const EmbeddingBundle& bundle, const HybridCache& cache,
                             const MpgParams& params, const CacheTrainConfig& cfg) {
  cfg.validate();
  if (bundle.support.empty()) throw EmptyInput("no support images");
  std::vector<Tensor> tokens(bundle.image_count());
  for (const std::size_t j : bundle.support) tokens[j] = property_tokens(params, bundle.patches[j]);

  CacheVars vars{ad::parameter(cache.class_keys), ad::parameter(cache.prop_keys),
                 ad::parameter(Tensor::scalar(cache.alpha)),
                 ad::parameter(Tensor::scalar(cache.beta))};
  AdamW opt({vars.class_keys, vars.prop_keys, vars.alpha, vars.beta}, cfg.adamw);

  const std::size_t steps_per_epoch = (bundle.support.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  CacheTrainResult res{cache, {}};
  Rng root(cfg.seed);
  std::vector<std::size_t> order = bundle.support;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = root.fork(epoch);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch, ++step) {
      const std::size_t len = std::min(cfg.batch, order.size() - b);
      const CacheBatch batch =
          make_cache_batch(bundle, std::span<const std::size_t>(order.data() + b, len), tokens);
      const ad::Var loss = cache_loss(vars, batch, res.cache);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NonFiniteLoss("non-finite cache loss at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(step));
      }
      epoch_loss += value;
      ad::backward(loss);
      opt.step(warmup_lr(step, total_steps, cfg));
      renormalize_rows(vars.class_keys.mutable_value(), "class");
      renormalize_rows(vars.prop_keys.mutable_value(), "property");
      for (ad::Var* w : {&vars.alpha, &vars.beta}) {
        double& v = w->mutable_value()[0];
        v = std::max(0.0, v);
      }
    }
    res.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  res.cache.class_keys = vars.class_keys.value();
  res.cache.prop_keys = vars.prop_keys.value();
  res.cache.alpha = vars.alpha.value().item();
  res.cache.beta = vars.beta.value().item();
  res.cache.trained = true;
  return res;
}

void save_cache(const std::filesystem::path& dir, const HybridCache& cache) {
  json table = json::object();
  const std::pair<const char*, const Tensor*> tensors[] = {
      {"class_prompts", &cache.class_prompts},
      {"class_keys", &cache.class_keys},
      {"prop_keys", &cache.prop_keys}};
  for (const auto& [name, t] : tensors) {
    const std::string rel = std::string(name) + ".pct1";
    save_tensor(dir / rel, *t);
    table[name] = {{"path", rel}, {"shape", t->shape()}, {"crc32", payload_crc32(*t)}};
  }
  json j = {{"format_version", kFormatVersion},
            {"alpha", cache.alpha},
            {"beta", cache.beta},
            {"beta_s", cache.sharpness},
            {"logit_scale", cache.logit_scale},
            {"M", cache.m},
            {"N", cache.num_classes()},
            {"trained", cache.trained},
            {"files", table}};
  write_text_file(dir / "cache.json", j.dump(2) + "\n");
}

HybridCache load_cache(const std::filesystem::path& dir) {
  HybridCache c;
  json j;
  std::size_t n = 0;
  try {
    const auto raw = read_file_bytes(dir / "cache.json");
    j = json::parse(raw.begin(), raw.end());
    c.alpha = j.at("alpha").get<double>();
    c.beta = j.at("beta").get<double>();
    c.sharpness = j.at("beta_s").get<double>();
    c.logit_scale = j.at("logit_scale").get<double>();
    c.m = j.at("M").get<std::size_t>();
    c.trained = j.at("trained").get<bool>();
    n = j.at("N").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("cache.json: ") + e.what());
  }
  auto load = [&](const char* name, const Shape& want) {
    if (!j["files"].contains(name)) throw FormatError(std::string("cache.json lacks ") + name);
    const auto& fe = j["files"][name];
    Tensor t = load_tensor(dir / fe.at("path").get<std::string>());
    if (payload_crc32(t) != fe.at("crc32").get<std::uint32_t>())
      throw ChecksumError(std::string("cache tensor ") + name + " checksum mismatch");
    if (t.ndim() != 2 || t.rows() != want[0] || (want[1] && t.cols() != want[1]))
      throw ShapeHeaderMismatch(std::string("cache tensor ") + name + " has shape " +
                                shape_str(t.shape()));
    return t;
  };
  c.class_prompts = load("class_prompts", {n, 0});
  const std::size_t d = c.class_prompts.cols();
  c.class_keys = load("class_keys", {n, d});
  c.prop_keys = load("prop_keys", {n * c.m, d});
  c.class_labels = class_label_matrix(n);
  c.prop_labels = prop_label_matrix(n, c.m);
  return c;
}

}  // namespace propcache

#include "propcache/contrast.hpp"

#include <cmath>
#include <string>

#include "json.hpp"
#include "propcache/errors.hpp"
#include "propcache/tensor_io.hpp"

namespace propcache {

using nlohmann::json;

void ContrastConfig::validate() const {
  if (!(tau > 0.0)) throw ArgumentError("tau must be > 0");
  if (negatives < 1) throw ArgumentError("need at least one negative");
  if (!(0.0 <= hard_frac_start && hard_frac_start <= hard_frac_end && hard_frac_end <= 1.0))
    throw ArgumentError("need 0 <= hard_frac_start <= hard_frac_end <= 1");
  if (epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (batch < 1) throw ArgumentError("batch must be >= 1");
  if (!(lr >= 0.0)) throw ArgumentError("lr must be >= 0");
}

NegativeQuota schedule(std::size_t epoch, const ContrastConfig& cfg) {
  cfg.validate();
  if (epoch >= cfg.epochs)
    throw ArgumentError("epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(cfg.epochs) + ")");
  const double t =
      cfg.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1) : 0.0;
  const double frac = cfg.hard_frac_start + (cfg.hard_frac_end - cfg.hard_frac_start) * t;
  const auto hard = static_cast<std::size_t>(std::lround(frac * static_cast<double>(cfg.negatives)));
  return {hard, cfg.negatives - hard};
}

NegativeQuota fit_quota(NegativeQuota quota, std::size_t hard_pool, std::size_t general_pool) {
  if (hard_pool == 0 && general_pool == 0) throw NoPositives("both negative pools are empty");
  if (general_pool == 0) return {quota.hard + quota.general, 0};
  if (hard_pool == 0) return {0, quota.hard + quota.general};
  return quota;
}

std::vector<std::size_t> sample_pool(const std::vector<std::size_t>& pool, std::size_t count,
                                     Rng& rng) {
  std::vector<std::size_t> out;
  if (count == 0) return out;
  if (pool.empty()) throw NoPositives("cannot sample from an empty pool");
  out.reserve(count);
  if (count <= pool.size()) {
    // Partial Fisher-Yates.
    std::vector<std::size_t> work = pool;
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(work[i], work[i + rng.below(work.size() - i)]);
      out.push_back(work[i]);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

ContrastItem sample_item(const ClassProperties& props, std::size_t image, std::size_t slot,
                         NegativeQuota quota, Rng& rng) {
  if (slot >= props.positives.size()) throw ArgumentError("slot out of range");
  const auto& pos = props.positives[slot];
  if (pos.empty()) throw NoPositives("slot " + std::to_string(slot) + " has no positives");
  quota = fit_quota(quota, props.hard.size(), props.general.size());
  ContrastItem item;
  item.image = image;
  item.slot = slot;
  item.positive = pos[rng.below(pos.size())];
  item.hard = sample_pool(props.hard, quota.hard, rng);
  item.general = sample_pool(props.general, quota.general, rng);
  return item;
}

namespace {

Tensor stack_candidates(const Tensor& positive, const Tensor& hard, const Tensor& general) {
  std::vector<Tensor> parts{positive};
  if (!hard.empty()) parts.push_back(hard);
  if (!general.empty()) parts.push_back(general);
  return ops::vstack(parts);
}

}  // namespace

ad::Var info_nce(const ad::Var& token, const Tensor& positive, const Tensor& hard,
                 const Tensor& general, double tau) {
  if (!(tau > 0.0)) throw ArgumentError("tau must be > 0");
  if (positive.ndim() != 2 || positive.rows() != 1)
    throw ShapeMismatch("info_nce expects exactly one positive row");
  const ad::Var cands = ad::constant(stack_candidates(positive, hard, general));
  const ad::Var logits = ad::scale(ad::matmul_nt(token, cands), 1.0 / tau);
  return ad::scale(ad::slice_cols(ad::log_softmax_rows(logits), 0, 1), -1.0);
}

double info_nce_value(std::span<const double> token, const Tensor& positive, const Tensor& hard,
                      const Tensor& general, double tau) {
  return info_nce(ad::constant(Tensor::row(token)), positive, hard, general, tau).value().item();
}

ad::Var similarity_tokens(const MpgParams& params, const ad::Var& patches, bool normalize) {
  const ad::Var tokens = mpg_forward(params, patches);
  return normalize ? ad::l2_normalize_rows(tokens) : tokens;
}

ad::Var total_property_loss(const EmbeddingBundle& bundle, const MpgParams& params,
                            const PropertyAssignment& assignment, const DescriptionPool& pool,
                            std::span<const std::size_t> images, NegativeQuota quota,
                            const ContrastConfig& cfg, Rng& rng) {
  if (images.empty()) throw EmptyInput("no images for the property loss");
  if (assignment.classes.size() != bundle.num_classes)
    throw ArgumentError("assignment does not cover every class");
  if (assignment.m != params.cfg.props)
    throw ArgumentError("assignment M differs from the generator's M");
  ad::Var total;
  for (const std::size_t j : images) {
    const ClassProperties& props = assignment.classes.at(bundle.labels.at(j));
    const ad::Var tokens =
        similarity_tokens(params, ad::constant(bundle.patches.at(j)), cfg.normalize_tokens);
    for (std::size_t i = 0; i < assignment.m; ++i) {
      const ContrastItem item = sample_item(props, j, i, quota, rng);
      const std::size_t pos_row[] = {item.positive};
      const ad::Var term = info_nce(ad::slice_rows(tokens, i, 1),
                                    ops::select_rows(pool.extended, pos_row),
                                    ops::select_rows(pool.extended, item.hard),
                                    ops::select_rows(pool.extended, item.general), cfg.tau);
      total = total ? ad::add(total, term) : term;
    }
  }
  return total;
}

MpgTrainResult train_mpg(const EmbeddingBundle& bundle, const PropertyAssignment& assignment,
                         const DescriptionPool& pool, const MpgParams& init,
                         const ContrastConfig& cfg) {
  cfg.validate();
  if (bundle.support.empty()) throw EmptyInput("no support images");
  MpgTrainResult res{init.clone(), {}};
  AdamW opt(res.params.all(), cfg.adamw);
  Rng root(cfg.seed);
  std::vector<std::size_t> order = bundle.support;
  const double terms_per_image = static_cast<double>(assignment.m);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = root.fork(epoch);
    const NegativeQuota quota = schedule(epoch, cfg);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t step = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch, ++step) {
      const std::size_t len = std::min(cfg.batch, order.size() - b);
      const std::span<const std::size_t> batch(order.data() + b, len);
      const std::string where = "epoch " + std::to_string(epoch) + ", step " + std::to_string(step);
      ad::Var loss;
      try {
        loss = total_property_loss(bundle, res.params, assignment, pool, batch, quota, cfg, rng);
      } catch (const DegenerateVector& e) {
        throw NonFiniteLoss("property loss at " + where + ": " + e.what());
      }
      const double value = loss.value().item();
      if (!std::isfinite(value)) throw NonFiniteLoss("non-finite property loss at " + where);
      epoch_loss += value;
      ad::backward(loss);
      opt.step(cfg.lr);
    }
    res.trace.push_back(
        {epoch, epoch_loss / (static_cast<double>(order.size()) * terms_per_image), quota});
  }
  return res;
}

void save_trace(const std::filesystem::path& path, const std::vector<EpochRecord>& trace,
                const ContrastConfig& cfg) {
  json epochs = json::array();
  for (const auto& r : trace) {
    epochs.push_back({{"epoch", r.epoch},
                      {"mean_loss", r.mean_loss},
                      {"n_hard", r.quota.hard},
                      {"n_general", r.quota.general}});
  }
  json j = {{"format_version", kFormatVersion},
            {"config",
             {{"tau", cfg.tau},
              {"negatives", cfg.negatives},
              {"hard_frac_start", cfg.hard_frac_start},
              {"hard_frac_end", cfg.hard_frac_end},
              {"epochs", cfg.epochs},
              {"lr", cfg.lr},
              {"batch", cfg.batch},
              {"seed", cfg.seed},
              {"normalize_tokens", cfg.normalize_tokens},
              {"adamw",
               {{"beta1", cfg.adamw.beta1},
                {"beta2", cfg.adamw.beta2},
                {"eps", cfg.adamw.eps},
                {"weight_decay", cfg.adamw.weight_decay}}}}},
            {"epochs", epochs}};
  write_text_file(path, j.dump(2) + "\n");
}

double alignment_rate(const EmbeddingBundle& bundle, const DescriptionSet& descs,
                      const MpgParams& params, const PlantRecord& plant, bool normalize) {
  std::size_t hits = 0, total = 0;
  for (const std::size_t j : bundle.support) {
    const std::size_t n = bundle.labels[j];
    const Tensor& ext = descs.classes.at(n).extended;
    const Tensor tokens =
        similarity_tokens(params, ad::constant(bundle.patches[j]), normalize).value();
    const Tensor sims = ops::matmul_nt(tokens, ext);
    for (std::size_t i = 0; i < tokens.rows(); ++i) {
      const std::size_t best = ops::argmax(sims.row_span(i));
      hits += plant.description_property.at(n).at(best) == i ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

}  // namespace propcache

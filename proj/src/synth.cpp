#include "propcache/synth.hpp"

#include <cmath>

#include "json.hpp"
#include "propcache/errors.hpp"
#include "propcache/rng.hpp"
#include "propcache/tensor_io.hpp"

namespace propcache {

using nlohmann::json;

namespace {

constexpr std::size_t kBackgroundDirections = 4;

std::vector<std::vector<double>> draw_directions(Rng& rng, std::size_t count, std::size_t dim) {
  std::vector<std::vector<double>> dirs(count, std::vector<double>(dim));
  for (auto& d : dirs)
    for (auto& v : d) v = rng.normal();
  if (count <= dim) {
    // Modified Gram-Schmidt; Gaussian draws are full rank with probability 1.
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        const double p = ops::dot(dirs[i], dirs[j]);
        for (std::size_t k = 0; k < dim; ++k) dirs[i][k] -= p * dirs[j][k];
      }
      dirs[i] = ops::normalized(dirs[i]);
    }
  } else {
    for (auto& d : dirs) d = ops::normalized(d);
  }
  return dirs;
}

// normalize(base + scale·ξ/√D), ξ standard normal.
std::vector<double> noisy_unit(Rng& rng, const std::vector<double>& base, double scale) {
  std::vector<double> v = base;
  const double s = scale / std::sqrt(static_cast<double>(base.size()));
  for (auto& x : v) x += s * rng.normal();
  return ops::normalized(v);
}

void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += a * x[k];
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows, std::size_t dim) {
  Tensor t = Tensor::matrix(rows.size(), dim);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].begin(), rows[r].end(), t.row_span(r).begin());
  return t;
}

}  // namespace

SynthResult gen_synthetic(const SynthConfig& cfg) {
  if (cfg.dim < 8) throw ArgumentError("dim must be >= 8");
  if (cfg.props < 1) throw ArgumentError("props must be >= 1");
  if (cfg.patches < cfg.props) throw ArgumentError("patches must be >= props");
  if (cfg.classes < 1) throw ArgumentError("classes must be >= 1");
  if (cfg.shots < 1) throw ArgumentError("shots must be >= 1");
  if (cfg.descriptions_per_property < 1) throw ArgumentError("descriptions per property must be >= 1");
  if (!(cfg.noise >= 0.0) || !(cfg.sibling_gap >= 0.0) || !(cfg.property_spread >= 0.0))
    throw ArgumentError("noise, sibling gap and property spread must be >= 0");

  const std::size_t N = cfg.classes, M = cfg.props, D = cfg.dim;
  const std::size_t groups = (N + 1) / 2;
  const std::size_t types = std::max(M, groups);

  Rng rng(cfg.seed);
  const std::size_t total_dirs = groups + N + types + N * M + kBackgroundDirections;
  auto dirs = draw_directions(rng, total_dirs, D);
  std::size_t next = 0;
  auto take = [&](std::size_t n) {
    std::vector<std::vector<double>> out(dirs.begin() + next, dirs.begin() + next + n);
    next += n;
    return out;
  };
  const auto group_dirs = take(groups);
  const auto own_dirs = take(N);
  const auto type_dirs = take(types);
  const auto variant_dirs = take(N * M);
  const auto background = take(kBackgroundDirections);

  // Slot i draws from family {t : t mod M == i}.
  std::vector<std::vector<std::size_t>> family(M);
  for (std::size_t t = 0; t < types; ++t) family[t % M].push_back(t);

  SynthResult res;
  PlantRecord& plant = res.plant;
  plant.type_count = types;
  plant.property_types.assign(N, std::vector<std::size_t>(M));
  std::vector<std::vector<double>> class_dirs(N), prop_dirs(N * M);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t g = n / 2;
    std::vector<double> c = group_dirs[g];
    axpy(c, cfg.sibling_gap, own_dirs[n]);
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t t = family[i][g % family[i].size()];
      plant.property_types[n][i] = t;
      const double w = 0.6 * static_cast<double>(M - i) / static_cast<double>(M);
      axpy(c, w, type_dirs[t]);
      std::vector<double> u = type_dirs[t];
      axpy(u, cfg.property_spread, variant_dirs[n * M + i]);
      prop_dirs[n * M + i] = ops::normalized(u);
    }
    class_dirs[n] = ops::normalized(c);
  }
  plant.class_directions = rows_to_tensor(class_dirs, D);
  plant.property_directions = rows_to_tensor(prop_dirs, D);

  EmbeddingBundle& b = res.bundle;
  b.dim = D;
  b.patch_count = cfg.patches;
  b.num_classes = N;
  b.shots = cfg.shots;
  std::vector<std::vector<double>> prompts(N), tokens;
  for (std::size_t n = 0; n < N; ++n) {
    prompts[n] = noisy_unit(rng, class_dirs[n], cfg.noise * cfg.prompt_noise_ratio);
    b.class_names.push_back("class_" + std::string(n < 10 ? "0" : "") + std::to_string(n));
  }
  b.class_prompts = rows_to_tensor(prompts, D);

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < cfg.shots + cfg.queries; ++j) {
      const std::size_t image = b.labels.size();
      tokens.push_back(noisy_unit(rng, class_dirs[n], cfg.noise));
      std::vector<std::vector<double>> rows;
      for (std::size_t i = 0; i < M; ++i) rows.push_back(noisy_unit(rng, prop_dirs[n * M + i], cfg.noise));
      for (std::size_t p = M; p < cfg.patches; ++p)
        rows.push_back(noisy_unit(rng, background[rng.below(kBackgroundDirections)], cfg.noise));
      rng.shuffle(rows);
      b.patches.push_back(rows_to_tensor(rows, D));
      b.labels.push_back(n);
      (j < cfg.shots ? b.support : b.query).push_back(image);
    }
  }
  b.class_tokens = rows_to_tensor(tokens, D);

  res.descriptions.classes.resize(N);
  plant.description_property.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    auto& cd = res.descriptions.classes[n];
    cd.class_name = b.class_names[n];
    std::vector<std::vector<double>> plain, extended;
    for (std::size_t i = 0; i < M; ++i) {
      std::vector<double> ext_base = prop_dirs[n * M + i];
      axpy(ext_base, cfg.extended_class_weight, class_dirs[n]);
      for (std::size_t r = 0; r < cfg.descriptions_per_property; ++r) {
        cd.texts.push_back("trait " + std::to_string(plant.property_types[n][i]) + ", form " +
                           std::to_string(n * M + i) + ", wording " + std::to_string(r));
        plain.push_back(noisy_unit(rng, prop_dirs[n * M + i], cfg.noise));
        extended.push_back(noisy_unit(rng, ext_base, cfg.noise));
        plant.description_property[n].push_back(i);
      }
    }
    cd.plain = rows_to_tensor(plain, D);
    cd.extended = rows_to_tensor(extended, D);
  }
  return res;
}

void write_synthetic(const std::filesystem::path& dir, const SynthConfig& cfg,
                     const SynthResult& result) {
  Manifest m;
  m.root = dir;
  m.props = cfg.props;
  m.seed = cfg.seed;
  store_bundle(m, result.bundle, result.descriptions);
  m.store("plant_class_directions", "tensors/plant_class_directions.pct1",
          result.plant.class_directions);
  m.store("plant_property_directions", "tensors/plant_property_directions.pct1",
          result.plant.property_directions);
  json p = {{"format_version", kFormatVersion},
            {"type_count", result.plant.type_count},
            {"property_types", result.plant.property_types},
            {"description_property", result.plant.description_property},
            {"config",
             {{"classes", cfg.classes},
              {"shots", cfg.shots},
              {"queries", cfg.queries},
              {"dim", cfg.dim},
              {"patches", cfg.patches},
              {"props", cfg.props},
              {"noise", cfg.noise},
              {"seed", cfg.seed},
              {"descriptions_per_property", cfg.descriptions_per_property},
              {"sibling_gap", cfg.sibling_gap},
              {"property_spread", cfg.property_spread},
              {"prompt_noise_ratio", cfg.prompt_noise_ratio},
              {"extended_class_weight", cfg.extended_class_weight}}}};
  m.store_raw("plant", "plant.json", p.dump(2) + "\n", {});
  m.write(dir / "manifest.json");
}

PlantRecord load_plant(const std::filesystem::path& dir) {
  const Manifest m = Manifest::read(dir / "manifest.json");
  const auto raw = m.load_raw("plant");
  PlantRecord plant;
  try {
    const json p = json::parse(raw.begin(), raw.end());
    plant.type_count = p.at("type_count").get<std::size_t>();
    plant.property_types = p.at("property_types").get<std::vector<std::vector<std::size_t>>>();
    plant.description_property =
        p.at("description_property").get<std::vector<std::vector<std::size_t>>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("plant.json: ") + e.what());
  }
  plant.class_directions = m.load("plant_class_directions");
  plant.property_directions = m.load("plant_property_directions");
  return plant;
}

}  // namespace propcache

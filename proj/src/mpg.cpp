#include "propcache/mpg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "json.hpp"
#include "propcache/datastore.hpp"
#include "propcache/errors.hpp"
#include "propcache/rng.hpp"
#include "propcache/tensor_io.hpp"

namespace propcache {

using nlohmann::json;

namespace {

constexpr double kInitStd = 0.02;

Tensor gaussian(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.data()) v = kInitStd * rng.normal();
  return t;
}

template <typename F>
void for_each_param(const MpgParams& p, F&& f) {
  f("seeds", p.seeds);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    f(pre + "wq", L.wq);
    f(pre + "wk", L.wk);
    f(pre + "wv", L.wv);
    f(pre + "wo", L.wo);
    f(pre + "attn_gain", L.attn_gain);
    f(pre + "attn_bias", L.attn_bias);
    for (std::size_t g = 0; g < L.ffn_w1.size(); ++g) {
      const std::string gp = pre + "ffn" + std::to_string(g) + ".";
      f(gp + "w1", L.ffn_w1[g]);
      f(gp + "b1", L.ffn_b1[g]);
      f(gp + "w2", L.ffn_w2[g]);
      f(gp + "b2", L.ffn_b2[g]);
    }
    f(pre + "ffn_gain", L.ffn_gain);
    f(pre + "ffn_bias", L.ffn_bias);
  }
}

void validate_config(const MpgConfig& cfg) {
  if (cfg.props < 1) throw ArgumentError("MPG needs M >= 1");
  if (cfg.dim < 2) throw ArgumentError("MPG needs D >= 2");
  if (cfg.layers < 1) throw ArgumentError("MPG needs L >= 1");
  if (cfg.heads < 1 || cfg.dim % cfg.heads != 0)
    throw ArgumentError("head count must divide D");
}

ad::Var norm_or_identity(const MpgConfig& cfg, const ad::Var& x, const ad::Var& gain,
                         const ad::Var& bias) {
  return cfg.layer_norm ? ad::layer_norm_rows(x, gain, bias, cfg.ln_eps) : x;
}

}  // namespace

std::vector<ad::Var> MpgParams::all() const {
  std::vector<ad::Var> out;
  for_each_param(*this, [&](const std::string&, const ad::Var& v) { out.push_back(v); });
  return out;
}

std::vector<std::string> MpgParams::names() const {
  std::vector<std::string> out;
  for_each_param(*this, [&](const std::string& n, const ad::Var&) { out.push_back(n); });
  return out;
}

std::size_t MpgParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& v : all()) total += v.value().size();
  return total;
}

MpgParams MpgParams::clone() const {
  MpgParams c = *this;
  auto fresh = [](ad::Var& v) { v = ad::parameter(v.value()); };
  fresh(c.seeds);
  for (auto& L : c.layers) {
    for (ad::Var* v : {&L.wq, &L.wk, &L.wv, &L.wo, &L.attn_gain, &L.attn_bias, &L.ffn_gain,
                       &L.ffn_bias})
      fresh(*v);
    for (auto* group : {&L.ffn_w1, &L.ffn_b1, &L.ffn_w2, &L.ffn_b2})
      for (auto& v : *group) fresh(v);
  }
  return c;
}

MpgParams init_params(const MpgConfig& cfg) {
  validate_config(cfg);
  const std::size_t M = cfg.props, D = cfg.dim, H = cfg.hidden_width();
  Rng rng(cfg.seed);
  MpgParams p;
  p.cfg = cfg;
  p.seeds = ad::parameter(gaussian(rng, M, D));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    MpgLayer L;
    L.wq = ad::parameter(gaussian(rng, D, D));
    L.wk = ad::parameter(gaussian(rng, D, D));
    L.wv = ad::parameter(gaussian(rng, D, D));
    L.wo = ad::parameter(Tensor::matrix(D, D));
    L.attn_gain = ad::parameter(Tensor::matrix(1, D, 1.0));
    L.attn_bias = ad::parameter(Tensor::matrix(1, D));
    for (std::size_t g = 0; g < M; ++g) {
      L.ffn_w1.push_back(ad::parameter(gaussian(rng, D, H)));
      L.ffn_b1.push_back(ad::parameter(Tensor::matrix(1, H)));
      L.ffn_w2.push_back(ad::parameter(Tensor::matrix(H, D)));
      L.ffn_b2.push_back(ad::parameter(Tensor::matrix(1, D)));
    }
    L.ffn_gain = ad::parameter(Tensor::matrix(1, D, 1.0));
    L.ffn_bias = ad::parameter(Tensor::matrix(1, D));
    p.layers.push_back(std::move(L));
  }
  return p;
}

ad::Var mpg_forward(const MpgParams& params, const ad::Var& patches) {
  const MpgConfig& cfg = params.cfg;
  if (patches.value().ndim() != 2 || patches.cols() != cfg.dim || patches.rows() < 1) {
    throw ShapeMismatch("MPG expects P×" + std::to_string(cfg.dim) + " patches, got " +
                        shape_str(patches.shape()));
  }
  const std::size_t head_dim = cfg.dim / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  ad::Var tokens = params.seeds;
  for (const auto& L : params.layers) {
    const ad::Var q = ad::matmul(tokens, L.wq);
    const ad::Var k = ad::matmul(patches, L.wk);
    const ad::Var v = ad::matmul(patches, L.wv);
    std::vector<ad::Var> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      ad::Var qh = q, kh = k, vh = v;
      if (cfg.heads > 1) {
        qh = ad::slice_cols(q, h * head_dim, head_dim);
        kh = ad::slice_cols(k, h * head_dim, head_dim);
        vh = ad::slice_cols(v, h * head_dim, head_dim);
      }
      const ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
      heads.push_back(ad::matmul(attn, vh));
    }
    const ad::Var mixed = cfg.heads > 1 ? ad::concat_cols(heads) : heads.front();
    const ad::Var attended =
        norm_or_identity(cfg, ad::add(tokens, ad::matmul(mixed, L.wo)), L.attn_gain, L.attn_bias);

    // Group-wise FFN: group g only sees token g.
    std::vector<ad::Var> rows;
    for (std::size_t g = 0; g < cfg.props; ++g) {
      const ad::Var x = ad::slice_rows(attended, g, 1);
      const ad::Var h = ad::gelu(ad::add_row(ad::matmul(x, L.ffn_w1[g]), L.ffn_b1[g]));
      rows.push_back(ad::add_row(ad::matmul(h, L.ffn_w2[g]), L.ffn_b2[g]));
    }
    tokens = norm_or_identity(cfg, ad::add(attended, ad::concat_rows(rows)), L.ffn_gain,
                              L.ffn_bias);
  }
  return tokens;
}

Tensor mpg_tokens(const MpgParams& params, const Tensor& patches) {
  return mpg_forward(params, ad::constant(patches)).value();
}

std::vector<SlotAngle> mutual_token_angles(const std::vector<Tensor>& tokens_per_image) {
  std::vector<SlotAngle> out;
  if (tokens_per_image.empty()) return out;
  const std::size_t m = tokens_per_image.front().rows();
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      double total = 0.0;
      for (const auto& t : tokens_per_image) {
        const auto ua = ops::normalized(t.row_span(a));
        const auto ub = ops::normalized(t.row_span(b));
        const double c = std::clamp(ops::dot(ua, ub), -1.0, 1.0);
        total += std::acos(c) * 180.0 / std::numbers::pi;
      }
      out.push_back({a, b, total / static_cast<double>(tokens_per_image.size())});
    }
  }
  return out;
}

void save_mpg(const std::filesystem::path& dir, const MpgParams& params) {
  json table = json::object();
  for_each_param(params, [&](const std::string& name, const ad::Var& v) {
    const std::string rel = name + ".pct1";
    save_tensor(dir / rel, v.value());
    table[name] = {{"path", rel}, {"shape", v.value().shape()}, {"crc32", payload_crc32(v.value())}};
  });
  const MpgConfig& c = params.cfg;
  json j = {{"format_version", kFormatVersion},
            {"M", c.props},
            {"D", c.dim},
            {"L", c.layers},
            {"H", c.hidden_width()},
            {"heads", c.heads},
            {"seed", c.seed},
            {"layer_norm", c.layer_norm},
            {"ln_eps", c.ln_eps},
            {"files", table}};
  write_text_file(dir / "mpg.json", j.dump(2) + "\n");
}

MpgParams load_mpg(const std::filesystem::path& dir) {
  json j;
  MpgConfig cfg;
  try {
    const auto raw = read_file_bytes(dir / "mpg.json");
    j = json::parse(raw.begin(), raw.end());
    cfg.props = j.at("M").get<std::size_t>();
    cfg.dim = j.at("D").get<std::size_t>();
    cfg.layers = j.at("L").get<std::size_t>();
    cfg.hidden = j.at("H").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.layer_norm = j.at("layer_norm").get<bool>();
    cfg.ln_eps = j.at("ln_eps").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("mpg.json: ") + e.what());
  }
  MpgParams p = init_params(cfg);
  for_each_param(p, [&](const std::string& name, const ad::Var& v) {
    if (!j["files"].contains(name)) throw FormatError("mpg.json lacks parameter " + name);
    const auto& fe = j["files"][name];
    Tensor t = load_tensor(dir / fe.at("path").get<std::string>());
    if (t.shape() != v.value().shape())
      throw ShapeHeaderMismatch("MPG parameter " + name + " has shape " + shape_str(t.shape()));
    if (payload_crc32(t) != fe.at("crc32").get<std::uint32_t>())
      throw ChecksumError("MPG parameter " + name + " checksum mismatch");
    ad::Var handle = v;
    handle.mutable_value() = std::move(t);
  });
  return p;
}

}  // namespace propcache

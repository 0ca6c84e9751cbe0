#pragma once

// The encoder.encoder model: a hypothesis encoder that maps confusion-network
// windows to time-aligned embeddings R_1..R_N, and a query encoder that maps
// graphemes to K embeddings plus a minimum hit length, optionally sharing one
// Transformer stack.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encdot/confnet.hpp"
#include "encdot/numerics/adam.hpp"
#include "encdot/numerics/ops.hpp"
#include "encdot/numerics/parameters.hpp"

namespace encdot {

struct EncoderConfig {
  int layers = 4;
  int heads = 4;
  int d_model = 256;
  int d_ff = 1024;
  double dropout = 0.15;
  int conv_width = 3;
  int conv_stride = 2;
  int mask_band = 2;
  int N = 256;
  int M = 16;
  bool share_transformer = true;
  bool hypothesis_masking = true;
  bool query_masking = false;
  bool mask_query_padding = false;
  std::vector<std::string> languages;

  void validate() const {
    auto fail = [](const std::string& what) { throw Error("encoder config: " + what); };
    if (layers < 0) fail("layers must be >= 0");
    if (heads < 1 || d_model < 1 || d_ff < 1) fail("heads, d_model and d_ff must be >= 1");
    if (d_model % heads != 0) fail("d_model " + std::to_string(d_model) + " not divisible by heads " + std::to_string(heads));
    if (conv_width < 1 || conv_width % 2 == 0) fail("conv_width must be odd");
    if (conv_stride < 1) fail("conv_stride must be >= 1");
    if (mask_band < 0) fail("mask_band must be >= 0");
    if (N < 1 || M < 1) fail("N and M must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0,1)");
  }

  int hypothesis_positions() const { return (N + conv_stride - 1) / conv_stride; }
  // K, the number of query embeddings.
  int query_embeddings() const { return (M + conv_stride - 1) / conv_stride; }
  int conv_padding() const { return (conv_width - 1) / 2; }

  static EncoderConfig bert_mini() { return {}; }

  friend void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"layers", c.layers},
         {"heads", c.heads},
         {"d_model", c.d_model},
         {"d_ff", c.d_ff},
         {"dropout", c.dropout},
         {"conv_width", c.conv_width},
         {"conv_stride", c.conv_stride},
         {"mask_band", c.mask_band},
         {"N", c.N},
         {"M", c.M},
         {"share_transformer", c.share_transformer},
         {"hypothesis_masking", c.hypothesis_masking},
         {"query_masking", c.query_masking},
         {"mask_query_padding", c.mask_query_padding},
         {"languages", c.languages}};
  }

  friend void from_json(const nlohmann::json& j, EncoderConfig& c) {
    EncoderConfig d;
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.d_model = j.value("d_model", d.d_model);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.dropout = j.value("dropout", d.dropout);
    c.conv_width = j.value("conv_width", d.conv_width);
    c.conv_stride = j.value("conv_stride", d.conv_stride);
    c.mask_band = j.value("mask_band", d.mask_band);
    c.N = j.value("N", d.N);
    c.M = j.value("M", d.M);
    c.share_transformer = j.value("share_transformer", d.share_transformer);
    c.hypothesis_masking = j.value("hypothesis_masking", d.hypothesis_masking);
    c.query_masking = j.value("query_masking", d.query_masking);
    c.mask_query_padding = j.value("mask_query_padding", d.mask_query_padding);
    c.languages = j.value("languages", d.languages);
  }
};

// mask[i,j] = 1 iff |i-j| <= band
inline nn::Tensor build_band_mask(std::size_t n, std::size_t band) {
  nn::Tensor mask({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask.at(i, j) = (i > j ? i - j : j - i) <= band ? 1.0f : 0.0f;
  return mask;
}

inline nn::Tensor full_mask(std::size_t n) { return nn::filled({n, n}, 1.0f); }

enum class Init { kNormal, kZeros, kOnes };

struct ParameterSpec {
  std::string name;
  nn::Shape shape;
  Init init;
};

namespace detail {

inline void transformer_layout(std::vector<ParameterSpec>& out, const std::string& prefix, const EncoderConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model), ff = static_cast<std::size_t>(c.d_ff);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = prefix + "transformer." + std::to_string(l) + ".";
    for (const char* proj : {"q", "k", "v", "o"}) {
      out.push_back({p + "attn.w" + proj, {d, d}, Init::kNormal});
      out.push_back({p + "attn.b" + proj, {d}, Init::kZeros});
    }
    out.push_back({p + "ln1.gain", {d}, Init::kOnes});
    out.push_back({p + "ln1.bias", {d}, Init::kZeros});
    out.push_back({p + "ff.w1", {d, ff}, Init::kNormal});
    out.push_back({p + "ff.b1", {ff}, Init::kZeros});
    out.push_back({p + "ff.w2", {ff, d}, Init::kNormal});
    out.push_back({p + "ff.b2", {d}, Init::kZeros});
    out.push_back({p + "ln2.gain", {d}, Init::kOnes});
    out.push_back({p + "ln2.bias", {d}, Init::kZeros});
  }
}

}  // namespace detail

// Every trainable tensor of the model, in initialisation order.
inline std::vector<ParameterSpec> parameter_layout(const EncoderConfig& c, std::size_t vocab_size) {
  const auto d = static_cast<std::size_t>(c.d_model), w = static_cast<std::size_t>(c.conv_width);
  const auto v = vocab_size;
  std::vector<ParameterSpec> out;
  if (c.share_transformer) {
    detail::transformer_layout(out, "", c);
  } else {
    detail::transformer_layout(out, "hyp.", c);
    detail::transformer_layout(out, "qry.", c);
  }
  out.push_back({"hyp.embedding", {v, d}, Init::kNormal});
  out.push_back({"hyp.w_dur", {1, d}, Init::kNormal});
  out.push_back({"hyp.conv.w", {w, d, d}, Init::kNormal});
  out.push_back({"hyp.conv.b", {d}, Init::kZeros});
  out.push_back({"hyp.pos", {static_cast<std::size_t>(c.hypothesis_positions()), d}, Init::kNormal});
  out.push_back({"hyp.up.w", {w, d, d}, Init::kNormal});
  out.push_back({"hyp.up.b", {d}, Init::kZeros});
  out.push_back({"qry.embedding", {v, d}, Init::kNormal});
  out.push_back({"qry.cls", {1, d}, Init::kNormal});
  out.push_back({"qry.conv.w", {w, d, d}, Init::kNormal});
  out.push_back({"qry.conv.b", {d}, Init::kZeros});
  out.push_back({"qry.pos", {static_cast<std::size_t>(c.query_embeddings() + 1), d}, Init::kNormal});
  out.push_back({"qry.len.w", {d, 1}, Init::kNormal});
  out.push_back({"qry.len.b", {1}, Init::kZeros});
  out.push_back({"calib.alpha", {1, 1}, Init::kOnes});
  out.push_back({"calib.beta", {1, 1}, Init::kZeros});
  return out;
}

// Exact trainable scalar count of the model under `share`.
inline std::size_t count_params(EncoderConfig config, std::size_t vocab_size, bool share) {
  config.share_transformer = share;
  std::size_t total = 0;
  for (const auto& spec : parameter_layout(config, vocab_size)) total += nn::numel(spec.shape);
  return total;
}

// Scalars in one Transformer stack.
inline std::size_t transformer_param_count(const EncoderConfig& c) {
  std::vector<ParameterSpec> specs;
  detail::transformer_layout(specs, "", c);
  std::size_t total = 0;
  for (const auto& s : specs) total += nn::numel(s.shape);
  return total;
}

struct QueryEncoding {
  nn::Tensor embeddings;  // [B*K x d]
  nn::Tensor length;      // [B x 1], L_hat
};

class EncoderModel {
 public:
  static constexpr double kInitStddev = 0.02;

  EncoderModel(EncoderConfig config, GraphemeInventory inventory, std::uint64_t seed)
      : config_(std::move(config)), inventory_(std::move(inventory)), rng_(seed) {
    config_.validate();
    if (config_.languages.empty()) config_.languages = inventory_.languages();
    for (const auto& spec : parameter_layout(config_, inventory_.size())) {
      switch (spec.init) {
        case Init::kNormal: params_.add(spec.name, nn::truncated_normal(spec.shape, kInitStddev, rng_)); break;
        case Init::kZeros: params_.add(spec.name, nn::Tensor(spec.shape)); break;
        case Init::kOnes: params_.add(spec.name, nn::filled(spec.shape, 1.0f)); break;
      }
    }
    build_masks();
  }

  // Rebuilds a model around existing parameter values (checkpoint restore).
  EncoderModel(EncoderConfig config, GraphemeInventory inventory, nn::ParameterSet params, std::mt19937_64 rng)
      : config_(std::move(config)), inventory_(std::move(inventory)), params_(std::move(params)), rng_(rng) {
    config_.validate();
    const auto layout = parameter_layout(config_, inventory_.size());
    if (layout.size() != params_.size()) throw CheckpointError("parameter count does not match the configuration");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (params_.name(i) != layout[i].name || params_[i].shape() != layout[i].shape)
        throw CheckpointError("parameter '" + params_.name(i) + "' does not match the configuration layout");
    }
    build_masks();
  }

  const EncoderConfig& config() const { return config_; }
  const GraphemeInventory& inventory() const { return inventory_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  std::mt19937_64& rng() { return rng_; }
  const std::mt19937_64& rng() const { return rng_; }

  const nn::Tensor& alpha() const { return params_.at("calib.alpha"); }
  const nn::Tensor& beta() const { return params_.at("calib.beta"); }
  const nn::Tensor& hypothesis_mask() const { return hyp_mask_; }

  // R rows for a batch of windows: [B*N x d_model].
  nn::Tensor encode_hypothesis(const HypothesisInput& input, bool training) {
    const auto n = static_cast<std::size_t>(config_.N);
    if (input.length != n)
      throw DimensionError("encode_hypothesis: window length " + std::to_string(input.length) + " != N " +
                           std::to_string(n));
    const auto& p = params_;
    auto x = nn::add(nn::matmul(input.posteriors, p.at("hyp.embedding")), nn::matmul(input.durations, p.at("hyp.w_dur")));
    x = nn::gelu(nn::conv1d(x, p.at("hyp.conv.w"), p.at("hyp.conv.b"), stride(), padding(), n));
    x = nn::add_tiled(x, p.at("hyp.pos"));
    x = nn::dropout(x, config_.dropout, rng_, training);
    x = transformer(x, hyp_prefix(), hyp_mask_, training);
    return nn::conv1d_transposed(x, p.at("hyp.up.w"), p.at("hyp.up.b"), stride(), n);
  }

  // Convenience for a const model in eval mode (no dropout, no graph).
  nn::Tensor encode_hypothesis_eval(const HypothesisInput& input) const {
    nn::NoGradGuard guard;
    return const_cast<EncoderModel*>(this)->encode_hypothesis(input, false);
  }

  QueryEncoding encode_query(const std::vector<Query>& queries, bool training) {
    const auto m = static_cast<std::size_t>(config_.M), k = static_cast<std::size_t>(config_.query_embeddings());
    const std::size_t batch = queries.size();
    if (batch == 0) throw DimensionError("encode_query: empty batch");
    std::vector<std::size_t> ids;
    ids.reserve(batch * m);
    for (const auto& q : queries) {
      if (q.graphemes.size() > m)
        throw DimensionError("encode_query: query of " + std::to_string(q.graphemes.size()) +
                             " graphemes exceeds M=" + std::to_string(m));
      for (std::size_t j = 0; j < m; ++j) {
        const GraphemeId g = j < q.graphemes.size() ? q.graphemes[j] : GraphemeInventory::kPad;
        if (!inventory_.contains(g)) throw DataError("encode_query: unknown grapheme id " + std::to_string(g));
        ids.push_back(static_cast<std::size_t>(g));
      }
    }
    const auto& p = params_;
    auto x = nn::gather_rows(p.at("qry.embedding"), std::move(ids));
    x = nn::gelu(nn::conv1d(x, p.at("qry.conv.w"), p.at("qry.conv.b"), stride(), padding(), m));
    // CLS (row 0 of the concatenation) goes in front of every query's K rows.
    std::vector<std::size_t> order;
    order.reserve(batch * (k + 1));
    for (std::size_t b = 0; b < batch; ++b) {
      order.push_back(0);
      for (std::size_t j = 0; j < k; ++j) order.push_back(1 + b * k + j);
    }
    x = nn::gather_rows(nn::concat_rows(p.at("qry.cls"), x), std::move(order));
    x = nn::add_tiled(x, p.at("qry.pos"));
    x = nn::dropout(x, config_.dropout, rng_, training);
    x = transformer(x, qry_prefix(), config_.mask_query_padding ? query_padding_mask(queries) : query_mask_, training);

    std::vector<std::size_t> cls_rows, emb_rows;
    for (std::size_t b = 0; b < batch; ++b) {
      cls_rows.push_back(b * (k + 1));
      for (std::size_t j = 0; j < k; ++j) emb_rows.push_back(b * (k + 1) + 1 + j);
    }
    auto length = nn::add_bias(nn::matmul(nn::gather_rows(x, std::move(cls_rows)), p.at("qry.len.w")), p.at("qry.len.b"));
    return {nn::gather_rows(x, std::move(emb_rows)), std::move(length)};
  }

  QueryEncoding encode_query_eval(const std::vector<Query>& queries) const {
    nn::NoGradGuard guard;
    return const_cast<EncoderModel*>(this)->encode_query(queries, false);
  }

  // Calibrated logits alpha * max_k(R_i . Q_k) + beta for matched batches: [B*N x 1].
  nn::Tensor segment_logits(const nn::Tensor& r, const nn::Tensor& q) const {
    const auto n = static_cast<std::size_t>(config_.N), k = static_cast<std::size_t>(config_.query_embeddings());
    return nn::affine_scalar(nn::row_max(nn::seq_dot(r, q, n, k)), alpha(), beta());
  }

 private:
  std::size_t stride() const { return static_cast<std::size_t>(config_.conv_stride); }
  std::size_t padding() const { return static_cast<std::size_t>(config_.conv_padding()); }
  std::string hyp_prefix() const { return config_.share_transformer ? "" : "hyp."; }
  std::string qry_prefix() const { return config_.share_transformer ? "" : "qry."; }

  void build_masks() {
    const auto hn = static_cast<std::size_t>(config_.hypothesis_positions());
    const auto qn = static_cast<std::size_t>(config_.query_embeddings() + 1);
    const auto band = static_cast<std::size_t>(config_.mask_band);
    hyp_mask_ = config_.hypothesis_masking ? build_band_mask(hn, band) : full_mask(hn);
    query_mask_ = config_.query_masking ? build_band_mask(qn, band) : full_mask(qn);
  }

  // Per-query masks hiding conv positions that only saw PAD (each row keeps itself).
  nn::Tensor query_padding_mask(const std::vector<Query>& queries) const {
    const std::size_t n = query_mask_.rows();
    nn::Tensor mask({queries.size() * n, n});
    for (std::size_t b = 0; b < queries.size(); ++b) {
      const std::size_t len = queries[b].graphemes.size();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const bool pad_only = j > 0 && (j - 1) * stride() >= len + padding();
          mask.at(b * n + i, j) = (query_mask_.at(i, j) != 0.0f && (!pad_only || i == j)) ? 1.0f : 0.0f;
        }
    }
    return mask;
  }

  nn::Tensor transformer(nn::Tensor x, const std::string& prefix, const nn::Tensor& mask, bool training) {
    const auto& p = params_;
    const auto heads = static_cast<std::size_t>(config_.heads);
    for (int l = 0; l < config_.layers; ++l) {
      const std::string n = prefix + "transformer." + std::to_string(l) + ".";
      auto proj = [&](const nn::Tensor& in, const char* w, const char* b) {
        return nn::add_bias(nn::matmul(in, p.at(n + w)), p.at(n + b));
      };
      auto attn = nn::multi_head_attention(proj(x, "attn.wq", "attn.bq"), proj(x, "attn.wk", "attn.bk"),
                                           proj(x, "attn.wv", "attn.bv"), mask, heads);
      attn = nn::dropout(proj(attn, "attn.wo", "attn.bo"), config_.dropout, rng_, training);
      x = nn::layer_norm(nn::add(x, attn), p.at(n + "ln1.gain"), p.at(n + "ln1.bias"));
      auto ff = proj(nn::gelu(proj(x, "ff.w1", "ff.b1")), "ff.w2", "ff.b2");
      ff = nn::dropout(ff, config_.dropout, rng_, training);
      x = nn::layer_norm(nn::add(x, ff), p.at(n + "ln2.gain"), p.at(n + "ln2.bias"));
    }
    return x;
  }

  EncoderConfig config_;
  GraphemeInventory inventory_;
  nn::ParameterSet params_;
  std::mt19937_64 rng_;
  nn::Tensor hyp_mask_;
  nn::Tensor query_mask_;
};

}  // namespace encdot

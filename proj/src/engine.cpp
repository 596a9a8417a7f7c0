// SPDX-License-Identifier: Apache-2.0
#include "krul/engine.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace krul::engine {

int ModelConfig::ffn_hidden() const {
  return static_cast<int>(std::lround(ffn_mult * static_cast<float>(d_model)));
}

void ModelConfig::validate() const {
  if (n_layers < 2) throw ConfigError("n_layers must be >= 2");
  if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
  if (head_dim < 1) throw ConfigError("head_dim must be >= 1");
  if (d_model != n_heads * head_dim) {
    throw ConfigError("d_model must equal n_heads * head_dim");
  }
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (!(ffn_mult > 0.0f) || ffn_hidden() < 1) {
    throw ConfigError("ffn_mult must yield a positive hidden width");
  }
}

uint64_t ModelConfig::hash() const {
  uint64_t h = fnv1a64(&n_layers, sizeof(n_layers));
  h = fnv1a64(&n_heads, sizeof(n_heads), h);
  h = fnv1a64(&head_dim, sizeof(head_dim), h);
  h = fnv1a64(&d_model, sizeof(d_model), h);
  h = fnv1a64(&vocab_size, sizeof(vocab_size), h);
  h = fnv1a64(&ffn_mult, sizeof(ffn_mult), h);
  h = fnv1a64(&seed, sizeof(seed), h);
  return h;
}

int AttentionRecord::n_heads() const {
  if (layers.empty()) return 0;
  if (!layers[0].prefill.empty()) {
    return static_cast<int>(layers[0].prefill.size());
  }
  if (!layers[0].decode_steps.empty()) {
    return static_cast<int>(layers[0].decode_steps[0].rows());
  }
  return 0;
}

int64_t AttentionRecord::prefill_rows() const {
  if (layers.empty() || layers[0].prefill.empty()) return 0;
  return layers[0].prefill[0].rows();
}

int64_t AttentionRecord::prefill_width() const {
  if (layers.empty() || layers[0].prefill.empty()) return 0;
  return layers[0].prefill[0].cols();
}

void AttentionRecord::append_decode(
    const std::vector<Eigen::MatrixXf>& rows_per_layer) {
  if (rows_per_layer.size() != layers.size()) {
    throw StateCorruptionError("decode rows layer count mismatch");
  }
  for (size_t l = 0; l < layers.size(); ++l) {
    layers[l].decode_steps.push_back(rows_per_layer[l]);
  }
}

void AttentionRecord::validate(double tol) const {
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& la = layers[l];
    for (const auto& head : la.prefill) {
      for (Eigen::Index r = 0; r < head.rows(); ++r) {
        const double sum = head.row(r).cast<double>().sum();
        if (std::abs(sum - 1.0) > tol) {
          throw StateCorruptionError("prefill attention row does not sum to 1");
        }
        const int64_t width = first_query_pos + r + 1;
        for (Eigen::Index c = width; c < head.cols(); ++c) {
          if (head(r, c) != 0.0f) {
            throw StateCorruptionError("attention mass above causal diagonal");
          }
        }
      }
    }
    for (const auto& step : la.decode_steps) {
      for (Eigen::Index h = 0; h < step.rows(); ++h) {
        const double sum = step.row(h).cast<double>().sum();
        if (std::abs(sum - 1.0) > tol) {
          throw StateCorruptionError("decode attention row does not sum to 1");
        }
      }
    }
  }
}

namespace {

void fill_uniform(Eigen::MatrixXf& m, UniformStream& stream, float bound) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = stream.next(-bound, bound);
    }
  }
}

void fill_uniform(Eigen::RowVectorXf& v, UniformStream& stream, float bound) {
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    v(c) = stream.next(-bound, bound);
  }
}

uint64_t fold_bytes(uint64_t h, const Eigen::MatrixXf& m) {
  return fnv1a64(m.data(), sizeof(float) * static_cast<size_t>(m.size()), h);
}

Eigen::MatrixXf rmsnorm_rows(const Eigen::MatrixXf& x) {
  Eigen::MatrixXf out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float ms = x.row(r).squaredNorm() / static_cast<float>(x.cols());
    out.row(r) = x.row(r) / std::sqrt(ms + 1e-6f);
  }
  return out;
}

// Rotates even/odd feature pairs by pos-dependent angles; an odd trailing
// dimension passes through.
void apply_rotary(Eigen::MatrixXf& m, int64_t pos0, int head_dim) {
  const int pairs = head_dim / 2;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double pos = static_cast<double>(pos0 + r);
    for (int i = 0; i < pairs; ++i) {
      const double theta =
          pos * std::pow(10000.0, -2.0 * i / static_cast<double>(head_dim));
      const float c = static_cast<float>(std::cos(theta));
      const float s = static_cast<float>(std::sin(theta));
      const float x0 = m(r, 2 * i);
      const float x1 = m(r, 2 * i + 1);
      m(r, 2 * i) = x0 * c - x1 * s;
      m(r, 2 * i + 1) = x0 * s + x1 * c;
    }
  }
}

// One layer over a contiguous block of positions [pos0, pos0 + h_in.rows()).
// kv must cover exactly [0, pos0) on entry and is grown with the block's K/V.
// Attention and FFN outputs are produced for the leading out_rows rows only
// (the prefix the next layer needs); capture, when given, receives the
// per-head probability rows for those rows.
Eigen::MatrixXf layer_block_forward(const ModelConfig& cfg,
                                    const LayerWeights& lw,
                                    const Eigen::MatrixXf& h_in, int64_t pos0,
                                    KVCacheLayer& kv, int64_t out_rows,
                                    std::vector<Eigen::MatrixXf>* capture) {
  const int64_t rows = h_in.rows();
  const int hd = cfg.head_dim;
  const int64_t total = pos0 + rows;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  const Eigen::MatrixXf xn = rmsnorm_rows(h_in);

  for (int h = 0; h < cfg.n_heads; ++h) {
    Eigen::MatrixXf k = xn * lw.wk.middleCols(h * hd, hd);
    Eigen::MatrixXf v = xn * lw.wv.middleCols(h * hd, hd);
    apply_rotary(k, pos0, hd);
    kv.keys[h].conservativeResize(total, hd);
    kv.values[h].conservativeResize(total, hd);
    kv.keys[h].middleRows(pos0, rows) = k;
    kv.values[h].middleRows(pos0, rows) = v;
  }
  if (out_rows == 0) return Eigen::MatrixXf(0, cfg.d_model);

  Eigen::MatrixXf ctx(out_rows, cfg.d_model);
  for (int h = 0; h < cfg.n_heads; ++h) {
    Eigen::MatrixXf q = xn.topRows(out_rows) * lw.wq.middleCols(h * hd, hd);
    apply_rotary(q, pos0, hd);
    Eigen::MatrixXf scores = (q * kv.keys[h].transpose()) * scale;
    Eigen::MatrixXf probs = Eigen::MatrixXf::Zero(out_rows, total);
    for (Eigen::Index r = 0; r < out_rows; ++r) {
      const int64_t width = pos0 + r + 1;
      auto logits = scores.row(r).head(width);
      const float m = logits.maxCoeff();
      Eigen::RowVectorXf e = (logits.array() - m).exp();
      probs.row(r).head(width) = e / e.sum();
    }
    ctx.middleCols(h * hd, hd) = probs * kv.values[h];
    if (capture) (*capture)[static_cast<size_t>(h)] = std::move(probs);
  }

  const Eigen::MatrixXf h_mid = h_in.topRows(out_rows) + ctx * lw.wo;
  Eigen::MatrixXf act = ((h_mid * lw.w1).rowwise() + lw.b1).array().tanh();
  return h_mid + ((act * lw.w2).rowwise() + lw.b2);
}

Eigen::MatrixXf embed_rows(const Model& model, const TokenSeq& tokens,
                           int64_t begin, int64_t end) {
  const auto& cfg = model.config();
  Eigen::MatrixXf h(end - begin, cfg.d_model);
  for (int64_t i = begin; i < end; ++i) {
    const TokenId t = tokens[static_cast<size_t>(i)];
    if (t < 0 || t >= cfg.vocab_size) {
      throw ConfigError("token id out of vocabulary range");
    }
    h.row(i - begin) = model.embedding().row(t);
  }
  return h;
}

std::vector<KVCacheLayer> make_empty_kv(const ModelConfig& cfg) {
  std::vector<KVCacheLayer> kv(static_cast<size_t>(cfg.n_layers));
  for (auto& layer : kv) {
    layer.keys.assign(static_cast<size_t>(cfg.n_heads),
                      Eigen::MatrixXf(0, cfg.head_dim));
    layer.values.assign(static_cast<size_t>(cfg.n_heads),
                        Eigen::MatrixXf(0, cfg.head_dim));
    layer.span = {0, 0};
  }
  return kv;
}

// Computed-prefix lengths implied by the preloaded suffixes, plus the common
// history end L. Empty suffixes mean "recompute everything up to L".
struct PreloadLayout {
  std::vector<int64_t> prefix_len;
  int64_t history_end = 0;
};

PreloadLayout preload_layout(const ModelConfig& cfg,
                             const std::vector<KVCacheLayer>& preloaded,
                             int64_t n_tokens) {
  if (static_cast<int>(preloaded.size()) != cfg.n_layers) {
    throw RestorationGapError("preloaded KV must cover every layer");
  }
  PreloadLayout layout;
  int64_t end = -1;
  for (const auto& layer : preloaded) {
    if (layer.span.empty()) continue;
    if (end == -1) {
      end = layer.span.end;
    } else if (layer.span.end != end) {
      throw RestorationGapError("preloaded suffixes end at different positions");
    }
  }
  layout.history_end = end == -1 ? 0 : end;
  if (layout.history_end > n_tokens) {
    throw RestorationGapError("preloaded span extends past the token history");
  }

  layout.prefix_len.resize(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = preloaded[static_cast<size_t>(l)];
    const int64_t start =
        layer.span.empty() ? layout.history_end : layer.span.start;
    if (start < 0 || start > layout.history_end) {
      throw RestorationGapError("preloaded span start out of range");
    }
    if (!layer.span.empty()) {
      if (static_cast<int>(layer.keys.size()) != cfg.n_heads ||
          static_cast<int>(layer.values.size()) != cfg.n_heads) {
        throw StateCorruptionError("preloaded head count mismatch");
      }
      for (int h = 0; h < cfg.n_heads; ++h) {
        if (layer.keys[static_cast<size_t>(h)].rows() != layer.span.length() ||
            layer.values[static_cast<size_t>(h)].rows() !=
                layer.span.length() ||
            layer.keys[static_cast<size_t>(h)].cols() != cfg.head_dim) {
          throw StateCorruptionError("preloaded tensor shape mismatch");
        }
      }
    }
    layout.prefix_len[static_cast<size_t>(l)] = start;
    // The prefix [0, start) is recomputed from layer l-1's hidden states,
    // which only exist up to the shallower layer's prefix length.
    if (l > 0 && start > layout.prefix_len[static_cast<size_t>(l - 1)]) {
      throw RestorationGapError(
          "preloaded span not contiguous with the computable prefix");
    }
  }
  return layout;
}

PrefillResult prefill_impl(const Model& model, const TokenSeq& tokens,
                           const std::vector<KVCacheLayer>* preloaded) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw ConfigError("prefill requires a non-empty input");
  const int64_t n_tokens = static_cast<int64_t>(tokens.size());

  PreloadLayout layout;
  layout.prefix_len.assign(static_cast<size_t>(cfg.n_layers), 0);
  if (preloaded) {
    layout = preload_layout(cfg, *preloaded, n_tokens);
    if (layout.history_end == n_tokens && layout.history_end > 0) {
      throw RestorationGapError(
          "prefill over preloaded history requires new input tokens");
    }
  }
  const int64_t hist = layout.history_end;

  PrefillResult result;
  result.kv = make_empty_kv(cfg);
  result.attn.first_query_pos = hist;
  result.attn.layers.resize(static_cast<size_t>(cfg.n_layers));

  Eigen::MatrixXf h_pre =
      embed_rows(model, tokens, 0, layout.prefix_len[0]);
  Eigen::MatrixXf h_new = embed_rows(model, tokens, hist, n_tokens);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = model.layers()[static_cast<size_t>(l)];
    auto& kv = result.kv[static_cast<size_t>(l)];
    const int64_t prefix = layout.prefix_len[static_cast<size_t>(l)];
    const int64_t next_prefix =
        l + 1 < cfg.n_layers ? layout.prefix_len[static_cast<size_t>(l + 1)]
                             : 0;

    if (prefix > 0) {
      h_pre = layer_block_forward(cfg, lw, h_pre, 0, kv, next_prefix, nullptr);
    }
    if (preloaded && hist > prefix) {
      const auto& suffix = (*preloaded)[static_cast<size_t>(l)];
      for (int h = 0; h < cfg.n_heads; ++h) {
        kv.keys[static_cast<size_t>(h)].conservativeResize(hist, cfg.head_dim);
        kv.values[static_cast<size_t>(h)].conservativeResize(hist,
                                                             cfg.head_dim);
        kv.keys[static_cast<size_t>(h)].middleRows(prefix, hist - prefix) =
            suffix.keys[static_cast<size_t>(h)];
        kv.values[static_cast<size_t>(h)].middleRows(prefix, hist - prefix) =
            suffix.values[static_cast<size_t>(h)];
      }
    }
    std::vector<Eigen::MatrixXf> capture(static_cast<size_t>(cfg.n_heads));
    h_new = layer_block_forward(cfg, lw, h_new, hist, kv, n_tokens - hist,
                                &capture);
    result.attn.layers[static_cast<size_t>(l)].prefill = std::move(capture);
    kv.span = {0, n_tokens};
  }

  result.logits = h_new.row(h_new.rows() - 1) * model.unembedding();
  return result;
}

}  // namespace

uint64_t Model::weight_checksum() const {
  uint64_t h = fold_bytes(fnv1a64(nullptr, 0), embed_);
  for (const auto& lw : layers_) {
    h = fold_bytes(h, lw.wq);
    h = fold_bytes(h, lw.wk);
    h = fold_bytes(h, lw.wv);
    h = fold_bytes(h, lw.wo);
    h = fold_bytes(h, lw.w1);
    h = fnv1a64(lw.b1.data(), sizeof(float) * static_cast<size_t>(lw.b1.size()),
                h);
    h = fold_bytes(h, lw.w2);
    h = fnv1a64(lw.b2.data(), sizeof(float) * static_cast<size_t>(lw.b2.size()),
                h);
  }
  return fold_bytes(h, unembed_);
}

Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model model;
  model.cfg_ = cfg;
  UniformStream stream(cfg.seed);
  const float bound = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));

  model.embed_.resize(cfg.vocab_size, cfg.d_model);
  fill_uniform(model.embed_, stream, bound);

  model.layers_.resize(static_cast<size_t>(cfg.n_layers));
  const int ffn = cfg.ffn_hidden();
  for (auto& lw : model.layers_) {
    lw.wq.resize(cfg.d_model, cfg.d_model);
    lw.wk.resize(cfg.d_model, cfg.d_model);
    lw.wv.resize(cfg.d_model, cfg.d_model);
    lw.wo.resize(cfg.d_model, cfg.d_model);
    lw.w1.resize(cfg.d_model, ffn);
    lw.b1.resize(ffn);
    lw.w2.resize(ffn, cfg.d_model);
    lw.b2.resize(cfg.d_model);
    fill_uniform(lw.wq, stream, bound);
    fill_uniform(lw.wk, stream, bound);
    fill_uniform(lw.wv, stream, bound);
    fill_uniform(lw.wo, stream, bound);
    fill_uniform(lw.w1, stream, bound);
    fill_uniform(lw.b1, stream, bound);
    fill_uniform(lw.w2, stream, bound);
    fill_uniform(lw.b2, stream, bound);
  }

  model.unembed_.resize(cfg.d_model, cfg.vocab_size);
  fill_uniform(model.unembed_, stream, bound);
  return model;
}

PrefillResult prefill(const Model& model, const TokenSeq& tokens) {
  return prefill_impl(model, tokens, nullptr);
}

PrefillResult prefill(const Model& model, const TokenSeq& tokens,
                      const std::vector<KVCacheLayer>& preloaded) {
  return prefill_impl(model, tokens, &preloaded);
}

DecodeResult decode_step(const Model& model, std::vector<KVCacheLayer>& kv,
                         TokenId last_token) {
  const auto& cfg = model.config();
  if (static_cast<int>(kv.size()) != cfg.n_layers) {
    throw StateCorruptionError("cache layer count mismatch");
  }
  const TokenSpan span = kv[0].span;
  if (span.start != 0) {
    throw StateCorruptionError("decode requires caches anchored at position 0");
  }
  for (const auto& layer : kv) {
    if (layer.span != span) {
      throw StateCorruptionError("ragged kv spans across layers");
    }
    if (static_cast<int>(layer.keys.size()) != cfg.n_heads) {
      throw StateCorruptionError("cache head count mismatch");
    }
  }
  if (last_token < 0 || last_token >= cfg.vocab_size) {
    throw ConfigError("token id out of vocabulary range");
  }

  const int64_t pos = span.end;
  Eigen::MatrixXf h = model.embedding().row(last_token);

  DecodeResult result;
  result.attn_rows.resize(kv.size());
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::vector<Eigen::MatrixXf> capture(static_cast<size_t>(cfg.n_heads));
    h = layer_block_forward(cfg, model.layers()[static_cast<size_t>(l)], h,
                            pos, kv[static_cast<size_t>(l)], 1, &capture);
    Eigen::MatrixXf rows(cfg.n_heads, pos + 1);
    for (int head = 0; head < cfg.n_heads; ++head) {
      rows.row(head) = capture[static_cast<size_t>(head)].row(0);
    }
    result.attn_rows[static_cast<size_t>(l)] = std::move(rows);
    kv[static_cast<size_t>(l)].span = {0, pos + 1};
  }
  result.logits = h.row(0) * model.unembedding();
  return result;
}

PartialRecompute partial_prefix_recompute(const Model& model,
                                          const TokenSeq& tokens,
                                          const RestorationPlan& plan) {
  const auto& cfg = model.config();
  if (plan.n_layers() != cfg.n_layers) {
    throw PlanInvalidError("plan layer count mismatch");
  }
  const int64_t n_tokens = static_cast<int64_t>(tokens.size());
  for (int l = 0; l < plan.n_layers(); ++l) {
    const int64_t p = plan.recompute_len[static_cast<size_t>(l)];
    if (p < 0 || p > n_tokens) {
      throw PlanInvalidError("recompute prefix exceeds the token history");
    }
    if (l > 0 && p > plan.recompute_len[static_cast<size_t>(l - 1)]) {
      throw PlanInvalidError("recompute_len must be non-increasing with depth");
    }
  }

  PartialRecompute result;
  result.kv = make_empty_kv(cfg);
  Eigen::MatrixXf h = embed_rows(model, tokens, 0, plan.recompute_len[0]);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const int64_t prefix = plan.recompute_len[static_cast<size_t>(l)];
    const int64_t out_rows =
        l + 1 < cfg.n_layers ? plan.recompute_len[static_cast<size_t>(l + 1)]
                             : prefix;
    auto& kv = result.kv[static_cast<size_t>(l)];
    if (prefix > 0) {
      h = layer_block_forward(cfg, model.layers()[static_cast<size_t>(l)], h,
                              0, kv, out_rows, nullptr);
    }
    kv.span = {0, prefix};
  }

  const int64_t deepest = plan.recompute_len[static_cast<size_t>(
      cfg.n_layers - 1)];
  if (deepest > 0) {
    result.final_hidden =
        HiddenState{std::move(h), cfg.n_layers, TokenSpan{0, deepest}};
  }
  return result;
}

TokenId greedy_pick(const Eigen::RowVectorXf& logits) {
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<TokenId>(best);
}

}  // namespace krul::engine

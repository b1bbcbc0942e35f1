#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ragkit/tensor.hpp"

namespace ragkit {

struct TransformerConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_heads = 4;
  int ffn_dim = 256;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int rel_buckets = 32;
  int rel_max_distance = 128;
  double norm_eps = 1e-6;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model % n_heads != 0)
      throw std::invalid_argument("config: d_model must be divisible by n_heads");
    if (vocab_size <= 0) throw std::invalid_argument("config: vocab_size unset");
  }
};

// T5-style log-spaced relative position bucket. relative_position is
// key_pos - query_pos; causal attention sees only non-positive values.
inline int relative_position_bucket(int relative_position, bool bidirectional,
                                    int num_buckets, int max_distance) {
  int bucket = 0;
  int n;
  if (bidirectional) {
    num_buckets /= 2;
    if (relative_position > 0) bucket += num_buckets;
    n = std::abs(relative_position);
  } else {
    n = std::max(-relative_position, 0);
  }
  const int max_exact = num_buckets / 2;
  if (n < max_exact) return bucket + n;
  const double frac = std::log(static_cast<double>(n) / max_exact) /
                      std::log(static_cast<double>(max_distance) / max_exact);
  int large = max_exact + static_cast<int>(frac * (num_buckets - max_exact));
  large = std::min(large, num_buckets - 1);
  return bucket + large;
}

inline std::vector<int> bucket_matrix(int rows, int cols, bool bidirectional,
                                      int num_buckets, int max_distance) {
  std::vector<int> out(static_cast<size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<size_t>(i) * cols + j] =
          relative_position_bucket(j - i, bidirectional, num_buckets, max_distance);
  return out;
}

// Gathers one head's bias matrix from the (buckets, heads) table.
template <typename T>
Tensor<T> rel_bias_matrix(const Tensor<T>& table, const std::vector<int>& buckets,
                          int head, int rows, int cols) {
  const int H = table.shape[1];
  Tensor<T> out = Tensor<T>::zeros({rows, cols}, want_grad(table));
  for (size_t i = 0; i < buckets.size(); ++i)
    out.at(i) = table.at(static_cast<size_t>(buckets[i]) * H + head);
  if (out.requires_grad) {
    attach<T>(out, {table},
              [buckets, head, H](const Tensor<T>& o) {
                Tensor<T>& pt = o.node->parents[0];
                pt.ensure_grad();
                for (size_t i = 0; i < buckets.size(); ++i)
                  (*pt.grad)[static_cast<size_t>(buckets[i]) * H + head] += (*o.grad)[i];
              },
              "rel_bias");
  }
  return out;
}

template <typename T>
struct AttnWeights {
  Tensor<T> wq, wk, wv, wo;  // each d_model x d_model
};

template <typename T>
struct EncLayer {
  Tensor<T> norm1_g, norm2_g;
  AttnWeights<T> self;
  Tensor<T> ffn1, ffn2;  // d x ffn, ffn x d
};

template <typename T>
struct DecLayer {
  Tensor<T> norm1_g, norm2_g, norm3_g;
  AttnWeights<T> self, cross;
  Tensor<T> ffn1, ffn2;
};

template <typename T>
struct EncoderStack {
  Tensor<T> rel_bias;  // buckets x heads, bidirectional
  std::vector<EncLayer<T>> layers;
  Tensor<T> final_norm_g;
};

template <typename T>
struct DecoderStack {
  Tensor<T> rel_bias;  // buckets x heads, causal
  std::vector<DecLayer<T>> layers;
  Tensor<T> final_norm_g;
  Tensor<T> lm_head;  // vocab x d
};

namespace detail_tf {

template <typename T>
Tensor<T> weight(Rng& rng, int rows, int cols, double std) {
  return Tensor<T>::randn({rows, cols}, rng, std, true);
}

template <typename T>
Tensor<T> gain(int n) {
  auto g = Tensor<T>::zeros({n}, true);
  for (auto& v : *g.data) v = T(1);
  return g;
}

template <typename T>
AttnWeights<T> init_attn(Rng& rng, int d) {
  const double std = 1.0 / std::sqrt(static_cast<double>(d));
  return {weight<T>(rng, d, d, std), weight<T>(rng, d, d, std),
          weight<T>(rng, d, d, std), weight<T>(rng, d, d, std)};
}

}  // namespace detail_tf

template <typename T>
EncoderStack<T> init_encoder(const TransformerConfig& cfg, Rng& rng) {
  EncoderStack<T> s;
  s.rel_bias = Tensor<T>::zeros({cfg.rel_buckets, cfg.n_heads}, true);
  const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    EncLayer<T> l;
    l.norm1_g = detail_tf::gain<T>(cfg.d_model);
    l.norm2_g = detail_tf::gain<T>(cfg.d_model);
    l.self = detail_tf::init_attn<T>(rng, cfg.d_model);
    l.ffn1 = detail_tf::weight<T>(rng, cfg.d_model, cfg.ffn_dim, std);
    l.ffn2 = detail_tf::weight<T>(rng, cfg.ffn_dim, cfg.d_model, std);
    s.layers.push_back(std::move(l));
  }
  s.final_norm_g = detail_tf::gain<T>(cfg.d_model);
  return s;
}

template <typename T>
DecoderStack<T> init_decoder(const TransformerConfig& cfg, Rng& rng) {
  DecoderStack<T> s;
  s.rel_bias = Tensor<T>::zeros({cfg.rel_buckets, cfg.n_heads}, true);
  const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    DecLayer<T> l;
    l.norm1_g = detail_tf::gain<T>(cfg.d_model);
    l.norm2_g = detail_tf::gain<T>(cfg.d_model);
    l.norm3_g = detail_tf::gain<T>(cfg.d_model);
    l.self = detail_tf::init_attn<T>(rng, cfg.d_model);
    l.cross = detail_tf::init_attn<T>(rng, cfg.d_model);
    l.ffn1 = detail_tf::weight<T>(rng, cfg.d_model, cfg.ffn_dim, std);
    l.ffn2 = detail_tf::weight<T>(rng, cfg.ffn_dim, cfg.d_model, std);
    s.layers.push_back(std::move(l));
  }
  s.final_norm_g = detail_tf::gain<T>(cfg.d_model);
  s.lm_head = detail_tf::weight<T>(rng, cfg.vocab_size, cfg.d_model, std);
  return s;
}

// Multi-head attention over full sequences (autograd path). additive_mask and
// bias are optional; bias_buckets indexes the rel_bias table per (q, k) pair.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x_q, const Tensor<T>& x_kv,
                               const AttnWeights<T>& w, int n_heads,
                               const std::type_identity_t<Tensor<T>>* additive_mask,
                               const std::type_identity_t<Tensor<T>>* bias_table,
                               const std::vector<int>* bias_buckets) {
  const int d = x_q.shape[1];
  const int hd = d / n_heads;
  const int Lq = x_q.shape[0], Lk = x_kv.shape[0];
  auto Q = matmul(x_q, w.wq);
  auto K = matmul(x_kv, w.wk);
  auto V = matmul(x_kv, w.wv);
  const T scale_f = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  std::vector<Tensor<T>> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    auto qh = slice_cols(Q, h * hd, hd);
    auto kh = slice_cols(K, h * hd, hd);
    auto vh = slice_cols(V, h * hd, hd);
    auto scores = scale(matmul_nt(qh, kh), scale_f);
    if (bias_table)
      scores = add(scores, rel_bias_matrix(*bias_table, *bias_buckets, h, Lq, Lk));
    if (additive_mask) scores = add(scores, *additive_mask);
    auto probs = softmax(scores);
    heads.push_back(matmul(probs, vh));
  }
  return matmul(concat_cols(heads), w.wo);
}

template <typename T>
Tensor<T> ffn_block(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w2) {
  return matmul(relu(matmul(x, w1)), w2);
}

// Full encoder pass over one embedded sequence (L x d).
template <typename T>
Tensor<T> encoder_forward(const EncoderStack<T>& enc, const TransformerConfig& cfg,
                          const Tensor<T>& embedded) {
  const int L = embedded.shape[0];
  const auto buckets =
      bucket_matrix(L, L, true, cfg.rel_buckets, cfg.rel_max_distance);
  Tensor<T> x = embedded;
  const T eps = static_cast<T>(cfg.norm_eps);
  for (const auto& l : enc.layers) {
    auto normed = rms_norm(x, l.norm1_g, eps);
    auto a = multi_head_attention(normed, normed, l.self, cfg.n_heads, nullptr,
                                  &enc.rel_bias, &buckets);
    x = add(x, a);
    x = add(x, ffn_block(rms_norm(x, l.norm2_g, eps), l.ffn1, l.ffn2));
  }
  return rms_norm(x, enc.final_norm_g, eps);
}

// Teacher-forced decoder pass: embedded_input is the BOS-shifted target,
// memory the fused encoder rows. memory_mask adds -inf over invalid rows.
template <typename T>
Tensor<T> decoder_forward(const DecoderStack<T>& dec, const TransformerConfig& cfg,
                          const Tensor<T>& embedded_input, const Tensor<T>& memory,
                          const std::vector<uint8_t>* memory_valid) {
  const int Tlen = embedded_input.shape[0];
  const int M = memory.shape[0];
  const T eps = static_cast<T>(cfg.norm_eps);

  Tensor<T> causal = Tensor<T>::zeros({Tlen, Tlen});
  for (int i = 0; i < Tlen; ++i)
    for (int j = i + 1; j < Tlen; ++j)
      causal.at(static_cast<size_t>(i) * Tlen + j) = static_cast<T>(-1e30);

  Tensor<T>* mem_mask_ptr = nullptr;
  Tensor<T> mem_mask;
  if (memory_valid) {
    mem_mask = Tensor<T>::zeros({Tlen, M});
    for (int i = 0; i < Tlen; ++i)
      for (int j = 0; j < M; ++j)
        if (!(*memory_valid)[static_cast<size_t>(j)])
          mem_mask.at(static_cast<size_t>(i) * M + j) = static_cast<T>(-1e30);
    mem_mask_ptr = &mem_mask;
  }

  const auto buckets =
      bucket_matrix(Tlen, Tlen, false, cfg.rel_buckets, cfg.rel_max_distance);
  Tensor<T> x = embedded_input;
  for (const auto& l : dec.layers) {
    auto normed = rms_norm(x, l.norm1_g, eps);
    auto sa = multi_head_attention(normed, normed, l.self, cfg.n_heads, &causal,
                                   &dec.rel_bias, &buckets);
    x = add(x, sa);
    // Cross-attention over the fused memory carries no positional bias.
    auto ca = multi_head_attention(rms_norm(x, l.norm2_g, eps), memory, l.cross,
                                   cfg.n_heads, mem_mask_ptr, nullptr, nullptr);
    x = add(x, ca);
    x = add(x, ffn_block(rms_norm(x, l.norm3_g, eps), l.ffn1, l.ffn2));
  }
  x = rms_norm(x, dec.final_norm_g, eps);
  return matmul_nt(x, dec.lm_head);  // (T, vocab)
}

// ---------------------------------------------------------------------------
// Incremental decoding (inference only; raw buffers, no graph)
// ---------------------------------------------------------------------------

namespace raw {

// y(1 x n) = x(1 x k) @ W(k x n)
template <typename T>
void vec_mat(const T* x, const T* w, T* y, int k, int n) {
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> X(x, k);
  ECMap<T> W(w, k, n);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> Y(y, n);
  Y.noalias() = X * W;
}

// y(1 x m) = x(1 x k) @ W(m x k)^T
template <typename T>
void vec_mat_t(const T* x, const T* w, T* y, int k, int m) {
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> X(x, k);
  ECMap<T> W(w, m, k);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> Y(y, m);
  Y.noalias() = X * W.transpose();
}

template <typename T>
void rms_norm_vec(const T* x, const T* g, T* y, int d, double eps) {
  double ss = 0.0;
  for (int i = 0; i < d; ++i) ss += static_cast<double>(x[i]) * x[i];
  const T inv = static_cast<T>(1.0 / std::sqrt(ss / d + eps));
  for (int i = 0; i < d; ++i) y[i] = x[i] * g[i] * inv;
}

}  // namespace raw

// Cross-attention K/V projected once per query; shared by all beam
// hypotheses. Invalid memory rows are skipped during attention.
template <typename T>
struct CrossCache {
  int M = 0;
  std::vector<std::vector<T>> k, v;  // per layer, M x d
  std::vector<uint8_t> valid;
};

template <typename T>
CrossCache<T> build_cross_cache(const DecoderStack<T>& dec,
                                const TransformerConfig& cfg,
                                const std::vector<T>& memory_rows, int M,
                                const std::vector<uint8_t>& valid) {
  CrossCache<T> cache;
  cache.M = M;
  cache.valid = valid;
  const int d = cfg.d_model;
  for (const auto& l : dec.layers) {
    std::vector<T> k(static_cast<size_t>(M) * d), v(static_cast<size_t>(M) * d);
    mm_nn(memory_rows.data(), l.cross.wk.data->data(), k.data(), M, d, d, false);
    mm_nn(memory_rows.data(), l.cross.wv.data->data(), v.data(), M, d, d, false);
    cache.k.push_back(std::move(k));
    cache.v.push_back(std::move(v));
  }
  return cache;
}

// One autoregressive hypothesis: grows self-attention K/V caches a token at a
// time. Copyable; copies share the model and cross cache.
template <typename T>
struct DecodeSession {
  const DecoderStack<T>* dec = nullptr;
  TransformerConfig cfg_storage;
  const TransformerConfig* cfg = nullptr;
  const Tensor<T>* embed = nullptr;
  const CrossCache<T>* cross = nullptr;
  std::vector<std::vector<T>> self_k, self_v;  // per layer, pos x d
  int pos = 0;

  DecodeSession() = default;
  DecodeSession(const DecoderStack<T>& d, const TransformerConfig& c,
                const Tensor<T>& emb, const CrossCache<T>& cc)
      : dec(&d), cfg_storage(c), cfg(&cfg_storage), embed(&emb), cross(&cc) {
    self_k.resize(d.layers.size());
    self_v.resize(d.layers.size());
  }
  DecodeSession(const DecodeSession& o)
      : dec(o.dec), cfg_storage(o.cfg_storage), cfg(&cfg_storage), embed(o.embed),
        cross(o.cross), self_k(o.self_k), self_v(o.self_v), pos(o.pos) {}
  DecodeSession& operator=(const DecodeSession& o) {
    dec = o.dec;
    cfg_storage = o.cfg_storage;
    cfg = &cfg_storage;
    embed = o.embed;
    cross = o.cross;
    self_k = o.self_k;
    self_v = o.self_v;
    pos = o.pos;
    return *this;
  }

  // Feeds one input token, returns logits over the vocabulary.
  std::vector<T> step(int token) {
    const int d = cfg->d_model;
    const int H = cfg->n_heads;
    const int hd = d / H;
    const double scale_f = 1.0 / std::sqrt(static_cast<double>(hd));
    const double eps = cfg->norm_eps;

    std::vector<T> x(embed->data->data() + static_cast<size_t>(token) * d,
                     embed->data->data() + static_cast<size_t>(token + 1) * d);
    std::vector<T> h(static_cast<size_t>(d)), q(static_cast<size_t>(d)),
        kv(static_cast<size_t>(d)), att(static_cast<size_t>(d)),
        proj(static_cast<size_t>(d));

    for (size_t li = 0; li < dec->layers.size(); ++li) {
      const auto& l = dec->layers[li];
      // Self-attention with causal relative-position bias.
      raw::rms_norm_vec(x.data(), l.norm1_g.data->data(), h.data(), d, eps);
      raw::vec_mat(h.data(), l.self.wq.data->data(), q.data(), d, d);
      auto& sk = self_k[li];
      auto& sv = self_v[li];
      sk.resize(static_cast<size_t>(pos + 1) * d);
      sv.resize(static_cast<size_t>(pos + 1) * d);
      raw::vec_mat(h.data(), l.self.wk.data->data(),
                   sk.data() + static_cast<size_t>(pos) * d, d, d);
      raw::vec_mat(h.data(), l.self.wv.data->data(),
                   sv.data() + static_cast<size_t>(pos) * d, d, d);
      std::fill(att.begin(), att.end(), T(0));
      std::vector<double> scores(static_cast<size_t>(pos + 1));
      for (int head = 0; head < H; ++head) {
        const int off = head * hd;
        double mx = -1e300;
        for (int j = 0; j <= pos; ++j) {
          const T* kj = sk.data() + static_cast<size_t>(j) * d + off;
          double s = 0.0;
          for (int t = 0; t < hd; ++t)
            s += static_cast<double>(q[static_cast<size_t>(off + t)]) * kj[t];
          s *= scale_f;
          s += static_cast<double>(
              dec->rel_bias.at(static_cast<size_t>(relative_position_bucket(
                                   j - pos, false, cfg->rel_buckets,
                                   cfg->rel_max_distance)) *
                                   H +
                               head));
          scores[static_cast<size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int j = 0; j <= pos; ++j) {
          scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
          denom += scores[static_cast<size_t>(j)];
        }
        for (int j = 0; j <= pos; ++j) {
          const double w = scores[static_cast<size_t>(j)] / denom;
          const T* vj = sv.data() + static_cast<size_t>(j) * d + off;
          for (int t = 0; t < hd; ++t)
            att[static_cast<size_t>(off + t)] += static_cast<T>(w * vj[t]);
        }
      }
      raw::vec_mat(att.data(), l.self.wo.data->data(), proj.data(), d, d);
      for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];

      // Cross-attention over fused memory (no positional bias).
      raw::rms_norm_vec(x.data(), l.norm2_g.data->data(), h.data(), d, eps);
      raw::vec_mat(h.data(), l.cross.wq.data->data(), q.data(), d, d);
      const auto& ck = cross->k[li];
      const auto& cv = cross->v[li];
      const int M = cross->M;
      std::fill(att.begin(), att.end(), T(0));
      std::vector<double> mscores(static_cast<size_t>(M));
      for (int head = 0; head < H; ++head) {
        const int off = head * hd;
        double mx = -1e300;
        for (int j = 0; j < M; ++j) {
          if (!cross->valid[static_cast<size_t>(j)]) {
            mscores[static_cast<size_t>(j)] = -1e300;
            continue;
          }
          const T* kj = ck.data() + static_cast<size_t>(j) * d + off;
          double s = 0.0;
          for (int t = 0; t < hd; ++t)
            s += static_cast<double>(q[static_cast<size_t>(off + t)]) * kj[t];
          s *= scale_f;
          mscores[static_cast<size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int j = 0; j < M; ++j) {
          if (mscores[static_cast<size_t>(j)] <= -1e299) {
            mscores[static_cast<size_t>(j)] = 0.0;
            continue;
          }
          mscores[static_cast<size_t>(j)] =
              std::exp(mscores[static_cast<size_t>(j)] - mx);
          denom += mscores[static_cast<size_t>(j)];
        }
        for (int j = 0; j < M; ++j) {
          const double w = mscores[static_cast<size_t>(j)] / denom;
          if (w == 0.0) continue;
          const T* vj = cv.data() + static_cast<size_t>(j) * d + off;
          for (int t = 0; t < hd; ++t)
            att[static_cast<size_t>(off + t)] += static_cast<T>(w * vj[t]);
        }
      }
      raw::vec_mat(att.data(), l.cross.wo.data->data(), proj.data(), d, d);
      for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];

      // FFN.
      raw::rms_norm_vec(x.data(), l.norm3_g.data->data(), h.data(), d, eps);
      std::vector<T> mid(static_cast<size_t>(cfg->ffn_dim));
      raw::vec_mat(h.data(), l.ffn1.data->data(), mid.data(), d, cfg->ffn_dim);
      for (auto& m : mid) m = m > T(0) ? m : T(0);
      raw::vec_mat(mid.data(), l.ffn2.data->data(), proj.data(), cfg->ffn_dim, d);
      for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
    }

    raw::rms_norm_vec(x.data(), dec->final_norm_g.data->data(), h.data(), d, eps);
    std::vector<T> logits(static_cast<size_t>(cfg->vocab_size));
    raw::vec_mat_t(h.data(), dec->lm_head.data->data(), logits.data(), d,
                   cfg->vocab_size);
    ++pos;
    return logits;
  }
};

}  // namespace ragkit

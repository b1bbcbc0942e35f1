#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ragkit/data.hpp"
#include "ragkit/data_types.hpp"
#include "ragkit/optim.hpp"
#include "ragkit/tokenizer.hpp"
#include "ragkit/transformer.hpp"

namespace ragkit {

struct TowerConfig {
  int d_model = 64;  // also the embedding width
  int n_heads = 4;
  int n_layers = 1;
  int ffn_dim = 128;
  int vocab_size = ByteVocab::size();
  int max_len = 64;
  int rel_buckets = 32;
  int rel_max_distance = 128;

  TransformerConfig transformer() const {
    TransformerConfig t;
    t.vocab_size = vocab_size;
    t.d_model = d_model;
    t.n_heads = n_heads;
    t.ffn_dim = ffn_dim;
    t.n_enc_layers = n_layers;
    t.n_dec_layers = 0;
    t.rel_buckets = rel_buckets;
    t.rel_max_distance = rel_max_distance;
    return t;
  }
};

// Dual-encoder tower: one small transformer encoder, mean-pooled final
// states. Query and passage sides share weights; the generator does not.
template <typename T>
struct Tower {
  TowerConfig cfg;
  Tensor<T> embed;
  EncoderStack<T> enc;
  uint64_t seed = 0;

  static Tower init(const TowerConfig& cfg, uint64_t seed) {
    Tower t;
    t.cfg = cfg;
    t.seed = seed;
    Rng rng(seed);
    const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    t.embed = Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, std, true);
    t.enc = init_encoder<T>(cfg.transformer(), rng);
    return t;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("embed", &embed);
    out.emplace_back("enc.rel_bias", &enc.rel_bias);
    for (size_t i = 0; i < enc.layers.size(); ++i) {
      auto& l = enc.layers[i];
      const std::string p = "enc.l" + std::to_string(i) + ".";
      out.emplace_back(p + "norm1", &l.norm1_g);
      out.emplace_back(p + "self.wq", &l.self.wq);
      out.emplace_back(p + "self.wk", &l.self.wk);
      out.emplace_back(p + "self.wv", &l.self.wv);
      out.emplace_back(p + "self.wo", &l.self.wo);
      out.emplace_back(p + "norm2", &l.norm2_g);
      out.emplace_back(p + "ffn1", &l.ffn1);
      out.emplace_back(p + "ffn2", &l.ffn2);
    }
    out.emplace_back("enc.final_norm", &enc.final_norm_g);
    return out;
  }

  std::vector<Tensor<T>*> params() {
    std::vector<Tensor<T>*> out;
    for (auto& [name, p] : named_params()) out.push_back(p);
    return out;
  }
};

// Mean-pooled dense embedding, (1 x d_emb). Autograd-capable; wrap calls in
// NoGradGuard for inference.
template <typename T>
Tensor<T> embed_text(Tower<T>& tower, const std::string& text) {
  if (text.empty()) throw std::invalid_argument("embed_text: empty text");
  const auto ids = ByteVocab::encode(text, static_cast<size_t>(tower.cfg.max_len));
  auto states =
      encoder_forward(tower.enc, tower.cfg.transformer(), embedding(tower.embed, ids));
  return mean_rows(states);
}

struct EmbeddingIndex {
  int d_emb = 0;
  std::vector<float> matrix;  // P x d_emb, row i belongs to ids[i]
  std::vector<std::string> ids;

  size_t size() const { return ids.size(); }
};

template <typename T>
EmbeddingIndex build_index(Tower<T>& tower, const Corpus& corpus) {
  if (corpus.size() == 0) throw data_error("build_index: empty corpus");
  NoGradGuard ng;
  EmbeddingIndex index;
  index.d_emb = tower.cfg.d_model;
  index.matrix.reserve(corpus.size() * static_cast<size_t>(index.d_emb));
  for (const auto& p : corpus.passages) {
    auto v = embed_text(tower, p.title + " " + p.text);
    for (size_t i = 0; i < v.numel(); ++i)
      index.matrix.push_back(static_cast<float>(v.at(i)));
    index.ids.push_back(p.id);
  }
  return index;
}

// Exhaustive top-n dot-product scan. Ties break by ascending passage id;
// embeddings are unnormalized by design.
inline CandidateList retrieve(const EmbeddingIndex& index,
                              const std::vector<float>& query_vec, int n,
                              const std::string& query_id = "") {
  if (n < 1) throw std::invalid_argument("retrieve: n must be >= 1");
  if (static_cast<size_t>(n) > index.size())
    throw data_error("retrieve: n exceeds corpus size");
  if (query_vec.size() != static_cast<size_t>(index.d_emb))
    throw std::invalid_argument("retrieve: query width mismatch");
  std::vector<std::pair<float, size_t>> scored(index.size());
  for (size_t i = 0; i < index.size(); ++i) {
    const float* row = index.matrix.data() + i * static_cast<size_t>(index.d_emb);
    double s = 0.0;
    for (int j = 0; j < index.d_emb; ++j)
      s += static_cast<double>(row[j]) * query_vec[static_cast<size_t>(j)];
    scored[i] = {static_cast<float>(s), i};
  }
  auto cmp = [&](const std::pair<float, size_t>& a, const std::pair<float, size_t>& b) {
    if (a.first != b.first) return a.first > b.first;
    return index.ids[a.second] < index.ids[b.second];
  };
  std::partial_sort(scored.begin(), scored.begin() + n, scored.end(), cmp);
  CandidateList out;
  out.query_id = query_id;
  for (int i = 0; i < n; ++i)
    out.entries.push_back({index.ids[scored[static_cast<size_t>(i)].second],
                           scored[static_cast<size_t>(i)].first});
  return out;
}

template <typename T>
std::vector<float> query_vector(Tower<T>& tower, const std::string& query) {
  NoGradGuard ng;
  auto v = embed_text(tower, query);
  std::vector<float> out(v.numel());
  for (size_t i = 0; i < v.numel(); ++i) out[i] = static_cast<float>(v.at(i));
  return out;
}

template <typename T>
CandidateList retrieve_text(Tower<T>& tower, const EmbeddingIndex& index,
                            const std::string& query, int n,
                            const std::string& query_id = "") {
  return retrieve(index, query_vector(tower, query), n, query_id);
}

// Uniform draw from the top-pool_depth retrieved passages excluding R+.
template <typename T>
std::string mine_negatives(Tower<T>& tower, const EmbeddingIndex& index,
                           const std::string& query,
                           const std::set<std::string>& relevant, int pool_depth,
                           Rng& rng) {
  const int depth = std::min<int>(pool_depth, static_cast<int>(index.size()));
  auto pool = retrieve_text(tower, index, query, depth);
  std::vector<std::string> negatives;
  for (const auto& e : pool.entries)
    if (!relevant.count(e.passage_id)) negatives.push_back(e.passage_id);
  if (negatives.empty())
    throw data_error("mine_negatives: candidate pool is entirely relevant");
  return negatives[rng.uniform_int(negatives.size())];
}

enum class OracleMode { kNone, kInfuse, kOnly };

// Oracle evaluation modes: "infuse" appends missing relevants at the tail
// (sentinel score -inf) and re-truncates to the original length, evicting
// from the end; "only" replaces the list with R+ in qrels order.
inline CandidateList oracle_candidates(const CandidateList& candidates,
                                       const std::vector<std::string>& relevant,
                                       OracleMode mode) {
  if (mode == OracleMode::kNone) return candidates;
  const float sentinel = -std::numeric_limits<float>::infinity();
  CandidateList out;
  out.query_id = candidates.query_id;
  if (mode == OracleMode::kOnly) {
    if (relevant.empty())
      throw data_error("oracle_candidates: empty R+ in mode only");
    for (const auto& r : relevant) out.entries.push_back({r, sentinel});
    return out;
  }
  const std::set<std::string> relset(relevant.begin(), relevant.end());
  std::set<std::string> present;
  for (const auto& e : candidates.entries) present.insert(e.passage_id);
  std::vector<std::string> missing;
  for (const auto& r : relevant)
    if (!present.count(r)) missing.push_back(r);
  const size_t n = candidates.entries.size();

  // Evict from the tail to make room, skipping relevant entries so recall@n
  // stays 1 whenever |R+| <= n.
  std::vector<ScoredPassage> kept = candidates.entries;
  size_t room = std::min(missing.size(), n);
  for (auto it = kept.rbegin(); room > 0 && it != kept.rend();) {
    if (!relset.count(it->passage_id)) {
      it = decltype(it)(kept.erase(std::next(it).base()));
      --room;
    } else {
      ++it;
    }
  }
  while (room > 0 && !kept.empty()) {  // |R+| > n: nothing evictable remains
    kept.pop_back();
    --room;
  }
  out.entries = std::move(kept);
  for (const auto& r : missing) {
    if (out.entries.size() >= n) break;
    out.entries.push_back({r, sentinel});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Triple training
// ---------------------------------------------------------------------------

struct RetrieverEpochReport {
  int epoch = 0;
  double loss = 0.0;
  double train_recall = 0.0;
  double dev_recall = 0.0;
  double delta_t = 0.0;  // (train - dev) / max(train, eps)
};

struct RetrieverTrainOpts {
  int epochs = 4;
  double lr = 1e-3;
  int batch = 8;
  int recall_n = 10;        // cutoff for the per-epoch recall report
  int recall_sample = 200;  // max train queries scored per epoch
  bool in_batch_negatives = false;
  uint64_t seed = 0;
};

namespace detail_ret {

template <typename T>
double recall_over(Tower<T>& tower, const EmbeddingIndex& index,
                   const std::vector<TaskExample>& examples, int n, size_t cap) {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  size_t count = std::min(cap, examples.size());
  for (size_t i = 0; i < count; ++i) {
    const auto& ex = examples[i];
    auto c = retrieve_text(tower, index, ex.query,
                           std::min<int>(n, static_cast<int>(index.size())));
    const std::set<std::string> rel(ex.relevant.begin(), ex.relevant.end());
    size_t hits = 0;
    for (const auto& e : c.entries)
      if (rel.count(e.passage_id)) ++hits;
    total += static_cast<double>(hits) / static_cast<double>(rel.size());
  }
  return total / static_cast<double>(count);
}

}  // namespace detail_ret

// Softmax cross-entropy over (positive, negative) dot-product logits, with
// optional in-batch negatives (off by default). Reports train and held-out
// Recall@n each epoch so the train/dev gap stays observable.
template <typename T>
std::vector<RetrieverEpochReport> train_retriever(
    Tower<T>& tower, const Corpus& corpus, const std::vector<Triple>& triples,
    const std::vector<TaskExample>& train_examples,
    const std::vector<TaskExample>& dev_examples, const RetrieverTrainOpts& opts) {
  if (triples.empty()) throw data_error("train_retriever: no triples");
  Adam<T> opt(opts.lr);
  auto params = tower.params();
  Rng rng(opts.seed);
  std::vector<RetrieverEpochReport> reports;

  std::vector<size_t> order(triples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + rng.uniform_int(order.size() - i)]);
    double epoch_loss = 0.0;
    size_t steps = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(opts.batch)) {
      const size_t end =
          std::min(order.size(), start + static_cast<size_t>(opts.batch));
      zero_grads(params);
      const T inv_b = static_cast<T>(1.0 / static_cast<double>(end - start));
      double batch_loss = 0.0;
      for (size_t bi = start; bi < end; ++bi) {
        const Triple& t = triples[order[bi]];
        auto q = embed_text(tower, t.query);
        const Passage& pp = corpus.by_id(t.pos);
        const Passage& np = corpus.by_id(t.neg);
        std::vector<Tensor<T>> docs;
        docs.push_back(embed_text(tower, pp.title + " " + pp.text));
        docs.push_back(embed_text(tower, np.title + " " + np.text));
        if (opts.in_batch_negatives) {
          for (size_t oi = start; oi < end; ++oi) {
            if (oi == bi) continue;
            const Passage& other = corpus.by_id(triples[order[oi]].pos);
            if (other.id == pp.id) continue;
            docs.push_back(embed_text(tower, other.title + " " + other.text));
          }
        }
        auto logits = matmul_nt(q, concat_rows(docs));
        auto loss = cross_entropy(logits, {0});
        const double v = static_cast<double>(loss.item());
        if (!std::isfinite(v))
          throw numeric_error("train_retriever: non-finite loss (epoch " +
                              std::to_string(epoch) + ")");
        batch_loss += v;
        backward(scale(loss, inv_b));
      }
      opt.step(params);
      epoch_loss += batch_loss / static_cast<double>(end - start);
      ++steps;
    }

    RetrieverEpochReport rep;
    rep.epoch = epoch;
    rep.loss = steps ? epoch_loss / static_cast<double>(steps) : 0.0;
    auto index = build_index(tower, corpus);
    rep.train_recall = detail_ret::recall_over(
        tower, index, train_examples, opts.recall_n,
        static_cast<size_t>(opts.recall_sample));
    rep.dev_recall = detail_ret::recall_over(tower, index, dev_examples,
                                             opts.recall_n,
                                             static_cast<size_t>(opts.recall_sample));
    rep.delta_t = (rep.train_recall - rep.dev_recall) / std::max(rep.train_recall, 1e-9);
    reports.push_back(rep);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void save_index(const EmbeddingIndex& index, const std::string& path) {
  json header = {{"format", "ragkit-index-v1"},
                 {"kind", "index"},
                 {"d_emb", index.d_emb},
                 {"count", index.ids.size()},
                 {"ids", index.ids}};
  write_blob_file(path, header, index.matrix);
}

inline EmbeddingIndex load_index(const std::string& path) {
  EmbeddingIndex index;
  const json header = read_blob_file(path, index.matrix);
  if (header.value("kind", "") != "index")
    throw data_error(path + ": not an index file");
  index.d_emb = header.at("d_emb").get<int>();
  index.ids = header.at("ids").get<std::vector<std::string>>();
  if (index.matrix.size() != index.ids.size() * static_cast<size_t>(index.d_emb))
    throw data_error(path + ": blob size mismatch");
  return index;
}

inline json tower_config_json(const TowerConfig& c) {
  return {{"d_model", c.d_model},     {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},   {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
          {"rel_buckets", c.rel_buckets}, {"rel_max_distance", c.rel_max_distance}};
}

inline TowerConfig tower_config_from_json(const json& j) {
  TowerConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.rel_buckets = j.at("rel_buckets").get<int>();
  c.rel_max_distance = j.at("rel_max_distance").get<int>();
  return c;
}

inline void save_tower(Tower<float>& tower, const std::string& path) {
  json params = json::array();
  std::vector<float> blob;
  for (auto& [name, p] : tower.named_params()) {
    params.push_back({{"name", name}, {"shape", p->shape}});
    blob.insert(blob.end(), p->data->begin(), p->data->end());
  }
  json header = {{"format", "ragkit-ckpt-v1"},
                 {"kind", "retriever"},
                 {"config", tower_config_json(tower.cfg)},
                 {"vocab", ByteVocab::control_tokens()},
                 {"seed", tower.seed},
                 {"params", params}};
  write_blob_file(path, header, blob);
}

inline Tower<float> load_tower(const std::string& path) {
  std::vector<float> blob;
  const json header = read_blob_file(path, blob);
  if (header.value("kind", "") != "retriever")
    throw data_error(path + ": not a retriever checkpoint");
  auto tower =
      Tower<float>::init(tower_config_from_json(header.at("config")),
                         header.value("seed", 0ull));
  size_t off = 0;
  auto named = tower.named_params();
  const auto& params = header.at("params");
  if (params.size() != named.size()) throw data_error(path + ": parameter mismatch");
  for (size_t i = 0; i < named.size(); ++i) {
    auto& [name, p] = named[i];
    if (params[i].at("name").get<std::string>() != name)
      throw data_error(path + ": parameter order mismatch at " + name);
    if (params[i].at("shape").get<std::vector<int>>() != p->shape)
      throw data_error(path + ": config mismatch for " + name);
    if (off + p->numel() > blob.size()) throw data_error(path + ": truncated blob");
    std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(off), p->numel(),
                p->data->begin());
    off += p->numel();
  }
  if (off != blob.size()) throw data_error(path + ": blob size mismatch");
  return tower;
}

}  // namespace ragkit

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ragkit/data.hpp"
#include "ragkit/data_types.hpp"
#include "ragkit/optim.hpp"
#include "ragkit/pointer.hpp"
#include "ragkit/tokenizer.hpp"
#include "ragkit/transformer.hpp"

namespace ragkit {

struct GeneratorConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int ffn_dim = 256;
  int vocab_size = ByteVocab::size();
  int max_input_tokens = 384;
  int max_output_tokens = 64;
  int n_passages = 10;
  int rel_buckets = 32;
  int rel_max_distance = 128;

  TransformerConfig transformer() const {
    TransformerConfig t;
    t.vocab_size = vocab_size;
    t.d_model = d_model;
    t.n_heads = n_heads;
    t.ffn_dim = ffn_dim;
    t.n_enc_layers = n_enc_layers;
    t.n_dec_layers = n_dec_layers;
    t.rel_buckets = rel_buckets;
    t.rel_max_distance = rel_max_distance;
    return t;
  }

  void validate() const {
    transformer().validate();
    if (n_passages < 1)
      throw std::invalid_argument("config: n_passages must be >= 1");
  }
};

// First-k compression: the per-passage vector budget fed to the decoder.
struct CompressionConfig {
  int k = 8;

  CompressionConfig() = default;
  explicit CompressionConfig(int k_) : k(k_) {
    if (k < 1) throw std::invalid_argument("compression: k must be >= 1");
  }
};

template <typename T>
struct EncodedPassage {
  Tensor<T> vectors;  // L x d_model
  int source_index = 0;  // 1-based rank in the candidate list
  std::vector<uint8_t> valid;
};

template <typename T>
struct FusedMemory {
  Tensor<T> rows;  // sum(L_i) x d_model
  std::vector<int> labels;  // per-row source passage index
  std::vector<uint8_t> valid;
};

struct GenTimings {
  double decode_ms = 0.0;
  int steps = 0;
};

struct GenerationOutput {
  std::vector<int> token_ids;  // without EOS
  std::string text;
  double score = 0.0;  // length-normalized sum log-prob
  GenTimings timings;
};

template <typename T>
struct GeneratorModel {
  GeneratorConfig cfg;
  Tensor<T> embed;  // shared input embedding, vocab x d
  EncoderStack<T> enc;
  DecoderStack<T> dec;
  uint64_t seed = 0;
  int64_t step_count = 0;

  static GeneratorModel init(const GeneratorConfig& cfg, uint64_t seed) {
    cfg.validate();
    GeneratorModel m;
    m.cfg = cfg;
    m.seed = seed;
    Rng rng(seed);
    const auto tf = cfg.transformer();
    const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    m.embed = Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, std, true);
    m.enc = init_encoder<T>(tf, rng);
    m.dec = init_decoder<T>(tf, rng);
    return m;
  }

  // Declared parameter order; checkpoints serialize exactly this sequence.
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
    out.emplace_back("dec.rel_bias", &dec.rel_bias);
    for (size_t i = 0; i < dec.layers.size(); ++i) {
      auto& l = dec.layers[i];
      const std::string p = "dec.l" + std::to_string(i) + ".";
      out.emplace_back(p + "norm1", &l.norm1_g);
      out.emplace_back(p + "self.wq", &l.self.wq);
      out.emplace_back(p + "self.wk", &l.self.wk);
      out.emplace_back(p + "self.wv", &l.self.wv);
      out.emplace_back(p + "self.wo", &l.self.wo);
      out.emplace_back(p + "norm2", &l.norm2_g);
      out.emplace_back(p + "cross.wq", &l.cross.wq);
      out.emplace_back(p + "cross.wk", &l.cross.wk);
      out.emplace_back(p + "cross.wv", &l.cross.wv);
      out.emplace_back(p + "cross.wo", &l.cross.wo);
      out.emplace_back(p + "norm3", &l.norm3_g);
      out.emplace_back(p + "ffn1", &l.ffn1);
      out.emplace_back(p + "ffn2", &l.ffn2);
    }
    out.emplace_back("dec.final_norm", &dec.final_norm_g);
    out.emplace_back("dec.lm_head", &dec.lm_head);
    return out;
  }

  std::vector<Tensor<T>*> params() {
    std::vector<Tensor<T>*> out;
    for (auto& [name, p] : named_params()) out.push_back(p);
    return out;
  }
};

// Encodes the templated query-passage pair through the encoder stack. The
// query arrives with its task marker already prefixed.
template <typename T>
EncodedPassage<T> encode_passage(GeneratorModel<T>& model, const std::string& query,
                                 const Passage& passage, int index) {
  if (query.empty()) throw std::invalid_argument("encode_passage: empty query");
  if (index < 1 || index > model.cfg.n_passages)
    throw std::invalid_argument("encode_passage: index out of range");
  const std::string tmpl = format_input("", query, index, passage);
  const auto ids =
      ByteVocab::encode(tmpl, static_cast<size_t>(model.cfg.max_input_tokens));
  EncodedPassage<T> out;
  out.source_index = index;
  auto embedded = embedding(model.embed, ids);
  out.vectors = encoder_forward(model.enc, model.cfg.transformer(), embedded);
  out.valid.assign(ids.size(), 1);
  return out;
}

// Keeps the first min(k, L) vectors; the source index is preserved.
template <typename T>
EncodedPassage<T> compress(const EncodedPassage<T>& e, const CompressionConfig& c) {
  const int L = e.vectors.shape[0];
  const int keep = std::min(c.k, L);
  if (keep == L) return e;
  EncodedPassage<T> out;
  out.source_index = e.source_index;
  out.vectors = slice_rows(e.vectors, 0, keep);
  out.valid.assign(e.valid.begin(), e.valid.begin() + keep);
  return out;
}

// Concatenates encoded passages in candidate order. Rows of passage i precede
// rows of passage i+1; labels carry the 1-based source index per row.
template <typename T>
FusedMemory<T> fuse(const std::vector<EncodedPassage<T>>& encoded) {
  if (encoded.empty()) throw std::invalid_argument("fuse: empty passage list");
  FusedMemory<T> mem;
  std::vector<Tensor<T>> parts;
  for (const auto& e : encoded) {
    parts.push_back(e.vectors);
    for (int r = 0; r < e.vectors.shape[0]; ++r) {
      mem.labels.push_back(e.source_index);
      mem.valid.push_back(e.valid[static_cast<size_t>(r)]);
    }
  }
  mem.rows = concat_rows(parts);
  return mem;
}

namespace detail_gen {

inline std::vector<double> log_softmax(const std::vector<float>& logits) {
  double mx = -1e300;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  double mx = -1e300;
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

}  // namespace detail_gen

// Greedy decoding over any copyable session with step(int) -> logits.
// Deterministic: ties resolve to the lowest token id.
template <typename Session>
GenerationOutput decode_greedy_session(Session session, int max_output_tokens,
                                       int bos_id, int eos_id) {
  GenerationOutput out;
  const auto t0 = std::chrono::steady_clock::now();
  double score_sum = 0.0;
  int steps = 0;
  int input = bos_id;
  while (steps < max_output_tokens) {
    const auto logits = session.step(input);
    const auto lp = detail_gen::log_softmax(logits);
    size_t best = 0;
    for (size_t i = 1; i < lp.size(); ++i)
      if (lp[i] > lp[best]) best = i;
    score_sum += lp[best];
    ++steps;
    if (static_cast<int>(best) == eos_id) break;
    out.token_ids.push_back(static_cast<int>(best));
    input = static_cast<int>(best);
  }
  out.score = steps > 0 ? score_sum / steps : 0.0;
  out.timings.steps = steps;
  out.timings.decode_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
          .count();
  return out;
}

// Beam search with length-normalized scoring (sum log-prob / token count).
// beam_size = 1 reproduces greedy token-for-token.
template <typename Session>
GenerationOutput decode_beam_session(const Session& root, int beam_size,
                                     int max_output_tokens, int bos_id, int eos_id) {
  if (beam_size < 1) throw std::invalid_argument("beam: beam_size must be >= 1");
  GenerationOutput out;
  const auto t0 = std::chrono::steady_clock::now();
  if (max_output_tokens == 0) {
    out.timings.decode_ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
    return out;
  }

  struct Hyp {
    Session session;
    std::vector<int> tokens;
    double score_sum = 0.0;
    std::vector<double> next_lp;
  };
  struct Finished {
    std::vector<int> tokens;
    double norm_score;
  };

  std::vector<Hyp> live;
  {
    Hyp h;
    h.session = root;
    h.next_lp = detail_gen::log_softmax(h.session.step(bos_id));
    live.push_back(std::move(h));
  }
  std::vector<Finished> finished;
  int steps = 0;

  for (int t = 0; t < max_output_tokens && !live.empty(); ++t) {
    struct Cand {
      size_t hyp;
      int token;
      double score_sum;
    };
    std::vector<Cand> cands;
    for (size_t hi = 0; hi < live.size(); ++hi) {
      // Only the top beam_size continuations of each hypothesis can survive.
      std::vector<int> order(live[hi].next_lp.size());
      for (size_t i = 0; i < order.size(); ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);
      const size_t keep = std::min<size_t>(static_cast<size_t>(beam_size), order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep),
                        order.end(), [&](int a, int b) {
                          const double la = live[hi].next_lp[static_cast<size_t>(a)];
                          const double lb = live[hi].next_lp[static_cast<size_t>(b)];
                          if (la != lb) return la > lb;
                          return a < b;
                        });
      for (size_t i = 0; i < keep; ++i) {
        const int tok = order[i];
        cands.push_back({hi, tok,
                         live[hi].score_sum + live[hi].next_lp[static_cast<size_t>(tok)]});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score_sum != b.score_sum) return a.score_sum > b.score_sum;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });
    if (cands.size() > static_cast<size_t>(beam_size)) cands.resize(static_cast<size_t>(beam_size));

    std::vector<Hyp> next_live;
    ++steps;
    for (const auto& c : cands) {
      if (c.token == eos_id) {
        const int len = static_cast<int>(live[c.hyp].tokens.size()) + 1;
        finished.push_back({live[c.hyp].tokens, c.score_sum / len});
        continue;
      }
      Hyp h;
      h.session = live[c.hyp].session;
      h.tokens = live[c.hyp].tokens;
      h.tokens.push_back(c.token);
      h.score_sum = c.score_sum;
      if (t + 1 < max_output_tokens)
        h.next_lp = detail_gen::log_softmax(h.session.step(c.token));
      next_live.push_back(std::move(h));
    }
    live = std::move(next_live);
    if (finished.size() >= static_cast<size_t>(beam_size)) break;
  }

  for (const auto& h : live) {
    if (h.tokens.empty()) continue;
    finished.push_back({h.tokens, h.score_sum / static_cast<int>(h.tokens.size())});
  }
  if (finished.empty()) {
    out.timings.steps = steps;
    out.timings.decode_ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
    return out;
  }
  size_t best = 0;
  for (size_t i = 1; i < finished.size(); ++i)
    if (finished[i].norm_score > finished[best].norm_score) best = i;
  out.token_ids = finished[best].tokens;
  out.score = finished[best].norm_score;
  out.timings.steps = steps;
  out.timings.decode_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
  return out;
}

// Fixed-length decode used by the latency benchmark: always runs exactly
// max_output_tokens steps, ignoring EOS.
template <typename Session>
GenerationOutput decode_forced_session(Session session, int max_output_tokens,
                                       int bos_id) {
  GenerationOutput out;
  const auto t0 = std::chrono::steady_clock::now();
  int input = bos_id;
  for (int t = 0; t < max_output_tokens; ++t) {
    const auto logits = session.step(input);
    size_t best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    out.token_ids.push_back(static_cast<int>(best));
    input = static_cast<int>(best);
    ++out.timings.steps;
  }
  out.timings.decode_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
  return out;
}

template <typename T>
DecodeSession<T> make_session(GeneratorModel<T>& model, const CrossCache<T>& cache) {
  return DecodeSession<T>(model.dec, model.cfg.transformer(), model.embed, cache);
}

template <typename T>
CrossCache<T> memory_cache(GeneratorModel<T>& model, const FusedMemory<T>& mem) {
  return build_cross_cache(model.dec, model.cfg.transformer(), *mem.rows.data,
                           mem.rows.shape[0], mem.valid);
}

template <typename T>
GenerationOutput decode_greedy(GeneratorModel<T>& model, const FusedMemory<T>& mem,
                               int max_output_tokens) {
  NoGradGuard ng;
  const auto cache = memory_cache(model, mem);
  auto out = decode_greedy_session(make_session(model, cache), max_output_tokens,
                                   ByteVocab::kBos, ByteVocab::kEos);
  out.text = ByteVocab::decode(out.token_ids);
  return out;
}

template <typename T>
GenerationOutput decode_beam(GeneratorModel<T>& model, const FusedMemory<T>& mem,
                             int beam_size, int max_output_tokens) {
  NoGradGuard ng;
  const auto cache = memory_cache(model, mem);
  auto out = decode_beam_session(make_session(model, cache), beam_size,
                                 max_output_tokens, ByteVocab::kBos, ByteVocab::kEos);
  out.text = ByteVocab::decode(out.token_ids);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainItem {
  std::vector<std::string> inputs;  // encoder templates, candidate order
  std::string target;
};

// Forward pass to the scalar loss for one item. Used by both train_step and
// the finite-difference check of the full step.
template <typename T>
Tensor<T> example_loss(GeneratorModel<T>& model, const TrainItem& item,
                       const std::optional<CompressionConfig>& comp) {
  const auto tf = model.cfg.transformer();
  std::vector<EncodedPassage<T>> encoded;
  int index = 1;
  for (const auto& input : item.inputs) {
    const auto ids =
        ByteVocab::encode(input, static_cast<size_t>(model.cfg.max_input_tokens));
    EncodedPassage<T> e;
    e.source_index = index++;
    e.vectors = encoder_forward(model.enc, tf, embedding(model.embed, ids));
    e.valid.assign(ids.size(), 1);
    if (comp) e = compress(e, *comp);
    encoded.push_back(std::move(e));
  }
  auto mem = fuse(encoded);

  auto target_ids = ByteVocab::encode(
      item.target, static_cast<size_t>(model.cfg.max_output_tokens - 1));
  target_ids.push_back(ByteVocab::kEos);
  std::vector<int> input_ids;
  input_ids.push_back(ByteVocab::kBos);
  input_ids.insert(input_ids.end(), target_ids.begin(), target_ids.end() - 1);

  auto logits = decoder_forward(model.dec, tf, embedding(model.embed, input_ids),
                                mem.rows, &mem.valid);
  return cross_entropy(logits, target_ids);
}

// One teacher-forced optimizer update over a batch. Gradients accumulate per
// example; a NaN loss aborts with diagnostics.
template <typename T>
double train_step(GeneratorModel<T>& model, const std::vector<TrainItem>& batch,
                  Adam<T>& opt, const std::optional<CompressionConfig>& comp) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  auto params = model.params();
  zero_grads(params);
  double total = 0.0;
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  for (const auto& item : batch) {
    auto loss = example_loss(model, item, comp);
    const double v = static_cast<double>(loss.item());
    if (!std::isfinite(v))
      throw numeric_error("train_step: non-finite loss at step " +
                          std::to_string(model.step_count) + " (loss=" +
                          std::to_string(v) + ", lr=" + std::to_string(opt.lr()) + ")");
    total += v;
    backward(scale(loss, inv_b));
  }
  opt.step(params);
  ++model.step_count;
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header + raw little-endian f32 blob in declared order.
// ---------------------------------------------------------------------------

inline json generator_config_json(const GeneratorConfig& c) {
  return {{"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"n_enc_layers", c.n_enc_layers},
          {"n_dec_layers", c.n_dec_layers},
          {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size},
          {"max_input_tokens", c.max_input_tokens},
          {"max_output_tokens", c.max_output_tokens},
          {"n_passages", c.n_passages},
          {"rel_buckets", c.rel_buckets},
          {"rel_max_distance", c.rel_max_distance}};
}

inline GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_input_tokens = j.at("max_input_tokens").get<int>();
  c.max_output_tokens = j.at("max_output_tokens").get<int>();
  c.n_passages = j.at("n_passages").get<int>();
  c.rel_buckets = j.at("rel_buckets").get<int>();
  c.rel_max_distance = j.at("rel_max_distance").get<int>();
  return c;
}

inline void save_checkpoint(GeneratorModel<float>& model, const std::string& path) {
  json params = json::array();
  std::vector<float> blob;
  for (auto& [name, p] : model.named_params()) {
    params.push_back({{"name", name}, {"shape", p->shape}});
    blob.insert(blob.end(), p->data->begin(), p->data->end());
  }
  json header = {{"format", "ragkit-ckpt-v1"},
                 {"kind", "generator"},
                 {"config", generator_config_json(model.cfg)},
                 {"vocab", ByteVocab::control_tokens()},
                 {"step", model.step_count},
                 {"seed", model.seed},
                 {"params", params}};
  write_blob_file(path, header, blob);
}

inline bool operator==(const GeneratorConfig& a, const GeneratorConfig& b) {
  return generator_config_json(a) == generator_config_json(b);
}

inline GeneratorModel<float> load_checkpoint(const std::string& path) {
  std::vector<float> blob;
  const json header = read_blob_file(path, blob);
  if (header.value("kind", "") != "generator")
    throw data_error(path + ": not a generator checkpoint");
  const GeneratorConfig cfg = generator_config_from_json(header.at("config"));
  auto model = GeneratorModel<float>::init(cfg, header.value("seed", 0ull));
  model.step_count = header.value("step", 0ll);
  size_t off = 0;
  auto named = model.named_params();
  const auto& params = header.at("params");
  if (params.size() != named.size())
    throw data_error(path + ": parameter list mismatch");
  for (size_t i = 0; i < named.size(); ++i) {
    const auto& [name, p] = named[i];
    if (params[i].at("name").get<std::string>() != name)
      throw data_error(path + ": parameter order mismatch at " + name);
    const auto shape = params[i].at("shape").get<std::vector<int>>();
    if (shape != p->shape)
      throw data_error(path + ": config mismatch for " + name);
    if (off + p->numel() > blob.size()) throw data_error(path + ": truncated blob");
    std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(off), p->numel(),
                p->data->begin());
    off += p->numel();
  }
  if (off != blob.size()) throw data_error(path + ": blob size mismatch");
  return model;
}

// Loads and validates the header against an expected configuration.
inline GeneratorModel<float> load_checkpoint(const std::string& path,
                                             const GeneratorConfig& expected) {
  auto model = load_checkpoint(path);
  if (!(model.cfg == expected))
    throw data_error(path + ": checkpoint config does not match expected config");
  return model;
}

}  // namespace ragkit

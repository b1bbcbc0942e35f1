#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ragkit/generator.hpp"

namespace ragkit {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct PhaseTiming {
  std::string config;
  double retrieval_ms = 0.0;
  double encoder_ms = 0.0;
  double decoder_ms = 0.0;
  double total_ms = 0.0;
  int reps = 0;
};

struct BenchProtocol {
  int reps = 5;       // measured repetitions (>= 3), after one warm-up
  int beam_size = 4;
  bool force_full_length = true;  // decode exactly max_output_tokens steps
};

// Phase-separated timing of one query: encoder = encode all candidate
// passages; decoder = cross K/V projection + autoregressive decode. Medians
// over reps; a warm-up run is excluded. Single-threaded by design.
template <typename T>
PhaseTiming time_query(GeneratorModel<T>& model, const std::string& tagged_query,
                       const std::vector<Passage>& candidates,
                       const std::optional<CompressionConfig>& comp,
                       const BenchProtocol& proto) {
  if (proto.reps < 3) throw std::invalid_argument("time_query: reps must be >= 3");
  NoGradGuard ng;
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };

  std::vector<double> enc_ms, dec_ms, total_ms;
  for (int rep = 0; rep <= proto.reps; ++rep) {
    const auto t_total = clock::now();

    const auto t_enc = clock::now();
    std::vector<EncodedPassage<T>> encoded;
    int index = 1;
    for (const auto& p : candidates) {
      auto e = encode_passage(model, tagged_query, p, index++);
      if (comp) e = compress(e, *comp);
      encoded.push_back(std::move(e));
    }
    const double e_ms = ms_since(t_enc);

    const auto t_dec = clock::now();
    auto mem = fuse(encoded);
    const auto cache = memory_cache(model, mem);
    if (proto.force_full_length) {
      auto sessions_out = decode_forced_session(make_session(model, cache),
                                                model.cfg.max_output_tokens,
                                                ByteVocab::kBos);
      (void)sessions_out;
    } else {
      decode_beam_session(make_session(model, cache), proto.beam_size,
                          model.cfg.max_output_tokens, ByteVocab::kBos,
                          ByteVocab::kEos);
    }
    const double d_ms = ms_since(t_dec);

    if (rep == 0) continue;  // warm-up
    enc_ms.push_back(e_ms);
    dec_ms.push_back(d_ms);
    total_ms.push_back(ms_since(t_total));
  }

  PhaseTiming out;
  out.encoder_ms = median(enc_ms);
  out.decoder_ms = median(dec_ms);
  out.total_ms = std::max(median(total_ms), out.encoder_ms + out.decoder_ms);
  out.reps = proto.reps;
  return out;
}

struct ParetoPoint {
  std::string config;
  double latency_ms = 0.0;
  double effectiveness = 0.0;
  bool on_frontier = false;
};

// q dominates p when q is no worse on both axes and strictly better on one.
inline bool dominates(const ParetoPoint& q, const ParetoPoint& p) {
  return q.latency_ms <= p.latency_ms && q.effectiveness >= p.effectiveness &&
         (q.latency_ms < p.latency_ms || q.effectiveness > p.effectiveness);
}

inline void mark_frontier(std::vector<ParetoPoint>& points) {
  if (points.empty()) throw data_error("pareto: empty config list");
  for (auto& p : points) {
    p.on_frontier = true;
    for (const auto& q : points) {
      if (&q == &p) continue;
      if (dominates(q, p)) {
        p.on_frontier = false;
        break;
      }
    }
  }
}

inline void write_bench_csv(const std::vector<PhaseTiming>& rows,
                            const std::vector<double>& metrics,
                            const BenchProtocol& proto, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  out << "# protocol: single-threaded, batch 1, median of " << proto.reps
      << " reps after 1 warm-up, "
      << (proto.force_full_length
              ? "forced full-length decode (max_output_tokens steps)"
              : ("beam size " + std::to_string(proto.beam_size) +
                 ", decode stops at EOS"))
      << "\n";
  out << "# decoder phase includes fusion and cross-attention K/V projection\n";
  out << "config,encoder_ms,decoder_ms,total_ms,metric\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].config << "," << rows[i].encoder_ms << "," << rows[i].decoder_ms
        << "," << rows[i].total_ms << ","
        << (i < metrics.size() ? metrics[i] : 0.0) << "\n";
  }
}

inline std::string pareto_table(const std::vector<ParetoPoint>& points) {
  std::string s = "config                      latency_ms   effectiveness  frontier\n";
  char buf[128];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%-26s %11.2f %15.4f  %s\n", p.config.c_str(),
                  p.latency_ms, p.effectiveness, p.on_frontier ? "*" : "");
    s += buf;
  }
  return s;
}

}  // namespace ragkit

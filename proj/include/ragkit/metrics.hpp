#pragma once

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ragkit/common.hpp"

namespace ragkit {

// Open-domain QA answer normalization: lowercase, strip punctuation, drop
// English articles, collapse whitespace.
inline std::string normalize_answer(const std::string& s) {
  std::string lowered;
  lowered.reserve(s.size());
  for (char c : s) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) {
      lowered.push_back(' ');
    } else {
      lowered.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  std::istringstream in(lowered);
  std::string tok, out;
  while (in >> tok) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

inline std::vector<std::string> normalized_tokens(const std::string& s) {
  std::istringstream in(normalize_answer(s));
  std::vector<std::string> toks;
  std::string t;
  while (in >> t) toks.push_back(t);
  return toks;
}

// |top-R ∩ relevant| / R with R = |relevant|.
inline double r_precision(const std::vector<std::string>& ranked,
                          const std::set<std::string>& relevant) {
  if (relevant.empty()) throw data_error("r_precision: empty relevant set");
  const size_t R = relevant.size();
  size_t hits = 0;
  for (size_t i = 0; i < ranked.size() && i < R; ++i)
    if (relevant.count(ranked[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(R);
}

// |top-k ∩ relevant| / |relevant|.
inline double recall_at_k(const std::vector<std::string>& ranked,
                          const std::set<std::string>& relevant, size_t k) {
  if (relevant.empty()) throw data_error("recall_at_k: empty relevant set");
  size_t hits = 0;
  for (size_t i = 0; i < ranked.size() && i < k; ++i)
    if (relevant.count(ranked[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

inline int exact_match(const std::string& pred, const std::vector<std::string>& golds) {
  const std::string p = normalize_answer(pred);
  for (const auto& g : golds)
    if (p == normalize_answer(g)) return 1;
  return 0;
}

// Normalized label match; same rule as exact match over short labels.
inline int accuracy(const std::string& pred, const std::vector<std::string>& golds) {
  return exact_match(pred, golds);
}

// Max over golds of the token-level F1 on normalized whitespace tokens.
inline double token_f1(const std::string& pred, const std::vector<std::string>& golds) {
  const std::vector<std::string> pt = normalized_tokens(pred);
  double best = 0.0;
  for (const auto& g : golds) {
    const std::vector<std::string> gt = normalized_tokens(g);
    if (pt.empty() && gt.empty()) {
      best = std::max(best, 1.0);
      continue;
    }
    if (pt.empty() || gt.empty()) continue;
    std::map<std::string, int> counts;
    for (const auto& t : gt) ++counts[t];
    int overlap = 0;
    for (const auto& t : pt) {
      auto it = counts.find(t);
      if (it != counts.end() && it->second > 0) {
        --it->second;
        ++overlap;
      }
    }
    if (overlap == 0) continue;
    const double precision = static_cast<double>(overlap) / pt.size();
    const double recall = static_cast<double>(overlap) / gt.size();
    best = std::max(best, 2.0 * precision * recall / (precision + recall));
  }
  return best;
}

// First occurrence of each document kept, order preserved.
inline std::vector<std::string> collapse_to_documents(
    const std::vector<std::string>& ranked_passages,
    const std::map<std::string, std::string>& doc_of) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& pid : ranked_passages) {
    auto it = doc_of.find(pid);
    if (it == doc_of.end()) throw data_error("collapse: unmapped passage " + pid);
    if (seen.insert(it->second).second) out.push_back(it->second);
  }
  return out;
}

struct ConfidenceInterval {
  double mean = 0.0;
  double half_width = 0.0;
};

// mean ± t_{(1+level)/2, n-1} * s / sqrt(n) over per-checkpoint metric values.
inline ConfidenceInterval confidence_interval(const std::vector<double>& values,
                                              double level = 0.95) {
  const size_t n = values.size();
  if (n < 2) throw data_error("confidence_interval: need at least 2 values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  boost::math::students_t dist(static_cast<double>(n - 1));
  const double t = boost::math::quantile(dist, 0.5 + level / 2.0);
  return {mean, t * sd / std::sqrt(static_cast<double>(n))};
}

enum class TextMetric { kExactMatch, kAccuracy, kF1 };

inline TextMetric metric_for_task(const std::string& task) {
  if (task == "factcheck" || task == "slotfill") return TextMetric::kAccuracy;
  if (task == "dialog") return TextMetric::kF1;
  return TextMetric::kExactMatch;
}

inline const char* metric_name(TextMetric m) {
  switch (m) {
    case TextMetric::kExactMatch: return "EM";
    case TextMetric::kAccuracy: return "AC";
    default: return "F1";
  }
}

inline double text_score(TextMetric m, const std::string& pred,
                         const std::vector<std::string>& golds) {
  switch (m) {
    case TextMetric::kExactMatch: return exact_match(pred, golds);
    case TextMetric::kAccuracy: return accuracy(pred, golds);
    default: return token_f1(pred, golds);
  }
}

enum class ProvenanceLevel { kPassage, kDocument };

struct QueryResult {
  std::string query_id;
  std::string task;
  std::vector<std::string> ranked;  // post-rerank provenance, passage ids
  std::string answer;
  std::vector<std::string> golds;
  std::set<std::string> relevant;  // R+ passage ids
};

// Failure classes (provenance x text): 1 both wrong, 2 passage right / text
// wrong, 3 text right / passage wrong, 4 both right.
struct FailureCounts {
  int both_wrong = 0;
  int passage_only = 0;
  int text_only = 0;
  int both_right = 0;

  int total() const { return both_wrong + passage_only + text_only + both_right; }
};

struct QueryRow {
  std::string query_id;
  double rp_passage = 0.0;
  double rp_document = 0.0;
  double text = 0.0;
  double kilt = 0.0;
  int failure_class = 0;
};

struct EvalReport {
  std::string text_metric;
  std::string level;  // passage | document
  std::vector<QueryRow> rows;
  double mean_rp_passage = 0.0;
  double mean_rp_document = 0.0;
  double mean_text = 0.0;
  double kilt_score = 0.0;
  std::map<int, double> recall_at;  // cutoff -> mean recall
  FailureCounts failures;
  bool has_ci = false;
  ConfidenceInterval ci;
};

namespace detail_metrics {

inline double rp_for(const QueryResult& r,
                     const std::map<std::string, std::string>& doc_of,
                     ProvenanceLevel level) {
  if (level == ProvenanceLevel::kPassage) return r_precision(r.ranked, r.relevant);
  std::set<std::string> rel_docs;
  for (const auto& pid : r.relevant) {
    auto it = doc_of.find(pid);
    if (it == doc_of.end()) throw data_error("kilt: unmapped relevant passage " + pid);
    rel_docs.insert(it->second);
  }
  return r_precision(collapse_to_documents(r.ranked, doc_of), rel_docs);
}

}  // namespace detail_metrics

// Eq-style combined score: the text metric counts only when R-Precision at
// the configured level is exactly 1 for the query.
inline double kilt_score(const std::vector<QueryResult>& results, TextMetric metric,
                         const std::map<std::string, std::string>& doc_of,
                         ProvenanceLevel level) {
  if (results.empty()) throw data_error("kilt_score: empty result set");
  double total = 0.0;
  for (const auto& r : results) {
    const double rp = detail_metrics::rp_for(r, doc_of, level);
    if (rp == 1.0) total += text_score(metric, r.answer, r.golds);
  }
  return total / static_cast<double>(results.size());
}

// Partition of the query set by (RP == 1) x (text correct). For F1-scored
// tasks "correct" means score >= f1_threshold; they are excluded by default.
inline FailureCounts failure_taxonomy(const std::vector<QueryResult>& results,
                                      TextMetric metric,
                                      const std::map<std::string, std::string>& doc_of,
                                      ProvenanceLevel level,
                                      double f1_threshold = 0.5) {
  FailureCounts counts;
  for (const auto& r : results) {
    const bool passage_ok = detail_metrics::rp_for(r, doc_of, level) == 1.0;
    const double m = text_score(metric, r.answer, r.golds);
    const bool text_ok = metric == TextMetric::kF1 ? m >= f1_threshold : m == 1.0;
    if (passage_ok && text_ok)
      ++counts.both_right;
    else if (passage_ok)
      ++counts.passage_only;
    else if (text_ok)
      ++counts.text_only;
    else
      ++counts.both_wrong;
  }
  return counts;
}

inline int classify_failure(bool passage_ok, bool text_ok) {
  if (passage_ok && text_ok) return 4;
  if (passage_ok) return 2;
  if (text_ok) return 3;
  return 1;
}

inline EvalReport evaluate_results(const std::vector<QueryResult>& results,
                                   TextMetric metric,
                                   const std::map<std::string, std::string>& doc_of,
                                   ProvenanceLevel level,
                                   const std::vector<int>& recall_cutoffs = {1, 5, 10,
                                                                             20, 40}) {
  if (results.empty()) throw data_error("evaluate_results: empty result set");
  EvalReport rep;
  rep.text_metric = metric_name(metric);
  rep.level = level == ProvenanceLevel::kPassage ? "passage" : "document";
  std::map<int, double> recall_sums;
  for (const auto& r : results) {
    QueryRow row;
    row.query_id = r.query_id;
    row.rp_passage = r_precision(r.ranked, r.relevant);
    row.rp_document = detail_metrics::rp_for(r, doc_of, ProvenanceLevel::kDocument);
    row.text = text_score(metric, r.answer, r.golds);
    const double gate_rp =
        level == ProvenanceLevel::kPassage ? row.rp_passage : row.rp_document;
    row.kilt = gate_rp == 1.0 ? row.text : 0.0;
    const bool text_ok = metric == TextMetric::kF1 ? row.text >= 0.5 : row.text == 1.0;
    row.failure_class = classify_failure(gate_rp == 1.0, text_ok);
    rep.rows.push_back(row);
    rep.mean_rp_passage += row.rp_passage;
    rep.mean_rp_document += row.rp_document;
    rep.mean_text += row.text;
    rep.kilt_score += row.kilt;
    for (int k : recall_cutoffs)
      recall_sums[k] += recall_at_k(r.ranked, r.relevant, static_cast<size_t>(k));
    switch (row.failure_class) {
      case 1: ++rep.failures.both_wrong; break;
      case 2: ++rep.failures.passage_only; break;
      case 3: ++rep.failures.text_only; break;
      default: ++rep.failures.both_right; break;
    }
  }
  const double n = static_cast<double>(results.size());
  rep.mean_rp_passage /= n;
  rep.mean_rp_document /= n;
  rep.mean_text /= n;
  rep.kilt_score /= n;
  for (auto& [k, v] : recall_sums) rep.recall_at[k] = v / n;
  return rep;
}

}  // namespace ragkit

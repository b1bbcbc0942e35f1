#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ragkit/common.hpp"
#include "ragkit/data_types.hpp"
#include "ragkit/rng.hpp"

namespace ragkit {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSONL helpers
// ---------------------------------------------------------------------------

namespace detail_io {

inline json parse_line(const std::string& line, const std::string& path, int lineno) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded())
    throw data_error(path + ":" + std::to_string(lineno) + ": malformed JSON");
  return j;
}

inline std::string req_string(const json& j, const char* field, const std::string& path,
                              int lineno) {
  if (!j.contains(field) || !j[field].is_string())
    throw data_error(path + ":" + std::to_string(lineno) + ": missing field '" +
                     field + "'");
  return j[field].get<std::string>();
}

inline std::vector<std::string> req_string_array(const json& j, const char* field,
                                                 const std::string& path, int lineno) {
  if (!j.contains(field) || !j[field].is_array())
    throw data_error(path + ":" + std::to_string(lineno) + ": missing field '" +
                     field + "'");
  std::vector<std::string> out;
  for (const auto& v : j[field]) {
    if (!v.is_string())
      throw data_error(path + ":" + std::to_string(lineno) + ": field '" + field +
                       "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

template <typename Fn>
void for_each_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    fn(parse_line(line, path, lineno), lineno);
  }
}

}  // namespace detail_io

inline Corpus load_corpus(const std::string& path) {
  Corpus corpus;
  detail_io::for_each_line(path, [&](const json& j, int lineno) {
    Passage p;
    p.id = detail_io::req_string(j, "id", path, lineno);
    p.doc_id = detail_io::req_string(j, "doc", path, lineno);
    p.title = detail_io::req_string(j, "title", path, lineno);
    p.text = detail_io::req_string(j, "text", path, lineno);
    try {
      corpus.add(std::move(p));
    } catch (const data_error& e) {
      throw data_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  for (const auto& p : corpus.passages) {
    json j = {{"id", p.id}, {"doc", p.doc_id}, {"title", p.title}, {"text", p.text}};
    out << j.dump() << "\n";
  }
}

// Examples are validated against the corpus when one is supplied: duplicate
// ids and dangling R+ references are rejected.
inline std::vector<TaskExample> load_examples(const std::string& path,
                                              const Corpus* corpus = nullptr) {
  std::vector<TaskExample> out;
  std::set<std::string> ids;
  detail_io::for_each_line(path, [&](const json& j, int lineno) {
    TaskExample e;
    e.id = detail_io::req_string(j, "id", path, lineno);
    e.task = detail_io::req_string(j, "task", path, lineno);
    e.query = detail_io::req_string(j, "query", path, lineno);
    e.golds = detail_io::req_string_array(j, "golds", path, lineno);
    e.relevant = detail_io::req_string_array(j, "relevant", path, lineno);
    if (!ids.insert(e.id).second)
      throw data_error(path + ":" + std::to_string(lineno) +
                       ": duplicate example id " + e.id);
    if (e.golds.empty())
      throw data_error(path + ":" + std::to_string(lineno) + ": empty golds");
    if (corpus) {
      for (const auto& r : e.relevant)
        if (!corpus->contains(r))
          throw data_error(path + ":" + std::to_string(lineno) +
                           ": relevant passage " + r + " not in corpus");
    }
    out.push_back(std::move(e));
  });
  return out;
}

inline void save_examples(const std::vector<TaskExample>& examples,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  for (const auto& e : examples) {
    json j = {{"id", e.id},
              {"task", e.task},
              {"query", e.query},
              {"golds", e.golds},
              {"relevant", e.relevant}};
    out << j.dump() << "\n";
  }
}

// Qrels rows: gold answers, R+ and the passage->document map for R+.
inline void save_qrels(const std::vector<TaskExample>& examples, const Corpus& corpus,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  for (const auto& e : examples) {
    json doc_of = json::object();
    for (const auto& r : e.relevant) doc_of[r] = corpus.by_id(r).doc_id;
    json j = {{"id", e.id}, {"golds", e.golds}, {"relevant", e.relevant},
              {"doc_of", doc_of}};
    out << j.dump() << "\n";
  }
}

struct QrelsEntry {
  std::vector<std::string> golds;
  std::vector<std::string> relevant;
  std::map<std::string, std::string> doc_of;
};

inline std::map<std::string, QrelsEntry> load_qrels(const std::string& path) {
  std::map<std::string, QrelsEntry> out;
  detail_io::for_each_line(path, [&](const json& j, int lineno) {
    const std::string id = detail_io::req_string(j, "id", path, lineno);
    QrelsEntry q;
    q.golds = detail_io::req_string_array(j, "golds", path, lineno);
    q.relevant = detail_io::req_string_array(j, "relevant", path, lineno);
    if (j.contains("doc_of"))
      for (auto it = j["doc_of"].begin(); it != j["doc_of"].end(); ++it)
        q.doc_of[it.key()] = it.value().get<std::string>();
    if (!out.emplace(id, std::move(q)).second)
      throw data_error(path + ":" + std::to_string(lineno) + ": duplicate qrels id " + id);
  });
  return out;
}

inline std::vector<Triple> load_triples(const std::string& path) {
  std::vector<Triple> out;
  detail_io::for_each_line(path, [&](const json& j, int lineno) {
    Triple t;
    t.query = detail_io::req_string(j, "query", path, lineno);
    t.pos = detail_io::req_string(j, "pos", path, lineno);
    t.neg = detail_io::req_string(j, "neg", path, lineno);
    if (t.pos == t.neg)
      throw data_error(path + ":" + std::to_string(lineno) +
                       ": positive equals negative");
    out.push_back(std::move(t));
  });
  return out;
}

inline void save_triples(const std::vector<Triple>& triples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  for (const auto& t : triples) {
    json j = {{"query", t.query}, {"pos", t.pos}, {"neg", t.neg}};
    out << j.dump() << "\n";
  }
}

// Candidate files: oracle-infused entries carry score null (the -inf
// sentinel has no JSON encoding).
inline void save_candidates(const std::vector<CandidateList>& lists,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  for (const auto& c : lists) {
    json arr = json::array();
    for (const auto& e : c.entries) {
      json je = {{"pid", e.passage_id}};
      if (std::isfinite(e.score))
        je["score"] = e.score;
      else
        je["score"] = nullptr;
      arr.push_back(je);
    }
    json j = {{"id", c.query_id}, {"candidates", arr}};
    out << j.dump() << "\n";
  }
}

inline std::map<std::string, CandidateList> load_candidates(const std::string& path) {
  std::map<std::string, CandidateList> out;
  detail_io::for_each_line(path, [&](const json& j, int lineno) {
    CandidateList c;
    c.query_id = detail_io::req_string(j, "id", path, lineno);
    if (!j.contains("candidates") || !j["candidates"].is_array())
      throw data_error(path + ":" + std::to_string(lineno) + ": missing candidates");
    for (const auto& je : j["candidates"]) {
      ScoredPassage sp;
      sp.passage_id = je.at("pid").get<std::string>();
      sp.score = je.at("score").is_null()
                     ? -std::numeric_limits<float>::infinity()
                     : je.at("score").get<float>();
      c.entries.push_back(std::move(sp));
    }
    if (!out.emplace(c.query_id, std::move(c)).second)
      throw data_error(path + ":" + std::to_string(lineno) + ": duplicate query id");
  });
  return out;
}

struct RunRow {
  std::string id;
  std::string answer;
  std::vector<std::string> provenance;     // ranked passage ids (post-rerank)
  std::vector<std::string> raw_selection;  // the bare parsed selection
};

inline void save_run(const std::vector<RunRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  for (const auto& r : rows) {
    json j = {{"id", r.id},
              {"answer", r.answer},
              {"provenance", r.provenance},
              {"raw_selection", r.raw_selection}};
    out << j.dump() << "\n";
  }
}

inline std::vector<RunRow> load_run(const std::string& path) {
  std::vector<RunRow> out;
  detail_io::for_each_line(path, [&](const json& j, int lineno) {
    RunRow r;
    r.id = detail_io::req_string(j, "id", path, lineno);
    r.answer = detail_io::req_string(j, "answer", path, lineno);
    r.provenance = detail_io::req_string_array(j, "provenance", path, lineno);
    r.raw_selection = detail_io::req_string_array(j, "raw_selection", path, lineno);
    out.push_back(std::move(r));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Binary container: u32 little-endian header length + JSON header + f32 blob.
// Used for checkpoints and embedding indexes.
// ---------------------------------------------------------------------------

inline void write_blob_file(const std::string& path, const json& header,
                            const std::vector<float>& blob) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path);
  const std::string h = header.dump();
  const uint32_t hlen = static_cast<uint32_t>(h.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw data_error("short write to " + path);
}

inline json read_blob_file(const std::string& path, std::vector<float>& blob) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path);
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  if (!in) throw data_error(path + ": truncated header length");
  std::string h(hlen, '\0');
  in.read(h.data(), hlen);
  if (!in) throw data_error(path + ": truncated header");
  json header = json::parse(h, nullptr, false);
  if (header.is_discarded()) throw data_error(path + ": corrupt header JSON");
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(4 + static_cast<std::streamoff>(hlen), std::ios::beg);
  const auto payload = end - in.tellg();
  if (payload % 4 != 0) throw data_error(path + ": truncated blob");
  blob.resize(static_cast<size_t>(payload) / 4);
  in.read(reinterpret_cast<char*>(blob.data()), payload);
  if (!in) throw data_error(path + ": truncated blob");
  return header;
}

// ---------------------------------------------------------------------------
// Synthetic knowledge-intensive tasks
// ---------------------------------------------------------------------------

enum class SynthMode { kLookup, kMultihop };

// Seeded generator of fact corpora plus lookup ("what r of e?") or two-hop
// ("what r2 of r1 of e?") query sets. Lookup queries have |R+| = 1, multihop
// exactly 2. The gold answer appears verbatim in a relevant passage.
struct SynthTaskConfig {
  int entities = 80;
  int relations = 10;
  int values = 40;
  int corpus_size = 800;       // upper bound; capped by entities*relations
  double distractor_ratio = 0.25;  // fraction of facts never queried
  SynthMode mode = SynthMode::kLookup;
  int n_train = 400;
  int n_dev = 200;
  int text_filler = 0;  // extra filler tokens appended to passage texts
  uint64_t seed = 0;
};

struct SynthTask {
  Corpus corpus;
  std::vector<TaskExample> train;
  std::vector<TaskExample> dev;
};

namespace detail_synth {

inline std::string filler(Rng& rng, int words) {
  std::string s;
  for (int i = 0; i < words; ++i) {
    s += " f";
    s += std::to_string(rng.uniform_int(50));
  }
  return s;
}

}  // namespace detail_synth

inline SynthTask generate_synthetic_task(const SynthTaskConfig& cfg) {
  if (cfg.entities < 2 || cfg.relations < 2 || cfg.values < 1)
    throw data_error("synth: vocabulary too small");
  Rng rng(cfg.seed);
  SynthTask task;

  if (cfg.mode == SynthMode::kLookup) {
    struct Fact {
      int e, r, v;
      std::string pid;
    };
    std::vector<Fact> facts;
    for (int e = 0; e < cfg.entities; ++e)
      for (int r = 0; r < cfg.relations; ++r)
        facts.push_back({e, r, static_cast<int>(rng.uniform_int(
                                   static_cast<uint64_t>(cfg.values)))});
    if (cfg.corpus_size < static_cast<int>(facts.size()))
      facts.resize(static_cast<size_t>(cfg.corpus_size));
    int pid = 0;
    for (auto& f : facts) {
      f.pid = "p" + std::to_string(pid++);
      Passage p;
      p.id = f.pid;
      p.doc_id = "d_e" + std::to_string(f.e);
      p.title = "e" + std::to_string(f.e);
      p.text = "e" + std::to_string(f.e) + " r" + std::to_string(f.r) + " is v" +
               std::to_string(f.v) + " ." + detail_synth::filler(rng, cfg.text_filler);
      task.corpus.add(std::move(p));
    }
    // Shuffle fact indices; the tail stays unqueried (distractors).
    std::vector<size_t> order(facts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + rng.uniform_int(order.size() - i)]);
    const int queryable = static_cast<int>(
        (1.0 - cfg.distractor_ratio) * static_cast<double>(order.size()));
    if (cfg.n_train + cfg.n_dev > queryable)
      throw data_error("synth: not enough queryable facts for requested splits");
    int qid = 0;
    for (int i = 0; i < cfg.n_train + cfg.n_dev; ++i) {
      const Fact& f = facts[order[static_cast<size_t>(i)]];
      TaskExample ex;
      ex.id = "q" + std::to_string(qid++);
      ex.task = "qa";
      ex.query = "what r" + std::to_string(f.r) + " of e" + std::to_string(f.e) + " ?";
      ex.golds = {"v" + std::to_string(f.v)};
      ex.relevant = {f.pid};
      if (i < cfg.n_train)
        task.train.push_back(std::move(ex));
      else
        task.dev.push_back(std::move(ex));
    }
    return task;
  }

  // Multihop: link facts connect entities; attribute facts carry values.
  const int n_link = std::max(1, cfg.relations / 4);
  const int n_attr = cfg.relations - n_link;
  // link_to[e][l] = target entity; attr_val[e][a] = value
  std::vector<std::vector<int>> link_to(static_cast<size_t>(cfg.entities));
  std::vector<std::vector<int>> attr_val(static_cast<size_t>(cfg.entities));
  std::vector<std::vector<std::string>> link_pid(static_cast<size_t>(cfg.entities));
  std::vector<std::vector<std::string>> attr_pid(static_cast<size_t>(cfg.entities));
  int pid = 0;
  for (int e = 0; e < cfg.entities; ++e) {
    for (int l = 0; l < n_link; ++l) {
      int target = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.entities)));
      if (target == e) target = (target + 1) % cfg.entities;
      link_to[static_cast<size_t>(e)].push_back(target);
      const std::string id = "p" + std::to_string(pid++);
      link_pid[static_cast<size_t>(e)].push_back(id);
      Passage p;
      p.id = id;
      p.doc_id = "d_e" + std::to_string(e);
      p.title = "e" + std::to_string(e);
      p.text = "e" + std::to_string(e) + " r" + std::to_string(l) + " is e" +
               std::to_string(target) + " ." +
               detail_synth::filler(rng, cfg.text_filler);
      task.corpus.add(std::move(p));
    }
    for (int a = 0; a < n_attr; ++a) {
      const int v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.values)));
      attr_val[static_cast<size_t>(e)].push_back(v);
      const std::string id = "p" + std::to_string(pid++);
      attr_pid[static_cast<size_t>(e)].push_back(id);
      Passage p;
      p.id = id;
      p.doc_id = "d_e" + std::to_string(e);
      p.title = "e" + std::to_string(e);
      p.text = "e" + std::to_string(e) + " r" + std::to_string(n_link + a) + " is v" +
               std::to_string(v) + " ." + detail_synth::filler(rng, cfg.text_filler);
      task.corpus.add(std::move(p));
    }
  }
  struct Hop {
    int e, l, a;
  };
  std::vector<Hop> hops;
  for (int e = 0; e < cfg.entities; ++e)
    for (int l = 0; l < n_link; ++l)
      for (int a = 0; a < n_attr; ++a) hops.push_back({e, l, a});
  for (size_t i = 0; i + 1 < hops.size(); ++i)
    std::swap(hops[i], hops[i + rng.uniform_int(hops.size() - i)]);
  const int queryable = static_cast<int>((1.0 - cfg.distractor_ratio) *
                                         static_cast<double>(hops.size()));
  if (cfg.n_train + cfg.n_dev > queryable)
    throw data_error("synth: not enough queryable two-hop paths");
  int qid = 0;
  for (int i = 0; i < cfg.n_train + cfg.n_dev; ++i) {
    const Hop& h = hops[static_cast<size_t>(i)];
    const int mid = link_to[static_cast<size_t>(h.e)][static_cast<size_t>(h.l)];
    const int v = attr_val[static_cast<size_t>(mid)][static_cast<size_t>(h.a)];
    TaskExample ex;
    ex.id = "q" + std::to_string(qid++);
    ex.task = "multihop-qa";
    ex.query = "what r" + std::to_string(n_link + h.a) + " of r" +
               std::to_string(h.l) + " of e" + std::to_string(h.e) + " ?";
    ex.golds = {"v" + std::to_string(v)};
    ex.relevant = {link_pid[static_cast<size_t>(h.e)][static_cast<size_t>(h.l)],
                   attr_pid[static_cast<size_t>(mid)][static_cast<size_t>(h.a)]};
    if (i < cfg.n_train)
      task.train.push_back(std::move(ex));
    else
      task.dev.push_back(std::move(ex));
  }
  return task;
}

}  // namespace ragkit

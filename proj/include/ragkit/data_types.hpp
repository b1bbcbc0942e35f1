#pragma once

#include <map>
#include <string>
#include <vector>

#include "ragkit/common.hpp"

namespace ragkit {

struct Passage {
  std::string id;
  std::string doc_id;
  std::string title;
  std::string text;
};

struct Corpus {
  std::vector<Passage> passages;
  std::map<std::string, size_t> index_of;

  void add(Passage p) {
    if (p.text.empty()) throw data_error("passage " + p.id + ": empty text");
    if (!index_of.emplace(p.id, passages.size()).second)
      throw data_error("duplicate passage id: " + p.id);
    passages.push_back(std::move(p));
  }

  bool contains(const std::string& id) const { return index_of.count(id) > 0; }

  const Passage& by_id(const std::string& id) const {
    auto it = index_of.find(id);
    if (it == index_of.end()) throw data_error("unknown passage id: " + id);
    return passages[it->second];
  }

  size_t size() const { return passages.size(); }

  std::map<std::string, std::string> doc_map() const {
    std::map<std::string, std::string> m;
    for (const auto& p : passages) m[p.id] = p.doc_id;
    return m;
  }
};

struct TaskExample {
  std::string id;
  std::string task;  // qa | multihop-qa | factcheck | slotfill | dialog
  std::string query;
  std::vector<std::string> golds;
  std::vector<std::string> relevant;  // R+ passage ids
};

struct ScoredPassage {
  std::string passage_id;
  float score = 0.0f;
};

// Rank-ordered retrieval output. Scores are non-increasing except for
// oracle-infused entries, which carry a -inf sentinel at the tail.
struct CandidateList {
  std::string query_id;
  std::vector<ScoredPassage> entries;

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.passage_id);
    return out;
  }
};

struct Triple {
  std::string query;
  std::string pos;  // relevant passage id
  std::string neg;  // sampled negative passage id
};

}  // namespace ragkit

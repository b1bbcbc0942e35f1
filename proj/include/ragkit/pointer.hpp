#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ragkit/data_types.hpp"

namespace ragkit {

enum class ParseStatus { kClean, kRecovered, kNoMarker };

struct ParsedOutput {
  std::vector<int> selected;  // unique 1-based indices, first occurrence kept
  std::string answer;
  ParseStatus status = ParseStatus::kNoMarker;
};

// Encoder input template. The query arrives with its task marker already
// prefixed ("qa what r3 of e17?"), indices render in plain base-10.
inline std::string format_input(const std::string& task_tag, const std::string& query,
                                int index, const Passage& passage) {
  std::string s = "query: ";
  if (!task_tag.empty()) {
    s += task_tag;
    s += ' ';
  }
  s += query;
  s += " index: ";
  s += std::to_string(index);
  s += " context: ";
  s += passage.title;
  s += ' ';
  s += passage.text;
  return s;
}

// Training target: "index: i1 i2 ... text: {answer}". An empty index set keeps
// the marker so the output grammar is uniform: "index: text: {answer}".
inline std::string format_target(const std::vector<int>& relevant_retrieved,
                                 const std::string& answer) {
  std::string s = "index:";
  for (int i : relevant_retrieved) {
    s += ' ';
    s += std::to_string(i);
  }
  s += " text: ";
  s += answer;
  return s;
}

// Total parser over arbitrary decoder output. Extracts the integer run
// between "index:" and "text:", drops out-of-range and duplicate indices
// (status recovered), and treats the remainder after "text:" as the answer.
// Without both markers the whole string is the answer (status no-marker).
inline ParsedOutput parse_output(const std::string& decoded, int n) {
  ParsedOutput out;
  const size_t idx_pos = decoded.find("index:");
  const size_t txt_pos =
      idx_pos == std::string::npos ? decoded.find("text:")
                                   : decoded.find("text:", idx_pos + 6);
  if (idx_pos == std::string::npos || txt_pos == std::string::npos) {
    out.answer = decoded;
    out.status = ParseStatus::kNoMarker;
    return out;
  }

  out.status = ParseStatus::kClean;
  const std::string between = decoded.substr(idx_pos + 6, txt_pos - (idx_pos + 6));
  std::set<int> seen;
  size_t i = 0;
  while (i < between.size()) {
    if (std::isspace(static_cast<unsigned char>(between[i]))) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < between.size() &&
           !std::isspace(static_cast<unsigned char>(between[j])))
      ++j;
    const std::string tok = between.substr(i, j - i);
    i = j;
    bool numeric = !tok.empty();
    for (char c : tok)
      if (!std::isdigit(static_cast<unsigned char>(c))) numeric = false;
    if (!numeric || tok.size() > 9) {
      out.status = ParseStatus::kRecovered;
      continue;
    }
    const int v = std::stoi(tok);
    if (v < 1 || v > n) {
      out.status = ParseStatus::kRecovered;
      continue;
    }
    if (!seen.insert(v).second) {
      out.status = ParseStatus::kRecovered;
      continue;
    }
    out.selected.push_back(v);
  }

  std::string ans = decoded.substr(txt_pos + 5);
  if (!ans.empty() && ans.front() == ' ') ans.erase(ans.begin());
  out.answer = ans;
  return out;
}

// Source-pointer re-ranking: selected passages move to the top in model
// output order, the remainder keeps its original order. Always a permutation
// of the input list.
inline CandidateList rerank(const CandidateList& c, const std::vector<int>& selected) {
  CandidateList out;
  out.query_id = c.query_id;
  std::vector<bool> taken(c.entries.size(), false);
  for (int idx : selected) {
    if (idx < 1 || idx > static_cast<int>(c.entries.size())) continue;
    if (taken[static_cast<size_t>(idx - 1)]) continue;
    taken[static_cast<size_t>(idx - 1)] = true;
    out.entries.push_back(c.entries[static_cast<size_t>(idx - 1)]);
  }
  for (size_t i = 0; i < c.entries.size(); ++i)
    if (!taken[i]) out.entries.push_back(c.entries[i]);
  return out;
}

struct GeneratorExample {
  std::vector<std::string> inputs;  // one encoder template per candidate
  std::string target;
  std::vector<int> relevant_indices;  // 1-based ranks of R+ found in C
};

// One encoder input per candidate plus the supervision target flagging every
// known relevant passage that was actually retrieved.
inline GeneratorExample build_generator_training(const TaskExample& example,
                                                 const CandidateList& candidates,
                                                 const Corpus& corpus) {
  GeneratorExample out;
  for (size_t i = 0; i < candidates.entries.size(); ++i) {
    const Passage& p = corpus.by_id(candidates.entries[i].passage_id);
    out.inputs.push_back(format_input(example.task, example.query,
                                      static_cast<int>(i) + 1, p));
  }
  const std::set<std::string> rel(example.relevant.begin(), example.relevant.end());
  for (size_t i = 0; i < candidates.entries.size(); ++i)
    if (rel.count(candidates.entries[i].passage_id))
      out.relevant_indices.push_back(static_cast<int>(i) + 1);
  out.target = format_target(out.relevant_indices,
                             example.golds.empty() ? "" : example.golds.front());
  return out;
}

// Counts of |selected| per query.
inline std::map<int, int> selection_histogram(const std::vector<ParsedOutput>& outputs) {
  std::map<int, int> hist;
  for (const auto& o : outputs) ++hist[static_cast<int>(o.selected.size())];
  return hist;
}

}  // namespace ragkit

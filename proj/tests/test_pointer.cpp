#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <set>
#include <string>

#include "ragkit/metrics.hpp"
#include "ragkit/pointer.hpp"
#include "ragkit/rng.hpp"

using namespace ragkit;

namespace {

CandidateList make_candidates(int n) {
  CandidateList c;
  c.query_id = "q";
  for (int i = 0; i < n; ++i)
    c.entries.push_back({"p" + std::to_string(i + 1), static_cast<float>(n - i)});
  return c;
}

}  // namespace

TEST_CASE("format_input template is normative") {
  Passage p{"p9", "d1", "Paris", "capital of France"};
  CHECK(format_input("qa", "who?", 2, p) ==
        "query: qa who? index: 2 context: Paris capital of France");
  // Base-10, no padding.
  CHECK(format_input("", "q", 12, p) ==
        "query: q index: 12 context: Paris capital of France");
  CHECK(format_input("qa", "who?", 2, p) == format_input("qa", "who?", 2, p));
}

TEST_CASE("format_target templates") {
  CHECK(format_target({2}, "Paris") == "index: 2 text: Paris");
  CHECK(format_target({1, 3}, "yes") == "index: 1 3 text: yes");
  CHECK(format_target({}, "yes") == "index: text: yes");
}

TEST_CASE("parse_output examples") {
  auto a = parse_output("index: 2 text: Paris", 10);
  CHECK(a.selected == std::vector<int>{2});
  CHECK(a.answer == "Paris");
  CHECK(a.status == ParseStatus::kClean);

  // 99 out of range, duplicate 7 dropped.
  auto b = parse_output("index: 7 99 7 text: x", 10);
  CHECK(b.selected == std::vector<int>{7});
  CHECK(b.answer == "x");
  CHECK(b.status == ParseStatus::kRecovered);

  auto c = parse_output("Paris", 10);
  CHECK(c.selected.empty());
  CHECK(c.answer == "Paris");
  CHECK(c.status == ParseStatus::kNoMarker);
}

TEST_CASE("parse_output round-trips format_target") {
  Rng rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(20));
    std::vector<int> pool;
    for (int i = 1; i <= n; ++i) pool.push_back(i);
    const int m = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n) + 1));
    // Random subset in random order.
    for (int i = 0; i < m; ++i)
      std::swap(pool[static_cast<size_t>(i)],
                pool[static_cast<size_t>(i) + rng.uniform_int(static_cast<uint64_t>(n - i))]);
    std::vector<int> sel(pool.begin(), pool.begin() + m);
    std::string answer;
    const int alen = static_cast<int>(rng.uniform_int(12));
    for (int i = 0; i < alen; ++i)
      answer.push_back(static_cast<char>('a' + rng.uniform_int(26)));

    auto parsed = parse_output(format_target(sel, answer), n);
    CHECK(parsed.selected == sel);
    CHECK(parsed.answer == answer);
    CHECK(parsed.status == ParseStatus::kClean);
  }
}

TEST_CASE("parse_output is total on fuzzed byte strings") {
  Rng rng(22);
  for (int trial = 0; trial < 20000; ++trial) {
    std::string s;
    const int len = static_cast<int>(rng.uniform_int(60));
    for (int i = 0; i < len; ++i) {
      // Bias toward marker fragments and digits to stress the parser.
      switch (rng.uniform_int(6)) {
        case 0: s += "index:"; break;
        case 1: s += "text:"; break;
        case 2: s.push_back(static_cast<char>('0' + rng.uniform_int(10))); break;
        case 3: s.push_back(' '); break;
        default: s.push_back(static_cast<char>(rng.uniform_int(256))); break;
      }
    }
    const int n = 1 + static_cast<int>(rng.uniform_int(40));
    auto parsed = parse_output(s, n);
    std::set<int> uniq(parsed.selected.begin(), parsed.selected.end());
    CHECK(uniq.size() == parsed.selected.size());
    for (int v : parsed.selected) {
      CHECK(v >= 1);
      CHECK(v <= n);
    }
  }
}

TEST_CASE("rerank examples") {
  auto c = make_candidates(5);

  auto same = rerank(c, {});
  CHECK(same.ids() == c.ids());

  auto prefix = rerank(c, {1, 2});
  CHECK(prefix.ids() == c.ids());

  auto moved = rerank(c, {3, 1});
  CHECK(moved.ids() == std::vector<std::string>{"p3", "p1", "p2", "p4", "p5"});
}

TEST_CASE("rerank is a permutation and dominates the bare selection list") {
  Rng rng(23);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(12));
    auto c = make_candidates(n);

    std::vector<int> sel;
    std::set<int> used;
    const int m = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n) + 1));
    while (static_cast<int>(sel.size()) < m) {
      const int v = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
      if (used.insert(v).second) sel.push_back(v);
    }

    std::set<std::string> relevant;
    const int rcount = 1 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < rcount; ++i)
      relevant.insert("p" + std::to_string(1 + rng.uniform_int(static_cast<uint64_t>(n))));

    auto rr = rerank(c, sel);
    auto sorted_ids = rr.ids();
    std::sort(sorted_ids.begin(), sorted_ids.end());
    auto orig_ids = c.ids();
    std::sort(orig_ids.begin(), orig_ids.end());
    REQUIRE(sorted_ids == orig_ids);

    std::vector<std::string> bare;
    for (int v : sel) bare.push_back(c.entries[static_cast<size_t>(v - 1)].passage_id);
    CHECK(r_precision(rr.ids(), relevant) >= r_precision(bare, relevant));
  }
}

TEST_CASE("build_generator_training shapes and targets") {
  Corpus corpus;
  for (int i = 1; i <= 5; ++i)
    corpus.add({"p" + std::to_string(i), "d" + std::to_string(i), "t", "body"});

  TaskExample ex;
  ex.id = "q1";
  ex.task = "qa";
  ex.query = "what?";
  ex.golds = {"yes"};

  auto c = make_candidates(5);

  ex.relevant = {"p1", "p4"};
  auto built = build_generator_training(ex, c, corpus);
  CHECK(built.inputs.size() == 5);
  CHECK(built.target == "index: 1 4 text: yes");
  for (size_t i = 0; i < built.inputs.size(); ++i)
    CHECK(built.inputs[i].rfind("query: ", 0) == 0);

  ex.relevant = {"p9"};  // not retrieved
  auto none = build_generator_training(ex, c, corpus);
  CHECK(none.target == "index: text: yes");
}

TEST_CASE("selection_histogram counts") {
  std::vector<ParsedOutput> outs(3);
  outs[0].selected = {1};
  outs[1].selected = {2};
  outs[2].selected = {3};
  auto h1 = selection_histogram(outs);
  CHECK(h1.at(1) == 3);

  outs[0].selected = {};
  outs[2].selected = {3, 1};
  auto h2 = selection_histogram(outs);
  CHECK(h2.at(0) == 1);
  CHECK(h2.at(1) == 1);
  CHECK(h2.at(2) == 1);
}

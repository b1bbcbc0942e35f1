#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ragkit/metrics.hpp"
#include "ragkit/rng.hpp"

using namespace ragkit;

namespace {

// Naive references, written independently of the implementations above.
double ref_r_precision(const std::vector<std::string>& ranked,
                       const std::set<std::string>& rel) {
  int hits = 0;
  for (size_t i = 0; i < rel.size(); ++i)
    if (i < ranked.size() && rel.count(ranked[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(rel.size());
}

double ref_recall(const std::vector<std::string>& ranked,
                  const std::set<std::string>& rel, size_t k) {
  int hits = 0;
  for (const auto& r : rel) {
    for (size_t i = 0; i < std::min(k, ranked.size()); ++i)
      if (ranked[i] == r) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(rel.size());
}

std::vector<std::string> random_ranking(Rng& rng, int pool, int len) {
  std::vector<std::string> ids;
  std::vector<int> perm;
  for (int i = 0; i < pool; ++i) perm.push_back(i);
  for (int i = 0; i < len; ++i)
    std::swap(perm[static_cast<size_t>(i)],
              perm[static_cast<size_t>(i) + rng.uniform_int(static_cast<uint64_t>(pool - i))]);
  for (int i = 0; i < len; ++i) ids.push_back("p" + std::to_string(perm[static_cast<size_t>(i)]));
  return ids;
}

}  // namespace

TEST_CASE("r_precision examples") {
  CHECK(r_precision({"a", "b", "c"}, {"a"}) == 1.0);
  CHECK(r_precision({"a", "c", "b"}, {"a", "b"}) == 0.5);
  CHECK(r_precision({"x"}, {"a", "b", "c"}) == 0.0);
  CHECK_THROWS_AS(r_precision({"a"}, {}), data_error);
}

TEST_CASE("recall_at_k examples") {
  CHECK(recall_at_k({"a", "b"}, {"a", "b"}, 10) == 1.0);

  std::vector<std::string> ranked;
  for (int i = 0; i < 50; ++i) ranked.push_back("f" + std::to_string(i));
  ranked[2] = "b";
  ranked[40] = "a";  // rank 41
  CHECK(recall_at_k(ranked, {"a", "b"}, 40) == 0.5);

  CHECK(recall_at_k({"a"}, {"a"}, 0) == 0.0);
}

TEST_CASE("exact_match and accuracy normalization") {
  CHECK(exact_match("Paris", {"Paris"}) == 1);
  CHECK(exact_match("The Paris.", {"paris"}) == 1);
  CHECK(exact_match("Paris, France", {"Paris"}) == 0);
  CHECK(accuracy("SUPPORTS", {"supports"}) == 1);
  CHECK(accuracy("refutes", {"supports"}) == 0);
}

TEST_CASE("token_f1 examples") {
  CHECK(token_f1("same words here", {"same words here"}) == 1.0);
  CHECK(token_f1("x y", {"p q"}) == 0.0);
  // Two of three tokens overlap: P = R = 2/3, so F1 = 2/3. ("a" would be
  // dropped as an article by normalization, so use neutral tokens.)
  CHECK(token_f1("x y z", {"x y w"}) == Catch::Approx(2.0 / 3.0).margin(1e-12));
}

TEST_CASE("kilt_score gate") {
  std::map<std::string, std::string> docs = {{"p1", "d1"}, {"p2", "d2"}};

  std::vector<QueryResult> all_good(3);
  for (int i = 0; i < 3; ++i) {
    all_good[static_cast<size_t>(i)] = {"q" + std::to_string(i), "qa", {"p1"},
                                        "yes",  {"yes"},          {"p1"}};
  }
  CHECK(kilt_score(all_good, TextMetric::kExactMatch, docs,
                   ProvenanceLevel::kPassage) == 1.0);

  // Text perfect everywhere but RP = 0.5 everywhere: gate closed.
  std::vector<QueryResult> half(2);
  half[0] = {"q0", "qa", {"p1", "x"}, "yes", {"yes"}, {"p1", "p2"}};
  half[1] = {"q1", "qa", {"p2", "x"}, "yes", {"yes"}, {"p1", "p2"}};
  CHECK(kilt_score(half, TextMetric::kExactMatch,
                   {{"p1", "d1"}, {"p2", "d2"}, {"x", "dx"}},
                   ProvenanceLevel::kPassage) == 0.0);

  // (M=1, RP=1) and (M=1, RP=0) -> 0.5.
  std::vector<QueryResult> mixed(2);
  mixed[0] = {"q0", "qa", {"p1"}, "yes", {"yes"}, {"p1"}};
  mixed[1] = {"q1", "qa", {"p2"}, "yes", {"yes"}, {"p1"}};
  CHECK(kilt_score(mixed, TextMetric::kExactMatch, docs,
                   ProvenanceLevel::kPassage) == 0.5);
}

TEST_CASE("collapse_to_documents") {
  std::map<std::string, std::string> doc_of = {
      {"p1", "dA"}, {"p2", "dA"}, {"p3", "dB"}};
  CHECK(collapse_to_documents({"p1", "p2", "p3"}, doc_of) ==
        std::vector<std::string>{"dA", "dB"});
  CHECK(collapse_to_documents({"p3"}, doc_of) == std::vector<std::string>{"dB"});
  CHECK_THROWS_AS(collapse_to_documents({"zzz"}, doc_of), data_error);

  // Idempotent: collapsing a collapsed list (identity doc map) is a no-op.
  std::map<std::string, std::string> ident = {{"dA", "dA"}, {"dB", "dB"}};
  auto once = collapse_to_documents({"p1", "p2", "p3"}, doc_of);
  CHECK(collapse_to_documents(once, ident) == once);
}

TEST_CASE("confidence_interval examples") {
  CHECK(confidence_interval({2.0, 2.0, 2.0}).half_width == Catch::Approx(0.0).margin(1e-12));

  // Fixed 10-value sample against the t-table: t_{0.975,9} = 2.262157...
  std::vector<double> vals = {0.51, 0.49, 0.52, 0.48, 0.50,
                              0.53, 0.47, 0.50, 0.51, 0.49};
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= 10.0;
  double ss = 0.0;
  for (double v : vals) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / 9.0);
  const double expect_hw = 2.2621571627409915 * sd / std::sqrt(10.0);
  auto ci = confidence_interval(vals);
  CHECK(ci.mean == Catch::Approx(mean).margin(1e-12));
  CHECK(ci.half_width == Catch::Approx(expect_hw).margin(1e-6));

  // Symmetric data around m has mean exactly m.
  auto sym = confidence_interval({1.0 - 0.25, 1.0 + 0.25, 1.0 - 0.1, 1.0 + 0.1});
  CHECK(sym.mean == Catch::Approx(1.0).margin(1e-12));

  CHECK_THROWS_AS(confidence_interval({1.0}), data_error);
}

TEST_CASE("failure_taxonomy partitions and hits the constructed fixture") {
  std::map<std::string, std::string> docs = {{"p1", "d1"}, {"p2", "d2"}};

  std::vector<QueryResult> perfect(4);
  for (int i = 0; i < 4; ++i)
    perfect[static_cast<size_t>(i)] = {"q" + std::to_string(i), "qa", {"p1"},
                                       "yes",  {"yes"},          {"p1"}};
  auto counts = failure_taxonomy(perfect, TextMetric::kExactMatch, docs,
                                 ProvenanceLevel::kPassage);
  CHECK(counts.both_right == 4);
  CHECK(counts.total() == 4);

  std::vector<QueryResult> failed(3);
  for (int i = 0; i < 3; ++i)
    failed[static_cast<size_t>(i)] = {"q" + std::to_string(i), "qa", {"p2"},
                                      "no",   {"yes"},          {"p1"}};
  auto fcounts = failure_taxonomy(failed, TextMetric::kExactMatch, docs,
                                  ProvenanceLevel::kPassage);
  CHECK(fcounts.both_wrong == 3);
  CHECK(fcounts.total() == 3);

  // One query per class.
  std::vector<QueryResult> mixed(4);
  mixed[0] = {"q0", "qa", {"p2"}, "no", {"yes"}, {"p1"}};   // both wrong
  mixed[1] = {"q1", "qa", {"p1"}, "no", {"yes"}, {"p1"}};   // passage only
  mixed[2] = {"q2", "qa", {"p2"}, "yes", {"yes"}, {"p1"}};  // text only
  mixed[3] = {"q3", "qa", {"p1"}, "yes", {"yes"}, {"p1"}};  // both right
  auto m = failure_taxonomy(mixed, TextMetric::kExactMatch, docs,
                            ProvenanceLevel::kPassage);
  CHECK(m.both_wrong == 1);
  CHECK(m.passage_only == 1);
  CHECK(m.text_only == 1);
  CHECK(m.both_right == 1);
}

TEST_CASE("metrics match naive references on randomized cases") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int pool = 4 + static_cast<int>(rng.uniform_int(20));
    const int len = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(pool)));
    auto ranked = random_ranking(rng, pool, len);
    std::set<std::string> rel;
    const int rcount = 1 + static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < rcount; ++i)
      rel.insert("p" + std::to_string(rng.uniform_int(static_cast<uint64_t>(pool))));
    CHECK(r_precision(ranked, rel) == ref_r_precision(ranked, rel));
    const size_t k = rng.uniform_int(static_cast<uint64_t>(pool) + 2);
    CHECK(recall_at_k(ranked, rel, k) == ref_recall(ranked, rel, k));
  }
}

TEST_CASE("kilt aggregate equals per-query brute-force loop") {
  Rng rng(37);
  std::map<std::string, std::string> docs;
  for (int i = 0; i < 30; ++i) {
    docs["p" + std::to_string(i)] = "d" + std::to_string(i / 3);
  }
  std::vector<QueryResult> results;
  for (int i = 0; i < 60; ++i) {
    QueryResult r;
    r.query_id = "q" + std::to_string(i);
    r.task = "qa";
    r.ranked = random_ranking(rng, 30, 5);
    r.relevant = {r.ranked[rng.uniform_int(5)]};
    if (rng.uniform() < 0.4) r.relevant = {"p" + std::to_string(rng.uniform_int(30))};
    r.golds = {"gold"};
    r.answer = rng.uniform() < 0.5 ? "gold" : "junk";
    results.push_back(r);
  }
  double brute = 0.0;
  for (const auto& r : results) {
    const double rp = ref_r_precision(r.ranked, r.relevant);
    const double m = r.answer == "gold" ? 1.0 : 0.0;
    if (rp == 1.0) brute += m;
  }
  brute /= static_cast<double>(results.size());
  CHECK(kilt_score(results, TextMetric::kExactMatch, docs,
                   ProvenanceLevel::kPassage) == brute);

  auto rep = evaluate_results(results, TextMetric::kExactMatch, docs,
                              ProvenanceLevel::kPassage);
  CHECK(rep.kilt_score == Catch::Approx(brute).margin(1e-12));
  CHECK(rep.kilt_score <= rep.mean_text + 1e-12);
  CHECK(rep.failures.total() == static_cast<int>(results.size()));
}

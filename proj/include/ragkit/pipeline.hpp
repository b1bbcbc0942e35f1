#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ragkit/bench.hpp"
#include "ragkit/data.hpp"
#include "ragkit/generator.hpp"
#include "ragkit/metrics.hpp"
#include "ragkit/pointer.hpp"
#include "ragkit/retriever.hpp"

namespace ragkit {

namespace fs = std::filesystem;

struct ParetoSpec {
  std::string name;
  std::string checkpoint;
  int k = 0;  // 0 = uncompressed
  int n = 0;  // candidates per query
};

// Every run resolves to this flat config; flags override file values and the
// resolved result lands next to the outputs.
struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir = "runs/out";

  // synth
  std::string synth_mode = "lookup";
  int synth_entities = 80;
  int synth_relations = 10;
  int synth_values = 40;
  int synth_corpus_size = 800;
  double synth_distractor_ratio = 0.25;
  int synth_train = 400;
  int synth_dev = 200;
  int synth_text_filler = 0;

  // shared paths
  std::string corpus_path;
  std::string train_path;
  std::string dev_path;
  std::string qrels_path;
  std::string triples_path;
  std::string tower_path;
  std::string index_path;
  std::string candidates_path;
  std::string examples_path;  // input for retrieve
  std::string checkpoint_path;
  std::string run_path;
  std::string report_path;

  // retriever
  int ret_d_model = 64;
  int ret_heads = 4;
  int ret_layers = 1;
  int ret_ffn = 128;
  int ret_max_len = 64;
  int ret_epochs = 4;
  double ret_lr = 1e-3;
  int ret_batch = 8;
  int ret_pool_depth = 100;

  int n = 10;  // candidate count fed to the generator

  // generator
  int gen_d_model = 64;
  int gen_heads = 4;
  int gen_enc_layers = 2;
  int gen_dec_layers = 2;
  int gen_ffn = 256;
  int max_input_tokens = 384;
  int max_output_tokens = 64;
  int k = 8;  // decoder vectors per passage; 0 = uncompressed
  bool compress_train = true;
  bool compress_eval = true;
  int train_steps = 3000;
  int train_batch = 4;
  double gen_lr = 1e-3;
  int checkpoint_every = 1000;

  // evaluate
  std::string mode = "sp";     // sp | ex
  std::string oracle = "none";  // none | infuse | only
  int beam = 4;
  std::string level = "passage";  // passage | document
  bool ci_last_checkpoints = false;

  // bench
  int bench_reps = 5;
  std::vector<int> bench_ks = {1, 8, 32, 64};
  int bench_queries = 3;
  bool bench_force_full_length = true;
  std::vector<ParetoSpec> pareto;

  GeneratorConfig generator_config() const {
    GeneratorConfig g;
    g.d_model = gen_d_model;
    g.n_heads = gen_heads;
    g.n_enc_layers = gen_enc_layers;
    g.n_dec_layers = gen_dec_layers;
    g.ffn_dim = gen_ffn;
    g.max_input_tokens = max_input_tokens;
    g.max_output_tokens = max_output_tokens;
    g.n_passages = n;
    return g;
  }

  TowerConfig tower_config() const {
    TowerConfig t;
    t.d_model = ret_d_model;
    t.n_heads = ret_heads;
    t.n_layers = ret_layers;
    t.ffn_dim = ret_ffn;
    t.max_len = ret_max_len;
    return t;
  }
};

inline json run_config_json(const RunConfig& c) {
  json pareto = json::array();
  for (const auto& p : c.pareto)
    pareto.push_back({{"name", p.name},
                      {"checkpoint", p.checkpoint},
                      {"k", p.k},
                      {"n", p.n}});
  return {{"seed", c.seed},
          {"out_dir", c.out_dir},
          {"synth_mode", c.synth_mode},
          {"synth_entities", c.synth_entities},
          {"synth_relations", c.synth_relations},
          {"synth_values", c.synth_values},
          {"synth_corpus_size", c.synth_corpus_size},
          {"synth_distractor_ratio", c.synth_distractor_ratio},
          {"synth_train", c.synth_train},
          {"synth_dev", c.synth_dev},
          {"synth_text_filler", c.synth_text_filler},
          {"corpus_path", c.corpus_path},
          {"train_path", c.train_path},
          {"dev_path", c.dev_path},
          {"qrels_path", c.qrels_path},
          {"triples_path", c.triples_path},
          {"tower_path", c.tower_path},
          {"index_path", c.index_path},
          {"candidates_path", c.candidates_path},
          {"examples_path", c.examples_path},
          {"checkpoint_path", c.checkpoint_path},
          {"run_path", c.run_path},
          {"report_path", c.report_path},
          {"ret_d_model", c.ret_d_model},
          {"ret_heads", c.ret_heads},
          {"ret_layers", c.ret_layers},
          {"ret_ffn", c.ret_ffn},
          {"ret_max_len", c.ret_max_len},
          {"ret_epochs", c.ret_epochs},
          {"ret_lr", c.ret_lr},
          {"ret_batch", c.ret_batch},
          {"ret_pool_depth", c.ret_pool_depth},
          {"n", c.n},
          {"gen_d_model", c.gen_d_model},
          {"gen_heads", c.gen_heads},
          {"gen_enc_layers", c.gen_enc_layers},
          {"gen_dec_layers", c.gen_dec_layers},
          {"gen_ffn", c.gen_ffn},
          {"max_input_tokens", c.max_input_tokens},
          {"max_output_tokens", c.max_output_tokens},
          {"k", c.k},
          {"compress_train", c.compress_train},
          {"compress_eval", c.compress_eval},
          {"train_steps", c.train_steps},
          {"train_batch", c.train_batch},
          {"gen_lr", c.gen_lr},
          {"checkpoint_every", c.checkpoint_every},
          {"mode", c.mode},
          {"oracle", c.oracle},
          {"beam", c.beam},
          {"level", c.level},
          {"ci_last_checkpoints", c.ci_last_checkpoints},
          {"bench_reps", c.bench_reps},
          {"bench_ks", c.bench_ks},
          {"bench_queries", c.bench_queries},
          {"bench_force_full_length", c.bench_force_full_length},
          {"pareto", pareto}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.synth_mode = j.value("synth_mode", c.synth_mode);
  c.synth_entities = j.value("synth_entities", c.synth_entities);
  c.synth_relations = j.value("synth_relations", c.synth_relations);
  c.synth_values = j.value("synth_values", c.synth_values);
  c.synth_corpus_size = j.value("synth_corpus_size", c.synth_corpus_size);
  c.synth_distractor_ratio = j.value("synth_distractor_ratio", c.synth_distractor_ratio);
  c.synth_train = j.value("synth_train", c.synth_train);
  c.synth_dev = j.value("synth_dev", c.synth_dev);
  c.synth_text_filler = j.value("synth_text_filler", c.synth_text_filler);
  c.corpus_path = j.value("corpus_path", c.corpus_path);
  c.train_path = j.value("train_path", c.train_path);
  c.dev_path = j.value("dev_path", c.dev_path);
  c.qrels_path = j.value("qrels_path", c.qrels_path);
  c.triples_path = j.value("triples_path", c.triples_path);
  c.tower_path = j.value("tower_path", c.tower_path);
  c.index_path = j.value("index_path", c.index_path);
  c.candidates_path = j.value("candidates_path", c.candidates_path);
  c.examples_path = j.value("examples_path", c.examples_path);
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
  c.run_path = j.value("run_path", c.run_path);
  c.report_path = j.value("report_path", c.report_path);
  c.ret_d_model = j.value("ret_d_model", c.ret_d_model);
  c.ret_heads = j.value("ret_heads", c.ret_heads);
  c.ret_layers = j.value("ret_layers", c.ret_layers);
  c.ret_ffn = j.value("ret_ffn", c.ret_ffn);
  c.ret_max_len = j.value("ret_max_len", c.ret_max_len);
  c.ret_epochs = j.value("ret_epochs", c.ret_epochs);
  c.ret_lr = j.value("ret_lr", c.ret_lr);
  c.ret_batch = j.value("ret_batch", c.ret_batch);
  c.ret_pool_depth = j.value("ret_pool_depth", c.ret_pool_depth);
  c.n = j.value("n", c.n);
  c.gen_d_model = j.value("gen_d_model", c.gen_d_model);
  c.gen_heads = j.value("gen_heads", c.gen_heads);
  c.gen_enc_layers = j.value("gen_enc_layers", c.gen_enc_layers);
  c.gen_dec_layers = j.value("gen_dec_layers", c.gen_dec_layers);
  c.gen_ffn = j.value("gen_ffn", c.gen_ffn);
  c.max_input_tokens = j.value("max_input_tokens", c.max_input_tokens);
  c.max_output_tokens = j.value("max_output_tokens", c.max_output_tokens);
  c.k = j.value("k", c.k);
  c.compress_train = j.value("compress_train", c.compress_train);
  c.compress_eval = j.value("compress_eval", c.compress_eval);
  c.train_steps = j.value("train_steps", c.train_steps);
  c.train_batch = j.value("train_batch", c.train_batch);
  c.gen_lr = j.value("gen_lr", c.gen_lr);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.mode = j.value("mode", c.mode);
  c.oracle = j.value("oracle", c.oracle);
  c.beam = j.value("beam", c.beam);
  c.level = j.value("level", c.level);
  c.ci_last_checkpoints = j.value("ci_last_checkpoints", c.ci_last_checkpoints);
  c.bench_reps = j.value("bench_reps", c.bench_reps);
  c.bench_ks = j.value("bench_ks", c.bench_ks);
  c.bench_queries = j.value("bench_queries", c.bench_queries);
  c.bench_force_full_length =
      j.value("bench_force_full_length", c.bench_force_full_length);
  if (j.contains("pareto"))
    for (const auto& p : j["pareto"])
      c.pareto.push_back({p.value("name", ""), p.value("checkpoint", ""),
                          p.value("k", 0), p.value("n", 0)});
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open config " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw data_error("malformed config JSON: " + path);
  return run_config_from_json(j);
}

inline void write_resolved_config(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.out_dir);
  std::ofstream out(fs::path(cfg.out_dir) / "config.resolved.json");
  json j = {{"version", kVersion}, {"command", command},
            {"config", run_config_json(cfg)}};
  out << j.dump(2) << "\n";
}

inline std::string default_path(const RunConfig& cfg, const std::string& given,
                                const char* name) {
  if (!given.empty()) return given;
  return (fs::path(cfg.out_dir) / name).string();
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline void cmd_synth(RunConfig cfg) {
  SynthTaskConfig sc;
  sc.entities = cfg.synth_entities;
  sc.relations = cfg.synth_relations;
  sc.values = cfg.synth_values;
  sc.corpus_size = cfg.synth_corpus_size;
  sc.distractor_ratio = cfg.synth_distractor_ratio;
  sc.mode = cfg.synth_mode == "multihop" ? SynthMode::kMultihop : SynthMode::kLookup;
  sc.n_train = cfg.synth_train;
  sc.n_dev = cfg.synth_dev;
  sc.text_filler = cfg.synth_text_filler;
  sc.seed = cfg.seed;
  auto task = generate_synthetic_task(sc);
  fs::create_directories(cfg.out_dir);
  save_corpus(task.corpus, default_path(cfg, cfg.corpus_path, "corpus.jsonl"));
  save_examples(task.train, default_path(cfg, cfg.train_path, "train.jsonl"));
  save_examples(task.dev, default_path(cfg, cfg.dev_path, "dev.jsonl"));
  std::vector<TaskExample> all = task.train;
  all.insert(all.end(), task.dev.begin(), task.dev.end());
  save_qrels(all, task.corpus, default_path(cfg, cfg.qrels_path, "qrels.jsonl"));
  write_resolved_config(cfg, "synth");
  std::cout << "synth: corpus=" << task.corpus.size() << " train=" << task.train.size()
            << " dev=" << task.dev.size() << "\n";
}

// ---------------------------------------------------------------------------
// train-retriever
// ---------------------------------------------------------------------------

inline std::vector<Triple> mine_triples(Tower<float>& tower, const Corpus& corpus,
                                        const std::vector<TaskExample>& examples,
                                        int pool_depth, Rng& rng) {
  auto index = build_index(tower, corpus);
  std::vector<Triple> triples;
  for (const auto& ex : examples) {
    const std::set<std::string> rel(ex.relevant.begin(), ex.relevant.end());
    for (const auto& pos : ex.relevant) {
      Triple t;
      t.query = ex.query;
      t.pos = pos;
      t.neg = mine_negatives(tower, index, ex.query, rel, pool_depth, rng);
      triples.push_back(std::move(t));
    }
  }
  return triples;
}

inline std::vector<RetrieverEpochReport> cmd_train_retriever(RunConfig cfg) {
  const auto corpus = load_corpus(default_path(cfg, cfg.corpus_path, "corpus.jsonl"));
  const auto train =
      load_examples(default_path(cfg, cfg.train_path, "train.jsonl"), &corpus);
  const auto dev = load_examples(default_path(cfg, cfg.dev_path, "dev.jsonl"), &corpus);

  auto tower = Tower<float>::init(cfg.tower_config(), cfg.seed);
  Rng rng(cfg.seed);
  // Negatives come from the zero-shot (untrained) rankings.
  auto triples = mine_triples(tower, corpus, train, cfg.ret_pool_depth, rng);
  save_triples(triples, default_path(cfg, cfg.triples_path, "triples.jsonl"));

  RetrieverTrainOpts opts;
  opts.epochs = cfg.ret_epochs;
  opts.lr = cfg.ret_lr;
  opts.batch = cfg.ret_batch;
  opts.recall_n = cfg.n;
  opts.seed = cfg.seed;
  auto reports = train_retriever(tower, corpus, triples, train, dev, opts);
  for (const auto& r : reports)
    std::cout << "epoch " << r.epoch << ": loss=" << r.loss
              << " train_recall@" << cfg.n << "=" << r.train_recall
              << " dev_recall@" << cfg.n << "=" << r.dev_recall
              << " delta_t=" << r.delta_t << "\n";
  save_tower(tower, default_path(cfg, cfg.tower_path, "tower.ckpt"));
  write_resolved_config(cfg, "train-retriever");
  return reports;
}

// ---------------------------------------------------------------------------
// index / retrieve
// ---------------------------------------------------------------------------

inline void cmd_index(RunConfig cfg) {
  const auto corpus = load_corpus(default_path(cfg, cfg.corpus_path, "corpus.jsonl"));
  auto tower = load_tower(default_path(cfg, cfg.tower_path, "tower.ckpt"));
  auto index = build_index(tower, corpus);
  save_index(index, default_path(cfg, cfg.index_path, "index.idx"));
  write_resolved_config(cfg, "index");
  std::cout << "index: " << index.size() << " passages, d_emb=" << index.d_emb << "\n";
}

inline OracleMode oracle_mode_from(const std::string& s) {
  if (s == "none") return OracleMode::kNone;
  if (s == "infuse") return OracleMode::kInfuse;
  if (s == "only") return OracleMode::kOnly;
  throw std::invalid_argument("unknown oracle mode: " + s);
}

inline void cmd_retrieve(RunConfig cfg) {
  const auto corpus = load_corpus(default_path(cfg, cfg.corpus_path, "corpus.jsonl"));
  auto tower = load_tower(default_path(cfg, cfg.tower_path, "tower.ckpt"));
  auto index = load_index(default_path(cfg, cfg.index_path, "index.idx"));
  const auto examples =
      load_examples(default_path(cfg, cfg.examples_path, "dev.jsonl"), &corpus);
  const OracleMode mode = oracle_mode_from(cfg.oracle);
  std::vector<CandidateList> lists;
  for (const auto& ex : examples) {
    auto c = retrieve_text(tower, index, ex.query,
                           std::min<int>(cfg.n, static_cast<int>(index.size())), ex.id);
    lists.push_back(oracle_candidates(c, ex.relevant, mode));
  }
  save_candidates(lists, default_path(cfg, cfg.candidates_path, "candidates.jsonl"));
  write_resolved_config(cfg, "retrieve");
  std::cout << "retrieve: " << lists.size() << " queries, n=" << cfg.n
            << ", oracle=" << cfg.oracle << "\n";
}

// ---------------------------------------------------------------------------
// train-generator
// ---------------------------------------------------------------------------

inline std::vector<TrainItem> build_train_items(
    const Corpus& corpus, const std::vector<TaskExample>& examples,
    const std::map<std::string, CandidateList>& candidates) {
  std::vector<TrainItem> items;
  for (const auto& ex : examples) {
    auto it = candidates.find(ex.id);
    if (it == candidates.end())
      throw data_error("no candidates for example " + ex.id);
    auto built = build_generator_training(ex, it->second, corpus);
    items.push_back({std::move(built.inputs), std::move(built.target)});
  }
  return items;
}

inline GeneratorModel<float> cmd_train_generator(RunConfig cfg, bool quiet = false) {
  const auto corpus = load_corpus(default_path(cfg, cfg.corpus_path, "corpus.jsonl"));
  const auto train =
      load_examples(default_path(cfg, cfg.train_path, "train.jsonl"), &corpus);
  const auto candidates =
      load_candidates(default_path(cfg, cfg.candidates_path, "candidates.jsonl"));
  auto items = build_train_items(corpus, train, candidates);
  if (items.empty()) throw data_error("train-generator: empty training set");

  auto model = GeneratorModel<float>::init(cfg.generator_config(), cfg.seed);
  Adam<float> opt(cfg.gen_lr);
  std::optional<CompressionConfig> comp;
  if (cfg.k > 0 && cfg.compress_train) comp = CompressionConfig(cfg.k);

  Rng rng(cfg.seed + 1);
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();

  fs::create_directories(cfg.out_dir);
  for (int step = 0; step < cfg.train_steps; ++step) {
    std::vector<TrainItem> batch;
    for (int b = 0; b < cfg.train_batch; ++b) {
      if (cursor >= order.size()) {
        for (size_t i = 0; i + 1 < order.size(); ++i)
          std::swap(order[i], order[i + rng.uniform_int(order.size() - i)]);
        cursor = 0;
      }
      batch.push_back(items[order[cursor++]]);
    }
    const double loss = train_step(model, batch, opt, comp);
    if (!quiet && (step % 100 == 0 || step + 1 == cfg.train_steps))
      std::cout << "step " << step << ": loss=" << loss << "\n";
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(model, (fs::path(cfg.out_dir) /
                              ("ckpt_" + std::to_string(step + 1) + ".ckpt"))
                                 .string());
    }
  }
  save_checkpoint(model, default_path(cfg, cfg.checkpoint_path, "model.ckpt"));
  write_resolved_config(cfg, "train-generator");
  return model;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct InferenceOutcome {
  std::vector<RunRow> run;
  std::vector<QueryResult> results;
  std::map<int, int> selection_hist;
  std::map<int, int> target_hist;  // |R+ retrieved| per query
  EvalReport report;
};

// Shared inference path: encode candidates, fused beam decode, parse, then
// either re-rank (sp) or keep the bare selection (ex) as provenance.
template <typename T>
InferenceOutcome run_inference(GeneratorModel<T>& model, const Corpus& corpus,
                               const std::vector<TaskExample>& examples,
                               const std::map<std::string, CandidateList>& candidates,
                               const std::optional<CompressionConfig>& comp,
                               int beam, bool rerank_mode, ProvenanceLevel level) {
  InferenceOutcome out;
  std::vector<ParsedOutput> parsed_all;
  for (const auto& ex : examples) {
    auto cit = candidates.find(ex.id);
    if (cit == candidates.end()) throw data_error("no candidates for " + ex.id);
    CandidateList clist = cit->second;
    if (static_cast<int>(clist.entries.size()) > model.cfg.n_passages)
      clist.entries.resize(static_cast<size_t>(model.cfg.n_passages));

    std::vector<EncodedPassage<T>> encoded;
    {
      NoGradGuard ng;
      int index = 1;
      const std::string tagged = ex.task + " " + ex.query;
      for (const auto& e : clist.entries) {
        auto enc = encode_passage(model, tagged, corpus.by_id(e.passage_id), index++);
        if (comp) enc = compress(enc, *comp);
        encoded.push_back(std::move(enc));
      }
    }
    auto mem = fuse(encoded);
    auto gen = decode_beam(model, mem, beam, model.cfg.max_output_tokens);
    auto parsed = parse_output(gen.text, static_cast<int>(clist.entries.size()));
    parsed_all.push_back(parsed);

    RunRow row;
    row.id = ex.id;
    row.answer = parsed.answer;
    for (int idx : parsed.selected)
      row.raw_selection.push_back(clist.entries[static_cast<size_t>(idx - 1)].passage_id);
    row.provenance = rerank_mode ? rerank(clist, parsed.selected).ids()
                                 : row.raw_selection;
    out.run.push_back(row);

    QueryResult qr;
    qr.query_id = ex.id;
    qr.task = ex.task;
    qr.ranked = row.provenance;
    qr.answer = parsed.answer;
    qr.golds = ex.golds;
    qr.relevant = std::set<std::string>(ex.relevant.begin(), ex.relevant.end());
    out.results.push_back(qr);

    const std::set<std::string> rel(ex.relevant.begin(), ex.relevant.end());
    int retrieved_rel = 0;
    for (const auto& e : clist.entries)
      if (rel.count(e.passage_id)) ++retrieved_rel;
    ++out.target_hist[retrieved_rel];
  }
  out.selection_hist = selection_histogram(parsed_all);
  const TextMetric metric =
      examples.empty() ? TextMetric::kExactMatch : metric_for_task(examples[0].task);
  out.report = evaluate_results(out.results, metric, corpus.doc_map(), level);
  return out;
}

inline json report_json(const EvalReport& rep, const std::map<int, int>& sel_hist,
                        const std::map<int, int>& target_hist) {
  json rows = json::array();
  for (const auto& r : rep.rows)
    rows.push_back({{"id", r.query_id},
                    {"rp_passage", r.rp_passage},
                    {"rp_document", r.rp_document},
                    {"text", r.text},
                    {"kilt", r.kilt},
                    {"failure_class", r.failure_class}});
  json recalls = json::object();
  for (const auto& [k, v] : rep.recall_at) recalls[std::to_string(k)] = v;
  json sel = json::object(), tgt = json::object();
  for (const auto& [k, v] : sel_hist) sel[std::to_string(k)] = v;
  for (const auto& [k, v] : target_hist) tgt[std::to_string(k)] = v;
  json j = {{"text_metric", rep.text_metric},
            {"level", rep.level},
            {"mean_rp_passage", rep.mean_rp_passage},
            {"mean_rp_document", rep.mean_rp_document},
            {"mean_text", rep.mean_text},
            {"kilt_score", rep.kilt_score},
            {"recall_at", recalls},
            {"selection_histogram", sel},
            {"target_histogram", tgt},
            {"failures",
             {{"both_wrong", rep.failures.both_wrong},
              {"passage_only", rep.failures.passage_only},
              {"text_only", rep.failures.text_only},
              {"both_right", rep.failures.both_right}}},
            {"rows", rows}};
  if (rep.has_ci)
    j["ci"] = {{"mean", rep.ci.mean}, {"half_width", rep.ci.half_width}};
  return j;
}

inline std::string report_table(const EvalReport& rep) {
  char buf[160];
  std::string s;
  s += "metric        level      value\n";
  std::snprintf(buf, sizeof(buf), "%-13s %-9s %8.4f\n", "R-Prec(pas)", rep.level.c_str(),
                rep.mean_rp_passage);
  s += buf;
  std::snprintf(buf, sizeof(buf), "%-13s %-9s %8.4f\n", "R-Prec(doc)", rep.level.c_str(),
                rep.mean_rp_document);
  s += buf;
  std::snprintf(buf, sizeof(buf), "%-13s %-9s %8.4f\n", rep.text_metric.c_str(),
                rep.level.c_str(), rep.mean_text);
  s += buf;
  std::snprintf(buf, sizeof(buf), "%-13s %-9s %8.4f\n",
                ("KILT-" + rep.text_metric).c_str(), rep.level.c_str(), rep.kilt_score);
  s += buf;
  for (const auto& [k, v] : rep.recall_at) {
    std::snprintf(buf, sizeof(buf), "%-13s %-9s %8.4f\n",
                  ("Recall@" + std::to_string(k)).c_str(), "-", v);
    s += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "failures: both_wrong=%d passage_only=%d text_only=%d both_right=%d\n",
                rep.failures.both_wrong, rep.failures.passage_only,
                rep.failures.text_only, rep.failures.both_right);
  s += buf;
  if (rep.has_ci) {
    std::snprintf(buf, sizeof(buf), "kilt CI: %.4f +- %.4f (95%%, t over checkpoints)\n",
                  rep.ci.mean, rep.ci.half_width);
    s += buf;
  }
  return s;
}

inline InferenceOutcome cmd_evaluate(RunConfig cfg, bool quiet = false) {
  const auto corpus = load_corpus(default_path(cfg, cfg.corpus_path, "corpus.jsonl"));
  const auto dev = load_examples(default_path(cfg, cfg.dev_path, "dev.jsonl"), &corpus);
  const auto candidates =
      load_candidates(default_path(cfg, cfg.candidates_path, "candidates.jsonl"));
  auto model = load_checkpoint(default_path(cfg, cfg.checkpoint_path, "model.ckpt"));

  std::optional<CompressionConfig> comp;
  if (cfg.k > 0 && cfg.compress_eval) comp = CompressionConfig(cfg.k);
  const ProvenanceLevel level =
      cfg.level == "document" ? ProvenanceLevel::kDocument : ProvenanceLevel::kPassage;
  auto outcome = run_inference(model, corpus, dev, candidates, comp, cfg.beam,
                               cfg.mode == "sp", level);

  // Optional stability report over the last 10 periodic checkpoints.
  if (cfg.ci_last_checkpoints) {
    std::vector<std::pair<int64_t, std::string>> ckpts;
    for (const auto& entry : fs::directory_iterator(cfg.out_dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("ckpt_", 0) == 0 && entry.path().extension() == ".ckpt")
        ckpts.emplace_back(std::stoll(name.substr(5, name.size() - 10)),
                           entry.path().string());
    }
    std::sort(ckpts.begin(), ckpts.end());
    if (ckpts.size() > 10) ckpts.erase(ckpts.begin(), ckpts.end() - 10);
    std::vector<double> scores;
    for (const auto& [step, path] : ckpts) {
      auto m = load_checkpoint(path);
      auto oc = run_inference(m, corpus, dev, candidates, comp, cfg.beam,
                              cfg.mode == "sp", level);
      scores.push_back(oc.report.kilt_score);
    }
    if (scores.size() >= 2) {
      outcome.report.has_ci = true;
      outcome.report.ci = confidence_interval(scores);
    }
  }

  fs::create_directories(cfg.out_dir);
  save_run(outcome.run, default_path(cfg, cfg.run_path, "run.jsonl"));
  {
    std::ofstream out(default_path(cfg, cfg.report_path, "report.json"));
    out << report_json(outcome.report, outcome.selection_hist, outcome.target_hist)
               .dump(2)
        << "\n";
  }
  {
    std::ofstream out(fs::path(cfg.out_dir) / "report.txt");
    out << report_table(outcome.report);
  }
  write_resolved_config(cfg, "evaluate");
  if (!quiet) std::cout << report_table(outcome.report);
  return outcome;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOutcome {
  std::vector<PhaseTiming> timings;
  std::vector<ParetoPoint> pareto;
};

inline BenchOutcome cmd_bench(RunConfig cfg, bool quiet = false) {
  const auto corpus = load_corpus(default_path(cfg, cfg.corpus_path, "corpus.jsonl"));
  const auto dev = load_examples(default_path(cfg, cfg.dev_path, "dev.jsonl"), &corpus);
  const auto candidates =
      load_candidates(default_path(cfg, cfg.candidates_path, "candidates.jsonl"));

  // Timing grid needs only shapes, not trained weights.
  GeneratorModel<float> model =
      cfg.checkpoint_path.empty()
          ? GeneratorModel<float>::init(cfg.generator_config(), cfg.seed)
          : load_checkpoint(cfg.checkpoint_path);

  BenchProtocol proto;
  proto.reps = cfg.bench_reps;
  proto.beam_size = cfg.beam;
  proto.force_full_length = cfg.bench_force_full_length;

  BenchOutcome out;
  const int nq = std::min<int>(cfg.bench_queries, static_cast<int>(dev.size()));
  std::vector<int> ks = cfg.bench_ks;
  ks.push_back(0);  // uncompressed
  for (int k : ks) {
    std::optional<CompressionConfig> comp;
    if (k > 0) comp = CompressionConfig(k);
    PhaseTiming agg;
    agg.config = "n" + std::to_string(cfg.n) + (k > 0 ? "_k" + std::to_string(k)
                                                      : "_full");
    std::vector<double> enc, dec, tot;
    for (int qi = 0; qi < nq; ++qi) {
      const auto& ex = dev[static_cast<size_t>(qi)];
      auto cit = candidates.find(ex.id);
      if (cit == candidates.end()) throw data_error("no candidates for " + ex.id);
      std::vector<Passage> ps;
      for (const auto& e : cit->second.entries) {
        if (static_cast<int>(ps.size()) >= cfg.n) break;
        ps.push_back(corpus.by_id(e.passage_id));
      }
      auto t = time_query(model, ex.task + " " + ex.query, ps, comp, proto);
      enc.push_back(t.encoder_ms);
      dec.push_back(t.decoder_ms);
      tot.push_back(t.total_ms);
    }
    agg.encoder_ms = median(enc);
    agg.decoder_ms = median(dec);
    agg.total_ms = median(tot);
    agg.reps = proto.reps;
    out.timings.push_back(agg);
    if (!quiet)
      std::cout << agg.config << ": enc=" << agg.encoder_ms
                << "ms dec=" << agg.decoder_ms << "ms\n";
  }

  // Pareto sweep over trained configs, when given.
  for (const auto& spec : cfg.pareto) {
    auto m = load_checkpoint(spec.checkpoint);
    std::optional<CompressionConfig> comp;
    if (spec.k > 0) comp = CompressionConfig(spec.k);

    std::map<std::string, CandidateList> truncated;
    for (const auto& [id, clist] : candidates) {
      CandidateList c = clist;
      if (static_cast<int>(c.entries.size()) > spec.n)
        c.entries.resize(static_cast<size_t>(spec.n));
      truncated[id] = std::move(c);
    }
    auto outcome = run_inference(m, corpus, dev, truncated, comp, cfg.beam, true,
                                 ProvenanceLevel::kPassage);

    std::vector<double> lat;
    for (int qi = 0; qi < nq; ++qi) {
      const auto& ex = dev[static_cast<size_t>(qi)];
      std::vector<Passage> ps;
      for (const auto& e : truncated.at(ex.id).entries)
        ps.push_back(corpus.by_id(e.passage_id));
      auto t = time_query(m, ex.task + " " + ex.query, ps, comp, proto);
      lat.push_back(t.encoder_ms + t.decoder_ms);
    }
    ParetoPoint p;
    p.config = spec.name;
    p.latency_ms = median(lat);
    p.effectiveness = outcome.report.kilt_score;
    out.pareto.push_back(p);
    if (!quiet)
      std::cout << spec.name << ": latency=" << p.latency_ms
                << "ms kilt=" << p.effectiveness << "\n";
  }
  if (!out.pareto.empty()) mark_frontier(out.pareto);

  fs::create_directories(cfg.out_dir);
  std::vector<double> metrics(out.timings.size(), 0.0);
  write_bench_csv(out.timings, metrics, proto,
                  (fs::path(cfg.out_dir) / "bench.csv").string());
  if (!out.pareto.empty()) {
    std::ofstream table(fs::path(cfg.out_dir) / "pareto.txt");
    table << pareto_table(out.pareto);
    json plot = json::array();
    for (const auto& p : out.pareto)
      plot.push_back({{"config", p.config},
                      {"latency_ms", p.latency_ms},
                      {"effectiveness", p.effectiveness},
                      {"on_frontier", p.on_frontier}});
    std::ofstream pj(fs::path(cfg.out_dir) / "pareto.json");
    pj << plot.dump(2) << "\n";
  }
  write_resolved_config(cfg, "bench");
  return out;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline std::string cmd_report(const std::vector<std::string>& report_paths) {
  if (report_paths.empty()) throw data_error("report: no inputs");
  std::string level, metric;
  std::string s =
      "run                                   level     metric   R-Prec     text     KILT\n";
  char buf[200];
  for (const auto& path : report_paths) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw data_error("malformed report " + path);
    const std::string l = j.value("level", "");
    const std::string m = j.value("text_metric", "");
    if (level.empty()) {
      level = l;
      metric = m;
    } else if (l != level || m != metric) {
      throw data_error("report: incompatible metric levels (" + l + "/" + m +
                       " vs " + level + "/" + metric + ")");
    }
    const double rp = l == "document" ? j.value("mean_rp_document", 0.0)
                                      : j.value("mean_rp_passage", 0.0);
    std::snprintf(buf, sizeof(buf), "%-37s %-9s %-8s %8.4f %8.4f %8.4f\n",
                  path.c_str(), l.c_str(), m.c_str(), rp, j.value("mean_text", 0.0),
                  j.value("kilt_score", 0.0));
    s += buf;
  }
  return s;
}

}  // namespace ragkit

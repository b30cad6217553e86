// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,...] [--allow-fail 5,...]
//
// Exit status is 0 when every selected criterion passes or is listed in
// --allow-fail; the FAIL line is printed either way.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "ralm/analysis.hpp"
#include "ralm/bench.hpp"
#include "ralm/generation.hpp"
#include "ralm/retrieval.hpp"
#include "ralm/train.hpp"

namespace fs = std::filesystem;
using namespace ralm;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond && pass) detail << "first failure: " << what << "; ";
    pass = pass && cond;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tokens random_tokens(Rng& rng, std::size_t n, std::size_t vocab = 256) {
  Tokens t(n);
  for (auto& v : t) v = TokenId(rng.uniform_int(0, vocab - 1));
  return t;
}

Corpus random_corpus(std::size_t ndocs, Rng& rng, std::size_t alphabet, std::size_t max_len) {
  Corpus c;
  std::vector<Tokens> made;
  for (std::size_t i = 0; i < ndocs; ++i) {
    Tokens t;
    if (i % 5 == 4 && !made.empty()) {
      t = made[rng.uniform_int(0, made.size() - 1)];
    } else {
      t = random_tokens(rng, rng.uniform_int(1, max_len), alphabet);
    }
    made.push_back(t);
    c.add({"doc" + std::to_string(i), t, "synthetic"});
  }
  return c;
}

// 1. Cached logits under every pattern equal a fresh forward pass.
void cache_reuse(Verdict& v) {
  const auto t0 = Clock::now();
  Rng rng(1001);
  Corpus corpus = random_corpus(200, rng, 256, 48);
  const Bm25Index index = build_index(corpus);
  double worst = 0.0;
  std::size_t runs = 0, steps = 0;
  for (auto pattern : {ContextPattern::prepend, ContextPattern::append}) {
    for (std::size_t i = 0; i < 24; ++i) {
      ModelConfig cfg;
      cfg.layers = (i & 1) ? 4 : 2;
      cfg.hidden = (i & 2) ? 256 : 64;
      cfg.heads = (i & 4) ? 4 : 2;
      cfg.mlp_dim = 2 * cfg.hidden;
      cfg.max_seq = 512;
      if (i % 3 == 0) cfg.position = PositionScheme::learned_absolute;
      const bool big = cfg.hidden == 256 && cfg.layers == 4;
      const ModelParams params = init_params(cfg, 500 + i);
      GenerationOptions opt;
      opt.pattern = pattern;
      opt.retrieval.stride = rng.uniform_int(1, 16);
      opt.retrieval.query_len = rng.uniform_int(4, 32);
      opt.retrieval.evidence_budget = rng.uniform_int(0, 40);
      opt.use_marks = rng.uniform01() < 0.7;
      opt.fuse_boundary = rng.uniform01() < 0.7;
      opt.verify_oracle = true;
      if (i % 4 == 3) opt.sampling = {0.9, 77 + i};
      const Tokens prompt = random_tokens(rng, rng.uniform_int(1, big ? 48 : 160));
      const std::size_t max_new = rng.uniform_int(16, big ? 64 : 160);
      const auto res = generate(params, cfg, opt, retriever_source(index, opt.retrieval.evidence_budget),
                                prompt, max_new);
      for (const auto& s : res.steps) {
        worst = std::max(worst, s.oracle_max_abs);
        v.require(s.oracle_max_abs >= 0 && s.oracle_max_abs <= 1e-5,
                  std::string(pattern_name(pattern)) + " run " + std::to_string(i) + " step " + std::to_string(s.step));
        ++steps;
      }
      ++runs;
    }
  }
  const double elapsed = seconds_since(t0);
  v.require(elapsed < 120.0, "runtime over 2 min");
  v.detail << runs << " runs, " << steps << " steps, max |dlogit| " << worst << ", " << elapsed << " s";
}

FlopsParams random_divisible(Rng& rng) {
  FlopsParams p;
  p.b = std::int64_t(rng.uniform_int(1, 8));
  p.h = std::int64_t(rng.uniform_int(1, 128) * 32);
  p.l = std::int64_t(rng.uniform_int(1, 80));
  p.s = std::int64_t(rng.uniform_int(1, 64));
  p.T = p.s * std::int64_t(rng.uniform_int(1, 256));
  p.r = std::int64_t(rng.uniform_int(0, 64));
  p.d = std::int64_t(rng.uniform_int(0, 1024));
  p.count_marks = rng.uniform01() < 0.5;
  return p;
}

std::vector<FlopsParams> small_settings(std::uint64_t seed, std::size_t n, bool with_rank) {
  Rng rng(seed);
  std::vector<FlopsParams> out;
  for (std::size_t i = 0; i < n; ++i) {
    FlopsParams p;
    p.h = std::int64_t(32 * rng.uniform_int(1, 3));
    p.l = std::int64_t(rng.uniform_int(1, 3));
    p.s = std::int64_t(rng.uniform_int(2, 16));
    p.T = p.s * std::int64_t(rng.uniform_int(1, 6));
    p.r = with_rank ? std::int64_t(rng.uniform_int(1, 8)) : 0;
    p.d = std::int64_t(rng.uniform_int(0, 40));
    p.count_marks = rng.uniform01() < 0.5;
    out.push_back(p);
  }
  return out;
}

ModelConfig model_for(const FlopsParams& p) {
  ModelConfig cfg;
  cfg.layers = std::size_t(p.l);
  cfg.hidden = std::size_t(p.h);
  cfg.heads = 2;
  cfg.mlp_dim = 2 * std::size_t(p.h);
  cfg.lora_rank = std::size_t(p.r);
  cfg.max_seq = std::size_t(p.T + p.evidence()) + 1;
  return cfg;
}

std::string describe(const FlopsParams& p) {
  std::ostringstream os;
  os << "h=" << p.h << " l=" << p.l << " T=" << p.T << " s=" << p.s << " r=" << p.r << " d=" << p.d;
  return os.str();
}

// 2. Measured prepend recompute equals the summation; closed form equals it too.
void prepend_flops(Verdict& v) {
  std::size_t runs = 0;
  for (const auto& p : small_settings(2002, 12, false)) {
    const ModelConfig cfg = model_for(p);
    const ModelParams params = init_params(cfg, std::uint64_t(p.T));
    const auto m = run_reconciliation(params, cfg, p, ContextPattern::prepend, 3);
    const auto rep = reconcile(m, p, ContextPattern::prepend);
    v.require(rep.comparable && rep.all_match() && m.recompute.kv_projection == std::uint64_t(c0_sum(p)),
              "prepend " + describe(p));
    ++runs;
  }
  Rng rng(2003);
  std::size_t identities = 0;
  for (int i = 0; i < 2000; ++i) {
    const FlopsParams p = random_divisible(rng);
    const auto c = c0_closed(p);
    v.require(!c.summation_fallback && c.flops == c0_sum(p), "c0 closed " + describe(p));
    ++identities;
  }
  v.detail << runs << " instrumented runs exact, " << identities << " closed-form identities";
}

// 3. Measured append adapter FLOPs equal the adapter terms; c1 and the decrement identities.
void append_flops(Verdict& v) {
  std::size_t runs = 0;
  for (const auto& p : small_settings(3003, 12, true)) {
    const ModelConfig cfg = model_for(p);
    const ModelParams params = init_params(cfg, std::uint64_t(p.T) + 1);
    const auto m = run_reconciliation(params, cfg, p, ContextPattern::append, 4);
    const auto rep = reconcile(m, p, ContextPattern::append);
    v.require(rep.comparable && rep.all_match() && m.total.lora == std::uint64_t(c1_terms(p).lora()),
              "append " + describe(p));
    ++runs;
  }
  Rng rng(3004);
  std::size_t identities = 0;
  for (int i = 0; i < 2000; ++i) {
    const FlopsParams p = random_divisible(rng);
    v.require(c1_closed(p).flops == c1_sum(p), "c1 closed " + describe(p));
    v.require(c_decrement(p).flops == c0_closed(p).flops - c1_closed(p).flops, "decrement " + describe(p));
    ++identities;
  }
  v.detail << runs << " instrumented runs exact, " << identities << " settings with c1 and decrement identities";
}

// 4. Under append the prompt rows are never rewritten and recompute counts are exact.
void zero_recompute(Verdict& v) {
  Rng rng(4004);
  std::size_t runs = 0, boundaries = 0;
  for (int i = 0; i < 12; ++i) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 64;
    cfg.heads = 2;
    cfg.mlp_dim = 128;
    cfg.max_seq = 512;
    const ModelParams params = init_params(cfg, 40 + i);
    const Vocabulary vocab = vocabulary_of(cfg);
    const std::size_t t = rng.uniform_int(1, 64), s = rng.uniform_int(1, 16);
    const bool marks = i % 2 == 0;
    const Tokens doc = random_tokens(rng, rng.uniform_int(0, 30));
    const Tokens e = wrap_evidence(doc, marks, vocab);
    const std::size_t le = e.size();
    Tokens x = random_tokens(rng, t);
    GenerationSession session(params, cfg, ContextPattern::append, t, true);
    std::vector<Tensor2> prompt_keys, prompt_values;
    for (std::size_t step = 0; step < 80; ++step) {
      StepReport rep;
      const std::size_t n = x.size();
      const bool boundary = should_retrieve(n, t, s);
      const Tensor2 logits = session.step(x, boundary ? &e : nullptr, rep);
      if (step == 0) {
        v.require(rep.recomputed_tokens == t + le, "first step count");
        for (std::size_t l = 0; l < cfg.layers; ++l) {
          prompt_keys.push_back(session.cache().keys(l).slice_rows(0, t));
          prompt_values.push_back(session.cache().values(l).slice_rows(0, t));
        }
      } else if (boundary) {
        v.require(rep.recomputed_tokens == s + le, "boundary count at n=" + std::to_string(n));
        ++boundaries;
      } else {
        v.require(rep.recomputed_tokens == 1, "between-boundary count at n=" + std::to_string(n));
      }
      v.require(rep.prefix_recompute_flops.total() == 0, "prefix recompute flops");
      for (std::size_t l = 0; l < cfg.layers; ++l)
        v.require(session.cache().keys(l).slice_rows(0, t) == prompt_keys[l] &&
                      session.cache().values(l).slice_rows(0, t) == prompt_values[l],
                  "prompt rows changed");
      x.push_back(TokenId(rng.uniform_int(0, 255)));
      (void)logits;
    }
    ++runs;
  }
  v.detail << runs << " runs, " << boundaries << " later boundaries at s + l_e, prompt rows untouched";
}

bool non_decreasing(const std::vector<double>& r) {
  for (std::size_t i = 1; i < r.size(); ++i)
    if (r[i] < r[i - 1]) return false;
  return true;
}

// 5. Wall-clock trend with the medium model.
void runtime_trend(Verdict& v) {
  BenchScenario sc;
  sc.model = model_preset("medium");
  sc.model.max_seq = 3072;
  sc.patterns = {ContextPattern::prepend, ContextPattern::append};
  sc.prompt_min = sc.prompt_max = 512;
  sc.evidence_len = 128;
  sc.strides = {16};
  sc.target_lens = {1024, 2048, 3072};
  sc.reps = 5;
  sc.warmup = 1;
  sc.seed = 5005;
  const auto t0 = Clock::now();
  const auto res = run_bench(sc, [](const BenchRun& r) {
    std::cerr << "  bench " << pattern_name(r.pattern) << " len=" << r.target_len << " rep=" << r.rep
              << " wall_s=" << r.wall_s << std::endl;
  });
  const double elapsed = seconds_since(t0);
  v.require(res.errors.empty(), "bench errors");
  std::map<std::pair<std::size_t, int>, BenchSummaryRow> rows;
  for (const auto& r : summarize(res.runs)) rows[{r.target_len, int(r.pattern)}] = r;
  std::vector<double> mean_ratio, median_ratio;
  bool faster = true;
  for (std::size_t len : sc.target_lens) {
    const auto& p = rows[{len, int(ContextPattern::prepend)}];
    const auto& a = rows[{len, int(ContextPattern::append)}];
    faster = faster && p.reps >= 5 && a.reps >= 5 && a.mean_s < p.mean_s && a.median_s < p.median_s;
    mean_ratio.push_back(p.mean_s / a.mean_s);
    median_ratio.push_back(p.median_s / a.median_s);
    v.detail << "len " << len << " prepend " << p.mean_s << "s append " << a.mean_s << "s; ";
  }
  const bool trend = faster && non_decreasing(mean_ratio) && non_decreasing(median_ratio);
  v.require(faster, "append not faster at every length");
  v.require(non_decreasing(mean_ratio) && non_decreasing(median_ratio), "ratio not non-decreasing");
  v.require(elapsed < 15 * 60.0, "runtime over 15 min");
  v.detail << "ratios (mean)";
  for (double r : mean_ratio) v.detail << ' ' << r;
  v.detail << " (median)";
  for (double r : median_ratio) v.detail << ' ' << r;
  v.detail << "; trend " << (trend ? "holds" : "fails") << "; " << elapsed << " s";
}

struct Ranked {
  std::string id;
  double score;
};

std::vector<Ranked> brute_force(const Corpus& c, const Tokens& query, std::size_t k) {
  const double k1 = 0.9, b = 0.4;
  const auto& docs = c.documents();
  const double n = double(docs.size());
  double total = 0.0;
  for (const auto& d : docs) total += double(d.tokens.size());
  const double avgdl = total / n;
  std::set<TokenId> terms(query.begin(), query.end());
  std::vector<Ranked> out;
  for (const auto& d : docs) {
    double s = 0.0;
    for (TokenId t : terms) {
      const double tf = double(std::count(d.tokens.begin(), d.tokens.end(), t));
      if (tf == 0) continue;
      double df = 0;
      for (const auto& e : docs)
        if (std::find(e.tokens.begin(), e.tokens.end(), t) != e.tokens.end()) df += 1;
      const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
      s += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * double(d.tokens.size()) / avgdl));
    }
    out.push_back({d.id, s});
  }
  std::stable_sort(out.begin(), out.end(), [](const Ranked& x, const Ranked& y) {
    if (x.score != y.score) return x.score > y.score;
    return x.id < y.id;
  });
  out.resize(std::min(k, out.size()));
  return out;
}

// 6. BM25 rankings equal a brute-force scorer, ties included.
void bm25(Verdict& v) {
  std::size_t queries = 0;
  const std::size_t sizes[] = {1000, 400, 150};
  for (int c = 0; c < 3; ++c) {
    Rng rng(6006 + c);
    const Corpus corpus = random_corpus(sizes[c], rng, 30 + 20 * c, 50);
    const Bm25Index idx = build_index(corpus);
    for (int q = 0; q < 50; ++q) {
      const Tokens query = random_tokens(rng, rng.uniform_int(1, 16), 40 + 20 * c);
      const std::size_t k = rng.uniform_int(1, 20);
      const auto got = idx.retrieve(query, k);
      const auto want = brute_force(corpus, query, k);
      bool same = got.size() == want.size();
      for (std::size_t i = 0; same && i < got.size(); ++i)
        same = got[i].id == want[i].id && got[i].score == want[i].score;
      v.require(same, "corpus " + std::to_string(c) + " query " + std::to_string(q));
      ++queries;
    }
  }
  v.detail << "3 corpora, " << queries << " queries, exact ids and scores";
}

// 7. Fine-tuning: freeze, gradient check, loss decrease.
void finetune(Verdict& v) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 32;
  cfg.heads = 2;
  cfg.mlp_dim = 64;
  cfg.max_seq = 128;
  const Vocabulary vocab = vocabulary_of(cfg);
  const ModelParams base = init_params(cfg, 7007);
  ModelParams params = attach_lora(base, cfg, 4, 7008);
  cfg.lora_rank = 4;

  // Synthetic corpus: a few repeated phrases so the next block is predictable.
  Rng rng(7009);
  std::vector<Tokens> phrases;
  for (int i = 0; i < 6; ++i) phrases.push_back(random_tokens(rng, 12, 64));
  Tokens stream;
  for (int i = 0; i < 60; ++i) {
    const auto& ph = phrases[rng.uniform_int(0, phrases.size() - 1)];
    stream.insert(stream.end(), ph.begin(), ph.end());
  }
  Corpus docs;
  for (std::size_t i = 0; i < phrases.size(); ++i) docs.add({"p" + std::to_string(i), phrases[i], ""});
  const Bm25Index index = build_index(docs);
  DatasetConfig dc;
  dc.stride = 8;
  dc.max_seq = 64;
  dc.query_len = 8;
  const TrainExamples examples = build_training_set(stream, dc, retriever_source(index, 16), vocab, 7010);

  const ModelParams before = params;
  const double loss0 = loss_and_gradients<float>(params, cfg, examples, nullptr);
  TrainConfig tc;
  tc.steps = 100;
  tc.batch_size = 4;
  tc.learning_rate = 5e-3;
  tc.stride = dc.stride;
  tc.max_seq = dc.max_seq;
  tc.lora_rank = 4;
  const auto log = train(params, cfg, examples, tc, 7011);
  const double loss100 = loss_and_gradients<float>(params, cfg, examples, nullptr);
  v.require(log.size() == 100, "100 steps logged");
  v.require(loss100 < loss0, "loss did not decrease");

  std::map<std::string, const Tensor2*> old;
  before.for_each([&](const std::string& n, const Tensor2& t) { old[n] = &t; });
  const auto mask = trainable_mask(params);
  bool frozen = true;
  params.for_each([&](const std::string& n, const Tensor2& t) {
    if (n == "embeddings") {
      for (std::size_t r = 0; r < t.rows(); ++r)
        if (!vocab.is_mark(TokenId(r)) && !std::equal(t.row(r).begin(), t.row(r).end(), old[n]->row(r).begin()))
          frozen = false;
    } else if (!mask.count(n) && !(t == *old[n])) {
      frozen = false;
    }
  });
  v.require(frozen, "a frozen tensor changed");

  // Gradient check in double on the trained adapters, which are nonzero.
  TrainExamples batch(examples.begin(), examples.begin() + std::ptrdiff_t(std::min<std::size_t>(3, examples.size())));
  const GradCheckResult g = gradient_check(params.cast<double>(), cfg, batch);
  v.require(g.pass_fraction() >= 0.99, "finite differences");
  v.detail << examples.size() << " examples, loss " << loss0 << " -> " << loss100 << ", frozen weights identical, "
           << g.passed << "/" << g.coordinates << " gradient coordinates within 1e-3";
}

// 8. Perplexity with cache reuse equals the no-cache oracle; marks are not counted.
void perplexity(Verdict& v) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 64;
  cfg.heads = 2;
  cfg.mlp_dim = 128;
  cfg.max_seq = 512;
  const ModelParams params = init_params(cfg, 8008);
  Rng rng(8009);
  std::vector<Tokens> chunks;
  for (int i = 0; i < 5; ++i) chunks.push_back(random_tokens(rng, rng.uniform_int(64, 160)));
  const Corpus corpus = random_corpus(50, rng, 256, 24);
  const Bm25Index index = build_index(corpus);
  const EvidenceSource src = retriever_source(index, 24);
  const std::size_t s = 16;
  std::size_t blocks = 0;
  for (const auto& c : chunks) blocks += c.size() / s - 1;
  for (auto pattern : {ContextPattern::none, ContextPattern::prepend, ContextPattern::append}) {
    PerplexityConfig pc;
    pc.stride = s;
    pc.query_len = 16;
    pc.pattern = pattern;
    const auto cached = perplexity_continuous(params, cfg, src, chunks, pc);
    pc.use_cache = false;
    const auto fresh = perplexity_continuous(params, cfg, src, chunks, pc);
    v.require(cached.count == fresh.count, "counts differ");
    v.require(std::abs(cached.perplexity() / fresh.perplexity() - 1.0) <= 1e-4,
              std::string("cache vs oracle, ") + pattern_name(pattern));
    v.require(cached.count == blocks * s, "marks counted");
    pc.use_cache = true;
    pc.include_marks = true;
    const auto with_marks = perplexity_continuous(params, cfg, src, chunks, pc);
    const std::size_t extra = pattern == ContextPattern::append ? 2 : pattern == ContextPattern::prepend ? 1 : 0;
    v.require(with_marks.count == blocks * (s + extra), "mark count difference");
    v.detail << pattern_name(pattern) << " " << cached.perplexity() << "/" << fresh.perplexity() << "; ";
  }
  ModelParams flat = params;
  flat.lm_head.fill(0.0f);
  PerplexityConfig pc;
  pc.stride = s;
  pc.pattern = ContextPattern::append;
  const double uniform = perplexity_continuous(flat, cfg, src, chunks, pc).perplexity();
  v.require(std::abs(uniform - double(cfg.vocab_size())) <= 1e-3, "uniform perplexity");
  v.detail << "uniform " << uniform << " (vocab " << cfg.vocab_size() << ")";
}

// 9. Ensemble: identical docs match one doc, k = 1 is plain append.
void ensemble(Verdict& v) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 64;
  cfg.heads = 2;
  cfg.mlp_dim = 128;
  cfg.max_seq = 512;
  Rng rng(9009);
  const Corpus corpus = random_corpus(60, rng, 256, 30);
  const Bm25Index index = build_index(corpus);
  double worst = 0.0;
  for (int i = 0; i < 6; ++i) {
    const ModelParams params = init_params(cfg, 9010 + i);
    const Tokens prompt = random_tokens(rng, rng.uniform_int(4, 40));
    const Tokens doc = random_tokens(rng, rng.uniform_int(0, 30));
    GenerationOptions opt;
    opt.pattern = ContextPattern::append;
    opt.retrieval.stride = rng.uniform_int(2, 10);
    opt.keep_distributions = true;
    if (i % 2) opt.sampling = {0.8, std::uint64_t(i)};
    const auto single = generate(params, cfg, opt, fixed_source(doc), prompt, 30);
    for (std::size_t k : {2u, 3u, 5u}) {
      const auto ens = generate_ensemble(params, cfg, opt, fixed_source(doc), prompt, 30, k);
      v.require(ens.tokens == single.tokens, "identical-doc tokens");
      for (std::size_t j = 0; j < single.distributions.size(); ++j) {
        const double d = max_abs_diff<float>(single.distributions[j], ens.distributions[j]);
        worst = std::max(worst, d);
        v.require(d <= 1e-6, "identical-doc distribution");
      }
    }
    const EvidenceSource src = retriever_source(index, 32);
    const auto plain = generate(params, cfg, opt, src, prompt, 30);
    const auto one = generate_ensemble(params, cfg, opt, src, prompt, 30, 1);
    v.require(plain.tokens == one.tokens, "k=1 tokens");
  }
  v.detail << "6 settings, k in {2,3,5}, max distribution deviation " << worst << ", k=1 tokens identical";
}

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + RALM_CLI_PATH + "' " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) o.output.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Drops the wall_s column of a runs CSV; timing is the one nondeterministic field.
std::string without_timing(const std::string& csv) {
  std::istringstream in(csv);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') {
      out << line << "\n";
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    for (std::size_t i = 0; i < cols.size(); ++i)
      if (i != 3) out << cols[i] << (i + 1 < cols.size() ? "," : "");
    out << "\n";
  }
  return out.str();
}

// 10. Each subcommand twice with the same seeds; data files must match byte for byte.
void determinism(Verdict& v) {
  const fs::path root = fs::temp_directory_path() / ("ralm_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root / "docs");
  Rng rng(10010);
  const char* words[] = {"river", "stone", "apple", "quartz", "meadow", "lantern", "copper", "harbor"};
  for (int d = 0; d < 6; ++d) {
    std::ofstream out(root / "docs" / ("doc" + std::to_string(d) + ".txt"));
    for (int w = 0; w < 80; ++w) out << words[rng.uniform_int(0, 7)] << (w % 12 == 11 ? "\n" : " ");
  }
  std::ofstream(root / "scenario.txt") << "preset = tiny\nprompt_min = 20\nprompt_max = 30\nevidence_len = 8\n"
                                          "stride = 8\ntarget_lens = 48, 64\nreps = 3\nseed = 4\n";
  auto q = [&](const std::string& rel) { return "'" + (root / rel).string() + "'"; };
  struct Cmd {
    std::string name, args;
  };
  const std::vector<Cmd> cmds = {
      {"index", "index --corpus-dir " + q("docs")},
      {"generate", "generate --index " + q("IDX") + " --prompt 'the river and the stone' --temperature 0.7 "
                   "--sample-seed 3 --max-new 40 --stride 8 --evidence-budget 32"},
      {"finetune", "finetune --train-dir " + q("docs") + " --index " + q("IDX") +
                       " --steps 8 --rank 2 --train-seq 48 --stride 8 --batch 2 --evidence-budget 16 --data-seed 2"},
      {"eval", "eval --text-dir " + q("docs") + " --index " + q("IDX") + " --chunk-len 128 --stride 16"},
      {"reconcile", "reconcile --hidden 64 --layers 2 --seq 64 --stride 16 --evidence 24 --rank 4"},
      {"bench", "bench --scenario " + q("scenario.txt")},
  };
  std::size_t files = 0;
  for (const auto& c : cmds) {
    std::map<std::string, std::string> outputs[2];
    for (int r = 0; r < 2; ++r) {
      const fs::path dir = root / (c.name + std::to_string(r));
      fs::create_directories(dir);
      std::string args = c.args;
      const auto pos = args.find((root / "IDX").string());
      if (pos != std::string::npos) args.replace(pos, (root / "IDX").string().size(), (root / "index0/bm25.idx").string());
      const auto o = run_cli("--out-dir '" + dir.string() + "' " + args);
      v.require(o.code == 0, c.name + " exit " + std::to_string(o.code) + ": " + o.output.substr(0, 200));
      for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string file = entry.path().filename().string();
        if (file == "bench_meta.json") continue;  // sidecar with the timestamp
        if (file.rfind("bench_summary", 0) == 0 || (file.rfind("bench", 0) == 0 && entry.path().extension() == ".svg"))
          continue;  // derived purely from wall-clock times
        std::string data = slurp(entry.path());
        if (file.rfind("bench_runs", 0) == 0) data = without_timing(data);
        outputs[r][file] = data;
      }
    }
    v.require(!outputs[0].empty(), c.name + " wrote nothing");
    v.require(outputs[0] == outputs[1], c.name + " outputs differ");
    files += outputs[0].size();
  }
  fs::remove_all(root);
  v.detail << cmds.size() << " subcommands, " << files << " data files identical across runs";
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, allowed;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) only = parse_list(argv[++i]);
    else if (a == "--allow-fail" && i + 1 < argc) allowed = parse_list(argv[++i]);
    else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--allow-fail 5,...]\n";
      return 1;
    }
  }
  const std::vector<std::pair<const char*, std::function<void(Verdict&)>>> criteria = {
      {"cache reuse matches full recompute", cache_reuse},
      {"prepend FLOPs reconcile", prepend_flops},
      {"append adapter FLOPs reconcile", append_flops},
      {"append never recomputes the prompt", zero_recompute},
      {"runtime trend", runtime_trend},
      {"BM25 matches brute force", bm25},
      {"fine-tuning contract", finetune},
      {"perplexity plumbing", perplexity},
      {"ensemble", ensemble},
      {"CLI determinism", determinism},
  };
  bool ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): "
              << v.detail.str() << " [" << std::fixed << std::setprecision(1) << seconds_since(t0) << " s]"
              << std::defaultfloat << std::setprecision(6) << std::endl;
    if (!v.pass && !allowed.count(id)) ok = false;
  }
  return ok ? 0 : 1;
}

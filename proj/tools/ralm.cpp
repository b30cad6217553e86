#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ralm/analysis.hpp"
#include "ralm/bench.hpp"
#include "ralm/checkpoint.hpp"
#include "ralm/error.hpp"
#include "ralm/generation.hpp"
#include "ralm/model.hpp"
#include "ralm/retrieval.hpp"
#include "ralm/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ralm;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kInvariant = 3 };

std::string out_dir_flag;

fs::path out_dir() {
  fs::path dir = ".";
  if (const char* env = std::getenv("RALM_OUT_DIR"); env && *env) dir = env;
  if (!out_dir_flag.empty()) dir = out_dir_flag;
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) {
  write_text(path, j.dump(2, ' ', false, json::error_handler_t::replace) + "\n");
}

// Model source shared by the model-consuming subcommands.
struct ModelOptions {
  std::string checkpoint;
  std::string preset = "tiny";
  std::uint64_t seed = 0;
  std::size_t max_seq = 0;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Load weights from a checkpoint file");
    app->add_option("--preset", preset, "Random-init model preset (tiny, small, medium)")->capture_default_str();
    app->add_option("--model-seed", seed, "Seed for random initialization")->capture_default_str();
    app->add_option("--max-seq", max_seq, "Override the maximum sequence length");
  }

  std::pair<ModelConfig, ModelParams> load() const {
    if (!checkpoint.empty()) {
      auto ck = load_checkpoint(checkpoint);
      if (max_seq && max_seq != ck.config.max_seq) {
        if (!ck.params.positions.empty())
          throw std::invalid_argument("--max-seq cannot change a learned-position checkpoint");
        ck.config.max_seq = max_seq;
      }
      return {ck.config, std::move(ck.params)};
    }
    ModelConfig cfg = model_preset(preset);
    if (max_seq) cfg.max_seq = max_seq;
    return {cfg, init_params(cfg, seed)};
  }
};

struct CorpusOptions {
  std::string text_dir;
  std::string jsonl;
  std::string exclude_file;

  void add(CLI::App* app, const std::string& prefix) {
    auto* a = app->add_option("--" + prefix + "-dir", text_dir, "Directory of text files, one document each");
    auto* b = app->add_option("--" + prefix + "-jsonl", jsonl, "JSON-lines file with id and text fields");
    a->excludes(b);
    app->add_option("--exclude", exclude_file, "File listing document ids to skip, one per line");
  }

  bool given() const { return !text_dir.empty() || !jsonl.empty(); }

  Corpus load() const {
    std::set<std::string> exclude;
    if (!exclude_file.empty()) {
      std::ifstream in(exclude_file);
      if (!in) throw DataError("cannot open exclusion list '" + exclude_file + "'");
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) exclude.insert(line);
    }
    if (!text_dir.empty()) return ingest_text_dir(text_dir, exclude);
    if (!jsonl.empty()) return ingest_jsonl(jsonl, exclude);
    throw std::invalid_argument("no corpus given");
  }
};

std::optional<Bm25Index> load_index(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return Bm25Index::load(path);
}

EvidenceSource source_for(const std::optional<Bm25Index>& index, std::size_t budget) {
  if (!index) return {};
  return retriever_source(*index, budget);
}

json step_json(const StepReport& s) {
  json j;
  j["step"] = s.step;
  j["seq_len"] = s.seq_len;
  j["retrieved"] = s.retrieved;
  j["recomputed_tokens"] = s.recomputed_tokens;
  j["evidence_len"] = s.evidence_len;
  j["evidence_doc"] = s.evidence_doc;
  j["flops"] = to_json(s.flops);
  if (s.oracle_max_abs >= 0) j["oracle_max_abs"] = s.oracle_max_abs;
  return j;
}

int cmd_index(const CorpusOptions& corpus, const std::string& name, double k1, double b) {
  const Corpus c = corpus.load();
  if (c.empty()) throw DataError("corpus has no documents");
  Bm25Params params;
  params.k1 = k1;
  params.b = b;
  const Bm25Index idx = build_index(c, params);
  const fs::path path = out_dir() / name;
  idx.save(path.string());
  std::cout << "indexed " << idx.size() << " documents (avgdl " << idx.avgdl() << ") -> " << path.string() << "\n";
  return kOk;
}

struct GenerateArgs {
  std::string index;
  std::string prompt;
  std::string prompt_file;
  std::string pattern = "append";
  std::size_t max_new = 64;
  std::size_t stride = 16;
  std::size_t query_len = 16;
  std::size_t evidence_budget = 128;
  bool no_marks = false;
  double temperature = 0.0;
  std::uint64_t sample_seed = 0;
  bool verify_oracle = false;
  std::size_t ensemble = 0;
  std::string output = "generation.json";
};

int cmd_generate(const ModelOptions& mo, const GenerateArgs& a) {
  auto [cfg, params] = mo.load();
  std::string prompt_text = a.prompt;
  if (!a.prompt_file.empty()) {
    std::ifstream in(a.prompt_file, std::ios::binary);
    if (!in) throw DataError("cannot open prompt file '" + a.prompt_file + "'");
    prompt_text.assign(std::istreambuf_iterator<char>(in), {});
  }
  const Tokens prompt = tokenize_bytes(prompt_text);
  const auto index = load_index(a.index);
  GenerationOptions opt;
  opt.pattern = parse_pattern(a.pattern);
  opt.retrieval.stride = a.stride;
  opt.retrieval.query_len = a.query_len;
  opt.retrieval.evidence_budget = a.evidence_budget;
  opt.retrieval.validate();
  opt.use_marks = !a.no_marks;
  opt.sampling.temperature = a.temperature;
  opt.sampling.seed = a.sample_seed;
  opt.verify_oracle = a.verify_oracle;
  const EvidenceSource src = source_for(index, a.evidence_budget);
  const GenerationResult res = a.ensemble > 0
                                   ? generate_ensemble(params, cfg, opt, src, prompt, a.max_new, a.ensemble)
                                   : generate(params, cfg, opt, src, prompt, a.max_new);
  json j;
  j["pattern"] = a.ensemble > 0 ? "ensemble" : pattern_name(opt.pattern);
  j["prompt_tokens"] = prompt;
  j["tokens"] = res.tokens;
  std::string text;
  for (TokenId t : res.tokens)
    if (t < 256) text += char(t);
  j["text"] = text;
  json steps = json::array();
  double worst = 0.0;
  std::size_t recomputed = 0;
  for (const auto& s : res.steps) {
    steps.push_back(step_json(s));
    worst = std::max(worst, s.oracle_max_abs);
    recomputed += s.recomputed_tokens;
    if (s.retrieved || a.verify_oracle) {
      std::cout << "step " << s.step << " seq_len " << s.seq_len << " recomputed " << s.recomputed_tokens;
      if (s.retrieved) std::cout << " evidence " << (s.evidence_doc.empty() ? "-" : s.evidence_doc);
      if (a.verify_oracle) std::cout << " oracle_max_abs " << std::scientific << s.oracle_max_abs << std::defaultfloat;
      std::cout << "\n";
    }
  }
  j["steps"] = steps;
  j["recomputed_tokens"] = recomputed;
  write_json(out_dir() / a.output, j);
  std::cout << "generated " << res.tokens.size() << " tokens, recomputed " << recomputed << "\n";
  if (a.verify_oracle) {
    std::cout << "max oracle deviation " << std::scientific << worst << std::defaultfloat << "\n";
    if (worst > 1e-5) {
      std::cerr << "error: cached logits deviate from full recompute by " << worst << "\n";
      return kInvariant;
    }
  }
  return kOk;
}

Tokens corpus_stream(const Corpus& c) {
  Tokens out;
  for (const auto& d : c.documents()) {
    if (!out.empty()) out.push_back(Vocabulary::kBeginOfText);
    out.insert(out.end(), d.tokens.begin(), d.tokens.end());
  }
  return out;
}

struct FinetuneArgs {
  std::string index;
  std::string dataset;
  std::string pattern = "append";
  bool no_marks = false;
  std::size_t rank = 16;
  std::size_t steps = 100;
  double lr = 1e-3;
  double warmup = 0.10;
  std::size_t batch = 4;
  std::size_t stride = 16;
  std::size_t train_seq = 128;
  std::size_t query_len = 16;
  std::size_t evidence_budget = 32;
  std::uint64_t data_seed = 0;
};

int cmd_finetune(const ModelOptions& mo, const CorpusOptions& corpus, const FinetuneArgs& a) {
  auto [cfg, base] = mo.load();
  const Vocabulary vocab = vocabulary_of(cfg);
  const auto index = load_index(a.index);
  DatasetConfig dc;
  dc.stride = a.stride;
  dc.max_seq = a.train_seq;
  dc.query_len = a.query_len;
  dc.pattern = parse_pattern(a.pattern);
  dc.use_marks = !a.no_marks;
  TrainExamples examples;
  const fs::path dir = out_dir();
  if (!a.dataset.empty()) {
    examples = load_examples_jsonl(a.dataset);
  } else {
    if (!corpus.given()) throw std::invalid_argument("finetune: give --train-dir/--train-jsonl or --dataset");
    const Tokens stream = corpus_stream(corpus.load());
    examples = build_training_set(stream, dc, source_for(index, a.evidence_budget), vocab, a.data_seed);
    save_examples_jsonl((dir / "train_dataset.jsonl").string(), examples);
  }
  ModelParams params = attach_lora(base, cfg, a.rank, mo.seed + 1);
  const ModelParams before = params;
  TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.steps = a.steps;
  tc.warmup_fraction = a.warmup;
  tc.batch_size = a.batch;
  tc.stride = a.stride;
  tc.max_seq = a.train_seq;
  tc.lora_rank = a.rank;
  std::ostringstream csv;
  csv << "step,lr,loss\n" << std::setprecision(9);
  const auto log = train(params, cfg, examples, tc, a.data_seed, [&](const TrainLogEntry& e) {
    csv << e.step << ',' << e.lr << ',' << e.loss << "\n";
    if (e.step % 10 == 0 || e.step + 1 == tc.steps)
      std::cout << "step " << e.step << " lr " << e.lr << " loss " << e.loss << "\n";
  });
  // Freeze check: only trainable tensors may differ.
  const auto mask = trainable_mask(params);
  std::map<std::string, const Tensor2*> old;
  before.for_each([&](const std::string& n, const Tensor2& t) { old[n] = &t; });
  bool frozen_ok = true;
  params.for_each([&](const std::string& n, const Tensor2& t) {
    if (n == "embeddings") {
      for (std::size_t r = 0; r < t.rows(); ++r)
        if (!vocab.is_mark(TokenId(r)) && !std::equal(t.row(r).begin(), t.row(r).end(), old[n]->row(r).begin()))
          frozen_ok = false;
    } else if (!mask.count(n) && !(t == *old[n])) {
      frozen_ok = false;
    }
  });
  if (!frozen_ok) throw InvariantError("finetune: a frozen parameter changed");
  write_text(dir / "train_metrics.csv", csv.str());
  save_checkpoint((dir / "finetuned.ckpt").string(), params, cfg, mo.seed);
  json s;
  s["examples"] = examples.size();
  s["steps"] = log.size();
  s["initial_loss"] = log.front().loss;
  s["final_loss"] = log.back().loss;
  s["lora_rank"] = a.rank;
  s["pattern"] = a.pattern;
  s["frozen_weights_unchanged"] = frozen_ok;
  write_json(dir / "train_summary.json", s);
  std::cout << "trained " << log.size() << " steps on " << examples.size() << " examples, loss " << log.front().loss
            << " -> " << log.back().loss << "\n";
  return kOk;
}

struct EvalArgs {
  std::string index;
  std::string pattern = "append";
  std::size_t chunk_len = 256;
  std::size_t stride = 16;
  std::size_t query_len = 16;
  std::size_t evidence_budget = 128;
  bool no_marks = false;
  bool include_marks = false;
  bool no_cache = false;
};

int cmd_eval(const ModelOptions& mo, const CorpusOptions& corpus, const EvalArgs& a) {
  auto [cfg, params] = mo.load();
  const auto index = load_index(a.index);
  if (a.chunk_len == 0) throw std::invalid_argument("--chunk-len must be >= 1");
  const Corpus texts = corpus.load();
  std::vector<Tokens> chunks;
  for (const auto& d : texts.documents())
    for (std::size_t i = 0; i + a.chunk_len <= d.tokens.size() || (i == 0 && !d.tokens.empty()); i += a.chunk_len) {
      const std::size_t n = std::min(a.chunk_len, d.tokens.size() - i);
      if (n >= 2 * a.stride) chunks.emplace_back(d.tokens.begin() + std::ptrdiff_t(i), d.tokens.begin() + std::ptrdiff_t(i + n));
      if (i + a.chunk_len > d.tokens.size()) break;
    }
  if (chunks.empty()) throw DataError("eval: no chunk holds two strides of text");
  PerplexityConfig pc;
  pc.stride = a.stride;
  pc.query_len = a.query_len;
  pc.pattern = parse_pattern(a.pattern);
  pc.use_marks = !a.no_marks;
  pc.include_marks = a.include_marks;
  pc.use_cache = !a.no_cache;
  const auto r = perplexity_continuous(params, cfg, source_for(index, a.evidence_budget), chunks, pc);
  json j;
  j["pattern"] = a.pattern;
  j["chunks"] = chunks.size();
  j["tokens"] = r.count;
  j["nll_sum"] = r.nll_sum;
  j["perplexity"] = r.perplexity();
  j["include_marks"] = a.include_marks;
  write_json(out_dir() / "eval.json", j);
  std::cout << "perplexity " << std::setprecision(6) << r.perplexity() << " over " << r.count << " tokens in "
            << chunks.size() << " chunks\n";
  return kOk;
}

struct ReconcileArgs {
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t T = 64;
  std::size_t s = 16;
  std::size_t d = 32;
  std::size_t r = 4;
  std::string pattern = "all";
  bool count_marks = false;
  std::uint64_t seed = 0;
};

int cmd_reconcile(const ReconcileArgs& a) {
  FlopsParams p;
  p.h = std::int64_t(a.hidden);
  p.l = std::int64_t(a.layers);
  p.T = std::int64_t(a.T);
  p.s = std::int64_t(a.s);
  p.d = std::int64_t(a.d);
  p.r = std::int64_t(a.r);
  p.count_marks = a.count_marks;
  p.validate();
  ModelConfig cfg;
  cfg.layers = a.layers;
  cfg.hidden = a.hidden;
  cfg.heads = a.heads;
  cfg.mlp_dim = 4 * a.hidden;
  cfg.lora_rank = a.r;
  cfg.max_seq = std::size_t(p.T + p.evidence()) + 1;
  cfg.validate();
  ModelParams params = init_params(cfg, a.seed);
  std::vector<ContextPattern> patterns;
  if (a.pattern == "all") patterns = {ContextPattern::none, ContextPattern::prepend, ContextPattern::append};
  else patterns = {parse_pattern(a.pattern)};
  json reports = json::array();
  bool ok = true;
  for (auto pat : patterns) {
    const auto measured = run_reconciliation(params, cfg, p, pat, a.seed);
    const auto rep = reconcile(measured, p, pat);
    std::cout << to_text(rep);
    reports.push_back(to_json(rep));
    ok = ok && rep.all_match();
  }
  write_json(out_dir() / "reconcile.json", reports);
  if (!ok) {
    std::cerr << "error: measured FLOPs do not match the analytic model\n";
    return kInvariant;
  }
  return kOk;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

int cmd_bench(const std::string& scenario_path, const std::vector<std::string>& overrides,
              const std::string& plot_from) {
  const fs::path dir = out_dir();
  if (!plot_from.empty()) {
    std::ifstream in(plot_from);
    if (!in) throw DataError("cannot open bench CSV '" + plot_from + "'");
    const auto runs = read_runs_csv(in);
    const fs::path svg = dir / (fs::path(plot_from).stem().string() + ".svg");
    write_text(svg, render_svg(runs));
    std::cout << "wrote " << svg.string() << "\n";
    return kOk;
  }
  BenchScenario sc = scenario_path.empty() ? BenchScenario{} : load_scenario(scenario_path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    apply_setting(sc, bench_detail::trim(kv.substr(0, eq)), bench_detail::trim(kv.substr(eq + 1)));
  }
  const std::size_t longest = *std::max_element(sc.target_lens.begin(), sc.target_lens.end());
  sc.model.max_seq = std::max(sc.model.max_seq, longest);
  const auto t0 = std::chrono::steady_clock::now();
  const BenchResult res = run_bench(sc, [](const BenchRun& r) {
    std::cout << pattern_name(r.pattern) << " s=" << r.stride << " len=" << r.target_len << " rep=" << r.rep
              << " wall_s=" << r.wall_s << " recomputed=" << r.recomputed_tokens << std::endl;
  });
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (std::size_t stride : sc.strides) {
    const std::string suffix = sc.strides.size() > 1 ? "_s" + std::to_string(stride) : "";
    std::vector<BenchRun> runs;
    for (const auto& r : res.runs)
      if (r.stride == stride) runs.push_back(r);
    std::ostringstream rc, sm;
    write_runs_csv(rc, runs);
    write_summary_csv(sm, summarize(runs));
    write_text(dir / ("bench_runs" + suffix + ".csv"), rc.str());
    write_text(dir / ("bench_summary" + suffix + ".csv"), sm.str());
    write_text(dir / ("bench" + suffix + ".svg"), render_svg(runs));
  }
  std::ostringstream ec;
  write_errors_csv(ec, res.errors);
  write_text(dir / "bench_errors.csv", ec.str());
  json meta;
  meta["started_utc"] = utc_timestamp();
  meta["elapsed_s"] = elapsed;
  meta["runs"] = res.runs.size();
  meta["errors"] = res.errors.size();
  write_json(dir / "bench_meta.json", meta);
  for (const auto& e : res.errors)
    std::cout << "error: " << pattern_name(e.pattern) << " len=" << e.target_len << ": " << e.message << "\n";
  std::cout << res.runs.size() << " timed runs, " << res.errors.size() << " errors\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented generation engine with prepend and append evidence placement"};
  app.require_subcommand(1);
  app.add_option("--out-dir", out_dir_flag, "Directory for output files (default: $RALM_OUT_DIR or .)");

  ModelOptions model;
  CorpusOptions corpus;

  auto* index = app.add_subcommand("index", "Build a BM25 index over a corpus");
  std::string index_name = "bm25.idx";
  double k1 = 0.9, b = 0.4;
  corpus.add(index, "corpus");
  index->add_option("--name", index_name, "Index file name")->capture_default_str();
  index->add_option("--k1", k1)->capture_default_str();
  index->add_option("--b", b)->capture_default_str();

  auto* gen = app.add_subcommand("generate", "Generate with retrieval under a context pattern");
  GenerateArgs ga;
  model.add(gen);
  gen->add_option("--index", ga.index, "BM25 index file");
  auto* prompt_opt = gen->add_option("--prompt", ga.prompt, "Prompt text");
  gen->add_option("--prompt-file", ga.prompt_file, "Read the prompt from a file")->excludes(prompt_opt);
  gen->add_option("--pattern", ga.pattern, "none, prepend or append")->capture_default_str();
  gen->add_option("--max-new", ga.max_new)->capture_default_str();
  gen->add_option("--stride", ga.stride)->capture_default_str();
  gen->add_option("--query-len", ga.query_len)->capture_default_str();
  gen->add_option("--evidence-budget", ga.evidence_budget)->capture_default_str();
  gen->add_flag("--no-marks", ga.no_marks, "Do not wrap evidence in marking tokens");
  gen->add_option("--temperature", ga.temperature, "0 selects greedy decoding")->capture_default_str();
  gen->add_option("--sample-seed", ga.sample_seed)->capture_default_str();
  gen->add_flag("--verify-oracle", ga.verify_oracle, "Compare every step against a full recompute");
  gen->add_option("--ensemble", ga.ensemble, "Average over this many appended documents");
  gen->add_option("--output", ga.output)->capture_default_str();

  auto* ft = app.add_subcommand("finetune", "Train marking-token embeddings and adapters");
  FinetuneArgs fa;
  model.add(ft);
  corpus.add(ft, "train");
  ft->add_option("--index", fa.index, "BM25 index used to fetch evidence");
  ft->add_option("--dataset", fa.dataset, "Prebuilt JSON-lines dataset");
  ft->add_option("--pattern", fa.pattern)->capture_default_str();
  ft->add_flag("--no-marks", fa.no_marks);
  ft->add_option("--rank", fa.rank)->capture_default_str();
  ft->add_option("--steps", fa.steps)->capture_default_str();
  ft->add_option("--lr", fa.lr)->capture_default_str();
  ft->add_option("--warmup", fa.warmup, "Warm-up fraction of the steps")->capture_default_str();
  ft->add_option("--batch", fa.batch)->capture_default_str();
  ft->add_option("--stride", fa.stride)->capture_default_str();
  ft->add_option("--train-seq", fa.train_seq, "Context window of a training example")->capture_default_str();
  ft->add_option("--query-len", fa.query_len)->capture_default_str();
  ft->add_option("--evidence-budget", fa.evidence_budget)->capture_default_str();
  ft->add_option("--data-seed", fa.data_seed)->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Continuous-retrieval perplexity");
  EvalArgs ea;
  model.add(ev);
  corpus.add(ev, "text");
  ev->add_option("--index", ea.index);
  ev->add_option("--pattern", ea.pattern)->capture_default_str();
  ev->add_option("--chunk-len", ea.chunk_len)->capture_default_str();
  ev->add_option("--stride", ea.stride)->capture_default_str();
  ev->add_option("--query-len", ea.query_len)->capture_default_str();
  ev->add_option("--evidence-budget", ea.evidence_budget)->capture_default_str();
  ev->add_flag("--no-marks", ea.no_marks);
  ev->add_flag("--include-marks", ea.include_marks, "Also score marking-token predictions");
  ev->add_flag("--no-cache", ea.no_cache, "Recompute every prefix from scratch");

  auto* rc = app.add_subcommand("reconcile", "Compare measured FLOPs with the analytic cost model");
  ReconcileArgs ra;
  rc->add_option("--hidden", ra.hidden)->capture_default_str();
  rc->add_option("--layers", ra.layers)->capture_default_str();
  rc->add_option("--heads", ra.heads)->capture_default_str();
  rc->add_option("--seq", ra.T, "Sequence length")->capture_default_str();
  rc->add_option("--stride", ra.s)->capture_default_str();
  rc->add_option("--evidence", ra.d, "Evidence length")->capture_default_str();
  rc->add_option("--rank", ra.r)->capture_default_str();
  rc->add_option("--pattern", ra.pattern, "none, prepend, append or all")->capture_default_str();
  rc->add_flag("--count-marks", ra.count_marks);
  rc->add_option("--seed", ra.seed)->capture_default_str();

  auto* bench = app.add_subcommand("bench", "Time generation under each pattern");
  std::string scenario, plot_from;
  std::vector<std::string> overrides;
  bench->add_option("--scenario", scenario, "Scenario file of key = value lines");
  bench->add_option("--set", overrides, "Override a scenario key (key=value)");
  bench->add_option("--plot-from", plot_from, "Only redraw the chart from a runs CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_code = app.exit(e);
    return rc_code == 0 ? kOk : kUsage;
  }

  try {
    if (index->parsed()) return cmd_index(corpus, index_name, k1, b);
    if (gen->parsed()) return cmd_generate(model, ga);
    if (ft->parsed()) return cmd_finetune(model, corpus, fa);
    if (ev->parsed()) return cmd_eval(model, corpus, ea);
    if (rc->parsed()) return cmd_reconcile(ra);
    if (bench->parsed()) return cmd_bench(scenario, overrides, plot_from);
  } catch (const InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kInvariant;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::length_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInvariant;
  }
  return kUsage;
}

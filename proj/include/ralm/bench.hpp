#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ralm/error.hpp"
#include "ralm/generation.hpp"
#include "ralm/model.hpp"
#include "ralm/rng.hpp"

namespace ralm {

inline constexpr const char* kBenchRunsSchema = "# ralm-bench-runs v1";
inline constexpr const char* kBenchSummarySchema = "# ralm-bench-summary v1";

// target_len is the length of the final context, evidence included; each
// run generates target_len - prompt_len - evidence_len tokens.
struct BenchScenario {
  ModelConfig model;
  std::vector<ContextPattern> patterns{ContextPattern::prepend, ContextPattern::append};
  std::size_t prompt_min = 500;
  std::size_t prompt_max = 1000;
  std::size_t evidence_len = 128;  // marks included when use_marks is on
  bool use_marks = true;
  std::vector<std::size_t> strides{16};
  std::size_t query_len = 16;
  std::vector<std::size_t> target_lens{2048};
  std::size_t reps = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    if (patterns.empty()) throw std::invalid_argument("bench: no patterns");
    if (target_lens.empty()) throw std::invalid_argument("bench: no target lengths");
    if (strides.empty() || std::find(strides.begin(), strides.end(), 0u) != strides.end())
      throw std::invalid_argument("bench: strides must be >= 1");
    if (reps < 3) throw std::invalid_argument("bench: at least 3 repetitions are required");
    if (prompt_min == 0 || prompt_min > prompt_max)
      throw std::invalid_argument("bench: need 1 <= prompt_min <= prompt_max");
    if (use_marks && evidence_len == 1)
      throw std::invalid_argument("bench: evidence of length 1 cannot hold both marks");
  }
};

inline ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  if (name == "tiny") {
    c.layers = 2, c.hidden = 64, c.heads = 2, c.mlp_dim = 256, c.max_seq = 1024;
  } else if (name == "small") {
    c.layers = 4, c.hidden = 256, c.heads = 4, c.mlp_dim = 1024, c.max_seq = 4096;
  } else if (name == "medium") {
    c.layers = 8, c.hidden = 512, c.heads = 8, c.mlp_dim = 2048, c.max_seq = 4096;
  } else {
    throw DataError("unknown model preset '" + name + "'");
  }
  return c;
}

namespace bench_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') throw DataError("scenario: bad count for '" + key + "': " + v);
  return std::size_t(n);
}

// Expands "a..b:step" or a comma list.
inline std::vector<std::size_t> to_counts(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) {
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(to_count(key, item));
      continue;
    }
    const auto colon = item.find(':', dots);
    const std::size_t lo = to_count(key, item.substr(0, dots));
    const std::size_t hi = to_count(key, item.substr(dots + 2, colon == std::string::npos ? colon : colon - dots - 2));
    const std::size_t step = colon == std::string::npos ? 1 : to_count(key, item.substr(colon + 1));
    if (step == 0 || lo > hi) throw DataError("scenario: bad range for '" + key + "': " + item);
    for (std::size_t x = lo; x <= hi; x += step) out.push_back(x);
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw DataError("scenario: bad boolean for '" + key + "': " + v);
}

}  // namespace bench_detail

// Applies one `key = value` setting. Keys not listed here are rejected.
inline void apply_setting(BenchScenario& sc, const std::string& key, const std::string& value) {
  using namespace bench_detail;
  if (key == "preset") {
    const std::size_t seq = sc.model.max_seq;
    sc.model = model_preset(value);
    sc.model.max_seq = std::max(sc.model.max_seq, seq);
  } else if (key == "layers") sc.model.layers = to_count(key, value);
  else if (key == "hidden") sc.model.hidden = to_count(key, value);
  else if (key == "heads") sc.model.heads = to_count(key, value);
  else if (key == "mlp_dim") sc.model.mlp_dim = to_count(key, value);
  else if (key == "max_seq") sc.model.max_seq = to_count(key, value);
  else if (key == "lora_rank") sc.model.lora_rank = to_count(key, value);
  else if (key == "patterns") {
    sc.patterns.clear();
    for (const auto& p : split_list(value)) {
      try {
        sc.patterns.push_back(parse_pattern(p));
      } catch (const std::invalid_argument& e) {
        throw DataError(std::string("scenario: ") + e.what());
      }
    }
  } else if (key == "prompt_len") sc.prompt_min = sc.prompt_max = to_count(key, value);
  else if (key == "prompt_min") sc.prompt_min = to_count(key, value);
  else if (key == "prompt_max") sc.prompt_max = to_count(key, value);
  else if (key == "evidence_len") sc.evidence_len = to_count(key, value);
  else if (key == "use_marks") sc.use_marks = to_bool(key, value);
  else if (key == "stride" || key == "strides") sc.strides = to_counts(key, value);
  else if (key == "query_len") sc.query_len = to_count(key, value);
  else if (key == "target_lens") sc.target_lens = to_counts(key, value);
  else if (key == "reps") sc.reps = to_count(key, value);
  else if (key == "warmup") sc.warmup = to_count(key, value);
  else if (key == "seed") sc.seed = to_count(key, value);
  else throw DataError("scenario: unknown key '" + key + "'");
}

// Plain text: one `key = value` per line, `#` starts a comment.
inline BenchScenario parse_scenario(std::istream& in) {
  BenchScenario sc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = bench_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("scenario line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(sc, bench_detail::trim(line.substr(0, eq)), bench_detail::trim(line.substr(eq + 1)));
  }
  return sc;
}

inline BenchScenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scenario '" + path + "'");
  return parse_scenario(in);
}

struct BenchRun {
  ContextPattern pattern = ContextPattern::none;
  std::size_t stride = 0;
  std::size_t target_len = 0;
  std::size_t rep = 0;
  double wall_s = 0.0;
  std::size_t recomputed_tokens = 0;
  std::uint64_t flops_kv = 0;
  std::uint64_t flops_lora = 0;
};

struct BenchError {
  ContextPattern pattern = ContextPattern::none;
  std::size_t stride = 0;
  std::size_t target_len = 0;
  std::string message;
};

struct BenchSummaryRow {
  ContextPattern pattern = ContextPattern::none;
  std::size_t stride = 0;
  std::size_t target_len = 0;
  std::size_t reps = 0;
  double mean_s = 0, median_s = 0, min_s = 0, max_s = 0;
};

struct BenchResult {
  std::vector<BenchRun> runs;
  std::vector<BenchError> errors;
};

inline Tokens bench_prompt(const BenchScenario& sc, std::size_t rep_index) {
  Rng rng(sc.seed * 0x9E3779B97F4A7C15ull + rep_index);
  const std::size_t n = std::size_t(rng.uniform_int(sc.prompt_min, sc.prompt_max));
  Tokens t(n);
  for (auto& v : t) v = TokenId(rng.uniform_int(0, sc.model.vocab_base - 1));
  return t;
}

inline Tokens bench_evidence_doc(const BenchScenario& sc) {
  const std::size_t marks = sc.use_marks && sc.evidence_len > 0 ? 2 : 0;
  Rng rng(sc.seed + 1);
  Tokens t(sc.evidence_len - marks);
  for (auto& v : t) v = TokenId(rng.uniform_int(0, 255));
  return t;
}

inline void check_bench_feasible(const BenchScenario& sc, std::size_t prompt_len, std::size_t target_len) {
  if (prompt_len + sc.evidence_len >= target_len)
    throw std::invalid_argument("target length " + std::to_string(target_len) +
                                " leaves no room after prompt " + std::to_string(prompt_len) + " and evidence " +
                                std::to_string(sc.evidence_len));
  if (target_len > sc.model.max_seq)
    throw CapacityError("target length " + std::to_string(target_len) + " exceeds max_seq " +
                        std::to_string(sc.model.max_seq));
}

// Times one generation run; the monotonic clock covers the whole loop.
inline BenchRun bench_once(const ModelParams& params, const BenchScenario& sc, ContextPattern pattern,
                           std::size_t stride, std::size_t target_len, const Tokens& prompt, const EvidenceSource& src) {
  check_bench_feasible(sc, prompt.size(), target_len);
  GenerationOptions opt;
  opt.pattern = pattern;
  opt.retrieval.stride = stride;
  opt.retrieval.query_len = sc.query_len;
  opt.retrieval.evidence_budget = sc.evidence_len;
  opt.use_marks = sc.use_marks && sc.evidence_len > 0;
  const std::size_t max_new = target_len - prompt.size() - sc.evidence_len;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = generate(params, sc.model, opt, src, prompt, max_new);
  const auto t1 = std::chrono::steady_clock::now();
  BenchRun run;
  run.pattern = pattern;
  run.stride = stride;
  run.target_len = target_len;
  run.wall_s = std::chrono::duration<double>(t1 - t0).count();
  for (const auto& s : res.steps) {
    run.recomputed_tokens += s.recomputed_tokens;
    run.flops_kv += s.flops.kv_projection;
    run.flops_lora += s.flops.lora;
  }
  return run;
}

// Runs every (stride, length, pattern) configuration strictly in sequence:
// `warmup` discarded runs, then `reps` timed runs. Infeasible
// configurations become error entries.
template <class Progress>
BenchResult run_bench(const BenchScenario& sc, Progress&& progress) {
  sc.validate();
  const ModelParams params = init_params(sc.model, sc.seed);
  const EvidenceSource src = fixed_source(bench_evidence_doc(sc), "bench-evidence");
  BenchResult out;
  for (std::size_t stride : sc.strides)
    for (std::size_t len : sc.target_lens)
      for (ContextPattern pattern : sc.patterns) {
        try {
          for (std::size_t w = 0; w < sc.warmup; ++w)
            bench_once(params, sc, pattern, stride, len, bench_prompt(sc, 0), src);
          for (std::size_t rep = 0; rep < sc.reps; ++rep) {
            BenchRun r = bench_once(params, sc, pattern, stride, len, bench_prompt(sc, rep + 1), src);
            r.rep = rep;
            progress(r);
            out.runs.push_back(r);
          }
        } catch (const std::exception& e) {
          out.errors.push_back({pattern, stride, len, e.what()});
        }
      }
  return out;
}

inline BenchResult run_bench(const BenchScenario& sc) {
  return run_bench(sc, [](const BenchRun&) {});
}

inline std::vector<BenchSummaryRow> summarize(const std::vector<BenchRun>& runs) {
  std::map<std::tuple<std::size_t, std::size_t, int>, std::vector<double>> groups;
  for (const auto& r : runs) groups[{r.stride, r.target_len, int(r.pattern)}].push_back(r.wall_s);
  std::vector<BenchSummaryRow> out;
  for (auto& [key, times] : groups) {
    std::sort(times.begin(), times.end());
    BenchSummaryRow row;
    row.stride = std::get<0>(key);
    row.target_len = std::get<1>(key);
    row.pattern = ContextPattern(std::get<2>(key));
    row.reps = times.size();
    double sum = 0;
    for (double t : times) sum += t;
    row.mean_s = sum / double(times.size());
    const std::size_t n = times.size();
    row.median_s = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    row.min_s = times.front();
    row.max_s = times.back();
    out.push_back(row);
  }
  return out;
}

inline void write_runs_csv(std::ostream& os, const std::vector<BenchRun>& runs) {
  os << kBenchRunsSchema << "\n";
  os << "pattern,target_len,rep,wall_s,recomputed_tokens,flops_kv,flops_lora\n";
  os << std::setprecision(9);
  for (const auto& r : runs)
    os << pattern_name(r.pattern) << ',' << r.target_len << ',' << r.rep << ',' << r.wall_s << ','
       << r.recomputed_tokens << ',' << r.flops_kv << ',' << r.flops_lora << "\n";
}

// One row per (length, pattern) with mean/median/min/max, plus the
// prepend-over-pattern ratio of means and of medians when prepend was run.
inline void write_summary_csv(std::ostream& os, const std::vector<BenchSummaryRow>& rows) {
  os << kBenchSummarySchema << "\n";
  os << "pattern,target_len,reps,mean_s,median_s,min_s,max_s,prepend_ratio_mean,prepend_ratio_median\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << pattern_name(r.pattern) << ',' << r.target_len << ',' << r.reps << ',' << r.mean_s << ','
       << r.median_s << ',' << r.min_s << ',' << r.max_s << ',';
    auto it = std::find_if(rows.begin(), rows.end(), [&](const BenchSummaryRow& o) {
      return o.pattern == ContextPattern::prepend && o.target_len == r.target_len && o.stride == r.stride;
    });
    if (it != rows.end()) os << it->mean_s / r.mean_s << ',' << it->median_s / r.median_s;
    else os << ',';
    os << "\n";
  }
}

inline void write_errors_csv(std::ostream& os, const std::vector<BenchError>& errors) {
  os << "pattern,target_len,error\n";
  for (const auto& e : errors) {
    std::string msg = e.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    os << pattern_name(e.pattern) << ',' << e.target_len << ',' << msg << "\n";
  }
}

inline std::vector<BenchRun> read_runs_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kBenchRunsSchema)
    throw DataError("bench CSV: missing or unsupported schema line");
  if (!std::getline(in, line) || line != "pattern,target_len,rep,wall_s,recomputed_tokens,flops_kv,flops_lora")
    throw DataError("bench CSV: unexpected header");
  std::vector<BenchRun> runs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string pat;
    char c1, c2, c3, c4, c5, c6;
    BenchRun r;
    if (!std::getline(ss, pat, ',') ||
        !(ss >> r.target_len >> c1 >> r.rep >> c2 >> r.wall_s >> c3 >> r.recomputed_tokens >> c4 >> r.flops_kv >> c5 >>
          r.flops_lora) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',')
      throw DataError("bench CSV: malformed row '" + line + "'");
    (void)c6;
    try {
      r.pattern = parse_pattern(pat);
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("bench CSV: ") + e.what());
    }
    runs.push_back(r);
  }
  return runs;
}

// Self-contained SVG line chart of mean wall-clock per pattern against
// target length, drawn purely from run records.
inline std::string render_svg(const std::vector<BenchRun>& runs) {
  const auto rows = summarize(runs);
  const double W = 640, H = 400, ml = 70, mr = 130, mt = 30, mb = 50;
  double xmin = 1e300, xmax = -1e300, ymax = 0;
  for (const auto& r : rows) {
    xmin = std::min(xmin, double(r.target_len));
    xmax = std::max(xmax, double(r.target_len));
    ymax = std::max(ymax, r.mean_s);
  }
  if (rows.empty()) xmin = 0, xmax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax <= 0) ymax = 1;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - y / ymax * (H - mt - mb); };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = ymax * i / 4.0;
    os << "<text x=\"" << ml - 6 << "\" y=\"" << py(y) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
       << std::setprecision(3) << y << std::setprecision(2) << "</text>\n";
  }
  std::set<std::size_t> xs;
  for (const auto& r : rows) xs.insert(r.target_len);
  for (std::size_t x : xs)
    os << "<text x=\"" << px(double(x)) << "\" y=\"" << H - mb + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
       << x << "</text>\n";
  os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 10
     << "\" font-size=\"12\" text-anchor=\"middle\">target length (tokens)</text>\n";
  os << "<text x=\"16\" y=\"" << (mt + H - mb) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (mt + H - mb) / 2 << ")\">mean wall-clock (s)</text>\n";
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::map<std::pair<std::size_t, int>, std::vector<const BenchSummaryRow*>> lines;
  for (const auto& r : rows) lines[{r.stride, int(r.pattern)}].push_back(&r);
  std::set<std::size_t> strides;
  for (const auto& r : rows) strides.insert(r.stride);
  const bool multi_stride = strides.size() > 1;
  std::size_t idx = 0;
  for (const auto& [key, pts] : lines) {
    const char* color = colors[idx % 4];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto* p : pts) os << px(double(p->target_len)) << ',' << py(p->mean_s) << ' ';
    os << "\"/>\n";
    for (const auto* p : pts)
      os << "<circle cx=\"" << px(double(p->target_len)) << "\" cy=\"" << py(p->mean_s) << "\" r=\"3\" fill=\"" << color
         << "\"/>\n";
    std::string label = pattern_name(ContextPattern(key.second));
    if (multi_stride) label += " s=" + std::to_string(key.first);
    os << "<text x=\"" << W - mr + 10 << "\" y=\"" << mt + 16 * double(idx + 1) << "\" font-size=\"12\" fill=\"" << color
       << "\">" << label << "</text>\n";
    ++idx;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ralm

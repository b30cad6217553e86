#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ralm/error.hpp"
#include "ralm/kvcache.hpp"
#include "ralm/model.hpp"
#include "ralm/numerics.hpp"
#include "ralm/retrieval.hpp"
#include "ralm/rng.hpp"

namespace ralm {

enum class ContextPattern { none, prepend, append };

inline std::string pattern_name(ContextPattern p) {
  switch (p) {
    case ContextPattern::none: return "none";
    case ContextPattern::prepend: return "prepend";
    case ContextPattern::append: return "append";
  }
  return "?";
}

inline ContextPattern parse_pattern(const std::string& s) {
  if (s == "none") return ContextPattern::none;
  if (s == "prepend") return ContextPattern::prepend;
  if (s == "append") return ContextPattern::append;
  throw std::invalid_argument("unknown pattern '" + s + "' (none|prepend|append)");
}

// [<MARK_L>] doc [<MARK_R>] when marks are enabled, otherwise doc unchanged.
inline Tokens wrap_evidence(std::span<const TokenId> doc, bool use_marks, const Vocabulary& vocab) {
  for (TokenId t : doc)
    if (vocab.is_mark(t)) throw std::invalid_argument("wrap_evidence: document contains a marking token");
  Tokens out;
  out.reserve(doc.size() + 2);
  if (use_marks) out.push_back(vocab.mark_l());
  out.insert(out.end(), doc.begin(), doc.end());
  if (use_marks) out.push_back(vocab.mark_r());
  return out;
}

struct Evidence {
  std::string doc_id;
  Tokens tokens;  // raw document tokens, not yet wrapped
};

// Query tokens and a document count -> up to that many evidence documents,
// best first.
using EvidenceSource = std::function<std::vector<Evidence>(std::span<const TokenId>, std::size_t)>;

inline EvidenceSource retriever_source(const Retriever& retriever, std::size_t evidence_budget) {
  return [&retriever, evidence_budget](std::span<const TokenId> query, std::size_t k) {
    std::vector<Evidence> out;
    for (const auto& hit : retriever.retrieve(query, k)) {
      const Tokens& doc = retriever.document_tokens(hit.index);
      const std::size_t n = std::min(doc.size(), evidence_budget);
      out.push_back({hit.id, Tokens(doc.begin(), doc.begin() + std::ptrdiff_t(n))});
    }
    return out;
  };
}

// Always returns the same document; used where retrieval cost is excluded.
inline EvidenceSource fixed_source(Tokens doc, std::string id = "fixed") {
  return [doc = std::move(doc), id = std::move(id)](std::span<const TokenId>, std::size_t k) {
    return std::vector<Evidence>(std::max<std::size_t>(k, 1), Evidence{id, doc});
  };
}

struct SamplingConfig {
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};

struct GenerationOptions {
  ContextPattern pattern = ContextPattern::append;
  RetrievalConfig retrieval;
  bool use_marks = true;
  SamplingConfig sampling;
  // false = reconciliation mode: every pending token is first encoded in
  // the current layout, and retrieval boundaries then recompute on top.
  bool fuse_boundary = true;
  bool verify_oracle = false;       // record per-step deviation from full recompute
  bool keep_distributions = false;  // store each step's sampling distribution
};

struct StepReport {
  std::size_t step = 0;
  std::size_t seq_len = 0;  // tokens in the sequence (prompt + generated) at this step
  bool retrieved = false;
  std::size_t recomputed_tokens = 0;  // positions pushed through the model this step
  std::size_t evidence_len = 0;       // l_e after this step, marks included
  std::string evidence_doc;
  FlopsLedger flops;            // everything this step
  FlopsLedger fresh_flops;      // first encodings of sequence tokens
  FlopsLedger recompute_flops;  // re-encodings of sequence tokens
  FlopsLedger prefix_recompute_flops;  // subset of the above: tokens before the previous boundary
  FlopsLedger evidence_flops;   // evidence tokens
  std::uint64_t wall_ns = 0;
  double oracle_max_abs = -1.0;  // set when verify_oracle is on
};

struct GenerationResult {
  Tokens tokens;  // generated tokens only
  std::vector<StepReport> steps;
  std::vector<std::vector<float>> distributions;
};

// Fresh forward pass over the exact logical context; last-position logits.
inline Tensor2 full_recompute_oracle(const ModelParams& params, const ModelConfig& cfg,
                                     std::span<const TokenId> context) {
  if (context.empty()) throw std::invalid_argument("oracle: empty context");
  if (context.size() > cfg.max_seq)
    throw CapacityError("oracle: context of " + std::to_string(context.size()) +
                        " exceeds max_seq " + std::to_string(cfg.max_seq));
  KvCache cache(cfg.layers, cfg.hidden, context.size());
  FlopsLedger scratch;
  Tensor2 all = forward_incremental(params, cfg, cache, context, 0, scratch, LogitsMode::all).logits;
  return all.slice_rows(all.rows() - 1, all.rows());
}

// Loop variables of one generation branch.
struct GenerationState {
  std::size_t prompt_len = 0;        // t
  std::size_t last_retrieval = 0;    // tilde-n: sequence length at the last retrieval
  Tokens evidence;                   // e, wrapped
  bool has_evidence = false;
  std::size_t encoded = 0;  // sequence tokens currently represented in the cache
  std::size_t seen = 0;     // sequence tokens encoded at least once

  std::size_t evidence_len() const { return evidence.size(); }
};

// One cache-owning branch of a generation run. The token sequence is owned
// by the caller and passed to every step; its last token is the one
// sampled most recently and not yet encoded.
//
// Cache layouts:
//   none     x[0..encoded)
//   prepend  e ; x[0..encoded)
//   append   x[0..last_retrieval) ; e ; x[last_retrieval..encoded)
class GenerationSession {
 public:
  GenerationSession(const ModelParams& params, const ModelConfig& cfg, ContextPattern pattern,
                    std::size_t prompt_len, bool fuse_boundary)
      : params_(&params),
        cfg_(&cfg),
        pattern_(pattern),
        fuse_(fuse_boundary),
        cache_(make_cache(cfg)) {
    state_.prompt_len = prompt_len;
  }

  const GenerationState& state() const { return state_; }
  const KvCache& cache() const { return cache_; }
  ContextPattern pattern() const { return pattern_; }

  // The context the model conditions on after this step, in cache order.
  Tokens logical_context(std::span<const TokenId> x) const {
    Tokens out;
    const auto& e = state_.evidence;
    switch (pattern_) {
      case ContextPattern::none:
        out.assign(x.begin(), x.end());
        break;
      case ContextPattern::prepend:
        out = e;
        out.insert(out.end(), x.begin(), x.end());
        break;
      case ContextPattern::append: {
        const std::size_t cut = state_.last_retrieval;
        out.assign(x.begin(), x.begin() + std::ptrdiff_t(cut));
        out.insert(out.end(), e.begin(), e.end());
        out.insert(out.end(), x.begin() + std::ptrdiff_t(cut), x.end());
        break;
      }
    }
    return out;
  }

  // Advances the cache over the pending token(s) of x. When new_evidence is
  // set this is a retrieval boundary. Returns last-position logits [1 x V].
  Tensor2 step(std::span<const TokenId> x, const Tokens* new_evidence, StepReport& report) {
    const std::size_t n = x.size();
    if (n <= state_.encoded) throw InvariantError("generation step without a pending token");
    if (new_evidence && pattern_ == ContextPattern::none)
      throw InvariantError("retrieval boundary under the no-retrieval pattern");

    if (!new_evidence) return run_tail(x, report);

    if (!fuse_) {
      // Encode pending tokens in the pre-retrieval layout; logits unused.
      run_tail(x, report);
    }
    report.retrieved = true;
    if (pattern_ == ContextPattern::prepend) {
      cache_.clear();
      state_.evidence = *new_evidence;
      state_.has_evidence = true;
      state_.encoded = 0;
      if (!state_.evidence.empty()) run_segment(state_.evidence, Segment::evidence, report, false);
      Tensor2 logits = run_sequence_span(x, 0, n, report);
      state_.last_retrieval = n;
      return logits;
    }
    // append: keep x[0..last_retrieval), re-encode the tail, then the new evidence.
    cache_.truncate(state_.last_retrieval);
    state_.encoded = state_.last_retrieval;
    state_.evidence = *new_evidence;
    state_.has_evidence = true;
    Tensor2 logits;
    if (state_.evidence.empty()) {
      logits = run_sequence_span(x, state_.last_retrieval, n, report);
    } else {
      if (state_.last_retrieval < n) run_sequence_span(x, state_.last_retrieval, n, report);
      logits = run_segment(state_.evidence, Segment::evidence, report, true);
    }
    state_.last_retrieval = n;
    return logits;
  }

 private:
  enum class Segment { fresh, recompute, prefix_recompute, evidence };

  Tensor2 run_tail(std::span<const TokenId> x, StepReport& report) {
    return run_sequence_span(x, state_.encoded, x.size(), report);
  }

  // Encodes x[begin, end) after the current cache contents, splitting the
  // span for FLOP attribution into re-encoded tokens that precede the
  // previous boundary, other re-encoded tokens, and first-time encodings.
  Tensor2 run_sequence_span(std::span<const TokenId> x, std::size_t begin, std::size_t end,
                            StepReport& report) {
    const std::size_t split = std::clamp(state_.seen, begin, end);
    const std::size_t prefix = std::clamp(state_.last_retrieval, begin, split);
    Tensor2 logits;
    if (prefix > begin)
      logits = run_segment(x.subspan(begin, prefix - begin), Segment::prefix_recompute, report,
                           prefix == end);
    if (split > prefix)
      logits = run_segment(x.subspan(prefix, split - prefix), Segment::recompute, report,
                           split == end);
    if (end > split) logits = run_segment(x.subspan(split, end - split), Segment::fresh, report, true);
    state_.encoded = end;
    state_.seen = std::max(state_.seen, end);
    return logits;
  }

  Tensor2 run_segment(std::span<const TokenId> tokens, Segment kind, StepReport& report,
                      bool want_logits) {
    FlopsLedger delta;
    Tensor2 logits = forward_incremental(*params_, *cfg_, cache_, tokens, cache_.logical_len(),
                                         delta, LogitsMode::last)
                         .logits;
    report.recomputed_tokens += tokens.size();
    report.flops += delta;
    switch (kind) {
      case Segment::fresh: report.fresh_flops += delta; break;
      case Segment::recompute: report.recompute_flops += delta; break;
      case Segment::prefix_recompute:
        report.recompute_flops += delta;
        report.prefix_recompute_flops += delta;
        break;
      case Segment::evidence: report.evidence_flops += delta; break;
    }
    if (!want_logits) return {};
    return logits;
  }

  const ModelParams* params_;
  const ModelConfig* cfg_;
  ContextPattern pattern_;
  bool fuse_;
  KvCache cache_;
  GenerationState state_;
};

namespace detail {

inline std::vector<float> to_distribution(const Tensor2& logits, double temperature) {
  std::vector<float> p(logits.values().begin(), logits.values().end());
  if (temperature > 0.0)
    for (auto& v : p) v = static_cast<float>(v / temperature);
  softmax_row_inplace(std::span<float>(p));
  return p;
}

// Greedy: highest probability, lowest id on ties. Otherwise inverse-CDF
// sampling with one uniform draw per step.
inline TokenId sample(std::span<const float> probs, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[best]) best = i;
    return TokenId(best);
  }
  const double u = rng.uniform01();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return TokenId(i);
  }
  return TokenId(probs.size() - 1);
}

inline void check_generation_args(const ModelConfig& cfg, const GenerationOptions& opt,
                                  std::span<const TokenId> prompt, const EvidenceSource& source) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  opt.retrieval.validate();
  if (opt.pattern != ContextPattern::none && !source)
    throw std::invalid_argument("generate: retrieval requested with no index");
  for (TokenId t : prompt)
    if (t >= cfg.vocab_size()) throw std::out_of_range("generate: prompt token out of range");
}

inline Tokens query_of(std::span<const TokenId> x, std::size_t query_len) {
  const std::size_t q = std::min(query_len, x.size());
  return Tokens(x.end() - std::ptrdiff_t(q), x.end());
}

}  // namespace detail

inline GenerationResult generate(const ModelParams& params, const ModelConfig& cfg,
                                 const GenerationOptions& opt, const EvidenceSource& source,
                                 std::span<const TokenId> prompt, std::size_t max_new) {
  detail::check_generation_args(cfg, opt, prompt, source);
  const Vocabulary vocab = vocabulary_of(cfg);
  GenerationSession session(params, cfg, opt.pattern, prompt.size(), opt.fuse_boundary);
  Rng rng(opt.sampling.seed);
  Tokens x(prompt.begin(), prompt.end());
  GenerationResult result;
  for (std::size_t step = 0; step < max_new; ++step) {
    StepReport report;
    report.step = step;
    report.seq_len = x.size();
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<Tokens> evidence;
    if (opt.pattern != ContextPattern::none &&
        should_retrieve(x.size(), prompt.size(), opt.retrieval.stride)) {
      auto docs = source(detail::query_of(x, opt.retrieval.query_len), 1);
      Tokens raw;
      if (!docs.empty()) {
        raw = std::move(docs.front().tokens);
        report.evidence_doc = docs.front().doc_id;
      }
      evidence = wrap_evidence(raw, opt.use_marks, vocab);
    }
    Tensor2 logits = session.step(x, evidence ? &*evidence : nullptr, report);
    std::vector<float> probs = detail::to_distribution(logits, opt.sampling.temperature);
    const TokenId next = detail::sample(probs, opt.sampling.temperature, rng);
    report.wall_ns = std::uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                       std::chrono::steady_clock::now() - t0)
                                       .count());
    report.evidence_len = session.state().evidence_len();
    if (opt.verify_oracle) {
      const Tensor2 ref = full_recompute_oracle(params, cfg, session.logical_context(x));
      report.oracle_max_abs = max_abs_diff<float>(logits.values(), ref.values());
    }
    if (opt.keep_distributions) result.distributions.push_back(probs);
    x.push_back(next);
    result.tokens.push_back(next);
    result.steps.push_back(std::move(report));
  }
  return result;
}

// Appending pattern with k documents per retrieval, each in its own branch
// and cache; the next-token distribution is the uniform average of the
// branch distributions. Fewer than k available documents -> all of them.
inline GenerationResult generate_ensemble(const ModelParams& params, const ModelConfig& cfg,
                                          const GenerationOptions& opt, const EvidenceSource& source,
                                          std::span<const TokenId> prompt, std::size_t max_new,
                                          std::size_t k_docs) {
  if (k_docs == 0) throw std::invalid_argument("generate_ensemble: k_docs must be >= 1");
  GenerationOptions o = opt;
  o.pattern = ContextPattern::append;
  detail::check_generation_args(cfg, o, prompt, source);
  const Vocabulary vocab = vocabulary_of(cfg);
  std::vector<GenerationSession> branches;
  Rng rng(opt.sampling.seed);
  Tokens x(prompt.begin(), prompt.end());
  GenerationResult result;
  for (std::size_t step = 0; step < max_new; ++step) {
    StepReport report;
    report.step = step;
    report.seq_len = x.size();
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Tokens> evidence;
    if (should_retrieve(x.size(), prompt.size(), o.retrieval.stride)) {
      auto docs = source(detail::query_of(x, o.retrieval.query_len), k_docs);
      if (docs.size() > k_docs) docs.resize(k_docs);
      if (docs.empty()) docs.push_back({});
      if (branches.empty()) {
        for (std::size_t b = 0; b < docs.size(); ++b)
          branches.emplace_back(params, cfg, ContextPattern::append, prompt.size(), o.fuse_boundary);
      }
      for (std::size_t b = 0; b < branches.size(); ++b) {
        const Evidence& ev = docs[std::min(b, docs.size() - 1)];
        evidence.push_back(wrap_evidence(ev.tokens, o.use_marks, vocab));
        if (b == 0) report.evidence_doc = ev.doc_id;
      }
    }
    std::vector<float> avg;
    double worst = -1.0;
    for (std::size_t b = 0; b < branches.size(); ++b) {
      StepReport branch_report;
      Tensor2 logits = branches[b].step(x, evidence.empty() ? nullptr : &evidence[b], branch_report);
      auto probs = detail::to_distribution(logits, o.sampling.temperature);
      if (avg.empty()) avg.assign(probs.size(), 0.0f);
      for (std::size_t i = 0; i < probs.size(); ++i) avg[i] += probs[i];
      report.retrieved = report.retrieved || branch_report.retrieved;
      report.recomputed_tokens += branch_report.recomputed_tokens;
      report.flops += branch_report.flops;
      report.fresh_flops += branch_report.fresh_flops;
      report.recompute_flops += branch_report.recompute_flops;
      report.prefix_recompute_flops += branch_report.prefix_recompute_flops;
      report.evidence_flops += branch_report.evidence_flops;
      if (o.verify_oracle) {
        const Tensor2 ref = full_recompute_oracle(params, cfg, branches[b].logical_context(x));
        worst = std::max(worst, max_abs_diff<float>(logits.values(), ref.values()));
      }
    }
    const float inv = 1.0f / float(branches.size());
    if (branches.size() > 1)
      for (auto& v : avg) v *= inv;
    const TokenId next = detail::sample(avg, o.sampling.temperature, rng);
    report.wall_ns = std::uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                       std::chrono::steady_clock::now() - t0)
                                       .count());
    report.evidence_len = branches.front().state().evidence_len();
    report.oracle_max_abs = worst;
    if (o.keep_distributions) result.distributions.push_back(avg);
    x.push_back(next);
    result.tokens.push_back(next);
    result.steps.push_back(std::move(report));
  }
  return result;
}

}  // namespace ralm

#pragma once

#include <cstdint>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ralm/generation.hpp"
#include "ralm/numerics.hpp"

namespace ralm {

using Flops = std::int64_t;

// Parameters of the recomputation / adapter cost model.
struct FlopsParams {
  std::int64_t b = 1;  // batch
  std::int64_t h = 0;  // hidden size
  std::int64_t l = 0;  // layers
  std::int64_t T = 0;  // maximum sequence length
  std::int64_t s = 0;  // retrieval stride
  std::int64_t r = 0;  // LoRA rank
  std::int64_t d = 0;  // evidence tokens, marks excluded
  bool count_marks = false;  // add the two marking tokens to d

  std::int64_t evidence() const { return d + (count_marks ? 2 : 0); }
  bool divisible() const { return s > 0 && T % s == 0; }

  void validate() const {
    if (b <= 0 || h <= 0 || l <= 0 || T <= 0 || s <= 0 || r < 0 || d < 0)
      throw std::invalid_argument("flops params: b, h, l, T, s must be positive; r, d non-negative");
  }
};

namespace detail {

using Wide = __int128;

inline Flops narrow(Wide v) {
  if (v > Wide(std::numeric_limits<Flops>::max()) || v < Wide(std::numeric_limits<Flops>::min()))
    throw std::overflow_error("flops value out of 64-bit range");
  return Flops(v);
}

}  // namespace detail

struct ClosedForm {
  Flops flops = 0;
  bool summation_fallback = false;  // T mod s != 0, value is the summation form
};

// Recomputation cost: 2l * sum_{i=1}^{T/s} 2 b (i s) h^2.
inline Flops c0_sum(const FlopsParams& p) {
  p.validate();
  detail::Wide total = 0;
  for (std::int64_t i = 1; i <= p.T / p.s; ++i)
    total += detail::Wide(2) * p.b * i * p.s * p.h * p.h;
  return detail::narrow(detail::Wide(2) * p.l * total);
}

// 2 T (T + s) b h^2 l / s.
inline ClosedForm c0_closed(const FlopsParams& p) {
  p.validate();
  if (!p.divisible()) return {c0_sum(p), true};
  const detail::Wide num = detail::Wide(2) * p.T * (p.T + p.s) * p.b * p.h * p.h * p.l;
  return {detail::narrow(num / p.s), false};
}

// Adapter cost of the appending pattern, split by term.
struct C1Terms {
  Flops lora_fresh = 0;                 // 2l * 4bThr
  Flops unattributed_fresh = 0;         // 2l * bTh
  Flops lora_retrieval = 0;             // 2l * sum 4b(d+s)hr
  Flops unattributed_retrieval = 0;     // 2l * sum b(d+s)h

  Flops lora() const { return lora_fresh + lora_retrieval; }
  Flops total() const { return lora_fresh + unattributed_fresh + lora_retrieval + unattributed_retrieval; }
};

inline C1Terms c1_terms(const FlopsParams& p) {
  p.validate();
  using detail::Wide;
  const std::int64_t d = p.evidence();
  C1Terms t;
  t.lora_fresh = detail::narrow(Wide(2) * p.l * 4 * p.b * p.T * p.h * p.r);
  t.unattributed_fresh = detail::narrow(Wide(2) * p.l * p.b * p.T * p.h);
  Wide lora = 0, lin = 0;
  for (std::int64_t i = 1; i <= p.T / p.s; ++i) {
    lora += Wide(4) * p.b * (d + p.s) * p.h * p.r;
    lin += Wide(p.b) * (d + p.s) * p.h;
  }
  t.lora_retrieval = detail::narrow(Wide(2) * p.l * lora);
  t.unattributed_retrieval = detail::narrow(Wide(2) * p.l * lin);
  return t;
}

inline Flops c1_sum(const FlopsParams& p) { return c1_terms(p).total(); }

// 2 l (4r + 1) b h T (d + 2s) / s.
inline ClosedForm c1_closed(const FlopsParams& p) {
  p.validate();
  if (!p.divisible()) return {c1_sum(p), true};
  const detail::Wide num = detail::Wide(2) * p.l * (4 * p.r + 1) * p.b * p.h * p.T * (p.evidence() + 2 * p.s);
  return {detail::narrow(num / p.s), false};
}

// 2 l T b h [(T + s) h - (4r + 1)(d + 2s)] / s. Negative when the adapter
// overhead exceeds the recomputation it removes.
inline ClosedForm c_decrement(const FlopsParams& p) {
  p.validate();
  if (!p.divisible()) return {c0_sum(p) - c1_sum(p), true};
  const detail::Wide bracket =
      detail::Wide(p.T + p.s) * p.h - detail::Wide(4 * p.r + 1) * (p.evidence() + 2 * p.s);
  const detail::Wide num = detail::Wide(2) * p.l * p.T * p.b * p.h * bracket;
  return {detail::narrow(num / p.s), false};
}

struct CostBreakdown {
  Flops c0_recompute = 0;
  Flops c1_lora_append = 0;
  Flops c_decrement = 0;
  C1Terms c1_terms;
  bool summation_fallback = false;
};

inline CostBreakdown cost_breakdown(const FlopsParams& p) {
  CostBreakdown out;
  const auto c0 = c0_closed(p);
  const auto c1 = c1_closed(p);
  out.c0_recompute = c0.flops;
  out.c1_lora_append = c1.flops;
  out.c_decrement = c0.flops - c1.flops;
  out.c1_terms = c1_terms(p);
  out.summation_fallback = c0.summation_fallback || c1.summation_fallback;
  return out;
}

// FLOPs measured over a generation run, summed from its step reports.
struct MeasuredFlops {
  FlopsLedger total;
  FlopsLedger fresh;
  FlopsLedger recompute;
  FlopsLedger prefix_recompute;
  FlopsLedger evidence;
  std::size_t steps = 0;
  std::size_t recomputed_tokens = 0;
  bool reconciliation_mode = false;  // run used unfused boundaries
  bool kv_only_lora = true;          // adapters on K/V only
  std::int64_t batch = 1;
};

inline MeasuredFlops aggregate(const std::vector<StepReport>& steps, bool reconciliation_mode,
                               bool kv_only_lora = true) {
  MeasuredFlops m;
  m.reconciliation_mode = reconciliation_mode;
  m.kv_only_lora = kv_only_lora;
  for (const auto& s : steps) {
    m.total += s.flops;
    m.fresh += s.fresh_flops;
    m.recompute += s.recompute_flops;
    m.prefix_recompute += s.prefix_recompute_flops;
    m.evidence += s.evidence_flops;
    m.recomputed_tokens += s.recomputed_tokens;
    ++m.steps;
  }
  return m;
}

struct ReconcileCheck {
  std::string name;
  Flops measured = 0;
  Flops analytic = 0;
  bool match() const { return measured == analytic; }
};

struct ReconcileReport {
  FlopsParams params;
  ContextPattern pattern = ContextPattern::none;
  bool comparable = true;
  std::string note;
  MeasuredFlops measured;
  CostBreakdown analytic;
  Flops c0_sum_value = 0;
  Flops c1_sum_value = 0;
  std::vector<ReconcileCheck> checks;

  bool all_match() const {
    if (!comparable) return false;
    for (const auto& c : checks)
      if (!c.match()) return false;
    return true;
  }
};

// Compares measured FLOPs with the cost model. Prepend: re-encoded
// sequence-token K/V FLOPs against c0_sum. Append: total adapter FLOPs
// against the adapter terms of c1_sum, and zero prefix re-encoding.
// No-retrieval: zero re-encoding.
inline ReconcileReport reconcile(const MeasuredFlops& measured, const FlopsParams& p,
                                 ContextPattern pattern) {
  ReconcileReport rep;
  rep.params = p;
  rep.pattern = pattern;
  rep.measured = measured;
  rep.analytic = cost_breakdown(p);
  rep.c0_sum_value = c0_sum(p);
  rep.c1_sum_value = c1_sum(p);
  if (!measured.reconciliation_mode) {
    rep.comparable = false;
    rep.note = "run was not executed in reconciliation mode";
  } else if (measured.batch != p.b) {
    rep.comparable = false;
    rep.note = "batch size differs between run and parameters";
  } else if (pattern == ContextPattern::append && !measured.kv_only_lora) {
    rep.comparable = false;
    rep.note = "adapters outside K/V are not covered by the cost model";
  }
  switch (pattern) {
    case ContextPattern::prepend:
      rep.checks.push_back({"recompute_kv", Flops(measured.recompute.kv_projection), rep.c0_sum_value});
      break;
    case ContextPattern::append:
      rep.checks.push_back({"lora_total", Flops(measured.total.lora), rep.analytic.c1_terms.lora()});
      rep.checks.push_back({"prefix_recompute_kv", Flops(measured.prefix_recompute.kv_projection), 0});
      break;
    case ContextPattern::none:
      rep.checks.push_back({"recompute_kv", Flops(measured.recompute.kv_projection), 0});
      break;
  }
  return rep;
}

inline nlohmann::json to_json(const FlopsLedger& l) {
  return {{"kv_projection", l.kv_projection}, {"lora", l.lora}, {"other", l.other}, {"total", l.total()}};
}

inline nlohmann::json to_json(const ReconcileReport& rep) {
  const auto& p = rep.params;
  nlohmann::json j;
  j["params"] = {{"b", p.b}, {"h", p.h}, {"l", p.l}, {"T", p.T}, {"s", p.s},
                 {"r", p.r}, {"d", p.d}, {"count_marks", p.count_marks}};
  j["pattern"] = pattern_name(rep.pattern);
  j["measured"] = {{"total", to_json(rep.measured.total)},
                   {"fresh", to_json(rep.measured.fresh)},
                   {"recompute", to_json(rep.measured.recompute)},
                   {"prefix_recompute", to_json(rep.measured.prefix_recompute)},
                   {"evidence", to_json(rep.measured.evidence)},
                   {"steps", rep.measured.steps},
                   {"recomputed_tokens", rep.measured.recomputed_tokens}};
  const auto& a = rep.analytic;
  j["analytic"] = {{"c0_sum", rep.c0_sum_value},
                   {"c0_closed", a.c0_recompute},
                   {"c1_sum", rep.c1_sum_value},
                   {"c1_closed", a.c1_lora_append},
                   {"c_decrement", a.c_decrement},
                   {"c1_lora_fresh", a.c1_terms.lora_fresh},
                   {"c1_unattributed_linear_fresh", a.c1_terms.unattributed_fresh},
                   {"c1_lora_retrieval", a.c1_terms.lora_retrieval},
                   {"c1_unattributed_linear_retrieval", a.c1_terms.unattributed_retrieval}};
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& c : rep.checks)
    deltas.push_back({{"name", c.name},
                      {"measured", c.measured},
                      {"analytic", c.analytic},
                      {"delta", c.measured - c.analytic},
                      {"match", c.match()}});
  j["deltas"] = deltas;
  j["mode"] = {{"reconciliation_mode", rep.measured.reconciliation_mode},
               {"comparable", rep.comparable},
               {"summation_fallback", a.summation_fallback},
               {"note", rep.note}};
  j["match"] = rep.all_match();
  return j;
}

inline std::string to_text(const ReconcileReport& rep) {
  std::ostringstream os;
  const auto& p = rep.params;
  os << "pattern " << pattern_name(rep.pattern) << "  b=" << p.b << " h=" << p.h << " l=" << p.l
     << " T=" << p.T << " s=" << p.s << " r=" << p.r << " d=" << p.evidence() << "\n";
  os << "  C0 sum " << rep.c0_sum_value << "  closed " << rep.analytic.c0_recompute << "\n";
  os << "  C1 sum " << rep.c1_sum_value << "  closed " << rep.analytic.c1_lora_append
     << "  (adapter terms " << rep.analytic.c1_terms.lora() << ")\n";
  os << "  decrement " << rep.analytic.c_decrement << "\n";
  if (rep.analytic.summation_fallback) os << "  note: T mod s != 0, summation form used\n";
  for (const auto& c : rep.checks)
    os << "  " << c.name << ": measured " << c.measured << "  analytic " << c.analytic << "  delta "
       << (c.measured - c.analytic) << (c.match() ? "  OK" : "  MISMATCH") << "\n";
  if (!rep.comparable) os << "  NOT COMPARABLE: " << rep.note << "\n";
  os << (rep.all_match() ? "exact match" : "no match") << "\n";
  return os.str();
}

// Runs one generation in reconciliation mode: the prompt is exactly one
// stride long, so retrieval i re-encodes i*s sequence tokens, and decoding
// continues until the T-th token has been encoded. Evidence is a fixed
// random document of d tokens (plus marks when p.count_marks is set).
inline MeasuredFlops run_reconciliation(const ModelParams& params, const ModelConfig& cfg,
                                        const FlopsParams& p, ContextPattern pattern,
                                        std::uint64_t seed = 0) {
  p.validate();
  if (p.b != 1) throw std::invalid_argument("reconciliation runs use batch 1");
  if (!p.divisible()) throw std::invalid_argument("reconciliation runs need T mod s == 0");
  if (std::size_t(p.h) != cfg.hidden || std::size_t(p.l) != cfg.layers ||
      std::size_t(p.r) != cfg.lora_rank)
    throw std::invalid_argument("reconciliation: h, l, r must match the model config");
  if (std::size_t(p.T + p.evidence()) > cfg.max_seq)
    throw CapacityError("reconciliation: T + d exceeds max_seq");
  Rng rng(seed);
  Tokens prompt(std::size_t(p.s));
  for (auto& t : prompt) t = TokenId(rng.uniform_int(0, 255));
  Tokens doc(std::size_t(p.d));
  for (auto& t : doc) t = TokenId(rng.uniform_int(0, 255));
  GenerationOptions opt;
  opt.pattern = pattern;
  opt.retrieval.stride = std::size_t(p.s);
  opt.use_marks = p.count_marks;
  opt.fuse_boundary = false;
  const auto res = generate(params, cfg, opt, fixed_source(doc), prompt, std::size_t(p.T - p.s + 1));
  return aggregate(res.steps, true, cfg.lora_targets == LoraTargets::kv);
}

}  // namespace ralm

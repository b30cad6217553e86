#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ralm/error.hpp"
#include "ralm/kvcache.hpp"
#include "ralm/numerics.hpp"
#include "ralm/rng.hpp"

namespace ralm {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

enum class PositionScheme { rotary, learned_absolute };
enum class LoraTargets { kv, qkvo };

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t hidden = 256;
  std::size_t heads = 4;
  std::size_t mlp_dim = 1024;
  std::size_t vocab_base = 258;  // 256 bytes + begin-of-text + pad
  std::size_t max_seq = 4096;
  std::size_t lora_rank = 0;  // 0 disables the adapters
  double lora_alpha = 16.0;
  LoraTargets lora_targets = LoraTargets::kv;
  PositionScheme position = PositionScheme::rotary;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return hidden / heads; }
  std::size_t vocab_size() const { return vocab_base + 2; }
  double lora_scale() const { return lora_rank == 0 ? 0.0 : lora_alpha / double(lora_rank); }

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || mlp_dim == 0 || vocab_base == 0)
      throw std::invalid_argument("model config: sizes must be positive");
    if (hidden % heads != 0) throw std::invalid_argument("model config: hidden % heads != 0");
    if (position == PositionScheme::rotary && head_dim() % 2 != 0)
      throw std::invalid_argument("model config: rotary encoding needs an even head_dim");
    if (max_seq == 0) throw std::invalid_argument("model config: max_seq must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Base vocabulary plus the two evidence-marking tokens appended after it.
struct Vocabulary {
  std::size_t base_size = 258;

  static constexpr TokenId kBeginOfText = 256;
  static constexpr TokenId kPad = 257;

  TokenId mark_l() const { return TokenId(base_size); }
  TokenId mark_r() const { return TokenId(base_size + 1); }
  std::size_t size() const { return base_size + 2; }
  bool is_mark(TokenId t) const { return t == mark_l() || t == mark_r(); }
};

inline Vocabulary vocabulary_of(const ModelConfig& cfg) { return Vocabulary{cfg.vocab_base}; }

template <class T>
struct LoraPair {
  BasicTensor2<T> a;  // [h x r]
  BasicTensor2<T> b;  // [r x h]
  bool active() const { return !a.empty(); }
};

template <class T>
struct LayerParams {
  BasicTensor2<T> ln1_gain, ln1_bias;  // [1 x h]
  BasicTensor2<T> wq, wk, wv, wo;      // [h x h]
  BasicTensor2<T> ln2_gain, ln2_bias;
  BasicTensor2<T> w1, b1;  // [h x mlp], [1 x mlp]
  BasicTensor2<T> w2, b2;  // [mlp x h], [1 x h]
  LoraPair<T> lora_q, lora_k, lora_v, lora_o;
};

template <class T>
struct BasicModelParams {
  BasicTensor2<T> embeddings;  // [(vocab_base + 2) x h]
  BasicTensor2<T> positions;   // [max_seq x h], empty under rotary encoding
  std::vector<LayerParams<T>> layers;
  BasicTensor2<T> lnf_gain, lnf_bias;
  BasicTensor2<T> lm_head;  // [h x (vocab_base + 2)]

  // Visits every named parameter tensor in the fixed checkpoint order.
  // Empty tensors (unused adapters, absent position table) are skipped.
  template <class Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  template <class U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> out;
    out.embeddings = embeddings.template cast<U>();
    out.positions = positions.template cast<U>();
    out.lnf_gain = lnf_gain.template cast<U>();
    out.lnf_bias = lnf_bias.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    for (const auto& L : layers) {
      LayerParams<U> o;
      o.ln1_gain = L.ln1_gain.template cast<U>();
      o.ln1_bias = L.ln1_bias.template cast<U>();
      o.wq = L.wq.template cast<U>();
      o.wk = L.wk.template cast<U>();
      o.wv = L.wv.template cast<U>();
      o.wo = L.wo.template cast<U>();
      o.ln2_gain = L.ln2_gain.template cast<U>();
      o.ln2_bias = L.ln2_bias.template cast<U>();
      o.w1 = L.w1.template cast<U>();
      o.b1 = L.b1.template cast<U>();
      o.w2 = L.w2.template cast<U>();
      o.b2 = L.b2.template cast<U>();
      auto cp = [](const LoraPair<T>& p) {
        return LoraPair<U>{p.a.template cast<U>(), p.b.template cast<U>()};
      };
      o.lora_q = cp(L.lora_q);
      o.lora_k = cp(L.lora_k);
      o.lora_v = cp(L.lora_v);
      o.lora_o = cp(L.lora_o);
      out.layers.push_back(std::move(o));
    }
    return out;
  }

  friend bool operator==(const BasicModelParams& a, const BasicModelParams& b) {
    std::vector<const BasicTensor2<T>*> ta, tb;
    a.for_each([&](const std::string&, const BasicTensor2<T>& t) { ta.push_back(&t); });
    b.for_each([&](const std::string&, const BasicTensor2<T>& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (!(*ta[i] == *tb[i])) return false;
    return true;
  }

 private:
  template <class Self, class Fn>
  static void visit(Self& self, Fn& fn) {
    auto emit = [&](const std::string& name, auto& t) {
      if (!t.empty()) fn(name, t);
    };
    emit("embeddings", self.embeddings);
    emit("positions", self.positions);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& L = self.layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      emit(p + "ln1_gain", L.ln1_gain);
      emit(p + "ln1_bias", L.ln1_bias);
      emit(p + "wq", L.wq);
      emit(p + "wk", L.wk);
      emit(p + "wv", L.wv);
      emit(p + "wo", L.wo);
      emit(p + "ln2_gain", L.ln2_gain);
      emit(p + "ln2_bias", L.ln2_bias);
      emit(p + "w1", L.w1);
      emit(p + "b1", L.b1);
      emit(p + "w2", L.w2);
      emit(p + "b2", L.b2);
      emit(p + "lora_q.a", L.lora_q.a);
      emit(p + "lora_q.b", L.lora_q.b);
      emit(p + "lora_k.a", L.lora_k.a);
      emit(p + "lora_k.b", L.lora_k.b);
      emit(p + "lora_v.a", L.lora_v.a);
      emit(p + "lora_v.b", L.lora_v.b);
      emit(p + "lora_o.a", L.lora_o.a);
      emit(p + "lora_o.b", L.lora_o.b);
    }
    emit("lnf_gain", self.lnf_gain);
    emit("lnf_bias", self.lnf_bias);
    emit("lm_head", self.lm_head);
  }
};

using ModelParams = BasicModelParams<float>;

// Identifiers used by the trainable mask. The two marking-token rows of
// the embedding table are addressed individually; everything else by the
// tensor name used in for_each().
inline const std::string kMarkLRow = "embeddings.mark_l";
inline const std::string kMarkRRow = "embeddings.mark_r";

inline bool is_lora_name(const std::string& name) {
  return name.find(".lora_") != std::string::npos;
}

// The fine-tuning trainable set: both marking-token embedding rows and every
// LoRA matrix. Everything else is frozen.
template <class T>
std::set<std::string> trainable_mask(const BasicModelParams<T>& params) {
  std::set<std::string> out{kMarkLRow, kMarkRRow};
  params.for_each([&](const std::string& name, const BasicTensor2<T>&) {
    if (is_lora_name(name)) out.insert(name);
  });
  return out;
}

template <class T>
BasicModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  constexpr double kStd = 0.02;
  const std::size_t h = cfg.hidden;
  const std::size_t r = cfg.lora_rank;
  BasicModelParams<T> p;
  p.embeddings = random_normal<T>(cfg.vocab_size(), h, kStd, rng);
  // Marking rows start at the mean of the base rows.
  for (std::size_t c = 0; c < h; ++c) {
    double mean = 0.0;
    for (std::size_t t = 0; t < cfg.vocab_base; ++t) mean += p.embeddings(t, c);
    mean /= double(cfg.vocab_base);
    p.embeddings(cfg.vocab_base, c) = T(mean);
    p.embeddings(cfg.vocab_base + 1, c) = T(mean);
  }
  if (cfg.position == PositionScheme::learned_absolute)
    p.positions = random_normal<T>(cfg.max_seq, h, kStd, rng);
  auto lora = [&](bool on) {
    LoraPair<T> pair;
    if (on && r > 0) {
      pair.a = random_normal<T>(h, r, 1.0 / std::sqrt(double(h)), rng);
      pair.b = BasicTensor2<T>(r, h, T(0));
    }
    return pair;
  };
  const bool all_targets = cfg.lora_targets == LoraTargets::qkvo;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    LayerParams<T> L;
    L.ln1_gain = BasicTensor2<T>(1, h, T(1));
    L.ln1_bias = BasicTensor2<T>(1, h, T(0));
    L.wq = random_normal<T>(h, h, kStd, rng);
    L.wk = random_normal<T>(h, h, kStd, rng);
    L.wv = random_normal<T>(h, h, kStd, rng);
    L.wo = random_normal<T>(h, h, kStd / std::sqrt(2.0 * double(cfg.layers)), rng);
    L.ln2_gain = BasicTensor2<T>(1, h, T(1));
    L.ln2_bias = BasicTensor2<T>(1, h, T(0));
    L.w1 = random_normal<T>(h, cfg.mlp_dim, kStd, rng);
    L.b1 = BasicTensor2<T>(1, cfg.mlp_dim, T(0));
    L.w2 = random_normal<T>(cfg.mlp_dim, h, kStd / std::sqrt(2.0 * double(cfg.layers)), rng);
    L.b2 = BasicTensor2<T>(1, h, T(0));
    L.lora_q = lora(all_targets);
    L.lora_k = lora(true);
    L.lora_v = lora(true);
    L.lora_o = lora(all_targets);
    p.layers.push_back(std::move(L));
  }
  p.lnf_gain = BasicTensor2<T>(1, h, T(1));
  p.lnf_bias = BasicTensor2<T>(1, h, T(0));
  p.lm_head = random_normal<T>(h, cfg.vocab_size(), kStd, rng);
  return p;
}

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  return init_params<float>(cfg, seed);
}

// Low-rank update (x.A).B * scale; books 2nhr + 2nrh FLOPs under lora.
template <class T>
BasicTensor2<T> lora_delta(const BasicTensor2<T>& x, const BasicTensor2<T>& a,
                           const BasicTensor2<T>& b, FlopsLedger& ledger, double scale = 1.0) {
  if (x.cols() != a.rows() || a.cols() != b.rows() || b.cols() != x.cols())
    throw ShapeError("lora_delta: " + shape_str(x.rows(), x.cols()) + " . " +
                     shape_str(a.rows(), a.cols()) + " . " + shape_str(b.rows(), b.cols()));
  BasicTensor2<T> out = matmul(matmul(x, a, ledger, FlopCategory::lora), b, ledger,
                               FlopCategory::lora);
  if (scale != 1.0)
    for (auto& v : out.values()) v = static_cast<T>(v * scale);
  return out;
}

namespace detail {

// cos/sin of position * base^(-2i/d) for positions [pos0, pos0 + n).
struct RopeTable {
  std::size_t half = 0;
  std::vector<float> cos, sin;

  RopeTable(std::size_t pos0, std::size_t n, std::size_t head_dim, double base)
      : half(head_dim / 2), cos(n * half), sin(n * half) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * double(i) / double(head_dim));
        const double ang = double(pos0 + r) * freq;
        cos[r * half + i] = float(std::cos(ang));
        sin[r * half + i] = float(std::sin(ang));
      }
    }
  }

  void apply(Tensor2& x, std::size_t heads, std::size_t head_dim) const {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto row = x.row(r);
      const float* c = cos.data() + r * half;
      const float* s = sin.data() + r * half;
      for (std::size_t hd = 0; hd < heads; ++hd) {
        float* v = row.data() + hd * head_dim;
        for (std::size_t i = 0; i < half; ++i) {
          const float x0 = v[2 * i];
          const float x1 = v[2 * i + 1];
          v[2 * i] = x0 * c[i] - x1 * s[i];
          v[2 * i + 1] = x0 * s[i] + x1 * c[i];
        }
      }
    }
  }
};

using RowMat = Tensor2::EigenMat;
using StridedConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

// Causal multi-head attention of query rows q (absolute positions
// q_pos0 + i) against the first kv_len rows of the cache storage.
inline Tensor2 attention(const Tensor2& q, std::size_t q_pos0, const Tensor2& keys,
                         const Tensor2& values, std::size_t kv_len, std::size_t heads,
                         FlopsLedger& ledger) {
  constexpr std::size_t kBlock = 128;
  const std::size_t h = q.cols();
  const std::size_t d = h / heads;
  const std::size_t n = q.rows();
  const float scale = 1.0f / std::sqrt(float(d));
  Tensor2 out(n, h);
  RowMat scores;
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
      const std::size_t r1 = std::min(n, r0 + kBlock);
      const std::size_t lim = std::min(kv_len, q_pos0 + r1);
      StridedConst qh(q.data() + r0 * h + hd * d, Eigen::Index(r1 - r0), Eigen::Index(d),
                      Eigen::OuterStride<>(Eigen::Index(h)));
      StridedConst kh(keys.data() + hd * d, Eigen::Index(lim), Eigen::Index(d),
                      Eigen::OuterStride<>(Eigen::Index(h)));
      StridedConst vh(values.data() + hd * d, Eigen::Index(lim), Eigen::Index(d),
                      Eigen::OuterStride<>(Eigen::Index(h)));
      scores.resize(Eigen::Index(r1 - r0), Eigen::Index(lim));
      scores.noalias() = qh * kh.transpose();
      for (std::size_t r = r0; r < r1; ++r) {
        const std::size_t visible = std::min(kv_len, q_pos0 + r + 1);
        float* srow = scores.data() + (r - r0) * lim;
        Eigen::Map<Eigen::ArrayXf> live(srow, Eigen::Index(visible));
        live = (live * scale - live.maxCoeff() * scale).exp();
        live *= 1.0f / live.sum();
        std::fill(srow + visible, srow + lim, 0.0f);
      }
      Strided oh(out.data() + r0 * h + hd * d, Eigen::Index(r1 - r0), Eigen::Index(d),
                 Eigen::OuterStride<>(Eigen::Index(h)));
      oh.noalias() = scores * vh;
    }
  }
  // Book the causal work only: row i sees q_pos0 + i + 1 keys.
  std::uint64_t visible_total = 0;
  for (std::size_t r = 0; r < n; ++r) visible_total += std::min(kv_len, q_pos0 + r + 1);
  ledger.add(FlopCategory::other, 2 * 2 * visible_total * h);
  return out;
}

inline void add_bias(Tensor2& x, const Tensor2& bias) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias(0, c);
  }
}

inline Tensor2 project(const Tensor2& x, const Tensor2& w, const LoraPair<float>& lora,
                       double lora_scale, FlopCategory cat, FlopsLedger& ledger) {
  Tensor2 y = matmul(x, w, ledger, cat);
  if (lora.active()) add_inplace(y, lora_delta(x, lora.a, lora.b, ledger, lora_scale));
  return y;
}

}  // namespace detail

enum class LogitsMode { all, last };

struct ForwardOutput {
  Tensor2 logits;  // one row per new token, or a single row under LogitsMode::last
};

// Runs new_tokens at absolute positions [start_position, start_position + n)
// against the cached prefix and appends their K/V rows to the cache.
//
// K and V projections are booked under kv_projection, adapter products
// under lora, everything else (Q/O projections, attention, MLP, head) under
// other. Under LogitsMode::last the final layer computes attention and MLP
// for the last row only; every layer still caches K/V for all rows.
inline ForwardOutput forward_incremental(const ModelParams& params, const ModelConfig& cfg,
                                         KvCache& cache, std::span<const TokenId> new_tokens,
                                         std::size_t start_position, FlopsLedger& ledger,
                                         LogitsMode mode = LogitsMode::all) {
  if (cache.logical_len() != start_position)
    throw ShapeError("forward: cache length " + std::to_string(cache.logical_len()) +
                     " != start position " + std::to_string(start_position));
  const std::size_t n = new_tokens.size();
  if (n == 0) throw ShapeError("forward: no tokens");
  if (start_position + n > cfg.max_seq)
    throw CapacityError("forward: position " + std::to_string(start_position + n) +
                        " exceeds max_seq " + std::to_string(cfg.max_seq));
  cache.check_room(n);
  const std::size_t h = cfg.hidden;
  const std::size_t vocab = cfg.vocab_size();
  const double ls = cfg.lora_scale();

  Tensor2 x(n, h);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId t = new_tokens[i];
    if (t >= vocab)
      throw std::out_of_range("forward: token id " + std::to_string(t) + " >= vocab " +
                              std::to_string(vocab));
    auto src = params.embeddings.row(t);
    std::copy(src.begin(), src.end(), x.row(i).begin());
    if (!params.positions.empty()) {
      auto pos = params.positions.row(start_position + i);
      auto dst = x.row(i);
      for (std::size_t c = 0; c < h; ++c) dst[c] += pos[c];
    }
  }

  const bool rotary = cfg.position == PositionScheme::rotary;
  const detail::RopeTable rope = rotary
                                     ? detail::RopeTable(start_position, n, cfg.head_dim(),
                                                         cfg.rope_base)
                                     : detail::RopeTable(0, 0, 2, cfg.rope_base);

  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& L = params.layers[li];
    const bool last_only = mode == LogitsMode::last && li + 1 == params.layers.size();
    Tensor2 a = layer_norm(x, L.ln1_gain.values(), L.ln1_bias.values(), cfg.norm_eps);
    Tensor2 k = detail::project(a, L.wk, L.lora_k, ls, FlopCategory::kv_projection, ledger);
    Tensor2 v = detail::project(a, L.wv, L.lora_v, ls, FlopCategory::kv_projection, ledger);
    if (rotary) rope.apply(k, cfg.heads, cfg.head_dim());
    cache.stage(li, k, v);

    std::size_t q_first = 0;
    if (last_only) {
      q_first = n - 1;
      a = a.slice_rows(n - 1, n);
      x = x.slice_rows(n - 1, n);
    }
    Tensor2 q = detail::project(a, L.wq, L.lora_q, ls, FlopCategory::other, ledger);
    if (rotary) {
      if (last_only) {
        detail::RopeTable(start_position + q_first, 1, cfg.head_dim(), cfg.rope_base)
            .apply(q, cfg.heads, cfg.head_dim());
      } else {
        rope.apply(q, cfg.heads, cfg.head_dim());
      }
    }
    Tensor2 att = detail::attention(q, start_position + q_first, cache.key_storage(li),
                                    cache.value_storage(li), start_position + n, cfg.heads,
                                    ledger);
    add_inplace(x, detail::project(att, L.wo, L.lora_o, ls, FlopCategory::other, ledger));

    Tensor2 m = layer_norm(x, L.ln2_gain.values(), L.ln2_bias.values(), cfg.norm_eps);
    Tensor2 hid = matmul(m, L.w1, ledger, FlopCategory::other);
    detail::add_bias(hid, L.b1);
    gelu_inplace(hid.values());
    Tensor2 mo = matmul(hid, L.w2, ledger, FlopCategory::other);
    detail::add_bias(mo, L.b2);
    add_inplace(x, mo);
  }
  cache.commit(n);

  if (mode == LogitsMode::last && x.rows() > 1) x = x.slice_rows(x.rows() - 1, x.rows());
  Tensor2 f = layer_norm(x, params.lnf_gain.values(), params.lnf_bias.values(), cfg.norm_eps);
  return {matmul(f, params.lm_head, ledger, FlopCategory::other)};
}

inline KvCache make_cache(const ModelConfig& cfg) {
  return KvCache(cfg.layers, cfg.hidden, cfg.max_seq);
}

}  // namespace ralm

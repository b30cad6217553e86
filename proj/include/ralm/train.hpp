#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ralm/error.hpp"
#include "ralm/generation.hpp"
#include "ralm/model.hpp"
#include "ralm/numerics.hpp"
#include "ralm/rng.hpp"

namespace ralm {

// One training sequence. mask[i] marks tokens[i] as a target, predicted
// from the logits at position i - 1; mask[0] is always false.
struct TrainExample {
  Tokens tokens;
  std::vector<bool> mask;

  std::size_t target_count() const { return std::size_t(std::count(mask.begin(), mask.end(), true)); }
};

using TrainExamples = std::vector<TrainExample>;

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t steps = 100;
  double warmup_fraction = 0.10;
  std::size_t batch_size = 4;
  std::size_t stride = 16;
  std::size_t max_seq = 128;
  std::size_t lora_rank = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
      throw std::invalid_argument("train config: warmup fraction must be in [0, 1]");
    if (steps == 0) throw std::invalid_argument("train config: steps must be >= 1");
  }
  std::size_t warmup_steps() const {
    return std::size_t(std::llround(warmup_fraction * double(steps)));
  }
};

// Linear warm-up from 0 to the peak rate, then cosine decay to 0 at `steps`.
inline double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  const std::size_t warm = cfg.warmup_steps();
  if (step < warm) return cfg.learning_rate * double(step) / double(warm);
  if (cfg.steps <= warm) return cfg.learning_rate;
  const double progress = std::min(1.0, double(step - warm) / double(cfg.steps - warm));
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Gradients of the trainable set, keyed like trainable_mask(): LoRA
// tensors by name, marking rows as [1 x h] tensors.
template <class T>
using Gradients = std::map<std::string, BasicTensor2<T>>;

namespace train_detail {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const Mat<T>> as_mat(const BasicTensor2<T>& t) {
  return t.map();
}

template <class T>
struct NormTape {
  Mat<T> xhat;
  std::vector<double> rstd;
};

// Same arithmetic as layer_norm(): statistics in double, xhat rounded to T.
template <class T>
Mat<T> norm_forward(const Mat<T>& x, const BasicTensor2<T>& gain, const BasicTensor2<T>& bias,
                    double eps, NormTape<T>& tape) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  Mat<T> y(rows, cols);
  tape.xhat.resize(rows, cols);
  tape.rstd.assign(std::size_t(rows), 0.0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) mean += x(r, c);
    mean /= double(cols);
    double var = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= double(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    tape.rstd[std::size_t(r)] = inv;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const T xh = static_cast<T>((x(r, c) - mean) * inv);
      tape.xhat(r, c) = xh;
      y(r, c) = xh * gain(0, std::size_t(c)) + bias(0, std::size_t(c));
    }
  }
  return y;
}

template <class T>
Mat<T> norm_backward(const Mat<T>& dy, const BasicTensor2<T>& gain, const NormTape<T>& tape) {
  const auto rows = dy.rows();
  const auto cols = dy.cols();
  Mat<T> dx(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mean_g = 0.0, mean_gx = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double g = double(dy(r, c)) * gain(0, std::size_t(c));
      mean_g += g;
      mean_gx += g * tape.xhat(r, c);
    }
    mean_g /= double(cols);
    mean_gx /= double(cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double g = double(dy(r, c)) * gain(0, std::size_t(c));
      dx(r, c) = static_cast<T>(tape.rstd[std::size_t(r)] * (g - mean_g - tape.xhat(r, c) * mean_gx));
    }
  }
  return dx;
}

template <class T>
struct Rope {
  std::size_t half = 0;
  Mat<T> cos, sin;  // [n x half]

  Rope(std::size_t n, std::size_t head_dim, double base) : half(head_dim / 2), cos(n, half), sin(n, half) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * double(i) / double(head_dim));
        const double ang = double(r) * freq;
        // Rounded through float to match the inference tables.
        cos(r, i) = T(float(std::cos(ang)));
        sin(r, i) = T(float(std::sin(ang)));
      }
  }

  // direction +1 applies the rotation, -1 its transpose.
  void apply(Mat<T>& x, std::size_t heads, std::size_t head_dim, int direction) const {
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t i = 0; i < half; ++i) {
          const Eigen::Index c0 = Eigen::Index(hd * head_dim + 2 * i);
          const T x0 = x(r, c0);
          const T x1 = x(r, c0 + 1);
          const T c = cos(r, Eigen::Index(i));
          const T s = direction > 0 ? sin(r, Eigen::Index(i)) : -sin(r, Eigen::Index(i));
          x(r, c0) = x0 * c - x1 * s;
          x(r, c0 + 1) = x0 * s + x1 * c;
        }
  }
};

template <class T>
struct LoraTape {
  Mat<T> u;  // input . A
};

template <class T>
Mat<T> project_forward(const Mat<T>& x, const BasicTensor2<T>& w, const LoraPair<T>& lora, double scale,
                       LoraTape<T>& tape) {
  Mat<T> y = x * as_mat(w);
  if (lora.active()) {
    tape.u = x * as_mat(lora.a);
    Mat<T> delta = tape.u * as_mat(lora.b);
    if (scale != 1.0) delta *= T(scale);
    y += delta;
  }
  return y;
}

// Returns d(input); adds adapter gradients when the pair is trainable.
template <class T>
Mat<T> project_backward(const Mat<T>& x, const Mat<T>& dy, const BasicTensor2<T>& w,
                        const LoraPair<T>& lora, double scale, const LoraTape<T>& tape,
                        const std::string& name, Gradients<T>& grads) {
  Mat<T> dx = dy * as_mat(w).transpose();
  if (lora.active()) {
    const Mat<T> dyb = (dy * as_mat(lora.b).transpose()) * T(scale);  // d(u)
    dx += dyb * as_mat(lora.a).transpose();
    auto& ga = grads[name + ".a"];
    auto& gb = grads[name + ".b"];
    if (ga.empty()) ga = BasicTensor2<T>(lora.a.rows(), lora.a.cols());
    if (gb.empty()) gb = BasicTensor2<T>(lora.b.rows(), lora.b.cols());
    ga.map() += x.transpose() * dyb;
    gb.map() += (tape.u.transpose() * dy) * T(scale);
  }
  return dx;
}

template <class T>
struct LayerTape {
  Mat<T> x_in, a, q, k, v, att, x1, m, hpre, g;
  NormTape<T> ln1, ln2;
  LoraTape<T> lq, lk, lv, lo;
  std::vector<Mat<T>> probs;  // per head [n x n]
};

template <class T>
struct Tape {
  std::vector<LayerTape<T>> layers;
  Mat<T> x_final;
  NormTape<T> lnf;
  Mat<T> f;
};

template <class T>
Mat<T> forward_full(const BasicModelParams<T>& p, const ModelConfig& cfg, std::span<const TokenId> tokens,
                    Tape<T>& tape) {
  const std::size_t n = tokens.size();
  const std::size_t h = cfg.hidden;
  const std::size_t heads = cfg.heads;
  const std::size_t hd = cfg.head_dim();
  const double ls = cfg.lora_scale();
  if (n > cfg.max_seq) throw CapacityError("training sequence exceeds max_seq");
  Mat<T> x(n, h);
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] >= cfg.vocab_size()) throw std::out_of_range("training token out of range");
    for (std::size_t c = 0; c < h; ++c) {
      x(i, c) = p.embeddings(tokens[i], c);
      if (!p.positions.empty()) x(i, c) += p.positions(i, c);
    }
  }
  const bool rotary = cfg.position == PositionScheme::rotary;
  const Rope<T> rope(rotary ? n : 0, hd, cfg.rope_base);
  const T scale = T(1) / std::sqrt(T(hd));
  tape.layers.assign(p.layers.size(), {});
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& L = p.layers[li];
    auto& t = tape.layers[li];
    t.x_in = x;
    t.a = norm_forward(x, L.ln1_gain, L.ln1_bias, cfg.norm_eps, t.ln1);
    t.q = project_forward(t.a, L.wq, L.lora_q, ls, t.lq);
    t.k = project_forward(t.a, L.wk, L.lora_k, ls, t.lk);
    t.v = project_forward(t.a, L.wv, L.lora_v, ls, t.lv);
    if (rotary) {
      rope.apply(t.q, heads, hd, +1);
      rope.apply(t.k, heads, hd, +1);
    }
    t.att.setZero(n, h);
    t.probs.assign(heads, Mat<T>());
    for (std::size_t head = 0; head < heads; ++head) {
      const auto cols = Eigen::seqN(Eigen::Index(head * hd), Eigen::Index(hd));
      Mat<T> s = t.q(Eigen::all, cols) * t.k(Eigen::all, cols).transpose();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j <= r; ++j) s(r, j) *= scale;
        for (std::size_t j = r + 1; j < n; ++j) s(r, j) = 0;
        softmax_row_inplace(std::span<T>(s.data() + r * n, r + 1));
      }
      t.att(Eigen::all, cols) = s * t.v(Eigen::all, cols);
      t.probs[head] = std::move(s);
    }
    x += project_forward(t.att, L.wo, L.lora_o, ls, t.lo);
    t.x1 = x;
    t.m = norm_forward(x, L.ln2_gain, L.ln2_bias, cfg.norm_eps, t.ln2);
    t.hpre = t.m * as_mat(L.w1);
    t.hpre.rowwise() += as_mat(L.b1).row(0);
    t.g = t.hpre.unaryExpr([](T v) { return gelu(v); });
    Mat<T> mo = t.g * as_mat(L.w2);
    mo.rowwise() += as_mat(L.b2).row(0);
    x += mo;
  }
  tape.x_final = x;
  tape.f = norm_forward(x, p.lnf_gain, p.lnf_bias, cfg.norm_eps, tape.lnf);
  return tape.f * as_mat(p.lm_head);
}

template <class T>
void backward_full(const BasicModelParams<T>& p, const ModelConfig& cfg, std::span<const TokenId> tokens,
                   const Tape<T>& tape, const Mat<T>& dlogits, Gradients<T>& grads) {
  const std::size_t n = tokens.size();
  const std::size_t heads = cfg.heads;
  const std::size_t hd = cfg.head_dim();
  const double ls = cfg.lora_scale();
  const bool rotary = cfg.position == PositionScheme::rotary;
  const Rope<T> rope(rotary ? n : 0, hd, cfg.rope_base);
  const T scale = T(1) / std::sqrt(T(hd));

  Mat<T> dx = norm_backward<T>(dlogits * as_mat(p.lm_head).transpose(), p.lnf_gain, tape.lnf);
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& L = p.layers[li];
    const auto& t = tape.layers[li];
    const std::string prefix = "layer" + std::to_string(li) + ".";
    // MLP
    Mat<T> dg = dx * as_mat(L.w2).transpose();
    for (Eigen::Index r = 0; r < dg.rows(); ++r)
      for (Eigen::Index c = 0; c < dg.cols(); ++c) dg(r, c) *= gelu_grad(t.hpre(r, c));
    Mat<T> dm = dg * as_mat(L.w1).transpose();
    dx += norm_backward(dm, L.ln2_gain, t.ln2);
    // attention output projection
    Mat<T> datt = project_backward(t.att, dx, L.wo, L.lora_o, ls, t.lo, prefix + "lora_o", grads);
    Mat<T> dq = Mat<T>::Zero(Eigen::Index(n), t.q.cols());
    Mat<T> dk = Mat<T>::Zero(Eigen::Index(n), t.k.cols());
    Mat<T> dv = Mat<T>::Zero(Eigen::Index(n), t.v.cols());
    for (std::size_t head = 0; head < heads; ++head) {
      const auto cols = Eigen::seqN(Eigen::Index(head * hd), Eigen::Index(hd));
      const Mat<T>& P = t.probs[head];
      const Mat<T> dO = datt(Eigen::all, cols);
      dv(Eigen::all, cols) = P.transpose() * dO;
      Mat<T> dP = dO * t.v(Eigen::all, cols).transpose();
      for (std::size_t r = 0; r < n; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j <= r; ++j) dot += dP(r, j) * P(r, j);
        for (std::size_t j = 0; j <= r; ++j) dP(r, j) = P(r, j) * (dP(r, j) - dot) * scale;
        for (std::size_t j = r + 1; j < n; ++j) dP(r, j) = 0;
      }
      dq(Eigen::all, cols) = dP * t.k(Eigen::all, cols);
      dk(Eigen::all, cols) = dP.transpose() * t.q(Eigen::all, cols);
    }
    if (rotary) {
      rope.apply(dq, heads, hd, -1);
      rope.apply(dk, heads, hd, -1);
    }
    Mat<T> da = project_backward(t.a, dq, L.wq, L.lora_q, ls, t.lq, prefix + "lora_q", grads);
    da += project_backward(t.a, dk, L.wk, L.lora_k, ls, t.lk, prefix + "lora_k", grads);
    da += project_backward(t.a, dv, L.wv, L.lora_v, ls, t.lv, prefix + "lora_v", grads);
    dx += norm_backward(da, L.ln1_gain, t.ln1);
  }
  const Vocabulary vocab{cfg.vocab_base};
  for (auto [id, name] : {std::pair{vocab.mark_l(), kMarkLRow}, std::pair{vocab.mark_r(), kMarkRRow}}) {
    auto& g = grads[name];
    if (g.empty()) g = BasicTensor2<T>(1, cfg.hidden);
    for (std::size_t i = 0; i < n; ++i)
      if (tokens[i] == id) g.map().row(0) += dx.row(Eigen::Index(i));
  }
}

}  // namespace train_detail

// Cross-entropy summed over mask-true positions, using only the logit rows
// that predict them. Returns the summed NLL; `count` receives the number
// of targets.
template <class T>
double masked_nll(const BasicTensor2<T>& logits, const TrainExample& ex, std::size_t& count) {
  if (logits.rows() != ex.tokens.size() || ex.mask.size() != ex.tokens.size())
    throw ShapeError("masked_nll: logits/tokens/mask length mismatch");
  double total = 0.0;
  count = 0;
  for (std::size_t i = 1; i < ex.tokens.size(); ++i) {
    if (!ex.mask[i]) continue;
    auto row = logits.row(i - 1);
    double mx = -1e300;
    for (T v : row) mx = std::max(mx, double(v));
    double sum = 0.0;
    for (T v : row) sum += std::exp(double(v) - mx);
    total += (mx + std::log(sum)) - double(row[ex.tokens[i]]);
    ++count;
  }
  return total;
}

// Full-sequence logits through the training path (no cache).
template <class T>
BasicTensor2<T> training_logits(const BasicModelParams<T>& p, const ModelConfig& cfg,
                                std::span<const TokenId> tokens) {
  train_detail::Tape<T> tape;
  auto logits = train_detail::forward_full(p, cfg, tokens, tape);
  BasicTensor2<T> out(std::size_t(logits.rows()), std::size_t(logits.cols()));
  out.map() = logits;
  return out;
}

inline void check_example(const TrainExample& ex) {
  if (ex.mask.size() != ex.tokens.size()) throw ShapeError("train example: mask length mismatch");
  if (!ex.mask.empty() && ex.mask[0]) throw std::invalid_argument("train example: mask[0] must be false");
}

// Mean target-token loss over a batch and its gradient w.r.t. the
// trainable set.
template <class T>
double loss_and_gradients(const BasicModelParams<T>& p, const ModelConfig& cfg, const TrainExamples& batch,
                          Gradients<T>* grads) {
  std::size_t total_count = 0;
  for (const auto& ex : batch) {
    check_example(ex);
    total_count += ex.target_count();
  }
  if (total_count == 0) throw std::invalid_argument("train: batch has no target tokens (all-false mask)");
  double total = 0.0;
  for (const auto& ex : batch) {
    train_detail::Tape<T> tape;
    const auto logits = train_detail::forward_full(p, cfg, ex.tokens, tape);
    train_detail::Mat<T> dlogits = train_detail::Mat<T>::Zero(logits.rows(), logits.cols());
    for (std::size_t i = 1; i < ex.tokens.size(); ++i) {
      if (!ex.mask[i]) continue;
      const auto r = Eigen::Index(i - 1);
      double mx = -1e300;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) mx = std::max(mx, double(logits(r, c)));
      double sum = 0.0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(double(logits(r, c)) - mx);
      const double lse = mx + std::log(sum);
      total += lse - double(logits(r, Eigen::Index(ex.tokens[i])));
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        dlogits(r, c) = T(std::exp(double(logits(r, c)) - lse) / double(total_count));
      dlogits(r, Eigen::Index(ex.tokens[i])) -= T(1.0 / double(total_count));
    }
    if (grads) train_detail::backward_full(p, cfg, ex.tokens, tape, dlogits, *grads);
  }
  return total / double(total_count);
}

// Reads or writes one trainable scalar by mask identifier and flat index.
template <class T>
T& trainable_scalar(BasicModelParams<T>& p, const ModelConfig& cfg, const std::string& name, std::size_t idx) {
  if (name == kMarkLRow) return p.embeddings(cfg.vocab_base, idx);
  if (name == kMarkRRow) return p.embeddings(cfg.vocab_base + 1, idx);
  BasicTensor2<T>* found = nullptr;
  p.for_each([&](const std::string& n, BasicTensor2<T>& t) {
    if (n == name) found = &t;
  });
  if (!found) throw std::invalid_argument("unknown trainable parameter '" + name + "'");
  return found->values()[idx];
}

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
  std::size_t t = 0;
};

// One optimizer step on the trainable set only. Returns the mean loss of
// the batch before the update.
inline double train_step(ModelParams& params, const ModelConfig& cfg, const TrainExamples& batch,
                         const TrainConfig& tcfg, std::size_t step, AdamState& opt) {
  Gradients<float> grads;
  const double loss = loss_and_gradients(params, cfg, batch, &grads);
  const double lr = learning_rate_at(tcfg, step);
  ++opt.t;
  const double bc1 = 1.0 - std::pow(tcfg.beta1, double(opt.t));
  const double bc2 = 1.0 - std::pow(tcfg.beta2, double(opt.t));
  const auto mask = trainable_mask(params);
  for (const auto& name : mask) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const auto g = it->second.values();
    auto& m = opt.m[name];
    auto& v = opt.v[name];
    m.resize(g.size(), 0.0);
    v.resize(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = tcfg.beta1 * m[i] + (1.0 - tcfg.beta1) * g[i];
      v[i] = tcfg.beta2 * v[i] + (1.0 - tcfg.beta2) * double(g[i]) * g[i];
      const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + tcfg.adam_eps);
      if (update != 0.0) {
        float& w = trainable_scalar(params, cfg, name, i);
        w = static_cast<float>(w - update);
      }
    }
  }
  return loss;
}

// Base weights of `base` under freshly initialized adapters of the given
// rank (B = 0, so the model function is unchanged).
inline ModelParams attach_lora(const ModelParams& base, ModelConfig& cfg, std::size_t rank, std::uint64_t seed) {
  ModelConfig with = cfg;
  with.lora_rank = rank;
  ModelParams out = init_params(with, seed);
  std::map<std::string, const Tensor2*> src;
  base.for_each([&](const std::string& name, const Tensor2& t) { src[name] = &t; });
  out.for_each([&](const std::string& name, Tensor2& t) {
    if (is_lora_name(name)) return;
    auto it = src.find(name);
    if (it == src.end() || it->second->rows() != t.rows() || it->second->cols() != t.cols())
      throw DataError("attach_lora: base model lacks tensor '" + name + "'");
    t = *it->second;
  });
  cfg = with;
  return out;
}

struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

// Runs cfg.steps optimizer steps. Batches walk a seeded permutation of the
// examples, reshuffled at every pass.
template <class OnStep>
std::vector<TrainLogEntry> train(ModelParams& params, const ModelConfig& cfg, const TrainExamples& examples,
                                 const TrainConfig& tcfg, std::uint64_t seed, OnStep&& on_step) {
  tcfg.validate();
  if (examples.empty()) throw std::invalid_argument("train: no examples");
  if (tcfg.batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
  Rng rng(seed);
  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();
  AdamState opt;
  std::vector<TrainLogEntry> log;
  for (std::size_t step = 0; step < tcfg.steps; ++step) {
    TrainExamples batch;
    while (batch.size() < tcfg.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[std::size_t(rng.uniform_int(0, i - 1))]);
        cursor = 0;
      }
      batch.push_back(examples[order[cursor++]]);
    }
    TrainLogEntry e;
    e.step = step;
    e.lr = learning_rate_at(tcfg, step);
    e.loss = train_step(params, cfg, batch, tcfg, step, opt);
    on_step(e);
    log.push_back(e);
  }
  return log;
}

inline std::vector<TrainLogEntry> train(ModelParams& params, const ModelConfig& cfg, const TrainExamples& examples,
                                        const TrainConfig& tcfg, std::uint64_t seed) {
  return train(params, cfg, examples, tcfg, seed, [](const TrainLogEntry&) {});
}

struct GradCheckResult {
  std::size_t coordinates = 0;
  std::size_t passed = 0;
  double worst_rel = 0.0;
  double pass_fraction() const { return coordinates == 0 ? 0.0 : double(passed) / double(coordinates); }
};

// Central finite differences on every trainable scalar, step
// rel_step * max(|w|, 1e-3). A coordinate passes when
// |analytic - numeric| <= tol * max(|analytic|, |numeric|), or both are
// below 1e-12 in magnitude.
template <class T>
GradCheckResult gradient_check(const BasicModelParams<T>& params, const ModelConfig& cfg,
                               const TrainExamples& batch, double rel_step = 1e-3, double tol = 1e-3) {
  Gradients<T> grads;
  loss_and_gradients(params, cfg, batch, &grads);
  BasicModelParams<T> work = params;
  GradCheckResult res;
  for (const auto& name : trainable_mask(params)) {
    const auto& g = grads.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      T& w = trainable_scalar(work, cfg, name, i);
      const T orig = w;
      const double step = rel_step * std::max(std::abs(double(orig)), 1e-3);
      w = T(double(orig) + step);
      const double up = loss_and_gradients<T>(work, cfg, batch, nullptr);
      w = T(double(orig) - step);
      const double down = loss_and_gradients<T>(work, cfg, batch, nullptr);
      w = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = double(g.values()[i]);
      const double scale = std::max(std::abs(analytic), std::abs(numeric));
      const double err = std::abs(analytic - numeric);
      const bool ok = scale < 1e-12 || err <= tol * scale;
      if (scale >= 1e-12) res.worst_rel = std::max(res.worst_rel, err / scale);
      ++res.coordinates;
      if (ok) ++res.passed;
    }
  }
  return res;
}

// Offset of the target inside its window, uniform on {T/2, ..., T - s}.
inline std::size_t sample_target_start(Rng& rng, std::size_t max_seq, std::size_t stride) {
  if (stride == 0 || max_seq < 2 * stride)
    throw std::invalid_argument("target start: need T >= 2s");
  return std::size_t(rng.uniform_int(max_seq / 2, max_seq - stride));
}

struct DatasetConfig {
  std::size_t stride = 16;
  std::size_t max_seq = 128;
  std::size_t query_len = 16;
  ContextPattern pattern = ContextPattern::append;
  bool use_marks = true;
};

// Every aligned s-token block of the corpus stream whose window fits
// becomes one example: the window holds the u preceding tokens (u drawn
// from U{T/2, T-s}), the retrieval query is the last query_len of them,
// and evidence is placed according to the pattern.
inline TrainExamples build_training_set(std::span<const TokenId> corpus, const DatasetConfig& dc,
                                        const EvidenceSource& source, const Vocabulary& vocab,
                                        std::uint64_t seed) {
  const std::size_t s = dc.stride;
  const std::size_t T = dc.max_seq;
  if (s == 0 || T < 2 * s) throw std::invalid_argument("training set: need T >= 2s and s >= 1");
  if (corpus.size() <= T) throw DataError("training set: corpus of " + std::to_string(corpus.size()) +
                                          " tokens is not longer than T=" + std::to_string(T));
  if (dc.pattern != ContextPattern::none && !source)
    throw std::invalid_argument("training set: evidence source required for this pattern");
  Rng rng(seed);
  TrainExamples out;
  const std::size_t first = ((T - s) + s - 1) / s * s;
  for (std::size_t pos = first; pos + s <= corpus.size(); pos += s) {
    const std::size_t u = sample_target_start(rng, T, s);
    const auto prefix = corpus.subspan(pos - u, u);
    const auto target = corpus.subspan(pos, s);
    Tokens evidence;
    if (dc.pattern != ContextPattern::none) {
      const std::size_t q = std::min(dc.query_len, prefix.size());
      auto docs = source(prefix.subspan(prefix.size() - q, q), 1);
      evidence = wrap_evidence(docs.empty() ? Tokens{} : docs.front().tokens, dc.use_marks, vocab);
    }
    TrainExample ex;
    auto put = [&](std::span<const TokenId> part, bool is_target) {
      for (TokenId t : part) {
        ex.tokens.push_back(t);
        ex.mask.push_back(is_target && !vocab.is_mark(t));
      }
    };
    if (dc.pattern == ContextPattern::prepend) put(evidence, false);
    put(prefix, false);
    if (dc.pattern == ContextPattern::append) put(evidence, false);
    put(target, true);
    ex.mask[0] = false;
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw DataError("training set: corpus too short for any target");
  return out;
}

inline void save_examples_jsonl(const std::string& path, const TrainExamples& examples) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["tokens"] = ex.tokens;
    std::vector<int> mask(ex.mask.begin(), ex.mask.end());
    j["mask"] = mask;
    out << j.dump() << "\n";
  }
}

inline TrainExamples load_examples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  TrainExamples out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrainExample ex;
      ex.tokens = j.at("tokens").get<Tokens>();
      for (int m : j.at("mask").get<std::vector<int>>()) ex.mask.push_back(m != 0);
      check_example(ex);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("dataset '" + path + "': " + e.what());
    }
  }
  return out;
}

// Continuous-retrieval evaluation: each chunk (truncated to a multiple of
// s) is cut into prefixes x[0..js), j = 1 .. n_c/s - 1; each prefix plus
// its retrieved evidence predicts the next s tokens under teacher forcing.
struct PerplexityConfig {
  std::size_t stride = 16;
  std::size_t query_len = 16;
  ContextPattern pattern = ContextPattern::append;
  bool use_marks = true;
  bool include_marks = false;  // also score the predictions of marking tokens
  bool use_cache = true;       // false: fresh full forward per prefix
};

struct PerplexityResult {
  double nll_sum = 0.0;
  std::size_t count = 0;
  double perplexity() const { return std::exp(nll_sum / double(count)); }
};

namespace train_detail {

inline void score_row(std::span<const float> row, TokenId target, double& nll) {
  double mx = -1e300;
  for (float v : row) mx = std::max(mx, double(v));
  double sum = 0.0;
  for (float v : row) sum += std::exp(double(v) - mx);
  nll += (mx + std::log(sum)) - double(row[target]);
}

// Scores one chunk; returns (nll, count).
inline PerplexityResult score_chunk(const ModelParams& params, const ModelConfig& cfg,
                                    const EvidenceSource& source, std::span<const TokenId> chunk,
                                    const PerplexityConfig& pc) {
  const Vocabulary vocab = vocabulary_of(cfg);
  const std::size_t s = pc.stride;
  const std::size_t n = chunk.size() / s * s;
  PerplexityResult res;
  KvCache cache = make_cache(cfg);
  std::size_t cached_prefix = 0;  // append/none with cache: rows [0, cached_prefix) hold x
  for (std::size_t js = s; js + s <= n; js += s) {
    const auto prefix = chunk.subspan(0, js);
    const auto target = chunk.subspan(js, s);
    Tokens evidence;
    if (pc.pattern != ContextPattern::none) {
      const std::size_t q = std::min(pc.query_len, prefix.size());
      auto docs = source(prefix.subspan(js - q, q), 1);
      evidence = wrap_evidence(docs.empty() ? Tokens{} : docs.front().tokens, pc.use_marks, vocab);
    }
    // Context laid out as [lead ; tail], where tail = (evidence when
    // appended) + target[0 .. s-1). Targets are tail-relative positions.
    Tokens lead, tail;
    if (pc.pattern == ContextPattern::prepend) {
      lead = evidence;
      lead.insert(lead.end(), prefix.begin(), prefix.end());
    } else {
      lead.assign(prefix.begin(), prefix.end());
      if (pc.pattern == ContextPattern::append) tail = evidence;
    }
    const std::size_t evidence_in_tail = tail.size();
    tail.insert(tail.end(), target.begin(), target.end() - 1);
    // rows[p] predicts the token at combined position p of [last lead token ; tail]
    Tensor2 rows(tail.size() + 1, cfg.vocab_size());
    FlopsLedger scratch;
    if (pc.use_cache && pc.pattern != ContextPattern::prepend) {
      cache.truncate(cached_prefix);
      Tensor2 last = forward_incremental(params, cfg, cache, std::span<const TokenId>(lead).subspan(cached_prefix),
                                         cached_prefix, scratch, LogitsMode::last)
                         .logits;
      cached_prefix = lead.size();
      std::copy(last.values().begin(), last.values().end(), rows.row(0).begin());
      if (!tail.empty()) {
        Tensor2 t = forward_incremental(params, cfg, cache, tail, cache.logical_len(), scratch, LogitsMode::all)
                        .logits;
        std::copy(t.values().begin(), t.values().end(), rows.row(1).begin());
      }
    } else {
      Tokens ctx = lead;
      ctx.insert(ctx.end(), tail.begin(), tail.end());
      KvCache fresh(cfg.layers, cfg.hidden, ctx.size());
      Tensor2 all = forward_incremental(params, cfg, fresh, ctx, 0, scratch, LogitsMode::all).logits;
      for (std::size_t p = 0; p <= tail.size(); ++p) {
        auto src = all.row(lead.size() - 1 + p);
        std::copy(src.begin(), src.end(), rows.row(p).begin());
      }
    }
    // full tail including the last target token
    Tokens scored = tail;
    scored.push_back(target.back());
    for (std::size_t p = 0; p < scored.size(); ++p) {
      const bool is_target = p >= evidence_in_tail;
      const bool is_mark = vocab.is_mark(scored[p]);
      if (is_target || (pc.include_marks && is_mark)) {
        score_row(rows.row(p), scored[p], res.nll_sum);
        ++res.count;
      }
    }
    if (pc.include_marks && pc.pattern == ContextPattern::prepend) {
      // A leading <MARK_L> has no predecessor; <MARK_R> is predicted in-lead.
      for (std::size_t p = 1; p < lead.size(); ++p) {
        if (!vocab.is_mark(lead[p])) continue;
        Tensor2 ctx_logits = full_recompute_oracle(params, cfg, std::span<const TokenId>(lead).subspan(0, p));
        score_row(ctx_logits.row(0), lead[p], res.nll_sum);
        ++res.count;
      }
    }
  }
  return res;
}

}  // namespace train_detail

// Marking tokens are never targets; with include_marks their predictions
// are scored as well. Chunk results are summed in sorted order so the
// value does not depend on chunk order.
inline PerplexityResult perplexity_continuous(const ModelParams& params, const ModelConfig& cfg,
                                              const EvidenceSource& source,
                                              const std::vector<Tokens>& chunks, const PerplexityConfig& pc) {
  if (chunks.empty()) throw std::invalid_argument("perplexity: empty evaluation set");
  if (pc.stride == 0) throw std::invalid_argument("perplexity: stride must be >= 1");
  if (pc.pattern != ContextPattern::none && !source)
    throw std::invalid_argument("perplexity: evidence source required for this pattern");
  std::vector<std::pair<double, std::size_t>> parts;
  for (const auto& c : chunks) {
    const auto r = train_detail::score_chunk(params, cfg, source, c, pc);
    parts.emplace_back(r.nll_sum, r.count);
  }
  std::sort(parts.begin(), parts.end());
  PerplexityResult total;
  for (const auto& [nll, count] : parts) {
    total.nll_sum += nll;
    total.count += count;
  }
  if (total.count == 0) throw std::invalid_argument("perplexity: no predicted tokens (chunks shorter than 2s)");
  return total;
}

}  // namespace ralm

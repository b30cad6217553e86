#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "ralm/checkpoint.hpp"
#include "ralm/model.hpp"

namespace ralm {
namespace {

ModelConfig small_config(std::size_t rank = 0) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 64;
  cfg.heads = 2;
  cfg.mlp_dim = 128;
  cfg.max_seq = 128;
  cfg.lora_rank = rank;
  return cfg;
}

Tokens random_tokens(std::size_t n, std::uint64_t seed, std::size_t vocab = 256) {
  Rng rng(seed);
  Tokens out(n);
  for (auto& t : out) t = TokenId(rng.uniform_int(0, vocab - 1));
  return out;
}

Tensor2 run(const ModelParams& p, const ModelConfig& cfg, const Tokens& toks,
            FlopsLedger* ledger_out = nullptr) {
  KvCache cache = make_cache(cfg);
  FlopsLedger ledger;
  Tensor2 logits = forward_incremental(p, cfg, cache, toks, 0, ledger).logits;
  if (ledger_out) *ledger_out = ledger;
  return logits;
}

TEST(Forward, ChunkedMatchesMonolithic) {
  for (auto pos : {PositionScheme::rotary, PositionScheme::learned_absolute}) {
    ModelConfig cfg = small_config(8);
    cfg.position = pos;
    ModelParams p = init_params(cfg, 1);
    // Non-zero adapters so the test covers the low-rank path too.
    Rng rng(2);
    for (auto& L : p.layers) {
      L.lora_k.b = random_normal<float>(8, 64, 0.02, rng);
      L.lora_v.b = random_normal<float>(8, 64, 0.02, rng);
    }
    const Tokens toks = random_tokens(10, 3);
    const Tensor2 whole = run(p, cfg, toks);

    KvCache cache = make_cache(cfg);
    FlopsLedger ledger;
    forward_incremental(p, cfg, cache, std::span(toks).first(5), 0, ledger);
    Tensor2 tail = forward_incremental(p, cfg, cache, std::span(toks).subspan(5), 5, ledger).logits;
    EXPECT_LE(max_abs_diff(tail.slice_rows(4, 5), whole.slice_rows(9, 10)), 1e-5);
    EXPECT_LE(max_abs_diff(tail, whole.slice_rows(5, 10)), 1e-5);
  }
}

TEST(Forward, RandomChunkingMatchesMonolithic) {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 4);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Tokens toks = random_tokens(40, 100 + trial);
    const Tensor2 whole = run(p, cfg, toks);
    KvCache cache = make_cache(cfg);
    FlopsLedger ledger;
    std::size_t pos = 0;
    Tensor2 last;
    while (pos < toks.size()) {
      const std::size_t n = std::min<std::size_t>(rng.uniform_int(1, 9), toks.size() - pos);
      last = forward_incremental(p, cfg, cache, std::span(toks).subspan(pos, n), pos, ledger).logits;
      pos += n;
    }
    EXPECT_LE(max_abs_diff(last.slice_rows(last.rows() - 1, last.rows()),
                           whole.slice_rows(39, 40)),
              1e-5);
  }
}

TEST(Forward, LastModeMatchesAllMode) {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 6);
  const Tokens toks = random_tokens(17, 7);
  const Tensor2 all = run(p, cfg, toks);
  KvCache cache = make_cache(cfg);
  FlopsLedger ledger;
  Tensor2 last = forward_incremental(p, cfg, cache, toks, 0, ledger, LogitsMode::last).logits;
  ASSERT_EQ(last.rows(), 1u);
  EXPECT_LE(max_abs_diff(last, all.slice_rows(16, 17)), 1e-5);
  EXPECT_EQ(cache.logical_len(), 17u);
}

TEST(Forward, ZeroAdaptersAreBitIdenticalToNone) {
  ModelConfig with = small_config(16);
  ModelParams p = init_params(with, 8);
  ModelConfig without = with;
  without.lora_rank = 0;
  ModelParams bare = p;
  for (auto& L : bare.layers) L.lora_k = L.lora_v = LoraPair<float>{};
  const Tokens toks = random_tokens(12, 9);
  EXPECT_EQ(run(p, with, toks), run(bare, without, toks));
}

TEST(Forward, KvProjectionFlopsForOneToken) {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 1);
  FlopsLedger ledger;
  run(p, cfg, Tokens{42}, &ledger);
  EXPECT_EQ(ledger.kv_projection, 32768u);
  EXPECT_EQ(ledger.lora, 0u);
}

TEST(Forward, FlopsDependOnlyOnShape) {
  ModelConfig cfg = small_config(4);
  ModelParams p = init_params(cfg, 1);
  FlopsLedger a, b;
  run(p, cfg, random_tokens(9, 1), &a);
  run(p, cfg, random_tokens(9, 2), &b);
  EXPECT_EQ(a, b);
}

TEST(Forward, CausalityIsExact) {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 10);
  Tokens toks = random_tokens(16, 11);
  const Tensor2 before = run(p, cfg, toks);
  for (std::size_t j : {3u, 9u, 15u}) {
    Tokens changed = toks;
    changed[j] = TokenId((changed[j] + 1) % 256);
    const Tensor2 after = run(p, cfg, changed);
    EXPECT_EQ(before.slice_rows(0, j), after.slice_rows(0, j)) << "position " << j;
    EXPECT_GT(max_abs_diff(before.slice_rows(j, j + 1), after.slice_rows(j, j + 1)), 0.0);
  }
}

TEST(Forward, MovingATokenChangesItsKeys) {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 12);
  const Tokens toks = random_tokens(4, 13);
  FlopsLedger ledger;
  KvCache at0 = make_cache(cfg);
  forward_incremental(p, cfg, at0, toks, 0, ledger);
  // Same tokens placed after a 3-token filler: rotary keys must differ.
  KvCache shifted = make_cache(cfg);
  Tokens padded{1, 2, 3};
  padded.insert(padded.end(), toks.begin(), toks.end());
  forward_incremental(p, cfg, shifted, padded, 0, ledger);
  const Tensor2 k0 = at0.keys(0);
  const Tensor2 k1 = shifted.keys(0).slice_rows(3, 7);
  EXPECT_GT(max_abs_diff(k0, k1), 1e-4);
  // Values of the first layer carry no position.
  EXPECT_LE(max_abs_diff(at0.values(0), shifted.values(0).slice_rows(3, 7)), 1e-6);
}

TEST(Forward, FreshParamsGiveFiniteLogits) {
  ModelConfig cfg = small_config(16);
  ModelParams p = init_params(cfg, 14);
  const Tensor2 logits = run(p, cfg, random_tokens(4, 15));
  ASSERT_EQ(logits.rows(), 4u);
  ASSERT_EQ(logits.cols(), cfg.vocab_size());
  EXPECT_TRUE(all_finite(logits));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = -1e30, s = 0.0;
    for (float v : logits.row(r)) m = std::max(m, double(v));
    for (float v : logits.row(r)) s += std::exp(v - m);
    EXPECT_TRUE(std::isfinite(m + std::log(s)));
  }
}

TEST(Forward, RejectsOutOfVocabToken) {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 1);
  EXPECT_THROW(run(p, cfg, Tokens{TokenId(cfg.vocab_size())}), std::out_of_range);
}

TEST(Forward, RejectsOverCapacity) {
  ModelConfig cfg = small_config();
  cfg.max_seq = 8;
  ModelParams p = init_params(cfg, 1);
  EXPECT_THROW(run(p, cfg, random_tokens(9, 1)), CapacityError);
}

TEST(Forward, RejectsWrongStartPosition) {
  ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 1);
  KvCache cache = make_cache(cfg);
  FlopsLedger ledger;
  EXPECT_THROW(forward_incremental(p, cfg, cache, Tokens{1}, 3, ledger), ShapeError);
}

TEST(LoraDelta, ZeroBGivesZero) {
  Rng rng(1);
  FlopsLedger ledger;
  Tensor2 d = lora_delta(random_normal<float>(3, 64, 1.0, rng),
                         random_normal<float>(64, 16, 1.0, rng), Tensor2(16, 64), ledger);
  for (float v : d.values()) EXPECT_EQ(v, 0.0f);
}

TEST(LoraDelta, FlopsForOneToken) {
  Rng rng(1);
  FlopsLedger ledger;
  lora_delta(random_normal<float>(1, 64, 1.0, rng), random_normal<float>(64, 16, 1.0, rng),
             random_normal<float>(16, 64, 1.0, rng), ledger);
  EXPECT_EQ(ledger.lora, 4096u);
  EXPECT_EQ(ledger.kv_projection + ledger.other, 0u);
}

TEST(LoraDelta, MatchesNaiveOracle) {
  Rng rng(3);
  const Tensor2 x = random_normal<float>(5, 32, 1.0, rng);
  const Tensor2 a = random_normal<float>(32, 4, 0.5, rng);
  const Tensor2 b = random_normal<float>(4, 32, 0.5, rng);
  FlopsLedger ledger;
  const double scale = 4.0;
  const Tensor2 d = lora_delta(x, a, b, ledger, scale);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 32; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        double xa = 0.0;
        for (std::size_t m = 0; m < 32; ++m) xa += double(x(i, m)) * a(m, k);
        acc += xa * b(k, j);
      }
      EXPECT_NEAR(d(i, j), acc * scale, 1e-5 * std::max(1.0, std::abs(acc * scale)));
    }
}

TEST(LoraDelta, ShapeMismatchThrows) {
  FlopsLedger ledger;
  EXPECT_THROW(lora_delta(Tensor2(1, 8), Tensor2(8, 2), Tensor2(3, 8), ledger), ShapeError);
}

TEST(InitParams, SameSeedSameParams) {
  ModelConfig cfg = small_config(16);
  EXPECT_EQ(init_params(cfg, 77), init_params(cfg, 77));
  EXPECT_FALSE(init_params(cfg, 77) == init_params(cfg, 78));
}

TEST(InitParams, AdaptersStartAtZeroAndMarksAtMean) {
  ModelConfig cfg = small_config(16);
  ModelParams p = init_params(cfg, 3);
  for (const auto& L : p.layers) {
    for (float v : L.lora_k.b.values()) EXPECT_EQ(v, 0.0f);
    for (float v : L.lora_v.b.values()) EXPECT_EQ(v, 0.0f);
    EXPECT_FALSE(L.lora_q.active());
  }
  for (std::size_t c = 0; c < cfg.hidden; ++c) {
    double mean = 0.0;
    for (std::size_t t = 0; t < cfg.vocab_base; ++t) mean += p.embeddings(t, c);
    mean /= double(cfg.vocab_base);
    EXPECT_NEAR(p.embeddings(cfg.vocab_base, c), mean, 1e-7);
    EXPECT_EQ(p.embeddings(cfg.vocab_base, c), p.embeddings(cfg.vocab_base + 1, c));
  }
}

TEST(InitParams, AllTargetsAddsQueryAndOutputAdapters) {
  ModelConfig cfg = small_config(4);
  cfg.lora_targets = LoraTargets::qkvo;
  ModelParams p = init_params(cfg, 3);
  EXPECT_TRUE(p.layers[0].lora_q.active());
  EXPECT_TRUE(p.layers[0].lora_o.active());
}

TEST(TrainableMask, MarksAndAdaptersOnly) {
  ModelConfig cfg = small_config(4);
  const auto mask = trainable_mask(init_params(cfg, 1));
  std::set<std::string> want{kMarkLRow, kMarkRRow};
  for (int i = 0; i < 2; ++i)
    for (const char* m : {"lora_k", "lora_v"})
      for (const char* ab : {".a", ".b"})
        want.insert("layer" + std::to_string(i) + "." + m + ab);
  EXPECT_EQ(mask, want);
}

TEST(Vocabulary, MarksFollowBaseTokens) {
  Vocabulary v{258};
  EXPECT_EQ(v.mark_l(), 258u);
  EXPECT_EQ(v.mark_r(), 259u);
  EXPECT_NE(v.mark_l(), v.mark_r());
  EXPECT_TRUE(v.is_mark(259));
  EXPECT_FALSE(v.is_mark(Vocabulary::kBeginOfText));
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig cfg = small_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsExact) {
  for (auto pos : {PositionScheme::rotary, PositionScheme::learned_absolute}) {
    ModelConfig cfg = small_config(4);
    cfg.position = pos;
    cfg.lora_targets = LoraTargets::qkvo;
    ModelParams p = init_params(cfg, 31);
    std::stringstream buf;
    save_checkpoint(buf, p, cfg, 31);
    LoadedCheckpoint back = load_checkpoint(buf);
    EXPECT_EQ(back.config, cfg);
    EXPECT_EQ(back.params, p);
    EXPECT_EQ(back.seed, 31u);
  }
}

TEST(Checkpoint, TruncatedPayloadIsDataError) {
  ModelConfig cfg = small_config();
  std::stringstream buf;
  save_checkpoint(buf, init_params(cfg, 1), cfg, 1);
  std::string s = buf.str();
  s.resize(s.size() - 100);
  std::stringstream cut(s);
  EXPECT_THROW(load_checkpoint(cut), DataError);
}

TEST(Checkpoint, MissingFileIsDataError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/model.ckpt"), DataError);
}

}  // namespace
}  // namespace ralm

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "mdlm/sampler.hpp"
#include "support.hpp"

using namespace mdlm;
using namespace mdlm::testing;

namespace {

// 3 symbols; eos 3, mask 4.
constexpr std::size_t kV = 5;
constexpr SpecialTokens kSp{4, 3};

// Predicts token f(response position) with high confidence, where the
// response starts after prompt_len tokens.
FnPredictor positional(std::size_t prompt_len, std::function<TokenId(std::size_t)> f) {
    return FnPredictor(kV, kSp, [prompt_len, f](std::span<const TokenId> seq) {
        Tensor out({seq.size(), kV}, 0.0f);
        for (std::size_t i = prompt_len; i < seq.size(); ++i) {
            out.at(i, static_cast<std::size_t>(f(i - prompt_len))) = 8.0f;
        }
        return out;
    });
}

SamplerConfig diffusion_cfg(std::size_t L, std::size_t N, RemaskStrategy s = RemaskStrategy::low_confidence) {
    SamplerConfig c;
    c.gen_length = L;
    c.steps = N;
    c.strategy = s;
    return c;
}

} // namespace

TEST(Postprocess, TruncatesAtFirstEos) {
    EXPECT_EQ(postprocess_eos(TokenSeq{0, 1, 2}, 3), (TokenSeq{0, 1, 2}));
    EXPECT_EQ(postprocess_eos(TokenSeq{0, 1, 3, 2}, 3), (TokenSeq{0, 1}));
    EXPECT_EQ(postprocess_eos(TokenSeq{3, 0}, 3), TokenSeq{});
}

TEST(EosZeroing, Cases) {
    const std::vector<double> conf{0.9, 0.5, 0.8, 0.4};
    const TokenSeq no_eos{0, 1, 2, 0};
    EXPECT_EQ(eos_zeroing_hook(conf, no_eos, 3), conf);
    const TokenSeq some_eos{3, 1, 3, 0};
    EXPECT_EQ(eos_zeroing_hook(conf, some_eos, 3, false), conf);
    const auto z = eos_zeroing_hook(conf, some_eos, 3);
    EXPECT_EQ(z, (std::vector<double>{0.0, 0.5, 0.0, 0.4}));
    // the zeroed EOS positions are the first to be remasked
    const auto remask = remask_low_confidence(some_eos, z, std::vector<bool>(4, false), 0.5, 4);
    EXPECT_EQ(remask, (std::vector<bool>{true, false, true, false}));
}

TEST(RemaskLowConfidence, FinalStepKeepsAll) {
    const TokenSeq pred{0, 1, 2, 0};
    const std::vector<double> conf{0.1, 0.2, 0.3, 0.4};
    EXPECT_EQ(remask_low_confidence(pred, conf, std::vector<bool>(4, false), 0.0, 4), std::vector<bool>(4, false));
}

TEST(RemaskLowConfidence, KeepsTopHalf) {
    const TokenSeq pred{0, 1, 2, 0};
    const std::vector<double> conf{0.9, 0.2, 0.6, 0.4};
    EXPECT_EQ(remask_low_confidence(pred, conf, std::vector<bool>(4, false), 0.5, 4),
              (std::vector<bool>{false, true, false, true}));
}

TEST(RemaskLowConfidence, PreviouslyUnmaskedNeverRemasked) {
    const TokenSeq pred{0, 1, 2, 0, 1};
    const std::vector<double> conf{0.99, 0.99, 0.01, 0.99, 0.01};
    const std::vector<bool> already{false, false, true, false, true};
    const auto remask = remask_low_confidence(pred, conf, already, 0.4, 5); // n_un = 3
    EXPECT_FALSE(remask[2]);
    EXPECT_FALSE(remask[4]);
    EXPECT_EQ(std::count(remask.begin(), remask.end(), false), 3);
    EXPECT_FALSE(remask[0]); // lower index wins the tie
}

TEST(RemaskLowConfidence, LengthMismatch) {
    const TokenSeq pred{0, 1};
    const std::vector<double> conf{0.5};
    EXPECT_THROW(remask_low_confidence(pred, conf, std::vector<bool>(2, false), 0.5, 2), DimensionError);
}

TEST(CfgCombine, ZeroScaleIsSoftmaxOfCond) {
    Tensor cond({2, 3}, std::vector<float>{0.1f, 2.0f, -1.0f, 3.0f, 0.0f, 0.5f});
    Tensor uncond({2, 3}, std::vector<float>{5.0f, -2.0f, 1.0f, 0.0f, 0.0f, 0.0f});
    Tensor expected = cond;
    for (std::size_t r = 0; r < 2; ++r) {
        detail::softmax_inplace(expected.row(r));
    }
    EXPECT_EQ(cfg_combine(cond, uncond, 0.0).data, expected.data);
}

TEST(CfgCombine, UnitScaleExample) {
    const Tensor cond({1, 2}, std::vector<float>{0.0f, 1.0f});
    const Tensor uncond({1, 2}, std::vector<float>{0.0f, 0.0f});
    const Tensor y = cfg_combine(cond, uncond, 1.0);
    const double e2 = std::exp(2.0);
    EXPECT_NEAR(y.data[0], 1.0 / (1.0 + e2), 1e-7);
    EXPECT_NEAR(y.data[1], e2 / (1.0 + e2), 1e-7);
}

TEST(CfgCombine, RowsSumToOneOnGrid) {
    Rng rng(3);
    Tensor cond({4, 6}), uncond({4, 6});
    for (std::size_t i = 0; i < cond.numel(); ++i) {
        cond.data[i] = static_cast<float>(rng.normal() * 3);
        uncond.data[i] = static_cast<float>(rng.normal() * 3);
    }
    for (double w : {0.5, 1.0, 1.5, 2.0}) {
        const Tensor y = cfg_combine(cond, uncond, w);
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (float v : y.row(r)) {
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(CfgCombine, Errors) {
    EXPECT_THROW(cfg_combine(Tensor({1, 2}), Tensor({1, 3}), 1.0), DimensionError);
    EXPECT_THROW(cfg_combine(Tensor({1, 2}), Tensor({1, 2}), -0.5), ConfigError);
}

TEST(SamplerConfig, Validation) {
    SamplerConfig c = diffusion_cfg(8, 9);
    EXPECT_THROW(c.validate(), ConfigError);
    c = diffusion_cfg(8, 0);
    EXPECT_THROW(c.validate(), ConfigError);
    c = diffusion_cfg(8, 8);
    c.mode = SamplingMode::semi_ar;
    c.block_length = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c.block_length = 4;
    EXPECT_NO_THROW(c.validate());
    c.steps = 3; // two blocks need an even step count
    EXPECT_THROW(c.validate(), ConfigError);
    c = diffusion_cfg(8, 8);
    c.mode = SamplingMode::block;
    c.block_length = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = diffusion_cfg(8, 8);
    c.temperature = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(remask_strategy_from_string("loud"), ConfigError);
    EXPECT_THROW(sampling_mode_from_string("sideways"), ConfigError);
    EXPECT_EQ(sampling_mode_from_string("semi_ar"), SamplingMode::semi_ar);
}

TEST(Diffusion, SingleStepIsArgmaxOfOnePass) {
    const RandomModel rm = random_model(5);
    const TransformerPredictor p = rm.predictor();
    const TokenSeq prompt{0, 1, 2};
    Rng rng(1);
    const SampleResult r = generate_diffusion(p, prompt, diffusion_cfg(5, 1), rng);
    TokenSeq in = prompt;
    in.insert(in.end(), 5, rm.config.mask_id);
    const Tensor logits = p.predict(in);
    for (std::size_t i = 0; i < 5; ++i) {
        TokenId best = -1;
        float bv = -1e30f;
        for (std::size_t v = 0; v < rm.config.vocab_size; ++v) {
            if (static_cast<TokenId>(v) != rm.config.mask_id && logits.at(3 + i, v) > bv) {
                bv = logits.at(3 + i, v);
                best = static_cast<TokenId>(v);
            }
        }
        EXPECT_EQ(r.raw[i], best);
    }
    EXPECT_EQ(r.forward_passes, 1u);
    EXPECT_EQ(r.trace.size(), 5u);
}

TEST(Diffusion, RandomStrategyRemasksHalfInExpectation) {
    const UniformPredictor p(kV, kSp);
    Rng rng(11);
    std::size_t first_step = 0, total = 0;
    for (int run = 0; run < 100; ++run) {
        // two steps: t = 1 -> s = 0.5 -> 0
        const SampleResult r = generate_diffusion(p, {}, diffusion_cfg(100, 2, RemaskStrategy::random), rng);
        for (const TraceRecord& rec : r.trace) {
            first_step += rec.step == 0 ? 1 : 0;
        }
        total += 100;
    }
    const double remasked = 1.0 - static_cast<double>(first_step) / static_cast<double>(total);
    EXPECT_NEAR(remasked, 0.5, 0.02);
}

TEST(Diffusion, OnePositionPerStepWhenNEqualsL) {
    const RandomModel rm = random_model(6);
    const TransformerPredictor p = rm.predictor();
    for (RemaskStrategy s : {RemaskStrategy::low_confidence, RemaskStrategy::random}) {
        SamplerConfig c = diffusion_cfg(7, 7, s);
        c.exact_count = true;
        Rng rng(2);
        const SampleResult r = generate_diffusion(p, TokenSeq{0, 1}, c, rng);
        ASSERT_EQ(r.trace.size(), 7u);
        std::vector<int> seen(7, 0);
        for (std::size_t k = 0; k < 7; ++k) {
            EXPECT_EQ(r.trace[k].step, k);
            seen[r.trace[k].position]++;
            EXPECT_EQ(r.trace[k].token, r.raw[r.trace[k].position]);
        }
        EXPECT_EQ(seen, std::vector<int>(7, 1));
    }
}

TEST(Diffusion, TraceCoversEveryPositionOnce) {
    const RandomModel rm = random_model(7);
    const TransformerPredictor p = rm.predictor();
    for (std::size_t N : {1u, 3u, 5u, 10u}) {
        for (RemaskStrategy s : {RemaskStrategy::low_confidence, RemaskStrategy::random}) {
            Rng rng(N);
            const SampleResult r = generate_diffusion(p, TokenSeq{0}, diffusion_cfg(10, N, s), rng);
            std::vector<int> seen(10, 0);
            std::size_t last_step = 0;
            for (const TraceRecord& rec : r.trace) {
                seen[rec.position]++;
                EXPECT_GE(rec.step, last_step);
                last_step = rec.step;
            }
            EXPECT_EQ(seen, std::vector<int>(10, 1)) << N;
            EXPECT_EQ(std::count(r.raw.begin(), r.raw.end(), rm.config.mask_id), 0);
        }
    }
}

TEST(Diffusion, NeverEmitsMask) {
    // a predictor that puts all its mass on the mask id still yields real tokens
    const FnPredictor p(kV, kSp, [](std::span<const TokenId> seq) {
        Tensor out({seq.size(), kV}, 0.0f);
        for (std::size_t i = 0; i < seq.size(); ++i) {
            out.at(i, 4) = 20.0f;
        }
        return out;
    });
    Rng rng(1);
    SamplerConfig c = diffusion_cfg(6, 3);
    c.temperature = 1.0;
    const SampleResult r = generate_diffusion(p, {}, c, rng);
    for (TokenId t : r.raw) {
        EXPECT_NE(t, 4);
    }
}

TEST(Diffusion, EosPostprocessing) {
    const FnPredictor p = positional(1, [](std::size_t i) { return i == 2 ? TokenId{3} : TokenId{1}; });
    Rng rng(1);
    const SampleResult r = generate_diffusion(p, TokenSeq{0}, diffusion_cfg(5, 5), rng);
    EXPECT_EQ(r.raw, (TokenSeq{1, 1, 3, 1, 1}));
    EXPECT_EQ(r.tokens, (TokenSeq{1, 1}));
}

TEST(Diffusion, DeterministicGivenSeed) {
    const RandomModel rm = random_model(8);
    const TransformerPredictor p = rm.predictor();
    SamplerConfig c = diffusion_cfg(9, 3, RemaskStrategy::random);
    c.temperature = 1.0;
    c.cfg_scale = 1.0;
    Rng a(77), b(77);
    const SampleResult x = generate_diffusion(p, TokenSeq{0, 1}, c, a);
    const SampleResult y = generate_diffusion(p, TokenSeq{0, 1}, c, b);
    EXPECT_EQ(x.raw, y.raw);
    EXPECT_EQ(x.trace, y.trace);
    EXPECT_EQ(x.forward_passes, 6u); // CFG doubles the passes
}

TEST(Diffusion, Errors) {
    const RandomModel rm = random_model(9);
    const TransformerPredictor p = rm.predictor();
    Rng rng(1);
    EXPECT_THROW(generate_diffusion(p, TokenSeq(10, 0), diffusion_cfg(60, 4), rng), LengthError);
    EXPECT_THROW(generate_diffusion(p, TokenSeq{rm.config.mask_id}, diffusion_cfg(4, 4), rng), PreconditionError);
}

TEST(Diffusion, CfgUnconditionalPassMasksPrompt) {
    std::vector<TokenSeq> seen;
    const FnPredictor p(kV, kSp, [&seen](std::span<const TokenId> seq) {
        seen.emplace_back(seq.begin(), seq.end());
        return Tensor({seq.size(), kV}, 0.0f);
    });
    SamplerConfig c = diffusion_cfg(2, 1);
    c.cfg_scale = 0.5;
    Rng rng(1);
    generate_diffusion(p, TokenSeq{0, 1, 2}, c, rng);
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen[0], (TokenSeq{0, 1, 2, 4, 4}));
    EXPECT_EQ(seen[1], (TokenSeq{4, 4, 4, 4, 4}));
}

TEST(SemiAr, FullBlockEqualsDiffusion) {
    const RandomModel rm = random_model(10);
    const TransformerPredictor p = rm.predictor();
    for (RemaskStrategy s : {RemaskStrategy::low_confidence, RemaskStrategy::random}) {
        SamplerConfig c = diffusion_cfg(8, 4, s);
        c.temperature = 0.7;
        Rng a(5), b(5);
        const SampleResult d = generate_diffusion(p, TokenSeq{1, 2}, c, a);
        c.mode = SamplingMode::semi_ar;
        c.block_length = 8;
        const SampleResult sa = generate_semi_ar(p, TokenSeq{1, 2}, c, b);
        EXPECT_EQ(d.raw, sa.raw);
        EXPECT_EQ(d.trace, sa.trace);
    }
}

TEST(SemiAr, TwoBlocksOfFourSteps) {
    const RandomModel rm = random_model(11);
    const TransformerPredictor p = rm.predictor();
    SamplerConfig c = diffusion_cfg(8, 8);
    c.mode = SamplingMode::semi_ar;
    c.block_length = 4;
    Rng rng(3);
    const SampleResult r = generate_semi_ar(p, TokenSeq{0}, c, rng);
    ASSERT_EQ(r.trace.size(), 8u);
    EXPECT_EQ(r.raw.size(), 8u);
    for (std::size_t k = 0; k < 8; ++k) {
        EXPECT_EQ(r.trace[k].step, k % 4);
        EXPECT_EQ(r.trace[k].position / 4, k / 4); // first group is block 0
    }
}

TEST(SemiAr, LaterBlocksStayMaskedWhileEarlierDecode) {
    std::vector<TokenSeq> seen;
    const FnPredictor p(kV, kSp, [&seen](std::span<const TokenId> seq) {
        seen.emplace_back(seq.begin(), seq.end());
        Tensor out({seq.size(), kV}, 0.0f);
        for (std::size_t i = 0; i < seq.size(); ++i) {
            out.at(i, 1) = 5.0f;
        }
        return out;
    });
    SamplerConfig c = diffusion_cfg(4, 2);
    c.mode = SamplingMode::semi_ar;
    c.block_length = 2;
    Rng rng(1);
    generate_semi_ar(p, TokenSeq{0}, c, rng);
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen[0], (TokenSeq{0, 4, 4, 4, 4}));
    EXPECT_EQ(seen[1], (TokenSeq{0, 1, 1, 4, 4}));
}

TEST(Block, UnitBlockEqualsAutoregressive) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const RandomModel rm = random_model(20 + seed);
        const TransformerPredictor p = rm.predictor();
        SamplerConfig c;
        c.mode = SamplingMode::block;
        c.block_length = 1;
        c.max_blocks = 12;
        Rng a(1), b(1);
        const SampleResult blk = generate_block_diffusion(p, TokenSeq{0, 1}, c, a);
        const SampleResult ar = generate_autoregressive(p, TokenSeq{0, 1}, 12, b);
        EXPECT_EQ(blk.raw, ar.raw);
        EXPECT_EQ(blk.tokens, ar.tokens);
        EXPECT_EQ(blk.trace, ar.trace);
        EXPECT_EQ(blk.truncated, ar.truncated);
    }
}

TEST(Block, StopsAfterBlockWithEos) {
    const FnPredictor p = positional(1, [](std::size_t i) { return i == 5 ? TokenId{3} : TokenId{2}; });
    SamplerConfig c;
    c.mode = SamplingMode::block;
    c.block_length = 4;
    Rng rng(1);
    const SampleResult r = generate_block_diffusion(p, TokenSeq{0}, c, rng);
    EXPECT_EQ(r.raw.size(), 8u);
    EXPECT_FALSE(r.truncated);
    EXPECT_EQ(r.tokens, (TokenSeq{2, 2, 2, 2, 2}));
    // steps restart at 0 for the second block
    ASSERT_EQ(r.trace.size(), 8u);
    EXPECT_EQ(r.trace[3].step, 3u);
    EXPECT_EQ(r.trace[4].step, 0u);
    EXPECT_GE(r.trace[4].position, 4u);
}

TEST(Block, CapFlagsTruncation) {
    const FnPredictor p = positional(1, [](std::size_t) { return TokenId{2}; });
    SamplerConfig c;
    c.mode = SamplingMode::block;
    c.block_length = 3;
    c.max_blocks = 3;
    Rng rng(1);
    const SampleResult r = generate_block_diffusion(p, TokenSeq{0}, c, rng);
    EXPECT_TRUE(r.truncated);
    EXPECT_EQ(r.raw.size(), 9u);
}

TEST(Autoregressive, EosFirstGivesEmptyResponse) {
    const FnPredictor p = positional(2, [](std::size_t) { return TokenId{3}; });
    Rng rng(1);
    const SampleResult r = generate_autoregressive(p, TokenSeq{0, 1}, 5, rng);
    EXPECT_TRUE(r.tokens.empty());
    EXPECT_EQ(r.raw, TokenSeq{3});
    EXPECT_FALSE(r.truncated);
}

TEST(Autoregressive, CausalReadsLastPosition) {
    // next token = (last token + 1) mod 3, as a causal predictor
    const FnPredictor p(
        kV, kSp,
        [](std::span<const TokenId> seq) {
            Tensor out({seq.size(), kV}, 0.0f);
            for (std::size_t i = 0; i < seq.size(); ++i) {
                out.at(i, static_cast<std::size_t>((seq[i] + 1) % 3)) = 5.0f;
            }
            return out;
        },
        true);
    Rng rng(1);
    const SampleResult r = generate_autoregressive(p, TokenSeq{0}, 5, rng);
    EXPECT_EQ(r.tokens, (TokenSeq{1, 2, 0, 1, 2}));
    EXPECT_TRUE(r.truncated);
    EXPECT_EQ(r.forward_passes, 5u);
    EXPECT_THROW(generate_autoregressive(p, TokenSeq{}, 5, rng), PreconditionError);
}

TEST(Infill, FillsOnlyMaskedPositions) {
    const FnPredictor p = positional(0, [](std::size_t i) { return static_cast<TokenId>(i % 3); });
    SamplerConfig c = diffusion_cfg(0, 2);
    Rng rng(1);
    const SampleResult r = generate_infill(p, TokenSeq{4, 2, 4, 2, 4}, c, rng);
    EXPECT_EQ(r.tokens, (TokenSeq{0, 2, 2, 2, 1}));
    EXPECT_EQ(r.raw, (TokenSeq{0, 2, 1}));
    EXPECT_EQ(r.trace.size(), 3u);
    EXPECT_THROW(generate_infill(p, TokenSeq{0, 1}, c, rng), PreconditionError);
}

TEST(Trace, WritesTabSeparatedRecords) {
    const DecodeTrace t{{0, 2, 1}, {1, 0, 3}};
    std::ostringstream os;
    write_trace(os, t, [](TokenId id) { return id == 3 ? std::string("<eos>") : std::string(1, char('a' + id)); });
    EXPECT_EQ(os.str(), "0\t2\t1\tb\n1\t0\t3\t<eos>\n");
}

// With the exact data conditionals, one finalisation per step and temperature
// 1, the sampler draws exactly from the data distribution.
TEST(Diffusion, RecoversDataDistribution) {
    Rng table_rng(99);
    std::map<TokenSeq, double> table;
    double total = 0.0;
    for (TokenId a = 0; a < 3; ++a) {
        for (TokenId b = 0; b < 3; ++b) {
            for (TokenId d = 0; d < 3; ++d) {
                const double w = table_rng.uniform() < 0.3 ? 0.0 : table_rng.uniform();
                table[{a, b, d}] = w;
                total += w;
            }
        }
    }
    for (auto& [x, w] : table) {
        w /= total;
    }
    const TablePredictor p(table, 3);
    SamplerConfig c = diffusion_cfg(3, 3, RemaskStrategy::random);
    c.temperature = 1.0;
    c.exact_count = true;
    Rng rng(5);
    std::map<TokenSeq, double> counts;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        counts[generate_diffusion(p, {}, c, rng).raw] += 1.0 / n;
    }
    double tv = 0.0;
    for (const auto& [x, w] : table) {
        tv += std::abs(w - counts[x]);
    }
    for (const auto& [x, w] : counts) {
        if (!table.contains(x)) {
            tv += w;
        }
    }
    EXPECT_LT(0.5 * tv, 0.02);
}

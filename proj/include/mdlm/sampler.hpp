#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mdlm/autodiff.hpp"
#include "mdlm/error.hpp"
#include "mdlm/predictor.hpp"
#include "mdlm/rng.hpp"
#include "mdlm/tensor.hpp"
#include "mdlm/tokens.hpp"

namespace mdlm {

enum class RemaskStrategy { random, low_confidence };
enum class SamplingMode { diffusion, block, semi_ar, autoregressive };

inline const char* to_string(RemaskStrategy s) { return s == RemaskStrategy::random ? "random" : "low_confidence"; }

inline const char* to_string(SamplingMode m) {
    switch (m) {
    case SamplingMode::diffusion:
        return "diffusion";
    case SamplingMode::block:
        return "block";
    case SamplingMode::semi_ar:
        return "semi_ar";
    case SamplingMode::autoregressive:
        return "autoregressive";
    }
    return "?";
}

inline RemaskStrategy remask_strategy_from_string(const std::string& s) {
    if (s == "random") {
        return RemaskStrategy::random;
    }
    if (s == "low_confidence") {
        return RemaskStrategy::low_confidence;
    }
    throw ConfigError("unknown remasking strategy '" + s + "'");
}

inline SamplingMode sampling_mode_from_string(const std::string& s) {
    if (s == "diffusion") {
        return SamplingMode::diffusion;
    }
    if (s == "block") {
        return SamplingMode::block;
    }
    if (s == "semi_ar") {
        return SamplingMode::semi_ar;
    }
    if (s == "autoregressive" || s == "ar") {
        return SamplingMode::autoregressive;
    }
    throw ConfigError("unknown sampling mode '" + s + "'");
}

struct SamplerConfig {
    std::size_t gen_length = 32;    // response length L for fixed-length modes; token cap for ar
    std::size_t steps = 32;         // total steps N for diffusion and semi_ar
    RemaskStrategy strategy = RemaskStrategy::low_confidence;
    SamplingMode mode = SamplingMode::diffusion;
    std::size_t block_length = 0;   // L' for block and semi_ar
    std::size_t steps_per_block = 0; // block mode only; 0 means one token per step
    std::size_t max_blocks = 8;     // block mode termination cap
    double cfg_scale = 0.0;
    bool eos_zeroing = false;
    double temperature = 0.0;       // 0 = greedy
    // Random strategy only: unmask exactly floor(L(1-s)) positions in total
    // after each step (uniformly chosen) instead of remasking each prediction
    // independently with probability s/t.
    bool exact_count = false;

    void validate() const {
        if (cfg_scale < 0.0) {
            throw ConfigError("cfg scale must be >= 0");
        }
        if (temperature < 0.0) {
            throw ConfigError("temperature must be >= 0");
        }
        switch (mode) {
        case SamplingMode::diffusion:
            if (gen_length == 0 || steps < 1 || steps > gen_length) {
                throw ConfigError("diffusion needs 1 <= steps <= gen_length");
            }
            break;
        case SamplingMode::semi_ar: {
            if (gen_length == 0 || steps < 1 || steps > gen_length) {
                throw ConfigError("semi_ar needs 1 <= steps <= gen_length");
            }
            if (block_length == 0 || gen_length % block_length != 0) {
                throw ConfigError("semi_ar block length " + std::to_string(block_length) +
                                  " must divide generation length " + std::to_string(gen_length));
            }
            const std::size_t blocks = gen_length / block_length;
            if (steps % blocks != 0) {
                throw ConfigError("semi_ar steps " + std::to_string(steps) + " must be a multiple of the block count " +
                                  std::to_string(blocks));
            }
            break;
        }
        case SamplingMode::block:
            if (block_length == 0) {
                throw ConfigError("block mode needs block length >= 1");
            }
            if (steps_per_block > block_length) {
                throw ConfigError("steps per block cannot exceed the block length");
            }
            if (max_blocks == 0) {
                throw ConfigError("block mode needs max_blocks >= 1");
            }
            break;
        case SamplingMode::autoregressive:
            break;
        }
    }
};

// One finalised token. step restarts at 0 in every block; position is
// relative to the start of the response.
struct TraceRecord {
    std::size_t step = 0;
    std::size_t position = 0;
    TokenId token = 0;

    friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};
using DecodeTrace = std::vector<TraceRecord>;

struct SampleResult {
    TokenSeq tokens;      // response after EOS post-processing
    TokenSeq raw;         // response before post-processing
    DecodeTrace trace;
    bool truncated = false;  // block/ar mode hit its cap without producing EOS
    std::size_t forward_passes = 0;
};

// Drops the first EOS and everything after it.
inline TokenSeq postprocess_eos(std::span<const TokenId> tokens, TokenId eos_id) {
    auto it = std::find(tokens.begin(), tokens.end(), eos_id);
    return TokenSeq(tokens.begin(), it);
}

inline std::vector<double> eos_zeroing_hook(std::vector<double> confidences, std::span<const TokenId> predicted,
                                            TokenId eos_id, bool enabled = true) {
    if (!enabled) {
        return confidences;
    }
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        if (predicted[i] == eos_id) {
            confidences[i] = 0.0;
        }
    }
    return confidences;
}

// Number of positions that must be unmasked at time s: floor(L (1 - s)).
// The tiny slack absorbs rounding in s = (N - j - 1) / N.
inline std::size_t unmasked_target(std::size_t L, double s) {
    const double v = static_cast<double>(L) * (1.0 - s) + 1e-9;
    return std::min(L, static_cast<std::size_t>(std::floor(v)));
}

// Keeps the floor(L(1-s)) highest-confidence positions and flags the rest for
// remasking. Already-unmasked positions outrank every fresh prediction (they
// carry confidence 1); remaining ties go to the lower index.
inline std::vector<bool> remask_low_confidence(std::span<const TokenId> predicted, std::span<const double> confidences,
                                               const std::vector<bool>& already_unmasked, double s, std::size_t L) {
    if (predicted.size() != L || confidences.size() != L || already_unmasked.size() != L) {
        throw DimensionError("remask_low_confidence: length mismatch");
    }
    const std::size_t n_un = unmasked_target(L, s);
    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (already_unmasked[a] != already_unmasked[b]) {
            return static_cast<bool>(already_unmasked[a]);
        }
        const double ca = already_unmasked[a] ? 1.0 : confidences[a];
        const double cb = already_unmasked[b] ? 1.0 : confidences[b];
        return ca > cb;
    });
    std::vector<bool> remask(L, true);
    for (std::size_t r = 0; r < n_un; ++r) {
        remask[order[r]] = false;
    }
    return remask;
}

// softmax((1 + w) cond - w uncond) row-wise; w = 0 is exactly softmax(cond).
inline Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double w) {
    if (cond.shape != uncond.shape) {
        throw DimensionError("cfg_combine: shape mismatch " + shape_str(cond.shape) + " vs " + shape_str(uncond.shape));
    }
    if (w < 0.0) {
        throw ConfigError("cfg scale must be >= 0");
    }
    Tensor out = cond;
    if (w != 0.0) {
        const float a = static_cast<float>(1.0 + w), b = static_cast<float>(w);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            out.data[i] = a * cond.data[i] - b * uncond.data[i];
        }
    }
    for (std::size_t r = 0; r < out.rows(); ++r) {
        detail::softmax_inplace(out.row(r));
    }
    return out;
}

// Per-position token distribution for seq, with unsupervised CFG when w > 0
// (the unconditional pass sees the prompt replaced by mask tokens).
template <MaskPredictor P>
Tensor predict_distribution(const P& predictor, std::span<const TokenId> seq, std::size_t prompt_len, double w,
                            std::size_t& passes) {
    const Tensor cond = predictor.predict(seq);
    ++passes;
    if (w == 0.0) {
        return cfg_combine(cond, cond, 0.0);
    }
    TokenSeq uncond_seq(seq.begin(), seq.end());
    std::fill(uncond_seq.begin(), uncond_seq.begin() + static_cast<std::ptrdiff_t>(prompt_len),
              predictor.special().mask_id);
    const Tensor uncond = predictor.predict(uncond_seq);
    ++passes;
    return cfg_combine(cond, uncond, w);
}

struct TokenChoice {
    TokenId token = 0;
    double confidence = 0.0;
};

// Greedy argmax (lowest id wins ties) or tempered categorical draw. The mask
// token is never a valid prediction. Confidence is the untempered probability
// of the chosen token.
inline TokenChoice choose_token(std::span<const float> probs, TokenId mask_id, double temperature, Rng& rng) {
    TokenChoice best{-1, -1.0};
    if (temperature == 0.0) {
        for (std::size_t v = 0; v < probs.size(); ++v) {
            if (static_cast<TokenId>(v) == mask_id) {
                continue;
            }
            if (static_cast<double>(probs[v]) > best.confidence) {
                best = {static_cast<TokenId>(v), static_cast<double>(probs[v])};
            }
        }
        return best;
    }
    std::vector<double> w(probs.size(), 0.0);
    double total = 0.0;
    for (std::size_t v = 0; v < probs.size(); ++v) {
        if (static_cast<TokenId>(v) == mask_id || probs[v] <= 0.0f) {
            continue;
        }
        w[v] = std::pow(static_cast<double>(probs[v]), 1.0 / temperature);
        total += w[v];
    }
    double u = rng.uniform() * total;
    for (std::size_t v = 0; v < probs.size(); ++v) {
        if (w[v] == 0.0) {
            continue;
        }
        best = {static_cast<TokenId>(v), static_cast<double>(probs[v])};
        u -= w[v];
        if (u < 0.0) {
            break;
        }
    }
    return best;
}

namespace detail {

// Runs `steps` reverse steps over the given positions of seq, which must all
// be masked on entry and are all unmasked on exit. Step j goes from
// t = (N-j)/N to s = (N-j-1)/N.
template <MaskPredictor P>
void denoise_positions(const P& predictor, TokenSeq& seq, std::size_t prompt_len,
                       const std::vector<std::size_t>& positions, std::size_t steps, const SamplerConfig& cfg, Rng& rng,
                       SampleResult& out, std::size_t response_start) {
    const SpecialTokens sp = predictor.special();
    const std::size_t L = positions.size();
    std::vector<bool> unmasked(L, false);
    std::vector<TokenId> predicted(L, sp.mask_id);
    std::vector<double> confidence(L, 1.0);
    for (std::size_t j = 0; j < steps; ++j) {
        const double t = static_cast<double>(steps - j) / static_cast<double>(steps);
        const double s = static_cast<double>(steps - j - 1) / static_cast<double>(steps);
        const Tensor probs = predict_distribution(predictor, seq, prompt_len, cfg.cfg_scale, out.forward_passes);

        std::vector<std::size_t> fresh;
        for (std::size_t i = 0; i < L; ++i) {
            if (unmasked[i]) {
                predicted[i] = seq[positions[i]];
                confidence[i] = 1.0;
                continue;
            }
            const TokenChoice c = choose_token(probs.row(positions[i]), sp.mask_id, cfg.temperature, rng);
            predicted[i] = c.token;
            confidence[i] = c.confidence;
            fresh.push_back(i);
        }
        confidence = eos_zeroing_hook(std::move(confidence), predicted, sp.eos_id, cfg.eos_zeroing);

        std::vector<bool> keep(L, false);
        if (cfg.strategy == RemaskStrategy::low_confidence) {
            const std::vector<bool> remask = remask_low_confidence(predicted, confidence, unmasked, s, L);
            for (std::size_t i = 0; i < L; ++i) {
                keep[i] = !remask[i];
            }
        } else if (cfg.exact_count) {
            const std::size_t already = L - fresh.size();
            const std::size_t need = unmasked_target(L, s) - already;
            for (std::size_t idx : rng.choose(fresh.size(), need)) {
                keep[fresh[idx]] = true;
            }
        } else {
            const double stay_masked = s / t;
            for (std::size_t i : fresh) {
                keep[i] = !rng.bernoulli(stay_masked);
            }
        }

        for (std::size_t i : fresh) {
            if (keep[i]) {
                seq[positions[i]] = predicted[i];
                unmasked[i] = true;
                out.trace.push_back({j, positions[i] - response_start, predicted[i]});
            }
        }
    }
}

template <MaskPredictor P>
void denoise_region(const P& predictor, TokenSeq& seq, std::size_t prompt_len, std::size_t begin, std::size_t end,
                    std::size_t steps, const SamplerConfig& cfg, Rng& rng, SampleResult& out,
                    std::size_t response_start) {
    std::vector<std::size_t> positions(end - begin);
    std::iota(positions.begin(), positions.end(), begin);
    denoise_positions(predictor, seq, prompt_len, positions, steps, cfg, rng, out, response_start);
}

} // namespace detail

inline void check_prompt(std::span<const TokenId> prompt, TokenId mask_id) {
    if (std::find(prompt.begin(), prompt.end(), mask_id) != prompt.end()) {
        throw PreconditionError("prompt contains the mask token");
    }
}

template <MaskPredictor P>
void check_length(const P& predictor, std::size_t total) {
    if constexpr (requires { predictor.config().max_seq_len; }) {
        if (total > predictor.config().max_seq_len) {
            throw LengthError("prompt plus generation (" + std::to_string(total) + ") exceeds max_seq_len " +
                              std::to_string(predictor.config().max_seq_len));
        }
    }
}

// Pure diffusion: the whole response starts masked and is decoded in N steps.
template <MaskPredictor P>
SampleResult generate_diffusion(const P& predictor, std::span<const TokenId> prompt, const SamplerConfig& cfg,
                                Rng& rng) {
    SamplerConfig c = cfg;
    c.mode = SamplingMode::diffusion;
    c.validate();
    const SpecialTokens sp = predictor.special();
    check_prompt(prompt, sp.mask_id);
    check_length(predictor, prompt.size() + c.gen_length);
    TokenSeq seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), c.gen_length, sp.mask_id);
    SampleResult out;
    detail::denoise_region(predictor, seq, prompt.size(), prompt.size(), seq.size(), c.steps, c, rng, out,
                           prompt.size());
    out.raw.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
    out.tokens = postprocess_eos(out.raw, sp.eos_id);
    return out;
}

// Fixed total length, blocks decoded left to right; later blocks stay masked
// while earlier ones are decoded. N is split evenly across blocks.
template <MaskPredictor P>
SampleResult generate_semi_ar(const P& predictor, std::span<const TokenId> prompt, const SamplerConfig& cfg,
                              Rng& rng) {
    SamplerConfig c = cfg;
    c.mode = SamplingMode::semi_ar;
    c.validate();
    const SpecialTokens sp = predictor.special();
    check_prompt(prompt, sp.mask_id);
    check_length(predictor, prompt.size() + c.gen_length);
    TokenSeq seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), c.gen_length, sp.mask_id);
    const std::size_t blocks = c.gen_length / c.block_length;
    const std::size_t steps_per_block = c.steps / blocks;
    SampleResult out;
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t begin = prompt.size() + b * c.block_length;
        detail::denoise_region(predictor, seq, prompt.size(), begin, begin + c.block_length, steps_per_block, c, rng,
                               out, prompt.size());
    }
    out.raw.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
    out.tokens = postprocess_eos(out.raw, sp.eos_id);
    return out;
}

// Variable length: each block of L' masks is appended after everything
// finalised so far and decoded by diffusion; stops after a block containing
// EOS or after max_blocks blocks (flagged as truncated).
template <MaskPredictor P>
SampleResult generate_block_diffusion(const P& predictor, std::span<const TokenId> prompt, const SamplerConfig& cfg,
                                      Rng& rng) {
    SamplerConfig c = cfg;
    c.mode = SamplingMode::block;
    c.validate();
    const SpecialTokens sp = predictor.special();
    check_prompt(prompt, sp.mask_id);
    const std::size_t steps = c.steps_per_block == 0 ? c.block_length : c.steps_per_block;
    TokenSeq seq(prompt.begin(), prompt.end());
    SampleResult out;
    out.truncated = true;
    for (std::size_t b = 0; b < c.max_blocks; ++b) {
        const std::size_t begin = seq.size();
        check_length(predictor, begin + c.block_length);
        seq.insert(seq.end(), c.block_length, sp.mask_id);
        detail::denoise_region(predictor, seq, prompt.size(), begin, seq.size(), steps, c, rng, out, prompt.size());
        if (std::find(seq.begin() + static_cast<std::ptrdiff_t>(begin), seq.end(), sp.eos_id) != seq.end()) {
            out.truncated = false;
            break;
        }
    }
    out.raw.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
    out.tokens = postprocess_eos(out.raw, sp.eos_id);
    return out;
}

// Left-to-right decoding, one token per forward pass. A causal trunk reads the
// next-token distribution from the last position; a bidirectional trunk gets
// one mask slot appended and predicts it.
template <MaskPredictor P>
SampleResult generate_autoregressive(const P& predictor, std::span<const TokenId> prompt, std::size_t max_len,
                                     Rng& rng, const SamplerConfig& cfg = {}) {
    const SpecialTokens sp = predictor.special();
    check_prompt(prompt, sp.mask_id);
    const bool causal = predictor.causal();
    if (causal && prompt.empty()) {
        throw PreconditionError("a causal trunk needs a nonempty prompt to predict from");
    }
    TokenSeq seq(prompt.begin(), prompt.end());
    SampleResult out;
    out.truncated = true;
    for (std::size_t i = 0; i < max_len; ++i) {
        if (!causal) {
            seq.push_back(sp.mask_id);
        }
        check_length(predictor, seq.size());
        const Tensor probs = predict_distribution(predictor, seq, prompt.size(), cfg.cfg_scale, out.forward_passes);
        const TokenChoice c = choose_token(probs.row(seq.size() - 1), sp.mask_id, cfg.temperature, rng);
        if (causal) {
            seq.push_back(c.token);
        } else {
            seq.back() = c.token;
        }
        out.raw.push_back(c.token);
        out.trace.push_back({0, i, c.token});
        if (c.token == sp.eos_id) {
            out.truncated = false;
            break;
        }
    }
    out.tokens = postprocess_eos(out.raw, sp.eos_id);
    return out;
}

// Fills every mask position of a template sequence (not necessarily a suffix)
// by diffusion with cfg.steps steps. No prompt is designated, so CFG is off.
template <MaskPredictor P>
SampleResult generate_infill(const P& predictor, TokenSeq templ, const SamplerConfig& cfg, Rng& rng) {
    const SpecialTokens sp = predictor.special();
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < templ.size(); ++i) {
        if (templ[i] == sp.mask_id) {
            positions.push_back(i);
        }
    }
    if (positions.empty()) {
        throw PreconditionError("infill template has no mask positions");
    }
    if (cfg.steps < 1 || cfg.steps > positions.size()) {
        throw ConfigError("infill needs 1 <= steps <= number of masked positions");
    }
    check_length(predictor, templ.size());
    SamplerConfig c = cfg;
    c.cfg_scale = 0.0;
    SampleResult out;
    detail::denoise_positions(predictor, templ, 0, positions, c.steps, c, rng, out, 0);
    for (std::size_t p : positions) {
        out.raw.push_back(templ[p]);
    }
    out.tokens = std::move(templ);
    return out;
}

template <MaskPredictor P>
SampleResult generate(const P& predictor, std::span<const TokenId> prompt, const SamplerConfig& cfg, Rng& rng) {
    switch (cfg.mode) {
    case SamplingMode::diffusion:
        return generate_diffusion(predictor, prompt, cfg, rng);
    case SamplingMode::semi_ar:
        return generate_semi_ar(predictor, prompt, cfg, rng);
    case SamplingMode::block:
        return generate_block_diffusion(predictor, prompt, cfg, rng);
    case SamplingMode::autoregressive:
        return generate_autoregressive(predictor, prompt, cfg.gen_length, rng, cfg);
    }
    throw ConfigError("unknown sampling mode");
}

// step<TAB>position<TAB>token_id<TAB>token_text, one line per record.
inline void write_trace(std::ostream& os, const DecodeTrace& trace, const std::function<std::string(TokenId)>& text) {
    for (const TraceRecord& r : trace) {
        os << r.step << '\t' << r.position << '\t' << r.token << '\t' << text(r.token) << '\n';
    }
}

} // namespace mdlm

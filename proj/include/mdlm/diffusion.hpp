#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mdlm/autodiff.hpp"
#include "mdlm/error.hpp"
#include "mdlm/predictor.hpp"
#include "mdlm/rng.hpp"
#include "mdlm/tensor.hpp"
#include "mdlm/tokens.hpp"

// Forward masking process, reverse transition law, the stochastic loss
// estimators and exact enumeration oracles for them.
namespace mdlm {

// Masking level t in (0, 1].
class DiffusionTime {
public:
    explicit DiffusionTime(double t) : t_(t) {
        if (!(t > 0.0 && t <= 1.0)) {
            throw PreconditionError("diffusion time must lie in (0, 1], got " + std::to_string(t));
        }
    }
    double value() const { return t_; }

private:
    double t_;
};

// t ~ U(0, 1] realised as 1 - u with u ~ U[0, 1).
inline DiffusionTime sample_time(Rng& rng) { return DiffusionTime(1.0 - rng.uniform()); }

struct MaskedSeq {
    TokenSeq tokens;
    TokenId mask_id = -1;

    std::vector<std::size_t> mask_positions() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] == mask_id) {
                out.push_back(i);
            }
        }
        return out;
    }
    std::size_t mask_count() const {
        return static_cast<std::size_t>(std::count(tokens.begin(), tokens.end(), mask_id));
    }
    bool is_masked(std::size_t i) const { return tokens[i] == mask_id; }
};

inline void require_mask_free(std::span<const TokenId> x, TokenId mask_id, const char* what) {
    if (std::find(x.begin(), x.end(), mask_id) != x.end()) {
        throw PreconditionError(std::string(what) + " already contains the mask token");
    }
}

// Each position independently becomes mask_id with probability t.
inline MaskedSeq forward_mask(std::span<const TokenId> x0, DiffusionTime t, Rng& rng, TokenId mask_id) {
    require_mask_free(x0, mask_id, "forward_mask input");
    MaskedSeq out{TokenSeq(x0.begin(), x0.end()), mask_id};
    for (TokenId& tok : out.tokens) {
        if (rng.uniform() < t.value()) {
            tok = mask_id;
        }
    }
    return out;
}

// Exactly l positions masked, uniformly among all size-l subsets.
inline MaskedSeq forward_mask_count(std::span<const TokenId> x0, std::size_t l, Rng& rng, TokenId mask_id) {
    if (l < 1 || l > x0.size()) {
        throw PreconditionError("mask count " + std::to_string(l) + " outside [1, " + std::to_string(x0.size()) +
                                "]");
    }
    require_mask_free(x0, mask_id, "forward_mask_count input");
    MaskedSeq out{TokenSeq(x0.begin(), x0.end()), mask_id};
    for (std::size_t i : rng.choose(x0.size(), l)) {
        out.tokens[i] = mask_id;
    }
    return out;
}

// q_{s|t}(x_s^i | x_t) for one position. Index mask_id of the result is the
// probability of remaining masked.
inline std::vector<double> reverse_transition(double t, double s, TokenId current, std::span<const double> predicted,
                                              TokenId mask_id) {
    if (!(s >= 0.0 && s < t && t <= 1.0)) {
        throw PreconditionError("reverse_transition needs 0 <= s < t <= 1");
    }
    if (mask_id < 0 || static_cast<std::size_t>(mask_id) >= predicted.size()) {
        throw IndexError("mask id outside the predicted distribution");
    }
    std::vector<double> out(predicted.size(), 0.0);
    if (current != mask_id) {
        out.at(static_cast<std::size_t>(current)) = 1.0;
        return out;
    }
    const double unmask = (t - s) / t;
    for (std::size_t v = 0; v < predicted.size(); ++v) {
        out[v] = unmask * predicted[v];
    }
    out[static_cast<std::size_t>(mask_id)] += s / t;
    return out;
}

inline double token_nll(const Tensor& logits, std::size_t row, TokenId target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.cols()) {
        throw IndexError("target id " + std::to_string(target) + " outside vocabulary");
    }
    return detail::log_sum_exp(logits.row(row)) - static_cast<double>(logits.at(row, static_cast<std::size_t>(target)));
}

// One masked training/evaluation example: the model input, the clean targets
// and a per-position loss weight (0 where the position does not count).
struct LossDraw {
    TokenSeq input;
    TokenSeq targets;
    std::vector<double> weights;
    double t = 0.0;
    std::size_t n_masked = 0;
};

template <MaskPredictor P>
double evaluate_draw(const P& predictor, const LossDraw& draw) {
    if (draw.n_masked == 0) {
        return 0.0;
    }
    const Tensor logits = predictor.predict(draw.input);
    double total = 0.0;
    for (std::size_t i = 0; i < draw.input.size(); ++i) {
        if (draw.weights[i] != 0.0) {
            total += draw.weights[i] * token_nll(logits, i, draw.targets[i]);
        }
    }
    return total;
}

// Pre-training draw: t ~ U(0,1], x_t ~ q(x_t|x_0), weight 1/(t*L) per masked token.
inline LossDraw draw_pretrain(std::span<const TokenId> x0, Rng& rng, TokenId mask_id) {
    const DiffusionTime t = sample_time(rng);
    MaskedSeq xt = forward_mask(x0, t, rng, mask_id);
    LossDraw d;
    d.t = t.value();
    d.targets.assign(x0.begin(), x0.end());
    d.weights.assign(x0.size(), 0.0);
    const double w = 1.0 / (t.value() * static_cast<double>(x0.size()));
    for (std::size_t i = 0; i < x0.size(); ++i) {
        if (xt.is_masked(i)) {
            d.weights[i] = w;
            ++d.n_masked;
        }
    }
    d.input = std::move(xt.tokens);
    return d;
}

// SFT draw: the prompt is copied verbatim and never scored; only response
// tokens are masked, with weight 1/(t*L') where L' is the response length.
inline LossDraw draw_sft(std::span<const TokenId> prompt, std::span<const TokenId> response, Rng& rng,
                         TokenId mask_id) {
    if (response.empty()) {
        throw PreconditionError("SFT response is empty");
    }
    require_mask_free(prompt, mask_id, "SFT prompt");
    const DiffusionTime t = sample_time(rng);
    MaskedSeq rt = forward_mask(response, t, rng, mask_id);
    LossDraw d;
    d.t = t.value();
    d.input.assign(prompt.begin(), prompt.end());
    d.input.insert(d.input.end(), rt.tokens.begin(), rt.tokens.end());
    d.targets.assign(prompt.begin(), prompt.end());
    d.targets.insert(d.targets.end(), response.begin(), response.end());
    d.weights.assign(d.input.size(), 0.0);
    const double w = 1.0 / (t.value() * static_cast<double>(response.size()));
    for (std::size_t i = 0; i < response.size(); ++i) {
        if (rt.is_masked(i)) {
            d.weights[prompt.size() + i] = w;
            ++d.n_masked;
        }
    }
    return d;
}

// Count-masked draw: l ~ U{1..L}, exactly l response tokens masked, weight L/l.
inline LossDraw draw_count(std::span<const TokenId> prompt, std::span<const TokenId> response, Rng& rng,
                           TokenId mask_id) {
    if (response.empty()) {
        throw PreconditionError("response is empty");
    }
    require_mask_free(prompt, mask_id, "prompt");
    const std::size_t L = response.size();
    const std::size_t l = 1 + rng.below(L);
    MaskedSeq rl = forward_mask_count(response, l, rng, mask_id);
    LossDraw d;
    d.t = static_cast<double>(l) / static_cast<double>(L);
    d.input.assign(prompt.begin(), prompt.end());
    d.input.insert(d.input.end(), rl.tokens.begin(), rl.tokens.end());
    d.targets.assign(prompt.begin(), prompt.end());
    d.targets.insert(d.targets.end(), response.begin(), response.end());
    d.weights.assign(d.input.size(), 0.0);
    for (std::size_t i = 0; i < L; ++i) {
        if (rl.is_masked(i)) {
            d.weights[prompt.size() + i] = static_cast<double>(L) / static_cast<double>(l);
            ++d.n_masked;
        }
    }
    return d;
}

// Monte Carlo estimate of the pre-training loss in its per-token form,
// (1/(t*L)) * sum_masked -log p(x0^i | x_t). Zero when nothing was masked.
template <MaskPredictor P>
double mc_pretrain_loss(const P& predictor, std::span<const TokenId> x0, Rng& rng) {
    return evaluate_draw(predictor, draw_pretrain(x0, rng, predictor.special().mask_id));
}

template <MaskPredictor P>
double mc_sft_loss(const P& predictor, std::span<const TokenId> prompt, std::span<const TokenId> response, Rng& rng) {
    return evaluate_draw(predictor, draw_sft(prompt, response, rng, predictor.special().mask_id));
}

// One draw of the t-form bound without the 1/L normalisation:
// (1/t) * sum_masked -log p(x0^i | prompt, x_t).
template <MaskPredictor P>
double bound_t_draw(const P& predictor, std::span<const TokenId> prompt, std::span<const TokenId> x0, Rng& rng) {
    LossDraw d = draw_sft(prompt, x0, rng, predictor.special().mask_id);
    const double rescale = static_cast<double>(x0.size());
    for (double& w : d.weights) {
        w *= rescale;
    }
    return evaluate_draw(predictor, d);
}

// One draw of the count form: (L/l) * sum_masked -log p(x0^i | prompt, x_l).
template <MaskPredictor P>
double bound_l_draw(const P& predictor, std::span<const TokenId> prompt, std::span<const TokenId> x0, Rng& rng) {
    return evaluate_draw(predictor, draw_count(prompt, x0, rng, predictor.special().mask_id));
}

inline constexpr std::size_t kMaxExactBoundLength = 8;
inline constexpr std::size_t kMaxAoArmLength = 5;

// Sum of -log p(x0^i | x_S) over i in S for every nonempty subset S of the
// response positions, indexed by bitmask (bit i = position i masked). Subsets
// are visited in binary counting order.
template <MaskPredictor P>
std::vector<double> subset_losses(const P& predictor, std::span<const TokenId> prompt, std::span<const TokenId> x0) {
    const TokenId mask_id = predictor.special().mask_id;
    require_mask_free(x0, mask_id, "exact bound input");
    require_mask_free(prompt, mask_id, "exact bound prompt");
    const std::size_t L = x0.size();
    std::vector<double> out(std::size_t{1} << L, 0.0);
    TokenSeq input(prompt.begin(), prompt.end());
    input.insert(input.end(), x0.begin(), x0.end());
    for (std::size_t bits = 1; bits < out.size(); ++bits) {
        TokenSeq masked = input;
        for (std::size_t i = 0; i < L; ++i) {
            if (bits & (std::size_t{1} << i)) {
                masked[prompt.size() + i] = mask_id;
            }
        }
        const Tensor logits = predictor.predict(masked);
        double sum = 0.0;
        for (std::size_t i = 0; i < L; ++i) {
            if (bits & (std::size_t{1} << i)) {
                sum += token_nll(logits, prompt.size() + i, x0[i]);
            }
        }
        out[bits] = sum;
    }
    return out;
}

inline void check_exact_length(std::size_t L, std::size_t limit, const char* what) {
    if (L == 0) {
        throw PreconditionError(std::string(what) + ": empty sequence");
    }
    if (L > limit) {
        throw RefusalError(std::string(what) + ": length " + std::to_string(L) + " exceeds enumeration limit " +
                           std::to_string(limit));
    }
}

inline double log_factorial(std::size_t n) { return std::lgamma(static_cast<double>(n) + 1.0); }

// Exact expectation of (1/t) sum_masked -log p over t ~ U(0,1] and the
// factorised forward process: subset S carries weight
// int_0^1 t^{|S|-1} (1-t)^{L-|S|} dt = (|S|-1)! (L-|S|)! / L!.
template <MaskPredictor P>
double exact_bound_t(const P& predictor, std::span<const TokenId> x0, std::span<const TokenId> prompt = {}) {
    check_exact_length(x0.size(), kMaxExactBoundLength, "exact_bound_t");
    const std::size_t L = x0.size();
    const std::vector<double> losses = subset_losses(predictor, prompt, x0);
    double total = 0.0;
    for (std::size_t bits = 1; bits < losses.size(); ++bits) {
        const auto k = static_cast<std::size_t>(std::popcount(bits));
        const double beta = std::exp(log_factorial(k - 1) + log_factorial(L - k) - log_factorial(L));
        total += beta * losses[bits];
    }
    return total;
}

// Exact expectation of the count form: (1/L) sum_l (L/l) (1/C(L,l)) sum_{|S|=l} loss(S).
template <MaskPredictor P>
double exact_bound_l(const P& predictor, std::span<const TokenId> x0, std::span<const TokenId> prompt = {}) {
    check_exact_length(x0.size(), kMaxExactBoundLength, "exact_bound_l");
    const std::size_t L = x0.size();
    const std::vector<double> losses = subset_losses(predictor, prompt, x0);
    std::vector<double> by_count(L + 1, 0.0);
    for (std::size_t bits = 1; bits < losses.size(); ++bits) {
        by_count[static_cast<std::size_t>(std::popcount(bits))] += losses[bits];
    }
    double total = 0.0;
    double binom = 1.0; // C(L, l), updated incrementally
    for (std::size_t l = 1; l <= L; ++l) {
        binom = binom * static_cast<double>(L - l + 1) / static_cast<double>(l);
        total += (static_cast<double>(L) / static_cast<double>(l)) * by_count[l] / binom;
    }
    return total / static_cast<double>(L);
}

struct AoArmResult {
    double expected_order_nll = 0.0; // mean over orders of the per-order NLL
    double exact_mixture_nll = 0.0;  // -log of the order-averaged likelihood
};

// Enumerates all L! generation orders. Order pi reveals x0^{pi(0)}, then
// x0^{pi(1)}, ...; positions not yet revealed hold the mask token.
template <MaskPredictor P>
AoArmResult ao_arm_exact(const P& predictor, std::span<const TokenId> x0, std::span<const TokenId> prompt = {}) {
    check_exact_length(x0.size(), kMaxAoArmLength, "ao_arm_exact");
    const TokenId mask_id = predictor.special().mask_id;
    require_mask_free(x0, mask_id, "ao_arm input");
    const std::size_t L = x0.size();
    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> order_nlls;
    do {
        TokenSeq seq(prompt.begin(), prompt.end());
        seq.insert(seq.end(), L, mask_id);
        double nll = 0.0;
        for (std::size_t step = 0; step < L; ++step) {
            const std::size_t pos = order[step];
            const Tensor logits = predictor.predict(seq);
            nll += token_nll(logits, prompt.size() + pos, x0[pos]);
            seq[prompt.size() + pos] = x0[pos];
        }
        order_nlls.push_back(nll);
    } while (std::next_permutation(order.begin(), order.end()));

    AoArmResult r;
    const double n = static_cast<double>(order_nlls.size());
    r.expected_order_nll = std::accumulate(order_nlls.begin(), order_nlls.end(), 0.0) / n;
    // -log(mean exp(-nll)) via log-sum-exp.
    const double lo = *std::min_element(order_nlls.begin(), order_nlls.end());
    double acc = 0.0;
    for (double v : order_nlls) {
        acc += std::exp(-(v - lo));
    }
    r.exact_mixture_nll = lo - std::log(acc / n);
    return r;
}

} // namespace mdlm

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "mdlm/model.hpp"
#include "mdlm/rng.hpp"
#include "mdlm/tensor.hpp"
#include "mdlm/tokens.hpp"

namespace mdlm::testing {

inline constexpr float kNegInf = -1e30f;

// Exact data conditionals of a known distribution over length-L sequences.
// At a masked position the logits are log p_data(x^i = v | unmasked tokens);
// unmasked positions get a point mass on their own token.
class TablePredictor {
public:
    TablePredictor(std::map<TokenSeq, double> table, std::size_t n_symbols)
        : table_(std::move(table)), n_(n_symbols) {}

    Tensor predict(std::span<const TokenId> seq) const {
        const std::size_t V = vocab_size();
        Tensor out({seq.size(), V}, kNegInf);
        std::vector<std::vector<double>> mass(seq.size(), std::vector<double>(V, 0.0));
        for (const auto& [x, p] : table_) {
            if (x.size() != seq.size()) {
                continue;
            }
            bool consistent = true;
            for (std::size_t i = 0; i < seq.size() && consistent; ++i) {
                consistent = seq[i] == mask_id() || seq[i] == x[i];
            }
            if (!consistent) {
                continue;
            }
            for (std::size_t i = 0; i < seq.size(); ++i) {
                mass[i][static_cast<std::size_t>(x[i])] += p;
            }
        }
        for (std::size_t i = 0; i < seq.size(); ++i) {
            double total = 0.0;
            for (double m : mass[i]) {
                total += m;
            }
            for (std::size_t v = 0; v < V; ++v) {
                if (mass[i][v] > 0.0) {
                    out.at(i, v) = static_cast<float>(std::log(mass[i][v] / total));
                }
            }
        }
        return out;
    }

    std::size_t vocab_size() const { return n_ + 2; }
    TokenId eos_id() const { return static_cast<TokenId>(n_); }
    TokenId mask_id() const { return static_cast<TokenId>(n_ + 1); }
    SpecialTokens special() const { return {mask_id(), eos_id()}; }
    bool causal() const { return false; }

private:
    std::map<TokenSeq, double> table_;
    std::size_t n_;
};

// Probability 1 on the true token everywhere.
inline TablePredictor perfect_predictor(const TokenSeq& truth, std::size_t n_symbols) {
    return TablePredictor({{truth, 1.0}}, n_symbols);
}

// All-zero logits.
class UniformPredictor {
public:
    UniformPredictor(std::size_t V, SpecialTokens sp) : V_(V), sp_(sp) {}
    Tensor predict(std::span<const TokenId> seq) const { return Tensor({seq.size(), V_}, 0.0f); }
    std::size_t vocab_size() const { return V_; }
    SpecialTokens special() const { return sp_; }
    bool causal() const { return false; }

private:
    std::size_t V_;
    SpecialTokens sp_;
};

// Wraps any function of the sequence.
class FnPredictor {
public:
    FnPredictor(std::size_t V, SpecialTokens sp, std::function<Tensor(std::span<const TokenId>)> fn, bool causal = false)
        : V_(V), sp_(sp), fn_(std::move(fn)), causal_(causal) {}
    Tensor predict(std::span<const TokenId> seq) const { return fn_(seq); }
    std::size_t vocab_size() const { return V_; }
    SpecialTokens special() const { return sp_; }
    bool causal() const { return causal_; }

private:
    std::size_t V_;
    SpecialTokens sp_;
    std::function<Tensor(std::span<const TokenId>)> fn_;
    bool causal_;
};

// Memoises another predictor. Monte Carlo checks over short sequences hit the
// same few inputs millions of times.
template <class P>
class CachedPredictor {
public:
    explicit CachedPredictor(const P& inner) : inner_(&inner) {}
    Tensor predict(std::span<const TokenId> seq) const {
        TokenSeq key(seq.begin(), seq.end());
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            it = cache_.emplace(std::move(key), inner_->predict(seq)).first;
        }
        return it->second;
    }
    std::size_t vocab_size() const { return inner_->vocab_size(); }
    SpecialTokens special() const { return inner_->special(); }
    bool causal() const { return inner_->causal(); }

private:
    const P* inner_;
    mutable std::map<TokenSeq, Tensor> cache_;
};

// Small random transformer: V symbols total, the top two ids reserved.
inline ModelConfig tiny_config(std::size_t V = 5, std::size_t layers = 2) {
    ModelConfig c;
    c.n_layers = layers;
    c.d_model = 16;
    c.n_heads = 2;
    c.ffn_dim = 24;
    c.vocab_size = V;
    c.max_seq_len = 64;
    c.mask_id = static_cast<TokenId>(V - 1);
    c.eos_id = static_cast<TokenId>(V - 2);
    c.init_std = 0.5; // large enough for the predictions to be far from uniform
    return c;
}

struct RandomModel {
    ModelConfig config;
    ParameterSet params;
    TransformerPredictor predictor() const { return {config, params}; }
};

inline RandomModel random_model(std::uint64_t seed, std::size_t V = 5, std::size_t layers = 2) {
    RandomModel m{tiny_config(V, layers), {}};
    m.params = init_params(m.config, seed);
    return m;
}

// Mask-free sequence over ids [0, V-1) (everything except the mask).
inline TokenSeq random_tokens(Rng& rng, std::size_t L, std::size_t V) {
    TokenSeq x(L);
    for (TokenId& t : x) {
        t = static_cast<TokenId>(rng.below(V - 1));
    }
    return x;
}

} // namespace mdlm::testing

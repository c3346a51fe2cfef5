#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mdlm/autodiff.hpp"
#include "mdlm/error.hpp"
#include "mdlm/rng.hpp"
#include "mdlm/tensor.hpp"
#include "mdlm/tokens.hpp"

namespace mdlm {

enum class AttentionMode { bidirectional, causal };

inline const char* to_string(AttentionMode m) { return m == AttentionMode::causal ? "causal" : "bidirectional"; }

inline AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "bidirectional") {
        return AttentionMode::bidirectional;
    }
    if (s == "causal") {
        return AttentionMode::causal;
    }
    throw ConfigError("unknown attention mode '" + s + "'");
}

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 344;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 256;
    double rope_base = 10000.0;
    AttentionMode attention_mode = AttentionMode::bidirectional;
    double init_std = 0.02;
    double rms_eps = 1e-5;
    TokenId mask_id = 63;
    TokenId eos_id = 62;

    std::size_t head_dim() const { return d_model / n_heads; }
    SpecialTokens special() const { return {mask_id, eos_id}; }

    void validate() const {
        if (n_layers == 0 || d_model == 0 || ffn_dim == 0 || vocab_size == 0 || max_seq_len == 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (n_heads == 0 || d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if (head_dim() % 2 != 0) {
            throw ConfigError("head dimension must be even for rotary embeddings");
        }
        auto in_vocab = [&](TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < vocab_size; };
        if (!in_vocab(mask_id) || !in_vocab(eos_id) || mask_id == eos_id) {
            throw ConfigError("mask and eos ids must be distinct and inside the vocabulary");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
using BasicParameterSet = std::map<std::string, BasicTensor<T>>;
using ParameterSet = BasicParameterSet<float>;

namespace param_names {
inline const std::string embedding = "tok_embeddings";
inline const std::string final_norm = "norm";
inline const std::string output = "output";
inline std::string layer(std::size_t i, const char* leaf) { return "layers." + std::to_string(i) + "." + leaf; }
} // namespace param_names

// Name -> shape for every parameter of the architecture.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
    std::map<std::string, Shape> shapes;
    shapes[param_names::embedding] = {c.vocab_size, c.d_model};
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        shapes[param_names::layer(i, "attention_norm")] = {c.d_model};
        shapes[param_names::layer(i, "attention.wq")] = {c.d_model, c.d_model};
        shapes[param_names::layer(i, "attention.wk")] = {c.d_model, c.d_model};
        shapes[param_names::layer(i, "attention.wv")] = {c.d_model, c.d_model};
        shapes[param_names::layer(i, "attention.wo")] = {c.d_model, c.d_model};
        shapes[param_names::layer(i, "ffn_norm")] = {c.d_model};
        shapes[param_names::layer(i, "feed_forward.w_gate_up")] = {c.d_model, 2 * c.ffn_dim};
        shapes[param_names::layer(i, "feed_forward.w_down")] = {c.ffn_dim, c.d_model};
    }
    shapes[param_names::final_norm] = {c.d_model};
    shapes[param_names::output] = {c.d_model, c.vocab_size};
    return shapes;
}

inline bool is_embedding_param(const std::string& name) {
    return name == param_names::embedding || name == param_names::output;
}

template <class T>
std::size_t count_params(const BasicParameterSet<T>& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) {
        n += t.numel();
    }
    return n;
}

// Excludes the token embedding and the output head (the usual convention for
// 6ND accounting).
template <class T>
std::size_t count_nonembedding(const BasicParameterSet<T>& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) {
        if (!is_embedding_param(name)) {
            n += t.numel();
        }
    }
    return n;
}

inline std::size_t count_nonembedding(const ModelConfig& c) {
    std::size_t n = 0;
    for (const auto& [name, shape] : parameter_shapes(c)) {
        if (!is_embedding_param(name)) {
            n += shape_numel(shape);
        }
    }
    return n;
}

// Norm gains start at 1; every matrix is N(0, init_std^2), drawn in
// lexicographic name order from one seeded stream.
inline ParameterSet init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ParameterSet params;
    for (const auto& [name, shape] : parameter_shapes(config)) {
        Tensor t(shape);
        if (shape.size() == 1) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else {
            for (float& v : t.data) {
                v = static_cast<float>(rng.normal() * config.init_std);
            }
        }
        t.requires_grad = true;
        params.emplace(name, std::move(t));
    }
    return params;
}

template <class T>
void check_params(const ModelConfig& config, const BasicParameterSet<T>& params) {
    const auto shapes = parameter_shapes(config);
    if (shapes.size() != params.size()) {
        throw FormatError("parameter set has " + std::to_string(params.size()) + " tensors, architecture needs " +
                          std::to_string(shapes.size()));
    }
    for (const auto& [name, shape] : shapes) {
        auto it = params.find(name);
        if (it == params.end()) {
            throw FormatError("missing parameter '" + name + "'");
        }
        if (it->second.shape != shape) {
            throw FormatError("parameter '" + name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                              shape_str(shape));
        }
    }
}

template <class T>
struct ModelGraph {
    Var<T> logits;                           // [total_tokens x vocab]
    std::map<std::string, Var<T>> params;    // leaf handle per parameter
    std::vector<std::size_t> offsets;        // row offsets of each sequence
};

// Runs the transformer over a batch of sequences packed row-wise. Each
// sequence attends only within itself and has its own positions 0..L-1.
template <class T>
ModelGraph<T> forward_graph(Tape<T>& tape, const ModelConfig& c, const BasicParameterSet<T>& params,
                            std::span<const TokenSeq> batch) {
    ModelGraph<T> g;
    std::vector<std::int32_t> ids;
    std::vector<std::size_t> positions;
    g.offsets.push_back(0);
    for (const TokenSeq& seq : batch) {
        if (seq.size() > c.max_seq_len) {
            throw LengthError("sequence length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                              std::to_string(c.max_seq_len));
        }
        for (std::size_t i = 0; i < seq.size(); ++i) {
            ids.push_back(seq[i]);
            positions.push_back(i);
        }
        g.offsets.push_back(ids.size());
    }
    for (const auto& [name, t] : params) {
        g.params.emplace(name, tape.parameter(t));
    }
    auto p = [&](const std::string& name) { return g.params.at(name); };
    const bool causal = c.attention_mode == AttentionMode::causal;

    Var<T> h = ad::embedding(p(param_names::embedding), std::span<const std::int32_t>(ids));
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        auto a = ad::rms_norm(h, p(param_names::layer(i, "attention_norm")), c.rms_eps);
        auto q = ad::matmul(a, p(param_names::layer(i, "attention.wq")));
        auto k = ad::matmul(a, p(param_names::layer(i, "attention.wk")));
        auto v = ad::matmul(a, p(param_names::layer(i, "attention.wv")));
        q = ad::rope(q, std::span<const std::size_t>(positions), c.n_heads, c.rope_base);
        k = ad::rope(k, std::span<const std::size_t>(positions), c.n_heads, c.rope_base);
        auto o = ad::attention(q, k, v, std::span<const std::size_t>(g.offsets), c.n_heads, causal);
        h = ad::add(h, ad::matmul(o, p(param_names::layer(i, "attention.wo"))));
        auto f = ad::rms_norm(h, p(param_names::layer(i, "ffn_norm")), c.rms_eps);
        auto u = ad::matmul(f, p(param_names::layer(i, "feed_forward.w_gate_up")));
        h = ad::add(h, ad::matmul(ad::swiglu(u), p(param_names::layer(i, "feed_forward.w_down"))));
    }
    h = ad::rms_norm(h, p(param_names::final_norm), c.rms_eps);
    g.logits = ad::matmul(h, p(param_names::output));
    return g;
}

// Logits [L x V] for one sequence. No time input exists: the predictor is
// conditioned on the tokens alone.
template <class T>
BasicTensor<T> forward(const ModelConfig& c, const BasicParameterSet<T>& params, std::span<const TokenId> tokens) {
    Tape<T> tape(false);
    std::vector<TokenSeq> batch{TokenSeq(tokens.begin(), tokens.end())};
    return forward_graph(tape, c, params, std::span<const TokenSeq>(batch)).logits.value();
}

// Adapter exposing a trained network through the MaskPredictor concept.
class TransformerPredictor {
public:
    TransformerPredictor(const ModelConfig& config, const ParameterSet& params) : config_(&config), params_(&params) {}

    Tensor predict(std::span<const TokenId> seq) const { return forward(*config_, *params_, seq); }
    std::size_t vocab_size() const { return config_->vocab_size; }
    SpecialTokens special() const { return config_->special(); }
    bool causal() const { return config_->attention_mode == AttentionMode::causal; }
    const ModelConfig& config() const { return *config_; }

private:
    const ModelConfig* config_;
    const ParameterSet* params_;
};

} // namespace mdlm

#pragma once

#include <concepts>
#include <cstddef>
#include <span>

#include "mdlm/tensor.hpp"
#include "mdlm/tokens.hpp"

namespace mdlm {

// Anything that maps a (possibly masked) sequence to per-position logits over
// the vocabulary in one call. The transformer is one model of this concept;
// exact enumerated conditionals and the test doubles are others.
template <class P>
concept MaskPredictor = requires(const P& p, std::span<const TokenId> seq) {
    { p.predict(seq) } -> std::convertible_to<Tensor>;
    { p.vocab_size() } -> std::convertible_to<std::size_t>;
    { p.special() } -> std::convertible_to<SpecialTokens>;
    { p.causal() } -> std::convertible_to<bool>;
};

} // namespace mdlm

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mdlm/autodiff.hpp"
#include "mdlm/tensor.hpp"

// Value-level entry points for the differentiable ops. Each runs the op on a
// throwaway non-recording tape so there is exactly one implementation of the
// arithmetic.
namespace mdlm {

inline constexpr double kDefaultRmsEps = 1e-5;

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    Tape<T> tape(false);
    return ad::matmul(tape.parameter(a), tape.parameter(b)).value();
}

template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
    Tape<T> tape(false);
    return ad::softmax_rows(tape.parameter(x)).value();
}

template <class T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps = kDefaultRmsEps) {
    Tape<T> tape(false);
    return ad::rms_norm(tape.parameter(x), tape.parameter(gain), eps).value();
}

template <class T>
BasicTensor<T> swiglu(const BasicTensor<T>& x) {
    Tape<T> tape(false);
    return ad::swiglu(tape.parameter(x)).value();
}

// Rotates every row of x (width = n_heads * head_dim) by its position.
template <class T>
BasicTensor<T> rope_apply(const BasicTensor<T>& x, std::span<const std::size_t> positions, double base,
                          std::size_t n_heads = 1) {
    Tape<T> tape(false);
    return ad::rope(tape.parameter(x), positions, n_heads, base).value();
}

struct CrossEntropyResult {
    double total = 0.0;
    std::vector<double> per_position; // exactly 0 where the flag is false
};

// -log softmax(logits)[i, targets[i]] summed over flagged positions.
template <class T>
CrossEntropyResult masked_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                                        const std::vector<bool>& mask_flags) {
    detail::require_rank2(logits.shape, "masked_cross_entropy");
    const std::size_t rows = logits.shape[0], vocab = logits.shape[1];
    if (targets.size() != rows || mask_flags.size() != rows) {
        throw DimensionError("masked_cross_entropy: length mismatch");
    }
    CrossEntropyResult res;
    res.per_position.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw IndexError("masked_cross_entropy: target " + std::to_string(targets[r]) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
        if (!mask_flags[r]) {
            continue;
        }
        res.per_position[r] = detail::log_sum_exp(logits.row(r)) - static_cast<double>(logits.at(r, targets[r]));
        res.total += res.per_position[r];
    }
    return res;
}

} // namespace mdlm

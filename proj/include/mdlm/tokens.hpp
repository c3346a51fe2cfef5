#pragma once

#include <cstdint>
#include <vector>

namespace mdlm {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Reserved identifiers shared by everything that manipulates sequences.
struct SpecialTokens {
    TokenId mask_id = -1;
    TokenId eos_id = -1;
};

} // namespace mdlm

#pragma once

#include <string>
#include <vector>

#include "coot/tape.hpp"

namespace coot {

// Attention-aware feature aggregation. Each head reads the full sequence,
// produces per-dimension temporal attention weights for its feature slice,
// and the head outputs are concatenated back to full width.
struct AfaParams {
    struct Head {
        Param* w1 = nullptr;  // d x d_a
        Param* b1 = nullptr;  // 1 x d_a
        Param* w2 = nullptr;  // d_a x (d/H)
        Param* b2 = nullptr;  // 1 x (d/H)
    };
    std::vector<Head> heads;
    int width = 0;       // d
    int attn_width = 0;  // d_a
};

AfaParams make_afa_params(ParamStore& store, const std::string& prefix,
                          int width, int heads, int attn_width);

// Collapse a T x d sequence into a 1 x d vector via per-dimension softmax
// over the (masked) time axis. Output lies in the per-dimension convex hull
// of the valid inputs.
Var attention_fa(Tape& t, Var x, const Mask& mask, const AfaParams& params);

} // namespace coot

#pragma once

#include <string>

#include "coot/tape.hpp"

namespace coot {

struct AttentionParams {
    Param* wq = nullptr;
    Param* wk = nullptr;
    Param* wv = nullptr;
    Param* wo = nullptr;
    int heads = 1;
    int width = 0;
};

struct FeedForwardParams {
    Param* w1 = nullptr;
    Param* b1 = nullptr;
    Param* w2 = nullptr;
    Param* b2 = nullptr;
};

struct LayerNormParams {
    Param* gain = nullptr;
    Param* bias = nullptr;
};

struct TransformerBlockParams {
    AttentionParams attn;
    LayerNormParams ln1;
    FeedForwardParams ff;
    LayerNormParams ln2;
};

AttentionParams make_attention_params(ParamStore& store, const std::string& prefix,
                                      int width, int heads);
FeedForwardParams make_feed_forward_params(ParamStore& store,
                                           const std::string& prefix, int width,
                                           int inner);
LayerNormParams make_layer_norm_params(ParamStore& store,
                                       const std::string& prefix, int width);
TransformerBlockParams make_transformer_block_params(ParamStore& store,
                                                     const std::string& prefix,
                                                     int width, int heads,
                                                     int ff_inner);

enum class PoolKind { Max, Cls, Avg, Afa };

// Sequence pooling selector. The three avg knobs follow the sum / pad /
// divide design space: sum over all positions or valid ones only, pad the
// sequence to the batch length or to at least 16, divide by the padded
// length or by the valid count. The default used by the model is the
// pad-inclusive variant (sum=all, pad=batch, divide=nonzero).
struct PoolingMode {
    PoolKind kind = PoolKind::Avg;
    bool sum_all = true;
    bool pad_min16 = false;
    bool divide_all = false;

    static PoolingMode max() { return {PoolKind::Max, false, false, false}; }
    static PoolingMode cls() { return {PoolKind::Cls, false, false, false}; }
    static PoolingMode avg_standard() {
        return {PoolKind::Avg, false, false, false};
    }
    static PoolingMode avg_pad_inclusive() {
        return {PoolKind::Avg, true, false, false};
    }
    static PoolingMode afa() { return {PoolKind::Afa, false, false, false}; }

    static PoolingMode parse(const std::string& s);
    std::string to_string() const;
};

// y = x * w + b with b broadcast over rows.
Var linear(Tape& t, Var x, Param& w, Param& b);

// Scaled dot-product attention with H heads; the mask applies to kv rows.
Var multi_head_attention(Tape& t, Var q_input, Var kv_input,
                         const AttentionParams& params,
                         const Mask* kv_mask = nullptr);

Var feed_forward(Tape& t, Var x, const FeedForwardParams& params);

Var layer_norm(Tape& t, Var x, const LayerNormParams& params, float eps);

// Post-norm block: y = LN(x + SelfAttn(x)); z = LN(y + FF(y)).
// rng == nullptr or rate == 0 disables dropout (evaluation mode).
Var transformer_block(Tape& t, Var x, const Mask* mask,
                      const TransformerBlockParams& params, float ln_eps,
                      float dropout_rate = 0.0f, Rng* rng = nullptr);

// x + table[:T], learned additive positional embeddings.
Var add_positional(Tape& t, Var x, Param& table);

// Inverted dropout; identity when rate == 0.
Var dropout(Tape& t, Var x, float rate, Rng& rng);

// Collapse a T x d sequence to a 1 x d vector. pad_to is the padded batch
// length used by the avg pad/divide policies (>= T; pass T outside batching).
Var pool(Tape& t, Var x, const Mask& mask, const PoolingMode& mode,
         std::size_t pad_to);

} // namespace coot

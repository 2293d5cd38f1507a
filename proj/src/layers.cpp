#include "coot/layers.hpp"

#include <cmath>

namespace coot {

AttentionParams make_attention_params(ParamStore& store, const std::string& prefix,
                                      int width, int heads) {
    COOT_CHECK(width > 0 && heads > 0 && width % heads == 0,
               "attention: width ", width, " not divisible by heads ", heads);
    AttentionParams p;
    p.width = width;
    p.heads = heads;
    auto d = std::size_t(width);
    p.wq = &store.create(prefix + ".wq", d, d, ParamKind::Weight);
    p.wk = &store.create(prefix + ".wk", d, d, ParamKind::Weight);
    p.wv = &store.create(prefix + ".wv", d, d, ParamKind::Weight);
    p.wo = &store.create(prefix + ".wo", d, d, ParamKind::Weight);
    return p;
}

FeedForwardParams make_feed_forward_params(ParamStore& store,
                                           const std::string& prefix, int width,
                                           int inner) {
    COOT_CHECK(width > 0 && inner > 0, "feed_forward: bad widths");
    FeedForwardParams p;
    p.w1 = &store.create(prefix + ".w1", std::size_t(width), std::size_t(inner),
                         ParamKind::Weight);
    p.b1 = &store.create(prefix + ".b1", 1, std::size_t(inner), ParamKind::Bias);
    p.w2 = &store.create(prefix + ".w2", std::size_t(inner), std::size_t(width),
                         ParamKind::Weight);
    p.b2 = &store.create(prefix + ".b2", 1, std::size_t(width), ParamKind::Bias);
    return p;
}

LayerNormParams make_layer_norm_params(ParamStore& store,
                                       const std::string& prefix, int width) {
    LayerNormParams p;
    p.gain = &store.create(prefix + ".gain", 1, std::size_t(width), ParamKind::Gain);
    p.bias = &store.create(prefix + ".bias", 1, std::size_t(width), ParamKind::Bias);
    return p;
}

TransformerBlockParams make_transformer_block_params(ParamStore& store,
                                                     const std::string& prefix,
                                                     int width, int heads,
                                                     int ff_inner) {
    TransformerBlockParams p;
    p.attn = make_attention_params(store, prefix + ".attn", width, heads);
    p.ln1 = make_layer_norm_params(store, prefix + ".ln1", width);
    p.ff = make_feed_forward_params(store, prefix + ".ff", width, ff_inner);
    p.ln2 = make_layer_norm_params(store, prefix + ".ln2", width);
    return p;
}

PoolingMode PoolingMode::parse(const std::string& s) {
    if (s == "max") return max();
    if (s == "cls") return cls();
    if (s == "avg" || s == "avg_standard") return avg_standard();
    if (s == "avg_pad_inclusive") return avg_pad_inclusive();
    if (s == "afa") return afa();
    // Detailed form: avg:<all|nonzero>:<batch|max16>:<all|nonzero>
    if (s.rfind("avg:", 0) == 0) {
        std::string rest = s.substr(4);
        auto p1 = rest.find(':');
        auto p2 = rest.rfind(':');
        COOT_CHECK_CFG(p1 != std::string::npos && p2 != std::string::npos &&
                           p1 != p2,
                       "pooling: bad avg spec '", s, "'");
        std::string sum = rest.substr(0, p1);
        std::string pad = rest.substr(p1 + 1, p2 - p1 - 1);
        std::string divide = rest.substr(p2 + 1);
        PoolingMode m;
        m.kind = PoolKind::Avg;
        COOT_CHECK_CFG(sum == "all" || sum == "nonzero", "pooling: bad sum '",
                       sum, "'");
        COOT_CHECK_CFG(pad == "batch" || pad == "max16", "pooling: bad pad '",
                       pad, "'");
        COOT_CHECK_CFG(divide == "all" || divide == "nonzero",
                       "pooling: bad divide '", divide, "'");
        m.sum_all = sum == "all";
        m.pad_min16 = pad == "max16";
        m.divide_all = divide == "all";
        return m;
    }
    throw ConfigError(str("pooling: unknown mode '", s, "'"));
}

std::string PoolingMode::to_string() const {
    switch (kind) {
        case PoolKind::Max: return "max";
        case PoolKind::Cls: return "cls";
        case PoolKind::Afa: return "afa";
        case PoolKind::Avg:
            return str("avg:", sum_all ? "all" : "nonzero", ":",
                       pad_min16 ? "max16" : "batch", ":",
                       divide_all ? "all" : "nonzero");
    }
    return "?";
}

Var linear(Tape& t, Var x, Param& w, Param& b) {
    return t.add_row(t.matmul(x, t.param(w)), t.param(b));
}

Var multi_head_attention(Tape& t, Var q_input, Var kv_input,
                         const AttentionParams& params, const Mask* kv_mask) {
    const std::size_t d = std::size_t(params.width);
    COOT_CHECK(t.value(q_input).cols() == d, "attention: width mismatch (query ",
               t.value(q_input).cols(), " vs model ", d, ")");
    COOT_CHECK(t.value(kv_input).cols() == d, "attention: width mismatch (kv ",
               t.value(kv_input).cols(), " vs model ", d, ")");
    if (kv_mask != nullptr)
        COOT_CHECK(kv_mask->count_valid() > 0, "attention: fully masked kv");

    const int H = params.heads;
    const int dh = params.width / H;
    const float inv_sqrt_dh = 1.0f / std::sqrt(float(dh));

    Var q = t.matmul(q_input, t.param(*params.wq));
    Var k = t.matmul(kv_input, t.param(*params.wk));
    Var v = t.matmul(kv_input, t.param(*params.wv));

    std::vector<Var> heads;
    heads.reserve(std::size_t(H));
    for (int h = 0; h < H; ++h) {
        int from = h * dh, to = (h + 1) * dh;
        Var qh = t.slice_cols(q, from, to);
        Var kh = t.slice_cols(k, from, to);
        Var vh = t.slice_cols(v, from, to);
        Var scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt_dh);
        Var weights = t.softmax(scores, 1, kv_mask);
        heads.push_back(t.matmul(weights, vh));
    }
    return t.matmul(t.concat_cols(heads), t.param(*params.wo));
}

Var feed_forward(Tape& t, Var x, const FeedForwardParams& params) {
    Var h = t.gelu(linear(t, x, *params.w1, *params.b1));
    return linear(t, h, *params.w2, *params.b2);
}

Var layer_norm(Tape& t, Var x, const LayerNormParams& params, float eps) {
    return t.layer_norm(x, t.param(*params.gain), t.param(*params.bias), eps);
}

Var dropout(Tape& t, Var x, float rate, Rng& rng) {
    if (rate <= 0.0f) return x;
    COOT_CHECK(rate < 1.0f, "dropout: rate must be < 1");
    const Tensor& v = t.value(x);
    Tensor mask(v.rows(), v.cols());
    const float keep_scale = 1.0f / (1.0f - rate);
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = rng.uniform() < double(rate) ? 0.0f : keep_scale;
    return t.mul_const(x, std::move(mask));
}

Var transformer_block(Tape& t, Var x, const Mask* mask,
                      const TransformerBlockParams& params, float ln_eps,
                      float dropout_rate, Rng* rng) {
    Var attn = multi_head_attention(t, x, x, params.attn, mask);
    if (rng != nullptr && dropout_rate > 0.0f)
        attn = dropout(t, attn, dropout_rate, *rng);
    Var y = layer_norm(t, t.add(x, attn), params.ln1, ln_eps);
    Var ff = feed_forward(t, y, params.ff);
    if (rng != nullptr && dropout_rate > 0.0f)
        ff = dropout(t, ff, dropout_rate, *rng);
    return layer_norm(t, t.add(y, ff), params.ln2, ln_eps);
}

Var add_positional(Tape& t, Var x, Param& table) {
    const std::size_t rows = t.value(x).rows();
    COOT_CHECK(rows <= table.value.rows(), "positional: sequence length ", rows,
               " exceeds table length ", table.value.rows());
    COOT_CHECK(t.value(x).cols() == table.value.cols(),
               "positional: width mismatch");
    return t.add(x, t.slice_rows(t.param(table), 0, int(rows)));
}

Var pool(Tape& t, Var x, const Mask& mask, const PoolingMode& mode,
         std::size_t pad_to) {
    const Tensor& v = t.value(x);
    COOT_CHECK(mask.size() == v.rows(), "pool: mask length mismatch");
    const std::size_t valid = mask.count_valid();
    COOT_CHECK(valid > 0, "pool: empty valid set");
    switch (mode.kind) {
        case PoolKind::Max:
            return t.max_axis0(x, &mask);
        case PoolKind::Cls:
            COOT_CHECK(mask.valid[0], "pool: cls position must be valid");
            return t.slice_rows(x, 0, 1);
        case PoolKind::Afa:
            COOT_CHECK(false, "pool: afa is computed by attention_fa");
            return x;
        case PoolKind::Avg: {
            Var summed = x;
            if (!mode.sum_all && valid != v.rows()) {
                Tensor keep(v.rows(), v.cols());
                for (std::size_t r = 0; r < v.rows(); ++r)
                    for (std::size_t c = 0; c < v.cols(); ++c)
                        keep.at(r, c) = mask.valid[r] ? 1.0f : 0.0f;
                summed = t.mul_const(x, std::move(keep));
            }
            Var sum = t.sum_axis0(summed);
            COOT_CHECK(pad_to >= v.rows(), "pool: pad_to below sequence length");
            std::size_t padded = mode.pad_min16 ? std::max<std::size_t>(pad_to, 16)
                                                : pad_to;
            std::size_t divisor = mode.divide_all ? padded : valid;
            return t.scale(sum, 1.0f / float(divisor));
        }
    }
    COOT_CHECK(false, "pool: unreachable");
    return x;
}

} // namespace coot

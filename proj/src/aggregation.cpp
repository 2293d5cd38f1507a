#include "coot/aggregation.hpp"

namespace coot {

AfaParams make_afa_params(ParamStore& store, const std::string& prefix,
                          int width, int heads, int attn_width) {
    COOT_CHECK(width > 0 && heads > 0 && width % heads == 0,
               "afa: width ", width, " not divisible by heads ", heads);
    COOT_CHECK(attn_width >= 1, "afa: attention width must be >= 1");
    AfaParams p;
    p.width = width;
    p.attn_width = attn_width;
    const std::size_t d = std::size_t(width);
    const std::size_t da = std::size_t(attn_width);
    const std::size_t dh = d / std::size_t(heads);
    for (int h = 0; h < heads; ++h) {
        AfaParams::Head head;
        std::string hp = str(prefix, ".h", h);
        head.w1 = &store.create(hp + ".w1", d, da, ParamKind::Weight);
        head.b1 = &store.create(hp + ".b1", 1, da, ParamKind::Bias);
        head.w2 = &store.create(hp + ".w2", da, dh, ParamKind::Weight);
        head.b2 = &store.create(hp + ".b2", 1, dh, ParamKind::Bias);
        p.heads.push_back(head);
    }
    return p;
}

Var attention_fa(Tape& t, Var x, const Mask& mask, const AfaParams& params) {
    const Tensor& v = t.value(x);
    COOT_CHECK(v.cols() == std::size_t(params.width),
               "afa: width mismatch (input ", v.cols(), " vs ", params.width, ")");
    COOT_CHECK(mask.size() == v.rows(), "afa: mask length mismatch");
    COOT_CHECK(mask.count_valid() > 0, "afa: empty valid set");

    const int H = int(params.heads.size());
    const int dh = params.width / H;
    std::vector<Var> outs;
    outs.reserve(params.heads.size());
    for (int h = 0; h < H; ++h) {
        const auto& hp = params.heads[std::size_t(h)];
        // Q = GELU(X W1 + b1): T x d_a
        Var q = t.gelu(t.add_row(t.matmul(x, t.param(*hp.w1)), t.param(*hp.b1)));
        // scores: T x (d/H), softmax over the time axis per dimension
        Var scores = t.add_row(t.matmul(q, t.param(*hp.w2)), t.param(*hp.b2));
        Var weights = t.softmax(scores, 0, &mask);
        Var slice = t.slice_cols(x, h * dh, (h + 1) * dh);
        outs.push_back(t.sum_axis0(t.mul(weights, slice)));
    }
    return t.concat_cols(outs);
}

} // namespace coot

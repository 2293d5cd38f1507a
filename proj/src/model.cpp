#include "coot/model.hpp"

#include <cstring>
#include <fstream>

namespace coot {

namespace {

BranchParams make_branch(ParamStore& store, const std::string& prefix,
                         const BranchConfig& bc) {
    COOT_CHECK_CFG(bc.input_dim > 0, prefix, ": input_dim must be set");
    COOT_CHECK_CFG(bc.width > 0 && bc.width % bc.heads == 0,
                   prefix, ": width must be divisible by heads");
    COOT_CHECK_CFG(bc.dropout >= 0.0f && bc.dropout < 1.0f,
                   prefix, ": dropout must be in [0, 1)");
    BranchParams bp;
    bp.proj_w = &store.create(prefix + ".proj.w", std::size_t(bc.input_dim),
                              std::size_t(bc.width), ParamKind::Weight);
    bp.proj_b = &store.create(prefix + ".proj.b", 1, std::size_t(bc.width),
                              ParamKind::Bias);
    bp.pos_low = &store.create(prefix + ".pos_low",
                               std::size_t(bc.max_positions_low),
                               std::size_t(bc.width), ParamKind::Weight);
    bp.pos_high = &store.create(prefix + ".pos_high",
                                std::size_t(bc.max_positions_high),
                                std::size_t(bc.width), ParamKind::Weight);
    if (bc.low_pool.kind == PoolKind::Cls)
        bp.cls_token = &store.create(prefix + ".cls", 1, std::size_t(bc.width),
                                     ParamKind::Weight);
    bp.tt = make_transformer_block_params(store, prefix + ".tt", bc.width,
                                          bc.heads, bc.ff_dim);
    if (bc.low_pool.kind == PoolKind::Afa)
        bp.afa = make_afa_params(store, prefix + ".afa", bc.width, bc.afa_heads,
                                 bc.afa_dim);
    bp.cot.local = make_transformer_block_params(store, prefix + ".cot.local",
                                                 bc.width, bc.heads, bc.ff_dim);
    bp.cot.cross =
        make_attention_params(store, prefix + ".cot.cross", bc.width, bc.heads);
    bp.cot.ln1 = make_layer_norm_params(store, prefix + ".cot.ln1", bc.width);
    bp.cot.ff = make_feed_forward_params(store, prefix + ".cot.ff", bc.width,
                                         bc.ff_dim);
    bp.cot.ln2 = make_layer_norm_params(store, prefix + ".cot.ln2", bc.width);
    return bp;
}

} // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    COOT_CHECK_CFG(cfg_.video.width == cfg_.text.width,
                   "model: branch widths must match (joint embedding space)");
    video_ = make_branch(store_, "video", cfg_.video);
    text_ = make_branch(store_, "text", cfg_.text);
}

std::size_t Model::param_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& p : store_)
        if (p->name.rfind(prefix, 0) == 0) n += p->value.size();
    return n;
}

Var Model::encode_sequence(Tape& t, const FeatureSequence& seq,
                           const BranchParams& bp, const BranchConfig& bc,
                           const EncodeOptions& opts) const {
    COOT_CHECK(seq.length() > 0, "encode: empty segment");
    COOT_CHECK(seq.dim() == std::size_t(bc.input_dim),
               "encode: width mismatch (features ", seq.dim(), " vs input_dim ",
               bc.input_dim, ")");
    COOT_CHECK(seq.mask.size() == seq.length(), "encode: mask length mismatch");

    Var x = t.constant(seq.features);
    Var h = linear(t, x, *bp.proj_w, *bp.proj_b);
    Mask mask = seq.mask;
    if (bc.low_pool.kind == PoolKind::Cls) {
        h = t.concat_rows({t.param(*bp.cls_token), h});
        Mask with_cls;
        with_cls.valid.push_back(1);
        with_cls.valid.insert(with_cls.valid.end(), mask.valid.begin(),
                              mask.valid.end());
        mask = std::move(with_cls);
    }
    h = add_positional(t, h, *bp.pos_low);
    const bool drop = opts.train && opts.rng != nullptr && bc.dropout > 0.0f;
    if (drop) h = dropout(t, h, bc.dropout, *opts.rng);
    h = transformer_block(t, h, &mask, bp.tt, bc.ln_eps,
                          drop ? bc.dropout : 0.0f, drop ? opts.rng : nullptr);
    if (bc.low_pool.kind == PoolKind::Afa)
        return attention_fa(t, h, mask, bp.afa);
    return pool(t, h, mask, bc.low_pool, t.value(h).rows());
}

Var Model::contextual_transformer(Tape& t, Var local, Var global,
                                  bool video_branch,
                                  const EncodeOptions& opts) const {
    const BranchParams& bp = video_branch ? video_ : text_;
    const BranchConfig& bc = video_branch ? cfg_.video : cfg_.text;
    const std::size_t n = t.value(local).rows();
    COOT_CHECK(n >= 1, "contextual_transformer: empty local sequence");

    const bool drop = opts.train && opts.rng != nullptr && bc.dropout > 0.0f;
    Mask mask = Mask::all(n);
    Var with_pos = add_positional(t, local, *bp.pos_high);
    Var h = transformer_block(t, with_pos, &mask, bp.cot.local, bc.ln_eps,
                              drop ? bc.dropout : 0.0f, drop ? opts.rng : nullptr);

    std::size_t pad_to = std::max<std::size_t>(opts.pad_to_clips, n);
    Var mean_h = pool(t, h, mask, bc.high_pool, pad_to);

    Var attn = multi_head_attention(t, global, h, bp.cot.cross, &mask);
    if (drop) attn = dropout(t, attn, bc.dropout, *opts.rng);
    // Residual source for the cross-attention is the projected query.
    Var q_proj = t.matmul(global, t.param(*bp.cot.cross.wq));
    Var u = layer_norm(t, t.add(q_proj, attn), bp.cot.ln1, bc.ln_eps);
    Var ff = feed_forward(t, u, bp.cot.ff);
    if (drop) ff = dropout(t, ff, bc.dropout, *opts.rng);
    Var h_context = layer_norm(t, t.add(u, ff), bp.cot.ln2, bc.ln_eps);

    return t.concat_cols({mean_h, h_context});
}

BranchVars Model::encode_branch(Tape& t,
                                const std::vector<FeatureSequence>& segments,
                                const FeatureSequence& whole, bool video_branch,
                                const EncodeOptions& opts) const {
    COOT_CHECK(!segments.empty(), "encode: no segments");
    const BranchParams& bp = video_branch ? video_ : text_;
    const BranchConfig& bc = video_branch ? cfg_.video : cfg_.text;

    std::vector<Var> seg_vars;
    seg_vars.reserve(segments.size());
    for (const auto& seg : segments)
        seg_vars.push_back(encode_sequence(t, seg, bp, bc, opts));
    BranchVars out;
    out.segments = t.concat_rows(seg_vars);
    out.global = encode_sequence(t, whole, bp, bc, opts);
    out.final = contextual_transformer(t, out.segments, out.global, video_branch,
                                       opts);
    return out;
}

PairVars Model::encode_pair(Tape& t, const HierarchicalSample& sample,
                            const EncodeOptions& opts) const {
    BranchVars v = encode_branch(t, sample.clips, sample.video_all, true, opts);
    BranchVars p = encode_branch(t, sample.sentences, sample.text_all, false, opts);
    PairVars out;
    out.clips = v.segments;
    out.sentences = p.segments;
    out.video = v.final;
    out.paragraph = p.final;
    out.gv = v.global;
    out.gp = p.global;
    return out;
}

PairEmbeddings Model::encode_pair_values(const HierarchicalSample& sample,
                                         std::size_t pad_to_clips) const {
    Tape t;
    EncodeOptions opts;
    opts.pad_to_clips = pad_to_clips;
    PairVars pv = encode_pair(t, sample, opts);
    PairEmbeddings out;
    out.id = sample.id;
    out.clips = t.value(pv.clips);
    out.sentences = t.value(pv.sentences);
    out.video = t.value(pv.video);
    out.paragraph = t.value(pv.paragraph);
    out.gv = t.value(pv.gv);
    out.gp = t.value(pv.gp);
    return out;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) {
    std::uint32_t v = 0;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        COOT_CHECK(pos + n <= buf.size(), "checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= std::uint32_t(std::uint8_t(buf[pos + std::size_t(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= std::uint64_t(std::uint8_t(buf[pos + std::size_t(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        std::uint32_t v = u32();
        float f = 0;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

constexpr char kCkptMagic[9] = "COOTCKP1";

} // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json) {
    std::string out;
    out.append(kCkptMagic, 8);
    std::string header = str("{\"format_version\":1,\"config\":",
                             config_json.empty() ? "{}" : config_json, "}");
    put_u64(out, header.size());
    out += header;
    put_u64(out, store.count());
    for (const auto& p : store) {
        put_u32(out, std::uint32_t(p->name.size()));
        out += p->name;
        put_u32(out, std::uint32_t(p->value.rows()));
        put_u32(out, std::uint32_t(p->value.cols()));
        for (std::size_t i = 0; i < p->value.size(); ++i)
            put_f32(out, p->value[i]);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    COOT_CHECK(f.good(), "checkpoint: cannot open ", path, " for writing");
    f.write(out.data(), std::streamsize(out.size()));
    COOT_CHECK(f.good(), "checkpoint: write failed for ", path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    COOT_CHECK(f.good(), "checkpoint: cannot open ", path);
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    Reader r{buf};
    COOT_CHECK(r.bytes(8) == std::string(kCkptMagic, 8),
               "checkpoint: bad magic in ", path);
    Checkpoint ckpt;
    std::uint64_t header_len = r.u64();
    std::string header = r.bytes(header_len);
    // Header is {"format_version":1,"config":<json>}; extract the config.
    const std::string key = "\"config\":";
    auto kpos = header.find(key);
    COOT_CHECK(kpos != std::string::npos, "checkpoint: malformed header");
    ckpt.config_json = header.substr(kpos + key.size(),
                                     header.size() - kpos - key.size() - 1);
    std::uint64_t n_records = r.u64();
    for (std::uint64_t i = 0; i < n_records; ++i) {
        std::uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        std::uint32_t rows = r.u32();
        std::uint32_t cols = r.u32();
        Tensor t(rows, cols);
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = r.f32();
        ckpt.tensors.emplace_back(std::move(name), std::move(t));
    }
    COOT_CHECK(r.pos == buf.size(), "checkpoint: trailing bytes in ", path);
    return ckpt;
}

void load_params(ParamStore& store, const Checkpoint& ckpt) {
    COOT_CHECK(ckpt.tensors.size() == store.count(),
               "checkpoint: parameter count mismatch (", ckpt.tensors.size(),
               " vs ", store.count(), ")");
    for (const auto& [name, tensor] : ckpt.tensors) {
        Param& p = store.get(name);
        COOT_CHECK(p.value.same_shape(tensor), "checkpoint: shape mismatch for ",
                   name);
        p.value = tensor;
    }
}

} // namespace coot

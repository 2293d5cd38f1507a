#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "coot/eval.hpp"
#include "coot/losses.hpp"
#include "coot/model.hpp"
#include "test_util.hpp"

using namespace coot;
using coot::testing::check_scalar;
using coot::testing::rand_tensor;

namespace {

ModelConfig small_config(int input_dim_v = 5, int input_dim_t = 4, int width = 8) {
    BranchConfig b;
    b.width = width;
    b.heads = 2;
    b.ff_dim = width;
    b.afa_heads = 2;
    b.afa_dim = 2 * width;
    b.dropout = 0.0f;
    b.max_positions_low = 12;
    b.max_positions_high = 6;
    ModelConfig mc;
    mc.video = b;
    mc.video.input_dim = input_dim_v;
    mc.text = b;
    mc.text.input_dim = input_dim_t;
    return mc;
}

void randomize(ParamStore& store, Rng& rng, double scale = 0.3) {
    for (auto& p : store) {
        if (p->kind == ParamKind::Gain) {
            p->value.fill(1.0f);
        } else if (p->kind == ParamKind::Bias) {
            p->value.fill(0.0f);
        } else {
            for (std::size_t i = 0; i < p->value.size(); ++i)
                p->value[i] = float(rng.uniform(-scale, scale));
        }
    }
}

FeatureSequence seq_of(const Tensor& features) {
    FeatureSequence s;
    s.features = features;
    s.mask = Mask::all(features.rows());
    return s;
}

HierarchicalSample random_sample(Rng& rng, std::uint64_t id, std::size_t clips,
                                 std::size_t frames, int vdim, std::size_t sents,
                                 std::size_t tokens, int tdim) {
    HierarchicalSample hs;
    hs.id = id;
    std::vector<Tensor> all_frames;
    for (std::size_t c = 0; c < clips; ++c) {
        Tensor f = rand_tensor(rng, frames, std::size_t(vdim));
        all_frames.push_back(f);
        hs.clips.push_back(seq_of(f));
    }
    Tensor whole(clips * frames, std::size_t(vdim));
    for (std::size_t c = 0; c < clips; ++c)
        for (std::size_t i = 0; i < all_frames[c].size(); ++i)
            whole[c * all_frames[c].size() + i] = all_frames[c][i];
    hs.video_all = seq_of(whole);
    std::vector<Tensor> all_tokens;
    for (std::size_t s = 0; s < sents; ++s) {
        Tensor f = rand_tensor(rng, tokens, std::size_t(tdim));
        all_tokens.push_back(f);
        hs.sentences.push_back(seq_of(f));
    }
    Tensor whole_t(sents * tokens, std::size_t(tdim));
    for (std::size_t s = 0; s < sents; ++s)
        for (std::size_t i = 0; i < all_tokens[s].size(); ++i)
            whole_t[s * all_tokens[s].size() + i] = all_tokens[s][i];
    hs.text_all = seq_of(whole_t);
    return hs;
}

} // namespace

TEST_CASE("single clip with constant frames: clip embedding equals global context") {
    Rng rng(157);
    Model model(small_config());
    randomize(model.params(), rng);

    Tensor frames(4, 5);
    Tensor v = rand_tensor(rng, 1, 5);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 5; ++c) frames.at(r, c) = v[c];

    HierarchicalSample hs;
    hs.id = 0;
    hs.clips.push_back(seq_of(frames));
    hs.video_all = seq_of(frames);
    hs.sentences.push_back(seq_of(rand_tensor(rng, 3, 4)));
    hs.text_all = hs.sentences[0];

    PairEmbeddings e = model.encode_pair_values(hs);
    REQUIRE(e.clips.rows() == 1);
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(e.clips.at(0, c) == e.gv.at(0, c));
}

TEST_CASE("shape contract: n clips, width d gives n x d and 2d") {
    Rng rng(163);
    ModelConfig mc = small_config(6, 5, 32);
    mc.video.max_positions_low = 24;
    mc.text.max_positions_low = 24;
    Model model(mc);
    randomize(model.params(), rng, 0.1);
    HierarchicalSample hs = random_sample(rng, 0, 3, 7, 6, 2, 4, 5);
    PairEmbeddings e = model.encode_pair_values(hs);
    CHECK(e.clips.rows() == 3);
    CHECK(e.clips.cols() == 32);
    CHECK(e.sentences.rows() == 2);
    CHECK(e.video.cols() == 64);
    CHECK(e.paragraph.cols() == 64);
    CHECK(e.gv.cols() == 32);
}

TEST_CASE("contextual transformer matches a dense oracle") {
    Rng rng(167);
    const int d = 16, H = 2;
    ModelConfig mc = small_config(5, 5, d);
    mc.video.heads = H;
    mc.text.heads = H;
    Model model(mc);
    randomize(model.params(), rng, 0.4);
    ParamStore& store = model.params();

    const std::size_t n = 4;
    Tensor local = rand_tensor(rng, n, d);
    Tensor g = rand_tensor(rng, 1, d);

    Tape t;
    EncodeOptions opts;
    Var out = model.contextual_transformer(t, t.constant(local), t.constant(g),
                                           true, opts);
    REQUIRE(t.value(out).cols() == 2 * d);

    // Recreate h = F_Local(local + positions) through the same layer calls;
    // the values are bitwise identical to what the model computed internally.
    TransformerBlockParams blk;
    blk.attn = {&store.get("video.cot.local.attn.wq"),
                &store.get("video.cot.local.attn.wk"),
                &store.get("video.cot.local.attn.wv"),
                &store.get("video.cot.local.attn.wo"), H, d};
    blk.ln1 = {&store.get("video.cot.local.ln1.gain"),
               &store.get("video.cot.local.ln1.bias")};
    blk.ff = {&store.get("video.cot.local.ff.w1"),
              &store.get("video.cot.local.ff.b1"),
              &store.get("video.cot.local.ff.w2"),
              &store.get("video.cot.local.ff.b2")};
    blk.ln2 = {&store.get("video.cot.local.ln2.gain"),
               &store.get("video.cot.local.ln2.bias")};
    Mask mask = Mask::all(n);
    Var h_var = transformer_block(
        t, add_positional(t, t.constant(local), store.get("video.pos_high")),
        &mask, blk, 1e-5f);
    const Tensor& h = t.value(h_var);

    // Dense double-precision evaluation of the cross-attention, residual
    // norms, feed-forward and the concat(mean, context) rule.
    auto wq = store.get("video.cot.cross.wq").value;
    auto wk = store.get("video.cot.cross.wk").value;
    auto wv = store.get("video.cot.cross.wv").value;
    auto wo = store.get("video.cot.cross.wo").value;
    const int dh = d / H;
    std::vector<double> q(d, 0), k(n * d, 0), v(n * d, 0);
    for (int c = 0; c < d; ++c)
        for (int l = 0; l < d; ++l) q[c] += double(g[l]) * double(wq.at(l, c));
    for (std::size_t r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c)
            for (int l = 0; l < d; ++l) {
                k[r * d + c] += double(h.at(r, l)) * double(wk.at(l, c));
                v[r * d + c] += double(h.at(r, l)) * double(wv.at(l, c));
            }
    std::vector<double> concat_heads(d, 0);
    for (int hh = 0; hh < H; ++hh) {
        std::vector<double> scores(n, 0);
        double mx = -1e300;
        for (std::size_t r = 0; r < n; ++r) {
            double s = 0;
            for (int c = 0; c < dh; ++c)
                s += q[hh * dh + c] * k[r * d + hh * dh + c];
            scores[r] = s / std::sqrt(double(dh));
            mx = std::max(mx, scores[r]);
        }
        double denom = 0;
        for (auto& s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        for (auto& s : scores) s /= denom;
        for (int c = 0; c < dh; ++c)
            for (std::size_t r = 0; r < n; ++r)
                concat_heads[hh * dh + c] += scores[r] * v[r * d + hh * dh + c];
    }
    std::vector<double> attn(d, 0);
    for (int c = 0; c < d; ++c)
        for (int l = 0; l < d; ++l)
            attn[c] += concat_heads[l] * double(wo.at(l, c));

    auto layer_norm_d = [&](std::vector<double> x, const std::string& prefix) {
        const Tensor& gain = store.get(prefix + ".gain").value;
        const Tensor& bias = store.get(prefix + ".bias").value;
        double mean = 0;
        for (double xv : x) mean += xv;
        mean /= double(x.size());
        double var = 0;
        for (double xv : x) var += (xv - mean) * (xv - mean);
        var /= double(x.size());
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t c = 0; c < x.size(); ++c)
            x[c] = (x[c] - mean) * inv * double(gain[c]) + double(bias[c]);
        return x;
    };

    std::vector<double> u(d);
    for (int c = 0; c < d; ++c) u[std::size_t(c)] = q[std::size_t(c)] + attn[std::size_t(c)];
    u = layer_norm_d(u, "video.cot.ln1");

    const Tensor& w1 = store.get("video.cot.ff.w1").value;
    const Tensor& b1 = store.get("video.cot.ff.b1").value;
    const Tensor& w2 = store.get("video.cot.ff.w2").value;
    const Tensor& b2 = store.get("video.cot.ff.b2").value;
    std::vector<double> inner(w1.cols(), 0);
    for (std::size_t c = 0; c < w1.cols(); ++c) {
        double s = double(b1[c]);
        for (int l = 0; l < d; ++l) s += u[std::size_t(l)] * double(w1.at(std::size_t(l), c));
        inner[c] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
    std::vector<double> ff(d, 0);
    for (int c = 0; c < d; ++c) {
        double s = double(b2[std::size_t(c)]);
        for (std::size_t l = 0; l < w1.cols(); ++l)
            s += inner[l] * double(w2.at(l, std::size_t(c)));
        ff[std::size_t(c)] = u[std::size_t(c)] + s;
    }
    std::vector<double> hctx = layer_norm_d(ff, "video.cot.ln2");

    for (int c = 0; c < d; ++c) {
        double mean_h = 0;
        for (std::size_t r = 0; r < n; ++r) mean_h += double(h.at(r, std::size_t(c)));
        mean_h /= double(n);
        CHECK(std::fabs(double(t.value(out)[std::size_t(c)]) - mean_h) <= 1e-5);
        CHECK(std::fabs(double(t.value(out)[std::size_t(d + c)]) - hctx[std::size_t(c)]) <=
              1e-5);
    }
}

TEST_CASE("contextual transformer with one segment: attention weight is 1") {
    Rng rng(173);
    Model model(small_config());
    randomize(model.params(), rng);
    Tensor local = rand_tensor(rng, 1, 8), g = rand_tensor(rng, 1, 8);
    Tape t;
    EncodeOptions opts;
    Var out = model.contextual_transformer(t, t.constant(local), t.constant(g),
                                           true, opts);
    CHECK(t.value(out).cols() == 16);
    CHECK(t.value(out).all_finite());
}

TEST_CASE("T-Transformer weights are shared between segment and global paths") {
    Rng rng(179);
    Model model(small_config());
    randomize(model.params(), rng);
    HierarchicalSample hs = random_sample(rng, 0, 2, 4, 5, 2, 3, 4);

    PairEmbeddings before = model.encode_pair_values(hs);
    model.params().get("video.tt.ff.w1").value[0] += 0.5f;
    PairEmbeddings after = model.encode_pair_values(hs);

    bool clips_changed = false, global_changed = false;
    for (std::size_t i = 0; i < before.clips.size(); ++i)
        clips_changed |= before.clips[i] != after.clips[i];
    for (std::size_t i = 0; i < before.gv.size(); ++i)
        global_changed |= before.gv[i] != after.gv[i];
    CHECK(clips_changed);
    CHECK(global_changed);
}

TEST_CASE("branches are architecturally symmetric") {
    Model model(small_config(7, 7, 16));
    CHECK(model.param_count("video") == model.param_count("text"));
    CHECK(model.param_count("video") + model.param_count("text") ==
          model.param_count(""));
}

TEST_CASE("evaluation encode is deterministic and normalizes to unit norm") {
    Rng rng(181);
    Model model(small_config());
    randomize(model.params(), rng);
    HierarchicalSample hs = random_sample(rng, 0, 2, 4, 5, 2, 3, 4);
    PairEmbeddings a = model.encode_pair_values(hs);
    PairEmbeddings b = model.encode_pair_values(hs);
    for (std::size_t i = 0; i < a.video.size(); ++i)
        CHECK(a.video[i] == b.video[i]);

    Tensor rows = a.video;
    l2_normalize_rows(rows);
    double norm = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
        norm += double(rows[i]) * double(rows[i]);
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("checkpoint files round-trip byte exactly") {
    Rng rng(191);
    Model model(small_config());
    randomize(model.params(), rng);
    const std::string path = "test_model_ckpt.bin";
    const std::string config = "{\"width\":8}";
    save_checkpoint(path, model.params(), config);

    Checkpoint ckpt = load_checkpoint(path);
    CHECK(ckpt.config_json == config);
    REQUIRE(ckpt.tensors.size() == model.params().count());
    for (const auto& [name, tensor] : ckpt.tensors) {
        const Param& p = model.params().get(name);
        REQUIRE(p.value.same_shape(tensor));
        for (std::size_t i = 0; i < tensor.size(); ++i)
            CHECK(p.value[i] == tensor[i]);
    }

    // Save the loaded state again: files must be byte identical.
    Model model2(small_config());
    load_params(model2.params(), ckpt);
    const std::string path2 = "test_model_ckpt2.bin";
    save_checkpoint(path2, model2.params(), ckpt.config_json);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)),
                   std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)),
                   std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("end-to-end gradient check through the model and total loss") {
    // Fixed seed with all hinge arguments well away from zero; a kink inside
    // the central-difference window would make the numeric slope meaningless.
    Rng rng(21);
    Model model(small_config());
    randomize(model.params(), rng, 0.15);
    std::vector<HierarchicalSample> samples{
        random_sample(rng, 0, 2, 3, 5, 2, 3, 4),
        random_sample(rng, 1, 2, 3, 5, 2, 3, 4)};

    auto build = [&](Tape& t) {
        EncodeOptions opts;
        opts.pad_to_clips = 2;
        std::vector<PairVars> encoded;
        for (const auto& s : samples)
            encoded.push_back(model.encode_pair(t, s, opts));
        LossConfig cfg;
        return total_loss(t, encoded, cfg).total;
    };
    GradCheckReport rep = check_scalar(build, true, false);
    CHECK(rep.max_rel_err <= 1e-3);
}

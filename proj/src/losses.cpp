#include "coot/losses.hpp"

#include <atomic>
#include <iostream>

namespace coot {

void LossConfig::validate() const {
    COOT_CHECK_CFG(margin_low >= 0 && margin_high >= 0 && margin_global >= 0 &&
                       margin_cluster_low >= 0 && margin_cluster_high >= 0,
                   "losses: margins must be >= 0");
    COOT_CHECK_CFG(cmc_weight >= 0, "losses: cmc weight must be >= 0");
    COOT_CHECK_CFG(cmc_source_samples >= 0,
                   "losses: cmc_source_samples must be >= 0");
}

namespace {

// Row-normalize for cosine distances; errors on zero-norm rows.
Var normalize_rows(Tape& t, Var x) {
    Var norms = t.sqrt(t.sum_axis1(t.mul(x, x)));
    const Tensor& nv = t.value(norms);
    for (std::size_t i = 0; i < nv.size(); ++i)
        COOT_CHECK(nv[i] > 0.0f, "cosine distance: degenerate vector");
    return t.mul_col(x, t.recip(norms));
}

Var zero_scalar(Tape& t) { return t.constant(Tensor::scalar(0.0f)); }

void warn_small_batch() {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true))
        std::cerr << "[coot] warning: batch has < 2 pairs; alignment and "
                     "clustering losses have no negatives and are 0\n";
}

// Squared euclidean distances between row sets: out[i,j] = |a_i - b_j|^2.
Var sqdist_matrix(Tape& t, Var a, Var b) {
    Var g = t.scale(t.matmul(a, t.transpose(b)), -2.0f);
    Var ra = t.sum_axis1(t.mul(a, a));                // n x 1
    Var rb = t.transpose(t.sum_axis1(t.mul(b, b)));   // 1 x m
    return t.add_col(t.add_row(g, rb), ra);
}

// 0..n-1 as an n x 1 column.
Tensor index_column(std::size_t n) {
    Tensor idx(n, 1);
    for (std::size_t i = 0; i < n; ++i) idx[i] = float(i);
    return idx;
}

// One direction of the cycle: soft neighbor in `targets`, cycle back into
// `sources`, penalize deviation of the soft index from the start index.
Var cmc_direction(Tape& t, Var sources, Var targets, int source_samples,
                  Rng* rng) {
    const std::size_t m = t.value(sources).rows();
    Var to_target = t.softmax(t.scale(sqdist_matrix(t, sources, targets), -1.0f), 1);
    Var soft_neighbor = t.matmul(to_target, targets);  // m x d
    Var back = t.softmax(t.scale(sqdist_matrix(t, soft_neighbor, sources), -1.0f), 1);
    Var soft_index = t.matmul(back, t.constant(index_column(m)));  // m x 1
    Var err = t.sub(t.constant(index_column(m)), soft_index);
    Var sq = t.mul(err, err);
    if (source_samples > 0 && std::size_t(source_samples) < m) {
        COOT_CHECK(rng != nullptr, "cmc: source sampling requires an rng");
        std::vector<std::size_t> ids(m);
        for (std::size_t i = 0; i < m; ++i) ids[i] = i;
        rng->shuffle(ids);
        Tensor w(m, 1);
        for (int i = 0; i < source_samples; ++i)
            w[ids[std::size_t(i)]] = 1.0f / float(source_samples);
        return t.sum_all(t.mul_const(sq, std::move(w)));
    }
    return t.scale(t.sum_all(sq), 1.0f / float(m));
}

} // namespace

Var cosine_distance_var(Tape& t, Var x, Var y) {
    COOT_CHECK(t.value(x).rows() == 1 && t.value(y).rows() == 1,
               "cosine_distance: expects 1xN vectors");
    return cosine_distance_matrix(t, x, y);
}

Var cosine_distance_matrix(Tape& t, Var a, Var b) {
    COOT_CHECK(t.value(a).cols() == t.value(b).cols(),
               "cosine_distance: width mismatch");
    Var an = normalize_rows(t, a);
    Var bn = normalize_rows(t, b);
    return t.add_scalar(t.scale(t.matmul(an, t.transpose(bn)), -1.0f), 1.0f);
}

Var margin_contrastive(Tape& t, Var x, Var y, Var xn, Var yn, float margin) {
    COOT_CHECK(margin >= 0.0f, "margin_contrastive: margin must be >= 0");
    Var d_pos = cosine_distance_var(t, x, y);
    Var d_xn = cosine_distance_var(t, xn, y);
    Var d_yn = cosine_distance_var(t, x, yn);
    Var h1 = t.relu(t.add_scalar(t.sub(d_pos, d_xn), margin));
    Var h2 = t.relu(t.add_scalar(t.sub(d_pos, d_yn), margin));
    return t.add(h1, h2);
}

Var cmc_pair_loss(Tape& t, Var clips, Var sentences, int source_samples,
                  Rng* rng) {
    COOT_CHECK(t.value(clips).rows() >= 1 && t.value(sentences).rows() >= 1,
               "cmc: empty sequence");
    Var t2v = cmc_direction(t, sentences, clips, source_samples, rng);
    Var v2t = cmc_direction(t, clips, sentences, source_samples, rng);
    return t.add(t2v, v2t);
}

namespace {

// Hinge sums for one level of Eq-style alignment: positives on the diagonal
// of the distance matrix, negatives where the combination mask is 1.
Var alignment_level(Tape& t, Var dist, const Tensor& neg_mask, float margin) {
    Var d_pos = t.diag(dist);
    // max(0, margin + D(pos) - D(x, y')): distance matrix indexed [row, neg]
    Var hy = t.relu(t.add_scalar(t.add_col(t.scale(dist, -1.0f), d_pos), margin));
    // max(0, margin + D(pos) - D(x', y)): transposed indexing
    Var hx = t.relu(
        t.add_scalar(t.add_col(t.scale(t.transpose(dist), -1.0f), d_pos), margin));
    Tensor mask_copy = neg_mask;
    Var sum = t.add(t.sum_all(t.mul_const(hx, std::move(mask_copy))),
                    t.sum_all(t.mul_const(hy, neg_mask)));
    return sum;
}

Var cluster_level(Tape& t, Var dist_aa, Var dist_bb, const Tensor& neg_mask,
                  float margin) {
    Var ha = t.relu(t.add_scalar(t.scale(dist_aa, -1.0f), margin));
    Var hb = t.relu(t.add_scalar(t.scale(dist_bb, -1.0f), margin));
    Tensor mask_copy = neg_mask;
    return t.add(t.sum_all(t.mul_const(ha, std::move(mask_copy))),
                 t.sum_all(t.mul_const(hb, neg_mask)));
}

Tensor offdiag_mask(std::size_t n) {
    Tensor m(n, n, 1.0f);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 0.0f;
    return m;
}

struct LowLevelStack {
    Var clips, sentences;
    Tensor neg_mask;  // 1 where pair and position both differ
};

LowLevelStack stack_low_level(Tape& t, const std::vector<PairVars>& batch) {
    std::vector<Var> cs, ss;
    std::vector<std::size_t> pair_of, pos_of;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const std::size_t n = t.value(batch[k].clips).rows();
        const std::size_t m = t.value(batch[k].sentences).rows();
        COOT_CHECK(n == m, "alignment: pair ", k, " has ", n, " clips but ", m,
                   " sentences; aligned data required");
        cs.push_back(batch[k].clips);
        ss.push_back(batch[k].sentences);
        for (std::size_t i = 0; i < n; ++i) {
            pair_of.push_back(k);
            pos_of.push_back(i);
        }
    }
    LowLevelStack out;
    out.clips = t.concat_rows(cs);
    out.sentences = t.concat_rows(ss);
    const std::size_t total = pair_of.size();
    out.neg_mask = Tensor(total, total, 0.0f);
    for (std::size_t r = 0; r < total; ++r)
        for (std::size_t c = 0; c < total; ++c)
            if (pair_of[r] != pair_of[c] && pos_of[r] != pos_of[c])
                out.neg_mask.at(r, c) = 1.0f;
    return out;
}

} // namespace

AlignmentLosses alignment_losses(Tape& t, const std::vector<PairVars>& batch,
                                 const LossConfig& cfg) {
    COOT_CHECK(!batch.empty(), "alignment: empty batch");
    AlignmentLosses out;
    if (batch.size() < 2) {
        warn_small_batch();
        out.small_batch = true;
        out.low = zero_scalar(t);
        out.high = zero_scalar(t);
        out.global = zero_scalar(t);
        return out;
    }

    LowLevelStack low = stack_low_level(t, batch);
    Var d_low = cosine_distance_matrix(t, low.clips, low.sentences);
    out.low = alignment_level(t, d_low, low.neg_mask, cfg.margin_low);

    std::vector<Var> vids, paras, gvs, gps;
    for (const auto& pv : batch) {
        vids.push_back(pv.video);
        paras.push_back(pv.paragraph);
        gvs.push_back(pv.gv);
        gps.push_back(pv.gp);
    }
    Tensor high_mask = offdiag_mask(batch.size());
    Var d_high = cosine_distance_matrix(t, t.concat_rows(vids), t.concat_rows(paras));
    out.high = alignment_level(t, d_high, high_mask, cfg.margin_high);
    Var d_global = cosine_distance_matrix(t, t.concat_rows(gvs), t.concat_rows(gps));
    out.global = alignment_level(t, d_global, high_mask, cfg.margin_global);
    return out;
}

Var clustering_loss(Tape& t, const std::vector<PairVars>& batch,
                    const LossConfig& cfg) {
    COOT_CHECK(!batch.empty(), "clustering: empty batch");
    if (batch.size() < 2) {
        warn_small_batch();
        return zero_scalar(t);
    }
    LowLevelStack low = stack_low_level(t, batch);
    Var d_vv = cosine_distance_matrix(t, low.clips, low.clips);
    Var d_tt = cosine_distance_matrix(t, low.sentences, low.sentences);
    Var low_term =
        cluster_level(t, d_vv, d_tt, low.neg_mask, cfg.margin_cluster_low);

    std::vector<Var> vids, paras;
    for (const auto& pv : batch) {
        vids.push_back(pv.video);
        paras.push_back(pv.paragraph);
    }
    Var v = t.concat_rows(vids);
    Var p = t.concat_rows(paras);
    Var high_term = cluster_level(t, cosine_distance_matrix(t, v, v),
                                  cosine_distance_matrix(t, p, p),
                                  offdiag_mask(batch.size()),
                                  cfg.margin_cluster_high);
    return t.add(low_term, high_term);
}

LossTerms total_loss(Tape& t, const std::vector<PairVars>& batch,
                     const LossConfig& cfg, Rng* rng) {
    cfg.validate();
    COOT_CHECK(!batch.empty(), "total_loss: empty batch");
    LossTerms terms;
    Var zero = zero_scalar(t);
    terms.align_low = zero;
    terms.align_high = zero;
    terms.align_global = zero;
    terms.cluster = zero;
    terms.cmc = zero;

    if (cfg.use_align_low || cfg.use_align_high || cfg.use_align_global) {
        AlignmentLosses al = alignment_losses(t, batch, cfg);
        terms.small_batch = al.small_batch;
        if (cfg.use_align_low) terms.align_low = al.low;
        if (cfg.use_align_high) terms.align_high = al.high;
        if (cfg.use_align_global) terms.align_global = al.global;
    }
    if (cfg.use_cluster) terms.cluster = clustering_loss(t, batch, cfg);

    std::vector<Var> parts{terms.align_low, terms.align_high, terms.align_global,
                           terms.cluster};
    const bool cmc_active = cfg.use_cmc && cfg.cmc_weight > 0.0f;
    if (cmc_active) {
        std::vector<Var> per_pair;
        per_pair.reserve(batch.size());
        for (const auto& pv : batch)
            per_pair.push_back(cmc_pair_loss(t, pv.clips, pv.sentences,
                                             cfg.cmc_source_samples, rng));
        terms.cmc = t.scale(t.add_n(per_pair), 1.0f / float(batch.size()));
        parts.push_back(t.scale(terms.cmc, cfg.cmc_weight));
    }
    terms.total = t.add_n(parts);
    return terms;
}

LossBreakdown breakdown(const Tape& t, const LossTerms& terms) {
    LossBreakdown b;
    b.align_low = t.value(terms.align_low)[0];
    b.align_high = t.value(terms.align_high)[0];
    b.align_global = t.value(terms.align_global)[0];
    b.cluster = t.value(terms.cluster)[0];
    b.cmc = t.value(terms.cmc)[0];
    b.total = t.value(terms.total)[0];
    return b;
}

} // namespace coot

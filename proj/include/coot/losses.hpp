#pragma once

#include <vector>

#include "coot/model.hpp"
#include "coot/tape.hpp"

namespace coot {

struct LossConfig {
    float margin_low = 0.2f;           // clip-sentence alignment
    float margin_high = 0.2f;          // video-paragraph alignment
    float margin_global = 0.2f;        // global-context alignment
    float margin_cluster_low = 0.2f;   // clip/sentence clustering
    float margin_cluster_high = 0.2f;  // video/paragraph clustering
    float cmc_weight = 0.01f;
    bool use_align_low = true;
    bool use_align_high = true;
    bool use_align_global = true;
    bool use_cluster = true;
    bool use_cmc = true;
    int cmc_source_samples = 0;  // 0 = use every source index

    void validate() const;
};

struct LossTerms {
    Var total;
    Var align_low, align_high, align_global, cluster, cmc;
    bool small_batch = false;  // alignment/cluster degenerate to 0
};

struct LossBreakdown {
    double align_low = 0, align_high = 0, align_global = 0, cluster = 0,
           cmc = 0, total = 0;
};

// 1 - cos similarity as a 1x1 graph node; errors on zero-norm inputs.
Var cosine_distance_var(Tape& t, Var x, Var y);

// Pairwise cosine-distance matrix between row sets: out[i,j] = D(a_i, b_j).
Var cosine_distance_matrix(Tape& t, Var a, Var b);

// max(0, m + D(x,y) - D(xn,y)) + max(0, m + D(x,y) - D(x,yn))
Var margin_contrastive(Tape& t, Var x, Var y, Var xn, Var yn, float margin);

// Bidirectional soft cycle-consistency penalty for one pair, averaged over
// source indices. source_samples > 0 subsamples that many sources per
// direction (rng required); otherwise all sources contribute.
Var cmc_pair_loss(Tape& t, Var clips, Var sentences, int source_samples = 0,
                  Rng* rng = nullptr);

struct AlignmentLosses {
    Var low, high, global;
    bool small_batch = false;
};

AlignmentLosses alignment_losses(Tape& t, const std::vector<PairVars>& batch,
                                 const LossConfig& cfg);

Var clustering_loss(Tape& t, const std::vector<PairVars>& batch,
                    const LossConfig& cfg);

// Weighted sum of all enabled terms. The CMC term is the batch mean of the
// per-pair loss; cmc_weight == 0 disables it entirely so that a zero weight
// and a disabled toggle produce bitwise-identical training.
LossTerms total_loss(Tape& t, const std::vector<PairVars>& batch,
                     const LossConfig& cfg, Rng* rng = nullptr);

LossBreakdown breakdown(const Tape& t, const LossTerms& terms);

} // namespace coot

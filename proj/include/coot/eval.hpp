#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coot/data.hpp"
#include "coot/model.hpp"
#include "coot/tensor.hpp"

namespace coot {

struct EmbeddingTable {
    std::vector<std::uint64_t> ids;
    Tensor rows;  // N x d
};

// Scales every row to unit L2 norm; errors on zero rows.
void l2_normalize_rows(Tensor& rows);

// 1-based rank of each query's true match in the gallery under descending
// dot product; ties broken by gallery index order. Id sets must match.
std::vector<int> rank_all(const EmbeddingTable& queries,
                          const EmbeddingTable& gallery);

struct RetrievalReport {
    double r1 = 0, r5 = 0, r10 = 0, r50 = 0;  // percentages
    int median_rank = 0;                      // lower median
    std::size_t count = 0;
    std::vector<int> ranks;
};

RetrievalReport make_report(std::vector<int> ranks);

std::string report_json(const RetrievalReport& r, const std::string& direction);
std::string report_table(const RetrievalReport& v2p, const RetrievalReport& p2v,
                         const std::string& level);

// Mean absolute cycle-back index error per direction for one pair,
// evaluated in double precision.
struct CycleDiagnostic {
    double t2v = 0;
    double v2t = 0;
};

CycleDiagnostic cycle_diagnostic(const Tensor& clips, const Tensor& sentences);

enum class RetrievalLevel { High, Low };

// Evaluation-mode encode of every pair (center-frame sampling, no dropout).
std::vector<PairEmbeddings> encode_dataset(const Model& model, const Dataset& ds,
                                           std::size_t max_frames = 80);

struct RetrievalResult {
    RetrievalReport v2p;  // video/clip queries against text gallery
    RetrievalReport p2v;  // paragraph/sentence queries against video gallery
};

RetrievalResult evaluate_retrieval(const std::vector<PairEmbeddings>& embeddings,
                                   RetrievalLevel level);

// Cycle diagnostic averaged over pairs.
CycleDiagnostic mean_cycle_diagnostic(const std::vector<PairEmbeddings>& embeddings);

} // namespace coot

#include "coot/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "coot/parallel.hpp"

namespace coot {

void l2_normalize_rows(Tensor& rows) {
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        double norm = 0;
        for (std::size_t c = 0; c < rows.cols(); ++c) {
            double v = rows.at(r, c);
            norm += v * v;
        }
        COOT_CHECK(norm > 0, "normalize: zero-norm row ", r);
        float inv = float(1.0 / std::sqrt(norm));
        for (std::size_t c = 0; c < rows.cols(); ++c) rows.at(r, c) *= inv;
    }
}

std::vector<int> rank_all(const EmbeddingTable& queries,
                          const EmbeddingTable& gallery) {
    COOT_CHECK(queries.ids.size() == queries.rows.rows() &&
                   gallery.ids.size() == gallery.rows.rows(),
               "rank_all: id/row count mismatch");
    COOT_CHECK(queries.rows.cols() == gallery.rows.cols(),
               "rank_all: width mismatch");
    std::unordered_map<std::uint64_t, std::size_t> gallery_index;
    for (std::size_t i = 0; i < gallery.ids.size(); ++i)
        COOT_CHECK(gallery_index.emplace(gallery.ids[i], i).second,
                   "rank_all: duplicate gallery id ", gallery.ids[i]);
    COOT_CHECK(queries.ids.size() == gallery.ids.size(),
               "rank_all: id set mismatch (", queries.ids.size(), " queries vs ",
               gallery.ids.size(), " gallery items)");

    const std::size_t n = queries.ids.size();
    const std::size_t d = queries.rows.cols();
    std::vector<std::size_t> true_indices(n);
    for (std::size_t q = 0; q < n; ++q) {
        auto it = gallery_index.find(queries.ids[q]);
        COOT_CHECK(it != gallery_index.end(), "rank_all: id ", queries.ids[q],
                   " missing from gallery");
        true_indices[q] = it->second;
    }
    std::vector<int> ranks(n, 0);
    parallel_for(n, [&](std::size_t q) {
        const std::size_t true_idx = true_indices[q];
        const float* qv = queries.rows.data() + q * d;
        auto sim = [&](std::size_t g) {
            const float* gv = gallery.rows.data() + g * d;
            double s = 0;
            for (std::size_t c = 0; c < d; ++c) s += double(qv[c]) * double(gv[c]);
            return s;
        };
        const double s_true = sim(true_idx);
        int rank = 1;
        for (std::size_t g = 0; g < gallery.ids.size(); ++g) {
            if (g == true_idx) continue;
            double s = sim(g);
            if (s > s_true || (s == s_true && g < true_idx)) ++rank;
        }
        ranks[q] = rank;
    });
    return ranks;
}

RetrievalReport make_report(std::vector<int> ranks) {
    COOT_CHECK(!ranks.empty(), "report: no ranks");
    RetrievalReport r;
    r.count = ranks.size();
    auto recall_at = [&](int k) {
        std::size_t hits = 0;
        for (int rank : ranks)
            if (rank <= k) ++hits;
        return 100.0 * double(hits) / double(ranks.size());
    };
    r.r1 = recall_at(1);
    r.r5 = recall_at(5);
    r.r10 = recall_at(10);
    r.r50 = recall_at(50);
    std::vector<int> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    r.median_rank = sorted[(sorted.size() - 1) / 2];  // lower median
    r.ranks = std::move(ranks);
    return r;
}

std::string report_json(const RetrievalReport& r, const std::string& direction) {
    nlohmann::json j = {{"direction", direction}, {"r1", r.r1},
                        {"r5", r.r5},             {"r10", r.r10},
                        {"r50", r.r50},           {"median_rank", r.median_rank},
                        {"n", r.count}};
    return j.dump();
}

std::string report_table(const RetrievalReport& v2p, const RetrievalReport& p2v,
                         const std::string& level) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    os << "level: " << level << " (n=" << v2p.count << ")\n";
    os << "direction   R@1    R@5    R@10   R@50   MR\n";
    auto line = [&](const char* name, const RetrievalReport& r) {
        os << std::left << std::setw(10) << name << std::right << std::setw(6)
           << r.r1 << std::setw(7) << r.r5 << std::setw(7) << r.r10
           << std::setw(7) << r.r50 << std::setw(5) << r.median_rank << "\n";
    };
    line("v2p", v2p);
    line("p2v", p2v);
    return os.str();
}

namespace {

// Soft cycle in double precision: mean |i - mu| cycling source -> target ->
// source through softmax of negative squared distances.
double cycle_error(const Tensor& sources, const Tensor& targets) {
    const std::size_t m = sources.rows(), n = targets.rows();
    const std::size_t d = sources.cols();
    auto sqdist = [&](const std::vector<double>& a, const float* b) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) {
            double diff = a[c] - double(b[c]);
            s += diff * diff;
        }
        return s;
    };
    auto softmax_neg = [](std::vector<double>& logits) {
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : logits) mx = std::max(mx, v);
        double sum = 0;
        for (double& v : logits) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : logits) v /= sum;
    };

    double total = 0;
    std::vector<double> src(d), weights, neighbor(d);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < d; ++c) src[c] = sources.at(i, c);
        weights.assign(n, 0);
        for (std::size_t j = 0; j < n; ++j)
            weights[j] = -sqdist(src, targets.data() + j * d);
        softmax_neg(weights);
        std::fill(neighbor.begin(), neighbor.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < d; ++c)
                neighbor[c] += weights[j] * double(targets.at(j, c));
        weights.assign(m, 0);
        for (std::size_t j = 0; j < m; ++j)
            weights[j] = -sqdist(neighbor, sources.data() + j * d);
        softmax_neg(weights);
        double mu = 0;
        for (std::size_t j = 0; j < m; ++j) mu += weights[j] * double(j);
        total += std::fabs(double(i) - mu);
    }
    return total / double(m);
}

} // namespace

CycleDiagnostic cycle_diagnostic(const Tensor& clips, const Tensor& sentences) {
    COOT_CHECK(clips.rows() >= 1 && sentences.rows() >= 1,
               "cycle_diagnostic: empty sequence");
    COOT_CHECK(clips.cols() == sentences.cols(),
               "cycle_diagnostic: width mismatch");
    CycleDiagnostic d;
    d.t2v = cycle_error(sentences, clips);
    d.v2t = cycle_error(clips, sentences);
    return d;
}

std::vector<PairEmbeddings> encode_dataset(const Model& model, const Dataset& ds,
                                           std::size_t max_frames) {
    std::vector<PairEmbeddings> out(ds.samples.size());
    BatchConfig bc;
    bc.max_frames = max_frames;
    bc.train = false;
    parallel_for(ds.samples.size(), [&](std::size_t i) {
        Batch b = make_batch(ds, {ds.samples[i].id}, bc, /*seed=*/0);
        out[i] = model.encode_pair_values(b.samples[0]);
    });
    return out;
}

RetrievalResult evaluate_retrieval(const std::vector<PairEmbeddings>& embeddings,
                                   RetrievalLevel level) {
    COOT_CHECK(!embeddings.empty(), "evaluate: no embeddings");
    EmbeddingTable video, text;
    if (level == RetrievalLevel::High) {
        const std::size_t d = embeddings[0].video.cols();
        video.rows = Tensor(embeddings.size(), d);
        text.rows = Tensor(embeddings.size(), d);
        for (std::size_t i = 0; i < embeddings.size(); ++i) {
            video.ids.push_back(embeddings[i].id);
            text.ids.push_back(embeddings[i].id);
            std::copy(embeddings[i].video.data(), embeddings[i].video.data() + d,
                      video.rows.data() + i * d);
            std::copy(embeddings[i].paragraph.data(),
                      embeddings[i].paragraph.data() + d,
                      text.rows.data() + i * d);
        }
    } else {
        const std::size_t d = embeddings[0].clips.cols();
        std::size_t total = 0;
        for (const auto& e : embeddings) {
            COOT_CHECK(e.clips.rows() == e.sentences.rows(),
                       "evaluate: low-level retrieval needs aligned counts");
            total += e.clips.rows();
        }
        video.rows = Tensor(total, d);
        text.rows = Tensor(total, d);
        std::size_t row = 0;
        for (const auto& e : embeddings) {
            for (std::size_t i = 0; i < e.clips.rows(); ++i) {
                std::uint64_t id = (e.id << 16) | std::uint64_t(i);
                video.ids.push_back(id);
                text.ids.push_back(id);
                std::copy(e.clips.data() + i * d, e.clips.data() + (i + 1) * d,
                          video.rows.data() + row * d);
                std::copy(e.sentences.data() + i * d,
                          e.sentences.data() + (i + 1) * d,
                          text.rows.data() + row * d);
                ++row;
            }
        }
    }
    l2_normalize_rows(video.rows);
    l2_normalize_rows(text.rows);
    RetrievalResult result;
    result.v2p = make_report(rank_all(video, text));
    result.p2v = make_report(rank_all(text, video));
    return result;
}

CycleDiagnostic mean_cycle_diagnostic(const std::vector<PairEmbeddings>& embeddings) {
    COOT_CHECK(!embeddings.empty(), "cycle_diagnostic: no embeddings");
    CycleDiagnostic acc;
    for (const auto& e : embeddings) {
        CycleDiagnostic d = cycle_diagnostic(e.clips, e.sentences);
        acc.t2v += d.t2v;
        acc.v2t += d.v2t;
    }
    acc.t2v /= double(embeddings.size());
    acc.v2t /= double(embeddings.size());
    return acc;
}

} // namespace coot

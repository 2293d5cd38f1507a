#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "coot/sample.hpp"
#include "coot/tensor.hpp"

namespace coot {

struct ClipRange {
    std::int64_t start = 0;
    std::int64_t end = 0;  // exclusive

    std::int64_t length() const { return end - start; }
    bool contains(const ClipRange& o) const {
        return start <= o.start && o.end <= end;
    }
};

struct SampleMeta {
    std::uint64_t id = 0;
    std::vector<ClipRange> clips;      // frame ranges within the sample
    std::vector<ClipRange> sentences;  // token ranges within the sample
    std::size_t video_offset = 0;      // float offset into the video blob
    std::size_t text_offset = 0;
    std::int64_t n_frames = 0;
    std::int64_t n_tokens = 0;
};

struct Dataset {
    int video_dim = 0;
    int text_dim = 0;
    std::vector<SampleMeta> samples;
    std::vector<float> video_blob;
    std::vector<float> text_blob;

    const SampleMeta& by_id(std::uint64_t id) const;
    void reindex();

    const float* video_row(const SampleMeta& s, std::int64_t frame) const {
        return video_blob.data() + s.video_offset +
               std::size_t(frame) * std::size_t(video_dim);
    }
    const float* text_row(const SampleMeta& s, std::int64_t token) const {
        return text_blob.data() + s.text_offset +
               std::size_t(token) * std::size_t(text_dim);
    }

private:
    std::unordered_map<std::uint64_t, std::size_t> index_;
};

struct SynthConfig {
    int n_pairs = 128;
    int clips_min = 2, clips_max = 4;
    int frames_min = 8, frames_max = 16;
    int tokens_min = 6, tokens_max = 12;
    int n_topics = 24;
    int latent_dim = 16;
    float sigma = 0.1f;
    // Fraction of frames/tokens drawn from a shared background topic instead
    // of the clip topic; gives weighted pooling something to suppress.
    float distractor_rate = 0.2f;
    int video_dim = 48;
    int text_dim = 32;
    std::uint64_t seed = 1;

    void validate() const;
};

// Ground-truth latent structure of a generated dataset (never serialized;
// used by alignment oracles).
struct SynthTruth {
    Tensor topic_latents;  // (n_topics + 1) x latent_dim, last row = background
    std::vector<std::vector<int>> pair_topics;   // topic sequence per pair
    std::vector<std::vector<int>> frame_topics;  // per sample, per frame
    std::vector<std::vector<int>> token_topics;  // per sample, per token
};

struct SynthResult {
    Dataset dataset;
    SynthTruth truth;
};

// Pure function of the config: same seed, byte-identical blobs. Clip i and
// sentence i of a pair share a latent topic; topic sequences are unique
// across pairs.
SynthResult generate_synthetic(const SynthConfig& cfg);

// Files: <prefix>.manifest.json, <prefix>.video.f32, <prefix>.text.f32.
void write_dataset(const std::string& prefix, const Dataset& ds,
                   bool overwrite = true);
Dataset read_dataset(const std::string& prefix);

// Samples [from, from + count) as an independent dataset with repacked blobs.
Dataset subset(const Dataset& ds, std::size_t from, std::size_t count);

// Up to max_count absolute frame indices from the range: everything when it
// fits, otherwise one index per equal-length interval (uniform in train mode,
// interval center in eval mode). Output is strictly increasing.
std::vector<std::int64_t> sample_frames(const ClipRange& range,
                                        std::size_t max_count, bool train,
                                        Rng* rng);

// Alternately extend end then start (end first) until len >= min_len or the
// extent is exhausted. Never exceeds [0, extent).
ClipRange expand_clip(ClipRange range, std::int64_t min_len,
                      std::int64_t extent);

// Shift both boundaries by uniform integers in [-extent*p, +extent*p]
// (inclusive), clamp, reorder if inverted, then expand to min_len. With
// full = true the boundaries are replaced by a uniform random valid range.
// p == 0 (and full == false) returns the range unchanged.
ClipRange inject_boundary_noise(ClipRange range, double p,
                                std::int64_t extent, Rng& rng,
                                std::int64_t min_len = 10, bool full = false);

// In-place dataset preprocessing of clip ranges (video side only).
void expand_all_clips(Dataset& ds, std::int64_t min_len);
void apply_boundary_noise(Dataset& ds, double p, bool full,
                          std::int64_t min_len, std::uint64_t seed);

struct BatchConfig {
    std::size_t max_frames = 80;
    bool train = false;
    float feature_noise = 0.0f;  // gaussian noise on frame features, train only
};

// Assembles the selected pairs with frame sampling applied. Per-sample RNG
// streams are derived from (seed, id) so the result is independent of the
// order of ids.
Batch make_batch(const Dataset& ds, const std::vector<std::uint64_t>& ids,
                 const BatchConfig& cfg, std::uint64_t seed);

} // namespace coot

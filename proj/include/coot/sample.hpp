#pragma once

#include <cstdint>
#include <vector>

#include "coot/tensor.hpp"

namespace coot {

// Variable-length sequence of fixed-width feature vectors plus validity.
struct FeatureSequence {
    Tensor features;  // T x dim
    Mask mask;        // length T

    std::size_t length() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }
};

// One video/paragraph pair, already feature-sampled and ready for encoding.
// Clip i is aligned with sentence i on aligned data.
struct HierarchicalSample {
    std::uint64_t id = 0;
    std::vector<FeatureSequence> clips;
    std::vector<FeatureSequence> sentences;
    FeatureSequence video_all;  // all frames of the video
    FeatureSequence text_all;   // all tokens of the paragraph
};

struct Batch {
    std::vector<HierarchicalSample> samples;

    std::size_t max_clip_count() const {
        std::size_t n = 0;
        for (const auto& s : samples) n = std::max(n, s.clips.size());
        return n;
    }
    std::size_t max_sentence_count() const {
        std::size_t n = 0;
        for (const auto& s : samples) n = std::max(n, s.sentences.size());
        return n;
    }
};

} // namespace coot

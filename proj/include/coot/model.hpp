#pragma once

#include <string>
#include <vector>

#include "coot/aggregation.hpp"
#include "coot/layers.hpp"
#include "coot/sample.hpp"
#include "coot/tape.hpp"

namespace coot {

struct BranchConfig {
    int input_dim = 0;
    int width = 384;
    int heads = 8;
    int ff_dim = 384;
    int afa_heads = 2;
    int afa_dim = 768;
    float dropout = 0.025f;
    int max_positions_low = 80;   // positional table length for frames/tokens
    int max_positions_high = 16;  // positional table length for clips/sentences
    float ln_eps = 1e-5f;
    PoolingMode low_pool = PoolingMode::afa();
    PoolingMode high_pool = PoolingMode::avg_pad_inclusive();
};

struct ModelConfig {
    BranchConfig video;
    BranchConfig text;
};

// Contextual transformer: self-attention over segment embeddings plus a
// cross-attention layer queried by the global context.
struct CotParams {
    TransformerBlockParams local;
    AttentionParams cross;
    LayerNormParams ln1;
    FeedForwardParams ff;
    LayerNormParams ln2;
};

struct BranchParams {
    Param* proj_w = nullptr;
    Param* proj_b = nullptr;
    Param* pos_low = nullptr;
    Param* pos_high = nullptr;
    Param* cls_token = nullptr;  // only with cls pooling
    TransformerBlockParams tt;   // shared by all segments and the global path
    AfaParams afa;               // shared likewise (empty unless low_pool=afa)
    CotParams cot;
};

struct EncodeOptions {
    bool train = false;
    Rng* rng = nullptr;            // dropout / noise stream, train mode only
    std::size_t pad_to_clips = 0;  // batch max segment count; 0 = own length
};

// Graph handles for one encoded pair.
struct PairVars {
    Var clips;      // n x d
    Var sentences;  // m x d
    Var video;      // 1 x 2d
    Var paragraph;  // 1 x 2d
    Var gv;         // 1 x d
    Var gp;         // 1 x d
};

// Plain values for evaluation.
struct PairEmbeddings {
    std::uint64_t id = 0;
    Tensor clips;
    Tensor sentences;
    Tensor video;
    Tensor paragraph;
    Tensor gv;
    Tensor gp;
};

struct BranchVars {
    Var segments;  // n x d
    Var final;     // 1 x 2d
    Var global;    // 1 x d
};

class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    BranchVars encode_branch(Tape& t, const std::vector<FeatureSequence>& segments,
                             const FeatureSequence& whole, bool video_branch,
                             const EncodeOptions& opts) const;

    PairVars encode_pair(Tape& t, const HierarchicalSample& sample,
                         const EncodeOptions& opts) const;

    // Evaluation-mode encode on a private tape.
    PairEmbeddings encode_pair_values(const HierarchicalSample& sample,
                                      std::size_t pad_to_clips = 0) const;

    Var contextual_transformer(Tape& t, Var local, Var global, bool video_branch,
                               const EncodeOptions& opts) const;

    std::size_t param_count(const std::string& prefix = "") const;

private:
    Var encode_sequence(Tape& t, const FeatureSequence& seq,
                        const BranchParams& bp, const BranchConfig& bc,
                        const EncodeOptions& opts) const;

    ModelConfig cfg_;
    ParamStore store_;
    BranchParams video_;
    BranchParams text_;
};

// Checkpoint file: JSON header {format_version, config} followed by
// little-endian (name, shape, float32 data) records. Byte-exact round-trip.
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json);

struct Checkpoint {
    std::string config_json;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into the store; names and shapes must match.
void load_params(ParamStore& store, const Checkpoint& ckpt);

} // namespace coot

#pragma once

#include <string>

#include <json.hpp>

#include "coot/data.hpp"
#include "coot/losses.hpp"
#include "coot/model.hpp"
#include "coot/trainer.hpp"

namespace coot {

struct DataConfig {
    SynthConfig synth;
    double boundary_noise_p = 0.0;
    bool boundary_noise_full = false;
    std::int64_t min_clip_len = 10;
};

struct ModelSection {
    int width = 384;
    int heads = 8;
    int ff_dim = 0;    // 0 = width (1x)
    int afa_heads = 2;
    int afa_dim = 0;   // 0 = 2 * width (2x)
    float dropout = 0.025f;
    int max_positions_low = 80;
    int max_positions_high = 16;
    std::string low_pool = "afa";
    std::string high_pool = "avg_pad_inclusive";
};

struct EvalSection {
    std::string level = "high";      // high | low
    std::string direction = "both";  // v2p | p2v | both
};

struct RunConfig {
    std::uint64_t seed = 1;
    DataConfig data;
    ModelSection model;
    LossConfig loss;
    OptimConfig optim;
    EvalSection eval;
};

// Parses and validates against the full schema; unknown keys and type
// mismatches raise ConfigError with the offending path.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

// Fully-resolved effective config (sentinel 0 widths expanded).
nlohmann::json run_config_to_json(const RunConfig& cfg);

// Applies `--section.key value` style overrides to the JSON document before
// parsing. Boolean words assigned to an object set its "enabled" flag.
void apply_override(nlohmann::json& doc, const std::string& dotted_path,
                    const std::string& value);

ModelConfig make_model_config(const RunConfig& cfg, int video_input_dim,
                              int text_input_dim);

} // namespace coot

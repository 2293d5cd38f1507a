#include "coot/config.hpp"

#include <fstream>

namespace coot {

using nlohmann::json;

namespace {

json defaults_json() {
    return json{
        {"seed", 1},
        {"data",
         {{"n_pairs", 128},
          {"clips_min", 2},
          {"clips_max", 4},
          {"frames_min", 8},
          {"frames_max", 16},
          {"tokens_min", 6},
          {"tokens_max", 12},
          {"n_topics", 24},
          {"latent_dim", 16},
          {"sigma", 0.1},
          {"distractor_rate", 0.2},
          {"video_dim", 48},
          {"text_dim", 32},
          {"boundary_noise_p", 0.0},
          {"boundary_noise_full", false},
          {"min_clip_len", 10}}},
        {"model",
         {{"width", 384},
          {"heads", 8},
          {"ff_dim", 0},
          {"afa_heads", 2},
          {"afa_dim", 0},
          {"dropout", 0.025},
          {"max_positions_low", 80},
          {"max_positions_high", 16},
          {"low_pool", "afa"},
          {"high_pool", "avg_pad_inclusive"}}},
        {"losses",
         {{"align_low", true},
          {"align_high", true},
          {"align_global", true},
          {"cluster", true},
          {"margin_low", 0.2},
          {"margin_high", 0.2},
          {"margin_global", 0.2},
          {"margin_cluster_low", 0.2},
          {"margin_cluster_high", 0.2},
          {"cmc", {{"enabled", true}, {"lambda", 0.01}, {"source_samples", 0}}}}},
        {"optim",
         {{"lr", 1e-3},
          {"beta1", 0.9},
          {"beta2", 0.999},
          {"eps", 1e-8},
          {"weight_decay", 2e-5},
          {"warmup_epochs", 3},
          {"rop_patience", 2},
          {"rop_cooldown", 3},
          {"rop_factor", 0.1},
          {"early_stop_epochs", 15},
          {"batch_size", 64},
          {"max_epochs", 100},
          {"feature_noise", 0.0},
          {"max_frames", 80}}},
        {"eval", {{"level", "high"}, {"direction", "both"}}}};
}

bool same_category(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

// Merge user values over defaults, rejecting keys the schema does not know
// and values of the wrong type.
void merge_checked(json& base, const json& user, const std::string& path) {
    COOT_CHECK_CFG(user.is_object(), "config: ", path.empty() ? "root" : path,
                   " must be an object");
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string child = path.empty() ? it.key() : path + "." + it.key();
        COOT_CHECK_CFG(base.contains(it.key()), "config: unknown key '", child,
                       "'");
        json& slot = base[it.key()];
        if (slot.is_object()) {
            merge_checked(slot, it.value(), child);
        } else {
            COOT_CHECK_CFG(same_category(slot, it.value()),
                           "config: wrong type for '", child, "' (expected ",
                           slot.type_name(), ")");
            slot = it.value();
        }
    }
}

} // namespace

RunConfig parse_run_config(const json& doc) {
    json merged = defaults_json();
    merge_checked(merged, doc, "");

    RunConfig cfg;
    cfg.seed = merged.at("seed").get<std::uint64_t>();

    const json& d = merged.at("data");
    cfg.data.synth.n_pairs = d.at("n_pairs").get<int>();
    cfg.data.synth.clips_min = d.at("clips_min").get<int>();
    cfg.data.synth.clips_max = d.at("clips_max").get<int>();
    cfg.data.synth.frames_min = d.at("frames_min").get<int>();
    cfg.data.synth.frames_max = d.at("frames_max").get<int>();
    cfg.data.synth.tokens_min = d.at("tokens_min").get<int>();
    cfg.data.synth.tokens_max = d.at("tokens_max").get<int>();
    cfg.data.synth.n_topics = d.at("n_topics").get<int>();
    cfg.data.synth.latent_dim = d.at("latent_dim").get<int>();
    cfg.data.synth.sigma = d.at("sigma").get<float>();
    cfg.data.synth.distractor_rate = d.at("distractor_rate").get<float>();
    cfg.data.synth.video_dim = d.at("video_dim").get<int>();
    cfg.data.synth.text_dim = d.at("text_dim").get<int>();
    cfg.data.synth.seed = cfg.seed;
    cfg.data.boundary_noise_p = d.at("boundary_noise_p").get<double>();
    cfg.data.boundary_noise_full = d.at("boundary_noise_full").get<bool>();
    cfg.data.min_clip_len = d.at("min_clip_len").get<std::int64_t>();
    COOT_CHECK_CFG(cfg.data.boundary_noise_p >= 0.0 &&
                       cfg.data.boundary_noise_p <= 1.0,
                   "config: data.boundary_noise_p must be in [0, 1]");
    COOT_CHECK_CFG(cfg.data.min_clip_len >= 1,
                   "config: data.min_clip_len must be >= 1");
    cfg.data.synth.validate();

    const json& m = merged.at("model");
    cfg.model.width = m.at("width").get<int>();
    cfg.model.heads = m.at("heads").get<int>();
    cfg.model.ff_dim = m.at("ff_dim").get<int>();
    cfg.model.afa_heads = m.at("afa_heads").get<int>();
    cfg.model.afa_dim = m.at("afa_dim").get<int>();
    cfg.model.dropout = m.at("dropout").get<float>();
    cfg.model.max_positions_low = m.at("max_positions_low").get<int>();
    cfg.model.max_positions_high = m.at("max_positions_high").get<int>();
    cfg.model.low_pool = m.at("low_pool").get<std::string>();
    cfg.model.high_pool = m.at("high_pool").get<std::string>();
    COOT_CHECK_CFG(cfg.model.width >= 1 && cfg.model.heads >= 1,
                   "config: bad model widths");
    COOT_CHECK_CFG(cfg.model.dropout >= 0.0f && cfg.model.dropout < 1.0f,
                   "config: model.dropout must be in [0, 1)");
    PoolingMode::parse(cfg.model.low_pool);
    PoolingMode high = PoolingMode::parse(cfg.model.high_pool);
    COOT_CHECK_CFG(high.kind == PoolKind::Avg || high.kind == PoolKind::Max,
                   "config: model.high_pool must be an avg variant or max");

    const json& l = merged.at("losses");
    cfg.loss.use_align_low = l.at("align_low").get<bool>();
    cfg.loss.use_align_high = l.at("align_high").get<bool>();
    cfg.loss.use_align_global = l.at("align_global").get<bool>();
    cfg.loss.use_cluster = l.at("cluster").get<bool>();
    cfg.loss.margin_low = l.at("margin_low").get<float>();
    cfg.loss.margin_high = l.at("margin_high").get<float>();
    cfg.loss.margin_global = l.at("margin_global").get<float>();
    cfg.loss.margin_cluster_low = l.at("margin_cluster_low").get<float>();
    cfg.loss.margin_cluster_high = l.at("margin_cluster_high").get<float>();
    cfg.loss.use_cmc = l.at("cmc").at("enabled").get<bool>();
    cfg.loss.cmc_weight = l.at("cmc").at("lambda").get<float>();
    cfg.loss.cmc_source_samples = l.at("cmc").at("source_samples").get<int>();
    cfg.loss.validate();

    const json& o = merged.at("optim");
    cfg.optim.lr = o.at("lr").get<float>();
    cfg.optim.beta1 = o.at("beta1").get<float>();
    cfg.optim.beta2 = o.at("beta2").get<float>();
    cfg.optim.eps = o.at("eps").get<float>();
    cfg.optim.weight_decay = o.at("weight_decay").get<float>();
    cfg.optim.warmup_epochs = o.at("warmup_epochs").get<int>();
    cfg.optim.rop_patience = o.at("rop_patience").get<int>();
    cfg.optim.rop_cooldown = o.at("rop_cooldown").get<int>();
    cfg.optim.rop_factor = o.at("rop_factor").get<float>();
    cfg.optim.early_stop_epochs = o.at("early_stop_epochs").get<int>();
    cfg.optim.batch_size = o.at("batch_size").get<int>();
    cfg.optim.max_epochs = o.at("max_epochs").get<int>();
    cfg.optim.feature_noise = o.at("feature_noise").get<float>();
    cfg.optim.max_frames = o.at("max_frames").get<std::size_t>();
    cfg.optim.validate();

    const json& e = merged.at("eval");
    cfg.eval.level = e.at("level").get<std::string>();
    cfg.eval.direction = e.at("direction").get<std::string>();
    COOT_CHECK_CFG(cfg.eval.level == "high" || cfg.eval.level == "low",
                   "config: eval.level must be high or low");
    COOT_CHECK_CFG(cfg.eval.direction == "v2p" || cfg.eval.direction == "p2v" ||
                       cfg.eval.direction == "both",
                   "config: eval.direction must be v2p, p2v or both");
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    COOT_CHECK_CFG(f.good(), "config: cannot open ", path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(str("config: parse error in ", path, ": ", e.what()));
    }
    return parse_run_config(doc);
}

json run_config_to_json(const RunConfig& cfg) {
    const int ff = cfg.model.ff_dim > 0 ? cfg.model.ff_dim : cfg.model.width;
    const int afa = cfg.model.afa_dim > 0 ? cfg.model.afa_dim : 2 * cfg.model.width;
    return json{
        {"seed", cfg.seed},
        {"data",
         {{"n_pairs", cfg.data.synth.n_pairs},
          {"clips_min", cfg.data.synth.clips_min},
          {"clips_max", cfg.data.synth.clips_max},
          {"frames_min", cfg.data.synth.frames_min},
          {"frames_max", cfg.data.synth.frames_max},
          {"tokens_min", cfg.data.synth.tokens_min},
          {"tokens_max", cfg.data.synth.tokens_max},
          {"n_topics", cfg.data.synth.n_topics},
          {"latent_dim", cfg.data.synth.latent_dim},
          {"sigma", cfg.data.synth.sigma},
          {"distractor_rate", cfg.data.synth.distractor_rate},
          {"video_dim", cfg.data.synth.video_dim},
          {"text_dim", cfg.data.synth.text_dim},
          {"boundary_noise_p", cfg.data.boundary_noise_p},
          {"boundary_noise_full", cfg.data.boundary_noise_full},
          {"min_clip_len", cfg.data.min_clip_len}}},
        {"model",
         {{"width", cfg.model.width},
          {"heads", cfg.model.heads},
          {"ff_dim", ff},
          {"afa_heads", cfg.model.afa_heads},
          {"afa_dim", afa},
          {"dropout", cfg.model.dropout},
          {"max_positions_low", cfg.model.max_positions_low},
          {"max_positions_high", cfg.model.max_positions_high},
          {"low_pool", cfg.model.low_pool},
          {"high_pool", cfg.model.high_pool}}},
        {"losses",
         {{"align_low", cfg.loss.use_align_low},
          {"align_high", cfg.loss.use_align_high},
          {"align_global", cfg.loss.use_align_global},
          {"cluster", cfg.loss.use_cluster},
          {"margin_low", cfg.loss.margin_low},
          {"margin_high", cfg.loss.margin_high},
          {"margin_global", cfg.loss.margin_global},
          {"margin_cluster_low", cfg.loss.margin_cluster_low},
          {"margin_cluster_high", cfg.loss.margin_cluster_high},
          {"cmc",
           {{"enabled", cfg.loss.use_cmc},
            {"lambda", cfg.loss.cmc_weight},
            {"source_samples", cfg.loss.cmc_source_samples}}}}},
        {"optim",
         {{"lr", cfg.optim.lr},
          {"beta1", cfg.optim.beta1},
          {"beta2", cfg.optim.beta2},
          {"eps", cfg.optim.eps},
          {"weight_decay", cfg.optim.weight_decay},
          {"warmup_epochs", cfg.optim.warmup_epochs},
          {"rop_patience", cfg.optim.rop_patience},
          {"rop_cooldown", cfg.optim.rop_cooldown},
          {"rop_factor", cfg.optim.rop_factor},
          {"early_stop_epochs", cfg.optim.early_stop_epochs},
          {"batch_size", cfg.optim.batch_size},
          {"max_epochs", cfg.optim.max_epochs},
          {"feature_noise", cfg.optim.feature_noise},
          {"max_frames", cfg.optim.max_frames}}},
        {"eval", {{"level", cfg.eval.level}, {"direction", cfg.eval.direction}}}};
}

void apply_override(json& doc, const std::string& dotted_path,
                    const std::string& value) {
    std::string path = dotted_path;
    // The losses section also answers to the singular form.
    if (path.rfind("loss.", 0) == 0) path = "losses." + path.substr(5);

    json parsed;
    if (value == "on") {
        parsed = true;
    } else if (value == "off") {
        parsed = false;
    } else {
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            parsed = value;  // plain string
        }
        if (parsed.is_object() || parsed.is_array()) parsed = value;
    }

    const json defaults = defaults_json();
    const json* schema = &defaults;
    json* node = &doc;
    std::size_t pos = 0;
    while (true) {
        std::size_t dot = path.find('.', pos);
        std::string key = path.substr(pos, dot - pos);
        COOT_CHECK_CFG(!key.empty(), "config: bad override path '", dotted_path,
                       "'");
        const json* schema_child =
            schema != nullptr && schema->contains(key) ? &(*schema)[key] : nullptr;
        if (dot == std::string::npos) {
            // Boolean words aimed at an object subsection toggle it.
            if (schema_child != nullptr && schema_child->is_object() &&
                parsed.is_boolean()) {
                (*node)[key]["enabled"] = parsed;
            } else {
                (*node)[key] = parsed;
            }
            return;
        }
        if (!node->contains(key)) (*node)[key] = json::object();
        node = &(*node)[key];
        COOT_CHECK_CFG(node->is_object(), "config: override path '", dotted_path,
                       "' crosses a non-object value");
        schema = schema_child;
        pos = dot + 1;
    }
}

ModelConfig make_model_config(const RunConfig& cfg, int video_input_dim,
                              int text_input_dim) {
    BranchConfig b;
    b.width = cfg.model.width;
    b.heads = cfg.model.heads;
    b.ff_dim = cfg.model.ff_dim > 0 ? cfg.model.ff_dim : cfg.model.width;
    b.afa_heads = cfg.model.afa_heads;
    b.afa_dim = cfg.model.afa_dim > 0 ? cfg.model.afa_dim : 2 * cfg.model.width;
    b.dropout = cfg.model.dropout;
    b.max_positions_low = cfg.model.max_positions_low;
    b.max_positions_high = cfg.model.max_positions_high;
    b.low_pool = PoolingMode::parse(cfg.model.low_pool);
    b.high_pool = PoolingMode::parse(cfg.model.high_pool);
    ModelConfig mc;
    mc.video = b;
    mc.video.input_dim = video_input_dim;
    mc.text = b;
    mc.text.input_dim = text_input_dim;
    return mc;
}

} // namespace coot

#pragma once

#include <string>
#include <vector>

#include "coot/data.hpp"
#include "coot/eval.hpp"
#include "coot/losses.hpp"
#include "coot/model.hpp"

namespace coot {

struct OptimConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 2e-5f;
    int warmup_epochs = 3;
    int rop_patience = 2;
    int rop_cooldown = 3;
    float rop_factor = 0.1f;
    int early_stop_epochs = 15;
    int batch_size = 64;
    int max_epochs = 100;
    float feature_noise = 0.0f;     // gaussian noise on frame features
    float improve_tol = 1e-6f;      // strict improvement threshold
    std::size_t max_frames = 80;    // per-sequence frame cap

    void validate() const;
};

// Weights ~ N(0, 0.01^2) truncated at 2 sigma by redrawing; biases zero,
// layer-norm gains one. Deterministic in registration order.
void init_params(ParamStore& store, std::uint64_t seed);

// Adam with decoupled weight decay (applied before the Adam delta).
class Adam {
public:
    explicit Adam(const ParamStore& store);

    void step(ParamStore& store, const OptimConfig& cfg, double lr);
    std::int64_t steps() const { return t_; }

private:
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::int64_t t_ = 0;
};

// Linear per-epoch warmup followed by reduce-on-plateau; metric is
// higher-is-better (sum of R@1 over both retrieval directions).
struct ScheduleState {
    double plateau_lr = 0;
    double best = 0;
    bool has_best = false;
    int epochs_since_best = 0;
    int bad_epochs = 0;
    int cooldown = 0;
    int epoch = 0;  // next epoch to run
    bool stop = false;
};

ScheduleState make_schedule(const OptimConfig& cfg);
double schedule_lr(const ScheduleState& state, const OptimConfig& cfg);
void schedule_update(ScheduleState& state, double metric, const OptimConfig& cfg);

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    LossBreakdown loss;
    RetrievalReport v2p;
    RetrievalReport p2v;
    double metric = 0;
};

std::string epoch_record_json(const EpochRecord& rec);

struct TrainResult {
    std::vector<EpochRecord> log;
    bool diverged = false;
    bool early_stopped = false;
    int best_epoch = -1;
    double best_metric = 0;
    std::string checkpoint_path;  // empty when out_dir is empty
    std::string metrics_path;
};

// Runs the full loop: init, shuffled batches, per-epoch validation
// retrieval, plateau schedule, early stopping. On return the model holds the
// best parameters seen; out_dir (when non-empty) receives checkpoint.ckpt,
// metrics.jsonl and config.json. On divergence the last good parameters are
// kept and `diverged` is set.
TrainResult train_model(Model& model, const Dataset& train_ds,
                        const Dataset* val_ds, const LossConfig& loss_cfg,
                        const OptimConfig& optim_cfg, std::uint64_t seed,
                        const std::string& out_dir = "",
                        const std::string& config_json = "",
                        bool verbose = false);

} // namespace coot

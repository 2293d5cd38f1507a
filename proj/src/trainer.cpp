#include "coot/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

namespace coot {

namespace {
constexpr std::uint64_t kStreamInit = 0x11;
constexpr std::uint64_t kStreamShuffle = 0x12;
constexpr std::uint64_t kStreamBatch = 0x13;
constexpr std::uint64_t kStreamDropout = 0x14;
constexpr std::uint64_t kStreamCmc = 0x15;
} // namespace

void OptimConfig::validate() const {
    COOT_CHECK_CFG(lr > 0.0f, "optim: lr must be > 0");
    COOT_CHECK_CFG(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f,
                   "optim: betas must be in [0, 1)");
    COOT_CHECK_CFG(eps > 0.0f, "optim: eps must be > 0");
    COOT_CHECK_CFG(weight_decay >= 0.0f, "optim: weight_decay must be >= 0");
    COOT_CHECK_CFG(rop_factor > 0.0f && rop_factor < 1.0f,
                   "optim: rop_factor must be in (0, 1)");
    COOT_CHECK_CFG(warmup_epochs >= 0 && rop_patience >= 1 && rop_cooldown >= 0,
                   "optim: bad schedule settings");
    COOT_CHECK_CFG(early_stop_epochs >= 1, "optim: early_stop_epochs must be >= 1");
    COOT_CHECK_CFG(batch_size >= 1, "optim: batch_size must be >= 1");
    COOT_CHECK_CFG(max_epochs >= 0, "optim: max_epochs must be >= 0");
    COOT_CHECK_CFG(feature_noise >= 0.0f, "optim: feature_noise must be >= 0");
    COOT_CHECK_CFG(max_frames >= 1, "optim: max_frames must be >= 1");
}

void init_params(ParamStore& store, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, kStreamInit);
    for (auto& p : store) {
        switch (p->kind) {
            case ParamKind::Weight:
                for (std::size_t i = 0; i < p->value.size(); ++i) {
                    double v;
                    do {
                        v = rng.gaussian() * 0.01;
                    } while (std::fabs(v) > 0.02);
                    p->value[i] = float(v);
                }
                break;
            case ParamKind::Bias:
                p->value.fill(0.0f);
                break;
            case ParamKind::Gain:
                p->value.fill(1.0f);
                break;
        }
        p->zero_grad();
    }
}

Adam::Adam(const ParamStore& store) {
    for (const auto& p : store) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
    }
}

void Adam::step(ParamStore& store, const OptimConfig& cfg, double lr) {
    std::size_t idx = 0;
    for (const auto& p : store) {
        COOT_CHECK(idx < m_.size() && p->grad.same_shape(m_[idx]),
                   "adam: store changed since construction");
        if (!p->grad.all_finite())
            throw NumericError(str("adam: non-finite gradient in ", p->name));
        ++idx;
    }
    ++t_;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(t_));
    const double bc2 = 1.0 - std::pow(b2, double(t_));
    idx = 0;
    for (auto& p : store) {
        Tensor& m = m_[idx];
        Tensor& v = v_[idx];
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double w = p->value[i];
            double g = p->grad[i];
            if (cfg.weight_decay > 0.0f) w -= lr * double(cfg.weight_decay) * w;
            double mi = b1 * double(m[i]) + (1.0 - b1) * g;
            double vi = b2 * double(v[i]) + (1.0 - b2) * g * g;
            m[i] = float(mi);
            v[i] = float(vi);
            w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + double(cfg.eps));
            p->value[i] = float(w);
        }
        ++idx;
    }
}

ScheduleState make_schedule(const OptimConfig& cfg) {
    ScheduleState s;
    s.plateau_lr = double(cfg.lr);
    return s;
}

double schedule_lr(const ScheduleState& state, const OptimConfig& cfg) {
    if (state.epoch < cfg.warmup_epochs)
        return double(cfg.lr) * double(state.epoch + 1) / double(cfg.warmup_epochs);
    return state.plateau_lr;
}

void schedule_update(ScheduleState& state, double metric, const OptimConfig& cfg) {
    COOT_CHECK(std::isfinite(metric), "schedule: non-finite metric");
    const bool improved =
        !state.has_best || metric > state.best + double(cfg.improve_tol);
    if (improved) {
        state.best = metric;
        state.has_best = true;
        state.epochs_since_best = 0;
    } else {
        ++state.epochs_since_best;
    }
    if (state.epoch >= cfg.warmup_epochs) {
        if (improved) {
            state.bad_epochs = 0;
            if (state.cooldown > 0) --state.cooldown;
        } else if (state.cooldown > 0) {
            --state.cooldown;
            state.bad_epochs = 0;
        } else {
            ++state.bad_epochs;
            if (state.bad_epochs >= cfg.rop_patience) {
                state.plateau_lr *= double(cfg.rop_factor);
                state.bad_epochs = 0;
                state.cooldown = cfg.rop_cooldown;
            }
        }
    }
    if (state.epochs_since_best >= cfg.early_stop_epochs) state.stop = true;
    ++state.epoch;
}

std::string epoch_record_json(const EpochRecord& rec) {
    nlohmann::json j = {
        {"epoch", rec.epoch},
        {"lr", rec.lr},
        {"loss",
         {{"align_low", rec.loss.align_low},
          {"align_high", rec.loss.align_high},
          {"align_global", rec.loss.align_global},
          {"cluster", rec.loss.cluster},
          {"cmc", rec.loss.cmc},
          {"total", rec.loss.total}}},
        {"v2p",
         {{"r1", rec.v2p.r1},
          {"r5", rec.v2p.r5},
          {"r10", rec.v2p.r10},
          {"r50", rec.v2p.r50},
          {"median_rank", rec.v2p.median_rank}}},
        {"p2v",
         {{"r1", rec.p2v.r1},
          {"r5", rec.p2v.r5},
          {"r10", rec.p2v.r10},
          {"r50", rec.p2v.r50},
          {"median_rank", rec.p2v.median_rank}}},
        {"metric", rec.metric}};
    return j.dump();
}

namespace {

std::vector<Tensor> snapshot(const ParamStore& store) {
    std::vector<Tensor> out;
    out.reserve(store.count());
    for (const auto& p : store) out.push_back(p->value);
    return out;
}

void restore(ParamStore& store, const std::vector<Tensor>& snap) {
    std::size_t i = 0;
    for (auto& p : store) p->value = snap[i++];
}

} // namespace

TrainResult train_model(Model& model, const Dataset& train_ds,
                        const Dataset* val_ds, const LossConfig& loss_cfg,
                        const OptimConfig& optim_cfg, std::uint64_t seed,
                        const std::string& out_dir,
                        const std::string& config_json, bool verbose) {
    optim_cfg.validate();
    loss_cfg.validate();
    COOT_CHECK(!train_ds.samples.empty(), "train: empty dataset");
    const Dataset& val = val_ds != nullptr ? *val_ds : train_ds;

    init_params(model.params(), seed);
    Adam adam(model.params());
    ScheduleState sched = make_schedule(optim_cfg);

    TrainResult result;
    std::vector<Tensor> best = snapshot(model.params());

    std::vector<std::uint64_t> all_ids;
    for (const auto& s : train_ds.samples) all_ids.push_back(s.id);

    for (int epoch = 0; epoch < optim_cfg.max_epochs; ++epoch) {
        const double lr = schedule_lr(sched, optim_cfg);
        Rng shuffle_rng = Rng::derive(seed, kStreamShuffle, std::uint64_t(epoch));
        std::vector<std::uint64_t> ids = all_ids;
        shuffle_rng.shuffle(ids);

        LossBreakdown epoch_loss;
        std::size_t steps = 0;
        bool failed = false;
        for (std::size_t off = 0; off < ids.size();
             off += std::size_t(optim_cfg.batch_size)) {
            std::vector<std::uint64_t> chunk(
                ids.begin() + std::ptrdiff_t(off),
                ids.begin() + std::ptrdiff_t(std::min(
                                  off + std::size_t(optim_cfg.batch_size),
                                  ids.size())));
            BatchConfig bc;
            bc.max_frames = optim_cfg.max_frames;
            bc.train = true;
            bc.feature_noise = optim_cfg.feature_noise;
            const std::uint64_t step_tag =
                Rng::mix(std::uint64_t(epoch) * 0x10001ULL + steps);
            Batch batch = make_batch(train_ds, chunk, bc,
                                     Rng::mix(seed ^ (kStreamBatch + step_tag)));

            try {
                Tape tape;
                Rng drop_rng =
                    Rng::derive(seed, kStreamDropout, std::uint64_t(epoch), steps);
                Rng cmc_rng =
                    Rng::derive(seed, kStreamCmc, std::uint64_t(epoch), steps);
                EncodeOptions opts;
                opts.train = true;
                opts.rng = &drop_rng;
                opts.pad_to_clips = batch.max_clip_count();
                std::vector<PairVars> encoded;
                encoded.reserve(batch.samples.size());
                for (const auto& sample : batch.samples)
                    encoded.push_back(model.encode_pair(tape, sample, opts));
                LossTerms terms = total_loss(tape, encoded, loss_cfg, &cmc_rng);
                LossBreakdown b = breakdown(tape, terms);
                epoch_loss.align_low += b.align_low;
                epoch_loss.align_high += b.align_high;
                epoch_loss.align_global += b.align_global;
                epoch_loss.cluster += b.cluster;
                epoch_loss.cmc += b.cmc;
                epoch_loss.total += b.total;

                model.params().zero_grads();
                tape.backward(terms.total);
                tape.accumulate_param_grads();
                adam.step(model.params(), optim_cfg, lr);
            } catch (const NumericError& e) {
                std::cerr << "[coot] training diverged at epoch " << epoch
                          << " step " << steps << ": " << e.what() << "\n";
                result.diverged = true;
                failed = true;
                break;
            }
            ++steps;
        }
        if (failed) break;
        if (steps > 0) {
            epoch_loss.align_low /= double(steps);
            epoch_loss.align_high /= double(steps);
            epoch_loss.align_global /= double(steps);
            epoch_loss.cluster /= double(steps);
            epoch_loss.cmc /= double(steps);
            epoch_loss.total /= double(steps);
        }

        auto embeddings = encode_dataset(model, val, optim_cfg.max_frames);
        RetrievalResult ret = evaluate_retrieval(embeddings, RetrievalLevel::High);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.loss = epoch_loss;
        rec.v2p = ret.v2p;
        rec.p2v = ret.p2v;
        rec.v2p.ranks.clear();
        rec.p2v.ranks.clear();
        rec.metric = ret.v2p.r1 + ret.p2v.r1;
        result.log.push_back(rec);
        if (verbose)
            std::cerr << "[coot] epoch " << epoch << " lr " << lr << " loss "
                      << epoch_loss.total << " R@1 v2p " << ret.v2p.r1
                      << " p2v " << ret.p2v.r1 << "\n";

        const bool improved = !sched.has_best ||
                              rec.metric > sched.best + double(optim_cfg.improve_tol);
        if (improved) {
            best = snapshot(model.params());
            result.best_epoch = epoch;
            result.best_metric = rec.metric;
        }
        schedule_update(sched, rec.metric, optim_cfg);
        if (sched.stop) {
            result.early_stopped = true;
            break;
        }
    }

    restore(model.params(), best);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        result.checkpoint_path = out_dir + "/checkpoint.ckpt";
        save_checkpoint(result.checkpoint_path, model.params(), config_json);
        result.metrics_path = out_dir + "/metrics.jsonl";
        std::ofstream mf(result.metrics_path, std::ios::trunc);
        COOT_CHECK(mf.good(), "train: cannot write ", result.metrics_path);
        for (const auto& rec : result.log) mf << epoch_record_json(rec) << "\n";
        if (!config_json.empty()) {
            std::ofstream cf(out_dir + "/config.json", std::ios::trunc);
            cf << config_json << "\n";
        }
    }
    return result;
}

} // namespace coot

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "coot/config.hpp"
#include "coot/trainer.hpp"
#include "test_util.hpp"

using namespace coot;

namespace {

OptimConfig fast_optim() {
    OptimConfig o;
    o.warmup_epochs = 1;
    o.batch_size = 4;
    o.max_epochs = 2;
    o.max_frames = 16;
    return o;
}

RunConfig tiny_run() {
    RunConfig cfg = parse_run_config(nlohmann::json::object());
    cfg.seed = 9;
    cfg.data.synth.n_pairs = 8;
    cfg.data.synth.clips_min = 2;
    cfg.data.synth.clips_max = 2;
    cfg.data.synth.frames_min = 4;
    cfg.data.synth.frames_max = 6;
    cfg.data.synth.tokens_min = 3;
    cfg.data.synth.tokens_max = 5;
    cfg.data.synth.n_topics = 8;
    cfg.data.synth.latent_dim = 6;
    cfg.data.synth.video_dim = 10;
    cfg.data.synth.text_dim = 8;
    cfg.data.synth.seed = cfg.seed;
    cfg.model.width = 8;
    cfg.model.heads = 2;
    cfg.model.afa_heads = 2;
    cfg.model.dropout = 0.0f;
    cfg.model.max_positions_low = 16;
    cfg.model.max_positions_high = 4;
    cfg.optim = fast_optim();
    return cfg;
}

} // namespace

TEST_CASE("init draws truncated normal weights, zero biases, unit gains") {
    ParamStore store;
    Param& w = store.create("w", 400, 300, ParamKind::Weight);
    Param& b = store.create("b", 1, 64, ParamKind::Bias);
    Param& g = store.create("g", 1, 64, ParamKind::Gain);
    init_params(store, 7);

    double sum = 0, sumsq = 0;
    for (std::size_t i = 0; i < w.value.size(); ++i) {
        CHECK(std::fabs(w.value[i]) <= 0.02f);
        sum += w.value[i];
        sumsq += double(w.value[i]) * double(w.value[i]);
    }
    const double n = double(w.value.size());
    REQUIRE(n >= 1e5);
    double stddev = std::sqrt(sumsq / n - (sum / n) * (sum / n));
    CHECK(stddev >= 0.0085);
    CHECK(stddev <= 0.0095);

    // Rejection-sampling comparison draw confirms the band.
    Rng oracle(12345);
    double osum = 0, osumsq = 0;
    const int draws = 120000;
    for (int i = 0; i < draws; ++i) {
        double v;
        do {
            v = oracle.gaussian() * 0.01;
        } while (std::fabs(v) > 0.02);
        osum += v;
        osumsq += v * v;
    }
    double ostd = std::sqrt(osumsq / draws - (osum / draws) * (osum / draws));
    CHECK(ostd >= 0.0085);
    CHECK(ostd <= 0.0095);
    CHECK(std::fabs(stddev - ostd) <= 5e-4);

    for (std::size_t i = 0; i < b.value.size(); ++i) CHECK(b.value[i] == 0.0f);
    for (std::size_t i = 0; i < g.value.size(); ++i) CHECK(g.value[i] == 1.0f);

    // Same seed, same parameters.
    ParamStore store2;
    Param& w2 = store2.create("w", 400, 300, ParamKind::Weight);
    store2.create("b", 1, 64, ParamKind::Bias);
    store2.create("g", 1, 64, ParamKind::Gain);
    init_params(store2, 7);
    for (std::size_t i = 0; i < w.value.size(); ++i)
        CHECK(w.value[i] == w2.value[i]);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParamStore store;
    Param& w = store.create("w", 2, 2, ParamKind::Weight);
    w.value.fill(0.5f);
    w.zero_grad();
    OptimConfig cfg;
    cfg.weight_decay = 0.0f;
    Adam adam(store);
    adam.step(store, cfg, 1e-3);
    for (std::size_t i = 0; i < w.value.size(); ++i) CHECK(w.value[i] == 0.5f);
}

TEST_CASE("adam: first step moves by -lr for unit gradient") {
    ParamStore store;
    Param& w = store.create("w", 1, 1, ParamKind::Weight);
    w.value[0] = 0.7f;
    w.grad[0] = 1.0f;
    OptimConfig cfg;
    cfg.weight_decay = 0.0f;
    Adam adam(store);
    adam.step(store, cfg, 0.1);
    CHECK(double(w.value[0]) == doctest::Approx(0.7 - 0.1).epsilon(1e-6));
}

TEST_CASE("adam: decoupled weight decay applies before the update") {
    ParamStore store;
    Param& w = store.create("w", 1, 1, ParamKind::Weight);
    w.value[0] = 2.0f;
    w.grad[0] = 1.0f;
    OptimConfig cfg;
    cfg.weight_decay = 0.01f;
    Adam adam(store);
    adam.step(store, cfg, 0.1);
    // w <- w - lr*wd*w = 2 - 0.1*0.01*2 = 1.998, then the Adam delta ~ -0.1.
    CHECK(double(w.value[0]) ==
          doctest::Approx(1.998 - 0.1 / (1.0 + 1e-8)).epsilon(1e-6));
}

TEST_CASE("adam: identical states give identical updates") {
    auto run = [&](int steps) {
        ParamStore store;
        Param& w = store.create("w", 2, 3, ParamKind::Weight);
        Rng rng(5);
        for (std::size_t i = 0; i < w.value.size(); ++i)
            w.value[i] = float(rng.uniform(-1, 1));
        OptimConfig cfg;
        Adam adam(store);
        for (int s = 0; s < steps; ++s) {
            for (std::size_t i = 0; i < w.grad.size(); ++i)
                w.grad[i] = float(rng.uniform(-1, 1));
            adam.step(store, cfg, 1e-3);
        }
        return std::vector<float>(w.value.data(),
                                  w.value.data() + w.value.size());
    };
    CHECK(run(5) == run(5));
}

TEST_CASE("adam rejects non-finite gradients") {
    ParamStore store;
    Param& w = store.create("w", 1, 1, ParamKind::Weight);
    w.grad[0] = std::numeric_limits<float>::quiet_NaN();
    OptimConfig cfg;
    Adam adam(store);
    CHECK_THROWS_AS(adam.step(store, cfg, 1e-3), NumericError);
}

TEST_CASE("schedule: linear warmup ramp") {
    OptimConfig cfg;
    cfg.lr = 1e-3f;
    cfg.warmup_epochs = 3;
    ScheduleState s = make_schedule(cfg);
    CHECK(schedule_lr(s, cfg) == doctest::Approx(1e-3 / 3.0).epsilon(1e-9));
    schedule_update(s, 1.0, cfg);
    CHECK(schedule_lr(s, cfg) == doctest::Approx(2e-3 / 3.0).epsilon(1e-9));
    schedule_update(s, 2.0, cfg);
    CHECK(schedule_lr(s, cfg) == doctest::Approx(1e-3).epsilon(1e-9));
}

TEST_CASE("schedule: reduction fires once patience is exhausted") {
    OptimConfig cfg;
    cfg.lr = 1.0f;
    cfg.warmup_epochs = 0;
    cfg.rop_patience = 2;
    cfg.rop_cooldown = 0;
    ScheduleState s = make_schedule(cfg);
    schedule_update(s, 5.0, cfg);  // epoch 1: becomes best
    CHECK(schedule_lr(s, cfg) == 1.0);
    schedule_update(s, 5.0, cfg);  // epoch 2: bad 1
    CHECK(schedule_lr(s, cfg) == 1.0);
    schedule_update(s, 5.0, cfg);  // epoch 3: bad 2 -> reduce
    CHECK(schedule_lr(s, cfg) == doctest::Approx(0.1));
    schedule_update(s, 5.0, cfg);
    CHECK(schedule_lr(s, cfg) == doctest::Approx(0.1));  // patience restarts
}

TEST_CASE("schedule: cooldown suppresses consecutive reductions") {
    OptimConfig cfg;
    cfg.lr = 1.0f;
    cfg.warmup_epochs = 0;
    cfg.rop_patience = 2;
    cfg.rop_cooldown = 3;
    cfg.early_stop_epochs = 100;
    ScheduleState s = make_schedule(cfg);
    std::vector<double> lrs;
    schedule_update(s, 5.0, cfg);
    for (int e = 0; e < 12; ++e) {
        lrs.push_back(schedule_lr(s, cfg));
        schedule_update(s, 5.0, cfg);
    }
    // First reduction after 2 bad epochs, then 3 cooldown + 2 patience gaps.
    CHECK(lrs[1] == 1.0);
    CHECK(lrs[2] == doctest::Approx(0.1));
    CHECK(lrs[6] == doctest::Approx(0.1));
    CHECK(lrs[7] == doctest::Approx(0.01));

    // Learning rate never increases after warmup.
    for (std::size_t i = 1; i < lrs.size(); ++i) CHECK(lrs[i] <= lrs[i - 1]);
}

TEST_CASE("schedule: early stop after 15 non-improving epochs") {
    OptimConfig cfg;
    cfg.warmup_epochs = 0;
    cfg.early_stop_epochs = 15;
    ScheduleState s = make_schedule(cfg);
    schedule_update(s, 10.0, cfg);
    for (int e = 0; e < 14; ++e) {
        schedule_update(s, 9.0, cfg);
        CHECK_FALSE(s.stop);
    }
    schedule_update(s, 9.0, cfg);
    CHECK(s.stop);
}

TEST_CASE("train with zero epochs returns an initialized checkpoint") {
    RunConfig cfg = tiny_run();
    cfg.optim.max_epochs = 0;
    Dataset ds = generate_synthetic(cfg.data.synth).dataset;
    Model model(make_model_config(cfg, ds.video_dim, ds.text_dim));
    TrainResult result = train_model(model, ds, nullptr, cfg.loss, cfg.optim,
                                     cfg.seed, "test_train_zero");
    CHECK(result.log.empty());
    CHECK_FALSE(result.diverged);
    CHECK(std::filesystem::exists(result.checkpoint_path));
    // Parameters equal a fresh init with the same seed.
    Model fresh(make_model_config(cfg, ds.video_dim, ds.text_dim));
    init_params(fresh.params(), cfg.seed);
    Checkpoint ckpt = load_checkpoint(result.checkpoint_path);
    for (const auto& [name, tensor] : ckpt.tensors) {
        const Param& p = fresh.params().get(name);
        for (std::size_t i = 0; i < tensor.size(); ++i)
            CHECK(p.value[i] == tensor[i]);
    }
    std::filesystem::remove_all("test_train_zero");
}

TEST_CASE("fixed seed gives bit-identical metric logs") {
    RunConfig cfg = tiny_run();
    auto run = [&]() {
        Dataset ds = generate_synthetic(cfg.data.synth).dataset;
        expand_all_clips(ds, cfg.data.min_clip_len);
        Model model(make_model_config(cfg, ds.video_dim, ds.text_dim));
        TrainResult r = train_model(model, ds, nullptr, cfg.loss, cfg.optim,
                                    cfg.seed);
        std::string log;
        for (const auto& rec : r.log) log += epoch_record_json(rec) + "\n";
        return log;
    };
    std::string a = run();
    std::string b = run();
    CHECK(!a.empty());
    CHECK(a == b);
}

TEST_CASE("zero cmc weight trains bitwise identically to the toggle off") {
    RunConfig cfg = tiny_run();
    cfg.optim.max_epochs = 1;
    Dataset ds = generate_synthetic(cfg.data.synth).dataset;
    expand_all_clips(ds, cfg.data.min_clip_len);

    auto final_params = [&](bool use_cmc, float lambda) {
        LossConfig lc = cfg.loss;
        lc.use_cmc = use_cmc;
        lc.cmc_weight = lambda;
        Model model(make_model_config(cfg, ds.video_dim, ds.text_dim));
        train_model(model, ds, nullptr, lc, cfg.optim, cfg.seed);
        std::vector<float> out;
        for (const auto& p : model.params())
            out.insert(out.end(), p->value.data(),
                       p->value.data() + p->value.size());
        return out;
    };
    CHECK(final_params(true, 0.0f) == final_params(false, 0.01f));
}

TEST_CASE("checkpoint reload reproduces validation metrics exactly") {
    RunConfig cfg = tiny_run();
    Dataset full = generate_synthetic(cfg.data.synth).dataset;
    expand_all_clips(full, cfg.data.min_clip_len);
    Dataset train = subset(full, 0, 6);
    Dataset val = subset(full, 6, 2);

    Model model(make_model_config(cfg, full.video_dim, full.text_dim));
    TrainResult result = train_model(model, train, &val, cfg.loss, cfg.optim,
                                     cfg.seed, "test_train_ckpt");
    REQUIRE(!result.log.empty());

    auto direct = evaluate_retrieval(
        encode_dataset(model, val, cfg.optim.max_frames), RetrievalLevel::High);

    Model reloaded(make_model_config(cfg, full.video_dim, full.text_dim));
    load_params(reloaded.params(), load_checkpoint(result.checkpoint_path));
    auto from_ckpt = evaluate_retrieval(
        encode_dataset(reloaded, val, cfg.optim.max_frames),
        RetrievalLevel::High);

    CHECK(direct.v2p.r1 == from_ckpt.v2p.r1);
    CHECK(direct.p2v.r1 == from_ckpt.p2v.r1);
    CHECK(direct.v2p.ranks == from_ckpt.v2p.ranks);

    // The best epoch's logged metrics match the restored parameters.
    const EpochRecord& best = result.log[std::size_t(result.best_epoch)];
    CHECK(best.v2p.r1 == direct.v2p.r1);
    CHECK(best.p2v.r1 == direct.p2v.r1);
    std::filesystem::remove_all("test_train_ckpt");
}

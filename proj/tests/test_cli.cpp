#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "coot/config.hpp"

using namespace coot;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* cli_path() { return COOT_CLI_PATH; }

int run_cli(const std::string& args, const std::string& log = "/dev/null") {
    std::string cmd = std::string(cli_path()) + " " + args + " >" + log + " 2>&1";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("cli_test_") += name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& sub) const {
        return (path / sub).string();
    }
};

void write_tiny_config(const std::string& path, int n_pairs = 6,
                       int max_epochs = 1) {
    json cfg = {{"seed", 3},
                {"data",
                 {{"n_pairs", n_pairs},
                  {"clips_min", 2},
                  {"clips_max", 2},
                  {"frames_min", 4},
                  {"frames_max", 6},
                  {"tokens_min", 3},
                  {"tokens_max", 5},
                  {"n_topics", 8},
                  {"latent_dim", 6},
                  {"video_dim", 10},
                  {"text_dim", 8}}},
                {"model",
                 {{"width", 8},
                  {"heads", 2},
                  {"dropout", 0.0},
                  {"max_positions_low", 16},
                  {"max_positions_high", 4}}},
                {"optim",
                 {{"batch_size", 4},
                  {"max_epochs", max_epochs},
                  {"warmup_epochs", 1},
                  {"max_frames", 16}}}};
    std::ofstream f(path);
    f << cfg.dump(2);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("config schema rejects unknown keys and bad types") {
    CHECK_THROWS_WITH_AS(
        parse_run_config(json{{"optm", {{"lr", 1.0}}}}),
        doctest::Contains("unknown key 'optm'"), ConfigError);
    CHECK_THROWS_WITH_AS(
        parse_run_config(json{{"optim", {{"lr", "fast"}}}}),
        doctest::Contains("wrong type for 'optim.lr'"), ConfigError);
    CHECK_THROWS_WITH_AS(
        parse_run_config(json{{"data", {{"n_topics", 1}}}}),
        doctest::Contains("n_topics"), ConfigError);
}

TEST_CASE("dotted overrides reach nested keys") {
    json doc = json::object();
    apply_override(doc, "optim.lr", "3e-4");
    apply_override(doc, "losses.cmc.lambda", "0.5");
    apply_override(doc, "model.low_pool", "max");
    RunConfig cfg = parse_run_config(doc);
    CHECK(cfg.optim.lr == doctest::Approx(3e-4));
    CHECK(cfg.loss.cmc_weight == doctest::Approx(0.5));
    CHECK(cfg.model.low_pool == "max");

    // The losses section answers to the singular alias, and boolean words
    // assigned to the cmc object toggle it.
    json doc2 = json::object();
    apply_override(doc2, "loss.cmc", "off");
    RunConfig cfg2 = parse_run_config(doc2);
    CHECK_FALSE(cfg2.loss.use_cmc);
}

TEST_CASE("cli gen writes three deterministic files and honors --force") {
    TempDir dir("gen");
    std::string cfg_path = dir / "cfg.json";
    write_tiny_config(cfg_path);
    std::string prefix = dir / "ds";

    CHECK(run_cli("gen --config " + cfg_path + " --out " + prefix) == 0);
    for (const char* suffix : {".manifest.json", ".video.f32", ".text.f32"})
        CHECK(fs::exists(prefix + suffix));

    // Refuses to overwrite without --force.
    CHECK(run_cli("gen --config " + cfg_path + " --out " + prefix) != 0);

    std::string manifest = slurp(prefix + ".manifest.json");
    std::string video = slurp(prefix + ".video.f32");
    CHECK(run_cli("gen --config " + cfg_path + " --out " + prefix + " --force") ==
          0);
    CHECK(slurp(prefix + ".manifest.json") == manifest);
    CHECK(slurp(prefix + ".video.f32") == video);
}

TEST_CASE("cli rejects invalid configs with exit code 2 and a JSON error") {
    TempDir dir("badcfg");
    std::string cfg_path = dir / "bad.json";
    {
        std::ofstream f(cfg_path);
        f << "{\"nonsense\": 1}";
    }
    std::string log = dir / "err.log";
    CHECK(run_cli("gen --config " + cfg_path + " --out " + (dir / "x"), log) == 2);
    std::string err = slurp(log);
    json parsed = json::parse(err);
    CHECK(parsed.contains("error"));
}

TEST_CASE("cli train, eval and gradcheck round trip") {
    TempDir dir("train");
    std::string cfg_path = dir / "cfg.json";
    write_tiny_config(cfg_path);
    std::string prefix = dir / "ds";
    REQUIRE(run_cli("gen --config " + cfg_path + " --out " + prefix) == 0);

    // Zero-epoch training still produces a checkpoint and an empty log.
    std::string out0 = dir / "run0";
    CHECK(run_cli("train --config " + cfg_path + " --data " + prefix + " --out " +
                  out0 + " --max-epochs 0") == 0);
    CHECK(fs::exists(out0 + "/checkpoint.ckpt"));
    CHECK(slurp(out0 + "/metrics.jsonl").empty());

    std::string out1 = dir / "run1";
    CHECK(run_cli("train --config " + cfg_path + " --data " + prefix + " --out " +
                  out1) == 0);
    CHECK(fs::exists(out1 + "/metrics.jsonl"));
    CHECK(fs::exists(out1 + "/config.json"));

    std::string report = dir / "report.json";
    CHECK(run_cli("eval --checkpoint " + out1 + "/checkpoint.ckpt --data " +
                  prefix + " --level high --direction both --out " + report) == 0);
    json rep = json::parse(slurp(report));
    CHECK(rep.contains("v2p"));
    CHECK(rep.contains("p2v"));
    CHECK(rep["v2p"]["r1"].is_number());

    CHECK(run_cli("gradcheck --config " + cfg_path) == 0);
}

TEST_CASE("disabling cmc and zeroing its weight give identical logs") {
    TempDir dir("cmceq");
    std::string cfg_path = dir / "cfg.json";
    write_tiny_config(cfg_path);
    std::string prefix = dir / "ds";
    REQUIRE(run_cli("gen --config " + cfg_path + " --out " + prefix) == 0);

    std::string out_a = dir / "off";
    std::string out_b = dir / "zero";
    CHECK(run_cli("train --config " + cfg_path + " --data " + prefix + " --out " +
                  out_a + " --loss.cmc off") == 0);
    CHECK(run_cli("train --config " + cfg_path + " --data " + prefix + " --out " +
                  out_b + " --loss.cmc.lambda 0") == 0);
    CHECK(slurp(out_a + "/metrics.jsonl") == slurp(out_b + "/metrics.jsonl"));
}

TEST_CASE("cli ablate writes one csv row per setting") {
    TempDir dir("ablate");
    std::string cfg_path = dir / "cfg.json";
    write_tiny_config(cfg_path, 8, 1);
    std::string prefix = dir / "ds";
    REQUIRE(run_cli("gen --config " + cfg_path + " --out " + prefix) == 0);

    std::string csv = dir / "sweep.csv";
    CHECK(run_cli("ablate --config " + cfg_path + " --data " + prefix +
                  " --sweep pooling=max,avg --val-split 2 --seeds 1 --out " +
                  csv) == 0);
    std::string text = slurp(csv);
    std::size_t lines = std::count(text.begin(), text.end(), '\n');
    CHECK(lines == 3);  // header + 2 settings
    CHECK(text.find("pooling,max,1,") != std::string::npos);
    CHECK(text.find("pooling,avg,1,") != std::string::npos);
}

// Exercises the installed command-line surface end to end: generation,
// pretraining, reconstruction, evaluation, exit codes, and byte-level
// determinism. Slow-ish (a couple of minutes): it really trains a tiny model.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = SAOC_CLI_PATH;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("saoc_cli_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

int run(const std::string& args) {
    const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Cli, FullPipelineSmokeAndDeterminism) {
    TempDir dir;
    {
        std::ofstream cfg(dir.file("run.cfg"));
        cfg << "net.grid_res = 16\nnet.feature_dim = 16\nnet.unet_width = 8\n"
               "pretrain.batch_size = 1\npretrain.lr = 1e-3\npretrain.iterations = 250\n"
               "pretrain.queries_per_shape = 384\npretrain.surface_points = 512\n"
               "pretrain.noise_sigma = 0.05\npretrain.seed = 3\n";
    }
    ASSERT_EQ(run("gen-shapes --count 2 --seed 7 --out " + dir.file("data") +
                  " --points 6000 --noise 0.05"),
              0);
    ASSERT_TRUE(fs::exists(dir.file("data") + "/shape_001.json"));
    ASSERT_TRUE(fs::exists(dir.file("data") + "/cloud_001.ply"));

    ASSERT_EQ(run("pretrain --shapes " + dir.file("data") + " --config " + dir.file("run.cfg") +
                  " --out " + dir.file("model.ckpt") + " --trace " + dir.file("pre.csv")),
              0);
    ASSERT_TRUE(fs::exists(dir.file("model.ckpt")));

    const std::string rec = "reconstruct --ckpt " + dir.file("model.ckpt") + " --input " +
                            dir.file("data") + "/cloud_001.ply --mode full --sa-iters 60 "
                            "--sa-lr0 1e-4 --seed 5 --mise-res0 16 --mise-res1 32 --out ";
    ASSERT_EQ(run(rec + dir.file("a.obj")), 0);
    ASSERT_EQ(run(rec + dir.file("b.obj")), 0);
    EXPECT_EQ(slurp(dir.file("a.obj")), slurp(dir.file("b.obj")));  // bytes, same argv + seed

    ASSERT_EQ(run("eval --mesh " + dir.file("a.obj") + " --gt-shape " + dir.file("data") +
                  "/shape_001.json --tau 0.01 --report " + dir.file("report.json")),
              0);
    const auto report = nlohmann::json::parse(slurp(dir.file("report.json")));
    EXPECT_GT(report["fs_2tau"].get<double>(), 0.0);
    EXPECT_GE(report["cd"].get<double>(), 0.0);

    ASSERT_EQ(run("scene --ckpt " + dir.file("model.ckpt") + " --input " + dir.file("data") +
                  "/cloud_001.ply --core 17 --global-res 32 --out " + dir.file("scene.obj")),
              0);
    ASSERT_TRUE(fs::exists(dir.file("scene.obj")));
}

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run("reconstruct"), 1);               // missing required flags
    EXPECT_EQ(run("--bogus-flag"), 1);              // unknown flag
    EXPECT_EQ(run(""), 1);                          // missing subcommand
}

TEST(Cli, RuntimeErrorsExitTwo) {
    TempDir dir;
    EXPECT_EQ(run("reconstruct --ckpt " + dir.file("missing.ckpt") + " --input " +
                  dir.file("missing.ply") + " --out " + dir.file("out.obj")),
              2);
    // malformed checkpoint
    {
        std::ofstream f(dir.file("bad.ckpt"), std::ios::binary);
        f << "NOPE";
    }
    EXPECT_EQ(run("reconstruct --ckpt " + dir.file("bad.ckpt") + " --input " +
                  dir.file("missing.ply") + " --out " + dir.file("out.obj")),
              2);
}

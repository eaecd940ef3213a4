#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "crate/checkpoint.hpp"
#include "crate/dataset.hpp"
#include "crate/diagnostics.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "crate_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(CRATE_CLI_PATH) + " " + args + " > " + (work_dir() / "stdout.txt").string() +
                          " 2> " + (work_dir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

void write_config(const std::string& name, const nlohmann::json& j) { std::ofstream(path(name)) << j.dump(2); }

nlohmann::json classifier_config() {
  return {{"layers", 2},      {"dim", 16},       {"heads", 2},       {"head_dim", 8},
          {"tokens", 16},     {"patch_dim", 8},  {"classes", 3},     {"task", "gmm_classify"},
          {"optimizer", "adam"}, {"lr", 0.005},  {"epochs", 2},      {"batch_size", 8},
          {"data_samples", 32}, {"seed", 4}};
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("train --out x.json"), 2);
  EXPECT_EQ(run("gmm-verify --update sideways"), 2);
  write_config("bad.json", {{"layers", 1}, {"learning_rate", 0.1}});
  EXPECT_EQ(run("train --config " + path("bad.json") + " --out " + path("bad_ckpt.json")), 2);
  EXPECT_NE(slurp(work_dir() / "stderr.txt").find("learning_rate"), std::string::npos);
}

TEST(Cli, SynthTrainAndDiagnosticsPipeline) {
  ASSERT_EQ(run("synth --out " + path("data.crtd") + " --samples 32 --tokens 16 --patch-dim 8 --classes 3 --seed 9"), 0);
  const crate::Dataset data = crate::read_crtd(path("data.crtd"));
  EXPECT_EQ(data.size(), 32u);
  EXPECT_TRUE(data.labeled());

  write_config("cls.json", classifier_config());
  ASSERT_EQ(run("train --config " + path("cls.json") + " --data " + path("data.crtd") + " --out " + path("a.json") +
                " --metrics " + path("a_metrics.json")),
            0);
  fs::create_directories(work_dir() / "again");
  const std::string again = (work_dir() / "again" / "a.json").string();
  ASSERT_EQ(run("train --config " + path("cls.json") + " --data " + path("data.crtd") + " --out " + again), 0);
  EXPECT_EQ(slurp(path("a.json")), slurp(again));
  EXPECT_EQ(slurp(crate::checkpoint_blob_path(path("a.json"))), slurp(crate::checkpoint_blob_path(again)));
  const auto metrics = nlohmann::json::parse(slurp(path("a_metrics.json")));
  EXPECT_EQ(metrics["epoch_loss"].size(), 2u);
  EXPECT_EQ(crate::load_checkpoint(path("a.json")).seed, 4u);

  ASSERT_EQ(run("eval --config " + path("cls.json") + " --checkpoint " + path("a.json") + " --data " +
                path("data.crtd") + " --out " + path("eval.json")),
            0);
  const auto eval = nlohmann::json::parse(slurp(path("eval.json")));
  EXPECT_EQ(eval["samples"].get<int>(), 32);
  EXPECT_GE(eval["accuracy"].get<double>(), 0.0);

  ASSERT_EQ(run("layer-metrics --checkpoint " + path("a.json") + " --data " + path("data.crtd") + " --samples 10 --out " +
                path("m1.csv")),
            0);
  ASSERT_EQ(run("layer-metrics --checkpoint " + path("a.json") + " --data " + path("data.crtd") + " --samples 10"), 0);
  EXPECT_EQ(slurp(path("m1.csv")), slurp(work_dir() / "stdout.txt"));
  EXPECT_EQ(crate::parse_layer_metrics_csv(slurp(path("m1.csv"))).size(), 2u);

  ASSERT_EQ(run("attn --checkpoint " + path("a.json") + " --data " + path("data.crtd") +
                " --sample 3 --layer 1 --head 1 --out " + path("attn.json")),
            0);
  const auto attn = crate::attention_map_from_json(nlohmann::json::parse(slurp(path("attn.json"))));
  EXPECT_EQ(attn.values.size(), 16u);
  EXPECT_EQ(attn.grid_rows, 4u);
  EXPECT_EQ(run("attn --checkpoint " + path("a.json") + " --data " + path("data.crtd") + " --layer 2"), 2);

  ASSERT_EQ(run("coherence --checkpoint " + path("a.json") + " --layer 0 --out " + path("coh.json")), 0);
  EXPECT_EQ(crate::coherence_from_json(nlohmann::json::parse(slurp(path("coh.json")))).gram.rows(), 16u);
}

TEST(Cli, DivergenceExitsWithThree) {
  auto cfg = classifier_config();
  cfg["optimizer"] = "sgd";
  cfg["lr"] = 1e200;
  write_config("diverge.json", cfg);
  EXPECT_EQ(run("train --config " + path("diverge.json") + " --out " + path("d.json")), 3);
}

TEST(Cli, GmmVerifyIsReproducibleAndGatesOnFraction) {
  const std::string args = "gmm-verify --d 16 --n 8 --p 4 --K 4 --sigma 0.01,0.1 --trials 5 --seed 3";
  ASSERT_EQ(run(args + " --out " + path("g1.json")), 0);
  ASSERT_EQ(run(args + " --out " + path("g2.json")), 0);
  EXPECT_EQ(slurp(path("g1.json")), slurp(path("g2.json")));
  const auto report = nlohmann::json::parse(slurp(path("g1.json")));
  EXPECT_EQ(report["sweep"].size(), 2u);
  EXPECT_EQ(run(args + " --update convex_mssa"), 4);
}

TEST(Cli, GradcheckPasses) {
  ASSERT_EQ(run("gradcheck --seed 2"), 0);
  const auto j = nlohmann::json::parse(slurp(work_dir() / "stdout.txt"));
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_FALSE(slurp(work_dir() / "stderr.txt").empty());
}

// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "covergen/cli/app.hpp"
#include "covergen/common/tensor_io.hpp"
#include "covergen/evalsuite/report.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

using namespace covergen;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(
# Small enough to run every stage in seconds.
[world]
n_items = 60
n_users = 40
corpus_size = 100
[embedder]
epochs = 1
[context]
steps = 5
heldout = 20
[user]
epochs = 1
[diffusion]
steps = 5
channels = 8
[reward]
epochs = 2
[align]
stage1_steps = 2
stage2_steps = 2
batch = 2
[eval]
win_trials = 20
n_items = 8
[recsys]
epochs = 1
generated_per_user = 1
)";

struct Sandbox {
  fs::path dir;
  fs::path config;
  explicit Sandbox(const std::string& name) : dir(fs::temp_directory_path() / ("covergen_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = dir / "tiny.conf";
    std::ofstream(config) << kTinyConfig;
  }
  ~Sandbox() { fs::remove_all(dir); }
  fs::path root() const { return dir / "artifacts"; }
};

struct Result {
  int code;
  std::string err;
};

Result run(const Sandbox& box, std::vector<std::string> args) {
  args.insert(args.end(), {"--config", box.config.string(), "--root", box.root().string(), "--deterministic"});
  std::ostringstream captured;
  auto* old = std::cerr.rdbuf(captured.rdbuf());
  const int code = cli::run(args);
  std::cerr.rdbuf(old);
  return {code, captured.str()};
}

std::map<std::string, std::string> dir_digests(const fs::path& dir, const std::string& ext) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) out[fs::relative(e.path(), dir).string()] = digest_file(e.path());
  }
  return out;
}

}  // namespace

TEST_CASE("synth is reproducible") {
  Sandbox box("synth");
  REQUIRE(run(box, {"synth"}).code == 0);
  const auto first = dir_digests(box.root() / "world", ".jsonl");
  const auto first_png = dir_digests(box.root() / "world", ".png");
  REQUIRE(run(box, {"synth"}).code == 0);
  CHECK(first == dir_digests(box.root() / "world", ".jsonl"));
  CHECK(first_png == dir_digests(box.root() / "world", ".png"));
  CHECK(first.size() == 4);

  REQUIRE(run(box, {"synth", "--set", "run.seed=99"}).code == 0);
  CHECK(first != dir_digests(box.root() / "world", ".jsonl"));
}

TEST_CASE("exit codes name the failure") {
  Sandbox box("errors");
  SUBCASE("generate without align") {
    const auto r = run(box, {"generate"});
    CHECK(r.code == cli::kMissingDependency);
    CHECK(r.err.find("`align`") != std::string::npos);
    CHECK(r.err.find("MissingDependency") != std::string::npos);
  }
  SUBCASE("training before synth") {
    const auto r = run(box, {"train-embedder"});
    CHECK(r.code == cli::kSuccess);  // the embedder corpus does not depend on the world
    const auto r2 = run(box, {"train-context"});
    CHECK(r2.code == cli::kMissingDependency);
    CHECK(r2.err.find("`synth`") != std::string::npos);
  }
  SUBCASE("unknown config key") {
    const auto r = run(box, {"synth", "--set", "world.colour=3"});
    CHECK(r.code == cli::kConfigError);
    CHECK(r.err.find("ConfigError") != std::string::npos);
  }
  SUBCASE("malformed override and wrong type") {
    CHECK(run(box, {"synth", "--set", "world.n_items"}).code == cli::kConfigError);
    CHECK(run(box, {"synth", "--set", "world.n_items=many"}).code == cli::kConfigError);
  }
  SUBCASE("unknown subcommand") { CHECK(run(box, {"train-everything"}).code == cli::kConfigError); }
  SUBCASE("divergence") {
    REQUIRE(run(box, {"synth"}).code == 0);
    const auto r = run(box, {"pretrain-diffusion", "--set", "diffusion.lr=1e30"});
    CHECK(r.code == cli::kNumericalFailure);
    CHECK(r.err.find("NumericalFailure") != std::string::npos);
  }
}

TEST_CASE("artifact root from the environment") {
  Sandbox box("env");
  const auto env_root = box.dir / "from_env";
  setenv(cli::kRootEnv, env_root.c_str(), 1);
  std::ostringstream sink;
  auto* old = std::cerr.rdbuf(sink.rdbuf());
  const int code = cli::run({"synth", "--config", box.config.string()});
  std::cerr.rdbuf(old);
  unsetenv(cli::kRootEnv);
  CHECK(code == 0);
  CHECK(fs::exists(env_root / "world" / "items.jsonl"));
  CHECK(fs::exists(env_root / "manifest.json"));
}

TEST_CASE("full tiny pipeline") {
  Sandbox box("pipeline");
  for (const char* stage : {"synth", "train-embedder", "train-context", "train-user", "pretrain-diffusion",
                            "train-reward", "align"}) {
    const auto r = run(box, {stage});
    INFO(stage << ": " << r.err);
    REQUIRE(r.code == 0);
  }
  CHECK(run(box, {"align", "--tag", "nometa", "--set", "align.use_meta=false"}).code == 0);

  SUBCASE("generate is bit-reproducible") {
    REQUIRE(run(box, {"generate", "--out", "gen_a"}).code == 0);
    REQUIRE(run(box, {"generate", "--out", "gen_b"}).code == 0);
    const auto a = dir_digests(box.root() / "gen_a", ".png");
    const auto b = dir_digests(box.root() / "gen_b", ".png");
    CHECK(a.size() == 8);
    CHECK(a == b);
    REQUIRE(run(box, {"generate", "--items", "0,1", "--users", "3,4", "--out", "explicit"}).code == 0);
    CHECK(dir_digests(box.root() / "explicit", ".png").size() == 2);
    CHECK(run(box, {"generate", "--items", "0,1", "--users", "3"}).code == cli::kConfigError);
  }

  SUBCASE("report covers every metric") {
    for (const char* stage : {"eval", "recsys", "report"}) {
      const auto r = run(box, {stage});
      INFO(stage << ": " << r.err);
      REQUIRE(r.code == 0);
    }
    std::set<std::string> names;
    for (const auto& m : evalsuite::read_metrics_json(box.root() / "report" / "metrics.json")) {
      CHECK(m.n > 0);
      names.insert(m.name);
    }
    for (const char* required :
         {"full.fid", "full.ssim_ref", "full.ssim_hist", "full.lpips_ref", "full.lpips_hist", "full.aesthetic",
          "full.win_rate", "base.win_rate", "no_meta.lpips_ref", "reward.preference_accuracy",
          "reward.image_only.test_accuracy", "recsys.generated_user.recall@10", "recsys.no_image.ndcg@10",
          "harness.oracle_win_rate", "align.audit_passed", "context.heldout_recon_final"}) {
      CHECK_MESSAGE(names.count(required) == 1, required);
    }
    std::ifstream md(box.root() / "report" / "report.md");
    std::stringstream text;
    text << md.rdbuf();
    CHECK(text.str().find("| no_meta |") != std::string::npos);
    CHECK(text.str().find("generated_user") != std::string::npos);
  }

  SUBCASE("manifest records stages and detects tampering") {
    std::ifstream in(box.root() / "manifest.json");
    const auto j = nlohmann::json::parse(in);
    for (const char* stage : {"synth", "train-embedder", "train-context/main", "align/main", "align/nometa"}) {
      REQUIRE(j["stages"].contains(stage));
      CHECK(!j["stages"][stage]["config"].get<std::string>().empty());
      CHECK(j["stages"][stage]["wall_seconds"].get<double>() >= 0.0);
    }
    CHECK(j["stages"]["align/main"]["inputs"].contains("diffusion/base.ckpt"));
    CHECK(j["stages"]["align/main"]["outputs"].contains("align/main/adapter.ckpt"));

    // Re-running a deterministic stage reproduces its outputs.
    const auto before = j["stages"]["train-embedder"]["outputs"];
    REQUIRE(run(box, {"train-embedder"}).code == 0);
    std::ifstream again(box.root() / "manifest.json");
    CHECK(nlohmann::json::parse(again)["stages"]["train-embedder"]["outputs"] == before);

    std::ofstream(box.root() / "world" / "users.jsonl", std::ios::app) << "\n";
    const auto r = run(box, {"report"});
    CHECK(r.code == cli::kConfigError);
    CHECK(r.err.find("synth") != std::string::npos);
  }
}

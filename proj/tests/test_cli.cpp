// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "gmmoe/checkpoint.hpp"
#include "gmmoe/config.hpp"
#include "gmmoe/data.hpp"
#include "gmmoe/metrics.hpp"
#include "support/test_util.hpp"

using namespace gmmoe;
using namespace gmmoe::testing;

namespace {

const fs::path kFixture = fs::path(GMMOE_SOURCE_DIR) / "tests" / "fixtures" / "paired4";

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + GMMOE_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

fs::path write_config(const TempDir& dir, const std::string& body, const std::string& name = "run.toml") {
  std::ofstream(dir / name) << body;
  return dir / name;
}

const char* kQuickConfig = R"(
[model]
preset = "tiny"
base_channels = 4
[train]
batch_size = 1
patch = 32
total_iters = 4
checkpoint_every = 2
master_seed = 3
)";

fs::path identity_checkpoint(const TempDir& dir) {
  const auto model = build_model<float>(ModelConfig::tiny(), 1);
  const fs::path path = dir / "identity.bin";
  save_checkpoint(make_checkpoint(model, {}, 0, 1), path);
  return path;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  TempDir dir("cli_usage");
  CHECK(run("", dir / "log") == 2);
  CHECK(run("frobnicate", dir / "log") == 2);
  CHECK(run("train --out x", dir / "log") == 2);
  CHECK(run("--help", dir / "log") == 0);
}

TEST_CASE("configuration and data errors") {
  TempDir dir("cli_errors");
  ::unsetenv("GMMOE_DATA_ROOT");
  const auto bad = write_config(dir, "[train]\nbatchsize = 2\n", "bad.toml");
  CHECK(run("train --config " + q(bad) + " --data-root " + q(kFixture) + " --out " + q(dir / "o1"), dir / "log") == 2);
  CHECK(slurp(dir / "log").find("train.batchsize") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "o1"));

  const auto good = write_config(dir, kQuickConfig);
  CHECK(run("train --config " + q(good) + " --out " + q(dir / "o2"), dir / "log") == 3);
  CHECK_FALSE(fs::exists(dir / "o2"));
  CHECK(run("train --config " + q(good) + " --data-root " + q(dir / "nowhere") + " --out " + q(dir / "o3"),
            dir / "log") == 3);
  CHECK_FALSE(fs::exists(dir / "o3"));

  CHECK(run("ablate --preset 9 --config " + q(good) + " --data-root " + q(kFixture) + " --out " + q(dir / "o4"),
            dir / "log") == 2);
  CHECK(run("eval --ckpt " + q(dir / "missing.bin") + " --data-root " + q(kFixture) + " --report " +
                q(dir / "r.json"),
            dir / "log") == 3);
  CHECK(run("eval --ckpt " + q(identity_checkpoint(dir)) + " --data-root " + q(kFixture) +
                " --layout nonsense --report " + q(dir / "r.json"),
            dir / "log") == 2);
}

TEST_CASE("train, resume and eval") {
  TempDir dir("cli_train");
  const auto cfg = write_config(dir, kQuickConfig);
  const fs::path out = dir / "out";
  ::setenv("GMMOE_DATA_ROOT", kFixture.c_str(), 1);
  REQUIRE(run("train --config " + q(cfg) + " --out " + q(out), dir / "log") == 0);
  ::unsetenv("GMMOE_DATA_ROOT");
  CHECK(fs::exists(out / "ckpt_2.bin"));
  CHECK(fs::exists(out / "ckpt_4.bin"));
  CHECK(fs::exists(out / "log.jsonl"));
  CHECK(fs::exists(out / "report.csv"));
  const auto report = nlohmann::json::parse(slurp(out / "report.json"));
  CHECK(report.at("aggregate").at("count") == 2);
  CHECK(report.at("per_image").size() == 2);
  CHECK(report.at("config_digest") == config_digest(load_run_config(cfg)));

  const Checkpoint ck = load_checkpoint(out / "ckpt_4.bin");
  CHECK(ck.iteration == 4);
  CHECK(ck.config_digest == config_digest(load_run_config(cfg)));

  SUBCASE("resume continues from the stored iteration") {
    const auto longer = write_config(dir, std::string(kQuickConfig) + "", "same.toml");
    const fs::path out2 = dir / "out2";
    CHECK(run("train --config " + q(longer) + " --data-root " + q(kFixture) + " --out " + q(out2) + " --resume " +
                  q(out / "ckpt_2.bin"),
              dir / "log") == 0);
    CHECK(slurp(dir / "log").find("resuming from iteration 2") != std::string::npos);
    CHECK(slurp(out2 / "ckpt_4.bin") == slurp(out / "ckpt_4.bin"));
    CHECK(run("train --config " + q(longer) + " --data-root " + q(kFixture) + " --out " + q(dir / "out3") +
                  " --seed 99 --resume " + q(out / "ckpt_2.bin"),
              dir / "log") == 2);
  }
  SUBCASE("eval twice gives byte-identical reports") {
    const std::string base = "eval --ckpt " + q(out / "ckpt_4.bin") + " --data-root " + q(kFixture) + " --report ";
    REQUIRE(run(base + q(dir / "a.json"), dir / "log") == 0);
    REQUIRE(run(base + q(dir / "b.json"), dir / "log") == 0);
    CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    CHECK(slurp(dir / "a.csv").rfind("id,psnr_db,ssim\n", 0) == 0);
  }
}

TEST_CASE("identity checkpoint evaluates to the input baseline") {
  TempDir dir("cli_eval_identity");
  const auto ckpt = identity_checkpoint(dir);
  REQUIRE(run("eval --ckpt " + q(ckpt) + " --data-root " + q(kFixture) + " --layout generic_paired --report " +
                  q(dir / "r.json"),
              dir / "log") == 0);
  const auto report = nlohmann::json::parse(slurp(dir / "r.json"));
  const auto m = load_manifest(kFixture, Layout::generic_paired, Split::test);
  for (std::size_t i = 0; i < m.pairs.size(); ++i) {
    const auto p = eval_pair(m, i);
    CHECK(report.at("per_image")[i].at("id") == m.pairs[i].id);
    CHECK(report.at("per_image")[i].at("psnr_db").get<double>() ==
          doctest::Approx(psnr_metric(p.low, p.gt)[0]).epsilon(1e-9));
  }
}

TEST_CASE("enhance") {
  TempDir dir("cli_enhance");
  const auto ckpt = identity_checkpoint(dir);
  write_random_png(dir / "in/wide.png", 400, 600, 1);
  write_random_png(dir / "in/small.png", 13, 17, 2);
  REQUIRE(run("enhance --ckpt " + q(ckpt) + " --in " + q(dir / "in") + " --out " + q(dir / "out"), dir / "log") ==
          0);
  for (const char* name : {"wide.png", "small.png"}) {
    const auto in = decode_image8(dir / "in" / name);
    const auto out = decode_image8(dir / "out" / name);
    CHECK(out.height == in.height);
    CHECK(out.width == in.width);
    CHECK(out.rgb == in.rgb);
  }
  CHECK(decode_image8(dir / "out/wide.png").width == 600);

  std::ofstream(dir / "in/broken.png") << "nope";
  CHECK(run("enhance --ckpt " + q(ckpt) + " --in " + q(dir / "in") + " --out " + q(dir / "out2"), dir / "log") == 3);
  CHECK(fs::exists(dir / "out2/wide.png"));
  CHECK(fs::exists(dir / "out2/small.png"));
  CHECK(slurp(dir / "log").find("broken.png") != std::string::npos);

  CHECK(run("enhance --ckpt " + q(ckpt) + " --in " + q(dir / "in/small.png") + " --out " + q(dir / "out3"),
            dir / "log") == 0);
  CHECK(fs::exists(dir / "out3/small.png"));
}

TEST_CASE("ablate writes a labelled row") {
  TempDir dir("cli_ablate");
  const auto cfg = write_config(dir, kQuickConfig);
  REQUIRE(run("ablate --preset 8 --config " + q(cfg) + " --data-root " + q(kFixture) + " --out " + q(dir / "o"),
              dir / "log") == 0);
  const auto row = nlohmann::json::parse(slurp(dir / "o/ablation_row.json"));
  CHECK(row.at("preset") == 8);
  CHECK(row.at("reference").at("lol_v2_real").at("psnr_db") == 23.65);
  CHECK(row.at("reference").at("lol_v2_real").at("ssim") == 0.8060);
  CHECK(fs::exists(dir / "o/ablation_row.md"));
  CHECK(fs::exists(dir / "o/report.json"));
  const Checkpoint ck = load_checkpoint(dir / "o/ckpt_4.bin");
  CHECK(component_set(ck.params).size() == 5);

  REQUIRE(run("ablate --preset 1 --config " + q(cfg) + " --data-root " + q(kFixture) + " --out " + q(dir / "p"),
              dir / "log") == 0);
  CHECK(component_set(load_checkpoint(dir / "p/ckpt_4.bin").params).empty());
}

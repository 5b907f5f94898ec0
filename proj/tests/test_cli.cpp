// End-to-end tests for the voxsem command-line tool. Each case launches the
// real binary (path injected by the build as VOXSEM_CLI_PATH), checks exit
// codes and artifacts, and never inspects library internals the CLI does not
// itself expose -- the point is the user-facing contract.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "voxsem/store.hpp"

namespace fs = std::filesystem;
using namespace voxsem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

// Runs the CLI through the shell so tests can prefix environment variables.
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  const std::string cmd = env_prefix + VOXSEM_CLI_PATH " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[512];
  while (fgets(buf, sizeof buf, pipe) != nullptr) r.output += buf;
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "voxsem_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// Small enough that gen-data + train + classify stays in seconds.
const char* kTinyConfig =
    "data.num_classes = 2\n"
    "data.instances_per_class = 2\n"
    "data.num_views = 2\n"
    "data.resolution = 8\n"
    "data.max_shift = 0\n"
    "data.test_instances_per_class = 1\n"
    "train.dim_c = 4\n"
    "train.dim_i = 4\n"
    "train.dim_v = 2\n"
    "train.dim_t = 2\n"
    "train.conv_channels = 4,8\n"
    "train.dense_hidden = 16\n"
    "train.prior_hidden = 8\n"
    "train.resolution = 8\n"
    "train.epochs = 2\n"
    "train.batch_size = 4\n"
    "slam.num_keyframes = 8\n"
    "slam.num_landmarks = 3\n";

fs::path write_tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.cfg";
  spit(p, kTinyConfig);
  return p;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(run_cli("").exit_code == 1);                 // subcommand required
  CHECK(run_cli("frobnicate").exit_code == 1);       // unknown subcommand
  CHECK(run_cli("gen-data --bogus 3").exit_code == 1);
  CHECK(run_cli("--help").exit_code == 0);
  const RunResult help = run_cli("--help");
  CHECK(help.output.find("gen-data") != std::string::npos);
  CHECK(help.output.find("slam-sim") != std::string::npos);
}

TEST_CASE("missing config file exits 1 and names the path") {
  const fs::path dir = scratch("missing_cfg");
  const RunResult r =
      run_cli("train --config " + q(dir / "nope.cfg") + " --out " + q(dir / "run"));
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("nope.cfg") != std::string::npos);
}

TEST_CASE("config validation errors exit 1 with the offending line") {
  const fs::path dir = scratch("bad_cfg");
  spit(dir / "bad.cfg", "data.resolution = 8\ndata.banana = 3\n");
  const RunResult r =
      run_cli("gen-data --config " + q(dir / "bad.cfg") + " --out " + q(dir / "run"));
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("line 2") != std::string::npos);
  CHECK(r.output.find("data.banana") != std::string::npos);

  CHECK(run_cli("gen-data --set nonsense --out " + q(dir / "run2")).exit_code == 1);
  CHECK(run_cli("gen-data --set data.banana=3 --out " + q(dir / "run3")).exit_code == 1);
}

TEST_CASE("gen-data writes dataset, resolved config, and log") {
  const fs::path dir = scratch("gen");
  const fs::path cfg = write_tiny_config(dir);
  const fs::path out = dir / "run";
  const RunResult r = run_cli("gen-data --config " + q(cfg) + " --seed 7 --out " + q(out) +
                              " --set data.num_views=3");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(out / "dataset" / "manifest.txt"));
  CHECK(fs::exists(out / "log.txt"));

  // The echoed config reparses and carries both the file's and the flag's values.
  const RunConfig resolved = load_run_config((out / "resolved.cfg").string());
  CHECK(resolved.seed == 7);
  CHECK(resolved.train.seed == 7);
  CHECK(resolved.data.num_views == 3);        // --set wins over the file
  CHECK(resolved.data.num_classes == 2);      // from the file
  CHECK(resolved.out_dir == out.string());

  const std::string log = slurp(out / "log.txt");
  CHECK(log.find("command = gen-data") != std::string::npos);
  CHECK(log.find("seed = 7") != std::string::npos);
}

TEST_CASE("classify without a trained model exits 1 naming the checkpoint") {
  const fs::path dir = scratch("no_model");
  const fs::path cfg = write_tiny_config(dir);
  const fs::path out = dir / "run";
  REQUIRE(run_cli("gen-data --config " + q(cfg) + " --seed 3 --out " + q(out)).exit_code == 0);
  const RunResult r = run_cli("classify --config " + q(cfg) + " --seed 3 --out " + q(out));
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("model.vsem") != std::string::npos);
}

TEST_CASE("gen-data, train, classify pipeline is seed-deterministic") {
  const fs::path dir = scratch("pipeline");
  const fs::path cfg = write_tiny_config(dir);
  for (const char* leaf : {"a", "b"}) {
    const fs::path out = dir / leaf;
    REQUIRE(run_cli("gen-data --config " + q(cfg) + " --seed 11 --out " + q(out)).exit_code ==
            0);
    REQUIRE(run_cli("train --config " + q(cfg) + " --seed 11 --out " + q(out)).exit_code == 0);
    REQUIRE(run_cli("classify --config " + q(cfg) + " --seed 11 --out " + q(out)).exit_code ==
            0);
  }
  CHECK(slurp(dir / "a" / "model.vsem") == slurp(dir / "b" / "model.vsem"));
  CHECK(slurp(dir / "a" / "summary.csv") == slurp(dir / "b" / "summary.csv"));
  CHECK(slurp(dir / "a" / "confusion.csv") == slurp(dir / "b" / "confusion.csv"));
  CHECK(slurp(dir / "a" / "train_history.csv") == slurp(dir / "b" / "train_history.csv"));

  // Artifacts the rest of the suite reuses land under "a".
  SUBCASE("retrieve writes a ranked csv and voxel grids") {
    const fs::path out = dir / "a";
    const RunResult r =
        run_cli("retrieve --config " + q(cfg) + " --seed 11 --out " + q(out) + " --grids 2");
    CHECK(r.exit_code == 0);
    const std::string csv = slurp(out / "retrieval.csv");
    CHECK(csv.rfind("sample,class,instance,view,translation,iou\n", 0) == 0);
    int grids = 0;
    for (const auto& e : fs::directory_iterator(out))
      if (e.path().filename().string().rfind("retrieved_", 0) == 0) ++grids;
    CHECK(grids == 2);
  }

  SUBCASE("slam-sim writes world, em result, weights, and trajectory csvs") {
    const fs::path out = dir / "a";
    const RunResult r = run_cli("slam-sim --config " + q(cfg) + " --seed 11 --out " + q(out));
    CHECK(r.exit_code == 0);
    for (const char* f : {"world.txt", "em_result.txt", "weights.csv", "trajectory.csv",
                          "landmarks.csv", "nll.csv", "em_summary.csv"})
      CHECK(fs::exists(out / f));
    CHECK(slurp(out / "log.txt").find("nll_monotone = true") != std::string::npos);

    // export-metrics can re-export the saved EM artifacts elsewhere.
    const fs::path out2 = dir / "reexport";
    const RunResult r2 = run_cli(
        "export-metrics --config " + q(cfg) + " --seed 11 --out " + q(out2) + " --model " +
        q(out / "model.vsem") + " --data " + q(out / "dataset") + " --em-result " +
        q(out / "em_result.txt") + " --world " + q(out / "world.txt"));
    CHECK(r2.exit_code == 0);
    CHECK(slurp(out2 / "trajectory.csv") == slurp(out / "trajectory.csv"));
    CHECK(slurp(out2 / "summary.csv") == slurp(out / "summary.csv"));

    const RunResult half = run_cli("export-metrics --config " + q(cfg) + " --out " +
                                   q(dir / "half") + " --model " + q(out / "model.vsem") +
                                   " --data " + q(out / "dataset") + " --em-result " +
                                   q(out / "em_result.txt"));
    CHECK(half.exit_code == 1);
    CHECK(half.output.find("--world") != std::string::npos);
  }

  SUBCASE("a corrupted checkpoint is a runtime failure, exit 2") {
    const fs::path out = dir / "a";
    std::string bytes = slurp(out / "model.vsem");
    bytes[0] = 'X';
    spit(out / "model.vsem", bytes);
    const RunResult r = run_cli("classify --config " + q(cfg) + " --seed 11 --out " + q(out));
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("bad magic") != std::string::npos);
  }
}

TEST_CASE("grad-check passes on the fixed probe architecture") {
  const fs::path dir = scratch("gradcheck");
  const RunResult r = run_cli("grad-check --seed 5 --out " + q(dir / "run"));
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("PASS") != std::string::npos);
  CHECK(slurp(dir / "run" / "log.txt").find("result = PASS") != std::string::npos);
}

TEST_CASE("verify runs the oracle suites and exits 0") {
  const fs::path dir = scratch("verify");
  const RunResult r = run_cli("verify --seed 5 --out " + q(dir / "run"));
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("kl closed form vs monte carlo") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
  // Four suites, four PASS rows.
  size_t passes = 0;
  for (size_t at = r.output.find("PASS"); at != std::string::npos;
       at = r.output.find("PASS", at + 1))
    ++passes;
  CHECK(passes >= 4);
}

TEST_CASE("VOXSEM_THREADS must be a positive integer") {
  const fs::path dir = scratch("threads");
  CHECK(run_cli("gen-data --out " + q(dir / "r1") + " --set data.num_classes=2"
                " --set data.instances_per_class=1 --set data.num_views=1"
                " --set data.resolution=8 --set data.max_shift=0"
                " --set data.test_instances_per_class=0",
                "VOXSEM_THREADS=abc ")
            .exit_code == 1);
  const RunResult ok = run_cli("gen-data --out " + q(dir / "r2") + " --set data.num_classes=2"
                               " --set data.instances_per_class=1 --set data.num_views=1"
                               " --set data.resolution=8 --set data.max_shift=0"
                               " --set data.test_instances_per_class=0",
                               "VOXSEM_THREADS=2 ");
  CHECK(ok.exit_code == 0);
  CHECK(slurp(dir / "r2" / "log.txt").find("threads = 2") != std::string::npos);
}

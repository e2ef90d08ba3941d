// exercises the command-line binary end to end through a shell; the binary
// path arrives via FEL_CLI_PATH from the build system
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;
};

std::string cli_path() {
#ifdef FEL_CLI_PATH
  return FEL_CLI_PATH;
#else
  const char* p = std::getenv("FEL_CLI_PATH");
  REQUIRE_MESSAGE(p != nullptr, "FEL_CLI_PATH must point at the binary");
  return p;
#endif
}

std::string work_dir() {
  static const std::string dir = [] {
    std::string d = (std::filesystem::temp_directory_path() /
                     ("fel_cli_test_" + std::to_string(::getpid())))
                        .string();
    std::filesystem::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const std::string log = work_dir() + "/out_" + std::to_string(counter++);
  const std::string cmd =
      env + (env.empty() ? "" : " ") + "'" + cli_path() + "' " + args + " > '" +
      log + "' 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
  r.output = slurp(log);
  return r;
}

// one small archive reused by the training-facing cases
const std::string& shared_archive() {
  static const std::string path = [] {
    const std::string p = work_dir() + "/shared.feld";
    RunResult r = run("gen-data --out '" + p +
                      "' --size 16 --train 10 --val 5 --seed 7");
    REQUIRE(r.exit_code == 0);
    return p;
  }();
  return path;
}

const char* kTinyEnhancer =
    " --scale-mid 2 --scale-low 4 --channels 8 --blocks 2";

}  // namespace

TEST_CASE("help exits cleanly") {
  RunResult r = run("--help");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("gen-data") != std::string::npos);
  CHECK(r.output.find("ablate") != std::string::npos);
}

TEST_CASE("unknown subcommands and flags are usage errors") {
  CHECK(run("transmogrify").exit_code == 2);
  CHECK(run("params --downsample octree").exit_code == 2);
  CHECK(run("train").exit_code == 2);  // --data is required
}

TEST_CASE("params prints the closed-form count for the default config") {
  RunResult r = run("params");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("153264") != std::string::npos);
  // invalid width/block combination is rejected as usage
  CHECK(run("params --channels 10 --blocks 3").exit_code == 2);
}

TEST_CASE("gen-data honors the seed through flag and environment") {
  const std::string a = work_dir() + "/seed_flag.feld";
  const std::string b = work_dir() + "/seed_env.feld";
  const std::string c = work_dir() + "/seed_other.feld";
  CHECK(run("gen-data --out '" + a + "' --size 16 --train 6 --val 3 --seed 123")
            .exit_code == 0);
  CHECK(run("gen-data --out '" + b + "' --size 16 --train 6 --val 3",
            "FEL_SEED=123")
            .exit_code == 0);
  CHECK(run("gen-data --out '" + c + "' --size 16 --train 6 --val 3 --seed 9")
            .exit_code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a) != slurp(c));
}

TEST_CASE("train writes metrics and a checkpoint that eval can read") {
  const std::string out = work_dir() + "/run1";
  RunResult r = run("train --data '" + shared_archive() + "' --out '" + out +
                    "' --epochs 1 --batch 4" + kTinyEnhancer);
  CHECK(r.exit_code == 0);
  const std::string csv = slurp(out + "/metrics.csv");
  CHECK(csv.rfind("config,epoch,train_loss,val_loss,val_acc,seconds\n", 0) ==
        0);
  CHECK(std::filesystem::exists(out + "/final.felc"));

  RunResult ev = run("eval --data '" + shared_archive() + "' --checkpoint '" +
                     out + "/final.felc' --split both");
  CHECK(ev.exit_code == 0);
  CHECK(ev.output.find("val: loss=") != std::string::npos);
  CHECK(ev.output.find("train: loss=") != std::string::npos);
}

TEST_CASE("metrics are reproducible across identical invocations") {
  const std::string o1 = work_dir() + "/rep1";
  const std::string o2 = work_dir() + "/rep2";
  const std::string common = " --data '" + shared_archive() +
                             "' --epochs 1 --batch 4 --seed 11" + kTinyEnhancer;
  CHECK(run("train --out '" + o1 + "'" + common).exit_code == 0);
  CHECK(run("train --out '" + o2 + "'" + common).exit_code == 0);
  CHECK(slurp(o1 + "/metrics.csv") == slurp(o2 + "/metrics.csv"));
  CHECK(slurp(o1 + "/final.felc") == slurp(o2 + "/final.felc"));
}

TEST_CASE("train resumes from a checkpoint") {
  const std::string full = work_dir() + "/resume_full";
  const std::string part = work_dir() + "/resume_part";
  const std::string rest = work_dir() + "/resume_rest";
  const std::string common = " --data '" + shared_archive() +
                             "' --batch 4 --seed 5" + kTinyEnhancer;
  CHECK(run("train --out '" + full + "' --epochs 2" + common).exit_code == 0);
  CHECK(run("train --out '" + part + "' --epochs 1" + common).exit_code == 0);
  CHECK(run("train --out '" + rest + "' --epochs 2 --resume '" + part +
            "/final.felc'" + common)
            .exit_code == 0);
  CHECK(slurp(full + "/final.felc") == slurp(rest + "/final.felc"));

  // resuming a finished run is a runtime failure, not a crash
  RunResult done = run("train --out '" + rest + "_again' --epochs 1 --resume '" +
                       full + "/final.felc'" + common);
  CHECK(done.exit_code == 1);
}

TEST_CASE("missing files surface as runtime errors") {
  CHECK(run("train --data /nonexistent.feld --epochs 1").exit_code == 1);
  CHECK(run("eval --data '" + shared_archive() +
            "' --checkpoint /nonexistent.felc")
            .exit_code == 1);
}

TEST_CASE("gradcheck subcommand passes on a tiny configuration") {
  RunResult r = run(
      "gradcheck --size 8 --seed 5 --scale-mid 2 --scale-low 4 --channels 4 "
      "--blocks 2");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("gradient check passed") != std::string::npos);
}

TEST_CASE("visualize writes a ppm pair") {
  const std::string out = work_dir() + "/viz";
  RunResult r = run("visualize --data '" + shared_archive() + "' --out '" +
                    out + "' --index 2" + kTinyEnhancer);
  CHECK(r.exit_code == 0);
  CHECK(std::filesystem::exists(out + "/input_val_2.ppm"));
  CHECK(std::filesystem::exists(out + "/enhanced_val_2.ppm"));
  CHECK(run("visualize --data '" + shared_archive() + "' --index 99" +
            std::string(kTinyEnhancer))
            .exit_code == 2);
  CHECK(run("visualize --data '" + shared_archive() +
            "' --projection none --index 0" + std::string(kTinyEnhancer))
            .exit_code == 2);
}

TEST_CASE("ablate runs a single axis end to end") {
  const std::string out = work_dir() + "/ablation";
  RunResult r = run(
      "ablate --grid aggregation --out '" + out +
      "' --size 8 --train-count 6 --val-count 3 --epochs 1 --batch 3" +
      " --scale-mid 2 --scale-low 4 --channels 8 --blocks 2");
  CHECK(r.exit_code == 0);
  const std::string csv = slurp(out + "/ablation_aggregation.csv");
  CHECK(csv.rfind("config,epoch", 0) == 0);
  CHECK(csv.find("safa") != std::string::npos);
  CHECK(run("ablate --grid sideways").exit_code == 2);
}

TEST_CASE("config files supply defaults that flags override") {
  const std::string cfg = work_dir() + "/gen.cfg";
  {
    std::ofstream f(cfg);
    f << "size=16\ntrain=6\nval=3\nseed=123\n";
  }
  const std::string a = work_dir() + "/from_config.feld";
  const std::string b = work_dir() + "/flag_wins.feld";
  CHECK(run("gen-data --out '" + a + "' --config '" + cfg + "'").exit_code ==
        0);
  CHECK(slurp(a) == slurp(work_dir() + "/seed_flag.feld"));
  CHECK(run("gen-data --out '" + b + "' --config '" + cfg + "' --seed 9")
            .exit_code == 0);
  CHECK(slurp(b) == slurp(work_dir() + "/seed_other.feld"));
}

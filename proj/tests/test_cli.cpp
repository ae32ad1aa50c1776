#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

std::string read_all(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          (std::string("mrfnet_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  Outcome run(const std::string& args) const {
    const std::string cmd = std::string("\"") + MRFNET_CLI_PATH + "\" " + args + " >\"" + (dir / "stdout").string() +
                            "\" 2>\"" + (dir / "stderr").string() + "\"";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_all(dir / "stdout"), read_all(dir / "stderr")};
  }

  std::string p(const std::string& name) const { return "\"" + (dir / name).string() + "\""; }

  // Small synthetic dataset plus a one-epoch linear model.
  void make_model() const {
    ASSERT_EQ(run("synth --out " + p("data") + " --grid 6 --n 2 --n-test 2 --gibbs-sweeps 2").code, 0);
    ASSERT_EQ(run("train --dataset " + p("data/manifest.json") + " --out " + p("m.mrf") + " --epochs 1").code, 0);
  }

  fs::path dir;
};

const std::regex kErrorLine(R"(^error: category=[a-z_]+ message=[^\n]+\n$)");

}  // namespace

TEST_F(Cli, HelpSucceeds) {
  const Outcome r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("synth"), std::string::npos);
  EXPECT_EQ(run("train --help").code, 0);
}

TEST_F(Cli, UsageErrors) {
  for (const char* args : {"", "nosuch", "oracle-check --bogus", "synth", "train --dataset x --out y --mode sideways"}) {
    const Outcome r = run(args);
    EXPECT_EQ(r.code, 2) << args;
    EXPECT_TRUE(std::regex_match(r.err, kErrorLine)) << r.err;
    EXPECT_EQ(r.err.rfind("error: category=usage ", 0), 0u) << r.err;
  }
}

TEST_F(Cli, MissingFileIsAnIoError) {
  const Outcome r = run("apply --model " + p("absent.mrf") + " --input a --out b");
  EXPECT_EQ(r.code, 3);
  EXPECT_TRUE(std::regex_match(r.err, kErrorLine)) << r.err;
  EXPECT_NE(r.err.find("category=io"), std::string::npos);
}

TEST_F(Cli, CorruptModelIsAFormatError) {
  std::ofstream(dir / "junk.mrf") << "MRFMxxxx";
  const Outcome r = run("apply --model " + p("junk.mrf") + " --input a --out b");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("category=format"), std::string::npos);
  EXPECT_NE(r.err.find("offset"), std::string::npos) << r.err;
}

TEST_F(Cli, ContractViolations) {
  make_model();
  const std::string input = p("data/test/test_0000_r.mrft");
  const Outcome r = run("apply --model " + p("m.mrf") + " --input " + input + " --out " + p("o.mrft"));
  EXPECT_EQ(r.code, 5) << r.err;
  EXPECT_NE(r.err.find("category=contract"), std::string::npos);
  // Postprocess override needs no log-likelihood field.
  EXPECT_EQ(run("apply --model " + p("m.mrf") + " --input " + input + " --out " + p("o.mrft") + " --mode postprocess")
                .code,
            0);
  EXPECT_TRUE(fs::exists(dir / "o.mrft"));
}

TEST_F(Cli, ConfigErrors) {
  make_model();
  const Outcome r = run("train --dataset " + p("data/manifest.json") + " --out " + p("x.mrf") + " --lr -1");
  EXPECT_EQ(r.code, 6);
  EXPECT_NE(r.err.find("category=config"), std::string::npos);
  std::ofstream(dir / "bad.cfg") << "no_such_key = 1\n";
  EXPECT_EQ(run("--config " + p("bad.cfg") + " oracle-check").code, 6);
  std::ofstream(dir / "missing_eq.cfg") << "instances\n";
  EXPECT_EQ(run("--config " + p("missing_eq.cfg") + " oracle-check").code, 6);
}

TEST_F(Cli, FailedCheckExitCode) {
  const Outcome r = run("oracle-check --instances 3 --tol -1");
  EXPECT_EQ(r.code, 7);
  EXPECT_NE(r.err.find("category=check_failed"), std::string::npos);
  EXPECT_EQ(run("oracle-check --instances 3").code, 0);
}

TEST_F(Cli, ConfigFileValuesYieldToExplicitFlags) {
  std::ofstream(dir / "run.cfg") << "# scoped to one subcommand\noracle-check.instances = 3\nthreads = 1\n";
  Outcome r = run("--config " + p("run.cfg") + " oracle-check");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("instances=3 "), std::string::npos) << r.out;
  r = run("--config " + p("run.cfg") + " oracle-check --instances 4");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("instances=4 "), std::string::npos) << r.out;
}

TEST_F(Cli, ConvertWritesReadableTensors) {
  std::ofstream(dir / "g.csv") << "0,1\n1,0\n";
  ASSERT_EQ(run("convert --csv " + p("g.csv") + " --out " + p("l.mrft") + " --labels").code, 0);
  EXPECT_EQ(fs::file_size(dir / "l.mrft"), 4u + 4 + 1 + 1 + 2 * 8 + 4 * 4);
}

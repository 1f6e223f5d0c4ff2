#include <advrsa/config.hpp>
#include <advrsa/io.hpp>
#include <advrsa/matrix_io.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <json.hpp>

using namespace advrsa;
namespace fs = std::filesystem;

TEST(Config, DefaultsAndOverrides) {
  const RunConfig c = RunConfig::parse("# comment\nseed = 9\n\n synth.ai.lambda=0.2 # trailing\n", "t.conf");
  EXPECT_EQ(c.u64("seed"), 9u);
  EXPECT_DOUBLE_EQ(c.real("synth.ai.lambda"), 0.2);
  EXPECT_EQ(c.str("rsa.metric"), "correlation");
  EXPECT_EQ(c.reals("rsa.ci_levels"), (std::vector<double>{0.68, 0.95}));
  EXPECT_TRUE(c.flag("encode.standardize"));
}

TEST(Config, ErrorsNameTheLine) {
  try {
    RunConfig::parse("seed = 1\nbogus.key = 3\n", "t.conf");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("t.conf:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus.key"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::parse("seed 1\n"), ConfigError);
  const RunConfig bad = RunConfig::parse("seed = -3\nrsa.n_perm = x\nencode.standardize = maybe\n");
  EXPECT_THROW(bad.u64("seed"), ConfigError);
  EXPECT_THROW(bad.real("rsa.n_perm"), ConfigError);
  EXPECT_THROW(bad.flag("encode.standardize"), ConfigError);
}

TEST(Config, HashDependsOnlyOnSelectedPrefixes) {
  RunConfig a, b;
  b.set("rsa.n_perm", "77");
  EXPECT_EQ(a.hash({"data", "train"}), b.hash({"data", "train"}));
  EXPECT_NE(a.hash({"rsa"}), b.hash({"rsa"}));
}

TEST(Config, ResolvedIsSortedAndComplete) {
  const std::string r = RunConfig{}.resolved();
  EXPECT_EQ(static_cast<std::size_t>(std::count(r.begin(), r.end(), '\n')), config_defaults().size());
  EXPECT_LT(r.find("data.classes"), r.find("seed ="));
}

namespace {

struct Cli {
  fs::path dir = fs::temp_directory_path() / ("advrsa_cli_" + std::to_string(::getpid()));
  std::string last_output;

  Cli() {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Cli() { fs::remove_all(dir); }

  // tiny problem so every stage finishes in seconds
  static std::string small() {
    return " --set data.classes=2 --set data.train_per_class=40 --set data.val_per_class=10"
           " --set train.epochs=3 --set stimuli.count=2 --set stimuli.threshold=0.0";
  }

  int run(const std::string& args) {
    const fs::path log = dir / "log.txt";
    const std::string cmd = std::string(ADVRSA_CLI_PATH) + " " + args + " --out " + (dir / "run").string() + " > " +
                            log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    last_output = fs::exists(log) ? read_text_file(log) : std::string{};
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
};

}  // namespace

TEST(CliExit, MissingUpstreamNamesTheCommand) {
  Cli cli;
  EXPECT_EQ(cli.run("train" + Cli::small()), 2) << cli.last_output;
  EXPECT_NE(cli.last_output.find("advrsa gen-data"), std::string::npos) << cli.last_output;
}

TEST(CliExit, HashMismatchAndValidationFailure) {
  Cli cli;
  ASSERT_EQ(cli.run("gen-data" + Cli::small()), 0) << cli.last_output;
  const auto stamp = nlohmann::json::parse(read_text_file(cli.dir / "run" / "gen-data" / "stage.json"));
  EXPECT_EQ(stamp.at("stage"), "gen-data");
  EXPECT_TRUE(stamp.at("validations_passed").get<bool>());
  EXPECT_EQ(cli.run("train" + Cli::small() + " --set data.noise_sd=0.05"), 3) << cli.last_output;
  EXPECT_NE(cli.last_output.find("mismatch"), std::string::npos);
  ASSERT_EQ(cli.run("train" + Cli::small()), 0) << cli.last_output;
  ASSERT_EQ(cli.run("select-re" + Cli::small()), 0) << cli.last_output;

  // external responses are put into manifest order, and bad cells are refused
  write_text_file(cli.dir / "resp.csv", "stimulus,v1,v2\ns001,3,4.5\ns000,1,2\n");
  ASSERT_EQ(cli.run("ingest " + (cli.dir / "resp.csv").string() + " --name roi" + Cli::small()), 0) << cli.last_output;
  const ActivationMatrix m = read_matrix(cli.dir / "run" / "ingest" / "roi.advmat");
  EXPECT_EQ(m.stimulus_ids, (std::vector<std::string>{"s000", "s001"}));
  EXPECT_EQ(m.values, (std::vector<double>{1, 2, 3, 4.5}));
  write_text_file(cli.dir / "bad.csv", "stimulus,v1\ns000,1\ns001,nan\n");
  EXPECT_EQ(cli.run("ingest " + (cli.dir / "bad.csv").string() + Cli::small()), 1);
  EXPECT_NE(cli.last_output.find("s001"), std::string::npos) << cli.last_output;
  write_text_file(cli.dir / "short.csv", "stimulus,v1\ns000,1\n");
  EXPECT_EQ(cli.run("ingest " + (cli.dir / "short.csv").string() + Cli::small()), 1);

  EXPECT_EQ(cli.run("synth" + Cli::small() + " --set synth.max_iterations=0"), 4) << cli.last_output;
  EXPECT_FALSE(nlohmann::json::parse(read_text_file(cli.dir / "run" / "synth" / "stage.json"))
                   .at("validations_passed")
                   .get<bool>());
}

TEST(CliExit, BadInputsFail) {
  Cli cli;
  EXPECT_EQ(cli.run("gen-data --set no.such.key=1"), 1);
  EXPECT_NE(cli.last_output.find("no.such.key"), std::string::npos) << cli.last_output;
  EXPECT_EQ(cli.run("frobnicate"), 1);
  write_text_file(cli.dir / "resp.csv", "stimulus,v1\ns000,1\n");
  EXPECT_EQ(cli.run("ingest " + (cli.dir / "resp.csv").string()), 2);
}

TEST(CliRsa, DirectFileMode) {
  Cli cli;
  std::string re = "stimulus,a,b,c\n", an = re, ai = re;
  const char* rows[] = {"s1", "s2", "s3", "s4", "s5"};
  for (int i = 0; i < 5; ++i) {
    re += std::string(rows[i]) + "," + std::to_string(i) + "," + std::to_string(i * i) + "," + std::to_string(7 - i) + "\n";
    ai += std::string(rows[i]) + "," + std::to_string(i) + "," + std::to_string(i * i) + "," + std::to_string(7 - i) + "\n";
    an += std::string(rows[i]) + "," + std::to_string((i * 3) % 5) + ",1," + std::to_string(i % 2) + "\n";
  }
  write_text_file(cli.dir / "re.csv", re);
  write_text_file(cli.dir / "an.csv", an);
  write_text_file(cli.dir / "ai.csv", ai);
  ASSERT_EQ(cli.run("rsa --set rsa.n_perm=100 --set rsa.n_boot=100 --re " + (cli.dir / "re.csv").string() + " --an " +
                    (cli.dir / "an.csv").string() + " --ai " + (cli.dir / "ai.csv").string()),
            0)
      << cli.last_output;
  const std::string sim = read_text_file(cli.dir / "run" / "rsa" / "similarity.csv");
  EXPECT_TRUE(sim.starts_with("# advrsa-version="));
}

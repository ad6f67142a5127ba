#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = METAFIT_CLI_PATH;
const std::string kData = METAFIT_SOURCE_DATA_DIR;

struct Run {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("metafit_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run run(const std::string& args) {
  const fs::path o = scratch() / "stdout.txt", e = scratch() / "stderr.txt";
  const std::string cmd = kCli + " " + args + " >" + o.string() + " 2>" + e.string();
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(o), slurp(e)};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

}  // namespace

TEST(Cli, MissingMatrixBinding) {
  auto r = run("fit --data " + kData + "/bcg_long.csv --formula 'yi ~ group + (0 + group|study) + equalto(0 + obs|g, V)' "
               "--dispformula '~0'");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("matrix V unbound"), std::string::npos) << r.err;
}

TEST(Cli, BinomialRejectsDispformula) {
  auto r = run("fit --family binomial --data " + kData + "/bcg_arms.csv --formula 'events ~ arm + (1|trial)' "
               "--treatment-label vaccinated --dispformula '~0'");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("gaussian family only"), std::string::npos) << r.err;
}

TEST(Cli, BinomialOneStageFit) {
  auto r = run("fit --family binomial --data " + kData + "/bcg_arms.csv --formula 'events ~ arm + (1|trial)' "
               "--treatment-label vaccinated");
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["family"], "binomial");
  EXPECT_LT(j["fixed_effects"].back()["estimate"].get<double>(), 0.0);  // vaccination lowers risk
}

TEST(Cli, GaussianFitWithVcvBinding) {
  const fs::path v = scratch() / "V.csv";
  auto vc = run("vcalc --data " + kData + "/bcg_long.csv --rho 0 --obs obs --out " + v.string());
  ASSERT_EQ(vc.code, 0) << vc.err;
  auto r = run("fit --data " + kData + "/bcg_long.csv --formula 'yi ~ group + (0 + group|study) + equalto(0 + obs|g, V)' "
               "--dispformula '~0' --vcv V=" + v.string() + " --exact");
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["converged"].get<bool>());
  EXPECT_EQ(j["fixed_effects"].size(), 2u);
}

TEST(Cli, VcalcOutputs) {
  auto zero = run("vcalc --data " + kData + "/assink2016_head.csv --rho 0 --obs id");
  ASSERT_EQ(zero.code, 0) << zero.err;
  std::istringstream in(zero.out);
  std::string line;
  std::getline(in, line);
  int row = 0;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    for (int col = 0; std::getline(ls, cell, ','); ++col)
      if (col != row) EXPECT_EQ(std::stod(cell), 0.0);
    ++row;
  }
  EXPECT_EQ(row, 8);
  EXPECT_EQ(run("vcalc --data " + kData + "/assink2016_head.csv --rho 0.6 --cluster nosuch").code, 1);
  EXPECT_EQ(run("vcalc --data " + kData + "/assink2016_head.csv --rho 1").code, 1);
  auto a = run("vcalc --data " + kData + "/assink2016_head.csv --rho 0.6 --obs id");
  auto b = run("vcalc --data " + kData + "/assink2016_head.csv --rho 0.6 --obs id");
  EXPECT_EQ(a.out, b.out);
}

TEST(Cli, EscalcOddsRatio) {
  const fs::path p = scratch() / "or.csv";
  write(p, "study,ai,bi,ci,di\nA,10,10,10,10\nB,5,15,10,10\n");
  auto r = run("escalc --measure lnOR --data " + p.string() + " --study-col study");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.substr(0, 21), "study,yi,vi\nA,0,0.4\nB");
}

TEST(Cli, SimulateIsDeterministic) {
  const std::string base = "simulate --measure SMD --k 30 --tau2 0.1 --mu 0.5 --reps 200 --seed 7 --threads 1 --out-prefix ";
  const fs::path a = scratch() / "simA", b = scratch() / "simB";
  ASSERT_EQ(run(base + a.string()).code, 0);
  ASSERT_EQ(run(base + b.string()).code, 0);
  EXPECT_EQ(slurp(a.string() + ".csv"), slurp(b.string() + ".csv"));
  EXPECT_EQ(slurp(a.string() + ".json"), slurp(b.string() + ".json"));
  EXPECT_TRUE(fs::exists(a.string() + ".timing.csv"));
}

TEST(Cli, SimulateRejectsZeroReps) {
  EXPECT_EQ(run("simulate --measure SMD --reps 0 --out-prefix " + (scratch() / "z").string()).code, 1);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("fit --formula 'yi ~ 1'").code, 1);
  EXPECT_EQ(run("fit --data /nonexistent.csv --formula 'yi ~ 1'").code, 1);
  EXPECT_EQ(run("fit --data " + kData + "/bcg_long.csv --formula 'yi ~'").code, 1);
}

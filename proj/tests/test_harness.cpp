#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "psgd/harness.hpp"

namespace fs = std::filesystem;
using namespace psgd;

namespace {

const char* kSmall = R"(
[problem]
kind = "logistic"
d_x = 4
n_train = 512
n_heldout = 128

[strategy]
kind = "sc_psgd"
learners = 4
batch = 64

[run]
epochs = 3
)";

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("psgd_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string read(const fs::path& p) { return slurp(p); }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Config, Defaults) {
  const auto c = parse_config("[problem]\nkind = \"logistic\"\n[strategy]\nkind = \"sync_central\"\n");
  EXPECT_EQ(c, ExperimentConfig{});
  EXPECT_EQ(c.epochs, 16u);
  EXPECT_EQ(c.schedule, LrSchedule::baseline());
  EXPECT_EQ(c.backend, Backend::Simulate);
}

TEST(Config, RequiredKeys) {
  EXPECT_THROW(parse_config("[problem]\nkind = \"logistic\"\n"), ConfigError);
  EXPECT_THROW(parse_config("[strategy]\nkind = \"sc_psgd\"\n"), ConfigError);
}

TEST(Config, UnknownKeyNamed) {
  try {
    parse_config(std::string(kSmall) + "[cost]\nbandwith = 3\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bandwith"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config(std::string(kSmall) + "[bogus]\nx = 1\n"), ConfigError);
}

TEST(Config, TypeErrors) {
  EXPECT_THROW(parse_config(kSmall, {{"strategy.learners", "\"four\""}}), ConfigError);
  EXPECT_THROW(parse_config(kSmall, {{"strategy.learners", "-4"}}), ConfigError);
  EXPECT_THROW(parse_config(kSmall, {{"strategy.kind", "\"gossip\""}}), ConfigError);
}

TEST(Config, RingOfTwoRejected) {
  try {
    parse_config(kSmall, {{"strategy.kind", "\"sd_psgd\""}, {"strategy.learners", "2"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("L >= 3"), std::string::npos) << e.what();
  }
}

TEST(Config, LocalBatch) {
  const auto c = parse_config(kSmall, {{"strategy.learners", "16"}, {"strategy.batch", "2560"}, {"problem.n_train", "25600"}});
  EXPECT_EQ(c.strategy.local_batch(), 160u);
  EXPECT_THROW(parse_config(kSmall, {{"strategy.learners", "16"}, {"strategy.batch", "2500"}}), ConfigError);
}

TEST(Config, PresetThenOverrides) {
  const auto c = parse_config(std::string(kSmall) + "[cost]\npreset = \"p100_nccl\"\nslowdown = [1, 1, 10]\n");
  CostModel want = CostModel::p100_nccl();
  want.slowdown = {1, 1, 10};
  EXPECT_EQ(c.cost, want);
}

TEST(Config, ManifestRoundTrip) {
  auto c = parse_config(std::string(kSmall) +
                        "[cost]\npreset = \"p100_openmpi\"\njitter = 0.25\nslowdown = [2.5]\n"
                        "[schedule]\nkind = \"warmup_anneal\"\npeak = 0.3\n");
  c.output = "somewhere/else";
  c.problem.hidden = {5, 7};
  const auto back = parse_config(manifest_text(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(manifest_text(back), manifest_text(c));

  auto sd = parse_config(kSmall, {{"strategy.kind", "\"sd_psgd\""},
                                  {"strategy.mixing", "[[0.5,0.5,0,0],[0.5,0.5,0,0],[0,0,0.5,0.5],[0,0,0.5,0.5]]"}});
  ASSERT_TRUE(sd.mixing.has_value());
  EXPECT_EQ(parse_config(manifest_text(sd)), sd);
}

TEST(Config, MixingRequiresSdPsgd) {
  EXPECT_THROW(parse_config(kSmall, {{"strategy.mixing", "[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]"}}), ConfigError);
}

TEST(RunExperiment, BaselineSchedule) {
  const auto dir = scratch("baseline");
  const auto c = parse_config(kSmall, {{"strategy.kind", "\"sync_central\""}, {"strategy.learners", "1"},
                                       {"strategy.batch", "32"}, {"run.epochs", "16"}});
  run_experiment(c, dir);
  std::istringstream metrics(read(dir / "metrics.csv"));
  std::string line;
  std::getline(metrics, line);
  EXPECT_EQ(line, "epoch,seconds,heldout_loss,lr");
  int rows = 0;
  while (std::getline(metrics, line)) {
    const auto lr = std::stod(line.substr(line.rfind(',') + 1));
    if (rows < 10) EXPECT_EQ(lr, 0.1) << rows;
    else EXPECT_LT(lr, 0.1) << rows;
    ++rows;
  }
  EXPECT_EQ(rows, 16);
  fs::remove_all(dir);
}

TEST(RunExperiment, ReproducibleBytes) {
  for (const char* kind : {"\"ad_psgd\"", "\"async_central\"", "\"sd_psgd\""}) {
    const auto a = scratch("rep_a"), b = scratch("rep_b");
    const auto c = parse_config(kSmall, {{"strategy.kind", kind}, {"cost.preset", "\"p100_nccl\""}});
    run_experiment(c, a);
    run_experiment(c, b);
    for (const char* f : {"manifest.ini", "metrics.csv", "workload.csv", "staleness.csv"}) {
      EXPECT_EQ(read(a / f), read(b / f)) << kind << " " << f;
    }
    fs::remove_all(a);
    fs::remove_all(b);
  }
}

TEST(RunExperiment, OutputFiles) {
  const auto dir = scratch("files");
  run_experiment(parse_config(kSmall), dir);
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
  EXPECT_EQ(names, (std::set<std::string>{"manifest.ini", "metrics.csv", "staleness.csv", "workload.csv"}));
  EXPECT_EQ(read(dir / "staleness.csv"), "tau,count\n");
  EXPECT_EQ(count_lines(read(dir / "workload.csv")), 5u);
  EXPECT_EQ(read(dir / "manifest.ini").rfind("# psgd-lab 1.0.0\n# seed 1\n", 0), 0u);

  const auto async_dir = scratch("files_async");
  run_experiment(parse_config(kSmall, {{"strategy.kind", "\"async_central\""}}), async_dir);
  EXPECT_GT(count_lines(read(async_dir / "staleness.csv")), 1u);
  fs::remove_all(dir);
  fs::remove_all(async_dir);
}

TEST(Sweep, WritesPointsAndSummary) {
  const auto root = scratch("sweep");
  const auto rows = sweep(kSmall, {{"cost.preset", "\"zero_comm\""}}, "strategy.learners", {"1", "4", "8"}, root);
  ASSERT_EQ(rows.size(), 3u);
  for (const char* v : {"1", "4", "8"}) EXPECT_TRUE(fs::exists(root / (std::string("strategy.learners=") + v) / "metrics.csv"));
  const auto csv = read(root / "speedup.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "value,strategy,learners,total_seconds,baseline_seconds,speedup,final_heldout_loss");
  EXPECT_EQ(count_lines(csv), 4u);
  EXPECT_NEAR(rows[0].result.speedup, 1.0, 1e-12);
  EXPECT_NEAR(rows[1].result.speedup, 4.0, 1e-9);
  EXPECT_NEAR(rows[2].result.speedup, 8.0, 1e-9);
  fs::remove_all(root);
}

TEST(Sweep, ValidatesEveryPointFirst) {
  const auto root = scratch("sweep_bad");
  EXPECT_THROW(sweep(kSmall, {}, "strategy.learners", {"4", "3"}, root), ConfigError);
  EXPECT_FALSE(fs::exists(root));
}

TEST(Validate, CleanConfigPasses) {
  const auto rep = validate(kSmall);
  EXPECT_TRUE(rep.passed()) << rep.text();
  EXPECT_GE(rep.gradient_error, 0.0);
  EXPECT_LT(rep.gradient_error, kGradientTolerance);
  const auto mlp = validate(kSmall, {{"problem.kind", "\"mlp\""}, {"problem.d_y", "3"}});
  EXPECT_TRUE(mlp.passed()) << mlp.text();
}

TEST(Validate, NonStochasticMixingNamesColumn) {
  const auto rep = validate(kSmall, {{"strategy.kind", "\"sd_psgd\""},
                                     {"strategy.mixing", "[[0.5,0.5,0,0],[0.5,0.5,0,0],[0,0,0.5,0.5],[0,0.5,0,0.5]]"}});
  EXPECT_FALSE(rep.passed());
  const auto text = rep.text();
  EXPECT_NE(text.find("FAIL mixing"), std::string::npos) << text;
  EXPECT_NE(text.find("column 1"), std::string::npos) << text;
  EXPECT_NE(text.find("0.5"), std::string::npos) << text;
}

TEST(Validate, ReportsEveryFailure) {
  const auto rep = validate(kSmall, {{"strategy.kind", "\"ad_psgd\""}, {"strategy.learners", "2"}, {"strategy.batch", "63"}});
  const auto text = rep.text();
  EXPECT_NE(text.find("FAIL topology"), std::string::npos) << text;
  EXPECT_NE(text.find("FAIL divisibility"), std::string::npos) << text;
}

TEST(Dataset, FileRoundTrip) {
  const auto dir = scratch("data");
  fs::create_directories(dir);
  const auto ds = generate(ProblemKind::MlpSoftmax, 4, 100, 20, 5, 3);
  write_dataset(ds, dir / "d.bin");
  EXPECT_EQ(read_dataset(dir / "d.bin"), ds);
  fs::resize_file(dir / "d.bin", fs::file_size(dir / "d.bin") - 3);
  EXPECT_THROW(read_dataset(dir / "d.bin"), Error);

  std::ostringstream csv;
  export_dataset_csv(ds, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "split,label,x0,x1,x2,x3,x4");
  EXPECT_EQ(count_lines(csv.str()), 121u);

  // a config that reads the file trains on the same data
  const auto c = parse_config(kSmall, {{"problem.kind", "\"mlp\""},
                                       {"problem.d_x", "5"},
                                       {"problem.d_y", "3"},
                                       {"problem.dataset", "\"" + (dir / "x.bin").string() + "\""},
                                       {"problem.n_train", "100"},
                                       {"strategy.batch", "20"}});
  write_dataset(ds, dir / "x.bin");
  EXPECT_EQ(load_workload(c).dataset, ds);
  fs::remove_all(dir);
}

#ifdef PSGD_CLI
namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string(PSGD_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  {
    std::ofstream(dir / "ok.ini") << kSmall;
    std::ofstream(dir / "bad.ini") << kSmall << "[strategy]\nfoo = 1\n";
    std::ofstream(dir / "ring2.ini") << "[problem]\nkind = \"logistic\"\n[strategy]\nkind = \"sd_psgd\"\nlearners = 2\nbatch = 64\n";
  }
  EXPECT_EQ(cli("validate " + (dir / "ok.ini").string()), 0);
  EXPECT_EQ(cli("validate " + (dir / "ring2.ini").string()), 1);
  EXPECT_EQ(cli("run " + (dir / "ok.ini").string() + " --output " + (dir / "out").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "metrics.csv"));
  EXPECT_EQ(cli("run " + (dir / "bad.ini").string() + " --output " + (dir / "out2").string()), 1);
  EXPECT_EQ(cli("run " + (dir / "ring2.ini").string() + " --output " + (dir / "out3").string()), 1);
  EXPECT_EQ(cli("run " + (dir / "missing.ini").string()), 1);
  EXPECT_EQ(cli("sweep " + (dir / "ok.ini").string() + " --vary strategy.learners=2,4 --output " +
                (dir / "sw").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "sw" / "speedup.csv"));
  EXPECT_EQ(cli("dataset gen --kind logistic --d-x 3 --n-train 10 --n-heldout 4 --out " + (dir / "g.bin").string()), 0);
  EXPECT_EQ(cli("dataset export " + (dir / "g.bin").string() + " --out " + (dir / "g.csv").string()), 0);
  EXPECT_EQ(count_lines(read(dir / "g.csv")), 15u);
  fs::remove_all(dir);
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto dir = scratch("cli_env");
  fs::create_directories(dir);
  std::ofstream(dir / "envcfg.ini") << kSmall;
  const std::string cmd = "PSGD_OUTPUT_ROOT=" + (dir / "root").string() + " " + PSGD_CLI + " run " +
                          (dir / "envcfg.ini").string() + " >/dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir / "root" / "envcfg" / "metrics.csv"));
  fs::remove_all(dir);
}

#ifdef PSGD_CONFIG_DIR
TEST(Cli, ShippedConfigsValidate) {
  int seen = 0;
  for (const auto& e : fs::directory_iterator(PSGD_CONFIG_DIR)) {
    if (e.path().extension() != ".ini") continue;
    EXPECT_EQ(cli("validate " + e.path().string()), 0) << e.path();
    ++seen;
  }
  EXPECT_GT(seen, 0);
}
#endif
#endif

TEST(Config, ScheduleKindStartsFromItsRecipe) {
  const auto w = parse_config(kSmall, {{"schedule.kind", "\"warmup_anneal\""}, {"schedule.peak", "0.2"}});
  LrSchedule want = LrSchedule::warmup();
  want.peak = 0.2;
  EXPECT_EQ(w.schedule, want);
  const auto c = parse_config(kSmall, {{"schedule.kind", "\"constant\""}, {"schedule.alpha0", "0.05"}});
  EXPECT_EQ(lr_at(c.schedule, 40), 0.05);
}

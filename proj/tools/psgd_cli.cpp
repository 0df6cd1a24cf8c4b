// psgd: run, sweep and validate data-parallel SGD experiments.
//
//   psgd run <config> [--output DIR] [--seed N] [--backend simulate|threaded]
//   psgd sweep <config> --vary section.key=v1,v2,... [--output DIR]
//   psgd validate <config>
//   psgd dataset gen --kind K --out FILE [...]
//   psgd dataset export FILE [--out CSV]
//
// Exit status: 0 success, 1 validation failure, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "psgd/psgd.hpp"

namespace fs = std::filesystem;
using namespace psgd;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

fs::path output_root() {
  const char* env = std::getenv("PSGD_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_output(const std::string& flag, const ExperimentConfig& c, const fs::path& config_path) {
  if (!flag.empty()) return flag;
  if (!c.output.empty()) return c.output;
  return output_root() / config_path.stem();
}

Overrides run_overrides(std::optional<std::uint64_t> seed, const std::string& backend) {
  Overrides o;
  if (seed) o.emplace_back("run.seed", std::to_string(*seed));
  if (!backend.empty()) o.emplace_back("run.backend", backend);
  return o;
}

void print_summary(const RunResult& r, const fs::path& dir) {
  std::printf("epochs %zu  total %.6g s (%s)  speedup %.4g  final heldout loss %.6g\n", r.epoch_seconds.size(),
              r.total_seconds, r.virtual_time ? "virtual" : "wall", r.speedup, r.heldout_loss.back());
  std::printf("wrote %s\n", dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-parallel SGD laboratory"};
  app.require_subcommand(1);

  std::string config_path, output, backend, vary;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output", output, "Output directory");
  run->add_option("--seed", seed, "Override run.seed");
  run->add_option("--backend", backend, "Override run.backend")->check(CLI::IsMember({"simulate", "threaded"}));

  auto* sw = app.add_subcommand("sweep", "Run a config over several values of one key");
  sw->add_option("config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  sw->add_option("--vary", vary, "section.key=v1,v2,...")->required();
  sw->add_option("-o,--output", output, "Output root");
  sw->add_option("--seed", seed, "Override run.seed");
  sw->add_option("--backend", backend, "Override run.backend")->check(CLI::IsMember({"simulate", "threaded"}));

  auto* val = app.add_subcommand("validate", "Check a config without training");
  val->add_option("config", config_path, "Config file")->required()->check(CLI::ExistingFile);

  auto* ds = app.add_subcommand("dataset", "Generate or export dataset files");
  ds->require_subcommand(1);
  std::string kind = "logistic", ds_out, ds_in;
  std::size_t d_x = 8, d_y = 2, n_train = 4096, n_heldout = 1024;
  std::uint64_t ds_seed = 1;
  double separation = 4.0;
  auto* gen = ds->add_subcommand("gen", "Write a synthetic dataset");
  gen->add_option("--kind", kind, "quadratic|logistic|mlp")->check(CLI::IsMember({"quadratic", "logistic", "mlp"}));
  gen->add_option("--d-x", d_x);
  gen->add_option("--d-y", d_y);
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-heldout", n_heldout);
  gen->add_option("--seed", ds_seed);
  gen->add_option("--separation", separation);
  gen->add_option("-o,--out", ds_out, "Dataset file")->required();
  auto* exp = ds->add_subcommand("export", "Dump a dataset file as CSV");
  exp->add_option("file", ds_in)->required()->check(CLI::ExistingFile);
  exp->add_option("-o,--out", ds_out, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*val) {
      const auto report = validate(slurp(config_path));
      std::fputs(report.text().c_str(), stdout);
      return report.passed() ? kOk : kInvalid;
    }

    if (*gen) {
      const auto pk = problem_kind_from_string(kind);
      const auto data = generate(pk, ds_seed, n_train, n_heldout, d_x, pk == ProblemKind::QuadraticBowl ? 1 : d_y,
                                 GenerateOptions{separation});
      write_dataset(data, ds_out);
      std::printf("wrote %s (%zu train, %zu heldout, d_x=%zu, d_y=%zu)\n", ds_out.c_str(), data.samples.size(),
                  data.heldout.size(), data.d_x, data.d_y);
      return kOk;
    }
    if (*exp) {
      const auto data = read_dataset(ds_in);
      if (ds_out.empty()) {
        export_dataset_csv(data, std::cout);
      } else {
        std::ofstream f(ds_out, std::ios::binary);
        if (!f) throw Error("cannot write " + ds_out);
        export_dataset_csv(data, f);
      }
      return kOk;
    }

    const std::string text = slurp(config_path);
    const Overrides overrides = run_overrides(seed, backend);
    ExperimentConfig config;
    try {
      // Sweep points are validated individually; the base only names the output.
      config = *run ? parse_config(text, overrides) : parse_config_unchecked(text, overrides);
    } catch (const Error& e) {
      std::fprintf(stderr, "invalid config %s: %s\n", config_path.c_str(), e.what());
      return kInvalid;
    }

    if (*run) {
      const fs::path dir = resolve_output(output, config, config_path);
      print_summary(run_experiment(config, dir), dir);
      return kOk;
    }

    // sweep
    const auto eq = vary.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "--vary expects section.key=v1,v2,...\n");
      return kInvalid;
    }
    const std::string key = vary.substr(0, eq);
    const auto values = split_values(vary.substr(eq + 1));
    const fs::path root = resolve_output(output, config, config_path);
    for (const auto& row : sweep(text, overrides, key, values, root)) {
      std::printf("%s=%s  speedup %.4g  total %.6g s  final heldout loss %.6g\n", key.c_str(), row.value.c_str(),
                  row.result.speedup, row.result.total_seconds, row.result.heldout_loss.back());
    }
    std::printf("wrote %s\n", (root / "speedup.csv").string().c_str());
    return kOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
}

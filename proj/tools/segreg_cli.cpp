#include <iostream>

#include <CLI11.hpp>

#include "segreg/platform.hpp"
#include "segreg/runs.hpp"

using namespace segreg;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Common {
  std::string config, out, method, preset;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config or run manifest")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "run seed, overrides the config");
  cmd->add_option("--method", c.method, "seq | ewc | rehearsal | segreg | segreg_ewc");
  cmd->add_option("--preset", c.preset, "task preset, replaces the config's tasks");
}

RunConfig build_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (!c.preset.empty()) {
    cfg.preset = c.preset;
    cfg.tasks.clear();
  }
  if (c.seed) cfg.method.run_seed = *c.seed;
  if (!c.method.empty()) cfg.method.method = method_from_name(c.method);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"SegReg continual segmentation experiments on synthetic tasks"};
  app.require_subcommand(1);

  Common gen, train, cont;
  std::string task;
  std::vector<std::string> run_dirs;
  std::string report_out;

  auto* g = app.add_subcommand("generate", "write the task datasets");
  add_common(g, gen);
  auto* t = app.add_subcommand("train", "train on a single task");
  add_common(t, train);
  t->add_option("--task", task, "task id (default: config train_task, else the first task)");
  auto* c = app.add_subcommand("continual", "train the task sequence and write scores, metrics and drift");
  add_common(c, cont);
  auto* r = app.add_subcommand("report", "tabulate completed continual runs");
  r->add_option("runs", run_dirs, "run directories")->required();
  r->add_option("--out", report_out, "CSV file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*g) {
      auto cfg = build_config(gen);
      const fs::path out = gen.out.empty() ? fs::path(cfg.data_dir) : fs::path(gen.out);
      for (const auto& dir : cmd_generate(cfg, out)) std::cout << dir.string() << "\n";
    } else if (*t) {
      auto cfg = build_config(train);
      if (!train.out.empty()) cfg.out_dir = train.out;
      auto res = cmd_train(cfg, task.empty() ? std::nullopt : std::optional<std::string>(task));
      std::cout << "dsc " << detail::fmt(res.dsc) << "\n";
    } else if (*c) {
      auto cfg = build_config(cont);
      if (!cont.out.empty()) cfg.out_dir = cont.out;
      auto res = cmd_continual(cfg);
      std::cout << "mean_dsc " << detail::fmt(detail::pp(res.metrics.mean_dsc)) << " bwt "
                << detail::fmt(detail::pp(res.metrics.bwt)) << " fwt " << detail::fmt(detail::pp(res.metrics.fwt))
                << " drift " << detail::fmt(res.drift.total) << "\n";
    } else if (*r) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto csv = cmd_report(dirs);
      if (report_out.empty()) std::cout << csv;
      else detail::write_file(report_out, csv);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

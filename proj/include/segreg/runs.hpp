#pragma once

#include <charconv>
#include <filesystem>
#include <string>
#include <vector>

#include "segreg/checkpoint.hpp"
#include "segreg/config.hpp"
#include "segreg/continual.hpp"
#include "segreg/drift.hpp"

namespace segreg {

namespace fs = std::filesystem;

namespace detail {

// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_json(const fs::path& path, const OrderedJson& j) { write_file(path, j.dump(2) + "\n"); }

inline OrderedJson optional_list(const std::vector<std::optional<double>>& v) {
  OrderedJson a = OrderedJson::array();
  for (const auto& x : v) a.push_back(x ? OrderedJson(*x) : OrderedJson(nullptr));
  return a;
}

inline std::string losses_csv(const StageLog& log) {
  std::string s = "epoch,steps,total,seg,sigreg,inv,ewc\n";
  for (const auto& e : log.epochs) {
    s += std::to_string(e.epoch) + "," + std::to_string(e.steps) + "," + fmt(e.total) + "," + fmt(e.seg) + "," +
         fmt(e.sigreg) + "," + fmt(e.inv) + "," + fmt(e.ewc) + "\n";
  }
  return s;
}

inline double pp(double v) { return 100.0 * v; }

}  // namespace detail

/// Loads a generated task and checks it matches the configured spec.
inline Dataset load_task(const RunConfig& cfg, const TaskSpec& spec) {
  const fs::path dir = fs::path(cfg.data_dir) / spec.task_id;
  if (!fs::exists(dir / "manifest.json")) {
    throw IoError("missing dataset for task '" + spec.task_id + "' in " + dir.string() + " (run 'generate' first)");
  }
  auto ds = load_dataset(dir);
  if (to_json(ds.spec) != to_json(spec)) {
    throw ValidationError("dataset in " + dir.string() + " was generated from a different spec; rerun 'generate'");
  }
  return ds;
}

/// Writes one dataset directory per task under `out`.
inline std::vector<fs::path> cmd_generate(RunConfig cfg, const fs::path& out) {
  cfg.resolve();
  cfg.validate();
  std::vector<fs::path> dirs;
  for (const auto& spec : cfg.tasks) {
    dirs.push_back(out / spec.task_id);
    save_dataset(generate_task(spec), dirs.back());
  }
  return dirs;
}

struct TrainOutcome {
  double dsc = 0;
  StageLog log;
};

/// Single-task training with the configured method's loss.
inline TrainOutcome cmd_train(RunConfig cfg, std::optional<std::string> task_id = std::nullopt) {
  cfg.resolve();
  cfg.validate();
  if (!task_id) task_id = cfg.train_task;
  const auto& spec = task_id ? cfg.task(*task_id) : cfg.tasks.front();
  cfg.train_task = spec.task_id;
  const auto ds = load_task(cfg, spec);
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  detail::write_json(out / "manifest.json", make_manifest(cfg, "train"));

  auto params = init_params<float>(cfg.method.run_seed, spec.num_classes());
  auto carry = CarryState::for_method(cfg.method.method);
  TrainOutcome r;
  r.log = train_stage(params, ds, cfg.method, carry, 0);
  save_checkpoint(params, out / "checkpoint.ckpt");
  detail::write_file(out / "losses.csv", detail::losses_csv(r.log));

  r.dsc = mean_of(evaluate(params, ds, "test"));
  const EpochLog last = r.log.epochs.empty() ? EpochLog{} : r.log.epochs.back();
  OrderedJson m;
  m["task"] = spec.task_id;
  m["method"] = method_name(cfg.method.method);
  m["run_seed"] = cfg.method.run_seed;
  m["dsc"] = r.dsc;
  m["per_class_dsc"] = {{"val", evaluate_per_class(params, ds, "val")}, {"test", evaluate_per_class(params, ds, "test")}};
  m["loss_total"] = last.total;
  m["loss_seg"] = last.seg;
  m["loss_sigreg"] = last.sigreg;
  m["loss_inv"] = last.inv;
  m["loss_ewc"] = last.ewc;
  m["empty_foreground_warnings"] = r.log.empty_foreground_warnings;
  detail::write_json(out / "metrics.json", m);
  return r;
}

struct ContinualOutcome {
  SequenceResult result;
  ContinualMetrics metrics;
  DriftReport drift;
};

/// Full sequence with baselines, writing every artifact of the run.
inline ContinualOutcome cmd_continual(RunConfig cfg, const std::optional<Baselines>& shared = std::nullopt) {
  cfg.resolve();
  cfg.validate();
  if (cfg.tasks.size() < 2) throw ValidationError("continual: need at least 2 tasks");
  std::vector<Dataset> tasks;
  for (const auto& spec : cfg.tasks) tasks.push_back(load_task(cfg, spec));
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  detail::write_json(out / "manifest.json", make_manifest(cfg, "continual"));

  const auto baselines = shared ? *shared : train_baselines(tasks, cfg.method);
  auto on_stage = [&](std::size_t stage, const ModelParams<float>& params, const SequenceResult& r) {
    save_checkpoint(params, out / ("checkpoint_stage_" + std::to_string(stage) + ".ckpt"));
    detail::write_file(out / ("losses_stage_" + std::to_string(stage) + ".csv"), detail::losses_csv(r.logs.back()));
  };
  ContinualOutcome o;
  o.result = run_sequence(tasks, cfg.method, baselines, on_stage);
  const auto& S = o.result.scores;
  o.metrics = continual_metrics(S);
  o.drift = drift_report(o.result.snapshots);
  const std::size_t T = tasks.size();

  std::string scores = "stage,task,dsc\n";
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) scores += std::to_string(i + 1) + "," + cfg.tasks[j].task_id + "," + detail::fmt(S.R[i][j]) + "\n";
  detail::write_file(out / "scores.csv", scores);
  std::string base = "task,dsc\n";
  for (std::size_t j = 0; j < T; ++j) base += cfg.tasks[j].task_id + "," + detail::fmt(S.b[j]) + "\n";
  detail::write_file(out / "baselines.csv", base);

  OrderedJson m;
  m["experiment"] = cfg.experiment;
  m["method"] = method_name(cfg.method.method);
  m["run_seed"] = cfg.method.run_seed;
  m["units"] = "percentage points";
  m["mean_dsc"] = detail::pp(o.metrics.mean_dsc);
  m["bwt"] = detail::pp(o.metrics.bwt);
  m["fwt"] = detail::pp(o.metrics.fwt);
  m["drift"] = o.drift.total;
  m["per_task"] = OrderedJson::array();
  for (std::size_t j = 0; j < T; ++j) {
    m["per_task"].push_back({{"task", cfg.tasks[j].task_id},
                             {"final_dsc", detail::pp(S.R[T - 1][j])},
                             {"just_trained_dsc", detail::pp(S.R[j][j])},
                             {"baseline_dsc", detail::pp(S.b[j])}});
  }
  // Locations are left out so a replay into another directory matches byte for byte.
  auto echo = to_json(cfg);
  echo.erase("data_dir");
  echo.erase("out_dir");
  m["config"] = echo;
  detail::write_json(out / "metrics.json", m);

  OrderedJson d;
  d["probe_task"] = cfg.tasks.front().task_id;
  d["probe_pixels"] = o.result.snapshots.front().labels.size();
  d["transitions"] = OrderedJson::array();
  for (std::size_t t = 0; t < o.drift.kl.size(); ++t)
    d["transitions"].push_back({{"from_stage", t + 1}, {"to_stage", t + 2}, {"kl", o.drift.kl[t]}});
  d["total"] = o.drift.total;
  d["per_class"] = OrderedJson::array();
  for (std::size_t c = 0; c < o.drift.per_class.size(); ++c)
    d["per_class"].push_back({{"class", c}, {"kl", detail::optional_list(o.drift.per_class[c])}});
  detail::write_json(out / "drift.json", d);

  // One PCA basis over every stage so the plots share axes.
  const auto& snaps = o.result.snapshots;
  const Eigen::Index n = snaps.front().embeddings.rows();
  Eigen::MatrixXd all(n * static_cast<Eigen::Index>(snaps.size()), snaps.front().embeddings.cols());
  for (std::size_t s = 0; s < snaps.size(); ++s) all.middleRows(static_cast<Eigen::Index>(s) * n, n) = snaps[s].embeddings;
  const auto pca = pca_project(all, 2);
  for (std::size_t s = 0; s < snaps.size(); ++s) {
    std::string csv = "pc1,pc2,class,stage\n";
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(s) * n + i;
      csv += detail::fmt(pca.coords(row, 0)) + "," + detail::fmt(pca.coords(row, 1)) + "," +
             std::to_string(snaps[s].labels[static_cast<std::size_t>(i)]) + "," + std::to_string(snaps[s].stage) + "\n";
    }
    detail::write_file(out / ("latents_stage_" + std::to_string(snaps[s].stage) + ".csv"), csv);
  }
  return o;
}

/// Comparison table, one row per continual run. Numbers are copied from each
/// run's metrics.json text unchanged.
inline std::string cmd_report(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw ValidationError("report: no run directories given");
  std::string csv = "method,dsc,bwt,fwt,drift\n";
  for (const auto& dir : run_dirs) {
    const auto path = dir / "metrics.json";
    if (!fs::exists(path)) throw ValidationError("report: '" + dir.string() + "' is not a completed continual run (no metrics.json)");
    const Json m = detail::parse_json(detail::read_file(path), path.string());
    for (const char* key : {"method", "mean_dsc", "bwt", "fwt", "drift"}) {
      if (!m.contains(key)) throw ValidationError("report: " + path.string() + " lacks '" + key + "'");
    }
    csv += m.at("method").get<std::string>() + "," + m.at("mean_dsc").dump() + "," + m.at("bwt").dump() + "," +
           m.at("fwt").dump() + "," + m.at("drift").dump() + "\n";
  }
  return csv;
}

}  // namespace segreg

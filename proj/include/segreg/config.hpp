#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "segreg/continual.hpp"
#include "segreg/json_io.hpp"
#include "segreg/synthdata.hpp"

namespace segreg {

inline constexpr const char* kManifestFormat = "segreg-run-manifest";
inline constexpr int kManifestVersion = 1;

/// Everything a command needs. After resolve() the task list is inline, so the
/// echoed document reproduces the run without the preset table.
struct RunConfig {
  std::string experiment = "segreg";
  std::optional<std::string> preset = "hippocampus-like";
  std::vector<TaskSpec> tasks;
  std::string data_dir = "data";
  std::string out_dir = "runs/segreg";
  std::optional<std::string> train_task;
  MethodConfig method{};

  // Expands the preset into inline tasks.
  void resolve() {
    if (preset) {
      tasks = preset_tasks(*preset);
      preset.reset();
    }
  }

  void validate() const {
    if (experiment.empty()) throw ValidationError("config.experiment: must not be empty");
    if (preset) preset_tasks(*preset);
    if (!preset && tasks.empty()) throw ValidationError("config: give either 'preset' or a non-empty 'tasks' list");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      tasks[i].validate();
      for (std::size_t k = 0; k < i; ++k)
        if (tasks[k].task_id == tasks[i].task_id) throw ValidationError("config.tasks: duplicate task_id '" + tasks[i].task_id + "'");
    }
    method.validate();
  }

  const TaskSpec& task(std::string_view id) const {
    for (const auto& t : tasks)
      if (t.task_id == id) return t;
    throw ValidationError("config: no task with id '" + std::string(id) + "'");
  }
};

inline OrderedJson to_json(const RunConfig& c) {
  const auto& m = c.method;
  OrderedJson j;
  j["experiment"] = c.experiment;
  j["run_seed"] = m.run_seed;
  if (c.preset) j["preset"] = *c.preset;
  if (!c.tasks.empty()) {
    j["tasks"] = OrderedJson::array();
    for (const auto& t : c.tasks) j["tasks"].push_back(to_json(t));
  }
  j["data_dir"] = c.data_dir;
  j["out_dir"] = c.out_dir;
  if (c.train_task) j["train_task"] = *c.train_task;
  j["method"] = {{"name", method_name(m.method)},
                 {"ewc_lambda", m.ewc_lambda},
                 {"fisher_samples", m.fisher_samples},
                 {"rehearsal_per_task", m.rehearsal_per_task}};
  j["segreg"] = {{"lambda", m.segreg.lambda},
                 {"seg_weight", m.segreg.seg_weight},
                 {"dice_ce_mix", m.segreg.dice_ce_mix},
                 {"inv_weight", m.segreg.inv_weight}};
  j["sigreg"] = {{"projections", m.projections},
                 {"mode", m.sigreg.mode == EppsPulleyMode::closed ? "closed" : "quadrature"},
                 {"grid_points", m.sigreg.grid.points},
                 {"t_max", m.sigreg.grid.t_max},
                 {"normalize_by_n", m.sigreg.normalize_by_n}};
  j["budgets"] = {{"pixels_per_class", m.pixels_per_class},
                  {"epochs", m.optim.epochs},
                  {"batch_size", m.optim.batch_size},
                  {"lr", m.optim.lr},
                  {"momentum", m.optim.momentum},
                  {"clip_norm", m.optim.clip_norm}};
  return j;
}

/// Strict parse. Accepts a plain config or a run manifest (whose "config"
/// member is used).
inline RunConfig run_config_from_json(const Json& doc) {
  const Json* jp = &doc;
  if (doc.is_object() && doc.contains("format")) {
    detail::require_known_keys(doc, {"format", "version", "command", "config"}, "manifest");
    if (doc.at("format") != kManifestFormat || doc.value("version", 0) != kManifestVersion) {
      throw ValidationError("manifest: unsupported format or version");
    }
    if (!doc.contains("config")) throw ValidationError("manifest.config: missing required field");
    jp = &doc.at("config");
  }
  const Json& j = *jp;
  const std::string w = "config";
  detail::require_known_keys(j,
                             {"experiment", "run_seed", "preset", "tasks", "data_dir", "out_dir", "train_task", "method",
                              "segreg", "sigreg", "budgets"},
                             w);
  RunConfig c;
  auto& m = c.method;
  detail::read_field(j, "experiment", c.experiment, w);
  detail::read_field(j, "run_seed", m.run_seed, w);
  if (j.contains("preset") && j.contains("tasks")) throw ValidationError("config: 'preset' and 'tasks' are mutually exclusive");
  if (j.contains("tasks")) {
    c.preset.reset();
    const auto& arr = j.at("tasks");
    if (!arr.is_array()) throw ValidationError("config.tasks: expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) c.tasks.push_back(task_spec_from_json(arr[i], "config.tasks[" + std::to_string(i) + "]"));
  } else if (j.contains("preset")) {
    std::string p;
    detail::read_field(j, "preset", p, w);
    c.preset = p;
  }
  detail::read_field(j, "data_dir", c.data_dir, w);
  detail::read_field(j, "out_dir", c.out_dir, w);
  if (j.contains("train_task")) {
    std::string t;
    detail::read_field(j, "train_task", t, w);
    c.train_task = t;
  }
  if (j.contains("method")) {
    const auto& s = j.at("method");
    const std::string ws = w + ".method";
    detail::require_known_keys(s, {"name", "ewc_lambda", "fisher_samples", "rehearsal_per_task"}, ws);
    if (s.contains("name")) {
      std::string name;
      detail::read_field(s, "name", name, ws);
      m.method = method_from_name(name);
    }
    detail::read_field(s, "ewc_lambda", m.ewc_lambda, ws);
    detail::read_field(s, "fisher_samples", m.fisher_samples, ws);
    detail::read_field(s, "rehearsal_per_task", m.rehearsal_per_task, ws);
  }
  if (j.contains("segreg")) {
    const auto& s = j.at("segreg");
    const std::string ws = w + ".segreg";
    detail::require_known_keys(s, {"lambda", "seg_weight", "dice_ce_mix", "inv_weight"}, ws);
    detail::read_field(s, "lambda", m.segreg.lambda, ws);
    detail::read_field(s, "seg_weight", m.segreg.seg_weight, ws);
    detail::read_field(s, "dice_ce_mix", m.segreg.dice_ce_mix, ws);
    detail::read_field(s, "inv_weight", m.segreg.inv_weight, ws);
  }
  if (j.contains("sigreg")) {
    const auto& s = j.at("sigreg");
    const std::string ws = w + ".sigreg";
    detail::require_known_keys(s, {"projections", "mode", "grid_points", "t_max", "normalize_by_n"}, ws);
    detail::read_field(s, "projections", m.projections, ws);
    if (s.contains("mode")) {
      std::string mode;
      detail::read_field(s, "mode", mode, ws);
      if (mode == "closed") m.sigreg.mode = EppsPulleyMode::closed;
      else if (mode == "quadrature") m.sigreg.mode = EppsPulleyMode::quadrature;
      else throw ValidationError(ws + ".mode: expected 'closed' or 'quadrature'");
    }
    detail::read_field(s, "grid_points", m.sigreg.grid.points, ws);
    detail::read_field(s, "t_max", m.sigreg.grid.t_max, ws);
    detail::read_field(s, "normalize_by_n", m.sigreg.normalize_by_n, ws);
  }
  if (j.contains("budgets")) {
    const auto& s = j.at("budgets");
    const std::string ws = w + ".budgets";
    detail::require_known_keys(s, {"pixels_per_class", "epochs", "batch_size", "lr", "momentum", "clip_norm"}, ws);
    detail::read_field(s, "pixels_per_class", m.pixels_per_class, ws);
    detail::read_field(s, "epochs", m.optim.epochs, ws);
    detail::read_field(s, "batch_size", m.optim.batch_size, ws);
    detail::read_field(s, "lr", m.optim.lr, ws);
    detail::read_field(s, "momentum", m.optim.momentum, ws);
    detail::read_field(s, "clip_norm", m.optim.clip_norm, ws);
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config: cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(detail::parse_json(ss.str(), path.string()));
}

/// The manifest echoes the resolved config for one command.
inline OrderedJson make_manifest(const RunConfig& resolved, std::string_view command) {
  return {{"format", kManifestFormat}, {"version", kManifestVersion}, {"command", command}, {"config", to_json(resolved)}};
}

}  // namespace segreg

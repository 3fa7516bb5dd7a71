#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "geopix/config.hpp"

// Desk-scale ablation grid. Each cell trains from scratch once per seed with
// the protocol in a RunConfig and reports medians over seeds.

namespace geopix::ablation {

enum class Axis { Capacity, Fusion, Projector, Training };

inline std::string to_string(Axis a) {
  switch (a) {
    case Axis::Capacity: return "capacity";
    case Axis::Fusion: return "fusion";
    case Axis::Projector: return "projector";
    case Axis::Training: return "training";
  }
  return "?";
}

inline Axis axis_from_string(const std::string& s) {
  if (s == "capacity") return Axis::Capacity;
  if (s == "fusion") return Axis::Fusion;
  if (s == "projector") return Axis::Projector;
  if (s == "training") return Axis::Training;
  throw ConfigError("unknown ablation axis '" + s + "' (expected capacity|fusion|projector|training)");
}

enum class Schedule { TwoStage, SingleStage };

struct Cell {
  std::string row;
  ModelConfig model;
  Schedule schedule = Schedule::TwoStage;
};

/// Rows of one axis around `base`.
inline std::vector<Cell> cells(Axis axis, const ModelConfig& base) {
  std::vector<Cell> out;
  switch (axis) {
    case Axis::Capacity: {
      ModelConfig off = base;
      off.clm_enabled = false;
      out.push_back({"off", off});
      for (std::size_t n : {16, 32, 64}) {
        ModelConfig c = base;
        c.clm_enabled = true;
        c.fusion = clm::FusionKind::Conv3D;
        c.memory_capacity = n;
        out.push_back({std::to_string(n), c});
      }
      break;
    }
    case Axis::Fusion:
      for (auto k : clm::kAllFusions) {
        ModelConfig c = base;
        c.clm_enabled = true;
        c.fusion = k;
        out.push_back({clm::to_string(k), c});
      }
      break;
    case Axis::Projector:
      for (auto m : {ProjectorMode::Shared, ProjectorMode::Independent}) {
        ModelConfig c = base;
        c.projector = m;
        out.push_back({to_string(m), c});
      }
      break;
    case Axis::Training:
      out.push_back({"single-stage", base, Schedule::SingleStage});
      out.push_back({"two-stage", base, Schedule::TwoStage});
      break;
  }
  return out;
}

/// Size of the component an axis varies: CLM total (capacity), fusion
/// (fusion), projectors (projector), whole model (training).
inline std::size_t component_params(Axis axis, const ModelConfig& mc) {
  Model<float> m(mc, 0);
  switch (axis) {
    case Axis::Capacity: {
      ModelConfig off = mc;
      off.clm_enabled = false;
      return m.parameter_count() - Model<float>(off, 0).parameter_count();
    }
    case Axis::Fusion: return mc.clm_enabled ? nn::count_parameters(m.fusion()) : 0;
    case Axis::Projector: return nn::count_parameters(m.projector());
    case Axis::Training: return m.parameter_count();
  }
  return 0;
}

struct RunResult {
  double miou = 0;
  double ciou = 0;
  std::size_t steps = 0;
  double wall_s = 0;
  std::vector<train::HistoryRow> history;
};

/// Trains one model and evaluates it on `val` (classes predicted).
inline RunResult run_one(const ModelConfig& mc, Schedule sched, const RunConfig& proto,
                         std::span<const train::Example> train_set, std::span<const train::Example> val_set,
                         std::uint64_t seed, std::span<const train::Example> grounding = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Model<float> model(mc, seed);
  train::TrainOptions opt;
  opt.seed = seed;
  opt.weights = proto.loss;
  opt.optimizer = proto.optimizer;
  opt.validate_each_epoch = proto.validate_each_epoch;
  const train::Datasets data{train_set, grounding, val_set};
  RunResult r;
  r.history = sched == Schedule::TwoStage
                  ? train::run_two_stage(model, data, proto.stage1, proto.stage2, opt, &r.steps)
                  : train::run_single_stage(model, data, proto.single_stage, opt, &r.steps);
  const auto rep = train::evaluate(model, val_set);
  r.miou = rep.miou;
  r.ciou = rep.ciou;
  r.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct CellResult {
  std::string row;
  std::size_t params = 0;        // ablated component
  std::size_t model_params = 0;
  std::vector<RunResult> runs;  // one per seed
  std::string error;            // non-empty when the cell failed
  int exit_code = 0;

  double miou() const { return median(collect(&RunResult::miou)); }
  double ciou() const { return median(collect(&RunResult::ciou)); }
  double wall_s() const { return median(collect(&RunResult::wall_s)); }
  std::size_t steps() const { return runs.empty() ? 0 : runs.front().steps; }

 private:
  std::vector<double> collect(double RunResult::*f) const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.*f);
    return v;
  }
};

struct GridOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::function<void(const std::string& row, std::uint64_t seed, const RunResult&)> on_run;
};

/// Runs every cell; a failing cell records its error and the grid continues.
inline std::vector<CellResult> run_grid(Axis axis, const std::vector<Cell>& grid, const RunConfig& proto,
                                        std::span<const train::Example> train_set,
                                        std::span<const train::Example> val_set, const GridOptions& go,
                                        std::span<const train::Example> grounding = {}) {
  std::vector<CellResult> out;
  for (const auto& cell : grid) {
    CellResult cr;
    cr.row = cell.row;
    try {
      cr.params = component_params(axis, cell.model);
      cr.model_params = Model<float>(cell.model, 0).parameter_count();
      for (auto seed : go.seeds) {
        cr.runs.push_back(run_one(cell.model, cell.schedule, proto, train_set, val_set, seed, grounding));
        if (go.on_run) go.on_run(cell.row, seed, cr.runs.back());
      }
    } catch (const std::exception& e) {
      cr.error = e.what();
      cr.exit_code = geopix::exit_code(e);
      cr.runs.clear();
    }
    out.push_back(std::move(cr));
  }
  return out;
}

inline std::string csv(Axis axis, const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os.precision(6);
  os << "axis,row,miou,ciou,params,model_params,wall_s,steps,seeds,status\n";
  for (const auto& c : cells) {
    os << to_string(axis) << ',' << c.row << ',';
    if (c.error.empty())
      os << c.miou() << ',' << c.ciou() << ',' << c.params << ',' << c.model_params << ',' << c.wall_s() << ','
         << c.steps() << ',' << c.runs.size() << ",ok\n";
    else
      os << ",," << c.params << ',' << c.model_params << ",,,0,failed\n";
  }
  return os.str();
}

}  // namespace geopix::ablation

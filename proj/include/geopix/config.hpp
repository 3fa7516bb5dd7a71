#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "geopix/trainer.hpp"

// Run configuration for the CLI. Every object level rejects unknown keys and
// the whole thing is validated before any work starts.

namespace geopix {

struct DataPaths {
  std::string train;      // directory written by `gen`
  std::string val;
  std::string grounding;  // optional; empty reuses train for class-only samples
};

struct RunConfig {
  ModelConfig model;
  train::StageConfig stage1 = default_stage1();
  train::StageConfig stage2 = default_stage2();
  train::StageConfig single_stage = default_single();
  train::LossWeights loss;
  train::AdamWConfig optimizer;
  DataPaths data;
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  bool validate_each_epoch = true;

  static train::StageConfig default_stage1() {
    train::StageConfig s;
    s.name = "stage1";
    s.epochs = 5;
    s.warmup_epochs = 1;
    s.grounding_fraction = 0.5;
    s.segmentation_fraction = 0.5;
    s.scope = TrainScope::Wide;
    return s;
  }
  static train::StageConfig default_stage2() {
    train::StageConfig s;
    s.name = "stage2";
    s.epochs = 50;
    s.warmup_epochs = 1;
    s.grounding_fraction = 0.2;
    s.segmentation_fraction = 0.8;
    s.scope = TrainScope::Narrow;
    return s;
  }
  static train::StageConfig default_single() {
    train::StageConfig s = default_stage1();
    s.name = "single";
    s.epochs = 50;
    return s;
  }

  void validate() const {
    model.validate();
    stage1.validate();
    stage2.validate();
    single_stage.validate();
    if (loss.bce < 0 || loss.dice < 0 || loss.ce < 0) throw ConfigError("loss weights must be >= 0");
    if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
      throw ConfigError("optimizer betas must lie in [0, 1)");
    if (!(optimizer.eps > 0)) throw ConfigError("optimizer eps must be > 0");
    if (optimizer.weight_decay < 0 || optimizer.max_grad_norm < 0)
      throw ConfigError("optimizer weight_decay and max_grad_norm must be >= 0");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  }
};

inline std::string to_string(TrainScope s) { return s == TrainScope::Wide ? "wide" : "narrow"; }

inline TrainScope scope_from_string(const std::string& s) {
  if (s == "wide") return TrainScope::Wide;
  if (s == "narrow") return TrainScope::Narrow;
  throw ConfigError("unknown trainable scope '" + s + "' (expected wide|narrow)");
}

namespace train {

inline void to_json(nlohmann::json& j, const StageConfig& s) {
  j = {{"name", s.name},
       {"epochs", s.epochs},
       {"warmup_epochs", s.warmup_epochs},
       {"peak_lr", s.peak_lr},
       {"grounding_fraction", s.grounding_fraction},
       {"segmentation_fraction", s.segmentation_fraction},
       {"scope", geopix::to_string(s.scope)},
       {"batch_size", s.batch_size}};
}

inline void from_json(const nlohmann::json& j, StageConfig& s) {
  geopix::detail::reject_unknown(j,
                                 {"name", "epochs", "warmup_epochs", "peak_lr", "grounding_fraction",
                                  "segmentation_fraction", "scope", "batch_size"},
                                 "stage config");
  using geopix::detail::read_field;
  read_field(j, "name", s.name);
  read_field(j, "epochs", s.epochs);
  read_field(j, "warmup_epochs", s.warmup_epochs);
  read_field(j, "peak_lr", s.peak_lr);
  read_field(j, "grounding_fraction", s.grounding_fraction);
  read_field(j, "segmentation_fraction", s.segmentation_fraction);
  std::string scope = geopix::to_string(s.scope);
  read_field(j, "scope", scope);
  s.scope = scope_from_string(scope);
  read_field(j, "batch_size", s.batch_size);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) { j = {{"bce", w.bce}, {"dice", w.dice}, {"ce", w.ce}}; }

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  geopix::detail::reject_unknown(j, {"bce", "dice", "ce"}, "loss weights");
  geopix::detail::read_field(j, "bce", w.bce);
  geopix::detail::read_field(j, "dice", w.dice);
  geopix::detail::read_field(j, "ce", w.ce);
}

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"max_grad_norm", c.max_grad_norm}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  geopix::detail::reject_unknown(j, {"beta1", "beta2", "eps", "weight_decay", "max_grad_norm"}, "optimizer");
  geopix::detail::read_field(j, "beta1", c.beta1);
  geopix::detail::read_field(j, "beta2", c.beta2);
  geopix::detail::read_field(j, "eps", c.eps);
  geopix::detail::read_field(j, "weight_decay", c.weight_decay);
  geopix::detail::read_field(j, "max_grad_norm", c.max_grad_norm);
}

}  // namespace train

inline void to_json(nlohmann::json& j, const DataPaths& d) {
  j = {{"train", d.train}, {"val", d.val}, {"grounding", d.grounding}};
}

inline void from_json(const nlohmann::json& j, DataPaths& d) {
  detail::reject_unknown(j, {"train", "val", "grounding"}, "data");
  detail::read_field(j, "train", d.train);
  detail::read_field(j, "val", d.val);
  detail::read_field(j, "grounding", d.grounding);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"stage1", c.stage1},
       {"stage2", c.stage2},
       {"single_stage", c.single_stage},
       {"loss", c.loss},
       {"optimizer", c.optimizer},
       {"data", c.data},
       {"seed", c.seed},
       {"out_dir", c.out_dir},
       {"validate_each_epoch", c.validate_each_epoch}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  detail::reject_unknown(j,
                         {"model", "stage1", "stage2", "single_stage", "loss", "optimizer", "data", "seed", "out_dir",
                          "validate_each_epoch"},
                         "run config");
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("stage1")) train::from_json(j.at("stage1"), c.stage1);
  if (j.contains("stage2")) train::from_json(j.at("stage2"), c.stage2);
  if (j.contains("single_stage")) train::from_json(j.at("single_stage"), c.single_stage);
  if (j.contains("loss")) train::from_json(j.at("loss"), c.loss);
  if (j.contains("optimizer")) train::from_json(j.at("optimizer"), c.optimizer);
  if (j.contains("data")) from_json(j.at("data"), c.data);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "out_dir", c.out_dir);
  detail::read_field(j, "validate_each_epoch", c.validate_each_epoch);
}

/// Parses, applies the GEOPIX_SEED override, and validates.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c = j.get<RunConfig>();
  if (const char* s = std::getenv("GEOPIX_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0' || s[0] == '-') throw ConfigError(std::string("GEOPIX_SEED='") + s + "' is not an unsigned integer");
    c.seed = v;
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace geopix

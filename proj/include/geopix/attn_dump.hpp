#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geopix/predictor.hpp"
#include "geopix/scenes.hpp"
#include "geopix/trainer.hpp"

// Raw attention matrices for one scene: for each scale the softmax of the
// pooled target tokens against plain features ("pre") and against the
// memory-enhanced features ("post"). One f32 blob per matrix plus index.json.

namespace geopix::attn {

struct Matrix {
  std::string name;
  std::string stage;  // "pre" | "post"
  std::size_t scale = 0;
  std::size_t height = 0, width = 0;  // feature extent; columns = height * width
  Tensor value;                       // [K, height * width]
};

struct Dump {
  std::string scene_id;
  bool clm_enabled = false;
  std::vector<InstanceQuery> queries;
  std::vector<Matrix> matrices;
};

inline Dump compute(const Model<float>& model, const scenes::Scene& scene) {
  const auto ex = train::prepare(scene, model.config());
  Tape<float> tape(false);
  auto out = model.forward(tape, tape.constant(ex.image), ex.queries, {ClassSource::Predicted, true});
  Dump d;
  d.scene_id = scene.id;
  d.clm_enabled = model.config().clm_enabled;
  d.queries = ex.queries;
  const auto& cfg = model.config();
  for (std::size_t l = 0; l < out.attn_pre.size(); ++l) {
    const std::size_t h = cfg.feature_h(l), w = cfg.feature_w(l);
    d.matrices.push_back({"pre_scale" + std::to_string(l), "pre", l, h, w, out.attn_pre[l].value()});
    d.matrices.push_back({"post_scale" + std::to_string(l), "post", l, h, w, out.attn_post[l].value()});
  }
  return d;
}

inline void save(const Dump& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json idx{{"scene_id", d.scene_id}, {"clm_enabled", d.clm_enabled}};
  nlohmann::json qs = nlohmann::json::array();
  for (const auto& q : d.queries) qs.push_back({{"class_id", q.class_id}, {"cx", q.cx}, {"cy", q.cy}});
  idx["queries"] = qs;
  nlohmann::json ms = nlohmann::json::array();
  for (const auto& m : d.matrices) {
    const std::string file = m.name + ".f32bin";
    scenes::write_f32(dir / file, m.value.values());
    ms.push_back({{"name", m.name},
                  {"stage", m.stage},
                  {"scale", m.scale},
                  {"height", m.height},
                  {"width", m.width},
                  {"shape", m.value.shape()},
                  {"file", file}});
  }
  idx["matrices"] = ms;
  std::ofstream f(dir / "index.json");
  if (!f) throw DataError("attn dump: cannot write " + (dir / "index.json").string());
  f << idx.dump(2) << '\n';
}

inline Dump load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "index.json");
  if (!f) throw DataError("attn dump: cannot open " + (dir / "index.json").string());
  try {
    const auto idx = nlohmann::json::parse(f);
    Dump d;
    d.scene_id = idx.at("scene_id").get<std::string>();
    d.clm_enabled = idx.at("clm_enabled").get<bool>();
    for (const auto& q : idx.at("queries"))
      d.queries.push_back({q.at("class_id").get<std::size_t>(), q.at("cx").get<double>(), q.at("cy").get<double>()});
    for (const auto& m : idx.at("matrices")) {
      const auto shape = m.at("shape").get<Shape>();
      auto values = scenes::read_f32(dir / m.at("file").get<std::string>(), shape_numel(shape));
      d.matrices.push_back({m.at("name").get<std::string>(), m.at("stage").get<std::string>(),
                            m.at("scale").get<std::size_t>(), m.at("height").get<std::size_t>(),
                            m.at("width").get<std::size_t>(), Tensor(shape, std::move(values))});
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("attn dump index: ") + e.what());
  }
}

}  // namespace geopix::attn

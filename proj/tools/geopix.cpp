// geopix: gen / train / eval / ablate / attn-dump / describe.
// Exit codes: 0 ok, 2 config or usage error, 3 data error, 4 numerical divergence.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "geopix/geopix.hpp"

namespace fs = std::filesystem;
using namespace geopix;

namespace {

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write " + p.string());
  f << s;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

std::vector<scenes::Scene> load_dir(const std::string& dir, const char* what) {
  if (dir.empty()) throw ConfigError(std::string("no ") + what + " data directory configured");
  return scenes::load_scenes(dir);
}

void log_row(const train::HistoryRow& r) {
  std::fprintf(stderr, "[%s] epoch %zu steps %zu lr %.3g loss %.4f seg %.4f ce %.4f val mIoU %.2f cIoU %.2f\n",
               r.stage.c_str(), r.epoch, r.steps, r.lr, r.loss.total, r.seg_loss, r.loss.class_ce, r.val_miou,
               r.val_ciou);
}

// ------------------------------------------------------------------ commands

int cmd_gen(std::uint64_t seed, std::size_t n, const std::string& out) {
  scenes::SceneConfig sc;
  auto all = scenes::generate(seed, n, sc);
  auto kept = scenes::filter(all);
  if (kept.empty()) throw DataError("gen: every scene was filtered out");
  for (auto& s : kept) {
    const auto p = instructgen::build_prompt(s, instructgen::classify_arrangement(s));
    for (std::size_t i = 0; i < s.instances.size(); ++i)
      s.instances[i].description = instructgen::mock_description(p.instances[i], p.width, p.height);
  }
  scenes::save_scenes(out, kept);
  nlohmann::json st = scenes::stats(kept);
  st["generated"] = all.size();
  st["filtered_out"] = all.size() - kept.size();
  write_json(fs::path(out) / "stats.json", st);
  std::fprintf(stderr, "gen: kept %zu of %zu scenes in %s\n", kept.size(), all.size(), out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, bool single, const std::string& out_override) {
  RunConfig rc = load_run_config(config_path);
  if (!out_override.empty()) rc.out_dir = out_override;
  const fs::path out(rc.out_dir);
  fs::create_directories(out);
  write_json(out / "config.json", rc);

  const auto train_sc = load_dir(rc.data.train, "train");
  const auto val_sc = rc.data.val.empty() ? std::vector<scenes::Scene>{} : load_dir(rc.data.val, "val");
  const auto ground_sc =
      rc.data.grounding.empty() ? std::vector<scenes::Scene>{} : load_dir(rc.data.grounding, "grounding");
  const auto tr = train::prepare(train_sc, rc.model);
  const auto va = train::prepare(val_sc, rc.model);
  const auto gr = train::prepare(ground_sc, rc.model);

  Model<float> model(rc.model, rc.seed);
  train::TrainOptions opt;
  opt.seed = rc.seed;
  opt.weights = rc.loss;
  opt.optimizer = rc.optimizer;
  opt.validate_each_epoch = rc.validate_each_epoch;
  opt.on_epoch = log_row;
  opt.on_stage_end = [&](const std::string& stage) { checkpoint::save(model, out / stage); };
  const train::Datasets data{tr, gr, va};
  std::size_t steps = 0;
  const auto hist = single ? train::run_single_stage(model, data, rc.single_stage, opt, &steps)
                           : train::run_two_stage(model, data, rc.stage1, rc.stage2, opt, &steps);
  checkpoint::save(model, out / "model");
  write_text(out / "history.csv", train::history_csv(hist));
  std::fprintf(stderr, "train: %zu optimizer steps, checkpoint %s\n", steps, (out / "model").c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report, bool gt_classes) {
  const auto model = checkpoint::load<float>(ckpt);
  const auto sc = load_dir(data, "eval");
  const auto ex = train::prepare(sc, model.config());
  auto rep = train::evaluate(model, ex, gt_classes ? ClassSource::GroundTruth : ClassSource::Predicted);
  rep.subset = fs::path(data).filename().string();
  write_json(report, rep);
  std::fprintf(stderr, "eval: %zu targets, mIoU %.2f cIoU %.2f A@0.5 %.2f\n", rep.n_samples, rep.miou, rep.ciou,
               rep.a_at_05);
  return 0;
}

int cmd_ablate(const std::string& axis_name, const std::string& out, const std::string& config_path,
               std::vector<std::uint64_t> seeds, std::size_t train_n, std::size_t val_n, std::uint64_t data_seed) {
  const auto axis = ablation::axis_from_string(axis_name);
  RunConfig rc = config_path.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(config_path);
  std::vector<scenes::Scene> train_sc, val_sc;
  if (!rc.data.train.empty()) {
    train_sc = load_dir(rc.data.train, "train");
    val_sc = load_dir(rc.data.val, "val");
  } else {
    train_sc = scenes::filter(scenes::generate(data_seed, train_n));
    val_sc = scenes::filter(scenes::generate(data_seed + 1, val_n));
  }
  const auto tr = train::prepare(train_sc, rc.model);
  const auto va = train::prepare(val_sc, rc.model);
  ablation::GridOptions go;
  go.seeds = std::move(seeds);
  go.on_run = [](const std::string& row, std::uint64_t seed, const ablation::RunResult& r) {
    std::fprintf(stderr, "ablate: %s seed %llu mIoU %.2f cIoU %.2f steps %zu %.1fs\n", row.c_str(),
                 static_cast<unsigned long long>(seed), r.miou, r.ciou, r.steps, r.wall_s);
  };
  const auto res = ablation::run_grid(axis, ablation::cells(axis, rc.model), rc, tr, va, go);
  fs::create_directories(out);
  write_text(fs::path(out) / (ablation::to_string(axis) + ".csv"), ablation::csv(axis, res));
  int code = 0;
  for (const auto& c : res)
    if (!c.error.empty()) {
      std::fprintf(stderr, "ablate: cell '%s' failed: %s\n", c.row.c_str(), c.error.c_str());
      if (code == 0) code = c.exit_code;
    }
  return code;
}

int cmd_attn_dump(const std::string& ckpt, const std::string& scene_id, const std::string& data,
                  const std::string& out) {
  const auto model = checkpoint::load<float>(ckpt);
  const auto sc = load_dir(data, "scene");
  auto it = std::find_if(sc.begin(), sc.end(), [&](const scenes::Scene& s) { return s.id == scene_id; });
  if (it == sc.end()) throw UsageError("attn-dump: unknown scene id '" + scene_id + "' in " + data);
  attn::save(attn::compute(model, *it), out);
  std::fprintf(stderr, "attn-dump: wrote %s\n", (fs::path(out) / "index.json").c_str());
  return 0;
}

int cmd_describe(const std::string& data, const std::string& out, bool live) {
  const auto sc = load_dir(data, "scene");
  const auto reqs = instructgen::prompt_requests(sc);
  instructgen::ClientConfig cfg;
  if (live) cfg = instructgen::ClientConfig::from_env();
  const auto descs = instructgen::generate_descriptions(reqs, cfg);
  instructgen::write_finetune(out, instructgen::curate(descs, {}));
  std::fprintf(stderr, "describe: %zu records in %s\n", descs.size(), out.c_str());
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw ConfigError("--seeds: '" + tok + "' is not an unsigned integer");
    }
  }
  if (out.empty()) throw ConfigError("--seeds: at least one seed required");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geopix: desk-scale referring segmentation with class-wise memory"};
  app.require_subcommand(1);

  std::uint64_t gen_seed = 0;
  std::size_t gen_n = 0;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate, filter and save synthetic scenes");
  gen->add_option("--seed", gen_seed)->required();
  gen->add_option("--n", gen_n)->required()->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out)->required();

  std::string train_cfg, train_out;
  bool single = false;
  auto* tr = app.add_subcommand("train", "train a model from a run config");
  tr->add_option("--config", train_cfg)->required();
  tr->add_flag("--single-stage", single);
  tr->add_option("--out", train_out, "override out_dir");

  std::string ev_ckpt, ev_data, ev_report;
  bool ev_gt = false;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint stem")->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--report", ev_report)->required();
  ev->add_flag("--gt-classes", ev_gt, "retrieve memory with ground-truth classes");

  std::string ab_axis, ab_out, ab_cfg, ab_seeds = "1,2,3";
  std::size_t ab_train = 2000, ab_val = 400;
  std::uint64_t ab_data_seed = 1000;
  auto* ab = app.add_subcommand("ablate", "run an ablation grid and write CSV");
  ab->add_option("--axis", ab_axis)->required();
  ab->add_option("--out", ab_out)->required();
  ab->add_option("--config", ab_cfg, "protocol run config");
  ab->add_option("--seeds", ab_seeds, "comma separated");
  ab->add_option("--train-n", ab_train);
  ab->add_option("--val-n", ab_val);
  ab->add_option("--data-seed", ab_data_seed);

  std::string ad_ckpt, ad_scene, ad_data, ad_out;
  auto* ad = app.add_subcommand("attn-dump", "dump pre/post memory attention matrices for one scene");
  ad->add_option("--ckpt", ad_ckpt)->required();
  ad->add_option("--scene", ad_scene)->required();
  ad->add_option("--data", ad_data, "scene directory")->required();
  ad->add_option("--out", ad_out)->required();

  std::string ds_data, ds_out;
  bool ds_live = false;
  auto* ds = app.add_subcommand("describe", "build prompts and descriptions into a fine-tune JSONL");
  ds->add_option("--data", ds_data)->required();
  ds->add_option("--out", ds_out)->required();
  ds->add_flag("--live", ds_live, "call ENDPOINT_URL instead of the offline mock");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(gen_seed, gen_n, gen_out);
    if (*tr) return cmd_train(train_cfg, single, train_out);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_report, ev_gt);
    if (*ab) return cmd_ablate(ab_axis, ab_out, ab_cfg, parse_seeds(ab_seeds), ab_train, ab_val, ab_data_seed);
    if (*ad) return cmd_attn_dump(ad_ckpt, ad_scene, ad_data, ad_out);
    if (*ds) return cmd_describe(ds_data, ds_out, ds_live);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  }
  return 0;
}

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "geopix/checkpoint.hpp"
#include "geopix/metrics.hpp"
#include "geopix/predictor.hpp"
#include "geopix/scenes.hpp"

namespace geopix::train {

/// Non-finite loss during training; carries the global step index.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : NumericalError("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// --------------------------------------------------------------------- data

/// One scene prepared for the model: queries for every instance and ground
/// truth at mask resolution.
struct Example {
  std::string scene_id;
  Tensor image;
  std::vector<InstanceQuery> queries;
  std::vector<std::size_t> labels;
  Tensor target;                     // [K, H_p, W_p] in {0, 1}
  std::vector<BinaryMask> gt_masks;  // at mask resolution
  std::vector<double> theta;         // coverage at image resolution
  std::vector<scenes::BBox> gt_boxes;
};

inline Example prepare(const scenes::Scene& s, const ModelConfig& cfg) {
  if (s.height() != cfg.image_h || s.width() != cfg.image_w)
    throw DataError("scene " + s.id + ": image extent does not match the model config");
  if (s.instances.empty()) throw DataError("scene " + s.id + ": no instances");
  if (cfg.image_h % cfg.mask_h != 0 || cfg.image_w % cfg.mask_w != 0 || cfg.image_h / cfg.mask_h != cfg.image_w / cfg.mask_w)
    throw ConfigError("mask extent must divide the image extent by one common factor");
  const std::size_t factor = cfg.image_h / cfg.mask_h;
  Example e;
  e.scene_id = s.id;
  e.image = s.image;
  e.target = Tensor({s.instances.size(), cfg.mask_h, cfg.mask_w});
  const std::size_t plane = cfg.mask_h * cfg.mask_w;
  for (std::size_t k = 0; k < s.instances.size(); ++k) {
    const auto& inst = s.instances[k];
    if (inst.class_id >= cfg.classes) throw DataError("scene " + s.id + ": class id out of range");
    e.queries.push_back(make_query(inst.class_id, inst.bbox.x0, inst.bbox.y0, inst.bbox.x1, inst.bbox.y1,
                                   cfg.image_w, cfg.image_h));
    e.labels.push_back(inst.class_id);
    auto gt = metrics::downsample(rle_decode(inst.mask), factor);
    for (std::size_t i = 0; i < plane; ++i) e.target[k * plane + i] = gt.bits[i] ? 1.0f : 0.0f;
    e.gt_masks.push_back(std::move(gt));
    e.theta.push_back(scenes::coverage(inst));
    e.gt_boxes.push_back(inst.bbox);
  }
  return e;
}

inline std::vector<Example> prepare(std::span<const scenes::Scene> scenes, const ModelConfig& cfg) {
  std::vector<Example> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(prepare(s, cfg));
  return out;
}

// ------------------------------------------------------------------- losses

struct LossWeights {
  double bce = 2.0;
  double dice = 0.5;
  double ce = 1.0;
};

struct LossReport {
  double total = 0;
  double mask_bce = 0;
  double mask_dice = 0;
  double class_ce = 0;
};

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> bce;
  Var<T> dice;
};

inline void check_binary(std::span<const float> v) {
  for (float x : v)
    if (x != 0.0f && x != 1.0f) throw DomainError("mask_loss: ground truth must be binary");
}

/// weights.bce * BCE + weights.dice * Dice on mask logits.
template <typename T>
LossTerms<T> mask_loss(Var<T> logits, const BasicTensor<T>& gt, const LossWeights& w = {}) {
  for (std::size_t i = 0; i < gt.numel(); ++i)
    if (gt[i] != T{0} && gt[i] != T{1}) throw DomainError("mask_loss: ground truth must be binary");
  LossTerms<T> t;
  t.bce = ops::bce_with_logits(logits, gt);
  t.dice = ops::dice_loss(logits, gt);
  t.total = ops::add(ops::scale(t.bce, static_cast<T>(w.bce)), ops::scale(t.dice, static_cast<T>(w.dice)));
  return t;
}

// ----------------------------------------------------------------- schedule

/// Linear warm-up 0 -> peak over `warmup` steps, then cosine peak -> 0 at
/// step `total`.
inline double schedule(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
  if (total == 0 || warmup >= total) throw ConfigError("schedule: warm-up must be shorter than the stage");
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- optimizer

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double max_grad_norm = 1.0;  // 0 disables clipping
};

/// Decoupled weight decay Adam. Moments are keyed by parameter name.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig c = {}) : cfg_(c) {}

  template <typename Module>
  void step(Module& m, double lr) {
    double scale = 1.0;
    if (cfg_.max_grad_norm > 0) {
      double sq = 0;
      m.visit([&](const Parameter<T>& p) {
        if (!p.trainable || p.grad.empty()) return;
        for (T g : p.grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
      });
      const double norm = std::sqrt(sq);
      if (norm > cfg_.max_grad_norm) scale = cfg_.max_grad_norm / norm;
    }
    m.visit([&](Parameter<T>& p) {
      if (!p.trainable || p.grad.empty()) return;
      auto& s = state_[p.name];
      if (s.m.empty()) {
        s.m = BasicTensor<T>::zeros(p.value.shape());
        s.v = BasicTensor<T>::zeros(p.value.shape());
      }
      ++s.t;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
      const double wd = p.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = static_cast<double>(p.grad[i]) * scale;
        const double mi = cfg_.beta1 * static_cast<double>(s.m[i]) + (1 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(s.v[i]) + (1 - cfg_.beta2) * g * g;
        s.m[i] = static_cast<T>(mi);
        s.v[i] = static_cast<T>(vi);
        const double x = static_cast<double>(p.value[i]);
        const double upd = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) + wd * x;
        p.value[i] = static_cast<T>(x - lr * upd);
      }
    });
  }

 private:
  struct Slot {
    BasicTensor<T> m, v;
    std::size_t t = 0;
  };
  AdamWConfig cfg_;
  std::map<std::string, Slot> state_;
};

// ------------------------------------------------------------------- stages

struct StageConfig {
  std::string name = "stage";
  std::size_t epochs = 5;
  std::size_t warmup_epochs = 1;
  double peak_lr = 3e-4;
  double grounding_fraction = 0.5;
  double segmentation_fraction = 0.5;
  TrainScope scope = TrainScope::Wide;
  std::size_t batch_size = 16;

  void validate() const {
    if (epochs == 0) throw ConfigError(name + ": epochs must be >= 1");
    if (warmup_epochs >= epochs) throw ConfigError(name + ": warmup_epochs must be < epochs");
    if (batch_size == 0) throw ConfigError(name + ": batch_size must be >= 1");
    if (!(peak_lr >= 0.0)) throw ConfigError(name + ": peak_lr must be >= 0");
    if (grounding_fraction < 0 || segmentation_fraction <= 0 ||
        std::abs(grounding_fraction + segmentation_fraction - 1.0) > 1e-9)
      throw ConfigError(name + ": data-mix fractions must be non-negative and sum to 1");
  }
};

struct Datasets {
  std::span<const Example> train;      // segmentation data
  std::span<const Example> grounding;  // class-only data; empty -> reuse train
  std::span<const Example> val;
};

struct HistoryRow {
  std::string stage;
  std::size_t epoch = 0;  // global, 1-based
  std::size_t steps = 0;  // cumulative optimizer steps
  double lr = 0;          // at the last step of the epoch
  LossReport loss;        // epoch means
  double seg_loss = 0;    // bce/dice part only, mean over segmentation samples
  double val_miou = 0;
  double val_ciou = 0;
  std::size_t trainable = 0;
};

struct TrainOptions {
  LossWeights weights;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  bool validate_each_epoch = true;
  std::size_t eval_batch = 16;
  std::function<void(const HistoryRow&)> on_epoch;
  std::function<void(const std::string& stage)> on_stage_end;
};

struct Mixed {
  const Example* ex;
  bool grounding;
};

/// Per-epoch sample stream: every segmentation example once, plus
/// grounding examples in the configured ratio, shuffled together.
inline std::vector<Mixed> epoch_stream(const Datasets& d, const StageConfig& st, Rng& rng) {
  std::vector<Mixed> s;
  for (const auto& e : d.train) s.push_back({&e, false});
  const auto pool = d.grounding.empty() ? d.train : d.grounding;
  const auto n_ground = static_cast<std::size_t>(
      std::llround(static_cast<double>(d.train.size()) * st.grounding_fraction / st.segmentation_fraction));
  if (n_ground > 0 && pool.empty()) throw DataError("no grounding data");
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < n_ground; ++i) {
    if (i % pool.size() == 0) std::shuffle(idx.begin(), idx.end(), rng);
    s.push_back({&pool[idx[i % pool.size()]], true});
  }
  std::shuffle(s.begin(), s.end(), rng);
  return s;
}

inline std::size_t steps_per_epoch(const Datasets& d, const StageConfig& st) {
  const auto n_ground = static_cast<std::size_t>(
      std::llround(static_cast<double>(d.train.size()) * st.grounding_fraction / st.segmentation_fraction));
  return (d.train.size() + n_ground + st.batch_size - 1) / st.batch_size;
}

inline std::size_t stage_steps(const Datasets& d, const StageConfig& st) { return st.epochs * steps_per_epoch(d, st); }

// --------------------------------------------------------------- evaluation

template <typename T>
std::vector<metrics::TargetResult> evaluate_targets(const Model<T>& model, std::span<const Example> data,
                                                    ClassSource source = ClassSource::Predicted,
                                                    std::size_t batch = 16) {
  const auto& cfg = model.config();
  const int box_scale = static_cast<int>(cfg.image_w / cfg.mask_w);
  std::vector<metrics::TargetResult> out;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch) {
    Tape<T> tape(false);
    FusedCache<T> cache;
    for (std::size_t i = b0; i < std::min(data.size(), b0 + batch); ++i) {
      const auto& e = data[i];
      auto fw = model.forward(tape, tape.constant(e.image.template cast<T>()), e.queries, {source, false}, &cache);
      const auto& fm = fw.final_mask.value();
      const std::size_t plane = cfg.mask_h * cfg.mask_w;
      for (std::size_t k = 0; k < e.queries.size(); ++k) {
        std::vector<float> logits(plane);
        for (std::size_t j = 0; j < plane; ++j) logits[j] = static_cast<float>(fm[k * plane + j]);
        const auto pred = metrics::binarize(logits, cfg.mask_h, cfg.mask_w);
        metrics::TargetResult r;
        r.counts = metrics::mask_counts(pred, e.gt_masks[k]);
        r.theta = e.theta[k];
        r.pred_box = metrics::mask_box(pred, box_scale);
        r.gt_box = e.gt_boxes[k];
        out.push_back(r);
      }
    }
  }
  return out;
}

template <typename T>
metrics::EvalReport evaluate(const Model<T>& model, std::span<const Example> data,
                             ClassSource source = ClassSource::Predicted, std::size_t batch = 16) {
  const auto r = evaluate_targets(model, data, source, batch);
  return metrics::aggregate(r);
}

/// Fraction of targets whose argmax class equals the label.
template <typename T>
double class_accuracy(const Model<T>& model, std::span<const Example> data) {
  std::size_t ok = 0, n = 0;
  for (const auto& e : data) {
    Tape<T> tape(false);
    auto c = model.condition(tape, e.queries);
    const auto pred = ops::argmax(c.class_logits.value(), 1);
    for (std::size_t k = 0; k < pred.size(); ++k) ok += pred[k] == e.labels[k];
    n += pred.size();
  }
  return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

// ------------------------------------------------------------------ training

/// Loss of one mixed batch on `tape`, normalized by the batch size.
template <typename T>
std::pair<Var<T>, LossReport> batch_loss(Tape<T>& tape, const Model<T>& model, std::span<const Mixed> batch,
                                         const LossWeights& w, std::size_t* n_seg = nullptr) {
  FusedCache<T> cache;
  std::vector<Var<T>> terms;
  LossReport rep;
  std::size_t seg = 0;
  for (const auto& b : batch) {
    const Example& e = *b.ex;
    Var<T> ce;
    if (b.grounding) {
      ce = ops::cross_entropy(model.condition(tape, e.queries).class_logits, std::span<const std::size_t>(e.labels));
      terms.push_back(ops::scale(ce, static_cast<T>(w.ce)));
    } else {
      auto fw = model.forward(tape, tape.constant(e.image.template cast<T>()), e.queries,
                              {ClassSource::GroundTruth, false}, &cache);
      ce = ops::cross_entropy(fw.class_logits, std::span<const std::size_t>(e.labels));
      auto ml = mask_loss(fw.final_mask, e.target.template cast<T>(), w);
      terms.push_back(ops::add(ml.total, ops::scale(ce, static_cast<T>(w.ce))));
      rep.mask_bce += static_cast<double>(ml.bce.value()[0]);
      rep.mask_dice += static_cast<double>(ml.dice.value()[0]);
      ++seg;
    }
    rep.class_ce += static_cast<double>(ce.value()[0]);
  }
  auto total = ops::scale(ops::sum(ops::concat(terms, 0)), T{1} / static_cast<T>(batch.size()));
  rep.total = static_cast<double>(total.value()[0]);
  if (n_seg) *n_seg = seg;
  return {total, rep};
}

template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, Datasets data, TrainOptions opt)
      : model_(model), data_(data), opt_(std::move(opt)), rng_(opt_.seed ^ 0x5eedULL) {}

  const std::vector<HistoryRow>& history() const { return history_; }
  std::size_t total_steps() const { return step_; }

  /// Runs one stage with a fresh optimizer and its own warm-up/cosine cycle.
  void run_stage(const StageConfig& st) {
    st.validate();
    if (data_.train.empty()) throw DataError("training set is empty");
    model_.set_scope(st.scope);
    AdamW<T> opt(opt_.optimizer);
    const std::size_t per_epoch = steps_per_epoch(data_, st);
    const std::size_t total = st.epochs * per_epoch;
    const std::size_t warm = st.warmup_epochs * per_epoch;
    std::size_t local = 0;
    for (std::size_t ep = 0; ep < st.epochs; ++ep) {
      const auto stream = epoch_stream(data_, st, rng_);
      LossReport acc;
      double seg_sum = 0;
      std::size_t n_batches = 0, n_seg = 0, n_ground = 0;
      double lr = 0;
      for (std::size_t b0 = 0; b0 < stream.size(); b0 += st.batch_size) {
        const std::span<const Mixed> batch(stream.data() + b0, std::min(st.batch_size, stream.size() - b0));
        lr = schedule(local, total, warm, st.peak_lr);
        model_.visit([](const Parameter<T>& p) { p.zero_grad(); });
        Tape<T> tape;
        Var<T> loss;
        LossReport rep;
        std::size_t seg = 0;
        try {
          std::tie(loss, rep) = batch_loss(tape, model_, batch, opt_.weights, &seg);
          if (!std::isfinite(rep.total)) throw NumericalError("non-finite loss");
          tape.backward(loss);
        } catch (const NumericalError& e) {
          throw DivergenceError(step_, e.what());
        }
        opt.step(model_, lr);
        ++step_;
        ++local;
        ++n_batches;
        acc.total += rep.total;
        acc.mask_bce += rep.mask_bce;
        acc.mask_dice += rep.mask_dice;
        acc.class_ce += rep.class_ce;
        seg_sum += opt_.weights.bce * rep.mask_bce + opt_.weights.dice * rep.mask_dice;
        n_seg += seg;
        n_ground += batch.size() - seg;
      }
      HistoryRow row;
      row.stage = st.name;
      row.epoch = history_.size() + 1;
      row.steps = step_;
      row.lr = lr;
      row.loss.total = acc.total / static_cast<double>(n_batches);
      row.loss.mask_bce = n_seg ? acc.mask_bce / static_cast<double>(n_seg) : 0.0;
      row.loss.mask_dice = n_seg ? acc.mask_dice / static_cast<double>(n_seg) : 0.0;
      row.loss.class_ce = acc.class_ce / static_cast<double>(n_seg + n_ground);
      row.seg_loss = n_seg ? seg_sum / static_cast<double>(n_seg) : 0.0;
      row.trainable = model_.trainable_count();
      if (opt_.validate_each_epoch && !data_.val.empty()) {
        const auto rep = evaluate(model_, data_.val, ClassSource::Predicted, opt_.eval_batch);
        row.val_miou = rep.miou;
        row.val_ciou = rep.ciou;
      }
      history_.push_back(row);
      if (opt_.on_epoch) opt_.on_epoch(row);
    }
    if (opt_.on_stage_end) opt_.on_stage_end(st.name);
  }

 private:
  Model<T>& model_;
  Datasets data_;
  TrainOptions opt_;
  Rng rng_;
  std::vector<HistoryRow> history_;
  std::size_t step_ = 0;
};

/// Paper-style two-stage schedule: wide-scope mixed stage, then a narrowed
/// segmentation-heavy stage.
template <typename T>
std::vector<HistoryRow> run_two_stage(Model<T>& model, const Datasets& data, StageConfig stage1, StageConfig stage2,
                                      TrainOptions opt, std::size_t* steps = nullptr) {
  Trainer<T> tr(model, data, std::move(opt));
  tr.run_stage(stage1);
  tr.run_stage(stage2);
  if (steps) *steps = tr.total_steps();
  return tr.history();
}

template <typename T>
std::vector<HistoryRow> run_single_stage(Model<T>& model, const Datasets& data, StageConfig cfg, TrainOptions opt,
                                         std::size_t* steps = nullptr) {
  Trainer<T> tr(model, data, std::move(opt));
  tr.run_stage(cfg);
  if (steps) *steps = tr.total_steps();
  return tr.history();
}

inline std::string history_csv(std::span<const HistoryRow> rows) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,stage,steps,lr,loss,mask_bce,mask_dice,class_ce,seg_loss,val_miou,val_ciou,trainable_params\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.stage << ',' << r.steps << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.mask_bce
       << ',' << r.loss.mask_dice << ',' << r.loss.class_ce << ',' << r.seg_loss << ',' << r.val_miou << ','
       << r.val_ciou << ',' << r.trainable << '\n';
  return os.str();
}

}  // namespace geopix::train

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "geopix/rle.hpp"
#include "geopix/scenes.hpp"

namespace geopix::metrics {

struct IouCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
};

inline IouCounts mask_counts(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw DimensionError("mask_iou: extents " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width));
  IouCounts c;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    c.intersection += x && y;
    c.union_ += x || y;
  }
  return c;
}

/// |a and b| / |a or b|; 1.0 when both masks are empty.
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  const auto c = mask_counts(a, b);
  return c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_);
}

/// Logits [H, W] (row-major) binarized at 0.
inline BinaryMask binarize(std::span<const float> logits, std::size_t h, std::size_t w) {
  if (logits.size() != h * w) throw DimensionError("binarize: size mismatch");
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < logits.size(); ++i) m.bits[i] = logits[i] > 0.0f ? 1 : 0;
  return m;
}

/// Averages 2x2 blocks and keeps pixels with coverage >= 0.5, matching how
/// ground truth is compared at mask resolution.
inline BinaryMask downsample(const BinaryMask& m, std::size_t factor) {
  if (factor == 0 || m.height % factor || m.width % factor) throw ConfigError("downsample: extent not divisible");
  BinaryMask out(m.height / factor, m.width / factor);
  const std::size_t need = (factor * factor + 1) / 2;
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      std::size_t n = 0;
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) n += m.at(y * factor + dy, x * factor + dx) != 0;
      out.at(y, x) = n >= need ? 1 : 0;
    }
  return out;
}

inline bool degenerate(const scenes::BBox& b) { return b.width() <= 0 || b.height() <= 0; }

/// IoU of half-open boxes; 0 when either box has zero area.
inline double box_iou(const scenes::BBox& a, const scenes::BBox& b) {
  if (degenerate(a) || degenerate(b)) return 0.0;
  const long iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const long ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const long inter = iw * ih;
  const long uni = static_cast<long>(a.width()) * a.height() + static_cast<long>(b.width()) * b.height() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Tight box of a mask scaled by `scale`; a zero box for an empty mask.
inline scenes::BBox mask_box(const BinaryMask& m, int scale = 1) {
  if (m.area() == 0) return {};
  auto b = scenes::mask_bbox(m);
  return {b.x0 * scale, b.y0 * scale, b.x1 * scale, b.y1 * scale};
}

struct BoxAccuracy {
  double a_at_05 = 0;  // percent with IoU > 0.5
  double a_at_07 = 0;  // percent with IoU > 0.7
  std::size_t n = 0;
  std::size_t degenerate = 0;
};

/// pairs: (prediction, ground truth).
inline BoxAccuracy bbox_accuracy(std::span<const std::pair<scenes::BBox, scenes::BBox>> pairs) {
  if (pairs.empty()) throw UsageError("bbox_accuracy: empty prediction set");
  BoxAccuracy r;
  std::size_t c5 = 0, c7 = 0;
  for (const auto& [p, g] : pairs) {
    if (degenerate(p) || degenerate(g)) ++r.degenerate;
    const double iou = box_iou(p, g);
    c5 += iou > 0.5;
    c7 += iou > 0.7;
  }
  r.n = pairs.size();
  r.a_at_05 = 100.0 * static_cast<double>(c5) / static_cast<double>(r.n);
  r.a_at_07 = 100.0 * static_cast<double>(c7) / static_cast<double>(r.n);
  return r;
}

/// Per-target evaluation record.
struct TargetResult {
  IouCounts counts;
  double theta = 0;  // ground-truth coverage ratio
  scenes::BBox pred_box;
  scenes::BBox gt_box;
};

struct Stratum {
  double miou = 0;
  double ciou = 0;
  std::size_t n = 0;
};

struct EvalReport {
  std::string subset = "synthetic";
  double miou = 0;  // percent, mean of per-target IoU
  double ciou = 0;  // percent, sum of intersections over sum of unions
  std::map<scenes::SizeBin, Stratum> per_size;
  double a_at_05 = 0;
  double a_at_07 = 0;
  std::size_t n_samples = 0;
  std::size_t degenerate_boxes = 0;
};

namespace detail {

inline double iou_of(const IouCounts& c) {
  return c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_);
}

inline Stratum reduce(std::span<const TargetResult> rs) {
  Stratum s;
  double sum = 0;
  std::uint64_t i = 0, u = 0;
  for (const auto& r : rs) {
    sum += iou_of(r.counts);
    i += r.counts.intersection;
    u += r.counts.union_;
  }
  s.n = rs.size();
  s.miou = s.n ? 100.0 * sum / static_cast<double>(s.n) : 0.0;
  s.ciou = u ? 100.0 * static_cast<double>(i) / static_cast<double>(u) : 100.0;
  return s;
}

inline scenes::SizeBin bin_of(double theta) { return theta >= 1.0 ? scenes::SizeBin::Large : scenes::size_bin(theta); }

}  // namespace detail

inline EvalReport aggregate(std::span<const TargetResult> results, const std::string& subset = "synthetic") {
  if (results.empty()) throw UsageError("aggregate: no samples");
  EvalReport rep;
  rep.subset = subset;
  const Stratum all = detail::reduce(results);
  rep.miou = all.miou;
  rep.ciou = all.ciou;
  rep.n_samples = results.size();
  std::map<scenes::SizeBin, std::vector<TargetResult>> bins;
  for (const auto& r : results) bins[detail::bin_of(r.theta)].push_back(r);
  for (const auto& [b, rs] : bins) rep.per_size[b] = detail::reduce(rs);
  std::vector<std::pair<scenes::BBox, scenes::BBox>> boxes;
  for (const auto& r : results) boxes.emplace_back(r.pred_box, r.gt_box);
  const auto acc = bbox_accuracy(boxes);
  rep.a_at_05 = acc.a_at_05;
  rep.a_at_07 = acc.a_at_07;
  rep.degenerate_boxes = acc.degenerate;
  return rep;
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json sizes = nlohmann::json::object();
  for (const auto& [b, s] : r.per_size) sizes[scenes::to_string(b)] = {{"mIoU", s.miou}, {"cIoU", s.ciou}, {"n", s.n}};
  j = nlohmann::json{{"subset", r.subset},
                     {"mIoU", r.miou},
                     {"cIoU", r.ciou},
                     {"per_size", sizes},
                     {"A@0.5", r.a_at_05},
                     {"A@0.7", r.a_at_07},
                     {"n_samples", r.n_samples},
                     {"degenerate_boxes", r.degenerate_boxes},
                     {"miou_definition", "per-target"}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  try {
    r.subset = j.at("subset").get<std::string>();
    r.miou = j.at("mIoU").get<double>();
    r.ciou = j.at("cIoU").get<double>();
    r.a_at_05 = j.value("A@0.5", 0.0);
    r.a_at_07 = j.value("A@0.7", 0.0);
    r.n_samples = j.value("n_samples", std::size_t{0});
    r.degenerate_boxes = j.value("degenerate_boxes", std::size_t{0});
    r.per_size.clear();
    if (j.contains("per_size"))
      for (auto it = j.at("per_size").begin(); it != j.at("per_size").end(); ++it) {
        scenes::SizeBin b = it.key() == "small"    ? scenes::SizeBin::Small
                            : it.key() == "medium" ? scenes::SizeBin::Medium
                            : it.key() == "large"  ? scenes::SizeBin::Large
                                                   : throw DataError("report: unknown size bin '" + it.key() + "'");
        r.per_size[b] = {it->at("mIoU").get<double>(), it->at("cIoU").get<double>(), it->at("n").get<std::size_t>()};
      }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("eval report: ") + e.what());
  }
}

}  // namespace geopix::metrics

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "geopix/rle.hpp"
#include "geopix/tensor.hpp"

// Synthetic scenes: shape-family instances placed as isolated objects, lines
// or clusters, plus the dataset rules applied to them (count filter, bbox
// matching, coverage statistics, size bins) and the on-disk layout.

namespace geopix::scenes {

inline constexpr std::array<const char*, 6> kShapeNames = {"disk", "rectangle", "triangle", "l_shape", "bar", "cross"};

inline std::string class_name(std::size_t c) {
  return c < kShapeNames.size() ? kShapeNames[c] : "class_" + std::to_string(c);
}

enum class Arrangement { Isolated, Line, Clustered };

inline std::string to_string(Arrangement a) {
  switch (a) {
    case Arrangement::Isolated: return "isolated";
    case Arrangement::Line: return "line";
    case Arrangement::Clustered: return "clustered";
  }
  return "isolated";
}

inline Arrangement arrangement_from_string(const std::string& s) {
  if (s == "isolated") return Arrangement::Isolated;
  if (s == "line") return Arrangement::Line;
  if (s == "clustered") return Arrangement::Clustered;
  throw DataError("unknown arrangement '" + s + "'");
}

/// Half-open pixel box [x0, x1) x [y0, y1).
struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  double diagonal() const { return std::hypot(width(), height()); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Instance {
  std::size_t class_id = 0;
  BBox bbox;
  Rle mask;
  std::string description;
};

struct Group {
  std::vector<std::size_t> members;
  Arrangement arrangement = Arrangement::Isolated;
};

struct Scene {
  std::string id;
  Tensor image;  // [3, H, W], values in [0, 1]
  std::vector<Instance> instances;
  std::vector<Group> groups;

  std::size_t height() const { return image.extent(1); }
  std::size_t width() const { return image.extent(2); }
};

struct SceneConfig {
  std::size_t image_h = 48;
  std::size_t image_w = 48;
  std::size_t classes = 6;
  std::size_t min_groups = 1;
  std::size_t max_groups = 3;
  double p_line = 0.25;
  double p_cluster = 0.25;
  std::size_t group_min = 3;
  std::size_t group_max = 4;
  double size_min = 6.0;   // characteristic shape extent in pixels
  double size_max = 22.0;
  double cluster_radius = 20.0;  // max pairwise centre distance inside a cluster
  double noise = 0.03;
  std::size_t max_retries = 200;

  void validate() const {
    if (classes < 2) throw ConfigError("scene config: need at least 2 classes");
    if (image_h < 8 || image_w < 8) throw ConfigError("scene config: image too small");
    if (min_groups == 0 || min_groups > max_groups) throw ConfigError("scene config: bad group range");
    if (group_min < 2 || group_min > group_max) throw ConfigError("scene config: bad group size range");
    if (!(size_min > 0.0) || size_min > size_max) throw ConfigError("scene config: bad size range");
    if (p_line < 0 || p_cluster < 0 || p_line + p_cluster > 1.0) throw ConfigError("scene config: bad arrangement mix");
  }
};

// ---------------------------------------------------------------- geometry

struct ShapeSpec {
  std::size_t class_id = 0;
  double cx = 0, cy = 0;
  double size = 8;      // characteristic extent
  double aspect = 1;    // rectangles: height / width
  bool vertical = false;  // bars
};

/// Half extents of the shape's geometric bounding box.
inline std::pair<double, double> half_extent(const ShapeSpec& s) {
  const double r = 0.5 * s.size;
  switch (s.class_id % kShapeNames.size()) {
    case 1: return {r, r * s.aspect};
    case 4: return s.vertical ? std::pair{std::max(1.0, 0.1 * s.size), 0.8 * s.size}
                              : std::pair{0.8 * s.size, std::max(1.0, 0.1 * s.size)};
    default: return {r, r};
  }
}

/// Pixel-centre inside test for the shape family of `s.class_id`.
inline bool inside(const ShapeSpec& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  const double r = 0.5 * s.size;
  const double thick = std::max(1.0, s.size / 6.0);  // half thickness for L/cross
  switch (s.class_id % kShapeNames.size()) {
    case 0:  // disk
      return dx * dx + dy * dy <= r * r;
    case 1:  // rectangle
      return std::abs(dx) <= r && std::abs(dy) <= r * s.aspect;
    case 2: {  // triangle, apex up
      if (dy < -r || dy > r) return false;
      const double half_w = r * (dy + r) / (2.0 * r);
      return std::abs(dx) <= half_w;
    }
    case 3:  // L: left arm plus bottom arm
      if (std::abs(dx) > r || std::abs(dy) > r) return false;
      return dx <= -r + 2 * thick || dy >= r - 2 * thick;
    case 4: {  // bar
      const auto [hx, hy] = half_extent(s);
      return std::abs(dx) <= hx && std::abs(dy) <= hy;
    }
    case 5:  // cross
      if (std::abs(dx) > r || std::abs(dy) > r) return false;
      return std::abs(dx) <= thick || std::abs(dy) <= thick;
    default:
      return false;
  }
}

inline BinaryMask rasterize(const ShapeSpec& s, std::size_t h, std::size_t w) {
  BinaryMask m(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) m.at(y, x) = inside(s, x + 0.5, y + 0.5) ? 1 : 0;
  return m;
}

/// Tight box of a nonempty mask.
inline BBox mask_bbox(const BinaryMask& m) {
  int x0 = static_cast<int>(m.width), y0 = static_cast<int>(m.height), x1 = -1, y1 = -1;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        x0 = std::min(x0, static_cast<int>(x));
        y0 = std::min(y0, static_cast<int>(y));
        x1 = std::max(x1, static_cast<int>(x));
        y1 = std::max(y1, static_cast<int>(y));
      }
  if (x1 < 0) throw DataError("mask_bbox: empty mask");
  return {x0, y0, x1 + 1, y1 + 1};
}

/// Mask coverage ratio theta in (0, 1].
inline double coverage(const Instance& inst) {
  return static_cast<double>(rle_area(inst.mask)) / static_cast<double>(inst.mask.height * inst.mask.width);
}

// -------------------------------------------------------------- generation

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Occupancy grid with a one-pixel guard ring around every placed mask.
struct Canvas {
  std::size_t h, w;
  std::vector<std::uint8_t> taken;

  Canvas(std::size_t hh, std::size_t ww) : h(hh), w(ww), taken(hh * ww, 0) {}

  bool fits(const BinaryMask& m) const {
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i] && taken[i]) return false;
    return true;
  }
  void claim(const BinaryMask& m) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!m.at(y, x)) continue;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
            if (yy >= 0 && xx >= 0 && yy < static_cast<std::ptrdiff_t>(h) && xx < static_cast<std::ptrdiff_t>(w))
              taken[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] = 1;
          }
      }
  }
};

inline bool within_image(const ShapeSpec& s, const SceneConfig& cfg) {
  const auto [hx, hy] = half_extent(s);
  return s.cx - hx >= 0.5 && s.cy - hy >= 0.5 && s.cx + hx <= cfg.image_w - 0.5 && s.cy + hy <= cfg.image_h - 0.5;
}

inline ShapeSpec sample_shape(Rng& rng, std::size_t cls, const SceneConfig& cfg) {
  ShapeSpec s;
  s.class_id = cls;
  // Log-uniform size so small, medium and large coverage all occur.
  s.size = std::exp(uniform(rng, std::log(cfg.size_min), std::log(cfg.size_max)));
  s.aspect = uniform(rng, 0.55, 1.0);
  s.vertical = uniform(rng, 0.0, 1.0) < 0.5;
  return s;
}

inline std::array<float, 3> contrasting_colour(Rng& rng, const std::array<float, 3>& bg) {
  for (;;) {
    std::array<float, 3> c{};
    double diff = 0;
    for (int k = 0; k < 3; ++k) {
      c[k] = static_cast<float>(uniform(rng, 0.0, 1.0));
      diff += std::abs(c[k] - bg[k]);
    }
    if (diff / 3.0 >= 0.3) return c;
  }
}

// Tries to place one group; on success appends masks/specs and returns true.
inline bool place_group(Rng& rng, const SceneConfig& cfg, Arrangement kind, std::size_t cls, std::size_t count,
                        Canvas& canvas, std::vector<std::pair<ShapeSpec, BinaryMask>>& out) {
  const ShapeSpec proto = sample_shape(rng, cls, cfg);
  std::vector<ShapeSpec> specs;
  if (kind == Arrangement::Isolated) {
    ShapeSpec s = proto;
    s.cx = std::round(uniform(rng, 0, static_cast<double>(cfg.image_w)));
    s.cy = std::round(uniform(rng, 0, static_cast<double>(cfg.image_h)));
    specs.push_back(s);
  } else if (kind == Arrangement::Line) {
    const auto [hx, hy] = half_extent(proto);
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    const double ux = std::cos(theta), uy = std::sin(theta);
    // Support of the shape along the line direction, plus a gap.
    const double step = 2.0 * (std::abs(ux) * hx + std::abs(uy) * hy) + uniform(rng, 2.0, 4.0);
    const double x0 = uniform(rng, 0, static_cast<double>(cfg.image_w));
    const double y0 = uniform(rng, 0, static_cast<double>(cfg.image_h));
    for (std::size_t i = 0; i < count; ++i) {
      ShapeSpec s = proto;
      s.cx = std::round(x0 + ux * step * static_cast<double>(i));
      s.cy = std::round(y0 + uy * step * static_cast<double>(i));
      specs.push_back(s);
    }
  } else {
    const double cx = uniform(rng, 0, static_cast<double>(cfg.image_w));
    const double cy = uniform(rng, 0, static_cast<double>(cfg.image_h));
    std::normal_distribution<double> g(0.0, cfg.cluster_radius / 4.0);
    for (std::size_t i = 0; i < count; ++i) {
      ShapeSpec s = sample_shape(rng, cls, cfg);
      s.size = std::min(s.size, proto.size);
      double ox = 0, oy = 0;
      do {
        ox = g(rng);
        oy = g(rng);
      } while (std::hypot(ox, oy) >= cfg.cluster_radius / 2.0);
      s.cx = std::round(cx + ox);
      s.cy = std::round(cy + oy);
      specs.push_back(s);
    }
  }
  Canvas trial = canvas;
  std::vector<std::pair<ShapeSpec, BinaryMask>> placed;
  for (const auto& s : specs) {
    if (!within_image(s, cfg)) return false;
    BinaryMask m = rasterize(s, cfg.image_h, cfg.image_w);
    if (m.area() == 0 || !trial.fits(m)) return false;
    trial.claim(m);
    placed.emplace_back(s, std::move(m));
  }
  if (kind == Arrangement::Clustered) {
    for (std::size_t i = 0; i < placed.size(); ++i)
      for (std::size_t j = i + 1; j < placed.size(); ++j) {
        const BBox a = mask_bbox(placed[i].second), b = mask_bbox(placed[j].second);
        if (std::hypot(a.cx() - b.cx(), a.cy() - b.cy()) >= cfg.cluster_radius) return false;
      }
  }
  canvas = std::move(trial);
  for (auto& p : placed) out.push_back(std::move(p));
  return true;
}

inline void render(Rng& rng, const SceneConfig& cfg, Scene& scene,
                   const std::vector<std::pair<ShapeSpec, BinaryMask>>& shapes) {
  const std::size_t h = cfg.image_h, w = cfg.image_w;
  std::array<float, 3> bg{};
  std::array<float, 3> grad{};
  for (int k = 0; k < 3; ++k) {
    bg[k] = static_cast<float>(uniform(rng, 0.2, 0.8));
    grad[k] = static_cast<float>(uniform(rng, -0.1, 0.1));
  }
  Tensor img({3, h, w});
  for (int k = 0; k < 3; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        img.at({static_cast<std::size_t>(k), y, x}) =
            bg[k] + grad[k] * static_cast<float>((static_cast<double>(x) + y) / static_cast<double>(h + w) - 0.5);
  for (const auto& [spec, mask] : shapes) {
    const auto col = contrasting_colour(rng, bg);
    for (int k = 0; k < 3; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          if (mask.at(y, x)) img.at({static_cast<std::size_t>(k), y, x}) = col[k];
  }
  std::normal_distribution<double> n(0.0, cfg.noise);
  for (auto& v : img.values()) v = std::clamp(v + static_cast<float>(n(rng)), 0.0f, 1.0f);
  scene.image = std::move(img);
}

}  // namespace detail

inline Scene generate_scene(Rng& rng, const std::string& id, const SceneConfig& cfg) {
  for (std::size_t attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Scene scene;
    scene.id = id;
    detail::Canvas canvas(cfg.image_h, cfg.image_w);
    std::vector<std::pair<ShapeSpec, BinaryMask>> shapes;
    const std::size_t n_groups = detail::pick(rng, cfg.min_groups, cfg.max_groups);
    bool ok = true;
    for (std::size_t g = 0; g < n_groups && ok; ++g) {
      const double u = detail::uniform(rng, 0.0, 1.0);
      const Arrangement kind =
          u < cfg.p_line ? Arrangement::Line : (u < cfg.p_line + cfg.p_cluster ? Arrangement::Clustered : Arrangement::Isolated);
      const std::size_t cls = detail::pick(rng, 0, cfg.classes - 1);
      const std::size_t count = kind == Arrangement::Isolated ? 1 : detail::pick(rng, cfg.group_min, cfg.group_max);
      const std::size_t first = shapes.size();
      bool placed = false;
      for (std::size_t t = 0; t < 50 && !placed; ++t) placed = detail::place_group(rng, cfg, kind, cls, count, canvas, shapes);
      if (!placed) {
        ok = false;
        break;
      }
      Group grp;
      grp.arrangement = kind;
      for (std::size_t i = first; i < shapes.size(); ++i) grp.members.push_back(i);
      scene.groups.push_back(std::move(grp));
    }
    if (!ok) continue;
    for (const auto& [spec, mask] : shapes) {
      Instance inst;
      inst.class_id = spec.class_id;
      inst.bbox = mask_bbox(mask);
      inst.mask = rle_encode(mask);
      inst.description = class_name(spec.class_id);
      scene.instances.push_back(std::move(inst));
    }
    detail::render(rng, cfg, scene, shapes);
    return scene;
  }
  throw DataError("generate: could not place instances for scene " + id + " after " +
                  std::to_string(cfg.max_retries) + " attempts");
}

inline std::string scene_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%06zu", i);
  return buf;
}

/// Scene i is drawn from its own stream seeded by (seed, i), so any subset
/// can be regenerated independently.
inline std::vector<Scene> generate(std::uint64_t seed, std::size_t n, const SceneConfig& cfg = {}) {
  cfg.validate();
  std::vector<Scene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
    Rng rng(seq);
    out.push_back(generate_scene(rng, scene_id(i), cfg));
  }
  return out;
}

// ------------------------------------------------------------------ filter

struct FilterRule {
  std::size_t max_per_class = 4;  // "below five"
  std::size_t max_total = 11;     // "does not exceed eleven"
};

inline bool passes_filter(const Scene& s, const FilterRule& rule = {}) {
  if (s.instances.size() > rule.max_total) return false;
  std::map<std::size_t, std::size_t> per_class;
  for (const auto& inst : s.instances)
    if (++per_class[inst.class_id] > rule.max_per_class) return false;
  return true;
}

inline std::vector<Scene> filter(std::vector<Scene> scenes, const FilterRule& rule = {}) {
  std::erase_if(scenes, [&](const Scene& s) { return !passes_filter(s, rule); });
  return scenes;
}

// ---------------------------------------------------------------- matching

struct BoxMatch {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (index in a, index in b), sorted by a
  std::vector<std::size_t> unmatched_a;
  std::vector<std::size_t> unmatched_b;
};

inline int max_delta(const BBox& a, const BBox& b) {
  return std::max({std::abs(a.x0 - b.x0), std::abs(a.y0 - b.y0), std::abs(a.x1 - b.x1), std::abs(a.y1 - b.y1)});
}

/// Greedy one-to-one pairing of boxes whose four coordinates all differ by at
/// most `tol`; ties go to the smaller max-delta, then the lower indices.
inline BoxMatch match_bboxes(std::span<const BBox> a, std::span<const BBox> b, int tol = 10) {
  if (tol < 0) throw UsageError("match_bboxes: negative tolerance");
  struct Cand {
    int delta;
    std::size_t i, j;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (int d = max_delta(a[i], b[j]); d <= tol) cands.push_back({d, i, j});
  std::sort(cands.begin(), cands.end(),
            [](const Cand& x, const Cand& y) { return std::tie(x.delta, x.i, x.j) < std::tie(y.delta, y.i, y.j); });
  std::vector<bool> used_a(a.size(), false), used_b(b.size(), false);
  BoxMatch m;
  for (const auto& c : cands) {
    if (used_a[c.i] || used_b[c.j]) continue;
    used_a[c.i] = used_b[c.j] = true;
    m.pairs.emplace_back(c.i, c.j);
  }
  std::sort(m.pairs.begin(), m.pairs.end());
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!used_a[i]) m.unmatched_a.push_back(i);
  for (std::size_t j = 0; j < b.size(); ++j)
    if (!used_b[j]) m.unmatched_b.push_back(j);
  return m;
}

// --------------------------------------------------------------- statistics

struct SubsetStats {
  std::string subset;
  std::size_t n_images = 0;
  std::size_t n_categories = 0;
  std::size_t n_instances = 0;
  std::size_t image_size = 0;
  double avg_phi = 0;    // instances per image
  double avg_theta = 0;  // mean mask coverage, percent
};

inline SubsetStats stats(std::span<const Scene> scenes, const std::string& subset = "synthetic") {
  if (scenes.empty()) throw UsageError("stats: empty scene set");
  SubsetStats s;
  s.subset = subset;
  s.n_images = scenes.size();
  s.image_size = scenes.front().width();
  std::set<std::size_t> cats;
  double theta_sum = 0;
  for (const auto& sc : scenes)
    for (const auto& inst : sc.instances) {
      cats.insert(inst.class_id);
      theta_sum += 100.0 * coverage(inst);
      ++s.n_instances;
    }
  s.n_categories = cats.size();
  s.avg_phi = static_cast<double>(s.n_instances) / static_cast<double>(s.n_images);
  s.avg_theta = s.n_instances ? theta_sum / static_cast<double>(s.n_instances) : 0.0;
  return s;
}

inline void to_json(nlohmann::json& j, const SubsetStats& s) {
  j = nlohmann::json{{"Subset", s.subset},    {"#Img.", s.n_images},    {"#Cat.", s.n_categories},
                     {"#Inst.", s.n_instances}, {"Size", s.image_size}, {"Avg. phi", s.avg_phi},
                     {"Avg. theta", s.avg_theta}};
}

inline void from_json(const nlohmann::json& j, SubsetStats& s) {
  try {
    s.subset = j.at("Subset").get<std::string>();
    s.n_images = j.at("#Img.").get<std::size_t>();
    s.n_categories = j.at("#Cat.").get<std::size_t>();
    s.n_instances = j.at("#Inst.").get<std::size_t>();
    s.image_size = j.at("Size").get<std::size_t>();
    s.avg_phi = j.at("Avg. phi").get<double>();
    s.avg_theta = j.at("Avg. theta").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("stats report: ") + e.what());
  }
}

// ---------------------------------------------------------------- size bins

enum class SizeBin { Small, Medium, Large };

inline std::string to_string(SizeBin b) {
  switch (b) {
    case SizeBin::Small: return "small";
    case SizeBin::Medium: return "medium";
    case SizeBin::Large: return "large";
  }
  return "small";
}

/// Boundaries 0.01 and 0.1 fall into the larger bin.
inline SizeBin size_bin(double theta) {
  if (!(theta > 0.0 && theta < 1.0)) throw DomainError("size_bin: theta must lie in (0, 1)");
  if (theta < 0.01) return SizeBin::Small;
  if (theta < 0.1) return SizeBin::Medium;
  return SizeBin::Large;
}

// ---------------------------------------------------------------------- I/O

inline nlohmann::json scene_record(const Scene& s) {
  nlohmann::json inst = nlohmann::json::array();
  for (const auto& i : s.instances)
    inst.push_back({{"class_id", i.class_id},
                    {"category", class_name(i.class_id)},
                    {"bbox", {i.bbox.x0, i.bbox.y0, i.bbox.x1, i.bbox.y1}},
                    {"mask", i.mask},
                    {"description", i.description}});
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : s.groups) groups.push_back({{"members", g.members}, {"arrangement", to_string(g.arrangement)}});
  return {{"id", s.id},
          {"height", s.height()},
          {"width", s.width()},
          {"image", "images/" + s.id + ".f32bin"},
          {"instances", inst},
          {"groups", groups}};
}

inline void write_f32(const std::filesystem::path& p, std::span<const float> v) {
  static_assert(std::endian::native == std::endian::little, "f32bin files are little-endian");
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write " + p.string());
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!f) throw DataError("short write to " + p.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& p, std::size_t expected) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot read " + p.string());
  const auto bytes = static_cast<std::size_t>(f.tellg());
  if (bytes != expected * sizeof(float))
    throw DataError(p.string() + ": expected " + std::to_string(expected * sizeof(float)) + " bytes, found " +
                    std::to_string(bytes));
  std::vector<float> v(expected);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  return v;
}

/// Writes `dir/scenes.jsonl` and `dir/images/<id>.f32bin`.
inline void save_scenes(const std::filesystem::path& dir, std::span<const Scene> scenes) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream out(dir / "scenes.jsonl", std::ios::binary);
  if (!out) throw DataError("cannot write " + (dir / "scenes.jsonl").string());
  for (const auto& s : scenes) {
    out << scene_record(s).dump() << '\n';
    write_f32(dir / "images" / (s.id + ".f32bin"), s.image.values());
  }
}

inline Scene parse_scene(const nlohmann::json& j, const std::filesystem::path& dir) {
  try {
    Scene s;
    s.id = j.at("id").get<std::string>();
    const auto h = j.at("height").get<std::size_t>(), w = j.at("width").get<std::size_t>();
    s.image = Tensor({3, h, w}, read_f32(dir / j.at("image").get<std::string>(), 3 * h * w));
    for (const auto& ji : j.at("instances")) {
      Instance i;
      i.class_id = ji.at("class_id").get<std::size_t>();
      const auto b = ji.at("bbox").get<std::vector<int>>();
      if (b.size() != 4) throw DataError("scene " + s.id + ": bbox needs 4 values");
      i.bbox = {b[0], b[1], b[2], b[3]};
      i.mask = ji.at("mask").get<Rle>();
      if (i.mask.height != h || i.mask.width != w) throw DataError("scene " + s.id + ": mask extent mismatch");
      i.description = ji.value("description", std::string{});
      s.instances.push_back(std::move(i));
    }
    if (j.contains("groups"))
      for (const auto& jg : j.at("groups"))
        s.groups.push_back({jg.at("members").get<std::vector<std::size_t>>(),
                            arrangement_from_string(jg.at("arrangement").get<std::string>())});
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("scene record: ") + e.what());
  }
}

inline std::vector<Scene> load_scenes(const std::filesystem::path& dir) {
  std::ifstream in(dir / "scenes.jsonl");
  if (!in) throw DataError("cannot open " + (dir / "scenes.jsonl").string());
  std::vector<Scene> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("scenes.jsonl:" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(parse_scene(j, dir));
  }
  return out;
}

}  // namespace geopix::scenes

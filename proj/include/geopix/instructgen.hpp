#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "geopix/scenes.hpp"

// Description pipeline: arrangement grouping, prompt text, and a client that
// either calls an HTTP endpoint or fills a fixed template offline.

namespace geopix::instructgen {

using scenes::Arrangement;

struct ArrangementGroup {
  std::vector<std::size_t> members;  // ascending instance indices
  Arrangement label = Arrangement::Isolated;
  friend bool operator==(const ArrangementGroup&, const ArrangementGroup&) = default;
};

struct ArrangementReport {
  std::vector<ArrangementGroup> groups;  // ordered by first member
  double tau = 0;                        // linkage distance used
};

struct ArrangementParams {
  double tau_factor = 3.0;  // x median bbox diagonal
  double line_eps = 1.5;    // px, max orthogonal residual to the TLS line
};

/// Largest orthogonal distance from the total-least-squares line through pts.
inline double line_residual(const std::vector<std::pair<double, double>>& pts) {
  if (pts.size() < 2) return 0.0;
  double mx = 0, my = 0;
  for (auto [x, y] : pts) mx += x, my += y;
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxx = 0, syy = 0, sxy = 0;
  for (auto [x, y] : pts) {
    sxx += (x - mx) * (x - mx);
    syy += (y - my) * (y - my);
    sxy += (x - mx) * (y - my);
  }
  // principal direction of the 2x2 scatter matrix
  const double angle = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
  const double nx = -std::sin(angle), ny = std::cos(angle);
  double worst = 0;
  for (auto [x, y] : pts) worst = std::max(worst, std::abs((x - mx) * nx + (y - my) * ny));
  return worst;
}

inline ArrangementReport classify_arrangement(const scenes::Scene& scene, const ArrangementParams& p = {}) {
  const auto& inst = scene.instances;
  const std::size_t n = inst.size();
  if (n == 0) throw UsageError("classify_arrangement: scene '" + scene.id + "' has no instances");
  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = inst[i].bbox.diagonal();
  std::nth_element(diag.begin(), diag.begin() + static_cast<std::ptrdiff_t>(n / 2), diag.end());
  double median = diag[n / 2];
  if (n % 2 == 0) median = 0.5 * (median + *std::max_element(diag.begin(), diag.begin() + static_cast<std::ptrdiff_t>(n / 2)));

  ArrangementReport rep;
  rep.tau = p.tau_factor * median;
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto root = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (inst[i].class_id != inst[j].class_id) continue;
      const double d = std::hypot(inst[i].bbox.cx() - inst[j].bbox.cx(), inst[i].bbox.cy() - inst[j].bbox.cy());
      if (d <= rep.tau) parent[std::max(root(i), root(j))] = std::min(root(i), root(j));
    }
  std::map<std::size_t, std::vector<std::size_t>> by_root;
  for (std::size_t i = 0; i < n; ++i) by_root[root(i)].push_back(i);
  for (auto& [r, members] : by_root) {
    ArrangementGroup g{members, Arrangement::Isolated};
    if (members.size() >= 3) {
      std::vector<std::pair<double, double>> pts;
      for (auto m : members) pts.emplace_back(inst[m].bbox.cx(), inst[m].bbox.cy());
      g.label = line_residual(pts) < p.line_eps ? Arrangement::Line : Arrangement::Clustered;
    } else if (members.size() == 2) {
      g.label = Arrangement::Clustered;
    }
    rep.groups.push_back(std::move(g));
  }
  std::sort(rep.groups.begin(), rep.groups.end(),
            [](const auto& a, const auto& b) { return a.members.front() < b.members.front(); });
  return rep;
}

struct PromptLine {
  std::size_t index = 0;  // 1-based
  std::string category;
  double cx = 0, cy = 0;
  friend bool operator==(const PromptLine&, const PromptLine&) = default;
};

struct StructuredPrompt {
  std::string scene_id;
  std::size_t width = 0, height = 0;
  std::string instruction;
  std::vector<std::string> group_lines;
  std::vector<PromptLine> instances;

  std::string text() const;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline constexpr const char* kInstruction =
    "Write one referring description for each numbered object below so that a reader can pick it out of the "
    "image without ambiguity.\n"
    "If an object belongs to a line or a cluster, say where it sits inside that group first and then where the "
    "group lies in the image.\n"
    "Coordinates are pixel centres (x,y) with the origin at the top left.";

}  // namespace detail

inline std::string StructuredPrompt::text() const {
  std::string s = instruction;
  s += "\nImage: " + std::to_string(width) + "x" + std::to_string(height) + "\nGroups:\n";
  for (const auto& g : group_lines) s += "  " + g + "\n";
  s += "Objects:\n";
  for (const auto& l : instances)
    s += "  " + std::to_string(l.index) + ". " + l.category + " at (" + detail::num(l.cx) + "," + detail::num(l.cy) +
         ")\n";
  return s;
}

inline StructuredPrompt build_prompt(const scenes::Scene& scene, const ArrangementReport& report) {
  std::vector<int> seen(scene.instances.size(), 0);
  for (const auto& g : report.groups)
    for (auto m : g.members) {
      if (m >= seen.size()) throw IndexError("build_prompt: group member " + std::to_string(m) + " out of range");
      ++seen[m];
    }
  if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; }))
    throw UsageError("build_prompt: arrangement report does not partition scene '" + scene.id + "'");
  StructuredPrompt p;
  p.scene_id = scene.id;
  p.width = scene.width();
  p.height = scene.height();
  p.instruction = detail::kInstruction;
  for (const auto& g : report.groups) {
    std::string line = scenes::to_string(g.label) + ":";
    for (auto m : g.members) line += " " + std::to_string(m + 1);
    p.group_lines.push_back(std::move(line));
  }
  for (std::size_t i = 0; i < scene.instances.size(); ++i) {
    const auto& in = scene.instances[i];
    p.instances.push_back({i + 1, scenes::class_name(in.class_id), in.bbox.cx(), in.bbox.cy()});
  }
  return p;
}

/// Ninth of the image containing (x, y).
inline std::string position_word(double x, double y, std::size_t width, std::size_t height) {
  static constexpr const char* kWords[3][3] = {{"top left", "top", "top right"},
                                                {"left", "center", "right"},
                                                {"bottom left", "bottom", "bottom right"}};
  auto cell = [](double v, std::size_t extent) {
    const auto c = static_cast<long>(std::floor(3.0 * v / static_cast<double>(extent)));
    return static_cast<std::size_t>(std::clamp(c, 0L, 2L));
  };
  return kWords[cell(y, height)][cell(x, width)];
}

inline std::string mock_description(const PromptLine& l, std::size_t width, std::size_t height) {
  return "the " + l.category + " in the " + position_word(l.cx, l.cy, width, height) + " of the image";
}

/// One line per object: "<index>: <description>".
inline std::string mock_response(const StructuredPrompt& p) {
  std::string s;
  for (const auto& l : p.instances) s += std::to_string(l.index) + ": " + mock_description(l, p.width, p.height) + "\n";
  return s;
}

struct ClientConfig {
  bool mock = true;
  std::string endpoint;  // http://host[:port]/path
  std::string api_key;
  double timeout_s = 30.0;
  int retries = 2;
  double backoff_s = 0.25;  // doubled after each failed attempt
  std::size_t max_in_flight = 4;

  /// Live configuration from ENDPOINT_URL / API_KEY.
  static ClientConfig from_env() {
    ClientConfig c;
    const char* url = std::getenv("ENDPOINT_URL");
    if (!url || !*url) throw ConfigError("instructgen: ENDPOINT_URL is not set");
    c.mock = false;
    c.endpoint = url;
    if (const char* k = std::getenv("API_KEY")) c.api_key = k;
    return c;
  }
};

struct PromptRequest {
  std::string id;
  std::string image_ref;
  StructuredPrompt prompt;
};

struct Description {
  std::string id;
  std::string prompt;
  std::string text;
  friend bool operator==(const Description&, const Description&) = default;
};

class GenerationError : public DataError {
 public:
  GenerationError(const std::string& msg, std::vector<std::string> ids) : DataError(msg), failed_ids(std::move(ids)) {}
  std::vector<std::string> failed_ids;
};

namespace detail {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline Url split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("instructgen: endpoint '" + url + "' lacks a scheme");
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

// One request with retries; returns the text or nullopt after the budget is spent.
inline std::optional<std::string> post_with_retry(const ClientConfig& cfg, const Url& url, const nlohmann::json& body) {
  double wait = cfg.backoff_s;
  for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      wait *= 2;
    }
    httplib::Client cli(url.origin);
    const auto secs = static_cast<time_t>(cfg.timeout_s);
    const auto usecs = static_cast<time_t>((cfg.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    httplib::Headers headers;
    if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);
    auto res = cli.Post(url.path, headers, body.dump(), "application/json");
    if (!res || res->status != 200) continue;
    try {
      return nlohmann::json::parse(res->body).at("text").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      continue;
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Mock mode is offline and deterministic. Live mode POSTs
/// {"prompt", "image_ref"} and expects {"text"}; ids that still fail after the
/// retry budget are reported together in a GenerationError.
inline std::vector<Description> generate_descriptions(const std::vector<PromptRequest>& reqs, const ClientConfig& cfg) {
  std::vector<Description> out(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) out[i] = {reqs[i].id, reqs[i].prompt.text(), ""};
  if (cfg.mock) {
    for (std::size_t i = 0; i < reqs.size(); ++i) out[i].text = mock_response(reqs[i].prompt);
    return out;
  }
  if (cfg.retries < 0) throw ConfigError("instructgen: retry budget must be >= 0");
  if (cfg.max_in_flight == 0) throw ConfigError("instructgen: max_in_flight must be >= 1");
  const auto url = detail::split_url(cfg.endpoint);
  std::vector<char> ok(reqs.size(), 0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < reqs.size(); i = next++) {
      const nlohmann::json body{{"prompt", out[i].prompt}, {"image_ref", reqs[i].image_ref}};
      if (auto text = detail::post_with_retry(cfg, url, body)) {
        out[i].text = std::move(*text);
        ok[i] = 1;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(cfg.max_in_flight, reqs.size()); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  std::vector<std::string> failed;
  for (std::size_t i = 0; i < reqs.size(); ++i)
    if (!ok[i]) failed.push_back(reqs[i].id);
  if (!failed.empty()) {
    std::string msg = "instructgen: generation failed for";
    for (const auto& id : failed) msg += " " + id;
    throw GenerationError(msg, std::move(failed));
  }
  return out;
}

/// Requests for every scene, ids equal to scene ids.
inline std::vector<PromptRequest> prompt_requests(const std::vector<scenes::Scene>& scenes,
                                                  const ArrangementParams& p = {}) {
  std::vector<PromptRequest> reqs;
  for (const auto& s : scenes)
    reqs.push_back({s.id, "images/" + s.id + ".f32bin", build_prompt(s, classify_arrangement(s, p))});
  return reqs;
}

struct FinetuneRecord {
  std::string prompt;
  std::string response;
  friend bool operator==(const FinetuneRecord&, const FinetuneRecord&) = default;
};

/// Applies hand edits (keyed by description id) and returns fine-tune pairs.
inline std::vector<FinetuneRecord> curate(const std::vector<Description>& descs,
                                          const std::map<std::string, std::string>& edits) {
  std::vector<FinetuneRecord> out;
  out.reserve(descs.size());
  for (const auto& d : descs) {
    auto it = edits.find(d.id);
    out.push_back({d.prompt, it == edits.end() ? d.text : it->second});
  }
  for (const auto& [id, text] : edits)
    if (std::none_of(descs.begin(), descs.end(), [&](const Description& d) { return d.id == id; }))
      throw UsageError("curate: edit for unknown id '" + id + "'");
  return out;
}

inline void write_finetune(const std::filesystem::path& path, const std::vector<FinetuneRecord>& recs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_finetune: cannot open " + path.string());
  for (const auto& r : recs) f << nlohmann::json{{"prompt", r.prompt}, {"response", r.response}}.dump() << '\n';
}

inline std::vector<FinetuneRecord> read_finetune(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("read_finetune: cannot open " + path.string());
  std::vector<FinetuneRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("prompt").get<std::string>(), j.at("response").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace geopix::instructgen

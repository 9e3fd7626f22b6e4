#pragma once

// Experiment configs, orchestration and artifacts (fields, JSON, CSV, SVG).

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "otgeo/diagnostics.hpp"
#include "otgeo/elliptic_solver.hpp"
#include "otgeo/field_io.hpp"
#include "otgeo/marginals.hpp"
#include "otgeo/oracles.hpp"
#include "otgeo/prox_solver.hpp"

namespace otgeo {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// config

struct ExperimentConfig {
  // grid
  int dim = 1, n_space = 64, n_time = 32;
  double horizon = 1.0, length = 1.0;
  std::string metric = "flat";
  Params metric_params;
  // marginals and reference
  MarginalSpec marginals;
  std::string reference = "zero";
  Params reference_params;
  std::string reference_file;
  // solver
  std::string method = "prox";
  std::vector<double> eps{0.1};
  bool sweep = false;
  ProxConfig prox;
  EllipticConfig elliptic;
  // diagnostics
  std::vector<std::string> checks{"energy", "duality"};
  std::vector<std::string> required;
  bool required_given = false;
  double window_a = 0.25, window_b = 0.75;
  double time_scaling_horizon = 2.0;
  double heat_beta = 2.0, heat_delta0 = 1.0 / 3.0, heat_delta1 = 2.0 / 3.0;
  std::vector<double> interior_peaks{4.0, 40.0};
  double interior_floor = 0.001;
  // output
  std::string out_dir = "out";
  std::vector<std::string> formats{"fields", "json", "csv", "svg"};

  bool wants(const std::string& f) const { return std::find(formats.begin(), formats.end(), f) != formats.end(); }
  bool has_check(const std::string& c) const { return std::find(checks.begin(), checks.end(), c) != checks.end(); }
  // method is "" for checks that are not tied to one solver run. The elliptic
  // duality gap is a discretization error of that scheme, so advisory by default.
  bool is_required(const std::string& c, const std::string& method = "") const {
    if (required_given)
      return std::find(required.begin(), required.end(), c) != required.end() ||
             (!method.empty() && std::find(required.begin(), required.end(), c + "_" + method) != required.end());
    if (c == "duality") return method != "elliptic";
    return c == "energy" || c == "heat_upper_bound" || c == "stationary_closed_form";
  }
};

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {}

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }
  ConfigReader at(const std::string& key) const {
    if (!has(key)) fail(key, "missing");
    return {j_.at(key), path_ + "." + key};
  }
  std::optional<ConfigReader> opt(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return ConfigReader(j_.at(key), path_ + "." + key);
  }

  double number(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_number()) fail(key, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(key, "must be finite");
    return d;
  }
  int integer(const std::string& key, int fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    return v.get<int>();
  }
  bool boolean(const std::string& key, bool fallback = false) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }
  std::vector<double> numbers(const std::string& key) const {
    const Json& v = j_.at(key);
    if (!v.is_array()) fail(key, "expected an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number()) fail(key, "expected an array of numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }
  std::vector<std::string> strings(const std::string& key) const {
    const Json& v = j_.at(key);
    if (!v.is_array()) fail(key, "expected an array of strings");
    std::vector<std::string> out;
    for (const auto& x : v) {
      if (!x.is_string()) fail(key, "expected an array of strings");
      out.push_back(x.get<std::string>());
    }
    return out;
  }
  Params params(const std::string& key) const {
    Params p;
    if (!has(key)) return p;
    const Json& v = j_.at(key);
    if (!v.is_object()) fail(key, "expected an object of numbers");
    for (const auto& [k, x] : v.items()) {
      if (!x.is_number()) fail(key + "." + k, "expected a number");
      p[k] = x.get<double>();
    }
    return p;
  }
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(path_ + "." + key + ": " + what);
  }

 private:
  const Json& j_;
  std::string path_;
};

inline const std::vector<std::string>& known_checks() {
  static const std::vector<std::string> ids{"energy",         "duality",         "displacement_convexity",
                                            "heat_upper_bound", "potential_bounds", "time_scaling",
                                            "interior_bounds", "cross_method",     "stationary_closed_form"};
  return ids;
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  detail::ConfigReader root(j, "config");
  ExperimentConfig c;

  const auto grid = root.at("grid");
  c.dim = grid.integer("dim", c.dim);
  c.n_space = grid.integer("n_space", c.n_space);
  c.n_time = grid.integer("n_time", c.n_time);
  c.horizon = grid.number("horizon", c.horizon);
  c.length = grid.number("length", c.length);
  if (c.dim != 1 && c.dim != 2) grid.fail("dim", "must be 1 or 2");
  if (c.n_space < 4) grid.fail("n_space", "must be >= 4");
  if (c.n_time < 2) grid.fail("n_time", "must be >= 2");
  if (!(c.horizon > 0.0)) grid.fail("horizon", "must be positive");
  if (!(c.length > 0.0)) grid.fail("length", "must be positive");
  if (auto m = grid.opt("metric")) {
    c.metric = m->string("profile", c.metric);
    c.metric_params = m->params("params");
  }
  if (c.metric != "flat" && c.metric != "sine") grid.fail("metric.profile", "unknown profile '" + c.metric + "'");
  if (c.metric != "flat" && c.dim != 1) grid.fail("metric.profile", "a conformal metric needs dim = 1");

  if (auto m = root.opt("marginals")) {
    c.marginals.family = m->string("family", c.marginals.family);
    c.marginals.params = m->params("params");
    c.marginals.smoothing_steps = m->integer("smoothing_steps", 0);
    if (c.marginals.smoothing_steps < 0) m->fail("smoothing_steps", "must be >= 0");
    if (c.marginals.family == "file") {
      if (!m->has("files")) m->fail("files", "the file family needs two paths");
      const auto files = m->strings("files");
      if (files.size() != 2) m->fail("files", "the file family needs two paths");
      c.marginals.file0 = files[0];
      c.marginals.file1 = files[1];
    }
    static const std::vector<std::string> families{"uniform", "stationary", "bump_pair", "step", "point_like", "file"};
    if (std::find(families.begin(), families.end(), c.marginals.family) == families.end())
      m->fail("family", "unknown family '" + c.marginals.family + "'");
  }
  if (auto r = root.opt("reference")) {
    c.reference = r->string("profile", c.reference);
    c.reference_params = r->params("params");
    c.reference_file = r->string("file", "");
    if (c.reference != "zero" && c.reference != "cosine" && c.reference != "file")
      r->fail("profile", "unknown profile '" + c.reference + "'");
  }

  const auto solver = root.at("solver");
  c.method = solver.string("method", c.method);
  if (c.method != "prox" && c.method != "elliptic" && c.method != "both")
    solver.fail("method", "must be prox, elliptic or both");
  if (solver.has("eps_list")) {
    c.eps = solver.numbers("eps_list");
    c.sweep = true;
  } else {
    c.eps = {solver.number("eps", 0.1)};
  }
  if (c.eps.empty()) solver.fail("eps_list", "must not be empty");
  for (std::size_t i = 0; i < c.eps.size(); ++i) {
    if (!(c.eps[i] > 0.0)) solver.fail(c.sweep ? "eps_list" : "eps", "must be > 0");
    if (i > 0 && !(c.eps[i] < c.eps[i - 1])) solver.fail("eps_list", "must be strictly decreasing");
  }
  if (auto p = solver.opt("prox")) {
    c.prox.penalty = p->number("penalty", c.prox.penalty);
    c.prox.max_outer_iterations = p->integer("max_outer_iterations", c.prox.max_outer_iterations);
    c.prox.constraint_tolerance = p->number("constraint_tolerance", c.prox.constraint_tolerance);
    c.prox.prox_tolerance = p->number("prox_tolerance", c.prox.prox_tolerance);
    c.prox.stagnation_window = p->integer("stagnation_window", c.prox.stagnation_window);
    c.prox.stagnation_tolerance = p->number("stagnation_tolerance", c.prox.stagnation_tolerance);
    c.prox.gap_tolerance = p->number("gap_tolerance", c.prox.gap_tolerance);
    c.prox.adaptive_penalty = p->boolean("adaptive_penalty", c.prox.adaptive_penalty);
    try {
      c.prox.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config.solver.prox: " + std::string(e.what()));
    }
  }
  if (auto e = solver.opt("elliptic")) {
    c.elliptic.delta_start = e->number("delta_start", c.elliptic.delta_start);
    c.elliptic.delta_final = e->number("delta_final", c.elliptic.delta_final);
    c.elliptic.newton_tolerance = e->number("newton_tolerance", c.elliptic.newton_tolerance);
    c.elliptic.max_newton_iterations = e->integer("max_newton_iterations", c.elliptic.max_newton_iterations);
    c.elliptic.max_bisections = e->integer("max_bisections", c.elliptic.max_bisections);
    if (!(c.elliptic.delta_final > 0.0) || c.elliptic.delta_final > c.elliptic.delta_start)
      e->fail("delta_final", "need 0 < delta_final <= delta_start");
  }

  if (auto d = root.opt("diagnostics")) {
    if (d->has("checks")) c.checks = d->strings("checks");
    for (const auto& id : c.checks)
      if (std::find(detail::known_checks().begin(), detail::known_checks().end(), id) == detail::known_checks().end())
        d->fail("checks", "unknown check '" + id + "'");
    if (d->has("required")) {
      c.required = d->strings("required");
      c.required_given = true;
    }
    if (d->has("window")) {
      const auto w = d->numbers("window");
      if (w.size() != 2 || !(0.0 < w[0] && w[0] < w[1] && w[1] < c.horizon))
        d->fail("window", "need [a, b] with 0 < a < b < horizon");
      c.window_a = w[0];
      c.window_b = w[1];
    }
    c.time_scaling_horizon = d->number("time_scaling_horizon", c.time_scaling_horizon);
    if (!(c.time_scaling_horizon > 0.0)) d->fail("time_scaling_horizon", "must be positive");
    if (auto h = d->opt("heat")) {
      c.heat_beta = h->number("beta", c.heat_beta);
      c.heat_delta0 = h->number("delta0", c.heat_delta0 * c.horizon);
      c.heat_delta1 = h->number("delta1", c.heat_delta1 * c.horizon);
      if (!(c.heat_beta > 1.0)) h->fail("beta", "must exceed 1");
      if (!(0.0 < c.heat_delta0 && c.heat_delta0 < c.heat_delta1 && c.heat_delta1 < c.horizon))
        h->fail("delta0", "need 0 < delta0 < delta1 < horizon");
    } else {
      c.heat_delta0 *= c.horizon;
      c.heat_delta1 *= c.horizon;
    }
    if (auto ib = d->opt("interior")) {
      if (ib->has("peaks")) c.interior_peaks = ib->numbers("peaks");
      c.interior_floor = ib->number("floor", c.interior_floor);
      if (c.interior_peaks.size() < 2) ib->fail("peaks", "need at least two peaks");
    }
  } else {
    c.heat_delta0 *= c.horizon;
    c.heat_delta1 *= c.horizon;
  }
  if (c.window_b >= c.horizon) root.fail("diagnostics.window", "window must lie inside (0, horizon)");

  if (auto o = root.opt("output")) {
    c.out_dir = o->string("directory", c.out_dir);
    if (o->has("formats")) c.formats = o->strings("formats");
    for (const auto& f : c.formats)
      if (f != "fields" && f != "json" && f != "csv" && f != "svg") o->fail("formats", "unknown format '" + f + "'");
  }
  return c;
}

inline Json parse_config_text(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Lower-case hex SHA-256.
inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// ---------------------------------------------------------------------------
// artifacts

namespace detail {

inline Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json entry_json(const CheckEntry& e, const std::string& digest) {
  Json j;
  j["check"] = e.name;
  j["inputs_digest"] = digest;
  j["grid"] = e.grid;
  j["eps"] = e.eps;
  Json values = Json::object();
  for (const auto& [k, v] : e.values) values[k] = finite_or_null(v);
  j["values"] = values;
  Json series = Json::object();
  for (const auto& [k, v] : e.series) {
    Json arr = Json::array();
    for (double x : v) arr.push_back(finite_or_null(x));
    series[k] = arr;
  }
  j["series"] = series;
  j["threshold"] = {{"rule", e.threshold_label}, {"value", finite_or_null(e.threshold)}};
  j["required"] = e.required;
  j["pass"] = e.pass;
  return j;
}

inline std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

// Minimal line plot. Coordinates are printed with fixed precision so equal
// inputs give equal bytes.
struct SvgSeries {
  std::vector<double> x, y;
  std::string color;
  bool markers = false;
};

inline std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                            const std::vector<SvgSeries>& series, const std::string& note, const std::string& digest) {
  const double W = 480, H = 320, L = 60, R = 20, Tm = 30, Bm = 45;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - Bm - (y - y0) / (y1 - y0) * (H - Tm - Bm); };
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                W, H, W, H);
  out += buf;
  out += "<!-- config " + digest + " -->\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<path d=\"M%.2f %.2f L%.2f %.2f L%.2f %.2f\" fill=\"none\" stroke=\"black\"/>\n", L,
                Tm, L, H - Bm, W - R, H - Bm);
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"18\" font-size=\"14\" text-anchor=\"middle\">", W / 2);
  out += buf + title + "</text>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" text-anchor=\"middle\">", W / 2, H - 8);
  out += buf + xlabel + "</text>\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"14\" y=\"%.2f\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 %.2f)\">",
                H / 2, H / 2);
  out += buf + ylabel + "</text>\n";
  for (double v : {y0, y1}) {
    std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%.2f\" font-size=\"10\" text-anchor=\"end\">%.4g</text>\n",
                  L - 4, py(v) + 3, v);
    out += buf;
  }
  for (double v : {x0, x1}) {
    std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%.2f\" font-size=\"10\" text-anchor=\"middle\">%.4g</text>\n",
                  px(v), H - Bm + 14, v);
    out += buf;
  }
  for (const auto& s : series) {
    out += "<polyline fill=\"none\" stroke=\"" + s.color + "\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(s.x[i]), py(s.y[i]));
      out += buf;
    }
    out += "\"/>\n";
    if (s.markers)
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", px(s.x[i]),
                      py(s.y[i]), s.color.c_str());
        out += buf;
      }
  }
  if (!note.empty()) {
    std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\">", L + 10, Tm + 14);
    out += buf + note + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline std::string slug(const CheckEntry& e, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%02zu", index);
  return e.name + buf;
}

}  // namespace detail

/// SVG files for the convexity (phi with chord bound), energy and sweep entries.
/// Returns the written file names.
inline std::vector<std::string> emit_plots(const std::vector<CheckEntry>& entries, const std::vector<double>& time_nodes,
                                           const std::filesystem::path& dir, const std::string& digest) {
  std::vector<std::string> files;
  char note[128];
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const CheckEntry& e = entries[i];
    std::string svg;
    if (e.name == "displacement_convexity") {
      const auto& phi = e.get_series("phi");
      const double lambda = e.get("chord_lambda");
      const double T = time_nodes.back();
      detail::SvgSeries s{time_nodes, phi, "#1f77b4", true}, chord{time_nodes, {}, "#d62728", false};
      for (double t : time_nodes)
        chord.y.push_back((1 - t / T) * phi.front() + t / T * phi.back() + lambda * t * (T - t) / (2 * T * T));
      std::snprintf(note, sizeof note, "chord bound with Lambda = %.4g", lambda);
      svg = detail::svg_plot("entropy profile", "t", "phi(t)", {s, chord}, note, digest);
    } else if (e.name == "energy") {
      const auto& E = e.get_series("E");
      const std::vector<double> t(time_nodes.begin() + 1, time_nodes.end() - 1);
      std::snprintf(note, sizeof note, "drift = %.3g", e.get("drift"));
      svg = detail::svg_plot("energy", "t", "E(t)", {{t, E, "#1f77b4", true}}, note, digest);
    } else if (e.name == "epsilon_sweep" && e.has("slope")) {
      const auto& eps = e.get_series("eps");
      const auto& res = e.get_series("residual");
      detail::SvgSeries pts{{}, {}, "#1f77b4", true}, fit{{}, {}, "#d62728", false};
      for (std::size_t k = 0; k < eps.size(); ++k) {
        pts.x.push_back(std::log10(eps[k]));
        pts.y.push_back(std::log10(res[k]));
        fit.x.push_back(std::log10(eps[k]));
        fit.y.push_back((e.get("intercept") + e.get("slope") * std::log(eps[k])) / std::log(10.0));
      }
      std::snprintf(note, sizeof note, "slope = %.4f", e.get("slope"));
      svg = detail::svg_plot("rate fit", "log10 eps", "log10 residual", {pts, fit}, note, digest);
    } else {
      continue;
    }
    const std::string name = detail::slug(e, i) + ".svg";
    detail::write_text(dir / name, svg);
    files.push_back(name);
  }
  return files;
}

// ---------------------------------------------------------------------------
// run

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MethodRun {
  std::string method;
  double eps = 0.0;
  Grid grid;
  DensityPath m;
  MomentumField w;
  Potential u;
  SolveReport report;
};

struct RunArtifacts {
  std::string digest;
  std::vector<MethodRun> runs;
  DiagnosticsReport diagnostics;
  std::vector<std::string> files;
  int exit_code = 0;
};

namespace detail {

inline Json report_json(const MethodRun& r) {
  Json j;
  j["method"] = r.method;
  j["eps"] = r.eps;
  j["grid"] = r.grid.describe();
  j["iterations"] = r.report.iterations;
  j["objective"] = finite_or_null(r.report.objective);
  j["continuity_residual"] = finite_or_null(r.report.continuity_residual);
  j["coupling_residual"] = finite_or_null(r.report.coupling_residual);
  j["duality_gap"] = finite_or_null(r.report.duality_gap);
  j["energy_drift"] = finite_or_null(r.report.energy_drift);
  Json hist = Json::array();
  for (double v : r.report.residual_history) hist.push_back(finite_or_null(v));
  j["residual_history"] = hist;
  return j;
}

inline double time_averaged_l1(const Grid& grid, const DensityPath& a, const DensityPath& b) {
  std::vector<double> diff(grid.nodes()), per;
  for (int k = 0; k <= grid.nt(); ++k) {
    for (std::size_t s = 0; s < grid.nodes(); ++s) diff[s] = std::abs(a.slice(k)[s] - b.slice(k)[s]);
    per.push_back(grid.time_weight(k) * integrate(diff, grid));
  }
  return pairwise_sum(per) / grid.horizon();
}

}  // namespace detail

/// Cross-method agreement: time-averaged L1 distance of the two density paths.
inline CheckEntry check_cross_method(const Grid& grid, const DensityPath& prox_m, const DensityPath& elliptic_m,
                                     double eps) {
  CheckEntry e = new_entry("cross_method", grid, eps);
  e.set("l1_distance", detail::time_averaged_l1(grid, prox_m, elliptic_m));
  e.threshold_label = "time-averaged L1 distance <= 5e-3";
  e.threshold = 5e-3;
  e.pass = e.get("l1_distance") <= e.threshold;
  return e;
}

/// B + eps log Z for the stationary family.
inline CheckEntry check_stationary_closed_form(const Grid& grid, double B, const ReferenceMeasure& ref, double eps,
                                               const std::string& method) {
  CheckEntry e = new_entry("stationary_closed_form", grid, eps);
  e.set("objective", B);
  e.set("closed_form", -eps * ref.log_normalizer);
  e.set("error", std::abs(B + eps * ref.log_normalizer));
  e.set("method_elliptic", method == "elliptic" ? 1.0 : 0.0);
  e.threshold_label = "|B + eps log Z| <= 2e-6";
  e.threshold = 2e-6;
  e.pass = e.get("error") <= e.threshold;
  return e;
}

struct RunInputs {
  Grid grid;
  ReferenceMeasure ref;
  Marginals raw;
};

/// Grid, reference and marginals for a config. Cheap; used by `check` too.
inline RunInputs prepare_inputs(const ExperimentConfig& cfg) {
  RunInputs in;
  try {
    in.grid = build_grid(cfg.dim, cfg.n_space, cfg.n_time, cfg.horizon,
                         make_metric(cfg.metric, cfg.metric_params, cfg.length), cfg.length);
  } catch (const GridError& e) {
    throw ConfigError(std::string("config.grid: ") + e.what());
  }
  in.ref = make_reference(cfg.reference, cfg.reference_params, in.grid, cfg.reference_file);
  in.raw = make_marginals(cfg.marginals, in.grid, in.ref);
  const bool positive = strictly_positive(in.raw.m0) && strictly_positive(in.raw.m1);
  if ((cfg.method == "elliptic" || cfg.method == "both") && !positive)
    throw ConfigError("config.marginals: the elliptic solver needs strictly positive marginals; add smoothing_steps");
  if (cfg.sweep && cfg.method != "prox") throw ConfigError("config.solver.method: the eps sweep runs the prox solver");
  return in;
}

/// Solves and checks as configured. Throws ConfigError for bad inputs and
/// SolverError when a solver fails; writes artifacts under cfg.out_dir.
inline RunArtifacts run_experiment(const ExperimentConfig& cfg, const std::string& config_bytes, bool verbose = false,
                                   std::ostream& log = std::cerr) {
  RunArtifacts art;
  art.digest = sha256_hex(config_bytes);
  const RunInputs in = prepare_inputs(cfg);
  const Grid& grid = in.grid;
  const ReferenceMeasure& ref = in.ref;
  const Marginals& raw = in.raw;
  Marginals mg = raw;
  const int extra = ensure_positive_for_prox(mg, grid);
  if (verbose && extra) log << "applied " << extra << " heat smoothing steps to condition the marginals\n";

  const int methods_run = cfg.method == "both" ? 2 : 1;
  auto add = [&](CheckEntry e, const std::string& method = "") {
    e.required = cfg.is_required(e.name, method);
    if (!method.empty() && methods_run > 1) e.name += "_" + method;
    art.diagnostics.entries.push_back(std::move(e));
  };
  auto solve_one = [&](const std::string& method, double eps) -> MethodRun {
    MethodRun r{method, eps, grid, {}, {}, {}, {}};
    try {
      if (method == "prox") {
        ProxSolution s = solve_prox(mg.m0, mg.m1, ref, eps, grid, cfg.prox);
        r.m = std::move(s.m);
        r.w = std::move(s.w);
        r.u = std::move(s.u);
        r.report = s.report;
      } else {
        EllipticProblem P{grid, ref, eps, 0.0, 1.0, mg.m0, mg.m1};
        EllipticSolution s = solve_elliptic(P, cfg.elliptic);
        r.w = momentum_from_potential(grid, s.m, s.u);
        r.m = std::move(s.m);
        r.u = std::move(s.u);
        r.report = s.report;
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw SolverError(method + " solver failed at eps=" + format_double(eps) + ": " + e.what());
    }
    if (verbose)
      log << method << " eps=" << eps << " objective=" << format_double(r.report.objective)
          << " iterations=" << r.report.iterations << " wall_time=" << r.report.wall_time << "s\n";
    return r;
  };

  std::vector<std::string> methods;
  if (cfg.method == "both") methods = {"prox", "elliptic"};
  else methods = {cfg.method};

  if (cfg.sweep) {
    SweepSpec spec;
    spec.eps = cfg.eps;
    spec.family = cfg.marginals.family;
    spec.grid = grid;
    spec.m0 = mg.m0;
    spec.m1 = mg.m1;
    spec.ref = ref;
    spec.solver = cfg.prox;
    SweepResult sr;
    try {
      sr = epsilon_sweep(spec);
    } catch (const OracleError& e) {
      throw ConfigError(std::string("sweep oracle: ") + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("sweep: ") + e.what());
    } catch (const std::exception& e) {
      throw SolverError(std::string("sweep failed: ") + e.what());
    }
    for (std::size_t i = 0; i < cfg.eps.size(); ++i) {
      ProxSolution& s = sr.solutions[i];
      art.runs.push_back({"prox", cfg.eps[i], grid, std::move(s.m), std::move(s.w), std::move(s.u), s.report});
    }
    add(std::move(sr.entry));
  } else {
    for (const auto& method : methods) art.runs.push_back(solve_one(method, cfg.eps.front()));
  }

  // Per-run checks.
  std::optional<double> tol_conv;
  for (const MethodRun& r : art.runs) {
    const double B = r.report.objective;
    std::optional<double> bound;
    if (cfg.has_check("heat_upper_bound") || cfg.has_check("energy")) {
      try {
        bound = heat_competitor_bound(raw.m0, raw.m1, ref, r.eps, cfg.heat_beta, cfg.heat_delta0, cfg.heat_delta1,
                                      grid, cfg.prox)
                    .bound;
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception& e) {
        if (cfg.has_check("heat_upper_bound")) throw SolverError(std::string("heat competitor: ") + e.what());
      }
    }
    auto tag = [&](CheckEntry e) { add(std::move(e), r.method); };
    if (cfg.has_check("energy")) tag(check_energy(r.grid, r.m, r.u, ref, r.eps, B, bound));
    if (cfg.has_check("duality")) tag(check_duality(r.grid, r.u, r.m, r.w, ref, r.eps));
    if (cfg.has_check("heat_upper_bound") && bound) tag(check_upper_bound(r.grid, B, *bound, r.eps));
    if (cfg.has_check("displacement_convexity")) {
      if (!tol_conv) {
        const auto gibbs = ref.gibbs_density();
        const ProxSolution st = solve_prox(gibbs, gibbs, ref, r.eps, grid, cfg.prox);
        tol_conv = 3.0 * stationary_convexity_error(grid, st.m, ref);
      }
      tag(check_displacement_convexity(r.grid, r.m, ref, r.eps, *tol_conv));
    }
    if (cfg.has_check("potential_bounds"))
      tag(check_potential_bounds(r.grid, r.u, r.m, ref, r.eps, cfg.window_a, cfg.window_b));
    if (cfg.marginals.family == "stationary" || cfg.has_check("stationary_closed_form"))
      tag(check_stationary_closed_form(r.grid, B, ref, r.eps, r.method));
  }
  if (cfg.has_check("cross_method") && cfg.method == "both")
    add(check_cross_method(grid, art.runs[0].m, art.runs[1].m, art.runs[0].eps));
  if (cfg.has_check("time_scaling")) {
    try {
      add(check_time_scaling(mg.m0, mg.m1, ref, cfg.eps.front(), grid, cfg.time_scaling_horizon, cfg.prox));
    } catch (const std::exception& e) {
      throw SolverError(std::string("time scaling: ") + e.what());
    }
  }
  if (cfg.has_check("interior_bounds")) {
    std::vector<InteriorSample> family(cfg.interior_peaks.size());
    const double eps = cfg.eps.front();
    parallel_for(family.size(), [&](std::size_t i) {
      MarginalSpec p{"bump_pair",
                     {{"peak0", cfg.interior_peaks[i]},
                      {"peak1", cfg.interior_peaks[i]},
                      {"floor", cfg.interior_floor},
                      {"center0", 0.25},
                      {"center1", 0.75}},
                     0,
                     "",
                     ""};
      const Marginals bm = make_marginals(p, grid, ref);
      const ProxSolution s = solve_prox(bm.m0, bm.m1, ref, eps, grid, cfg.prox);
      family[i] = {*std::max_element(bm.m0.begin(), bm.m0.end()),
                   interior_measures(grid, s.m, s.u, eps, cfg.window_a, cfg.window_b)};
    });
    add(check_interior_bounds(grid, family, eps, cfg.window_a, cfg.window_b));
  }

  // Artifacts.
  namespace fs = std::filesystem;
  const fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("config.output.directory: cannot create " + cfg.out_dir);
  auto emit = [&](const std::string& name, const std::string& text) {
    detail::write_text(dir / name, text);
    art.files.push_back(name);
  };
  if (cfg.wants("fields"))
    for (std::size_t i = 0; i < art.runs.size(); ++i) {
      const MethodRun& r = art.runs[i];
      const std::string stem = r.method + (cfg.sweep ? "_eps" + std::to_string(i) : std::string());
      emit(stem + "_m.otf", serialize_field(grid, r.m.values, art.digest));
      emit(stem + "_u.otf", serialize_field(grid, r.u.values, art.digest));
      emit(stem + "_w.otf", serialize_field(grid, r.w.values, art.digest));
    }
  if (cfg.wants("json")) {
    Json solve;
    solve["config_digest"] = art.digest;
    solve["prox_smoothing_steps"] = extra;
    solve["reports"] = Json::array();
    for (const auto& r : art.runs) solve["reports"].push_back(detail::report_json(r));
    emit("solve_report.json", solve.dump(2) + "\n");
    Json diag;
    diag["config_digest"] = art.digest;
    diag["required_pass"] = art.diagnostics.required_pass();
    diag["checks"] = Json::array();
    for (const auto& e : art.diagnostics.entries) diag["checks"].push_back(detail::entry_json(e, art.digest));
    emit("diagnostics.json", diag.dump(2) + "\n");
  }
  if (cfg.wants("csv")) {
    std::string checks = "# config " + art.digest + "\ncheck,eps,grid,required,pass,threshold,values\n";
    std::string series = "# config " + art.digest + "\ncheck,eps,grid,series,index,value\n";
    for (const auto& e : art.diagnostics.entries) {
      std::string values;
      for (const auto& [k, v] : e.values) values += (values.empty() ? "" : ";") + k + "=" + detail::csv_number(v);
      checks += e.name + "," + format_double(e.eps) + "," + e.grid + "," + (e.required ? "1" : "0") + "," +
                (e.pass ? "1" : "0") + "," + detail::csv_number(e.threshold) + "," + values + "\n";
      for (const auto& [k, v] : e.series)
        for (std::size_t i = 0; i < v.size(); ++i)
          series += e.name + "," + format_double(e.eps) + "," + e.grid + "," + k + "," + std::to_string(i) + "," +
                    detail::csv_number(v[i]) + "\n";
    }
    emit("diagnostics.csv", checks);
    emit("series.csv", series);
  }
  if (cfg.wants("svg")) {
    std::vector<double> t;
    for (int k = 0; k <= grid.nt(); ++k) t.push_back(grid.time(k));
    for (auto& f : emit_plots(art.diagnostics.entries, t, dir, art.digest)) art.files.push_back(f);
  }
  art.exit_code = art.diagnostics.required_pass() ? 0 : 4;
  return art;
}

}  // namespace otgeo

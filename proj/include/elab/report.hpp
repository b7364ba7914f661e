// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Plot emission (SVG with an identical CSV sibling) and run summaries.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "elab/energy.hpp"
#include "elab/error.hpp"
#include "elab/format.hpp"
#include "elab/rl.hpp"
#include "elab/stats.hpp"

namespace elab {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotStyle {
  std::string title;
  std::string x_label = "x";
  std::string y_label = "y";
  int width = 640;
  int height = 400;
  bool scatter = false;  // points instead of polylines
};

struct Plot {
  std::string svg;
  std::string csv;  // the same text sits inside the SVG's data comment
};

struct Histogram {
  std::vector<double> edges;  // bins + 1 ascending edges
  std::vector<std::size_t> counts;
};

namespace svg_detail {

inline const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

inline std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Names end up inside CSV cells and an XML comment.
inline std::string clean_name(const std::string& s) {
  std::string out;
  for (char c : s) out += (c == ',' || c == '\n' || c == '\r') ? '_' : c;
  std::size_t p;
  while ((p = out.find("--")) != std::string::npos) out.replace(p, 2, "-_");
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  int width = 640, height = 400;
  double left = 64, right = 16, top = 36, bottom = 48;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

inline void pad_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

inline std::string header(const PlotStyle& s) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << s.width << "\" height=\"" << s.height
    << "\" viewBox=\"0 0 " << s.width << ' ' << s.height << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!s.title.empty())
    o << "<text x=\"" << s.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << escape(s.title)
      << "</text>\n";
  return o.str();
}

inline std::string axes(const Frame& f, const PlotStyle& s) {
  std::ostringstream o;
  const double xa = f.left, xb = f.width - f.right, ya = f.top, yb = f.height - f.bottom;
  o << "<g stroke=\"black\" stroke-width=\"1\">\n"
    << "<line x1=\"" << fixed(xa) << "\" y1=\"" << fixed(yb) << "\" x2=\"" << fixed(xb) << "\" y2=\"" << fixed(yb)
    << "\"/>\n"
    << "<line x1=\"" << fixed(xa) << "\" y1=\"" << fixed(ya) << "\" x2=\"" << fixed(xa) << "\" y2=\"" << fixed(yb)
    << "\"/>\n</g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    o << "<text x=\"" << fixed(f.px(xv)) << "\" y=\"" << fixed(yb + 14) << "\" text-anchor=\"middle\">"
      << escape(format_double(std::round(xv * 1000) / 1000)) << "</text>\n";
    o << "<text x=\"" << fixed(xa - 4) << "\" y=\"" << fixed(f.py(yv) + 4) << "\" text-anchor=\"end\">"
      << escape(format_double(std::round(yv * 1000) / 1000)) << "</text>\n";
  }
  o << "<text x=\"" << fixed((xa + xb) / 2) << "\" y=\"" << fixed(f.height - 10.0) << "\" text-anchor=\"middle\">"
    << escape(s.x_label) << "</text>\n";
  o << "<text x=\"14\" y=\"" << fixed((ya + yb) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
    << fixed((ya + yb) / 2) << ")\">" << escape(s.y_label) << "</text>\n";
  return o.str();
}

inline std::string legend(const Frame& f, const std::vector<std::string>& names) {
  std::ostringstream o;
  o << "<g class=\"legend\">\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = f.top + 4 + 16.0 * static_cast<double>(i);
    const double x = f.width - f.right - 150;
    o << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(y) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[i % 6] << "\"/>\n"
      << "<text x=\"" << fixed(x + 14) << "\" y=\"" << fixed(y + 9) << "\">" << escape(names[i]) << "</text>\n";
  }
  o << "</g>\n";
  return o.str();
}

inline std::string data_comment(const std::string& csv) { return "<!-- data\n" + csv + "-->\n"; }

}  // namespace svg_detail

/// One polyline (or point cloud) per series. CSV rows are "series,x,y".
inline Plot line_plot(std::span<const Series> series, const PlotStyle& style) {
  using namespace svg_detail;
  if (series.empty()) throw ContractError("line_plot: no series");
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.empty() || s.x.size() != s.y.size()) throw ContractError("line_plot: series '" + s.name + "' is empty or ragged");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) throw NumericError("line_plot: non-finite point");
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  pad_range(x0, x1);
  pad_range(y0, y1);
  Frame f{x0, x1, y0, y1, style.width, style.height};

  Plot p;
  p.csv = "series,x,y\n";
  std::vector<std::string> names;
  for (const auto& s : series) {
    names.push_back(clean_name(s.name));
    for (std::size_t i = 0; i < s.x.size(); ++i)
      p.csv += names.back() + "," + format_double(s.x[i]) + "," + format_double(s.y[i]) + "\n";
  }
  std::string body = header(style) + data_comment(p.csv) + axes(f, style);
  for (std::size_t k = 0; k < series.size(); ++k) {
    if (style.scatter) {
      for (std::size_t i = 0; i < series[k].x.size(); ++i)
        body += "<circle cx=\"" + fixed(f.px(series[k].x[i])) + "\" cy=\"" + fixed(f.py(series[k].y[i])) +
                "\" r=\"2.5\" fill=\"" + kPalette[k % 6] + "\"/>\n";
      continue;
    }
    body += "<polyline fill=\"none\" stroke=\"" + std::string(kPalette[k % 6]) + "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      body += (i ? " " : "") + fixed(f.px(series[k].x[i])) + "," + fixed(f.py(series[k].y[i]));
    body += "\"/>\n";
  }
  body += legend(f, names) + "</svg>\n";
  p.svg = std::move(body);
  return p;
}

/// Equal-width bins over [lo, hi]; the last bin is closed. Values outside are clamped in.
inline Histogram make_histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (values.empty()) throw ContractError("histogram: no values");
  if (bins == 0) throw ContractError("histogram: bins must be >= 1");
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins));
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("histogram: non-finite value");
    auto b = static_cast<std::ptrdiff_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

struct HistogramSeries {
  std::string name;
  std::vector<double> values;
};

/// Overlaid histograms on shared bins spanning every series. CSV rows are
/// "series,bin_lo,bin_hi,count".
inline Plot histogram_plot(std::span<const HistogramSeries> series, std::size_t bins, const PlotStyle& style) {
  using namespace svg_detail;
  if (series.empty()) throw ContractError("histogram_plot: no series");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series) {
    if (s.values.empty()) throw ContractError("histogram_plot: series '" + s.name + "' is empty");
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  std::vector<Histogram> hs;
  std::size_t peak = 1;
  for (const auto& s : series) {
    hs.push_back(make_histogram(s.values, bins, lo, hi));
    for (auto c : hs.back().counts) peak = std::max(peak, c);
  }
  Frame f{hs[0].edges.front(), hs[0].edges.back(), 0.0, static_cast<double>(peak), style.width, style.height};

  Plot p;
  p.csv = "series,bin_lo,bin_hi,count\n";
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    names.push_back(clean_name(series[k].name));
    for (std::size_t b = 0; b < bins; ++b)
      p.csv += names.back() + "," + format_double(hs[k].edges[b]) + "," + format_double(hs[k].edges[b + 1]) + "," +
               std::to_string(hs[k].counts[b]) + "\n";
  }
  std::string body = header(style) + data_comment(p.csv) + axes(f, style);
  for (std::size_t k = 0; k < series.size(); ++k) {
    body += "<g fill=\"" + std::string(kPalette[k % 6]) + "\" fill-opacity=\"0.45\">\n";
    for (std::size_t b = 0; b < bins; ++b) {
      if (hs[k].counts[b] == 0) continue;
      const double x = f.px(hs[k].edges[b]), w = f.px(hs[k].edges[b + 1]) - x;
      const double y = f.py(static_cast<double>(hs[k].counts[b]));
      body += "<rect x=\"" + fixed(x) + "\" y=\"" + fixed(y) + "\" width=\"" + fixed(w) + "\" height=\"" +
              fixed(f.py(0.0) - y) + "\"/>\n";
    }
    body += "</g>\n";
  }
  body += legend(f, names) + "</svg>\n";
  p.svg = std::move(body);
  return p;
}

/// Text of the SVG's embedded data comment.
inline std::string embedded_data(const std::string& svg) {
  const std::string open = "<!-- data\n";
  const auto a = svg.find(open);
  if (a == std::string::npos) throw IoError("svg: no embedded data comment");
  const auto b = svg.find("-->", a + open.size());
  if (b == std::string::npos) throw IoError("svg: unterminated data comment");
  return svg.substr(a + open.size(), b - a - open.size());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("write failed: " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

/// Writes `<stem>.svg` and `<stem>.csv`.
inline void write_plot(const std::string& stem, const Plot& p) {
  write_text(stem + ".svg", p.svg);
  write_text(stem + ".csv", p.csv);
}

// ---------------------------------------------------------------------------
// Run summaries

inline constexpr std::size_t kDivergenceWindow = 5;

struct HackingSummary {
  std::size_t steps = 0;
  std::optional<std::size_t> divergence_step;
  std::size_t peak_gold_step = 0;
  double peak_gold = 0.0;
  double initial_gold = 0.0;
  double final_gold = 0.0;
  double initial_proxy = 0.0;
  double final_proxy = 0.0;
  double final_excessive_fraction = 0.0;
  double energy_trend = 0.0;  // Kendall tau of mean final-block energy loss against step
};

/// First step i where proxy rises and gold falls at every move inside
/// records[i .. i + window - 1].
inline std::optional<std::size_t> divergence_step(std::span<const StepRecord> records,
                                                  std::size_t window = kDivergenceWindow) {
  if (window < 2) throw ContractError("divergence_step: window must be >= 2");
  for (std::size_t i = 0; i + window <= records.size(); ++i) {
    bool ok = true;
    for (std::size_t j = i + 1; j < i + window && ok; ++j)
      ok = records[j].proxy_reward > records[j - 1].proxy_reward && records[j].gold_reward < records[j - 1].gold_reward;
    if (ok) return records[i].step;
  }
  return std::nullopt;
}

/// `final_energies` are the per-rollout energies of the last step; the
/// fraction above mean + k std of the baseline is reported.
inline HackingSummary hacking_report(std::span<const StepRecord> records, std::span<const double> final_energies,
                                     const EnergyBaseline& baseline, double k = 3.0) {
  HackingSummary s;
  s.steps = records.size();
  if (records.empty()) return s;
  s.divergence_step = divergence_step(records);
  std::size_t peak = 0;
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].gold_reward > records[peak].gold_reward) peak = i;
  s.peak_gold_step = records[peak].step;
  s.peak_gold = records[peak].gold_reward;
  s.initial_gold = records.front().gold_reward;
  s.final_gold = records.back().gold_reward;
  s.initial_proxy = records.front().proxy_reward;
  s.final_proxy = records.back().proxy_reward;
  s.final_excessive_fraction = excessive_fraction(final_energies, baseline, k);
  std::vector<double> x, e;
  for (const auto& r : records) {
    x.push_back(static_cast<double>(r.step));
    e.push_back(r.energy_final);
  }
  s.energy_trend = stats::kendall_tau(x, e);
  return s;
}

inline std::string comparison_header() { return std::string("run,") + kRunLogHeader; }

/// One row per run: its label and last RunLog record, formatted as in the RunLog.
inline std::string comparison_csv(std::span<const std::string> labels, std::span<const std::vector<StepRecord>> logs) {
  if (labels.size() != logs.size()) throw ContractError("comparison_csv: one label per run");
  std::string out = comparison_header() + "\n";
  for (std::size_t i = 0; i < logs.size(); ++i) {
    if (logs[i].empty()) throw ContractError("comparison_csv: run '" + labels[i] + "' has no records");
    RunLog one;
    one.records.push_back(logs[i].back());
    const std::string csv = runlog_csv(one);
    out += svg_detail::clean_name(labels[i]) + "," + csv.substr(csv.find('\n') + 1);
  }
  return out;
}

}  // namespace elab

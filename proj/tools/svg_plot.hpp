#pragma once
// Minimal static SVG charts for the report command: line plots of ledger
// curves and grouped bar charts of report metrics. Output is deterministic.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace svg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
  return palette[i % 7];
}

constexpr double kW = 640, kH = 400, kL = 70, kR = 150, kT = 40, kB = 50;

inline std::string header(const std::string& title) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
  return o.str();
}

/// Lines over a shared x axis; `log_y` plots log10 of positive values.
inline std::string line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<Series>& series, bool log_y = false) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  auto ty = [&](double y) { return log_y ? std::log10(y) : y; };
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (!std::isfinite(y) || (log_y && y <= 0)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, ty(y));
      y1 = std::max(y1, ty(y));
    }
  std::ostringstream o;
  o << header(title);
  if (!std::isfinite(x0)) {
    o << "<text x=\"" << kW / 2 << "\" y=\"" << kH / 2 << "\" text-anchor=\"middle\">no data</text>\n</svg>\n";
    return o.str();
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  auto px = [&](double x) { return kL + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kT + ph - (ty(y) - y0) / (y1 - y0) * ph; };
  o << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fy = y0 + (y1 - y0) * i / 4, fx = x0 + (x1 - x0) * i / 4;
    const double yy = kT + ph - ph * i / 4, xx = kL + pw * i / 4;
    o << "<text x=\"" << kL - 6 << "\" y=\"" << yy + 4 << "\" text-anchor=\"end\">" << fmt(log_y ? std::pow(10.0, fy) : fy) << "</text>\n"
      << "<text x=\"" << xx << "\" y=\"" << kT + ph + 18 << "\" text-anchor=\"middle\">" << fmt(fx) << "</text>\n";
  }
  o << "<text x=\"" << kL + pw / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\">" << esc(xlabel) << "</text>\n"
    << "<text x=\"16\" y=\"" << kT + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kT + ph / 2 << ")\">"
    << esc(ylabel) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    o << "<polyline fill=\"none\" stroke=\"" << color(i) << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (auto [x, y] : series[i].points) {
      if (!std::isfinite(y) || (log_y && y <= 0)) continue;
      o << (first ? "" : " ") << fmt(px(x)) << ',' << fmt(py(y));
      first = false;
    }
    o << "\"/>\n";
    const double ly = kT + 14 + 18 * static_cast<double>(i);
    o << "<line x1=\"" << kW - kR + 10 << "\" y1=\"" << ly << "\" x2=\"" << kW - kR + 30 << "\" y2=\"" << ly << "\" stroke=\""
      << color(i) << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << kW - kR + 35 << "\" y=\"" << ly + 4 << "\">" << esc(series[i].name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Bars grouped by category, one colored bar per group member. NaN bars are skipped.
inline std::string bar_chart(const std::string& title, const std::string& ylabel, const std::vector<std::string>& categories,
                             const std::vector<std::string>& members, const std::vector<std::vector<double>>& values) {
  double y1 = 0;
  for (const auto& row : values)
    for (double v : row)
      if (std::isfinite(v)) y1 = std::max(y1, v);
  if (y1 <= 0) y1 = 1;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  std::ostringstream o;
  o << header(title);
  o << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yy = kT + ph - ph * i / 4;
    o << "<text x=\"" << kL - 6 << "\" y=\"" << yy + 4 << "\" text-anchor=\"end\">" << fmt(y1 * i / 4) << "</text>\n";
  }
  o << "<text x=\"16\" y=\"" << kT + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kT + ph / 2 << ")\">"
    << esc(ylabel) << "</text>\n";
  const double slot = pw / static_cast<double>(std::max<std::size_t>(1, categories.size()));
  const double bw = slot * 0.8 / static_cast<double>(std::max<std::size_t>(1, members.size()));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    o << "<text x=\"" << fmt(kL + slot * (c + 0.5)) << "\" y=\"" << kT + ph + 18 << "\" text-anchor=\"middle\">" << esc(categories[c])
      << "</text>\n";
    for (std::size_t m = 0; m < members.size(); ++m) {
      const double v = values[c][m];
      if (!std::isfinite(v)) continue;
      const double h = std::max(0.0, v) / y1 * ph;
      o << "<rect x=\"" << fmt(kL + slot * c + slot * 0.1 + bw * m) << "\" y=\"" << fmt(kT + ph - h) << "\" width=\"" << fmt(bw)
        << "\" height=\"" << fmt(h) << "\" fill=\"" << color(m) << "\"/>\n";
    }
  }
  for (std::size_t m = 0; m < members.size(); ++m) {
    const double ly = kT + 14 + 18 * static_cast<double>(m);
    o << "<rect x=\"" << kW - kR + 10 << "\" y=\"" << ly - 6 << "\" width=\"12\" height=\"12\" fill=\"" << color(m) << "\"/>\n"
      << "<text x=\"" << kW - kR + 28 << "\" y=\"" << ly + 4 << "\">" << esc(members[m]) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace svg

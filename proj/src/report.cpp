#include "permanence/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace permanence::report {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
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

struct Axis {
  bool log = false;
  double lo = 0.0;
  double hi = 1.0;
  double px_lo = 0.0;
  double px_hi = 1.0;

  bool usable(double v) const { return std::isfinite(v) && (!log || v > 0.0); }
  double t(double v) const { return log ? std::log10(v) : v; }
  double map(double v) const { return px_lo + (t(v) - t(lo)) / (t(hi) - t(lo)) * (px_hi - px_lo); }

  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      for (int e = static_cast<int>(std::floor(std::log10(lo))); e <= static_cast<int>(std::ceil(std::log10(hi))); ++e) {
        const double v = std::pow(10.0, e);
        if (v >= lo * (1 - 1e-12) && v <= hi * (1 + 1e-12)) out.push_back(v);
      }
      return out;
    }
    const double span = hi - lo;
    const double raw = span / 6.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (const double m : {1.0, 2.0, 5.0, 10.0}) {
      if (raw <= m * mag) {
        step = m * mag;
        break;
      }
    }
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) {
      out.push_back(std::abs(v) < 1e-12 * span ? 0.0 : v);
    }
    return out;
  }
};

void extent(const Chart& c, bool x, bool log, double& lo, double& hi) {
  lo = std::numeric_limits<double>::infinity();
  hi = -lo;
  for (const auto& s : c.series) {
    const auto& v = x ? s.x : s.y;
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto take = [&](double d) {
        if (std::isfinite(d) && (!log || d > 0.0)) {
          lo = std::min(lo, d);
          hi = std::max(hi, d);
        }
      };
      take(v[i]);
      if (!x && i < s.low.size()) take(s.low[i]);
      if (!x && i < s.high.size()) take(s.high[i]);
    }
  }
  if (!std::isfinite(lo)) {
    lo = log ? 1e-3 : 0.0;
    hi = 1.0;
  }
  if (log) {
    lo = std::pow(10.0, std::floor(std::log10(lo)));
    hi = std::pow(10.0, std::ceil(std::log10(hi)));
    if (hi <= lo) hi = lo * 10.0;
  } else if (hi <= lo) {
    const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
    lo -= pad;
    hi += pad;
  } else {
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
}

}  // namespace

std::string render_svg(const Chart& c) {
  const double left = 80, right = 170, top = 40, bottom = 60;
  Axis ax{c.log_x, 0, 1, left, c.width - right};
  Axis ay{c.log_y, 0, 1, c.height - bottom, top};
  extent(c, true, c.log_x, ax.lo, ax.hi);
  extent(c, false, c.log_y, ay.lo, ay.hi);
  if (c.y_range) {
    ay.lo = c.y_range->first;
    ay.hi = c.y_range->second;
  }

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << c.width << "\" height=\"" << c.height
    << "\" viewBox=\"0 0 " << c.width << ' ' << c.height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(c.width / 2.0) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(c.title)
    << "</text>\n";

  for (const double v : ax.ticks()) {
    const double x = ax.map(v);
    o << "<line x1=\"" << num(x) << "\" y1=\"" << num(ay.px_hi) << "\" x2=\"" << num(x) << "\" y2=\"" << num(ay.px_lo)
      << "\" stroke=\"#e0e0e0\"/>\n";
    o << "<text x=\"" << num(x) << "\" y=\"" << num(ay.px_lo + 16) << "\" text-anchor=\"middle\">" << label_num(v)
      << "</text>\n";
  }
  for (const double v : ay.ticks()) {
    const double y = ay.map(v);
    o << "<line x1=\"" << num(ax.px_lo) << "\" y1=\"" << num(y) << "\" x2=\"" << num(ax.px_hi) << "\" y2=\"" << num(y)
      << "\" stroke=\"#e0e0e0\"/>\n";
    o << "<text x=\"" << num(ax.px_lo - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << label_num(v)
      << "</text>\n";
  }
  o << "<rect x=\"" << num(ax.px_lo) << "\" y=\"" << num(ay.px_hi) << "\" width=\"" << num(ax.px_hi - ax.px_lo)
    << "\" height=\"" << num(ay.px_lo - ay.px_hi) << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << num((ax.px_lo + ax.px_hi) / 2) << "\" y=\"" << num(c.height - 18.0)
    << "\" text-anchor=\"middle\">" << escape(c.x_label) << "</text>\n";
  o << "<text transform=\"translate(20," << num((ay.px_lo + ay.px_hi) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(c.y_label) << "</text>\n";

  auto inside = [&](double x, double y) {
    return ax.usable(x) && ay.usable(y);
  };
  auto clamp_y = [&](double py) { return std::clamp(py, ay.px_hi, ay.px_lo); };

  for (std::size_t k = 0; k < c.series.size(); ++k) {
    const auto& s = c.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    std::string path;
    std::string last;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!inside(s.x[i], s.y[i])) continue;
      const std::string pt = num(ax.map(s.x[i])) + "," + num(clamp_y(ay.map(s.y[i])));
      if (pt == last) continue;
      path += (path.empty() ? "" : " ") + pt;
      last = pt;
    }
    if (!path.empty()) {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"" << path << "\"/>\n";
    }
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!inside(s.x[i], s.y[i])) continue;
      const double px = ax.map(s.x[i]);
      if (i < s.low.size() && i < s.high.size() && ay.usable(s.high[i])) {
        const double lo = ay.usable(s.low[i]) ? clamp_y(ay.map(s.low[i])) : ay.px_lo;
        const double hi = clamp_y(ay.map(s.high[i]));
        o << "<line x1=\"" << num(px) << "\" y1=\"" << num(lo) << "\" x2=\"" << num(px) << "\" y2=\"" << num(hi)
          << "\" stroke=\"" << color << "\"/>\n";
        for (const double yy : {lo, hi}) {
          o << "<line x1=\"" << num(px - 3) << "\" y1=\"" << num(yy) << "\" x2=\"" << num(px + 3) << "\" y2=\""
            << num(yy) << "\" stroke=\"" << color << "\"/>\n";
        }
      }
      if (s.markers) {
        o << "<circle cx=\"" << num(px) << "\" cy=\"" << num(clamp_y(ay.map(s.y[i]))) << "\" r=\"2.5\" fill=\"" << color
          << "\"/>\n";
      }
    }
    const double ly = top + 14.0 + 18.0 * static_cast<double>(k);
    o << "<line x1=\"" << num(ax.px_hi + 12) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(ax.px_hi + 32) << "\" y2=\""
      << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << num(ax.px_hi + 38) << "\" y=\"" << num(ly + 4) << "\">" << escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace permanence::report

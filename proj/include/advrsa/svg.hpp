#pragma once

// Minimal hand-written SVG charts: grouped bars with optional interval whiskers.

#include <advrsa/io.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace advrsa {

struct BarSeries {
  std::string name;
  std::string color;
  std::vector<double> values;
  std::vector<double> lower;  // optional, same length as values
  std::vector<double> upper;
};

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<std::string> groups;
  std::vector<BarSeries> series;
  double y_min = 0.0;
  double y_max = 1.0;
  std::string comment;  // emitted as an XML comment after the prolog
};

namespace detail {
inline std::string xml_escape(const std::string& s) {
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

inline std::string fixed(double v, int digits = 2) {
  if (!std::isfinite(v)) return "0";
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(digits);
  o << v;
  return o.str();
}
}  // namespace detail

inline std::string render_bar_chart(const BarChart& c) {
  const double W = 120.0 + 90.0 * static_cast<double>(std::max<std::size_t>(c.groups.size(), 1));
  const double H = 320.0, left = 60.0, right = 20.0, top = 40.0, bottom = 60.0;
  const double plot_w = W - left - right, plot_h = H - top - bottom;
  const double span = c.y_max > c.y_min ? c.y_max - c.y_min : 1.0;
  auto ypos = [&](double v) { return top + plot_h * (1.0 - (std::clamp(v, c.y_min, c.y_max) - c.y_min) / span); };
  using detail::fixed;
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  if (!c.comment.empty()) s << "<!-- " << detail::xml_escape(c.comment) << " -->\n";
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(W, 0) << "\" height=\"" << fixed(H, 0)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << fixed(W / 2, 1) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
    << detail::xml_escape(c.title) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = c.y_min + span * t / 4.0;
    const double y = ypos(v);
    s << "<line x1=\"" << fixed(left) << "\" x2=\"" << fixed(left + plot_w) << "\" y1=\"" << fixed(y) << "\" y2=\""
      << fixed(y) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << fixed(left - 6) << "\" y=\"" << fixed(y + 4) << "\" text-anchor=\"end\">" << fixed(v)
      << "</text>\n";
  }
  if (c.y_min < 0.0 && c.y_max > 0.0) {
    s << "<line x1=\"" << fixed(left) << "\" x2=\"" << fixed(left + plot_w) << "\" y1=\"" << fixed(ypos(0.0))
      << "\" y2=\"" << fixed(ypos(0.0)) << "\" stroke=\"#444\"/>\n";
  }
  s << "<text transform=\"translate(14," << fixed(top + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << detail::xml_escape(c.y_label) << "</text>\n";
  const double gw = plot_w / static_cast<double>(std::max<std::size_t>(c.groups.size(), 1));
  const double bw = gw * 0.8 / static_cast<double>(std::max<std::size_t>(c.series.size(), 1));
  for (std::size_t g = 0; g < c.groups.size(); ++g) {
    const double gx = left + gw * static_cast<double>(g) + gw * 0.1;
    for (std::size_t k = 0; k < c.series.size(); ++k) {
      const BarSeries& sr = c.series[k];
      if (g >= sr.values.size()) continue;
      const double v = sr.values[g];
      const double x = gx + bw * static_cast<double>(k);
      const double y0 = ypos(std::max(0.0, c.y_min)), y1 = ypos(v);
      s << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(std::min(y0, y1)) << "\" width=\"" << fixed(bw * 0.9)
        << "\" height=\"" << fixed(std::abs(y1 - y0)) << "\" fill=\"" << sr.color << "\"/>\n";
      if (g < sr.lower.size() && g < sr.upper.size() && std::isfinite(sr.lower[g]) && std::isfinite(sr.upper[g])) {
        const double cx = x + bw * 0.45;
        s << "<line x1=\"" << fixed(cx) << "\" x2=\"" << fixed(cx) << "\" y1=\"" << fixed(ypos(sr.lower[g]))
          << "\" y2=\"" << fixed(ypos(sr.upper[g])) << "\" stroke=\"black\"/>\n";
      }
    }
    s << "<text x=\"" << fixed(left + gw * (static_cast<double>(g) + 0.5)) << "\" y=\"" << fixed(top + plot_h + 16)
      << "\" text-anchor=\"middle\">" << detail::xml_escape(c.groups[g]) << "</text>\n";
  }
  for (std::size_t k = 0; k < c.series.size(); ++k) {
    const double x = left + 10.0 + 110.0 * static_cast<double>(k);
    const double y = H - 18.0;
    s << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(y - 9) << "\" width=\"10\" height=\"10\" fill=\""
      << c.series[k].color << "\"/>\n";
    s << "<text x=\"" << fixed(x + 14) << "\" y=\"" << fixed(y) << "\">" << detail::xml_escape(c.series[k].name)
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace advrsa

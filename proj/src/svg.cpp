#include "gpn/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace gpn::svg {

namespace {

constexpr double kWidth = 800, kHeight = 500;
constexpr double kLeft = 70, kRight = 30, kTop = 44, kBottom = 56;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                          "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
                          "#98df8a", "#ff9896", "#c5b0d5"};

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<double> linear_ticks(double lo, double hi, int target = 5) {
  if (hi <= lo) return {lo};
  const double span = hi - lo;
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (const double m : {1.0, 2.0, 5.0, 10.0}) {
    if (mag * m >= raw) {
      step = mag * m;
      break;
    }
  }
  std::vector<double> ticks;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-12 * span; v += step) {
    ticks.push_back(v);
  }
  return ticks;
}

}  // namespace

void write_lineplot(const std::vector<Series>& series, const AxesSpec& axes,
                    const std::string& path) {
  if (series.empty()) {
    throw std::invalid_argument("write_lineplot: no series");
  }
  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
  double y_lo = x_lo, y_hi = -x_lo;
  for (const Series& s : series) {
    if (s.x.size() != s.y.size() || s.x.empty()) {
      throw std::invalid_argument("write_lineplot: bad series " + s.label);
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        throw std::invalid_argument("write_lineplot: non-finite point");
      }
      if (axes.log_x && s.x[i] <= 0) {
        throw std::invalid_argument("write_lineplot: log axis needs x > 0");
      }
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, s.y[i]);
      y_hi = std::max(y_hi, s.y[i]);
    }
  }
  if (x_hi == x_lo) x_hi = x_lo + 1;
  if (y_hi == y_lo) {
    y_hi += 0.5;
    y_lo -= 0.5;
  }
  const double y_pad = 0.05 * (y_hi - y_lo);
  y_lo -= y_pad;
  y_hi += y_pad;

  auto tx = [&](double x) {
    const double f = axes.log_x
                         ? (std::log(x) - std::log(x_lo)) /
                               (std::log(x_hi) - std::log(x_lo))
                         : (x - x_lo) / (x_hi - x_lo);
    return kLeft + f * (kWidth - kLeft - kRight);
  };
  auto ty = [&](double y) {
    const double f = (y - y_lo) / (y_hi - y_lo);
    return kHeight - kBottom - f * (kHeight - kTop - kBottom);
  };

  std::ofstream os(path);
  if (!os) {
    throw std::runtime_error("write_lineplot: cannot open " + path);
  }
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
     << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << " "
     << kHeight << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"16\">"
     << escape(axes.title) << "</text>\n";

  // axes frame
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\""
     << kWidth - kLeft - kRight << "\" height=\"" << kHeight - kTop - kBottom
     << "\" fill=\"none\" stroke=\"#333\"/>\n";

  // x ticks
  std::vector<double> xticks;
  if (axes.log_x) {
    for (double v = std::pow(10.0, std::floor(std::log10(x_lo))); v <= x_hi * 1.001;
         v *= 10.0) {
      if (v >= x_lo * 0.999) xticks.push_back(v);
    }
    if (xticks.empty()) xticks = {x_lo, x_hi};
  } else {
    xticks = linear_ticks(x_lo, x_hi);
  }
  for (const double v : xticks) {
    const double px = tx(v);
    os << "<line x1=\"" << px << "\" y1=\"" << kHeight - kBottom << "\" x2=\""
       << px << "\" y2=\"" << kHeight - kBottom + 5
       << "\" stroke=\"#333\"/>\n";
    os << "<text x=\"" << px << "\" y=\"" << kHeight - kBottom + 20
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"11\">"
       << fmt(v) << "</text>\n";
  }
  for (const double v : linear_ticks(y_lo, y_hi)) {
    const double py = ty(v);
    os << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << py << "\" x2=\"" << kLeft
       << "\" y2=\"" << py << "\" stroke=\"#333\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << py << "\" x2=\""
       << kWidth - kRight << "\" y2=\"" << py
       << "\" stroke=\"#ddd\" stroke-width=\"0.5\"/>\n";
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << py + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
       << fmt(v) << "</text>\n";
  }
  os << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\""
     << kHeight - 14
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
     << escape(axes.x_label) << "</text>\n";
  os << "<text x=\"18\" y=\"" << (kTop + kHeight - kBottom) / 2
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
        "transform=\"rotate(-90 18 "
     << (kTop + kHeight - kBottom) / 2 << ")\">" << escape(axes.y_label)
     << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const Series& s = series[si];
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(*kPalette))];
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      os << fmt(tx(s.x[i])) << ',' << fmt(ty(s.y[i])) << ' ';
    }
    os << "\"/>\n";
    for (const std::size_t mi : s.marks) {
      if (mi < s.x.size()) {
        os << "<circle cx=\"" << fmt(tx(s.x[mi])) << "\" cy=\""
           << fmt(ty(s.y[mi])) << "\" r=\"4\" fill=\"" << color << "\"/>\n";
      }
    }
  }

  // legend
  double ly = kTop + 14;
  for (std::size_t si = 0; si < series.size(); ++si) {
    if (series[si].label.empty()) continue;
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(*kPalette))];
    os << "<line x1=\"" << kWidth - kRight - 150 << "\" y1=\"" << ly
       << "\" x2=\"" << kWidth - kRight - 125 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kWidth - kRight - 118 << "\" y=\"" << ly + 4
       << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << escape(series[si].label) << "</text>\n";
    ly += 16;
  }
  os << "</svg>\n";
}

}  // namespace gpn::svg

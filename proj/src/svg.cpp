#include "iaekf/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace iaekf::svg {

namespace {

constexpr double kLeft = 80.0;
constexpr double kRight = 20.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 60.0;

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Axis {
    double lo = 0.0;
    double hi = 1.0;
    bool log = false;

    double t(double v) const {
        if (log) {
            return (std::log10(v) - std::log10(lo)) / (std::log10(hi) - std::log10(lo));
        }
        return (v - lo) / (hi - lo);
    }
    std::vector<double> ticks() const {
        std::vector<double> out;
        if (log) {
            for (double e = std::floor(std::log10(lo)); e <= std::ceil(std::log10(hi)); e += 1.0) {
                const double v = std::pow(10.0, e);
                if (v >= lo * (1 - 1e-9) && v <= hi * (1 + 1e-9)) out.push_back(v);
            }
            return out;
        }
        const double raw = (hi - lo) / 5.0;
        const double mag = std::pow(10.0, std::floor(std::log10(raw)));
        double step = mag;
        for (double m : {1.0, 2.0, 5.0, 10.0}) {
            if (m * mag >= raw) {
                step = m * mag;
                break;
            }
        }
        for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) out.push_back(v);
        return out;
    }
};

Axis fit_axis(double lo, double hi, bool log) {
    Axis a;
    a.log = log;
    if (!(lo < hi)) {
        const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
        lo -= pad;
        hi += pad;
        if (log && lo <= 0.0) lo = hi * 1e-2;
    }
    if (log) {
        a.lo = std::pow(10.0, std::floor(std::log10(lo)));
        a.hi = std::pow(10.0, std::ceil(std::log10(hi)));
    } else {
        const double pad = 0.05 * (hi - lo);
        a.lo = lo - pad;
        a.hi = hi + pad;
    }
    return a;
}

void frame(std::ostringstream& os, int width, int height, const std::string& title, const std::string& x_label,
           const std::string& y_label) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << num(width / 2.0) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
       << escape(title) << "</text>\n";
    os << "<text x=\"" << num(width / 2.0) << "\" y=\"" << num(height - 12.0) << "\" text-anchor=\"middle\">"
       << escape(x_label) << "</text>\n";
    os << "<text transform=\"translate(18," << num(height / 2.0) << ") rotate(-90)\" text-anchor=\"middle\">"
       << escape(y_label) << "</text>\n";
}

void y_ticks(std::ostringstream& os, const Axis& ay, double plot_h, double plot_w) {
    for (double v : ay.ticks()) {
        const double y = kTop + plot_h * (1.0 - ay.t(v));
        os << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(y) << "\" x2=\"" << num(kLeft + plot_w) << "\" y2=\""
           << num(y) << "\" stroke=\"#e0e0e0\"/>\n";
        os << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << tick_label(v)
           << "</text>\n";
    }
}

void axes_box(std::ostringstream& os, double plot_w, double plot_h) {
    os << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(plot_w) << "\" height=\""
       << num(plot_h) << "\" fill=\"none\" stroke=\"black\"/>\n";
}

}  // namespace

std::string render(const LinePlot& plot, int width, int height) {
    double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo;
    double ylo = xlo, yhi = -xlo;
    auto take_y = [&](double v) {
        if (!std::isfinite(v) || (plot.log_y && v <= 0.0)) return;
        ylo = std::min(ylo, v);
        yhi = std::max(yhi, v);
    };
    for (const Series& s : plot.series) {
        for (double v : s.x) {
            xlo = std::min(xlo, v);
            xhi = std::max(xhi, v);
        }
        for (double v : s.y) take_y(v);
    }
    for (const Band& b : plot.bands) {
        for (double v : b.lo) take_y(v);
        for (double v : b.hi) take_y(v);
    }
    for (double v : plot.hlines) take_y(v);
    if (!std::isfinite(xlo)) {
        xlo = 0.0;
        xhi = 1.0;
    }
    if (!std::isfinite(ylo)) {
        ylo = plot.log_y ? 1.0 : 0.0;
        yhi = plot.log_y ? 10.0 : 1.0;
    }
    Axis ax;
    ax.lo = xlo;
    ax.hi = xhi > xlo ? xhi : xlo + 1.0;
    const Axis ay = fit_axis(ylo, yhi, plot.log_y);
    const double pw = width - kLeft - kRight;
    const double ph = height - kTop - kBottom;
    auto px = [&](double v) { return kLeft + pw * ax.t(v); };
    auto py = [&](double v) {
        if (plot.log_y) v = std::max(v, ay.lo);
        return kTop + ph * (1.0 - std::clamp(ay.t(v), 0.0, 1.0));
    };

    std::ostringstream os;
    frame(os, width, height, plot.title, plot.x_label, plot.y_label);
    y_ticks(os, ay, ph, pw);
    for (double v : ax.ticks()) {
        os << "<text x=\"" << num(px(v)) << "\" y=\"" << num(kTop + ph + 16) << "\" text-anchor=\"middle\">"
           << tick_label(v) << "</text>\n";
    }
    for (const Band& b : plot.bands) {
        os << "<polygon fill=\"" << b.color << "\" fill-opacity=\"" << num(b.opacity) << "\" stroke=\"none\" points=\"";
        for (std::size_t i = 0; i < b.x.size(); ++i) os << num(px(b.x[i])) << ',' << num(py(b.hi[i])) << ' ';
        for (std::size_t i = b.x.size(); i-- > 0;) os << num(px(b.x[i])) << ',' << num(py(b.lo[i])) << ' ';
        os << "\"/>\n";
    }
    for (double v : plot.hlines) {
        os << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(py(v)) << "\" x2=\"" << num(kLeft + pw) << "\" y2=\""
           << num(py(v)) << "\" stroke=\"#444\" stroke-dasharray=\"6,4\"/>\n";
    }
    for (const Series& s : plot.series) {
        os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"" << num(s.width)
           << "\" stroke-opacity=\"" << num(s.opacity) << "\" points=\"";
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            os << num(px(s.x[i])) << ',' << num(py(s.y[i])) << ' ';
        }
        os << "\"/>\n";
    }
    double ly = kTop + 14;
    for (const Series& s : plot.series) {
        if (s.label.empty()) continue;
        os << "<line x1=\"" << num(kLeft + pw - 150) << "\" y1=\"" << num(ly - 4) << "\" x2=\"" << num(kLeft + pw - 130)
           << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << num(kLeft + pw - 124) << "\" y=\"" << num(ly) << "\">" << escape(s.label) << "</text>\n";
        ly += 16;
    }
    axes_box(os, pw, ph);
    os << "</svg>\n";
    return os.str();
}

std::string render(const ViolinPlot& plot, int width, int height) {
    double ylo = std::numeric_limits<double>::infinity(), yhi = -ylo;
    for (const auto& g : plot.groups) {
        for (double v : g) {
            if (!std::isfinite(v)) continue;
            ylo = std::min(ylo, v);
            yhi = std::max(yhi, v);
        }
    }
    if (std::isfinite(plot.reference)) {
        ylo = std::min(ylo, plot.reference);
        yhi = std::max(yhi, plot.reference);
    }
    if (!std::isfinite(ylo)) {
        ylo = 0.0;
        yhi = 1.0;
    }
    const Axis ay = fit_axis(ylo, yhi, false);
    const double pw = width - kLeft - kRight;
    const double ph = height - kTop - kBottom;
    auto py = [&](double v) { return kTop + ph * (1.0 - ay.t(v)); };
    const std::size_t m = plot.groups.size();
    const double slot = m ? pw / static_cast<double>(m) : pw;

    std::ostringstream os;
    frame(os, width, height, plot.title, "", plot.y_label);
    y_ticks(os, ay, ph, pw);
    for (std::size_t gi = 0; gi < m; ++gi) {
        std::vector<double> g;
        for (double v : plot.groups[gi])
            if (std::isfinite(v)) g.push_back(v);
        const double cx = kLeft + slot * (gi + 0.5);
        if (gi < plot.labels.size()) {
            os << "<text x=\"" << num(cx) << "\" y=\"" << num(kTop + ph + 16) << "\" text-anchor=\"middle\">"
               << escape(plot.labels[gi]) << "</text>\n";
        }
        if (g.empty()) continue;
        std::sort(g.begin(), g.end());
        const double n = static_cast<double>(g.size());
        double mean = 0.0;
        for (double v : g) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : g) var += (v - mean) * (v - mean);
        const double sd = g.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
        auto q = [&](double p) {
            const double pos = p * (n - 1.0);
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const auto hi = std::min(lo + 1, g.size() - 1);
            return g[lo] + (pos - lo) * (g[hi] - g[lo]);
        };
        const double spread = std::min(sd, (q(0.75) - q(0.25)) / 1.34);
        const double bw = std::max(1.06 * (spread > 0.0 ? spread : std::max(sd, 1e-12)) * std::pow(n, -0.2),
                                   1e-12 * std::max(1.0, std::abs(mean)));
        constexpr int kPoints = 64;
        std::vector<double> ys(kPoints), dens(kPoints);
        double peak = 0.0;
        for (int i = 0; i < kPoints; ++i) {
            ys[i] = g.front() + (g.back() - g.front()) * i / (kPoints - 1.0);
            double d = 0.0;
            for (double v : g) {
                const double u = (ys[i] - v) / bw;
                d += std::exp(-0.5 * u * u);
            }
            dens[i] = d;
            peak = std::max(peak, d);
        }
        const double half = 0.4 * slot;
        os << "<polygon fill=\"#9ecae1\" stroke=\"#3182bd\" points=\"";
        for (int i = 0; i < kPoints; ++i) os << num(cx + half * dens[i] / peak) << ',' << num(py(ys[i])) << ' ';
        for (int i = kPoints; i-- > 0;) os << num(cx - half * dens[i] / peak) << ',' << num(py(ys[i])) << ' ';
        os << "\"/>\n";
        os << "<rect x=\"" << num(cx - 5) << "\" y=\"" << num(py(q(0.75))) << "\" width=\"10\" height=\""
           << num(py(q(0.25)) - py(q(0.75))) << "\" fill=\"#333\"/>\n";
        os << "<line x1=\"" << num(cx - 9) << "\" y1=\"" << num(py(q(0.5))) << "\" x2=\"" << num(cx + 9) << "\" y2=\""
           << num(py(q(0.5))) << "\" stroke=\"white\" stroke-width=\"2\"/>\n";
    }
    if (std::isfinite(plot.reference)) {
        os << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(py(plot.reference)) << "\" x2=\"" << num(kLeft + pw)
           << "\" y2=\"" << num(py(plot.reference)) << "\" stroke=\"#d62728\" stroke-dasharray=\"6,4\"/>\n";
    }
    axes_box(os, pw, ph);
    os << "</svg>\n";
    return os.str();
}

}  // namespace iaekf::svg

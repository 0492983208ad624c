#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/io/csv.hpp"

namespace qgpt::io {

namespace detail {

inline std::string xml_escape(const std::string& s) {
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

// Diverging blue-white-red ramp over [-1, 1].
inline std::string ramp(double v) {
    v = std::clamp(v, -1.0, 1.0);
    auto ch = [](double x) { return static_cast<int>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); };
    int r, g, b;
    if (v >= 0) {
        r = 255;
        g = ch(1.0 - v);
        b = ch(1.0 - v);
    } else {
        r = ch(1.0 + v);
        g = ch(1.0 + v);
        b = 255;
    }
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

inline std::string num(double v) { return fmt_fixed(v, 2); }

}  // namespace detail

// n x n grid of colored cells, values in [-1, 1]; labels run along both axes.
inline std::string svg_heatmap(const std::vector<double>& values, std::size_t n, const std::vector<std::string>& labels,
                               const std::string& title) {
    if (values.size() != n * n) throw DimensionError("svg_heatmap: values are not n x n");
    if (!labels.empty() && labels.size() != n) throw DimensionError("svg_heatmap: one label per row required");
    const double cell = n > 60 ? 6.0 : 16.0, margin = labels.empty() ? 20.0 : 60.0, top = 30.0;
    const double W = margin + cell * static_cast<double>(n) + 10, H = top + margin + cell * static_cast<double>(n);
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::num(W) + "\" height=\"" + detail::num(H) + "\">\n";
    s += "<title>" + detail::xml_escape(title) + "</title>\n";
    s += "<text x=\"" + detail::num(margin) + "\" y=\"18\" font-family=\"monospace\" font-size=\"12\">" + detail::xml_escape(title) + "</text>\n";
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            s += "<rect x=\"" + detail::num(margin + cell * static_cast<double>(j)) + "\" y=\"" +
                 detail::num(top + cell * static_cast<double>(i)) + "\" width=\"" + detail::num(cell) + "\" height=\"" + detail::num(cell) +
                 "\" fill=\"" + detail::ramp(values[i * n + j]) + "\"/>\n";
        }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = top + cell * (static_cast<double>(i) + 0.75);
        s += "<text x=\"" + detail::num(margin - 4) + "\" y=\"" + detail::num(y) +
             "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">" + detail::xml_escape(labels[i]) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

// Bars for the counts over [lo, hi] plus dashed vertical lines at `lines`.
inline std::string svg_histogram(const std::vector<std::size_t>& counts, double lo, double hi, const std::vector<double>& lines,
                                 const std::string& title) {
    if (counts.empty()) throw ContractError("svg_histogram: no bins");
    const double W = 640, H = 320, pad = 30;
    double x_lo = lo, x_hi = hi;
    for (double l : lines) {
        x_lo = std::min(x_lo, l);
        x_hi = std::max(x_hi, l);
    }
    if (!(x_hi > x_lo)) x_hi = x_lo + 1;
    const auto peak = static_cast<double>(std::max<std::size_t>(1, *std::max_element(counts.begin(), counts.end())));
    auto X = [&](double v) { return pad + (W - 2 * pad) * (v - x_lo) / (x_hi - x_lo); };
    const double base = H - pad, bin = (hi - lo) / static_cast<double>(counts.size());
    std::string path;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double x0 = X(lo + bin * static_cast<double>(i)), x1 = X(lo + bin * static_cast<double>(i + 1));
        const double h = (H - 2 * pad) * static_cast<double>(counts[i]) / peak;
        if (counts[i] == 0) continue;
        path += "M" + detail::num(x0) + " " + detail::num(base) + "V" + detail::num(base - h) + "H" + detail::num(x1) + "V" +
                detail::num(base) + "Z";
    }
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::num(W) + "\" height=\"" + detail::num(H) + "\">\n";
    s += "<title>" + detail::xml_escape(title) + "</title>\n";
    s += "<text x=\"" + detail::num(pad) + "\" y=\"18\" font-family=\"monospace\" font-size=\"12\">" + detail::xml_escape(title) + "</text>\n";
    s += "<path d=\"" + path + "\" fill=\"#4a78b5\"/>\n";
    s += "<line x1=\"" + detail::num(pad) + "\" y1=\"" + detail::num(base) + "\" x2=\"" + detail::num(W - pad) + "\" y2=\"" +
         detail::num(base) + "\" stroke=\"black\"/>\n";
    for (double l : lines) {
        s += "<line x1=\"" + detail::num(X(l)) + "\" y1=\"" + detail::num(pad) + "\" x2=\"" + detail::num(X(l)) + "\" y2=\"" +
             detail::num(base) + "\" stroke=\"#c0392b\" stroke-dasharray=\"4 3\"/>\n";
    }
    s += "<text x=\"" + detail::num(pad) + "\" y=\"" + detail::num(H - 8) + "\" font-family=\"monospace\" font-size=\"10\">" +
         fmt_real(x_lo) + "</text>\n";
    s += "<text x=\"" + detail::num(W - pad) + "\" y=\"" + detail::num(H - 8) +
         "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">" + fmt_real(x_hi) + "</text>\n";
    s += "</svg>\n";
    return s;
}

}  // namespace qgpt::io

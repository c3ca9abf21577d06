// SPDX-License-Identifier: Apache-2.0
//
// Dependency-free SVG plots: sorted-ratio curves with the base-model range
// band, ratio histograms with the fitted gamma overlay and the massive-regime
// boundary, and per-type heatmap grids. Identical reports produce identical
// bytes.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gnnma/common.hpp"
#include "gnnma/detect.hpp"
#include "gnnma/interpret.hpp"
#include "gnnma/stats.hpp"

namespace gnnma::svg {

namespace detail {

inline constexpr double kWidth = 640.0;
inline constexpr double kHeight = 420.0;
inline constexpr double kMarginLeft = 64.0;
inline constexpr double kMarginRight = 24.0;
inline constexpr double kMarginTop = 40.0;
inline constexpr double kMarginBottom = 48.0;

inline std::string num(double v) { return format_double(v); }

inline void open_svg(std::string& out, double w, double h) {
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" +
           num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\">\n";
    out += "<rect x=\"0\" y=\"0\" width=\"" + num(w) + "\" height=\"" + num(h) +
           "\" fill=\"white\"/>\n";
}

inline void text(std::string& out, double x, double y, const std::string& s,
                 const std::string& anchor = "start", int size = 12) {
    out += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-family=\"sans-serif\" font-size=\"" +
           std::to_string(size) + "\" text-anchor=\"" + anchor + "\">" + s + "</text>\n";
}

inline void line(std::string& out, double x1, double y1, double x2, double y2,
                 const std::string& stroke, const std::string& extra = "") {
    out += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" +
           num(y2) + "\" stroke=\"" + stroke + "\"" + extra + "/>\n";
}

inline void rect(std::string& out, double x, double y, double w, double h,
                 const std::string& fill, const std::string& extra = "") {
    out += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) + "\" height=\"" +
           num(h) + "\" fill=\"" + fill + "\"" + extra + "/>\n";
}

struct Axes {
    double x_min, x_max, y_min, y_max;
    double px(double x) const {
        return kMarginLeft + (x - x_min) / (x_max - x_min) * (kWidth - kMarginLeft - kMarginRight);
    }
    double py(double y) const {
        return kHeight - kMarginBottom -
               (y - y_min) / (y_max - y_min) * (kHeight - kMarginTop - kMarginBottom);
    }
};

inline void draw_frame(std::string& out, const Axes& ax, const std::string& x_label,
                       const std::string& y_label) {
    line(out, kMarginLeft, kHeight - kMarginBottom, kWidth - kMarginRight,
         kHeight - kMarginBottom, "black");
    line(out, kMarginLeft, kMarginTop, kMarginLeft, kHeight - kMarginBottom, "black");
    text(out, (kMarginLeft + kWidth - kMarginRight) / 2.0, kHeight - 12.0, x_label, "middle");
    text(out, 16.0, kMarginTop - 14.0, y_label);
    // min/max ticks on both axes
    text(out, kMarginLeft, kHeight - kMarginBottom + 16.0, num(ax.x_min), "middle", 10);
    text(out, kWidth - kMarginRight, kHeight - kMarginBottom + 16.0, num(ax.x_max), "middle", 10);
    text(out, kMarginLeft - 6.0, kHeight - kMarginBottom + 4.0, num(ax.y_min), "end", 10);
    text(out, kMarginLeft - 6.0, kMarginTop + 4.0, num(ax.y_max), "end", 10);
}

} // namespace detail

/// Sorted per-batch maxima of one layer on a log10 axis with the base-model
/// range as an orange band.
inline std::string curve_svg(const LayerCurve& curve) {
    using namespace detail;
    std::string out;
    open_svg(out, kWidth, kHeight);

    auto log_safe = [](double v) { return std::log10(std::max(v, 1e-300)); };
    double lo = log_safe(curve.base_min), hi = log_safe(curve.base_max);
    for (double v : curve.sorted_max) {
        lo = std::min(lo, log_safe(v));
        hi = std::max(hi, log_safe(v));
    }
    double pad = std::max(0.2, (hi - lo) * 0.08);
    Axes ax{0.0, static_cast<double>(std::max<size_t>(curve.sorted_max.size(), 2) - 1), lo - pad,
            hi + pad};
    draw_frame(out, ax, "batch (sorted)", "log10 max ratio");
    text(out, kWidth / 2.0, 22.0,
         "layer " + std::to_string(curve.layer) + " max ratios, " +
             std::to_string(curve.exceedances) + " above base range",
         "middle", 14);

    // base-model range band
    double band_top = ax.py(log_safe(curve.base_max));
    double band_bot = ax.py(log_safe(curve.base_min));
    rect(out, kMarginLeft, band_top, kWidth - kMarginLeft - kMarginRight, band_bot - band_top,
         "orange", " fill-opacity=\"0.35\" stroke=\"orange\"");

    if (!curve.sorted_max.empty()) {
        std::string pts;
        for (size_t i = 0; i < curve.sorted_max.size(); ++i) {
            pts += num(ax.px(static_cast<double>(i)));
            pts += ',';
            pts += num(ax.py(log_safe(curve.sorted_max[i])));
            pts += ' ';
        }
        out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n";
    }
    out += "</svg>\n";
    return out;
}

/// Histogram of t = -log10(ratio) with the fitted gamma density rescaled to
/// the histogram and a dashed line at the massive-regime boundary.
inline std::string histogram_svg(const DistributionReport& dist) {
    using namespace detail;
    std::string out;
    open_svg(out, kWidth, kHeight);

    const int bins = static_cast<int>(dist.histogram.size());
    const double width = (dist.t_max - dist.t_min) / bins;
    int64_t peak = 1;
    for (int64_t c : dist.histogram) peak = std::max(peak, c);

    double x_lo = std::min(dist.t_min, dist.ma_boundary - 0.5);
    double x_hi = dist.t_max + 0.02 * (dist.t_max - dist.t_min);
    Axes ax{x_lo, x_hi, 0.0, static_cast<double>(peak) * 1.08};
    draw_frame(out, ax, "-log10(ratio)", "count");
    text(out, kWidth / 2.0, 22.0,
         "gamma fit: shape " + num(dist.fit.shape) + ", KS " + num(dist.ks), "middle", 14);

    for (int b = 0; b < bins; ++b) {
        double lo = dist.t_min + b * width;
        double x0 = ax.px(lo);
        double x1 = ax.px(lo + width);
        double y = ax.py(static_cast<double>(dist.histogram[static_cast<size_t>(b)]));
        rect(out, x0, y, x1 - x0, kHeight - kMarginBottom - y, "lightsteelblue",
             " stroke=\"steelblue\" stroke-width=\"0.5\"");
    }

    // rescaled fitted density
    std::string pts;
    const int samples = 160;
    for (int i = 0; i <= samples; ++i) {
        double t = dist.t_min + (dist.t_max - dist.t_min) * i / samples;
        double density =
            stats::gamma_pdf(t, dist.fit) * static_cast<double>(dist.count) * width;
        pts += num(ax.px(t));
        pts += ',';
        pts += num(ax.py(std::min(density, ax.y_max)));
        pts += ' ';
    }
    out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"crimson\" stroke-width=\"1.5\"/>\n";

    // massive-regime boundary
    double bx = ax.px(dist.ma_boundary);
    line(out, bx, kMarginTop, bx, kHeight - kMarginBottom, "black",
         " stroke-dasharray=\"6 4\"");
    text(out, bx + 4.0, kMarginTop + 14.0, "t = " + num(dist.ma_boundary), "start", 11);

    out += "</svg>\n";
    return out;
}

/// Vertical stack of per-type heatmaps; cell shade scales with the percentage
/// of that type's edges carrying an MA at the (head, dim) position.
inline std::string heatmap_svg(const std::vector<HeatmapTable>& tables) {
    using namespace detail;
    if (tables.empty()) throw ValidationError("heatmap_svg: no tables");
    const double cell = 18.0;
    const double label_h = 24.0;
    const double left = 70.0;
    double width = left + tables[0].head_dim * cell + 40.0;
    double height = 16.0;
    for (const auto& t : tables) height += label_h + t.heads * cell + 12.0;

    std::string out;
    open_svg(out, width, height);
    double y = 16.0;
    for (const HeatmapTable& t : tables) {
        text(out, 8.0, y + 12.0,
             "type " + std::to_string(t.edge_type) + " (" + std::to_string(t.edge_count) +
                 " edges)",
             "start", 12);
        y += label_h;
        for (int h = 0; h < t.heads; ++h) {
            text(out, left - 6.0, y + h * cell + cell * 0.7, "h" + std::to_string(h), "end", 9);
            for (int d = 0; d < t.head_dim; ++d) {
                double v = std::clamp(t.at(h, d) / 100.0, 0.0, 1.0);
                int r = static_cast<int>(std::lround(255.0 - (255.0 - 178.0) * v));
                int g = static_cast<int>(std::lround(255.0 - (255.0 - 24.0) * v));
                int b = static_cast<int>(std::lround(255.0 - (255.0 - 43.0) * v));
                std::string fill = "rgb(" + std::to_string(r) + "," + std::to_string(g) + "," +
                                   std::to_string(b) + ")";
                rect(out, left + d * cell, y + h * cell, cell, cell, fill,
                     " stroke=\"gainsboro\" stroke-width=\"0.5\"");
            }
        }
        y += t.heads * cell + 12.0;
    }
    out += "</svg>\n";
    return out;
}

/// Simple multi-series line chart (used for loss-curve comparisons).
inline std::string line_chart_svg(const std::string& title,
                                  const std::vector<std::pair<std::string, std::vector<double>>>& series,
                                  const std::string& x_label, const std::string& y_label) {
    using namespace detail;
    if (series.empty()) throw ValidationError("line_chart_svg: no series");
    double lo = 1e300, hi = -1e300;
    size_t n = 0;
    for (const auto& [name, values] : series) {
        n = std::max(n, values.size());
        for (double v : values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (n == 0) throw ValidationError("line_chart_svg: empty series");
    if (hi <= lo) hi = lo + 1.0;
    std::string out;
    open_svg(out, kWidth, kHeight);
    Axes ax{0.0, static_cast<double>(std::max<size_t>(n, 2) - 1), lo, hi};
    draw_frame(out, ax, x_label, y_label);
    text(out, kWidth / 2.0, 22.0, title, "middle", 14);
    const char* colors[] = {"steelblue", "crimson", "seagreen", "darkorange"};
    size_t ci = 0;
    double legend_y = kMarginTop + 8.0;
    for (const auto& [name, values] : series) {
        std::string pts;
        for (size_t i = 0; i < values.size(); ++i) {
            pts += num(ax.px(static_cast<double>(i)));
            pts += ',';
            pts += num(ax.py(values[i]));
            pts += ' ';
        }
        const char* color = colors[ci % 4];
        out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"1.5\"/>\n";
        line(out, kWidth - 170.0, legend_y, kWidth - 150.0, legend_y, color);
        text(out, kWidth - 144.0, legend_y + 4.0, name, "start", 11);
        legend_y += 16.0;
        ++ci;
    }
    out += "</svg>\n";
    return out;
}

} // namespace gnnma::svg

#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "recem/metrics.hpp"

namespace recem {

inline std::string fmt_metric(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (std::size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
    f << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
        f << "\n";
    }
}

/// Histogram CSV: one `bin_low,bin_high,count` row per bin over [-1, 1].
inline void write_histogram_csv(const std::string& path, const DistributionSummary& s) {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t b = 0; b < s.histogram.size(); ++b) {
        double lo = -1.0 + 0.1 * static_cast<double>(b);
        rows.push_back({fmt_metric(lo), fmt_metric(lo + 0.1), std::to_string(s.histogram[b])});
    }
    write_csv(path, {"bin_low", "bin_high", "count"}, rows);
}

// ---- deterministic SVG charts -------------------------------------------

namespace svgdetail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#4878cf", "#d65f5f", "#59a14f", "#e8901d", "#8064a2", "#6b6b6b"};
    return colors[i % 6];
}

}  // namespace svgdetail

struct ChartSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;  // (x, y)
};

/// Fixed-size line chart. Output bytes depend only on the inputs.
inline void write_line_chart_svg(const std::string& path, const std::string& title, const std::string& x_label, const std::string& y_label,
                                 const std::vector<ChartSeries>& series) {
    using svgdetail::num;
    const double W = 720, H = 480, L = 75, R = 30, T = 45, B = 55;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmin > xmax) throw std::invalid_argument("line chart: no points");
    if (xmax == xmin) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    double pad = (ymax - ymin) * 0.08;
    if (pad == 0.0) pad = std::max(1.0, std::fabs(ymax)) * 0.05;
    ymin -= pad;
    ymax += pad;
    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"480\" viewBox=\"0 0 720 480\">\n";
    f << "<rect width=\"720\" height=\"480\" fill=\"white\"/>\n";
    f << "<text x=\"360\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
    // axes
    f << "<line x1=\"" << num(L) << "\" y1=\"" << num(H - B) << "\" x2=\"" << num(W - R) << "\" y2=\"" << num(H - B) << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << num(L) << "\" y1=\"" << num(T) << "\" x2=\"" << num(L) << "\" y2=\"" << num(H - B) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        double xv = xmin + (xmax - xmin) * i / 5.0;
        double yv = ymin + (ymax - ymin) * i / 5.0;
        f << "<line x1=\"" << num(px(xv)) << "\" y1=\"" << num(H - B) << "\" x2=\"" << num(px(xv)) << "\" y2=\"" << num(H - B + 5) << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(H - B + 20) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << svgdetail::tick_label(xv) << "</text>\n";
        f << "<line x1=\"" << num(L - 5) << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << num(L) << "\" y2=\"" << num(py(yv)) << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << num(L - 9) << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << svgdetail::tick_label(yv) << "</text>\n";
    }
    f << "<text x=\"" << num((L + W - R) / 2) << "\" y=\"" << num(H - 12) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << x_label << "</text>\n";
    f << "<text x=\"18\" y=\"" << num((T + H - B) / 2) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 " << num((T + H - B) / 2) << ")\">" << y_label << "</text>\n";
    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        f << "<polyline fill=\"none\" stroke=\"" << svgdetail::palette(si) << "\" stroke-width=\"2\" points=\"";
        for (auto [x, y] : s.points) f << num(px(x)) << "," << num(py(y)) << " ";
        f << "\"/>\n";
        for (auto [x, y] : s.points)
            f << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y)) << "\" r=\"3\" fill=\"" << svgdetail::palette(si) << "\"/>\n";
        double ly = T + 16.0 * static_cast<double>(si);
        f << "<rect x=\"" << num(W - R - 150) << "\" y=\"" << num(ly) << "\" width=\"10\" height=\"10\" fill=\"" << svgdetail::palette(si) << "\"/>\n";
        f << "<text x=\"" << num(W - R - 135) << "\" y=\"" << num(ly + 9) << "\" font-family=\"sans-serif\" font-size=\"12\">" << s.name << "</text>\n";
    }
    f << "</svg>\n";
}

/// Histogram over [-1, 1]; overlays several summaries side by side.
inline void write_histogram_svg(const std::string& path, const std::string& title, const std::vector<std::pair<std::string, DistributionSummary>>& dists) {
    using svgdetail::num;
    const double W = 720, H = 480, L = 75, R = 30, T = 45, B = 55;
    std::size_t max_count = 1;
    for (const auto& [name, s] : dists)
        for (std::size_t c : s.histogram) max_count = std::max(max_count, c);

    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"480\" viewBox=\"0 0 720 480\">\n";
    f << "<rect width=\"720\" height=\"480\" fill=\"white\"/>\n";
    f << "<text x=\"360\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
    f << "<line x1=\"" << num(L) << "\" y1=\"" << num(H - B) << "\" x2=\"" << num(W - R) << "\" y2=\"" << num(H - B) << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << num(L) << "\" y1=\"" << num(T) << "\" x2=\"" << num(L) << "\" y2=\"" << num(H - B) << "\" stroke=\"black\"/>\n";
    double bins = static_cast<double>(DistributionSummary::kBins);
    double bw = (W - L - R) / bins;
    double group = bw / static_cast<double>(std::max<std::size_t>(dists.size(), 1));
    for (std::size_t b = 0; b <= DistributionSummary::kBins; b += 2) {
        double xv = -1.0 + 0.1 * static_cast<double>(b);
        double x = L + bw * static_cast<double>(b);
        f << "<text x=\"" << num(x) << "\" y=\"" << num(H - B + 20) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << svgdetail::tick_label(xv) << "</text>\n";
    }
    for (std::size_t di = 0; di < dists.size(); ++di) {
        const auto& s = dists[di].second;
        for (std::size_t b = 0; b < s.histogram.size(); ++b) {
            double h = (H - T - B) * static_cast<double>(s.histogram[b]) / static_cast<double>(max_count);
            double x = L + bw * static_cast<double>(b) + group * static_cast<double>(di);
            f << "<rect x=\"" << num(x) << "\" y=\"" << num(H - B - h) << "\" width=\"" << num(group * 0.9) << "\" height=\"" << num(h)
              << "\" fill=\"" << svgdetail::palette(di) << "\" fill-opacity=\"0.75\"/>\n";
        }
        double ly = T + 16.0 * static_cast<double>(di);
        f << "<rect x=\"" << num(W - R - 150) << "\" y=\"" << num(ly) << "\" width=\"10\" height=\"10\" fill=\"" << svgdetail::palette(di) << "\"/>\n";
        f << "<text x=\"" << num(W - R - 135) << "\" y=\"" << num(ly + 9) << "\" font-family=\"sans-serif\" font-size=\"12\">" << dists[di].first << "</text>\n";
    }
    f << "<text x=\"" << num((L + W - R) / 2) << "\" y=\"" << num(H - 12) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">cosine similarity</text>\n";
    f << "<text x=\"18\" y=\"" << num((T + H - B) / 2) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 " << num((T + H - B) / 2) << ")\">count</text>\n";
    f << "</svg>\n";
}

/// mean and 1.96 * sd / sqrt(n) half-width over a set of per-seed values.
struct Aggregate {
    double mean = 0.0;
    double ci_half = 0.0;
    std::size_t n = 0;
};

inline Aggregate aggregate(const std::vector<double>& xs) {
    Aggregate a;
    a.n = xs.size();
    if (xs.empty()) return a;
    for (double x : xs) a.mean += x;
    a.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double var = 0.0;
        for (double x : xs) var += (x - a.mean) * (x - a.mean);
        var /= static_cast<double>(xs.size() - 1);
        a.ci_half = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(xs.size()));
    }
    return a;
}

inline std::string fmt_ci(const Aggregate& a) { return fmt_metric(a.mean) + " (+-" + fmt_metric(a.ci_half) + ")"; }

}  // namespace recem

#ifndef GUIDANCE_LAB_PLOT_HPP
#define GUIDANCE_LAB_PLOT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "guidance_lab/diagnostics.hpp"

namespace glab {

/// Malformed or empty trace input; the message names file and line.
class TraceParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_number(const std::string& s, const std::string& where) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw TraceParseError(where + ": expected a number, got '" + s + "'");
    }
    if (pos != s.size()) throw TraceParseError(where + ": trailing characters in '" + s + "'");
    return v;
}

}  // namespace detail

inline std::vector<StepTrace> read_trace_csv(std::istream& in, const std::string& name) {
    std::string line;
    if (!std::getline(in, line)) throw TraceParseError(name + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kTraceCsvHeader) throw TraceParseError(name + ":1: unexpected header");
    std::vector<StepTrace> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const std::string where = name + ":" + std::to_string(lineno);
        const auto f = detail::split_csv_line(line);
        if (f.size() != 7) {
            throw TraceParseError(where + ": expected 7 fields, got " + std::to_string(f.size()));
        }
        StepTrace tr;
        tr.chain = static_cast<int>(detail::parse_number(f[0], where));
        tr.t = static_cast<int>(detail::parse_number(f[1], where));
        tr.on_loss = detail::parse_number(f[2], where);
        tr.off_loss = detail::parse_number(f[3], where);
        tr.guided = detail::parse_number(f[4], where) != 0.0;
        if (!f[5].empty()) tr.grad_norm = detail::parse_number(f[5], where);
        tr.grad_evals = static_cast<std::size_t>(detail::parse_number(f[6], where));
        out.push_back(tr);
    }
    if (out.empty()) throw TraceParseError(name + ": no data rows");
    return out;
}

inline std::vector<StepTrace> read_trace_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw TraceParseError(path.string() + ": cannot open");
    return read_trace_csv(in, path.string());
}

struct PlotSeries {
    std::string name;
    std::vector<std::pair<int, double>> points;  // (t, value), t descending
};

enum class PlotMetric { OnLoss, OffLoss };

/// Batch-mean loss curve of one trace file.
inline PlotSeries loss_series(const std::string& name, const std::vector<StepTrace>& traces,
                              PlotMetric metric) {
    const auto means = batch_mean_by_t(std::span<const StepTrace>(traces), [metric](const StepTrace& tr) {
        return metric == PlotMetric::OnLoss ? tr.on_loss : tr.off_loss;
    });
    PlotSeries s{name, {}};
    for (auto it = means.rbegin(); it != means.rend(); ++it) s.points.emplace_back(it->first, it->second);
    return s;
}

namespace detail {

inline std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string fmt_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

}  // namespace detail

/// Line chart, t decreasing left to right. Output depends only on the input.
inline std::string render_svg(const std::vector<PlotSeries>& series, const std::string& y_label) {
    if (series.empty()) throw std::invalid_argument("render_svg: no series");
    constexpr double W = 720, H = 420, L = 70, R = 180, Tp = 30, B = 50;
    int t_min = INT32_MAX, t_max = INT32_MIN;
    double y_min = INFINITY, y_max = -INFINITY;
    for (const auto& s : series) {
        for (const auto& [t, v] : s.points) {
            t_min = std::min(t_min, t);
            t_max = std::max(t_max, t);
            y_min = std::min(y_min, v);
            y_max = std::max(y_max, v);
        }
    }
    if (t_min == t_max) ++t_max;
    if (y_min == y_max) {
        y_min -= 0.5;
        y_max += 0.5;
    }
    const double pw = W - L - R, ph = H - Tp - B;
    auto px = [&](int t) { return L + pw * (t_max - t) / static_cast<double>(t_max - t_min); };
    auto py = [&](double v) { return Tp + ph * (y_max - v) / (y_max - y_min); };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << Tp + ph << "\" x2=\"" << L + pw << "\" y2=\"" << Tp + ph
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << Tp << "\" x2=\"" << L << "\" y2=\"" << Tp + ph
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = y_min + (y_max - y_min) * i / 4.0;
        os << "<text x=\"" << L - 6 << "\" y=\"" << detail::fmt2(py(v) + 4)
           << "\" font-size=\"11\" text-anchor=\"end\">" << detail::fmt_tick(v) << "</text>\n";
        const int t = t_max - static_cast<int>(std::lround((t_max - t_min) * i / 4.0));
        os << "<text x=\"" << detail::fmt2(px(t)) << "\" y=\"" << Tp + ph + 16
           << "\" font-size=\"11\" text-anchor=\"middle\">" << t << "</text>\n";
    }
    os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 10
       << "\" font-size=\"13\" text-anchor=\"middle\">t (descending)</text>\n";
    os << "<text x=\"16\" y=\"" << Tp + ph / 2 << "\" font-size=\"13\" text-anchor=\"middle\" "
       << "transform=\"rotate(-90 16 " << Tp + ph / 2 << ")\">" << detail::xml_escape(y_label)
       << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = palette[i % std::size(palette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t p = 0; p < series[i].points.size(); ++p) {
            const auto& [t, v] = series[i].points[p];
            os << (p ? " " : "") << detail::fmt2(px(t)) << ',' << detail::fmt2(py(v));
        }
        os << "\"/>\n";
        const double ly = Tp + 16 * static_cast<double>(i + 1);
        os << "<line x1=\"" << L + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << L + pw + 32
           << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << L + pw + 38 << "\" y=\"" << ly << "\" font-size=\"11\">"
           << detail::xml_escape(series[i].name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

/// One batch-mean series per trace file, legend from the file name.
inline std::string emit_plots(const std::vector<std::filesystem::path>& trace_files,
                              PlotMetric metric = PlotMetric::OnLoss) {
    if (trace_files.empty()) throw std::invalid_argument("plot: need at least one trace file");
    std::vector<PlotSeries> series;
    for (const auto& path : trace_files) {
        std::string name = path.filename().string();
        if (path.has_parent_path() && name == "trace.csv") {
            name = path.parent_path().filename().string() + "/" + name;
        }
        series.push_back(loss_series(name, read_trace_csv(path), metric));
    }
    return render_svg(series, metric == PlotMetric::OnLoss ? "on-sampling loss (batch mean)"
                                                           : "off-sampling loss (batch mean)");
}

}  // namespace glab

#endif  // GUIDANCE_LAB_PLOT_HPP

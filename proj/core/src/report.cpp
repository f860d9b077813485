#include "factlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace factlab {
namespace {

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// short human-readable number for the text table and tick labels
std::string compact_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string xml_escape(const std::string& s) {
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

double nice_step(double raw) {
    if (!(raw > 0.0)) return 1.0;
    const double expv = std::floor(std::log10(raw));
    const double f = raw / std::pow(10.0, expv);
    const double nf = f < 1.5 ? 1.0 : f < 3.0 ? 2.0 : f < 7.0 ? 5.0 : 10.0;
    return nf * std::pow(10.0, expv);
}

} // namespace

std::string csv_field(const std::string& s) {
    const bool quote = s.find_first_of(",\"\r\n") != std::string::npos;
    if (!quote) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string csv_record(const std::vector<std::string>& fields) {
    std::string out;
    for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += csv_field(fields[i]);
    }
    out += "\r\n";
    return out;
}

RunView load_run(const std::string& dir) {
    RunView rv;
    rv.dir = dir;
    njson man;
    try {
        man = njson::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
    } catch (const std::exception& e) {
        throw std::runtime_error("load_run: " + std::string(e.what()));
    }
    if (!man.contains("run") || !man.at("run").is_string())
        throw std::runtime_error("load_run: manifest without a run id: " + dir);
    rv.id = man.at("run").get<std::string>();
    rv.records = load_metrics_jsonl((fs::path(dir) / "metrics.jsonl").string());
    if (rv.records.empty()) throw std::runtime_error("load_run: no metric records in " + dir);
    return rv;
}

const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names = {
        "acc_known", "acc_unknown",     "acc_held", "acc_maybe_known", "acc_weakly_known",
        "rd",        "ns",              "mtd",      "rank_rho",        "ntr",
        "jsd",       "delta_held_pp"};
    return names;
}

std::optional<double> metric_value(const DriftReport& r, const std::string& name) {
    if (name == "acc_known") return r.acc_known;
    if (name == "acc_unknown") return r.acc_unknown;
    if (name == "acc_held") return r.acc_held;
    if (name == "acc_maybe_known") return r.acc_maybe_known;
    if (name == "acc_weakly_known") return r.acc_weakly_known;
    if (name == "rd") return r.rd;
    if (name == "ns") return r.ns;
    if (name == "mtd") return r.mtd;
    if (name == "rank_rho") return r.rank_rho;
    if (name == "ntr") return r.ntr;
    if (name == "jsd") return r.jsd;
    if (name == "delta_held_pp") return r.delta_held_pp;
    throw std::invalid_argument("unknown metric: " + name);
}

std::vector<std::string> write_report(const std::vector<std::string>& run_dirs,
                                      const std::string& axis, const std::string& out_dir) {
    if (run_dirs.empty()) throw std::invalid_argument("report: at least one run is required");
    if (out_dir.empty()) throw std::invalid_argument("report: an output directory is required");

    std::string axis_sec, axis_key;
    if (!axis.empty()) {
        const auto dot = axis.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == axis.size())
            throw std::invalid_argument("report: axis '" + axis + "' must be section.key");
        axis_sec = axis.substr(0, dot);
        axis_key = axis.substr(dot + 1);
    }

    std::vector<std::string> warnings;
    std::vector<RunView> runs;
    for (const auto& dir : run_dirs) {
        RunView rv = load_run(dir);
        if (!axis.empty()) {
            const njson man =
                njson::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
            const njson& cfg = man.at("config");
            if (!cfg.contains(axis_sec) || !cfg.at(axis_sec).contains(axis_key)) {
                warnings.push_back("run " + dir + ": axis " + axis +
                                   " not in its config; row omitted");
                continue;
            }
            rv.axis_value = cfg.at(axis_sec).at(axis_key).get<std::string>();
        }
        runs.push_back(std::move(rv));
    }
    if (runs.empty()) throw std::runtime_error("report: no runs carry the axis " + axis);
    if (!axis.empty())
        std::stable_sort(runs.begin(), runs.end(),
                         [](const RunView& a, const RunView& b) { return a.axis_value < b.axis_value; });

    fs::create_directories(out_dir);

    // CSV: full-precision final-epoch values
    std::vector<std::string> header{"run"};
    if (!axis.empty()) header.push_back(axis);
    header.emplace_back("epoch");
    for (const auto& m : metric_names()) header.push_back(m);
    std::string csv = csv_record(header);
    for (const auto& rv : runs) {
        const DriftReport& r = rv.records.back().report;
        std::vector<std::string> row{rv.id};
        if (!axis.empty()) row.push_back(rv.axis_value);
        row.push_back(std::to_string(r.epoch));
        for (const auto& m : metric_names()) {
            const auto v = metric_value(r, m);
            row.push_back(v ? format_double(*v) : std::string());
        }
        csv += csv_record(row);
    }
    write_text_file((fs::path(out_dir) / "report.csv").string(), csv);

    // text table: aligned columns, one block per axis value
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> tcols{"run"};
    tcols.emplace_back("epoch");
    for (const auto& m : metric_names()) tcols.push_back(m);
    cells.push_back(tcols);
    for (const auto& rv : runs) {
        const DriftReport& r = rv.records.back().report;
        std::vector<std::string> row{rv.id};
        row.push_back(std::to_string(r.epoch));
        for (const auto& m : metric_names()) {
            const auto v = metric_value(r, m);
            row.push_back(v ? compact_num(*v) : std::string("-"));
        }
        cells.push_back(std::move(row));
    }
    std::vector<size_t> width(cells[0].size(), 0);
    for (const auto& row : cells)
        for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    const auto render_row = [&](const std::vector<std::string>& row) {
        std::string line;
        for (size_t c = 0; c < row.size(); ++c) {
            std::string cell = row[c];
            if (c == 0)
                cell.resize(width[c], ' '); // left-align the id
            else
                cell.insert(0, width[c] - cell.size(), ' ');
            line += cell;
            if (c + 1 < row.size()) line += "  ";
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        return line + "\n";
    };
    std::string txt = "final-epoch summary across " + std::to_string(runs.size()) + " runs\n";
    if (!axis.empty()) txt += "axis: " + axis + "\n";
    txt += "\n";
    std::string cur_group = "\x01"; // never a real value
    for (size_t i = 0; i < runs.size(); ++i) {
        if (!axis.empty() && runs[i].axis_value != cur_group) {
            cur_group = runs[i].axis_value;
            if (i) txt += "\n";
            txt += axis + " = " + cur_group + "\n";
            txt += render_row(cells[0]);
        } else if (i == 0) {
            txt += render_row(cells[0]);
        }
        txt += render_row(cells[i + 1]);
    }
    write_text_file((fs::path(out_dir) / "report.txt").string(), txt);
    return warnings;
}

void write_plots(const std::vector<std::string>& run_dirs, const std::vector<std::string>& metrics,
                 const std::string& out_dir) {
    if (run_dirs.empty()) throw std::invalid_argument("plot: at least one run is required");
    if (metrics.empty()) throw std::invalid_argument("plot: at least one metric is required");
    if (out_dir.empty()) throw std::invalid_argument("plot: an output directory is required");
    for (const auto& m : metrics) metric_value(DriftReport{}, m); // validates names

    std::vector<RunView> runs;
    for (const auto& dir : run_dirs) runs.push_back(load_run(dir));
    for (size_t i = 1; i < runs.size(); ++i) {
        if (runs[i].records.size() != runs[0].records.size())
            throw std::invalid_argument("plot: runs do not share an epoch axis");
        for (size_t t = 0; t < runs[i].records.size(); ++t)
            if (runs[i].records[t].report.epoch != runs[0].records[t].report.epoch)
                throw std::invalid_argument("plot: runs do not share an epoch axis");
    }
    fs::create_directories(out_dir);

    static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                     "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"};
    constexpr size_t kPaletteN = sizeof kPalette / sizeof *kPalette;

    const double W = 760, H = 440;
    const double ml = 64, mr = 190, mt = 40, mb = 48;
    const double pw = W - ml - mr, ph = H - mt - mb;

    for (const auto& metric : metrics) {
        // series per run (nullopt where the record lacks the field)
        std::vector<std::vector<std::optional<double>>> series(runs.size());
        double lo = 0, hi = 0;
        bool any = false;
        for (size_t r = 0; r < runs.size(); ++r) {
            for (const auto& rec : runs[r].records) {
                const auto v = metric_value(rec.report, metric);
                series[r].push_back(v);
                if (v) {
                    lo = any ? std::min(lo, *v) : *v;
                    hi = any ? std::max(hi, *v) : *v;
                    any = true;
                }
            }
        }
        const auto& epochs = runs[0].records;
        const double x0 = double(epochs.front().report.epoch);
        const double x1 = double(epochs.back().report.epoch);
        if (!any) {
            lo = 0.0;
            hi = 1.0;
        }
        if (hi - lo < 1e-12) {
            const double pad = std::max(0.5, std::fabs(hi) * 0.1);
            lo -= pad;
            hi += pad;
        } else {
            const double pad = (hi - lo) * 0.06;
            lo -= pad;
            hi += pad;
        }
        const double xspan = std::max(1.0, x1 - x0);
        const auto px = [&](double e) { return ml + (e - x0) / xspan * pw; };
        const auto py = [&](double v) { return mt + (hi - v) / (hi - lo) * ph; };

        std::string svg;
        svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
        svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
               compact_num(W) + "\" height=\"" + compact_num(H) + "\" viewBox=\"0 0 " +
               compact_num(W) + " " + compact_num(H) + "\">\n";
        svg += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
        svg += "<text x=\"" + compact_num(ml) + "\" y=\"24\" font-family=\"sans-serif\" "
               "font-size=\"15\" fill=\"#111111\">" + xml_escape(metric) + "</text>\n";

        // y grid + labels
        const double ystep = nice_step((hi - lo) / 4.5);
        for (double v = std::ceil(lo / ystep) * ystep; v <= hi + 1e-12 * ystep; v += ystep) {
            const double y = py(v);
            svg += "<line x1=\"" + compact_num(ml) + "\" y1=\"" + compact_num(y) + "\" x2=\"" +
                   compact_num(ml + pw) + "\" y2=\"" + compact_num(y) +
                   "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
            svg += "<text x=\"" + compact_num(ml - 8) + "\" y=\"" + compact_num(y + 4) +
                   "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#444444\" "
                   "text-anchor=\"end\">" + compact_num(std::fabs(v) < 1e-12 ? 0.0 : v) +
                   "</text>\n";
        }
        // x ticks
        double xstep = nice_step(xspan / 6.0);
        if (xstep < 1.0) xstep = 1.0;
        for (double e = std::ceil(x0 / xstep) * xstep; e <= x1 + 1e-9; e += xstep) {
            const double x = px(e);
            svg += "<line x1=\"" + compact_num(x) + "\" y1=\"" + compact_num(mt + ph) +
                   "\" x2=\"" + compact_num(x) + "\" y2=\"" + compact_num(mt + ph + 5) +
                   "\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
            svg += "<text x=\"" + compact_num(x) + "\" y=\"" + compact_num(mt + ph + 18) +
                   "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#444444\" "
                   "text-anchor=\"middle\">" + compact_num(e) + "</text>\n";
        }
        // frame + axis titles
        svg += "<rect x=\"" + compact_num(ml) + "\" y=\"" + compact_num(mt) + "\" width=\"" +
               compact_num(pw) + "\" height=\"" + compact_num(ph) +
               "\" fill=\"none\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
        svg += "<text x=\"" + compact_num(ml + pw / 2) + "\" y=\"" + compact_num(H - 12) +
               "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#444444\" "
               "text-anchor=\"middle\">epoch</text>\n";

        // one polyline per contiguous present segment, dots for singletons
        for (size_t r = 0; r < runs.size(); ++r) {
            const char* color = kPalette[r % kPaletteN];
            size_t t = 0;
            while (t < series[r].size()) {
                if (!series[r][t]) {
                    ++t;
                    continue;
                }
                size_t end = t;
                while (end < series[r].size() && series[r][end]) ++end;
                if (end - t == 1) {
                    svg += "<circle cx=\"" +
                           compact_num(px(double(epochs[t].report.epoch))) + "\" cy=\"" +
                           compact_num(py(*series[r][t])) + "\" r=\"2.5\" fill=\"" + color +
                           "\"/>\n";
                } else {
                    svg += "<polyline fill=\"none\" stroke=\"";
                    svg += color;
                    svg += "\" stroke-width=\"1.8\" points=\"";
                    for (size_t i = t; i < end; ++i) {
                        if (i > t) svg += ' ';
                        svg += compact_num(px(double(epochs[i].report.epoch))) + "," +
                               compact_num(py(*series[r][i]));
                    }
                    svg += "\"/>\n";
                }
                t = end;
            }
            // legend entry
            const double ly = mt + 10 + double(r) * 18;
            svg += "<line x1=\"" + compact_num(ml + pw + 12) + "\" y1=\"" + compact_num(ly) +
                   "\" x2=\"" + compact_num(ml + pw + 34) + "\" y2=\"" + compact_num(ly) +
                   "\" stroke=\"" + color + "\" stroke-width=\"2.5\"/>\n";
            svg += "<text x=\"" + compact_num(ml + pw + 40) + "\" y=\"" + compact_num(ly + 4) +
                   "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#222222\">" +
                   xml_escape(runs[r].id) + "</text>\n";
        }
        svg += "</svg>\n";
        write_text_file((fs::path(out_dir) / ("plot_" + metric + ".svg")).string(), svg);

        // companion CSV: epoch column + one column per run
        std::vector<std::string> header{"epoch"};
        for (const auto& rv : runs) header.push_back(rv.id);
        std::string csv = csv_record(header);
        for (size_t t = 0; t < epochs.size(); ++t) {
            std::vector<std::string> row{std::to_string(epochs[t].report.epoch)};
            for (size_t r = 0; r < runs.size(); ++r)
                row.push_back(series[r][t] ? format_double(*series[r][t]) : std::string());
            csv += csv_record(row);
        }
        write_text_file((fs::path(out_dir) / ("plot_" + metric + ".csv")).string(), csv);
    }
}

} // namespace factlab

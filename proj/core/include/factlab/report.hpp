#pragma once

#include <string>
#include <vector>

#include "factlab/runner.hpp"

namespace factlab {

// RFC 4180: fields holding commas, quotes, or line breaks are quoted with
// embedded quotes doubled; records end with CRLF.
std::string csv_field(const std::string& s);
std::string csv_record(const std::vector<std::string>& fields);

// One completed run directory, reloaded from its artifacts.
struct RunView {
    std::string dir;
    std::string id;
    std::string axis_value; // filled by report() for the grouping axis
    std::vector<MetricRecord> records;
};

RunView load_run(const std::string& dir);

// metric column names a record exposes, in emission order
const std::vector<std::string>& metric_names();
// value of one metric column; nullopt for absent optional fields
std::optional<double> metric_value(const DriftReport& r, const std::string& name);

// Final-epoch summary across runs, grouped by a config axis ("section.key"
// from each run's manifest; empty = no grouping). Writes report.csv and
// report.txt under out_dir. Runs missing the axis are dropped with a warning
// line returned to the caller.
std::vector<std::string> write_report(const std::vector<std::string>& run_dirs,
                                      const std::string& axis, const std::string& out_dir);

// One SVG 1.1 line chart (plus its CSV) per metric, epochs on the x axis and
// one polyline per run. All runs must share the same epoch sequence.
void write_plots(const std::vector<std::string>& run_dirs,
                 const std::vector<std::string>& metrics, const std::string& out_dir);

} // namespace factlab

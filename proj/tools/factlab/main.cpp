// factlab: deterministic fine-tuning forgetting experiments on a synthetic
// fact world. Every subcommand takes --config/--out/--seed; errors leave one
// machine-readable JSON line on stderr and a nonzero exit code.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "factlab/config.hpp"
#include "factlab/report.hpp"
#include "factlab/runner.hpp"
#include "factlab/version.hpp"

namespace {

using factlab::ExperimentConfig;
using factlab::IniFile;
using njson = nlohmann::ordered_json;

struct Common {
    std::string config;
    std::string out;
    std::optional<uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "configuration file (sectioned key=value text)");
    sub->add_option("--out", c.out, "output directory (overrides [run] out)");
    sub->add_option("--seed", c.seed, "global seed (overrides [run] seed)");
}

IniFile load_ini(const Common& c) {
    return c.config.empty() ? IniFile() : IniFile::parse_file(c.config);
}

ExperimentConfig load_experiment(const Common& c) {
    ExperimentConfig cfg = factlab::experiment_config_from(load_ini(c));
    if (!c.out.empty()) cfg.run.out = c.out;
    if (c.seed) cfg.run.seed = *c.seed;
    return cfg;
}

std::string resolve_out(const Common& c, const IniFile& ini) {
    if (!c.out.empty()) return c.out;
    if (const std::string* v = ini.find("run", "out")) return *v;
    throw std::invalid_argument("an output directory is required (--out or [run] out)");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == '|') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    std::vector<std::string> trimmed;
    for (auto& v : out) {
        const auto b = v.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = v.find_last_not_of(" \t");
        trimmed.push_back(v.substr(b, e - b + 1));
    }
    return trimmed;
}

// [section] holding exactly the allowed keys; `required` must be present
void check_section(const IniFile& ini, const std::string& section,
                   const std::vector<std::string>& allowed,
                   const std::vector<std::string>& required) {
    for (const auto& sec : ini.sections())
        if (sec != section)
            throw std::invalid_argument(section + ": unexpected section [" + sec + "]");
    for (const auto& [k, v] : ini.entries(section)) {
        (void)v;
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            throw std::invalid_argument(section + ": unknown key '" + k + "'");
    }
    for (const auto& k : required)
        if (!ini.has(section, k))
            throw std::invalid_argument(section + ": missing required key '" + k + "'");
}

// stderr progress lines keep multi-minute pipelines observable; stdout stays
// reserved for the final result object
factlab::RunHooks progress_hooks() {
    factlab::RunHooks h;
    h.on_pretrain_epoch = [](const factlab::PretrainEpoch& e) {
        njson j;
        j["pretrain_epoch"] = e.epoch;
        j["loss"] = e.loss;
        j["accuracy"] = e.accuracy;
        std::cerr << j.dump() << "\n";
    };
    h.on_record = [](const factlab::MetricRecord& r) {
        std::cerr << factlab::metric_record_line(r) << "\n";
    };
    return h;
}

int cmd_gen_world(const Common& c) {
    ExperimentConfig cfg = load_experiment(c);
    const factlab::World w = factlab::run_gen_world(cfg);
    njson j;
    j["out"] = cfg.run.out.empty() ? c.out : cfg.run.out;
    j["facts"] = w.base_facts.size();
    j["vocab_size"] = w.tokenizer.vocab_size();
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_pretrain(const Common& c) {
    const factlab::RunResult r = factlab::run_pretrain(load_experiment(c), progress_hooks());
    njson j;
    j["out"] = r.dir;
    j["source"] = r.pretrain_source;
    j["epochs"] = r.pretrain.epochs;
    j["accuracy"] = r.pretrain.accuracy;
    j["retention"] = r.base_probe.retention;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_probe(const Common& c) {
    const factlab::RunResult r = factlab::run_probe(load_experiment(c));
    njson j;
    j["out"] = r.dir;
    njson counts = njson::object();
    for (int k = 0; k < 4; ++k)
        counts[factlab::to_string(static_cast<factlab::KnowledgeCategory>(k))] =
            r.base_probe.counts[static_cast<size_t>(k)];
    j["counts"] = std::move(counts);
    j["highly_known_fraction"] = r.base_probe.highly_known_fraction;
    j["retention"] = r.base_probe.retention;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_run(const Common& c) {
    const factlab::RunResult r = factlab::run_experiment(load_experiment(c), progress_hooks());
    njson j;
    j["out"] = r.dir;
    j["records"] = r.records.size();
    j["final"] = njson::parse(factlab::metric_record_line(r.records.back()));
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_sweep(const Common& c) {
    if (c.config.empty()) throw std::invalid_argument("sweep: --config is required");
    const IniFile base = IniFile::parse_file(c.config);
    const std::string out = resolve_out(c, base);
    const auto points = factlab::run_sweep(base, out, c.seed, progress_hooks());
    size_t ok = 0;
    for (const auto& p : points)
        if (p.error.empty()) ++ok;
    njson j;
    j["out"] = out;
    j["points"] = points.size();
    j["ok"] = ok;
    j["failed"] = points.size() - ok;
    j["summary"] = out + "/summary.csv";
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_report(const Common& c) {
    if (c.config.empty()) throw std::invalid_argument("report: --config is required");
    const IniFile ini = IniFile::parse_file(c.config);
    check_section(ini, "report", {"runs", "axis"}, {"runs"});
    const std::vector<std::string> runs = split_list(*ini.find("report", "runs"));
    const std::string* axis = ini.find("report", "axis");
    const std::string out = c.out.empty()
                                ? throw std::invalid_argument("report: --out is required")
                                : c.out;
    const auto warnings = factlab::write_report(runs, axis ? *axis : std::string(), out);
    for (const auto& w : warnings) {
        njson jw;
        jw["warning"] = w;
        std::cerr << jw.dump() << "\n";
    }
    njson j;
    j["out"] = out;
    j["runs"] = runs.size() - warnings.size();
    j["omitted"] = warnings.size();
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_plot(const Common& c) {
    if (c.config.empty()) throw std::invalid_argument("plot: --config is required");
    const IniFile ini = IniFile::parse_file(c.config);
    check_section(ini, "plot", {"runs", "metrics"}, {"runs"});
    const std::vector<std::string> runs = split_list(*ini.find("plot", "runs"));
    std::vector<std::string> metrics = factlab::metric_names();
    if (const std::string* m = ini.find("plot", "metrics")) metrics = split_list(*m);
    if (c.out.empty()) throw std::invalid_argument("plot: --out is required");
    factlab::write_plots(runs, metrics, c.out);
    njson j;
    j["out"] = c.out;
    j["metrics"] = metrics;
    std::cout << j.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"deterministic fine-tuning forgetting experiments on a synthetic fact world"};
    app.set_version_flag("--version", std::string(factlab::version_string()));
    app.require_subcommand(1);

    Common c_world, c_pretrain, c_probe, c_run, c_sweep, c_report, c_plot;
    CLI::App* s_world = app.add_subcommand("gen-world", "write the base fact world");
    CLI::App* s_pretrain =
        app.add_subcommand("pretrain", "train a base model to the target accuracy");
    CLI::App* s_probe = app.add_subcommand("probe", "knowledge categories for a pretrained model");
    CLI::App* s_run = app.add_subcommand("run", "one fine-tuning experiment with metric records");
    CLI::App* s_sweep = app.add_subcommand("sweep", "cross product of [sweep] axes");
    CLI::App* s_report = app.add_subcommand("report", "final-epoch tables across runs");
    CLI::App* s_plot = app.add_subcommand("plot", "per-metric SVG charts across runs");
    add_common(s_world, c_world);
    add_common(s_pretrain, c_pretrain);
    add_common(s_probe, c_probe);
    add_common(s_run, c_run);
    add_common(s_sweep, c_sweep);
    add_common(s_report, c_report);
    add_common(s_plot, c_plot);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        njson j;
        j["error"] = e.what();
        std::cerr << j.dump() << "\n";
        return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
    }

    try {
        if (s_world->parsed()) return cmd_gen_world(c_world);
        if (s_pretrain->parsed()) return cmd_pretrain(c_pretrain);
        if (s_probe->parsed()) return cmd_probe(c_probe);
        if (s_run->parsed()) return cmd_run(c_run);
        if (s_sweep->parsed()) return cmd_sweep(c_sweep);
        if (s_report->parsed()) return cmd_report(c_report);
        if (s_plot->parsed()) return cmd_plot(c_plot);
        throw std::logic_error("no subcommand dispatched");
    } catch (const std::exception& e) {
        njson j;
        j["error"] = e.what();
        std::cerr << j.dump() << "\n";
        return 1;
    }
}

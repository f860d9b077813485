#include "factlab/config.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "factlab/rng.hpp"

namespace factlab {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

bool valid_name(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
            return false;
    return true;
}

[[noreturn]] void parse_fail(const std::string& origin, size_t line, const std::string& what) {
    throw std::invalid_argument("config: " + origin + ":" + std::to_string(line) + ": " + what);
}

} // namespace

IniFile IniFile::parse_string(const std::string& text, const std::string& origin) {
    IniFile ini;
    std::istringstream in(text);
    std::string raw, section;
    size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        // full-line comments and inline " #" comments
        std::string line = raw;
        const std::string lead = trim(line);
        if (lead.empty() || lead[0] == '#' || lead[0] == ';') continue;
        if (const auto cut = line.find(" #"); cut != std::string::npos) line = line.substr(0, cut);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') parse_fail(origin, lineno, "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (!valid_name(section)) parse_fail(origin, lineno, "bad section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) parse_fail(origin, lineno, "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!valid_name(key)) parse_fail(origin, lineno, "bad key name");
        if (section.empty()) parse_fail(origin, lineno, "key before any [section]");
        if (ini.has(section, key))
            parse_fail(origin, lineno, "duplicate key [" + section + "] " + key);
        ini.entries_.push_back({section, key, value});
    }
    return ini;
}

IniFile IniFile::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str(), path);
}

bool IniFile::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

const std::string* IniFile::find(const std::string& section, const std::string& key) const {
    for (const auto& e : entries_)
        if (e.section == section && e.key == key) return &e.value;
    return nullptr;
}

void IniFile::set(const std::string& section, const std::string& key, const std::string& value) {
    for (auto& e : entries_)
        if (e.section == section && e.key == key) {
            e.value = value;
            return;
        }
    // keep sections contiguous: insert after the section's last entry
    auto at = entries_.end();
    for (auto it = entries_.begin(); it != entries_.end(); ++it)
        if (it->section == section) at = it + 1;
    entries_.insert(at, {section, key, value});
}

bool IniFile::erase(const std::string& section, const std::string& key) {
    for (auto it = entries_.begin(); it != entries_.end(); ++it)
        if (it->section == section && it->key == key) {
            entries_.erase(it);
            return true;
        }
    return false;
}

std::vector<std::string> IniFile::sections() const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
        if (std::find(out.begin(), out.end(), e.section) == out.end()) out.push_back(e.section);
    return out;
}

std::vector<std::pair<std::string, std::string>> IniFile::entries(
    const std::string& section) const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& e : entries_)
        if (e.section == section) out.emplace_back(e.key, e.value);
    return out;
}

std::string IniFile::render() const {
    std::string out;
    bool first = true;
    for (const auto& sec : sections()) {
        if (!first) out += '\n';
        first = false;
        out += '[' + sec + "]\n";
        for (const auto& [k, v] : entries(sec)) out += k + " = " + v + '\n';
    }
    return out;
}

std::string format_double(double v) {
    std::array<char, 32> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

std::string to_string(TrainOn t) {
    switch (t) {
        case TrainOn::both: return "both";
        case TrainOn::known: return "known";
        case TrainOn::unknown: return "unknown";
    }
    throw std::logic_error("unreachable train_on value");
}

TrainOn train_on_from(const std::string& s) {
    if (s == "both") return TrainOn::both;
    if (s == "known") return TrainOn::known;
    if (s == "unknown") return TrainOn::unknown;
    throw std::invalid_argument("unknown train_on value: " + s);
}

namespace {

// typed schema reader; every consumed key is recorded so leftovers can be
// rejected as unknown
class Binder {
public:
    explicit Binder(const IniFile& ini) : ini_(ini) {}

    std::string str(const std::string& sec, const std::string& key, std::string def) {
        if (const auto* v = take(sec, key)) return *v;
        return def;
    }

    int64_t i64(const std::string& sec, const std::string& key, int64_t def) {
        const auto* v = take(sec, key);
        if (!v) return def;
        int64_t out{};
        const char* b = v->data();
        const char* e = b + v->size();
        const auto res = std::from_chars(b, e, out);
        if (res.ec != std::errc{} || res.ptr != e) fail(sec, key, "expected an integer", *v);
        return out;
    }

    uint64_t u64(const std::string& sec, const std::string& key, uint64_t def) {
        const auto* v = take(sec, key);
        if (!v) return def;
        uint64_t out{};
        const char* b = v->data();
        const char* e = b + v->size();
        const auto res = std::from_chars(b, e, out);
        if (res.ec != std::errc{} || res.ptr != e)
            fail(sec, key, "expected an unsigned integer", *v);
        return out;
    }

    double f64(const std::string& sec, const std::string& key, double def) {
        const auto* v = take(sec, key);
        if (!v) return def;
        double out{};
        const char* b = v->data();
        const char* e = b + v->size();
        const auto res = std::from_chars(b, e, out);
        if (res.ec != std::errc{} || res.ptr != e) fail(sec, key, "expected a number", *v);
        return out;
    }

    bool flag(const std::string& sec, const std::string& key, bool def) {
        const auto* v = take(sec, key);
        if (!v) return def;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        fail(sec, key, "expected true or false", *v);
    }

    std::vector<std::string> list(const std::string& sec, const std::string& key,
                                  std::vector<std::string> def) {
        const auto* v = take(sec, key);
        if (!v) return def;
        std::vector<std::string> out;
        std::string item;
        std::istringstream ss(*v);
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        if (out.empty()) fail(sec, key, "expected a comma-separated list", *v);
        return out;
    }

    template <typename F>
    auto parse_with(const std::string& sec, const std::string& key, F&& fn,
                    decltype(fn(std::string{})) def) {
        const auto* v = take(sec, key);
        if (!v) return def;
        try {
            return fn(*v);
        } catch (const std::exception& ex) {
            fail(sec, key, ex.what(), *v);
        }
    }

    void finish() const {
        std::string unknown;
        for (const auto& sec : ini_.sections())
            for (const auto& [k, v] : ini_.entries(sec))
                if (!used_.count({sec, k})) unknown += " [" + sec + "] " + k;
        if (!unknown.empty()) throw std::invalid_argument("config: unknown keys:" + unknown);
    }

private:
    const std::string* take(const std::string& sec, const std::string& key) {
        used_.insert({sec, key});
        return ini_.find(sec, key);
    }

    [[noreturn]] void fail(const std::string& sec, const std::string& key,
                           const std::string& what, const std::string& got) {
        throw std::invalid_argument("config: [" + sec + "] " + key + ": " + what + " (got \"" +
                                    got + "\")");
    }

    const IniFile& ini_;
    std::set<std::pair<std::string, std::string>> used_;
};

} // namespace

ExperimentConfig experiment_config_from(const IniFile& ini) {
    Binder b(ini);
    ExperimentConfig c;

    c.world.locations = b.i64("world", "locations", c.world.locations);
    c.world.countries = b.i64("world", "countries", c.world.countries);

    c.model.n_layers = b.i64("model", "layers", 4);
    c.model.d_model = b.i64("model", "d_model", 128);
    c.model.n_heads = b.i64("model", "heads", 4);
    c.model.d_ffn = b.i64("model", "ffn", 256);
    c.model.max_seq_len = b.i64("model", "max_seq", 0); // 0 = derive from the world

    c.pretrain.epochs = b.i64("pretrain", "epochs", c.pretrain.epochs);
    c.pretrain.target_accuracy =
        b.f64("pretrain", "target_accuracy", c.pretrain.target_accuracy);
    c.pretrain.lr = b.f64("pretrain", "lr", c.pretrain.lr);
    c.pretrain.momentum = b.f64("pretrain", "momentum", c.pretrain.momentum);
    c.pretrain.batch_size = b.i64("pretrain", "batch", c.pretrain.batch_size);
    c.pretrain.declaratives = b.flag("pretrain", "declaratives", c.pretrain.declaratives);
    c.pretrain.packing = b.i64("pretrain", "packing", c.pretrain.packing);
    c.pretrain.checkpoint = b.str("pretrain", "checkpoint", c.pretrain.checkpoint);

    c.probe.probe.n_configs = b.i64("probe", "configs", c.probe.probe.n_configs);
    c.probe.probe.n_shots = b.i64("probe", "shots", c.probe.probe.n_shots);
    c.probe.probe.n_samples_per_config =
        b.i64("probe", "samples", c.probe.probe.n_samples_per_config);
    c.probe.probe.sample_temperature =
        b.f64("probe", "temperature", c.probe.probe.sample_temperature);
    c.probe.sample_size = b.i64("probe", "sample_size", c.probe.sample_size);

    c.splits.known = b.i64("splits", "known", c.splits.known);
    c.splits.unknown = b.i64("splits", "unknown", c.splits.unknown);
    c.splits.held = b.i64("splits", "held", c.splits.held);
    c.splits.key_kind = b.parse_with(
        "splits", "key_kind", [](const std::string& s) { return name_kind_from(s); },
        c.splits.key_kind);
    c.splits.value_kind = b.parse_with(
        "splits", "value_kind", [](const std::string& s) { return name_kind_from(s); },
        c.splits.value_kind);
    c.splits.train_on = b.parse_with(
        "splits", "train_on", [](const std::string& s) { return train_on_from(s); },
        c.splits.train_on);

    c.objective.kind = b.parse_with(
        "objective", "kind", [](const std::string& s) { return objective_kind_from(s); },
        ObjectiveKind::SFT);
    c.objective.lambda = b.f64("objective", "lambda", c.objective.lambda);
    c.objective.tau = b.f64("objective", "tau", c.objective.tau);
    c.objective.k = b.i64("objective", "k", c.objective.k);
    c.objective.snapshot_epoch = b.i64("objective", "snapshot_epoch", c.objective.snapshot_epoch);
    c.objective.freeze = b.list("objective", "freeze", c.objective.freeze);
    c.objective.lr = b.f64("objective", "lr", 5e-4);
    c.objective.momentum = b.f64("objective", "momentum", c.objective.momentum);
    c.objective.epochs = b.i64("objective", "epochs", 40);
    c.objective.batch_size = b.i64("objective", "batch", c.objective.batch_size);

    c.metrics.k = b.i64("metrics", "k", c.metrics.k);
    c.metrics.max_pairs = b.i64("metrics", "max_pairs", c.metrics.max_pairs);
    c.metrics.ns_sample = b.i64("metrics", "ns_sample", c.metrics.ns_sample);
    c.metrics.mtd_sample = b.i64("metrics", "mtd_sample", c.metrics.mtd_sample);
    c.metrics.acc_sample = b.i64("metrics", "acc_sample", c.metrics.acc_sample);
    c.metrics.capture_layer = b.i64("metrics", "capture_layer", c.metrics.capture_layer);

    c.run.id = b.str("run", "id", c.run.id);
    c.run.out = b.str("run", "out", c.run.out);
    c.run.seed = b.u64("run", "seed", c.run.seed);

    b.finish();
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("config: " + what);
    };
    need(world.locations >= 1, "[world] locations must be >= 1");
    need(world.countries >= 1, "[world] countries must be >= 1");
    need(world.countries <= world.locations, "[world] countries must be <= locations");

    need(model.n_layers >= 2 && model.n_layers % 2 == 0,
         "[model] layers must be an even number >= 2");
    need(model.d_model >= 1, "[model] d_model must be >= 1");
    need(model.n_heads >= 1 && model.d_model % model.n_heads == 0,
         "[model] heads must divide d_model");
    need(model.d_ffn >= 1, "[model] ffn must be >= 1");
    need(model.max_seq_len >= 0, "[model] max_seq must be >= 0");

    need(pretrain.epochs >= 1, "[pretrain] epochs must be >= 1");
    need(pretrain.target_accuracy > 0.0 && pretrain.target_accuracy <= 1.0,
         "[pretrain] target_accuracy must be in (0, 1]");
    need(pretrain.lr > 0.0, "[pretrain] lr must be > 0");
    need(pretrain.momentum >= 0.0 && pretrain.momentum < 1.0,
         "[pretrain] momentum must be in [0, 1)");
    need(pretrain.batch_size >= 1, "[pretrain] batch must be >= 1");
    need(pretrain.packing == 0 || pretrain.packing >= 2,
         "[pretrain] packing must be 0 (off) or >= 2");

    probe.probe.validate();
    need(probe.sample_size >= 0, "[probe] sample_size must be >= 0");

    need(splits.known >= 1, "[splits] known must be >= 1");
    need(splits.unknown >= 1, "[splits] unknown must be >= 1");
    need(splits.held >= 2, "[splits] held must be >= 2");

    need(objective.lambda >= 0.0, "[objective] lambda must be >= 0");
    need(objective.tau > 0.0, "[objective] tau must be > 0");
    need(objective.k >= 0, "[objective] k must be >= 0");
    need(objective.snapshot_epoch >= 0, "[objective] snapshot_epoch must be >= 0");
    need(objective.lr > 0.0, "[objective] lr must be > 0");
    need(objective.momentum >= 0.0 && objective.momentum < 1.0,
         "[objective] momentum must be in [0, 1)");
    need(objective.epochs >= 1, "[objective] epochs must be >= 1");
    need(objective.batch_size >= 1, "[objective] batch must be >= 1");
    need(!objective.freeze.empty(), "[objective] freeze must name at least one group");
    for (const auto& s : objective.freeze)
        need(ParamStore::known_selector(s), "[objective] freeze: unknown group \"" + s + "\"");

    need(metrics.k >= 1, "[metrics] k must be >= 1");
    need(metrics.max_pairs >= 1, "[metrics] max_pairs must be >= 1");
    need(metrics.ns_sample >= 2, "[metrics] ns_sample must be >= 2");
    need(metrics.mtd_sample >= 1, "[metrics] mtd_sample must be >= 1");
    need(metrics.acc_sample >= 0, "[metrics] acc_sample must be >= 0");
    need(metrics.capture_layer >= -1, "[metrics] capture_layer must be >= -1");
}

IniFile ExperimentConfig::to_ini() const {
    IniFile ini;
    auto seti = [&](const char* s, const char* k, int64_t v) {
        ini.set(s, k, std::to_string(v));
    };
    auto setd = [&](const char* s, const char* k, double v) { ini.set(s, k, format_double(v)); };

    seti("world", "locations", world.locations);
    seti("world", "countries", world.countries);

    seti("model", "layers", model.n_layers);
    seti("model", "d_model", model.d_model);
    seti("model", "heads", model.n_heads);
    seti("model", "ffn", model.d_ffn);
    seti("model", "max_seq", model.max_seq_len);

    seti("pretrain", "epochs", pretrain.epochs);
    setd("pretrain", "target_accuracy", pretrain.target_accuracy);
    setd("pretrain", "lr", pretrain.lr);
    setd("pretrain", "momentum", pretrain.momentum);
    seti("pretrain", "batch", pretrain.batch_size);
    ini.set("pretrain", "declaratives", pretrain.declaratives ? "true" : "false");
    seti("pretrain", "packing", pretrain.packing);
    if (!pretrain.checkpoint.empty()) ini.set("pretrain", "checkpoint", pretrain.checkpoint);

    seti("probe", "configs", probe.probe.n_configs);
    seti("probe", "shots", probe.probe.n_shots);
    seti("probe", "samples", probe.probe.n_samples_per_config);
    setd("probe", "temperature", probe.probe.sample_temperature);
    seti("probe", "sample_size", probe.sample_size);

    seti("splits", "known", splits.known);
    seti("splits", "unknown", splits.unknown);
    seti("splits", "held", splits.held);
    ini.set("splits", "key_kind", to_string(splits.key_kind));
    ini.set("splits", "value_kind", to_string(splits.value_kind));
    ini.set("splits", "train_on", to_string(splits.train_on));

    ini.set("objective", "kind", to_string(objective.kind));
    setd("objective", "lambda", objective.lambda);
    setd("objective", "tau", objective.tau);
    seti("objective", "k", objective.k);
    seti("objective", "snapshot_epoch", objective.snapshot_epoch);
    std::string groups;
    for (const auto& g : objective.freeze) groups += (groups.empty() ? "" : ",") + g;
    ini.set("objective", "freeze", groups);
    setd("objective", "lr", objective.lr);
    setd("objective", "momentum", objective.momentum);
    seti("objective", "epochs", objective.epochs);
    seti("objective", "batch", objective.batch_size);

    seti("metrics", "k", metrics.k);
    seti("metrics", "max_pairs", metrics.max_pairs);
    seti("metrics", "ns_sample", metrics.ns_sample);
    seti("metrics", "mtd_sample", metrics.mtd_sample);
    seti("metrics", "acc_sample", metrics.acc_sample);
    seti("metrics", "capture_layer", metrics.capture_layer);

    if (!run.id.empty()) ini.set("run", "id", run.id);
    if (!run.out.empty()) ini.set("run", "out", run.out);
    ini.set("run", "seed", std::to_string(run.seed));
    return ini;
}

uint64_t world_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x77u); }
uint64_t model_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x6du); }
uint64_t pretrain_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x74u); }
uint64_t probe_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x70u); }
uint64_t splits_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x73u); }
uint64_t objective_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x6fu); }
uint64_t pairs_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x71u); }
uint64_t sample_seed(const ExperimentConfig& c) { return mix_seed(c.run.seed, 0x61u); }

} // namespace factlab

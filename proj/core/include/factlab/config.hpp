#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "factlab/model.hpp"
#include "factlab/objectives.hpp"
#include "factlab/probe.hpp"

namespace factlab {

// Flat sectioned key=value text. '#' and ';' open comments, blank lines are
// skipped, keys are unique per section. Parsing keeps insertion order so a
// file can be rendered back canonically.
class IniFile {
public:
    static IniFile parse_file(const std::string& path);
    static IniFile parse_string(const std::string& text, const std::string& origin = "<text>");

    bool has(const std::string& section, const std::string& key) const;
    // nullptr when absent
    const std::string* find(const std::string& section, const std::string& key) const;
    // insert or overwrite
    void set(const std::string& section, const std::string& key, const std::string& value);
    bool erase(const std::string& section, const std::string& key);

    std::vector<std::string> sections() const;
    std::vector<std::pair<std::string, std::string>> entries(const std::string& section) const;

    std::string render() const;

private:
    struct Entry {
        std::string section, key, value;
    };
    std::vector<Entry> entries_;
};

// experiment sub-specs -------------------------------------------------------

struct WorldSpec {
    int64_t locations = 1500;
    int64_t countries = 20;
};

struct PretrainSpec {
    int64_t epochs = 150; // cap; reaching it below target is an error
    double target_accuracy = 0.95;
    double lr = 1e-3;
    double momentum = 0.9;
    int64_t batch_size = 64;
    bool declaratives = true; // statement restatements alongside QA rows
    int64_t packing = 4;      // QA blocks per SEP-joined row (teaches the few-shot
                              // format the probe uses); 0 disables packing
    std::string checkpoint;   // pretrain run directory to reuse; empty = train here
};

struct ProbeSpec {
    ProbeConfig probe;
    int64_t sample_size = 300; // base facts probed for the retention check; 0 = all
};

// which splits feed the fine-tuning loss (metrics always see all three)
enum class TrainOn { both, known, unknown };
std::string to_string(TrainOn t);
TrainOn train_on_from(const std::string& s);

struct SplitSpec {
    int64_t known = 200;
    int64_t unknown = 200;
    int64_t held = 400;
    NameKind key_kind = NameKind::semantic;
    NameKind value_kind = NameKind::real;
    TrainOn train_on = TrainOn::both;
};

struct MetricSpec {
    int64_t k = 10;            // shared top-k set size
    int64_t max_pairs = 2000;  // pair-set cap
    int64_t ns_sample = 64;    // held facts entering the pairwise-cosine metric
    int64_t mtd_sample = 400;  // synthetic facts entering the cross-type metric
    int64_t acc_sample = 2000; // per-epoch unknown-accuracy sample cap; 0 = full
    int64_t capture_layer = -1; // -1 = the model's middle layer
};

struct RunSpec {
    std::string id;  // defaults to the output directory's basename
    std::string out; // output directory; CLI --out overrides
    uint64_t seed = 0;
};

struct ExperimentConfig {
    WorldSpec world;
    ModelConfig model; // vocab_size/max_seq_len 0 = derive from the world
    PretrainSpec pretrain;
    ProbeSpec probe;
    SplitSpec splits;
    ObjectiveConfig objective;
    MetricSpec metrics;
    RunSpec run;

    // range checks that don't need the world built yet
    void validate() const;
    // canonical render of every field (the re-runnable config)
    IniFile to_ini() const;
};

// Binds the schema with desk-scale defaults; every key present in the file
// must be a known schema key (unknown keys are hard errors).
ExperimentConfig experiment_config_from(const IniFile& ini);

// seed derivation tags, shared by the pipeline and the CLI
uint64_t world_seed(const ExperimentConfig& c);
uint64_t model_seed(const ExperimentConfig& c);
uint64_t pretrain_seed(const ExperimentConfig& c);
uint64_t probe_seed(const ExperimentConfig& c);
uint64_t splits_seed(const ExperimentConfig& c);
uint64_t objective_seed(const ExperimentConfig& c);
uint64_t pairs_seed(const ExperimentConfig& c);
uint64_t sample_seed(const ExperimentConfig& c);

// shortest round-trip decimal form (deterministic across runs)
std::string format_double(double v);

} // namespace factlab

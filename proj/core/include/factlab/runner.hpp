#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "factlab/config.hpp"
#include "factlab/metrics.hpp"
#include "factlab/objectives.hpp"
#include "factlab/probe.hpp"

namespace factlab {

// One evaluation row: everything in the drift report plus bookkeeping. The
// wall clock lives in a separate file so the metric stream is reproducible
// byte for byte.
struct MetricRecord {
    std::string run;
    DriftReport report;
    double wall_seconds = 0.0; // since the previous record (train + eval)
};

std::string metric_record_line(const MetricRecord& r); // JSONL, no wall clock
MetricRecord metric_record_from_line(const std::string& line, const std::string& origin);
std::vector<MetricRecord> load_metrics_jsonl(const std::string& path);

struct PretrainEpoch {
    int64_t epoch = 0;
    double loss = 0.0;     // mean LM loss over the epoch's batches
    double accuracy = 0.0; // zero-shot greedy accuracy on the base facts
};

struct PretrainOutcome {
    std::vector<PretrainEpoch> log;
    int64_t epochs = 0;
    double accuracy = 0.0;
};

// Language-model training (QA rows plus optional declarative restatements,
// every non-leading token predicted) until greedy base-fact accuracy reaches
// the target. Hitting the epoch cap below target throws, reporting the
// accuracy that was achieved.
PretrainOutcome pretrain_model(TransformerModel& model, const World& world,
                               const PretrainSpec& spec, uint64_t seed,
                               const std::function<void(const PretrainEpoch&)>& on_epoch = {});

// Fill in vocab_size / max_seq_len (0 = derive from the world: longest
// training or probe sequence over every key/value kind, plus decode headroom).
ModelConfig resolve_model(const ExperimentConfig& cfg, const World& world,
                          const SplitSet& splits);

struct RunResult {
    std::string dir;
    ExperimentConfig cfg; // resolved copy (model fields, id filled in)
    std::vector<MetricRecord> records;
    std::vector<TrainEpochStats> losses;
    CorpusProbe base_probe;  // retention sanity check on a base-fact sample
    CorpusProbe known_probe; // knowledge categories for the known split
    PretrainOutcome pretrain;
    std::string pretrain_source; // "inline" or the reused checkpoint directory
};

// Progress callbacks for long pipelines (CLI liveness); never affect results.
struct RunHooks {
    std::function<void(const PretrainEpoch&)> on_pretrain_epoch;
    std::function<void(const MetricRecord&)> on_record;
};

// Full pipeline: world -> pretrain (or reuse a pretrain directory) -> probes
// -> splits -> fine-tune with per-epoch metric records -> artifacts in
// cfg.run.out. Every emitted byte outside timings.jsonl is determined by
// (config, seed).
RunResult run_experiment(const ExperimentConfig& cfg, const RunHooks& hooks = {});

// The same pipeline stopped after the probes; the directory is reusable via
// [pretrain] checkpoint = <dir>.
RunResult run_pretrain(const ExperimentConfig& cfg, const RunHooks& hooks = {});

// World artifacts only: facts.jsonl + world.json + config.ini.
World run_gen_world(const ExperimentConfig& cfg);

// Probe a previously pretrained model ([pretrain] checkpoint required).
RunResult run_probe(const ExperimentConfig& cfg);

struct SweepPoint {
    std::string id, dir;
    std::vector<std::pair<std::string, std::string>> assignment; // "sec.key" -> value
    std::string error;         // empty = success
    DriftReport final_report;  // valid when error is empty
};

// Cross product of the [sweep] axes (key "section.key", values separated by
// '|') applied to the base config. Point failures are recorded in the summary
// rather than aborting the sweep. Returns the points in grid order.
std::vector<SweepPoint> run_sweep(const IniFile& base, const std::string& out,
                                  std::optional<uint64_t> seed_override,
                                  const RunHooks& hooks = {});

} // namespace factlab

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "factlab/corpus.hpp"
#include "factlab/model.hpp"

namespace factlab {

struct ProbeConfig {
    int64_t n_configs = 20;          // prompt configurations per fact
    int64_t n_shots = 3;             // exemplars per configuration
    int64_t n_samples_per_config = 4; // temperature decodes per configuration
    double sample_temperature = 1.0;
    uint64_t seed = 0;

    void validate() const {
        if (n_configs < 1) throw std::invalid_argument("probe: n_configs must be >= 1");
        if (n_shots < 0) throw std::invalid_argument("probe: n_shots must be >= 0");
        if (n_samples_per_config < 0)
            throw std::invalid_argument("probe: n_samples_per_config must be >= 0");
        if (!(sample_temperature > 0.0))
            throw std::invalid_argument("probe: sample_temperature must be > 0");
    }
};

enum class KnowledgeCategory { Unknown = 0, WeaklyKnown = 1, MaybeKnown = 2, HighlyKnown = 3 };
std::string to_string(KnowledgeCategory c);
KnowledgeCategory category_from(const std::string& s);

// The category rule, applied to hit counts:
//   HighlyKnown  greedy correct in every configuration
//   MaybeKnown   greedy correct in some but not all
//   WeaklyKnown  greedy never correct, >= 1 temperature sample correct
//   Unknown      nothing ever correct
KnowledgeCategory categorize(int64_t greedy_hits, int64_t n_configs, int64_t sample_hits);

struct ProbeResult {
    std::string fact_id;
    KnowledgeCategory category = KnowledgeCategory::Unknown;
    int64_t greedy_hits = 0;
    int64_t sample_hits = 0; // counted only when no greedy configuration matched
};

// Classify one fact. Exemplars are drawn per configuration from exemplar_pool
// (same relation, probed fact excluded); throws when fewer than n_shots remain.
ProbeResult classify_fact(const DecoderModel& model, const World& world, const Fact& fact,
                          const std::vector<Fact>& exemplar_pool, const ProbeConfig& probe);

struct CorpusProbe {
    std::vector<ProbeResult> results;  // input order
    std::array<int64_t, 4> counts{};   // indexed by KnowledgeCategory value
    double highly_known_fraction = 0.0;
    bool retention = false; // HighlyKnown fraction >= 0.30
};

CorpusProbe classify_corpus(const DecoderModel& model, const World& world,
                            const std::vector<Fact>& facts, const ProbeConfig& probe);

// Zero-shot greedy exact match per fact (1 = the bare question decodes to the
// stored answer). Teacher-forced argmax screening batched across facts, with a
// free-running greedy decode to confirm each candidate hit.
std::vector<uint8_t> greedy_matches(const DecoderModel& model, const World& world,
                                    const std::vector<Fact>& facts);

// JSON Lines: {fact_id, category, greedy_hits, sample_hits}
void save_probe_jsonl(const std::string& path, const std::vector<ProbeResult>& results);
std::vector<ProbeResult> load_probe_jsonl(const std::string& path);

} // namespace factlab

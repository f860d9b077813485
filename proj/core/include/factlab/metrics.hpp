#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "factlab/corpus.hpp"
#include "factlab/model.hpp"

namespace factlab {

// One (unknown, held) question pair sharing a ground-truth answer. The
// reference model's behaviour at the held question's answer position is
// frozen at construction: `shared_ids` are its top-k token ids there and
// `ref_h_logits` the matching raw logits, so the distribution-shift metrics
// never need the reference model again.
struct DriftPair {
    int64_t u = 0; // index into PairSet::u_prompts
    int64_t h = 0; // index into PairSet::h_prompts
    std::vector<int32_t> shared_ids;
    std::vector<double> ref_h_logits;
};

struct PairSet {
    int64_t k = 0;
    std::vector<DriftPair> pairs;
    std::vector<std::vector<int32_t>> u_prompts; // only prompts some pair uses
    std::vector<std::vector<int32_t>> h_prompts;
};

// All (unknown, held) pairs whose answers match exactly, subsampled to at
// most max_pairs by a seeded draw when there are more.
PairSet build_pair_set(const DecoderModel& pretrained, const World& world,
                       const std::vector<Fact>& unknown_facts,
                       const std::vector<Fact>& held_facts, int64_t k,
                       int64_t max_pairs = 2000, uint64_t seed = 0);

// fraction of facts whose question greedily decodes to the stored answer
double accuracy(const DecoderModel& model, const World& world, const std::vector<Fact>& facts);

// peak-to-final drop of an accuracy series, in percentage points
double delta_held(const std::vector<double>& held_accuracy_series);

// position of the key's final token inside an encoded question prompt
int64_t key_final_position(const World& world, const std::vector<int32_t>& prompt);

// unit-norm hidden state of each fact's key-final token at `layer`
std::vector<std::vector<float>> capture_vectors(const TransformerModel& model, const World& world,
                                                const std::vector<Fact>& facts, int64_t layer);

// Representation drift: mean over rows of 1 - cos(ref_i, now_i).
// Rows must be unit-norm (as capture_vectors returns them).
double representation_drift(const std::vector<std::vector<float>>& ref,
                            const std::vector<std::vector<float>>& now);
double representation_drift(const TransformerModel& ref, const TransformerModel& now,
                            const World& world, const std::vector<Fact>& held, int64_t layer);

// Neighborhood shift: mean absolute change of pairwise cosines over all
// ordered pairs of the sample, self-pairs included (they contribute zero).
double neighborhood_shift(const std::vector<std::vector<float>>& ref,
                          const std::vector<std::vector<float>>& now);
double neighborhood_shift(const TransformerModel& ref, const TransformerModel& now,
                          const World& world, const std::vector<Fact>& held_sample, int64_t layer);

// Mean cross-type cosine delta between held and synthetic keys; negative
// values mean the groups moved apart.
double mean_type_displacement(const std::vector<std::vector<float>>& held_ref,
                              const std::vector<std::vector<float>>& held_now,
                              const std::vector<std::vector<float>>& syn_ref,
                              const std::vector<std::vector<float>>& syn_now);
double mean_type_displacement(const TransformerModel& ref, const TransformerModel& now,
                              const World& world, const std::vector<Fact>& held,
                              const std::vector<Fact>& synthetic, int64_t layer);

// Spearman rank correlation with mean ranks for ties; nullopt when either
// side has zero rank variance.
std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// Mean Spearman correlation between the current model's logits at the unknown
// question and the reference logits at the paired held question, both
// restricted to the pair's shared top-k ids. Pairs with zero rank variance
// are skipped; nullopt when every pair is skipped.
std::optional<double> rank_rho(const DecoderModel& now, const PairSet& pairs);

// Mean fractional overlap between the current model's top-k sets at the
// unknown and held questions of each pair.
double neighbor_transfer_rate(const DecoderModel& now, const PairSet& pairs, int64_t k);

// Jensen-Shannon divergence (natural log, max ln 2) between two discrete
// distributions of equal support.
double jsd_scalar(const std::vector<double>& p, const std::vector<double>& q);

// Mean JSD between the current model's answer distribution at the unknown
// question and the reference distribution at the paired held question, both
// renormalized over the pair's shared ids.
double distribution_jsd(const DecoderModel& now, const PairSet& pairs);

// One epoch's drift battery. Optional fields are absent when their input set
// is empty (no maybe/weakly-known facts, no valid pairs).
struct DriftReport {
    int64_t epoch = 0;
    double acc_known = 0.0;
    double acc_unknown = 0.0;
    double acc_held = 0.0;
    std::optional<double> acc_maybe_known;
    std::optional<double> acc_weakly_known;
    double rd = 0.0;
    double ns = 0.0;
    double mtd = 0.0;
    std::optional<double> rank_rho;
    std::optional<double> ntr;
    std::optional<double> jsd;
    double delta_held_pp = 0.0;

    void validate() const; // throws std::out_of_range when a field leaves its range
};

} // namespace factlab

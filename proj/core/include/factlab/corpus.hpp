#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "factlab/rng.hpp"

namespace factlab {

enum class NameKind { real, semantic, uuid };
std::string to_string(NameKind k);
NameKind name_kind_from(const std::string& s);

// One relational fact. `split` is empty until the fact is placed in a dataset.
struct Fact {
    std::string id;
    std::string key;
    std::string value;
    std::string relation = "country_of_location";
    NameKind key_kind = NameKind::real;
    NameKind value_kind = NameKind::real;
    std::string split;
};

// The single question/statement template every dataset shares.
struct QuestionTemplate {
    std::string relation = "country_of_location";
    std::string q_lead = "Q: ";
    std::string q_prefix = "Which country is ";
    std::string q_suffix = " located in?";
    std::string answer_lead = " A: ";
    std::string decl_mid = " is located in ";
    std::string decl_end = ".";

    std::string question(const std::string& key) const { return q_prefix + key + q_suffix; }
};

std::string qa_text(const Fact& f, const QuestionTemplate& t);
std::string declarative_text(const Fact& f, const QuestionTemplate& t);

// Greedy longest-match tokenizer over a fixed atom vocabulary.
// Ids 0..2 are PAD/SEP/EOS and have no surface form.
class Tokenizer {
public:
    static constexpr int32_t pad_id = 0;
    static constexpr int32_t sep_id = 1;
    static constexpr int32_t eos_id = 2;

    Tokenizer() = default;
    explicit Tokenizer(const std::vector<std::string>& surface_atoms);

    int64_t vocab_size() const { return static_cast<int64_t>(atoms_.size()); }
    const std::string& atom(int32_t id) const;
    std::optional<int32_t> atom_id(const std::string& s) const;

    // throws std::runtime_error when no atom matches at some offset
    std::vector<int32_t> tokenize(const std::string& text) const;
    // special ids render as ""; out-of-range ids throw
    std::string detokenize(const std::vector<int32_t>& ids) const;

private:
    std::vector<std::string> atoms_;
    std::unordered_map<std::string, int32_t> id_of_;
    std::array<std::vector<int32_t>, 256> by_first_{};
};

// Position-aware fragment inventories (first / middle / last).
struct FragmentPools {
    std::vector<std::string> first, middle, last;
};

struct World {
    uint64_t seed = 0;
    QuestionTemplate tmpl;
    std::vector<std::string> countries;
    FragmentPools location_pools; // fragments occurring in base names, by position
    FragmentPools country_pools;  // fragment inventory for country analogues (first/last)
    std::vector<Fact> base_facts; // real keys, real values
    Tokenizer tokenizer;

    bool is_base_key(const std::string& key) const { return base_keys_.count(key) != 0; }
    bool is_base_pair(const std::string& key, const std::string& value) const {
        return base_pairs_.count(key + '\x1f' + value) != 0;
    }
    void rebuild_index(); // recomputes the lookup sets from base_facts

private:
    std::unordered_set<std::string> base_keys_, base_pairs_;
};

// Base world: composed location names mapped near-uniformly onto countries.
World build_world(int64_t n_base_locations, int64_t n_countries, uint64_t seed);

// Novel names recombined from the world's location pools; never a base name.
std::vector<std::string> gen_semantic_keys(const World& world, int64_t n, uint64_t seed);
// "Loc_" + 8 lowercase hex characters, distinct.
std::vector<std::string> gen_uuid_keys(int64_t n, uint64_t seed);

// Pair keys with values of the requested kind; per-value counts differ by <= 1
// and no pair duplicates a base fact.
std::vector<Fact> assign_values(const std::vector<std::string>& keys, const World& world,
                                NameKind value_kind, uint64_t seed);

struct SplitSet {
    std::vector<Fact> known;   // trained, drawn from base facts
    std::vector<Fact> unknown; // trained, novel keys
    std::vector<Fact> held;    // untouched base facts, for stability measurement
};

// known/held sampled disjointly from base facts (optionally restricted to
// eligible_keys); unknown generated fresh with the given key kind.
SplitSet make_splits(const World& world, int64_t n_known, int64_t n_unknown, int64_t n_held,
                     NameKind key_kind, uint64_t seed, NameKind value_kind = NameKind::real,
                     const std::vector<std::string>* eligible_keys = nullptr);

// Token encodings used for training and scoring. The answer span [start, end)
// covers the value tokens plus the trailing EOS.
struct EncodedFact {
    std::vector<int32_t> tokens;
    int64_t answer_start = 0;
    int64_t answer_end = 0;
};

std::vector<int32_t> encode_prompt(const Fact& f, const World& world); // "...A: " only
EncodedFact encode_qa(const Fact& f, const World& world);
std::vector<int32_t> encode_declarative(const Fact& f, const World& world); // ends with EOS

// JSON Lines persistence: {id, key, relation, question, answer, key_kind,
// value_kind, split}, UTF-8, LF-terminated.
void save_facts_jsonl(const std::string& path, const std::vector<Fact>& facts,
                      const QuestionTemplate& tmpl);
std::vector<Fact> load_facts_jsonl(const std::string& path);

} // namespace factlab

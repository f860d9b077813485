#include "factlab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace factlab {

namespace {

// Location-name fragment inventories. Names compose as [first, last] or
// [first, middle, last]; every fragment is a tokenizer atom.
const std::vector<std::string>& location_firsts() {
    static const std::vector<std::string> v = {
        "Berg", "Pas",   "San",    "Port", "Fort",  "Lake",  "North", "South",
        "East", "West",  "Glen",   "Ash",  "Oak",   "Stone", "Clear", "Spring",
        "River", "Mill", "Brad",   "Win",  "Hart",  "Mont",  "Bel",   "Ver",
        "Nor",  "Kings", "Wood",   "Fair", "Green", "Red",   "Black", "White",
        "Silver", "Gold", "High",  "Low",  "Mid",   "Cross", "Long",  "Strat"};
    return v;
}
const std::vector<std::string>& location_middles() {
    static const std::vector<std::string> v = {"ing", "er", "an", "or", "el", "on", "al",
                                               "en",  "ar", "ol", "is", "us", "am", "il"};
    return v;
}
const std::vector<std::string>& location_lasts() {
    static const std::vector<std::string> v = {
        "adena", "ville", "ton",   "burg",  "field",  "ford",   "haven", "wood",
        "land",  "shire", "dale",  "view",  "brook",  "ridge",  "grove", "worth",
        "gate",  "holm",  "wick",  "thorpe", "bourne", "combe",  "leigh", "mere",
        "stead", "port",  "moor",  "market", "bridge", "chester"};
    return v;
}

struct CountryEntry {
    const char* name;
    const char* first;
    const char* last;
};
// Each country splits into (first, last) fragments used to compose
// country-name analogues; whole names are atoms too, so real countries
// tokenize as single atoms while analogues tokenize as fragments.
const std::vector<CountryEntry>& country_table() {
    static const std::vector<CountryEntry> v = {
        {"France", "Fran", "ce"},    {"Greece", "Gree", "ce"},    {"Japan", "Ja", "pan"},
        {"Brazil", "Bra", "zil"},    {"Canada", "Cana", "da"},    {"Norway", "Norw", "ay"},
        {"Spain", "Spa", "in"},      {"Italy", "Ita", "ly"},      {"Egypt", "Egy", "pt"},
        {"India", "In", "dia"},      {"China", "Chi", "na"},      {"Poland", "Pola", "nd"},
        {"Austria", "Aust", "ria"},  {"Sweden", "Swe", "den"},    {"Finland", "Finl", "and"},
        {"Portugal", "Portu", "gal"}, {"Ireland", "Irel", "and"}, {"Iceland", "Icel", "and"},
        {"Mexico", "Mexi", "co"},    {"Panama", "Pana", "ma"},    {"Bolivia", "Boli", "via"},
        {"Uruguay", "Uru", "guay"},  {"Paraguay", "Para", "guay"}, {"Ecuador", "Ecua", "dor"},
        {"Vietnam", "Viet", "nam"},  {"Nepal", "Ne", "pal"},      {"Jordan", "Jor", "dan"},
        {"Serbia", "Ser", "bia"},    {"Croatia", "Croa", "tia"},  {"Albania", "Alba", "nia"},
        {"Georgia", "Geor", "gia"},  {"Armenia", "Arme", "nia"},  {"Hungary", "Hun", "gary"},
        {"Romania", "Roma", "nia"},  {"Bulgaria", "Bulga", "ria"}, {"Estonia", "Esto", "nia"},
        {"Latvia", "Lat", "via"},    {"Moldova", "Mold", "ova"},  {"Denmark", "Den", "mark"},
        {"Germany", "Ger", "many"},  {"Kenya", "Ken", "ya"}};
    return v;
}

constexpr const char* kHexChars = "0123456789abcdef";
constexpr int kRejectCap = 20000; // consecutive rejected candidates before giving up

void push_unique(std::vector<std::string>& out, std::unordered_set<std::string>& seen,
                 const std::string& s) {
    if (seen.insert(s).second) out.push_back(s);
}

std::vector<int32_t> fragment_ids(const Tokenizer& tok, const std::vector<std::string>& frags) {
    std::vector<int32_t> ids;
    for (const auto& f : frags) {
        auto id = tok.atom_id(f);
        if (!id) throw std::logic_error("fragment is not an atom: " + f);
        ids.push_back(*id);
    }
    return ids;
}

// a composed name is usable only if greedy tokenization recovers its fragments
bool tokenizes_as(const Tokenizer& tok, const std::string& name,
                  const std::vector<std::string>& frags) {
    std::vector<int32_t> got;
    try {
        got = tok.tokenize(name);
    } catch (const std::runtime_error&) {
        return false;
    }
    return got == fragment_ids(tok, frags);
}

NameKind infer_key_kind(const World& world, const std::string& key) {
    if (key.size() == 12 && key.rfind("Loc_", 0) == 0) {
        bool hex = true;
        for (size_t i = 4; i < 12; ++i)
            hex = hex && std::string(kHexChars).find(key[i]) != std::string::npos;
        if (hex) return NameKind::uuid;
    }
    return world.is_base_key(key) ? NameKind::real : NameKind::semantic;
}

// per-value use counts differ by <= 1: floor(m/k) each plus one extra for a
// seeded subset of values, then shuffled across keys
std::vector<std::string> balanced_values(const std::vector<std::string>& inventory, size_t m,
                                         Rng& rng) {
    const size_t k = inventory.size();
    std::vector<std::string> vals;
    vals.reserve(m);
    for (const auto& v : inventory)
        for (size_t c = 0; c < m / k; ++c) vals.push_back(v);
    std::vector<size_t> order(k);
    for (size_t i = 0; i < k; ++i) order[i] = i;
    rng.shuffle(order);
    for (size_t i = 0; i < m % k; ++i) vals.push_back(inventory[order[i]]);
    rng.shuffle(vals);
    return vals;
}

} // namespace

std::string to_string(NameKind k) {
    switch (k) {
        case NameKind::real: return "real";
        case NameKind::semantic: return "semantic";
        case NameKind::uuid: return "uuid";
    }
    throw std::logic_error("bad NameKind");
}

NameKind name_kind_from(const std::string& s) {
    if (s == "real") return NameKind::real;
    if (s == "semantic") return NameKind::semantic;
    if (s == "uuid") return NameKind::uuid;
    throw std::invalid_argument("unknown name kind '" + s + "'");
}

std::string qa_text(const Fact& f, const QuestionTemplate& t) {
    return t.q_lead + t.question(f.key) + t.answer_lead + f.value;
}

std::string declarative_text(const Fact& f, const QuestionTemplate& t) {
    return f.key + t.decl_mid + f.value + t.decl_end;
}

Tokenizer::Tokenizer(const std::vector<std::string>& surface_atoms) {
    atoms_ = {"", "", ""}; // PAD, SEP, EOS carry no surface form
    for (const auto& a : surface_atoms) {
        if (a.empty()) throw std::invalid_argument("tokenizer: empty atom");
        if (id_of_.count(a)) continue;
        id_of_[a] = static_cast<int32_t>(atoms_.size());
        atoms_.push_back(a);
    }
    for (const auto& [a, id] : id_of_) by_first_[static_cast<unsigned char>(a[0])].push_back(id);
    for (auto& bucket : by_first_)
        std::sort(bucket.begin(), bucket.end(), [&](int32_t l, int32_t r) {
            if (atoms_[l].size() != atoms_[r].size()) return atoms_[l].size() > atoms_[r].size();
            return l < r;
        });
}

const std::string& Tokenizer::atom(int32_t id) const {
    if (id < 0 || id >= vocab_size()) throw std::out_of_range("tokenizer: atom id out of range");
    return atoms_[static_cast<size_t>(id)];
}

std::optional<int32_t> Tokenizer::atom_id(const std::string& s) const {
    auto it = id_of_.find(s);
    if (it == id_of_.end()) return std::nullopt;
    return it->second;
}

std::vector<int32_t> Tokenizer::tokenize(const std::string& text) const {
    std::vector<int32_t> out;
    size_t pos = 0;
    while (pos < text.size()) {
        int32_t hit = -1;
        for (int32_t id : by_first_[static_cast<unsigned char>(text[pos])]) {
            const std::string& a = atoms_[static_cast<size_t>(id)];
            if (text.compare(pos, a.size(), a) == 0) {
                hit = id;
                break; // buckets are longest-first
            }
        }
        if (hit < 0)
            throw std::runtime_error("tokenizer: no atom matches \"" + text.substr(pos, 12) +
                                     "\" at offset " + std::to_string(pos));
        out.push_back(hit);
        pos += atoms_[static_cast<size_t>(hit)].size();
    }
    return out;
}

std::string Tokenizer::detokenize(const std::vector<int32_t>& ids) const {
    std::string out;
    for (int32_t id : ids) out += atom(id);
    return out;
}

void World::rebuild_index() {
    base_keys_.clear();
    base_pairs_.clear();
    for (const auto& f : base_facts) {
        base_keys_.insert(f.key);
        base_pairs_.insert(f.key + '\x1f' + f.value);
    }
}

World build_world(int64_t n_base_locations, int64_t n_countries, uint64_t seed) {
    if (n_base_locations < 200) throw std::invalid_argument("build_world: need >= 200 locations");
    if (n_countries < 10 || n_countries > static_cast<int64_t>(country_table().size()))
        throw std::invalid_argument("build_world: country count out of range");

    World w;
    w.seed = seed;

    // deterministic country subset
    std::vector<size_t> order(country_table().size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng crng(mix_seed(seed, 0xc0u));
    crng.shuffle(order);
    std::unordered_set<std::string> cseen;
    for (int64_t i = 0; i < n_countries; ++i) {
        const auto& e = country_table()[order[static_cast<size_t>(i)]];
        w.countries.push_back(e.name);
        push_unique(w.country_pools.first, cseen, e.first);
    }
    cseen.clear();
    for (int64_t i = 0; i < n_countries; ++i)
        push_unique(w.country_pools.last, cseen,
                    country_table()[order[static_cast<size_t>(i)]].last);

    // atom vocabulary: template chunks, name fragments, countries + fragments,
    // UUID prefix and hex characters
    std::vector<std::string> atoms;
    atoms.push_back(w.tmpl.q_lead + w.tmpl.q_prefix);
    atoms.push_back(w.tmpl.q_suffix);
    atoms.push_back(w.tmpl.answer_lead);
    atoms.push_back(w.tmpl.decl_mid);
    atoms.push_back(w.tmpl.decl_end);
    for (const auto& a : location_firsts()) atoms.push_back(a);
    for (const auto& a : location_middles()) atoms.push_back(a);
    for (const auto& a : location_lasts()) atoms.push_back(a);
    for (const auto& c : w.countries) atoms.push_back(c);
    for (const auto& a : w.country_pools.first) atoms.push_back(a);
    for (const auto& a : w.country_pools.last) atoms.push_back(a);
    atoms.push_back("Loc_");
    for (int i = 0; i < 16; ++i) atoms.push_back(std::string(1, kHexChars[i]));
    w.tokenizer = Tokenizer(atoms);

    // compose distinct base names, verifying greedy tokenization recovers the
    // construction fragments
    Rng nrng(mix_seed(seed, 0xb5u));
    std::unordered_set<std::string> names;
    std::vector<std::vector<std::string>> name_frags;
    int rejects = 0;
    while (static_cast<int64_t>(name_frags.size()) < n_base_locations) {
        std::vector<std::string> frags;
        frags.push_back(location_firsts()[nrng.next_below(location_firsts().size())]);
        if (nrng.next_double() < 0.5)
            frags.push_back(location_middles()[nrng.next_below(location_middles().size())]);
        frags.push_back(location_lasts()[nrng.next_below(location_lasts().size())]);
        std::string name;
        for (const auto& f : frags) name += f;
        if (names.count(name) || !tokenizes_as(w.tokenizer, name, frags)) {
            if (++rejects > kRejectCap)
                throw std::runtime_error("build_world: fragment inventory exhausted after " +
                                         std::to_string(names.size()) + " names");
            continue;
        }
        rejects = 0;
        names.insert(name);
        name_frags.push_back(std::move(frags));
    }

    // record position-aware pools actually occurring in base names
    std::unordered_set<std::string> pf, pm, pl;
    for (const auto& frags : name_frags) {
        push_unique(w.location_pools.first, pf, frags.front());
        if (frags.size() == 3) push_unique(w.location_pools.middle, pm, frags[1]);
        push_unique(w.location_pools.last, pl, frags.back());
    }

    // near-uniform country assignment
    Rng vrng(mix_seed(seed, 0xa1u));
    auto values = balanced_values(w.countries, name_frags.size(), vrng);
    for (size_t i = 0; i < name_frags.size(); ++i) {
        Fact f;
        f.id = "b" + std::to_string(i);
        std::string name;
        for (const auto& fr : name_frags[i]) name += fr;
        f.key = name;
        f.value = values[i];
        f.relation = w.tmpl.relation;
        f.split = "base";
        w.base_facts.push_back(std::move(f));
    }
    w.rebuild_index();
    return w;
}

std::vector<std::string> gen_semantic_keys(const World& world, int64_t n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_semantic_keys: n must be >= 1");
    const auto& pools = world.location_pools;
    if (pools.first.empty() || pools.last.empty())
        throw std::runtime_error("gen_semantic_keys: empty fragment pools");
    Rng rng(mix_seed(seed, 0x5eu));
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    int rejects = 0;
    while (static_cast<int64_t>(out.size()) < n) {
        std::vector<std::string> frags;
        frags.push_back(pools.first[rng.next_below(pools.first.size())]);
        if (!pools.middle.empty() && rng.next_double() < 0.5)
            frags.push_back(pools.middle[rng.next_below(pools.middle.size())]);
        frags.push_back(pools.last[rng.next_below(pools.last.size())]);
        std::string name;
        for (const auto& f : frags) name += f;
        if (seen.count(name) || world.is_base_key(name) ||
            !tokenizes_as(world.tokenizer, name, frags)) {
            if (++rejects > kRejectCap)
                throw std::runtime_error("gen_semantic_keys: pool exhausted after " +
                                         std::to_string(out.size()) + " names");
            continue;
        }
        rejects = 0;
        seen.insert(name);
        out.push_back(name);
    }
    return out;
}

std::vector<std::string> gen_uuid_keys(int64_t n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_uuid_keys: n must be >= 1");
    Rng rng(mix_seed(seed, 0xddu));
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    while (static_cast<int64_t>(out.size()) < n) {
        std::string key = "Loc_";
        for (int i = 0; i < 8; ++i) key += kHexChars[rng.next_below(16)];
        if (!seen.insert(key).second) continue;
        out.push_back(key);
    }
    return out;
}

std::vector<Fact> assign_values(const std::vector<std::string>& keys, const World& world,
                                NameKind value_kind, uint64_t seed) {
    if (keys.empty()) throw std::invalid_argument("assign_values: no keys");

    std::vector<std::string> inventory;
    if (value_kind == NameKind::real) {
        inventory = world.countries;
    } else if (value_kind == NameKind::uuid) {
        inventory = gen_uuid_keys(static_cast<int64_t>(world.countries.size()),
                                  mix_seed(seed, 0x1du));
    } else {
        // country analogues recombined from the country fragment pools
        Rng rng(mix_seed(seed, 0x2du));
        std::unordered_set<std::string> real(world.countries.begin(), world.countries.end());
        std::unordered_set<std::string> seen;
        int rejects = 0;
        while (inventory.size() < world.countries.size()) {
            std::vector<std::string> frags = {
                world.country_pools.first[rng.next_below(world.country_pools.first.size())],
                world.country_pools.last[rng.next_below(world.country_pools.last.size())]};
            std::string name = frags[0] + frags[1];
            if (seen.count(name) || real.count(name) ||
                !tokenizes_as(world.tokenizer, name, frags)) {
                if (++rejects > kRejectCap)
                    throw std::runtime_error("assign_values: country analogue pool exhausted");
                continue;
            }
            rejects = 0;
            seen.insert(name);
            inventory.push_back(name);
        }
    }
    if (inventory.empty()) throw std::runtime_error("assign_values: empty value inventory");

    Rng rng(mix_seed(seed, 0x3du));
    auto values = balanced_values(inventory, keys.size(), rng);

    // swap away any (key, value) that duplicates a base fact
    for (size_t i = 0; i < keys.size(); ++i) {
        if (!world.is_base_pair(keys[i], values[i])) continue;
        bool fixed = false;
        for (size_t j = 0; j < keys.size() && !fixed; ++j) {
            if (j == i) continue;
            if (!world.is_base_pair(keys[i], values[j]) &&
                !world.is_base_pair(keys[j], values[i])) {
                std::swap(values[i], values[j]);
                fixed = true;
            }
        }
        if (!fixed) throw std::runtime_error("assign_values: cannot avoid base-fact duplicate");
    }

    std::vector<Fact> out;
    for (size_t i = 0; i < keys.size(); ++i) {
        Fact f;
        f.key = keys[i];
        f.value = values[i];
        f.relation = world.tmpl.relation;
        f.key_kind = infer_key_kind(world, keys[i]);
        f.value_kind = value_kind;
        out.push_back(std::move(f));
    }
    return out;
}

SplitSet make_splits(const World& world, int64_t n_known, int64_t n_unknown, int64_t n_held,
                     NameKind key_kind, uint64_t seed, NameKind value_kind,
                     const std::vector<std::string>* eligible_keys) {
    if (key_kind == NameKind::real)
        throw std::invalid_argument("make_splits: unknown facts need novel (semantic/uuid) keys");
    if (n_known < 0 || n_unknown < 0 || n_held < 0)
        throw std::invalid_argument("make_splits: negative split size");

    std::vector<const Fact*> eligible;
    if (eligible_keys) {
        std::unordered_set<std::string> allow(eligible_keys->begin(), eligible_keys->end());
        for (const auto& f : world.base_facts)
            if (allow.count(f.key)) eligible.push_back(&f);
    } else {
        for (const auto& f : world.base_facts) eligible.push_back(&f);
    }
    if (n_known + n_held > static_cast<int64_t>(eligible.size()))
        throw std::invalid_argument("make_splits: only " + std::to_string(eligible.size()) +
                                    " eligible base facts for known+held = " +
                                    std::to_string(n_known + n_held));

    Rng rng(mix_seed(seed, 0x4bu));
    std::vector<size_t> order(eligible.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    SplitSet s;
    for (int64_t i = 0; i < n_known; ++i) {
        Fact f = *eligible[order[static_cast<size_t>(i)]];
        f.split = "known";
        s.known.push_back(std::move(f));
    }
    for (int64_t i = 0; i < n_held; ++i) {
        Fact f = *eligible[order[static_cast<size_t>(n_known + i)]];
        f.split = "held";
        s.held.push_back(std::move(f));
    }
    if (n_unknown > 0) {
        auto keys = key_kind == NameKind::semantic
                        ? gen_semantic_keys(world, n_unknown, mix_seed(seed, 0x6bu))
                        : gen_uuid_keys(n_unknown, mix_seed(seed, 0x6bu));
        s.unknown = assign_values(keys, world, value_kind, mix_seed(seed, 0x7bu));
        for (size_t i = 0; i < s.unknown.size(); ++i) {
            s.unknown[i].id = "u" + std::to_string(i);
            s.unknown[i].split = "unknown";
        }
    }
    return s;
}

std::vector<int32_t> encode_prompt(const Fact& f, const World& world) {
    return world.tokenizer.tokenize(world.tmpl.q_lead + world.tmpl.question(f.key) +
                                    world.tmpl.answer_lead);
}

EncodedFact encode_qa(const Fact& f, const World& world) {
    EncodedFact e;
    e.tokens = encode_prompt(f, world);
    e.answer_start = static_cast<int64_t>(e.tokens.size());
    auto ans = world.tokenizer.tokenize(f.value);
    e.tokens.insert(e.tokens.end(), ans.begin(), ans.end());
    e.tokens.push_back(Tokenizer::eos_id);
    e.answer_end = static_cast<int64_t>(e.tokens.size());
    return e;
}

std::vector<int32_t> encode_declarative(const Fact& f, const World& world) {
    auto ids = world.tokenizer.tokenize(declarative_text(f, world.tmpl));
    ids.push_back(Tokenizer::eos_id);
    return ids;
}

void save_facts_jsonl(const std::string& path, const std::vector<Fact>& facts,
                      const QuestionTemplate& tmpl) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& f : facts) {
        nlohmann::ordered_json j;
        j["id"] = f.id;
        j["key"] = f.key;
        j["relation"] = f.relation;
        j["question"] = tmpl.question(f.key);
        j["answer"] = f.value;
        j["key_kind"] = to_string(f.key_kind);
        j["value_kind"] = to_string(f.value_kind);
        j["split"] = f.split;
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<Fact> load_facts_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<Fact> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        Fact f;
        f.id = j.at("id").get<std::string>();
        f.key = j.at("key").get<std::string>();
        f.value = j.at("answer").get<std::string>();
        f.relation = j.at("relation").get<std::string>();
        f.key_kind = name_kind_from(j.at("key_kind").get<std::string>());
        f.value_kind = name_kind_from(j.at("value_kind").get<std::string>());
        f.split = j.at("split").get<std::string>();
        out.push_back(std::move(f));
    }
    return out;
}

} // namespace factlab

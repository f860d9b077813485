#include "factlab/probe.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "json.hpp"

namespace factlab {

namespace {

std::string fold(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    std::string out = s.substr(b, e - b);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool is_prefix(const std::string& pre, const std::string& full) {
    return pre.size() <= full.size() && full.compare(0, pre.size(), pre) == 0;
}

// exemplars + probed question, in the packed-sequence format the model was
// pre-trained on: qa SEP qa SEP ... SEP "Q: ... A: "
std::vector<int32_t> config_prompt(const World& world, const Fact& fact,
                                   const std::vector<const Fact*>& pool,
                                   const ProbeConfig& probe, int64_t config_idx) {
    Rng rng(mix_seed(probe.seed, hash_str(fact.key), static_cast<uint64_t>(config_idx)));
    std::vector<size_t> order(pool.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    std::vector<int32_t> prompt;
    for (int64_t s = 0; s < probe.n_shots; ++s) {
        auto ex = encode_qa(*pool[order[static_cast<size_t>(s)]], world);
        prompt.insert(prompt.end(), ex.tokens.begin(), ex.tokens.end() - 1); // drop EOS
        prompt.push_back(Tokenizer::sep_id);
    }
    auto q = encode_prompt(fact, world);
    prompt.insert(prompt.end(), q.begin(), q.end());
    return prompt;
}

// decode (greedy or sampled) until SEP/EOS and compare the continuation string
// with the answer; stops early once the text can no longer match exactly
bool decode_matches(const DecoderModel& model, const World& world,
                    const std::vector<int32_t>& prompt, const std::string& answer_folded,
                    bool greedy, double temperature, Rng* rng, int64_t budget) {
    std::vector<int32_t> seq = prompt;
    std::string text;
    for (int64_t step = 0; step < budget; ++step) {
        auto row = model.next_logits_batch({seq})[0];
        const int32_t tok =
            greedy ? argmax_lowest_id(row) : sample_from_logits(row, temperature, *rng);
        if (tok == Tokenizer::sep_id || tok == Tokenizer::eos_id)
            return fold(text) == answer_folded;
        seq.push_back(tok);
        text += world.tokenizer.atom(tok);
        if (!is_prefix(fold(text), answer_folded)) return false;
    }
    return false;
}

} // namespace

std::string to_string(KnowledgeCategory c) {
    switch (c) {
        case KnowledgeCategory::HighlyKnown: return "HighlyKnown";
        case KnowledgeCategory::MaybeKnown: return "MaybeKnown";
        case KnowledgeCategory::WeaklyKnown: return "WeaklyKnown";
        case KnowledgeCategory::Unknown: return "Unknown";
    }
    throw std::logic_error("bad KnowledgeCategory");
}

KnowledgeCategory category_from(const std::string& s) {
    if (s == "HighlyKnown") return KnowledgeCategory::HighlyKnown;
    if (s == "MaybeKnown") return KnowledgeCategory::MaybeKnown;
    if (s == "WeaklyKnown") return KnowledgeCategory::WeaklyKnown;
    if (s == "Unknown") return KnowledgeCategory::Unknown;
    throw std::invalid_argument("unknown knowledge category '" + s + "'");
}

KnowledgeCategory categorize(int64_t greedy_hits, int64_t n_configs, int64_t sample_hits) {
    if (n_configs < 1 || greedy_hits < 0 || greedy_hits > n_configs || sample_hits < 0)
        throw std::invalid_argument("categorize: bad hit counts");
    if (greedy_hits == n_configs) return KnowledgeCategory::HighlyKnown;
    if (greedy_hits > 0) return KnowledgeCategory::MaybeKnown;
    if (sample_hits > 0) return KnowledgeCategory::WeaklyKnown;
    return KnowledgeCategory::Unknown;
}

ProbeResult classify_fact(const DecoderModel& model, const World& world, const Fact& fact,
                          const std::vector<Fact>& exemplar_pool, const ProbeConfig& probe) {
    probe.validate();
    std::vector<const Fact*> pool;
    for (const auto& f : exemplar_pool)
        if (f.key != fact.key && f.relation == fact.relation) pool.push_back(&f);
    if (static_cast<int64_t>(pool.size()) < probe.n_shots)
        throw std::invalid_argument("classify_fact: only " + std::to_string(pool.size()) +
                                    " exemplar candidates for " + std::to_string(probe.n_shots) +
                                    " shots");

    const auto answer_tokens = world.tokenizer.tokenize(fact.value);
    const std::string answer_folded = fold(fact.value);
    const int64_t budget = static_cast<int64_t>(answer_tokens.size()) + 4;

    std::vector<std::vector<int32_t>> prompts;
    std::vector<std::vector<int32_t>> forced; // prompt + canonical answer tokens
    for (int64_t c = 0; c < probe.n_configs; ++c) {
        prompts.push_back(config_prompt(world, fact, pool, probe, c));
        forced.push_back(prompts.back());
        forced.back().insert(forced.back().end(), answer_tokens.begin(), answer_tokens.end());
    }

    // teacher-forced fast path: if greedy agrees with every answer token and
    // then terminates, the decoded string is exactly the answer
    auto rows = model.score_rows(forced);
    ProbeResult res;
    res.fact_id = fact.id;
    for (int64_t c = 0; c < probe.n_configs; ++c) {
        const auto& r = rows[static_cast<size_t>(c)];
        const size_t plen = prompts[static_cast<size_t>(c)].size();
        bool forced_ok = true;
        for (size_t t = 0; t < answer_tokens.size() && forced_ok; ++t)
            forced_ok = argmax_lowest_id(r[plen - 1 + t]) == answer_tokens[t];
        if (forced_ok) {
            const int32_t term = argmax_lowest_id(r[plen - 1 + answer_tokens.size()]);
            forced_ok = term == Tokenizer::sep_id || term == Tokenizer::eos_id;
        }
        if (forced_ok ||
            decode_matches(model, world, prompts[static_cast<size_t>(c)], answer_folded,
                           /*greedy=*/true, 0.0, nullptr, budget))
            ++res.greedy_hits;
    }

    if (res.greedy_hits == 0 && probe.n_samples_per_config > 0) {
        for (int64_t c = 0; c < probe.n_configs; ++c) {
            for (int64_t s = 0; s < probe.n_samples_per_config; ++s) {
                Rng rng(mix_seed(probe.seed, hash_str(fact.key), static_cast<uint64_t>(c),
                                 static_cast<uint64_t>(s), 0x5au));
                if (decode_matches(model, world, prompts[static_cast<size_t>(c)], answer_folded,
                                   /*greedy=*/false, probe.sample_temperature, &rng, budget))
                    ++res.sample_hits;
            }
        }
    }
    res.category = categorize(res.greedy_hits, probe.n_configs, res.sample_hits);
    return res;
}

CorpusProbe classify_corpus(const DecoderModel& model, const World& world,
                            const std::vector<Fact>& facts, const ProbeConfig& probe) {
    if (facts.empty()) throw std::invalid_argument("classify_corpus: empty fact list");
    CorpusProbe out;
    for (const auto& f : facts) {
        out.results.push_back(classify_fact(model, world, f, facts, probe));
        out.counts[static_cast<size_t>(out.results.back().category)]++;
    }
    out.highly_known_fraction =
        double(out.counts[static_cast<size_t>(KnowledgeCategory::HighlyKnown)]) /
        double(facts.size());
    out.retention = out.highly_known_fraction >= 0.30;
    return out;
}

std::vector<uint8_t> greedy_matches(const DecoderModel& model, const World& world,
                                    const std::vector<Fact>& facts) {
    if (facts.empty()) throw std::invalid_argument("greedy_matches: empty fact list");
    const size_t n = facts.size();
    std::vector<std::vector<int32_t>> prompts(n);
    std::vector<std::vector<int32_t>> answers(n);
    for (size_t i = 0; i < n; ++i) {
        prompts[i] = encode_prompt(facts[i], world);
        answers[i] = world.tokenizer.tokenize(facts[i].value);
    }

    std::vector<uint8_t> out(n, 0);
    constexpr size_t kChunk = 256; // bounds the batched forward's activation memory
    for (size_t base = 0; base < n; base += kChunk) {
        const size_t end = std::min(n, base + kChunk);
        std::vector<std::vector<int32_t>> forced;
        forced.reserve(end - base);
        for (size_t i = base; i < end; ++i) {
            forced.push_back(prompts[i]);
            forced.back().insert(forced.back().end(), answers[i].begin(), answers[i].end());
        }
        const auto rows = model.score_rows(forced);
        for (size_t i = base; i < end; ++i) {
            const auto& r = rows[i - base];
            const size_t plen = prompts[i].size();
            bool forced_ok = true;
            for (size_t t = 0; t < answers[i].size() && forced_ok; ++t)
                forced_ok = argmax_lowest_id(r[plen - 1 + t]) == answers[i][t];
            if (forced_ok) {
                const int32_t term = argmax_lowest_id(r[plen - 1 + answers[i].size()]);
                forced_ok = term == Tokenizer::sep_id || term == Tokenizer::eos_id;
            }
            const int64_t budget = static_cast<int64_t>(answers[i].size()) + 4;
            if (forced_ok ||
                decode_matches(model, world, prompts[i], fold(facts[i].value),
                               /*greedy=*/true, 0.0, nullptr, budget))
                out[i] = 1;
        }
    }
    return out;
}

void save_probe_jsonl(const std::string& path, const std::vector<ProbeResult>& results) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& r : results) {
        nlohmann::ordered_json j;
        j["fact_id"] = r.fact_id;
        j["category"] = to_string(r.category);
        j["greedy_hits"] = r.greedy_hits;
        j["sample_hits"] = r.sample_hits;
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<ProbeResult> load_probe_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<ProbeResult> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        ProbeResult r;
        r.fact_id = j.at("fact_id").get<std::string>();
        r.category = category_from(j.at("category").get<std::string>());
        r.greedy_hits = j.at("greedy_hits").get<int64_t>();
        r.sample_hits = j.at("sample_hits").get<int64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace factlab

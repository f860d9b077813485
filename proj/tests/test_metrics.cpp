#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "factlab/metrics.hpp"
#include "factlab/objectives.hpp"

using namespace factlab;

namespace {

World& met_world() {
    static World w = build_world(220, 10, 5);
    return w;
}

struct MetSetup {
    ModelConfig cfg;
    SplitSet splits;
};

MetSetup& setup() {
    static MetSetup s = [] {
        MetSetup t;
        auto& w = met_world();
        t.splits = make_splits(w, 12, 12, 8, NameKind::semantic, 11);
        int64_t longest = 0;
        for (const auto* part : {&t.splits.known, &t.splits.unknown, &t.splits.held})
            for (const auto& f : *part)
                longest =
                    std::max(longest, static_cast<int64_t>(encode_qa(f, w).tokens.size()));
        t.cfg.n_layers = 2;
        t.cfg.d_model = 16;
        t.cfg.n_heads = 2;
        t.cfg.d_ffn = 24;
        t.cfg.vocab_size = w.tokenizer.vocab_size();
        t.cfg.max_seq_len = longest + 8; // headroom for decode budgets
        t.cfg.seed = 71;
        return t;
    }();
    return s;
}

TransformerModel& met_model() {
    static TransformerModel m(setup().cfg);
    return m;
}

// 2-D unit vector at the given angle
std::vector<float> at_angle(double theta) {
    return {static_cast<float>(std::cos(theta)), static_cast<float>(std::sin(theta))};
}

std::vector<std::vector<float>> random_rows(int64_t n, int64_t d, uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<float>> rows(static_cast<size_t>(n));
    for (auto& r : rows) {
        r.resize(static_cast<size_t>(d));
        for (auto& v : r) v = static_cast<float>(rng.normal());
    }
    return rows;
}

// exact isometry: permute coordinates, then flip a fixed sign pattern
std::vector<std::vector<float>> perm_flip(const std::vector<std::vector<float>>& rows) {
    const size_t d = rows.front().size();
    std::vector<size_t> perm(d);
    std::iota(perm.begin(), perm.end(), size_t{0});
    std::rotate(perm.begin(), perm.begin() + 3, perm.end());
    std::vector<std::vector<float>> out(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        out[i].resize(d);
        for (size_t j = 0; j < d; ++j)
            out[i][j] = ((j % 2) ? -1.0f : 1.0f) * rows[i][perm[j]];
    }
    return out;
}

// plane rotations on coordinate pairs (0,1),(2,3),... — orthogonal by construction
std::vector<std::vector<float>> givens_rotate(const std::vector<std::vector<float>>& rows) {
    const size_t d = rows.front().size();
    const double angles[] = {0.7, 1.1, -0.4, 2.0};
    std::vector<std::vector<float>> out = rows;
    for (auto& r : out)
        for (size_t p = 0; p + 1 < d; p += 2) {
            const double th = angles[(p / 2) % 4];
            const double a = r[p], b = r[p + 1];
            r[p] = static_cast<float>(std::cos(th) * a - std::sin(th) * b);
            r[p + 1] = static_cast<float>(std::sin(th) * a + std::cos(th) * b);
        }
    return out;
}

// answers every sequence with the continuation its fact table dictates,
// falling back to PAD when no table entry extends the sequence
struct LookupModel : DecoderModel {
    int64_t V;
    std::vector<std::vector<int32_t>> qa;
    LookupModel(const World& w, const std::vector<Fact>& facts)
        : V(w.tokenizer.vocab_size()) {
        for (const auto& f : facts) qa.push_back(encode_qa(f, w).tokens);
    }
    int64_t vocab_size() const override { return V; }
    std::vector<std::vector<double>> next_logits_batch(
        const std::vector<std::vector<int32_t>>& seqs) const override {
        std::vector<std::vector<double>> out;
        out.reserve(seqs.size());
        for (const auto& s : seqs) {
            std::vector<double> row(static_cast<size_t>(V), 0.0);
            int32_t next = Tokenizer::pad_id;
            for (const auto& e : qa)
                if (e.size() > s.size() && std::equal(s.begin(), s.end(), e.begin())) {
                    next = e[s.size()];
                    break;
                }
            row[static_cast<size_t>(next)] = 8.0;
            out.push_back(std::move(row));
        }
        return out;
    }
};

// fixed next-token logits per exact sequence
struct VecModel : DecoderModel {
    int64_t V;
    std::map<std::vector<int32_t>, std::vector<double>> table;
    explicit VecModel(int64_t vocab) : V(vocab) {}
    int64_t vocab_size() const override { return V; }
    std::vector<std::vector<double>> next_logits_batch(
        const std::vector<std::vector<int32_t>>& seqs) const override {
        std::vector<std::vector<double>> out;
        for (const auto& s : seqs) {
            auto it = table.find(s);
            out.push_back(it == table.end() ? std::vector<double>(static_cast<size_t>(V), 0.0)
                                            : it->second);
        }
        return out;
    }
};

std::vector<double> peak_row(int64_t vocab, std::initializer_list<int32_t> ids) {
    std::vector<double> row(static_cast<size_t>(vocab), 0.0);
    double v = 10.0;
    for (auto id : ids) row[static_cast<size_t>(id)] = v--;
    return row;
}

Fact make_fact(const std::string& key, const std::string& value, const std::string& id) {
    Fact f;
    f.id = id;
    f.key = key;
    f.value = value;
    return f;
}

} // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("key-final position points at the last key token of a prompt") {
    auto& w = met_world();
    const auto& facts = setup().splits.held;
    for (const auto& f : facts) {
        const auto prompt = encode_prompt(f, w);
        const auto pos = key_final_position(w, prompt);
        REQUIRE(pos >= 1);
        REQUIRE(pos + 1 < static_cast<int64_t>(prompt.size()));
        CHECK(prompt[static_cast<size_t>(pos) + 1] == *w.tokenizer.atom_id(w.tmpl.q_suffix));
        const std::vector<int32_t> key_tokens(prompt.begin() + 1,
                                              prompt.begin() + static_cast<long>(pos) + 1);
        CHECK(w.tokenizer.detokenize(key_tokens) == f.key);
    }
    CHECK_THROWS_AS(key_final_position(w, {5, 6, 7}), std::invalid_argument);
}

TEST_CASE("capture vectors are unit norm, deterministic, and chunk cleanly") {
    auto& w = met_world();
    const auto& s = setup();
    const auto& m = met_model();
    const int64_t layer = s.cfg.default_capture_layer();

    const auto caps = capture_vectors(m, w, s.splits.held, layer);
    REQUIRE(caps.size() == s.splits.held.size());
    for (const auto& c : caps) {
        REQUIRE(static_cast<int64_t>(c.size()) == s.cfg.d_model);
        double n2 = 0.0;
        for (float v : c) n2 += double(v) * double(v);
        CHECK(std::abs(n2 - 1.0) < 1e-5);
    }
    CHECK(capture_vectors(m, w, s.splits.held, layer) == caps);

    // per-sequence capture agrees with the batch
    std::vector<std::vector<int32_t>> one{encode_prompt(s.splits.held[0], w)};
    const auto single =
        m.capture_at(one, layer, {key_final_position(w, one[0])});
    CHECK(single[0] == caps[0]);

    // >512 facts crosses the internal chunk boundary and must tile exactly
    std::vector<Fact> many;
    for (int i = 0; i < 520; ++i) many.push_back(s.splits.held[i % s.splits.held.size()]);
    const auto tiled = capture_vectors(m, w, many, layer);
    for (size_t i = 0; i < many.size(); ++i) CHECK(tiled[i] == caps[i % caps.size()]);

    CHECK_THROWS_AS(capture_vectors(m, w, {}, layer), std::invalid_argument);
}

TEST_CASE("representation drift: identity, orthogonal, and antipodal captures") {
    const std::vector<std::vector<float>> ref{at_angle(0.0), at_angle(1.0)};
    CHECK(representation_drift(ref, ref) == 0.0);

    const std::vector<std::vector<float>> ortho{at_angle(std::acos(-1.0) / 2),
                                                at_angle(1.0 + std::acos(-1.0) / 2)};
    CHECK(representation_drift(ref, ortho) == doctest::Approx(1.0).epsilon(1e-6));

    const std::vector<std::vector<float>> neg{{-ref[0][0], -ref[0][1]},
                                              {-ref[1][0], -ref[1][1]}};
    CHECK(representation_drift(ref, neg) == doctest::Approx(2.0).epsilon(1e-6));

    CHECK_THROWS_AS(representation_drift(ref, {ref[0]}), std::invalid_argument);
    CHECK_THROWS_AS(representation_drift({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(representation_drift(ref, {{1.0f}, {1.0f}}), std::invalid_argument);
    CHECK_THROWS_AS(representation_drift({{0.0f, 0.0f}, ref[1]}, ref), std::invalid_argument);
}

TEST_CASE("neighborhood shift: hand 3-vector oracle and rotation invariance") {
    const double pi = std::acos(-1.0);
    const std::vector<std::vector<float>> ref{at_angle(0.0), at_angle(pi / 2), at_angle(pi / 4)};
    const std::vector<std::vector<float>> now{at_angle(0.0), at_angle(pi / 2), at_angle(pi / 6)};

    CHECK(neighborhood_shift(ref, ref) == 0.0);
    // mean over the full 3x3 grid of |cos_now - cos_ref|, diagonal contributing zero
    CHECK(neighborhood_shift(ref, now) == doctest::Approx(0.081338978618764144).epsilon(1e-5));

    // a global rotation preserves every pairwise cosine
    const auto rows = random_rows(6, 8, 21);
    CHECK(neighborhood_shift(rows, givens_rotate(rows)) < 1e-6);

    CHECK_THROWS_AS(neighborhood_shift({at_angle(0.0)}, {at_angle(0.0)}),
                    std::invalid_argument);
}

TEST_CASE("mean type displacement: 2x2 oracle and constant-shift example") {
    const double pi = std::acos(-1.0);
    const std::vector<std::vector<float>> held{at_angle(0.0), at_angle(pi / 2)};
    const std::vector<std::vector<float>> syn_ref{at_angle(pi / 4), at_angle(3 * pi / 4)};
    const std::vector<std::vector<float>> syn_now{at_angle(pi / 3), at_angle(5 * pi / 6)};

    CHECK(mean_type_displacement(held, held, syn_ref, syn_ref) == 0.0);
    CHECK(mean_type_displacement(held, held, syn_ref, syn_now) ==
          doctest::Approx(-0.10355339059327376).epsilon(1e-5));

    // every cross cosine drops by exactly 0.1
    const std::vector<std::vector<float>> one_held{at_angle(0.0)};
    const std::vector<std::vector<float>> s_ref{{0.8f, 0.6f}};
    const std::vector<std::vector<float>> s_now{{0.7f, static_cast<float>(std::sqrt(0.51))}};
    CHECK(mean_type_displacement(one_held, one_held, s_ref, s_now) ==
          doctest::Approx(-0.1).epsilon(1e-6));

    CHECK_THROWS_AS(mean_type_displacement({}, {}, syn_ref, syn_now), std::invalid_argument);
    CHECK_THROWS_AS(mean_type_displacement(held, {held[0]}, syn_ref, syn_now),
                    std::invalid_argument);
}

TEST_CASE("capture metrics are invariant under an exact global isometry") {
    const auto ref = random_rows(5, 8, 33);
    const auto now = random_rows(5, 8, 34);
    const auto syn_ref = random_rows(4, 8, 35);
    const auto syn_now = random_rows(4, 8, 36);

    CHECK(representation_drift(perm_flip(ref), perm_flip(now)) ==
          doctest::Approx(representation_drift(ref, now)).epsilon(1e-12));
    CHECK(neighborhood_shift(perm_flip(ref), perm_flip(now)) ==
          doctest::Approx(neighborhood_shift(ref, now)).epsilon(1e-12));
    CHECK(mean_type_displacement(perm_flip(ref), perm_flip(now), perm_flip(syn_ref),
                                 perm_flip(syn_now)) ==
          doctest::Approx(mean_type_displacement(ref, now, syn_ref, syn_now)).epsilon(1e-12));
}

TEST_CASE("model-facing drift metrics: identical models score zero, architectures must match") {
    auto& w = met_world();
    const auto& s = setup();
    const auto& m = met_model();
    const int64_t layer = s.cfg.default_capture_layer();

    TransformerModel same(s.cfg); // same seed, same parameters
    CHECK(representation_drift(m, same, w, s.splits.held, layer) == 0.0);
    CHECK(neighborhood_shift(m, same, w, s.splits.held, layer) == 0.0);
    CHECK(mean_type_displacement(m, same, w, s.splits.held, s.splits.unknown, layer) == 0.0);

    ModelConfig other = s.cfg;
    other.seed = 999;
    TransformerModel moved(other);
    CHECK(representation_drift(m, moved, w, s.splits.held, layer) > 1e-6);

    ModelConfig wide = s.cfg;
    wide.d_model = 24;
    TransformerModel mismatched(wide);
    CHECK_THROWS_AS(representation_drift(m, mismatched, w, s.splits.held, layer),
                    std::invalid_argument);
    CHECK_THROWS_AS(neighborhood_shift(m, mismatched, w, s.splits.held, layer),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        mean_type_displacement(m, mismatched, w, s.splits.held, s.splits.unknown, layer),
        std::invalid_argument);
}

TEST_CASE("spearman: ordering extremes, tie oracle, monotone invariance, degenerate input") {
    const std::vector<double> up{1.0, 2.0, 3.0, 4.0, 5.0};
    const std::vector<double> down{5.0, 4.0, 3.0, 2.0, 1.0};
    CHECK(*spearman(up, up) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*spearman(up, down) == doctest::Approx(-1.0).epsilon(1e-12));

    // ranks (1, 2.5, 2.5, 4) vs (1, 3, 2, 4)
    CHECK(*spearman({1.0, 2.0, 2.0, 3.0}, {1.0, 3.0, 2.0, 4.0}) ==
          doctest::Approx(0.9486832980505138).epsilon(1e-12));

    // strictly increasing transforms leave ranks untouched
    Rng rng(7);
    std::vector<double> xs(9), ys(9), cubed(9);
    for (size_t i = 0; i < xs.size(); ++i) {
        xs[i] = rng.normal();
        ys[i] = rng.normal();
        cubed[i] = xs[i] * xs[i] * xs[i];
    }
    CHECK(*spearman(xs, ys) == *spearman(cubed, ys));

    CHECK(!spearman({2.0, 2.0, 2.0}, {1.0, 2.0, 3.0}).has_value());
    CHECK(!spearman({1.0, 2.0, 3.0}, {5.0, 5.0, 5.0}).has_value());
    CHECK_THROWS_AS(spearman({1.0}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(spearman({1.0, 2.0}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("scalar JSD: identity, disjoint masses, definitional oracle, symmetry") {
    CHECK(jsd_scalar({0.5, 0.5}, {0.5, 0.5}) == 0.0);
    CHECK(jsd_scalar({1.0, 0.0}, {0.0, 1.0}) ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
    CHECK(jsd_scalar({0.5, 0.5}, {0.9, 0.1}) ==
          doctest::Approx(0.10174922507919669).epsilon(1e-12));
    CHECK(jsd_scalar({0.9, 0.1}, {0.5, 0.5}) == jsd_scalar({0.5, 0.5}, {0.9, 0.1}));
    // unnormalized inputs are normalized first
    CHECK(jsd_scalar({1.0, 1.0}, {9.0, 1.0}) ==
          doctest::Approx(0.10174922507919669).epsilon(1e-12));

    Rng rng(13);
    std::vector<double> p(6), q(6);
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::abs(rng.normal()) + 0.01;
        q[i] = std::abs(rng.normal()) + 0.01;
    }
    CHECK(jsd_scalar(p, q) == jsd_scalar(q, p));
    CHECK(jsd_scalar(p, q) >= 0.0);
    CHECK(jsd_scalar(p, q) <= 0.6931471805599453);

    CHECK_THROWS_AS(jsd_scalar({0.5, 0.5}, {0.5}), std::invalid_argument);
    CHECK_THROWS_AS(jsd_scalar({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(jsd_scalar({-0.1, 1.1}, {0.5, 0.5}), std::invalid_argument);
    CHECK_THROWS_AS(jsd_scalar({0.0, 0.0}, {0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("pair set: candidates share answers, indices compact, reference logits cached") {
    auto& w = met_world();
    const auto& s = setup();
    const auto& m = met_model();
    const auto& base = s.splits.held;
    REQUIRE(base.size() >= 3);

    const std::string A = w.countries[0], B = w.countries[1], C = w.countries[2];
    const std::vector<Fact> unknown{make_fact(base[0].key, A, "u0"),
                                    make_fact(base[1].key, B, "u1"),
                                    make_fact(base[2].key, A, "u2")};
    const std::vector<Fact> held{make_fact(base[3].key, A, "h0"),
                                 make_fact(base[4].key, A, "h1"),
                                 make_fact(base[5].key, C, "h2")};

    const int64_t k = 6;
    const auto set = build_pair_set(m, w, unknown, held, k);
    REQUIRE(set.k == k);
    // value-A pairs only: (u0,h0),(u0,h1),(u2,h0),(u2,h1) in scan order
    REQUIRE(set.pairs.size() == 4);
    REQUIRE(set.u_prompts.size() == 2);
    REQUIRE(set.h_prompts.size() == 2);
    CHECK(set.u_prompts[0] == encode_prompt(unknown[0], w));
    CHECK(set.u_prompts[1] == encode_prompt(unknown[2], w));
    CHECK(set.h_prompts[0] == encode_prompt(held[0], w));
    CHECK(set.h_prompts[1] == encode_prompt(held[1], w));
    const std::vector<std::pair<int64_t, int64_t>> want{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    for (size_t i = 0; i < want.size(); ++i) {
        CHECK(set.pairs[i].u == want[i].first);
        CHECK(set.pairs[i].h == want[i].second);
    }

    // cached ids are the reference model's top-k at the held answer position,
    // and the cached logits are exactly that row gathered at those ids
    for (const auto& p : set.pairs) {
        REQUIRE(static_cast<int64_t>(p.shared_ids.size()) == k);
        const auto row = m.next_logits_batch({set.h_prompts[static_cast<size_t>(p.h)]})[0];
        const auto expect = topk_indices(row.data(), m.vocab_size(), k);
        CHECK(p.shared_ids == expect);
        for (size_t i = 0; i < p.shared_ids.size(); ++i)
            CHECK(p.ref_h_logits[i] == row[static_cast<size_t>(p.shared_ids[i])]);
        // nothing outside the set beats anything inside it
        double min_in = row[static_cast<size_t>(p.shared_ids[0])];
        for (auto id : p.shared_ids) min_in = std::min(min_in, row[static_cast<size_t>(id)]);
        for (int64_t id = 0; id < m.vocab_size(); ++id)
            if (std::find(p.shared_ids.begin(), p.shared_ids.end(), static_cast<int32_t>(id)) ==
                p.shared_ids.end())
                CHECK(row[static_cast<size_t>(id)] <= min_in + 1e-12);
    }

    // seeded subsample: reproducible, bounded, and drawn from the full set
    const auto small_a = build_pair_set(m, w, unknown, held, k, 2, 42);
    const auto small_b = build_pair_set(m, w, unknown, held, k, 2, 42);
    REQUIRE(small_a.pairs.size() == 2);
    CHECK(small_a.pairs.size() == small_b.pairs.size());
    for (size_t i = 0; i < small_a.pairs.size(); ++i) {
        CHECK(small_a.pairs[i].shared_ids == small_b.pairs[i].shared_ids);
        CHECK(small_a.u_prompts[static_cast<size_t>(small_a.pairs[i].u)] ==
              small_b.u_prompts[static_cast<size_t>(small_b.pairs[i].u)]);
    }
    for (const auto& p : small_a.pairs) {
        const auto& up = small_a.u_prompts[static_cast<size_t>(p.u)];
        const auto& hp = small_a.h_prompts[static_cast<size_t>(p.h)];
        bool found = false;
        for (const auto& q : set.pairs)
            found = found || (set.u_prompts[static_cast<size_t>(q.u)] == up &&
                              set.h_prompts[static_cast<size_t>(q.h)] == hp);
        CHECK(found);
    }

    // no shared answers -> empty set; bad k rejected
    const std::vector<Fact> lone{make_fact(base[0].key, B, "x0")};
    const std::vector<Fact> other{make_fact(base[1].key, C, "y0")};
    CHECK(build_pair_set(m, w, lone, other, k).pairs.empty());
    CHECK_THROWS_AS(build_pair_set(m, w, unknown, held, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_pair_set(m, w, unknown, held, m.vocab_size() + 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_pair_set(m, w, unknown, held, k, 0), std::invalid_argument);
}

TEST_CASE("rank correlation over pairs: self-correlation, reversal, baseline recomputation") {
    auto& w = met_world();
    const auto& s = setup();
    const auto& m = met_model();
    const auto& base = s.splits.held;

    // unique values force the diagonal pairing; identical prompts on both
    // sides of each pair make the correlation exactly 1
    const std::vector<Fact> diag{make_fact(base[0].key, w.countries[0], "d0"),
                                 make_fact(base[1].key, w.countries[1], "d1")};
    const auto self_pairs = build_pair_set(m, w, diag, diag, 6);
    REQUIRE(self_pairs.pairs.size() == 2);
    CHECK(*rank_rho(m, self_pairs) == doctest::Approx(1.0).epsilon(1e-12));

    // reversing the cached reference logits reverses the correlation
    PairSet reversed = self_pairs;
    for (auto& p : reversed.pairs) {
        auto sorted_ids = p.shared_ids; // gather under now uses these same ids
        std::reverse(p.ref_h_logits.begin(), p.ref_h_logits.end());
        (void)sorted_ids;
    }
    CHECK(*rank_rho(m, reversed) == doctest::Approx(-1.0).epsilon(1e-12));

    // generic pair set: value equals a direct per-pair recomputation
    const auto pairs = build_pair_set(m, w, s.splits.unknown, s.splits.held, 6);
    REQUIRE(!pairs.pairs.empty());
    const auto got = rank_rho(m, pairs);
    double acc = 0.0;
    int64_t defined = 0;
    for (const auto& p : pairs.pairs) {
        const auto row = m.next_logits_batch({pairs.u_prompts[static_cast<size_t>(p.u)]})[0];
        std::vector<double> xs(p.shared_ids.size());
        for (size_t i = 0; i < xs.size(); ++i)
            xs[i] = row[static_cast<size_t>(p.shared_ids[i])];
        if (const auto rho = spearman(xs, p.ref_h_logits)) {
            acc += *rho;
            ++defined;
        }
    }
    REQUIRE(defined > 0);
    REQUIRE(got.has_value());
    CHECK(*got == doctest::Approx(acc / double(defined)).epsilon(1e-12));

    // degenerate reference logits are skipped; all-degenerate is undefined
    PairSet flat = self_pairs;
    flat.pairs[0].ref_h_logits.assign(flat.pairs[0].ref_h_logits.size(), 3.0);
    CHECK(*rank_rho(m, flat) == doctest::Approx(1.0).epsilon(1e-12));
    flat.pairs[1].ref_h_logits.assign(flat.pairs[1].ref_h_logits.size(), 3.0);
    CHECK(!rank_rho(m, flat).has_value());

    CHECK_THROWS_AS(rank_rho(m, PairSet{}), std::invalid_argument);
}

TEST_CASE("neighbor transfer rate: identical, half-shared, and disjoint candidate sets") {
    auto& w = met_world();
    const auto& s = setup();
    const auto& m = met_model();
    const auto& base = s.splits.held;

    const std::vector<Fact> diag{make_fact(base[0].key, w.countries[0], "d0"),
                                 make_fact(base[1].key, w.countries[1], "d1")};
    const auto self_pairs = build_pair_set(m, w, diag, diag, 6);
    CHECK(neighbor_transfer_rate(m, self_pairs, 5) == 1.0);

    // hand model with controlled top-k sets at two synthetic prompts
    const int64_t V = 32;
    VecModel vm(V);
    const std::vector<int32_t> up{5};
    const std::vector<int32_t> hp{6};
    PairSet ps;
    ps.k = 4;
    ps.u_prompts = {up};
    ps.h_prompts = {hp};
    ps.pairs.push_back({0, 0, {3, 4, 5, 6}, {10.0, 9.0, 8.0, 7.0}});

    vm.table[up] = peak_row(V, {3, 4, 5, 6});
    vm.table[hp] = peak_row(V, {5, 6, 7, 8}); // shares exactly {5, 6}
    CHECK(neighbor_transfer_rate(vm, ps, 4) == 0.5);

    vm.table[hp] = peak_row(V, {10, 11, 12, 13});
    CHECK(neighbor_transfer_rate(vm, ps, 4) == 0.0);

    vm.table[hp] = vm.table[up];
    CHECK(neighbor_transfer_rate(vm, ps, 4) == 1.0);

    CHECK_THROWS_AS(neighbor_transfer_rate(vm, ps, 0), std::invalid_argument);
    CHECK_THROWS_AS(neighbor_transfer_rate(vm, ps, V + 1), std::invalid_argument);
    CHECK_THROWS_AS(neighbor_transfer_rate(vm, PairSet{}, 4), std::invalid_argument);
}

TEST_CASE("distribution JSD over pairs: identity, near-disjoint masses, determinism") {
    auto& w = met_world();
    const auto& s = setup();
    const auto& m = met_model();
    const auto& base = s.splits.held;

    const std::vector<Fact> diag{make_fact(base[0].key, w.countries[0], "d0"),
                                 make_fact(base[1].key, w.countries[1], "d1")};
    const auto self_pairs = build_pair_set(m, w, diag, diag, 6);
    CHECK(distribution_jsd(m, self_pairs) == 0.0);

    // point masses on opposite ids approach the ln 2 ceiling
    const int64_t V = 16;
    VecModel vm(V);
    const std::vector<int32_t> up{5};
    std::vector<double> urow(static_cast<size_t>(V), -400.0);
    urow[3] = -200.0;
    urow[4] = 0.0;
    vm.table[up] = urow;
    PairSet ps;
    ps.k = 2;
    ps.u_prompts = {up};
    ps.h_prompts = {{6}};
    ps.pairs.push_back({0, 0, {3, 4}, {0.0, -200.0}});
    CHECK(distribution_jsd(vm, ps) == doctest::Approx(0.6931471805599453).epsilon(1e-9));

    const auto pairs = build_pair_set(m, w, s.splits.unknown, s.splits.held, 6);
    const double a = distribution_jsd(m, pairs);
    CHECK(a == distribution_jsd(m, pairs));
    CHECK(a >= 0.0);
    CHECK(a <= 0.6931471805599453);

    CHECK_THROWS_AS(distribution_jsd(m, PairSet{}), std::invalid_argument);
}

TEST_CASE("accuracy: lookup models score exactly their constructed hit fraction") {
    auto& w = met_world();
    const auto& s = setup();
    std::vector<Fact> facts = s.splits.held; // 8 base facts

    const LookupModel knows_all(w, facts);
    CHECK(accuracy(knows_all, w, facts) == 1.0);

    const LookupModel knows_nothing(w, {});
    CHECK(accuracy(knows_nothing, w, facts) == 0.0);

    // first half answered correctly, second half remapped to a wrong value
    std::vector<Fact> half = facts;
    for (size_t i = half.size() / 2; i < half.size(); ++i) {
        for (const auto& c : w.countries)
            if (c != facts[i].value) {
                half[i].value = c;
                break;
            }
    }
    const LookupModel knows_half(w, half);
    CHECK(accuracy(knows_half, w, facts) == 0.5);

    // chunked evaluation (>256 facts) gives the same verdict per fact
    std::vector<Fact> many;
    for (int i = 0; i < 300; ++i) many.push_back(facts[i % facts.size()]);
    CHECK(accuracy(knows_all, w, many) == 1.0);

    CHECK_THROWS_AS(accuracy(knows_all, w, {}), std::invalid_argument);
}

TEST_CASE("held accuracy drop: peak-minus-last in percentage points") {
    CHECK(delta_held({0.90, 0.93, 0.85}) == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(delta_held({0.10, 0.50, 0.50}) == 0.0);
    CHECK(delta_held({0.42}) == 0.0);
    CHECK(delta_held({1.0, 0.0}) == 100.0);
    CHECK_THROWS_AS(delta_held({}), std::invalid_argument);
}

TEST_CASE("drift report validation enforces every range") {
    DriftReport r;
    r.epoch = 3;
    r.acc_known = 0.9;
    r.acc_unknown = 0.5;
    r.acc_held = 0.8;
    r.rd = 0.11;
    r.ns = 0.07;
    r.mtd = -0.09;
    r.rank_rho = 0.32;
    r.ntr = 0.45;
    r.jsd = 0.68;
    r.delta_held_pp = 8.0;
    CHECK_NOTHROW(r.validate());

    DriftReport empty_optionals = r;
    empty_optionals.acc_maybe_known.reset();
    empty_optionals.rank_rho.reset();
    empty_optionals.ntr.reset();
    empty_optionals.jsd.reset();
    CHECK_NOTHROW(empty_optionals.validate());

    auto expect_throw = [&](auto mutate) {
        DriftReport bad = r;
        mutate(bad);
        CHECK_THROWS_AS(bad.validate(), std::out_of_range);
    };
    expect_throw([](DriftReport& b) { b.epoch = -1; });
    expect_throw([](DriftReport& b) { b.acc_known = 1.2; });
    expect_throw([](DriftReport& b) { b.acc_unknown = -0.1; });
    expect_throw([](DriftReport& b) { b.acc_maybe_known = 2.0; });
    expect_throw([](DriftReport& b) { b.acc_weakly_known = -1.0; });
    expect_throw([](DriftReport& b) { b.rd = 2.5; });
    expect_throw([](DriftReport& b) { b.rd = -0.01; });
    expect_throw([](DriftReport& b) { b.ns = 2.1; });
    expect_throw([](DriftReport& b) { b.mtd = -2.5; });
    expect_throw([](DriftReport& b) { b.rank_rho = 1.5; });
    expect_throw([](DriftReport& b) { b.ntr = 1.01; });
    expect_throw([](DriftReport& b) { b.jsd = 0.70; });
    expect_throw([](DriftReport& b) { b.delta_held_pp = -0.5; });
    expect_throw([](DriftReport& b) { b.delta_held_pp = 101.0; });
}

TEST_SUITE_END();

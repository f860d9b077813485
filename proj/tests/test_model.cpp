#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "factlab/checkpoint.hpp"
#include "factlab/model.hpp"

using namespace factlab;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ffn = 24;
    cfg.vocab_size = 11;
    cfg.max_seq_len = 12;
    cfg.seed = 71;
    return cfg;
}

// hand-built model: same fixed next-token logits for every input
struct TableModel : DecoderModel {
    std::vector<double> row;
    explicit TableModel(std::vector<double> r) : row(std::move(r)) {}
    int64_t vocab_size() const override { return static_cast<int64_t>(row.size()); }
    std::vector<std::vector<double>> next_logits_batch(
        const std::vector<std::vector<int32_t>>& seqs) const override {
        return std::vector<std::vector<double>>(seqs.size(), row);
    }
};

} // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("config validation") {
    auto cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.n_layers = 3; // odd: no middle layer
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.n_heads = 3; // does not divide d_model
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK(tiny_config().default_capture_layer() == 1);
    ModelConfig d;
    d.vocab_size = 100;
    CHECK(d.default_capture_layer() == 2);
}

TEST_CASE("forward shape, determinism, and input validation") {
    TransformerModel m(tiny_config());
    std::vector<int32_t> toks = {1, 4, 2, 9, 0};
    auto [logits, cap] = m.forward(toks);
    CHECK(logits.shape == Shape{5, 11});
    CHECK(!cap.has_value());
    auto [logits2, cap2] = m.forward(toks);
    CHECK(logits.data == logits2.data);

    CHECK_THROWS(m.forward({1, 99, 2}));                              // id out of vocab
    CHECK_THROWS(m.forward(std::vector<int32_t>(13, 1)));             // beyond max_seq_len
    CHECK_THROWS(m.forward(toks, std::make_pair(int64_t(9), int64_t(0)))); // bad layer
    CHECK_THROWS(m.forward(toks, std::make_pair(int64_t(1), int64_t(7)))); // bad position
}

TEST_CASE("capture vector is unit norm at the requested position") {
    TransformerModel m(tiny_config());
    auto [logits, cap] = m.forward({3, 1, 4, 1, 5}, std::make_pair(int64_t(1), int64_t(2)));
    REQUIRE(cap.has_value());
    CHECK(cap->layer == 1);
    CHECK(cap->position == 2);
    double n2 = 0;
    for (float v : cap->vec) n2 += double(v) * double(v);
    CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("all-zero parameters give vocab-constant logits") {
    TransformerModel m(tiny_config());
    for (auto& e : m.params().entries)
        std::fill(e.tensor.data.begin(), e.tensor.data.end(), 0.0f);
    auto [logits, cap] = m.forward({1, 2, 3});
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t v = 0; v < 11; ++v) CHECK(logits[r * 11 + v] == logits[r * 11]);
}

TEST_CASE("causality: perturbing position j leaves logits before j unchanged") {
    TransformerModel m(tiny_config());
    std::vector<int32_t> a = {5, 2, 8, 1, 7, 3};
    std::vector<int32_t> b = a;
    const size_t j = 3;
    b[j] = 9;
    auto [la, ca] = m.forward(a);
    auto [lb, cb] = m.forward(b);
    for (size_t r = 0; r < j; ++r)
        for (int64_t v = 0; v < 11; ++v)
            CHECK(la[int64_t(r) * 11 + v] == lb[int64_t(r) * 11 + v]); // bitwise: same prefix compute
    // and position j itself must differ somewhere
    bool differs = false;
    for (int64_t v = 0; v < 11; ++v) differs |= la[int64_t(j) * 11 + v] != lb[int64_t(j) * 11 + v];
    CHECK(differs);
}

TEST_CASE("greedy decode follows argmax with lowest-id tie break") {
    std::vector<double> row(10, 0.0);
    row[7] = 5.0;
    TableModel always7(row);
    auto out = greedy_decode(always7, {1}, 4, /*stop=*/9);
    CHECK(out == std::vector<int32_t>{7, 7, 7, 7});

    std::vector<double> tie(10, 0.0);
    tie[3] = tie[9] = 2.5; // exact tie: lowest id wins
    TableModel tied(tie);
    auto pick = greedy_decode(tied, {0}, 1, 9);
    CHECK(pick == std::vector<int32_t>{3});

    TransformerModel m(tiny_config());
    auto d1 = m.greedy_decode({1, 2, 3}, 5, 0);
    auto d2 = m.greedy_decode({1, 2, 3}, 5, 0);
    CHECK(d1 == d2);
    CHECK_THROWS_AS((void)m.greedy_decode({}, 3, 0), std::invalid_argument);
}

TEST_CASE("greedy decode stops at the stop token") {
    std::vector<double> row(4, 0.0);
    row[2] = 1.0;
    TableModel m(row);
    auto out = greedy_decode(m, {0}, 10, /*stop=*/2);
    CHECK(out == std::vector<int32_t>{2}); // stop emitted and decoding halts
}

TEST_CASE("sample decode: determinism, greedy limit, calibrated frequencies") {
    TransformerModel m(tiny_config());
    auto s1 = m.sample_decode({1, 2}, 1.0, 6, 0, 424242);
    auto s2 = m.sample_decode({1, 2}, 1.0, 6, 0, 424242);
    CHECK(s1 == s2);
    CHECK_THROWS_AS((void)m.sample_decode({1}, 0.0, 3, 0, 1), std::invalid_argument);

    // temperature -> 0 limit equals greedy decoding
    auto greedy = m.greedy_decode({1, 2}, 6, 0);
    auto frozen = m.sample_decode({1, 2}, 1e-6, 6, 0, 7);
    CHECK(greedy == frozen);

    // logits [ln 3, 0]: p(token 0) = 3/4; 10,000 single-step draws
    std::vector<double> logits = {std::log(3.0), 0.0};
    Rng rng(99);
    int hits = 0;
    for (int i = 0; i < 10000; ++i)
        if (sample_from_logits(logits, 1.0, rng) == 0) ++hits;
    CHECK(double(hits) / 10000.0 == doctest::Approx(0.75).epsilon(0.0267)); // 0.75 +- 0.02
}

TEST_CASE("parameter groups: selector algebra on a 4-layer model") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 4;
    TransformerModel m(cfg);
    const auto& entries = m.params().entries;

    CHECK(m.param_groups({"attn"}).size() == 16); // 4 projections x 4 layers
    CHECK(m.param_groups({"gate+up"}).size() == 8);
    CHECK(m.param_groups({"down"}).size() == 4);
    CHECK(m.param_groups({"ffn"}).size() == 12);
    CHECK(m.param_groups({"embed"}).size() == 2); // token + position tables
    CHECK(m.param_groups({"head"}).size() == 1);
    CHECK(m.param_groups({"all"}).size() == entries.size());
    CHECK_THROWS_AS((void)m.param_groups({"attnn"}), std::invalid_argument);

    // attn = q u k u v u o, ffn = gate+up u down, and the unions are disjoint
    std::set<size_t> qkvo;
    for (const char* s : {"q", "k", "v", "o"}) {
        auto part = m.param_groups({s});
        CHECK(part.size() == 4);
        qkvo.insert(part.begin(), part.end());
    }
    auto attn = m.param_groups({"attn"});
    CHECK(qkvo == std::set<size_t>(attn.begin(), attn.end()));
    std::set<size_t> gud;
    for (const char* s : {"gate+up", "down"}) {
        auto part = m.param_groups({s});
        gud.insert(part.begin(), part.end());
    }
    auto ffn = m.param_groups({"ffn"});
    CHECK(gud == std::set<size_t>(ffn.begin(), ffn.end()));

    // partition: every non-norm entry reachable via exactly one atomic selector
    const std::vector<std::string> atomic = {"q", "k", "v", "o", "gate+up", "down", "embed", "head"};
    for (size_t i = 0; i < entries.size(); ++i) {
        int owners = 0;
        for (const auto& s : atomic) {
            auto sel = m.param_groups({s});
            owners += std::count(sel.begin(), sel.end(), i);
        }
        const bool is_norm = entries[i].name.find("norm") != std::string::npos;
        CHECK(owners == (is_norm ? 0 : 1)); // norms reachable only through "all"
    }

    // multi-selector requests do not double-count
    CHECK(m.param_groups({"attn", "q"}).size() == 16);
}

TEST_CASE("checkpoint round trip is bit exact") {
    TransformerModel m(tiny_config());
    const std::string path = "test_model_ckpt.bin";
    save_checkpoint(path, m);
    auto loaded = load_checkpoint(path);

    CHECK(loaded.config().n_layers == m.config().n_layers);
    CHECK(loaded.config().vocab_size == m.config().vocab_size);
    CHECK(loaded.config().seed == m.config().seed);
    REQUIRE(loaded.params().entries.size() == m.params().entries.size());
    for (size_t i = 0; i < m.params().entries.size(); ++i) {
        CHECK(loaded.params().entries[i].name == m.params().entries[i].name);
        CHECK(loaded.params().entries[i].tensor.data == m.params().entries[i].tensor.data);
    }

    // save -> load -> save produces identical bytes
    const std::string path2 = "test_model_ckpt2.bin";
    save_checkpoint(path2, loaded);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());
    CHECK(b1.substr(0, 5) == "FLAB1");
    std::remove(path.c_str());
    std::remove(path2.c_str());

    // corrupted magic is rejected
    std::ofstream bad("test_model_bad.bin", std::ios::binary);
    bad << "NOTFL" << b1.substr(5);
    bad.close();
    CHECK_THROWS_AS((void)load_checkpoint("test_model_bad.bin"), std::runtime_error);
    std::remove("test_model_bad.bin");
}

TEST_CASE("batched and single-sequence paths agree") {
    TransformerModel m(tiny_config());
    std::vector<std::vector<int32_t>> seqs = {{1, 2, 3, 4}, {5, 6}, {7, 8, 9, 1, 2}};
    auto rows = m.next_logits_batch(seqs);
    auto per_seq = m.logits_per_sequence(seqs);
    for (size_t i = 0; i < seqs.size(); ++i) {
        auto [logits, cap] = m.forward(seqs[i]);
        const int64_t last = int64_t(seqs[i].size()) - 1;
        for (int64_t v = 0; v < 11; ++v) {
            CHECK(rows[i][size_t(v)] == doctest::Approx(double(logits[last * 11 + v])).epsilon(1e-6));
            CHECK(per_seq[i][last * 11 + v] == logits[last * 11 + v]);
        }
    }
    // captures match the single-sequence forward
    auto caps = m.capture_at(seqs, 1, {1, 1, 3});
    auto [l1, c1] = m.forward(seqs[2], std::make_pair(int64_t(1), int64_t(3)));
    for (int64_t c = 0; c < 16; ++c) CHECK(caps[2][size_t(c)] == doctest::Approx(c1->vec[size_t(c)]).epsilon(1e-6));
}

TEST_SUITE_END();

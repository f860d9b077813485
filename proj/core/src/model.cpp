#include "factlab/model.hpp"

#include <algorithm>
#include <cmath>

namespace factlab {

namespace {

Tensor<float> init_matrix(Shape shape, Rng& rng, float std_dev) {
    Tensor<float> t(std::move(shape));
    for (auto& v : t.data) v = float(rng.normal(0.0, std_dev));
    return t;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace

ParamStore::ParamStore(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0x9a7a));
    const float std_dev = 0.02f;
    auto matrix = [&](std::string name, Shape shape) {
        entries.push_back({std::move(name), init_matrix(std::move(shape), rng, std_dev)});
    };
    auto norm = [&](const std::string& base) {
        Tensor<float> scale({cfg.d_model});
        std::fill(scale.data.begin(), scale.data.end(), 1.0f);
        entries.push_back({base + ".scale", std::move(scale)});
        entries.push_back({base + ".bias", Tensor<float>({cfg.d_model})});
    };

    matrix("embed.tok", {cfg.vocab_size, cfg.d_model});
    matrix("embed.pos", {cfg.max_seq_len, cfg.d_model});
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        norm(p + "norm1");
        matrix(p + "attn.q", {cfg.d_model, cfg.d_model});
        matrix(p + "attn.k", {cfg.d_model, cfg.d_model});
        matrix(p + "attn.v", {cfg.d_model, cfg.d_model});
        matrix(p + "attn.o", {cfg.d_model, cfg.d_model});
        norm(p + "norm2");
        matrix(p + "ffn.gate", {cfg.d_model, cfg.d_ffn});
        matrix(p + "ffn.up", {cfg.d_model, cfg.d_ffn});
        matrix(p + "ffn.down", {cfg.d_ffn, cfg.d_model});
    }
    norm("final_norm");
    matrix("head", {cfg.d_model, cfg.vocab_size});
}

size_t ParamStore::index_of(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name == name) return i;
    throw std::out_of_range("params: no entry named '" + name + "'");
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.tensor.numel();
    return n;
}

bool ParamStore::known_selector(const std::string& s) {
    static const std::vector<std::string> vocab = {"q",    "k",    "v",     "o",    "attn", "gate+up",
                                                   "down", "ffn",  "embed", "head", "all"};
    return std::find(vocab.begin(), vocab.end(), s) != vocab.end();
}

std::vector<size_t> ParamStore::select(const std::vector<std::string>& selectors) const {
    for (const auto& s : selectors)
        if (!known_selector(s)) throw std::invalid_argument("params: unknown group name '" + s + "'");
    auto matches = [](const std::string& sel, const std::string& name) {
        if (sel == "all") return true;
        if (sel == "q") return ends_with(name, ".attn.q");
        if (sel == "k") return ends_with(name, ".attn.k");
        if (sel == "v") return ends_with(name, ".attn.v");
        if (sel == "o") return ends_with(name, ".attn.o");
        if (sel == "attn") return name.find(".attn.") != std::string::npos;
        if (sel == "gate+up") return ends_with(name, ".ffn.gate") || ends_with(name, ".ffn.up");
        if (sel == "down") return ends_with(name, ".ffn.down");
        if (sel == "ffn") return name.find(".ffn.") != std::string::npos;
        if (sel == "embed") return name.rfind("embed.", 0) == 0;
        if (sel == "head") return name == "head";
        return false;
    };
    std::vector<size_t> out;
    for (size_t i = 0; i < entries.size(); ++i)
        for (const auto& s : selectors)
            if (matches(s, entries[i].name)) {
                out.push_back(i);
                break;
            }
    return out;
}

// ---- decode helpers over the DecoderModel interface ----

int32_t argmax_lowest_id(const std::vector<double>& logits) {
    if (logits.empty()) throw std::invalid_argument("argmax of empty logits");
    size_t best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i; // strict: ties keep the lowest id
    return static_cast<int32_t>(best);
}

int32_t sample_from_logits(const std::vector<double>& logits, double temperature, Rng& rng) {
    if (!(temperature > 0.0)) throw std::invalid_argument("sample: temperature must be > 0");
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((logits[i] - mx) / temperature);
        sum += p[i];
    }
    const double r = rng.next_double() * sum;
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (r < acc) return static_cast<int32_t>(i);
    }
    return static_cast<int32_t>(p.size() - 1);
}

std::vector<int32_t> greedy_decode(const DecoderModel& model, const std::vector<int32_t>& prompt,
                                   int64_t max_new, int32_t stop) {
    if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
    std::vector<int32_t> seq = prompt, out;
    for (int64_t i = 0; i < max_new; ++i) {
        const auto logits = model.next_logits_batch({seq});
        const int32_t tok = argmax_lowest_id(logits[0]);
        out.push_back(tok);
        if (tok == stop) break;
        seq.push_back(tok);
    }
    return out;
}

std::vector<int32_t> sample_decode(const DecoderModel& model, const std::vector<int32_t>& prompt,
                                   double temperature, int64_t max_new, int32_t stop,
                                   uint64_t seed) {
    if (prompt.empty()) throw std::invalid_argument("sample_decode: empty prompt");
    if (!(temperature > 0.0)) throw std::invalid_argument("sample_decode: temperature must be > 0");
    Rng rng(mix_seed(seed, 0x5a3d));
    std::vector<int32_t> seq = prompt, out;
    for (int64_t i = 0; i < max_new; ++i) {
        const auto logits = model.next_logits_batch({seq});
        const int32_t tok = sample_from_logits(logits[0], temperature, rng);
        out.push_back(tok);
        if (tok == stop) break;
        seq.push_back(tok);
    }
    return out;
}

// ---- TransformerModel ----

namespace {

// right-pad sequences into one [B, T] buffer; T = longest sequence
struct PaddedBatch {
    std::vector<int32_t> ids;
    std::vector<int64_t> lens;
    int64_t B = 0, T = 0;
};

PaddedBatch pad_batch(const std::vector<std::vector<int32_t>>& seqs, int32_t pad_id) {
    PaddedBatch b;
    b.B = static_cast<int64_t>(seqs.size());
    for (const auto& s : seqs) {
        if (s.empty()) throw std::invalid_argument("batch: empty sequence");
        b.T = std::max(b.T, static_cast<int64_t>(s.size()));
    }
    b.ids.assign(static_cast<size_t>(b.B * b.T), pad_id);
    b.lens.resize(static_cast<size_t>(b.B));
    for (int64_t i = 0; i < b.B; ++i) {
        const auto& s = seqs[static_cast<size_t>(i)];
        b.lens[static_cast<size_t>(i)] = static_cast<int64_t>(s.size());
        std::copy(s.begin(), s.end(), b.ids.begin() + static_cast<size_t>(i * b.T));
    }
    return b;
}

} // namespace

std::vector<std::vector<std::vector<double>>> DecoderModel::score_rows(
    const std::vector<std::vector<int32_t>>& seqs) const {
    std::vector<std::vector<int32_t>> prefixes;
    for (const auto& s : seqs)
        for (size_t len = 1; len <= s.size(); ++len)
            prefixes.emplace_back(s.begin(), s.begin() + static_cast<int64_t>(len));
    auto rows = next_logits_batch(prefixes);
    std::vector<std::vector<std::vector<double>>> out;
    size_t at = 0;
    for (const auto& s : seqs) {
        out.emplace_back(rows.begin() + static_cast<int64_t>(at),
                         rows.begin() + static_cast<int64_t>(at + s.size()));
        at += s.size();
    }
    return out;
}

std::pair<Tensor<float>, std::optional<HiddenCapture>> TransformerModel::forward(
    const std::vector<int32_t>& tokens, std::optional<std::pair<int64_t, int64_t>> capture) const {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    const int64_t T = static_cast<int64_t>(tokens.size());
    Graph<float> g;
    const int64_t cap_layer = capture ? capture->first : -1;
    auto fg = build_forward(g, cfg_, store_.as<float>(), tokens, 1, T, false, cap_layer);
    std::optional<HiddenCapture> cap;
    if (capture) {
        const int64_t pos = capture->second;
        if (pos < 0 || pos >= T) throw std::invalid_argument("forward: capture position out of range");
        const auto& hval = g.val(fg.capture);
        HiddenCapture hc;
        hc.layer = cap_layer;
        hc.position = pos;
        hc.vec.resize(static_cast<size_t>(cfg_.d_model));
        double norm2 = 0.0;
        for (int64_t c = 0; c < cfg_.d_model; ++c) {
            hc.vec[size_t(c)] = hval[pos * cfg_.d_model + c];
            norm2 += double(hc.vec[size_t(c)]) * double(hc.vec[size_t(c)]);
        }
        const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-30));
        for (auto& v : hc.vec) v = float(double(v) * inv);
        cap = std::move(hc);
    }
    return {g.val(fg.logits), std::move(cap)};
}

std::vector<std::vector<double>> TransformerModel::next_logits_batch(
    const std::vector<std::vector<int32_t>>& seqs) const {
    if (seqs.empty()) return {};
    const auto batch = pad_batch(seqs, pad_id);
    Graph<float> g;
    auto fg = build_forward(g, cfg_, store_.as<float>(), batch.ids, batch.B, batch.T, false, -1);
    const auto& logits = g.val(fg.logits);
    std::vector<std::vector<double>> out(static_cast<size_t>(batch.B));
    for (int64_t i = 0; i < batch.B; ++i) {
        const int64_t row = i * batch.T + (batch.lens[size_t(i)] - 1);
        auto& dst = out[size_t(i)];
        dst.resize(static_cast<size_t>(cfg_.vocab_size));
        for (int64_t v = 0; v < cfg_.vocab_size; ++v) dst[size_t(v)] = double(logits[row * cfg_.vocab_size + v]);
    }
    return out;
}

std::vector<Tensor<float>> TransformerModel::logits_per_sequence(
    const std::vector<std::vector<int32_t>>& seqs) const {
    if (seqs.empty()) return {};
    const auto batch = pad_batch(seqs, pad_id);
    Graph<float> g;
    auto fg = build_forward(g, cfg_, store_.as<float>(), batch.ids, batch.B, batch.T, false, -1);
    const auto& logits = g.val(fg.logits);
    std::vector<Tensor<float>> out;
    out.reserve(static_cast<size_t>(batch.B));
    for (int64_t i = 0; i < batch.B; ++i) {
        const int64_t len = batch.lens[size_t(i)];
        Tensor<float> rows({len, cfg_.vocab_size});
        std::copy(logits.ptr() + (i * batch.T) * cfg_.vocab_size,
                  logits.ptr() + (i * batch.T + len) * cfg_.vocab_size, rows.ptr());
        out.push_back(std::move(rows));
    }
    return out;
}

std::vector<std::vector<std::vector<double>>> TransformerModel::score_rows(
    const std::vector<std::vector<int32_t>>& seqs) const {
    auto per_seq = logits_per_sequence(seqs);
    std::vector<std::vector<std::vector<double>>> out(per_seq.size());
    for (size_t i = 0; i < per_seq.size(); ++i) {
        const auto& rows = per_seq[i];
        out[i].resize(static_cast<size_t>(rows.rows()));
        for (int64_t r = 0; r < rows.rows(); ++r) {
            auto& dst = out[i][size_t(r)];
            dst.resize(static_cast<size_t>(cfg_.vocab_size));
            for (int64_t v = 0; v < cfg_.vocab_size; ++v)
                dst[size_t(v)] = double(rows[r * cfg_.vocab_size + v]);
        }
    }
    return out;
}

std::vector<std::vector<float>> TransformerModel::capture_at(
    const std::vector<std::vector<int32_t>>& seqs, int64_t layer,
    const std::vector<int64_t>& positions) const {
    if (seqs.size() != positions.size())
        throw std::invalid_argument("capture_at: one position per sequence required");
    if (seqs.empty()) return {};
    const auto batch = pad_batch(seqs, pad_id);
    Graph<float> g;
    auto fg = build_forward(g, cfg_, store_.as<float>(), batch.ids, batch.B, batch.T, false, layer);
    const auto& h = g.val(fg.capture);
    std::vector<std::vector<float>> out(static_cast<size_t>(batch.B));
    for (int64_t i = 0; i < batch.B; ++i) {
        const int64_t pos = positions[size_t(i)];
        if (pos < 0 || pos >= batch.lens[size_t(i)])
            throw std::invalid_argument("capture_at: position outside sequence");
        auto& vec = out[size_t(i)];
        vec.resize(static_cast<size_t>(cfg_.d_model));
        double norm2 = 0.0;
        for (int64_t c = 0; c < cfg_.d_model; ++c) {
            vec[size_t(c)] = h[(i * batch.T + pos) * cfg_.d_model + c];
            norm2 += double(vec[size_t(c)]) * double(vec[size_t(c)]);
        }
        const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-30));
        for (auto& v : vec) v = float(double(v) * inv);
    }
    return out;
}

std::vector<int32_t> TransformerModel::greedy_decode(const std::vector<int32_t>& prompt,
                                                     int64_t max_new, int32_t stop) const {
    return factlab::greedy_decode(*this, prompt, max_new, stop);
}

std::vector<int32_t> TransformerModel::sample_decode(const std::vector<int32_t>& prompt,
                                                     double temperature, int64_t max_new,
                                                     int32_t stop, uint64_t seed) const {
    return factlab::sample_decode(*this, prompt, temperature, max_new, stop, seed);
}

} // namespace factlab

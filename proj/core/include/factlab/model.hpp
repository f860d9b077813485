#pragma once
// Tiny decoder-only transformer: pre-LN blocks, causal attention, gated FFN
// (gate/up/down so fine-grained freezing has the usual module vocabulary),
// learned absolute position embeddings, untied head.
//
// One graph builder serves training, evaluation, and decoding; evaluation
// simply builds a tape with non-grad leaves. There is no KV cache: decode
// re-runs the prefix each step, batched across sequences.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "factlab/graph.hpp"
#include "factlab/rng.hpp"
#include "factlab/tensor.hpp"

namespace factlab {

struct ModelConfig {
    int64_t n_layers = 4;   // even, >= 2, so a middle layer exists
    int64_t d_model = 128;
    int64_t n_heads = 4;
    int64_t d_ffn = 256;
    int64_t vocab_size = 0; // from the tokenizer
    int64_t max_seq_len = 64;
    uint64_t seed = 0;

    void validate() const {
        if (n_layers < 2 || n_layers % 2 != 0)
            throw std::invalid_argument("model: n_layers must be even and >= 2");
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
            throw std::invalid_argument("model: d_model must be divisible by n_heads");
        if (d_ffn <= 0 || vocab_size <= 0 || max_seq_len <= 0)
            throw std::invalid_argument("model: d_ffn, vocab_size, max_seq_len must be positive");
    }
    int64_t head_dim() const { return d_model / n_heads; }
    int64_t default_capture_layer() const { return n_layers / 2; }
};

struct ParamEntry {
    std::string name;
    Tensor<float> tensor;
};

// Parameters addressable by name; entry order is the checkpoint directory
// order. Every parameter belongs to exactly one entry, and selectors resolve
// to disjoint entry sets ("all" additionally reaches the norms).
class ParamStore {
public:
    ParamStore() = default;
    explicit ParamStore(const ModelConfig& cfg);

    std::vector<ParamEntry> entries;

    size_t index_of(const std::string& name) const;
    Tensor<float>& at(const std::string& name) { return entries[index_of(name)].tensor; }
    const Tensor<float>& at(const std::string& name) const {
        return entries[index_of(name)].tensor;
    }
    int64_t total_elements() const;

    // selector vocabulary: q k v o attn gate+up down ffn embed head all
    static bool known_selector(const std::string& s);
    std::vector<size_t> select(const std::vector<std::string>& selectors) const;

    template <typename U>
    std::vector<Tensor<U>> as() const {
        std::vector<Tensor<U>> out;
        out.reserve(entries.size());
        for (const auto& e : entries) {
            Tensor<U> t(e.tensor.shape);
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = U(e.tensor[i]);
            out.push_back(std::move(t));
        }
        return out;
    }
};

// Unit-norm hidden state of one position at one layer.
struct HiddenCapture {
    int64_t layer = 0;
    int64_t position = 0;
    std::vector<float> vec; // L2-normalized, d_model floats
};

// Builds the forward computation on an existing tape. `params` must be the
// store's tensors in directory order (any precision). ids_flat is a row-major
// [B, Tlen] batch, right-padded; padded tails never influence real positions
// because attention is causal.
template <typename U>
struct ForwardGraph {
    typename Graph<U>::Id logits = -1;  // [B*Tlen, vocab]
    typename Graph<U>::Id capture = -1; // [B*Tlen, d_model] residual stream, -1 if not requested
    std::vector<typename Graph<U>::Id> params; // leaf ids, directory order
};

template <typename U>
ForwardGraph<U> build_forward(Graph<U>& g, const ModelConfig& cfg,
                              const std::vector<Tensor<U>>& params,
                              const std::vector<int32_t>& ids_flat, int64_t B, int64_t Tlen,
                              bool params_require_grad, int64_t capture_layer = -1);

// Anything that can score next tokens; the probe and the decode helpers work
// against this so they can be exercised with hand-built table models.
class DecoderModel {
public:
    virtual ~DecoderModel() = default;
    virtual int64_t vocab_size() const = 0;
    // one row of next-token logits per input sequence
    virtual std::vector<std::vector<double>> next_logits_batch(
        const std::vector<std::vector<int32_t>>& seqs) const = 0;
    // logits at every position of every sequence ([seq][pos][vocab]); the
    // default builds each prefix through next_logits_batch
    virtual std::vector<std::vector<std::vector<double>>> score_rows(
        const std::vector<std::vector<int32_t>>& seqs) const;
};

// argmax with lowest-id tie-break
int32_t argmax_lowest_id(const std::vector<double>& logits);
// multinomial draw from softmax(logits / temperature), inverse-CDF in double
int32_t sample_from_logits(const std::vector<double>& logits, double temperature, Rng& rng);

std::vector<int32_t> greedy_decode(const DecoderModel& model, const std::vector<int32_t>& prompt,
                                   int64_t max_new, int32_t stop);
std::vector<int32_t> sample_decode(const DecoderModel& model, const std::vector<int32_t>& prompt,
                                   double temperature, int64_t max_new, int32_t stop,
                                   uint64_t seed);

class TransformerModel : public DecoderModel {
public:
    explicit TransformerModel(ModelConfig cfg) : cfg_(cfg), store_(cfg) { cfg_.validate(); }
    TransformerModel(ModelConfig cfg, ParamStore store)
        : cfg_(cfg), store_(std::move(store)) {
        cfg_.validate();
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // logits for one sequence, optionally capturing (layer, position)
    std::pair<Tensor<float>, std::optional<HiddenCapture>> forward(
        const std::vector<int32_t>& tokens,
        std::optional<std::pair<int64_t, int64_t>> capture = std::nullopt) const;

    std::vector<int32_t> greedy_decode(const std::vector<int32_t>& prompt, int64_t max_new,
                                       int32_t stop) const;
    std::vector<int32_t> sample_decode(const std::vector<int32_t>& prompt, double temperature,
                                       int64_t max_new, int32_t stop, uint64_t seed) const;

    // entry indices for a selector set; throws on unknown names
    std::vector<size_t> param_groups(const std::vector<std::string>& selectors) const {
        return store_.select(selectors);
    }

    int64_t vocab_size() const override { return cfg_.vocab_size; }
    std::vector<std::vector<double>> next_logits_batch(
        const std::vector<std::vector<int32_t>>& seqs) const override;
    std::vector<std::vector<std::vector<double>>> score_rows(
        const std::vector<std::vector<int32_t>>& seqs) const override;

    // full logits rows per sequence (teacher-forced scoring)
    std::vector<Tensor<float>> logits_per_sequence(
        const std::vector<std::vector<int32_t>>& seqs) const;

    // unit-norm hidden vectors at (layer, positions[i]) per sequence
    std::vector<std::vector<float>> capture_at(const std::vector<std::vector<int32_t>>& seqs,
                                               int64_t layer,
                                               const std::vector<int64_t>& positions) const;

    int32_t pad_id = 0; // used only to right-pad batched evaluation

private:
    ModelConfig cfg_;
    ParamStore store_;
};

// ---- template implementation ----

template <typename U>
ForwardGraph<U> build_forward(Graph<U>& g, const ModelConfig& cfg,
                              const std::vector<Tensor<U>>& params,
                              const std::vector<int32_t>& ids_flat, int64_t B, int64_t Tlen,
                              bool params_require_grad, int64_t capture_layer) {
    cfg.validate();
    if (Tlen <= 0 || B <= 0 || static_cast<int64_t>(ids_flat.size()) != B * Tlen)
        throw std::invalid_argument("forward: ids must be a [B, T] batch");
    if (Tlen > cfg.max_seq_len)
        throw std::invalid_argument("forward: sequence length " + std::to_string(Tlen) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (capture_layer != -1 && (capture_layer < 1 || capture_layer > cfg.n_layers))
        throw std::invalid_argument("forward: capture layer out of range");

    ForwardGraph<U> out;
    out.params.reserve(params.size());
    for (const auto& p : params) out.params.push_back(g.leaf(p, params_require_grad));
    size_t next = 0;
    auto take = [&]() { return out.params.at(next++); };

    const auto embed_tok = take();
    const auto embed_pos = take();

    std::vector<int32_t> pos_flat(static_cast<size_t>(B * Tlen));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < Tlen; ++t) pos_flat[size_t(b * Tlen + t)] = int32_t(t);

    auto h = g.add(g.gather_rows(embed_tok, ids_flat), g.gather_rows(embed_pos, pos_flat));

    const U inv_sqrt_dh = U(1) / std::sqrt(U(cfg.head_dim()));
    for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
        const auto n1s = take(), n1b = take();
        const auto wq = take(), wk = take(), wv = take(), wo = take();
        const auto n2s = take(), n2b = take();
        const auto wgate = take(), wup = take(), wdown = take();

        auto a = g.layer_norm(h, n1s, n1b);
        auto qh = g.split_heads(g.matmul(a, wq), B, Tlen, cfg.n_heads);
        auto kh = g.split_heads(g.matmul(a, wk), B, Tlen, cfg.n_heads);
        auto vh = g.split_heads(g.matmul(a, wv), B, Tlen, cfg.n_heads);
        auto scores = g.scale(g.bmm(qh, kh, /*transpose_b=*/true), inv_sqrt_dh);
        auto ctx = g.bmm(g.causal_softmax(scores), vh);
        auto attn_out = g.matmul(g.merge_heads(ctx, B, Tlen, cfg.n_heads), wo);
        h = g.add(h, attn_out);

        auto b2 = g.layer_norm(h, n2s, n2b);
        auto ff = g.mul(g.silu(g.matmul(b2, wgate)), g.matmul(b2, wup));
        h = g.add(h, g.matmul(ff, wdown));

        if (layer + 1 == capture_layer) out.capture = h;
    }

    const auto fns = take(), fnb = take();
    const auto head = take();
    if (next != params.size())
        throw std::invalid_argument("forward: parameter list does not match architecture");
    out.logits = g.matmul(g.layer_norm(h, fns, fnb), head);
    return out;
}

} // namespace factlab

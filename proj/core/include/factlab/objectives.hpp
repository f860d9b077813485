#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "factlab/corpus.hpp"
#include "factlab/graph.hpp"
#include "factlab/model.hpp"

namespace factlab {

enum class ObjectiveKind { SFT, SelfDistill, TopKDistill, RandKDistill, L2Snapshot };
std::string to_string(ObjectiveKind k);
ObjectiveKind objective_kind_from(const std::string& s);

struct ObjectiveConfig {
    ObjectiveKind kind = ObjectiveKind::SFT;
    double lambda = 1.0;
    double tau = 0.5;
    int64_t k = 0; // 0 resolves to max(4, round(0.005 * vocab))
    int64_t snapshot_epoch = 1;
    std::vector<std::string> freeze = {"all"};
    double lr = 5e-4;
    double momentum = 0.9;
    int64_t epochs = 20;
    int64_t batch_size = 32;
    uint64_t seed = 0;

    bool uses_snapshot() const { return kind != ObjectiveKind::SFT; }
    int64_t resolved_k(int64_t vocab) const {
        return k > 0 ? k : std::max<int64_t>(4, std::llround(0.005 * double(vocab)));
    }
    void validate(int64_t vocab) const;
};

// A right-padded [B, T] token batch with its masks.
struct Batch {
    std::vector<int32_t> ids;         // [B, T]
    std::vector<uint8_t> pad_mask;    // 1 = real token
    std::vector<uint8_t> answer_mask; // 1 = answer token (subset of pad_mask)
    int64_t B = 0, T = 0;

    void validate() const;
    int64_t rows() const { return B * T; }
};

Batch make_batch(const std::vector<const EncodedFact*>& items, int32_t pad_id = 0);

struct TeacherSnapshot {
    ParamStore params;
    int64_t epoch = 0;
};

enum class TopKMode { teacher_topk, random_k };

// k highest values, ties broken toward the lowest index
std::vector<int32_t> topk_indices(const double* v, int64_t n, int64_t k);
// k distinct indices below n from the given generator
std::vector<int32_t> randk_indices(int64_t n, int64_t k, Rng& rng);

// ---- eager reference implementations (double, graph-free) ----

// mean NLL over answer positions; token at (b, j) is scored by logits row (b, j-1)
double task_loss(const Tensor<double>& logits, const Batch& batch);
// mean over masked rows of tau^2 * KL(softmax(t/tau) || softmax(s/tau)), natural log
double distill_loss(const Tensor<double>& student, const Tensor<double>& teacher, double tau,
                    const std::vector<uint8_t>& row_mask);
// as distill_loss but with both distributions renormalized over a k-index set
// per row: the teacher's top-k, or seeded uniform draws (seed mixed per row)
double topk_distill_loss(const Tensor<double>& student, const Tensor<double>& teacher,
                         double tau, int64_t k, TopKMode mode,
                         const std::vector<uint8_t>& row_mask, uint64_t seed);
// lambda * sum of squared parameter differences
double l2_snapshot_penalty(const ParamStore& params, const TeacherSnapshot& snapshot,
                           double lambda);

// zero every gradient outside the selected groups; returns the selected entry indices
std::vector<size_t> apply_freeze(std::vector<Tensor<float>>& grads, const ParamStore& store,
                                 const std::vector<std::string>& freeze);

// ---- graph builders (same math, differentiable) ----

template <typename T>
typename Graph<T>::Id task_loss_node(Graph<T>& g, typename Graph<T>::Id logits,
                                     const Batch& batch) {
    batch.validate();
    const auto& lv = g.val(logits);
    if (lv.rows() != batch.rows())
        throw std::invalid_argument("task_loss: logits rows != batch positions");
    const int64_t R = batch.rows(), V = lv.last_dim();

    std::vector<int32_t> idx(static_cast<size_t>(R), 0);
    Tensor<T> weight({R, 1});
    int64_t n = 0;
    for (int64_t b = 0; b < batch.B; ++b)
        for (int64_t j = 0; j < batch.T; ++j)
            if (batch.answer_mask[size_t(b * batch.T + j)]) {
                if (j == 0) throw std::invalid_argument("task_loss: answer token at position 0");
                const int32_t target = batch.ids[size_t(b * batch.T + j)];
                if (target < 0 || target >= V)
                    throw std::invalid_argument("task_loss: target id out of vocab");
                const int64_t r = b * batch.T + (j - 1);
                idx[size_t(r)] = target;
                weight[r] = T(1);
                ++n;
            }
    if (n == 0) throw std::invalid_argument("task_loss: empty answer mask");

    auto lp = g.log_softmax(logits);
    auto sel = g.gather_last(lp, idx, 1);
    auto weighted = g.mul(sel, g.constant(std::move(weight)));
    return g.scale(g.reduce_sum(weighted), T(-1.0 / double(n)));
}

namespace detail {

// softmax(z/tau) over the given columns plus sum(p*ln p), all in double
inline void restricted_softmax(const double* z, const std::vector<int32_t>& cols, double tau,
                               std::vector<double>& p, double& plogp) {
    double mx = -1e300;
    for (int32_t c : cols) mx = std::max(mx, z[c] / tau);
    double Z = 0.0;
    p.resize(cols.size());
    for (size_t i = 0; i < cols.size(); ++i) {
        p[i] = std::exp(z[cols[i]] / tau - mx);
        Z += p[i];
    }
    plogp = 0.0;
    for (auto& v : p) {
        v /= Z;
        if (v > 0.0) plogp += v * std::log(v);
    }
}

} // namespace detail

template <typename T>
typename Graph<T>::Id distill_loss_node(Graph<T>& g, typename Graph<T>::Id student,
                                        const Tensor<T>& teacher, double tau,
                                        const std::vector<uint8_t>& row_mask) {
    if (!(tau > 0.0)) throw std::invalid_argument("distill: tau must be > 0");
    const auto& sv = g.val(student);
    if (!sv.same_shape(teacher)) throw std::invalid_argument("distill: shape mismatch");
    const int64_t R = sv.rows(), V = sv.last_dim();
    if (static_cast<int64_t>(row_mask.size()) != R)
        throw std::invalid_argument("distill: mask size mismatch");

    Tensor<T> P({R, V});
    double c_plogp = 0.0;
    int64_t n = 0;
    std::vector<int32_t> all(static_cast<size_t>(V));
    for (int64_t v = 0; v < V; ++v) all[size_t(v)] = static_cast<int32_t>(v);
    std::vector<double> zrow(static_cast<size_t>(V)), p;
    for (int64_t r = 0; r < R; ++r) {
        if (!row_mask[size_t(r)]) continue;
        ++n;
        for (int64_t v = 0; v < V; ++v) zrow[size_t(v)] = double(teacher[r * V + v]);
        double plogp;
        detail::restricted_softmax(zrow.data(), all, tau, p, plogp);
        c_plogp += plogp;
        for (int64_t v = 0; v < V; ++v) P[r * V + v] = T(p[size_t(v)]);
    }
    if (n == 0) throw std::invalid_argument("distill: all-false mask");

    auto q_log = g.log_softmax(g.scale(student, T(1.0 / tau)));
    auto cross = g.reduce_sum(g.mul(g.constant(std::move(P)), q_log));
    // tau^2/n * (sum p ln p - sum p ln q)
    return g.scale(g.add_const(g.scale(cross, T(-1)), T(c_plogp)), T(tau * tau / double(n)));
}

template <typename T>
typename Graph<T>::Id topk_distill_loss_node(Graph<T>& g, typename Graph<T>::Id student,
                                             const Tensor<T>& teacher, double tau, int64_t k,
                                             TopKMode mode, const std::vector<uint8_t>& row_mask,
                                             uint64_t seed) {
    if (!(tau > 0.0)) throw std::invalid_argument("distill: tau must be > 0");
    const auto& sv = g.val(student);
    if (!sv.same_shape(teacher)) throw std::invalid_argument("distill: shape mismatch");
    const int64_t R = sv.rows(), V = sv.last_dim();
    if (k < 1 || k > V) throw std::invalid_argument("topk distill: k out of range");
    if (static_cast<int64_t>(row_mask.size()) != R)
        throw std::invalid_argument("distill: mask size mismatch");

    std::vector<int32_t> idx(static_cast<size_t>(R * k));
    Tensor<T> P({R, k});
    double c_plogp = 0.0;
    int64_t n = 0;
    std::vector<double> zrow(static_cast<size_t>(V)), p;
    for (int64_t r = 0; r < R; ++r) {
        if (!row_mask[size_t(r)]) {
            for (int64_t i = 0; i < k; ++i) idx[size_t(r * k + i)] = static_cast<int32_t>(i);
            continue;
        }
        ++n;
        for (int64_t v = 0; v < V; ++v) zrow[size_t(v)] = double(teacher[r * V + v]);
        std::vector<int32_t> cols;
        if (mode == TopKMode::teacher_topk) {
            cols = topk_indices(zrow.data(), V, k);
        } else {
            Rng rng(mix_seed(seed, static_cast<uint64_t>(r)));
            cols = randk_indices(V, k, rng);
        }
        double plogp;
        detail::restricted_softmax(zrow.data(), cols, tau, p, plogp);
        c_plogp += plogp;
        for (int64_t i = 0; i < k; ++i) {
            idx[size_t(r * k + i)] = cols[size_t(i)];
            P[r * k + i] = T(p[size_t(i)]);
        }
    }
    if (n == 0) throw std::invalid_argument("distill: all-false mask");

    auto picked = g.gather_last(student, idx, k);
    auto q_log = g.log_softmax(g.scale(picked, T(1.0 / tau)));
    auto cross = g.reduce_sum(g.mul(g.constant(std::move(P)), q_log));
    return g.scale(g.add_const(g.scale(cross, T(-1)), T(c_plogp)), T(tau * tau / double(n)));
}

template <typename T>
typename Graph<T>::Id l2_penalty_node(Graph<T>& g,
                                      const std::vector<typename Graph<T>::Id>& param_leaves,
                                      const std::vector<Tensor<T>>& snapshot, double lambda) {
    if (param_leaves.size() != snapshot.size() || param_leaves.empty())
        throw std::invalid_argument("l2 penalty: parameter/snapshot mismatch");
    typename Graph<T>::Id total = -1;
    for (size_t i = 0; i < param_leaves.size(); ++i) {
        if (!g.val(param_leaves[i]).same_shape(snapshot[i]))
            throw std::invalid_argument("l2 penalty: shape mismatch at entry " +
                                        std::to_string(i));
        auto d = g.sub(param_leaves[i], g.constant(snapshot[i]));
        auto s = g.reduce_sum(g.mul(d, d));
        total = i == 0 ? s : g.add(total, s);
    }
    return g.scale(total, T(lambda));
}

// ---- training ----

struct TrainEpochStats {
    int64_t epoch = 0;
    double mean_total = 0.0; // total loss per Eq-style combination
    double mean_task = 0.0;
    double mean_reg = 0.0; // lambda-weighted distill / L2 contribution
    int64_t batches = 0;
};

// called after every epoch (and once with epoch 0 before training);
// teacher is null until the snapshot exists
using EvalHook = std::function<void(int64_t epoch, const TeacherSnapshot* teacher)>;

// Minibatch gradient descent (momentum 0.9 by default) on known+unknown QA
// sequences. The teacher snapshot is taken at the END of snapshot_epoch; the
// distill/L2 term is active only in later epochs. All randomness derives from
// the config seed.
std::vector<TrainEpochStats> train(TransformerModel& model, const World& world,
                                   const SplitSet& splits, const ObjectiveConfig& obj,
                                   const EvalHook& hook = {});

} // namespace factlab

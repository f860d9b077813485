#include "factlab/objectives.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace factlab {

std::string to_string(ObjectiveKind k) {
    switch (k) {
    case ObjectiveKind::SFT: return "sft";
    case ObjectiveKind::SelfDistill: return "self_distill";
    case ObjectiveKind::TopKDistill: return "topk_distill";
    case ObjectiveKind::RandKDistill: return "randk_distill";
    case ObjectiveKind::L2Snapshot: return "l2_snapshot";
    }
    throw std::logic_error("objective kind");
}

ObjectiveKind objective_kind_from(const std::string& s) {
    if (s == "sft") return ObjectiveKind::SFT;
    if (s == "self_distill") return ObjectiveKind::SelfDistill;
    if (s == "topk_distill") return ObjectiveKind::TopKDistill;
    if (s == "randk_distill") return ObjectiveKind::RandKDistill;
    if (s == "l2_snapshot") return ObjectiveKind::L2Snapshot;
    throw std::invalid_argument("unknown objective kind '" + s + "'");
}

void ObjectiveConfig::validate(int64_t vocab) const {
    if (vocab <= 0) throw std::invalid_argument("objective: vocab must be positive");
    if (lambda < 0.0) throw std::invalid_argument("objective: lambda must be >= 0");
    if (!(tau > 0.0)) throw std::invalid_argument("objective: tau must be > 0");
    if (k < 0 || k > vocab) throw std::invalid_argument("objective: k out of range");
    const int64_t rk = resolved_k(vocab);
    if (rk < 1 || rk > vocab) throw std::invalid_argument("objective: resolved k out of range");
    if (snapshot_epoch < 0) throw std::invalid_argument("objective: snapshot_epoch must be >= 0");
    if (epochs < 1) throw std::invalid_argument("objective: epochs must be >= 1");
    if (uses_snapshot() && snapshot_epoch >= epochs)
        throw std::invalid_argument(
            "objective: snapshot-using kinds need snapshot_epoch < epochs");
    if (!(lr > 0.0)) throw std::invalid_argument("objective: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("objective: momentum must be in [0, 1)");
    if (batch_size < 1) throw std::invalid_argument("objective: batch_size must be >= 1");
    if (freeze.empty()) throw std::invalid_argument("objective: freeze set must not be empty");
    for (const auto& f : freeze)
        if (!ParamStore::known_selector(f))
            throw std::invalid_argument("objective: unknown selector '" + f + "'");
}

void Batch::validate() const {
    if (B <= 0 || T <= 0) throw std::invalid_argument("batch: empty");
    const size_t want = static_cast<size_t>(B * T);
    if (ids.size() != want || pad_mask.size() != want || answer_mask.size() != want)
        throw std::invalid_argument("batch: mask sizes do not match [B, T]");
    for (int64_t b = 0; b < B; ++b) {
        if (!pad_mask[size_t(b * T)])
            throw std::invalid_argument("batch: sequence starts with padding");
        bool saw_pad = false, saw_answer = false;
        for (int64_t j = 0; j < T; ++j) {
            const size_t r = size_t(b * T + j);
            if (pad_mask[r] && saw_pad)
                throw std::invalid_argument("batch: padding must be a contiguous tail");
            if (!pad_mask[r]) saw_pad = true;
            if (answer_mask[r]) {
                if (!pad_mask[r]) throw std::invalid_argument("batch: answer outside pad mask");
                if (j == 0) throw std::invalid_argument("batch: answer token at position 0");
                saw_answer = true;
            }
        }
        if (!saw_answer) throw std::invalid_argument("batch: sequence without answer tokens");
    }
}

Batch make_batch(const std::vector<const EncodedFact*>& items, int32_t pad_id) {
    if (items.empty()) throw std::invalid_argument("batch: no sequences");
    Batch batch;
    batch.B = static_cast<int64_t>(items.size());
    for (const auto* it : items) {
        if (!it) throw std::invalid_argument("batch: null sequence");
        batch.T = std::max(batch.T, static_cast<int64_t>(it->tokens.size()));
    }
    const size_t total = static_cast<size_t>(batch.B * batch.T);
    batch.ids.assign(total, pad_id);
    batch.pad_mask.assign(total, 0);
    batch.answer_mask.assign(total, 0);
    for (int64_t b = 0; b < batch.B; ++b) {
        const auto& f = *items[size_t(b)];
        for (size_t j = 0; j < f.tokens.size(); ++j) {
            batch.ids[size_t(b * batch.T) + j] = f.tokens[j];
            batch.pad_mask[size_t(b * batch.T) + j] = 1;
        }
        for (int64_t j = f.answer_start; j < f.answer_end; ++j)
            batch.answer_mask[size_t(b * batch.T + j)] = 1;
    }
    batch.validate();
    return batch;
}

std::vector<int32_t> topk_indices(const double* v, int64_t n, int64_t k) {
    if (k < 1 || k > n) throw std::invalid_argument("topk: k out of range");
    std::vector<int32_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](int32_t a, int32_t b) {
                          if (v[a] != v[b]) return v[a] > v[b];
                          return a < b;
                      });
    order.resize(static_cast<size_t>(k));
    return order;
}

std::vector<int32_t> randk_indices(int64_t n, int64_t k, Rng& rng) {
    if (k < 1 || k > n) throw std::invalid_argument("randk: k out of range");
    std::vector<int32_t> pool(static_cast<size_t>(n));
    std::iota(pool.begin(), pool.end(), 0);
    for (int64_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<int64_t>(rng.next_below(uint64_t(n - i)));
        std::swap(pool[size_t(i)], pool[size_t(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
}

double task_loss(const Tensor<double>& logits, const Batch& batch) {
    batch.validate();
    if (logits.rows() != batch.rows())
        throw std::invalid_argument("task_loss: logits rows != batch positions");
    const int64_t V = logits.last_dim();
    double sum = 0.0;
    int64_t n = 0;
    for (int64_t b = 0; b < batch.B; ++b)
        for (int64_t j = 0; j < batch.T; ++j) {
            if (!batch.answer_mask[size_t(b * batch.T + j)]) continue;
            const double* row = logits.data.data() + (b * batch.T + j - 1) * V;
            const int32_t target = batch.ids[size_t(b * batch.T + j)];
            if (target < 0 || target >= V)
                throw std::invalid_argument("task_loss: target id out of vocab");
            double mx = row[0];
            for (int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
            double Z = 0.0;
            for (int64_t v = 0; v < V; ++v) Z += std::exp(row[v] - mx);
            sum += std::log(Z) + mx - row[target];
            ++n;
        }
    if (n == 0) throw std::invalid_argument("task_loss: empty answer mask");
    return sum / double(n);
}

namespace {

// shared core for full and restricted distillation KL
double kl_over(const Tensor<double>& student, const Tensor<double>& teacher, double tau,
               const std::vector<uint8_t>& row_mask,
               const std::function<std::vector<int32_t>(const double*, int64_t)>& pick_cols) {
    if (!(tau > 0.0)) throw std::invalid_argument("distill: tau must be > 0");
    if (!student.same_shape(teacher)) throw std::invalid_argument("distill: shape mismatch");
    const int64_t R = student.rows(), V = student.last_dim();
    if (static_cast<int64_t>(row_mask.size()) != R)
        throw std::invalid_argument("distill: mask size mismatch");
    double sum = 0.0;
    int64_t n = 0;
    std::vector<double> p, q;
    for (int64_t r = 0; r < R; ++r) {
        if (!row_mask[size_t(r)]) continue;
        ++n;
        const double* t = teacher.data.data() + r * V;
        const double* s = student.data.data() + r * V;
        const auto cols = pick_cols(t, r);
        double plogp, qlogq;
        detail::restricted_softmax(t, cols, tau, p, plogp);
        detail::restricted_softmax(s, cols, tau, q, qlogq);
        double kl = 0.0;
        for (size_t i = 0; i < cols.size(); ++i)
            if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
        sum += kl;
    }
    if (n == 0) throw std::invalid_argument("distill: all-false mask");
    return tau * tau * sum / double(n);
}

} // namespace

double distill_loss(const Tensor<double>& student, const Tensor<double>& teacher, double tau,
                    const std::vector<uint8_t>& row_mask) {
    const int64_t V = student.last_dim();
    std::vector<int32_t> all(static_cast<size_t>(V));
    std::iota(all.begin(), all.end(), 0);
    return kl_over(student, teacher, tau, row_mask,
                   [&](const double*, int64_t) { return all; });
}

double topk_distill_loss(const Tensor<double>& student, const Tensor<double>& teacher,
                         double tau, int64_t k, TopKMode mode,
                         const std::vector<uint8_t>& row_mask, uint64_t seed) {
    const int64_t V = student.last_dim();
    if (k < 1 || k > V) throw std::invalid_argument("topk distill: k out of range");
    return kl_over(student, teacher, tau, row_mask, [&](const double* t, int64_t r) {
        if (mode == TopKMode::teacher_topk) return topk_indices(t, V, k);
        Rng rng(mix_seed(seed, static_cast<uint64_t>(r)));
        return randk_indices(V, k, rng);
    });
}

double l2_snapshot_penalty(const ParamStore& params, const TeacherSnapshot& snapshot,
                           double lambda) {
    if (params.entries.size() != snapshot.params.entries.size())
        throw std::invalid_argument("l2 penalty: entry count mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < params.entries.size(); ++i) {
        const auto& a = params.entries[i].tensor;
        const auto& b = snapshot.params.entries[i].tensor;
        if (!a.same_shape(b)) throw std::invalid_argument("l2 penalty: shape mismatch");
        for (int64_t j = 0; j < a.numel(); ++j) {
            const double d = double(a[j]) - double(b[j]);
            sum += d * d;
        }
    }
    return lambda * sum;
}

std::vector<size_t> apply_freeze(std::vector<Tensor<float>>& grads, const ParamStore& store,
                                 const std::vector<std::string>& freeze) {
    if (grads.size() != store.entries.size())
        throw std::invalid_argument("apply_freeze: gradient/entry count mismatch");
    const auto selected = store.select(freeze);
    std::vector<uint8_t> keep(grads.size(), 0);
    for (size_t s : selected) keep[s] = 1;
    for (size_t i = 0; i < grads.size(); ++i)
        if (!keep[i]) std::fill(grads[i].data.begin(), grads[i].data.end(), 0.0f);
    return selected;
}

namespace {

std::vector<Tensor<float>> entry_tensors(const ParamStore& store) {
    std::vector<Tensor<float>> out;
    out.reserve(store.entries.size());
    for (const auto& e : store.entries) out.push_back(e.tensor);
    return out;
}

} // namespace

std::vector<TrainEpochStats> train(TransformerModel& model, const World& world,
                                   const SplitSet& splits, const ObjectiveConfig& obj,
                                   const EvalHook& hook) {
    const ModelConfig& cfg = model.config();
    obj.validate(cfg.vocab_size);

    std::vector<EncodedFact> data;
    data.reserve(splits.known.size() + splits.unknown.size());
    for (const auto& f : splits.known) data.push_back(encode_qa(f, world));
    for (const auto& f : splits.unknown) data.push_back(encode_qa(f, world));
    if (data.empty()) throw std::invalid_argument("train: known and unknown splits both empty");
    for (const auto& e : data)
        if (static_cast<int64_t>(e.tokens.size()) > cfg.max_seq_len)
            throw std::invalid_argument("train: sequence exceeds max_seq_len");

    ParamStore& store = model.params();
    std::vector<Tensor<float>> velocity;
    velocity.reserve(store.entries.size());
    for (const auto& e : store.entries) velocity.emplace_back(e.tensor.shape); // zero-init

    std::optional<TeacherSnapshot> teacher;
    std::vector<Tensor<float>> teacher_tensors; // directory-order copy for forward passes
    auto take_snapshot = [&](int64_t epoch) {
        teacher = TeacherSnapshot{store, epoch};
        teacher_tensors = entry_tensors(store);
    };
    if (obj.uses_snapshot() && obj.snapshot_epoch == 0) take_snapshot(0);
    if (hook) hook(0, teacher ? &*teacher : nullptr);

    const bool distill_kind = obj.kind == ObjectiveKind::SelfDistill ||
                              obj.kind == ObjectiveKind::TopKDistill ||
                              obj.kind == ObjectiveKind::RandKDistill;

    std::vector<TrainEpochStats> stats;
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t(0));

    for (int64_t e = 1; e <= obj.epochs; ++e) {
        Rng shuffle_rng(mix_seed(obj.seed, 0xe9, static_cast<uint64_t>(e)));
        shuffle_rng.shuffle(order);

        TrainEpochStats es;
        es.epoch = e;
        const bool reg_active = obj.uses_snapshot() && teacher && obj.lambda != 0.0;

        for (size_t start = 0; start < order.size(); start += size_t(obj.batch_size)) {
            const size_t stop = std::min(order.size(), start + size_t(obj.batch_size));
            std::vector<const EncodedFact*> items;
            items.reserve(stop - start);
            for (size_t i = start; i < stop; ++i) items.push_back(&data[order[i]]);
            const Batch batch = make_batch(items, model.pad_id);
            const int64_t bi = static_cast<int64_t>(start / size_t(obj.batch_size));

            Graph<float> g;
            auto fw = build_forward(g, cfg, entry_tensors(store), batch.ids, batch.B, batch.T,
                                    /*params_require_grad=*/true);
            const auto task = task_loss_node(g, fw.logits, batch);
            auto total = task;

            if (reg_active) {
                if (distill_kind) {
                    Graph<float> tg;
                    auto tfw = build_forward(tg, cfg, teacher_tensors, batch.ids, batch.B,
                                             batch.T, /*params_require_grad=*/false);
                    const Tensor<float> teacher_logits = tg.val(tfw.logits);
                    std::vector<uint8_t> mask(batch.pad_mask.begin(), batch.pad_mask.end());
                    Graph<float>::Id term;
                    if (obj.kind == ObjectiveKind::SelfDistill) {
                        term = distill_loss_node(g, fw.logits, teacher_logits, obj.tau, mask);
                    } else {
                        const auto mode = obj.kind == ObjectiveKind::TopKDistill
                                              ? TopKMode::teacher_topk
                                              : TopKMode::random_k;
                        const uint64_t bseed = mix_seed(obj.seed, static_cast<uint64_t>(e),
                                                        static_cast<uint64_t>(bi));
                        term = topk_distill_loss_node(g, fw.logits, teacher_logits, obj.tau,
                                                      obj.resolved_k(cfg.vocab_size), mode,
                                                      mask, bseed);
                    }
                    total = g.add(task, g.scale(term, float(obj.lambda)));
                } else { // L2Snapshot
                    auto pen = l2_penalty_node(g, fw.params, teacher_tensors, float(obj.lambda));
                    total = g.add(task, pen);
                }
            }

            g.backward(total);

            std::vector<Tensor<float>> grads;
            grads.reserve(fw.params.size());
            for (auto id : fw.params) grads.push_back(g.grad(id));
            const auto selected = apply_freeze(grads, store, obj.freeze);

            for (size_t pi : selected) {
                auto& theta = store.entries[pi].tensor;
                auto& vel = velocity[pi];
                const auto& grad = grads[pi];
                for (int64_t j = 0; j < theta.numel(); ++j) {
                    vel[j] = float(obj.momentum) * vel[j] - float(obj.lr) * grad[j];
                    theta[j] += vel[j];
                }
            }

            const double tv = double(g.val(total)[0]);
            const double kv = double(g.val(task)[0]);
            es.mean_total += tv;
            es.mean_task += kv;
            es.mean_reg += tv - kv;
            ++es.batches;
        }

        if (es.batches > 0) {
            es.mean_total /= double(es.batches);
            es.mean_task /= double(es.batches);
            es.mean_reg /= double(es.batches);
        }

        if (obj.uses_snapshot() && e == obj.snapshot_epoch) take_snapshot(e);
        stats.push_back(es);
        if (hook) hook(e, teacher ? &*teacher : nullptr);
    }
    return stats;
}

} // namespace factlab

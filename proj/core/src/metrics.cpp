#include "factlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "factlab/objectives.hpp"
#include "factlab/probe.hpp"
#include "factlab/rng.hpp"

namespace factlab {

namespace {

constexpr double kLn2 = 0.6931471805599453;

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("metrics: capture width mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("metrics: zero-norm capture vector");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

void check_rows(const std::vector<std::vector<float>>& rows, const char* who) {
    if (rows.empty()) throw std::invalid_argument(std::string(who) + ": empty capture set");
    for (const auto& r : rows)
        if (r.size() != rows.front().size())
            throw std::invalid_argument(std::string(who) + ": ragged capture rows");
}

void check_same_architecture(const TransformerModel& a, const TransformerModel& b) {
    const auto& x = a.config();
    const auto& y = b.config();
    if (x.n_layers != y.n_layers || x.d_model != y.d_model || x.n_heads != y.n_heads ||
        x.d_ffn != y.d_ffn || x.vocab_size != y.vocab_size || x.max_seq_len != y.max_seq_len)
        throw std::invalid_argument("metrics: models have different architectures");
}

// batched next-token logits with bounded batch size
std::vector<std::vector<double>> next_logits_chunked(const DecoderModel& model,
                                                     const std::vector<std::vector<int32_t>>& seqs) {
    constexpr size_t kChunk = 256;
    std::vector<std::vector<double>> out;
    out.reserve(seqs.size());
    for (size_t base = 0; base < seqs.size(); base += kChunk) {
        const size_t end = std::min(seqs.size(), base + kChunk);
        std::vector<std::vector<int32_t>> part(seqs.begin() + static_cast<long>(base),
                                               seqs.begin() + static_cast<long>(end));
        auto rows = model.next_logits_batch(part);
        for (auto& r : rows) out.push_back(std::move(r));
    }
    return out;
}

// softmax over a dense logit vector
std::vector<double> softmax_vec(std::vector<double> z) {
    const double zmax = *std::max_element(z.begin(), z.end());
    double den = 0.0;
    for (auto& v : z) {
        v = std::exp(v - zmax);
        den += v;
    }
    for (auto& v : z) v /= den;
    return z;
}

// softmax of logits restricted to `ids`
std::vector<double> restricted_probs(const std::vector<double>& logits,
                                     const std::vector<int32_t>& ids) {
    std::vector<double> z(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) z[i] = logits[static_cast<size_t>(ids[i])];
    return softmax_vec(std::move(z));
}

std::vector<double> gather(const std::vector<double>& logits, const std::vector<int32_t>& ids) {
    std::vector<double> out(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) out[i] = logits[static_cast<size_t>(ids[i])];
    return out;
}

void check_pairs(const PairSet& pairs, const char* who) {
    if (pairs.pairs.empty()) throw std::invalid_argument(std::string(who) + ": empty pair set");
    for (const auto& p : pairs.pairs) {
        if (p.u < 0 || p.u >= static_cast<int64_t>(pairs.u_prompts.size()) || p.h < 0 ||
            p.h >= static_cast<int64_t>(pairs.h_prompts.size()))
            throw std::invalid_argument(std::string(who) + ": pair index out of range");
        if (p.shared_ids.size() != p.ref_h_logits.size() ||
            static_cast<int64_t>(p.shared_ids.size()) != pairs.k)
            throw std::invalid_argument(std::string(who) + ": pair id set has wrong size");
    }
}

} // namespace

PairSet build_pair_set(const DecoderModel& pretrained, const World& world,
                       const std::vector<Fact>& unknown_facts,
                       const std::vector<Fact>& held_facts, int64_t k, int64_t max_pairs,
                       uint64_t seed) {
    if (k < 1 || k > pretrained.vocab_size())
        throw std::invalid_argument("build_pair_set: k out of range");
    if (max_pairs < 1) throw std::invalid_argument("build_pair_set: max_pairs must be >= 1");

    std::vector<std::pair<int64_t, int64_t>> cand; // (unknown idx, held idx)
    for (int64_t u = 0; u < static_cast<int64_t>(unknown_facts.size()); ++u)
        for (int64_t h = 0; h < static_cast<int64_t>(held_facts.size()); ++h)
            if (unknown_facts[static_cast<size_t>(u)].value ==
                held_facts[static_cast<size_t>(h)].value)
                cand.emplace_back(u, h);

    PairSet set;
    set.k = k;
    if (cand.empty()) return set;

    if (static_cast<int64_t>(cand.size()) > max_pairs) {
        Rng rng(mix_seed(seed, 0x9a17u));
        for (int64_t i = 0; i < max_pairs; ++i) {
            const auto j = i + static_cast<int64_t>(
                                   rng.next_below(static_cast<uint64_t>(cand.size()) -
                                                  static_cast<uint64_t>(i)));
            std::swap(cand[static_cast<size_t>(i)], cand[static_cast<size_t>(j)]);
        }
        cand.resize(static_cast<size_t>(max_pairs));
    }

    std::unordered_map<int64_t, int64_t> u_compact, h_compact;
    for (const auto& [u, h] : cand) {
        if (u_compact.emplace(u, static_cast<int64_t>(set.u_prompts.size())).second)
            set.u_prompts.push_back(encode_prompt(unknown_facts[static_cast<size_t>(u)], world));
        if (h_compact.emplace(h, static_cast<int64_t>(set.h_prompts.size())).second)
            set.h_prompts.push_back(encode_prompt(held_facts[static_cast<size_t>(h)], world));
    }

    const auto ref_rows = next_logits_chunked(pretrained, set.h_prompts);
    std::vector<std::vector<int32_t>> top_ids(ref_rows.size());
    for (size_t i = 0; i < ref_rows.size(); ++i)
        top_ids[i] = topk_indices(ref_rows[i].data(), pretrained.vocab_size(), k);

    set.pairs.reserve(cand.size());
    for (const auto& [u, h] : cand) {
        DriftPair p;
        p.u = u_compact.at(u);
        p.h = h_compact.at(h);
        p.shared_ids = top_ids[static_cast<size_t>(p.h)];
        p.ref_h_logits = gather(ref_rows[static_cast<size_t>(p.h)], p.shared_ids);
        set.pairs.push_back(std::move(p));
    }
    return set;
}

double accuracy(const DecoderModel& model, const World& world, const std::vector<Fact>& facts) {
    const auto hits = greedy_matches(model, world, facts);
    int64_t n = 0;
    for (auto h : hits) n += h;
    return double(n) / double(hits.size());
}

double delta_held(const std::vector<double>& held_accuracy_series) {
    if (held_accuracy_series.empty())
        throw std::invalid_argument("delta_held: empty accuracy series");
    const double peak = *std::max_element(held_accuracy_series.begin(),
                                          held_accuracy_series.end());
    return 100.0 * (peak - held_accuracy_series.back());
}

int64_t key_final_position(const World& world, const std::vector<int32_t>& prompt) {
    const auto suffix = world.tokenizer.atom_id(world.tmpl.q_suffix);
    if (!suffix) throw std::logic_error("key_final_position: question suffix is not an atom");
    for (size_t i = 0; i < prompt.size(); ++i) {
        if (prompt[i] == *suffix) {
            if (i == 0)
                throw std::invalid_argument("key_final_position: suffix opens the prompt");
            return static_cast<int64_t>(i) - 1;
        }
    }
    throw std::invalid_argument("key_final_position: prompt has no question suffix");
}

std::vector<std::vector<float>> capture_vectors(const TransformerModel& model, const World& world,
                                                const std::vector<Fact>& facts, int64_t layer) {
    if (facts.empty()) throw std::invalid_argument("capture_vectors: empty fact list");
    std::vector<std::vector<int32_t>> prompts(facts.size());
    std::vector<int64_t> positions(facts.size());
    for (size_t i = 0; i < facts.size(); ++i) {
        prompts[i] = encode_prompt(facts[i], world);
        positions[i] = key_final_position(world, prompts[i]);
    }
    constexpr size_t kChunk = 512;
    std::vector<std::vector<float>> out;
    out.reserve(facts.size());
    for (size_t base = 0; base < prompts.size(); base += kChunk) {
        const size_t end = std::min(prompts.size(), base + kChunk);
        std::vector<std::vector<int32_t>> seq_part(prompts.begin() + static_cast<long>(base),
                                                   prompts.begin() + static_cast<long>(end));
        std::vector<int64_t> pos_part(positions.begin() + static_cast<long>(base),
                                      positions.begin() + static_cast<long>(end));
        auto rows = model.capture_at(seq_part, layer, pos_part);
        for (auto& r : rows) out.push_back(std::move(r));
    }
    return out;
}

double representation_drift(const std::vector<std::vector<float>>& ref,
                            const std::vector<std::vector<float>>& now) {
    check_rows(ref, "representation_drift");
    check_rows(now, "representation_drift");
    if (ref.size() != now.size())
        throw std::invalid_argument("representation_drift: capture counts differ");
    double acc = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) acc += 1.0 - cosine(ref[i], now[i]);
    return acc / double(ref.size());
}

double representation_drift(const TransformerModel& ref, const TransformerModel& now,
                            const World& world, const std::vector<Fact>& held, int64_t layer) {
    check_same_architecture(ref, now);
    return representation_drift(capture_vectors(ref, world, held, layer),
                                capture_vectors(now, world, held, layer));
}

double neighborhood_shift(const std::vector<std::vector<float>>& ref,
                          const std::vector<std::vector<float>>& now) {
    check_rows(ref, "neighborhood_shift");
    check_rows(now, "neighborhood_shift");
    if (ref.size() != now.size())
        throw std::invalid_argument("neighborhood_shift: capture counts differ");
    const size_t n = ref.size();
    if (n < 2) throw std::invalid_argument("neighborhood_shift: needs at least 2 captures");
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            acc += std::abs(cosine(now[i], now[j]) - cosine(ref[i], ref[j]));
    return acc / (double(n) * double(n));
}

double neighborhood_shift(const TransformerModel& ref, const TransformerModel& now,
                          const World& world, const std::vector<Fact>& held_sample,
                          int64_t layer) {
    check_same_architecture(ref, now);
    return neighborhood_shift(capture_vectors(ref, world, held_sample, layer),
                              capture_vectors(now, world, held_sample, layer));
}

double mean_type_displacement(const std::vector<std::vector<float>>& held_ref,
                              const std::vector<std::vector<float>>& held_now,
                              const std::vector<std::vector<float>>& syn_ref,
                              const std::vector<std::vector<float>>& syn_now) {
    check_rows(held_ref, "mean_type_displacement");
    check_rows(held_now, "mean_type_displacement");
    check_rows(syn_ref, "mean_type_displacement");
    check_rows(syn_now, "mean_type_displacement");
    if (held_ref.size() != held_now.size() || syn_ref.size() != syn_now.size())
        throw std::invalid_argument("mean_type_displacement: capture counts differ");
    double acc = 0.0;
    for (size_t i = 0; i < held_ref.size(); ++i)
        for (size_t j = 0; j < syn_ref.size(); ++j)
            acc += cosine(held_now[i], syn_now[j]) - cosine(held_ref[i], syn_ref[j]);
    return acc / (double(held_ref.size()) * double(syn_ref.size()));
}

double mean_type_displacement(const TransformerModel& ref, const TransformerModel& now,
                              const World& world, const std::vector<Fact>& held,
                              const std::vector<Fact>& synthetic, int64_t layer) {
    check_same_architecture(ref, now);
    return mean_type_displacement(capture_vectors(ref, world, held, layer),
                                  capture_vectors(now, world, held, layer),
                                  capture_vectors(ref, world, synthetic, layer),
                                  capture_vectors(now, world, synthetic, layer));
}

namespace {

// 1-based ranks; ties get the mean rank of their run
std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double mean_rank = 0.5 * double(i + j) + 1.0;
        for (size_t t = i; t <= j; ++t) ranks[idx[t]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

} // namespace

std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("spearman: needs at least 2 points");
    const auto ra = average_ranks(xs);
    const auto rb = average_ranks(ys);
    const double n = double(ra.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < ra.size(); ++i) {
        const double da = ra[i] - ma;
        const double db = rb[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> rank_rho(const DecoderModel& now, const PairSet& pairs) {
    check_pairs(pairs, "rank_rho");
    if (pairs.k < 2) throw std::invalid_argument("rank_rho: needs k >= 2");
    const auto u_rows = next_logits_chunked(now, pairs.u_prompts);
    double acc = 0.0;
    int64_t defined = 0;
    for (const auto& p : pairs.pairs) {
        const auto rho = spearman(gather(u_rows[static_cast<size_t>(p.u)], p.shared_ids),
                                  p.ref_h_logits);
        if (rho) {
            acc += *rho;
            ++defined;
        }
    }
    if (defined == 0) return std::nullopt;
    return acc / double(defined);
}

double neighbor_transfer_rate(const DecoderModel& now, const PairSet& pairs, int64_t k) {
    check_pairs(pairs, "neighbor_transfer_rate");
    if (k < 1 || k > now.vocab_size())
        throw std::invalid_argument("neighbor_transfer_rate: k out of range");
    const auto u_rows = next_logits_chunked(now, pairs.u_prompts);
    const auto h_rows = next_logits_chunked(now, pairs.h_prompts);
    const int64_t V = now.vocab_size();
    std::vector<std::vector<int32_t>> u_top(u_rows.size()), h_top(h_rows.size());
    for (size_t i = 0; i < u_rows.size(); ++i) {
        u_top[i] = topk_indices(u_rows[i].data(), V, k);
        std::sort(u_top[i].begin(), u_top[i].end());
    }
    for (size_t i = 0; i < h_rows.size(); ++i) {
        h_top[i] = topk_indices(h_rows[i].data(), V, k);
        std::sort(h_top[i].begin(), h_top[i].end());
    }
    double acc = 0.0;
    std::vector<int32_t> shared;
    for (const auto& p : pairs.pairs) {
        const auto& a = u_top[static_cast<size_t>(p.u)];
        const auto& b = h_top[static_cast<size_t>(p.h)];
        shared.clear();
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                              std::back_inserter(shared));
        acc += double(shared.size()) / double(k);
    }
    return acc / double(pairs.pairs.size());
}

double jsd_scalar(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw std::invalid_argument("jsd: distribution size mismatch");
    if (p.empty()) throw std::invalid_argument("jsd: empty distributions");
    double sp = 0.0, sq = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw std::invalid_argument("jsd: negative mass");
        sp += p[i];
        sq += q[i];
    }
    if (sp <= 0.0 || sq <= 0.0) throw std::invalid_argument("jsd: zero total mass");
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double pi = p[i] / sp;
        const double qi = q[i] / sq;
        const double mi = 0.5 * (pi + qi);
        // one term per element keeps the sum bit-exactly symmetric in (p, q)
        const double tp = pi > 0.0 ? 0.5 * pi * std::log(pi / mi) : 0.0;
        const double tq = qi > 0.0 ? 0.5 * qi * std::log(qi / mi) : 0.0;
        acc += tp + tq;
    }
    return std::clamp(acc, 0.0, kLn2);
}

double distribution_jsd(const DecoderModel& now, const PairSet& pairs) {
    check_pairs(pairs, "distribution_jsd");
    const auto u_rows = next_logits_chunked(now, pairs.u_prompts);
    double acc = 0.0;
    for (const auto& p : pairs.pairs)
        acc += jsd_scalar(restricted_probs(u_rows[static_cast<size_t>(p.u)], p.shared_ids),
                          softmax_vec(p.ref_h_logits));
    return acc / double(pairs.pairs.size());
}

void DriftReport::validate() const {
    auto frac = [](const char* name, double v) {
        if (!(v >= 0.0 && v <= 1.0))
            throw std::out_of_range(std::string("drift report: ") + name + " outside [0,1]");
    };
    if (epoch < 0) throw std::out_of_range("drift report: negative epoch");
    frac("acc_known", acc_known);
    frac("acc_unknown", acc_unknown);
    frac("acc_held", acc_held);
    if (acc_maybe_known) frac("acc_maybe_known", *acc_maybe_known);
    if (acc_weakly_known) frac("acc_weakly_known", *acc_weakly_known);
    if (!(rd >= 0.0 && rd <= 2.0)) throw std::out_of_range("drift report: rd outside [0,2]");
    if (!(ns >= 0.0 && ns <= 2.0)) throw std::out_of_range("drift report: ns outside [0,2]");
    if (!(mtd >= -2.0 && mtd <= 2.0))
        throw std::out_of_range("drift report: mtd outside [-2,2]");
    if (rank_rho && !(*rank_rho >= -1.0 && *rank_rho <= 1.0))
        throw std::out_of_range("drift report: rank_rho outside [-1,1]");
    if (ntr) frac("ntr", *ntr);
    if (jsd && !(*jsd >= 0.0 && *jsd <= kLn2))
        throw std::out_of_range("drift report: jsd outside [0, ln 2]");
    if (!(delta_held_pp >= 0.0 && delta_held_pp <= 100.0))
        throw std::out_of_range("drift report: delta_held_pp outside [0,100]");
}

} // namespace factlab

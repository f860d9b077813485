#include "factlab/runner.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "factlab/checkpoint.hpp"
#include "factlab/report.hpp"
#include "factlab/version.hpp"

namespace factlab {
namespace {

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;
using clk = std::chrono::steady_clock;

double seconds_between(clk::time_point a, clk::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void put_opt(njson& j, const char* key, const std::optional<double>& v) {
    if (v)
        j[key] = *v;
    else
        j[key] = nullptr;
}

std::optional<double> opt_of(const njson& j, const char* key, const std::string& origin) {
    if (!j.contains(key)) throw std::runtime_error(origin + ": missing field '" + key + "'");
    if (j.at(key).is_null()) return std::nullopt;
    if (!j.at(key).is_number()) throw std::runtime_error(origin + ": field '" + key + "' is not a number");
    return j.at(key).get<double>();
}

double num_of(const njson& j, const char* key, const std::string& origin) {
    auto v = opt_of(j, key, origin);
    if (!v) throw std::runtime_error(origin + ": field '" + key + "' is null");
    return *v;
}

std::string run_basename(const std::string& out) {
    fs::path p = fs::path(out).lexically_normal();
    std::string name = p.filename().string();
    if (name.empty() || name == ".") name = p.parent_path().filename().string();
    return name.empty() ? std::string("run") : name;
}

// m sorted indices out of n, seeded partial shuffle
std::vector<size_t> sample_indices(size_t n, size_t m, uint64_t seed) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t(0));
    if (m >= n) return idx;
    Rng rng(seed);
    for (size_t i = 0; i < m; ++i) {
        const size_t j = i + static_cast<size_t>(rng.next_below(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& xs, const std::vector<size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (size_t i : idx) out.push_back(xs[i]);
    return out;
}

njson report_to_json(const std::string& run, const DriftReport& r) {
    njson j;
    j["run"] = run;
    j["epoch"] = r.epoch;
    j["acc_known"] = r.acc_known;
    j["acc_unknown"] = r.acc_unknown;
    j["acc_held"] = r.acc_held;
    put_opt(j, "acc_maybe_known", r.acc_maybe_known);
    put_opt(j, "acc_weakly_known", r.acc_weakly_known);
    j["rd"] = r.rd;
    j["ns"] = r.ns;
    j["mtd"] = r.mtd;
    put_opt(j, "rank_rho", r.rank_rho);
    put_opt(j, "ntr", r.ntr);
    put_opt(j, "jsd", r.jsd);
    j["delta_held_pp"] = r.delta_held_pp;
    return j;
}

njson ini_to_json(const IniFile& ini) {
    njson j = njson::object();
    for (const auto& sec : ini.sections()) {
        njson s = njson::object();
        for (const auto& [k, v] : ini.entries(sec)) s[k] = v;
        j[sec] = std::move(s);
    }
    return j;
}

njson probe_summary_json(const CorpusProbe& p, int64_t probed) {
    njson j;
    j["probed"] = probed;
    j["counts"] = njson::object();
    for (int c = 0; c < 4; ++c)
        j["counts"][to_string(static_cast<KnowledgeCategory>(c))] = p.counts[static_cast<size_t>(c)];
    j["highly_known_fraction"] = p.highly_known_fraction;
    j["retention"] = p.retention;
    return j;
}

std::vector<EncodedFact> lm_examples(const World& world, bool declaratives) {
    std::vector<EncodedFact> data;
    data.reserve(world.base_facts.size() * (declaratives ? 2 : 1));
    for (const auto& f : world.base_facts) {
        EncodedFact qa = encode_qa(f, world);
        qa.answer_start = 1; // full next-token objective
        qa.answer_end = static_cast<int64_t>(qa.tokens.size());
        data.push_back(std::move(qa));
        if (declaratives) {
            EncodedFact d;
            d.tokens = encode_declarative(f, world);
            d.answer_start = 1;
            d.answer_end = static_cast<int64_t>(d.tokens.size());
            data.push_back(std::move(d));
        }
    }
    return data;
}

// SEP-joined groups in the few-shot prompt shape: every fact appears in one
// group per epoch, grouping reshuffled each epoch
std::vector<EncodedFact> packed_examples(const std::vector<std::vector<int32_t>>& qa_rows,
                                         int64_t packing, uint64_t seed) {
    std::vector<size_t> order(qa_rows.size());
    std::iota(order.begin(), order.end(), size_t(0));
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<EncodedFact> out;
    for (size_t g = 0; g < order.size(); g += static_cast<size_t>(packing)) {
        const size_t stop = std::min(order.size(), g + static_cast<size_t>(packing));
        EncodedFact row;
        for (size_t i = g; i < stop; ++i) {
            const auto& qa = qa_rows[order[i]];
            if (i + 1 < stop) {
                row.tokens.insert(row.tokens.end(), qa.begin(), qa.end() - 1); // drop EOS
                row.tokens.push_back(Tokenizer::sep_id);
            } else {
                row.tokens.insert(row.tokens.end(), qa.begin(), qa.end());
            }
        }
        row.answer_start = 1;
        row.answer_end = static_cast<int64_t>(row.tokens.size());
        out.push_back(std::move(row));
    }
    return out;
}

std::vector<Tensor<float>> store_tensors(const ParamStore& store) {
    std::vector<Tensor<float>> out;
    out.reserve(store.entries.size());
    for (const auto& e : store.entries) out.push_back(e.tensor);
    return out;
}

// ---- per-epoch evaluation state ----

struct EvalContext {
    EvalContext(const World& w, const SplitSet& s) : world(w), splits(s) {}
    const World& world;
    const SplitSet& splits;
    int64_t layer = 0;
    std::vector<std::vector<float>> held_ref;
    std::vector<size_t> ns_idx;
    std::vector<std::vector<float>> ns_ref;
    std::vector<Fact> syn_sample;
    std::vector<std::vector<float>> syn_ref;
    PairSet pairs;
    std::vector<Fact> unknown_eval; // full unknown split or a seeded sample
    std::vector<Fact> maybe_known, weakly_known;
    std::vector<double> held_series;
};

EvalContext make_eval_context(const ExperimentConfig& cfg, const World& world,
                              const SplitSet& splits, const TransformerModel& reference,
                              const std::vector<Fact>& maybe_known,
                              const std::vector<Fact>& weakly_known, int64_t layer) {
    EvalContext ctx(world, splits);
    ctx.layer = layer;
    ctx.held_ref = capture_vectors(reference, world, splits.held, layer);

    const uint64_t ss = sample_seed(cfg);
    ctx.ns_idx = sample_indices(splits.held.size(),
                                static_cast<size_t>(cfg.metrics.ns_sample), mix_seed(ss, 0x6eu));
    ctx.ns_ref = pick(ctx.held_ref, ctx.ns_idx);

    ctx.syn_sample = pick(splits.unknown,
                          sample_indices(splits.unknown.size(),
                                         static_cast<size_t>(cfg.metrics.mtd_sample),
                                         mix_seed(ss, 0x6du)));
    ctx.syn_ref = capture_vectors(reference, world, ctx.syn_sample, layer);

    ctx.pairs = build_pair_set(reference, world, splits.unknown, splits.held, cfg.metrics.k,
                               cfg.metrics.max_pairs, pairs_seed(cfg));

    if (cfg.metrics.acc_sample > 0 &&
        splits.unknown.size() > static_cast<size_t>(cfg.metrics.acc_sample))
        ctx.unknown_eval = pick(splits.unknown,
                                sample_indices(splits.unknown.size(),
                                               static_cast<size_t>(cfg.metrics.acc_sample),
                                               mix_seed(ss, 0x61u)));
    else
        ctx.unknown_eval = splits.unknown;

    ctx.maybe_known = maybe_known;
    ctx.weakly_known = weakly_known;
    return ctx;
}

DriftReport evaluate_epoch(EvalContext& ctx, const TransformerModel& model, int64_t epoch) {
    DriftReport r;
    r.epoch = epoch;
    r.acc_known = accuracy(model, ctx.world, ctx.splits.known);
    r.acc_unknown = accuracy(model, ctx.world, ctx.unknown_eval);
    r.acc_held = accuracy(model, ctx.world, ctx.splits.held);
    if (!ctx.maybe_known.empty()) r.acc_maybe_known = accuracy(model, ctx.world, ctx.maybe_known);
    if (!ctx.weakly_known.empty())
        r.acc_weakly_known = accuracy(model, ctx.world, ctx.weakly_known);

    const auto held_now = capture_vectors(model, ctx.world, ctx.splits.held, ctx.layer);
    r.rd = representation_drift(ctx.held_ref, held_now);
    r.ns = neighborhood_shift(ctx.ns_ref, pick(held_now, ctx.ns_idx));
    const auto syn_now = capture_vectors(model, ctx.world, ctx.syn_sample, ctx.layer);
    r.mtd = mean_type_displacement(ctx.held_ref, held_now, ctx.syn_ref, syn_now);

    if (!ctx.pairs.pairs.empty()) {
        r.rank_rho = rank_rho(model, ctx.pairs);
        r.ntr = neighbor_transfer_rate(model, ctx.pairs, ctx.pairs.k);
        r.jsd = distribution_jsd(model, ctx.pairs);
    }

    ctx.held_series.push_back(r.acc_held);
    r.delta_held_pp = delta_held(ctx.held_series);
    r.validate();
    return r;
}

// ---- pipeline scaffolding shared by run / pretrain / probe ----

struct Pipeline {
    ExperimentConfig cfg; // resolved
    World world;
    SplitSet splits;
    std::optional<TransformerModel> model;
    PretrainOutcome pre;
    std::string pretrain_source;
};

Pipeline make_pipeline(const ExperimentConfig& user_cfg, bool with_splits) {
    Pipeline p;
    p.cfg = user_cfg;
    p.cfg.validate();
    if (p.cfg.run.out.empty())
        throw std::invalid_argument("run: an output directory is required ([run] out or --out)");
    if (p.cfg.run.id.empty()) p.cfg.run.id = run_basename(p.cfg.run.out);
    p.world = build_world(p.cfg.world.locations, p.cfg.world.countries, world_seed(p.cfg));
    if (with_splits)
        p.splits = make_splits(p.world, p.cfg.splits.known, p.cfg.splits.unknown,
                               p.cfg.splits.held, p.cfg.splits.key_kind, splits_seed(p.cfg),
                               p.cfg.splits.value_kind);
    p.cfg.model = resolve_model(p.cfg, p.world, p.splits);
    return p;
}

// pretrain in place, or adopt a previous pretrain directory
void acquire_model(Pipeline& p, const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
    const PretrainSpec& spec = p.cfg.pretrain;
    if (!spec.checkpoint.empty()) {
        const fs::path dir(spec.checkpoint);
        const std::string man_path = (dir / "manifest.json").string();
        njson man;
        try {
            man = njson::parse(read_text_file(man_path));
        } catch (const std::exception& e) {
            throw std::runtime_error("pretrain checkpoint: " + std::string(e.what()));
        }
        const njson& mw = man.at("world");
        if (mw.at("locations").get<int64_t>() != p.cfg.world.locations ||
            mw.at("countries").get<int64_t>() != p.cfg.world.countries ||
            mw.at("seed").get<uint64_t>() != p.world.seed)
            throw std::invalid_argument("pretrain checkpoint: world mismatch against " + man_path);

        TransformerModel m = load_checkpoint((dir / "pretrained.flab").string());
        const ModelConfig& lc = m.config();
        const ModelConfig& want = p.cfg.model;
        if (lc.n_layers != want.n_layers || lc.d_model != want.d_model ||
            lc.n_heads != want.n_heads || lc.d_ffn != want.d_ffn ||
            lc.vocab_size != want.vocab_size)
            throw std::invalid_argument("pretrain checkpoint: model architecture mismatch");
        if (lc.max_seq_len < want.max_seq_len)
            throw std::invalid_argument(
                "pretrain checkpoint: max_seq_len " + std::to_string(lc.max_seq_len) +
                " is below the " + std::to_string(want.max_seq_len) + " this run needs");
        p.cfg.model = lc;
        p.model.emplace(std::move(m));
        p.pre.epochs = man.at("pretrain").at("epochs").get<int64_t>();
        p.pre.accuracy = man.at("pretrain").at("accuracy").get<double>();
        p.pretrain_source = spec.checkpoint;
    } else {
        p.model.emplace(p.cfg.model);
        p.pre = pretrain_model(*p.model, p.world, spec, pretrain_seed(p.cfg), on_epoch);
        p.pretrain_source = "inline";
    }
}

void write_pretrain_log(const std::string& path, const PretrainOutcome& pre) {
    std::string text;
    for (const auto& e : pre.log) {
        njson j;
        j["epoch"] = e.epoch;
        j["loss"] = e.loss;
        j["accuracy"] = e.accuracy;
        text += j.dump();
        text += '\n';
    }
    write_text_file(path, text);
}

void write_splits_jsonl(const std::string& path, const SplitSet& splits, const World& world) {
    std::vector<Fact> all;
    all.reserve(splits.known.size() + splits.unknown.size() + splits.held.size());
    auto tag = [&](const std::vector<Fact>& fs, const char* name) {
        for (Fact f : fs) {
            f.split = name;
            all.push_back(std::move(f));
        }
    };
    tag(splits.known, "known");
    tag(splits.unknown, "unknown");
    tag(splits.held, "held");
    save_facts_jsonl(path, all, world.tmpl);
}

njson seeds_json(const ExperimentConfig& cfg) {
    njson j;
    j["world"] = world_seed(cfg);
    j["model"] = model_seed(cfg);
    j["pretrain"] = pretrain_seed(cfg);
    j["probe"] = probe_seed(cfg);
    j["splits"] = splits_seed(cfg);
    j["objective"] = objective_seed(cfg);
    j["pairs"] = pairs_seed(cfg);
    j["sample"] = sample_seed(cfg);
    return j;
}

njson manifest_stub(const Pipeline& p, const char* mode) {
    njson man;
    man["format"] = "factlab-run-1";
    man["version"] = version_string();
    man["run"] = p.cfg.run.id;
    man["mode"] = mode;
    man["seed"] = p.cfg.run.seed;
    man["seeds"] = seeds_json(p.cfg);
    man["config"] = ini_to_json(p.cfg.to_ini());
    njson w;
    w["locations"] = p.cfg.world.locations;
    w["countries"] = p.cfg.world.countries;
    w["seed"] = p.world.seed;
    w["vocab_size"] = p.world.tokenizer.vocab_size();
    w["base_facts"] = p.world.base_facts.size();
    man["world"] = std::move(w);
    njson m;
    m["layers"] = p.cfg.model.n_layers;
    m["d_model"] = p.cfg.model.d_model;
    m["heads"] = p.cfg.model.n_heads;
    m["ffn"] = p.cfg.model.d_ffn;
    m["vocab_size"] = p.cfg.model.vocab_size;
    m["max_seq"] = p.cfg.model.max_seq_len;
    m["seed"] = p.cfg.model.seed;
    man["model"] = std::move(m);
    njson pt;
    pt["source"] = p.pretrain_source;
    pt["epochs"] = p.pre.epochs;
    pt["accuracy"] = p.pre.accuracy;
    man["pretrain"] = std::move(pt);
    return man;
}

void write_manifest(const std::string& dir, const njson& man) {
    write_text_file(dir + "/manifest.json", man.dump(2) + "\n");
}

// base-fact sample for the retention probe, in corpus order
std::vector<Fact> probe_sample(const Pipeline& p) {
    const size_t n = p.world.base_facts.size();
    const size_t m = p.cfg.probe.sample_size == 0 ? n : static_cast<size_t>(p.cfg.probe.sample_size);
    return pick(p.world.base_facts, sample_indices(n, m, mix_seed(probe_seed(p.cfg), 0x5au)));
}

ProbeConfig probe_config(const Pipeline& p, uint64_t tag) {
    ProbeConfig pc = p.cfg.probe.probe;
    pc.seed = mix_seed(probe_seed(p.cfg), tag);
    return pc;
}

} // namespace

// ---- JSONL codecs ----

std::string metric_record_line(const MetricRecord& r) {
    return report_to_json(r.run, r.report).dump();
}

MetricRecord metric_record_from_line(const std::string& line, const std::string& origin) {
    njson j;
    try {
        j = njson::parse(line);
    } catch (const std::exception& e) {
        throw std::runtime_error(origin + ": bad JSON: " + e.what());
    }
    MetricRecord rec;
    if (!j.contains("run") || !j.at("run").is_string())
        throw std::runtime_error(origin + ": missing field 'run'");
    rec.run = j.at("run").get<std::string>();
    DriftReport& r = rec.report;
    if (!j.contains("epoch") || !j.at("epoch").is_number_integer())
        throw std::runtime_error(origin + ": missing integer field 'epoch'");
    r.epoch = j.at("epoch").get<int64_t>();
    r.acc_known = num_of(j, "acc_known", origin);
    r.acc_unknown = num_of(j, "acc_unknown", origin);
    r.acc_held = num_of(j, "acc_held", origin);
    r.acc_maybe_known = opt_of(j, "acc_maybe_known", origin);
    r.acc_weakly_known = opt_of(j, "acc_weakly_known", origin);
    r.rd = num_of(j, "rd", origin);
    r.ns = num_of(j, "ns", origin);
    r.mtd = num_of(j, "mtd", origin);
    r.rank_rho = opt_of(j, "rank_rho", origin);
    r.ntr = opt_of(j, "ntr", origin);
    r.jsd = opt_of(j, "jsd", origin);
    r.delta_held_pp = num_of(j, "delta_held_pp", origin);
    r.validate();
    return rec;
}

std::vector<MetricRecord> load_metrics_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::vector<MetricRecord> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        out.push_back(metric_record_from_line(line, path + ":" + std::to_string(lineno)));
        if (out.size() > 1 && out.back().report.epoch <= out[out.size() - 2].report.epoch)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": epochs not strictly increasing");
    }
    return out;
}

// ---- pretraining ----

PretrainOutcome pretrain_model(TransformerModel& model, const World& world,
                               const PretrainSpec& spec, uint64_t seed,
                               const std::function<void(const PretrainEpoch&)>& on_epoch) {
    const ModelConfig& cfg = model.config();
    if (spec.epochs < 1) throw std::invalid_argument("pretrain: epochs must be >= 1");
    if (spec.batch_size < 1) throw std::invalid_argument("pretrain: batch size must be >= 1");

    const std::vector<EncodedFact> data = lm_examples(world, spec.declaratives);
    std::vector<std::vector<int32_t>> qa_rows;
    if (spec.packing >= 2) {
        qa_rows.reserve(world.base_facts.size());
        for (const auto& f : world.base_facts) qa_rows.push_back(encode_qa(f, world).tokens);
    }
    const auto check_len = [&](const std::vector<EncodedFact>& rows) {
        for (const auto& e : rows)
            if (static_cast<int64_t>(e.tokens.size()) > cfg.max_seq_len)
                throw std::invalid_argument("pretrain: sequence exceeds max_seq_len");
    };
    check_len(data);

    ParamStore& store = model.params();
    std::vector<Tensor<float>> velocity;
    velocity.reserve(store.entries.size());
    for (const auto& e : store.entries) velocity.emplace_back(e.tensor.shape);

    PretrainOutcome out;
    for (int64_t e = 1; e <= spec.epochs; ++e) {
        std::vector<EncodedFact> packed;
        if (spec.packing >= 2) {
            packed = packed_examples(qa_rows, spec.packing,
                                     mix_seed(seed, 0xcau, static_cast<uint64_t>(e)));
            check_len(packed);
        }
        std::vector<const EncodedFact*> epoch_rows;
        epoch_rows.reserve(data.size() + packed.size());
        for (const auto& r : data) epoch_rows.push_back(&r);
        for (const auto& r : packed) epoch_rows.push_back(&r);
        Rng shuffle_rng(mix_seed(seed, 0xb0u, static_cast<uint64_t>(e)));
        shuffle_rng.shuffle(epoch_rows);

        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < epoch_rows.size();
             start += static_cast<size_t>(spec.batch_size)) {
            const size_t stop =
                std::min(epoch_rows.size(), start + static_cast<size_t>(spec.batch_size));
            std::vector<const EncodedFact*> items(epoch_rows.begin() + start,
                                                  epoch_rows.begin() + stop);
            const Batch batch = make_batch(items, model.pad_id);

            Graph<float> g;
            auto fw = build_forward(g, cfg, store_tensors(store), batch.ids, batch.B, batch.T,
                                    /*params_require_grad=*/true);
            const auto loss = task_loss_node(g, fw.logits, batch);
            g.backward(loss);

            for (size_t pi = 0; pi < fw.params.size(); ++pi) {
                auto& theta = store.entries[pi].tensor;
                auto& vel = velocity[pi];
                const auto& grad = g.grad(fw.params[pi]);
                for (int64_t j = 0; j < theta.numel(); ++j) {
                    vel[j] = float(spec.momentum) * vel[j] - float(spec.lr) * grad[j];
                    theta[j] += vel[j];
                }
            }
            loss_sum += double(g.val(loss)[0]);
            ++batches;
        }

        const auto hits = greedy_matches(model, world, world.base_facts);
        int64_t h = 0;
        for (uint8_t v : hits) h += v;
        PretrainEpoch pe{e, loss_sum / double(batches), double(h) / double(hits.size())};
        out.log.push_back(pe);
        out.epochs = e;
        out.accuracy = pe.accuracy;
        if (on_epoch) on_epoch(pe);
        if (pe.accuracy >= spec.target_accuracy) return out;
    }
    throw std::runtime_error("pretrain: accuracy " + format_double(out.accuracy) +
                             " below target " + format_double(spec.target_accuracy) + " after " +
                             std::to_string(spec.epochs) + " epochs");
}

// ---- model resolution ----

ModelConfig resolve_model(const ExperimentConfig& cfg, const World& world,
                          const SplitSet& splits) {
    ModelConfig mc = cfg.model;
    mc.seed = model_seed(cfg);

    const int64_t vocab = world.tokenizer.vocab_size();
    if (mc.vocab_size == 0)
        mc.vocab_size = vocab;
    else if (mc.vocab_size != vocab)
        throw std::invalid_argument("model: vocab_size " + std::to_string(mc.vocab_size) +
                                    " does not match the world's " + std::to_string(vocab));

    // longest sequence any phase can build: training rows, decode extensions
    // (answer + 4), and few-shot probe prompts; novel-key allowance comes from
    // a worst-case uuid/uuid fact so pretrained models stay reusable across
    // split kinds
    int64_t base_qa = 0, base_prompt = 0, base_ans = 0, decl_len = 0, qa_any = 0;
    for (const auto& f : world.base_facts) {
        const EncodedFact qa = encode_qa(f, world);
        const auto qa_len = static_cast<int64_t>(qa.tokens.size());
        base_qa = std::max(base_qa, qa_len);
        base_prompt = std::max(base_prompt, qa.answer_start);
        base_ans = std::max(base_ans, qa.answer_end - qa.answer_start);
        decl_len = std::max(decl_len,
                            static_cast<int64_t>(encode_declarative(f, world).size()));
    }
    qa_any = base_qa;
    for (const auto* part : {&splits.known, &splits.unknown, &splits.held})
        for (const auto& f : *part)
            qa_any = std::max(qa_any, static_cast<int64_t>(encode_qa(f, world).tokens.size()));
    Fact widest;
    widest.key = "Loc_0123abcd";
    widest.value = "Loc_4567ef89";
    widest.key_kind = NameKind::uuid;
    widest.value_kind = NameKind::uuid;
    qa_any = std::max(qa_any, static_cast<int64_t>(encode_qa(widest, world).tokens.size()));

    const int64_t probe_len = cfg.probe.probe.n_shots * base_qa + base_prompt + base_ans + 4;
    const int64_t packed_len = cfg.pretrain.packing * base_qa;
    const int64_t required = std::max({decl_len, qa_any + 4, probe_len, packed_len});
    if (mc.max_seq_len == 0)
        mc.max_seq_len = ((required + 8 + 7) / 8) * 8;
    else if (mc.max_seq_len < required)
        throw std::invalid_argument("model: max_seq " + std::to_string(mc.max_seq_len) +
                                    " is below the required " + std::to_string(required));
    mc.validate();
    return mc;
}

// ---- pipelines ----

RunResult run_experiment(const ExperimentConfig& user_cfg, const RunHooks& hooks) {
    Pipeline p = make_pipeline(user_cfg, /*with_splits=*/true);
    const std::string dir = p.cfg.run.out;
    fs::create_directories(dir);
    acquire_model(p, hooks.on_pretrain_epoch);

    // knowledge probes: base-fact retention sample + known-split categories
    const std::vector<Fact> base_sample = probe_sample(p);
    const CorpusProbe base_probe =
        classify_corpus(*p.model, p.world, base_sample, probe_config(p, 0x5bu));
    const CorpusProbe known_probe =
        classify_corpus(*p.model, p.world, p.splits.known, probe_config(p, 0x6bu));
    std::vector<Fact> maybe_known, weakly_known;
    for (size_t i = 0; i < known_probe.results.size(); ++i) {
        if (known_probe.results[i].category == KnowledgeCategory::MaybeKnown)
            maybe_known.push_back(p.splits.known[i]);
        if (known_probe.results[i].category == KnowledgeCategory::WeaklyKnown)
            weakly_known.push_back(p.splits.known[i]);
    }

    // fixed artifacts before training starts
    write_text_file(dir + "/config.ini", p.cfg.to_ini().render());
    write_splits_jsonl(dir + "/splits.jsonl", p.splits, p.world);
    save_probe_jsonl(dir + "/probe.jsonl", base_probe.results);
    save_probe_jsonl(dir + "/probe_known.jsonl", known_probe.results);
    if (p.pretrain_source == "inline") {
        save_checkpoint(dir + "/pretrained.flab", *p.model);
        write_pretrain_log(dir + "/pretrain_log.jsonl", p.pre);
    }

    const int64_t layer = p.cfg.metrics.capture_layer == -1
                              ? p.cfg.model.default_capture_layer()
                              : p.cfg.metrics.capture_layer;
    if (layer < 1 || layer > p.cfg.model.n_layers)
        throw std::invalid_argument("metrics: capture_layer out of range");

    const TransformerModel reference(p.model->config(), p.model->params());
    EvalContext ctx =
        make_eval_context(p.cfg, p.world, p.splits, reference, maybe_known, weakly_known, layer);

    SplitSet train_view;
    if (p.cfg.splits.train_on != TrainOn::unknown) train_view.known = p.splits.known;
    if (p.cfg.splits.train_on != TrainOn::known) train_view.unknown = p.splits.unknown;
    train_view.held = p.splits.held;

    ObjectiveConfig obj = p.cfg.objective;
    obj.seed = objective_seed(p.cfg);

    std::ofstream metrics_out(dir + "/metrics.jsonl", std::ios::binary);
    std::ofstream timings_out(dir + "/timings.jsonl", std::ios::binary);
    if (!metrics_out || !timings_out)
        throw std::runtime_error("cannot open metric streams under " + dir);

    RunResult res;
    res.dir = dir;
    res.base_probe = base_probe;
    res.known_probe = known_probe;
    res.pretrain = p.pre;
    res.pretrain_source = p.pretrain_source;

    clk::time_point t_prev = clk::now();
    const auto hook = [&](int64_t epoch, const TeacherSnapshot*) {
        MetricRecord rec;
        rec.run = p.cfg.run.id;
        rec.report = evaluate_epoch(ctx, *p.model, epoch);
        const clk::time_point t_now = clk::now();
        rec.wall_seconds = seconds_between(t_prev, t_now);
        t_prev = t_now;
        metrics_out << metric_record_line(rec) << '\n';
        metrics_out.flush();
        njson t;
        t["run"] = rec.run;
        t["epoch"] = epoch;
        t["wall_seconds"] = rec.wall_seconds;
        timings_out << t.dump() << '\n';
        timings_out.flush();
        if (hooks.on_record) hooks.on_record(rec);
        res.records.push_back(std::move(rec));
    };
    res.losses = train(*p.model, p.world, train_view, obj, hook);

    metrics_out.close();
    timings_out.close();
    if (!metrics_out || !timings_out) throw std::runtime_error("metric stream write failed");

    std::string loss_text;
    for (const auto& s : res.losses) {
        njson j;
        j["run"] = p.cfg.run.id;
        j["epoch"] = s.epoch;
        j["total"] = s.mean_total;
        j["task"] = s.mean_task;
        j["reg"] = s.mean_reg;
        j["batches"] = s.batches;
        loss_text += j.dump();
        loss_text += '\n';
    }
    write_text_file(dir + "/losses.jsonl", loss_text);
    save_checkpoint(dir + "/final.flab", *p.model);

    njson man = manifest_stub(p, "run");
    man["probe"] = probe_summary_json(base_probe, static_cast<int64_t>(base_sample.size()));
    man["known_probe"] =
        probe_summary_json(known_probe, static_cast<int64_t>(p.splits.known.size()));
    njson sp;
    sp["known"] = p.splits.known.size();
    sp["unknown"] = p.splits.unknown.size();
    sp["held"] = p.splits.held.size();
    sp["key_kind"] = to_string(p.cfg.splits.key_kind);
    sp["value_kind"] = to_string(p.cfg.splits.value_kind);
    sp["train_on"] = to_string(p.cfg.splits.train_on);
    man["splits"] = std::move(sp);
    njson pj;
    pj["count"] = ctx.pairs.pairs.size();
    pj["k"] = ctx.pairs.k;
    man["pairs"] = std::move(pj);
    man["capture_layer"] = layer;
    man["records"] = res.records.size();
    man["final"] = report_to_json(p.cfg.run.id, res.records.back().report);
    write_manifest(dir, man);

    res.cfg = p.cfg;
    return res;
}

RunResult run_pretrain(const ExperimentConfig& user_cfg, const RunHooks& hooks) {
    Pipeline p = make_pipeline(user_cfg, /*with_splits=*/false);
    const std::string dir = p.cfg.run.out;
    fs::create_directories(dir);
    acquire_model(p, hooks.on_pretrain_epoch);

    const std::vector<Fact> base_sample = probe_sample(p);
    const CorpusProbe base_probe =
        classify_corpus(*p.model, p.world, base_sample, probe_config(p, 0x5bu));

    write_text_file(dir + "/config.ini", p.cfg.to_ini().render());
    save_checkpoint(dir + "/pretrained.flab", *p.model);
    if (p.pretrain_source == "inline")
        write_pretrain_log(dir + "/pretrain_log.jsonl", p.pre);
    save_probe_jsonl(dir + "/probe.jsonl", base_probe.results);

    njson man = manifest_stub(p, "pretrain");
    man["probe"] = probe_summary_json(base_probe, static_cast<int64_t>(base_sample.size()));
    write_manifest(dir, man);

    RunResult res;
    res.dir = dir;
    res.cfg = p.cfg;
    res.base_probe = base_probe;
    res.pretrain = p.pre;
    res.pretrain_source = p.pretrain_source;
    return res;
}

World run_gen_world(const ExperimentConfig& user_cfg) {
    ExperimentConfig cfg = user_cfg;
    cfg.validate();
    if (cfg.run.out.empty())
        throw std::invalid_argument("gen-world: an output directory is required");
    if (cfg.run.id.empty()) cfg.run.id = run_basename(cfg.run.out);
    fs::create_directories(cfg.run.out);
    const World world = build_world(cfg.world.locations, cfg.world.countries, world_seed(cfg));

    save_facts_jsonl(cfg.run.out + "/facts.jsonl", world.base_facts, world.tmpl);
    write_text_file(cfg.run.out + "/config.ini", cfg.to_ini().render());

    njson j;
    j["format"] = "factlab-world-1";
    j["version"] = version_string();
    j["seed"] = world.seed;
    j["locations"] = cfg.world.locations;
    j["countries"] = world.countries;
    j["vocab_size"] = world.tokenizer.vocab_size();
    njson t;
    t["relation"] = world.tmpl.relation;
    t["q_lead"] = world.tmpl.q_lead;
    t["q_prefix"] = world.tmpl.q_prefix;
    t["q_suffix"] = world.tmpl.q_suffix;
    t["answer_lead"] = world.tmpl.answer_lead;
    t["decl_mid"] = world.tmpl.decl_mid;
    t["decl_end"] = world.tmpl.decl_end;
    j["template"] = std::move(t);
    write_text_file(cfg.run.out + "/world.json", j.dump(2) + "\n");
    return world;
}

RunResult run_probe(const ExperimentConfig& user_cfg) {
    if (user_cfg.pretrain.checkpoint.empty())
        throw std::invalid_argument("probe: [pretrain] checkpoint must name a pretrain directory");
    Pipeline p = make_pipeline(user_cfg, /*with_splits=*/false);
    const std::string dir = p.cfg.run.out;
    fs::create_directories(dir);
    acquire_model(p);

    const std::vector<Fact> base_sample = probe_sample(p);
    const CorpusProbe base_probe =
        classify_corpus(*p.model, p.world, base_sample, probe_config(p, 0x5bu));

    write_text_file(dir + "/config.ini", p.cfg.to_ini().render());
    save_probe_jsonl(dir + "/probe.jsonl", base_probe.results);
    njson man = manifest_stub(p, "probe");
    man["probe"] = probe_summary_json(base_probe, static_cast<int64_t>(base_sample.size()));
    write_manifest(dir, man);

    RunResult res;
    res.dir = dir;
    res.cfg = p.cfg;
    res.base_probe = base_probe;
    res.pretrain = p.pre;
    res.pretrain_source = p.pretrain_source;
    return res;
}

// ---- sweeps ----

namespace {

std::vector<std::string> split_values(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == '|') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    for (auto& v : out) {
        const auto b = v.find_first_not_of(" \t");
        const auto e = v.find_last_not_of(" \t");
        v = b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    }
    return out;
}

std::string slug_of(const std::string& s) {
    std::string out;
    for (char c : s)
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_')
                   ? c
                   : '+';
    return out;
}

} // namespace

std::vector<SweepPoint> run_sweep(const IniFile& base, const std::string& out,
                                  std::optional<uint64_t> seed_override,
                                  const RunHooks& hooks) {
    if (out.empty()) throw std::invalid_argument("sweep: an output directory is required");
    struct Axis {
        std::string section, key, label;
        std::vector<std::string> values;
    };
    std::vector<Axis> axes;
    for (const auto& [k, v] : base.entries("sweep")) {
        const auto dot = k.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == k.size())
            throw std::invalid_argument("sweep: axis '" + k + "' must be section.key");
        Axis ax{k.substr(0, dot), k.substr(dot + 1), k, split_values(v)};
        for (const auto& val : ax.values)
            if (val.empty())
                throw std::invalid_argument("sweep: axis '" + k + "' has an empty value");
        axes.push_back(std::move(ax));
    }
    if (axes.empty())
        throw std::invalid_argument("sweep: a [sweep] section with at least one axis is required");

    // shorter slugs when key names don't collide across axes
    for (auto& ax : axes) {
        bool clash = false;
        for (const auto& other : axes)
            if (&other != &ax && other.key == ax.key) clash = true;
        if (!clash) ax.label = ax.key;
    }

    IniFile stem = base;
    for (const auto& ax : axes) stem.erase("sweep", ax.section + "." + ax.key);
    if (seed_override) stem.set("run", "seed", std::to_string(*seed_override));

    size_t total = 1;
    for (const auto& ax : axes) total *= ax.values.size();

    std::vector<SweepPoint> points;
    for (size_t n = 0; n < total; ++n) {
        // odometer order: the last axis varies fastest
        std::vector<size_t> at(axes.size());
        size_t rem = n;
        for (size_t a = axes.size(); a-- > 0;) {
            at[a] = rem % axes[a].values.size();
            rem /= axes[a].values.size();
        }
        IniFile point = stem;
        SweepPoint sp;
        std::string slug;
        for (size_t a = 0; a < axes.size(); ++a) {
            const std::string& v = axes[a].values[at[a]];
            point.set(axes[a].section, axes[a].key, v);
            sp.assignment.emplace_back(axes[a].section + "." + axes[a].key, v);
            if (!slug.empty()) slug += "_";
            slug += slug_of(axes[a].label) + "-" + slug_of(v);
        }
        sp.id = slug;
        sp.dir = (fs::path(out) / slug).string();
        try {
            point.set("run", "out", sp.dir);
            point.set("run", "id", slug);
            const ExperimentConfig cfg = experiment_config_from(point);
            const RunResult r = run_experiment(cfg, hooks);
            sp.final_report = r.records.back().report;
        } catch (const std::exception& e) {
            sp.error = e.what();
        }
        points.push_back(std::move(sp));
    }

    fs::create_directories(out);
    std::vector<std::string> header{"run"};
    for (const auto& ax : axes) header.push_back(ax.section + "." + ax.key);
    header.emplace_back("status");
    header.emplace_back("error");
    for (const auto& m : metric_names()) header.push_back("final_" + m);
    std::string csv = csv_record(header);
    for (const auto& sp : points) {
        std::vector<std::string> row{sp.id};
        for (const auto& [_, v] : sp.assignment) row.push_back(v);
        row.emplace_back(sp.error.empty() ? "ok" : "failed");
        row.push_back(sp.error);
        for (const auto& m : metric_names()) {
            if (!sp.error.empty()) {
                row.emplace_back();
                continue;
            }
            const auto v = metric_value(sp.final_report, m);
            row.push_back(v ? format_double(*v) : std::string());
        }
        csv += csv_record(row);
    }
    write_text_file((fs::path(out) / "summary.csv").string(), csv);
    return points;
}

} // namespace factlab

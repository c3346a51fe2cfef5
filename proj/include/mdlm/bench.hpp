#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/data.hpp"
#include "mdlm/error.hpp"
#include "mdlm/likelihood.hpp"
#include "mdlm/model.hpp"
#include "mdlm/sampler.hpp"
#include "mdlm/trainer.hpp"

namespace mdlm {

// ---------------------------------------------------------------- report ----

struct BenchRow {
    std::string condition;
    std::string metric;
    double value = 0.0;
    double stderr_ = std::numeric_limits<double>::quiet_NaN(); // NaN: not an average
    bool timing = false; // wall-clock derived, excluded from reproducibility checks
};

inline std::string format_number(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

struct BenchReport {
    std::string name;
    nlohmann::json config = nlohmann::json::object();
    std::vector<std::uint64_t> seeds;
    std::vector<BenchRow> rows;

    void add(std::string condition, std::string metric, double value,
             double stderr_ = std::numeric_limits<double>::quiet_NaN(), bool timing = false) {
        rows.push_back({std::move(condition), std::move(metric), value, stderr_, timing});
    }

    const BenchRow* find(const std::string& condition, const std::string& metric) const {
        for (const BenchRow& r : rows) {
            if (r.condition == condition && r.metric == metric) {
                return &r;
            }
        }
        return nullptr;
    }

    double value(const std::string& condition, const std::string& metric) const {
        const BenchRow* r = find(condition, metric);
        if (r == nullptr) {
            throw Error("report '" + name + "' has no row (" + condition + ", " + metric + ")");
        }
        return r->value;
    }

    void write_tsv(std::ostream& os, bool include_timing = true) const {
        os << "condition\tmetric\tvalue\tstderr\ttiming\n";
        for (const BenchRow& r : rows) {
            if (r.timing && !include_timing) {
                continue;
            }
            os << r.condition << '\t' << r.metric << '\t' << format_number(r.value) << '\t'
               << format_number(r.stderr_) << '\t' << (r.timing ? 1 : 0) << '\n';
        }
    }

    // First line is a meta record (benchmark, config, seeds); then one record per row.
    void write_jsonl(std::ostream& os, bool include_timing = true) const {
        os << nlohmann::json{{"benchmark", name}, {"config", config}, {"seeds", seeds}}.dump() << '\n';
        for (const BenchRow& r : rows) {
            if (r.timing && !include_timing) {
                continue;
            }
            nlohmann::json j{{"condition", r.condition}, {"metric", r.metric}, {"value", r.value},
                             {"timing", r.timing}};
            j["stderr"] = std::isnan(r.stderr_) ? nlohmann::json(nullptr) : nlohmann::json(r.stderr_);
            os << j.dump() << '\n';
        }
    }

    std::string deterministic_text() const {
        std::ostringstream os;
        write_tsv(os, false);
        write_jsonl(os, false);
        return os.str();
    }

    // Writes <dir>/<name>.tsv and <dir>/<name>.jsonl.
    void save(const std::string& dir) const {
        for (const char* ext : {".tsv", ".jsonl"}) {
            const std::string path = dir + "/" + name + ext;
            std::ofstream f(path, std::ios::binary | std::ios::trunc);
            if (!f) {
                throw Error("cannot write report '" + path + "'");
            }
            if (std::string(ext) == ".tsv") {
                write_tsv(f);
            } else {
                write_jsonl(f);
            }
            if (!f) {
                throw Error("failed writing report '" + path + "'");
            }
        }
    }
};

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
    MeanStderr r;
    if (xs.empty()) {
        return r;
    }
    for (double x : xs) {
        r.mean += x;
    }
    r.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) {
            ss += (x - r.mean) * (x - r.mean);
        }
        r.stderr_ = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
    }
    return r;
}

// Adds one row per seed plus a mean row carrying the standard error.
inline void add_seeded(BenchReport& rep, const std::string& condition, const std::string& metric,
                       const std::vector<std::uint64_t>& seeds, const std::vector<double>& values) {
    for (std::size_t k = 0; k < seeds.size(); ++k) {
        rep.add(condition + "/seed=" + std::to_string(seeds[k]), metric, values[k]);
    }
    const MeanStderr ms = mean_stderr(values);
    rep.add(condition, metric + "_mean", ms.mean, ms.stderr_);
}

// ------------------------------------------------------------- helpers ----

struct LoadedModel {
    Checkpoint checkpoint;
    Vocab vocab;

    TransformerPredictor predictor() const { return {checkpoint.config, checkpoint.params}; }
    std::size_t trained_iterations() const { return checkpoint.meta.value("iteration", std::size_t{0}); }
};

inline Vocab vocab_from_meta(const nlohmann::json& meta) {
    if (!meta.contains("vocab")) {
        throw FormatError("checkpoint carries no vocabulary");
    }
    return Vocab::from_text(meta.at("vocab").get<std::string>());
}

inline LoadedModel load_model(const std::string& path) {
    Checkpoint ck = load_model_checkpoint(path);
    Vocab v = vocab_from_meta(ck.meta);
    if (v.size() != ck.config.vocab_size || v.mask_id() != ck.config.mask_id || v.eos_id() != ck.config.eos_id) {
        throw FormatError("checkpoint vocabulary disagrees with its model config");
    }
    return {std::move(ck), std::move(v)};
}

inline void require_trained(const LoadedModel& m, const char* what) {
    if (m.trained_iterations() == 0) {
        throw PreconditionError(std::string(what) + " model is untrained (0 iterations)");
    }
}

// Item i is sampled with substream i of `seed`.
template <MaskPredictor P>
SampleResult sample_item(const P& pred, const Vocab& v, const std::string& prompt, const SamplerConfig& sc,
                         std::uint64_t seed, std::size_t i) {
    Rng rng = Rng::substream(seed, i);
    return generate(pred, v.encode(prompt), sc, rng);
}

template <MaskPredictor P>
double exact_match(const P& pred, const Vocab& v, const std::vector<TextPair>& items, const SamplerConfig& sc,
                   std::uint64_t seed) {
    if (items.empty()) {
        return 0.0;
    }
    std::size_t ok = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const SampleResult r = sample_item(pred, v, items[i].prompt, sc, seed, i);
        ok += v.decode(r.tokens) == items[i].response ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(items.size());
}

// ------------------------------------------------------------ reversal ----

inline TokenSeq reversal_infill_template(const Vocab& v, const ReversalProbe& probe) {
    TokenSeq t(utf8_decode(probe.answer).size(), v.mask_id());
    const TokenSeq tail = v.encode(std::string(1, kRelationChar) + probe.cue);
    t.insert(t.end(), tail.begin(), tail.end());
    t.push_back(v.eos_id());
    return t;
}

struct ReversalScores {
    double forward = 0.0;
    double reversal = 0.0;
};

// Masked model: forward probes complete "A>" by diffusion; reversal probes
// infill the masked left side of "?>B<eos>". Causal model: "A>" and the
// reverse query "B<", both decoded left to right.
inline ReversalScores score_reversal(const LoadedModel& m, const ReversalData& d, std::uint64_t seed) {
    const TransformerPredictor pred = m.predictor();
    const Vocab& v = m.vocab;
    ReversalScores s;
    if (d.forward.empty()) {
        return s;
    }
    std::size_t fw = 0, rv = 0;
    for (std::size_t k = 0; k < d.forward.size(); ++k) {
        const ReversalProbe& f = d.forward[k];
        const ReversalProbe& r = d.reversal[k];
        const std::size_t fl = utf8_decode(f.answer).size() + 1;
        const std::size_t rl = utf8_decode(r.answer).size();
        Rng rng = Rng::substream(seed, k);
        if (pred.causal()) {
            fw += v.decode(generate_autoregressive(pred, v.encode(f.cue + kRelationChar), fl, rng).tokens) == f.answer;
            rv += v.decode(generate_autoregressive(pred, v.encode(r.cue + kReverseRelationChar), rl + 1, rng).tokens) ==
                  r.answer;
        } else {
            SamplerConfig sc;
            sc.gen_length = fl;
            sc.steps = fl;
            fw += v.decode(generate_diffusion(pred, v.encode(f.cue + kRelationChar), sc, rng).tokens) == f.answer;
            sc.steps = rl;
            rv += v.decode(generate_infill(pred, reversal_infill_template(v, r), sc, rng).raw) == r.answer;
        }
    }
    s.forward = static_cast<double>(fw) / static_cast<double>(d.forward.size());
    s.reversal = static_cast<double>(rv) / static_cast<double>(d.forward.size());
    return s;
}

inline BenchReport bench_reversal(const LoadedModel& mdm, const LoadedModel& ar, const ReversalData& d,
                                  std::uint64_t seed) {
    BenchReport rep;
    rep.name = "reversal";
    rep.seeds = {seed};
    rep.config = {{"probes", d.forward.size()}};
    if (d.forward.empty()) {
        return rep;
    }
    require_trained(mdm, "masked diffusion");
    require_trained(ar, "autoregressive");
    if (mdm.predictor().causal() || !ar.predictor().causal()) {
        throw ConfigError("reversal bench needs a bidirectional MDM and a causal AR model");
    }
    for (const auto& [label, model] : {std::pair<const char*, const LoadedModel*>{"mdm", &mdm}, {"ar", &ar}}) {
        const ReversalScores s = score_reversal(*model, d, seed);
        rep.add(label, "forward_exact_match", s.forward);
        rep.add(label, "reversal_exact_match", s.reversal);
        rep.add(label, "abs_gap", std::abs(s.forward - s.reversal));
    }
    return rep;
}

// ---------------------------------------------------------- remasking ----

struct TaskBenchOptions {
    std::size_t gen_length = 8;
    std::size_t steps = 0; // 0: steps = gen_length
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

inline SamplerConfig base_sampler(const TaskBenchOptions& o) {
    SamplerConfig sc;
    sc.gen_length = o.gen_length;
    sc.steps = o.steps == 0 ? o.gen_length : o.steps;
    return sc;
}

inline BenchReport bench_remasking(const LoadedModel& m, const std::vector<TextPair>& items,
                                   const TaskBenchOptions& o) {
    BenchReport rep;
    rep.name = "remask";
    rep.seeds = o.seeds;
    const SamplerConfig base = base_sampler(o);
    rep.config = {{"items", items.size()}, {"gen_length", base.gen_length}, {"steps", base.steps}};
    const TransformerPredictor pred = m.predictor();
    for (RemaskStrategy st : {RemaskStrategy::random, RemaskStrategy::low_confidence}) {
        SamplerConfig sc = base;
        sc.strategy = st;
        std::vector<double> vals;
        for (std::uint64_t s : o.seeds) {
            vals.push_back(exact_match(pred, m.vocab, items, sc, s));
        }
        add_seeded(rep, to_string(st), "exact_match", o.seeds, vals);
    }
    return rep;
}

// ------------------------------------------------------ sampling modes ----

struct ModesOptions : TaskBenchOptions {
    std::vector<std::size_t> block_lengths{2, 4, 8};
    std::size_t semi_ar_block = 0; // 0: gen_length / 2
};

inline BenchReport bench_sampling_modes(const LoadedModel& m, const std::vector<TextPair>& items,
                                        const ModesOptions& o) {
    BenchReport rep;
    rep.name = "modes";
    rep.seeds = o.seeds;
    const SamplerConfig base = base_sampler(o);
    const std::size_t semi = o.semi_ar_block == 0 ? std::max<std::size_t>(1, o.gen_length / 2) : o.semi_ar_block;
    rep.config = {{"items", items.size()},   {"gen_length", base.gen_length}, {"steps", base.steps},
                  {"block_lengths", o.block_lengths}, {"semi_ar_block", semi}};
    const TransformerPredictor pred = m.predictor();
    auto run = [&](const std::string& cond, const SamplerConfig& sc) {
        std::vector<double> vals;
        for (std::uint64_t s : o.seeds) {
            vals.push_back(exact_match(pred, m.vocab, items, sc, s));
        }
        add_seeded(rep, cond, "exact_match", o.seeds, vals);
        return mean_stderr(vals).mean;
    };
    SamplerConfig ar = base;
    ar.mode = SamplingMode::autoregressive;
    run("autoregressive", ar);
    std::vector<double> block_means;
    for (std::size_t bl : o.block_lengths) {
        SamplerConfig sc = base;
        sc.mode = SamplingMode::block;
        sc.block_length = bl;
        sc.steps_per_block = bl;
        sc.max_blocks = (o.gen_length + bl - 1) / bl;
        block_means.push_back(run("block_L'=" + std::to_string(bl), sc));
    }
    SamplerConfig sa = base;
    sa.mode = SamplingMode::semi_ar;
    sa.block_length = semi;
    run("semi_ar_L'=" + std::to_string(semi), sa);
    run("diffusion", base);
    if (block_means.size() >= 2) {
        rep.add("block_trend", "largest_ge_smallest", block_means.back() >= block_means.front() ? 1.0 : 0.0);
    }
    return rep;
}

// ----------------------------------------------------------------- CFG ----

struct CfgOptions : TaskBenchOptions {
    std::vector<double> grid{0.5, 1.0, 1.5, 2.0};
};

inline BenchReport bench_cfg(const LoadedModel& m, const std::vector<TextPair>& items, const CfgOptions& o) {
    BenchReport rep;
    rep.name = "cfg";
    rep.seeds = o.seeds;
    const SamplerConfig base = base_sampler(o);
    rep.config = {{"items", items.size()}, {"gen_length", base.gen_length}, {"steps", base.steps}, {"grid", o.grid}};
    const TransformerPredictor pred = m.predictor();
    std::vector<double> ws{0.0};
    ws.insert(ws.end(), o.grid.begin(), o.grid.end());
    double best = -1.0, best_w = 0.0, baseline = 0.0;
    for (double w : ws) {
        SamplerConfig sc = base;
        sc.cfg_scale = w;
        std::vector<double> vals;
        for (std::uint64_t s : o.seeds) {
            vals.push_back(exact_match(pred, m.vocab, items, sc, s));
        }
        add_seeded(rep, "w=" + format_number(w), "exact_match", o.seeds, vals);
        const double mean = mean_stderr(vals).mean;
        if (w == 0.0) {
            baseline = mean;
        }
        if (mean > best) {
            best = mean;
            best_w = w;
        }
    }
    rep.add("best", "w", best_w);
    rep.add("best", "exact_match_mean", best);
    rep.add("best", "gain_over_w0", best - baseline);
    return rep;
}

// ---------------------------------------------------- steps/throughput ----

struct StepsOptions {
    std::vector<std::size_t> lengths{128};
    std::vector<std::size_t> divisors{1, 2, 4, 8}; // N = L / divisor
    std::size_t items = 4;
    std::uint64_t seed = 1;
};

inline BenchReport bench_steps_throughput(const LoadedModel& m, const std::vector<TextPair>& items,
                                          const StepsOptions& o) {
    BenchReport rep;
    rep.name = "steps";
    rep.seeds = {o.seed};
    rep.config = {{"lengths", o.lengths}, {"divisors", o.divisors}, {"items", std::min(o.items, items.size())}};
    const TransformerPredictor pred = m.predictor();
    const std::size_t n = std::min(o.items, items.size());
    const std::vector<TextPair> subset(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n));
    for (std::size_t L : o.lengths) {
        for (std::size_t div : o.divisors) {
            if (L % div != 0) {
                continue;
            }
            SamplerConfig sc;
            sc.gen_length = L;
            sc.steps = L / div;
            const std::string cond = "L=" + std::to_string(L) + ",N=" + std::to_string(sc.steps);
            std::size_t ok = 0, passes = 0, generated = 0;
            std::vector<std::size_t> per_step;
            const auto t0 = std::chrono::steady_clock::now();
            for (std::size_t i = 0; i < subset.size(); ++i) {
                const SampleResult r = sample_item(pred, m.vocab, subset[i].prompt, sc, o.seed, i);
                ok += m.vocab.decode(r.tokens) == subset[i].response ? 1 : 0;
                passes += r.forward_passes;
                generated += r.raw.size();
                for (const TraceRecord& t : r.trace) {
                    if (per_step.size() <= t.step) {
                        per_step.resize(t.step + 1, 0);
                    }
                    ++per_step[t.step];
                }
            }
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            const double denom = subset.empty() ? 1.0 : static_cast<double>(subset.size());
            rep.add(cond, "tokens_per_sec", secs > 0 ? static_cast<double>(generated) / secs : 0.0,
                    std::numeric_limits<double>::quiet_NaN(), true);
            rep.add(cond, "sampling_seconds", secs, std::numeric_limits<double>::quiet_NaN(), true);
            rep.add(cond, "exact_match", static_cast<double>(ok) / denom);
            rep.add(cond, "forward_passes_per_item", static_cast<double>(passes) / denom);
            double tokens_per_step = 0.0;
            for (std::size_t c : per_step) {
                tokens_per_step += static_cast<double>(c);
            }
            tokens_per_step /= denom * static_cast<double>(std::max<std::size_t>(per_step.size(), 1));
            rep.add(cond, "tokens_per_step", tokens_per_step);
        }
    }
    return rep;
}

// ------------------------------------------------------ length ablation ----

struct LengthOptions {
    std::vector<std::size_t> lengths{32, 64, 128};
    std::uint64_t seed = 1;
};

inline BenchReport bench_length_ablation(const LoadedModel& m, const std::vector<TextPair>& items,
                                         const LengthOptions& o) {
    BenchReport rep;
    rep.name = "length";
    rep.seeds = {o.seed};
    rep.config = {{"items", items.size()}, {"lengths", o.lengths}};
    const TransformerPredictor pred = m.predictor();
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t L : o.lengths) {
        SamplerConfig sc;
        sc.gen_length = L;
        sc.steps = L;
        const double em = exact_match(pred, m.vocab, items, sc, o.seed);
        const std::string cond = "L=" + std::to_string(L);
        rep.add(cond, "steps", static_cast<double>(sc.steps));
        rep.add(cond, "exact_match", em);
        lo = std::min(lo, em);
        hi = std::max(hi, em);
    }
    if (!o.lengths.empty()) {
        rep.add("spread", "max_minus_min", hi - lo);
        rep.add("spread", "relative", hi > 0 ? (hi - lo) / hi : 0.0);
    }
    return rep;
}

// ------------------------------------------------------------ scaling ----

struct ScalingModel {
    std::string label;
    ModelConfig config; // attention mode picks the paradigm
};

struct ScalingOptions {
    std::vector<ScalingModel> models;
    TrainConfig pretrain;
    TrainConfig sft;
    std::size_t seq_len = 32;
    std::size_t probe_sequences = 16;
    std::size_t probe_draws = 16;
    std::size_t gen_length = 8;
    std::uint64_t seed = 1;
};

inline const char* paradigm(const ModelConfig& c) {
    return c.attention_mode == AttentionMode::causal ? "AR" : "Diffusion";
}

// Per-token NLL of a causal model: exact left-to-right factorisation.
inline double causal_nll(const TransformerPredictor& pred, std::span<const TokenId> x) {
    const Tensor logits = pred.predict(x);
    double nll = 0.0;
    for (std::size_t i = 0; i + 1 < x.size(); ++i) {
        nll += token_nll(logits, i, x[i + 1]);
    }
    return nll;
}

// Trains every configuration on the same data and reports 6ND compute next to
// a held-out per-token probe (MC bound for diffusion, exact NLL for AR) and
// task exact match after SFT.
inline BenchReport bench_scaling(const std::vector<std::string>& documents, const std::vector<TextPair>& sft_pairs,
                                 const std::vector<TextPair>& test_items, const std::vector<TokenSeq>& probe,
                                 const Vocab& vocab, const ScalingOptions& o) {
    std::size_t per_paradigm[2] = {0, 0};
    for (const ScalingModel& sm : o.models) {
        ++per_paradigm[sm.config.attention_mode == AttentionMode::causal ? 1 : 0];
    }
    if (per_paradigm[0] < 2 || per_paradigm[1] < 2) {
        throw ConfigError("scaling bench needs at least two sizes per paradigm");
    }
    BenchReport rep;
    rep.name = "scaling";
    rep.seeds = {o.seed};
    rep.config = {{"seq_len", o.seq_len}, {"pretrain_iters", o.pretrain.total_iters},
                  {"sft_iters", o.sft.total_iters}, {"batch_size", o.pretrain.batch_size}};
    const std::vector<TokenSeq> corpus = pack_pretrain(documents, vocab, o.seq_len);
    std::vector<SftPair> pairs;
    for (const TextPair& p : sft_pairs) {
        pairs.push_back(encode_pair(p, vocab));
    }
    for (const ScalingModel& sm : o.models) {
        ModelConfig c = sm.config;
        c.vocab_size = vocab.size();
        c.mask_id = vocab.mask_id();
        c.eos_id = vocab.eos_id();
        const bool ar = c.attention_mode == AttentionMode::causal;
        const Objective obj = ar ? Objective::ar : Objective::mdm;
        TrainRun run{c, init_params(c, o.seed), {}};
        TrainConfig pc = o.pretrain;
        pc.seed = o.seed;
        pc.checkpoint_path.clear();
        pretrain(run, corpus, pc, obj);
        const TransformerPredictor pred(run.model, run.params);
        double probe_total = 0.0;
        std::size_t probe_tokens = 0;
        for (std::size_t i = 0; i < std::min(o.probe_sequences, probe.size()); ++i) {
            if (ar) {
                probe_total += causal_nll(pred, probe[i]);
                probe_tokens += probe[i].size() - 1;
            } else {
                probe_total += estimate_cond_nll_seeded(pred, {}, probe[i], o.probe_draws, o.seed + i).mean;
                probe_tokens += probe[i].size();
            }
        }
        run.opt = {};
        TrainConfig sc = o.sft;
        sc.seed = o.seed + 1;
        sc.checkpoint_path.clear();
        sft(run, pairs, sc, obj);
        SamplerConfig samp;
        samp.gen_length = o.gen_length;
        samp.steps = o.gen_length;
        if (ar) {
            samp.mode = SamplingMode::autoregressive;
        }
        const TransformerPredictor tuned(run.model, run.params);
        const double em = exact_match(tuned, vocab, test_items, samp, o.seed);
        const double n = static_cast<double>(count_nonembedding(c));
        const double d = static_cast<double>(pc.total_iters * pc.batch_size * o.seq_len);
        const std::string cond = sm.label;
        rep.add(cond, std::string("paradigm=") + paradigm(c), ar ? 1.0 : 0.0);
        rep.add(cond, "nonembedding_params", n);
        rep.add(cond, "training_tokens", d);
        rep.add(cond, "flops", flops(n, d));
        rep.add(cond, "probe_nll_per_token", probe_tokens ? probe_total / static_cast<double>(probe_tokens) : 0.0);
        rep.add(cond, "exact_match", em);
    }
    return rep;
}

} // namespace mdlm

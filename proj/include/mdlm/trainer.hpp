#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdlm/checkpoint.hpp"
#include "mdlm/data.hpp"
#include "mdlm/diffusion.hpp"
#include "mdlm/error.hpp"
#include "mdlm/model.hpp"
#include "mdlm/rng.hpp"

namespace mdlm {

// --------------------------------------------------------------- config ----

struct DecayPoint {
    std::size_t iteration = 0;
    double lr = 0.0;

    friend bool operator==(const DecayPoint&, const DecayPoint&) = default;
};

struct TrainConfig {
    std::size_t total_iters = 1000;
    std::size_t batch_size = 16;
    std::size_t warmup_iters = 200;
    double stable_lr = 3e-4;
    std::vector<DecayPoint> decay_points; // empty: one linear ramp from stable_lr after warmup to final_lr
    double final_lr = 1e-5;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip_norm = 1.0;
    std::uint64_t seed = 0;
    double random_length_fraction = 0.01;

    std::size_t log_interval = 50;
    std::size_t probe_interval = 0;      // 0 disables the exact-bound probe
    std::size_t checkpoint_interval = 0; // 0: only the final checkpoint
    std::string checkpoint_path;         // empty: never written

    void validate() const {
        if (warmup_iters < 1) {
            throw ConfigError("warmup_iters must be >= 1");
        }
        if (stable_lr < 0 || final_lr < 0) {
            throw ConfigError("learning rates must be >= 0");
        }
        if (batch_size == 0) {
            throw ConfigError("batch_size must be >= 1");
        }
        if (log_interval == 0) {
            throw ConfigError("log_interval must be >= 1");
        }
        std::size_t prev = warmup_iters;
        for (const DecayPoint& d : decay_points) {
            if (d.iteration <= prev) {
                throw ConfigError("decay points must be strictly increasing and lie after warmup");
            }
            if (d.lr < 0) {
                throw ConfigError("learning rates must be >= 0");
            }
            prev = d.iteration;
        }
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || adam_eps <= 0) {
            throw ConfigError("invalid optimizer moments configuration");
        }
    }
};

// Stable phase until 60% of training, a drop to lr_mid, held until 90%, then
// a linear ramp to final_lr.
inline std::vector<DecayPoint> default_decay_points(std::size_t total_iters, std::size_t warmup_iters,
                                                    double stable_lr, double lr_mid = 1e-4) {
    const std::size_t a = std::max(warmup_iters + 1, total_iters * 6 / 10);
    const std::size_t b = a + 1;
    const std::size_t c = std::max(b + 1, total_iters * 9 / 10);
    return {{a, stable_lr}, {b, lr_mid}, {c, lr_mid}};
}

// Piecewise-linear through (0,0), (warmup, stable), the decay points and
// (total_iters, final_lr); flat outside.
inline double wsd_lr(std::size_t iter, const TrainConfig& c) {
    std::vector<std::pair<double, double>> knots;
    knots.emplace_back(0.0, 0.0);
    knots.emplace_back(static_cast<double>(c.warmup_iters), c.stable_lr);
    for (const DecayPoint& d : c.decay_points) {
        knots.emplace_back(static_cast<double>(d.iteration), d.lr);
    }
    if (static_cast<double>(c.total_iters) > knots.back().first) {
        knots.emplace_back(static_cast<double>(c.total_iters), c.final_lr);
    }
    const double x = static_cast<double>(iter);
    if (x >= knots.back().first) {
        return knots.back().second;
    }
    for (std::size_t k = 1; k < knots.size(); ++k) {
        if (x <= knots[k].first) {
            const auto [x0, y0] = knots[k - 1];
            const auto [x1, y1] = knots[k];
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    return knots.back().second;
}

inline double flops(double n_nonembed_params, double n_tokens) {
    if (n_nonembed_params < 0 || n_tokens < 0) {
        throw PreconditionError("flops: negative input");
    }
    return 6.0 * n_nonembed_params * n_tokens;
}

// ------------------------------------------------------------ optimizer ----

struct AdamState {
    ParameterSet m;
    ParameterSet v;
    std::size_t step = 0; // completed updates
};

inline bool decays(const std::string& /*name*/, const Tensor& t) { return t.rank() == 2; }

// AdamW: global-norm clipping, decoupled multiplicative decay on matrices,
// then the bias-corrected moment update. Returns the pre-clip gradient norm.
inline double optimizer_step(ParameterSet& params, const ParameterSet& grads, AdamState& state, double lr,
                             const TrainConfig& c) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        auto it = grads.find(name);
        if (it == grads.end() || it->second.shape != p.shape) {
            throw DimensionError("gradient for '" + name + "' is missing or misshaped");
        }
        double local = 0.0;
        for (float g : it->second.data) {
            local += static_cast<double>(g) * static_cast<double>(g);
        }
        if (!std::isfinite(local)) {
            throw NumericError("non-finite gradient in '" + name + "' at update " + std::to_string(state.step + 1));
        }
        sq += local;
    }
    const double norm = std::sqrt(sq);
    const double clip = (c.grad_clip_norm > 0 && norm > c.grad_clip_norm) ? c.grad_clip_norm / norm : 1.0;

    ++state.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        auto& m = state.m.try_emplace(name, p.shape).first->second;
        auto& v = state.v.try_emplace(name, p.shape).first->second;
        const double decay = decays(name, p) ? 1.0 - lr * c.weight_decay : 1.0;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]) * clip;
            const double mi = c.beta1 * static_cast<double>(m.data[i]) + (1.0 - c.beta1) * gi;
            const double vi = c.beta2 * static_cast<double>(v.data[i]) + (1.0 - c.beta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            double w = static_cast<double>(p.data[i]) * decay;
            w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.adam_eps);
            p.data[i] = static_cast<float>(w);
        }
    }
    return norm;
}

// ------------------------------------------------------------- run state ----

enum class Objective { mdm, ar };

inline const char* to_string(Objective o) { return o == Objective::ar ? "ar" : "mdm"; }

inline Objective objective_from_string(const std::string& s) {
    if (s == "mdm") {
        return Objective::mdm;
    }
    if (s == "ar") {
        return Objective::ar;
    }
    throw ConfigError("unknown objective '" + s + "' (expected mdm or ar)");
}

struct TrainRun {
    ModelConfig model;
    ParameterSet params;
    AdamState opt;
    nlohmann::json meta = nlohmann::json::object(); // copied into every checkpoint
};

inline std::string state_path(const std::string& checkpoint_path) { return checkpoint_path + ".state"; }

// Parameters go to `path`; optimizer moments and the step counter to path.state.
inline void save_run(const std::string& path, const TrainRun& run) {
    Checkpoint ck{run.model, run.params, run.meta};
    ck.meta["iteration"] = run.opt.step;
    save_checkpoint(path, ck);
    Checkpoint st{run.model, {}, {{"step", run.opt.step}}};
    for (const auto& [name, t] : run.opt.m) {
        st.params.emplace("m." + name, t);
    }
    for (const auto& [name, t] : run.opt.v) {
        st.params.emplace("v." + name, t);
    }
    save_checkpoint(state_path(path), st);
}

inline TrainRun load_run(const std::string& path) {
    Checkpoint ck = load_model_checkpoint(path);
    TrainRun run{ck.config, std::move(ck.params), {}, ck.meta};
    run.meta.erase("iteration");
    std::ifstream probe(state_path(path), std::ios::binary);
    if (probe) {
        Checkpoint st = read_checkpoint(probe);
        run.opt.step = st.meta.at("step").get<std::size_t>();
        for (auto& [name, t] : st.params) {
            (name.rfind("m.", 0) == 0 ? run.opt.m : run.opt.v).emplace(name.substr(2), std::move(t));
        }
    }
    return run;
}

// ------------------------------------------------------------------ log ----

struct LogRecord {
    std::size_t iteration = 0; // updates completed
    double lr = 0.0;
    double loss = 0.0;         // mean batch loss over the interval
    double probe_bound = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<LogRecord> records;

    void write_tsv(std::ostream& os) const {
        os << "iteration\tlr\tloss\tprobe_bound\twall_seconds\n";
        for (const LogRecord& r : records) {
            os << r.iteration << '\t' << r.lr << '\t' << r.loss << '\t';
            if (std::isnan(r.probe_bound)) {
                os << "nan";
            } else {
                os << r.probe_bound;
            }
            os << '\t' << r.wall_seconds << '\n';
        }
    }
};

struct TrainHooks {
    std::function<void(const LogRecord&)> on_log;
    // Exact-oracle probe: prompt/target pairs scored with exact_bound_l.
    std::vector<SftPair> probe;
};

// ---------------------------------------------------------- batch losses ----

// A batch as model inputs plus per-row CE targets and weights, such that the
// weighted CE sum equals the batch loss.
struct PreparedBatch {
    std::vector<TokenSeq> inputs;
    std::vector<std::int32_t> targets;
    std::vector<double> weights;
};

namespace detail {

inline void append_draw(PreparedBatch& b, const LossDraw& d, double scale) {
    b.inputs.push_back(d.input);
    b.targets.insert(b.targets.end(), d.targets.begin(), d.targets.end());
    for (double w : d.weights) {
        b.weights.push_back(w * scale);
    }
}

// Next-token prediction over positions [from, L-1): input x, target x[i+1].
inline void append_causal(PreparedBatch& b, const TokenSeq& x, std::size_t from, double scale) {
    b.inputs.push_back(x);
    const std::size_t n = x.size() > from + 1 ? x.size() - from - 1 : 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool scored = i >= from && i + 1 < x.size();
        b.targets.push_back(scored ? x[i + 1] : 0);
        b.weights.push_back(scored ? scale / static_cast<double>(n) : 0.0);
    }
}

} // namespace detail

// Iteration k draws everything from substream k of the seed, so a resumed
// run replays the same batches.
inline PreparedBatch pretrain_batch(const std::vector<TokenSeq>& corpus, const TrainConfig& c, const ModelConfig& m,
                                    Objective obj, std::size_t iteration) {
    Rng rng = Rng::substream(c.seed, iteration);
    std::vector<TokenSeq> seqs;
    for (std::size_t b = 0; b < c.batch_size; ++b) {
        seqs.push_back(corpus[rng.below(corpus.size())]);
    }
    std::size_t max_len = 0;
    for (const TokenSeq& s : seqs) {
        max_len = std::max(max_len, s.size());
    }
    seqs = apply_random_length(std::move(seqs), c.random_length_fraction, max_len, rng);
    PreparedBatch out;
    const double scale = 1.0 / static_cast<double>(seqs.size());
    for (const TokenSeq& s : seqs) {
        if (obj == Objective::mdm) {
            detail::append_draw(out, draw_pretrain(s, rng, m.mask_id), scale);
        } else {
            detail::append_causal(out, s, 0, scale);
        }
    }
    return out;
}

inline PreparedBatch sft_batch(const std::vector<SftPair>& pairs, const TrainConfig& c, const ModelConfig& m,
                               Objective obj, std::size_t iteration) {
    Rng rng = Rng::substream(c.seed, iteration);
    std::vector<SftPair> chosen;
    for (std::size_t b = 0; b < c.batch_size; ++b) {
        chosen.push_back(pairs[rng.below(pairs.size())]);
    }
    chosen = prepare_sft_batch(std::move(chosen), m.eos_id);
    PreparedBatch out;
    const double scale = 1.0 / static_cast<double>(chosen.size());
    for (const SftPair& p : chosen) {
        if (obj == Objective::mdm) {
            detail::append_draw(out, draw_sft(p.prompt, p.response, rng, m.mask_id), scale);
        } else {
            TokenSeq x = p.prompt;
            x.insert(x.end(), p.response.begin(), p.response.end());
            detail::append_causal(out, x, p.prompt.empty() ? 0 : p.prompt.size() - 1, scale);
        }
    }
    return out;
}

// Loss and gradients of one prepared batch.
inline std::pair<double, ParameterSet> batch_gradients(const ModelConfig& m, const ParameterSet& params,
                                                       const PreparedBatch& b) {
    Tape<float> tape(true);
    ModelGraph<float> g = forward_graph(tape, m, params, std::span<const TokenSeq>(b.inputs));
    Var<float> loss = ad::weighted_cross_entropy(g.logits, std::span<const std::int32_t>(b.targets),
                                                 std::span<const double>(b.weights));
    tape.backward(loss);
    ParameterSet grads;
    for (const auto& [name, v] : g.params) {
        grads.emplace(name, tape.grad(v));
    }
    return {static_cast<double>(loss.value().item()), std::move(grads)};
}

inline double probe_bound(const ModelConfig& m, const ParameterSet& params, const std::vector<SftPair>& probe) {
    TransformerPredictor pred(m, params);
    double total = 0.0;
    for (const SftPair& p : probe) {
        total += exact_bound_l(pred, p.response, p.prompt);
    }
    return probe.empty() ? 0.0 : total / static_cast<double>(probe.size());
}

namespace detail {

template <class BatchFn>
TrainLog train_loop(TrainRun& run, const TrainConfig& c, const TrainHooks& hooks, BatchFn&& make_batch) {
    c.validate();
    TrainLog log;
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
    auto maybe_probe = [&](LogRecord& r, bool force) {
        if (!hooks.probe.empty() && c.probe_interval > 0 && (force || r.iteration % c.probe_interval == 0)) {
            r.probe_bound = probe_bound(run.model, run.params, hooks.probe);
        }
    };
    auto emit = [&](LogRecord r) {
        r.wall_seconds = elapsed();
        log.records.push_back(r);
        if (hooks.on_log) {
            hooks.on_log(r);
        }
    };
    if (run.opt.step == 0 && !hooks.probe.empty() && c.probe_interval > 0) {
        LogRecord r;
        r.lr = wsd_lr(0, c);
        r.loss = std::numeric_limits<double>::quiet_NaN();
        maybe_probe(r, true);
        emit(r);
    }
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    while (run.opt.step < c.total_iters) {
        const std::size_t k = run.opt.step;
        const double lr = wsd_lr(k, c);
        const PreparedBatch batch = make_batch(k);
        auto [loss, grads] = batch_gradients(run.model, run.params, batch);
        if (!std::isfinite(loss)) {
            throw NumericError("non-finite loss at iteration " + std::to_string(k));
        }
        optimizer_step(run.params, grads, run.opt, lr, c);
        loss_sum += loss;
        ++loss_n;
        const std::size_t done = run.opt.step;
        if (done % c.log_interval == 0 || done == c.total_iters) {
            LogRecord r;
            r.iteration = done;
            r.lr = lr;
            r.loss = loss_sum / static_cast<double>(loss_n);
            maybe_probe(r, done == c.total_iters);
            emit(r);
            loss_sum = 0.0;
            loss_n = 0;
        }
        if (!c.checkpoint_path.empty() && c.checkpoint_interval > 0 && done % c.checkpoint_interval == 0 &&
            done != c.total_iters) {
            save_run(c.checkpoint_path, run);
        }
    }
    if (!c.checkpoint_path.empty()) {
        save_run(c.checkpoint_path, run);
    }
    return log;
}

} // namespace detail

// Masked-diffusion (or, for Objective::ar, next-token) pre-training. The
// batch loss is the mean of per-sequence losses.
inline TrainLog pretrain(TrainRun& run, const std::vector<TokenSeq>& corpus, const TrainConfig& c,
                         Objective obj = Objective::mdm, const TrainHooks& hooks = {}) {
    if (corpus.empty()) {
        throw PreconditionError("pre-training corpus is empty");
    }
    if (obj == Objective::ar && run.model.attention_mode != AttentionMode::causal) {
        throw ConfigError("the autoregressive objective needs a causal model");
    }
    return detail::train_loop(run, c, hooks, [&](std::size_t k) { return pretrain_batch(corpus, c, run.model, obj, k); });
}

// Supervised fine-tuning: prompts are never masked or scored.
inline TrainLog sft(TrainRun& run, const std::vector<SftPair>& pairs, const TrainConfig& c,
                    Objective obj = Objective::mdm, const TrainHooks& hooks = {}) {
    if (pairs.empty()) {
        return {};
    }
    if (obj == Objective::ar && run.model.attention_mode != AttentionMode::causal) {
        throw ConfigError("the autoregressive objective needs a causal model");
    }
    return detail::train_loop(run, c, hooks, [&](std::size_t k) { return sft_batch(pairs, c, run.model, obj, k); });
}

} // namespace mdlm

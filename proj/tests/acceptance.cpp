// Acceptance gate: runs the twelve end-to-end criteria and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any criterion fails.
//
//   acceptance --out DIR [--only 1,2,5]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mdlm/bench.hpp"
#include "mdlm/diffusion.hpp"
#include "mdlm/likelihood.hpp"
#include "mdlm/sampler.hpp"
#include "mdlm/trainer.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mdlm;
using namespace mdlm::testing;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
    std::ostringstream ss;
    ss.precision(prec);
    ss << v;
    return ss.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

// ------------------------------------------------------------- recipes ----

const std::string kLetters = "abcdefghijklmnopqrstuvwxyz";

// Shared schedule: lr 1e-3 with the default warmup-stable-decay shape.
TrainConfig schedule(std::size_t iters, std::size_t warmup, std::uint64_t seed, const std::string& ckpt) {
    TrainConfig c;
    c.total_iters = iters;
    c.warmup_iters = warmup;
    c.stable_lr = 1e-3;
    c.decay_points = default_decay_points(iters, warmup, c.stable_lr, c.stable_lr / 3);
    c.seed = seed;
    c.log_interval = 500;
    c.checkpoint_path = ckpt;
    return c;
}

TrainHooks log_hooks(const std::string& tag) {
    TrainHooks h;
    h.on_log = [tag](const LogRecord& r) {
        progress(tag + " iter " + std::to_string(r.iteration) + " loss " + fmt(r.loss) + " (" +
                 fmt(r.wall_seconds, 3) + "s)");
    };
    return h;
}

TrainRun fresh_run(const Vocab& v, std::uint64_t seed, AttentionMode mode, Objective obj) {
    ModelConfig c; // default desk configuration
    c.vocab_size = v.size();
    c.mask_id = v.mask_id();
    c.eos_id = v.eos_id();
    c.attention_mode = mode;
    c.validate();
    TrainRun run{c, init_params(c, seed), {}};
    run.meta = {{"vocab", v.chars_utf8()}, {"objective", to_string(obj)}};
    return run;
}

struct TaskRun {
    std::vector<TextPair> test;
    fs::path pretrain_ckpt, sft_ckpt;
    double train_seconds = 0.0;
    LoadedModel model;
};

// Pre-train on packed 32-token windows of the task documents, then SFT on
// the pairs. Checkpoints land in `dir`.
TaskRun train_task(TaskKind kind, const std::string& chars, std::uint64_t seed, const fs::path& dir) {
    fs::create_directories(dir);
    Rng rng(seed);
    TaskOptions to;
    const std::vector<TextPair> train = gen_task_corpora(kind, 20000, rng, to);
    TaskRun out;
    out.test = gen_task_corpora(kind, 100, rng, to);
    const Vocab v = Vocab::from_text(chars);
    out.pretrain_ckpt = dir / "pretrain.ckpt";
    out.sft_ckpt = dir / "sft.ckpt";
    const auto t0 = Clock::now();
    TrainRun run = fresh_run(v, seed, AttentionMode::bidirectional, Objective::mdm);
    const std::string tag = std::string(to_string(kind)) + " seed " + std::to_string(seed);
    pretrain(run, pack_pretrain(task_documents(train), v, 32), schedule(1000, 100, seed, out.pretrain_ckpt.string()),
             Objective::mdm, log_hooks(tag + " pretrain"));
    std::vector<SftPair> pairs;
    for (const TextPair& p : train) {
        pairs.push_back(encode_pair(p, v));
    }
    run.opt = {};
    sft(run, pairs, schedule(4000, 100, seed + 1, out.sft_ckpt.string()), Objective::mdm, log_hooks(tag + " sft"));
    out.train_seconds = since(t0);
    out.model = load_model(out.sft_ckpt.string());
    return out;
}

SamplerConfig pure_diffusion(std::size_t L) {
    SamplerConfig sc;
    sc.gen_length = L;
    sc.steps = L;
    return sc;
}

BenchReport copy_report(const TaskRun& r, std::uint64_t seed) {
    BenchReport rep;
    rep.name = "copy";
    rep.seeds = {seed};
    rep.config = {{"items", r.test.size()}, {"gen_length", 8}, {"steps", 8}};
    rep.add("diffusion", "exact_match", exact_match(r.model.predictor(), r.model.vocab, r.test, pure_diffusion(8), 1));
    rep.add("train", "seconds", r.train_seconds, std::numeric_limits<double>::quiet_NaN(), true);
    return rep;
}

struct ReversalRun {
    fs::path mdm_ckpt, ar_ckpt;
    double seconds = 0.0;
    BenchReport report;
};

ReversalRun train_reversal(std::uint64_t seed, const fs::path& dir) {
    fs::create_directories(dir);
    Rng rng(seed);
    const ReversalData d = gen_reversal_pairs(50, rng);
    const Vocab v = Vocab::from_text(kLetters + kRelationChar + kReverseRelationChar);
    const std::vector<TokenSeq> packed = pack_pretrain(d.corpus, v, 8);
    ReversalRun out;
    out.mdm_ckpt = dir / "mdm.ckpt";
    out.ar_ckpt = dir / "ar.ckpt";
    const auto t0 = Clock::now();
    for (Objective obj : {Objective::mdm, Objective::ar}) {
        const AttentionMode mode = obj == Objective::ar ? AttentionMode::causal : AttentionMode::bidirectional;
        TrainRun run = fresh_run(v, seed, mode, obj);
        const fs::path ck = obj == Objective::ar ? out.ar_ckpt : out.mdm_ckpt;
        pretrain(run, packed, schedule(4000, 100, seed, ck.string()), obj,
                 log_hooks(std::string("reversal ") + to_string(obj) + " seed " + std::to_string(seed)));
    }
    out.report = bench_reversal(load_model(out.mdm_ckpt.string()), load_model(out.ar_ckpt.string()), d, seed);
    out.seconds = since(t0);
    return out;
}

const std::string kDigits = "0123456789+=";

BenchReport arithmetic_remask(const TaskRun& r) {
    TaskBenchOptions o;
    o.gen_length = 3; // longest sum, "198"
    o.seeds = {1, 2, 3};
    return bench_remasking(r.model, r.test, o);
}

BenchReport steps_report(const TaskRun& r) {
    StepsOptions o;
    o.lengths = {128};
    return bench_steps_throughput(r.model, r.test, o);
}

// ----------------------------------------------------------- criteria ----

struct Gate {
    fs::path out;
    std::optional<TaskRun> copy1; // seed 1, reused by 9-11
    std::optional<ReversalRun> rev1;
    std::optional<TaskRun> arith;

    const TaskRun& copy_seed1() {
        if (!copy1) {
            copy1 = train_task(TaskKind::copy, kLetters, 1, out / "copy_seed1");
        }
        return *copy1;
    }
    const TaskRun& arithmetic() {
        if (!arith) {
            arith = train_task(TaskKind::arithmetic, kDigits, 1, out / "arithmetic");
        }
        return *arith;
    }

    Verdict c1() {
        Rng rng(101);
        double worst = 0.0;
        for (std::uint64_t k = 0; k < 20; ++k) {
            const RandomModel rm = random_model(1000 + k, 5, 2);
            const TransformerPredictor p = rm.predictor();
            const TokenSeq x = random_tokens(rng, 1 + k % 6, 5);
            worst = std::max(worst, std::abs(exact_bound_t(p, x) - exact_bound_l(p, x)));
        }
        return {worst <= 1e-9, "20 instances, max |t-form - l-form| = " + fmt(worst)};
    }

    Verdict c2() {
        Rng rng(202);
        double worst_eq = 0.0, worst_gap = std::numeric_limits<double>::infinity();
        for (std::uint64_t k = 0; k < 10; ++k) {
            const RandomModel rm = random_model(2000 + k, 5, 2);
            const TransformerPredictor p = rm.predictor();
            for (std::size_t L = 2; L <= 4; ++L) {
                const TokenSeq x = random_tokens(rng, L, 5);
                const AoArmResult ao = ao_arm_exact(p, x);
                worst_eq = std::max(worst_eq, std::abs(ao.expected_order_nll - exact_bound_t(p, x)));
                worst_gap = std::min(worst_gap, ao.expected_order_nll - ao.exact_mixture_nll);
            }
        }
        return {worst_eq <= 1e-9 && worst_gap >= -1e-9, "10 models x L=2..4, max |AO - bound| = " + fmt(worst_eq) +
                                                             ", min (AO - mixture) = " + fmt(worst_gap)};
    }

    Verdict c3() {
        Rng rng(303);
        int wins = 0;
        for (std::uint64_t k = 0; k < 20; ++k) {
            const RandomModel rm = random_model(3000 + k, 5, 2);
            const TransformerPredictor tp = rm.predictor();
            const CachedPredictor<TransformerPredictor> p(tp);
            const TokenSeq prompt = random_tokens(rng, 2, 5);
            const TokenSeq response = random_tokens(rng, 6, 5);
            const double vl = estimate_cond_nll(p, prompt, response, 128, rng).sample_variance();
            const double vt = estimate_cond_nll_t(p, prompt, response, 128, rng).sample_variance();
            wins += vl <= vt ? 1 : 0;
        }
        return {wins >= 18, "count form has lower variance on " + std::to_string(wins) + "/20"};
    }

    Verdict c4() {
        Rng table_rng(404);
        std::map<TokenSeq, double> table;
        double total = 0.0;
        for (TokenId a = 0; a < 3; ++a) {
            for (TokenId b = 0; b < 3; ++b) {
                for (TokenId d = 0; d < 3; ++d) {
                    const double w = table_rng.uniform() < 0.3 ? 0.0 : table_rng.uniform();
                    table[{a, b, d}] = w;
                    total += w;
                }
            }
        }
        for (auto& [x, w] : table) {
            w /= total;
        }
        const TablePredictor p(table, 3);
        SamplerConfig c = pure_diffusion(3);
        c.strategy = RemaskStrategy::random;
        c.temperature = 1.0;
        c.exact_count = true;
        Rng rng(405);
        std::map<TokenSeq, double> counts;
        const int n = 100000;
        for (int i = 0; i < n; ++i) {
            counts[generate_diffusion(p, {}, c, rng).raw] += 1.0 / n;
        }
        double tv = 0.0;
        for (const auto& [x, w] : table) {
            tv += std::abs(w - counts[x]);
        }
        for (const auto& [x, w] : counts) {
            tv += table.contains(x) ? 0.0 : w;
        }
        tv *= 0.5;
        return {tv < 0.02, "TV over 1e5 draws = " + fmt(tv)};
    }

    Verdict c5() {
        const RandomModel m = random_model(505, 5, 2);
        const std::vector<TokenSeq> batch{{0, 4, 2, 4}, {4, 1, 3}};
        const std::vector<std::int32_t> targets{-1, 1, -1, 0, 2, -1, -1};
        const std::vector<double> weights{0, 0.5, 0, 0.5, 1.0 / 3, 0, 0};
        const auto worst = model_gradcheck(m.config, to_double(m.params), batch, targets, weights);
        double w = 0.0;
        std::string name;
        for (const auto& [n, e] : worst) {
            if (e >= w) {
                w = e;
                name = n;
            }
        }
        return {w <= 1e-4, std::to_string(worst.size()) + " groups, worst " + name + " = " + fmt(w)};
    }

    Verdict c6() {
        std::string detail;
        bool ok = true;
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const TaskRun run = seed == 1 ? copy_seed1() : train_task(TaskKind::copy, kLetters, seed,
                                                                      out / ("copy_seed" + std::to_string(seed)));
            const BenchReport rep = copy_report(run, seed);
            rep.save((out / ("copy_seed" + std::to_string(seed))).string());
            const double em = rep.value("diffusion", "exact_match");
            ok = ok && em >= 0.9 && run.train_seconds <= 15 * 60;
            detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " em " + fmt(em) +
                      " in " + fmt(run.train_seconds, 3) + "s";
        }
        return {ok, detail};
    }

    Verdict c7() {
        const auto t0 = Clock::now();
        int good = 0;
        std::string detail;
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            ReversalRun r = train_reversal(seed, out / ("reversal_seed" + std::to_string(seed)));
            r.report.save((out / ("reversal_seed" + std::to_string(seed))).string());
            const BenchReport& rep = r.report;
            const double af = rep.value("ar", "forward_exact_match"), ar = rep.value("ar", "reversal_exact_match");
            const double mf = rep.value("mdm", "forward_exact_match"), mr = rep.value("mdm", "reversal_exact_match");
            const bool ok = af >= 0.9 && ar <= 0.2 && std::abs(mf - mr) <= 0.15 && mf >= 0.5 && mr >= 0.5;
            good += ok ? 1 : 0;
            detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " AR " + fmt(af) +
                      "/" + fmt(ar) + " MDM " + fmt(mf) + "/" + fmt(mr);
            if (seed == 1) {
                rev1 = std::move(r);
            }
        }
        const double secs = since(t0);
        return {good >= 2 && secs <= 30 * 60,
                detail + " (fwd/rev); " + std::to_string(good) + "/3 seeds, " + fmt(secs, 3) + "s"};
    }

    Verdict c8() {
        const BenchReport rep = arithmetic_remask(arithmetic());
        rep.save((out / "arithmetic").string());
        const double lc = rep.value("low_confidence", "exact_match_mean");
        const double rnd = rep.value("random", "exact_match_mean");
        return {lc >= rnd, "low_confidence " + fmt(lc) + " vs random " + fmt(rnd) + " (3 seeds)"};
    }

    Verdict c9() {
        const BenchReport rep = steps_report(copy_seed1());
        rep.save((out / "copy_seed1").string());
        const double full = rep.value("L=128,N=128", "tokens_per_sec");
        const double half = rep.value("L=128,N=64", "tokens_per_sec") / full;
        const double eighth = rep.value("L=128,N=16", "tokens_per_sec") / full;
        return {half >= 1.5 && eighth >= 4.0, "N=L/2 speedup " + fmt(half, 3) + "x, N=L/8 " + fmt(eighth, 3) + "x"};
    }

    // Seed 1 of criteria 6-9 is rerun from scratch in a sibling directory.
    Verdict c10() {
        const fs::path again = out / "rerun";
        std::vector<std::string> diffs;
        auto same_file = [&](const fs::path& a, const fs::path& b) {
            if (!fs::exists(a) || slurp(a) != slurp(b)) {
                diffs.push_back(fs::relative(a, out).string());
            }
        };
        auto same_report = [&](const BenchReport& a, const BenchReport& b) {
            if (a.deterministic_text() != b.deterministic_text()) {
                diffs.push_back(a.name + " report");
            }
        };
        const TaskRun& c1 = copy_seed1();
        const TaskRun c2 = train_task(TaskKind::copy, kLetters, 1, again / "copy_seed1");
        for (const fs::path& f : {c1.pretrain_ckpt, c1.sft_ckpt}) {
            same_file(f, again / "copy_seed1" / f.filename());
            same_file(state_path(f.string()), again / "copy_seed1" / (f.filename().string() + ".state"));
        }
        same_report(copy_report(c1, 1), copy_report(c2, 1));
        same_report(steps_report(c1), steps_report(c2));

        if (!rev1) {
            rev1 = train_reversal(1, out / "reversal_seed1");
        }
        const ReversalRun r2 = train_reversal(1, again / "reversal_seed1");
        same_file(rev1->mdm_ckpt, r2.mdm_ckpt);
        same_file(rev1->ar_ckpt, r2.ar_ckpt);
        same_report(rev1->report, r2.report);

        const TaskRun& a1 = arithmetic();
        const TaskRun a2 = train_task(TaskKind::arithmetic, kDigits, 1, again / "arithmetic");
        same_file(a1.sft_ckpt, a2.sft_ckpt);
        same_report(arithmetic_remask(a1), arithmetic_remask(a2));

        std::string detail = "seed 1 rerun: ";
        if (diffs.empty()) {
            detail += "checkpoints and reports identical";
        } else {
            detail += "differs in";
            for (const std::string& d : diffs) {
                detail += " " + d;
            }
        }
        return {diffs.empty(), detail};
    }

    Verdict c11() {
        const TaskRun& r = copy_seed1();
        const TransformerPredictor p = r.model.predictor();
        int semi_ok = 0, block_ok = 0;
        for (std::size_t k = 0; k < 10; ++k) {
            const TokenSeq prompt = r.model.vocab.encode(r.test[k].prompt);
            SamplerConfig c = pure_diffusion(8);
            c.strategy = k % 2 == 0 ? RemaskStrategy::low_confidence : RemaskStrategy::random;
            c.temperature = 1.0;
            Rng a = Rng::substream(11, k), b = Rng::substream(11, k);
            const SampleResult d = generate_diffusion(p, prompt, c, a);
            c.mode = SamplingMode::semi_ar;
            c.block_length = 8;
            const SampleResult s = generate_semi_ar(p, prompt, c, b);
            semi_ok += d.raw == s.raw && d.trace == s.trace ? 1 : 0;

            SamplerConfig bc;
            bc.mode = SamplingMode::block;
            bc.block_length = 1;
            bc.max_blocks = 12;
            bc.temperature = 1.0;
            Rng x = Rng::substream(12, k), y = Rng::substream(12, k);
            const SampleResult blk = generate_block_diffusion(p, prompt, bc, x);
            const SampleResult ar = generate_autoregressive(p, prompt, 12, y, bc);
            block_ok += blk.raw == ar.raw && blk.tokens == ar.tokens && blk.trace == ar.trace ? 1 : 0;
        }
        return {semi_ok == 10 && block_ok == 10, "semi_ar(L'=L) == diffusion " + std::to_string(semi_ok) +
                                                     "/10, block(L'=1) == AR " + std::to_string(block_ok) + "/10"};
    }

    Verdict c12() {
        const double f = flops(0.97e9, 37.75e9);
        const double shown = std::round(f / 1e18) / 100.0; // 3 significant figures, in units of 1e20
        return {shown == 2.20, "6ND = " + fmt(f, 6) + " -> " + std::to_string(shown).substr(0, 4) + "e20"};
    }
};

struct Criterion {
    int id;
    const char* name;
    double limit_seconds; // 0: no runtime bound
    Verdict (Gate::*run)();
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance gate"};
    std::string out = "acceptance_runs";
    std::vector<int> only;
    app.add_option("--out", out, "Working directory for checkpoints and reports")->capture_default_str();
    app.add_option("--only", only, "Run just these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> all{
        {1, "bound equivalence", 60, &Gate::c1},
        {2, "AO-ARM equivalence", 120, &Gate::c2},
        {3, "estimator variance", 120, &Gate::c3},
        {4, "oracle sampling", 300, &Gate::c4},
        {5, "gradient check", 60, &Gate::c5},
        {6, "copy task", 0, &Gate::c6},
        {7, "reversal symmetry", 0, &Gate::c7},
        {8, "remasking ablation", 0, &Gate::c8},
        {9, "steps throughput", 0, &Gate::c9},
        {10, "determinism", 0, &Gate::c10},
        {11, "mode coherence", 0, &Gate::c11},
        {12, "flops accounting", 0, &Gate::c12},
    };
    const std::set<int> want(only.begin(), only.end());
    Gate gate;
    gate.out = fs::absolute(out);
    fs::remove_all(gate.out);
    fs::create_directories(gate.out);

    std::ostringstream summary;
    int failed = 0;
    for (const Criterion& c : all) {
        if (!want.empty() && !want.contains(c.id)) {
            continue;
        }
        const auto t0 = Clock::now();
        Verdict v;
        try {
            v = (gate.*c.run)();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const double secs = since(t0);
        if (c.limit_seconds > 0 && secs > c.limit_seconds) {
            v.pass = false;
            v.detail += "; over the " + fmt(c.limit_seconds, 4) + "s limit";
        }
        failed += v.pass ? 0 : 1;
        char head[96];
        std::snprintf(head, sizeof head, "criterion %2d %-20s %s", c.id, c.name, v.pass ? "PASS" : "FAIL");
        const std::string line = std::string(head) + "  " + v.detail + " [" + fmt(secs, 3) + "s]";
        std::cout << line << std::endl;
        summary << line << '\n';
    }
    std::ofstream(gate.out / "acceptance.txt") << summary.str();
    return failed == 0 ? 0 : 1;
}

// mdlm: command-line driver for data generation, training, sampling,
// likelihood evaluation and the benchmark suite.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mdlm/bench.hpp"
#include "mdlm/checkpoint.hpp"
#include "mdlm/data.hpp"
#include "mdlm/likelihood.hpp"
#include "mdlm/sampler.hpp"
#include "mdlm/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdlm;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw Error("cannot open '" + path + "'");
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) {
        throw ConfigError(std::string("--") + what + " is required");
    }
    if (!fs::is_regular_file(path)) {
        throw Error(std::string(what) + " file '" + path + "' does not exist");
    }
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) {
        throw Error("cannot create output directory '" + dir + "'");
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) {
        throw Error("failed writing '" + path + "'");
    }
}

std::vector<TextPair> read_pairs(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw Error("cannot open '" + path + "'");
    }
    return read_sft_jsonl(f);
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) {
            out.push_back(std::stoull(tok));
        }
    }
    if (out.empty()) {
        throw ConfigError("seed list is empty");
    }
    return out;
}

// "key = value" lines become "--key=value" arguments placed before the real
// command-line flags, so flags given on the command line win.
std::vector<std::string> config_file_args(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw Error("cannot open config file '" + path + "'");
    }
    std::vector<std::string> out;
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(f, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (value == "true") {
            out.push_back("--" + key);
        } else if (value != "false") {
            out.push_back("--" + key + "=" + value);
        }
    }
    return out;
}

std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (config.empty()) {
        return rest;
    }
    std::size_t lead = 0;
    while (lead < rest.size() && !rest[lead].empty() && rest[lead][0] != '-') {
        ++lead;
    }
    std::vector<std::string> out(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(lead));
    for (std::string& a : config_file_args(config)) {
        out.push_back(std::move(a));
    }
    out.insert(out.end(), rest.begin() + static_cast<std::ptrdiff_t>(lead), rest.end());
    return out;
}

// --------------------------------------------------------------- options ----

struct Common {
    std::uint64_t seed = 0;
    std::string out = ".";
    std::string checkpoint;
};

void add_common(CLI::App* app, Common& c, bool checkpoint) {
    app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    app->add_option("--out", c.out, "Output directory")->capture_default_str();
    app->add_option("--config", "Optional key=value file; command-line flags override it");
    if (checkpoint) {
        app->add_option("--checkpoint", c.checkpoint, "Model checkpoint");
    }
}

struct ScheduleFlags {
    std::size_t iters = 1000;
    std::size_t batch = 16;
    std::size_t warmup = 200;
    double lr = 3e-4;
    double mid_lr = 1e-4;
    double final_lr = 1e-5;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double clip = 1.0;
    std::size_t log_interval = 50;
    std::size_t checkpoint_interval = 0;

    TrainConfig make(std::uint64_t seed) const {
        TrainConfig c;
        c.total_iters = iters;
        c.batch_size = batch;
        c.warmup_iters = std::max<std::size_t>(1, std::min(warmup, std::max<std::size_t>(iters, 1)));
        c.stable_lr = lr;
        c.final_lr = final_lr;
        c.decay_points = iters > c.warmup_iters + 2 ? default_decay_points(iters, c.warmup_iters, lr, mid_lr)
                                                    : std::vector<DecayPoint>{};
        c.weight_decay = weight_decay;
        c.beta1 = beta1;
        c.beta2 = beta2;
        c.grad_clip_norm = clip;
        c.seed = seed;
        c.log_interval = log_interval;
        c.checkpoint_interval = checkpoint_interval;
        return c;
    }
};

void add_schedule(CLI::App* app, ScheduleFlags& s) {
    app->add_option("--iters", s.iters, "Optimizer updates")->capture_default_str();
    app->add_option("--batch", s.batch, "Sequences per update")->capture_default_str();
    app->add_option("--warmup", s.warmup, "Warmup iterations")->capture_default_str();
    app->add_option("--lr", s.lr, "Stable learning rate")->capture_default_str();
    app->add_option("--mid-lr", s.mid_lr, "Learning rate after the first decay")->capture_default_str();
    app->add_option("--final-lr", s.final_lr, "Learning rate at the last iteration")->capture_default_str();
    app->add_option("--weight-decay", s.weight_decay)->capture_default_str();
    app->add_option("--beta1", s.beta1)->capture_default_str();
    app->add_option("--beta2", s.beta2)->capture_default_str();
    app->add_option("--clip", s.clip, "Global gradient-norm clip")->capture_default_str();
    app->add_option("--log-interval", s.log_interval)->capture_default_str();
    app->add_option("--checkpoint-interval", s.checkpoint_interval, "0 = final checkpoint only")
        ->capture_default_str();
}

struct SamplerFlags {
    std::string mode = "diffusion";
    std::string strategy = "low_confidence";
    std::size_t len = 32;
    std::size_t steps = 0;
    std::size_t block = 0;
    std::size_t steps_per_block = 0;
    std::size_t max_blocks = 8;
    double cfg = 0.0;
    double temperature = 0.0;
    bool eos_zeroing = false;
    bool exact_count = false;

    SamplerConfig make() const {
        SamplerConfig c;
        c.mode = sampling_mode_from_string(mode);
        c.strategy = remask_strategy_from_string(strategy);
        c.gen_length = len;
        c.steps = steps == 0 ? len : steps;
        c.block_length = block;
        c.steps_per_block = steps_per_block;
        c.max_blocks = max_blocks;
        c.cfg_scale = cfg;
        c.temperature = temperature;
        c.eos_zeroing = eos_zeroing;
        c.exact_count = exact_count;
        c.validate();
        return c;
    }
};

void add_sampler(CLI::App* app, SamplerFlags& s) {
    app->add_option("--mode", s.mode, "diffusion | semi_ar | block | autoregressive")->capture_default_str();
    app->add_option("--strategy", s.strategy, "low_confidence | random")->capture_default_str();
    app->add_option("--len", s.len, "Generation length")->capture_default_str();
    app->add_option("--steps", s.steps, "Sampling steps (0 = one per token)")->capture_default_str();
    app->add_option("--block", s.block, "Block length for semi_ar / block modes")->capture_default_str();
    app->add_option("--steps-per-block", s.steps_per_block, "Block mode steps per block (0 = block length)")
        ->capture_default_str();
    app->add_option("--max-blocks", s.max_blocks, "Block mode block limit")->capture_default_str();
    app->add_option("--cfg", s.cfg, "Classifier-free guidance scale (0 = off)")->capture_default_str();
    app->add_option("--temperature", s.temperature, "0 = greedy")->capture_default_str();
    app->add_flag("--eos-zeroing", s.eos_zeroing, "Zero the confidence of EOS predictions");
    app->add_flag("--exact-count", s.exact_count, "Random remasking keeps exactly the expected count");
}

void save_log(const std::string& path, const TrainLog& log) {
    std::ostringstream ss;
    log.write_tsv(ss);
    write_text(path, ss.str());
}

void print_log(const LogRecord& r) {
    std::cerr << "iter " << r.iteration << "  lr " << r.lr << "  loss " << r.loss;
    if (!std::isnan(r.probe_bound)) {
        std::cerr << "  probe " << r.probe_bound;
    }
    std::cerr << "  " << r.wall_seconds << "s\n";
}

// ---------------------------------------------------------------- train ----

struct TrainFlags {
    Common common;
    ScheduleFlags sched;
    std::string corpus;
    std::string objective = "mdm";
    std::string vocab_extra;
    std::size_t seq_len = 32;
    double random_length = 0.01;
    std::size_t probe_interval = 0;
    std::size_t probe_len = 6;
    std::size_t probe_count = 8;
    bool resume = false;
    ModelConfig model;
    std::string attention;
};

int cmd_train(const TrainFlags& f) {
    require_file(f.corpus, "corpus");
    ensure_dir(f.common.out);
    const std::string ckpt = f.common.out + "/model.ckpt";
    const Objective obj = objective_from_string(f.objective);
    const std::string text = read_file(f.corpus);
    const std::vector<std::string> docs = split_documents(text);
    TrainConfig tc = f.sched.make(f.common.seed);
    tc.random_length_fraction = f.random_length;
    tc.probe_interval = f.probe_interval;
    tc.checkpoint_path = ckpt;

    TrainRun run;
    if (f.resume) {
        const std::string from = f.common.checkpoint.empty() ? ckpt : f.common.checkpoint;
        require_file(from, "checkpoint");
        run = load_run(from);
    } else {
        std::string chars = f.vocab_extra;
        for (const std::string& d : docs) {
            chars += d;
        }
        const Vocab vocab = Vocab::from_text(chars);
        ModelConfig c = f.model;
        c.vocab_size = vocab.size();
        c.mask_id = vocab.mask_id();
        c.eos_id = vocab.eos_id();
        c.attention_mode = obj == Objective::ar ? AttentionMode::causal : AttentionMode::bidirectional;
        if (!f.attention.empty()) {
            c.attention_mode = attention_mode_from_string(f.attention);
        }
        c.validate();
        run.model = c;
        run.params = init_params(c, f.common.seed);
        run.meta = {{"vocab", vocab.chars_utf8()}, {"objective", to_string(obj)}, {"stage", "pretrain"}};
    }
    const Vocab vocab = vocab_from_meta(run.meta);
    const std::vector<TokenSeq> corpus = pack_pretrain(docs, vocab, f.seq_len);
    if (corpus.empty()) {
        throw PreconditionError("corpus is shorter than one " + std::to_string(f.seq_len) + "-token window");
    }
    TrainHooks hooks;
    hooks.on_log = print_log;
    for (std::size_t i = 0; i < std::min(f.probe_count, corpus.size()) && f.probe_interval > 0; ++i) {
        const TokenSeq& w = corpus[i * corpus.size() / std::min(f.probe_count, corpus.size())];
        hooks.probe.push_back({{}, TokenSeq(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(
                                                           std::min(f.probe_len, w.size())))});
    }
    const TrainLog log = pretrain(run, corpus, tc, obj, hooks);
    save_log(f.common.out + "/train_log.tsv", log);
    std::cout << ckpt << '\n';
    return 0;
}

// ------------------------------------------------------------------ sft ----

struct SftFlags {
    Common common;
    ScheduleFlags sched;
    std::string data;
    double epochs = 3.0;
};

int cmd_sft(SftFlags f) {
    require_file(f.common.checkpoint, "checkpoint");
    require_file(f.data, "data");
    ensure_dir(f.common.out);
    TrainRun run = load_run(f.common.checkpoint);
    run.opt = {};
    const Vocab vocab = vocab_from_meta(run.meta);
    std::vector<SftPair> pairs;
    for (const TextPair& p : read_pairs(f.data)) {
        pairs.push_back(encode_pair(p, vocab));
    }
    if (f.sched.iters == 0) {
        const double per_epoch = static_cast<double>(pairs.size()) / static_cast<double>(f.sched.batch);
        f.sched.iters = static_cast<std::size_t>(std::ceil(f.epochs * per_epoch));
    }
    TrainConfig tc = f.sched.make(f.common.seed);
    tc.checkpoint_path = f.common.out + "/sft.ckpt";
    const Objective obj = objective_from_string(run.meta.value("objective", std::string("mdm")));
    run.meta["stage"] = "sft";
    TrainHooks hooks;
    hooks.on_log = print_log;
    const TrainLog log = sft(run, pairs, tc, obj, hooks);
    if (pairs.empty()) {
        save_run(tc.checkpoint_path, run);
    }
    save_log(f.common.out + "/sft_log.tsv", log);
    std::cout << tc.checkpoint_path << '\n';
    return 0;
}

// --------------------------------------------------------------- sample ----

struct SampleFlags {
    Common common;
    SamplerFlags sampler;
    std::string prompt;
    std::string trace;
    bool raw = false;
};

int cmd_sample(const SampleFlags& f) {
    const SamplerConfig sc = f.sampler.make();
    require_file(f.common.checkpoint, "checkpoint");
    const LoadedModel m = load_model(f.common.checkpoint);
    const TransformerPredictor pred = m.predictor();
    Rng rng(f.common.seed);
    const SampleResult r = generate(pred, m.vocab.encode(f.prompt), sc, rng);
    std::cout << m.vocab.decode(f.raw ? r.raw : r.tokens) << '\n';
    if (!f.trace.empty()) {
        std::ostringstream ss;
        ss << "step\tposition\ttoken_id\ttoken_text\n";
        write_trace(ss, r.trace, [&](TokenId id) { return m.vocab.token_text(id); });
        write_text(f.trace, ss.str());
    }
    return 0;
}

// ----------------------------------------------------------------- eval ----

struct EvalFlags {
    Common common;
    std::string data;
    std::size_t n_mc = kDefaultMcSamples;
};

int cmd_eval(const EvalFlags& f) {
    if (f.n_mc == 0) {
        throw ConfigError("--nmc must be >= 1");
    }
    require_file(f.common.checkpoint, "checkpoint");
    require_file(f.data, "data");
    std::ifstream in(f.data);
    const std::vector<EvalItem> items = read_eval_jsonl(in);
    const LoadedModel m = load_model(f.common.checkpoint);
    ensure_dir(f.common.out);
    const std::vector<EvalRow> rows = evaluate_items(m.predictor(), m.vocab, items, f.n_mc, f.common.seed);
    std::ostringstream ss;
    write_eval_header(ss);
    std::size_t correct = 0;
    for (const EvalRow& r : rows) {
        write_eval_row(ss, r);
        correct += r.correct ? 1 : 0;
    }
    write_text(f.common.out + "/eval.tsv", ss.str());
    std::cout << ss.str();
    std::cerr << "accuracy " << (rows.empty() ? 0.0 : static_cast<double>(correct) / rows.size()) << " over "
              << rows.size() << " items\n";
    return 0;
}

// ------------------------------------------------------------- gen-data ----

struct GenFlags {
    Common common;
    std::string kind;
    std::size_t size = 20000;
    std::size_t test_size = 200;
    std::size_t min_len = 3;
    std::size_t max_len = 8;
    std::size_t pairs = 50;
    std::size_t string_len = 3;
    std::size_t distractors = 3;
};

std::string jsonl(const std::vector<TextPair>& pairs) {
    std::string s;
    for (const TextPair& p : pairs) {
        s += to_jsonl(p) + "\n";
    }
    return s;
}

int cmd_gen_data(const GenFlags& f) {
    ensure_dir(f.common.out);
    Rng rng(f.common.seed);
    const std::string base = f.common.out + "/" + f.kind;
    if (f.kind == "reversal") {
        if (f.pairs == 0) {
            throw ConfigError("--pairs must be >= 1");
        }
        ReversalOptions ro;
        ro.string_len = f.string_len;
        const ReversalData d = gen_reversal_pairs(f.pairs, rng, ro);
        std::string corpus;
        for (const std::string& doc : d.corpus) {
            corpus += doc + "\n";
        }
        std::vector<TextPair> fw, rv;
        for (std::size_t k = 0; k < d.forward.size(); ++k) {
            fw.push_back({d.forward[k].cue, d.forward[k].answer});
            rv.push_back({d.reversal[k].cue, d.reversal[k].answer});
        }
        write_text(base + "_corpus.txt", corpus);
        write_text(base + "_forward.jsonl", jsonl(fw));
        write_text(base + "_reversal.jsonl", jsonl(rv));
        std::cout << base << "_corpus.txt\n";
        return 0;
    }
    const TaskKind kind = task_kind_from_string(f.kind);
    TaskOptions to;
    to.min_len = f.min_len;
    to.max_len = f.max_len;
    if (to.min_len == 0 || to.min_len > to.max_len) {
        throw ConfigError("need 1 <= --min-len <= --max-len");
    }
    const std::vector<TextPair> train = gen_task_corpora(kind, f.size, rng, to);
    const std::vector<TextPair> test = gen_task_corpora(kind, f.test_size, rng, to);
    std::string corpus;
    for (const std::string& doc : task_documents(train)) {
        corpus += doc + "\n";
    }
    // Multiple-choice items: the true response among corrupted variants.
    std::string eval;
    for (std::size_t i = 0; i < test.size(); ++i) {
        std::vector<std::string> cands{test[i].response};
        for (std::size_t k = 0; k < f.distractors; ++k) {
            const TextPair other = gen_task_corpora(kind, 1, rng, to).front();
            cands.push_back(other.response);
        }
        const std::size_t answer = rng.below(cands.size());
        std::swap(cands[0], cands[answer]);
        eval += nlohmann::json{{"task", f.kind},
                               {"id", std::to_string(i)},
                               {"prompt", test[i].prompt},
                               {"candidates", cands},
                               {"answer", answer}}
                    .dump() +
                "\n";
    }
    write_text(base + "_corpus.txt", corpus);
    write_text(base + "_sft.jsonl", jsonl(train));
    write_text(base + "_test.jsonl", jsonl(test));
    write_text(base + "_eval.jsonl", eval);
    std::cout << base << "_corpus.txt\n";
    return 0;
}

// ---------------------------------------------------------------- bench ----

struct BenchFlags {
    Common common;
    std::string data;
    std::size_t items = 100;
    std::size_t len = 8;
    std::size_t steps = 0;
    std::string seeds = "1,2,3";
    // reversal
    std::string mdm, ar, forward, reversal;
    // modes / cfg / steps / length
    std::vector<std::size_t> blocks{2, 4, 8};
    std::vector<double> grid{0.5, 1.0, 1.5, 2.0};
    std::vector<std::size_t> lengths;
    // scaling
    std::string corpus, sft_data;
    std::vector<std::string> sizes{"32x2", "64x2"};
    std::size_t iters = 300;
    std::size_t sft_iters = 300;
    std::size_t batch = 16;
    std::size_t seq_len = 32;
    double lr = 1e-3;
};

std::vector<TextPair> load_items(const BenchFlags& f) {
    require_file(f.data, "data");
    std::vector<TextPair> items = read_pairs(f.data);
    if (items.size() > f.items) {
        items.resize(f.items);
    }
    return items;
}

ModelConfig parse_size(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) {
        throw ConfigError("size '" + s + "' must look like <d_model>x<n_layers>");
    }
    ModelConfig c;
    c.d_model = std::stoul(s.substr(0, x));
    c.n_layers = std::stoul(s.substr(x + 1));
    c.n_heads = std::max<std::size_t>(1, c.d_model / 32);
    c.ffn_dim = (c.d_model * 8 / 3 + 7) / 8 * 8;
    return c;
}

int cmd_bench(const std::string& sub, const BenchFlags& f) {
    ensure_dir(f.common.out);
    BenchReport rep;
    const auto t0 = std::chrono::steady_clock::now();
    if (sub == "reversal") {
        if (f.mdm.empty() || f.ar.empty()) {
            throw ConfigError("bench reversal requires both --mdm and --ar checkpoints");
        }
        require_file(f.mdm, "mdm");
        require_file(f.ar, "ar");
        require_file(f.forward, "forward");
        require_file(f.reversal, "reversal");
        const LoadedModel mdm = load_model(f.mdm);
        const LoadedModel ar = load_model(f.ar);
        ReversalData d;
        const auto fw = read_pairs(f.forward);
        const auto rv = read_pairs(f.reversal);
        if (fw.size() != rv.size()) {
            throw FormatError("forward and reversal probe files differ in length");
        }
        for (std::size_t k = 0; k < fw.size(); ++k) {
            d.forward.push_back({fw[k].prompt, fw[k].response});
            d.reversal.push_back({rv[k].prompt, rv[k].response});
        }
        rep = bench_reversal(mdm, ar, d, f.common.seed);
    } else if (sub == "scaling") {
        require_file(f.corpus, "corpus");
        require_file(f.sft_data, "sft-data");
        const std::vector<TextPair> test = load_items(f);
        const std::string text = read_file(f.corpus);
        const std::vector<std::string> docs = split_documents(text);
        std::string chars;
        for (const std::string& d : docs) {
            chars += d;
        }
        const Vocab vocab = Vocab::from_text(chars);
        ScalingOptions o;
        o.seed = f.common.seed;
        o.seq_len = f.seq_len;
        o.gen_length = f.len;
        ScheduleFlags sched;
        sched.iters = f.iters;
        sched.batch = f.batch;
        sched.lr = f.lr;
        sched.warmup = std::max<std::size_t>(1, f.iters / 10);
        o.pretrain = sched.make(f.common.seed);
        sched.iters = f.sft_iters;
        sched.warmup = std::max<std::size_t>(1, f.sft_iters / 10);
        o.sft = sched.make(f.common.seed);
        for (const std::string& s : f.sizes) {
            for (AttentionMode mode : {AttentionMode::bidirectional, AttentionMode::causal}) {
                ModelConfig c = parse_size(s);
                c.attention_mode = mode;
                o.models.push_back({std::string(mode == AttentionMode::causal ? "AR-" : "MDM-") + s, c});
            }
        }
        const std::vector<TokenSeq> packed = pack_pretrain(docs, vocab, f.seq_len);
        std::vector<TokenSeq> probe(packed.end() - static_cast<std::ptrdiff_t>(std::min<std::size_t>(16, packed.size())),
                                    packed.end());
        rep = bench_scaling(docs, read_pairs(f.sft_data), test, probe, vocab, o);
    } else {
        require_file(f.common.checkpoint, "checkpoint");
        const auto load0 = std::chrono::steady_clock::now();
        const LoadedModel m = load_model(f.common.checkpoint);
        const double load_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - load0).count();
        const std::vector<TextPair> items = load_items(f);
        TaskBenchOptions to;
        to.gen_length = f.len;
        to.steps = f.steps;
        to.seeds = parse_seeds(f.seeds);
        if (sub == "remask") {
            rep = bench_remasking(m, items, to);
        } else if (sub == "modes") {
            ModesOptions o;
            static_cast<TaskBenchOptions&>(o) = to;
            o.block_lengths = f.blocks;
            rep = bench_sampling_modes(m, items, o);
        } else if (sub == "cfg") {
            CfgOptions o;
            static_cast<TaskBenchOptions&>(o) = to;
            o.grid = f.grid;
            rep = bench_cfg(m, items, o);
        } else if (sub == "steps") {
            StepsOptions o;
            o.seed = to.seeds.front();
            if (!f.lengths.empty()) {
                o.lengths = f.lengths;
            }
            o.items = f.items;
            rep = bench_steps_throughput(m, items, o);
            rep.add("setup", "model_load_seconds", load_s, std::numeric_limits<double>::quiet_NaN(), true);
        } else if (sub == "length") {
            LengthOptions o;
            o.seed = to.seeds.front();
            if (!f.lengths.empty()) {
                o.lengths = f.lengths;
            }
            rep = bench_length_ablation(m, items, o);
        } else {
            throw ConfigError("unknown bench '" + sub + "'");
        }
    }
    rep.save(f.common.out);
    rep.write_tsv(std::cout);
    std::cerr << "wrote " << f.common.out << "/" << rep.name << ".tsv ("
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << "s)\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked diffusion language model toolkit"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    TrainFlags tf;
    auto* train = app.add_subcommand("train", "Pre-train a model on a text corpus");
    add_common(train, tf.common, true);
    add_schedule(train, tf.sched);
    train->add_option("--corpus", tf.corpus, "UTF-8 text, one document per line");
    train->add_option("--objective", tf.objective, "mdm | ar")->capture_default_str();
    train->add_option("--attention", tf.attention, "Override: bidirectional | causal");
    train->add_option("--vocab-extra", tf.vocab_extra, "Characters to add to the corpus vocabulary");
    train->add_option("--seq-len", tf.seq_len, "Packed window length")->capture_default_str();
    train->add_option("--random-length", tf.random_length, "Fraction of windows cut to a random length")
        ->capture_default_str();
    train->add_option("--probe-interval", tf.probe_interval, "Exact-bound probe period (0 = off)")
        ->capture_default_str();
    train->add_option("--probe-len", tf.probe_len, "Probe sequence length (<= 8)")->capture_default_str();
    train->add_flag("--resume", tf.resume, "Continue from --checkpoint (or <out>/model.ckpt)");
    train->add_option("--layers", tf.model.n_layers)->capture_default_str();
    train->add_option("--d-model", tf.model.d_model)->capture_default_str();
    train->add_option("--heads", tf.model.n_heads)->capture_default_str();
    train->add_option("--ffn", tf.model.ffn_dim)->capture_default_str();
    train->add_option("--max-seq-len", tf.model.max_seq_len)->capture_default_str();
    train->add_option("--init-std", tf.model.init_std)->capture_default_str();

    SftFlags sf;
    sf.sched.iters = 0;
    sf.sched.warmup = 100;
    auto* sftc = app.add_subcommand("sft", "Supervised fine-tuning on prompt/response pairs");
    add_common(sftc, sf.common, true);
    add_schedule(sftc, sf.sched);
    sftc->add_option("--data", sf.data, "JSONL pairs");
    sftc->add_option("--epochs", sf.epochs, "Used when --iters is 0")->capture_default_str();

    SampleFlags smp;
    auto* sample = app.add_subcommand("sample", "Generate a response");
    add_common(sample, smp.common, true);
    add_sampler(sample, smp.sampler);
    sample->add_option("--prompt", smp.prompt, "Prompt text");
    sample->add_option("--trace", smp.trace, "Write the decode trace (TSV)");
    sample->add_flag("--raw", smp.raw, "Print the raw generation including EOS tokens");

    EvalFlags ef;
    auto* eval = app.add_subcommand("eval", "Likelihood-based multiple-choice evaluation");
    add_common(eval, ef.common, true);
    eval->add_option("--data", ef.data, "JSONL items");
    eval->add_option("--nmc", ef.n_mc, "Monte Carlo draws per candidate")->capture_default_str();

    GenFlags gf;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus");
    add_common(gen, gf.common, false);
    gen->add_option("kind", gf.kind, "copy | sort | arithmetic | reversal")
        ->required()
        ->check(CLI::IsMember({"copy", "sort", "arithmetic", "reversal"}));
    gen->add_option("--size", gf.size, "Training pairs")->capture_default_str();
    gen->add_option("--test-size", gf.test_size, "Held-out pairs")->capture_default_str();
    gen->add_option("--min-len", gf.min_len)->capture_default_str();
    gen->add_option("--max-len", gf.max_len)->capture_default_str();
    gen->add_option("--pairs", gf.pairs, "Reversal pairs")->capture_default_str();
    gen->add_option("--string-len", gf.string_len, "Reversal string length")->capture_default_str();

    BenchFlags bf;
    std::string bench_sub;
    auto* bench = app.add_subcommand("bench", "Run a benchmark");
    add_common(bench, bf.common, true);
    bench->add_option("name", bench_sub, "reversal | remask | modes | cfg | steps | scaling | length")
        ->required()
        ->check(CLI::IsMember({"reversal", "remask", "modes", "cfg", "steps", "scaling", "length"}));
    bench->add_option("--data", bf.data, "Held-out task pairs (JSONL)");
    bench->add_option("--items", bf.items, "Use at most this many items")->capture_default_str();
    bench->add_option("--len", bf.len, "Generation length")->capture_default_str();
    bench->add_option("--steps", bf.steps, "Sampling steps (0 = length)")->capture_default_str();
    bench->add_option("--seeds", bf.seeds, "Comma-separated sampling seeds")->capture_default_str();
    bench->add_option("--mdm", bf.mdm, "Masked diffusion checkpoint (reversal)");
    bench->add_option("--ar", bf.ar, "Autoregressive checkpoint (reversal)");
    bench->add_option("--forward", bf.forward, "Forward probes JSONL (reversal)");
    bench->add_option("--reversal", bf.reversal, "Reversal probes JSONL (reversal)");
    bench->add_option("--blocks", bf.blocks, "Block lengths (modes)")->capture_default_str();
    bench->add_option("--grid", bf.grid, "Guidance scales (cfg)")->capture_default_str();
    bench->add_option("--lengths", bf.lengths, "Generation lengths (steps, length)");
    bench->add_option("--corpus", bf.corpus, "Pre-training corpus (scaling)");
    bench->add_option("--sft-data", bf.sft_data, "SFT pairs (scaling)");
    bench->add_option("--sizes", bf.sizes, "Model sizes <d_model>x<layers> (scaling)")->capture_default_str();
    bench->add_option("--iters", bf.iters, "Pre-training iterations per model (scaling)")->capture_default_str();
    bench->add_option("--sft-iters", bf.sft_iters, "SFT iterations per model (scaling)")->capture_default_str();
    bench->add_option("--batch", bf.batch, "Batch size (scaling)")->capture_default_str();
    bench->add_option("--seq-len", bf.seq_len, "Window length (scaling)")->capture_default_str();
    bench->add_option("--lr", bf.lr, "Stable learning rate (scaling)")->capture_default_str();

    std::vector<std::string> args;
    try {
        args = expand_config(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*train) {
            return cmd_train(tf);
        }
        if (*sftc) {
            return cmd_sft(sf);
        }
        if (*sample) {
            return cmd_sample(smp);
        }
        if (*eval) {
            return cmd_eval(ef);
        }
        if (*gen) {
            return cmd_gen_data(gf);
        }
        if (*bench) {
            return cmd_bench(bench_sub, bf);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/data.hpp"
#include "mdlm/diffusion.hpp"
#include "mdlm/error.hpp"
#include "mdlm/predictor.hpp"
#include "mdlm/rng.hpp"

namespace mdlm {

inline constexpr std::size_t kDefaultMcSamples = 128;

struct LikelihoodEstimate {
    double mean = 0.0;
    std::vector<double> per_draw;
    std::size_t n_mc = 0;
    double stderr_ = 0.0;

    double sample_variance() const {
        if (per_draw.size() < 2) {
            return 0.0;
        }
        double ss = 0.0;
        for (double v : per_draw) {
            ss += (v - mean) * (v - mean);
        }
        return ss / static_cast<double>(per_draw.size() - 1);
    }
};

inline LikelihoodEstimate summarize_draws(std::vector<double> draws) {
    LikelihoodEstimate e;
    e.n_mc = draws.size();
    double sum = 0.0;
    for (double v : draws) {
        sum += v;
    }
    e.mean = draws.empty() ? 0.0 : sum / static_cast<double>(draws.size());
    e.per_draw = std::move(draws);
    e.stderr_ = std::sqrt(e.sample_variance() / static_cast<double>(std::max<std::size_t>(e.n_mc, 1)));
    return e;
}

namespace detail {

inline void check_estimate_args(std::span<const TokenId> response, std::size_t n_mc) {
    if (n_mc == 0) {
        throw ConfigError("number of Monte Carlo draws must be >= 1");
    }
    if (response.empty()) {
        throw PreconditionError("response is empty");
    }
}

} // namespace detail

// Count-form conditional bound: each draw picks l ~ U{1..L}, masks exactly l
// response tokens and scores (L/l) * sum of their NLLs. Draw k uses substream
// k of `seed`, so results do not depend on evaluation order.
template <MaskPredictor P>
LikelihoodEstimate estimate_cond_nll_seeded(const P& pred, std::span<const TokenId> prompt,
                                            std::span<const TokenId> response, std::size_t n_mc, std::uint64_t seed) {
    detail::check_estimate_args(response, n_mc);
    std::vector<double> draws(n_mc);
    for (std::size_t k = 0; k < n_mc; ++k) {
        Rng r = Rng::substream(seed, k);
        draws[k] = bound_l_draw(pred, prompt, response, r);
    }
    return summarize_draws(std::move(draws));
}

template <MaskPredictor P>
LikelihoodEstimate estimate_cond_nll(const P& pred, std::span<const TokenId> prompt, std::span<const TokenId> response,
                                     std::size_t n_mc, Rng& rng) {
    detail::check_estimate_args(response, n_mc);
    return estimate_cond_nll_seeded(pred, prompt, response, n_mc, rng.next_u64());
}

// The t-form estimator on the same instance: t ~ U(0,1], each response token
// masked w.p. t, (1/t) * sum of masked NLLs. Kept for variance comparisons.
template <MaskPredictor P>
LikelihoodEstimate estimate_cond_nll_t(const P& pred, std::span<const TokenId> prompt,
                                       std::span<const TokenId> response, std::size_t n_mc, Rng& rng) {
    detail::check_estimate_args(response, n_mc);
    const std::uint64_t seed = rng.next_u64();
    std::vector<double> draws(n_mc);
    for (std::size_t k = 0; k < n_mc; ++k) {
        Rng r = Rng::substream(seed, k);
        draws[k] = bound_t_draw(pred, prompt, response, r);
    }
    return summarize_draws(std::move(draws));
}

struct ChoiceResult {
    std::size_t chosen = 0;
    std::vector<double> scores; // estimated NLL bound per candidate
};

// Lowest score wins; ties go to the lowest index.
inline std::size_t argmin_first(std::span<const double> scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] < scores[best]) {
            best = i;
        }
    }
    return best;
}

// Every candidate is scored with the same draw seeds (common random numbers),
// so identical candidates get identical estimates.
template <MaskPredictor P>
ChoiceResult multiple_choice(const P& pred, std::span<const TokenId> prompt, const std::vector<TokenSeq>& candidates,
                             std::size_t n_mc, Rng& rng) {
    if (candidates.empty()) {
        throw ConfigError("multiple choice needs at least one candidate");
    }
    if (n_mc == 0) {
        throw ConfigError("number of Monte Carlo draws must be >= 1");
    }
    const std::uint64_t seed = rng.next_u64();
    ChoiceResult res;
    for (const TokenSeq& c : candidates) {
        res.scores.push_back(estimate_cond_nll_seeded(pred, prompt, c, n_mc, seed).mean);
    }
    res.chosen = argmin_first(res.scores);
    return res;
}

// --------------------------------------------------------- eval files ----

struct EvalItem {
    std::string task;
    std::string id;
    std::string prompt;
    std::vector<std::string> candidates;
    std::size_t answer = 0;
};

// One JSON object per line:
// {"id": "...", "task": "...", "prompt": "...", "candidates": [...], "answer": k}
// "task" and "id" are optional (default "eval" and the line number).
inline std::vector<EvalItem> read_eval_jsonl(std::istream& in) {
    std::vector<EvalItem> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = "line " + std::to_string(lineno) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            EvalItem item;
            item.task = j.value("task", std::string("eval"));
            item.id = j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump())
                                       : std::to_string(lineno);
            item.prompt = j.at("prompt").get<std::string>();
            item.candidates = j.at("candidates").get<std::vector<std::string>>();
            item.answer = j.at("answer").get<std::size_t>();
            if (item.candidates.size() < 2) {
                throw FormatError("at least two candidates are required");
            }
            if (item.answer >= item.candidates.size()) {
                throw FormatError("answer index " + std::to_string(item.answer) + " out of range");
            }
            out.push_back(std::move(item));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(where + e.what());
        } catch (const FormatError& e) {
            throw FormatError(where + e.what());
        }
    }
    return out;
}

struct EvalRow {
    std::string task;
    std::string item_id;
    std::size_t candidate_count = 0;
    std::size_t n_mc = 0;
    std::size_t chosen = 0;
    bool correct = false;
};

inline void write_eval_header(std::ostream& os) {
    os << "task\titem_id\tcandidate_count\tn_mc\tchosen\tcorrect\n";
}

inline void write_eval_row(std::ostream& os, const EvalRow& r) {
    os << r.task << '\t' << r.item_id << '\t' << r.candidate_count << '\t' << r.n_mc << '\t' << r.chosen << '\t'
       << (r.correct ? 1 : 0) << '\n';
}

// Item k is scored with substream k of `seed`.
template <MaskPredictor P>
std::vector<EvalRow> evaluate_items(const P& pred, const Vocab& vocab, const std::vector<EvalItem>& items,
                                    std::size_t n_mc, std::uint64_t seed) {
    std::vector<EvalRow> rows;
    for (std::size_t k = 0; k < items.size(); ++k) {
        const EvalItem& it = items[k];
        const TokenSeq prompt = vocab.encode(it.prompt);
        std::vector<TokenSeq> cands;
        for (const std::string& c : it.candidates) {
            cands.push_back(vocab.encode(c));
        }
        Rng rng = Rng::substream(seed, k);
        const ChoiceResult res = multiple_choice(pred, prompt, cands, n_mc, rng);
        rows.push_back({it.task, it.id, cands.size(), n_mc, res.chosen, res.chosen == it.answer});
    }
    return rows;
}

} // namespace mdlm

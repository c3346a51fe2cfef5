#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/error.hpp"
#include "mdlm/rng.hpp"
#include "mdlm/tokens.hpp"

namespace mdlm {

// ---------------------------------------------------------------- UTF-8 ----

inline std::u32string utf8_decode(std::string_view s) {
    std::u32string out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t len;
        char32_t cp;
        if (c < 0x80) {
            len = 1;
            cp = c;
        } else if ((c >> 5) == 0x6) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c >> 4) == 0xE) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c >> 3) == 0x1E) {
            len = 4;
            cp = c & 0x07;
        } else {
            throw FormatError("invalid UTF-8 lead byte at offset " + std::to_string(i));
        }
        if (i + len > s.size()) {
            throw FormatError("truncated UTF-8 sequence at offset " + std::to_string(i));
        }
        for (std::size_t k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc >> 6) != 0x2) {
                throw FormatError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
            }
            cp = (cp << 6) | (cc & 0x3F);
        }
        out.push_back(cp);
        i += len;
    }
    return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

inline std::string utf8_encode(std::u32string_view s) {
    std::string out;
    for (char32_t cp : s) {
        utf8_append(out, cp);
    }
    return out;
}

// ---------------------------------------------------------------- Vocab ----

// Character-level vocabulary: sorted distinct code points get ids 0..n-1,
// then eos = n and mask = n+1. Raw text can never encode to either.
class Vocab {
public:
    Vocab() = default;

    static Vocab from_text(std::string_view utf8) {
        const std::u32string cps = utf8_decode(utf8);
        std::set<char32_t> uniq(cps.begin(), cps.end());
        Vocab v;
        v.chars_.assign(uniq.begin(), uniq.end());
        for (std::size_t i = 0; i < v.chars_.size(); ++i) {
            v.index_.emplace(v.chars_[i], static_cast<TokenId>(i));
        }
        return v;
    }

    std::size_t size() const { return chars_.size() + 2; }
    TokenId eos_id() const { return static_cast<TokenId>(chars_.size()); }
    TokenId mask_id() const { return static_cast<TokenId>(chars_.size() + 1); }
    SpecialTokens special() const { return {mask_id(), eos_id()}; }

    // All characters in id order, UTF-8 encoded (the serialised form).
    std::string chars_utf8() const { return utf8_encode(std::u32string(chars_.begin(), chars_.end())); }

    bool contains(char32_t c) const { return index_.count(c) != 0; }

    TokenSeq encode(std::string_view utf8) const {
        TokenSeq out;
        for (char32_t cp : utf8_decode(utf8)) {
            auto it = index_.find(cp);
            if (it == index_.end()) {
                std::string ch;
                utf8_append(ch, cp);
                throw FormatError("character '" + ch + "' is not in the vocabulary");
            }
            out.push_back(it->second);
        }
        return out;
    }

    // Special ids render as <eos> / <mask>.
    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (TokenId id : ids) {
            out += token_text(id);
        }
        return out;
    }

    std::string token_text(TokenId id) const {
        if (id == eos_id()) {
            return "<eos>";
        }
        if (id == mask_id()) {
            return "<mask>";
        }
        if (id < 0 || static_cast<std::size_t>(id) >= chars_.size()) {
            return "<unk>";
        }
        std::string s;
        utf8_append(s, chars_[static_cast<std::size_t>(id)]);
        return s;
    }

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.chars_ == b.chars_; }

private:
    std::vector<char32_t> chars_;
    std::map<char32_t, TokenId> index_;
};

// ------------------------------------------------------- pre-training ----

// Non-empty lines of a corpus file; each line is one document.
inline std::vector<std::string> split_documents(std::string_view text) {
    std::vector<std::string> docs;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        std::string_view line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (!line.empty()) {
            docs.emplace_back(line);
        }
        start = end + 1;
    }
    return docs;
}

// Encodes documents into one stream, each followed by a single eos, and cuts
// it into seq_len windows. A trailing partial window is dropped.
inline std::vector<TokenSeq> pack_pretrain(const std::vector<std::string>& documents, const Vocab& vocab,
                                           std::size_t seq_len) {
    if (seq_len == 0) {
        throw ConfigError("sequence length must be >= 1");
    }
    TokenSeq stream;
    for (const std::string& doc : documents) {
        const TokenSeq ids = vocab.encode(doc);
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(vocab.eos_id());
    }
    std::vector<TokenSeq> out;
    for (std::size_t off = 0; off + seq_len <= stream.size(); off += seq_len) {
        out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(off),
                         stream.begin() + static_cast<std::ptrdiff_t>(off + seq_len));
    }
    return out;
}

// With probability `fraction` each sequence is cut to a length ~ U[1, max_len].
inline std::vector<TokenSeq> apply_random_length(std::vector<TokenSeq> batch, double fraction, std::size_t max_len,
                                                 Rng& rng) {
    if (fraction < 0.0 || fraction > 1.0) {
        throw ConfigError("random-length fraction must lie in [0, 1]");
    }
    if (fraction == 0.0) {
        return batch;
    }
    for (TokenSeq& seq : batch) {
        if (rng.bernoulli(fraction)) {
            const std::size_t len = 1 + rng.below(std::max<std::size_t>(max_len, 1));
            if (len < seq.size()) {
                seq.resize(len);
            }
        }
    }
    return batch;
}

// ---------------------------------------------------------------- SFT ----

struct SftPair {
    TokenSeq prompt;
    TokenSeq response;

    friend bool operator==(const SftPair&, const SftPair&) = default;
};

struct TextPair {
    std::string prompt;
    std::string response;

    friend bool operator==(const TextPair&, const TextPair&) = default;
};

inline SftPair encode_pair(const TextPair& p, const Vocab& vocab) {
    return {vocab.encode(p.prompt), vocab.encode(p.response)};
}

// Pads every response with eos up to the longest response in the batch. The
// padding is part of the response: it gets masked and scored like any token.
inline std::vector<SftPair> prepare_sft_batch(std::vector<SftPair> pairs, TokenId eos_id) {
    std::size_t longest = 0;
    for (const SftPair& p : pairs) {
        longest = std::max(longest, p.response.size());
    }
    for (SftPair& p : pairs) {
        p.response.resize(longest, eos_id);
    }
    return pairs;
}

// (p0, r0, p1, r1, ...) -> pairs (p0, r0), (p0 r0 p1, r1), ...
inline std::vector<TextPair> split_multiturn(const std::vector<std::string>& turns) {
    if (turns.empty() || turns.size() % 2 != 0) {
        throw FormatError("multi-turn dialogue needs a nonempty, even number of alternating prompt/response turns, got " +
                          std::to_string(turns.size()));
    }
    std::vector<TextPair> out;
    std::string history;
    for (std::size_t k = 0; k < turns.size(); k += 2) {
        history += turns[k];
        out.push_back({history, turns[k + 1]});
        history += turns[k + 1];
    }
    return out;
}

// One JSON object per line: {"prompt": ..., "response": ...} or
// {"turns": [p0, r0, p1, r1, ...]}. Blank lines are skipped.
inline std::vector<TextPair> read_sft_jsonl(std::istream& in) {
    std::vector<TextPair> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            if (j.contains("turns")) {
                const auto pairs = split_multiturn(j.at("turns").get<std::vector<std::string>>());
                out.insert(out.end(), pairs.begin(), pairs.end());
            } else {
                out.push_back({j.at("prompt").get<std::string>(), j.at("response").get<std::string>()});
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::string to_jsonl(const TextPair& p) {
    return nlohmann::json{{"prompt", p.prompt}, {"response", p.response}}.dump();
}

// ---------------------------------------------------- synthetic tasks ----

enum class TaskKind { copy, sort, arithmetic };

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") {
        return TaskKind::copy;
    }
    if (s == "sort") {
        return TaskKind::sort;
    }
    if (s == "arithmetic") {
        return TaskKind::arithmetic;
    }
    throw ConfigError("unknown task kind '" + s + "' (expected copy, sort or arithmetic)");
}

inline const char* to_string(TaskKind k) {
    switch (k) {
    case TaskKind::copy:
        return "copy";
    case TaskKind::sort:
        return "sort";
    case TaskKind::arithmetic:
        return "arithmetic";
    }
    return "?";
}

struct TaskOptions {
    std::size_t min_len = 3; // copy/sort string length range
    std::size_t max_len = 8;
    std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
};

inline std::string random_string(Rng& rng, std::size_t len, std::string_view alphabet) {
    std::string s;
    for (std::size_t i = 0; i < len; ++i) {
        s.push_back(alphabet[rng.below(alphabet.size())]);
    }
    return s;
}

inline TextPair make_task_example(TaskKind kind, std::string_view input) {
    switch (kind) {
    case TaskKind::copy:
        return {std::string(input), std::string(input)};
    case TaskKind::sort: {
        std::string sorted(input);
        std::sort(sorted.begin(), sorted.end());
        return {std::string(input), sorted};
    }
    case TaskKind::arithmetic: {
        // "ab+cd=" with two-digit zero-padded operands.
        const auto plus = input.find('+');
        const auto eq = input.find('=');
        if (plus == std::string_view::npos || eq == std::string_view::npos) {
            throw FormatError("arithmetic prompt must look like 12+07=");
        }
        const int a = std::stoi(std::string(input.substr(0, plus)));
        const int b = std::stoi(std::string(input.substr(plus + 1, eq - plus - 1)));
        return {std::string(input), std::to_string(a + b)};
    }
    }
    throw ConfigError("unknown task kind");
}

inline std::vector<TextPair> gen_task_corpora(TaskKind kind, std::size_t size, Rng& rng, const TaskOptions& opt = {}) {
    if (kind != TaskKind::arithmetic && (opt.min_len == 0 || opt.min_len > opt.max_len || opt.alphabet.empty())) {
        throw ConfigError("task strings need 1 <= min_len <= max_len and a nonempty alphabet");
    }
    std::vector<TextPair> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        if (kind == TaskKind::arithmetic) {
            const auto a = rng.below(100), b = rng.below(100);
            char buf[16];
            std::snprintf(buf, sizeof buf, "%02zu+%02zu=", a, b);
            out.push_back(make_task_example(kind, buf));
        } else {
            const std::size_t len = opt.min_len + rng.below(opt.max_len - opt.min_len + 1);
            out.push_back(make_task_example(kind, random_string(rng, len, opt.alphabet)));
        }
    }
    return out;
}

// Training documents for a task: prompt immediately followed by response.
inline std::vector<std::string> task_documents(const std::vector<TextPair>& pairs) {
    std::vector<std::string> docs;
    docs.reserve(pairs.size());
    for (const TextPair& p : pairs) {
        docs.push_back(p.prompt + p.response);
    }
    return docs;
}

// ------------------------------------------------------------ reversal ----

inline constexpr char kRelationChar = '>';
inline constexpr char kReverseRelationChar = '<';

struct ReversalProbe {
    std::string cue;
    std::string answer;
};

struct ReversalData {
    std::vector<std::string> corpus; // one "A>B" document per pair
    std::vector<ReversalProbe> forward;  // cue A, answer B
    std::vector<ReversalProbe> reversal; // cue B, answer A
};

struct ReversalOptions {
    std::size_t string_len = 3;
    std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
};

// Distinct random strings A_k, B_k (rejection sampled so no string repeats
// anywhere); the corpus only ever shows A_k before B_k.
inline ReversalData gen_reversal_pairs(std::size_t n_pairs, Rng& rng, const ReversalOptions& opt = {}) {
    const double space = std::pow(static_cast<double>(opt.alphabet.size()), static_cast<double>(opt.string_len));
    if (opt.alphabet.empty() || opt.string_len == 0 || static_cast<double>(2 * n_pairs) > space) {
        throw ConfigError("cannot draw " + std::to_string(2 * n_pairs) + " distinct strings of length " +
                          std::to_string(opt.string_len) + " over " + std::to_string(opt.alphabet.size()) + " letters");
    }
    std::set<std::string> used;
    auto fresh = [&] {
        for (;;) {
            std::string s = random_string(rng, opt.string_len, opt.alphabet);
            if (used.insert(s).second) {
                return s;
            }
        }
    };
    ReversalData d;
    for (std::size_t k = 0; k < n_pairs; ++k) {
        const std::string a = fresh();
        const std::string b = fresh();
        d.corpus.push_back(a + kRelationChar + b);
        d.forward.push_back({a, b});
        d.reversal.push_back({b, a});
    }
    return d;
}

} // namespace mdlm

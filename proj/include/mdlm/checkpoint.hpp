#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mdlm/error.hpp"
#include "mdlm/model.hpp"

// Layout (all integers little-endian):
//   "MDLM" | u32 version | u64 n + n bytes UTF-8 JSON config record
//   | u64 count | count x { u64 n + name | u32 rank | rank x u64 dim | f32 data }
// Records appear in lexicographic name order.
namespace mdlm {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'L', 'M'};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},         {"d_model", c.d_model},
            {"n_heads", c.n_heads},           {"ffn_dim", c.ffn_dim},
            {"vocab_size", c.vocab_size},     {"max_seq_len", c.max_seq_len},
            {"rope_base", c.rope_base},       {"attention_mode", to_string(c.attention_mode)},
            {"init_std", c.init_std},         {"rms_eps", c.rms_eps},
            {"mask_id", c.mask_id},           {"eos_id", c.eos_id}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.rope_base = j.at("rope_base").get<double>();
        c.attention_mode = attention_mode_from_string(j.at("attention_mode").get<std::string>());
        c.init_std = j.at("init_std").get<double>();
        c.rms_eps = j.at("rms_eps").get<double>();
        c.mask_id = j.at("mask_id").get<TokenId>();
        c.eos_id = j.at("eos_id").get<TokenId>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config record: ") + e.what());
    }
}

struct Checkpoint {
    ModelConfig config;
    ParameterSet params;
    nlohmann::json meta = nlohmann::json::object(); // vocab, iteration, objective, ...
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        b[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
    }
    os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
    unsigned char b[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) {
        throw FormatError("checkpoint truncated");
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    }
    return static_cast<U>(v);
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_le<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint64_t limit) {
    const auto n = get_le<std::uint64_t>(is);
    if (n > limit) {
        throw FormatError("checkpoint string length " + std::to_string(n) + " is implausible");
    }
    std::string s(n, '\0');
    if (!is.read(s.data(), static_cast<std::streamsize>(n))) {
        throw FormatError("checkpoint truncated");
    }
    return s;
}

} // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    os.write(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    nlohmann::json rec = {{"model", config_to_json(ck.config)}, {"meta", ck.meta}};
    detail::put_string(os, rec.dump());
    detail::put_le<std::uint64_t>(os, ck.params.size());
    for (const auto& [name, t] : ck.params) { // std::map: lexicographic order
        detail::put_string(os, name);
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape) {
            detail::put_le<std::uint64_t>(os, d);
        }
        for (float v : t.data) {
            detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
        }
    }
    if (!os) {
        throw Error("failed writing checkpoint");
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError("not a checkpoint (bad magic)");
    }
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    nlohmann::json rec;
    try {
        rec = nlohmann::json::parse(detail::get_string(is, 1u << 26));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint config record: ") + e.what());
    }
    ck.config = config_from_json(rec.at("model"));
    ck.meta = rec.value("meta", nlohmann::json::object());
    const auto count = detail::get_le<std::uint64_t>(is);
    for (std::uint64_t k = 0; k < count; ++k) {
        std::string name = detail::get_string(is, 4096);
        const auto rank = detail::get_le<std::uint32_t>(is);
        if (rank > 8) {
            throw FormatError("parameter '" + name + "' has implausible rank");
        }
        Shape shape(rank);
        for (auto& d : shape) {
            d = detail::get_le<std::uint64_t>(is);
        }
        Tensor t(shape);
        for (float& v : t.data) {
            v = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
        }
        t.requires_grad = true;
        ck.params.emplace(std::move(name), std::move(t));
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ostringstream buf;
    write_checkpoint(buf, ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw Error("cannot open '" + tmp + "' for writing");
        }
        const std::string bytes = buf.str();
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw Error("failed writing '" + tmp + "'");
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw Error("cannot rename '" + tmp + "' to '" + path + "'");
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw Error("cannot open checkpoint '" + path + "'");
    }
    Checkpoint ck = read_checkpoint(f);
    ck.config.validate();
    return ck;
}

// Also checks the parameters against the architecture in the record.
inline Checkpoint load_model_checkpoint(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    check_params(ck.config, ck.params);
    return ck;
}

} // namespace mdlm

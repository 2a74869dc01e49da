#pragma once

// Versioned binary checkpoint container.
//
// Layout: 8-byte magic, little-endian u64 manifest size, JSON manifest,
// then the raw tensor payloads in manifest order as little-endian IEEE-754
// doubles. Save -> load round-trips are bit-exact, which the trainer's
// interrupt/resume determinism depends on.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "model.hpp"
#include "tensor.hpp"

namespace tokpo {

inline constexpr char kCheckpointMagic[8] = {'T', 'O', 'K', 'P', 'O', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Bundle {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    }
    bool contains(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }
};

namespace detail {

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f64(std::vector<unsigned char>& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_u64(out, bits);
}

inline double get_f64(const unsigned char* p) {
    const std::uint64_t bits = get_u64(p);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

}  // namespace detail

inline void save_bundle(const std::string& path, const Bundle& bundle) {
    nlohmann::json manifest;
    manifest["format"] = "tokpo-checkpoint";
    manifest["version"] = kCheckpointVersion;
    manifest["meta"] = bundle.meta;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : bundle.tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        tensors.push_back(e);
    }
    manifest["tensors"] = tensors;
    const std::string mjson = manifest.dump();

    std::vector<unsigned char> buf;
    buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 8);
    detail::put_u64(buf, mjson.size());
    buf.insert(buf.end(), mjson.begin(), mjson.end());
    for (const auto& [name, t] : bundle.tensors)
        for (double v : t.data()) detail::put_f64(buf, v);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline Bundle load_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
    const std::uint64_t mlen = detail::get_u64(buf.data() + 8);
    if (16 + mlen > buf.size())
        throw std::runtime_error("checkpoint: truncated manifest in '" + path + "'");
    nlohmann::json manifest = nlohmann::json::parse(
        std::string(reinterpret_cast<const char*>(buf.data() + 16), mlen));
    if (manifest.value("version", 0u) != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version in '" + path + "'");

    Bundle bundle;
    bundle.meta = manifest["meta"];
    std::size_t off = 16 + static_cast<std::size_t>(mlen);
    for (const auto& e : manifest["tensors"]) {
        Shape shape = e["shape"].get<Shape>();
        const std::size_t n = static_cast<std::size_t>(shape_numel(shape));
        if (off + 8 * n > buf.size())
            throw std::runtime_error("checkpoint: truncated payload for tensor '" +
                                     e["name"].get<std::string>() + "' in '" + path + "'");
        std::vector<double> vals(n);
        for (std::size_t i = 0; i < n; ++i) vals[i] = detail::get_f64(buf.data() + off + 8 * i);
        off += 8 * n;
        bundle.tensors.emplace_back(e["name"].get<std::string>(),
                                    Tensor::from(std::move(shape), std::move(vals)));
    }
    return bundle;
}

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size}, {"context_len", cfg.context_len},
            {"n_layers", cfg.n_layers},     {"d_model", cfg.d_model},
            {"n_heads", cfg.n_heads},       {"ffn_mult", cfg.ffn_mult},
            {"seed", cfg.seed},             {"ln_eps", cfg.ln_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<std::int64_t>();
    cfg.context_len = j.at("context_len").get<std::int64_t>();
    cfg.n_layers = j.at("n_layers").get<std::int64_t>();
    cfg.d_model = j.at("d_model").get<std::int64_t>();
    cfg.n_heads = j.at("n_heads").get<std::int64_t>();
    cfg.ffn_mult = j.at("ffn_mult").get<std::int64_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.ln_eps = j.at("ln_eps").get<double>();
    return cfg;
}

// Appends every model parameter to the bundle under a name prefix.
inline void pack_model(Bundle& bundle, TransformerLM& model, const std::string& prefix = "") {
    for (auto& [name, t] : model.named_params()) bundle.tensors.emplace_back(prefix + name, *t);
}

// Restores parameters in place; shapes must match the constructed model.
inline void unpack_model(const Bundle& bundle, TransformerLM& model,
                         const std::string& prefix = "") {
    for (auto& [name, t] : model.named_params()) {
        const Tensor& src = bundle.find(prefix + name);
        if (src.shape() != t->shape())
            throw std::runtime_error("checkpoint: tensor '" + prefix + name + "' has shape " +
                                     shape_str(src.shape()) + ", expected " +
                                     shape_str(t->shape()));
        t->data() = src.data();
    }
}

inline void save_model(const std::string& path, TransformerLM& model,
                       nlohmann::json extra_meta = {}) {
    Bundle bundle;
    bundle.meta["kind"] = "model";
    bundle.meta["model_config"] = model_config_json(model.config());
    if (!extra_meta.is_null())
        for (auto& [k, v] : extra_meta.items()) bundle.meta[k] = v;
    pack_model(bundle, model);
    save_bundle(path, bundle);
}

inline TransformerLM load_model(const std::string& path) {
    Bundle bundle = load_bundle(path);
    TransformerLM model(model_config_from_json(bundle.meta.at("model_config")));
    unpack_model(bundle, model);
    return model;
}

}  // namespace tokpo

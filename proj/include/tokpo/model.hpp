#pragma once

// Tiny decoder-only causal transformer used as both policy and reference.
//
// Pre-norm blocks, learned positional embeddings, multi-head attention
// without biases, biased two-layer FFN, untied output projection. Forward
// passes return a ForwardTrace carrying everything downstream consumers
// need: full next-token log-distributions, per-layer hidden states, and
// activation taps (attention output, FFN output, post-residual stream).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace tokpo {

struct ModelConfig {
    std::int64_t vocab_size = 64;
    std::int64_t context_len = 64;
    std::int64_t n_layers = 2;
    std::int64_t d_model = 64;
    std::int64_t n_heads = 4;
    std::int64_t ffn_mult = 4;
    std::uint64_t seed = 1;
    double ln_eps = 1e-5;

    std::int64_t head_dim() const { return d_model / n_heads; }
    std::int64_t ffn_dim() const { return d_model * ffn_mult; }

    void validate() const {
        if (d_model % n_heads != 0)
            detail::op_fail("ModelConfig", "d_model " + std::to_string(d_model) +
                                               " not divisible by n_heads " +
                                               std::to_string(n_heads));
        if (vocab_size < 2 || context_len < 2 || n_layers < 1 || ffn_mult < 1)
            detail::op_fail("ModelConfig", "degenerate dimensions");
    }
};

struct LayerParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor w_in, b_in, w_out, b_out;
};

struct LayerTaps {
    Tensor attn_out;  // attention block output, before the residual add
    Tensor ffn_out;   // FFN block output, before the residual add
    Tensor resid;     // residual stream after the block
};

struct ForwardTrace {
    Tensor logits;               // [T, vocab]
    Tensor log_dist;             // [T, vocab], rows normalize to 1
    std::vector<Tensor> hidden;  // per layer, residual stream after the block, [T, d]
    std::vector<LayerTaps> taps;
    bool has_taps = false;
};

class TransformerLM {
public:
    TransformerLM() = default;

    explicit TransformerLM(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        const auto V = cfg_.vocab_size, C = cfg_.context_len, d = cfg_.d_model;
        const auto f = cfg_.ffn_dim();
        tok_emb_ = init_weight(rng, {V, d}, 0.02);
        pos_emb_ = init_weight(rng, {C, d}, 0.02);
        // Residual-feeding projections are shrunk with depth so the stream
        // stays well scaled at init.
        const double resid_scale = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
        layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
        for (auto& l : layers_) {
            l.ln1_gain = Tensor::full({d}, 1.0, true);
            l.ln1_bias = Tensor::zeros({d}, true);
            l.wq = init_weight(rng, {d, d}, 0.02);
            l.wk = init_weight(rng, {d, d}, 0.02);
            l.wv = init_weight(rng, {d, d}, 0.02);
            l.wo = init_weight(rng, {d, d}, resid_scale);
            l.ln2_gain = Tensor::full({d}, 1.0, true);
            l.ln2_bias = Tensor::zeros({d}, true);
            l.w_in = init_weight(rng, {d, f}, 0.02);
            l.b_in = Tensor::zeros({f}, true);
            l.w_out = init_weight(rng, {f, d}, resid_scale);
            l.b_out = Tensor::zeros({d}, true);
        }
        lnf_gain_ = Tensor::full({d}, 1.0, true);
        lnf_bias_ = Tensor::zeros({d}, true);
        head_ = init_weight(rng, {d, V}, 0.02);
    }

    const ModelConfig& config() const { return cfg_; }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out;
        out.emplace_back("tok_emb", &tok_emb_);
        out.emplace_back("pos_emb", &pos_emb_);
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const std::string p = "layer" + std::to_string(i) + ".";
            auto& l = layers_[i];
            out.emplace_back(p + "ln1_gain", &l.ln1_gain);
            out.emplace_back(p + "ln1_bias", &l.ln1_bias);
            out.emplace_back(p + "wq", &l.wq);
            out.emplace_back(p + "wk", &l.wk);
            out.emplace_back(p + "wv", &l.wv);
            out.emplace_back(p + "wo", &l.wo);
            out.emplace_back(p + "ln2_gain", &l.ln2_gain);
            out.emplace_back(p + "ln2_bias", &l.ln2_bias);
            out.emplace_back(p + "w_in", &l.w_in);
            out.emplace_back(p + "b_in", &l.b_in);
            out.emplace_back(p + "w_out", &l.w_out);
            out.emplace_back(p + "b_out", &l.b_out);
        }
        out.emplace_back("lnf_gain", &lnf_gain_);
        out.emplace_back("lnf_bias", &lnf_bias_);
        out.emplace_back("head", &head_);
        return out;
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    void set_trainable(bool trainable) {
        for (Tensor* p : params()) p->set_requires_grad(trainable);
    }

    bool trainable() const { return tok_emb_.requires_grad(); }

    // Independent copy with the same values; gradient flags are preserved.
    TransformerLM clone() const {
        TransformerLM other = *this;
        auto mine = const_cast<TransformerLM*>(this)->named_params();
        auto theirs = other.named_params();
        for (std::size_t i = 0; i < mine.size(); ++i) {
            Tensor copy = mine[i].second->clone();
            copy.set_requires_grad(mine[i].second->requires_grad());
            *theirs[i].second = copy;
        }
        return other;
    }

    // Order-stable FNV-1a over the exact bit patterns of every parameter.
    std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ull;
        auto feed = [&h](double v) {
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(v));
            std::memcpy(&bits, &v, sizeof(bits));
            for (int k = 0; k < 8; ++k) {
                h ^= (bits >> (8 * k)) & 0xffull;
                h *= 1099511628211ull;
            }
        };
        for (auto& [name, t] : const_cast<TransformerLM*>(this)->named_params())
            for (double v : t->data()) feed(v);
        return h;
    }

    ForwardTrace forward(const std::vector<int>& tokens, bool want_taps = false) const {
        const std::int64_t T = static_cast<std::int64_t>(tokens.size());
        if (T < 1 || T > cfg_.context_len)
            detail::op_fail("forward", "sequence length " + std::to_string(T) +
                                           " outside [1," + std::to_string(cfg_.context_len) + "]");
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens[i] < 0 || tokens[i] >= cfg_.vocab_size)
                detail::op_fail("forward", "token id " + std::to_string(tokens[i]) +
                                               " at position " + std::to_string(i) +
                                               " outside vocab [0," +
                                               std::to_string(cfg_.vocab_size) + ")");
        std::vector<int> positions(tokens.size());
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

        ForwardTrace trace;
        trace.has_taps = want_taps;
        Tensor x = add(embedding(tok_emb_, tokens), embedding(pos_emb_, positions));
        const Tensor cmask = causal_mask(T);
        const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));

        for (const auto& l : layers_) {
            Tensor a = layer_norm(x, l.ln1_gain, l.ln1_bias, cfg_.ln_eps);
            Tensor q = matmul(a, l.wq);
            Tensor k = matmul(a, l.wk);
            Tensor v = matmul(a, l.wv);
            std::vector<Tensor> heads;
            heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
            const auto hd = cfg_.head_dim();
            for (std::int64_t h = 0; h < cfg_.n_heads; ++h) {
                Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
                Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
                Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
                Tensor scores = add(mul(matmul(qh, transpose(kh)), inv_sqrt_hd), cmask);
                heads.push_back(matmul(softmax(scores), vh));
            }
            Tensor attn_out = matmul(concat(heads, 1), l.wo);
            x = add(x, attn_out);
            Tensor f = layer_norm(x, l.ln2_gain, l.ln2_bias, cfg_.ln_eps);
            Tensor ffn_out =
                add_rowwise(matmul(relu(add_rowwise(matmul(f, l.w_in), l.b_in)), l.w_out), l.b_out);
            x = add(x, ffn_out);
            trace.hidden.push_back(x);
            if (want_taps) trace.taps.push_back({attn_out, ffn_out, x});
        }
        Tensor xf = layer_norm(x, lnf_gain_, lnf_bias_, cfg_.ln_eps);
        trace.logits = matmul(xf, head_);
        trace.log_dist = log_softmax(trace.logits);
        return trace;
    }

    // Autoregressive sampling. top_p = 1 is plain multinomial sampling;
    // greedy = true takes the argmax and ignores the RNG.
    std::vector<int> sample(const std::vector<int>& prompt, std::int64_t max_len,
                            double temperature, double top_p, Rng& rng, int eos_id = -1,
                            bool greedy = false) const {
        if (temperature <= 0.0) detail::op_fail("sample", "temperature must be > 0");
        if (top_p <= 0.0 || top_p > 1.0) detail::op_fail("sample", "top_p must be in (0,1]");
        std::vector<int> seq = prompt;
        std::vector<int> out;
        while (static_cast<std::int64_t>(out.size()) < max_len &&
               static_cast<std::int64_t>(seq.size()) < cfg_.context_len) {
            ForwardTrace trace = forward(seq);
            const std::int64_t V = cfg_.vocab_size;
            const std::int64_t last = static_cast<std::int64_t>(seq.size()) - 1;
            std::vector<double> logits(static_cast<std::size_t>(V));
            for (std::int64_t vtok = 0; vtok < V; ++vtok)
                logits[static_cast<std::size_t>(vtok)] = trace.logits.at(last, vtok) / temperature;
            int pick;
            if (greedy) {
                pick = 0;
                for (std::int64_t vtok = 1; vtok < V; ++vtok)
                    if (logits[static_cast<std::size_t>(vtok)] >
                        logits[static_cast<std::size_t>(pick)])
                        pick = static_cast<int>(vtok);
            } else {
                pick = sample_top_p(logits, top_p, rng);
            }
            out.push_back(pick);
            seq.push_back(pick);
            if (pick == eos_id) break;
        }
        return out;
    }

private:
    static Tensor init_weight(Rng& rng, Shape shape, double scale) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        for (auto& v : t.data()) v = rng.normal(0.0, scale);
        return t;
    }

    static int sample_top_p(const std::vector<double>& logits, double top_p, Rng& rng) {
        const std::size_t V = logits.size();
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        std::vector<double> probs(V);
        double z = 0.0;
        for (std::size_t i = 0; i < V; ++i) {
            probs[i] = std::exp(logits[i] - mx);
            z += probs[i];
        }
        for (auto& p : probs) p /= z;
        std::vector<std::size_t> order(V);
        for (std::size_t i = 0; i < V; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (probs[a] != probs[b]) return probs[a] > probs[b];
            return a < b;
        });
        double cum = 0.0;
        std::size_t keep = 0;
        for (; keep < V; ++keep) {
            cum += probs[order[keep]];
            if (cum >= top_p) {
                ++keep;
                break;
            }
        }
        if (keep == 0) keep = 1;
        const double r = rng.uniform() * cum;
        double acc = 0.0;
        for (std::size_t i = 0; i < keep; ++i) {
            acc += probs[order[i]];
            if (r < acc) return static_cast<int>(order[i]);
        }
        return static_cast<int>(order[keep - 1]);
    }

    ModelConfig cfg_;
    Tensor tok_emb_, pos_emb_;
    std::vector<LayerParams> layers_;
    Tensor lnf_gain_, lnf_bias_;
    Tensor head_;
};

// Per-token log-probabilities of the response tokens. The sequence layout
// is [bos] + prompt + response; the token at sequence position p is
// predicted from row p-1 of the distribution grid.
inline Tensor gather_response_log_probs(const ForwardTrace& trace, const std::vector<int>& tokens,
                                        std::int64_t resp_begin) {
    const std::int64_t T = static_cast<std::int64_t>(tokens.size()) - resp_begin;
    if (resp_begin < 1 || T < 1)
        detail::op_fail("gather_response_log_probs",
                        "response [" + std::to_string(resp_begin) + "," +
                            std::to_string(tokens.size()) + ") needs a predecessor and length >= 1");
    Tensor rows = slice_rows(trace.log_dist, resp_begin - 1, resp_begin - 1 + T);
    std::vector<int> resp(tokens.begin() + resp_begin, tokens.end());
    return select_per_row(rows, resp);
}

}  // namespace tokpo

#pragma once

// Token-level mask strategies over response positions.
//
// The weight attached to response token t is computed from the frozen
// reference model's activations at the sequence row holding that token, so
// by causality it is a function of the prefix up to and including y^t.
// Learned masks are recorded on the tape so their parameters train jointly
// with the policy; every other strategy produces constants.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace tokpo {

enum class MaskKind { AllOnes, Random, Binary, MaPO, LearnedCommon, LearnedIndependent };

inline const char* mask_kind_name(MaskKind k) {
    switch (k) {
        case MaskKind::AllOnes: return "all-ones";
        case MaskKind::Random: return "random";
        case MaskKind::Binary: return "binary";
        case MaskKind::MaPO: return "mapo";
        case MaskKind::LearnedCommon: return "learned-common";
        default: return "learned-independent";
    }
}

struct MaskValues {
    Tensor weights;  // [T], every entry in [eps, 1]
    MaskKind kind = MaskKind::AllOnes;
    double eps = 0.01;

    std::int64_t size() const { return weights.numel(); }
};

// Fraction of weights at or below the threshold.
inline double sparsity(const MaskValues& mask, double zero_threshold) {
    if (mask.weights.numel() == 0) detail::op_fail("sparsity", "empty mask");
    std::int64_t zeroed = 0;
    for (double w : mask.weights.data())
        if (w <= zero_threshold) ++zeroed;
    return static_cast<double>(zeroed) / static_cast<double>(mask.weights.numel());
}

inline MaskValues all_ones_mask(std::int64_t count, double eps) {
    return {Tensor::full({count}, 1.0), MaskKind::AllOnes, eps};
}

// iid uniform [0,1] floored at eps; a pure function of (seed, stream).
inline MaskValues random_mask(std::uint64_t seed, std::uint64_t stream, std::int64_t count,
                              double eps) {
    Rng rng(Rng::derive(seed, stream));
    Tensor w = Tensor::zeros({count});
    for (auto& v : w.data()) v = std::max(rng.uniform(), eps);
    return {w, MaskKind::Random, eps};
}

// ---------------------------------------------------------------------------
// Activation-statistics mask
// ---------------------------------------------------------------------------

// Mean over the feature dimension for each of `count` rows starting at r0.
inline std::vector<double> row_mean_series(const Tensor& activations, std::int64_t r0,
                                           std::int64_t count) {
    if (activations.rank() != 2 || r0 < 0 || r0 + count > activations.dim(0))
        detail::op_fail("row_mean_series", "rows [" + std::to_string(r0) + "," +
                                               std::to_string(r0 + count) + ") of " +
                                               shape_str(activations.shape()));
    const std::int64_t d = activations.dim(1);
    std::vector<double> out(static_cast<std::size_t>(count));
    for (std::int64_t t = 0; t < count; ++t) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < d; ++j) acc += activations.at(r0 + t, j);
        out[static_cast<std::size_t>(t)] = acc / static_cast<double>(d);
    }
    return out;
}

// (x - mean) / population std, elementwise over the series. A constant
// series standardizes to zeros rather than dividing by zero.
inline std::vector<double> standardize_series(const std::vector<double>& series) {
    const double n = static_cast<double>(series.size());
    double mean = 0.0;
    for (double v : series) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : series) var += (v - mean) * (v - mean);
    var /= n;
    std::vector<double> out(series.size(), 0.0);
    if (!(var > 0.0)) return out;
    const double denom = std::sqrt(var);
    for (std::size_t i = 0; i < series.size(); ++i) out[i] = (series[i] - mean) / denom;
    return out;
}

// Standardized per-site series for every tap of every layer, in layer order
// with sites ordered (attention output, FFN output, post-residual).
inline std::vector<std::vector<double>> mapo_site_series(const ForwardTrace& trace,
                                                         std::int64_t row_begin,
                                                         std::int64_t count) {
    if (count < 1) detail::op_fail("mapo_site_series", "empty response");
    if (!trace.has_taps || trace.taps.empty())
        detail::op_fail("mapo_site_series", "trace has no activation taps");
    std::vector<std::vector<double>> out;
    for (const auto& layer : trace.taps) {
        for (const Tensor* site : {&layer.attn_out, &layer.ffn_out, &layer.resid})
            out.push_back(standardize_series(row_mean_series(*site, row_begin, count)));
    }
    return out;
}

// Mean over sites of the standardized mean activations, clamped to [eps, 1].
// Used as both the reward and the divergence mask.
inline MaskValues compute_mapo_mask(const ForwardTrace& ref_trace, std::int64_t row_begin,
                                    std::int64_t count, double eps) {
    const auto sites = mapo_site_series(ref_trace, row_begin, count);
    Tensor w = Tensor::zeros({count});
    auto& wd = w.data();
    for (const auto& s : sites)
        for (std::size_t t = 0; t < s.size(); ++t) wd[t] += s[t];
    for (auto& v : wd) v = std::min(std::max(v / static_cast<double>(sites.size()), eps), 1.0);
    return {w, MaskKind::MaPO, eps};
}

// ---------------------------------------------------------------------------
// Learned mask network
// ---------------------------------------------------------------------------

struct MaskNetworkParams {
    std::vector<Tensor> w;  // per layer, [d, 1]
    std::vector<Tensor> b;  // per layer, [1]
    Tensor w_o;             // [L, 1]

    static MaskNetworkParams init(std::int64_t n_layers, std::int64_t d_model, Rng& rng) {
        MaskNetworkParams p;
        for (std::int64_t l = 0; l < n_layers; ++l) {
            Tensor wl = Tensor::zeros({d_model, 1}, true);
            for (auto& v : wl.data()) v = rng.normal(0.0, 0.02);
            p.w.push_back(wl);
            // Positive bias keeps the ReLU units live at the start so
            // gradients reach the weights from step one.
            p.b.push_back(Tensor::full({1}, 0.5, true));
        }
        p.w_o = Tensor::full({n_layers, 1}, 1.0 / static_cast<double>(n_layers), true);
        return p;
    }

    std::int64_t n_layers() const { return static_cast<std::int64_t>(w.size()); }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> out;
        for (auto& t : w) out.push_back(&t);
        for (auto& t : b) out.push_back(&t);
        out.push_back(&w_o);
        return out;
    }

    std::vector<std::pair<std::string, Tensor*>> named_params(const std::string& prefix) {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (std::size_t l = 0; l < w.size(); ++l) {
            out.emplace_back(prefix + ".w" + std::to_string(l), &w[l]);
            out.emplace_back(prefix + ".b" + std::to_string(l), &b[l]);
        }
        out.emplace_back(prefix + ".w_o", &w_o);
        return out;
    }

    void zero() {
        for (Tensor* p : params())
            std::fill(p->data().begin(), p->data().end(), 0.0);
    }
};

namespace detail {

inline void check_mask_layers(const MaskNetworkParams& params, const std::vector<Tensor>& hidden) {
    if (params.w.size() != hidden.size() || params.b.size() != hidden.size() ||
        params.w_o.numel() != static_cast<std::int64_t>(hidden.size()))
        op_fail("learned_mask_forward",
                "mask parameters cover " + std::to_string(params.w.size()) +
                    " layers but the trace has " + std::to_string(hidden.size()));
}

}  // namespace detail

// Merged pre-activation Concat(ReLU(H^(l) w^(l) + b^(l))) w_o over the
// response rows, shape [T, 1]. On the tape whenever the parameters require
// gradients; hidden states come from the frozen reference so nothing flows
// back into the model.
inline Tensor learned_mask_preactivation(const MaskNetworkParams& params,
                                         const std::vector<Tensor>& hidden,
                                         std::int64_t row_begin, std::int64_t count) {
    detail::check_mask_layers(params, hidden);
    if (count < 1) detail::op_fail("learned_mask_forward", "empty response");
    std::vector<Tensor> per_layer;
    per_layer.reserve(hidden.size());
    for (std::size_t l = 0; l < hidden.size(); ++l) {
        Tensor rows = slice_rows(hidden[l], row_begin, row_begin + count);
        per_layer.push_back(relu(add(matmul(rows, params.w[l]), params.b[l])));
    }
    return matmul(concat(per_layer, 1), params.w_o);
}

inline MaskValues learned_mask_forward(const MaskNetworkParams& params,
                                       const std::vector<Tensor>& hidden, std::int64_t row_begin,
                                       std::int64_t count, double eps, MaskKind kind) {
    Tensor merged = relu(learned_mask_preactivation(params, hidden, row_begin, count));
    return {reshape(clamp(merged, eps, 1.0), {count}), kind, eps};
}

// Sign step on the merged pre-activation: positive -> 1, otherwise eps.
// Non-differentiable; emitted as a constant so mask parameters receive no
// gradient in this mode.
inline MaskValues binary_mask(const MaskNetworkParams& params, const std::vector<Tensor>& hidden,
                              std::int64_t row_begin, std::int64_t count, double eps) {
    Tensor pre = learned_mask_preactivation(params, hidden, row_begin, count);
    Tensor w = Tensor::zeros({count});
    for (std::int64_t t = 0; t < count; ++t)
        w.data()[static_cast<std::size_t>(t)] = pre.data()[static_cast<std::size_t>(t)] > 0.0 ? 1.0 : eps;
    return {w, MaskKind::Binary, eps};
}

// ---------------------------------------------------------------------------
// Strategy dispatcher
// ---------------------------------------------------------------------------

struct PairMasks {
    MaskValues mu_chosen, mu_rejected;
    MaskValues md_chosen, md_rejected;
};

class MaskProvider {
public:
    MaskProvider() = default;

    static MaskProvider make(MaskKind kind, std::int64_t n_layers, std::int64_t d_model,
                             double eps, std::uint64_t seed) {
        MaskProvider p;
        p.kind_ = kind;
        p.eps_ = eps;
        p.seed_ = seed;
        Rng rng(Rng::derive(seed, 0x6d61736bull));
        if (kind == MaskKind::LearnedCommon || kind == MaskKind::Binary)
            p.common_ = MaskNetworkParams::init(n_layers, d_model, rng);
        if (kind == MaskKind::LearnedIndependent) {
            p.u_ = MaskNetworkParams::init(n_layers, d_model, rng);
            p.d_ = MaskNetworkParams::init(n_layers, d_model, rng);
        }
        return p;
    }

    MaskKind kind() const { return kind_; }
    double eps() const { return eps_; }

    bool wants_taps() const { return kind_ == MaskKind::MaPO; }
    bool needs_hidden() const {
        return kind_ == MaskKind::Binary || kind_ == MaskKind::LearnedCommon ||
               kind_ == MaskKind::LearnedIndependent;
    }
    // Learned strategies carry the L1 value penalty; Binary reuses the
    // network but trains nothing, so it is excluded.
    bool learned() const {
        return kind_ == MaskKind::LearnedCommon || kind_ == MaskKind::LearnedIndependent;
    }

    std::vector<Tensor*> trainable_params() {
        if (kind_ == MaskKind::LearnedCommon) return common_.params();
        if (kind_ == MaskKind::LearnedIndependent) {
            auto out = u_.params();
            for (Tensor* t : d_.params()) out.push_back(t);
            return out;
        }
        return {};
    }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out;
        if (kind_ == MaskKind::LearnedCommon || kind_ == MaskKind::Binary)
            out = common_.named_params("mask");
        if (kind_ == MaskKind::LearnedIndependent) {
            out = u_.named_params("mask_u");
            for (auto& e : d_.named_params("mask_d")) out.push_back(e);
        }
        return out;
    }

    MaskNetworkParams& common_params() { return common_; }
    MaskNetworkParams& u_params() { return u_; }
    MaskNetworkParams& d_params() { return d_; }

    // Masks for a single response. `stream` keys the Random strategy and
    // should identify (pair, which response) stably across epochs.
    std::pair<MaskValues, MaskValues> masks_for_response(const ForwardTrace& ref_trace,
                                                         std::int64_t row_begin,
                                                         std::int64_t count,
                                                         std::uint64_t stream) const {
        switch (kind_) {
            case MaskKind::AllOnes: {
                MaskValues m = all_ones_mask(count, eps_);
                return {m, m};
            }
            case MaskKind::Random: {
                MaskValues m = random_mask(seed_, stream, count, eps_);
                return {m, m};
            }
            case MaskKind::MaPO: {
                MaskValues m = compute_mapo_mask(ref_trace, row_begin, count, eps_);
                return {m, m};
            }
            case MaskKind::Binary: {
                MaskValues m = binary_mask(common_, ref_trace.hidden, row_begin, count, eps_);
                return {m, m};
            }
            case MaskKind::LearnedCommon: {
                MaskValues m = learned_mask_forward(common_, ref_trace.hidden, row_begin, count,
                                                    eps_, MaskKind::LearnedCommon);
                return {m, m};
            }
            default: {
                MaskValues mu = learned_mask_forward(u_, ref_trace.hidden, row_begin, count, eps_,
                                                     MaskKind::LearnedIndependent);
                MaskValues md = learned_mask_forward(d_, ref_trace.hidden, row_begin, count, eps_,
                                                     MaskKind::LearnedIndependent);
                return {mu, md};
            }
        }
    }

    PairMasks masks_for_pair(const ForwardTrace& ref_chosen, const ForwardTrace& ref_rejected,
                             std::int64_t row_begin, std::int64_t count_chosen,
                             std::int64_t count_rejected, std::uint64_t pair_index) const {
        PairMasks out;
        auto [muc, mdc] = masks_for_response(ref_chosen, row_begin, count_chosen, pair_index * 2);
        auto [mur, mdr] =
            masks_for_response(ref_rejected, row_begin, count_rejected, pair_index * 2 + 1);
        out.mu_chosen = muc;
        out.md_chosen = mdc;
        out.mu_rejected = mur;
        out.md_rejected = mdr;
        return out;
    }

private:
    MaskKind kind_ = MaskKind::AllOnes;
    double eps_ = 0.01;
    std::uint64_t seed_ = 0;
    MaskNetworkParams common_, u_, d_;
};

}  // namespace tokpo

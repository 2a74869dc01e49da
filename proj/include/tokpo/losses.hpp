#pragma once

// Preference-optimization objectives.
//
// Every method reduces to -log sigmoid(argument) over a pair, where the
// argument decomposes into a reward part u and a regularization/margin part
// delta (argument = u - delta). The token-weighted family computes
//   u     = beta * (sum_t m_u(y_c^t) logratio_c[t] - sum_t m_u(y_r^t) logratio_r[t])
//   delta = beta * (sum_t m_d(y_c^t) KL_c[t]       - sum_t m_d(y_r^t) KL_r[t])
// with masks from a MaskProvider; all-ones masks recover token-level DPO
// with sequential KL regularization, which is also exposed directly as
// tdpo version 1. The loss math is factored over a PairTerms bag so tests
// can drive it with fabricated distributions.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "masks.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace tokpo {

enum class Method {
    DPO,
    TDPO1,
    TDPO2,
    SimPO,
    DPOP,
    MaPO,
    SparseCommon,
    SparseIndep,
    MaskRandom,
    MaskBinary,
};

inline const char* method_name(Method m) {
    switch (m) {
        case Method::DPO: return "dpo";
        case Method::TDPO1: return "tdpo1";
        case Method::TDPO2: return "tdpo2";
        case Method::SimPO: return "simpo";
        case Method::DPOP: return "dpop";
        case Method::MaPO: return "mapo";
        case Method::SparseCommon: return "sparse-common";
        case Method::SparseIndep: return "sparse-indep";
        case Method::MaskRandom: return "mask-random";
        default: return "mask-binary";
    }
}

inline bool method_from_string(const std::string& s, Method& out) {
    for (Method m : {Method::DPO, Method::TDPO1, Method::TDPO2, Method::SimPO, Method::DPOP,
                     Method::MaPO, Method::SparseCommon, Method::SparseIndep, Method::MaskRandom,
                     Method::MaskBinary}) {
        if (s == method_name(m)) {
            out = m;
            return true;
        }
    }
    return false;
}

// Methods whose sigmoid argument is the mask-weighted u - delta form.
inline bool method_is_masked(Method m) {
    switch (m) {
        case Method::TDPO1:
        case Method::MaPO:
        case Method::SparseCommon:
        case Method::SparseIndep:
        case Method::MaskRandom:
        case Method::MaskBinary: return true;
        default: return false;
    }
}

inline MaskKind method_mask_kind(Method m) {
    switch (m) {
        case Method::MaPO: return MaskKind::MaPO;
        case Method::SparseCommon: return MaskKind::LearnedCommon;
        case Method::SparseIndep: return MaskKind::LearnedIndependent;
        case Method::MaskRandom: return MaskKind::Random;
        case Method::MaskBinary: return MaskKind::Binary;
        default: return MaskKind::AllOnes;
    }
}

struct LossConfig {
    Method method = Method::SparseCommon;
    double beta = 0.1;
    double alpha = 0.7;          // tdpo2 sequential-KL weight
    double gamma_margin = 0.0;   // simpo target margin
    double lambda = 50.0;        // dpop penalty weight
    double mask_eps = 0.01;
    double l1_coeff = 0.0;       // penalty on mask values, learned masks only
    bool mask_stop_gradient = false;

    void validate() const {
        if (!(beta > 0.0)) detail::op_fail("LossConfig", "beta must be > 0");
        if (gamma_margin < 0.0) detail::op_fail("LossConfig", "gamma_margin must be >= 0");
        if (lambda < 0.0) detail::op_fail("LossConfig", "lambda must be >= 0");
        if (!(mask_eps > 0.0 && mask_eps < 1.0))
            detail::op_fail("LossConfig", "mask_eps must be in (0,1)");
        if (l1_coeff < 0.0) detail::op_fail("LossConfig", "l1_coeff must be >= 0");
    }
};

// Everything any objective needs about one preference pair. Chosen/rejected
// tensors have lengths T1/T2; log-probabilities are per response token.
struct PairTerms {
    Tensor logratio_c, logratio_r;  // log pi(y^t) - log pi_ref(y^t)
    Tensor kl_c, kl_r;              // per-position next-token KL(policy || reference)
    Tensor lp_pol_c, lp_pol_r;      // policy token log-probs
    Tensor lp_ref_c, lp_ref_r;      // reference token log-probs
    MaskValues mu_c, mu_r, md_c, md_r;
};

// ---------------------------------------------------------------------------
// Per-position KL between two rows of log-distributions
// ---------------------------------------------------------------------------

namespace detail {

inline void check_normalized_rows(const Tensor& log_dist, const char* who) {
    const std::int64_t rows = log_dist.dim(0), cols = log_dist.dim(1);
    for (std::int64_t r = 0; r < rows; ++r) {
        double z = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) z += std::exp(log_dist.at(r, c));
        if (std::fabs(std::log(z)) > 1e-6)
            op_fail("token_kl", std::string(who) + " row " + std::to_string(r) +
                                    " is not a normalized log-distribution (logsumexp " +
                                    std::to_string(std::log(z)) + ")");
    }
}

}  // namespace detail

// KL[pi || pi_ref] per row: sum_v pi(v) (log pi(v) - log pi_ref(v)).
// Differentiable through the policy side.
inline Tensor token_kl_series(const Tensor& pol_log_rows, const Tensor& ref_log_rows) {
    if (pol_log_rows.shape() != ref_log_rows.shape())
        detail::op_fail("token_kl", "shape mismatch " + shape_str(pol_log_rows.shape()) + " vs " +
                                        shape_str(ref_log_rows.shape()));
    detail::check_normalized_rows(pol_log_rows, "policy");
    detail::check_normalized_rows(ref_log_rows, "reference");
    return sum_axis(mul(exp(pol_log_rows), sub(pol_log_rows, ref_log_rows)), 1);
}

// ---------------------------------------------------------------------------
// Sigmoid arguments per method
// ---------------------------------------------------------------------------

struct ArgParts {
    Tensor arg;   // scalar, u - delta
    Tensor u;     // scalar reward part
    Tensor delta; // scalar regularization/margin part
};

namespace detail {

inline Tensor mask_weights(const MaskValues& m, bool stop_grad) {
    return stop_grad ? stop_gradient(m.weights) : m.weights;
}

}  // namespace detail

inline ArgParts masked_arg(const PairTerms& t, const LossConfig& cfg) {
    const Tensor mu_c = detail::mask_weights(t.mu_c, cfg.mask_stop_gradient);
    const Tensor mu_r = detail::mask_weights(t.mu_r, cfg.mask_stop_gradient);
    const Tensor md_c = detail::mask_weights(t.md_c, cfg.mask_stop_gradient);
    const Tensor md_r = detail::mask_weights(t.md_r, cfg.mask_stop_gradient);
    Tensor u = mul(sub(sum(mul(mu_c, t.logratio_c)), sum(mul(mu_r, t.logratio_r))), cfg.beta);
    Tensor delta = mul(sub(sum(mul(md_c, t.kl_c)), sum(mul(md_r, t.kl_r))), cfg.beta);
    return {sub(u, delta), u, delta};
}

inline ArgParts dpo_arg(const PairTerms& t, const LossConfig& cfg) {
    Tensor u = mul(sub(sum(t.logratio_c), sum(t.logratio_r)), cfg.beta);
    return {u, u, Tensor::scalar(0.0)};
}

inline ArgParts tdpo2_arg(const PairTerms& t, const LossConfig& cfg) {
    Tensor u = mul(sub(sum(t.logratio_c), sum(t.logratio_r)), cfg.beta);
    Tensor delta =
        mul(sub(sum(t.kl_r), stop_gradient(sum(t.kl_c))), cfg.alpha * cfg.beta);
    return {sub(u, delta), u, delta};
}

inline ArgParts simpo_arg(const PairTerms& t, const LossConfig& cfg) {
    if (t.lp_pol_c.numel() < 1 || t.lp_pol_r.numel() < 1)
        detail::op_fail("simpo_loss", "zero-length response");
    Tensor avg_c = div(sum(t.lp_pol_c), static_cast<double>(t.lp_pol_c.numel()));
    Tensor avg_r = div(sum(t.lp_pol_r), static_cast<double>(t.lp_pol_r.numel()));
    Tensor u = mul(sub(avg_c, avg_r), cfg.beta);
    Tensor delta = Tensor::scalar(cfg.gamma_margin);
    return {sub(u, delta), u, delta};
}

inline ArgParts dpop_arg(const PairTerms& t, const LossConfig& cfg) {
    Tensor u = mul(sub(sum(t.logratio_c), sum(t.logratio_r)), cfg.beta);
    Tensor delta = mul(relu(sub(sum(t.lp_ref_c), sum(t.lp_pol_c))), cfg.lambda);
    return {sub(u, delta), u, delta};
}

inline ArgParts sigmoid_argument(const PairTerms& t, const LossConfig& cfg) {
    if (method_is_masked(cfg.method)) return masked_arg(t, cfg);
    switch (cfg.method) {
        case Method::DPO: return dpo_arg(t, cfg);
        case Method::TDPO2: return tdpo2_arg(t, cfg);
        case Method::SimPO: return simpo_arg(t, cfg);
        case Method::DPOP: return dpop_arg(t, cfg);
        default: detail::op_fail("sigmoid_argument", "unhandled method");
    }
}

// ---------------------------------------------------------------------------
// Pair-level loss and diagnostics
// ---------------------------------------------------------------------------

struct PairBreakdown {
    double nll = 0.0;    // -log sigmoid(u - delta)
    double u = 0.0;
    double delta = 0.0;
    double l1 = 0.0;     // mask-value penalty term (pre-coefficient sum)
    std::vector<double> logratio_c, logratio_r;
    std::vector<double> kl_c, kl_r;
    std::vector<double> mu_c, mu_r, md_c, md_r;
    std::vector<double> masked_reward_c, masked_reward_r;
    std::vector<double> masked_kl_c, masked_kl_r;
    double sparsity_mu = 0.0, sparsity_md = 0.0;
};

struct PairLoss {
    Tensor loss;  // scalar on tape
    PairBreakdown breakdown;
};

inline PairLoss pair_loss(const PairTerms& t, const LossConfig& cfg) {
    cfg.validate();
    ArgParts parts = sigmoid_argument(t, cfg);
    Tensor loss = neg(log_sigmoid(parts.arg));

    PairBreakdown bd;
    bd.nll = loss.item();
    bd.u = parts.u.item();
    bd.delta = parts.delta.item();

    const bool learned = method_is_masked(cfg.method) &&
                         (method_mask_kind(cfg.method) == MaskKind::LearnedCommon ||
                          method_mask_kind(cfg.method) == MaskKind::LearnedIndependent);
    if (learned && cfg.l1_coeff > 0.0) {
        Tensor l1 = add(add(sum(t.mu_c.weights), sum(t.mu_r.weights)),
                        add(sum(t.md_c.weights), sum(t.md_r.weights)));
        bd.l1 = l1.item();
        loss = add(loss, mul(l1, cfg.l1_coeff));
    }

    bd.logratio_c = t.logratio_c.data();
    bd.logratio_r = t.logratio_r.data();
    bd.kl_c = t.kl_c.data();
    bd.kl_r = t.kl_r.data();
    bd.mu_c = t.mu_c.weights.data();
    bd.mu_r = t.mu_r.weights.data();
    bd.md_c = t.md_c.weights.data();
    bd.md_r = t.md_r.weights.data();
    auto weighted = [](const std::vector<double>& w, const std::vector<double>& x) {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = w[i] * x[i];
        return out;
    };
    bd.masked_reward_c = weighted(bd.mu_c, bd.logratio_c);
    bd.masked_reward_r = weighted(bd.mu_r, bd.logratio_r);
    bd.masked_kl_c = weighted(bd.md_c, bd.kl_c);
    bd.masked_kl_r = weighted(bd.md_r, bd.kl_r);
    auto pooled_sparsity = [](const MaskValues& a, const MaskValues& b) {
        std::int64_t zeroed = 0;
        for (double w : a.weights.data())
            if (w <= a.eps) ++zeroed;
        for (double w : b.weights.data())
            if (w <= b.eps) ++zeroed;
        return static_cast<double>(zeroed) /
               static_cast<double>(a.weights.numel() + b.weights.numel());
    };
    bd.sparsity_mu = pooled_sparsity(t.mu_c, t.mu_r);
    bd.sparsity_md = pooled_sparsity(t.md_c, t.md_r);
    return {loss, bd};
}

// ---------------------------------------------------------------------------
// Building PairTerms from model traces
// ---------------------------------------------------------------------------

struct TokenizedPair {
    std::vector<int> tokens_c, tokens_r;  // [bos] + prompt + response
    std::int64_t resp_begin = 0;
};

inline TokenizedPair tokenize_pair(const PreferencePair& pair, int bos_id) {
    if (pair.chosen.empty() || pair.rejected.empty() || pair.prompt.empty())
        detail::op_fail("tokenize_pair", "prompt and responses must be nonempty");
    TokenizedPair tp;
    tp.tokens_c.push_back(bos_id);
    tp.tokens_c.insert(tp.tokens_c.end(), pair.prompt.begin(), pair.prompt.end());
    tp.tokens_c.insert(tp.tokens_c.end(), pair.chosen.begin(), pair.chosen.end());
    tp.tokens_r.push_back(bos_id);
    tp.tokens_r.insert(tp.tokens_r.end(), pair.prompt.begin(), pair.prompt.end());
    tp.tokens_r.insert(tp.tokens_r.end(), pair.rejected.begin(), pair.rejected.end());
    tp.resp_begin = 1 + static_cast<std::int64_t>(pair.prompt.size());
    return tp;
}

// Forward both models on both responses and assemble the term bag. The
// reference may be null only for reference-free methods; its traces are
// then skipped and reference-dependent tensors are zeros.
inline PairTerms build_pair_terms(const TransformerLM& policy, const TransformerLM* reference,
                                  const PreferencePair& pair, const MaskProvider& masks,
                                  const LossConfig& cfg, int bos_id, std::uint64_t pair_index) {
    const TokenizedPair tp = tokenize_pair(pair, bos_id);
    const std::int64_t t_c = static_cast<std::int64_t>(pair.chosen.size());
    const std::int64_t t_r = static_cast<std::int64_t>(pair.rejected.size());
    const bool needs_ref = cfg.method != Method::SimPO;
    if (needs_ref && reference == nullptr)
        detail::op_fail("build_pair_terms",
                        std::string(method_name(cfg.method)) + " requires a reference model");

    PairTerms terms;
    ForwardTrace pol_c = policy.forward(tp.tokens_c);
    ForwardTrace pol_r = policy.forward(tp.tokens_r);
    terms.lp_pol_c = gather_response_log_probs(pol_c, tp.tokens_c, tp.resp_begin);
    terms.lp_pol_r = gather_response_log_probs(pol_r, tp.tokens_r, tp.resp_begin);

    if (reference != nullptr) {
        const bool want_taps = masks.wants_taps();
        ForwardTrace ref_c = reference->forward(tp.tokens_c, want_taps);
        ForwardTrace ref_r = reference->forward(tp.tokens_r, want_taps);
        terms.lp_ref_c = gather_response_log_probs(ref_c, tp.tokens_c, tp.resp_begin);
        terms.lp_ref_r = gather_response_log_probs(ref_r, tp.tokens_r, tp.resp_begin);
        terms.logratio_c = sub(terms.lp_pol_c, terms.lp_ref_c);
        terms.logratio_r = sub(terms.lp_pol_r, terms.lp_ref_r);

        // KL rows condition on the prefix before each response token.
        auto kl_rows = [&](const ForwardTrace& pol, const ForwardTrace& ref, std::int64_t count,
                           bool differentiable) {
            Tensor src = differentiable ? pol.log_dist : stop_gradient(pol.log_dist);
            Tensor pol_rows = slice_rows(src, tp.resp_begin - 1, tp.resp_begin - 1 + count);
            Tensor ref_rows = slice_rows(ref.log_dist, tp.resp_begin - 1, tp.resp_begin - 1 + count);
            return token_kl_series(pol_rows, ref_rows);
        };
        const bool kl_in_loss = method_is_masked(cfg.method) || cfg.method == Method::TDPO2;
        terms.kl_c = kl_rows(pol_c, ref_c, t_c, kl_in_loss);
        terms.kl_r = kl_rows(pol_r, ref_r, t_r, kl_in_loss);

        PairMasks pm = masks.masks_for_pair(ref_c, ref_r, tp.resp_begin, t_c, t_r, pair_index);
        terms.mu_c = pm.mu_chosen;
        terms.mu_r = pm.mu_rejected;
        terms.md_c = pm.md_chosen;
        terms.md_r = pm.md_rejected;
    } else {
        terms.lp_ref_c = Tensor::zeros({t_c});
        terms.lp_ref_r = Tensor::zeros({t_r});
        terms.logratio_c = Tensor::zeros({t_c});
        terms.logratio_r = Tensor::zeros({t_r});
        terms.kl_c = Tensor::zeros({t_c});
        terms.kl_r = Tensor::zeros({t_r});
        terms.mu_c = all_ones_mask(t_c, cfg.mask_eps);
        terms.mu_r = all_ones_mask(t_r, cfg.mask_eps);
        terms.md_c = terms.mu_c;
        terms.md_r = terms.mu_r;
    }
    return terms;
}

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

struct BatchStats {
    double loss = 0.0;
    double u = 0.0;
    double delta = 0.0;
    double sparsity_mu = 0.0;
    double sparsity_md = 0.0;
    double mean_token_kl_chosen = 0.0;
    double mean_token_kl_rejected = 0.0;
    double mask_l1_mean = 0.0;  // mean mask weight over all response tokens
};

struct BatchEval {
    Tensor loss;  // scalar on tape, mean over pairs
    BatchStats stats;
    std::vector<PairBreakdown> pairs;
};

inline BatchEval evaluate_batch(const TransformerLM& policy, const TransformerLM* reference,
                                const std::vector<const PreferencePair*>& batch,
                                const std::vector<std::uint64_t>& pair_indices,
                                const MaskProvider& masks, const LossConfig& cfg, int bos_id) {
    if (batch.empty()) detail::op_fail("evaluate_batch", "empty batch");
    if (batch.size() != pair_indices.size())
        detail::op_fail("evaluate_batch", "need one index per pair");
    cfg.validate();

    BatchEval out;
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        PairTerms terms =
            build_pair_terms(policy, reference, *batch[i], masks, cfg, bos_id, pair_indices[i]);
        PairLoss pl = pair_loss(terms, cfg);
        losses.push_back(pl.loss);
        out.pairs.push_back(std::move(pl.breakdown));
    }
    Tensor total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    out.loss = div(total, static_cast<double>(losses.size()));

    const double n = static_cast<double>(out.pairs.size());
    double mask_sum = 0.0;
    std::int64_t mask_count = 0;
    for (const auto& bd : out.pairs) {
        out.stats.u += bd.u / n;
        out.stats.delta += bd.delta / n;
        out.stats.sparsity_mu += bd.sparsity_mu / n;
        out.stats.sparsity_md += bd.sparsity_md / n;
        auto mean_of = [](const std::vector<double>& v) {
            double acc = 0.0;
            for (double x : v) acc += x;
            return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
        };
        out.stats.mean_token_kl_chosen += mean_of(bd.kl_c) / n;
        out.stats.mean_token_kl_rejected += mean_of(bd.kl_r) / n;
        for (const std::vector<double>* mv : {&bd.mu_c, &bd.mu_r, &bd.md_c, &bd.md_r}) {
            for (double w : *mv) mask_sum += w;
            mask_count += static_cast<std::int64_t>(mv->size());
        }
    }
    out.stats.loss = out.loss.item();
    out.stats.mask_l1_mean = mask_count > 0 ? mask_sum / static_cast<double>(mask_count) : 0.0;
    return out;
}

// Named entry points matching the method zoo; each pins cfg.method.

inline BatchEval sparsepo_loss(const std::vector<const PreferencePair*>& batch,
                               const TransformerLM& policy, const TransformerLM& reference,
                               const MaskProvider& masks, LossConfig cfg, int bos_id,
                               const std::vector<std::uint64_t>& pair_indices) {
    if (!method_is_masked(cfg.method)) cfg.method = Method::SparseCommon;
    return evaluate_batch(policy, &reference, batch, pair_indices, masks, cfg, bos_id);
}

inline BatchEval dpo_loss(const std::vector<const PreferencePair*>& batch,
                          const TransformerLM& policy, const TransformerLM& reference,
                          LossConfig cfg, int bos_id,
                          const std::vector<std::uint64_t>& pair_indices) {
    cfg.method = Method::DPO;
    MaskProvider none = MaskProvider::make(MaskKind::AllOnes, 0, 0, cfg.mask_eps, 0);
    return evaluate_batch(policy, &reference, batch, pair_indices, none, cfg, bos_id);
}

inline BatchEval tdpo_loss(const std::vector<const PreferencePair*>& batch,
                           const TransformerLM& policy, const TransformerLM& reference,
                           LossConfig cfg, int version, int bos_id,
                           const std::vector<std::uint64_t>& pair_indices) {
    if (version != 1 && version != 2)
        detail::op_fail("tdpo_loss", "version " + std::to_string(version) + " not in {1,2}");
    cfg.method = version == 1 ? Method::TDPO1 : Method::TDPO2;
    MaskProvider ones = MaskProvider::make(MaskKind::AllOnes, 0, 0, cfg.mask_eps, 0);
    return evaluate_batch(policy, &reference, batch, pair_indices, ones, cfg, bos_id);
}

inline BatchEval simpo_loss(const std::vector<const PreferencePair*>& batch,
                            const TransformerLM& policy, LossConfig cfg, int bos_id,
                            const std::vector<std::uint64_t>& pair_indices) {
    cfg.method = Method::SimPO;
    MaskProvider none = MaskProvider::make(MaskKind::AllOnes, 0, 0, cfg.mask_eps, 0);
    return evaluate_batch(policy, nullptr, batch, pair_indices, none, cfg, bos_id);
}

inline BatchEval dpop_loss(const std::vector<const PreferencePair*>& batch,
                           const TransformerLM& policy, const TransformerLM& reference,
                           LossConfig cfg, int bos_id,
                           const std::vector<std::uint64_t>& pair_indices) {
    cfg.method = Method::DPOP;
    MaskProvider none = MaskProvider::make(MaskKind::AllOnes, 0, 0, cfg.mask_eps, 0);
    return evaluate_batch(policy, &reference, batch, pair_indices, none, cfg, bos_id);
}

}  // namespace tokpo

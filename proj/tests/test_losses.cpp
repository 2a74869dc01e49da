#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include <tokpo/data.hpp>
#include <tokpo/losses.hpp>
#include <tokpo/masks.hpp>
#include <tokpo/model.hpp>
#include <tokpo/rng.hpp>
#include <tokpo/tensor.hpp>

#include "support/fabricated.hpp"
#include "support/scalar_oracle.hpp"

using namespace tokpo;
using testsupport::fd_check_loss;
using testsupport::run_scalar_grid;

namespace {

constexpr double kLn2 = 0.6931471805599453;

ModelConfig tiny_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.context_len = 16;
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    cfg.seed = seed;
    return cfg;
}

PreferencePair random_pair(Rng& rng, int vocab, std::size_t prompt_len, std::size_t resp_len_c,
                           std::size_t resp_len_r) {
    auto draw_seq = [&](std::size_t n) {
        std::vector<int> out(n);
        for (auto& t : out) t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 1)));
        return out;
    };
    PreferencePair p;
    p.prompt = draw_seq(prompt_len);
    p.chosen = draw_seq(resp_len_c);
    p.rejected = draw_seq(resp_len_r);
    p.chosen_score = 1.0;
    p.rejected_score = 0.0;
    return p;
}

}  // namespace

TEST_CASE("policy matching reference scores every objective at ln 2") {
    TransformerLM policy(tiny_config(5));
    TransformerLM reference = policy.clone();
    reference.set_trainable(false);

    PreferencePair pair;
    pair.prompt = {3};
    pair.chosen = {4, 5, 6};
    pair.rejected = {6, 7};
    pair.chosen_score = 1.0;
    PreferencePair tied = pair;
    tied.rejected = tied.chosen;  // removes SimPO's policy-only length-normalized margin

    const auto& mc = policy.config();
    for (Method m : {Method::DPO, Method::TDPO1, Method::TDPO2, Method::SimPO, Method::DPOP,
                     Method::MaPO, Method::SparseCommon, Method::SparseIndep, Method::MaskRandom,
                     Method::MaskBinary}) {
        LossConfig cfg;
        cfg.method = m;
        cfg.beta = 0.37;
        cfg.gamma_margin = 0.0;
        MaskProvider masks =
            MaskProvider::make(method_mask_kind(m), mc.n_layers, mc.d_model, cfg.mask_eps, 17);
        const PreferencePair& use = m == Method::SimPO ? tied : pair;
        std::vector<const PreferencePair*> batch = {&use};
        BatchEval be = evaluate_batch(policy, m == Method::SimPO ? nullptr : &reference, batch,
                                      {0}, masks, cfg, 0);
        INFO(method_name(m));
        CHECK(std::fabs(be.stats.loss - kLn2) < 1e-9);
        CHECK(std::fabs(be.stats.u) < 1e-9);
        CHECK(std::fabs(be.stats.delta) < 1e-9);
    }
}

TEST_CASE("all-ones masking reproduces token-level dpo with sequential kl") {
    TransformerLM policy(tiny_config(21));
    TransformerLM reference(tiny_config(22));
    reference.set_trainable(false);

    Rng rng(404);
    LossConfig sparse_cfg;
    sparse_cfg.method = Method::SparseCommon;
    sparse_cfg.beta = 0.25;
    sparse_cfg.l1_coeff = 0.0;
    LossConfig tdpo_cfg = sparse_cfg;
    tdpo_cfg.method = Method::TDPO1;
    MaskProvider ones = MaskProvider::make(MaskKind::AllOnes, 1, 16, sparse_cfg.mask_eps, 0);

    double max_diff = 0.0;
    for (int i = 0; i < 25; ++i) {
        PreferencePair pair = random_pair(rng, 8, 2, 1 + rng.below(4), 1 + rng.below(4));
        std::vector<const PreferencePair*> batch = {&pair};
        const double a =
            evaluate_batch(policy, &reference, batch, {0}, ones, sparse_cfg, 0).stats.loss;
        const double b =
            evaluate_batch(policy, &reference, batch, {0}, ones, tdpo_cfg, 0).stats.loss;
        max_diff = std::max(max_diff, std::fabs(a - b));
    }
    CHECK(max_diff <= 1e-10);
}

TEST_CASE("every objective matches the plain-double oracle on tiny problems") {
    auto outcome = run_scalar_grid(2024, 1);
    CHECK(outcome.cases >= 200);
    CHECK(outcome.max_abs_err <= 1e-10);
}

TEST_CASE("objective gradients agree with finite differences") {
    for (Method m : {Method::DPO, Method::TDPO1, Method::TDPO2, Method::SimPO, Method::DPOP,
                     Method::MaPO, Method::SparseCommon, Method::SparseIndep}) {
        for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
            auto result = fd_check_loss(m, seed, 1e-4);
            INFO(method_name(m) << " seed " << seed << ": " << result.message);
            REQUIRE(result.ok);
        }
    }
}

TEST_CASE("swapping the pair negates the preference argument") {
    Rng rng(7);
    oracle::TinySide a = testsupport::random_tiny_side(rng, 2, 3);
    oracle::TinySide b = testsupport::random_tiny_side(rng, 2, 3);
    testsupport::tie_masks(a);
    testsupport::tie_masks(b);
    auto fa = testsupport::make_leaves(a, true);
    auto fb = testsupport::make_leaves(b, true);

    LossConfig cfg;
    cfg.method = Method::SparseCommon;
    cfg.beta = 0.8;

    PairTerms fwd = testsupport::terms_from(fa, fb, cfg.mask_eps);
    PairTerms rev = testsupport::terms_from(fb, fa, cfg.mask_eps);
    PairLoss lf = pair_loss(fwd, cfg);
    PairLoss lr = pair_loss(rev, cfg);
    CHECK(lf.breakdown.u == Catch::Approx(-lr.breakdown.u).margin(1e-12));
    CHECK(lf.breakdown.delta == Catch::Approx(-lr.breakdown.delta).margin(1e-12));
    // sigmoid(x) + sigmoid(-x) = 1, so the two losses exponentiate to 1
    CHECK(std::exp(-lf.breakdown.nll) + std::exp(-lr.breakdown.nll) ==
          Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("token kl is nonnegative and zero against itself") {
    Rng rng(91);
    Tensor pol_logits = Tensor::zeros({6, 5});
    Tensor ref_logits = Tensor::zeros({6, 5});
    for (auto& v : pol_logits.data()) v = rng.normal(0.0, 2.0);
    for (auto& v : ref_logits.data()) v = rng.normal(0.0, 2.0);
    Tensor pol = log_softmax(pol_logits, 1);
    Tensor ref = log_softmax(ref_logits, 1);

    Tensor kl = token_kl_series(pol, ref);
    for (double v : kl.data()) CHECK(v >= -1e-12);
    Tensor self_kl = token_kl_series(pol, pol);
    for (double v : self_kl.data()) CHECK(std::fabs(v) <= 1e-12);

    SECTION("hand value for a two-outcome distribution") {
        Tensor p = Tensor::from({1, 2}, {std::log(0.75), std::log(0.25)});
        Tensor q = Tensor::from({1, 2}, {std::log(0.5), std::log(0.5)});
        CHECK(token_kl_series(p, q).data()[0] ==
              Catch::Approx(0.13081203594113713).margin(1e-12));
    }

    SECTION("unnormalized rows are rejected") {
        REQUIRE_THROWS_WITH(token_kl_series(pol_logits, ref),
                            Catch::Matchers::ContainsSubstring("token_kl"));
    }
}

TEST_CASE("raising the chosen token's policy logit lowers the loss") {
    Rng rng(31);
    oracle::TinySide c = testsupport::random_tiny_side(rng, 2, 3);
    oracle::TinySide r = testsupport::random_tiny_side(rng, 2, 3);
    for (Method m : {Method::DPO, Method::SimPO}) {
        LossConfig cfg;
        cfg.method = m;
        cfg.beta = 0.5;
        auto value = [&](const oracle::TinySide& side_c) {
            auto fc = testsupport::make_leaves(side_c, true);
            auto fr = testsupport::make_leaves(r, true);
            return pair_loss(testsupport::terms_from(fc, fr, cfg.mask_eps), cfg).breakdown.nll;
        };
        const double before = value(c);
        oracle::TinySide bumped = c;
        bumped.pol_logits[0][static_cast<std::size_t>(c.tokens[0])] += 0.25;
        INFO(method_name(m));
        CHECK(value(bumped) < before);
    }
}

TEST_CASE("tdpo2 with zero alpha matches dpo") {
    Rng rng(55);
    for (int i = 0; i < 10; ++i) {
        oracle::TinySide c = testsupport::random_tiny_side(rng, 2, 3);
        oracle::TinySide r = testsupport::random_tiny_side(rng, 1, 3);
        auto fc = testsupport::make_leaves(c, true);
        auto fr = testsupport::make_leaves(r, true);
        PairTerms terms = testsupport::terms_from(fc, fr, 0.01);
        LossConfig dpo_cfg;
        dpo_cfg.method = Method::DPO;
        dpo_cfg.beta = 0.3;
        LossConfig tdpo2_cfg = dpo_cfg;
        tdpo2_cfg.method = Method::TDPO2;
        tdpo2_cfg.alpha = 0.0;
        CHECK(pair_loss(terms, tdpo2_cfg).breakdown.nll ==
              Catch::Approx(pair_loss(terms, dpo_cfg).breakdown.nll).margin(1e-12));
    }
}

TEST_CASE("dpop penalty activates only when the chosen response regresses") {
    // Policy puts less mass than the reference on the chosen tokens.
    oracle::TinySide c;
    c.pol_logits = {{0.0, 2.0}};
    c.ref_logits = {{2.0, 0.0}};
    c.tokens = {0};
    c.mu = {1.0};
    c.md = {1.0};
    oracle::TinySide r = c;
    r.tokens = {1};

    LossConfig dpop_cfg;
    dpop_cfg.method = Method::DPOP;
    dpop_cfg.beta = 0.5;
    dpop_cfg.lambda = 3.0;
    LossConfig dpo_cfg = dpop_cfg;
    dpo_cfg.method = Method::DPO;

    auto fc = testsupport::make_leaves(c, true);
    auto fr = testsupport::make_leaves(r, true);
    PairTerms terms = testsupport::terms_from(fc, fr, 0.01);
    PairLoss with_penalty = pair_loss(terms, dpop_cfg);
    CHECK(with_penalty.breakdown.delta > 0.0);
    CHECK(with_penalty.breakdown.nll > pair_loss(terms, dpo_cfg).breakdown.nll);

    // Flip the models: the chosen response improves, so the hinge is inactive.
    oracle::TinySide c2 = c;
    std::swap(c2.pol_logits, c2.ref_logits);
    auto fc2 = testsupport::make_leaves(c2, true);
    PairTerms terms2 = testsupport::terms_from(fc2, fr, 0.01);
    CHECK(pair_loss(terms2, dpop_cfg).breakdown.delta == 0.0);
    CHECK(pair_loss(terms2, dpop_cfg).breakdown.nll ==
          Catch::Approx(pair_loss(terms2, dpo_cfg).breakdown.nll).margin(1e-12));
}

TEST_CASE("tdpo2 blocks gradient through the chosen sequential kl only") {
    Rng rng(42);
    Tensor chosen_logits = Tensor::zeros({2, 3}, true);
    Tensor rejected_logits = Tensor::zeros({2, 3}, true);
    Tensor ref_logits = Tensor::zeros({2, 3});
    for (auto& v : chosen_logits.data()) v = rng.normal(0.0, 1.0);
    for (auto& v : rejected_logits.data()) v = rng.normal(0.0, 1.0);
    for (auto& v : ref_logits.data()) v = rng.normal(0.0, 1.0);

    LossConfig cfg;
    cfg.method = Method::TDPO2;
    cfg.beta = 0.5;
    cfg.alpha = 0.7;

    // Terms where each policy-logit leaf reaches the loss only through its
    // side's KL series; everything else is constant.
    auto kl_only_terms = [&]() {
        PairTerms t;
        Tensor ref_lsm = log_softmax(ref_logits, 1);
        t.kl_c = token_kl_series(log_softmax(chosen_logits, 1), ref_lsm);
        t.kl_r = token_kl_series(log_softmax(rejected_logits, 1), ref_lsm);
        for (Tensor* field : {&t.logratio_c, &t.logratio_r, &t.lp_pol_c, &t.lp_pol_r,
                              &t.lp_ref_c, &t.lp_ref_r})
            *field = Tensor::full({2}, 0.1);
        t.mu_c = t.mu_r = t.md_c = t.md_r = all_ones_mask(2, cfg.mask_eps);
        return t;
    };

    Tape tape;
    Tape::Scope scope(tape);
    PairLoss pl = pair_loss(kl_only_terms(), cfg);
    tape.backward(pl.loss);

    double chosen_grad = 0.0, rejected_grad = 0.0;
    for (double g : chosen_logits.grad()) chosen_grad += std::fabs(g);
    for (double g : rejected_logits.grad()) rejected_grad += std::fabs(g);
    CHECK(chosen_grad == 0.0);
    CHECK(rejected_grad > 0.0);
}

TEST_CASE("mask stop gradient switch isolates mask parameters") {
    Rng rng(77);
    oracle::TinySide c = testsupport::random_tiny_side(rng, 2, 3);
    oracle::TinySide r = testsupport::random_tiny_side(rng, 2, 3);
    testsupport::tie_masks(c);
    testsupport::tie_masks(r);

    for (bool stop : {false, true}) {
        auto fc = testsupport::make_leaves(c, true);
        auto fr = testsupport::make_leaves(r, true);
        LossConfig cfg;
        cfg.method = Method::SparseCommon;
        cfg.beta = 0.5;
        cfg.mask_stop_gradient = stop;

        Tape tape;
        Tape::Scope scope(tape);
        PairLoss pl = pair_loss(testsupport::terms_from(fc, fr, cfg.mask_eps), cfg);
        tape.backward(pl.loss);

        double mask_grad = 0.0, logit_grad = 0.0;
        for (double g : fc.mu.grad()) mask_grad += std::fabs(g);
        for (double g : fc.pol_logits.grad()) logit_grad += std::fabs(g);
        INFO("stop=" << stop);
        CHECK(logit_grad > 0.0);
        if (stop)
            CHECK(mask_grad == 0.0);
        else
            CHECK(mask_grad > 0.0);
    }
}

TEST_CASE("l1 penalty applies to learned masks only") {
    Rng rng(88);
    oracle::TinySide c = testsupport::random_tiny_side(rng, 2, 3);
    oracle::TinySide r = testsupport::random_tiny_side(rng, 1, 3);
    testsupport::tie_masks(c);
    testsupport::tie_masks(r);
    auto fc = testsupport::make_leaves(c, true);
    auto fr = testsupport::make_leaves(r, true);
    PairTerms terms = testsupport::terms_from(fc, fr, 0.01);

    LossConfig plain;
    plain.method = Method::SparseCommon;
    plain.beta = 0.5;
    LossConfig penalized = plain;
    penalized.l1_coeff = 0.01;
    const double mask_sum = oracle::vsum(c.mu) * 2 + oracle::vsum(r.mu) * 2;
    CHECK(pair_loss(terms, penalized).loss.item() ==
          Catch::Approx(pair_loss(terms, plain).loss.item() + 0.01 * mask_sum).margin(1e-12));

    LossConfig random_mask = penalized;
    random_mask.method = Method::MaskRandom;
    LossConfig random_plain = random_mask;
    random_plain.l1_coeff = 0.0;
    CHECK(pair_loss(terms, random_mask).loss.item() ==
          Catch::Approx(pair_loss(terms, random_plain).loss.item()).margin(1e-15));
}

TEST_CASE("reference-free and reference-bound methods check their inputs") {
    TransformerLM policy(tiny_config(3));
    PreferencePair pair;
    pair.prompt = {2};
    pair.chosen = {3, 4};
    pair.rejected = {5};

    LossConfig cfg;
    cfg.method = Method::DPO;
    MaskProvider ones = MaskProvider::make(MaskKind::AllOnes, 1, 16, cfg.mask_eps, 0);
    REQUIRE_THROWS_WITH(build_pair_terms(policy, nullptr, pair, ones, cfg, 0, 0),
                        Catch::Matchers::ContainsSubstring("dpo"));

    cfg.method = Method::SimPO;
    PairTerms terms = build_pair_terms(policy, nullptr, pair, ones, cfg, 0, 0);
    PairLoss pl = pair_loss(terms, cfg);
    CHECK(std::isfinite(pl.breakdown.nll));
    CHECK(pl.breakdown.delta == 0.0);
}

TEST_CASE("batch statistics aggregate the per-pair diagnostics") {
    TransformerLM policy(tiny_config(9));
    TransformerLM reference(tiny_config(10));
    reference.set_trainable(false);
    Rng rng(61);
    PreferencePair p1 = random_pair(rng, 8, 2, 3, 2);
    PreferencePair p2 = random_pair(rng, 8, 2, 2, 4);

    LossConfig cfg;
    cfg.method = Method::SparseCommon;
    cfg.beta = 0.4;
    const auto& mc = policy.config();
    MaskProvider masks =
        MaskProvider::make(MaskKind::LearnedCommon, mc.n_layers, mc.d_model, cfg.mask_eps, 5);
    std::vector<const PreferencePair*> batch = {&p1, &p2};
    BatchEval be = evaluate_batch(policy, &reference, batch, {0, 1}, masks, cfg, 0);

    REQUIRE(be.pairs.size() == 2);
    double u = 0.0, mask_sum = 0.0;
    std::int64_t mask_n = 0;
    for (const auto& bd : be.pairs) {
        u += bd.u / 2.0;
        for (const auto* mv : {&bd.mu_c, &bd.mu_r, &bd.md_c, &bd.md_r}) {
            for (double w : *mv) mask_sum += w;
            mask_n += static_cast<std::int64_t>(mv->size());
        }
    }
    CHECK(be.stats.u == Catch::Approx(u).margin(1e-12));
    CHECK(be.stats.mask_l1_mean ==
          Catch::Approx(mask_sum / static_cast<double>(mask_n)).margin(1e-12));
    CHECK(be.stats.loss ==
          Catch::Approx((be.pairs[0].nll + be.pairs[1].nll) / 2.0).margin(1e-12));
}

TEST_CASE("method names round-trip through the parser") {
    for (Method m : {Method::DPO, Method::TDPO1, Method::TDPO2, Method::SimPO, Method::DPOP,
                     Method::MaPO, Method::SparseCommon, Method::SparseIndep, Method::MaskRandom,
                     Method::MaskBinary}) {
        Method parsed;
        REQUIRE(method_from_string(method_name(m), parsed));
        CHECK(parsed == m);
    }
    Method unused;
    CHECK_FALSE(method_from_string("nonsense", unused));
}

// Release gate for the library: ten behavioral guarantees checked end to end,
// one PASS/FAIL line each, nonzero exit if any fails. Unlike the unit suites
// this runs the full desk-scale training loop, so expect a couple of minutes.
//
// Artifacts land in <tmp>/tokpo_acceptance, wiped at startup.

#include <tokpo/tokpo.hpp>

#include "support/fabricated.hpp"
#include "support/gradsuite.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace tokpo;
using Clock = std::chrono::steady_clock;

namespace {

// Bars each criterion is held to. These are load-bearing: loosening one is a
// behavior change, not a cleanup.
constexpr double kGradTol = 1e-4;            // finite-difference relative error
constexpr int kGradSeeds = 20;               // seeds per gradient target
constexpr double kGradBudgetSeconds = 120.0; // whole gradient suite, one core
constexpr double kReductionTol = 1e-10;      // all-ones mask vs token-level dpo
constexpr int kReductionPairs = 120;
constexpr double kInitTol = 1e-9;            // |loss - ln 2| at a neutral start
constexpr double kOracleTol = 1e-10;         // losses vs plain-double oracle
constexpr std::int64_t kOracleMinCases = 500;
constexpr double kStandardizeTol = 1e-6;     // activation series mean/std bars
constexpr double kAccuracyBar = 0.90;        // held-out preference accuracy
constexpr double kTrainBudgetSeconds = 600.0;
constexpr double kSelectivityPBar = 0.01;    // one-sided rank test on cue weight
constexpr std::int64_t kSelectivityMinResponses = 200;
constexpr double kSelfKlTol = 1e-9;          // frontier KL of policy == reference

double elapsed(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// Desk-scale fixture shared by the behavioral criteria: the dataset, the
// frozen starting model, and the headline training configuration that the
// determinism check later replays verbatim.
struct Lab {
    fs::path dir;
    VocabSpec spec = VocabSpec::standard(64);
    PairDataset train;
    PairDataset heldout;
    TransformerLM init;
    TrainConfig sparse_cfg;
    PoResult sparse;
    PoResult dpo;
    double sparse_acc = 0.0;
    double dpo_acc = 0.0;
    bool trained = false;
};

Lab make_lab() {
    Lab lab;
    lab.dir = fs::temp_directory_path() / "tokpo_acceptance";
    fs::remove_all(lab.dir);
    fs::create_directories(lab.dir);

    lab.train = PairDataset{lab.spec, generate_pairs(lab.spec, 2000, 4, 10, 0.25, 0xA11CEull)};
    lab.heldout = PairDataset{lab.spec, generate_pairs(lab.spec, 500, 4, 10, 0.25, 0xE7A1ull)};

    ModelConfig mc;
    mc.vocab_size = 64;
    mc.context_len = 32;
    mc.n_layers = 2;
    mc.d_model = 64;
    mc.n_heads = 4;
    mc.seed = 0xC0FFEEull;
    lab.init = TransformerLM(mc);

    lab.sparse_cfg.loss.method = Method::SparseCommon;
    lab.sparse_cfg.loss.beta = 0.1;
    // Strong enough value pressure that only positions still earning margin
    // stay above the floor; without it every weight saturates and the mask
    // stops telling cue from filler.
    lab.sparse_cfg.loss.l1_coeff = 0.01;
    lab.sparse_cfg.learning_rate = 3e-4;
    lab.sparse_cfg.mask_learning_rate = 1e-2;
    lab.sparse_cfg.epochs = 1;
    lab.sparse_cfg.batch_size = 8;
    lab.sparse_cfg.seed = 7;
    lab.sparse_cfg.checkpoint_path = (lab.dir / "sparse.ckpt").string();
    lab.sparse_cfg.metrics_path = (lab.dir / "sparse.jsonl").string();
    return lab;
}

PreferencePair random_pair(Rng& rng, int vocab) {
    auto fill = [&](std::int64_t len) {
        std::vector<int> out(static_cast<std::size_t>(len));
        for (auto& id : out) id = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
        return out;
    };
    PreferencePair p;
    p.prompt = fill(1 + static_cast<std::int64_t>(rng.below(3)));
    p.chosen = fill(1 + static_cast<std::int64_t>(rng.below(5)));
    p.rejected = fill(1 + static_cast<std::int64_t>(rng.below(5)));
    return p;
}

ModelConfig pocket_model_config(std::uint64_t seed) {
    ModelConfig mc;
    mc.vocab_size = 8;
    mc.context_len = 16;
    mc.n_layers = 1;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.ffn_mult = 2;
    mc.seed = seed;
    return mc;
}

struct Report {
    bool ok = false;
    std::string detail;
};

// --- 1: every primitive and every objective passes finite differences ------

Report check_gradient_suite() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int s = 1; s <= kGradSeeds; ++s) {
        auto r =
            tokpo::testsupport::composite_gradient_case(static_cast<std::uint64_t>(s), kGradTol);
        worst = std::max(worst, r.max_rel_error);
        if (!r.ok) return {false, "primitive suite, seed " + std::to_string(s) + ": " + r.message};
    }
    const Method zoo[] = {Method::DPO,  Method::TDPO1,        Method::TDPO2, Method::SimPO,
                          Method::DPOP, Method::SparseCommon, Method::SparseIndep, Method::MaPO};
    for (Method m : zoo)
        for (int s = 101; s <= 100 + kGradSeeds; ++s) {
            auto r = ::testsupport::fd_check_loss(m, static_cast<std::uint64_t>(s), kGradTol);
            worst = std::max(worst, r.max_rel_error);
            if (!r.ok)
                return {false, std::string(method_name(m)) + " seed " + std::to_string(s) + ": " +
                                   r.message};
        }
    const double t = elapsed(t0);
    if (t >= kGradBudgetSeconds)
        return {false, "suite took " + fmt(t) + "s, budget " + fmt(kGradBudgetSeconds) + "s"};
    return {true, "max rel err " + fmt(worst) + " over " + std::to_string(kGradSeeds) +
                      " seeds/target, " + fmt(t) + "s"};
}

// --- 2: all-ones masks make the sparse objective the token-level one -------

Report check_reduction() {
    TransformerLM policy(pocket_model_config(11));
    TransformerLM reference(pocket_model_config(12));
    MaskProvider ones = MaskProvider::make(MaskKind::AllOnes, 1, 16, 0.01, 5);

    LossConfig sparse;
    sparse.method = Method::SparseCommon;
    sparse.beta = 0.37;
    LossConfig tokenwise = sparse;
    tokenwise.method = Method::TDPO1;

    Rng rng(0x6ed0ull);
    double worst = 0.0;
    for (int i = 0; i < kReductionPairs; ++i) {
        PreferencePair p = random_pair(rng, 8);
        const std::vector<const PreferencePair*> batch = {&p};
        const std::vector<std::uint64_t> idx = {static_cast<std::uint64_t>(i)};
        BatchEval a = evaluate_batch(policy, &reference, batch, idx, ones, sparse, 0);
        BatchEval b = evaluate_batch(policy, &reference, batch, idx, ones, tokenwise, 0);
        worst = std::max(worst, std::fabs(a.stats.loss - b.stats.loss));
    }
    return {worst <= kReductionTol,
            "max |difference| " + fmt(worst) + " over " + std::to_string(kReductionPairs) +
                " pairs"};
}

// --- 3: a neutral start scores ln 2 under every objective -------------------

Report check_initial_value() {
    TransformerLM model(pocket_model_config(21));
    const Method all[] = {Method::DPO,          Method::TDPO1,       Method::TDPO2,
                          Method::SimPO,        Method::DPOP,        Method::MaPO,
                          Method::SparseCommon, Method::SparseIndep, Method::MaskRandom,
                          Method::MaskBinary};
    Rng rng(0x1091ull);
    double worst = 0.0;
    for (Method m : all) {
        LossConfig cfg;
        cfg.method = m;
        cfg.gamma_margin = 0.0;
        MaskProvider masks = MaskProvider::make(method_mask_kind(m), 1, 16, cfg.mask_eps, 31);
        for (int i = 0; i < 20; ++i) {
            PreferencePair p = random_pair(rng, 8);
            // The length-normalized objective has no reference to cancel
            // against, so its neutral point is a tied pair.
            if (m == Method::SimPO) p.rejected = p.chosen;
            const std::vector<const PreferencePair*> batch = {&p};
            const std::vector<std::uint64_t> idx = {static_cast<std::uint64_t>(i)};
            BatchEval e = evaluate_batch(model, &model, batch, idx, masks, cfg, 0);
            worst = std::max(worst, std::fabs(e.stats.loss - std::log(2.0)));
        }
    }
    return {worst <= kInitTol, "max |loss - ln 2| = " + fmt(worst) + " across 10 objectives"};
}

// --- 4: losses match the plain-double closed forms --------------------------

Report check_scalar_oracle() {
    auto grid = ::testsupport::run_scalar_grid(0x5ca1a5ull, 3);
    if (grid.cases < kOracleMinCases)
        return {false, "only " + std::to_string(grid.cases) + " grid cases"};
    return {grid.max_abs_err <= kOracleTol, "max |err| " + fmt(grid.max_abs_err) + " over " +
                                                std::to_string(grid.cases) + " parameterizations"};
}

// --- 5: activation series standardize to mean 0, std 1 ----------------------

Report check_standardization(const Lab& lab) {
    double worst_mean = 0.0, worst_std = 0.0;
    std::int64_t n_series = 0, n_spread = 0;
    for (std::size_t i = 0; i < 25; ++i) {
        const auto& pair = lab.train.pairs[i];
        TokenizedPair tp = tokenize_pair(pair, lab.spec.bos);
        for (int side = 0; side < 2; ++side) {
            const auto& tokens = side == 0 ? tp.tokens_c : tp.tokens_r;
            const auto count = static_cast<std::int64_t>(
                (side == 0 ? pair.chosen : pair.rejected).size());
            ForwardTrace trace = lab.init.forward(tokens, true);
            for (const auto& series : mapo_site_series(trace, tp.resp_begin, count)) {
                double mean = 0.0;
                for (double v : series) mean += v;
                mean /= static_cast<double>(series.size());
                double var = 0.0;
                for (double v : series) var += (v - mean) * (v - mean);
                var /= static_cast<double>(series.size());
                worst_mean = std::max(worst_mean, std::fabs(mean));
                ++n_series;
                if (var > 0.0) {
                    worst_std = std::max(worst_std, std::fabs(std::sqrt(var) - 1.0));
                    ++n_spread;
                }
            }
        }
    }
    const bool ok = worst_mean < kStandardizeTol && worst_std < kStandardizeTol && n_spread > 0;
    return {ok, std::to_string(n_series) + " site series: worst |mean| " + fmt(worst_mean) +
                    ", worst |std-1| " + fmt(worst_std)};
}

// --- 6: the desk-scale run actually learns the preference -------------------

Report check_end_to_end(Lab& lab) {
    const auto t0 = Clock::now();
    lab.sparse = run_po(lab.init, lab.train, lab.sparse_cfg);

    TrainConfig dcfg = lab.sparse_cfg;
    dcfg.loss.method = Method::DPO;
    dcfg.loss.l1_coeff = 0.0;
    dcfg.checkpoint_path = (lab.dir / "dpo.ckpt").string();
    dcfg.metrics_path = (lab.dir / "dpo.jsonl").string();
    lab.dpo = run_po(lab.init, lab.train, dcfg);

    lab.sparse_acc = preference_accuracy(lab.sparse.policy, &lab.init, lab.heldout,
                                         lab.sparse_cfg.loss);
    lab.dpo_acc = preference_accuracy(lab.dpo.policy, &lab.init, lab.heldout, dcfg.loss);
    lab.trained = true;

    const double t = elapsed(t0);
    const bool ok = lab.sparse_acc >= kAccuracyBar && lab.dpo_acc >= kAccuracyBar &&
                    lab.sparse_cfg.epochs <= 3 && t < kTrainBudgetSeconds;
    return {ok, "held-out accuracy: sparse-common " + fmt(lab.sparse_acc) + ", dpo " +
                    fmt(lab.dpo_acc) + " (bar " + fmt(kAccuracyBar) + "), " + fmt(t) + "s"};
}

// --- 7: the learned mask spends its weight on cue tokens --------------------

Report check_mask_selectivity(const Lab& lab) {
    if (!lab.trained) return {false, "skipped: the end-to-end run did not complete"};
    SelectivityResult sel = mask_selectivity(lab.init, lab.sparse.masks, lab.heldout);
    if (sel.n_responses < kSelectivityMinResponses)
        return {false, "only " + std::to_string(sel.n_responses) + " usable responses"};
    const bool ok = sel.mean_cue > sel.mean_filler && sel.test.p_value < kSelectivityPBar;
    return {ok, "cue weight " + fmt(sel.mean_cue) + " vs filler " + fmt(sel.mean_filler) +
                    ", p = " + fmt(sel.test.p_value) + " over " +
                    std::to_string(sel.n_responses) + " responses"};
}

// --- 8: the value penalty pushes masks down ---------------------------------

Report check_l1_direction(const Lab& lab) {
    PairDataset sub{lab.spec, {lab.train.pairs.begin(), lab.train.pairs.begin() + 400}};
    auto run_with = [&](double coeff, const char* tag) {
        TrainConfig cfg = lab.sparse_cfg;
        cfg.loss.l1_coeff = coeff;
        cfg.epochs = 1;
        cfg.checkpoint_path = (lab.dir / (std::string("l1_") + tag + ".ckpt")).string();
        cfg.metrics_path = (lab.dir / (std::string("l1_") + tag + ".jsonl")).string();
        return run_po(lab.init, sub, cfg);
    };
    PoResult off = run_with(0.0, "off");
    PoResult on = run_with(0.001, "on");
    return {on.final_mask_l1_mean < off.final_mask_l1_mean,
            "final mean mask weight " + fmt(on.final_mask_l1_mean) + " (penalized) vs " +
                fmt(off.final_mask_l1_mean) + " (free)"};
}

// --- 9: frontier and sparsity files come out well-formed --------------------

Report check_pipelines(Lab& lab) {
    if (!lab.trained) return {false, "skipped: the end-to-end run did not complete"};

    // A second operating point at beta = 1.0, small but real.
    PairDataset sub{lab.spec, {lab.train.pairs.begin(), lab.train.pairs.begin() + 400}};
    TrainConfig hot = lab.sparse_cfg;
    hot.loss.beta = 1.0;
    hot.epochs = 1;
    hot.checkpoint_path = (lab.dir / "beta10.ckpt").string();
    hot.metrics_path = (lab.dir / "beta10.jsonl").string();
    PoResult high = run_po(lab.init, sub, hot);

    std::vector<std::vector<int>> prompts;
    for (std::size_t i = 0; i < 50; ++i) prompts.push_back(lab.heldout.pairs[i].prompt);
    SamplerConfig scfg;
    scfg.max_new_tokens = 12;
    scfg.seed = 2024;

    SampledEval low_eval = eval_frontier(lab.sparse.policy, lab.init, prompts, lab.spec, scfg);
    SampledEval high_eval = eval_frontier(high.policy, lab.init, prompts, lab.spec, scfg);
    std::vector<FrontierPoint> points(2);
    points[0] = {"sparse-common", 0.1, lab.sparse.steps_completed, low_eval.mean_reward,
                 low_eval.mean_kl, low_eval.n_prompts, low_eval.n_truncated};
    points[1] = {"sparse-common", 1.0, high.steps_completed, high_eval.mean_reward,
                 high_eval.mean_kl, high_eval.n_prompts, high_eval.n_truncated};
    const std::string frontier_path = (lab.dir / "frontier.csv").string();
    save_frontier_csv(frontier_path, points);
    auto loaded = load_frontier_csv(frontier_path);
    if (loaded.size() != 2) return {false, "frontier round trip lost rows"};
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        const auto& p = loaded[i];
        if (!(p.mean_kl >= 0.0) || !std::isfinite(p.mean_kl))
            return {false, "frontier KL " + fmt(p.mean_kl) + " at beta " + fmt(p.beta)};
        if (!(p.mean_reward >= 0.0 && p.mean_reward <= 1.0))
            return {false, "frontier reward " + fmt(p.mean_reward) + " outside [0,1]"};
        if (p.beta != points[i].beta || p.n_prompts != 50)
            return {false, "frontier row mangled in the round trip"};
    }

    SampledEval self = eval_frontier(lab.init, lab.init, prompts, lab.spec, scfg);
    if (!(std::fabs(self.mean_kl) <= kSelfKlTol))
        return {false, "policy == reference frontier KL " + fmt(self.mean_kl)};

    const std::string sparsity_path = (lab.dir / "sparsity.csv").string();
    SparsityReportResult rep = sparsity_report(
        {{0.1, lab.sparse_cfg.metrics_path}, {1.0, hot.metrics_path}}, sparsity_path);
    if (!rep.missing.empty()) return {false, "sparsity report lost " + rep.missing.front()};
    auto rows = load_sparsity_csv(sparsity_path);
    if (rows.size() != rep.rows.size() || rows.empty())
        return {false, "sparsity round trip lost rows"};
    for (const auto& r : rows) {
        if (!(r.sparsity_mu >= 0.0 && r.sparsity_mu <= 1.0) ||
            !(r.sparsity_md >= 0.0 && r.sparsity_md <= 1.0))
            return {false, "sparsity outside [0,1] at step " + std::to_string(r.step)};
        if (!(r.mean_token_kl_chosen >= 0.0) || !(r.mean_token_kl_rejected >= 0.0))
            return {false, "negative KL at step " + std::to_string(r.step)};
    }
    return {true, "2 frontier rows, " + std::to_string(rows.size()) +
                      " sparsity rows, self-KL " + fmt(self.mean_kl)};
}

// --- 10: same seed, same bytes; interrupt/resume, same bytes ----------------

Report check_determinism(const Lab& lab) {
    if (!lab.trained) return {false, "skipped: the end-to-end run did not complete"};

    TrainConfig again = lab.sparse_cfg;
    again.checkpoint_path = (lab.dir / "sparse_again.ckpt").string();
    again.metrics_path = (lab.dir / "sparse_again.jsonl").string();
    PoResult rerun = run_po(lab.init, lab.train, again);
    if (rerun.policy.checksum() != lab.sparse.policy.checksum())
        return {false, "same-seed rerun reached a different policy"};
    const std::string base_log = slurp(lab.sparse_cfg.metrics_path);
    if (base_log.empty() || slurp(again.metrics_path) != base_log)
        return {false, "same-seed rerun wrote a different metrics log"};

    TrainConfig first_leg = lab.sparse_cfg;
    first_leg.max_steps = 100;
    first_leg.checkpoint_path = (lab.dir / "interrupt.ckpt").string();
    first_leg.metrics_path = (lab.dir / "resumed.jsonl").string();
    PoResult partial = run_po(lab.init, lab.train, first_leg);
    if (partial.finished) return {false, "interrupted leg ran to completion"};

    TrainConfig second_leg = first_leg;
    second_leg.max_steps = 0;
    PoResult resumed = run_po(lab.init, lab.train, second_leg, first_leg.checkpoint_path);
    if (!resumed.finished || resumed.policy.checksum() != lab.sparse.policy.checksum())
        return {false, "resumed run diverged from the uninterrupted one"};
    if (slurp(second_leg.metrics_path) != base_log)
        return {false, "resumed metrics log differs from the uninterrupted one"};
    return {true, "rerun and interrupt/resume both reproduced the log byte for byte"};
}

}  // namespace

int main() {
    Lab lab = make_lab();

    struct Criterion {
        const char* name;
        std::function<Report()> run;
    };
    const Criterion criteria[] = {
        {"gradient suite (primitives + all objectives)", [] { return check_gradient_suite(); }},
        {"all-ones mask reduces to token-level dpo", [] { return check_reduction(); }},
        {"neutral start scores ln 2 everywhere", [] { return check_initial_value(); }},
        {"losses match the closed-form scalar oracle", [] { return check_scalar_oracle(); }},
        {"activation series standardization", [&] { return check_standardization(lab); }},
        {"desk-scale run learns the preference", [&] { return check_end_to_end(lab); }},
        {"learned mask favors cue tokens", [&] { return check_mask_selectivity(lab); }},
        {"value penalty shrinks the mask", [&] { return check_l1_direction(lab); }},
        {"frontier and sparsity pipelines", [&] { return check_pipelines(lab); }},
        {"bit-exact rerun and interrupt/resume", [&] { return check_determinism(lab); }},
    };

    int failures = 0;
    int index = 0;
    for (const auto& c : criteria) {
        ++index;
        const auto t0 = Clock::now();
        Report r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {false, std::string("threw: ") + e.what()};
        }
        if (!r.ok) ++failures;
        std::printf("[%2d/10] %s  %s (%s; %.1fs)\n", index, r.ok ? "PASS" : "FAIL", c.name,
                    r.detail.c_str(), elapsed(t0));
        std::fflush(stdout);
    }
    if (failures == 0) {
        std::printf("acceptance: all 10 criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d of 10 criteria FAILED\n", failures);
    return 1;
}

#pragma once

// Evaluation and reporting: preference accuracy under each method's implicit
// reward, reward/KL frontier measurement from sampled completions, token-level
// heatmap export, sparsity curves across beta, and the paired rank test used
// to check that learned masks concentrate on cue tokens.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "losses.hpp"
#include "masks.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "trainer.hpp"

namespace tokpo {

inline const std::vector<double>& default_beta_grid() {
    static const std::vector<double> grid = {0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8,
                                             0.9,  1.0, 2.0, 3.0, 4.0, 5.0,  10.0, 20.0};
    return grid;
}

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) detail::op_fail("fmt_double", "value does not format");
    return std::string(buf, end);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Preference accuracy
// ---------------------------------------------------------------------------

struct ResponseLogProb {
    double sum = 0.0;
    std::int64_t count = 0;
    double mean() const { return count > 0 ? sum / static_cast<double>(count) : 0.0; }
};

inline ResponseLogProb response_log_prob(const TransformerLM& model,
                                         const std::vector<int>& tokens,
                                         std::int64_t resp_begin) {
    ForwardTrace trace = model.forward(tokens);
    Tensor lp = gather_response_log_probs(trace, tokens, resp_begin);
    ResponseLogProb out;
    out.count = lp.numel();
    for (double v : lp.data()) out.sum += v;
    return out;
}

// Implicit preference margin: the quantity whose sign says which response the
// trained objective prefers. Reference-based methods use the beta-weighted
// difference of summed policy/reference log-ratios; SimPO uses the
// length-normalized policy log-prob difference minus its target margin.
inline double preference_margin(const TransformerLM& policy, const TransformerLM* reference,
                                const PreferencePair& pair, const LossConfig& cfg, int bos_id) {
    TokenizedPair tp = tokenize_pair(pair, bos_id);
    ResponseLogProb pol_c = response_log_prob(policy, tp.tokens_c, tp.resp_begin);
    ResponseLogProb pol_r = response_log_prob(policy, tp.tokens_r, tp.resp_begin);
    if (cfg.method == Method::SimPO)
        return cfg.beta * (pol_c.mean() - pol_r.mean()) - cfg.gamma_margin;
    if (reference == nullptr)
        detail::op_fail("preference_margin",
                        std::string(method_name(cfg.method)) + " needs a reference model");
    ResponseLogProb ref_c = response_log_prob(*reference, tp.tokens_c, tp.resp_begin);
    ResponseLogProb ref_r = response_log_prob(*reference, tp.tokens_r, tp.resp_begin);
    return cfg.beta * ((pol_c.sum - ref_c.sum) - (pol_r.sum - ref_r.sum));
}

// Fraction of pairs whose margin favors the chosen response; exact ties
// count as half.
inline double preference_accuracy(const TransformerLM& policy, const TransformerLM* reference,
                                  const PairDataset& dataset, const LossConfig& cfg) {
    if (dataset.pairs.empty()) detail::op_fail("preference_accuracy", "empty dataset");
    double score = 0.0;
    for (const auto& pair : dataset.pairs) {
        const double m = preference_margin(policy, reference, pair, cfg, dataset.spec.bos);
        if (m > 0.0)
            score += 1.0;
        else if (m == 0.0)
            score += 0.5;
    }
    return score / static_cast<double>(dataset.pairs.size());
}

// ---------------------------------------------------------------------------
// Reward/KL frontier
// ---------------------------------------------------------------------------

struct SamplerConfig {
    std::int64_t max_new_tokens = 24;
    double temperature = 1.0;
    double top_p = 1.0;  // 1.0 = plain multinomial sampling
    std::uint64_t seed = 7;
};

struct FrontierPoint {
    std::string run_id;
    double beta = 0.0;
    std::int64_t step = 0;
    double mean_reward = 0.0;
    double mean_kl = 0.0;
    std::int64_t n_prompts = 0;
    std::int64_t n_truncated = 0;
};

struct SampledEval {
    double mean_reward = 0.0;
    double mean_kl = 0.0;
    std::int64_t n_prompts = 0;
    std::int64_t n_truncated = 0;
};

// Samples one completion per prompt from the policy, scores it with the
// ground-truth reward, and sums next-token KL(policy || reference) over the
// sampled positions. A completion without eos counts as truncated; an empty
// response (immediate eos) scores the cue-free neutral reward 0.5.
inline SampledEval eval_frontier(const TransformerLM& policy, const TransformerLM& reference,
                                 const std::vector<std::vector<int>>& prompts,
                                 const VocabSpec& spec, const SamplerConfig& scfg) {
    if (prompts.empty()) detail::op_fail("eval_frontier", "no prompts");
    SampledEval out;
    out.n_prompts = static_cast<std::int64_t>(prompts.size());
    double reward_sum = 0.0, kl_sum = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        Rng rng(Rng::derive(scfg.seed, static_cast<std::uint64_t>(i)));
        std::vector<int> ctx;
        ctx.reserve(prompts[i].size() + 1);
        ctx.push_back(spec.bos);
        ctx.insert(ctx.end(), prompts[i].begin(), prompts[i].end());
        std::vector<int> completion = policy.sample(ctx, scfg.max_new_tokens, scfg.temperature,
                                                    scfg.top_p, rng, spec.eos);
        if (completion.empty() || completion.back() != spec.eos) ++out.n_truncated;

        std::vector<int> resp = completion;
        if (!resp.empty() && resp.back() == spec.eos) resp.pop_back();
        reward_sum += resp.empty() ? 0.5 : ground_truth_reward(resp, spec);

        if (!completion.empty()) {
            std::vector<int> seq = ctx;
            seq.insert(seq.end(), completion.begin(), completion.end());
            ForwardTrace pol_trace = policy.forward(seq);
            ForwardTrace ref_trace = reference.forward(seq);
            const auto r0 = static_cast<std::int64_t>(ctx.size()) - 1;
            const auto count = static_cast<std::int64_t>(completion.size());
            Tensor kl = token_kl_series(slice_rows(pol_trace.log_dist, r0, r0 + count),
                                        slice_rows(ref_trace.log_dist, r0, r0 + count));
            for (double v : kl.data()) kl_sum += v;
        }
    }
    out.mean_reward = reward_sum / static_cast<double>(out.n_prompts);
    out.mean_kl = kl_sum / static_cast<double>(out.n_prompts);
    return out;
}

inline void save_frontier_csv(const std::string& path, const std::vector<FrontierPoint>& points) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("frontier: cannot open '" + path + "'");
    out << "# tokpo-frontier v1\n";
    out << "run_id,beta,step,mean_reward,mean_kl,n_prompts,n_truncated\n";
    for (const auto& p : points) {
        std::string id = p.run_id;
        std::replace(id.begin(), id.end(), ',', '_');
        out << id << ',' << detail::fmt_double(p.beta) << ',' << p.step << ','
            << detail::fmt_double(p.mean_reward) << ',' << detail::fmt_double(p.mean_kl) << ','
            << p.n_prompts << ',' << p.n_truncated << "\n";
    }
    if (!out) throw std::runtime_error("frontier: write failed for '" + path + "'");
}

inline std::vector<FrontierPoint> load_frontier_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("frontier: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "# tokpo-frontier v1")
        throw std::runtime_error("frontier: '" + path + "' has no tokpo-frontier v1 header");
    if (!std::getline(in, line) ||
        line != "run_id,beta,step,mean_reward,mean_kl,n_prompts,n_truncated")
        throw std::runtime_error("frontier: '" + path + "' has an unexpected column header");
    std::vector<FrontierPoint> points;
    std::size_t line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != 7)
            throw std::runtime_error("frontier: expected 7 fields at line " +
                                     std::to_string(line_no) + " of '" + path + "'");
        FrontierPoint p;
        p.run_id = fields[0];
        p.beta = std::stod(fields[1]);
        p.step = std::stoll(fields[2]);
        p.mean_reward = std::stod(fields[3]);
        p.mean_kl = std::stod(fields[4]);
        p.n_prompts = std::stoll(fields[5]);
        p.n_truncated = std::stoll(fields[6]);
        points.push_back(std::move(p));
    }
    return points;
}

// ---------------------------------------------------------------------------
// Token-level heatmap export
// ---------------------------------------------------------------------------

struct HeatmapRow {
    std::vector<double> raw;
    std::vector<double> scaled;
    double lo = 0.0, hi = 0.0;
    bool degenerate = false;
};

// Min-max scales a row into [0,1]; a constant row maps to all 0.5 and is
// flagged so plots can grey it out.
inline HeatmapRow scale_heatmap_row(const std::vector<double>& raw) {
    HeatmapRow row;
    row.raw = raw;
    if (raw.empty()) detail::op_fail("scale_heatmap_row", "empty row");
    row.lo = *std::min_element(raw.begin(), raw.end());
    row.hi = *std::max_element(raw.begin(), raw.end());
    row.scaled.resize(raw.size());
    if (!(row.hi > row.lo)) {
        row.degenerate = true;
        std::fill(row.scaled.begin(), row.scaled.end(), 0.5);
    } else {
        for (std::size_t i = 0; i < raw.size(); ++i)
            row.scaled[i] = (raw[i] - row.lo) / (row.hi - row.lo);
    }
    return row;
}

struct HeatmapRecord {
    std::string which;  // "chosen" or "rejected"
    std::vector<int> tokens;
    std::vector<std::string> token_names;
    std::vector<double> mask_u, mask_d;
    HeatmapRow reward, reward_masked, kl, kl_masked;

    nlohmann::json to_json() const {
        auto row = [](const HeatmapRow& r) {
            return nlohmann::json{{"raw", r.raw},
                                  {"scaled", r.scaled},
                                  {"lo", r.lo},
                                  {"hi", r.hi},
                                  {"degenerate", r.degenerate}};
        };
        return {{"which", which},
                {"tokens", tokens},
                {"token_names", token_names},
                {"mask_u", mask_u},
                {"mask_d", mask_d},
                {"reward", row(reward)},
                {"reward_masked", row(reward_masked)},
                {"kl", row(kl)},
                {"kl_masked", row(kl_masked)}};
    }
};

// Per-token log-ratios and KLs for one pair, raw and mask-weighted, each
// min-max scaled per sequence.
inline std::vector<HeatmapRecord> export_heatmap(const TransformerLM& policy,
                                                 const TransformerLM& reference,
                                                 const PreferencePair& pair,
                                                 const MaskProvider& masks, const VocabSpec& spec,
                                                 std::uint64_t pair_index = 0) {
    TokenizedPair tp = tokenize_pair(pair, spec.bos);
    std::vector<HeatmapRecord> records;
    const bool want_taps = masks.wants_taps();
    for (int side = 0; side < 2; ++side) {
        const std::vector<int>& seq = side == 0 ? tp.tokens_c : tp.tokens_r;
        const std::vector<int>& resp = side == 0 ? pair.chosen : pair.rejected;
        ForwardTrace pol_trace = policy.forward(seq);
        ForwardTrace ref_trace = reference.forward(seq, want_taps);
        const auto count = static_cast<std::int64_t>(resp.size());
        auto [mu, md] = masks.masks_for_response(ref_trace, tp.resp_begin, count,
                                                 pair_index * 2 + static_cast<std::uint64_t>(side));

        Tensor lp_pol = gather_response_log_probs(pol_trace, seq, tp.resp_begin);
        Tensor lp_ref = gather_response_log_probs(ref_trace, seq, tp.resp_begin);
        const auto r0 = tp.resp_begin - 1;
        Tensor kl = token_kl_series(slice_rows(pol_trace.log_dist, r0, r0 + count),
                                    slice_rows(ref_trace.log_dist, r0, r0 + count));

        HeatmapRecord rec;
        rec.which = side == 0 ? "chosen" : "rejected";
        rec.tokens = resp;
        for (int id : resp) rec.token_names.push_back(spec.token_name(id));
        rec.mask_u = mu.weights.data();
        rec.mask_d = md.weights.data();

        std::vector<double> reward_raw(static_cast<std::size_t>(count));
        std::vector<double> reward_masked_raw(static_cast<std::size_t>(count));
        std::vector<double> kl_masked_raw(static_cast<std::size_t>(count));
        for (std::int64_t t = 0; t < count; ++t) {
            const auto ti = static_cast<std::size_t>(t);
            reward_raw[ti] = lp_pol.data()[ti] - lp_ref.data()[ti];
            reward_masked_raw[ti] = rec.mask_u[ti] * reward_raw[ti];
            kl_masked_raw[ti] = rec.mask_d[ti] * kl.data()[ti];
        }
        rec.reward = scale_heatmap_row(reward_raw);
        rec.reward_masked = scale_heatmap_row(reward_masked_raw);
        rec.kl = scale_heatmap_row(kl.data());
        rec.kl_masked = scale_heatmap_row(kl_masked_raw);
        records.push_back(std::move(rec));
    }
    return records;
}

inline void save_heatmap(const std::string& path, const MaskProvider& masks,
                         const std::vector<HeatmapRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("heatmap: cannot open '" + path + "'");
    nlohmann::json header = {{"format", "tokpo-heatmap"},
                             {"version", 1},
                             {"mask", mask_kind_name(masks.kind())},
                             {"scaling", "minmax-per-sequence"}};
    out << header.dump() << "\n";
    for (const auto& rec : records) out << rec.to_json().dump() << "\n";
    if (!out) throw std::runtime_error("heatmap: write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Sparsity report across a beta grid
// ---------------------------------------------------------------------------

struct SparsityRow {
    double beta = 0.0;
    std::int64_t step = 0;
    double sparsity_mu = 0.0;
    double sparsity_md = 0.0;
    double mean_token_kl_chosen = 0.0;
    double mean_token_kl_rejected = 0.0;
};

struct SparsityReportResult {
    std::vector<SparsityRow> rows;
    std::vector<std::string> missing;  // metrics files that could not be read
};

// Collates per-beta metrics logs into one curve table. Unreadable logs are
// reported in `missing` instead of aborting the rest of the grid.
inline SparsityReportResult sparsity_report(const std::vector<std::pair<double, std::string>>& runs,
                                            const std::string& out_path) {
    SparsityReportResult result;
    for (const auto& [beta, path] : runs) {
        MetricsLog log;
        try {
            log = load_metrics(path);
        } catch (const std::exception&) {
            result.missing.push_back(path);
            continue;
        }
        for (const auto& r : log.records) {
            SparsityRow row;
            row.beta = beta;
            row.step = r.step;
            row.sparsity_mu = r.sparsity_mu;
            row.sparsity_md = r.sparsity_md;
            row.mean_token_kl_chosen = r.mean_token_kl_chosen;
            row.mean_token_kl_rejected = r.mean_token_kl_rejected;
            result.rows.push_back(row);
        }
    }
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw std::runtime_error("sparsity-report: cannot open '" + out_path + "'");
    out << "# tokpo-sparsity v1\n";
    out << "beta,step,sparsity_mu,sparsity_md,mean_token_kl_chosen,mean_token_kl_rejected\n";
    for (const auto& r : result.rows)
        out << detail::fmt_double(r.beta) << ',' << r.step << ','
            << detail::fmt_double(r.sparsity_mu) << ',' << detail::fmt_double(r.sparsity_md) << ','
            << detail::fmt_double(r.mean_token_kl_chosen) << ','
            << detail::fmt_double(r.mean_token_kl_rejected) << "\n";
    if (!out) throw std::runtime_error("sparsity-report: write failed for '" + out_path + "'");
    return result;
}

inline std::vector<SparsityRow> load_sparsity_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("sparsity-report: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "# tokpo-sparsity v1")
        throw std::runtime_error("sparsity-report: '" + path + "' has no tokpo-sparsity v1 header");
    if (!std::getline(in, line) ||
        line != "beta,step,sparsity_mu,sparsity_md,mean_token_kl_chosen,mean_token_kl_rejected")
        throw std::runtime_error("sparsity-report: '" + path + "' has an unexpected column header");
    std::vector<SparsityRow> rows;
    std::size_t line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != 6)
            throw std::runtime_error("sparsity-report: expected 6 fields at line " +
                                     std::to_string(line_no) + " of '" + path + "'");
        SparsityRow r;
        r.beta = std::stod(fields[0]);
        r.step = std::stoll(fields[1]);
        r.sparsity_mu = std::stod(fields[2]);
        r.sparsity_md = std::stod(fields[3]);
        r.mean_token_kl_chosen = std::stod(fields[4]);
        r.mean_token_kl_rejected = std::stod(fields[5]);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test (one-sided, normal approximation)
// ---------------------------------------------------------------------------

struct RankTestResult {
    double statistic = 0.0;  // W+: rank sum of positive differences
    double z = 0.0;
    double p_value = 1.0;
    std::int64_t n_effective = 0;  // nonzero differences entering the test
};

// Tests H1: median(diff) > 0. Zero differences are dropped; tied absolute
// values get average ranks with the usual variance correction; the normal
// approximation uses a 0.5 continuity correction.
inline RankTestResult wilcoxon_signed_rank_one_sided(const std::vector<double>& diffs) {
    std::vector<double> d;
    for (double v : diffs)
        if (v != 0.0) d.push_back(v);
    RankTestResult out;
    out.n_effective = static_cast<std::int64_t>(d.size());
    if (d.empty()) return out;

    std::vector<std::size_t> order(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return std::fabs(d[a]) < std::fabs(d[b]); });

    std::vector<double> rank(d.size());
    double tie_correction = 0.0;
    std::size_t i = 0;
    while (i < d.size()) {
        std::size_t j = i;
        while (j + 1 < d.size() && std::fabs(d[order[j + 1]]) == std::fabs(d[order[i]])) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg_rank;
        const double t = static_cast<double>(j - i + 1);
        tie_correction += (t * t * t - t);
        i = j + 1;
    }

    double w_plus = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k)
        if (d[k] > 0.0) w_plus += rank[k];
    const double n = static_cast<double>(d.size());
    const double mean = n * (n + 1.0) / 4.0;
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_correction / 48.0;
    out.statistic = w_plus;
    if (!(var > 0.0)) {
        out.p_value = w_plus > mean ? 0.0 : 1.0;
        return out;
    }
    out.z = (w_plus - mean - 0.5) / std::sqrt(var);
    out.p_value = 0.5 * std::erfc(out.z / std::sqrt(2.0));
    return out;
}

// ---------------------------------------------------------------------------
// Mask selectivity on cue vs. filler tokens
// ---------------------------------------------------------------------------

struct SelectivityResult {
    double mean_cue = 0.0;     // mean m_u over cue positions, averaged per response
    double mean_filler = 0.0;  // same over filler positions
    std::int64_t n_responses = 0;
    RankTestResult test;
};

// On held-out chosen responses, compares the reward-mask weight on cue tokens
// against filler tokens with a one-sided signed-rank test. Responses missing
// either token class are skipped.
inline SelectivityResult mask_selectivity(const TransformerLM& reference,
                                          const MaskProvider& masks, const PairDataset& dataset,
                                          std::int64_t max_pairs = -1) {
    if (dataset.pairs.empty()) detail::op_fail("mask_selectivity", "empty dataset");
    SelectivityResult out;
    std::vector<double> diffs;
    double cue_sum = 0.0, filler_sum = 0.0;
    const std::int64_t limit =
        max_pairs > 0 ? std::min<std::int64_t>(max_pairs,
                                               static_cast<std::int64_t>(dataset.pairs.size()))
                      : static_cast<std::int64_t>(dataset.pairs.size());
    for (std::int64_t i = 0; i < limit; ++i) {
        const auto& pair = dataset.pairs[static_cast<std::size_t>(i)];
        TokenizedPair tp = tokenize_pair(pair, dataset.spec.bos);
        ForwardTrace trace = reference.forward(tp.tokens_c, masks.wants_taps());
        const auto count = static_cast<std::int64_t>(pair.chosen.size());
        auto [mu, md] = masks.masks_for_response(trace, tp.resp_begin, count,
                                                 static_cast<std::uint64_t>(i) * 2);
        double cue = 0.0, filler = 0.0;
        std::int64_t n_cue = 0, n_filler = 0;
        for (std::int64_t t = 0; t < count; ++t) {
            const int tok = pair.chosen[static_cast<std::size_t>(t)];
            const double w = mu.weights.data()[static_cast<std::size_t>(t)];
            if (dataset.spec.is_positive(tok) || dataset.spec.is_negative(tok)) {
                cue += w;
                ++n_cue;
            } else if (!dataset.spec.is_special(tok)) {
                filler += w;
                ++n_filler;
            }
        }
        if (n_cue == 0 || n_filler == 0) continue;
        const double cue_mean = cue / static_cast<double>(n_cue);
        const double filler_mean = filler / static_cast<double>(n_filler);
        cue_sum += cue_mean;
        filler_sum += filler_mean;
        ++out.n_responses;
        diffs.push_back(cue_mean - filler_mean);
    }
    if (out.n_responses > 0) {
        out.mean_cue = cue_sum / static_cast<double>(out.n_responses);
        out.mean_filler = filler_sum / static_cast<double>(out.n_responses);
    }
    out.test = wilcoxon_signed_rank_one_sided(diffs);
    return out;
}

}  // namespace tokpo

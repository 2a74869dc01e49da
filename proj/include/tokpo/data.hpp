#pragma once

// Synthetic preference data with known token-level ground truth.
//
// The vocabulary is split into special tokens, positive cues, negative cues,
// and filler. Preference is decided by a transparent bag-of-cues score, so
// downstream analyses (frontier reward, mask selectivity) have an exact
// oracle instead of a learned classifier.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rng.hpp"
#include "tensor.hpp"

namespace tokpo {

struct VocabSpec {
    std::int64_t vocab_size = 64;
    int bos = 0, eos = 1, pad = 2;
    std::vector<int> positive_cues;
    std::vector<int> negative_cues;

    static VocabSpec standard(std::int64_t vocab_size) {
        if (vocab_size < 24)
            detail::op_fail("VocabSpec", "vocab_size " + std::to_string(vocab_size) +
                                             " too small for 3 specials, 8+8 cues and filler");
        VocabSpec s;
        s.vocab_size = vocab_size;
        for (int i = 3; i < 11; ++i) s.positive_cues.push_back(i);
        for (int i = 11; i < 19; ++i) s.negative_cues.push_back(i);
        return s;
    }

    bool is_special(int id) const { return id == bos || id == eos || id == pad; }
    bool is_positive(int id) const {
        return std::find(positive_cues.begin(), positive_cues.end(), id) != positive_cues.end();
    }
    bool is_negative(int id) const {
        return std::find(negative_cues.begin(), negative_cues.end(), id) != negative_cues.end();
    }
    bool is_filler(int id) const {
        return id >= 0 && id < vocab_size && !is_special(id) && !is_positive(id) &&
               !is_negative(id);
    }

    std::vector<int> filler_ids() const {
        std::vector<int> out;
        for (int id = 0; id < static_cast<int>(vocab_size); ++id)
            if (is_filler(id)) out.push_back(id);
        return out;
    }

    std::string token_name(int id) const {
        if (id == bos) return "bos";
        if (id == eos) return "eos";
        if (id == pad) return "pad";
        for (std::size_t i = 0; i < positive_cues.size(); ++i)
            if (positive_cues[i] == id) return "pos" + std::to_string(i);
        for (std::size_t i = 0; i < negative_cues.size(); ++i)
            if (negative_cues[i] == id) return "neg" + std::to_string(i);
        return "fill" + std::to_string(id);
    }

    void validate() const {
        if (positive_cues.empty() || negative_cues.empty())
            detail::op_fail("VocabSpec", "cue sets must be nonempty");
        auto in_range = [this](int id) { return id >= 0 && id < vocab_size; };
        for (int id : positive_cues)
            if (!in_range(id) || is_special(id) || is_negative(id))
                detail::op_fail("VocabSpec", "positive cue " + std::to_string(id) +
                                                 " collides with specials/negatives or is out of range");
        for (int id : negative_cues)
            if (!in_range(id) || is_special(id))
                detail::op_fail("VocabSpec", "negative cue " + std::to_string(id) +
                                                 " collides with specials or is out of range");
        if (filler_ids().empty()) detail::op_fail("VocabSpec", "no filler ids left");
    }
};

// r = (1 + (n_pos - n_neg)/len) / 2, so all-filler scores 0.5 and the
// extremes saturate at 0 and 1. Invariant under token permutation.
inline double ground_truth_reward(const std::vector<int>& seq, const VocabSpec& spec) {
    if (seq.empty()) detail::op_fail("ground_truth_reward", "empty sequence");
    std::int64_t n_pos = 0, n_neg = 0;
    for (int id : seq) {
        if (spec.is_positive(id)) ++n_pos;
        if (spec.is_negative(id)) ++n_neg;
    }
    const double balance = static_cast<double>(n_pos - n_neg) / static_cast<double>(seq.size());
    return (1.0 + balance) / 2.0;
}

struct PreferencePair {
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;
    double chosen_score = 0.0;
    double rejected_score = 0.0;
};

namespace detail {

inline int draw_from(const std::vector<int>& ids, Rng& rng) {
    return ids[static_cast<std::size_t>(rng.below(ids.size()))];
}

inline std::vector<int> cue_bearing_sequence(const VocabSpec& spec, const std::vector<int>& cues,
                                             const std::vector<int>& filler, std::int64_t len,
                                             double cue_density, Rng& rng) {
    std::vector<int> seq(static_cast<std::size_t>(len));
    bool has_cue = false;
    for (auto& id : seq) {
        if (rng.uniform() < cue_density) {
            id = draw_from(cues, rng);
            has_cue = true;
        } else {
            id = draw_from(filler, rng);
        }
    }
    if (!has_cue) seq[static_cast<std::size_t>(rng.below(seq.size()))] = draw_from(cues, rng);
    return seq;
}

}  // namespace detail

// Chosen responses carry positive cues, rejected ones negative cues, at the
// given density; each response is guaranteed at least one cue so
// chosen_score > rejected_score holds strictly. Pure function of its
// arguments; record i uses a seed stream derived from (seed, i).
inline std::vector<PreferencePair> generate_pairs(const VocabSpec& spec, std::int64_t n_pairs,
                                                  std::int64_t prompt_len, std::int64_t resp_len,
                                                  double cue_density, std::uint64_t seed) {
    spec.validate();
    if (!(cue_density > 0.0 && cue_density < 1.0))
        detail::op_fail("generate_pairs", "cue_density must be in (0,1)");
    if (n_pairs < 1 || prompt_len < 1 || resp_len < 1)
        detail::op_fail("generate_pairs", "sizes must be >= 1");
    const std::vector<int> filler = spec.filler_ids();
    std::vector<PreferencePair> out;
    out.reserve(static_cast<std::size_t>(n_pairs));
    for (std::int64_t i = 0; i < n_pairs; ++i) {
        Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
        PreferencePair p;
        p.prompt.resize(static_cast<std::size_t>(prompt_len));
        for (auto& id : p.prompt) id = detail::draw_from(filler, rng);
        p.chosen = detail::cue_bearing_sequence(spec, spec.positive_cues, filler, resp_len,
                                                cue_density, rng);
        p.rejected = detail::cue_bearing_sequence(spec, spec.negative_cues, filler, resp_len,
                                                  cue_density, rng);
        p.chosen_score = ground_truth_reward(p.chosen, spec);
        p.rejected_score = ground_truth_reward(p.rejected, spec);
        out.push_back(std::move(p));
    }
    return out;
}

// Positive-cue-bearing sequences for next-token fine-tuning; every sequence
// scores above 0.5 by construction.
inline std::vector<std::vector<int>> generate_sft_corpus(const VocabSpec& spec,
                                                         std::int64_t n_seqs, std::int64_t len,
                                                         double cue_density, std::uint64_t seed) {
    spec.validate();
    if (!(cue_density > 0.0 && cue_density < 1.0))
        detail::op_fail("generate_sft_corpus", "cue_density must be in (0,1)");
    if (n_seqs < 1 || len < 1) detail::op_fail("generate_sft_corpus", "sizes must be >= 1");
    const std::vector<int> filler = spec.filler_ids();
    std::vector<std::vector<int>> out;
    out.reserve(static_cast<std::size_t>(n_seqs));
    for (std::int64_t i = 0; i < n_seqs; ++i) {
        Rng rng(Rng::derive(seed ^ 0x5f74ull, static_cast<std::uint64_t>(i)));
        out.push_back(detail::cue_bearing_sequence(spec, spec.positive_cues, filler, len,
                                                   cue_density, rng));
    }
    return out;
}

// ---------------------------------------------------------------------------
// File formats: line-delimited JSON with a versioned header line
// ---------------------------------------------------------------------------

inline nlohmann::json vocab_spec_json(const VocabSpec& spec) {
    return {{"vocab_size", spec.vocab_size}, {"bos", spec.bos},
            {"eos", spec.eos},               {"pad", spec.pad},
            {"positive_cues", spec.positive_cues}, {"negative_cues", spec.negative_cues}};
}

inline VocabSpec vocab_spec_from_json(const nlohmann::json& j) {
    VocabSpec s;
    s.vocab_size = j.at("vocab_size").get<std::int64_t>();
    s.bos = j.at("bos").get<int>();
    s.eos = j.at("eos").get<int>();
    s.pad = j.at("pad").get<int>();
    s.positive_cues = j.at("positive_cues").get<std::vector<int>>();
    s.negative_cues = j.at("negative_cues").get<std::vector<int>>();
    s.validate();
    return s;
}

struct PairDataset {
    VocabSpec spec;
    std::vector<PreferencePair> pairs;
};

inline void save_pairs(const std::string& path, const VocabSpec& spec,
                       const std::vector<PreferencePair>& pairs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("save_pairs: cannot open '" + path + "'");
    nlohmann::json header = {
        {"format", "tokpo-pairs"}, {"version", 1}, {"vocab", vocab_spec_json(spec)}};
    out << header.dump() << "\n";
    for (const auto& p : pairs) {
        nlohmann::json rec = {{"prompt", p.prompt},
                              {"chosen", p.chosen},
                              {"rejected", p.rejected},
                              {"chosen_score", p.chosen_score},
                              {"rejected_score", p.rejected_score}};
        out << rec.dump() << "\n";
    }
    if (!out) throw std::runtime_error("save_pairs: write failed for '" + path + "'");
}

inline PairDataset load_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_pairs: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("load_pairs: '" + path + "' is empty");
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "tokpo-pairs" ||
        header.value("version", 0) != 1)
        throw std::runtime_error("load_pairs: '" + path + "' has no tokpo-pairs v1 header");
    PairDataset ds;
    ds.spec = vocab_spec_from_json(header.at("vocab"));
    std::size_t line_no = 1;
    auto check_ids = [&](const std::vector<int>& ids, const char* field) {
        if (ids.empty())
            throw std::runtime_error("load_pairs: empty " + std::string(field) + " at line " +
                                     std::to_string(line_no));
        for (int id : ids)
            if (id < 0 || id >= ds.spec.vocab_size)
                throw std::runtime_error("load_pairs: token id " + std::to_string(id) +
                                         " out of range in " + field + " at line " +
                                         std::to_string(line_no));
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded())
            throw std::runtime_error("load_pairs: unparseable record at line " +
                                     std::to_string(line_no));
        PreferencePair p;
        p.prompt = rec.at("prompt").get<std::vector<int>>();
        p.chosen = rec.at("chosen").get<std::vector<int>>();
        p.rejected = rec.at("rejected").get<std::vector<int>>();
        p.chosen_score = rec.at("chosen_score").get<double>();
        p.rejected_score = rec.at("rejected_score").get<double>();
        check_ids(p.prompt, "prompt");
        check_ids(p.chosen, "chosen");
        check_ids(p.rejected, "rejected");
        if (!(p.chosen_score > p.rejected_score))
            throw std::runtime_error("load_pairs: chosen_score <= rejected_score at line " +
                                     std::to_string(line_no));
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

struct SftCorpus {
    VocabSpec spec;
    std::vector<std::vector<int>> seqs;
};

inline void save_corpus(const std::string& path, const VocabSpec& spec,
                        const std::vector<std::vector<int>>& seqs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("save_corpus: cannot open '" + path + "'");
    nlohmann::json header = {
        {"format", "tokpo-seqs"}, {"version", 1}, {"vocab", vocab_spec_json(spec)}};
    out << header.dump() << "\n";
    for (const auto& s : seqs) out << nlohmann::json{{"tokens", s}}.dump() << "\n";
    if (!out) throw std::runtime_error("save_corpus: write failed for '" + path + "'");
}

inline SftCorpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_corpus: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("load_corpus: '" + path + "' is empty");
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "tokpo-seqs" ||
        header.value("version", 0) != 1)
        throw std::runtime_error("load_corpus: '" + path + "' has no tokpo-seqs v1 header");
    SftCorpus corpus;
    corpus.spec = vocab_spec_from_json(header.at("vocab"));
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded())
            throw std::runtime_error("load_corpus: unparseable record at line " +
                                     std::to_string(line_no));
        auto tokens = rec.at("tokens").get<std::vector<int>>();
        if (tokens.empty())
            throw std::runtime_error("load_corpus: empty sequence at line " +
                                     std::to_string(line_no));
        for (int id : tokens)
            if (id < 0 || id >= corpus.spec.vocab_size)
                throw std::runtime_error("load_corpus: token id " + std::to_string(id) +
                                         " out of range at line " + std::to_string(line_no));
        corpus.seqs.push_back(std::move(tokens));
    }
    return corpus;
}

}  // namespace tokpo

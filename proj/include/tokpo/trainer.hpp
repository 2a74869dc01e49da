#pragma once

// Training loops: supervised fine-tuning and preference optimization.
//
// Everything is single-threaded and seeded, so a run is a pure function of
// (initial checkpoint, dataset, config). Checkpoints carry model, mask and
// optimizer state plus the position in the training program; resuming
// fast-forwards the deterministic batch schedule and continues bit-exactly.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "data.hpp"
#include "losses.hpp"
#include "masks.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace tokpo {

// ---------------------------------------------------------------------------
// AdamW with parameter groups and decoupled weight decay
// ---------------------------------------------------------------------------

class AdamW {
public:
    struct Group {
        std::vector<Tensor*> params;
        double lr = 1e-3;
        double weight_decay = 0.0;
    };

    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void add_group(std::vector<Tensor*> params, double lr, double weight_decay) {
        Group g;
        g.params = std::move(params);
        g.lr = lr;
        g.weight_decay = weight_decay;
        m_.emplace_back();
        v_.emplace_back();
        for (Tensor* p : g.params) {
            m_.back().emplace_back(p->data().size(), 0.0);
            v_.back().emplace_back(p->data().size(), 0.0);
        }
        groups_.push_back(std::move(g));
    }

    std::int64_t step_count() const { return step_count_; }

    // One update from the gradients currently stored on the parameters.
    // lr_scale multiplies every group's rate (warmup/schedules).
    void step(double lr_scale = 1.0) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            Group& g = groups_[gi];
            const double lr = g.lr * lr_scale;
            for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
                Tensor* p = g.params[pi];
                auto& m = m_[gi][pi];
                auto& v = v_[gi][pi];
                if (m.size() != p->data().size())
                    detail::op_fail("adamw_step", "moment size " + std::to_string(m.size()) +
                                                      " does not match parameter " +
                                                      shape_str(p->shape()));
                const auto& grad = p->grad();
                auto& x = p->data();
                for (std::size_t i = 0; i < x.size(); ++i) {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    x[i] -= lr * (mhat / (std::sqrt(vhat) + eps));
                    x[i] -= lr * g.weight_decay * x[i];
                }
            }
        }
    }

    void zero_grads() {
        for (auto& g : groups_)
            for (Tensor* p : g.params) p->zero_grad();
    }

    std::vector<Tensor*> all_params() {
        std::vector<Tensor*> out;
        for (auto& g : groups_)
            for (Tensor* p : g.params) out.push_back(p);
        return out;
    }

    void pack(Bundle& bundle) const {
        bundle.meta["opt_step"] = step_count_;
        for (std::size_t gi = 0; gi < groups_.size(); ++gi)
            for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
                const std::string base =
                    "opt.g" + std::to_string(gi) + ".p" + std::to_string(pi);
                const auto n = static_cast<std::int64_t>(m_[gi][pi].size());
                bundle.tensors.emplace_back(base + ".m", Tensor::from({n}, m_[gi][pi]));
                bundle.tensors.emplace_back(base + ".v", Tensor::from({n}, v_[gi][pi]));
            }
    }

    void unpack(const Bundle& bundle) {
        step_count_ = bundle.meta.at("opt_step").get<std::int64_t>();
        for (std::size_t gi = 0; gi < groups_.size(); ++gi)
            for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
                const std::string base =
                    "opt.g" + std::to_string(gi) + ".p" + std::to_string(pi);
                const auto& m = bundle.find(base + ".m").data();
                const auto& v = bundle.find(base + ".v").data();
                if (m.size() != m_[gi][pi].size())
                    throw std::runtime_error("checkpoint: optimizer state size mismatch at " +
                                             base);
                m_[gi][pi] = m;
                v_[gi][pi] = v;
            }
    }

private:
    std::vector<Group> groups_;
    std::vector<std::vector<std::vector<double>>> m_, v_;
    std::int64_t step_count_ = 0;
};

// Scales gradients in place so their global L2 norm is at most max_norm;
// max_norm <= 0 disables clipping. Returns the pre-clip norm.
inline double clip_global_norm(const std::vector<Tensor*>& params, double max_norm) {
    double sq = 0.0;
    for (Tensor* p : params)
        for (double g : p->grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (Tensor* p : params)
            for (double& g : p->grad()) g *= scale;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Metrics logging
// ---------------------------------------------------------------------------

struct MetricsRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    double u = 0.0;
    double delta = 0.0;
    double sparsity_mu = 0.0;
    double sparsity_md = 0.0;
    double mean_token_kl_chosen = 0.0;
    double mean_token_kl_rejected = 0.0;
    double mask_l1_mean = 0.0;

    nlohmann::json to_json() const {
        return {{"step", step},
                {"loss", loss},
                {"u", u},
                {"delta", delta},
                {"sparsity_mu", sparsity_mu},
                {"sparsity_md", sparsity_md},
                {"mean_token_kl_chosen", mean_token_kl_chosen},
                {"mean_token_kl_rejected", mean_token_kl_rejected},
                {"mask_l1_mean", mask_l1_mean}};
    }

    static MetricsRecord from_json(const nlohmann::json& j) {
        MetricsRecord r;
        r.step = j.at("step").get<std::int64_t>();
        r.loss = j.at("loss").get<double>();
        r.u = j.at("u").get<double>();
        r.delta = j.at("delta").get<double>();
        r.sparsity_mu = j.at("sparsity_mu").get<double>();
        r.sparsity_md = j.at("sparsity_md").get<double>();
        r.mean_token_kl_chosen = j.at("mean_token_kl_chosen").get<double>();
        r.mean_token_kl_rejected = j.at("mean_token_kl_rejected").get<double>();
        r.mask_l1_mean = j.value("mask_l1_mean", 0.0);
        return r;
    }
};

class MetricsWriter {
public:
    MetricsWriter() = default;

    // append = true continues an interrupted log without a new header.
    MetricsWriter(const std::string& path, const nlohmann::json& header, bool append) {
        if (path.empty()) return;
        out_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!out_) throw std::runtime_error("metrics: cannot open '" + path + "'");
        if (!append) out_ << header.dump() << "\n";
    }

    void write(const MetricsRecord& r) {
        if (out_.is_open()) {
            out_ << r.to_json().dump() << "\n";
            out_.flush();
        }
    }

private:
    std::ofstream out_;
};

struct MetricsLog {
    nlohmann::json header;
    std::vector<MetricsRecord> records;
};

inline MetricsLog load_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("metrics: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("metrics: '" + path + "' is empty");
    MetricsLog log;
    log.header = nlohmann::json::parse(line, nullptr, false);
    if (log.header.is_discarded() || log.header.value("format", "") != "tokpo-metrics")
        throw std::runtime_error("metrics: '" + path + "' has no tokpo-metrics header");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw std::runtime_error("metrics: unparseable record at line " +
                                     std::to_string(line_no) + " of '" + path + "'");
        log.records.push_back(MetricsRecord::from_json(j));
    }
    return log;
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning
// ---------------------------------------------------------------------------

struct SftConfig {
    double learning_rate = 3e-4;
    double weight_decay = 0.0;
    std::int64_t epochs = 1;
    std::int64_t batch_size = 16;
    std::uint64_t seed = 1;
    std::int64_t log_interval = 10;
    double grad_clip = 1.0;

    void validate() const {
        if (!(learning_rate > 0.0) || epochs < 0 || batch_size < 1 || log_interval < 1)
            detail::op_fail("SftConfig", "rates and sizes must be positive");
    }
};

struct SftResult {
    std::vector<std::pair<std::int64_t, double>> log;  // (step, mean nll per token)
    double final_loss = 0.0;
};

// Next-token cross-entropy on [bos] + tokens + [eos]. epochs == 0 leaves
// the model untouched.
inline SftResult run_sft(TransformerLM& model, const SftCorpus& corpus, const SftConfig& cfg) {
    cfg.validate();
    if (corpus.seqs.empty()) detail::op_fail("run_sft", "empty corpus");
    model.set_trainable(true);
    AdamW opt;
    opt.add_group(model.params(), cfg.learning_rate, cfg.weight_decay);

    SftResult result;
    const std::int64_t n = static_cast<std::int64_t>(corpus.seqs.size());
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto perm = Rng(Rng::derive(cfg.seed, 0xf17e0000ull + static_cast<std::uint64_t>(epoch)))
                        .permutation(static_cast<std::size_t>(n));
        for (std::int64_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
            const std::int64_t b1 = std::min(n, b0 + cfg.batch_size);
            Tape tape;
            Tape::Scope scope(tape);
            Tensor total = Tensor::scalar(0.0);
            for (std::int64_t i = b0; i < b1; ++i) {
                const auto& raw = corpus.seqs[perm[static_cast<std::size_t>(i)]];
                std::vector<int> seq;
                seq.reserve(raw.size() + 2);
                seq.push_back(corpus.spec.bos);
                seq.insert(seq.end(), raw.begin(), raw.end());
                seq.push_back(corpus.spec.eos);
                ForwardTrace trace = model.forward(seq);
                const std::int64_t len = static_cast<std::int64_t>(seq.size());
                Tensor rows = slice_rows(trace.log_dist, 0, len - 1);
                std::vector<int> targets(seq.begin() + 1, seq.end());
                Tensor nll = neg(div(sum(select_per_row(rows, targets)),
                                     static_cast<double>(len - 1)));
                total = add(total, nll);
            }
            Tensor loss = div(total, static_cast<double>(b1 - b0));
            const double loss_val = loss.item();
            if (!std::isfinite(loss_val))
                throw std::runtime_error("sft: non-finite loss at step " + std::to_string(step) +
                                         " batch offset " + std::to_string(b0));
            opt.zero_grads();
            tape.backward(loss);
            clip_global_norm(opt.all_params(), cfg.grad_clip);
            opt.step();
            ++step;
            result.final_loss = loss_val;
            if (step % cfg.log_interval == 0 || (epoch == cfg.epochs - 1 && b1 == n))
                result.log.emplace_back(step, loss_val);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Preference optimization
// ---------------------------------------------------------------------------

struct TrainConfig {
    LossConfig loss;
    double learning_rate = 3e-4;
    double mask_learning_rate = 1e-3;
    double weight_decay = 0.0;
    double mask_weight_decay = 0.01;
    std::int64_t epochs = 3;
    std::int64_t batch_size = 8;
    std::int64_t grad_accum = 1;
    double warmup_frac = 0.0;
    std::string lr_schedule = "constant";
    std::uint64_t seed = 1;
    std::uint64_t mask_seed = 0;  // 0 derives one from seed
    std::int64_t log_interval = 10;
    std::int64_t checkpoint_interval = 0;  // optimizer steps; 0 = final only
    std::int64_t max_steps = 0;            // stop after this many steps; 0 = run out
    double grad_clip = 1.0;                // <= 0 disables
    std::string checkpoint_path;
    std::string metrics_path;

    void validate() const {
        loss.validate();
        if (!(learning_rate > 0.0) || !(mask_learning_rate > 0.0))
            detail::op_fail("TrainConfig", "learning rates must be > 0");
        if (epochs < 1 || batch_size < 1 || grad_accum < 1 || log_interval < 1)
            detail::op_fail("TrainConfig", "epochs, batch_size, grad_accum, log_interval must be >= 1");
        if (warmup_frac < 0.0 || warmup_frac >= 1.0)
            detail::op_fail("TrainConfig", "warmup_frac must be in [0,1)");
        if (lr_schedule != "constant" && lr_schedule != "cosine")
            detail::op_fail("TrainConfig", "lr_schedule '" + lr_schedule +
                                               "' not in {constant, cosine}");
        if (weight_decay < 0.0 || mask_weight_decay < 0.0)
            detail::op_fail("TrainConfig", "weight decay must be >= 0");
    }

    std::uint64_t effective_mask_seed() const {
        return mask_seed != 0 ? mask_seed : Rng::derive(seed, 0x6d736bull);
    }
};

struct PoResult {
    TransformerLM policy;
    MaskProvider masks;
    std::vector<MetricsRecord> records;
    std::int64_t steps_completed = 0;
    bool finished = false;               // false when max_steps stopped the run early
    double final_mask_l1_mean = 0.0;     // mean mask weight over final-epoch batches
};

namespace detail {

inline nlohmann::json train_fingerprint(const TrainConfig& cfg, std::int64_t n_pairs) {
    return {{"method", method_name(cfg.loss.method)},
            {"beta", cfg.loss.beta},
            {"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},
            {"grad_accum", cfg.grad_accum},
            {"seed", cfg.seed},
            {"n_pairs", n_pairs}};
}

}  // namespace detail

inline void save_train_checkpoint(const std::string& path, TransformerLM& policy,
                                  TransformerLM& reference, MaskProvider& masks, const AdamW& opt,
                                  const TrainConfig& cfg, std::int64_t completed_micro,
                                  std::int64_t n_pairs) {
    Bundle bundle;
    bundle.meta["kind"] = "train";
    bundle.meta["model_config"] = model_config_json(policy.config());
    bundle.meta["completed_micro"] = completed_micro;
    bundle.meta["mask"] = {{"kind", mask_kind_name(masks.kind())},
                           {"eps", masks.eps()},
                           {"seed", cfg.effective_mask_seed()}};
    bundle.meta["train"] = detail::train_fingerprint(cfg, n_pairs);
    pack_model(bundle, policy, "policy.");
    pack_model(bundle, reference, "ref.");
    for (auto& [name, t] : masks.named_params()) bundle.tensors.emplace_back(name, *t);
    opt.pack(bundle);
    save_bundle(path, bundle);
}

// Loads the policy out of either a plain model checkpoint or a training
// checkpoint (which stores it under the "policy." prefix).
inline TransformerLM load_policy(const std::string& path) {
    Bundle bundle = load_bundle(path);
    TransformerLM model(model_config_from_json(bundle.meta.at("model_config")));
    const std::string kind = bundle.meta.value("kind", "");
    if (kind == "model")
        unpack_model(bundle, model);
    else if (kind == "train")
        unpack_model(bundle, model, "policy.");
    else
        throw std::runtime_error("checkpoint: '" + path + "' has unknown kind '" + kind + "'");
    return model;
}

// The frozen reference stored in a training checkpoint; plain model
// checkpoints are their own reference.
inline TransformerLM load_reference(const std::string& path) {
    Bundle bundle = load_bundle(path);
    TransformerLM model(model_config_from_json(bundle.meta.at("model_config")));
    unpack_model(bundle, model, bundle.meta.value("kind", "") == "train" ? "ref." : "");
    return model;
}

// Rebuilds the mask provider (kind, eps, seed, trained parameters) stored
// in a training checkpoint.
inline MaskProvider load_mask_provider(const std::string& path) {
    Bundle bundle = load_bundle(path);
    if (bundle.meta.value("kind", "") != "train")
        throw std::runtime_error("checkpoint: '" + path + "' holds no mask state");
    const auto cfg = model_config_from_json(bundle.meta.at("model_config"));
    const auto& mask_meta = bundle.meta.at("mask");
    MaskKind kind = MaskKind::AllOnes;
    const std::string kind_name = mask_meta.at("kind").get<std::string>();
    for (MaskKind k : {MaskKind::AllOnes, MaskKind::Random, MaskKind::Binary, MaskKind::MaPO,
                       MaskKind::LearnedCommon, MaskKind::LearnedIndependent})
        if (kind_name == mask_kind_name(k)) kind = k;
    MaskProvider provider =
        MaskProvider::make(kind, cfg.n_layers, cfg.d_model, mask_meta.at("eps").get<double>(),
                           mask_meta.at("seed").get<std::uint64_t>());
    for (auto& [name, t] : provider.named_params()) {
        const Tensor& src = bundle.find(name);
        t->data() = src.data();
    }
    return provider;
}

inline PoResult run_po(const TransformerLM& policy_init, const PairDataset& dataset,
                       const TrainConfig& cfg, const std::string& resume_from = "") {
    cfg.validate();
    if (dataset.pairs.empty()) detail::op_fail("run_po", "empty dataset");

    PoResult result;
    result.policy = policy_init.clone();
    result.policy.set_trainable(true);
    TransformerLM reference = policy_init.clone();
    reference.set_trainable(false);
    const std::uint64_t ref_checksum = reference.checksum();

    const auto& mc = result.policy.config();
    result.masks = MaskProvider::make(method_mask_kind(cfg.loss.method), mc.n_layers, mc.d_model,
                                      cfg.loss.mask_eps, cfg.effective_mask_seed());

    AdamW opt;
    opt.add_group(result.policy.params(), cfg.learning_rate, cfg.weight_decay);
    auto mask_params = result.masks.trainable_params();
    if (!mask_params.empty())
        opt.add_group(mask_params, cfg.mask_learning_rate, cfg.mask_weight_decay);

    const std::int64_t n = static_cast<std::int64_t>(dataset.pairs.size());
    const std::int64_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_micro = cfg.epochs * batches_per_epoch;
    const std::int64_t total_steps = (total_micro + cfg.grad_accum - 1) / cfg.grad_accum;

    std::int64_t completed_micro = 0;
    bool resuming = false;
    if (!resume_from.empty()) {
        Bundle bundle = load_bundle(resume_from);
        if (bundle.meta.value("kind", "") != "train")
            throw std::runtime_error("resume: '" + resume_from + "' is not a training checkpoint");
        if (bundle.meta.at("train") != detail::train_fingerprint(cfg, n))
            throw std::runtime_error("resume: '" + resume_from +
                                     "' was produced by a different training configuration");
        unpack_model(bundle, result.policy, "policy.");
        unpack_model(bundle, reference, "ref.");
        for (auto& [name, t] : result.masks.named_params()) t->data() = bundle.find(name).data();
        opt.unpack(bundle);
        completed_micro = bundle.meta.at("completed_micro").get<std::int64_t>();
        resuming = true;
    }

    nlohmann::json header = {{"format", "tokpo-metrics"},
                             {"version", 1},
                             {"method", method_name(cfg.loss.method)},
                             {"beta", cfg.loss.beta},
                             {"seed", cfg.seed}};
    MetricsWriter writer(cfg.metrics_path, header, resuming);

    auto lr_scale = [&](std::int64_t step_index) {
        const auto warmup = static_cast<std::int64_t>(cfg.warmup_frac *
                                                      static_cast<double>(total_steps));
        if (step_index < warmup)
            return static_cast<double>(step_index + 1) / static_cast<double>(warmup);
        if (cfg.lr_schedule == "cosine" && total_steps > warmup) {
            const double progress = static_cast<double>(step_index - warmup) /
                                    static_cast<double>(total_steps - warmup);
            return 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
        }
        return 1.0;
    };

    const int bos = dataset.spec.bos;
    BatchStats last_stats;
    double final_l1_sum = 0.0;
    std::int64_t final_l1_count = 0;
    opt.zero_grads();

    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto perm = Rng(Rng::derive(cfg.seed, 0xe70c0000ull + static_cast<std::uint64_t>(epoch)))
                        .permutation(static_cast<std::size_t>(n));
        for (std::int64_t b = 0; b < batches_per_epoch; ++b) {
            const std::int64_t micro_index = epoch * batches_per_epoch + b;
            if (micro_index < completed_micro) continue;

            const std::int64_t i0 = b * cfg.batch_size;
            const std::int64_t i1 = std::min(n, i0 + cfg.batch_size);
            std::vector<const PreferencePair*> batch;
            std::vector<std::uint64_t> indices;
            for (std::int64_t i = i0; i < i1; ++i) {
                const std::size_t src = perm[static_cast<std::size_t>(i)];
                batch.push_back(&dataset.pairs[src]);
                indices.push_back(static_cast<std::uint64_t>(src));
            }

            Tape tape;
            Tape::Scope scope(tape);
            BatchEval be = evaluate_batch(result.policy, &reference, batch, indices, result.masks,
                                          cfg.loss, bos);
            if (!std::isfinite(be.stats.loss))
                throw std::runtime_error("po: non-finite loss at micro-batch " +
                                         std::to_string(micro_index) + " (epoch " +
                                         std::to_string(epoch) + ", batch " + std::to_string(b) +
                                         ")");
            Tensor scaled = cfg.grad_accum > 1
                                ? mul(be.loss, 1.0 / static_cast<double>(cfg.grad_accum))
                                : be.loss;
            tape.backward(scaled);
            last_stats = be.stats;
            ++completed_micro;
            if (epoch == cfg.epochs - 1) {
                final_l1_sum += be.stats.mask_l1_mean;
                ++final_l1_count;
            }

            const bool step_boundary =
                completed_micro % cfg.grad_accum == 0 || completed_micro == total_micro;
            if (!step_boundary) continue;

            clip_global_norm(opt.all_params(), cfg.grad_clip);
            opt.step(lr_scale(opt.step_count()));
            opt.zero_grads();
            const std::int64_t steps_done = opt.step_count();

            if (steps_done % cfg.log_interval == 0 || steps_done == total_steps) {
                MetricsRecord rec;
                rec.step = steps_done;
                rec.loss = last_stats.loss;
                rec.u = last_stats.u;
                rec.delta = last_stats.delta;
                rec.sparsity_mu = last_stats.sparsity_mu;
                rec.sparsity_md = last_stats.sparsity_md;
                rec.mean_token_kl_chosen = last_stats.mean_token_kl_chosen;
                rec.mean_token_kl_rejected = last_stats.mean_token_kl_rejected;
                rec.mask_l1_mean = last_stats.mask_l1_mean;
                result.records.push_back(rec);
                writer.write(rec);
            }
            if (cfg.checkpoint_interval > 0 && !cfg.checkpoint_path.empty() &&
                steps_done % cfg.checkpoint_interval == 0 && completed_micro < total_micro)
                save_train_checkpoint(cfg.checkpoint_path, result.policy, reference, result.masks,
                                      opt, cfg, completed_micro, n);

            if (cfg.max_steps > 0 && steps_done >= cfg.max_steps &&
                completed_micro < total_micro) {
                if (!cfg.checkpoint_path.empty())
                    save_train_checkpoint(cfg.checkpoint_path, result.policy, reference,
                                          result.masks, opt, cfg, completed_micro, n);
                result.steps_completed = steps_done;
                result.finished = false;
                if (reference.checksum() != ref_checksum)
                    throw std::runtime_error("po: frozen reference was mutated during training");
                return result;
            }
        }
    }

    result.steps_completed = opt.step_count();
    result.finished = true;
    result.final_mask_l1_mean =
        final_l1_count > 0 ? final_l1_sum / static_cast<double>(final_l1_count) : 0.0;
    if (!cfg.checkpoint_path.empty())
        save_train_checkpoint(cfg.checkpoint_path, result.policy, reference, result.masks, opt,
                              cfg, completed_micro, n);
    if (reference.checksum() != ref_checksum)
        throw std::runtime_error("po: frozen reference was mutated during training");
    return result;
}

}  // namespace tokpo

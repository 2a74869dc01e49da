#pragma once

// Flat key=value configuration shared by every CLI subcommand. One schema
// holds all keys with defaults and help text; files and --set overrides may
// only touch keys that exist, so typos fail loudly instead of silently
// training with defaults.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "trainer.hpp"

namespace tokpo {

// Configuration mistakes map to the CLI's usage-error exit code.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Config {
public:
    Config() {
        // data generation
        add_int("vocab_size", 64, "vocabulary size including bos/eos/pad and cue tokens");
        add_int("n_pairs", 2000, "number of training preference pairs to generate");
        add_int("n_eval_pairs", 500, "number of held-out preference pairs to generate");
        add_int("prompt_len", 6, "prompt length in tokens");
        add_int("resp_len", 16, "response length in tokens");
        add_double("cue_density", 0.25, "per-position probability of a cue token in responses");
        add_int("data_seed", 11, "seed for dataset generation");
        add_string("pairs_path", "pairs.jsonl", "training preference pairs file");
        add_string("eval_pairs_path", "eval_pairs.jsonl", "held-out preference pairs file");
        add_string("corpus_path", "corpus.jsonl", "plain-sequence corpus file for sft");
        add_int("n_seqs", 512, "number of corpus sequences to generate");
        add_int("seq_len", 24, "corpus sequence length in tokens");

        // model
        add_int("n_layers", 2, "transformer layers");
        add_int("d_model", 64, "model width");
        add_int("n_heads", 4, "attention heads");
        add_int("ffn_mult", 4, "feed-forward width multiplier");
        add_int("context_len", 64, "maximum sequence length");
        add_int("model_seed", 1, "seed for fresh model initialization");

        // objective
        add_string("method", "sparse-common",
                   "dpo | tdpo1 | tdpo2 | simpo | dpop | mapo | sparse-common | sparse-indep | "
                   "mask-random | mask-binary");
        add_double("beta", 0.1, "preference temperature");
        add_double("alpha", 0.7, "tdpo2 weight on the sequential KL margin");
        add_double("gamma_margin", 0.0, "simpo target reward margin");
        add_double("lambda", 50.0, "dpop penalty weight on chosen log-prob regression");
        add_double("mask_eps", 0.01, "mask floor; weights at or below this count as dropped");
        add_double("l1_coeff", 0.0, "L1 penalty on learned mask weights");
        add_bool("mask_stop_gradient", false,
                 "block loss gradients from flowing into mask parameters");

        // preference training
        add_double("learning_rate", 3e-4, "policy AdamW learning rate");
        add_double("mask_learning_rate", 1e-3, "mask AdamW learning rate");
        add_double("weight_decay", 0.0, "policy weight decay");
        add_double("mask_weight_decay", 0.01, "mask weight decay");
        add_int("epochs", 3, "training epochs");
        add_int("batch_size", 8, "pairs per micro-batch");
        add_int("grad_accum", 1, "micro-batches per optimizer step");
        add_double("warmup_frac", 0.0, "fraction of steps spent in linear warmup");
        add_string("lr_schedule", "constant", "constant | cosine");
        add_int("seed", 1, "training seed (batch order)");
        add_int("mask_seed", 0, "mask init/draw seed; 0 derives one from seed");
        add_int("log_interval", 10, "optimizer steps between metrics records");
        add_int("checkpoint_interval", 100, "optimizer steps between checkpoints; 0 = final only");
        add_int("max_steps", 0, "stop after this many optimizer steps; 0 = run to completion");
        add_double("grad_clip", 1.0, "global gradient-norm clip; <= 0 disables");
        add_string("init_checkpoint", "", "policy initialization; empty = fresh model");
        add_string("resume", "", "training checkpoint to resume from");
        add_string("checkpoint_path", "run.ckpt", "where training state is saved");
        add_string("metrics_path", "metrics.jsonl", "training metrics log");

        // supervised fine-tuning
        add_double("sft_learning_rate", 3e-4, "sft AdamW learning rate");
        add_int("sft_epochs", 1, "sft epochs");
        add_int("sft_batch_size", 16, "sft sequences per batch");
        add_int("sft_seed", 2, "sft batch-order seed");
        add_string("sft_out", "sft.ckpt", "sft model checkpoint output");

        // evaluation, frontier, heatmap, sparsity report
        add_string("checkpoint", "", "checkpoint to evaluate");
        add_string("reference_checkpoint", "",
                   "explicit reference; empty = reference stored in the checkpoint");
        add_int("n_eval_prompts", 200, "prompts sampled for frontier evaluation");
        add_int("sample_max_new", 24, "max new tokens per sampled completion");
        add_double("sample_temperature", 1.0, "sampling temperature");
        add_double("sample_top_p", 1.0, "nucleus cutoff; 1.0 = plain multinomial sampling");
        add_int("sample_seed", 7, "sampling seed");
        add_string("beta_grid",
                   "0.01,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1,2,3,4,5,10,20",
                   "comma-separated betas tagging frontier rows / sparsity series");
        add_string("run_id", "run", "label written into frontier rows");
        add_string("frontier_out", "frontier.csv", "frontier table output");
        add_string("heatmap_out", "heatmap.jsonl", "heatmap records output");
        add_int("heatmap_pair", 0, "index of the evaluation pair to export");
        add_string("sparsity_out", "sparsity.csv", "sparsity curve table output");
        add_string("metrics_pattern", "metrics_b{beta}.jsonl",
                   "per-beta metrics path; {beta} is replaced by the grid value");
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config '" + path + "' line " + std::to_string(line_no) +
                                  ": expected key = value");
            set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
    }

    // "key=value" as passed to --set.
    void apply_override(const std::string& keyval) {
        const auto eq = keyval.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + keyval + "'");
        set(trim(keyval.substr(0, eq)), trim(keyval.substr(eq + 1)));
    }

    void set(const std::string& key, const std::string& value) {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
        switch (it->second.type) {
            case Type::Int: parse_int(key, value); break;
            case Type::Double: parse_double(key, value); break;
            case Type::Bool: parse_bool(key, value); break;
            case Type::String: break;
        }
        it->second.value = value;
    }

    std::int64_t get_int(const std::string& key) const {
        return parse_int(key, entry(key, Type::Int).value);
    }
    double get_double(const std::string& key) const {
        return parse_double(key, entry(key, Type::Double).value);
    }
    bool get_bool(const std::string& key) const {
        return parse_bool(key, entry(key, Type::Bool).value);
    }
    std::string get_string(const std::string& key) const {
        return entry(key, Type::String).value;
    }

    std::vector<double> get_double_list(const std::string& key) const {
        const std::string raw = entry(key, Type::String).value;
        std::vector<double> out;
        std::istringstream in(raw);
        std::string field;
        while (std::getline(in, field, ',')) {
            const std::string t = trim(field);
            if (t.empty()) continue;
            out.push_back(parse_double(key, t));
        }
        if (out.empty()) throw ConfigError("config key '" + key + "' holds no numbers");
        return out;
    }

    std::string help() const {
        std::ostringstream out;
        out << "Configuration keys (file lines `key = value`, overrides `--set key=value`):\n";
        for (const auto& [key, e] : entries_) {
            out << "  " << key << " (" << type_name(e.type) << ", default: "
                << (e.def.empty() ? "\"\"" : e.def) << ")\n      " << e.help << "\n";
        }
        return out.str();
    }

private:
    enum class Type { Int, Double, String, Bool };

    struct Entry {
        Type type;
        std::string value;
        std::string def;
        std::string help;
    };

    static const char* type_name(Type t) {
        switch (t) {
            case Type::Int: return "int";
            case Type::Double: return "float";
            case Type::Bool: return "bool";
            case Type::String: return "string";
        }
        return "?";
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::int64_t parse_int(const std::string& key, const std::string& value) {
        try {
            std::size_t used = 0;
            const std::int64_t v = std::stoll(value, &used);
            if (used != value.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
        }
    }

    static double parse_double(const std::string& key, const std::string& value) {
        try {
            std::size_t used = 0;
            const double v = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
        }
    }

    static bool parse_bool(const std::string& key, const std::string& value) {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw ConfigError("config key '" + key + "' expects true/false, got '" + value + "'");
    }

    const Entry& entry(const std::string& key, Type expected) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
        if (it->second.type != expected)
            throw ConfigError("config key '" + key + "' read with the wrong type");
        return it->second;
    }

    void add(const std::string& key, Type type, std::string def, std::string help) {
        entries_[key] = Entry{type, def, def, std::move(help)};
    }
    void add_int(const std::string& key, std::int64_t def, std::string help) {
        add(key, Type::Int, std::to_string(def), std::move(help));
    }
    void add_double(const std::string& key, double def, std::string help) {
        std::ostringstream s;
        s << def;
        add(key, Type::Double, s.str(), std::move(help));
    }
    void add_bool(const std::string& key, bool def, std::string help) {
        add(key, Type::Bool, def ? "true" : "false", std::move(help));
    }
    void add_string(const std::string& key, std::string def, std::string help) {
        add(key, Type::String, std::move(def), std::move(help));
    }

    std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Typed views over the flat schema
// ---------------------------------------------------------------------------

inline ModelConfig model_config_from(const Config& c) {
    ModelConfig m;
    m.vocab_size = c.get_int("vocab_size");
    m.context_len = c.get_int("context_len");
    m.n_layers = c.get_int("n_layers");
    m.d_model = c.get_int("d_model");
    m.n_heads = c.get_int("n_heads");
    m.ffn_mult = c.get_int("ffn_mult");
    m.seed = static_cast<std::uint64_t>(c.get_int("model_seed"));
    return m;
}

inline LossConfig loss_config_from(const Config& c) {
    LossConfig l;
    const std::string method = c.get_string("method");
    if (!method_from_string(method, l.method))
        throw ConfigError("unknown method '" + method + "'");
    l.beta = c.get_double("beta");
    l.alpha = c.get_double("alpha");
    l.gamma_margin = c.get_double("gamma_margin");
    l.lambda = c.get_double("lambda");
    l.mask_eps = c.get_double("mask_eps");
    l.l1_coeff = c.get_double("l1_coeff");
    l.mask_stop_gradient = c.get_bool("mask_stop_gradient");
    return l;
}

inline TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.loss = loss_config_from(c);
    t.learning_rate = c.get_double("learning_rate");
    t.mask_learning_rate = c.get_double("mask_learning_rate");
    t.weight_decay = c.get_double("weight_decay");
    t.mask_weight_decay = c.get_double("mask_weight_decay");
    t.epochs = c.get_int("epochs");
    t.batch_size = c.get_int("batch_size");
    t.grad_accum = c.get_int("grad_accum");
    t.warmup_frac = c.get_double("warmup_frac");
    t.lr_schedule = c.get_string("lr_schedule");
    t.seed = static_cast<std::uint64_t>(c.get_int("seed"));
    t.mask_seed = static_cast<std::uint64_t>(c.get_int("mask_seed"));
    t.log_interval = c.get_int("log_interval");
    t.checkpoint_interval = c.get_int("checkpoint_interval");
    t.max_steps = c.get_int("max_steps");
    t.grad_clip = c.get_double("grad_clip");
    t.checkpoint_path = c.get_string("checkpoint_path");
    t.metrics_path = c.get_string("metrics_path");
    return t;
}

inline SftConfig sft_config_from(const Config& c) {
    SftConfig s;
    s.learning_rate = c.get_double("sft_learning_rate");
    s.weight_decay = c.get_double("weight_decay");
    s.epochs = c.get_int("sft_epochs");
    s.batch_size = c.get_int("sft_batch_size");
    s.seed = static_cast<std::uint64_t>(c.get_int("sft_seed"));
    s.grad_clip = c.get_double("grad_clip");
    return s;
}

inline SamplerConfig sampler_config_from(const Config& c) {
    SamplerConfig s;
    s.max_new_tokens = c.get_int("sample_max_new");
    s.temperature = c.get_double("sample_temperature");
    s.top_p = c.get_double("sample_top_p");
    s.seed = static_cast<std::uint64_t>(c.get_int("sample_seed"));
    return s;
}

// Expands the {beta} placeholder in metrics_pattern with the grid value
// printed the way it appears in the grid string.
inline std::string expand_beta_pattern(const std::string& pattern, const std::string& beta_text) {
    const auto pos = pattern.find("{beta}");
    if (pos == std::string::npos)
        throw ConfigError("metrics_pattern must contain the {beta} placeholder");
    std::string out = pattern;
    out.replace(pos, 6, beta_text);
    return out;
}

inline std::vector<std::string> beta_grid_texts(const Config& c) {
    const std::string raw = c.get_string("beta_grid");
    std::vector<std::string> out;
    std::istringstream in(raw);
    std::string field;
    while (std::getline(in, field, ',')) {
        const auto b = field.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = field.find_last_not_of(" \t");
        out.push_back(field.substr(b, e - b + 1));
    }
    if (out.empty()) throw ConfigError("beta_grid holds no values");
    return out;
}

}  // namespace tokpo

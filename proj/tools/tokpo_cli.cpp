// Command-line surface: data generation, training, evaluation and reporting.
//
// Every subcommand reads the shared key=value schema (--config file plus
// repeated --set key=value overrides) and prints a single JSON summary line
// on success. Usage mistakes (unknown keys, bad methods, malformed values)
// exit with status 2; runtime failures exit with status 1.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <tokpo/tokpo.hpp>

namespace {

using nlohmann::json;
using namespace tokpo;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key=value configuration file");
    cmd->add_option("--set", args.overrides, "override a config key, e.g. --set beta=0.1")
        ->take_all();
}

Config build_config(const CommonArgs& args) {
    Config cfg;
    if (!args.config_path.empty()) cfg.load_file(args.config_path);
    for (const auto& kv : args.overrides) cfg.apply_override(kv);
    return cfg;
}

void emit(const json& summary) { std::cout << summary.dump() << "\n"; }

TransformerLM policy_for_eval(const Config& cfg) {
    const std::string path = cfg.get_string("checkpoint");
    if (path.empty()) throw ConfigError("'checkpoint' must point at a saved model");
    return load_policy(path);
}

TransformerLM reference_for_eval(const Config& cfg) {
    const std::string ref_path = cfg.get_string("reference_checkpoint");
    if (!ref_path.empty()) return load_policy(ref_path);
    return load_reference(cfg.get_string("checkpoint"));
}

int cmd_gen_data(const Config& cfg) {
    VocabSpec spec = VocabSpec::standard(static_cast<int>(cfg.get_int("vocab_size")));
    const auto seed = static_cast<std::uint64_t>(cfg.get_int("data_seed"));
    auto pairs = generate_pairs(spec, cfg.get_int("n_pairs"), cfg.get_int("prompt_len"),
                                cfg.get_int("resp_len"), cfg.get_double("cue_density"), seed);
    auto eval_pairs =
        generate_pairs(spec, cfg.get_int("n_eval_pairs"), cfg.get_int("prompt_len"),
                       cfg.get_int("resp_len"), cfg.get_double("cue_density"),
                       Rng::derive(seed, 0x6576616cull));
    auto corpus = generate_sft_corpus(spec, cfg.get_int("n_seqs"), cfg.get_int("seq_len"),
                                      cfg.get_double("cue_density"), seed);
    save_pairs(cfg.get_string("pairs_path"), spec, pairs);
    save_pairs(cfg.get_string("eval_pairs_path"), spec, eval_pairs);
    save_corpus(cfg.get_string("corpus_path"), spec, corpus);
    emit({{"pairs", pairs.size()},
          {"eval_pairs", eval_pairs.size()},
          {"corpus_seqs", corpus.size()},
          {"pairs_path", cfg.get_string("pairs_path")},
          {"eval_pairs_path", cfg.get_string("eval_pairs_path")},
          {"corpus_path", cfg.get_string("corpus_path")}});
    return 0;
}

int cmd_sft(const Config& cfg) {
    SftCorpus corpus = load_corpus(cfg.get_string("corpus_path"));
    const std::string init = cfg.get_string("init_checkpoint");
    TransformerLM model =
        init.empty() ? TransformerLM(model_config_from(cfg)) : load_policy(init);
    SftResult result = run_sft(model, corpus, sft_config_from(cfg));
    save_model(cfg.get_string("sft_out"), model);
    emit({{"final_loss", result.final_loss},
          {"steps", result.log.empty() ? 0 : result.log.back().first},
          {"checkpoint", cfg.get_string("sft_out")}});
    return 0;
}

int cmd_po(const Config& cfg) {
    PairDataset dataset = load_pairs(cfg.get_string("pairs_path"));
    const std::string init = cfg.get_string("init_checkpoint");
    TransformerLM policy =
        init.empty() ? TransformerLM(model_config_from(cfg)) : load_policy(init);
    TrainConfig tcfg = train_config_from(cfg);
    PoResult result = run_po(policy, dataset, tcfg, cfg.get_string("resume"));
    json summary = {{"method", method_name(tcfg.loss.method)},
                    {"steps", result.steps_completed},
                    {"finished", result.finished},
                    {"final_mask_l1_mean", result.final_mask_l1_mean},
                    {"checkpoint", tcfg.checkpoint_path},
                    {"metrics", tcfg.metrics_path}};
    if (!result.records.empty()) summary["final_loss"] = result.records.back().loss;
    emit(summary);
    return 0;
}

int cmd_eval(const Config& cfg) {
    std::string pairs_path = cfg.get_string("eval_pairs_path");
    if (pairs_path.empty()) pairs_path = cfg.get_string("pairs_path");
    PairDataset dataset = load_pairs(pairs_path);
    TransformerLM policy = policy_for_eval(cfg);
    TransformerLM reference = reference_for_eval(cfg);
    LossConfig lcfg = loss_config_from(cfg);
    const double acc = preference_accuracy(policy, &reference, dataset, lcfg);
    emit({{"accuracy", acc},
          {"n_pairs", dataset.pairs.size()},
          {"method", method_name(lcfg.method)},
          {"pairs_path", pairs_path}});
    return 0;
}

int cmd_frontier(const Config& cfg, const std::vector<std::string>& checkpoints) {
    if (checkpoints.empty()) throw ConfigError("frontier needs at least one --checkpoint");
    std::string pairs_path = cfg.get_string("eval_pairs_path");
    if (pairs_path.empty()) pairs_path = cfg.get_string("pairs_path");
    PairDataset dataset = load_pairs(pairs_path);
    std::vector<std::vector<int>> prompts;
    const auto want = cfg.get_int("n_eval_prompts");
    for (const auto& p : dataset.pairs) {
        if (static_cast<std::int64_t>(prompts.size()) >= want) break;
        prompts.push_back(p.prompt);
    }
    SamplerConfig scfg = sampler_config_from(cfg);
    const auto grid = cfg.get_double_list("beta_grid");

    std::vector<FrontierPoint> points;
    for (const auto& path : checkpoints) {
        TransformerLM policy = load_policy(path);
        TransformerLM reference = load_reference(path);
        Bundle bundle = load_bundle(path);
        const std::int64_t step = bundle.meta.value("opt_step", std::int64_t{0});
        SampledEval eval = eval_frontier(policy, reference, prompts, dataset.spec, scfg);
        for (double beta : grid) {
            FrontierPoint pt;
            pt.run_id = cfg.get_string("run_id") + ":" + path;
            pt.beta = beta;
            pt.step = step;
            pt.mean_reward = eval.mean_reward;
            pt.mean_kl = eval.mean_kl;
            pt.n_prompts = eval.n_prompts;
            pt.n_truncated = eval.n_truncated;
            points.push_back(std::move(pt));
        }
    }
    save_frontier_csv(cfg.get_string("frontier_out"), points);
    emit({{"rows", points.size()},
          {"checkpoints", checkpoints.size()},
          {"betas", grid.size()},
          {"out", cfg.get_string("frontier_out")}});
    return 0;
}

int cmd_heatmap(const Config& cfg) {
    std::string pairs_path = cfg.get_string("eval_pairs_path");
    if (pairs_path.empty()) pairs_path = cfg.get_string("pairs_path");
    PairDataset dataset = load_pairs(pairs_path);
    const auto index = cfg.get_int("heatmap_pair");
    if (index < 0 || index >= static_cast<std::int64_t>(dataset.pairs.size()))
        throw ConfigError("heatmap_pair " + std::to_string(index) + " out of range (have " +
                          std::to_string(dataset.pairs.size()) + " pairs)");
    TransformerLM policy = policy_for_eval(cfg);
    TransformerLM reference = reference_for_eval(cfg);

    const std::string ckpt = cfg.get_string("checkpoint");
    Bundle bundle = load_bundle(ckpt);
    MaskProvider masks;
    if (bundle.meta.value("kind", "") == "train") {
        masks = load_mask_provider(ckpt);
    } else {
        LossConfig lcfg = loss_config_from(cfg);
        const auto& mc = policy.config();
        masks = MaskProvider::make(method_mask_kind(lcfg.method), mc.n_layers, mc.d_model,
                                   lcfg.mask_eps,
                                   static_cast<std::uint64_t>(cfg.get_int("mask_seed")));
    }
    auto records = export_heatmap(policy, reference, dataset.pairs[static_cast<std::size_t>(index)],
                                  masks, dataset.spec, static_cast<std::uint64_t>(index));
    save_heatmap(cfg.get_string("heatmap_out"), masks, records);
    emit({{"records", records.size()},
          {"mask", mask_kind_name(masks.kind())},
          {"out", cfg.get_string("heatmap_out")}});
    return 0;
}

int cmd_sparsity_report(const Config& cfg) {
    const auto texts = beta_grid_texts(cfg);
    const auto values = cfg.get_double_list("beta_grid");
    std::vector<std::pair<double, std::string>> runs;
    for (std::size_t i = 0; i < texts.size(); ++i)
        runs.emplace_back(values[i], expand_beta_pattern(cfg.get_string("metrics_pattern"),
                                                         texts[i]));
    SparsityReportResult result = sparsity_report(runs, cfg.get_string("sparsity_out"));
    emit({{"rows", result.rows.size()},
          {"missing", result.missing},
          {"out", cfg.get_string("sparsity_out")}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Token-level preference optimization laboratory"};
    app.require_subcommand(1);
    app.footer(Config().help());

    CommonArgs gen_args, sft_args, po_args, eval_args, frontier_args, heatmap_args, sparsity_args;
    std::string po_method;
    std::vector<std::string> frontier_checkpoints;

    CLI::App* gen = app.add_subcommand("gen-data", "generate preference pairs and an sft corpus");
    add_common(gen, gen_args);
    CLI::App* sft = app.add_subcommand("sft", "fit the language model on plain sequences");
    add_common(sft, sft_args);
    CLI::App* po = app.add_subcommand("po", "preference-optimize a policy");
    add_common(po, po_args);
    po->add_option("--method", po_method, "objective; overrides the config key");
    CLI::App* eval = app.add_subcommand("eval", "preference accuracy on held-out pairs");
    add_common(eval, eval_args);
    CLI::App* frontier =
        app.add_subcommand("frontier", "sampled reward vs. reference KL per checkpoint");
    add_common(frontier, frontier_args);
    frontier->add_option("--checkpoint", frontier_checkpoints, "checkpoint(s) to evaluate")
        ->take_all();
    CLI::App* heatmap = app.add_subcommand("heatmap", "per-token reward/KL records for one pair");
    add_common(heatmap, heatmap_args);
    CLI::App* sparsity =
        app.add_subcommand("sparsity-report", "collate per-beta metrics into curve tables");
    add_common(sparsity, sparsity_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(build_config(gen_args));
        if (sft->parsed()) return cmd_sft(build_config(sft_args));
        if (po->parsed()) {
            Config cfg = build_config(po_args);
            if (!po_method.empty()) cfg.set("method", po_method);
            Method m;
            if (!method_from_string(cfg.get_string("method"), m))
                throw ConfigError("unknown method '" + cfg.get_string("method") + "'");
            return cmd_po(cfg);
        }
        if (eval->parsed()) return cmd_eval(build_config(eval_args));
        if (frontier->parsed())
            return cmd_frontier(build_config(frontier_args), frontier_checkpoints);
        if (heatmap->parsed()) return cmd_heatmap(build_config(heatmap_args));
        if (sparsity->parsed()) return cmd_sparsity_report(build_config(sparsity_args));
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

namespace {

void add_backend_options(CLI::App& app, cli::Global& g)
{
    auto& r = g.backend.ref;
    app.add_option("--seed", g.seed, "Run seed; every sub-seed derives from it")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker threads (1 gives bit-stable output)")->capture_default_str();
    app.add_option("--out", g.out, "Output directory")->capture_default_str();
    app.add_option("--backend", g.backend.kind, "reference | file | bridge")->capture_default_str();
    app.add_option("--model-file", g.backend.model_file, "Reference model RMDL blob");
    app.add_option("--embeddings", g.backend.embeddings, "File backend: .embs or .jsonl embeddings");
    app.add_option("--vocab", g.backend.vocab, "File backend: vocabulary JSONL");
    app.add_option("--bridge-cmd", g.backend.bridge_cmd, "Bridge backend: server command line");
    app.add_option("--vocab-size", r.T, "Reference model T")->capture_default_str();
    app.add_option("--token-dim", r.h, "Reference model h")->capture_default_str();
    app.add_option("--hidden-dim", r.h_mid, "Reference model h_mid")->capture_default_str();
    app.add_option("--embed-dim", r.d, "Reference model d")->capture_default_str();
    app.add_option("--bias-strength", r.bias_strength, "Reference model bias strength")->capture_default_str();
    app.add_flag("--no-plant", g.no_plant, "Do not plant a positive magic word at token T-1");
    app.add_flag("--truncate", r.truncate, "Truncate over-length texts instead of rejecting them");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Magic-word toolkit for text embeddings: bias direction, suffix search, safeguard attacks and "
                 "defenses"};
    app.set_config("--config", "", "TOML-like key = value file; [section] names a subcommand");
    app.require_subcommand(1);
    cli::Global g;
    add_backend_options(app, g);

    cli::BiasOpts bias;
    auto* c_bias = app.add_subcommand("bias", "Estimate e*, v* and their overlap; write a similarity histogram");
    c_bias->add_option("--corpus", bias.corpus, "JSONL corpus ({\"tokens\": [...]} or {\"text\": ...})");
    c_bias->add_option("--n-texts", bias.n_texts, "Sampled texts when no corpus is given")->capture_default_str();
    c_bias->add_option("--power-iters", bias.power_iters, "Power-iteration cap")->capture_default_str();
    c_bias->add_option("--tol", bias.tol, "Convergence tolerance on 1 - cos(v_k, v_k+1)")->capture_default_str();
    c_bias->add_option("--bins", bias.bins, "Histogram bins over [-1, 1]")->capture_default_str();

    cli::SearchOpts search;
    auto* c_search = app.add_subcommand("search", "Search for magic words");
    c_search->add_option("--alg", search.alg, "brute | context-free | gradient")->capture_default_str();
    c_search->add_option("--mode", search.mode, "pos | neg | south")->capture_default_str();
    c_search->add_option("--k", search.k, "Candidates kept by the pre-score (per position for gradient)")
        ->capture_default_str();
    c_search->add_option("--k0", search.k0, "Words reported")->capture_default_str();
    c_search->add_option("--m", search.m, "Suffix length (gradient)")->capture_default_str();
    c_search->add_option("--cap", search.cap, "Cartesian-product cap (gradient)")->capture_default_str();
    c_search->add_option("--r-max", search.r_max, "Largest repetition count scored")->capture_default_str();
    c_search->add_option("--n-pairs", search.n_pairs, "Generated text pairs")->capture_default_str();
    c_search->add_option("--perturb", search.perturb, "Token substitution fraction for pairs")
        ->capture_default_str();
    c_search->add_option("--pairs", search.pairs, "JSONL pairs {\"s\": [...], \"s_prime\": [...]}");
    c_search->add_option("--report", search.report, "json | csv | both")->capture_default_str();
    c_search->add_flag("--share-init", search.share_init, "One random working suffix for all texts (gradient)");
    c_search->add_option("--init-scale", search.init_scale,
                         "Working-suffix entry std; <= 0 uses the RMS token-embedding norm")
        ->capture_default_str();

    cli::AttackOpts attack;
    auto setup_attack = [&](CLI::App* c) {
        c->add_option("--word", attack.word, "Token ids of the word (comma or space separated; empty = identity)");
        c->add_option("--words", attack.words_file, "search.json whose top list supplies the words");
        c->add_option("--mode", attack.mode, "Mode used to score --word for best_r")->capture_default_str();
        c->add_option("--repeat", attack.repeat, "Repetitions appended (0 = the word's best_r)")
            ->capture_default_str();
        c->add_option("--guards", attack.guards, "Comma list of logistic, mlp2, linear_svm")->capture_default_str();
        c->add_option("--load-guard", attack.load_guard, "GRDM guard blob to attack instead of training");
        c->add_flag("--save-guards", attack.save_guards, "Write trained guards as GRDM blobs");
        c->add_option("--apply-to", attack.apply_to, "harmful | all")->capture_default_str();
        c->add_option("--train", attack.train, "Labeled JSONL training corpus");
        c->add_option("--test", attack.test, "Labeled JSONL test corpus");
        c->add_option("--fit-corpus", attack.fit_corpus, "Clean JSONL corpus for fitting defenses");
        c->add_option("--hot-size", attack.hot_size, "Synthetic task: harmful token cluster size")
            ->capture_default_str();
        c->add_option("--hot-prob", attack.hot_prob, "Synthetic task: cluster token probability")
            ->capture_default_str();
        c->add_option("--n-train", attack.n_train, "Synthetic task: training texts per class")
            ->capture_default_str();
        c->add_option("--n-test", attack.n_test, "Synthetic task: test texts per class")->capture_default_str();
        c->add_option("--n-fit", attack.n_fit, "Texts sampled to fit defenses")->capture_default_str();
        c->add_option("--n-pairs", attack.n_pairs, "Pairs used to score --word")->capture_default_str();
        c->add_option("--perturb", attack.perturb, "Pair perturbation fraction")->capture_default_str();
    };
    auto* c_attack = app.add_subcommand("attack", "Attack embedding safeguards with magic words");
    setup_attack(c_attack);
    c_attack->add_option("--defense", attack.defense, "none | renormalize | standardize | all")
        ->capture_default_str();
    auto* c_defend = app.add_subcommand("defend", "Attack with a defense transform (--defense required)");
    setup_attack(c_defend);
    c_defend->add_option("--defense", attack.defense, "renormalize | standardize | all")->required();

    cli::RandmatOpts rm;
    auto* c_rm = app.add_subcommand("randmat", "Random-matrix checks behind e* ~ v*");
    c_rm->add_option("--check", rm.check, "Comma list of sweep, mp, singular, rowip, all")->capture_default_str();
    c_rm->add_option("--n", rm.n, "Rows")->capture_default_str();
    c_rm->add_option("--m", rm.m, "Columns")->capture_default_str();
    c_rm->add_option("--u-norms", rm.u_norms, "Ascending |u| values for the overlap sweep")->capture_default_str();
    c_rm->add_option("--trials", rm.trials, "Row inner-product trials")->capture_default_str();
    c_rm->add_option("--row-m", rm.row_m, "Dimension for the row inner-product check")->capture_default_str();

    cli::ModelInfoOpts mi;
    auto* c_model = app.add_subcommand("model", "Backend metadata");
    c_model->require_subcommand(1);
    auto* c_info = c_model->add_subcommand("info", "Print backend metadata as JSON");
    c_info->add_option("--save", mi.save, "Write the reference model as an RMDL blob");

    cli::CorpusGenOpts cg;
    auto* c_corpus = app.add_subcommand("corpus", "Synthetic corpora");
    c_corpus->require_subcommand(1);
    auto* c_gen = c_corpus->add_subcommand("gen", "Generate text pairs or a labeled safeguard task");
    c_gen->add_option("--kind", cg.kind, "pairs | task")->capture_default_str();
    c_gen->add_option("--n-pairs", cg.n_pairs, "Pairs")->capture_default_str();
    c_gen->add_option("--perturb", cg.perturb, "Substitution fraction")->capture_default_str();
    c_gen->add_option("--hot-size", cg.hot_size, "Harmful cluster size")->capture_default_str();
    c_gen->add_option("--hot-prob", cg.hot_prob, "Cluster token probability")->capture_default_str();
    c_gen->add_option("--n-train", cg.n_train, "Training texts per class")->capture_default_str();
    c_gen->add_option("--n-test", cg.n_test, "Test texts per class")->capture_default_str();

    for (auto* c : {c_bias, c_search, c_attack, c_defend, c_rm, c_model, c_info, c_corpus, c_gen}) c->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        g.resolved_config = app.config_to_str(true, false);
        if (*c_bias) return cli::cmd_bias(g, bias);
        if (*c_search) return cli::cmd_search(g, search);
        if (*c_attack) return cli::cmd_attack(g, attack, false);
        if (*c_defend) return cli::cmd_attack(g, attack, true);
        if (*c_rm) return cli::cmd_randmat(g, rm);
        if (*c_info) return cli::cmd_model_info(g, mi);
        if (*c_gen) return cli::cmd_corpus_gen(g, cg);
    } catch (const mw::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}

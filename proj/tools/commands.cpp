#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <magicwords/randmat.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cli {
namespace {

std::string out_path(const Global& g, const std::string& name)
{
    fs::create_directories(g.out);
    return (fs::path(g.out) / name).string();
}

void write_file(const std::string& path, const std::string& text)
{
    auto f = mw::open_out(path);
    f << text;
    if (!f) throw mw::input_error("cannot write " + path);
}

void echo_config(const Global& g) { write_file(out_path(g, "config.toml"), g.resolved_config); }

std::unique_ptr<mw::Backend> backend(const Global& g)
{
    mw::BackendSpec s = g.backend;
    s.ref.seed = g.seed;
    s.ref.plant_positive_token = !g.no_plant;
    return mw::make_backend(s);
}

std::vector<std::string> split(const std::string& s, char sep = ',')
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, sep);) {
        const auto a = item.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        out.push_back(item.substr(a, item.find_last_not_of(" \t") - a + 1));
    }
    return out;
}

std::vector<mw::LabeledText> load_corpus(const mw::Backend& b, const std::string& path, bool labeled)
{
    auto f = mw::open_in(path);
    auto data = labeled ? mw::read_labeled_jsonl(f) : mw::read_corpus_jsonl(f);
    if (data.empty()) throw mw::input_error("empty corpus: " + path);
    mw::resolve_tokens(b, data);
    return data;
}

mw::PairedCorpus load_pairs(const mw::Backend& b, const std::string& path)
{
    auto f = mw::open_in(path);
    mw::PairedCorpus pc;
    double total = 0;
    mw::for_each_jsonl(f, [&](const json& j, std::size_t) {
        auto side = [&](const char* key) {
            const auto& v = j.at(key);
            mw::TextSeq t = v.is_string() ? b.tokenize(v.get<std::string>()) : v.get<mw::TextSeq>();
            if (t.empty()) throw mw::input_error(std::string("empty \"") + key + "\" text");
            b.check_tokens(t);
            return t;
        };
        mw::TextPair p{side("s"), side("s_prime")};
        total += b.embed(p.s).dot(b.embed(p.s_prime));
        pc.pairs.push_back(std::move(p));
    });
    if (pc.pairs.empty()) throw mw::input_error("empty corpus: " + path);
    pc.mean_pair_cosine = total / double(pc.pairs.size());
    return pc;
}

// "1-1.7e-06" style for values just below one.
std::string format_overlap(double x)
{
    char buf[64];
    if (x >= 1.0) return "1";
    if (x > 0.99) std::snprintf(buf, sizeof buf, "1-%.1e", 1.0 - x);
    else std::snprintf(buf, sizeof buf, "%.6f", x);
    return buf;
}

std::string display(const mw::Backend& b, const std::vector<mw::TokenId>& w)
{
    std::string s;
    for (auto t : w) s += b.token_string(t);
    return s.empty() ? "(empty)" : s;
}

std::vector<mw::TokenId> parse_word(std::string s)
{
    for (char& c : s)
        if (c == ',') c = ' ';
    return mw::parse_id_tokens(s);
}

} // namespace

int cmd_bias(const Global& g, const BiasOpts& o)
{
    auto B = backend(g);
    std::vector<mw::TextSeq> texts;
    if (!o.corpus.empty()) {
        texts = mw::tokens_of(load_corpus(*B, o.corpus, false));
    } else if (auto* fb = dynamic_cast<const mw::FileBackend*>(B.get())) {
        for (std::size_t i = 0; i < fb->vocab_size(); ++i) texts.push_back({mw::TokenId(i)});
    } else {
        texts = mw::random_texts(o.n_texts, mw::corpus_vocab(*B), 8, 24, mw::derive_seed(g.seed, "bias-corpus"));
    }
    if (texts.empty()) throw mw::input_error("empty corpus");
    const mw::Mat X = mw::embed_all(*B, texts);
    mw::PowerIterOptions opt;
    opt.max_iters = o.power_iters;
    opt.tol = o.tol;
    opt.seed = mw::derive_seed(g.seed, "power");
    mw::BiasDirection bd;
    int rc = 0;
    try {
        bd = mw::estimate_bias(X, opt);
    } catch (const mw::NonConvergence& e) {
        std::cerr << "warning: " << e.what() << '\n';
        bd = e.partial();
        rc = e.exit_code();
    }
    const auto hist = mw::similarity_histogram(X, bd.e_star, o.bins);

    json j{{"backend", B->name()},
           {"sample_count", bd.sample_count},
           {"mean", mw::to_json(bd.mean)},
           {"mean_norm", bd.mean_norm},
           {"e_star", mw::to_json(bd.e_star)},
           {"v_star", mw::to_json(bd.v_star)},
           {"overlap", bd.overlap},
           {"power_iterations", bd.iterations},
           {"converged", bd.converged},
           {"histogram", {{"direction", "e_star"}, {"mu", hist.mu}, {"sigma", hist.sigma}, {"n", hist.n}}}};
    write_file(out_path(g, "bias.json"), j.dump(2) + "\n");
    std::ostringstream csv;
    csv.precision(17);
    csv << "bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < hist.counts.size(); ++i)
        csv << hist.edges[i] << ',' << hist.edges[i + 1] << ',' << hist.counts[i] << '\n';
    write_file(out_path(g, "histogram.csv"), csv.str());
    echo_config(g);

    std::printf("overlap |e*.v*| = %s\n", format_overlap(bd.overlap).c_str());
    std::printf("|mean| = %.4f over %zu texts; cos(e, e*) = %.4f +- %.4f\n", bd.mean_norm, bd.sample_count, hist.mu,
                hist.sigma);
    return rc;
}

int cmd_search(const Global& g, const SearchOpts& o)
{
    auto B = backend(g);
    const mw::Mode mode = mw::parse_mode(o.mode);
    const mw::Algorithm alg = mw::parse_algorithm(o.alg);
    const mw::PairedCorpus pc =
        o.pairs.empty() ? mw::scoring_pairs(*B, o.n_pairs, o.perturb, g.seed) : load_pairs(*B, o.pairs);
    if (pc.pairs.empty()) throw mw::input_error("empty corpus");

    mw::ScoreConfig sc;
    sc.r_max = o.r_max;
    sc.mode = mode;
    sc.threads = g.threads;
    const mw::Vec es = mw::estimate_bias(mw::embed_all(*B, pc.firsts())).e_star;
    const mw::Scorer scorer = mode == mw::Mode::negative ? mw::Scorer::negative(*B, pc, sc)
                              : mode == mw::Mode::positive ? mw::Scorer::positive(*B, pc.firsts(), es, sc)
                                                           : mw::Scorer::southern(*B, pc.firsts(), es, sc);
    mw::SearchReport rep;
    switch (alg) {
    case mw::Algorithm::brute: rep = mw::brute_force(scorer, o.k0); break;
    case mw::Algorithm::context_free: rep = mw::context_free(scorer, es, o.k, o.k0); break;
    case mw::Algorithm::gradient: {
        mw::GradientOptions go;
        go.seed = g.seed;
        go.share_init = o.share_init;
        go.init_scale = o.init_scale;
        rep = mw::gradient_search(scorer, es, o.m, o.k, o.k0, o.cap, go);
        break;
    }
    }
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';

    if (o.report != "json" && o.report != "csv" && o.report != "both")
        throw mw::input_error("--report must be json, csv or both");
    json j = mw::to_json(rep, B.get());
    j["backend"] = B->name();
    j["n_pairs"] = pc.pairs.size();
    j["mean_pair_cosine"] = pc.mean_pair_cosine;
    if (o.report != "csv") write_file(out_path(g, "search.json"), j.dump(2) + "\n");
    if (o.report != "json") {
        std::ostringstream csv;
        mw::write_report_csv(csv, rep);
        write_file(out_path(g, "search.csv"), csv.str());
    }
    echo_config(g);

    std::printf("%s / %s: %zu candidates evaluated in %.2f s\n", mw::to_string(alg).c_str(),
                mw::to_string(mode).c_str(), rep.candidates_evaluated, rep.wall_time);
    for (std::size_t i = 0; i < rep.top.size(); ++i) {
        const auto& c = rep.top[i];
        std::printf("%2zu  [%s] %-12s %s  r=%d\n", i + 1, mw::join_ids(c.tokens).c_str(),
                    display(*B, c.tokens).c_str(), mw::describe_shift(c).c_str(), c.best_r);
    }
    return 0;
}

int cmd_attack(const Global& g, const AttackOpts& o, bool defend)
{
    auto B = backend(g);
    const mw::Mode mode = mw::parse_mode(o.mode);
    const mw::ApplyTo apply_to = mw::parse_apply_to(o.apply_to);

    // Words: explicit ids or the top list of a search report.
    std::vector<mw::MagicWordCandidate> words;
    const mw::PairedCorpus pc = mw::scoring_pairs(*B, o.n_pairs, o.perturb, g.seed);
    if (!o.words_file.empty()) {
        auto f = mw::open_in(o.words_file);
        json j;
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            throw mw::input_error(o.words_file + ": " + e.what());
        }
        for (const auto& c : j.at("top")) words.push_back(mw::candidate_from_json(c));
        if (words.empty()) throw mw::input_error(o.words_file + " lists no words");
    } else {
        const auto w = parse_word(o.word);
        B->check_tokens(w);
        if (w.empty()) {
            mw::MagicWordCandidate c;
            c.mode = mode;
            c.best_r = 0;
            words.push_back(c);
        } else {
            mw::ScoreConfig sc;
            sc.threads = g.threads;
            words.push_back(mw::score_word(*B, w, mode, pc, sc));
        }
    }
    if (o.repeat > 0)
        for (auto& w : words) w.best_r = o.repeat;

    // Task.
    mw::SafeguardTask task;
    if (!o.train.empty() || !o.test.empty()) {
        if (o.train.empty() || o.test.empty()) throw mw::input_error("--train and --test go together");
        task.train = load_corpus(*B, o.train, true);
        task.test = load_corpus(*B, o.test, true);
    } else {
        mw::SafeguardTaskSpec sp;
        sp.hot_size = o.hot_size;
        sp.hot_prob = o.hot_prob;
        sp.n_train = o.n_train;
        sp.n_test = o.n_test;
        sp.vocab_limit = mw::corpus_vocab(*B);
        task = mw::make_safeguard_task(*B, sp, mw::derive_seed(g.seed, "task"));
    }

    // Transforms, fit on clean generic text only.
    std::vector<mw::TransformKind> kinds{mw::TransformKind::identity};
    if (o.defense == "all") {
        kinds.push_back(mw::TransformKind::renormalize);
        kinds.push_back(mw::TransformKind::standardize);
    } else if (o.defense != "none" && o.defense != "identity") {
        kinds.push_back(mw::parse_transform(o.defense));
    } else if (defend) {
        throw mw::input_error("defend needs --defense renormalize, standardize or all");
    }
    const std::vector<mw::TextSeq> fit_texts = o.fit_corpus.empty()
                                                   ? mw::defense_fit_texts(*B, o.n_fit, g.seed)
                                                   : mw::tokens_of(load_corpus(*B, o.fit_corpus, false));
    const mw::Mat F = mw::embed_all(*B, fit_texts);
    std::vector<mw::EmbeddingTransform> transforms;
    json tjson = json::array();
    for (auto k : kinds) {
        transforms.push_back(k == mw::TransformKind::identity ? mw::EmbeddingTransform{} : mw::fit_transform(k, F));
        if (k != mw::TransformKind::identity) {
            tjson.push_back(mw::to_json(transforms.back()));
            write_file(out_path(g, "transform_" + mw::to_string(k) + ".json"), tjson.back().dump(2) + "\n");
        }
    }

    // Guards: trained per transform, or one loaded blob on the raw pipeline.
    std::vector<mw::GuardKind> guards;
    for (const auto& s : split(o.guards)) guards.push_back(mw::parse_guard(s));
    if (guards.empty() && o.load_guard.empty()) throw mw::input_error("no guard kinds given");

    json rows = json::array();
    std::ostringstream roc, table;
    roc << "variant,threshold,fpr,tpr\n";
    table << "word,guard,transform,auc_clean,auc_attacked,delta,attacked_over_raw_clean\n";
    std::printf("%-14s %-10s %-12s %9s %9s %8s %8s\n", "word", "guard", "transform", "clean", "attacked", "delta",
                "vs raw");
    for (const auto& w : words) {
        const std::string wname = w.tokens.empty() ? "(identity)" : mw::join_ids(w.tokens, '-');
        std::vector<mw::AttackRow> res;
        if (!o.load_guard.empty()) {
            auto f = mw::open_in(o.load_guard, true);
            const auto guard = mw::load_guard(f);
            mw::AttackRow r;
            r.guard = guard.kind;
            r.train = guard.train_config;
            r.record = mw::attack_eval(guard, *B, task.test, w, apply_to, {}, g.threads);
            res.push_back(r);
        } else {
            for (std::size_t t = 0; t < transforms.size(); ++t) {
                const auto train = mw::embed_labeled(*B, task.train, transforms[t]);
                for (auto gk : guards) {
                    mw::AttackRow r;
                    r.guard = gk;
                    r.transform = transforms[t].kind;
                    r.train = mw::TrainConfig::defaults(gk);
                    r.train.seed = mw::derive_seed(g.seed, "guard-" + mw::to_string(gk));
                    const auto model = mw::train_safeguard(train, gk, r.train);
                    if (o.save_guards) {
                        auto f = mw::open_out(out_path(g, "guard_" + mw::to_string(gk) + "_" +
                                                             mw::to_string(r.transform) + ".grdm"),
                                              true);
                        mw::save_guard(f, model);
                    }
                    r.record = mw::attack_eval(model, *B, task.test, w, apply_to, transforms[t], g.threads);
                    res.push_back(r);
                }
            }
        }
        for (const auto& r : res) {
            // Recovery is judged against the undefended guard's clean AUC.
            double raw_clean = r.record.auc_clean;
            for (const auto& q : res)
                if (q.guard == r.guard && q.transform == mw::TransformKind::identity) raw_clean = q.record.auc_clean;
            const double delta = r.record.auc_attacked - r.record.auc_clean;
            const double ratio = r.record.auc_attacked / raw_clean;
            const std::string gname = mw::to_string(r.guard), tname = mw::to_string(r.transform);
            rows.push_back({{"word", w.tokens},
                            {"best_r", w.best_r},
                            {"guard", gname},
                            {"transform", tname},
                            {"auc_clean", r.record.auc_clean},
                            {"auc_attacked", r.record.auc_attacked},
                            {"delta", delta},
                            {"attacked_over_raw_clean", ratio},
                            {"train_config", mw::to_json(r.train)}});
            std::ostringstream line;
            line.precision(17);
            line << wname << ',' << gname << ',' << tname << ',' << r.record.auc_clean << ','
                 << r.record.auc_attacked << ',' << delta << ',' << ratio << '\n';
            table << line.str();
            const std::string variant = wname + "/" + gname + "/" + tname;
            mw::write_roc_csv(roc, variant + "/clean", r.record.roc_clean, false);
            mw::write_roc_csv(roc, variant + "/attacked", r.record.roc_attacked, false);
            std::printf("%-14s %-10s %-12s %9.4f %9.4f %+8.4f %8.3f\n", wname.c_str(), gname.c_str(), tname.c_str(),
                        r.record.auc_clean, r.record.auc_attacked, delta, ratio);
        }
    }
    json words_json = json::array();
    for (const auto& w : words) words_json.push_back(mw::to_json(w, B.get()));
    const json summary{{"backend", B->name()},
                       {"apply_to", o.apply_to},
                       {"words", words_json},
                       {"transforms", tjson},
                       {"fit_texts", fit_texts.size()},
                       {"n_train", task.train.size()},
                       {"n_test", task.test.size()},
                       {"rows", rows}};
    write_file(out_path(g, "summary.json"), summary.dump(2) + "\n");
    write_file(out_path(g, "summary.csv"), table.str());
    write_file(out_path(g, "roc.csv"), roc.str());
    echo_config(g);
    return 0;
}

int cmd_randmat(const Global& g, const RandmatOpts& o)
{
    if (o.n < 2 || o.m < 2) throw mw::input_error("n and m must be >= 2");
    const auto checks = split(o.check);
    auto want = [&](const std::string& c) {
        for (const auto& x : checks)
            if (x == c || x == "all") return true;
        return false;
    };
    for (const auto& c : checks)
        if (c != "all" && c != "sweep" && c != "mp" && c != "singular" && c != "rowip")
            throw mw::input_error("unknown check '" + c + "' (sweep, mp, singular, rowip, all)");
    json j{{"n", o.n}, {"m", o.m}, {"seed", g.seed}};
    if (want("sweep")) {
        std::vector<double> us;
        for (const auto& s : split(o.u_norms)) {
            try {
                us.push_back(std::stod(s));
            } catch (const std::exception&) {
                throw mw::input_error("bad u-norm '" + s + "'");
            }
        }
        mw::RandMatConfig cfg;
        cfg.n = o.n;
        cfg.m = o.m;
        cfg.seed = g.seed;
        cfg.threads = g.threads;
        const auto curve = mw::overlap_sweep(cfg, us);
        std::ostringstream csv;
        csv.precision(17);
        csv << "u_norm,overlap\n";
        json pts = json::array();
        for (const auto& p : curve) {
            csv << p.u_norm << ',' << p.overlap << '\n';
            pts.push_back({{"u_norm", p.u_norm}, {"overlap", p.overlap}, {"converged", p.converged}});
            std::printf("u = %-6g overlap = %s%s\n", p.u_norm, format_overlap(p.overlap).c_str(),
                        p.converged ? "" : "  (power iteration not converged)");
        }
        write_file(out_path(g, "overlap.csv"), csv.str());
        j["sweep"] = pts;
    }
    if (want("mp")) {
        const double gamma = double(o.n) / double(o.m);
        const auto [lo, hi] = mw::mp_bounds(gamma);
        const double frac = mw::mp_fraction_within(o.n, o.m, g.seed, 0.05, g.threads);
        j["mp"] = {{"gamma", gamma}, {"lambda_minus", lo}, {"lambda_plus", hi}, {"fraction_within", frac}};
        std::printf("MP edges (%.4f, %.4f); %.2f%% of eigenvalues within +-0.05\n", lo, hi, 100 * frac);
    }
    if (want("singular")) {
        const auto s = mw::largest_singular_value_check(o.n, o.m, g.seed, g.threads);
        j["singular"] = {{"empirical", s.empirical}, {"predicted", s.predicted}, {"rel_err", s.rel_err}};
        std::printf("top singular value %.4f vs predicted %.4f (rel err %.4f)\n", s.empirical, s.predicted,
                    s.rel_err);
    }
    if (want("rowip")) {
        const auto s = mw::row_inner_product_stats(o.row_m, o.trials, g.seed, g.threads);
        j["row_inner_product"] = {{"m", o.row_m}, {"trials", s.trials}, {"mean", s.mean}, {"std", s.std}};
        std::printf("b_i.b_j over %d trials at m=%d: mean %.5f std %.5f (1/sqrt(m) = %.5f)\n", s.trials, o.row_m,
                    s.mean, s.std, 1.0 / std::sqrt(double(o.row_m)));
    }
    write_file(out_path(g, "randmat.json"), j.dump(2) + "\n");
    echo_config(g);
    return 0;
}

int cmd_model_info(const Global& g, const ModelInfoOpts& o)
{
    auto B = backend(g);
    json j{{"name", B->name()},
           {"T", B->vocab_size()},
           {"h", B->token_dim()},
           {"d", B->embed_dim()},
           {"max_length", B->max_length()},
           {"differentiable", B->differentiable()},
           {"token_table", B->has_token_table()}};
    if (auto* r = dynamic_cast<const mw::ReferenceModel*>(B.get())) {
        const auto& c = r->config();
        j["seed"] = c.seed;
        j["h_mid"] = c.h_mid;
        j["bias_strength"] = c.bias_strength;
        j["planted_token"] = c.plant_positive_token ? json(r->planted_token()) : json(nullptr);
        j["token_rms_norm"] = r->token_rms_norm();
        if (!o.save.empty()) {
            auto f = mw::open_out(o.save, true);
            mw::save_reference_model(f, *r);
        }
    } else if (!o.save.empty()) {
        throw mw::capability_error("only the reference backend serializes to RMDL");
    }
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_corpus_gen(const Global& g, const CorpusGenOpts& o)
{
    auto B = backend(g);
    if (o.kind == "pairs") {
        const auto pc = mw::scoring_pairs(*B, o.n_pairs, o.perturb, g.seed);
        std::ostringstream os;
        for (const auto& p : pc.pairs) os << json{{"s", p.s}, {"s_prime", p.s_prime}}.dump() << '\n';
        write_file(out_path(g, "pairs.jsonl"), os.str());
        std::printf("%zu pairs, mean pair cosine %.4f\n", pc.pairs.size(), pc.mean_pair_cosine);
    } else if (o.kind == "task") {
        mw::SafeguardTaskSpec sp;
        sp.hot_size = o.hot_size;
        sp.hot_prob = o.hot_prob;
        sp.n_train = o.n_train;
        sp.n_test = o.n_test;
        sp.vocab_limit = mw::corpus_vocab(*B);
        const auto task = mw::make_safeguard_task(*B, sp, mw::derive_seed(g.seed, "task"));
        std::ostringstream tr, te;
        mw::write_labeled_jsonl(tr, task.train);
        mw::write_labeled_jsonl(te, task.test);
        write_file(out_path(g, "train.jsonl"), tr.str());
        write_file(out_path(g, "test.jsonl"), te.str());
        std::printf("%zu train / %zu test texts, %zu hot tokens\n", task.train.size(), task.test.size(),
                    task.hot.size());
    } else {
        throw mw::input_error("--kind must be pairs or task");
    }
    echo_config(g);
    return 0;
}

} // namespace cli

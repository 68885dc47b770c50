#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corpus.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace mw {

enum class Mode { positive, negative, southern };
enum class Algorithm { brute, context_free, gradient };

inline std::string to_string(Mode m)
{
    switch (m) {
    case Mode::positive: return "positive";
    case Mode::negative: return "negative";
    case Mode::southern: return "southern";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s)
{
    if (s == "pos" || s == "positive") return Mode::positive;
    if (s == "neg" || s == "negative") return Mode::negative;
    if (s == "south" || s == "southern") return Mode::southern;
    throw input_error("unknown mode '" + s + "' (expected pos, neg or south)");
}

inline std::string to_string(Algorithm a)
{
    switch (a) {
    case Algorithm::brute: return "brute";
    case Algorithm::context_free: return "context_free";
    case Algorithm::gradient: return "gradient";
    }
    return "?";
}

inline Algorithm parse_algorithm(const std::string& s)
{
    if (s == "brute") return Algorithm::brute;
    if (s == "context-free" || s == "context_free") return Algorithm::context_free;
    if (s == "gradient") return Algorithm::gradient;
    throw input_error("unknown algorithm '" + s + "' (expected brute, context-free or gradient)");
}

struct ScoreConfig {
    int r_max = 16;
    std::vector<int> r_set_context_free{3, 4, 5};
    Mode mode = Mode::positive;
    unsigned threads = 1;
};

struct ScoreResult {
    double score = 0.0;
    int best_r = 1;
};

struct MagicWordCandidate {
    std::vector<TokenId> tokens;
    Mode mode = Mode::positive;
    double score = 0.0;
    int best_r = 1;
    double baseline_mu = 0.0;
    double baseline_sigma = 0.0;
    double shift_sigmas = 0.0;
};

// Higher is better for positive; lower is better otherwise.
inline bool better(Mode m, double a, double b)
{
    return m == Mode::positive ? a > b : a < b;
}

// Mode order with ascending token sequence as tie-break.
inline bool candidate_less(const MagicWordCandidate& a, const MagicWordCandidate& b)
{
    if (a.score != b.score) return better(a.mode, a.score, b.score);
    return a.tokens < b.tokens;
}

// Scores suffixes against a fixed corpus.
//   positive: max_r mean_j cos(s_j + r*w, e*)
//   southern: min_r mean_j cos(s_j + r*w, e*)
//   negative: min_r mean_j cos(s_j + r*w, s'_j)
class Scorer {
public:
    Scorer(const Backend& backend, std::vector<TextSeq> texts, std::vector<TextSeq> partners, Vec e_star,
           ScoreConfig cfg)
        : backend_(backend), texts_(std::move(texts)), cfg_(std::move(cfg)), e_star_(std::move(e_star))
    {
        if (texts_.empty()) throw input_error("empty corpus");
        if (cfg_.r_max < 1) throw input_error("r_max must be >= 1");
        const auto n = Eigen::Index(texts_.size());
        clean_ = embed_all(backend_, texts_);
        if (cfg_.mode == Mode::negative) {
            if (partners.size() != texts_.size()) throw input_error("negative mode needs a paired corpus");
            refs_ = embed_all(backend_, partners);
            partners_ = std::move(partners);
        } else {
            if (e_star_.size() != backend_.embed_dim())
                throw input_error("e* dimension " + std::to_string(e_star_.size()) +
                                  " differs from backend dimension " + std::to_string(backend_.embed_dim()));
            refs_ = e_star_.transpose().replicate(n, 1);
        }
        Vec c = clean_.cwiseProduct(refs_).rowwise().sum();
        mu_ = c.mean();
        sigma_ = n > 1 ? std::sqrt((c.array() - mu_).square().sum() / double(n - 1)) : 0.0;
    }

    static Scorer positive(const Backend& b, std::vector<TextSeq> texts, Vec e_star, ScoreConfig cfg = {})
    {
        cfg.mode = Mode::positive;
        return Scorer(b, std::move(texts), {}, std::move(e_star), cfg);
    }
    static Scorer southern(const Backend& b, std::vector<TextSeq> texts, Vec e_star, ScoreConfig cfg = {})
    {
        cfg.mode = Mode::southern;
        return Scorer(b, std::move(texts), {}, std::move(e_star), cfg);
    }
    static Scorer negative(const Backend& b, const PairedCorpus& pc, ScoreConfig cfg = {})
    {
        cfg.mode = Mode::negative;
        return Scorer(b, pc.firsts(), pc.seconds(), Vec(), cfg);
    }

    ScoreResult score(const std::vector<TokenId>& w) const
    {
        ++invocations_;
        std::vector<double> acc(std::size_t(cfg_.r_max), 0.0);
        for (std::size_t j = 0; j < texts_.size(); ++j) {
            const auto e = backend_.embed_repeats(texts_[j], w, cfg_.r_max);
            const auto ref = refs_.row(Eigen::Index(j));
            for (int r = 0; r < cfg_.r_max; ++r) acc[std::size_t(r)] += ref.dot(e[std::size_t(r)].transpose());
        }
        ScoreResult best{acc[0] / double(texts_.size()), 1};
        for (int r = 2; r <= cfg_.r_max; ++r) {
            const double s = acc[std::size_t(r - 1)] / double(texts_.size());
            if (better(cfg_.mode, s, best.score)) best = {s, r};
        }
        best.score = std::clamp(best.score, -1.0, 1.0);
        return best;
    }

    MagicWordCandidate candidate(const std::vector<TokenId>& w) const { return make_candidate(w, score(w)); }

    MagicWordCandidate make_candidate(const std::vector<TokenId>& w, const ScoreResult& s) const
    {
        MagicWordCandidate c;
        c.tokens = w;
        c.mode = cfg_.mode;
        c.score = s.score;
        c.best_r = s.best_r;
        c.baseline_mu = mu_;
        c.baseline_sigma = sigma_;
        c.shift_sigmas = sigma_ > 0 ? (s.score - mu_) / sigma_ : 0.0;
        return c;
    }

    const Backend& backend() const { return backend_; }
    const ScoreConfig& config() const { return cfg_; }
    Mode mode() const { return cfg_.mode; }
    const std::vector<TextSeq>& texts() const { return texts_; }
    const std::vector<TextSeq>& partners() const { return partners_; }
    const Mat& partner_embeddings() const { return refs_; }
    const Mat& clean_embeddings() const { return clean_; }
    const Vec& e_star() const { return e_star_; }
    double baseline_mu() const { return mu_; }
    double baseline_sigma() const { return sigma_; }
    std::size_t invocations() const { return invocations_.load(); }

private:
    const Backend& backend_;
    std::vector<TextSeq> texts_;
    std::vector<TextSeq> partners_;
    ScoreConfig cfg_;
    Vec e_star_;
    Mat clean_;
    Mat refs_; // per-text reference: e* rows or e(s'_j)
    double mu_ = 0.0;
    double sigma_ = 0.0;
    mutable std::atomic<std::size_t> invocations_{0};
};

inline ScoreResult score_positive(const std::vector<TokenId>& w, const Backend& b,
                                  const std::vector<TextSeq>& corpus, const Vec& e_star, ScoreConfig cfg = {})
{
    return Scorer::positive(b, corpus, e_star, cfg).score(w);
}

inline ScoreResult score_southern(const std::vector<TokenId>& w, const Backend& b,
                                  const std::vector<TextSeq>& corpus, const Vec& e_star, ScoreConfig cfg = {})
{
    return Scorer::southern(b, corpus, e_star, cfg).score(w);
}

inline ScoreResult score_negative(const std::vector<TokenId>& w, const Backend& b, const PairedCorpus& pc,
                                  ScoreConfig cfg = {})
{
    return Scorer::negative(b, pc, cfg).score(w);
}

struct SearchReport {
    std::vector<MagicWordCandidate> top;
    std::size_t candidates_evaluated = 0;
    double wall_time = 0.0; // seconds
    Algorithm algorithm = Algorithm::brute;
    Mode mode = Mode::positive;
    bool truncated = false;
    std::vector<std::string> warnings;
    // Context-free pre-scores (index = token id) and the r that produced each.
    std::vector<double> prescores;
    std::vector<int> prescore_r;
    // Gradient search: per-position token scores E t*_u (T x m).
    Mat position_scores;
    std::vector<std::vector<TokenId>> candidates;
};

namespace detail {

inline std::vector<MagicWordCandidate> refine(const Scorer& scorer,
                                              const std::vector<std::vector<TokenId>>& cands, std::size_t k0)
{
    std::vector<MagicWordCandidate> all(cands.size());
    parallel_for(cands.size(), scorer.config().threads,
                 [&](std::size_t i) { all[i] = scorer.candidate(cands[i]); });
    std::sort(all.begin(), all.end(), candidate_less);
    if (all.size() > k0) all.resize(k0);
    return all;
}

// Indices of the k best entries: descending when `desc`, ties by ascending index.
inline std::vector<TokenId> select(const std::vector<double>& v, std::size_t k, bool desc)
{
    std::vector<TokenId> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](TokenId a, TokenId b) {
        return desc ? v[std::size_t(a)] > v[std::size_t(b)] : v[std::size_t(a)] < v[std::size_t(b)];
    });
    if (idx.size() > k) idx.resize(k);
    return idx;
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

} // namespace detail

// Brute force: score every token.
inline SearchReport brute_force(const Scorer& scorer, std::size_t k0)
{
    const auto t0 = detail::Clock::now();
    const std::size_t T = scorer.backend().vocab_size();
    std::vector<std::vector<TokenId>> cands;
    for (std::size_t i = 0; i < T; ++i) cands.push_back({TokenId(i)});
    SearchReport rep;
    rep.algorithm = Algorithm::brute;
    rep.mode = scorer.mode();
    rep.top = detail::refine(scorer, cands, k0);
    rep.candidates_evaluated = T;
    rep.candidates = std::move(cands);
    rep.wall_time = detail::seconds_since(t0);
    return rep;
}

// Context-free: pre-score c_i = max_{r in R} e(r*t_i) . e*, keep top (positive)
// or bottom (negative, southern) k, refine with the full scorer.
inline SearchReport context_free(const Scorer& scorer, const Vec& e_star, std::size_t k, std::size_t k0)
{
    if (k < 1 || k0 < 1 || k < k0) throw input_error("context_free needs k >= k0 >= 1");
    const auto& b = scorer.backend();
    const auto& R = scorer.config().r_set_context_free;
    if (R.empty()) throw input_error("empty context-free repetition set");
    if (e_star.size() != b.embed_dim()) throw input_error("e* dimension differs from backend dimension");
    const auto t0 = detail::Clock::now();
    const std::size_t T = b.vocab_size();
    SearchReport rep;
    rep.algorithm = Algorithm::context_free;
    rep.mode = scorer.mode();
    rep.prescores.assign(T, 0.0);
    rep.prescore_r.assign(T, R.front());
    parallel_for(T, scorer.config().threads, [&](std::size_t i) {
        double best = -2.0;
        int best_r = R.front();
        for (int r : R) {
            const SuffixSpec s{{TokenId(i)}, r};
            const double c = b.embed({}, &s).dot(e_star);
            if (c > best) {
                best = c;
                best_r = r;
            }
        }
        rep.prescores[i] = best;
        rep.prescore_r[i] = best_r;
    });
    const auto ids = detail::select(rep.prescores, k, scorer.mode() == Mode::positive);
    for (TokenId id : ids) rep.candidates.push_back({id});
    rep.top = detail::refine(scorer, rep.candidates, k0);
    rep.candidates_evaluated = rep.candidates.size();
    rep.wall_time = detail::seconds_since(t0);
    return rep;
}

struct GradientOptions {
    std::uint64_t seed = 0;
    bool share_init = false;   // one working suffix for all texts instead of a redraw per text
    double init_scale = -1.0;  // per-entry std of the working suffix; <= 0 selects the RMS token norm
};

// The k^m index tuples with the largest summed score, best first.
inline std::vector<std::vector<std::size_t>> best_products(const std::vector<std::vector<double>>& lists,
                                                           std::size_t cap)
{
    const std::size_t m = lists.size();
    std::vector<std::vector<std::size_t>> out;
    if (m == 0) return out;
    for (const auto& l : lists)
        if (l.empty()) return out;
    using Item = std::pair<double, std::vector<std::size_t>>;
    auto cmp = [](const Item& a, const Item& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second > b.second;
    };
    std::priority_queue<Item, std::vector<Item>, decltype(cmp)> pq(cmp);
    std::set<std::vector<std::size_t>> seen;
    auto sum = [&](const std::vector<std::size_t>& ix) {
        double s = 0;
        for (std::size_t u = 0; u < m; ++u) s += lists[u][ix[u]];
        return s;
    };
    std::vector<std::size_t> start(m, 0);
    pq.push({sum(start), start});
    seen.insert(start);
    while (!pq.empty() && out.size() < cap) {
        auto [s, ix] = pq.top();
        pq.pop();
        out.push_back(ix);
        for (std::size_t u = 0; u < m; ++u) {
            if (ix[u] + 1 >= lists[u].size()) continue;
            auto nx = ix;
            ++nx[u];
            if (seen.insert(nx).second) pq.push({sum(nx), nx});
        }
    }
    return out;
}

// Gradient-guided: one pass of accumulated suffix VJPs gives t*, per-position
// top-k tokens by E t*_u, Cartesian product (capped), full-scorer refinement.
inline SearchReport gradient_search(const Scorer& scorer, const Vec& e_star, int m, std::size_t k, std::size_t k0,
                                    std::size_t cap, const GradientOptions& opt = {})
{
    const auto& b = scorer.backend();
    if (!b.differentiable()) throw capability_error(b.name() + " backend is not differentiable");
    if (!b.has_token_table()) throw capability_error(b.name() + " backend exposes no token table");
    if (m < 1 || k < 1 || k0 < 1 || cap < 1) throw input_error("gradient_search needs m, k, k0, cap >= 1");
    const Mode mode = scorer.mode();
    if (mode != Mode::negative && e_star.size() != b.embed_dim())
        throw input_error("e* dimension differs from backend dimension");
    const auto t0 = detail::Clock::now();
    const Mat& E = b.token_table();
    const int h = b.token_dim();
    const double scale = opt.init_scale > 0 ? opt.init_scale : std::sqrt(E.rowwise().squaredNorm().mean());

    auto draw = [&](std::uint64_t s) {
        Rng rng(s);
        Mat t(h, m);
        for (Eigen::Index j = 0; j < t.cols(); ++j)
            for (Eigen::Index i = 0; i < t.rows(); ++i) t(i, j) = scale * rng.normal();
        return t;
    };
    const Mat shared = draw(derive_seed(opt.seed, "suffix-init"));
    const auto& texts = scorer.texts();
    Mat acc = Mat::Zero(h, m);
    for (std::size_t j = 0; j < texts.size(); ++j) {
        const Mat t = opt.share_init ? shared : draw(derive_seed(opt.seed, "suffix-init", j));
        Vec dir;
        switch (mode) {
        case Mode::positive: dir = e_star; break;
        case Mode::southern: dir = -e_star; break;
        case Mode::negative: dir = -scorer.partner_embeddings().row(Eigen::Index(j)).transpose(); break;
        }
        acc += b.suffix_vjp(texts[j], t, dir);
    }

    SearchReport rep;
    rep.algorithm = Algorithm::gradient;
    rep.mode = mode;
    rep.position_scores = E * acc; // T x m
    std::vector<std::vector<TokenId>> pos_ids(static_cast<std::size_t>(m));
    std::vector<std::vector<double>> pos_scores(static_cast<std::size_t>(m));
    for (int u = 0; u < m; ++u) {
        const Vec col = rep.position_scores.col(u);
        const std::vector<double> v(col.begin(), col.end());
        pos_ids[std::size_t(u)] = detail::select(v, k, true);
        for (TokenId id : pos_ids[std::size_t(u)]) pos_scores[std::size_t(u)].push_back(v[std::size_t(id)]);
    }
    double total = 1.0;
    for (const auto& l : pos_ids) total *= double(l.size());
    if (total > double(cap)) {
        rep.truncated = true;
        rep.warnings.push_back("candidate product of " + std::to_string(std::llround(total)) +
                               " truncated to cap " + std::to_string(cap));
    }
    for (const auto& ix : best_products(pos_scores, cap)) {
        std::vector<TokenId> w;
        for (std::size_t u = 0; u < ix.size(); ++u) w.push_back(pos_ids[u][ix[u]]);
        rep.candidates.push_back(std::move(w));
    }
    rep.top = detail::refine(scorer, rep.candidates, k0);
    rep.candidates_evaluated = rep.candidates.size();
    rep.wall_time = detail::seconds_since(t0);
    return rep;
}

// ---- serialization ----

inline std::string join_ids(const std::vector<TokenId>& w, char sep = ' ')
{
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (i) s += sep;
        s += std::to_string(w[i]);
    }
    return s;
}

inline nlohmann::json to_json(const MagicWordCandidate& c, const Backend* b = nullptr)
{
    nlohmann::json j{{"tokens", c.tokens},       {"mode", to_string(c.mode)},
                     {"score", c.score},         {"best_r", c.best_r},
                     {"baseline_mu", c.baseline_mu}, {"baseline_sigma", c.baseline_sigma},
                     {"shift_sigmas", c.shift_sigmas}};
    if (b) {
        std::string disp;
        for (TokenId t : c.tokens) disp += b->token_string(t);
        j["display"] = disp;
    }
    return j;
}

inline MagicWordCandidate candidate_from_json(const nlohmann::json& j)
{
    MagicWordCandidate c;
    c.tokens = j.at("tokens").get<std::vector<TokenId>>();
    c.mode = parse_mode(j.value("mode", "positive"));
    c.score = j.value("score", 0.0);
    c.best_r = j.value("best_r", 1);
    c.baseline_mu = j.value("baseline_mu", 0.0);
    c.baseline_sigma = j.value("baseline_sigma", 0.0);
    c.shift_sigmas = j.value("shift_sigmas", 0.0);
    return c;
}

inline nlohmann::json to_json(const SearchReport& r, const Backend* b = nullptr)
{
    nlohmann::json top = nlohmann::json::array();
    for (const auto& c : r.top) top.push_back(to_json(c, b));
    nlohmann::json j{{"algorithm", to_string(r.algorithm)},
                     {"mode", to_string(r.mode)},
                     {"top", top},
                     {"candidates_evaluated", r.candidates_evaluated},
                     {"wall_time", r.wall_time},
                     {"truncated", r.truncated},
                     {"warnings", r.warnings}};
    if (!r.candidates.empty()) j["candidates"] = r.candidates;
    return j;
}

inline void write_report_csv(std::ostream& os, const SearchReport& r)
{
    os << "token_ids,mode,score,best_r,shift_sigmas\n";
    for (const auto& c : r.top) {
        std::ostringstream line;
        line.precision(17);
        line << join_ids(c.tokens) << ',' << to_string(c.mode) << ',' << c.score << ',' << c.best_r << ','
             << c.shift_sigmas << '\n';
        os << line.str();
    }
}

// "0.79 = mu+2.5sigma (0.71+-0.03)" style summary.
inline std::string describe_shift(const MagicWordCandidate& c)
{
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.4f = mu%+.1fsigma (clean %.4f+-%.4f)", c.score, c.shift_sigmas, c.baseline_mu,
                  c.baseline_sigma);
    return buf;
}

} // namespace mw

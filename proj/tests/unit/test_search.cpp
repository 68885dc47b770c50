#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include <magicwords/pipeline.hpp>

#include "test_support.hpp"

using mw::Mat;
using mw::Mode;
using mw::TokenId;
using mw::Vec;

namespace {

struct Fixture {
    mw::PairedCorpus pc;
    Vec e_star;
    mw::Scorer pos, neg, south;
    mw::SearchReport brute_pos, brute_neg, brute_south;

    Fixture()
        : pc(mw::scoring_pairs(testing::reference(), 200, 0.1, 1)),
          e_star(mw::estimate_bias(mw::embed_all(testing::reference(), pc.firsts())).e_star),
          pos(mw::Scorer::positive(testing::reference(), pc.firsts(), e_star)),
          neg(mw::Scorer::negative(testing::reference(), pc)),
          south(mw::Scorer::southern(testing::reference(), pc.firsts(), e_star)),
          brute_pos(mw::brute_force(pos, 256)), brute_neg(mw::brute_force(neg, 256)),
          brute_south(mw::brute_force(south, 256))
    {
    }
};

const Fixture& fx()
{
    static const Fixture f;
    return f;
}

// Every output is the same fixed unit vector, whatever the text.
class ConstantBackend : public mw::Backend {
public:
    explicit ConstantBackend(Vec out, std::size_t T = 16) : out_(std::move(out)), T_(T) {}
    std::string name() const override { return "constant"; }
    std::size_t vocab_size() const override { return T_; }
    int token_dim() const override { return 2; }
    int embed_dim() const override { return int(out_.size()); }
    Vec embed(const mw::TextSeq& text, const mw::SuffixSpec* = nullptr) const override
    {
        check_tokens(text);
        return out_;
    }

private:
    Vec out_;
    std::size_t T_;
};

std::vector<mw::TextSeq> few_texts() { return {{1, 2}, {3}, {4, 5, 6}}; }

} // namespace

TEST_CASE("planted token wins every algorithm in positive mode", "[search]")
{
    const auto& f = fx();
    const auto& m = testing::reference();
    REQUIRE(f.brute_pos.top.size() == 256);
    CHECK(f.brute_pos.top[0].tokens == std::vector<TokenId>{m.planted_token()});
    CHECK(f.brute_pos.candidates_evaluated == 256);
    CHECK(f.brute_pos.top[0].score > f.brute_pos.top[0].baseline_mu + f.brute_pos.top[0].baseline_sigma);

    const auto cf = mw::context_free(f.pos, f.e_star, 32, 1);
    CHECK(cf.top[0].tokens == f.brute_pos.top[0].tokens);
    CHECK(cf.candidates_evaluated == 32);

    const auto gr = mw::gradient_search(f.pos, f.e_star, 1, 8, 1, 1024, {7});
    CHECK(gr.top[0].tokens == f.brute_pos.top[0].tokens);
    CHECK(gr.candidates_evaluated == 8);
    bool seen = false;
    for (const auto& c : gr.candidates) seen |= c == std::vector<TokenId>{m.planted_token()};
    CHECK(seen);
}

TEST_CASE("brute force returns the full sorted list when k0 >= T", "[search]")
{
    const auto& r = fx().brute_pos;
    std::set<TokenId> ids;
    for (std::size_t i = 0; i < r.top.size(); ++i) {
        ids.insert(r.top[i].tokens[0]);
        if (i) CHECK(r.top[i - 1].score >= r.top[i].score);
    }
    CHECK(ids.size() == 256);
    const auto& n = fx().brute_neg.top;
    for (std::size_t i = 1; i < n.size(); ++i) CHECK(n[i - 1].score <= n[i].score);
}

TEST_CASE("constant backend ties break by ascending token id", "[search]")
{
    Vec out = Vec::Zero(3);
    out(0) = 1;
    const ConstantBackend b(out);
    const auto s = mw::Scorer::positive(b, few_texts(), out);
    const auto r = mw::brute_force(s, 5);
    REQUIRE(r.top.size() == 5);
    for (int i = 0; i < 5; ++i) {
        CHECK(r.top[std::size_t(i)].tokens == std::vector<TokenId>{TokenId(i)});
        CHECK(r.top[std::size_t(i)].score == 1.0);
    }
}

TEST_CASE("score bounds are attained by constant outputs", "[search]")
{
    Vec e = Vec::Zero(3);
    e(1) = 1;
    const ConstantBackend up(e), down(-e);
    CHECK(mw::score_positive({3}, up, few_texts(), e).score == 1.0);
    CHECK(mw::score_southern({3}, down, few_texts(), e).score == -1.0);
    mw::PairedCorpus pc;
    for (const auto& t : few_texts()) pc.pairs.push_back({t, t});
    CHECK(mw::score_negative({3}, up, pc).score == 1.0);
}

TEST_CASE("pairwise mean form equals the normalized mean form scaled by the mean norm", "[search]")
{
    const auto& m = testing::reference();
    mw::Rng rng(5);
    for (std::uint64_t c = 0; c < 20; ++c) {
        const auto texts = m.sample_texts(40, 1000 + c);
        const Mat X = mw::embed_all(m, texts);
        const Vec mean = X.colwise().mean().transpose();
        const Vec es = mean / mean.norm();
        const TokenId t = TokenId(rng.uniform_int(0, 255));
        const int r = int(rng.uniform_int(1, 6));
        mw::ScoreConfig cfg;
        cfg.r_max = 1;
        const mw::SuffixSpec s{{t}, r};
        double pairwise = 0;
        for (const auto& sj : texts) {
            const Vec a = m.embed(sj, &s);
            for (Eigen::Index k = 0; k < X.rows(); ++k) pairwise += a.dot(X.row(k).transpose());
        }
        pairwise /= double(texts.size() * texts.size());
        std::vector<mw::TextSeq> suffixed;
        for (const auto& sj : texts) suffixed.push_back(mw::concat(sj, {t}, r - 1));
        const double single = mw::score_positive({t}, m, suffixed, es, cfg).score;
        CHECK(std::abs(pairwise - mean.norm() * single) <= 1e-12);
    }
}

TEST_CASE("random tokens stay near the clean negative baseline", "[search]")
{
    // One appended copy. Repeated copies swamp the mean pool of these short texts, so any token
    // drifts away once r >= 4.
    mw::ScoreConfig cfg;
    cfg.r_max = 1;
    const auto neg = mw::Scorer::negative(testing::reference(), fx().pc, cfg);
    mw::Rng rng(31);
    int inside = 0;
    for (int i = 0; i < 20; ++i) {
        const auto c = neg.candidate({TokenId(rng.uniform_int(0, 254))});
        inside += std::abs(c.score - c.baseline_mu) <= 2 * c.baseline_sigma;
    }
    CHECK(inside == 20);
}

TEST_CASE("southern top-1 is the exhaustive minimum", "[search]")
{
    const auto& f = fx();
    TokenId arg = 0;
    double best = 2;
    for (TokenId t = 0; t < 256; ++t) {
        const double s = f.south.score({t}).score;
        if (s < best) {
            best = s;
            arg = t;
        }
    }
    CHECK(f.brute_south.top[0].tokens == std::vector<TokenId>{arg});
    CHECK(f.brute_south.top[0].score == best);
}

TEST_CASE("faster algorithms never beat the exhaustive search", "[search]")
{
    const auto& f = fx();
    struct Case {
        const mw::Scorer* s;
        const mw::SearchReport* b;
    };
    for (auto [s, b] : {Case{&f.pos, &f.brute_pos}, Case{&f.neg, &f.brute_neg}, Case{&f.south, &f.brute_south}}) {
        const auto cf = mw::context_free(*s, f.e_star, 16, 4);
        const auto gr = mw::gradient_search(*s, f.e_star, 1, 8, 4, 64, {3});
        for (const auto* r : {&cf, &gr}) {
            CHECK(!mw::better(s->mode(), r->top[0].score, b->top[0].score));
            // Refinement soundness: top-k0 are the best by rescoring the whole candidate set.
            std::vector<mw::MagicWordCandidate> all;
            for (const auto& c : r->candidates) all.push_back(s->candidate(c));
            std::sort(all.begin(), all.end(), mw::candidate_less);
            REQUIRE(r->top.size() == 4);
            for (std::size_t i = 0; i < 4; ++i) {
                CHECK(r->top[i].tokens == all[i].tokens);
                CHECK(r->top[i].score == all[i].score);
            }
            for (const auto& c : r->top) {
                CHECK(c.score >= -1.0);
                CHECK(c.score <= 1.0);
            }
        }
    }
}

TEST_CASE("negative mode agreement on the planted model", "[search]")
{
    const auto& f = fx();
    CHECK(mw::context_free(f.neg, f.e_star, 32, 1).top[0].tokens == f.brute_neg.top[0].tokens);
    CHECK(mw::gradient_search(f.neg, f.e_star, 1, 8, 1, 1024, {7}).top[0].tokens == f.brute_neg.top[0].tokens);
}

TEST_CASE("exhaustive limits reproduce brute force", "[search]")
{
    const auto& f = fx();
    const auto cf = mw::context_free(f.pos, f.e_star, 256, 10);
    const auto gr = mw::gradient_search(f.pos, f.e_star, 1, 256, 10, 256, {2});
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(cf.top[i].tokens == f.brute_pos.top[i].tokens);
        CHECK(gr.top[i].tokens == f.brute_pos.top[i].tokens);
        CHECK(cf.top[i].score == f.brute_pos.top[i].score);
    }
}

TEST_CASE("gradient search honors the candidate cap", "[search]")
{
    const auto& m = testing::small_model();
    const auto texts = m.sample_texts(20, 3);
    const Vec es = mw::estimate_bias(mw::embed_all(m, texts)).e_star;
    const auto s = mw::Scorer::positive(m, texts, es);
    const auto r = mw::gradient_search(s, es, 3, 4, 5, 16, {1});
    CHECK(r.candidates.size() == 16);
    CHECK(r.truncated);
    CHECK(!r.warnings.empty());
    CHECK(r.top.size() == 5);
    // Candidates come out in descending summed per-position score.
    auto sum = [&](const std::vector<TokenId>& w) {
        double t = 0;
        for (std::size_t u = 0; u < w.size(); ++u) t += r.position_scores(w[u], Eigen::Index(u));
        return t;
    };
    for (std::size_t i = 1; i < r.candidates.size(); ++i) CHECK(sum(r.candidates[i - 1]) >= sum(r.candidates[i]) - 1e-12);
    const auto full = mw::gradient_search(s, es, 2, 3, 1, 1024, {1});
    CHECK(full.candidates.size() == 9);
    CHECK(!full.truncated);
}

TEST_CASE("best_products enumerates in summed order", "[search]")
{
    const std::vector<std::vector<double>> lists{{5, 3, 1}, {4, 2}, {1, 0.5}};
    const auto all = mw::best_products(lists, 100);
    CHECK(all.size() == 12);
    auto sum = [&](const std::vector<std::size_t>& ix) { return lists[0][ix[0]] + lists[1][ix[1]] + lists[2][ix[2]]; };
    for (std::size_t i = 1; i < all.size(); ++i) CHECK(sum(all[i - 1]) >= sum(all[i]));
    CHECK(all[0] == std::vector<std::size_t>{0, 0, 0});
    CHECK(mw::best_products(lists, 3).size() == 3);
}

TEST_CASE("searches are deterministic", "[search]")
{
    const auto& f = fx();
    const auto a = mw::gradient_search(f.pos, f.e_star, 2, 4, 3, 16, {9});
    const auto b = mw::gradient_search(f.pos, f.e_star, 2, 4, 3, 16, {9});
    auto strip = [](mw::SearchReport r) {
        r.wall_time = 0;
        return mw::to_json(r).dump();
    };
    CHECK(strip(a) == strip(b));
    CHECK((a.position_scores.array() == b.position_scores.array()).all());
    const auto c = mw::gradient_search(f.pos, f.e_star, 2, 4, 3, 16, {9, true});
    CHECK(c.candidates.size() == 16);
}

TEST_CASE("search preconditions", "[search]")
{
    const auto& f = fx();
    CHECK_THROWS_AS(mw::context_free(f.pos, f.e_star, 2, 3), mw::Error);
    CHECK_THROWS_AS(mw::gradient_search(f.pos, f.e_star, 0, 4, 1, 16), mw::Error);
    Vec out = Vec::Ones(3) / std::sqrt(3.0);
    const ConstantBackend b(out);
    const auto s = mw::Scorer::positive(b, few_texts(), out);
    try {
        (void)mw::gradient_search(s, out, 1, 2, 1, 4);
        FAIL("no error");
    } catch (const mw::Error& e) {
        CHECK(e.kind() == mw::ErrorKind::capability);
    }
    CHECK_THROWS_AS(mw::Scorer::positive(b, {}, out), mw::Error);
    CHECK_THROWS_AS(mw::Scorer::positive(b, few_texts(), Vec::Ones(4)), mw::Error);
}

TEST_CASE("candidate JSON round trip", "[search]")
{
    const auto& c = fx().brute_pos.top[0];
    const auto back = mw::candidate_from_json(mw::to_json(c, &testing::reference()));
    CHECK(back.tokens == c.tokens);
    CHECK(back.score == c.score);
    CHECK(back.best_r == c.best_r);
    CHECK(back.mode == Mode::positive);
    CHECK(mw::to_json(c, &testing::reference())["display"] == "w255");
}

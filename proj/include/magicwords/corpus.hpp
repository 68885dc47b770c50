#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "error.hpp"
#include "io.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace mw {

struct TextPair {
    TextSeq s;
    TextSeq s_prime;
};

struct PairedCorpus {
    std::vector<TextPair> pairs;
    double mean_pair_cosine = 1.0;

    std::vector<TextSeq> firsts() const
    {
        std::vector<TextSeq> out;
        for (const auto& p : pairs) out.push_back(p.s);
        return out;
    }
    std::vector<TextSeq> seconds() const
    {
        std::vector<TextSeq> out;
        for (const auto& p : pairs) out.push_back(p.s_prime);
        return out;
    }
};

struct CorpusSpec {
    int text_min = 8;
    int text_max = 24;
    int vocab_limit = 0; // 0: use the backend's full vocabulary
};

// s'_j is s_j with ceil(perturb_frac * len) positions replaced by different tokens.
inline PairedCorpus generate_corpus(const Backend& backend, std::size_t n_pairs, double perturb_frac,
                                    std::uint64_t seed, const CorpusSpec& spec = {})
{
    if (!(perturb_frac >= 0.0 && perturb_frac <= 0.5))
        throw input_error("perturb_frac must lie in [0, 0.5]");
    const int vocab = spec.vocab_limit > 0 ? spec.vocab_limit : int(backend.vocab_size());
    if (vocab < 2) throw input_error("need at least 2 tokens to perturb");
    PairedCorpus pc;
    const auto texts = random_texts(n_pairs, vocab, spec.text_min, spec.text_max, seed);
    Rng rng(derive_seed(seed, "perturb"));
    double total = 0.0;
    for (const auto& s : texts) {
        TextPair p{s, s};
        const auto k = std::size_t(std::ceil(perturb_frac * double(s.size()) - 1e-12));
        std::vector<std::size_t> pos(s.size());
        std::iota(pos.begin(), pos.end(), 0);
        // Partial Fisher-Yates for k distinct positions.
        for (std::size_t i = 0; i < k && i < pos.size(); ++i) {
            const auto j = std::size_t(rng.uniform_int(std::int64_t(i), std::int64_t(pos.size() - 1)));
            std::swap(pos[i], pos[j]);
            const TokenId old = p.s_prime[pos[i]];
            TokenId nt = TokenId(rng.uniform_int(0, vocab - 2));
            if (nt >= old) ++nt;
            p.s_prime[pos[i]] = nt;
        }
        total += backend.embed(p.s).dot(backend.embed(p.s_prime));
        pc.pairs.push_back(std::move(p));
    }
    pc.mean_pair_cosine = pc.pairs.empty() ? 1.0 : total / double(pc.pairs.size());
    return pc;
}

// Texts whose tokens come from `hot` with probability p, otherwise uniform.
inline std::vector<TextSeq> clustered_texts(std::size_t n, const std::vector<TokenId>& hot, double p,
                                            int vocab_limit, int lo, int hi, std::uint64_t seed)
{
    if (hot.empty()) throw input_error("empty hot-token set");
    Rng rng(derive_seed(seed, "clustered"));
    std::vector<TextSeq> out(n);
    for (auto& t : out) {
        t.resize(std::size_t(rng.uniform_int(lo, hi)));
        for (auto& tok : t) {
            if (rng.uniform() < p) tok = hot[std::size_t(rng.uniform_int(0, std::int64_t(hot.size()) - 1))];
            else tok = TokenId(rng.uniform_int(0, vocab_limit - 1));
        }
    }
    return out;
}

// Synthetic harmful/benign task: harmful texts draw from a hot token cluster,
// benign texts are ordinary uniform texts.
struct SafeguardTaskSpec {
    int hot_size = 32;
    double hot_prob = 0.9;
    std::size_t n_train = 300; // per class
    std::size_t n_test = 300;  // per class
    int text_min = 8;
    int text_max = 24;
    int vocab_limit = 0;
};

struct SafeguardTask {
    std::vector<TokenId> hot;
    std::vector<LabeledText> train;
    std::vector<LabeledText> test;
};

inline SafeguardTask make_safeguard_task(const Backend& backend, const SafeguardTaskSpec& spec,
                                         std::uint64_t seed)
{
    const int vocab = spec.vocab_limit > 0 ? spec.vocab_limit : int(backend.vocab_size());
    if (spec.hot_size < 1 || spec.hot_size > vocab) throw input_error("hot_size out of range");
    SafeguardTask task;
    std::vector<TokenId> perm(static_cast<std::size_t>(vocab));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(seed, "hot-set"));
    for (std::size_t i = 0; i + 1 < perm.size(); ++i)
        std::swap(perm[i], perm[std::size_t(rng.uniform_int(std::int64_t(i), std::int64_t(perm.size() - 1)))]);
    task.hot.assign(perm.begin(), perm.begin() + spec.hot_size);

    auto add = [&](std::vector<LabeledText>& dst, std::size_t n, const char* label) {
        const auto h = clustered_texts(n, task.hot, spec.hot_prob, vocab, spec.text_min, spec.text_max,
                                       derive_seed(seed, std::string(label) + "-harmful"));
        const auto b = random_texts(n, vocab, spec.text_min, spec.text_max,
                                    derive_seed(seed, std::string(label) + "-benign"));
        for (const auto& t : h) dst.push_back({t, {}, true});
        for (const auto& t : b) dst.push_back({t, {}, false});
    };
    add(task.train, spec.n_train, "train");
    add(task.test, spec.n_test, "test");
    return task;
}

} // namespace mw

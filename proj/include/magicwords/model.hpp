#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace mw {

struct SuffixSpec {
    std::vector<TokenId> tokens;
    int repeat = 1;
};

// Whitespace-separated "w<id>" or bare ids.
inline TextSeq parse_id_tokens(const std::string& text)
{
    std::istringstream is(text);
    TextSeq t;
    for (std::string w; is >> w;) {
        const std::string digits = (w.size() > 1 && w[0] == 'w') ? w.substr(1) : w;
        if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos || digits.size() > 9)
            throw input_error("unknown token '" + w + "'");
        t.push_back(TokenId(std::stol(digits)));
    }
    return t;
}

// Concatenation s + r*w.
inline TextSeq concat(const TextSeq& text, const std::vector<TokenId>& w, int r)
{
    TextSeq out = text;
    for (int k = 0; k < r; ++k) out.insert(out.end(), w.begin(), w.end());
    return out;
}

class Backend {
public:
    virtual ~Backend() = default;

    virtual std::string name() const = 0;
    virtual std::size_t vocab_size() const = 0;
    virtual int token_dim() const = 0; // h
    virtual int embed_dim() const = 0; // d
    virtual std::size_t max_length() const { return 256; }
    virtual bool differentiable() const { return false; }
    virtual bool has_token_table() const { return false; }

    // T x h token-embedding table E.
    virtual const Mat& token_table() const
    {
        throw capability_error(name() + " backend exposes no token-embedding table");
    }

    virtual Vec embed(const TextSeq& text, const SuffixSpec* suffix = nullptr) const = 0;

    // Embeddings of text + r*w for r = 1..r_max.
    virtual std::vector<Vec> embed_repeats(const TextSeq& text, const std::vector<TokenId>& w,
                                           int r_max) const
    {
        std::vector<Vec> out;
        out.reserve(std::size_t(r_max));
        SuffixSpec s{w, 1};
        for (int r = 1; r <= r_max; ++r) {
            s.repeat = r;
            out.push_back(embed(text, &s));
        }
        return out;
    }

    // J(s)^T direction, J = d e([s, t]) / d t, evaluated at suffix_values (h x m).
    virtual Mat suffix_vjp(const TextSeq&, const Mat&, const Vec&) const
    {
        throw capability_error(name() + " backend is not differentiable");
    }

    virtual std::string token_string(TokenId id) const { return "#" + std::to_string(id); }

    // String -> token ids. Backends without a tokenizer refuse.
    virtual TextSeq tokenize(const std::string&) const
    {
        throw capability_error(name() + " backend has no tokenizer");
    }

    void check_tokens(const TextSeq& text) const
    {
        for (TokenId t : text)
            if (t < 0 || std::size_t(t) >= vocab_size())
                throw input_error("unknown token id " + std::to_string(t) + " (vocabulary size " +
                                  std::to_string(vocab_size()) + ")");
    }
};

struct ReferenceConfig {
    int T = 256;
    int h = 32;
    int h_mid = 48;
    int d = 64;
    std::uint64_t seed = 1;
    double bias_strength = 1.0;
    bool plant_positive_token = true;
    double token_scale = 0.5;
    int plant_repeat = 4;
    int plant_steps = 200;
    double plant_lr = 0.1;
    int plant_corpus = 1000;
    int text_min = 8;
    int text_max = 24;
    std::size_t max_length = 256;
    bool truncate = false;
};

struct ReferenceParams {
    Mat E;  // T x h
    Mat W1; // h_mid x h
    Vec b1;
    Mat W2; // d x h_mid
    Vec b2;
    Vec g;  // bias direction added to b2
};

// Seeded token sequences over tokens [0, vocab_limit).
inline std::vector<TextSeq> random_texts(std::size_t n, int vocab_limit, int lo, int hi,
                                         std::uint64_t seed)
{
    if (lo < 1 || hi < lo) throw input_error("text length range must satisfy 1 <= lo <= hi");
    if (vocab_limit < 1) throw input_error("vocabulary limit must be positive");
    Rng rng(derive_seed(seed, "texts"));
    std::vector<TextSeq> out(n);
    for (auto& t : out) {
        const auto len = rng.uniform_int(lo, hi);
        t.resize(std::size_t(len));
        for (auto& tok : t) tok = TokenId(rng.uniform_int(0, vocab_limit - 1));
    }
    return out;
}

class ReferenceModel : public Backend {
public:
    explicit ReferenceModel(const ReferenceConfig& cfg) : cfg_(cfg)
    {
        validate();
        init();
        if (cfg_.plant_positive_token) plant();
        finish();
    }

    ReferenceModel(const ReferenceConfig& cfg, ReferenceParams params)
        : cfg_(cfg), p_(std::move(params))
    {
        validate();
        finish();
    }

    std::string name() const override { return "reference"; }
    std::size_t vocab_size() const override { return std::size_t(cfg_.T); }
    int token_dim() const override { return cfg_.h; }
    int embed_dim() const override { return cfg_.d; }
    std::size_t max_length() const override { return cfg_.max_length; }
    bool differentiable() const override { return true; }
    bool has_token_table() const override { return true; }
    const Mat& token_table() const override { return p_.E; }
    std::string token_string(TokenId id) const override { return "w" + std::to_string(id); }
    TextSeq tokenize(const std::string& text) const override
    {
        auto t = parse_id_tokens(text);
        check_tokens(t);
        return t;
    }

    const ReferenceConfig& config() const { return cfg_; }
    const ReferenceParams& params() const { return p_; }
    TokenId planted_token() const { return TokenId(cfg_.T - 1); }
    // e* of the planting corpus (empty when nothing was planted).
    const Vec& plant_direction() const { return plant_e_star_; }

    Vec embed(const TextSeq& text, const SuffixSpec* suffix = nullptr) const override
    {
        check_tokens(text);
        std::size_t len = text.size();
        if (suffix) {
            if (suffix->repeat < 0) throw input_error("negative suffix repeat");
            check_tokens(suffix->tokens);
            len += suffix->tokens.size() * std::size_t(suffix->repeat);
        }
        if (len == 0) throw input_error("empty text");
        if (len > cfg_.max_length) {
            if (!cfg_.truncate)
                throw input_error("text of " + std::to_string(len) + " tokens exceeds max length " +
                                  std::to_string(cfg_.max_length));
            TextSeq full = suffix ? concat(text, suffix->tokens, suffix->repeat) : text;
            full.resize(cfg_.max_length);
            return forward(pool_sum(full), double(full.size()));
        }
        Vec s = pool_sum(text);
        if (suffix)
            for (int k = 0; k < suffix->repeat; ++k)
                for (TokenId t : suffix->tokens) s += Et_.col(t);
        return forward(s, double(len));
    }

    std::vector<Vec> embed_repeats(const TextSeq& text, const std::vector<TokenId>& w,
                                   int r_max) const override
    {
        check_tokens(text);
        check_tokens(w);
        if (w.empty()) throw input_error("empty suffix");
        if (text.size() + w.size() * std::size_t(r_max) > cfg_.max_length)
            return Backend::embed_repeats(text, w, r_max);
        std::vector<Vec> out;
        out.reserve(std::size_t(r_max));
        Vec s = pool_sum(text);
        std::size_t len = text.size();
        for (int r = 1; r <= r_max; ++r) {
            for (TokenId t : w) s += Et_.col(t);
            len += w.size();
            out.push_back(forward(s, double(len)));
        }
        return out;
    }

    Mat suffix_vjp(const TextSeq& text, const Mat& t, const Vec& direction) const override
    {
        check_tokens(text);
        if (t.rows() != cfg_.h)
            throw input_error("suffix values need " + std::to_string(cfg_.h) + " rows, got " +
                              std::to_string(t.rows()));
        if (direction.size() != cfg_.d)
            throw input_error("direction dimension " + std::to_string(direction.size()) +
                              " differs from embedding dimension " + std::to_string(cfg_.d));
        const Eigen::Index m = t.cols();
        if (m == 0) return Mat(cfg_.h, 0);
        const double len = double(text.size()) + double(m);
        Vec s = pool_sum(text);
        for (Eigen::Index u = 0; u < m; ++u) s += t.col(u);
        const Vec col = pooled_vjp(s / len, direction) / len;
        if (!col.allFinite()) throw numeric_error("non-finite gradient in suffix_vjp");
        return col.replicate(1, m);
    }

    // Gradient of (e(p) . direction) with respect to the pooled input p.
    Vec pooled_vjp(const Vec& p, const Vec& direction) const
    {
        const Vec z = (p_.W1 * p + p_.b1).array().tanh().matrix();
        const Vec y = p_.W2 * z + p_.b2;
        const double ny = y.norm();
        const Vec e = y / ny;
        const Vec gy = (direction - e * e.dot(direction)) / ny;
        const Vec gz = p_.W2.transpose() * gy;
        const Vec ga = gz.cwiseProduct((1.0 - z.array().square()).matrix());
        return p_.W1.transpose() * ga;
    }

    Vec forward_pooled(const Vec& p) const
    {
        const Vec z = (p_.W1 * p + p_.b1).array().tanh().matrix();
        const Vec y = p_.W2 * z + p_.b2;
        return y / y.norm();
    }

    // Texts drawn from the non-planted vocabulary with the configured lengths.
    std::vector<TextSeq> sample_texts(std::size_t n, std::uint64_t seed) const
    {
        return random_texts(n, corpus_vocab(), cfg_.text_min, cfg_.text_max, seed);
    }

    int corpus_vocab() const { return cfg_.plant_positive_token ? cfg_.T - 1 : cfg_.T; }

    // RMS of token-embedding row norms over the non-planted rows.
    double token_rms_norm() const
    {
        const int rows = corpus_vocab();
        return std::sqrt(p_.E.topRows(rows).rowwise().squaredNorm().mean());
    }

private:
    void validate() const
    {
        if (cfg_.T < 16) throw input_error("reference model needs T >= 16");
        if (cfg_.h < 2 || cfg_.h_mid < 2 || cfg_.d < 2)
            throw input_error("reference model dimensions must be >= 2");
        if (cfg_.text_min < 1 || cfg_.text_max < cfg_.text_min)
            throw input_error("invalid text length range");
        if (cfg_.plant_repeat < 1) throw input_error("plant_repeat must be >= 1");
    }

    void init()
    {
        const auto gauss = [](Mat& M, Rng& rng, double scale) {
            for (Eigen::Index i = 0; i < M.rows(); ++i)
                for (Eigen::Index j = 0; j < M.cols(); ++j) M(i, j) = scale * rng.normal();
        };
        Rng re(derive_seed(cfg_.seed, "E"));
        p_.E = Mat(cfg_.T, cfg_.h);
        gauss(p_.E, re, 1.0);
        // Center on the ordinary vocabulary so the token table itself carries no bias.
        const Vec mu = p_.E.topRows(cfg_.T - 1).colwise().mean().transpose();
        p_.E.rowwise() -= mu.transpose();
        p_.E *= cfg_.token_scale;

        Rng r1(derive_seed(cfg_.seed, "W1"));
        p_.W1 = Mat(cfg_.h_mid, cfg_.h);
        gauss(p_.W1, r1, 1.0 / std::sqrt(double(cfg_.h)));
        p_.b1 = Vec::Zero(cfg_.h_mid);

        Rng r2(derive_seed(cfg_.seed, "W2"));
        p_.W2 = Mat(cfg_.d, cfg_.h_mid);
        gauss(p_.W2, r2, 1.0 / std::sqrt(double(cfg_.h_mid)));

        Rng rg(derive_seed(cfg_.seed, "g"));
        Vec g(cfg_.d);
        for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = rg.normal();
        p_.g = g / g.norm();
        p_.b2 = cfg_.bias_strength * p_.g;
    }

    void finish() { Et_ = p_.E.transpose(); }

    // Normalized-gradient ascent on mean_j cos(e(s_j + r*t), e*) with |t| held at
    // the RMS token norm.
    void plant()
    {
        finish();
        const auto texts = random_texts(std::size_t(cfg_.plant_corpus), cfg_.T - 1, cfg_.text_min,
                                        cfg_.text_max, derive_seed(cfg_.seed, "plant-corpus"));
        std::vector<Vec> sums;
        Vec mean = Vec::Zero(cfg_.d);
        for (const auto& s : texts) {
            sums.push_back(pool_sum(s));
            mean += forward(sums.back(), double(s.size()));
        }
        mean /= double(texts.size());
        plant_e_star_ = mean / mean.norm();

        const double target = token_rms_norm();
        const double r = cfg_.plant_repeat;
        Vec t = p_.E.row(cfg_.T - 1).transpose();
        for (int step = 0; step < cfg_.plant_steps; ++step) {
            Vec grad = Vec::Zero(cfg_.h);
            for (std::size_t j = 0; j < texts.size(); ++j) {
                const double len = double(texts[j].size()) + r;
                grad += pooled_vjp((sums[j] + r * t) / len, plant_e_star_) * (r / len);
            }
            const double gn = grad.norm();
            if (!(gn > 0.0)) break;
            t += cfg_.plant_lr * grad / gn;
            t *= target / t.norm();
        }
        p_.E.row(cfg_.T - 1) = t.transpose();
    }

    Vec pool_sum(const TextSeq& text) const
    {
        Vec s = Vec::Zero(cfg_.h);
        for (TokenId t : text) s += Et_.col(t);
        return s;
    }

    Vec forward(const Vec& sum, double len) const { return forward_pooled(sum / len); }

    ReferenceConfig cfg_;
    ReferenceParams p_;
    Mat Et_; // h x T, one contiguous column per token
    Vec plant_e_star_;
};

inline std::unique_ptr<ReferenceModel> build_reference_model(const ReferenceConfig& cfg)
{
    return std::make_unique<ReferenceModel>(cfg);
}

// ---- RMDL blob: "RMDL", u32 version, dims, seed, then parameters ----

inline constexpr std::uint32_t rmdl_version = 1;

inline void save_reference_model(std::ostream& os, const ReferenceModel& m)
{
    const auto& c = m.config();
    const auto& p = m.params();
    bin::put_magic(os, "RMDL");
    bin::put<std::uint32_t>(os, rmdl_version);
    for (int v : {c.T, c.h, c.h_mid, c.d}) bin::put<std::uint32_t>(os, std::uint32_t(v));
    bin::put<std::uint64_t>(os, c.seed);
    bin::put<double>(os, c.bias_strength);
    bin::put<std::uint8_t>(os, c.plant_positive_token ? 1 : 0);
    bin::put<double>(os, c.token_scale);
    for (int v : {c.plant_repeat, c.plant_steps, c.plant_corpus, c.text_min, c.text_max})
        bin::put<std::uint32_t>(os, std::uint32_t(v));
    bin::put<double>(os, c.plant_lr);
    bin::put<std::uint32_t>(os, std::uint32_t(c.max_length));
    bin::put_matrix(os, p.E);
    bin::put_matrix(os, p.W1);
    bin::put_vector(os, p.b1);
    bin::put_matrix(os, p.W2);
    bin::put_vector(os, p.b2);
    bin::put_vector(os, p.g);
}

inline std::unique_ptr<ReferenceModel> load_reference_model(std::istream& is)
{
    bin::expect_magic(is, "RMDL");
    const auto version = bin::get<std::uint32_t>(is);
    if (version != rmdl_version) throw input_error("unsupported RMDL version " + std::to_string(version));
    ReferenceConfig c;
    c.T = int(bin::get<std::uint32_t>(is));
    c.h = int(bin::get<std::uint32_t>(is));
    c.h_mid = int(bin::get<std::uint32_t>(is));
    c.d = int(bin::get<std::uint32_t>(is));
    c.seed = bin::get<std::uint64_t>(is);
    c.bias_strength = bin::get<double>(is);
    c.plant_positive_token = bin::get<std::uint8_t>(is) != 0;
    c.token_scale = bin::get<double>(is);
    c.plant_repeat = int(bin::get<std::uint32_t>(is));
    c.plant_steps = int(bin::get<std::uint32_t>(is));
    c.plant_corpus = int(bin::get<std::uint32_t>(is));
    c.text_min = int(bin::get<std::uint32_t>(is));
    c.text_max = int(bin::get<std::uint32_t>(is));
    c.plant_lr = bin::get<double>(is);
    c.max_length = bin::get<std::uint32_t>(is);
    ReferenceParams p;
    p.E = bin::get_matrix(is, c.T, c.h);
    p.W1 = bin::get_matrix(is, c.h_mid, c.h);
    p.b1 = bin::get_vector(is, c.h_mid);
    p.W2 = bin::get_matrix(is, c.d, c.h_mid);
    p.b2 = bin::get_vector(is, c.d);
    p.g = bin::get_vector(is, c.d);
    return std::make_unique<ReferenceModel>(c, std::move(p));
}

// Precomputed embeddings; a text is a single token naming a stored row.
class FileBackend : public Backend {
public:
    FileBackend(IdMatrix rows, Vocabulary vocab = {}) : m_(std::move(rows)), vocab_(std::move(vocab))
    {
        if (m_.rows.rows() == 0) throw input_error("file backend: empty embedding file");
        for (Eigen::Index i = 0; i < m_.rows.rows(); ++i) {
            if (!m_.rows.row(i).allFinite()) throw input_error("file backend: non-finite row " + m_.ids[std::size_t(i)]);
            const double n = m_.rows.row(i).norm();
            if (!(n > 0)) throw input_error("file backend: zero row " + m_.ids[std::size_t(i)]);
            m_.rows.row(i) /= n;
            index_[m_.ids[std::size_t(i)]] = TokenId(i);
        }
        // Vocabulary names take precedence over stored ids.
        for (std::size_t i = 0; i < vocab_.tokens.size() && i < std::size_t(m_.rows.rows()); ++i)
            if (!vocab_.tokens[i].empty()) index_[vocab_.tokens[i]] = TokenId(i);
    }

    static FileBackend from_embs(const std::string& path, Vocabulary vocab = {})
    {
        IdMatrix m;
        m.rows = read_embs_file(path);
        for (Eigen::Index i = 0; i < m.rows.rows(); ++i) m.ids.push_back(std::to_string(i));
        return FileBackend(std::move(m), std::move(vocab));
    }

    static FileBackend from_jsonl(const std::string& path, Vocabulary vocab = {})
    {
        auto f = open_in(path);
        return FileBackend(read_embeddings_jsonl(f), std::move(vocab));
    }

    std::string name() const override { return "file"; }
    std::size_t vocab_size() const override { return std::size_t(m_.rows.rows()); }
    int token_dim() const override { return 0; }
    int embed_dim() const override { return int(m_.rows.cols()); }

    Vec embed(const TextSeq& text, const SuffixSpec* suffix = nullptr) const override
    {
        if (suffix && suffix->repeat > 0 && !suffix->tokens.empty())
            throw capability_error("file backend cannot embed appended suffixes");
        if (text.size() != 1)
            throw capability_error("file backend only returns stored rows (single-id texts)");
        check_tokens(text);
        return m_.rows.row(text[0]).transpose();
    }

    Vec embed_id(const std::string& id) const
    {
        auto it = index_.find(id);
        if (it == index_.end()) throw input_error("unknown embedding id '" + id + "'");
        return m_.rows.row(it->second).transpose();
    }

    const Mat& rows() const { return m_.rows; }
    const std::vector<std::string>& ids() const { return m_.ids; }

    std::string token_string(TokenId id) const override
    {
        if (!vocab_.tokens.empty()) return vocab_.at(id);
        if (id >= 0 && std::size_t(id) < m_.ids.size()) return m_.ids[std::size_t(id)];
        return Backend::token_string(id);
    }

    // A text names one stored row by its id.
    TextSeq tokenize(const std::string& text) const override
    {
        auto it = index_.find(text);
        if (it == index_.end()) throw input_error("unknown embedding id '" + text + "'");
        return {it->second};
    }

private:
    IdMatrix m_;
    Vocabulary vocab_;
    std::map<std::string, TokenId> index_;
};

inline Mat embed_all(const Backend& b, const std::vector<TextSeq>& texts,
                     const SuffixSpec* suffix = nullptr)
{
    Mat X(Eigen::Index(texts.size()), b.embed_dim());
    for (std::size_t i = 0; i < texts.size(); ++i) X.row(Eigen::Index(i)) = b.embed(texts[i], suffix).transpose();
    return X;
}

} // namespace mw

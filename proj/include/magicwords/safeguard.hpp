#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "defense.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "io.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "search.hpp"

namespace mw {

enum class GuardKind { logistic, mlp2, linear_svm };

inline std::string to_string(GuardKind k)
{
    switch (k) {
    case GuardKind::logistic: return "logistic";
    case GuardKind::mlp2: return "mlp2";
    case GuardKind::linear_svm: return "linear_svm";
    }
    return "?";
}

inline GuardKind parse_guard(const std::string& s)
{
    if (s == "logistic" || s == "lr") return GuardKind::logistic;
    if (s == "mlp2" || s == "mlp") return GuardKind::mlp2;
    if (s == "linear_svm" || s == "svm") return GuardKind::linear_svm;
    throw input_error("unknown guard kind '" + s + "'");
}

struct LabeledEmbeddingSet {
    Mat X;                    // N x d, unit rows
    std::vector<bool> labels; // true = harmful
};

struct TrainConfig {
    int epochs = 2000;
    double lr = 0.5;
    double l2 = 1e-3;
    std::uint64_t seed = 0;
    int hidden1 = 32;
    int hidden2 = 16;
    double early_stop_tol = 0.0; // stop when |loss change| < tol; 0 disables

    static TrainConfig defaults(GuardKind k)
    {
        TrainConfig c;
        if (k == GuardKind::mlp2) c.l2 = 1e-4;
        if (k == GuardKind::linear_svm) c.lr = 0.1;
        return c;
    }
};

struct SafeguardModel {
    GuardKind kind = GuardKind::logistic;
    int dim = 0;
    std::vector<double> params;
    TrainConfig train_config;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int epochs_run = 0;

    // Decision score; for mlp2 this is the pre-sigmoid logit.
    double decision(const Vec& x) const
    {
        if (x.size() != dim)
            throw consistency_error("guard expects dimension " + std::to_string(dim) + ", got " +
                                    std::to_string(x.size()));
        const double* p = params.data();
        if (kind != GuardKind::mlp2) return Eigen::Map<const Vec>(p, dim).dot(x) + p[dim];
        const int h1 = train_config.hidden1, h2 = train_config.hidden2;
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W1(p, h1, dim);
        p += h1 * dim;
        Eigen::Map<const Vec> b1(p, h1);
        p += h1;
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W2(p, h2, h1);
        p += h2 * h1;
        Eigen::Map<const Vec> b2(p, h2);
        p += h2;
        Eigen::Map<const Vec> w3(p, h2);
        p += h2;
        const Vec z1 = (W1 * x + b1).array().tanh().matrix();
        const Vec z2 = (W2 * z1 + b2).array().tanh().matrix();
        return w3.dot(z2) + *p;
    }

    Vec decisions(const Mat& X) const
    {
        Vec s(X.rows());
        for (Eigen::Index i = 0; i < X.rows(); ++i) s[i] = decision(X.row(i).transpose());
        return s;
    }
};

namespace detail {

inline double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

inline void check_loss(double loss, const TrainConfig& c, GuardKind k, int epoch)
{
    if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "training diverged (loss " << loss << ") at epoch " << epoch << " for " << to_string(k)
           << " with epochs=" << c.epochs << " lr=" << c.lr << " l2=" << c.l2 << " seed=" << c.seed;
        throw numeric_error(os.str());
    }
}

inline void train_linear(SafeguardModel& g, const Mat& X, const Vec& y01)
{
    const auto& c = g.train_config;
    const Eigen::Index n = X.rows(), d = X.cols();
    Vec w = Vec::Zero(d);
    double b = 0.0;
    const bool svm = g.kind == GuardKind::linear_svm;
    const Vec ypm = (2.0 * y01.array() - 1.0).matrix();
    double prev = std::numeric_limits<double>::infinity();
    for (int ep = 0; ep < c.epochs; ++ep) {
        const Vec z = (X * w).array() + b;
        Vec gz(n);
        double loss = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (svm) {
                const double margin = ypm[i] * z[i];
                loss += std::max(0.0, 1.0 - margin);
                gz[i] = margin < 1.0 ? -ypm[i] : 0.0;
            } else {
                loss += log1pexp(z[i]) - y01[i] * z[i];
                gz[i] = sigmoid(z[i]) - y01[i];
            }
        }
        loss = loss / double(n) + 0.5 * c.l2 * w.squaredNorm();
        check_loss(loss, c, g.kind, ep);
        if (ep == 0) g.initial_loss = loss;
        g.final_loss = loss;
        g.epochs_run = ep + 1;
        if (c.early_stop_tol > 0 && std::abs(prev - loss) < c.early_stop_tol) break;
        prev = loss;
        gz /= double(n);
        w -= c.lr * (X.transpose() * gz + c.l2 * w);
        b -= c.lr * gz.sum();
    }
    g.params.assign(w.begin(), w.end());
    g.params.push_back(b);
}

inline void train_mlp2(SafeguardModel& g, const Mat& X, const Vec& y)
{
    const auto& c = g.train_config;
    const Eigen::Index n = X.rows(), d = X.cols();
    const int h1 = c.hidden1, h2 = c.hidden2;
    if (h1 < 1 || h2 < 1) throw input_error("mlp2 hidden sizes must be positive");
    Rng rng(derive_seed(c.seed, "mlp2-init"));
    auto init = [&](Eigen::Index r, Eigen::Index cols, double s) {
        Mat M(r, cols);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = s * rng.normal();
        return M;
    };
    Mat W1 = init(h1, d, 1.0 / std::sqrt(double(d)));
    Vec b1 = Vec::Zero(h1);
    Mat W2 = init(h2, h1, 1.0 / std::sqrt(double(h1)));
    Vec b2 = Vec::Zero(h2);
    Vec w3 = init(h2, 1, 1.0 / std::sqrt(double(h2)));
    double b3 = 0.0;
    double prev = std::numeric_limits<double>::infinity();
    for (int ep = 0; ep < c.epochs; ++ep) {
        const Mat Z1 = ((X * W1.transpose()).rowwise() + b1.transpose()).array().tanh().matrix(); // n x h1
        const Mat Z2 = ((Z1 * W2.transpose()).rowwise() + b2.transpose()).array().tanh().matrix(); // n x h2
        const Vec z = (Z2 * w3).array() + b3;
        Vec gz(n);
        double loss = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            loss += log1pexp(z[i]) - y[i] * z[i];
            gz[i] = (sigmoid(z[i]) - y[i]) / double(n);
        }
        loss = loss / double(n) + c.l2 * (W1.squaredNorm() + W2.squaredNorm() + w3.squaredNorm());
        check_loss(loss, c, g.kind, ep);
        if (ep == 0) g.initial_loss = loss;
        g.final_loss = loss;
        g.epochs_run = ep + 1;
        if (c.early_stop_tol > 0 && std::abs(prev - loss) < c.early_stop_tol) break;
        prev = loss;
        const Vec gw3 = Z2.transpose() * gz + 2 * c.l2 * w3;
        const double gb3 = gz.sum();
        const Mat dA2 = (gz * w3.transpose()).cwiseProduct((1.0 - Z2.array().square()).matrix());
        const Mat gW2 = dA2.transpose() * Z1 + 2 * c.l2 * W2;
        const Vec gb2 = dA2.colwise().sum().transpose();
        const Mat dA1 = (dA2 * W2).cwiseProduct((1.0 - Z1.array().square()).matrix());
        const Mat gW1 = dA1.transpose() * X + 2 * c.l2 * W1;
        const Vec gb1 = dA1.colwise().sum().transpose();
        W1 -= c.lr * gW1;
        b1 -= c.lr * gb1;
        W2 -= c.lr * gW2;
        b2 -= c.lr * gb2;
        w3 -= c.lr * gw3;
        b3 -= c.lr * gb3;
    }
    g.params.clear();
    for (Eigen::Index i = 0; i < W1.rows(); ++i)
        for (Eigen::Index j = 0; j < W1.cols(); ++j) g.params.push_back(W1(i, j));
    g.params.insert(g.params.end(), b1.begin(), b1.end());
    for (Eigen::Index i = 0; i < W2.rows(); ++i)
        for (Eigen::Index j = 0; j < W2.cols(); ++j) g.params.push_back(W2(i, j));
    g.params.insert(g.params.end(), b2.begin(), b2.end());
    g.params.insert(g.params.end(), w3.begin(), w3.end());
    g.params.push_back(b3);
}

} // namespace detail

inline SafeguardModel train_safeguard(const LabeledEmbeddingSet& data, GuardKind kind, const TrainConfig& cfg)
{
    const auto n = std::size_t(data.X.rows());
    if (data.labels.size() != n) throw input_error("label count differs from embedding count");
    const auto pos = std::size_t(std::count(data.labels.begin(), data.labels.end(), true));
    if (pos < 2 || n - pos < 2) throw input_error("training needs at least 2 samples per class");
    if (cfg.epochs < 1) throw input_error("epochs must be >= 1");
    SafeguardModel g;
    g.kind = kind;
    g.dim = int(data.X.cols());
    g.train_config = cfg;
    Vec y(data.X.rows());
    for (std::size_t i = 0; i < n; ++i) y[Eigen::Index(i)] = data.labels[i] ? 1.0 : 0.0;
    if (kind == GuardKind::mlp2) detail::train_mlp2(g, data.X, y);
    else detail::train_linear(g, data.X, y);
    return g;
}

inline SafeguardModel train_safeguard(const LabeledEmbeddingSet& data, GuardKind kind)
{
    return train_safeguard(data, kind, TrainConfig::defaults(kind));
}

// ---- ROC / AUC ----

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0.0;
};

// Threshold sweep over unique scores, descending; tied scores move both rates
// at once and so contribute a diagonal segment.
inline RocCurve roc_auc(const std::vector<double>& scores, const std::vector<bool>& labels)
{
    if (scores.size() != labels.size()) throw input_error("score and label counts differ");
    const auto P = std::size_t(std::count(labels.begin(), labels.end(), true));
    const std::size_t N = labels.size() - P;
    if (P == 0 || N == 0) throw input_error("undefined AUC: need both classes");
    for (double s : scores)
        if (std::isnan(s)) throw numeric_error("NaN score in roc_auc");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve c;
    c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::uint64_t tp = 0, fp = 0, area2 = 0; // area2 = 2 * P * N * auc, exact in integers
    std::size_t i = 0;
    while (i < order.size()) {
        const double thr = scores[order[i]];
        const std::uint64_t tp0 = tp, fp0 = fp;
        while (i < order.size() && scores[order[i]] == thr) {
            if (labels[order[i]]) ++tp;
            else ++fp;
            ++i;
        }
        area2 += (fp - fp0) * (tp + tp0);
        c.points.push_back({thr, double(fp) / double(N), double(tp) / double(P)});
    }
    c.auc = double(area2) / (2.0 * double(P) * double(N));
    return c;
}

inline RocCurve roc_auc(const Vec& scores, const std::vector<bool>& labels)
{
    return roc_auc(std::vector<double>(scores.begin(), scores.end()), labels);
}

inline double trapezoid_area(const RocCurve& c)
{
    double a = 0.0;
    for (std::size_t i = 1; i < c.points.size(); ++i)
        a += (c.points[i].fpr - c.points[i - 1].fpr) * (c.points[i].tpr + c.points[i - 1].tpr) / 2.0;
    return a;
}

// ---- paired-similarity detection ----

// Flags a text when it is close to any known harmful exemplar.
struct SimilarityDetector {
    Mat references; // unit rows

    double decision(const Vec& x) const
    {
        if (references.rows() == 0) throw input_error("similarity detector has no references");
        if (x.size() != references.cols()) throw consistency_error("detector/embedding dimension mismatch");
        return (references * x).maxCoeff();
    }
};

// ---- attack harness ----

enum class ApplyTo { harmful_only, all };

inline ApplyTo parse_apply_to(const std::string& s)
{
    if (s == "harmful" || s == "harmful_only") return ApplyTo::harmful_only;
    if (s == "all") return ApplyTo::all;
    throw input_error("unknown apply_to '" + s + "'");
}

struct AttackRecord {
    double auc_clean = 0.0;
    double auc_attacked = 0.0;
    RocCurve roc_clean;
    RocCurve roc_attacked;
};

using DecisionFn = std::function<double(const Vec&)>;

inline AttackRecord attack_eval(const DecisionFn& decide, const Backend& backend, const std::vector<LabeledText>& test,
                                const MagicWordCandidate& word, ApplyTo apply_to,
                                const EmbeddingTransform& transform = {}, unsigned threads = 1)
{
    if (test.empty()) throw input_error("empty test set");
    const std::size_t n = test.size();
    std::vector<double> clean(n), attacked(n);
    std::vector<bool> labels(n);
    const SuffixSpec suffix{word.tokens, word.best_r};
    const bool no_word = word.tokens.empty() || word.best_r == 0;
    parallel_for(n, threads, [&](std::size_t i) {
        const auto& t = test[i];
        if (!t.text.empty() && t.tokens.empty())
            throw input_error("raw-text corpus entries need a tokenizing backend");
        const Vec e = backend.embed(t.tokens);
        clean[i] = decide(transform.apply(e));
        const bool hit = !no_word && (apply_to == ApplyTo::all || t.harmful);
        attacked[i] = hit ? decide(transform.apply(backend.embed(t.tokens, &suffix))) : clean[i];
    });
    for (std::size_t i = 0; i < n; ++i) labels[i] = test[i].harmful;
    AttackRecord r;
    r.roc_clean = roc_auc(clean, labels);
    r.roc_attacked = roc_auc(attacked, labels);
    r.auc_clean = r.roc_clean.auc;
    r.auc_attacked = r.roc_attacked.auc;
    return r;
}

inline AttackRecord attack_eval(const SafeguardModel& guard, const Backend& backend,
                                const std::vector<LabeledText>& test, const MagicWordCandidate& word,
                                ApplyTo apply_to = ApplyTo::harmful_only, const EmbeddingTransform& transform = {},
                                unsigned threads = 1)
{
    if (guard.dim != backend.embed_dim())
        throw consistency_error("guard dimension " + std::to_string(guard.dim) + " differs from backend dimension " +
                                std::to_string(backend.embed_dim()));
    return attack_eval([&](const Vec& x) { return guard.decision(x); }, backend, test, word, apply_to, transform,
                       threads);
}

inline AttackRecord attack_eval(const SimilarityDetector& det, const Backend& backend,
                                const std::vector<LabeledText>& test, const MagicWordCandidate& word,
                                ApplyTo apply_to = ApplyTo::harmful_only, unsigned threads = 1)
{
    return attack_eval([&](const Vec& x) { return det.decision(x); }, backend, test, word, apply_to, {}, threads);
}

inline LabeledEmbeddingSet embed_labeled(const Backend& b, const std::vector<LabeledText>& data,
                                         const EmbeddingTransform& transform = {})
{
    LabeledEmbeddingSet s;
    s.X = Mat(Eigen::Index(data.size()), b.embed_dim());
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!data[i].text.empty() && data[i].tokens.empty())
            throw input_error("raw-text corpus entries need a tokenizing backend");
        s.X.row(Eigen::Index(i)) = transform.apply(b.embed(data[i].tokens)).transpose();
        s.labels.push_back(data[i].harmful);
    }
    return s;
}

inline void write_roc_csv(std::ostream& os, const std::string& variant, const RocCurve& c, bool header)
{
    if (header) os << "variant,threshold,fpr,tpr\n";
    for (const auto& p : c.points) {
        std::ostringstream line;
        line.precision(17);
        line << variant << ',' << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
        os << line.str();
    }
}

// ---- GRDM blob ----

inline constexpr std::uint32_t grdm_version = 1;

inline void save_guard(std::ostream& os, const SafeguardModel& g)
{
    bin::put_magic(os, "GRDM");
    bin::put<std::uint32_t>(os, grdm_version);
    bin::put<std::uint8_t>(os, std::uint8_t(g.kind));
    bin::put<std::uint32_t>(os, std::uint32_t(g.dim));
    const auto& c = g.train_config;
    bin::put<std::uint32_t>(os, std::uint32_t(c.epochs));
    bin::put<double>(os, c.lr);
    bin::put<double>(os, c.l2);
    bin::put<std::uint64_t>(os, c.seed);
    bin::put<std::uint32_t>(os, std::uint32_t(c.hidden1));
    bin::put<std::uint32_t>(os, std::uint32_t(c.hidden2));
    bin::put<double>(os, c.early_stop_tol);
    bin::put<std::uint64_t>(os, g.params.size());
    for (double p : g.params) bin::put<double>(os, p);
}

inline SafeguardModel load_guard(std::istream& is)
{
    bin::expect_magic(is, "GRDM");
    const auto version = bin::get<std::uint32_t>(is);
    if (version != grdm_version) throw input_error("unsupported GRDM version " + std::to_string(version));
    SafeguardModel g;
    const auto kind = bin::get<std::uint8_t>(is);
    if (kind > 2) throw input_error("unknown guard kind in GRDM blob");
    g.kind = GuardKind(kind);
    g.dim = int(bin::get<std::uint32_t>(is));
    auto& c = g.train_config;
    c.epochs = int(bin::get<std::uint32_t>(is));
    c.lr = bin::get<double>(is);
    c.l2 = bin::get<double>(is);
    c.seed = bin::get<std::uint64_t>(is);
    c.hidden1 = int(bin::get<std::uint32_t>(is));
    c.hidden2 = int(bin::get<std::uint32_t>(is));
    c.early_stop_tol = bin::get<double>(is);
    const auto n = bin::get<std::uint64_t>(is);
    const std::uint64_t expect = g.kind == GuardKind::mlp2
                                     ? std::uint64_t(c.hidden1) * (g.dim + 1) + std::uint64_t(c.hidden2) * (c.hidden1 + 2) + 1
                                     : std::uint64_t(g.dim) + 1;
    if (n != expect) throw input_error("GRDM parameter count mismatch");
    g.params.resize(n);
    for (auto& p : g.params) p = bin::get<double>(is);
    return g;
}

inline nlohmann::json to_json(const TrainConfig& c)
{
    return {{"epochs", c.epochs}, {"lr", c.lr},           {"l2", c.l2},
            {"seed", c.seed},     {"hidden1", c.hidden1}, {"hidden2", c.hidden2},
            {"early_stop_tol", c.early_stop_tol}};
}

} // namespace mw

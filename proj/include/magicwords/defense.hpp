#pragma once

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "geometry.hpp"
#include "io.hpp"

namespace mw {

enum class TransformKind { identity, renormalize, standardize };

inline std::string to_string(TransformKind k)
{
    switch (k) {
    case TransformKind::identity: return "identity";
    case TransformKind::renormalize: return "renormalize";
    case TransformKind::standardize: return "standardize";
    }
    return "?";
}

inline TransformKind parse_transform(const std::string& s)
{
    if (s == "identity" || s == "none") return TransformKind::identity;
    if (s == "renormalize" || s == "renorm") return TransformKind::renormalize;
    if (s == "standardize" || s == "std") return TransformKind::standardize;
    throw input_error("unknown transform '" + s + "'");
}

struct EmbeddingTransform {
    TransformKind kind = TransformKind::identity;
    Vec mean;  // e-bar
    Vec scale; // per-dimension std (standardize only)
    std::size_t fitted_on = 0;

    Vec apply(const Vec& e) const
    {
        if (kind == TransformKind::identity) return e;
        if (mean.size() == 0) throw input_error(to_string(kind) + " transform is not fitted");
        if (e.size() != mean.size())
            throw consistency_error("transform dimension " + std::to_string(mean.size()) +
                                    " differs from embedding dimension " + std::to_string(e.size()));
        Vec c = e - mean;
        if (kind == TransformKind::standardize) c = c.cwiseQuotient(scale);
        const double n = c.norm();
        if (!(n > 1e-12)) throw input_error("degenerate input: embedding within 1e-12 of the fitted mean");
        return c / n;
    }

    Mat apply_rows(const Mat& X) const
    {
        if (kind == TransformKind::identity) return X;
        Mat Y(X.rows(), X.cols());
        for (Eigen::Index i = 0; i < X.rows(); ++i) Y.row(i) = apply(X.row(i).transpose()).transpose();
        return Y;
    }
};

inline EmbeddingTransform fit_transform(TransformKind kind, const Mat& X)
{
    EmbeddingTransform t;
    t.kind = kind;
    if (kind == TransformKind::identity) return t;
    if (X.rows() < 2) throw input_error("fit_transform needs N >= 2");
    t.fitted_on = std::size_t(X.rows());
    t.mean = X.colwise().mean().transpose();
    if (kind == TransformKind::standardize) {
        const Mat C = X.rowwise() - t.mean.transpose();
        t.scale = (C.colwise().squaredNorm() / double(X.rows() - 1)).cwiseSqrt().transpose();
        for (Eigen::Index i = 0; i < t.scale.size(); ++i)
            if (!(t.scale[i] > 1e-12))
                throw input_error("zero-variance dimension " + std::to_string(i) + " under standardize");
    }
    return t;
}

inline nlohmann::json to_json(const EmbeddingTransform& t)
{
    nlohmann::json j{{"kind", to_string(t.kind)}, {"fitted_on", t.fitted_on}};
    j["mean"] = to_json(t.mean);
    j["scale"] = to_json(t.scale);
    if (t.kind == TransformKind::standardize) j["post"] = "l2-normalize";
    return j;
}

inline EmbeddingTransform transform_from_json(const nlohmann::json& j)
{
    EmbeddingTransform t;
    t.kind = parse_transform(j.at("kind").get<std::string>());
    t.fitted_on = j.value("fitted_on", std::size_t(0));
    if (j.contains("mean")) t.mean = vec_from_json(j["mean"]);
    if (j.contains("scale")) t.scale = vec_from_json(j["scale"]);
    if (t.kind != TransformKind::identity && t.mean.size() == 0)
        throw input_error(to_string(t.kind) + " transform needs fitted statistics");
    if (t.kind == TransformKind::standardize && t.scale.size() != t.mean.size())
        throw input_error("standardize transform needs a scale vector matching the mean");
    return t;
}

} // namespace mw

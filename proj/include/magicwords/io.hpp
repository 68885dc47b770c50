#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "geometry.hpp"

namespace mw {

using TokenId = std::int32_t;
using TextSeq = std::vector<TokenId>;

namespace bin {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T byteswap_if_big(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

template <class T>
void put(std::ostream& os, T v)
{
    v = byteswap_if_big(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw input_error("truncated binary stream");
    return byteswap_if_big(v);
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5])
{
    char m[4] = {};
    is.read(m, 4);
    if (!is || std::memcmp(m, magic, 4) != 0)
        throw input_error(std::string("bad magic: expected ") + magic);
}

// Row-major matrix payload.
inline void put_matrix(std::ostream& os, const Mat& M)
{
    for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j) put<double>(os, M(i, j));
}

inline Mat get_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols)
{
    Mat M(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = get<double>(is);
    return M;
}

inline void put_vector(std::ostream& os, const Vec& v)
{
    for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(os, v[i]);
}

inline Vec get_vector(std::istream& is, Eigen::Index n)
{
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = get<double>(is);
    return v;
}

} // namespace bin

inline std::ifstream open_in(const std::string& path, bool binary = false)
{
    std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
    if (!f) throw input_error("cannot open " + path);
    return f;
}

inline std::ofstream open_out(const std::string& path, bool binary = false)
{
    std::ofstream f(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!f) throw input_error("cannot write " + path);
    return f;
}

// ---- EMBS: "EMBS", u32 version, u32 N, u32 d, row-major f64 ----

inline constexpr std::uint32_t embs_version = 1;

inline void write_embs(std::ostream& os, const Mat& X)
{
    bin::put_magic(os, "EMBS");
    bin::put<std::uint32_t>(os, embs_version);
    bin::put<std::uint32_t>(os, std::uint32_t(X.rows()));
    bin::put<std::uint32_t>(os, std::uint32_t(X.cols()));
    bin::put_matrix(os, X);
}

inline Mat read_embs(std::istream& is)
{
    bin::expect_magic(is, "EMBS");
    const auto version = bin::get<std::uint32_t>(is);
    if (version != embs_version) throw input_error("unsupported EMBS version " + std::to_string(version));
    const auto n = bin::get<std::uint32_t>(is);
    const auto d = bin::get<std::uint32_t>(is);
    return bin::get_matrix(is, n, d);
}

inline void write_embs_file(const std::string& path, const Mat& X)
{
    auto f = open_out(path, true);
    write_embs(f, X);
}

inline Mat read_embs_file(const std::string& path)
{
    auto f = open_in(path, true);
    return read_embs(f);
}

// ---- JSONL embeddings: {"id": string, "embedding": [...]} ----

struct IdMatrix {
    std::vector<std::string> ids;
    Mat rows;
};

inline void write_embeddings_jsonl(std::ostream& os, const IdMatrix& m)
{
    for (Eigen::Index i = 0; i < m.rows.rows(); ++i) {
        nlohmann::json j;
        j["id"] = m.ids.at(std::size_t(i));
        std::vector<double> v(m.rows.row(i).begin(), m.rows.row(i).end());
        j["embedding"] = v;
        os << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict) << '\n';
    }
}

template <class LineFn>
void for_each_jsonl(std::istream& is, LineFn&& fn)
{
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw input_error("line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            fn(j, lineno);
        } catch (const nlohmann::json::exception& e) {
            throw input_error("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline IdMatrix read_embeddings_jsonl(std::istream& is)
{
    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    for_each_jsonl(is, [&](const nlohmann::json& j, std::size_t lineno) {
        auto v = j.at("embedding").get<std::vector<double>>();
        if (!rows.empty() && v.size() != rows.front().size())
            throw input_error("line " + std::to_string(lineno) + ": embedding dimension " +
                              std::to_string(v.size()) + " differs from " +
                              std::to_string(rows.front().size()));
        ids.push_back(j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump())
                                       : std::to_string(rows.size()));
        rows.push_back(std::move(v));
    });
    IdMatrix m;
    m.ids = std::move(ids);
    m.rows = Mat(Eigen::Index(rows.size()), rows.empty() ? 0 : Eigen::Index(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t k = 0; k < rows[i].size(); ++k) m.rows(Eigen::Index(i), Eigen::Index(k)) = rows[i][k];
    return m;
}

// ---- vocabulary JSONL: {"token": string, "id": int} ----

struct Vocabulary {
    std::vector<std::string> tokens; // indexed by id

    std::string at(TokenId id) const
    {
        if (id >= 0 && std::size_t(id) < tokens.size() && !tokens[std::size_t(id)].empty())
            return tokens[std::size_t(id)];
        return "#" + std::to_string(id);
    }

    TokenId find(const std::string& tok) const
    {
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens[i] == tok) return TokenId(i);
        throw input_error("unknown token '" + tok + "'");
    }
};

inline Vocabulary read_vocabulary_jsonl(std::istream& is)
{
    Vocabulary v;
    for_each_jsonl(is, [&](const nlohmann::json& j, std::size_t lineno) {
        const auto id = j.at("id").get<std::int64_t>();
        if (id < 0) throw input_error("line " + std::to_string(lineno) + ": negative token id");
        if (std::size_t(id) >= v.tokens.size()) v.tokens.resize(std::size_t(id) + 1);
        v.tokens[std::size_t(id)] = j.at("token").get<std::string>();
    });
    return v;
}

inline void write_vocabulary_jsonl(std::ostream& os, const Vocabulary& v)
{
    for (std::size_t i = 0; i < v.tokens.size(); ++i)
        os << nlohmann::json{{"token", v.tokens[i]}, {"id", i}}.dump() << '\n';
}

// ---- labeled corpus JSONL: {"tokens": [...] | "text": string, "label": 0|1} ----

struct LabeledText {
    TextSeq tokens;
    std::string text; // set when the line carried raw text instead of ids
    bool harmful = false;
};

inline std::vector<LabeledText> read_labeled_jsonl(std::istream& is)
{
    std::vector<LabeledText> out;
    for_each_jsonl(is, [&](const nlohmann::json& j, std::size_t lineno) {
        LabeledText t;
        if (j.contains("tokens")) t.tokens = j["tokens"].get<TextSeq>();
        else if (j.contains("text")) t.text = j["text"].get<std::string>();
        else throw input_error("line " + std::to_string(lineno) + ": need \"tokens\" or \"text\"");
        const auto label = j.at("label").get<int>();
        if (label != 0 && label != 1)
            throw input_error("line " + std::to_string(lineno) + ": label must be 0 or 1");
        t.harmful = label == 1;
        out.push_back(std::move(t));
    });
    return out;
}

// Same line format with an optional label (defaults to 0).
inline std::vector<LabeledText> read_corpus_jsonl(std::istream& is)
{
    std::vector<LabeledText> out;
    for_each_jsonl(is, [&](const nlohmann::json& j, std::size_t lineno) {
        LabeledText t;
        if (j.contains("tokens")) t.tokens = j["tokens"].get<TextSeq>();
        else if (j.contains("text")) t.text = j["text"].get<std::string>();
        else throw input_error("line " + std::to_string(lineno) + ": need \"tokens\" or \"text\"");
        t.harmful = j.value("label", 0) == 1;
        out.push_back(std::move(t));
    });
    return out;
}

inline void write_labeled_jsonl(std::ostream& os, const std::vector<LabeledText>& data)
{
    for (const auto& t : data) {
        nlohmann::json j;
        if (t.text.empty()) j["tokens"] = t.tokens;
        else j["text"] = t.text;
        j["label"] = t.harmful ? 1 : 0;
        os << j.dump() << '\n';
    }
}

// ---- base64 (RFC 4648, padded) ----

inline std::string base64_encode(const std::string& in)
{
    static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8) | std::uint8_t(in[i + 2]);
        out += tbl[v >> 18];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += tbl[v & 63];
    }
    if (i + 1 == in.size()) {
        const std::uint32_t v = std::uint8_t(in[i]) << 16;
        out += tbl[v >> 18];
        out += tbl[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == in.size()) {
        const std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8);
        out += tbl[v >> 18];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

inline std::string base64_decode(const std::string& in)
{
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (in.size() % 4 != 0) throw input_error("base64 length is not a multiple of 4");
    std::string out;
    out.reserve(in.size() / 4 * 3);
    for (std::size_t i = 0; i < in.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = in[i + std::size_t(k)];
            if (c == '=' && i + 4 == in.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else if (pad > 0 || (v[k] = val(c)) < 0) {
                throw input_error("invalid base64 input");
            }
        }
        const std::uint32_t x = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) | (std::uint32_t(v[2]) << 6) |
                                std::uint32_t(v[3]);
        out += char((x >> 16) & 0xFF);
        if (pad < 2) out += char((x >> 8) & 0xFF);
        if (pad < 1) out += char(x & 0xFF);
    }
    return out;
}

// Little-endian packed reals with a declared dtype ("f32" or "f64").
inline std::string pack_reals(const double* data, std::size_t n, const std::string& dtype)
{
    std::ostringstream os;
    for (std::size_t i = 0; i < n; ++i) {
        if (dtype == "f32") bin::put<float>(os, float(data[i]));
        else if (dtype == "f64") bin::put<double>(os, data[i]);
        else throw input_error("unsupported dtype '" + dtype + "'");
    }
    return os.str();
}

inline std::vector<double> unpack_reals(const std::string& bytes, const std::string& dtype)
{
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) throw input_error("unsupported dtype '" + dtype + "'");
    if (bytes.size() % width != 0) throw input_error("payload size is not a multiple of the dtype width");
    std::istringstream is(bytes);
    std::vector<double> out(bytes.size() / width);
    for (auto& v : out) v = width == 4 ? double(bin::get<float>(is)) : bin::get<double>(is);
    return out;
}

inline nlohmann::json to_json(const Vec& v) { return std::vector<double>(v.begin(), v.end()); }

inline Vec vec_from_json(const nlohmann::json& j)
{
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vec>(v.data(), Eigen::Index(v.size()));
}

} // namespace mw

#pragma once

#include <cerrno>
#include <csignal>
#include <cstring>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "model.hpp"

// Client for an out-of-process embedding server speaking one JSON object per line.
//
//   request:  {"id": n, "op": "...", "payload": {...}}
//   response: {"id": n, "ok": true, "result": {...}}
//             {"id": n, "ok": false, "error": {"kind": "...", "message": "..."}}
//
// Real arrays travel as {"dtype": "f32"|"f64", "shape": [...], "data": base64}, row-major
// little-endian. The token table arrives in EMBS chunks (base64 of an EMBS blob).

namespace mw {

inline constexpr int bridge_protocol_version = 1;

namespace bridge {

inline nlohmann::json pack(const double* p, std::size_t n, std::vector<std::size_t> shape,
                           const std::string& dtype = "f64")
{
    return {{"dtype", dtype}, {"shape", shape}, {"data", base64_encode(pack_reals(p, n, dtype))}};
}

inline nlohmann::json pack(const Vec& v, const std::string& dtype = "f64")
{
    return pack(v.data(), std::size_t(v.size()), {std::size_t(v.size())}, dtype);
}

// h x m matrix, row-major on the wire.
inline nlohmann::json pack(const Mat& M, const std::string& dtype = "f64")
{
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> R = M;
    return pack(R.data(), std::size_t(R.size()), {std::size_t(M.rows()), std::size_t(M.cols())}, dtype);
}

inline Mat unpack(const nlohmann::json& j)
{
    if (!j.is_object() || !j.contains("dtype") || !j.contains("data") || !j.contains("shape"))
        throw consistency_error("bridge: malformed array payload");
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    const auto vals = unpack_reals(base64_decode(j.at("data").get<std::string>()), j.at("dtype").get<std::string>());
    std::size_t rows = 1, cols = 1;
    if (shape.size() == 1) rows = shape[0];
    else if (shape.size() == 2) rows = shape[0], cols = shape[1];
    else throw consistency_error("bridge: arrays must be 1-D or 2-D");
    if (rows * cols != vals.size()) throw consistency_error("bridge: array shape does not match payload length");
    Mat M(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t k = 0; k < cols; ++k) M(Eigen::Index(i), Eigen::Index(k)) = vals[i * cols + k];
    return M;
}

inline Vec unpack_vec(const nlohmann::json& j)
{
    const Mat M = unpack(j);
    if (M.cols() != 1) throw consistency_error("bridge: expected a vector");
    return M.col(0);
}

inline nlohmann::json ok(const nlohmann::json& id, nlohmann::json result)
{
    return {{"id", id}, {"ok", true}, {"result", std::move(result)}};
}

inline nlohmann::json fail(const nlohmann::json& id, const std::string& kind, const std::string& msg)
{
    return {{"id", id}, {"ok", false}, {"error", {{"kind", kind}, {"message", msg}}}};
}

inline std::string kind_name(ErrorKind k)
{
    switch (k) {
    case ErrorKind::input: return "input";
    case ErrorKind::capability: return "capability";
    case ErrorKind::consistency: return "consistency";
    case ErrorKind::numeric: return "numeric";
    }
    return "input";
}

inline Error error_from(const nlohmann::json& e)
{
    const std::string kind = e.value("kind", "input");
    const std::string msg = "bridge: " + e.value("message", std::string("unspecified error"));
    if (kind == "capability" || kind == "unknown_op") return capability_error(msg);
    if (kind == "consistency") return consistency_error(msg);
    if (kind == "numeric") return numeric_error(msg);
    return input_error(msg);
}

// Server-side dispatch for any in-process backend. Used by the test fixture server.
inline nlohmann::json serve_one(const Backend& b, const nlohmann::json& req, const std::string& dtype,
                                const std::string& model_name)
{
    const nlohmann::json id = req.contains("id") ? req.at("id") : nlohmann::json();
    try {
        const std::string op = req.at("op").get<std::string>();
        const nlohmann::json payload = req.value("payload", nlohmann::json::object());
        auto text_of = [&](const nlohmann::json& j) {
            const auto t = j.get<TextSeq>();
            if (t.empty()) throw input_error("empty text");
            b.check_tokens(t);
            return t;
        };
        if (op == "info") {
            return ok(id, {{"protocol", bridge_protocol_version},
                           {"model", model_name},
                           {"model_hash", b.name()},
                           {"T", b.vocab_size()},
                           {"h", b.token_dim()},
                           {"d", b.embed_dim()},
                           {"max_length", b.max_length()},
                           {"differentiable", b.differentiable()},
                           {"token_table", b.has_token_table()},
                           {"pooling", "mean, no padding positions"},
                           {"dtype", dtype}});
        }
        if (op == "tokenize") {
            const TextSeq t = b.tokenize(payload.at("text").get<std::string>());
            return ok(id, {{"tokens", t}});
        }
        if (op == "embed") {
            const TextSeq t = text_of(payload.at("tokens"));
            std::optional<SuffixSpec> s;
            if (payload.contains("suffix")) {
                s = SuffixSpec{payload.at("suffix").at("tokens").get<std::vector<TokenId>>(),
                               payload.at("suffix").value("repeat", 1)};
                b.check_tokens(s->tokens);
            }
            return ok(id, {{"embedding", pack(b.embed(t, s ? &*s : nullptr), dtype)}});
        }
        if (op == "embed_batch") {
            std::vector<TextSeq> texts;
            for (const auto& j : payload.at("texts")) texts.push_back(text_of(j));
            return ok(id, {{"embeddings", pack(Mat(embed_all(b, texts)), dtype)}});
        }
        if (op == "token_embeddings") {
            const Mat& E = b.token_table();
            const auto off = payload.value("offset", std::size_t(0));
            const auto cnt = std::min(payload.value("count", std::size_t(E.rows())), std::size_t(E.rows()) - std::min(off, std::size_t(E.rows())));
            std::ostringstream os;
            write_embs(os, E.middleRows(Eigen::Index(off), Eigen::Index(cnt)));
            return ok(id, {{"offset", off}, {"count", cnt}, {"total", E.rows()}, {"embs", base64_encode(os.str())}});
        }
        if (op == "suffix_vjp") {
            const TextSeq t = text_of(payload.at("tokens"));
            const Mat S = unpack(payload.at("suffix_values"));
            const Vec dir = unpack_vec(payload.at("direction"));
            return ok(id, {{"vjp", pack(b.suffix_vjp(t, S, dir), dtype)}});
        }
        return fail(id, "unknown_op", "unknown op '" + op + "'");
    } catch (const Error& e) {
        return fail(id, kind_name(e.kind()), e.what());
    } catch (const std::exception& e) {
        return fail(id, "input", e.what());
    }
}

} // namespace bridge

// Backend served by a child process (`/bin/sh -c command`) over stdin/stdout.
// One request in flight at a time; calls from several threads are serialized.
class BridgeBackend : public Backend {
public:
    explicit BridgeBackend(const std::string& command) : command_(command)
    {
        std::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2];
        if (pipe(to_child) != 0 || pipe(from_child) != 0)
            throw input_error(std::string("bridge: pipe failed: ") + std::strerror(errno));
        pid_ = fork();
        if (pid_ < 0) throw input_error(std::string("bridge: fork failed: ") + std::strerror(errno));
        if (pid_ == 0) {
            dup2(to_child[0], 0);
            dup2(from_child[1], 1);
            close(to_child[0]);
            close(to_child[1]);
            close(from_child[0]);
            close(from_child[1]);
            execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
            _exit(127);
        }
        close(to_child[0]);
        close(from_child[1]);
        out_fd_ = to_child[1];
        in_fd_ = from_child[0];
        fcntl(out_fd_, F_SETFD, FD_CLOEXEC);
        fcntl(in_fd_, F_SETFD, FD_CLOEXEC);

        info_ = call("info", nlohmann::json::object());
        if (info_.value("protocol", 0) != bridge_protocol_version)
            throw consistency_error("bridge: protocol version mismatch (server " +
                                    std::to_string(info_.value("protocol", 0)) + ", client " +
                                    std::to_string(bridge_protocol_version) + ")");
        T_ = info_.at("T").get<std::size_t>();
        h_ = info_.at("h").get<int>();
        d_ = info_.at("d").get<int>();
        max_len_ = info_.value("max_length", std::size_t(256));
        diff_ = info_.value("differentiable", false);
        table_ = info_.value("token_table", false);
    }

    BridgeBackend(const BridgeBackend&) = delete;
    BridgeBackend& operator=(const BridgeBackend&) = delete;

    ~BridgeBackend() override
    {
        if (out_fd_ >= 0) close(out_fd_);
        if (in_fd_ >= 0) close(in_fd_);
        if (pid_ > 0) {
            int st = 0;
            waitpid(pid_, &st, 0);
        }
    }

    std::string name() const override { return "bridge:" + info_.value("model", std::string("?")); }
    std::size_t vocab_size() const override { return T_; }
    int token_dim() const override { return h_; }
    int embed_dim() const override { return d_; }
    std::size_t max_length() const override { return max_len_; }
    bool differentiable() const override { return diff_; }
    bool has_token_table() const override { return table_; }
    const nlohmann::json& info() const { return info_; }

    TextSeq tokenize(const std::string& text) const override
    {
        return call("tokenize", {{"text", text}}).at("tokens").get<TextSeq>();
    }

    Vec embed(const TextSeq& text, const SuffixSpec* suffix = nullptr) const override
    {
        check_tokens(text);
        nlohmann::json p{{"tokens", text}};
        if (suffix && suffix->repeat > 0 && !suffix->tokens.empty()) {
            check_tokens(suffix->tokens);
            p["suffix"] = {{"tokens", suffix->tokens}, {"repeat", suffix->repeat}};
        }
        return checked(bridge::unpack_vec(call("embed", p).at("embedding")));
    }

    Mat embed_batch(const std::vector<TextSeq>& texts) const
    {
        for (const auto& t : texts) check_tokens(t);
        const Mat X = bridge::unpack(call("embed_batch", {{"texts", texts}}).at("embeddings"));
        if (std::size_t(X.rows()) != texts.size() || X.cols() != d_)
            throw consistency_error("bridge: embed_batch returned the wrong shape");
        return X;
    }

    const Mat& token_table() const override
    {
        if (!table_) return Backend::token_table();
        std::call_once(table_once_, [&] {
            Mat E(Eigen::Index(T_), h_);
            std::size_t off = 0;
            while (off < T_) {
                const auto r = call("token_embeddings", {{"offset", off}, {"count", chunk_rows}});
                std::istringstream is(base64_decode(r.at("embs").get<std::string>()));
                const Mat C = read_embs(is);
                if (C.rows() == 0 || C.cols() != h_ || off + std::size_t(C.rows()) > T_)
                    throw consistency_error("bridge: token_embeddings chunk has the wrong shape");
                E.middleRows(Eigen::Index(off), C.rows()) = C;
                off += std::size_t(C.rows());
            }
            E_ = std::move(E);
        });
        return E_;
    }

    Mat suffix_vjp(const TextSeq& text, const Mat& suffix_values, const Vec& direction) const override
    {
        if (!diff_) return Backend::suffix_vjp(text, suffix_values, direction);
        if (suffix_values.cols() == 0) return Mat(h_, 0);
        check_tokens(text);
        if (suffix_values.rows() != h_ || direction.size() != d_)
            throw consistency_error("bridge: suffix_vjp argument dimensions do not match the served model");
        const Mat G = bridge::unpack(call("suffix_vjp", {{"tokens", text},
                                                         {"suffix_values", bridge::pack(suffix_values)},
                                                         {"direction", bridge::pack(direction)}})
                                         .at("vjp"));
        if (G.rows() != h_ || G.cols() != suffix_values.cols())
            throw consistency_error("bridge: suffix_vjp returned the wrong shape");
        if (!G.allFinite()) throw numeric_error("bridge: NaN in suffix_vjp result");
        return G;
    }

    std::string token_string(TokenId id) const override { return "#" + std::to_string(id); }

    static constexpr std::size_t chunk_rows = 4096;

private:
    Vec checked(Vec e) const
    {
        if (e.size() != d_)
            throw consistency_error("bridge: embedding of length " + std::to_string(e.size()) +
                                    " from a model with d = " + std::to_string(d_));
        return e;
    }

    nlohmann::json call(const std::string& op, const nlohmann::json& payload) const
    {
        std::lock_guard<std::mutex> lock(mu_);
        const std::int64_t id = next_id_++;
        const std::string line = nlohmann::json{{"id", id}, {"op", op}, {"payload", payload}}.dump() + "\n";
        for (std::size_t done = 0; done < line.size();) {
            const ssize_t w = write(out_fd_, line.data() + done, line.size() - done);
            if (w < 0 && errno == EINTR) continue;
            if (w <= 0) throw input_error("bridge: server closed its input (" + command_ + ")");
            done += std::size_t(w);
        }
        const std::string resp = read_line();
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(resp);
        } catch (const nlohmann::json::exception&) {
            throw consistency_error("bridge: response is not JSON: " + resp.substr(0, 80));
        }
        if (!j.contains("id") || j.at("id") != id)
            throw consistency_error("bridge: response id does not echo request id " + std::to_string(id));
        if (!j.value("ok", false)) throw bridge::error_from(j.value("error", nlohmann::json::object()));
        return j.at("result");
    }

    std::string read_line() const
    {
        for (;;) {
            const auto nl = buf_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buf_.substr(0, nl);
                buf_.erase(0, nl + 1);
                return line;
            }
            char tmp[65536];
            const ssize_t n = read(in_fd_, tmp, sizeof tmp);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) throw input_error("bridge: server closed the connection (" + command_ + ")");
            buf_.append(tmp, std::size_t(n));
        }
    }

    std::string command_;
    pid_t pid_ = -1;
    int out_fd_ = -1, in_fd_ = -1;
    nlohmann::json info_;
    std::size_t T_ = 0, max_len_ = 256;
    int h_ = 0, d_ = 0;
    bool diff_ = false, table_ = false;
    mutable std::mutex mu_;
    mutable std::int64_t next_id_ = 1;
    mutable std::string buf_;
    mutable std::once_flag table_once_;
    mutable Mat E_;
};

} // namespace mw

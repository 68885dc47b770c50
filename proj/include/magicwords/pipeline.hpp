#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bridge.hpp"
#include "corpus.hpp"
#include "defense.hpp"
#include "model.hpp"
#include "safeguard.hpp"
#include "search.hpp"

// Glue shared by the CLI and the acceptance runner: backend construction,
// corpus resolution and the planted-word safeguard experiment.

namespace mw {

struct BackendSpec {
    std::string kind = "reference"; // reference | file | bridge
    std::string model_file;         // RMDL blob (reference)
    std::string embeddings;         // .embs or .jsonl (file)
    std::string vocab;              // vocabulary JSONL (file)
    std::string bridge_cmd;         // shell command (bridge)
    ReferenceConfig ref;
};

inline std::unique_ptr<Backend> make_backend(const BackendSpec& s)
{
    if (s.kind == "reference") {
        if (!s.model_file.empty()) {
            auto f = open_in(s.model_file, true);
            return load_reference_model(f);
        }
        return build_reference_model(s.ref);
    }
    if (s.kind == "file") {
        if (s.embeddings.empty()) throw input_error("file backend needs an embeddings path");
        Vocabulary v;
        if (!s.vocab.empty()) {
            auto f = open_in(s.vocab);
            v = read_vocabulary_jsonl(f);
        }
        const bool jsonl = s.embeddings.size() >= 6 && s.embeddings.substr(s.embeddings.size() - 6) == ".jsonl";
        return std::make_unique<FileBackend>(jsonl ? FileBackend::from_jsonl(s.embeddings, std::move(v))
                                                   : FileBackend::from_embs(s.embeddings, std::move(v)));
    }
    if (s.kind == "bridge") {
        if (s.bridge_cmd.empty()) throw input_error("bridge backend needs a command");
        return std::make_unique<BridgeBackend>(s.bridge_cmd);
    }
    throw input_error("unknown backend '" + s.kind + "' (expected reference, file or bridge)");
}

// Tokens the synthetic corpora draw from; the planted token is held out.
inline int corpus_vocab(const Backend& b)
{
    if (auto* r = dynamic_cast<const ReferenceModel*>(&b)) return r->corpus_vocab();
    return int(b.vocab_size());
}

inline void resolve_tokens(const Backend& b, std::vector<LabeledText>& data)
{
    for (auto& t : data) {
        if (t.tokens.empty() && !t.text.empty()) t.tokens = b.tokenize(t.text);
        if (t.tokens.empty()) throw input_error("corpus entry with no tokens");
        b.check_tokens(t.tokens);
    }
}

inline std::vector<TextSeq> tokens_of(const std::vector<LabeledText>& data)
{
    std::vector<TextSeq> out;
    for (const auto& t : data) out.push_back(t.tokens);
    return out;
}

// Paraphrase-style pairs for scoring, seeded from the run seed.
inline PairedCorpus scoring_pairs(const Backend& b, std::size_t n_pairs, double perturb, std::uint64_t seed)
{
    CorpusSpec cs;
    cs.vocab_limit = corpus_vocab(b);
    return generate_corpus(b, n_pairs, perturb, derive_seed(seed, "pairs"), cs);
}

// Clean generic texts the defender fits transforms on.
inline std::vector<TextSeq> defense_fit_texts(const Backend& b, std::size_t n, std::uint64_t seed)
{
    return random_texts(n, corpus_vocab(b), 8, 24, derive_seed(seed, "defense"));
}

struct AttackExperiment {
    SafeguardTaskSpec task;
    std::size_t n_pairs = 200;
    double perturb = 0.1;
    std::size_t n_fit = 1000;
    ApplyTo apply_to = ApplyTo::harmful_only;
    unsigned threads = 1;
};

struct AttackRow {
    GuardKind guard = GuardKind::logistic;
    TransformKind transform = TransformKind::identity;
    TrainConfig train;
    AttackRecord record;
};

// Train one guard per (kind, transform) on the clean training split and attack the test split.
inline std::vector<AttackRow> run_attack(const Backend& b, const SafeguardTask& task, const MagicWordCandidate& word,
                                         const std::vector<GuardKind>& guards,
                                         const std::vector<EmbeddingTransform>& transforms, ApplyTo apply_to,
                                         unsigned threads = 1, std::uint64_t seed = 0)
{
    std::vector<AttackRow> rows;
    for (const auto& tf : transforms) {
        const auto train = embed_labeled(b, task.train, tf);
        for (GuardKind g : guards) {
            AttackRow row;
            row.guard = g;
            row.transform = tf.kind;
            row.train = TrainConfig::defaults(g);
            row.train.seed = derive_seed(seed, "guard-" + to_string(g));
            const auto model = train_safeguard(train, g, row.train);
            row.record = attack_eval(model, b, task.test, word, apply_to, tf, threads);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// The positive-mode candidate for a fixed word, scored on the run's pairs.
inline MagicWordCandidate score_word(const Backend& b, const std::vector<TokenId>& w, Mode mode,
                                     const PairedCorpus& pc, const ScoreConfig& base = {})
{
    ScoreConfig cfg = base;
    cfg.mode = mode;
    if (mode == Mode::negative) return Scorer::negative(b, pc, cfg).candidate(w);
    const Vec es = estimate_bias(embed_all(b, pc.firsts())).e_star;
    return mode == Mode::positive ? Scorer::positive(b, pc.firsts(), es, cfg).candidate(w)
                                  : Scorer::southern(b, pc.firsts(), es, cfg).candidate(w);
}

} // namespace mw

#pragma once

#include <cstdint>
#include <string>

#include <magicwords/pipeline.hpp>

namespace cli {

struct Global {
    std::uint64_t seed = 1;
    unsigned threads = 1;
    std::string out = "mw-out";
    mw::BackendSpec backend;
    bool no_plant = false;
    std::string resolved_config; // echoed next to every result
};

struct BiasOpts {
    std::string corpus;
    std::size_t n_texts = 1000;
    int power_iters = 500;
    double tol = 1e-12;
    int bins = 40;
};

struct SearchOpts {
    std::string alg = "brute";
    std::string mode = "pos";
    std::size_t k = 32;
    std::size_t k0 = 1;
    int m = 1;
    std::size_t cap = 1024;
    int r_max = 16;
    std::size_t n_pairs = 200;
    double perturb = 0.1;
    std::string pairs;
    std::string report = "both";
    bool share_init = false;
    double init_scale = -1.0;
};

struct AttackOpts {
    std::string word;       // token ids; empty string = identity word
    std::string words_file; // search.json from `search`
    std::string mode = "pos";
    int repeat = 0;         // 0: use the word's best_r on the run's pairs
    std::string guards = "logistic,mlp2";
    std::string load_guard;
    bool save_guards = false;
    std::string defense = "none";
    std::string apply_to = "harmful";
    std::string train, test, fit_corpus;
    int hot_size = 32;
    double hot_prob = 0.9;
    std::size_t n_train = 300, n_test = 300, n_fit = 1000, n_pairs = 200;
    double perturb = 0.1;
};

struct RandmatOpts {
    std::string check = "sweep";
    int n = 1000;
    int m = 768;
    std::string u_norms = "0,0.25,0.5,1,2,4";
    int trials = 100000;
    int row_m = 768;
};

struct ModelInfoOpts {
    std::string save;
};

struct CorpusGenOpts {
    std::string kind = "pairs";
    std::size_t n_pairs = 200;
    double perturb = 0.1;
    int hot_size = 32;
    double hot_prob = 0.9;
    std::size_t n_train = 300, n_test = 300;
};

int cmd_bias(const Global& g, const BiasOpts& o);
int cmd_search(const Global& g, const SearchOpts& o);
int cmd_attack(const Global& g, const AttackOpts& o, bool defend);
int cmd_randmat(const Global& g, const RandmatOpts& o);
int cmd_model_info(const Global& g, const ModelInfoOpts& o);
int cmd_corpus_gen(const Global& g, const CorpusGenOpts& o);

} // namespace cli

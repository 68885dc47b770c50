// Test fixture server: the reference model behind the line protocol on stdin/stdout.
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include <magicwords/bridge.hpp>

int main(int argc, char** argv)
{
    CLI::App app{"reference-model bridge fixture"};
    mw::ReferenceConfig cfg;
    std::string dtype = "f64";
    int fail_after = -1;
    bool bad_id = false;
    bool garbage = false;
    app.add_option("--seed", cfg.seed);
    app.add_option("--bias-strength", cfg.bias_strength);
    app.add_option("--vocab-size", cfg.T);
    app.add_option("--dtype", dtype);
    app.add_option("--fail-after", fail_after, "exit without answering after this many requests");
    app.add_flag("--bad-id", bad_id, "answer with a wrong id");
    app.add_flag("--garbage", garbage, "answer with a non-JSON line");
    CLI11_PARSE(app, argc, argv);

    const mw::ReferenceModel model(cfg);
    std::ios::sync_with_stdio(false);
    std::string line;
    for (int served = 0; std::getline(std::cin, line); ++served) {
        if (fail_after >= 0 && served >= fail_after) return 1;
        if (garbage) {
            std::cout << "not json" << std::endl;
            continue;
        }
        nlohmann::json resp;
        try {
            resp = mw::bridge::serve_one(model, nlohmann::json::parse(line), dtype, "reference-fixture");
        } catch (const nlohmann::json::exception& e) {
            resp = mw::bridge::fail(nullptr, "input", std::string("bad request: ") + e.what());
        }
        if (bad_id && resp.contains("id") && resp["id"].is_number()) resp["id"] = resp["id"].get<long long>() + 1000;
        std::cout << resp.dump() << std::endl;
    }
    return 0;
}

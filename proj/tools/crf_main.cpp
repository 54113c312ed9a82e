#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "crf/cli.hpp"

namespace {

/// Merges an optional config file with --key=value overrides.
crf::cli::RunConfig gather(const std::string& config_path, const std::vector<std::string>& extras) {
    crf::io::KeyValues kv;
    if (!config_path.empty()) kv = crf::io::read_key_values(config_path);
    crf::io::apply_overrides(kv, extras);
    return crf::cli::config_from(kv);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Chern-Ricci flow simulator"};
    app.require_subcommand(1);

    std::string config_path;
    auto add = [&](const char* name, const char* help) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", config_path, "key = value configuration file");
        sub->allow_extras();
        return sub;
    };
    auto* run = add("run", "integrate the flow and evaluate every estimate");
    auto* verify = add("verify", "re-check the estimates on a stored run (pass --output_dir=DIR)");
    auto* ke = add("ke", "solve for the Einstein potential directly");
    auto* self = add("selftest", "quick deterministic pass/fail table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : crf::cli::config_error;
    }

    for (auto* sub : {run, verify, ke, self}) {
        if (!sub->parsed()) continue;
        const auto extras = sub->remaining();
        crf::cli::RunConfig cfg;
        const int rc = crf::cli::guarded([&] {
            cfg = gather(config_path, extras);
            return 0;
        });
        if (rc != 0) return rc;
        if (sub == run) return crf::cli::cmd_run(cfg);
        if (sub == verify) return crf::cli::cmd_verify(cfg);
        if (sub == ke) return crf::cli::cmd_ke(cfg);
        return crf::cli::cmd_selftest(cfg.seed);
    }
    return crf::cli::config_error;
}

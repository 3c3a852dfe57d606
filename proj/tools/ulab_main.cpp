// ulab: generate synthetic QA worlds, memorize them with a micro transformer,
// unlearn with baseline or localized methods, and score the result.

#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "ulab/errors.hpp"
#include "ulab/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitConvergence = 3;
constexpr int kExitNumeric = 4;

struct SubcommandState {
    std::string config_file;
    std::map<std::string, std::string> overrides;
};

void attach_options(CLI::App* sub, SubcommandState& state) {
    sub->add_option("--config", state.config_file, "key=value configuration file");
    for (const auto& spec : ulab::pipeline::config_keys()) {
        const std::string flag = "--" + spec.name;
        sub->add_option_function<std::string>(
            flag,
            [&state, name = spec.name](const std::string& value) {
                state.overrides[name] = value;
            },
            spec.help);
    }
}

ulab::pipeline::RunConfig resolve(const SubcommandState& state) {
    ulab::pipeline::RunConfig cfg;
    if (!state.config_file.empty()) ulab::pipeline::load_config_file(cfg, state.config_file);
    for (const auto& [key, value] : state.overrides) ulab::pipeline::apply_key(cfg, key, value);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale unlearning laboratory"};
    app.require_subcommand(1);

    std::map<std::string, SubcommandState> states;
    std::map<std::string, CLI::App*> subs;
    const std::pair<const char*, const char*> commands[] = {
        {"gen", "synthesize a knowledge world and QA dataset"},
        {"train", "train the micro model to memorize a dataset"},
        {"unlearn", "run an unlearning method, then evaluate it"},
        {"eval", "evaluate a checkpoint against a dataset"},
        {"sweep", "fan out unlearn runs over one key and many seeds"},
    };
    for (const auto& [name, help] : commands) {
        subs[name] = app.add_subcommand(name, help);
        attach_options(subs[name], states[name]);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto& [name, sub] : subs) {
            if (!sub->parsed()) continue;
            const auto cfg = resolve(states[name]);
            nlohmann::json summary;
            if (name == "gen") summary = ulab::pipeline::cmd_gen(cfg);
            else if (name == "train") summary = ulab::pipeline::cmd_train(cfg);
            else if (name == "unlearn") summary = ulab::pipeline::cmd_unlearn_eval(cfg);
            else if (name == "eval") summary = ulab::pipeline::cmd_eval(cfg);
            else summary = ulab::pipeline::cmd_sweep(cfg);
            std::cout << summary.dump(2) << "\n";
        }
        return kExitOk;
    } catch (const ulab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ulab::ConvergenceError& e) {
        std::cerr << "convergence failure: " << e.what() << "\n";
        return kExitConvergence;
    } catch (const ulab::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

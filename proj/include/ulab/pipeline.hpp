#pragma once

// Command implementations shared by the CLI and the python module: world
// generation, memorization training, unlearn-and-evaluate, standalone
// evaluation, and hyperparameter sweeps. Every command writes a manifest
// sufficient to re-run it and returns a machine-readable summary.

#include <json.hpp>

#include "ulab/config.hpp"

namespace ulab::pipeline {

nlohmann::json cmd_gen(const RunConfig& cfg);
nlohmann::json cmd_train(const RunConfig& cfg);
nlohmann::json cmd_unlearn_eval(const RunConfig& cfg);
nlohmann::json cmd_eval(const RunConfig& cfg);
nlohmann::json cmd_sweep(const RunConfig& cfg);

}  // namespace ulab::pipeline

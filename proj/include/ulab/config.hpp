#pragma once

// Flat key=value run configuration. One struct carries every tunable of the
// generator, model, trainer, and unlearning methods; a registry maps key
// names to typed fields so config files, command-line flags, and the python
// surface all share one parser and one unknown-key policy.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ulab/errors.hpp"
#include "ulab/losses.hpp"
#include "ulab/worldgen.hpp"

namespace ulab::pipeline {

struct RunConfig {
    // root seed; every component derives its own named stream from it
    uint64_t seed = 1;
    std::string precision = "f32";  // f32 | f64

    // paths
    std::string out = "out";
    std::string data;        // dataset.jsonl produced by gen
    std::string checkpoint;  // model input for train-resume / unlearn / eval
    std::string baseline;    // optional pre-unlearning model for eval

    // world generation
    int n_famous = 200;
    int n_background = 600;
    int n_relations = 19;
    int obj_pool_size = 12;
    int max_triples_per_famous = 4;
    double chain_density = 0.5;
    int max_chains_per_object = 2;
    int same_answer_max = 8;
    int templates_per_relation = 4;
    double frac_forget = 0.05;
    double frac_retain = 0.10;
    double frac_test = 0.70;

    // model
    int d_model = 64;
    int n_layers = 3;
    int n_heads = 4;
    int d_ffn = 256;
    int max_seq_len = 32;

    // memorization training
    double train_lr = 0.15;
    double train_momentum = 0.0;
    int train_batch = 8;
    int train_epochs = 300;
    double train_target = 0.95;  // required base-item memorization
    // Smoothed targets keep answer probabilities off the softmax ceiling, so
    // activation-gradient attribution stays informative on the memorized
    // model. Argmax behavior, and hence memorization, is unaffected.
    double train_smoothing = 0.1;
    bool resume = false;

    // unlearning
    std::string method = "klue";
    double lr = 0.0;  // 0 = per-method default
    double forget_weight = 0.7;
    double retain_weight = 1.0;
    int batch_size = 4;
    int max_epochs = 150;
    double ua_stop_threshold = 33.34;
    double alpha = 10.0;
    int n_mismatch = 5;
    double neuron_ratio = 0.05;
    std::string klue_selection = "attribution";  // attribution | random
    double beta_pref = 0.1;
    double rmu_c = 20.0;
    int rmu_layer = 1;
    int checkpoint_every = 0;

    // sweep
    std::string sweep;        // e.g. "neuron_ratio=0.01,0.05,0.1"
    std::string sweep_seeds;  // e.g. "1,2,3,4,5"; empty = just `seed`
    int threads = 1;

    world::GenParams gen_params() const;
    unlearn::UnlearnConfig unlearn_config() const;
    void validate() const;
};

enum class KeyType { integer, unsigned64, real, text, boolean };

struct KeySpec {
    std::string name;
    KeyType type;
    std::string help;
};

const std::vector<KeySpec>& config_keys();

// Set one key from its text form. Unknown keys and malformed values are
// ConfigErrors.
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

std::string get_key(const RunConfig& cfg, const std::string& key);

// key=value lines, '#' comments, blank lines ignored
void load_config_file(RunConfig& cfg, const std::filesystem::path& path);

std::map<std::string, std::string> config_echo(const RunConfig& cfg);

}  // namespace ulab::pipeline

#include "ulab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>

namespace ulab::pipeline {

world::GenParams RunConfig::gen_params() const {
    world::GenParams p;
    p.seed = seed;
    p.n_famous = n_famous;
    p.n_background = n_background;
    p.n_relations = n_relations;
    p.obj_pool_size = obj_pool_size;
    p.max_triples_per_famous = max_triples_per_famous;
    p.chain_density = chain_density;
    p.max_chains_per_object = max_chains_per_object;
    p.same_answer_max = same_answer_max;
    p.templates_per_relation = templates_per_relation;
    p.frac_forget = frac_forget;
    p.frac_retain = frac_retain;
    p.frac_test = frac_test;
    return p;
}

unlearn::UnlearnConfig RunConfig::unlearn_config() const {
    unlearn::UnlearnConfig u;
    u.method = unlearn::method_from_name(method);
    u.lr = lr;
    u.forget_weight = forget_weight;
    u.retain_weight = retain_weight;
    u.batch_size = batch_size;
    u.max_epochs = max_epochs;
    u.ua_stop_threshold = ua_stop_threshold;
    u.alpha = alpha;
    u.n_mismatch = n_mismatch;
    u.neuron_ratio = neuron_ratio;
    if (klue_selection == "random")
        u.random_neurons = true;
    else if (klue_selection != "attribution")
        throw ConfigError("klue_selection must be 'attribution' or 'random'");
    u.beta_pref = beta_pref;
    u.rmu_c = rmu_c;
    u.rmu_layer = rmu_layer;
    u.checkpoint_every = checkpoint_every;
    u.seed = derive_seed(seed, "unlearn");
    return u;
}

void RunConfig::validate() const {
    if (precision != "f32" && precision != "f64")
        throw ConfigError("precision must be 'f32' or 'f64'");
    unlearn_config().validate();
    if (train_target < 0.0 || train_target > 1.0)
        throw ConfigError("train_target must lie in [0,1]");
    if (train_batch < 1) throw ConfigError("train_batch must be >= 1");
    if (train_epochs < 0) throw ConfigError("train_epochs must be >= 0");
    if (train_lr <= 0) throw ConfigError("train_lr must be positive");
    if (train_momentum < 0 || train_momentum >= 1)
        throw ConfigError("train_momentum must lie in [0,1)");
    if (train_smoothing < 0 || train_smoothing >= 1)
        throw ConfigError("train_smoothing must lie in [0,1)");
    if (threads < 1) throw ConfigError("threads must be >= 1");
}

namespace {

struct Field {
    KeySpec spec;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

int64_t parse_int(const std::string& key, const std::string& value) {
    int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || ptr != value.data() + value.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const double out = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + value + "'");
}

std::vector<Field> make_fields() {
    std::vector<Field> f;
    auto add_int = [&f](const char* name, int RunConfig::* member, const char* help) {
        f.push_back({{name, KeyType::integer, help},
                     [name, member](RunConfig& c, const std::string& v) {
                         c.*member = static_cast<int>(parse_int(name, v));
                     },
                     [member](const RunConfig& c) { return std::to_string(c.*member); }});
    };
    auto add_real = [&f](const char* name, double RunConfig::* member, const char* help) {
        f.push_back({{name, KeyType::real, help},
                     [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_real(name, v);
                     },
                     [member](const RunConfig& c) {
                         char buf[32];
                         std::snprintf(buf, sizeof(buf), "%.17g", c.*member);
                         return std::string(buf);
                     }});
    };
    auto add_text = [&f](const char* name, std::string RunConfig::* member, const char* help) {
        f.push_back({{name, KeyType::text, help},
                     [member](RunConfig& c, const std::string& v) { c.*member = v; },
                     [member](const RunConfig& c) { return c.*member; }});
    };
    auto add_bool = [&f](const char* name, bool RunConfig::* member, const char* help) {
        f.push_back({{name, KeyType::boolean, help},
                     [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_bool(name, v);
                     },
                     [member](const RunConfig& c) { return c.*member ? "true" : "false"; }});
    };

    f.push_back({{"seed", KeyType::unsigned64, "root seed for all named random streams"},
                 [](RunConfig& c, const std::string& v) {
                     c.seed = static_cast<uint64_t>(parse_int("seed", v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    add_text("precision", &RunConfig::precision, "numeric precision: f32 or f64");
    add_text("out", &RunConfig::out, "output directory");
    add_text("data", &RunConfig::data, "dataset file path");
    add_text("checkpoint", &RunConfig::checkpoint, "input model checkpoint");
    add_text("baseline", &RunConfig::baseline, "pre-unlearning checkpoint for eval");

    add_int("n_famous", &RunConfig::n_famous, "famous subject entities");
    add_int("n_background", &RunConfig::n_background, "background entities (objects + subjects)");
    add_int("n_relations", &RunConfig::n_relations, "relation count");
    add_int("obj_pool_size", &RunConfig::obj_pool_size, "objects per relation");
    add_int("max_triples_per_famous", &RunConfig::max_triples_per_famous,
            "facts drawn per famous entity (1..k)");
    add_real("chain_density", &RunConfig::chain_density,
             "fraction of objects with outgoing facts");
    add_int("max_chains_per_object", &RunConfig::max_chains_per_object,
            "outgoing facts per chaining object");
    add_int("same_answer_max", &RunConfig::same_answer_max,
            "per-cluster cap on shared-answer items");
    add_int("templates_per_relation", &RunConfig::templates_per_relation,
            "surface variants per relation (>= 4)");
    add_real("frac_forget", &RunConfig::frac_forget, "forget split fraction");
    add_real("frac_retain", &RunConfig::frac_retain, "retain split fraction");
    add_real("frac_test", &RunConfig::frac_test, "test split fraction");

    add_int("d_model", &RunConfig::d_model, "model width");
    add_int("n_layers", &RunConfig::n_layers, "transformer layers");
    add_int("n_heads", &RunConfig::n_heads, "attention heads");
    add_int("d_ffn", &RunConfig::d_ffn, "FFN hidden units per layer");
    add_int("max_seq_len", &RunConfig::max_seq_len, "maximum question length");

    add_real("train_lr", &RunConfig::train_lr, "memorization learning rate");
    add_real("train_momentum", &RunConfig::train_momentum, "memorization SGD momentum");
    add_int("train_batch", &RunConfig::train_batch, "memorization batch size");
    add_int("train_epochs", &RunConfig::train_epochs, "memorization epoch cap");
    add_real("train_target", &RunConfig::train_target,
             "required base-item memorization fraction");
    add_real("train_smoothing", &RunConfig::train_smoothing,
             "label smoothing for memorization training");
    add_bool("resume", &RunConfig::resume, "continue from the existing checkpoint");

    add_text("method", &RunConfig::method,
             "unlearning method: ga ga_ret dpo_mis dpo_rej npo rmu klue");
    add_real("lr", &RunConfig::lr, "unlearning learning rate (0 = per-method default)");
    add_real("forget_weight", &RunConfig::forget_weight, "weight of the forget loss term");
    add_real("retain_weight", &RunConfig::retain_weight, "weight of the retain loss term");
    add_int("batch_size", &RunConfig::batch_size, "unlearning batch size");
    add_int("max_epochs", &RunConfig::max_epochs, "unlearning epoch cap");
    add_real("ua_stop_threshold", &RunConfig::ua_stop_threshold,
             "early-stop when forget accuracy falls to this percentage");
    add_real("alpha", &RunConfig::alpha, "mismatched-attribution subtraction strength");
    add_int("n_mismatch", &RunConfig::n_mismatch, "mismatched pairs per target");
    add_real("neuron_ratio", &RunConfig::neuron_ratio, "fraction of FFN neurons to update");
    add_text("klue_selection", &RunConfig::klue_selection,
             "neuron selection: attribution or random");
    add_real("beta_pref", &RunConfig::beta_pref, "preference-loss beta");
    add_real("rmu_c", &RunConfig::rmu_c, "representation steering magnitude");
    add_int("rmu_layer", &RunConfig::rmu_layer, "layer whose activations are steered");
    add_int("checkpoint_every", &RunConfig::checkpoint_every,
            "save a checkpoint every k epochs (0 = off)");

    add_text("sweep", &RunConfig::sweep, "sweep spec: key=v1,v2,...");
    add_text("sweep_seeds", &RunConfig::sweep_seeds, "comma-separated seeds for sweep runs");
    add_int("threads", &RunConfig::threads, "worker threads for sweep fan-out");
    return f;
}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = make_fields();
    return f;
}

const Field& find_field(const std::string& key) {
    for (const auto& f : fields())
        if (f.spec.name == key) return f;
    throw ConfigError("unknown configuration key '" + key + "'");
}

}  // namespace

const std::vector<KeySpec>& config_keys() {
    static const std::vector<KeySpec> specs = [] {
        std::vector<KeySpec> out;
        for (const auto& f : fields()) out.push_back(f.spec);
        return out;
    }();
    return specs;
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    find_field(key).set(cfg, value);
}

std::string get_key(const RunConfig& cfg, const std::string& key) {
    return find_field(key).get(cfg);
}

void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        const std::string trimmed = line.substr(first, last - first + 1);
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                              ": expected key=value");
        auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = strip(trimmed.substr(0, eq));
        const std::string value = strip(trimmed.substr(eq + 1));
        try {
            apply_key(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

std::map<std::string, std::string> config_echo(const RunConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const auto& f : fields()) out[f.spec.name] = f.get(cfg);
    return out;
}

}  // namespace ulab::pipeline

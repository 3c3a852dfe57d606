#include "ulab/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <thread>

#include "ulab/checkpoint.hpp"
#include "ulab/dataset_io.hpp"
#include "ulab/evalkit.hpp"
#include "ulab/report_io.hpp"
#include "ulab/unlearn.hpp"

namespace ulab::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kToolVersion = "1.0";

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_manifest(const RunConfig& cfg, const std::string& command, const fs::path& out_dir,
                    json extra = json::object()) {
    json m{{"command", command},
           {"version", kToolVersion},
           {"config", config_echo(cfg)},
           {"extra", std::move(extra)}};
    std::ofstream f(out_dir / "manifest.json");
    if (!f) throw DataError("cannot write manifest in '" + out_dir.string() + "'");
    f << m.dump(2) << "\n";
}

fs::path ensure_out_dir(const RunConfig& cfg) {
    if (cfg.out.empty()) throw ConfigError("out directory not set");
    fs::create_directories(cfg.out);
    return cfg.out;
}

world::Dataset load_data(const RunConfig& cfg) {
    if (cfg.data.empty()) throw ConfigError("data: no dataset file given");
    return world::read_dataset(cfg.data);
}

lm::ModelConfig model_config(const RunConfig& cfg, const world::Dataset& ds) {
    lm::ModelConfig mc;
    mc.vocab_size = ds.vocab.size();
    mc.d_model = cfg.d_model;
    mc.n_layers = cfg.n_layers;
    mc.n_heads = cfg.n_heads;
    mc.d_ffn = cfg.d_ffn;
    mc.max_seq_len = cfg.max_seq_len;
    mc.seed = derive_seed(cfg.seed, "model");
    mc.validate();
    return mc;
}

// fraction of base items the model answers correctly
template <class S>
double base_accuracy(const lm::ModelState<S>& model, const world::Dataset& ds) {
    const auto fn = eval::model_answer_fn(model);
    int hits = 0;
    for (const auto& c : ds.clusters) hits += eval::memorization(fn, c.base);
    return ds.clusters.empty() ? 0.0
                               : static_cast<double>(hits) / static_cast<double>(ds.clusters.size());
}

template <class S>
json kind_accuracies(const lm::ModelState<S>& model, const world::Dataset& ds) {
    const auto fn = eval::model_answer_fn(model);
    std::map<std::string, std::pair<int, int>> per_kind;
    for (const auto& c : ds.clusters)
        for (const world::QAItem* item : c.all_items()) {
            auto& [hits, total] = per_kind[world::kind_name(item->kind)];
            hits += eval::memorization(fn, *item);
            ++total;
        }
    json out = json::object();
    for (const auto& [kind, counts] : per_kind)
        out[kind] = 100.0 * counts.first / std::max(1, counts.second);
    return out;
}

// ---------------------------------------------------------------------------

template <class S>
json train_impl(const RunConfig& cfg, const fs::path& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ds = load_data(cfg);
    const fs::path ckpt_path = out_dir / "model.ckpt";

    lm::ModelState<S> model;
    if (cfg.resume && (!cfg.checkpoint.empty() || fs::exists(ckpt_path))) {
        const fs::path src = cfg.checkpoint.empty() ? ckpt_path : fs::path(cfg.checkpoint);
        model = lm::load_checkpoint<S>(src);
    } else {
        model = lm::init_model<S>(model_config(cfg, ds));
    }

    std::vector<const world::QAItem*> items;
    for (const auto& c : ds.clusters)
        for (const world::QAItem* item : c.all_items()) items.push_back(item);
    if (items.empty()) throw ConfigError("train: dataset has no items");

    // plain SGD with optional momentum over shuffled mean-loss batches
    std::vector<std::vector<S>> velocity;
    auto params = model.named_parameters();
    if (cfg.train_momentum > 0)
        for (auto& [name, t] : params) velocity.emplace_back(t->values().size(), S(0));

    // cross-entropy against smoothed targets: the gold answer keeps the
    // argmax, the rest of the mass keeps probabilities off the softmax
    // ceiling so later attribution has usable gradients
    const double eps = cfg.train_smoothing;
    auto item_loss = [&](const lm::ModelState<S>& m, const world::QAItem& item) {
        if (eps == 0.0) return lm::lm_loss(m, item.question, item.answer);
        auto fwd = lm::forward(m, item.question);
        auto logp = ag::log_softmax(ag::reshape(fwd.last_logits, {m.cfg.vocab_size}));
        auto gold = ag::scale(ag::pick(logp, item.answer), -(1.0 - eps));
        auto uniform = ag::scale(ag::sum_all(logp), -eps / m.cfg.vocab_size);
        return ag::add(gold, uniform);
    };

    Rng shuffler(derive_seed(cfg.seed, "train/shuffle"));
    double accuracy = base_accuracy(model, ds);
    int epochs_run = 0;
    while (accuracy < cfg.train_target && epochs_run < cfg.train_epochs) {
        auto order = items;
        shuffler.shuffle(order);
        for (size_t s = 0; s < order.size(); s += static_cast<size_t>(cfg.train_batch)) {
            const size_t stop = std::min(order.size(), s + static_cast<size_t>(cfg.train_batch));
            ag::GradTape<S> tape;
            ag::Tensor<S> acc;
            for (size_t i = s; i < stop; ++i) {
                auto loss = item_loss(model, *order[i]);
                acc = i == s ? loss : ag::add(acc, loss);
            }
            auto mean = ag::scale(acc, 1.0 / static_cast<double>(stop - s));
            if (!std::isfinite(static_cast<double>(mean.item())))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epochs_run));
            tape.backward(mean);
            if (cfg.train_momentum > 0) {
                size_t pi = 0;
                for (auto& [name, t] : params) {
                    auto& v = t->mutable_values();
                    const auto& g = t->grad();
                    auto& mom = velocity[pi++];
                    for (size_t j = 0; j < v.size(); ++j) {
                        mom[j] = static_cast<S>(cfg.train_momentum) * mom[j] + g[j];
                        v[j] -= static_cast<S>(cfg.train_lr) * mom[j];
                    }
                }
                ++model.step;
            } else {
                lm::apply_gradients(model, cfg.train_lr);
            }
            model.zero_grad();
        }
        ++epochs_run;
        accuracy = base_accuracy(model, ds);
    }

    lm::save_checkpoint(model, ckpt_path);
    json summary{{"command", "train"},
                 {"epochs_run", epochs_run},
                 {"base_accuracy", 100.0 * accuracy},
                 {"target", 100.0 * cfg.train_target},
                 {"reached_target", accuracy >= cfg.train_target},
                 {"step", model.step},
                 {"checkpoint", ckpt_path.string()},
                 {"kind_accuracy", kind_accuracies(model, ds)},
                 {"seconds", seconds_since(t0)}};
    {
        std::ofstream f(out_dir / "train_summary.json");
        f << summary.dump(2) << "\n";
    }
    write_manifest(cfg, "train", out_dir, summary);
    if (accuracy < cfg.train_target)
        throw ConvergenceError("train: base-item memorization " +
                               std::to_string(100.0 * accuracy) + "% below target " +
                               std::to_string(100.0 * cfg.train_target) + "% after " +
                               std::to_string(epochs_run) + " epochs");
    return summary;
}

json report_to_json(const eval::EvalReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return json{{"method", r.method}, {"ua", opt(r.ua)},     {"ua_ext", opt(r.ua_ext)},
                {"ta", opt(r.ta)},    {"sa", opt(r.sa)},     {"sa_forget", opt(r.sa_forget)},
                {"sa_test", opt(r.sa_test)},                 {"ma_f", opt(r.ma_f)},
                {"ma_t", opt(r.ma_t)},                       {"ma", opt(r.ma)},
                {"score", opt(r.score)}};
}

template <class S>
json unlearn_eval_impl(const RunConfig& cfg, const fs::path& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ds = load_data(cfg);
    if (cfg.checkpoint.empty()) throw ConfigError("unlearn: checkpoint not set");
    auto model = lm::load_checkpoint<S>(cfg.checkpoint);
    const auto before = model.clone();
    const auto ucfg = cfg.unlearn_config();

    std::ofstream history(out_dir / "history.jsonl");
    if (!history) throw DataError("cannot write history in '" + out_dir.string() + "'");
    unlearn::EpochCallback<S> on_epoch = [&](const lm::ModelState<S>& m,
                                             const unlearn::EpochRecord& rec) {
        history << json{{"epoch", rec.epoch},
                        {"ua", rec.ua},
                        {"skipped", rec.skipped},
                        {"steps", rec.steps},
                        {"method", cfg.method},
                        {"loss_forget", rec.loss_forget},
                        {"loss_retain", rec.loss_retain},
                        {"loss_total", rec.loss_total}}
                       .dump()
                << "\n";
        if (ucfg.checkpoint_every > 0 && rec.epoch % ucfg.checkpoint_every == 0)
            lm::save_checkpoint(m, out_dir / ("epoch_" + std::to_string(rec.epoch) + ".ckpt"));
    };

    unlearn::RunResult<S> result;
    try {
        result = unlearn::unlearn_run(model, ds, ds.splits, ucfg, on_epoch);
    } catch (const NumericError&) {
        // diagnostic snapshot of the aborted state
        lm::save_checkpoint(model, out_dir / "diagnostic.ckpt");
        history.flush();
        throw;
    }
    lm::save_checkpoint(model, out_dir / "unlearned.ckpt");

    auto report = eval::metric_suite(eval::model_answer_fn(before), eval::model_answer_fn(model),
                                     ds, ds.splits);
    report.method = cfg.method;
    const auto verdicts = eval::classify_superficial(eval::model_answer_fn(before),
                                                     eval::model_answer_fn(model), ds.clusters,
                                                     ds.splits.forget);
    eval::emit_report(report, verdicts, out_dir / "report.jsonl", out_dir / "report.csv");

    int superficial = 0;
    for (const auto& v : verdicts) superficial += v.is_superficial ? 1 : 0;
    json summary{{"command", "unlearn"},
                 {"method", cfg.method},
                 {"epochs_run", result.history.size()},
                 {"early_stopped", result.early_stopped},
                 {"final_ua", result.final_ua},
                 {"lr", unlearn::resolved_lr(ucfg)},
                 {"report", report_to_json(report)},
                 {"superficial_clusters", superficial},
                 {"forget_clusters", ds.splits.forget.size()},
                 {"seconds", seconds_since(t0)}};
    write_manifest(cfg, "unlearn", out_dir, summary);
    return summary;
}

template <class S>
json eval_impl(const RunConfig& cfg, const fs::path& out_dir) {
    const auto ds = load_data(cfg);
    if (cfg.checkpoint.empty()) throw ConfigError("eval: checkpoint not set");
    auto after = lm::load_checkpoint<S>(cfg.checkpoint);
    auto before = cfg.baseline.empty() ? after.clone() : lm::load_checkpoint<S>(cfg.baseline);

    auto report = eval::metric_suite(eval::model_answer_fn(before), eval::model_answer_fn(after),
                                     ds, ds.splits);
    report.method = cfg.baseline.empty() ? "identity" : cfg.method;
    const auto verdicts = eval::classify_superficial(eval::model_answer_fn(before),
                                                     eval::model_answer_fn(after), ds.clusters,
                                                     ds.splits.forget);
    eval::emit_report(report, verdicts, out_dir / "report.jsonl", out_dir / "report.csv");

    json summary{{"command", "eval"}, {"report", report_to_json(report)}};
    write_manifest(cfg, "eval", out_dir, summary);
    return summary;
}

template <class F>
auto with_precision(const RunConfig& cfg, F&& fn) {
    if (cfg.precision == "f64") return fn(double{});
    return fn(float{});
}

}  // namespace

json cmd_gen(const RunConfig& cfg) {
    cfg.validate();
    const fs::path out_dir = ensure_out_dir(cfg);
    const auto ds = world::synthesize(cfg.gen_params());
    const auto violations = world::audit_dataset(ds);
    if (!violations.empty())
        throw DataError("gen: generated dataset violates invariants: " + violations.front() +
                        (violations.size() > 1
                             ? " (+" + std::to_string(violations.size() - 1) + " more)"
                             : ""));

    world::write_dataset(ds, out_dir / "dataset.jsonl");
    world::write_vocab(ds.vocab, out_dir / "vocab.json");

    size_t n_para = 0, n_mh = 0, n_sa = 0;
    for (const auto& c : ds.clusters) {
        n_para += c.paraphrases.size();
        n_mh += c.multihops.size();
        n_sa += c.same_answers.size();
    }
    json summary{{"command", "gen"},
                 {"clusters", ds.clusters.size()},
                 {"base", ds.clusters.size()},
                 {"paraphrased", n_para},
                 {"multihop", n_mh},
                 {"same_answer", n_sa},
                 {"vocab", ds.vocab.size()},
                 {"splits",
                  {{"forget", ds.splits.forget.size()},
                   {"retain", ds.splits.retain.size()},
                   {"test", ds.splits.test.size()}}},
                 {"warnings", ds.warnings},
                 {"dataset", (out_dir / "dataset.jsonl").string()}};
    write_manifest(cfg, "gen", out_dir, summary);
    return summary;
}

json cmd_train(const RunConfig& cfg) {
    cfg.validate();
    const fs::path out_dir = ensure_out_dir(cfg);
    return with_precision(cfg, [&](auto tag) { return train_impl<decltype(tag)>(cfg, out_dir); });
}

json cmd_unlearn_eval(const RunConfig& cfg) {
    cfg.validate();
    const fs::path out_dir = ensure_out_dir(cfg);
    return with_precision(cfg,
                          [&](auto tag) { return unlearn_eval_impl<decltype(tag)>(cfg, out_dir); });
}

json cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    const fs::path out_dir = ensure_out_dir(cfg);
    return with_precision(cfg, [&](auto tag) { return eval_impl<decltype(tag)>(cfg, out_dir); });
}

json cmd_sweep(const RunConfig& cfg) {
    cfg.validate();
    const fs::path out_dir = ensure_out_dir(cfg);
    if (cfg.sweep.empty()) throw ConfigError("sweep: no sweep spec (expected key=v1,v2,...)");

    const auto eq = cfg.sweep.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep: malformed spec '" + cfg.sweep + "'");
    const std::string key = cfg.sweep.substr(0, eq);
    std::vector<std::string> values;
    {
        std::string rest = cfg.sweep.substr(eq + 1);
        size_t pos = 0;
        while (pos <= rest.size()) {
            const auto comma = rest.find(',', pos);
            values.push_back(rest.substr(pos, comma == std::string::npos ? comma : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }
    if (values.empty()) throw ConfigError("sweep: no values in spec");

    std::vector<uint64_t> seeds;
    if (cfg.sweep_seeds.empty()) {
        seeds.push_back(cfg.seed);
    } else {
        size_t pos = 0;
        const std::string& s = cfg.sweep_seeds;
        while (pos <= s.size()) {
            const auto comma = s.find(',', pos);
            const std::string tok = s.substr(pos, comma == std::string::npos ? comma : comma - pos);
            try {
                seeds.push_back(std::stoull(tok));
            } catch (const std::exception&) {
                throw ConfigError("sweep: bad seed '" + tok + "'");
            }
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }

    struct Run {
        RunConfig cfg;
        fs::path dir;
        std::string label;
    };
    std::vector<Run> runs;
    for (const auto& value : values)
        for (uint64_t seed : seeds) {
            Run run;
            run.cfg = cfg;
            run.cfg.sweep.clear();
            run.cfg.sweep_seeds.clear();
            apply_key(run.cfg, key, value);
            run.cfg.seed = seed;
            run.cfg.out =
                (out_dir / (key + "=" + value) / ("seed=" + std::to_string(seed))).string();
            run.dir = run.cfg.out;
            run.label =
                run.cfg.method + "[" + key + "=" + value + ",seed=" + std::to_string(seed) + "]";
            runs.push_back(std::move(run));
        }

    std::vector<json> summaries(runs.size());
    std::vector<std::exception_ptr> failures(runs.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= runs.size()) return;
            try {
                summaries[i] = cmd_unlearn_eval(runs[i].cfg);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(cfg.threads, static_cast<int>(runs.size())));
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (size_t i = 0; i < runs.size(); ++i)
        if (failures[i]) std::rethrow_exception(failures[i]);

    std::vector<eval::EvalReport> rows;
    for (size_t i = 0; i < runs.size(); ++i) {
        auto stored = eval::read_report(runs[i].dir / "report.jsonl");
        stored.report.method = runs[i].label;
        rows.push_back(std::move(stored.report));
    }
    eval::write_score_csv(rows, out_dir / "sweep.csv");

    json summary{{"command", "sweep"},
                 {"key", key},
                 {"values", values},
                 {"seeds", seeds},
                 {"runs", summaries},
                 {"csv", (out_dir / "sweep.csv").string()}};
    write_manifest(cfg, "sweep", out_dir, summary);
    return summary;
}

}  // namespace ulab::pipeline

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "model_gradcheck.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/microlm.hpp"
#include "ulab/rng.hpp"

using namespace ulab;
using namespace ulab::lm;

namespace {

ModelConfig tiny_config(uint64_t seed = 5) {
    ModelConfig cfg;
    cfg.vocab_size = 24;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ffn = 12;
    cfg.max_seq_len = 8;
    cfg.seed = seed;
    return cfg;
}

template <class S>
void fill_all_params(ModelState<S>& m, S value) {
    for (auto& [name, t] : m.named_parameters())
        for (auto& v : t->mutable_values()) v = value;
}

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "ulab_microlm_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("init determinism") {
    auto a = init_model<float>(tiny_config(1));
    auto b = init_model<float>(tiny_config(1));
    CHECK(a.checksum() == b.checksum());
    auto c = init_model<float>(tiny_config(2));
    CHECK(a.checksum() != c.checksum());
}

TEST_CASE("head count must divide the model width") {
    auto cfg = tiny_config();
    cfg.d_model = 9;
    CHECK_THROWS_AS(init_model<float>(cfg), ConfigError);
}

TEST_CASE("answer distribution is a renormalized final softmax") {
    auto m = init_model<double>(tiny_config());
    const std::vector<int> q{1, 2, 3};

    SUBCASE("singleton candidate set") {
        const std::vector<int> cand{7};
        auto probs = answer_distribution(m, q, cand);
        CHECK(probs.at(7) == doctest::Approx(1.0));
    }
    SUBCASE("three candidates sum to one") {
        const std::vector<int> cand{3, 9, 17};
        auto probs = answer_distribution(m, q, cand);
        double sum = 0;
        for (auto& [c, p] : probs) {
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
            sum += p;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(answer_distribution(m, q, std::vector<int>{}), ConfigError);
        CHECK_THROWS_AS(answer_distribution(m, q, std::vector<int>{99}), ConfigError);
        const std::vector<int> bad_q{1, 99};
        CHECK_THROWS_AS(answer_distribution(m, bad_q, std::vector<int>{3}), ConfigError);
        const std::vector<int> long_q(9, 1);
        CHECK_THROWS_AS(answer_distribution(m, long_q, std::vector<int>{3}), ConfigError);
    }
}

TEST_CASE("candidate argmax agrees with the full-vocab restriction") {
    Rng rng(11);
    auto m = init_model<double>(tiny_config(3));
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> q;
        const int len = 1 + static_cast<int>(rng.randint(0, 5));
        for (int i = 0; i < len; ++i) q.push_back(static_cast<int>(rng.randint(0, 23)));
        std::vector<int> cand;
        while (cand.size() < 3) {
            const int c = static_cast<int>(rng.randint(0, 23));
            if (std::find(cand.begin(), cand.end(), c) == cand.end()) cand.push_back(c);
        }

        const auto fwd = forward(m, q);
        const auto& logits = fwd.last_logits.values();
        int full_best = cand[0];
        for (int c : cand)
            if (logits[static_cast<size_t>(c)] > logits[static_cast<size_t>(full_best)]) full_best = c;

        auto probs = answer_distribution(m, q, cand);
        int renorm_best = cand[0];
        for (int c : cand)
            if (probs.at(c) > probs.at(renorm_best)) renorm_best = c;

        CHECK(full_best == renorm_best);
    }
}

TEST_CASE("lm_loss of a uniform model is log vocab size") {
    auto m = init_model<double>(tiny_config());
    fill_all_params(m, 0.0);  // zeroed model scores every token equally
    const std::vector<int> q{1, 2};
    auto loss = lm_loss(m, q, 5);
    CHECK(loss.item() == doctest::Approx(std::log(24.0)).epsilon(1e-9));
}

TEST_CASE("lm_loss vanishes when the answer has all the mass") {
    auto m = init_model<double>(tiny_config());
    fill_all_params(m, 0.0);
    // final layer norm emits beta; a huge head column then pins the answer
    for (auto& v : m.ln_f_beta.mutable_values()) v = 1.0;
    auto& head = m.head.mutable_values();
    for (int j = 0; j < m.cfg.d_model; ++j) head[static_cast<size_t>(j) * m.cfg.vocab_size + 5] = 50.0;
    const std::vector<int> q{1, 2};
    CHECK(lm_loss(m, q, 5).item() < 1e-9);
}

TEST_CASE("lm_loss gradient matches finite differences") {
    auto m = init_model<double>(tiny_config(7));
    const std::vector<int> q{4, 9, 2};
    auto report = testing::model_loss_gradcheck(m, [&]() { return lm_loss(m, q, 11); });
    CAPTURE(report.worst_param);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("captured activation gradients match straight-through perturbation") {
    auto m = init_model<double>(tiny_config(9));
    const std::vector<int> q{4, 9, 2};
    const int answer = 11;

    ActivationRecord<double> acts;
    double base_prob = 0.0;
    {
        ag::GradTape<double> tape;
        auto graph = answer_prob_graph(m, q, answer);
        base_prob = graph.prob.item();
        tape.backward(graph.prob);
        acts = std::move(graph.acts);
    }
    (void)base_prob;

    auto prob_with_offset = [&](int layer, const std::vector<double>& delta) {
        ForwardOptions<double> opts;
        std::map<int, std::vector<double>> offsets{{layer, delta}};
        opts.act_offset = &offsets;
        auto fwd = forward(m, q, opts);
        const auto& logits = fwd.last_logits.values();
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double denom = 0.0;
        for (double v : logits) denom += std::exp(v - mx);
        return std::exp(logits[static_cast<size_t>(answer)] - mx) / denom;
    };

    const double eps = 1e-5;
    Rng rng(21);
    for (int layer = 0; layer < m.cfg.n_layers; ++layer) {
        REQUIRE(acts.at(layer).has_grad());
        const auto& grad = acts.at(layer).grad();
        for (int probe = 0; probe < 12; ++probe) {
            const auto idx = static_cast<size_t>(rng.randint(0, static_cast<int64_t>(grad.size()) - 1));
            std::vector<double> delta(grad.size(), 0.0);
            delta[idx] = eps;
            const double up = prob_with_offset(layer, delta);
            delta[idx] = -eps;
            const double down = prob_with_offset(layer, delta);
            const double numeric = (up - down) / (2 * eps);
            const double rel = std::abs(grad[idx] - numeric) / std::max(1.0, std::abs(numeric));
            CHECK(rel < 1e-3);
        }
    }
}

TEST_CASE("attribution-style forward leaves parameter gradients untouched") {
    auto m = init_model<double>(tiny_config(13));
    const std::vector<int> q{4, 9, 2};
    {
        ag::GradTape<double> tape;
        auto graph = answer_prob_graph(m, q, 11);
        tape.backward(graph.prob);
        for (int l = 0; l < m.cfg.n_layers; ++l) CHECK(graph.acts.at(l).has_grad());
    }
    for (auto& [name, t] : m.named_parameters()) CHECK_FALSE(t->has_grad());
}

TEST_CASE("apply_gradients moves everything without a mask") {
    auto m = init_model<double>(tiny_config(15));
    const std::vector<int> q{4, 9, 2};
    {
        ag::GradTape<double> tape;
        auto loss = lm_loss(m, q, 11);
        tape.backward(loss);
    }
    auto before = m.clone();
    apply_gradients(m, 0.1);
    CHECK(m.step == before.step + 1);
    for (size_t pi = 0; pi < m.named_parameters().size(); ++pi) {
        auto [name, t] = m.named_parameters()[pi];
        auto [bname, bt] = before.named_parameters()[pi];
        bool moved = false;
        for (size_t i = 0; i < t->values().size(); ++i)
            if (t->values()[i] != bt->values()[i]) moved = true;
        CAPTURE(name);
        CHECK(moved);
    }
}

TEST_CASE("apply_gradients errors on missing gradients") {
    auto m = init_model<double>(tiny_config(15));
    CHECK_THROWS_AS(apply_gradients(m, 0.1), AutogradError);
    CHECK_THROWS_AS(apply_gradients(m, 0.0), ConfigError);
}

TEST_CASE("empty mask leaves the model bitwise unchanged") {
    auto m = init_model<double>(tiny_config(17));
    const std::vector<int> q{4, 9, 2};
    {
        ag::GradTape<double> tape;
        auto loss = lm_loss(m, q, 11);
        tape.backward(loss);
    }
    const uint64_t before = m.checksum();
    NeuronMask mask;  // selects nothing
    apply_gradients(m, 0.1, &mask);
    CHECK(m.checksum() == before);
}

TEST_CASE("single-neuron mask touches exactly its parameter image") {
    auto m = init_model<double>(tiny_config(19));
    const std::vector<int> q{4, 9, 2};
    {
        ag::GradTape<double> tape;
        auto loss = lm_loss(m, q, 11);
        tape.backward(loss);
    }
    auto before = m.clone();
    NeuronMask mask;
    mask.selected = {{1, 7}};
    apply_gradients(m, 0.1, &mask);

    const int d_model = m.cfg.d_model;
    const int d_ffn = m.cfg.d_ffn;
    auto params_now = m.named_parameters();
    auto params_old = before.named_parameters();
    for (size_t pi = 0; pi < params_now.size(); ++pi) {
        const auto& [name, t] = params_now[pi];
        const auto& old = *params_old[pi].second;
        for (size_t i = 0; i < t->values().size(); ++i) {
            const bool in_image =
                (name == "layer1.ffn.w_in" && i / static_cast<size_t>(d_model) == 7) ||
                (name == "layer1.ffn.b_in" && i == 7) ||
                (name == "layer1.ffn.w_out" && i % static_cast<size_t>(d_ffn) == 7);
            CAPTURE(name);
            CAPTURE(i);
            if (in_image)
                CHECK(t->values()[i] != old.values()[i]);
            else
                CHECK(t->values()[i] == old.values()[i]);
        }
    }
}

TEST_CASE("checkpoint round-trip is bitwise exact") {
    auto m = init_model<float>(tiny_config(23));
    m.step = 41;
    const auto path = temp_file("model.ckpt");
    save_checkpoint(m, path);
    CHECK(checkpoint_precision(path) == 4);
    auto loaded = load_checkpoint<float>(path);
    CHECK(loaded.checksum() == m.checksum());
    CHECK(loaded.step == 41);
    CHECK(loaded.cfg == m.cfg);
    CHECK_THROWS_AS(load_checkpoint<double>(path), DataError);
}

TEST_CASE("a memorization-trained model puts the gold candidate on top") {
    auto cfg = tiny_config(29);
    cfg.vocab_size = 30;
    auto m = init_model<double>(cfg);

    struct Item {
        std::vector<int> q;
        int a;
        std::vector<int> cand;
    };
    std::vector<Item> items;
    for (int i = 0; i < 8; ++i)
        items.push_back({{i, 10 + i, 0}, 20 + (i % 6), {20 + (i % 6), 20 + ((i + 1) % 6), 20 + ((i + 2) % 6)}});

    for (int epoch = 0; epoch < 300; ++epoch) {
        for (const auto& item : items) {
            ag::GradTape<double> tape;
            auto loss = lm_loss(m, item.q, item.a);
            tape.backward(loss);
            apply_gradients(m, 0.1);
            m.zero_grad();
        }
    }
    for (const auto& item : items) {
        auto probs = answer_distribution(m, item.q, item.cand);
        int best = item.cand[0];
        for (int c : item.cand)
            if (probs.at(c) > probs.at(best)) best = c;
        CHECK(best == item.a);
    }
}

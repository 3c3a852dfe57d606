#pragma once

// A small decoder-only transformer that memorizes token-sequence QA items.
// Answers are single tokens, so the model's answer distribution is one
// softmax at the final position. Per-layer FFN hidden activations can be
// captured during a forward pass, either inside the training graph or as
// standalone gradient roots with all parameters held constant (the form the
// attribution machinery consumes).

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ulab/errors.hpp"
#include "ulab/neuron_mask.hpp"
#include "ulab/rng.hpp"
#include "ulab/tensor.hpp"

namespace ulab::lm {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 3;
    int n_heads = 4;
    int d_ffn = 256;
    int max_seq_len = 32;
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 1) throw ConfigError("model: vocab_size must be positive");
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ffn < 1 || max_seq_len < 1)
            throw ConfigError("model: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("model: d_model (" + std::to_string(d_model) +
                              ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
    }

    bool operator==(const ModelConfig&) const = default;
};

template <class S>
struct ModelState {
    ModelConfig cfg;
    int64_t step = 0;

    ag::Tensor<S> tok_emb;  // (vocab, d_model)
    ag::Tensor<S> pos_emb;  // (max_seq_len, d_model)

    struct Layer {
        ag::Tensor<S> ln1_gamma, ln1_beta;
        ag::Tensor<S> wq, wk, wv, wo;          // (d_model, d_model)
        ag::Tensor<S> ln2_gamma, ln2_beta;
        ag::Tensor<S> ffn_w_in;                // (d_ffn, d_model); row i belongs to neuron i
        ag::Tensor<S> ffn_b_in;                // (d_ffn)
        ag::Tensor<S> ffn_w_out;               // (d_model, d_ffn); column i belongs to neuron i
        ag::Tensor<S> ffn_b_out;               // (d_model)
    };
    std::vector<Layer> layers;

    ag::Tensor<S> ln_f_gamma, ln_f_beta;
    ag::Tensor<S> head;  // (d_model, vocab)

    std::vector<std::pair<std::string, ag::Tensor<S>*>> named_parameters() {
        std::vector<std::pair<std::string, ag::Tensor<S>*>> out;
        out.emplace_back("tok_emb", &tok_emb);
        out.emplace_back("pos_emb", &pos_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            auto& L = layers[l];
            out.emplace_back(p + "ln1.gamma", &L.ln1_gamma);
            out.emplace_back(p + "ln1.beta", &L.ln1_beta);
            out.emplace_back(p + "attn.wq", &L.wq);
            out.emplace_back(p + "attn.wk", &L.wk);
            out.emplace_back(p + "attn.wv", &L.wv);
            out.emplace_back(p + "attn.wo", &L.wo);
            out.emplace_back(p + "ln2.gamma", &L.ln2_gamma);
            out.emplace_back(p + "ln2.beta", &L.ln2_beta);
            out.emplace_back(p + "ffn.w_in", &L.ffn_w_in);
            out.emplace_back(p + "ffn.b_in", &L.ffn_b_in);
            out.emplace_back(p + "ffn.w_out", &L.ffn_w_out);
            out.emplace_back(p + "ffn.b_out", &L.ffn_b_out);
        }
        out.emplace_back("ln_f.gamma", &ln_f_gamma);
        out.emplace_back("ln_f.beta", &ln_f_beta);
        out.emplace_back("head", &head);
        return out;
    }

    std::vector<std::pair<std::string, const ag::Tensor<S>*>> named_parameters() const {
        auto mut = const_cast<ModelState*>(this)->named_parameters();
        std::vector<std::pair<std::string, const ag::Tensor<S>*>> out;
        out.reserve(mut.size());
        for (auto& [name, t] : mut) out.emplace_back(name, t);
        return out;
    }

    void zero_grad() {
        for (auto& [name, t] : named_parameters()) t->clear_grad();
    }

    ModelState clone() const {
        ModelState copy;
        copy.cfg = cfg;
        copy.step = step;
        auto src = named_parameters();
        copy.tok_emb = tok_emb.clone_detached(true);
        copy.pos_emb = pos_emb.clone_detached(true);
        copy.layers.resize(layers.size());
        for (size_t l = 0; l < layers.size(); ++l) {
            const auto& a = layers[l];
            auto& b = copy.layers[l];
            b.ln1_gamma = a.ln1_gamma.clone_detached(true);
            b.ln1_beta = a.ln1_beta.clone_detached(true);
            b.wq = a.wq.clone_detached(true);
            b.wk = a.wk.clone_detached(true);
            b.wv = a.wv.clone_detached(true);
            b.wo = a.wo.clone_detached(true);
            b.ln2_gamma = a.ln2_gamma.clone_detached(true);
            b.ln2_beta = a.ln2_beta.clone_detached(true);
            b.ffn_w_in = a.ffn_w_in.clone_detached(true);
            b.ffn_b_in = a.ffn_b_in.clone_detached(true);
            b.ffn_w_out = a.ffn_w_out.clone_detached(true);
            b.ffn_b_out = a.ffn_b_out.clone_detached(true);
        }
        copy.ln_f_gamma = ln_f_gamma.clone_detached(true);
        copy.ln_f_beta = ln_f_beta.clone_detached(true);
        copy.head = head.clone_detached(true);
        return copy;
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : named_parameters()) {
            h ^= fnv1a64(name);
            h *= 0x100000001b3ull;
            h ^= ag::values_checksum(*t);
            h *= 0x100000001b3ull;
        }
        return h;
    }
};

template <class S>
ModelState<S> init_model(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, "model/init"));
    auto weight = [&rng](ag::Shape shape) {
        std::vector<S> v(static_cast<size_t>(ag::numel(shape)));
        for (auto& x : v) x = static_cast<S>(rng.normal(0.0, 0.02));
        return ag::Tensor<S>::from(std::move(shape), std::move(v), /*requires_grad=*/true);
    };
    auto ones = [](ag::Shape shape) { return ag::Tensor<S>::full(std::move(shape), S(1), true); };
    auto zeros = [](ag::Shape shape) { return ag::Tensor<S>::zeros(std::move(shape), true); };

    ModelState<S> m;
    m.cfg = cfg;
    m.tok_emb = weight({cfg.vocab_size, cfg.d_model});
    m.pos_emb = weight({cfg.max_seq_len, cfg.d_model});
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& L : m.layers) {
        L.ln1_gamma = ones({cfg.d_model});
        L.ln1_beta = zeros({cfg.d_model});
        L.wq = weight({cfg.d_model, cfg.d_model});
        L.wk = weight({cfg.d_model, cfg.d_model});
        L.wv = weight({cfg.d_model, cfg.d_model});
        L.wo = weight({cfg.d_model, cfg.d_model});
        L.ln2_gamma = ones({cfg.d_model});
        L.ln2_beta = zeros({cfg.d_model});
        L.ffn_w_in = weight({cfg.d_ffn, cfg.d_model});
        L.ffn_b_in = zeros({cfg.d_ffn});
        L.ffn_w_out = weight({cfg.d_model, cfg.d_ffn});
        L.ffn_b_out = zeros({cfg.d_model});
    }
    m.ln_f_gamma = ones({cfg.d_model});
    m.ln_f_beta = zeros({cfg.d_model});
    m.head = weight({cfg.d_model, cfg.vocab_size});
    return m;
}

// Per-layer FFN hidden activations of one forward pass, shape (seq, d_ffn).
// Gradients appear on them after a backward pass through the capturing graph.
template <class S>
struct ActivationRecord {
    std::vector<ag::Tensor<S>> ffn;

    int n_layers() const { return static_cast<int>(ffn.size()); }
    const ag::Tensor<S>& at(int layer) const { return ffn.at(static_cast<size_t>(layer)); }
};

template <class S>
struct ForwardOptions {
    bool capture_ffn = false;
    // Run all parameters as constants and make captured activations gradient
    // roots; backward then yields exactly d(output)/d(activation), leaving
    // parameter gradients untouched.
    bool params_constant = false;
    // Zero these (layer, neuron) activations after the nonlinearity.
    const std::set<std::pair<int, int>>* ablate = nullptr;
    // Additive perturbation of one layer's post-nonlinearity activations,
    // flat (seq * d_ffn); the probe used to cross-check activation gradients.
    const std::map<int, std::vector<S>>* act_offset = nullptr;
};

template <class S>
struct ForwardResult {
    ag::Tensor<S> last_logits;  // (1, vocab): logits at the final position
    ActivationRecord<S> acts;
};

template <class S>
ForwardResult<S> forward(const ModelState<S>& model, std::span<const int> tokens,
                         const ForwardOptions<S>& opts = {}) {
    const ModelConfig& cfg = model.cfg;
    const int L = static_cast<int>(tokens.size());
    if (L == 0) throw ConfigError("forward: empty token sequence");
    if (L > cfg.max_seq_len)
        throw ConfigError("forward: sequence of " + std::to_string(L) + " tokens exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));

    using T = ag::Tensor<S>;
    auto P = [&](const T& param) { return opts.params_constant ? param.constant_view() : param; };

    // token + position embeddings
    T x = ag::add(ag::embedding_lookup(P(model.tok_emb), tokens),
                  ag::slice(P(model.pos_emb), 0, 0, L));

    // causal mask, shared across layers
    std::vector<S> mask_v(static_cast<size_t>(L) * L, S(0));
    for (int i = 0; i < L; ++i)
        for (int j = i + 1; j < L; ++j) mask_v[static_cast<size_t>(i) * L + j] = S(-1e9);
    const T causal = T::from({L, L}, std::move(mask_v));

    const int n_heads = cfg.n_heads;
    const int dh = cfg.d_model / n_heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult<S> result;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& W = model.layers[static_cast<size_t>(l)];

        T h = ag::layer_norm(x, P(W.ln1_gamma), P(W.ln1_beta));
        T q = ag::matmul(h, P(W.wq));
        T k = ag::matmul(h, P(W.wk));
        T v = ag::matmul(h, P(W.wv));

        T attn_out;
        for (int hd = 0; hd < n_heads; ++hd) {
            T qh = ag::slice(q, 1, hd * dh, dh);
            T kh = ag::slice(k, 1, hd * dh, dh);
            T vh = ag::slice(v, 1, hd * dh, dh);
            T scores = ag::add(ag::scale(ag::matmul(qh, kh, /*transpose_b=*/true), attn_scale), causal);
            T ctx = ag::matmul(ag::softmax(scores), vh);
            // rows [hd*dh, hd*dh+dh) of wo are this head's output projection
            T projected = ag::matmul(ctx, ag::slice(P(W.wo), 0, hd * dh, dh));
            attn_out = hd == 0 ? projected : ag::add(attn_out, projected);
        }
        x = ag::add(x, attn_out);

        T h2 = ag::layer_norm(x, P(W.ln2_gamma), P(W.ln2_beta));
        T act = ag::gelu(ag::add(ag::matmul(h2, P(W.ffn_w_in), /*transpose_b=*/true), P(W.ffn_b_in)));
        if (opts.ablate) {
            std::vector<S> keep(static_cast<size_t>(L) * cfg.d_ffn, S(1));
            for (const auto& [al, ai] : *opts.ablate)
                if (al == l)
                    for (int t = 0; t < L; ++t) keep[static_cast<size_t>(t) * cfg.d_ffn + ai] = S(0);
            act = ag::mul(act, T::from({L, cfg.d_ffn}, std::move(keep)));
        }
        if (opts.act_offset) {
            if (auto it = opts.act_offset->find(l); it != opts.act_offset->end())
                act = ag::add(act, T::from({L, cfg.d_ffn}, it->second));
        }
        if (opts.capture_ffn) {
            if (opts.params_constant) act.set_requires_grad(true);
            result.acts.ffn.push_back(act);
        }
        T ffn_out = ag::add(ag::matmul(act, P(W.ffn_w_out), /*transpose_b=*/true), P(W.ffn_b_out));
        x = ag::add(x, ffn_out);
    }

    T xf = ag::layer_norm(x, P(model.ln_f_gamma), P(model.ln_f_beta));
    result.last_logits = ag::matmul(ag::slice(xf, 0, L - 1, 1), P(model.head));
    return result;
}

// Full-vocabulary answer distribution at the final position, collapsed onto
// the candidate set and renormalized. Pure evaluation; activations are
// returned (without gradients) iff capture is requested.
template <class S>
std::map<int, double> answer_distribution(const ModelState<S>& model, std::span<const int> question,
                                          std::span<const int> candidates, bool capture = false,
                                          ActivationRecord<S>* captured = nullptr) {
    if (candidates.empty()) throw ConfigError("answer_distribution: empty candidate set");
    for (int c : candidates)
        if (c < 0 || c >= model.cfg.vocab_size)
            throw ConfigError("answer_distribution: unknown token id " + std::to_string(c));

    ForwardOptions<S> opts;
    opts.capture_ffn = capture;
    auto fwd = forward(model, question, opts);
    if (capture && captured) *captured = std::move(fwd.acts);

    const auto& logits = fwd.last_logits.values();
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, static_cast<double>(v));
    double denom = 0.0;
    std::vector<double> full(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        full[i] = std::exp(static_cast<double>(logits[i]) - mx);
        denom += full[i];
    }

    std::map<int, double> probs;
    for (int c : candidates) probs[c] = full[static_cast<size_t>(c)] / denom;
    double cand_sum = 0.0;
    for (auto& [c, p] : probs) cand_sum += p;
    if (cand_sum <= 0.0) {
        // degenerate underflow: fall back to uniform over candidates
        for (auto& [c, p] : probs) p = 1.0 / static_cast<double>(probs.size());
    } else {
        for (auto& [c, p] : probs) p /= cand_sum;
    }
    return probs;
}

// -log P(answer | question) over the full vocabulary; differentiable to all
// parameters when a tape is active.
template <class S>
ag::Tensor<S> lm_loss(const ModelState<S>& model, std::span<const int> question, int answer) {
    if (answer < 0 || answer >= model.cfg.vocab_size)
        throw ConfigError("lm_loss: unknown answer token id " + std::to_string(answer));
    auto fwd = forward(model, question);
    auto logp = ag::log_softmax(ag::reshape(fwd.last_logits, {model.cfg.vocab_size}));
    return ag::scale(ag::pick(logp, answer), -1.0);
}

// P(answer | question) as a scalar graph root with parameters constant and
// FFN activations as gradient roots. backward(root) then fills exactly
// d P / d activation on the returned record.
template <class S>
struct AnswerProbGraph {
    ag::Tensor<S> prob;
    ActivationRecord<S> acts;
};

template <class S>
AnswerProbGraph<S> answer_prob_graph(const ModelState<S>& model, std::span<const int> question,
                                     int answer) {
    if (answer < 0 || answer >= model.cfg.vocab_size)
        throw ConfigError("answer_prob_graph: unknown answer token id " + std::to_string(answer));
    ForwardOptions<S> opts;
    opts.capture_ffn = true;
    opts.params_constant = true;
    auto fwd = forward(model, question, opts);
    auto probs = ag::softmax(ag::reshape(fwd.last_logits, {model.cfg.vocab_size}));
    return {ag::pick(probs, answer), std::move(fwd.acts)};
}

// Plain SGD step. Without a mask every parameter moves by -lr * grad. With a
// mask, only the parameter image of the selected FFN neurons is updated; all
// other parameters (including attention and embeddings) stay bitwise intact.
template <class S>
void apply_gradients(ModelState<S>& model, double lr, const NeuronMask* mask = nullptr) {
    if (lr <= 0) throw ConfigError("apply_gradients: lr must be positive");

    if (!mask) {
        for (auto& [name, t] : model.named_parameters()) {
            if (!t->has_grad()) throw AutogradError("apply_gradients: missing gradient for " + name);
            auto& v = t->mutable_values();
            const auto& g = t->grad();
            for (size_t i = 0; i < v.size(); ++i) v[i] -= static_cast<S>(lr) * g[i];
        }
        ++model.step;
        return;
    }

    const int d_model = model.cfg.d_model;
    const int d_ffn = model.cfg.d_ffn;
    for (const auto& [l, i] : mask->selected) {
        if (l < 0 || l >= model.cfg.n_layers || i < 0 || i >= d_ffn)
            throw ConfigError("apply_gradients: mask entry (" + std::to_string(l) + "," +
                              std::to_string(i) + ") out of range");
        auto& W = model.layers[static_cast<size_t>(l)];
        if (!W.ffn_w_in.has_grad() || !W.ffn_b_in.has_grad() || !W.ffn_w_out.has_grad())
            throw AutogradError("apply_gradients: missing FFN gradients for masked update");

        auto& win = W.ffn_w_in.mutable_values();
        const auto& gwin = W.ffn_w_in.grad();
        for (int j = 0; j < d_model; ++j) {
            const size_t idx = static_cast<size_t>(i) * d_model + j;
            win[idx] -= static_cast<S>(lr) * gwin[idx];
        }
        auto& bin = W.ffn_b_in.mutable_values();
        bin[static_cast<size_t>(i)] -= static_cast<S>(lr) * W.ffn_b_in.grad()[static_cast<size_t>(i)];
        auto& wout = W.ffn_w_out.mutable_values();
        const auto& gwout = W.ffn_w_out.grad();
        for (int j = 0; j < d_model; ++j) {
            const size_t idx = static_cast<size_t>(j) * d_ffn + i;
            wout[idx] -= static_cast<S>(lr) * gwout[idx];
        }
    }
    ++model.step;
}

}  // namespace ulab::lm

#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// Tensors are cheap handles onto shared nodes. Recording happens on the
// thread's innermost GradTape; without an active tape, ops run pure forward
// math and produce bitwise-identical values. A tensor is immutable after
// creation except for its grad buffer (and the in-place parameter updates
// performed by an optimizer that owns it).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ulab/errors.hpp"

namespace ulab::ag {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

enum class OpKind {
    matmul,
    add,
    sub,
    mul,
    scale,
    embedding_lookup,
    layer_norm,
    gelu,
    softmax,
    log_softmax,
    softplus,
    reshape,
    slice,
    max_over_axis,
    sum_over_axis,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::embedding_lookup: return "embedding_lookup";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::gelu: return "gelu";
        case OpKind::softmax: return "softmax";
        case OpKind::log_softmax: return "log_softmax";
        case OpKind::softplus: return "softplus";
        case OpKind::reshape: return "reshape";
        case OpKind::slice: return "slice";
        case OpKind::max_over_axis: return "max_over_axis";
        case OpKind::sum_over_axis: return "sum_over_axis";
    }
    return "?";
}

// Thread-local strict mode: ops reject non-finite inputs while a guard lives.
namespace detail {
inline bool& strict_numerics_flag() {
    thread_local bool flag = false;
    return flag;
}
}  // namespace detail

struct StrictNumerics {
    StrictNumerics() : prev_(detail::strict_numerics_flag()) { detail::strict_numerics_flag() = true; }
    ~StrictNumerics() { detail::strict_numerics_flag() = prev_; }

private:
    bool prev_;
};

template <class S>
struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<S>> values;
    std::optional<std::vector<S>> grad;
    bool requires_grad = false;

    // Lineage: which tape entry produced this node. Valid only while the
    // recording tape (identified by generation) is alive.
    uint64_t lineage_gen = 0;
    int64_t lineage_index = -1;
    OpKind produced_by = OpKind::add;
};

template <class S>
class GradTape;

template <class S>
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        for (int d : shape)
            if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
        auto node = std::make_shared<TensorNode<S>>();
        node->shape = std::move(shape);
        node->values = std::make_shared<std::vector<S>>(std::move(values));
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = static_cast<size_t>(numel(shape));
        return from(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
    }

    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        const auto n = static_cast<size_t>(numel(shape));
        return from(std::move(shape), std::vector<S>(n, value), requires_grad);
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return numel(node_->shape); }

    const std::vector<S>& values() const { return *node_->values; }
    // In-place mutation is reserved for parameter updates by a single writer.
    std::vector<S>& mutable_values() { return *node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return node_->grad.has_value(); }
    const std::vector<S>& grad() const {
        if (!node_->grad) throw AutogradError("tensor has no gradient; run backward first");
        return *node_->grad;
    }
    void clear_grad() { node_->grad.reset(); }

    bool has_lineage() const { return node_->lineage_index >= 0; }

    S item() const {
        if (size() != 1) throw ShapeError("item(): tensor " + shape_str(shape()) + " is not scalar");
        return (*node_->values)[0];
    }

    // A handle to the same value storage that takes no gradients and carries
    // no lineage. Used to run a model's parameters as constants.
    Tensor constant_view() const {
        auto node = std::make_shared<TensorNode<S>>();
        node->shape = node_->shape;
        node->values = node_->values;
        node->requires_grad = false;
        return Tensor(std::move(node));
    }

    // Deep copy of values only.
    Tensor clone_detached(bool requires_grad = false) const {
        return from(node_->shape, *node_->values, requires_grad);
    }

    std::shared_ptr<TensorNode<S>> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode<S>> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode<S>> node_;

    friend class GradTape<S>;
};

// Records the forward ops of one computation in execution (topological)
// order. backward() replays entries in reverse, visiting each at most once.
// Destroying or resetting the tape frees all recorded lineage.
template <class S>
class GradTape {
public:
    GradTape() : generation_(next_generation()) {
        parent_ = active_ptr();
        active_ptr() = this;
    }
    ~GradTape() { active_ptr() = parent_; }
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active() { return active_ptr(); }

    uint64_t generation() const { return generation_; }
    size_t size() const { return entries_.size(); }
    size_t last_backward_visits() const { return last_visits_; }
    bool backward_done() const { return backward_done_; }

    void reset() {
        entries_.clear();
        backward_done_ = false;
        last_visits_ = 0;
        generation_ = next_generation();
    }

    void record(OpKind kind, std::shared_ptr<TensorNode<S>> output, std::function<void()> backward_fn) {
        output->lineage_gen = generation_;
        output->lineage_index = static_cast<int64_t>(entries_.size());
        output->produced_by = kind;
        entries_.push_back(Entry{kind, std::move(output), std::move(backward_fn)});
    }

    enum class Accumulate { strict, allow };

    void backward(const Tensor<S>& root, Accumulate mode = Accumulate::strict) {
        auto node = root.node();
        if (!node) throw AutogradError("backward: undefined tensor");
        if (numel(node->shape) != 1)
            throw AutogradError("backward: root must be scalar, got " + shape_str(node->shape));
        if (node->lineage_index < 0 || node->lineage_gen != generation_)
            throw AutogradError("backward: root has no lineage on this tape");
        if (backward_done_ && mode == Accumulate::strict)
            throw AutogradError("backward: tape already consumed; reset first or allow accumulation");
        if (backward_done_) {
            // Accumulation is a leaf-grad notion: intermediate grads from the
            // previous sweep must not feed the new one twice.
            for (Entry& e : entries_) e.output->grad.reset();
        }

        if (!node->grad) node->grad = std::vector<S>(1, S(0));
        (*node->grad)[0] += S(1);

        last_visits_ = 0;
        for (int64_t i = node->lineage_index; i >= 0; --i) {
            Entry& e = entries_[static_cast<size_t>(i)];
            if (e.output->grad.has_value()) {
                e.backward();
                ++last_visits_;
            }
        }
        backward_done_ = true;
    }

private:
    struct Entry {
        OpKind kind;
        std::shared_ptr<TensorNode<S>> output;
        std::function<void()> backward;
    };

    static GradTape*& active_ptr() {
        thread_local GradTape* active = nullptr;
        return active;
    }
    static uint64_t next_generation() {
        thread_local uint64_t gen = 0;
        return ++gen;
    }

    std::vector<Entry> entries_;
    GradTape* parent_ = nullptr;
    uint64_t generation_;
    bool backward_done_ = false;
    size_t last_visits_ = 0;
};

template <class S>
void backward(const Tensor<S>& root,
              typename GradTape<S>::Accumulate mode = GradTape<S>::Accumulate::strict) {
    auto* tape = GradTape<S>::active();
    if (!tape) throw AutogradError("backward: no active tape (root has no lineage)");
    tape->backward(root, mode);
}

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

template <class S>
void ensure_grad(const std::shared_ptr<TensorNode<S>>& node) {
    if (!node->grad) node->grad = std::vector<S>(node->values->size(), S(0));
}

template <class S>
void check_finite(OpKind kind, const Tensor<S>& t) {
    if (!strict_numerics_flag()) return;
    for (S v : t.values())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(op_name(kind)) + ": non-finite input value");
}

// Builds the output tensor and, when recording applies, asks `make_backward`
// for a closure. The closure receives the finished output node so it can read
// the upstream gradient.
template <class S, class MakeBackward>
Tensor<S> make_output(OpKind kind, Shape shape, std::vector<S> values,
                      std::initializer_list<Tensor<S>> inputs, MakeBackward&& make_backward) {
    Tensor<S> out = Tensor<S>::from(std::move(shape), std::move(values));
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    auto* tape = GradTape<S>::active();
    if (tape && needs) {
        out.set_requires_grad(true);
        tape->record(kind, out.node(), make_backward(out.node()));
    }
    return out;
}

// Decompose an nd index space around one axis: (outer, axis_dim, inner).
inline void axis_split(const Shape& shape, int axis, int64_t& outer, int64_t& dim, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    dim = shape[axis];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline void check_axis(OpKind kind, const Shape& shape, int axis) {
    if (axis < 0 || static_cast<size_t>(axis) >= shape.size())
        throw ShapeError(std::string(op_name(kind)) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ops

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b = false) {
    detail::check_finite(OpKind::matmul, a);
    detail::check_finite(OpKind::matmul, b);
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError(std::string("matmul: expects 2-d operands, got ") + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const int m = a.shape()[0];
    const int k = a.shape()[1];
    const int bk = transpose_b ? b.shape()[1] : b.shape()[0];
    const int n = transpose_b ? b.shape()[0] : b.shape()[1];
    if (k != bk)
        throw ShapeError(std::string("matmul: inner dimensions differ, ") + shape_str(a.shape()) +
                         (transpose_b ? " x transposed " : " x ") + shape_str(b.shape()));

    std::vector<S> out(static_cast<size_t>(m) * n, S(0));
    const auto& av = a.values();
    const auto& bv = b.values();
    if (!transpose_b) {
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const S aip = av[static_cast<size_t>(i) * k + p];
                const S* brow = bv.data() + static_cast<size_t>(p) * n;
                S* orow = out.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
            }
    } else {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const S* arow = av.data() + static_cast<size_t>(i) * k;
                const S* brow = bv.data() + static_cast<size_t>(j) * k;
                S acc = S(0);
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                out[static_cast<size_t>(i) * n + j] = acc;
            }
    }

    auto an = a.node();
    auto bn = b.node();
    return detail::make_output<S>(OpKind::matmul, {m, n}, std::move(out), {a, b}, [&](auto on) {
        return [an, bn, on, m, n, k, transpose_b]() {
            const auto& g = *on->grad;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                auto& ga = *an->grad;
                const auto& bvv = *bn->values;
                if (!transpose_b) {
                    // ga += g . b^T
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < k; ++p) {
                            S acc = S(0);
                            const S* grow = g.data() + static_cast<size_t>(i) * n;
                            const S* brow = bvv.data() + static_cast<size_t>(p) * n;
                            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            ga[static_cast<size_t>(i) * k + p] += acc;
                        }
                } else {
                    // ga += g . b
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            const S gij = g[static_cast<size_t>(i) * n + j];
                            const S* brow = bvv.data() + static_cast<size_t>(j) * k;
                            S* garow = ga.data() + static_cast<size_t>(i) * k;
                            for (int p = 0; p < k; ++p) garow[p] += gij * brow[p];
                        }
                }
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                auto& gb = *bn->grad;
                const auto& avv = *an->values;
                if (!transpose_b) {
                    // gb += a^T . g
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < k; ++p) {
                            const S aip = avv[static_cast<size_t>(i) * k + p];
                            const S* grow = g.data() + static_cast<size_t>(i) * n;
                            S* gbrow = gb.data() + static_cast<size_t>(p) * n;
                            for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                        }
                } else {
                    // gb += g^T . a
                    for (int j = 0; j < n; ++j)
                        for (int i = 0; i < m; ++i) {
                            const S gij = g[static_cast<size_t>(i) * n + j];
                            const S* arow = avv.data() + static_cast<size_t>(i) * k;
                            S* gbrow = gb.data() + static_cast<size_t>(j) * k;
                            for (int p = 0; p < k; ++p) gbrow[p] += gij * arow[p];
                        }
                }
            }
        };
    });
}

// Elementwise sum; a rank-1 right operand matching the last dimension is
// broadcast across rows (bias add).
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_finite(OpKind::add, a);
    detail::check_finite(OpKind::add, b);
    const bool same = a.shape() == b.shape();
    const bool bias = !same && b.shape().size() == 1 && !a.shape().empty() &&
                      b.shape()[0] == a.shape().back();
    if (!same && !bias)
        throw ShapeError(std::string("add: incompatible shapes ") + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));

    std::vector<S> out = a.values();
    const auto& bv = b.values();
    if (same) {
        for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    } else {
        const size_t d = bv.size();
        for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i % d];
    }

    auto an = a.node();
    auto bn = b.node();
    return detail::make_output<S>(OpKind::add, a.shape(), std::move(out), {a, b}, [&](auto on) {
        return [an, bn, on, same]() {
            const auto& g = *on->grad;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                auto& ga = *an->grad;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                auto& gb = *bn->grad;
                if (same) {
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                } else {
                    const size_t d = gb.size();
                    for (size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                }
            }
        };
    });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_finite(OpKind::sub, a);
    detail::check_finite(OpKind::sub, b);
    if (a.shape() != b.shape())
        throw ShapeError(std::string("sub: incompatible shapes ") + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    std::vector<S> out = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];

    auto an = a.node();
    auto bn = b.node();
    return detail::make_output<S>(OpKind::sub, a.shape(), std::move(out), {a, b}, [&](auto on) {
        return [an, bn, on]() {
            const auto& g = *on->grad;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                auto& ga = *an->grad;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                auto& gb = *bn->grad;
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    });
}

// Elementwise product; a scalar right operand broadcasts.
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_finite(OpKind::mul, a);
    detail::check_finite(OpKind::mul, b);
    const bool same = a.shape() == b.shape();
    const bool scalar_rhs = !same && b.size() == 1;
    if (!same && !scalar_rhs)
        throw ShapeError(std::string("mul: incompatible shapes ") + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));

    std::vector<S> out = a.values();
    const auto& bv = b.values();
    if (same)
        for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    else
        for (auto& v : out) v *= bv[0];

    auto an = a.node();
    auto bn = b.node();
    return detail::make_output<S>(OpKind::mul, a.shape(), std::move(out), {a, b}, [&](auto on) {
        return [an, bn, on, same]() {
            const auto& g = *on->grad;
            const auto& av = *an->values;
            const auto& bv2 = *bn->values;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                auto& ga = *an->grad;
                if (same)
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                else
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[0];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                auto& gb = *bn->grad;
                if (same)
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                else {
                    S acc = S(0);
                    for (size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                    gb[0] += acc;
                }
            }
        };
    });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, double factor) {
    detail::check_finite(OpKind::scale, a);
    std::vector<S> out = a.values();
    for (auto& v : out) v = static_cast<S>(v * static_cast<S>(factor));

    auto an = a.node();
    return detail::make_output<S>(OpKind::scale, a.shape(), std::move(out), {a}, [&](auto on) {
        return [an, on, factor]() {
            if (!an->requires_grad) return;
            detail::ensure_grad(an);
            const auto& g = *on->grad;
            auto& ga = *an->grad;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * static_cast<S>(factor);
        };
    });
}

// Rows of `table` gathered by token id; output (len(ids), d).
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, std::span<const int> ids) {
    detail::check_finite(OpKind::embedding_lookup, table);
    if (table.shape().size() != 2)
        throw ShapeError("embedding_lookup: table must be 2-d, got " + shape_str(table.shape()));
    const int vocab = table.shape()[0];
    const int d = table.shape()[1];
    if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw ConfigError("embedding_lookup: unknown token id " + std::to_string(id) +
                              " (vocab size " + std::to_string(vocab) + ")");

    const int L = static_cast<int>(ids.size());
    std::vector<S> out(static_cast<size_t>(L) * d);
    const auto& tv = table.values();
    for (int t = 0; t < L; ++t)
        std::copy_n(tv.data() + static_cast<size_t>(ids[t]) * d, d, out.data() + static_cast<size_t>(t) * d);

    auto tn = table.node();
    std::vector<int> ids_copy(ids.begin(), ids.end());
    return detail::make_output<S>(OpKind::embedding_lookup, {L, d}, std::move(out), {table},
                                  [&](auto on) {
                                      return [tn, on, ids_copy, d]() {
                                          if (!tn->requires_grad) return;
                                          detail::ensure_grad(tn);
                                          const auto& g = *on->grad;
                                          auto& gt = *tn->grad;
                                          for (size_t t = 0; t < ids_copy.size(); ++t) {
                                              S* row = gt.data() + static_cast<size_t>(ids_copy[t]) * d;
                                              const S* grow = g.data() + t * d;
                                              for (int j = 0; j < d; ++j) row[j] += grow[j];
                                          }
                                      };
                                  });
}

// Row-wise layer normalization over the last dimension of a 2-d input.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
    detail::check_finite(OpKind::layer_norm, x);
    if (x.shape().size() != 2)
        throw ShapeError("layer_norm: input must be 2-d, got " + shape_str(x.shape()));
    const int rows = x.shape()[0];
    const int d = x.shape()[1];
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw ShapeError("layer_norm: gamma/beta must be " + shape_str({d}) + ", got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));

    std::vector<S> out(static_cast<size_t>(rows) * d);
    std::vector<S> xhat(out.size());
    std::vector<S> inv_std(static_cast<size_t>(rows));
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (int r = 0; r < rows; ++r) {
        const S* row = xv.data() + static_cast<size_t>(r) * d;
        S mean = S(0);
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (int j = 0; j < d; ++j) {
            const S c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
        inv_std[static_cast<size_t>(r)] = inv;
        for (int j = 0; j < d; ++j) {
            const S xh = (row[j] - mean) * inv;
            xhat[static_cast<size_t>(r) * d + j] = xh;
            out[static_cast<size_t>(r) * d + j] = gv[j] * xh + bv[j];
        }
    }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_output<S>(
        OpKind::layer_norm, x.shape(), std::move(out), {x, gamma, beta},
        [&](auto on) {
            return [xn, gn, bn, on, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d]() {
                const auto& g = *on->grad;
                const auto& gv2 = *gn->values;
                if (gn->requires_grad) {
                    detail::ensure_grad(gn);
                    auto& gg = *gn->grad;
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < d; ++j)
                            gg[j] += g[static_cast<size_t>(r) * d + j] * xhat[static_cast<size_t>(r) * d + j];
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(bn);
                    auto& gb = *bn->grad;
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < d; ++j) gb[j] += g[static_cast<size_t>(r) * d + j];
                }
                if (xn->requires_grad) {
                    detail::ensure_grad(xn);
                    auto& gx = *xn->grad;
                    for (int r = 0; r < rows; ++r) {
                        const size_t off = static_cast<size_t>(r) * d;
                        S mean_gy = S(0);
                        S mean_gy_xhat = S(0);
                        for (int j = 0; j < d; ++j) {
                            const S gy = g[off + j] * gv2[j];
                            mean_gy += gy;
                            mean_gy_xhat += gy * xhat[off + j];
                        }
                        mean_gy /= static_cast<S>(d);
                        mean_gy_xhat /= static_cast<S>(d);
                        const S inv = inv_std[static_cast<size_t>(r)];
                        for (int j = 0; j < d; ++j) {
                            const S gy = g[off + j] * gv2[j];
                            gx[off + j] += inv * (gy - mean_gy - xhat[off + j] * mean_gy_xhat);
                        }
                    }
                }
            };
        });
}

// Exact gelu: 0.5 x (1 + erf(x / sqrt 2)).
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
    detail::check_finite(OpKind::gelu, x);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<S> out = x.values();
    for (auto& v : out) {
        const double xv = static_cast<double>(v);
        v = static_cast<S>(0.5 * xv * (1.0 + std::erf(xv * inv_sqrt2)));
    }

    auto xn = x.node();
    return detail::make_output<S>(OpKind::gelu, x.shape(), std::move(out), {x}, [&](auto on) {
        return [xn, on, inv_sqrt2, inv_sqrt2pi]() {
            if (!xn->requires_grad) return;
            detail::ensure_grad(xn);
            const auto& g = *on->grad;
            const auto& xv = *xn->values;
            auto& gx = *xn->grad;
            for (size_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>(xv[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * static_cast<S>(cdf + v * pdf);
            }
        };
    });
}

// Softmax over the last dimension.
template <class S>
Tensor<S> softmax(const Tensor<S>& x) {
    detail::check_finite(OpKind::softmax, x);
    if (x.shape().empty()) throw ShapeError("softmax: rank-0 input");
    const int d = x.shape().back();
    const int64_t rows = numel(x.shape()) / d;

    std::vector<S> out = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        S* row = out.data() + static_cast<size_t>(r) * d;
        S mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        S sum = S(0);
        for (int j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < d; ++j) row[j] /= sum;
    }

    auto xn = x.node();
    return detail::make_output<S>(OpKind::softmax, x.shape(), std::move(out), {x}, [&](auto on) {
        return [xn, on, d, rows]() {
            if (!xn->requires_grad) return;
            detail::ensure_grad(xn);
            const auto& g = *on->grad;
            const auto& y = *on->values;
            auto& gx = *xn->grad;
            for (int64_t r = 0; r < rows; ++r) {
                const size_t off = static_cast<size_t>(r) * d;
                S dot = S(0);
                for (int j = 0; j < d; ++j) dot += g[off + j] * y[off + j];
                for (int j = 0; j < d; ++j) gx[off + j] += y[off + j] * (g[off + j] - dot);
            }
        };
    });
}

// log(softmax(x)) over the last dimension, computed stably.
template <class S>
Tensor<S> log_softmax(const Tensor<S>& x) {
    detail::check_finite(OpKind::log_softmax, x);
    if (x.shape().empty()) throw ShapeError("log_softmax: rank-0 input");
    const int d = x.shape().back();
    const int64_t rows = numel(x.shape()) / d;

    std::vector<S> out = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        S* row = out.data() + static_cast<size_t>(r) * d;
        S mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        S sum = S(0);
        for (int j = 0; j < d; ++j) sum += std::exp(row[j] - mx);
        const S lse = mx + std::log(sum);
        for (int j = 0; j < d; ++j) row[j] -= lse;
    }

    auto xn = x.node();
    return detail::make_output<S>(OpKind::log_softmax, x.shape(), std::move(out), {x}, [&](auto on) {
        return [xn, on, d, rows]() {
            if (!xn->requires_grad) return;
            detail::ensure_grad(xn);
            const auto& g = *on->grad;
            const auto& y = *on->values;
            auto& gx = *xn->grad;
            for (int64_t r = 0; r < rows; ++r) {
                const size_t off = static_cast<size_t>(r) * d;
                S gsum = S(0);
                for (int j = 0; j < d; ++j) gsum += g[off + j];
                for (int j = 0; j < d; ++j)
                    gx[off + j] += g[off + j] - std::exp(y[off + j]) * gsum;
            }
        };
    });
}

// log(1 + exp(x)), elementwise, overflow-safe.
template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
    detail::check_finite(OpKind::softplus, x);
    std::vector<S> out = x.values();
    for (auto& v : out) {
        const double xv = static_cast<double>(v);
        v = static_cast<S>(std::max(xv, 0.0) + std::log1p(std::exp(-std::abs(xv))));
    }

    auto xn = x.node();
    return detail::make_output<S>(OpKind::softplus, x.shape(), std::move(out), {x}, [&](auto on) {
        return [xn, on]() {
            if (!xn->requires_grad) return;
            detail::ensure_grad(xn);
            const auto& g = *on->grad;
            const auto& xv = *xn->values;
            auto& gx = *xn->grad;
            for (size_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>(xv[i]);
                const double sig = 1.0 / (1.0 + std::exp(-v));
                gx[i] += g[i] * static_cast<S>(sig);
            }
        };
    });
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    auto xn = x.node();
    return detail::make_output<S>(OpKind::reshape, std::move(new_shape), x.values(), {x},
                                  [&](auto on) {
                                      return [xn, on]() {
                                          if (!xn->requires_grad) return;
                                          detail::ensure_grad(xn);
                                          const auto& g = *on->grad;
                                          auto& gx = *xn->grad;
                                          for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                      };
                                  });
}

// Contiguous range [start, start+len) along one axis.
template <class S>
Tensor<S> slice(const Tensor<S>& x, int axis, int start, int len) {
    detail::check_axis(OpKind::slice, x.shape(), axis);
    const int dim = x.shape()[axis];
    if (len <= 0 || start < 0 || start + len > dim)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") invalid for axis " + std::to_string(axis) +
                         " of " + shape_str(x.shape()));

    int64_t outer, d, inner;
    detail::axis_split(x.shape(), axis, outer, d, inner);
    Shape out_shape = x.shape();
    out_shape[axis] = len;

    std::vector<S> out(static_cast<size_t>(outer) * len * inner);
    const auto& xv = x.values();
    for (int64_t o = 0; o < outer; ++o)
        for (int a = 0; a < len; ++a)
            std::copy_n(xv.data() + ((o * d + start + a) * inner),
                        inner, out.data() + ((o * len + a) * inner));

    auto xn = x.node();
    return detail::make_output<S>(OpKind::slice, std::move(out_shape), std::move(out), {x},
                                  [&](auto on) {
                                      return [xn, on, outer, d, inner, start, len]() {
                                          if (!xn->requires_grad) return;
                                          detail::ensure_grad(xn);
                                          const auto& g = *on->grad;
                                          auto& gx = *xn->grad;
                                          for (int64_t o = 0; o < outer; ++o)
                                              for (int a = 0; a < len; ++a) {
                                                  const S* src = g.data() + ((o * len + a) * inner);
                                                  S* dst = gx.data() + ((o * d + start + a) * inner);
                                                  for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                                              }
                                      };
                                  });
}

// Maximum over one axis; ties resolve to the lowest index so replay and
// gradient routing are deterministic.
template <class S>
Tensor<S> max_over_axis(const Tensor<S>& x, int axis) {
    detail::check_finite(OpKind::max_over_axis, x);
    detail::check_axis(OpKind::max_over_axis, x.shape(), axis);
    int64_t outer, d, inner;
    detail::axis_split(x.shape(), axis, outer, d, inner);

    Shape out_shape;
    for (int i = 0; i < static_cast<int>(x.shape().size()); ++i)
        if (i != axis) out_shape.push_back(x.shape()[i]);
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<S> out(static_cast<size_t>(outer) * inner);
    std::vector<int> argmax(out.size());
    const auto& xv = x.values();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            S best = xv[(o * d) * inner + i];
            int best_j = 0;
            for (int j = 1; j < d; ++j) {
                const S v = xv[(o * d + j) * inner + i];
                if (v > best) {
                    best = v;
                    best_j = j;
                }
            }
            out[o * inner + i] = best;
            argmax[o * inner + i] = best_j;
        }

    auto xn = x.node();
    return detail::make_output<S>(OpKind::max_over_axis, std::move(out_shape), std::move(out), {x},
                                  [&](auto on) {
                                      return [xn, on, argmax = std::move(argmax), outer, d, inner]() {
                                          if (!xn->requires_grad) return;
                                          detail::ensure_grad(xn);
                                          const auto& g = *on->grad;
                                          auto& gx = *xn->grad;
                                          for (int64_t o = 0; o < outer; ++o)
                                              for (int64_t i = 0; i < inner; ++i) {
                                                  const int j = argmax[o * inner + i];
                                                  gx[(o * d + j) * inner + i] += g[o * inner + i];
                                              }
                                      };
                                  });
}

template <class S>
Tensor<S> sum_over_axis(const Tensor<S>& x, int axis) {
    detail::check_finite(OpKind::sum_over_axis, x);
    detail::check_axis(OpKind::sum_over_axis, x.shape(), axis);
    int64_t outer, d, inner;
    detail::axis_split(x.shape(), axis, outer, d, inner);

    Shape out_shape;
    for (int i = 0; i < static_cast<int>(x.shape().size()); ++i)
        if (i != axis) out_shape.push_back(x.shape()[i]);
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<S> out(static_cast<size_t>(outer) * inner, S(0));
    const auto& xv = x.values();
    for (int64_t o = 0; o < outer; ++o)
        for (int j = 0; j < d; ++j)
            for (int64_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * d + j) * inner + i];

    auto xn = x.node();
    return detail::make_output<S>(OpKind::sum_over_axis, std::move(out_shape), std::move(out), {x},
                                  [&](auto on) {
                                      return [xn, on, outer, d, inner]() {
                                          if (!xn->requires_grad) return;
                                          detail::ensure_grad(xn);
                                          const auto& g = *on->grad;
                                          auto& gx = *xn->grad;
                                          for (int64_t o = 0; o < outer; ++o)
                                              for (int j = 0; j < d; ++j)
                                                  for (int64_t i = 0; i < inner; ++i)
                                                      gx[(o * d + j) * inner + i] += g[o * inner + i];
                                      };
                                  });
}

// ---------------------------------------------------------------------------
// small conveniences built from the ops above

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
    Tensor<S> flat = reshape(x, {static_cast<int>(x.size())});
    return sum_over_axis(flat, 0);
}

// Scalar element x[flat_index] of a 1-d tensor.
template <class S>
Tensor<S> pick(const Tensor<S>& x, int index) {
    if (x.shape().size() != 1) throw ShapeError("pick: expects 1-d input, got " + shape_str(x.shape()));
    return slice(x, 0, index, 1);
}

inline uint64_t bytes_checksum(const void* data, size_t n) {
    uint64_t h = 0xcbf29ce484222325ull;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

template <class S>
uint64_t values_checksum(const Tensor<S>& t) {
    return bytes_checksum(t.values().data(), t.values().size() * sizeof(S));
}

}  // namespace ulab::ag

#include "ulab/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "ulab/rng.hpp"
#include "ulab/tensor.hpp"

namespace ulab::unlearn {

uint64_t AttributionMap::content_hash() const {
    return ag::bytes_checksum(scores.data(), scores.size() * sizeof(double));
}

AttributionMap mean_maps(const std::vector<AttributionMap>& maps) {
    if (maps.empty()) throw ConfigError("mean_maps: no maps");
    AttributionMap out = AttributionMap::zeros(maps[0].n_layers, maps[0].d_ffn);
    for (const auto& m : maps) {
        if (m.n_layers != out.n_layers || m.d_ffn != out.d_ffn)
            throw ConfigError("mean_maps: shape mismatch");
        for (size_t i = 0; i < out.scores.size(); ++i) out.scores[i] += m.scores[i];
    }
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (auto& v : out.scores) v *= inv;
    return out;
}

AttributionMap apply_regularization(const AttributionMap& base,
                                    const std::vector<AttributionMap>& mismatched, double alpha) {
    if (alpha < 0) throw ConfigError("apply_regularization: alpha must be non-negative");
    AttributionMap out = base;
    out.regularized = true;
    if (mismatched.empty() || alpha == 0.0) return out;

    const double inv_n = 1.0 / static_cast<double>(mismatched.size());
    for (const auto& m : mismatched) {
        if (m.n_layers != base.n_layers || m.d_ffn != base.d_ffn)
            throw ConfigError("apply_regularization: shape mismatch");
        for (size_t i = 0; i < out.scores.size(); ++i)
            out.scores[i] -= alpha * inv_n * std::max(0.0, m.scores[i]);
    }
    return out;
}

NeuronMask select_neurons(const AttributionMap& attr, double p) {
    if (p < 0.0 || p > 1.0) throw ConfigError("select_neurons: p must lie in [0,1]");
    for (double v : attr.scores)
        if (std::isnan(v)) throw NumericError("select_neurons: NaN attribution score");

    const auto total = attr.total();
    const auto keep = static_cast<int64_t>(std::ceil(p * static_cast<double>(total)));

    std::vector<int64_t> order(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&attr](int64_t a, int64_t b) {
        const double sa = attr.scores[static_cast<size_t>(a)];
        const double sb = attr.scores[static_cast<size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;  // ties: ascending (layer, neuron)
    });

    NeuronMask mask;
    mask.origin_hash = attr.content_hash();
    mask.selected.reserve(static_cast<size_t>(keep));
    for (int64_t i = 0; i < keep; ++i) {
        const int64_t flat = order[static_cast<size_t>(i)];
        mask.selected.emplace_back(static_cast<int>(flat / attr.d_ffn),
                                   static_cast<int>(flat % attr.d_ffn));
    }
    std::sort(mask.selected.begin(), mask.selected.end());
    return mask;
}

}  // namespace ulab::unlearn

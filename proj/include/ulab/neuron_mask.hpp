#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace ulab {

// A set of FFN hidden units, addressed as (layer, neuron). A unit's parameter
// image is row `neuron` of that layer's FFN input weight, entry `neuron` of
// the input bias, and column `neuron` of the output weight; a masked update
// touches nothing else.
struct NeuronMask {
    std::vector<std::pair<int, int>> selected;  // unique, sorted
    uint64_t origin_hash = 0;                   // hash of the attribution it came from

    bool empty() const { return selected.empty(); }
    size_t size() const { return selected.size(); }
};

}  // namespace ulab

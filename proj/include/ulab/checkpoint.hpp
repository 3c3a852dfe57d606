#pragma once

// Versioned binary model container: config, seed, step counter, and named
// parameter arrays, byte-exact across save/load.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ulab/errors.hpp"
#include "ulab/microlm.hpp"

namespace ulab::lm {

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'U', 'L', 'A', 'B', 'C', 'K', '0', '1'};

template <class T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint '" + path.string() + "' truncated");
    return v;
}

}  // namespace ckpt_detail

template <class S>
void save_checkpoint(const ModelState<S>& model, const std::filesystem::path& path) {
    namespace d = ckpt_detail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");

    out.write(d::kMagic, sizeof(d::kMagic));
    d::put<uint8_t>(out, sizeof(S));
    d::put<int32_t>(out, model.cfg.vocab_size);
    d::put<int32_t>(out, model.cfg.d_model);
    d::put<int32_t>(out, model.cfg.n_layers);
    d::put<int32_t>(out, model.cfg.n_heads);
    d::put<int32_t>(out, model.cfg.d_ffn);
    d::put<int32_t>(out, model.cfg.max_seq_len);
    d::put<uint64_t>(out, model.cfg.seed);
    d::put<int64_t>(out, model.step);

    const auto params = model.named_parameters();
    d::put<uint32_t>(out, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        d::put<uint16_t>(out, static_cast<uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        d::put<uint8_t>(out, static_cast<uint8_t>(t->shape().size()));
        for (int dim : t->shape()) d::put<int32_t>(out, dim);
        out.write(reinterpret_cast<const char*>(t->values().data()),
                  static_cast<std::streamsize>(t->values().size() * sizeof(S)));
    }
    if (!out) throw DataError("write to '" + path.string() + "' failed");
}

// Scalar width stored in the file (4 or 8 bytes).
inline int checkpoint_precision(const std::filesystem::path& path) {
    namespace d = ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, d::kMagic, sizeof(magic)) != 0)
        throw DataError("'" + path.string() + "' is not a model checkpoint");
    return d::get<uint8_t>(in, path);
}

template <class S>
ModelState<S> load_checkpoint(const std::filesystem::path& path) {
    namespace d = ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, d::kMagic, sizeof(magic)) != 0)
        throw DataError("'" + path.string() + "' is not a model checkpoint");
    const auto width = d::get<uint8_t>(in, path);
    if (width != sizeof(S))
        throw DataError("checkpoint '" + path.string() + "' stores " + std::to_string(width * 8) +
                        "-bit values, expected " + std::to_string(sizeof(S) * 8) + "-bit");

    ModelConfig cfg;
    cfg.vocab_size = d::get<int32_t>(in, path);
    cfg.d_model = d::get<int32_t>(in, path);
    cfg.n_layers = d::get<int32_t>(in, path);
    cfg.n_heads = d::get<int32_t>(in, path);
    cfg.d_ffn = d::get<int32_t>(in, path);
    cfg.max_seq_len = d::get<int32_t>(in, path);
    cfg.seed = d::get<uint64_t>(in, path);
    const auto step = d::get<int64_t>(in, path);

    ModelState<S> model = init_model<S>(cfg);
    model.step = step;

    const auto n_params = d::get<uint32_t>(in, path);
    auto params = model.named_parameters();
    if (n_params != params.size())
        throw DataError("checkpoint '" + path.string() + "' parameter count mismatch");
    for (auto& [name, t] : params) {
        const auto name_len = d::get<uint16_t>(in, path);
        std::string stored(name_len, '\0');
        in.read(stored.data(), name_len);
        if (!in || stored != name)
            throw DataError("checkpoint '" + path.string() + "': expected parameter '" + name +
                            "', found '" + stored + "'");
        const auto ndim = d::get<uint8_t>(in, path);
        ag::Shape shape(ndim);
        for (auto& dim : shape) dim = d::get<int32_t>(in, path);
        if (shape != t->shape())
            throw DataError("checkpoint '" + path.string() + "': shape mismatch for '" + name + "'");
        auto& v = t->mutable_values();
        in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(S)));
        if (!in) throw DataError("checkpoint '" + path.string() + "' truncated");
    }
    return model;
}

}  // namespace ulab::lm

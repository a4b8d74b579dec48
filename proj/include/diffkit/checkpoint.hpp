// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "diffkit/errors.hpp"
#include "diffkit/params.hpp"
#include "diffkit/tensor.hpp"

namespace diffkit::checkpoint {

// Container layout (little-endian):
//   magic 'DFCK' | u32 version | u64 global_step
//   | u8 has_latent_scale | f64 latent_scale
//   | u32 config_len | config bytes (canonical flat key = value text)
//   | u32 tensor_count | per tensor: u32 name_len, name, u32 ndim, u64 dims[],
//     f32 data[]
// Model tensors come first, optimizer moments follow under "opt.m."/"opt.v."
// prefixes. save(load(x)) is byte-identical.

inline constexpr char kMagic[4] = {'D', 'F', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
    std::string config_text;
    std::uint64_t global_step = 0;
    std::optional<double> latent_scale;
    ParamStore<float> tensors;
};

namespace detail {
template <typename V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_pod(std::istream& is, const char* what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError(std::string("checkpoint: truncated while reading ") + what);
    return v;
}
} // namespace detail

inline void save(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    detail::write_pod(os, kVersion);
    detail::write_pod(os, ck.global_step);
    detail::write_pod(os, static_cast<std::uint8_t>(ck.latent_scale.has_value() ? 1 : 0));
    detail::write_pod(os, ck.latent_scale.value_or(0.0));
    detail::write_pod(os, static_cast<std::uint32_t>(ck.config_text.size()));
    os.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
    detail::write_pod(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
        const std::string& name = ck.tensors.name(i);
        const Tensor<float>& t = ck.tensors.tensor(i);
        detail::write_pod(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod(os, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t d = 0; d < t.ndim(); ++d)
            detail::write_pod(os, static_cast<std::uint64_t>(t.dim(d)));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!os) throw DataError("checkpoint: write failed for " + path);
}

inline Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("checkpoint: bad magic in " + path + " (not a checkpoint file)");
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kVersion)
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.global_step = detail::read_pod<std::uint64_t>(is, "global_step");
    const auto has_scale = detail::read_pod<std::uint8_t>(is, "latent_scale flag");
    const auto scale = detail::read_pod<double>(is, "latent_scale");
    if (has_scale) ck.latent_scale = scale;
    const auto config_len = detail::read_pod<std::uint32_t>(is, "config length");
    ck.config_text.resize(config_len);
    is.read(ck.config_text.data(), config_len);
    if (!is) throw DataError("checkpoint: truncated config text in " + path);
    const auto count = detail::read_pod<std::uint32_t>(is, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is, "tensor name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw DataError("checkpoint: truncated tensor name in " + path);
        const auto ndim = detail::read_pod<std::uint32_t>(is, "tensor rank");
        Shape shape(ndim);
        for (std::uint32_t d = 0; d < ndim; ++d)
            shape[d] = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, "tensor dim"));
        std::vector<float> values(shape_numel(shape));
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(float)));
        if (is.gcount() != static_cast<std::streamsize>(values.size() * sizeof(float)))
            throw DataError("checkpoint: truncated tensor data for '" + name + "' in " + path);
        ck.tensors.add(name, Tensor<float>::from_data(std::move(shape), std::move(values)));
    }
    return ck;
}

/// Copies checkpoint tensors into an initialized parameter store, verifying
/// that every expected name exists with the right shape.
inline void restore_into(const Checkpoint& ck, ParamStore<float>& params,
                         const std::string& prefix = "") {
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string name = prefix + params.name(i);
        if (!ck.tensors.has(name))
            throw DataError("checkpoint: missing tensor '" + name + "'");
        const Tensor<float>& src = ck.tensors.at(name);
        Tensor<float>& dst = params.tensor(i);
        if (src.shape() != dst.shape())
            throw DataError("checkpoint: tensor '" + name + "' has shape " +
                            shape_str(src.shape()) + ", expected " + shape_str(dst.shape()));
        dst.data() = src.data();
    }
}

} // namespace diffkit::checkpoint

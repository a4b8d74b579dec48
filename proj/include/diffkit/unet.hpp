// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "diffkit/errors.hpp"
#include "diffkit/params.hpp"
#include "diffkit/rng.hpp"
#include "diffkit/tensor.hpp"

namespace diffkit::unet {

/// Encoder-bottleneck-decoder noise predictor with sinusoidal time embedding,
/// optional class conditioning and single-head self-attention at selected
/// levels. Decoder blocks consume encoder activations by channel concat, so
/// their input widths are the sums of the two paths.
struct UNetConfig {
    int in_size = 32;
    int in_ch = 3;
    int base_ch = 64;
    std::vector<int> ch_mult = {1, 2, 4, 4};
    int num_res_blocks = 3;
    std::vector<int> attn_levels = {2, 3};
    double dropout = 0.1;
    int num_classes = 0;     // 0 = unconditional; last class id is the null class
    int time_embed_dim = 0;  // 0 = 4 * base_ch

    int levels() const { return static_cast<int>(ch_mult.size()); }
    int embed_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_ch; }
    int channels(int level) const { return base_ch * ch_mult[static_cast<std::size_t>(level)]; }
    bool has_attn(int level) const {
        for (int l : attn_levels)
            if (l == level) return true;
        return false;
    }

    void validate() const {
        if (base_ch < 1 || in_ch < 1 || in_size < 1) throw ConfigError("unet: bad sizes");
        if (ch_mult.empty()) throw ConfigError("unet: ch_mult must be non-empty");
        for (int m : ch_mult)
            if (m < 1) throw ConfigError("unet: ch_mult entries must be >= 1");
        const int down = levels() - 1;
        if (in_size % (1 << down) != 0)
            throw ConfigError("unet: in_size " + std::to_string(in_size) +
                              " not divisible by 2^" + std::to_string(down));
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("unet: dropout must be in [0,1)");
        for (int l : attn_levels)
            if (l < 0 || l >= levels())
                throw ConfigError("unet: attention level " + std::to_string(l) + " out of range");
        if (num_res_blocks < 1) throw ConfigError("unet: num_res_blocks must be >= 1");
        if (embed_dim() % 2 != 0) throw ConfigError("unet: time embedding dim must be even");
        if (num_classes < 0) throw ConfigError("unet: num_classes must be >= 0");
    }
};

/// Raw sinusoidal position code: e[2i] = sin(t * w_i), e[2i+1] = cos(t * w_i)
/// with w_i = 10000^(-2i/dim). Requires even dim.
inline std::vector<double> sinusoidal_embedding(int t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError("sinusoidal_embedding: dim must be even");
    std::vector<double> e(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim / 2; ++i) {
        const double omega = std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
        e[2 * i] = std::sin(t * omega);
        e[2 * i + 1] = std::cos(t * omega);
    }
    return e;
}

namespace detail {

template <typename T>
Tensor<T> conv_w_init(Shape shape, Rng& rng) {
    // He-style fan-in scaling; fan_in = C * kh * kw.
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    const double std_dev = std::sqrt(2.0 / fan_in);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(rng.normal() * std_dev);
    return t;
}

template <typename T>
Tensor<T> linear_w_init(Shape shape, Rng& rng) {
    const double std_dev = std::sqrt(1.0 / static_cast<double>(shape[0]));
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(rng.normal() * std_dev);
    return t;
}

template <typename T>
void add_conv(ParamStore<T>& p, const std::string& prefix, std::size_t out_ch, std::size_t in_ch,
              std::size_t k, Rng& rng, bool zero = false) {
    p.add(prefix + ".w", zero ? Tensor<T>::zeros({out_ch, in_ch, k, k})
                              : conv_w_init<T>({out_ch, in_ch, k, k}, rng));
    p.add(prefix + ".b", Tensor<T>::zeros({out_ch}));
}

template <typename T>
void add_linear(ParamStore<T>& p, const std::string& prefix, std::size_t in_dim,
                std::size_t out_dim, Rng& rng) {
    p.add(prefix + ".w", linear_w_init<T>({in_dim, out_dim}, rng));
    p.add(prefix + ".b", Tensor<T>::zeros({out_dim}));
}

template <typename T>
void add_norm(ParamStore<T>& p, const std::string& prefix, std::size_t ch) {
    p.add(prefix + ".g", Tensor<T>::ones({ch}));
    p.add(prefix + ".b", Tensor<T>::zeros({ch}));
}

template <typename T>
void add_resblock(ParamStore<T>& p, const std::string& prefix, std::size_t in_ch,
                  std::size_t out_ch, std::size_t embed_dim, Rng& rng) {
    add_norm(p, prefix + ".gn1", in_ch);
    add_conv(p, prefix + ".conv1", out_ch, in_ch, 3, rng);
    add_linear(p, prefix + ".temb", embed_dim, out_ch, rng);
    add_norm(p, prefix + ".gn2", out_ch);
    add_conv(p, prefix + ".conv2", out_ch, out_ch, 3, rng, /*zero=*/true);
    if (in_ch != out_ch) add_conv(p, prefix + ".skip", out_ch, in_ch, 1, rng);
}

template <typename T>
void add_attention(ParamStore<T>& p, const std::string& prefix, std::size_t ch, Rng& rng) {
    add_norm(p, prefix + ".gn", ch);
    add_conv(p, prefix + ".q", ch, ch, 1, rng);
    add_conv(p, prefix + ".k", ch, ch, 1, rng);
    add_conv(p, prefix + ".v", ch, ch, 1, rng);
    add_conv(p, prefix + ".proj", ch, ch, 1, rng, /*zero=*/true);
}

} // namespace detail

/// Allocates and initializes every named parameter tensor. Deterministic for
/// a given (config, seed). requires_grad is left off; training turns it on.
template <typename T>
ParamStore<T> init(const UNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x756e6574ull)); // personalized stream for model init
    ParamStore<T> p;
    const std::size_t ted = static_cast<std::size_t>(cfg.embed_dim());

    detail::add_linear(p, "time.mlp1", ted, ted, rng);
    detail::add_linear(p, "time.mlp2", ted, ted, rng);
    if (cfg.num_classes > 0) {
        Tensor<T> embed = Tensor<T>::zeros({static_cast<std::size_t>(cfg.num_classes), ted});
        for (T& v : embed.data()) v = static_cast<T>(rng.normal() * 0.02);
        p.add("class.embed", std::move(embed));
    }

    detail::add_conv(p, "in.conv", static_cast<std::size_t>(cfg.base_ch),
                     static_cast<std::size_t>(cfg.in_ch), 3, rng);

    std::size_t cur = static_cast<std::size_t>(cfg.base_ch);
    for (int level = 0; level < cfg.levels(); ++level) {
        const std::size_t out_ch = static_cast<std::size_t>(cfg.channels(level));
        const std::string lp = "enc." + std::to_string(level);
        for (int j = 0; j < cfg.num_res_blocks; ++j) {
            detail::add_resblock(p, lp + ".rb" + std::to_string(j), cur, out_ch, ted, rng);
            cur = out_ch;
            if (cfg.has_attn(level))
                detail::add_attention(p, lp + ".attn" + std::to_string(j), cur, rng);
        }
        if (level < cfg.levels() - 1) detail::add_conv(p, lp + ".down", cur, cur, 4, rng);
    }

    detail::add_resblock(p, "mid.rb0", cur, cur, ted, rng);
    detail::add_attention(p, "mid.attn0", cur, rng);
    detail::add_resblock(p, "mid.rb1", cur, cur, ted, rng);

    // Encoder pushes: input conv, every res block output, every downsample
    // output. The decoder pops them in reverse, so block input widths are
    // cur + skip width.
    std::vector<std::size_t> skip_ch;
    skip_ch.push_back(static_cast<std::size_t>(cfg.base_ch));
    {
        std::size_t c = static_cast<std::size_t>(cfg.base_ch);
        for (int level = 0; level < cfg.levels(); ++level) {
            const std::size_t out_ch = static_cast<std::size_t>(cfg.channels(level));
            for (int j = 0; j < cfg.num_res_blocks; ++j) {
                c = out_ch;
                skip_ch.push_back(c);
            }
            if (level < cfg.levels() - 1) skip_ch.push_back(c);
        }
    }

    for (int level = cfg.levels() - 1; level >= 0; --level) {
        const std::size_t out_ch = static_cast<std::size_t>(cfg.channels(level));
        const std::string lp = "dec." + std::to_string(level);
        for (int j = 0; j <= cfg.num_res_blocks; ++j) {
            const std::size_t skip = skip_ch.back();
            skip_ch.pop_back();
            detail::add_resblock(p, lp + ".rb" + std::to_string(j), cur + skip, out_ch, ted, rng);
            cur = out_ch;
            if (cfg.has_attn(level))
                detail::add_attention(p, lp + ".attn" + std::to_string(j), cur, rng);
        }
        if (level > 0) detail::add_conv(p, lp + ".up", cur, cur, 3, rng);
    }

    detail::add_norm(p, "out.gn", cur);
    detail::add_conv(p, "out.conv", static_cast<std::size_t>(cfg.in_ch), cur, 3, rng,
                     /*zero=*/true);
    return p;
}

template <typename T>
std::size_t param_count(const ParamStore<T>& p) {
    return p.total_parameters();
}

/// Batched time embedding: sinusoid rows through a two-layer SiLU MLP.
template <typename T>
Tensor<T> time_embedding(const ParamStore<T>& p, const UNetConfig& cfg,
                         const std::vector<int>& t) {
    const int ted = cfg.embed_dim();
    std::vector<T> raw(t.size() * static_cast<std::size_t>(ted));
    for (std::size_t i = 0; i < t.size(); ++i) {
        check_shape(t[i] >= 0, "time_embedding: timestep must be >= 0");
        const auto row = sinusoidal_embedding(t[i], ted);
        for (int j = 0; j < ted; ++j) raw[i * ted + j] = static_cast<T>(row[j]);
    }
    auto h =
        Tensor<T>::from_data({t.size(), static_cast<std::size_t>(ted)}, std::move(raw));
    auto h1 = silu(linear(h, p.at("time.mlp1.w"), p.at("time.mlp1.b")));
    return linear(h1, p.at("time.mlp2.w"), p.at("time.mlp2.b"));
}

/// GroupNorm -> SiLU -> conv -> (+ time projection) -> GroupNorm -> SiLU ->
/// dropout -> conv, plus identity (or 1x1) shortcut.
template <typename T>
Tensor<T> resblock_forward(const ParamStore<T>& p, const std::string& prefix, const Tensor<T>& x,
                           const Tensor<T>& cond, double dropout_p, Rng* dropout_rng) {
    const std::size_t in_ch = x.dim(1);
    auto h = group_norm(x, p.at(prefix + ".gn1.g"), p.at(prefix + ".gn1.b"), group_count(in_ch));
    h = conv2d(silu(h), p.at(prefix + ".conv1.w"), p.at(prefix + ".conv1.b"), 1, 1);
    auto tproj = linear(silu(cond), p.at(prefix + ".temb.w"), p.at(prefix + ".temb.b"));
    h = add_channel_bias(h, tproj);
    const std::size_t out_ch = h.dim(1);
    h = silu(group_norm(h, p.at(prefix + ".gn2.g"), p.at(prefix + ".gn2.b"), group_count(out_ch)));
    if (dropout_rng != nullptr && dropout_p > 0.0) h = dropout(h, dropout_p, *dropout_rng);
    h = conv2d(h, p.at(prefix + ".conv2.w"), p.at(prefix + ".conv2.b"), 1, 1);
    Tensor<T> shortcut = x;
    if (p.has(prefix + ".skip.w"))
        shortcut = conv2d(x, p.at(prefix + ".skip.w"), p.at(prefix + ".skip.b"), 1, 0);
    return add(h, shortcut);
}

/// Single-head self-attention over flattened spatial positions, residual.
template <typename T>
Tensor<T> attention_forward(const ParamStore<T>& p, const std::string& prefix,
                            const Tensor<T>& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3);
    const std::size_t s = hh * ww;
    auto hn = group_norm(x, p.at(prefix + ".gn.g"), p.at(prefix + ".gn.b"), group_count(c));
    auto q = reshape(conv2d(hn, p.at(prefix + ".q.w"), p.at(prefix + ".q.b"), 1, 0), {n, c, s});
    auto k = reshape(conv2d(hn, p.at(prefix + ".k.w"), p.at(prefix + ".k.b"), 1, 0), {n, c, s});
    auto v = reshape(conv2d(hn, p.at(prefix + ".v.w"), p.at(prefix + ".v.b"), 1, 0), {n, c, s});
    // scores[b,i,j] = <q_i, k_j> / sqrt(C) over spatial positions i, j.
    auto scores = mul(bmm(transpose_last2(q), k), static_cast<T>(1.0 / std::sqrt(double(c))));
    auto attn = softmax_lastdim(scores);
    auto out = bmm(v, transpose_last2(attn)); // out[b,c,i] = sum_j v[b,c,j] attn[b,i,j]
    out = conv2d(reshape(out, {n, c, hh, ww}), p.at(prefix + ".proj.w"), p.at(prefix + ".proj.b"),
                 1, 0);
    return add(x, out);
}

/// Predicted noise for a batch of noisy samples at per-element timesteps.
/// labels are required exactly when the model is class-conditional; the id
/// num_classes-1 is the null class used by guidance-free passes.
template <typename T>
Tensor<T> forward(const ParamStore<T>& p, const UNetConfig& cfg, const Tensor<T>& x,
                  const std::vector<int>& t, const std::optional<std::vector<int>>& labels,
                  Rng* dropout_rng = nullptr) {
    check_shape(x.ndim() == 4, "unet: input must be NCHW");
    check_shape(x.dim(1) == static_cast<std::size_t>(cfg.in_ch) &&
                    x.dim(2) == static_cast<std::size_t>(cfg.in_size) &&
                    x.dim(3) == static_cast<std::size_t>(cfg.in_size),
                "unet: input shape " + shape_str(x.shape()) + " does not match config");
    check_shape(t.size() == x.dim(0), "unet: one timestep per batch element required");
    if (cfg.num_classes > 0) {
        check_shape(labels.has_value(), "unet: class-conditional model requires labels");
        check_shape(labels->size() == x.dim(0), "unet: one label per batch element required");
        for (int l : *labels)
            check_shape(l >= 0 && l < cfg.num_classes,
                        "unet: label " + std::to_string(l) + " out of range [0," +
                            std::to_string(cfg.num_classes) + ")");
    } else {
        check_shape(!labels.has_value(), "unet: unconditional model takes no labels");
    }

    auto cond = time_embedding(p, cfg, t);
    if (cfg.num_classes > 0) cond = add(cond, rows_select(p.at("class.embed"), *labels));

    auto h = conv2d(x, p.at("in.conv.w"), p.at("in.conv.b"), 1, 1);
    std::vector<Tensor<T>> skips{h};
    for (int level = 0; level < cfg.levels(); ++level) {
        const std::string lp = "enc." + std::to_string(level);
        for (int j = 0; j < cfg.num_res_blocks; ++j) {
            h = resblock_forward(p, lp + ".rb" + std::to_string(j), h, cond, cfg.dropout,
                                 dropout_rng);
            if (cfg.has_attn(level)) h = attention_forward(p, lp + ".attn" + std::to_string(j), h);
            skips.push_back(h);
        }
        if (level < cfg.levels() - 1) {
            h = conv2d(h, p.at(lp + ".down.w"), p.at(lp + ".down.b"), 2, 1);
            skips.push_back(h);
        }
    }

    h = resblock_forward(p, "mid.rb0", h, cond, cfg.dropout, dropout_rng);
    h = attention_forward(p, "mid.attn0", h);
    h = resblock_forward(p, "mid.rb1", h, cond, cfg.dropout, dropout_rng);

    for (int level = cfg.levels() - 1; level >= 0; --level) {
        const std::string lp = "dec." + std::to_string(level);
        for (int j = 0; j <= cfg.num_res_blocks; ++j) {
            auto skip = skips.back();
            skips.pop_back();
            h = resblock_forward(p, lp + ".rb" + std::to_string(j), concat_channels(h, skip), cond,
                                 cfg.dropout, dropout_rng);
            if (cfg.has_attn(level)) h = attention_forward(p, lp + ".attn" + std::to_string(j), h);
        }
        if (level > 0)
            h = conv2d(upsample_nearest2x(h), p.at(lp + ".up.w"), p.at(lp + ".up.b"), 1, 1);
    }

    h = silu(group_norm(h, p.at("out.gn.g"), p.at("out.gn.b"), group_count(h.dim(1))));
    return conv2d(h, p.at("out.conv.w"), p.at("out.conv.b"), 1, 1);
}

} // namespace diffkit::unet

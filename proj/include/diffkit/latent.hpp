// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffkit/diffusion.hpp"
#include "diffkit/errors.hpp"
#include "diffkit/params.hpp"
#include "diffkit/rng.hpp"
#include "diffkit/tensor.hpp"
#include "diffkit/unet.hpp"

namespace diffkit::latent {

/// Image <-> latent codec. encode maps [N,3,H,W] to [N,Cz,H/f,W/f] and decode
/// inverts the shape; f is a power of two. Implementations are read-only after
/// training, so concurrent encodes are safe.
template <typename T>
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual Tensor<T> encode(const Tensor<T>& images) = 0;
    virtual Tensor<T> decode(const Tensor<T>& latents) = 0;
    virtual int downsample_factor() const = 0;
    virtual int latent_channels() const = 0;
};

/// Pass-through codec (f = 1); handy for exercising the latent pipeline
/// without a trained VAE.
template <typename T>
class IdentityCodec final : public LatentCodec<T> {
public:
    Tensor<T> encode(const Tensor<T>& images) override { return images.detached(); }
    Tensor<T> decode(const Tensor<T>& latents) override { return latents.detached(); }
    int downsample_factor() const override { return 1; }
    int latent_channels() const override { return 3; }
};

struct VaeConfig {
    int in_ch = 3;
    int base_ch = 32;
    int latent_channels = 4;
    int downsample_factor = 4; // power of two
    double beta_kl = 1e-3;

    int num_downs() const {
        int f = downsample_factor, n = 0;
        while (f > 1) {
            f /= 2;
            ++n;
        }
        return n;
    }

    int channels_at(int depth) const { return std::min(base_ch << depth, 4 * base_ch); }

    void validate() const {
        if (in_ch < 1 || base_ch < 2 || latent_channels < 1) throw ConfigError("vae: bad sizes");
        int f = downsample_factor;
        if (f < 1) throw ConfigError("vae: downsample_factor must be >= 1");
        while (f > 1) {
            if (f % 2 != 0) throw ConfigError("vae: downsample_factor must be a power of 2");
            f /= 2;
        }
        if (beta_kl < 0.0) throw ConfigError("vae: beta_kl must be >= 0");
    }
};

/// Conv encoder producing (mu, logvar) heads and a mirrored conv decoder.
template <typename T>
ParamStore<T> init_vae(const VaeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x766165ull));
    ParamStore<T> p;
    unet::detail::add_conv(p, "enc.conv_in", cfg.base_ch, cfg.in_ch, 3, rng);
    for (int i = 0; i < cfg.num_downs(); ++i)
        unet::detail::add_conv(p, "enc.down" + std::to_string(i), cfg.channels_at(i + 1),
                               cfg.channels_at(i), 4, rng);
    const int top = cfg.channels_at(cfg.num_downs());
    unet::detail::add_conv(p, "enc.mu", cfg.latent_channels, top, 3, rng);
    unet::detail::add_conv(p, "enc.logvar", cfg.latent_channels, top, 3, rng);
    unet::detail::add_conv(p, "dec.conv_in", top, cfg.latent_channels, 3, rng);
    for (int i = cfg.num_downs() - 1; i >= 0; --i)
        unet::detail::add_conv(p, "dec.up" + std::to_string(i), cfg.channels_at(i),
                               cfg.channels_at(i + 1), 3, rng);
    unet::detail::add_conv(p, "dec.conv_out", cfg.in_ch, cfg.base_ch, 3, rng);
    return p;
}

/// Posterior moments (mu, logvar), both [N,Cz,H/f,W/f].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> encode_moments(const ParamStore<T>& p, const VaeConfig& cfg,
                                               const Tensor<T>& x) {
    auto h = silu(conv2d(x, p.at("enc.conv_in.w"), p.at("enc.conv_in.b"), 1, 1));
    for (int i = 0; i < cfg.num_downs(); ++i) {
        const std::string name = "enc.down" + std::to_string(i);
        h = silu(conv2d(h, p.at(name + ".w"), p.at(name + ".b"), 2, 1));
    }
    auto mu = conv2d(h, p.at("enc.mu.w"), p.at("enc.mu.b"), 1, 1);
    auto logvar = conv2d(h, p.at("enc.logvar.w"), p.at("enc.logvar.b"), 1, 1);
    return {mu, logvar};
}

template <typename T>
Tensor<T> decode(const ParamStore<T>& p, const VaeConfig& cfg, const Tensor<T>& z) {
    auto h = silu(conv2d(z, p.at("dec.conv_in.w"), p.at("dec.conv_in.b"), 1, 1));
    for (int i = cfg.num_downs() - 1; i >= 0; --i) {
        const std::string name = "dec.up" + std::to_string(i);
        h = silu(conv2d(upsample_nearest2x(h), p.at(name + ".w"), p.at(name + ".b"), 1, 1));
    }
    return conv2d(h, p.at("dec.conv_out.w"), p.at("dec.conv_out.b"), 1, 1);
}

/// z = mu + exp(logvar/2) * eps with eps ~ N(0, I); differentiable in both
/// moments.
template <typename T>
Tensor<T> reparameterize(const Tensor<T>& mu, const Tensor<T>& logvar, Rng& rng) {
    check_same_shape(mu, logvar, "reparameterize");
    auto eps = Tensor<T>::randn(mu.shape(), rng);
    return add(mu, mul(exp(mul(logvar, T(0.5))), eps));
}

/// Mean over the batch of -1/2 * sum(1 + logvar - mu^2 - exp(logvar)).
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mu, const Tensor<T>& logvar) {
    check_same_shape(mu, logvar, "kl_divergence");
    const T batch = static_cast<T>(mu.dim(0));
    auto inner = sub(sub(add(logvar, T(1)), mul(mu, mu)), exp(logvar));
    return mul(sum_all(inner), static_cast<T>(-0.5) / batch);
}

template <typename T>
struct VaeLosses {
    T recon = 0;
    T kl = 0;
    T total = 0;
};

/// One AdamW step on recon MSE + beta_kl * KL. Returns pre-update losses.
template <typename T>
VaeLosses<T> vae_train_step(ParamStore<T>& params, const VaeConfig& cfg,
                            diffusion::OptimizerState<T>& opt, const Tensor<T>& images,
                            double learning_rate, double weight_decay, Rng& rng) {
    params.zero_grad();
    auto [mu, logvar] = encode_moments(params, cfg, images);
    auto z = reparameterize(mu, logvar, rng);
    auto recon = decode(params, cfg, z);
    auto d = sub(recon, images);
    auto recon_loss = mean_all(mul(d, d));
    auto kl = kl_divergence(mu, logvar);
    auto total = add(recon_loss, mul(kl, static_cast<T>(cfg.beta_kl)));
    VaeLosses<T> losses{recon_loss.item(), kl.item(), total.item()};
    if (!std::isfinite(static_cast<double>(losses.total)))
        throw NumericError("non-finite VAE loss (recon=" + std::to_string(losses.recon) +
                           ", kl=" + std::to_string(losses.kl) + ")");
    backward(total);
    adamw_step(params, opt, learning_rate, weight_decay);
    return losses;
}

/// Codec backed by trained VAE parameters. Diffusion sees mu * scale, where
/// the single global scale normalizes latent variance to about 1.
template <typename T>
class VaeCodec final : public LatentCodec<T> {
public:
    VaeCodec(ParamStore<T> params, VaeConfig cfg, double scale)
        : params_(std::move(params)), cfg_(cfg), scale_(scale) {
        if (!(scale_ > 0.0)) throw ConfigError("vae codec: scale must be > 0");
    }

    Tensor<T> encode(const Tensor<T>& images) override {
        NoGradGuard ng;
        auto [mu, logvar] = encode_moments(params_, cfg_, images);
        (void)logvar;
        return mul(mu, static_cast<T>(scale_));
    }

    Tensor<T> decode(const Tensor<T>& latents) override {
        NoGradGuard ng;
        return latent::decode(params_, cfg_, mul(latents, static_cast<T>(1.0 / scale_)));
    }

    int downsample_factor() const override { return cfg_.downsample_factor; }
    int latent_channels() const override { return cfg_.latent_channels; }
    double scale() const { return scale_; }
    const ParamStore<T>& params() const { return params_; }
    const VaeConfig& config() const { return cfg_; }

private:
    ParamStore<T> params_;
    VaeConfig cfg_;
    double scale_;
};

/// 1 / std of the posterior means over a sample of the dataset.
template <typename T>
double compute_latent_scale(const ParamStore<T>& params, const VaeConfig& cfg,
                            const Tensor<T>& images) {
    NoGradGuard ng;
    auto [mu, logvar] = encode_moments(params, cfg, images);
    (void)logvar;
    double sum = 0.0, sum_sq = 0.0;
    for (const T& v : mu.data()) {
        sum += static_cast<double>(v);
        sum_sq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double n = static_cast<double>(mu.numel());
    const double var = std::max(1e-12, sum_sq / n - (sum / n) * (sum / n));
    return 1.0 / std::sqrt(var);
}

/// In-memory latent dataset: deterministic posterior means, pre-scaled.
struct LatentDataset {
    Tensor<float> latents; // [N,Cz,h,w]
    std::vector<int> labels;
};

template <typename Provider>
LatentDataset encode_dataset(LatentCodec<float>& codec, Provider& provider, int epoch = 0) {
    NoGradGuard ng;
    LatentDataset out;
    std::vector<float> all;
    Shape item_shape;
    for (std::size_t b = 0; b < provider.batches_per_epoch(); ++b) {
        auto batch = provider.batch(epoch, b);
        auto z = codec.encode(batch.images);
        if (item_shape.empty()) item_shape = z.shape();
        all.insert(all.end(), z.data().begin(), z.data().end());
        if (batch.labels.has_value())
            out.labels.insert(out.labels.end(), batch.labels->begin(), batch.labels->end());
    }
    if (all.empty()) throw DataError("encode_dataset: empty source");
    const std::size_t per = item_shape[1] * item_shape[2] * item_shape[3];
    const std::size_t count = all.size() / per;
    out.latents =
        Tensor<float>::from_data({count, item_shape[1], item_shape[2], item_shape[3]},
                                 std::move(all));
    if (out.labels.empty()) out.labels.assign(count, 0);
    return out;
}

// --- latent cache file: magic 'DFLT', version, count, Cz, H, W, f32 payload --

inline constexpr char kLatentMagic[4] = {'D', 'F', 'L', 'T'};
inline constexpr std::uint32_t kLatentVersion = 1;

namespace detail {
template <typename V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_pod(std::istream& is, const char* what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError(std::string("latent cache: truncated while reading ") + what);
    return v;
}
} // namespace detail

inline void save_latent_cache(const std::string& path, const Tensor<float>& latents) {
    check_shape(latents.ndim() == 4, "latent cache: expects [N,Cz,H,W]");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("latent cache: cannot open " + path);
    os.write(kLatentMagic, 4);
    detail::write_pod(os, kLatentVersion);
    detail::write_pod(os, static_cast<std::uint64_t>(latents.dim(0)));
    detail::write_pod(os, static_cast<std::uint32_t>(latents.dim(1)));
    detail::write_pod(os, static_cast<std::uint32_t>(latents.dim(2)));
    detail::write_pod(os, static_cast<std::uint32_t>(latents.dim(3)));
    os.write(reinterpret_cast<const char*>(latents.data().data()),
             static_cast<std::streamsize>(latents.numel() * sizeof(float)));
    if (!os) throw DataError("latent cache: write failed for " + path);
}

inline Tensor<float> load_latent_cache(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("latent cache: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kLatentMagic, 4) != 0)
        throw DataError("latent cache: bad magic in " + path);
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kLatentVersion)
        throw DataError("latent cache: unsupported version " + std::to_string(version));
    const auto count = detail::read_pod<std::uint64_t>(is, "count");
    const auto cz = detail::read_pod<std::uint32_t>(is, "channels");
    const auto h = detail::read_pod<std::uint32_t>(is, "height");
    const auto w = detail::read_pod<std::uint32_t>(is, "width");
    std::vector<float> payload(static_cast<std::size_t>(count) * cz * h * w);
    is.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(payload.size() * sizeof(float)))
        throw DataError("latent cache: truncated payload in " + path);
    return Tensor<float>::from_data({static_cast<std::size_t>(count), cz, h, w},
                                    std::move(payload));
}

} // namespace diffkit::latent

// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diffkit/data.hpp"
#include "diffkit/errors.hpp"
#include "diffkit/latent.hpp"
#include "diffkit/rng.hpp"
#include "diffkit/schedule.hpp"
#include "diffkit/tensor.hpp"

namespace diffkit::sampler {

enum class Kind { ddpm, ddim };

inline const char* kind_name(Kind k) { return k == Kind::ddpm ? "ddpm" : "ddim"; }

struct SamplerConfig {
    Kind kind = Kind::ddim;
    int num_inference_steps = 250;
    double eta = 0.0;            // 0 = deterministic DDIM
    double guidance_weight = 1.0; // 1 = plain conditional, 0 = unconditional
    std::uint64_t seed = 42;

    void validate(int num_train_timesteps) const {
        if (num_inference_steps < 1 || num_inference_steps > num_train_timesteps)
            throw ConfigError("num_inference_steps must be in [1, num_train_timesteps]");
        if (eta < 0.0) throw ConfigError("eta must be >= 0");
        if (kind == Kind::ddpm && num_inference_steps != num_train_timesteps)
            throw ConfigError(
                "ddpm sampling walks every training timestep; set "
                "num_inference_steps == num_train_timesteps or use ddim");
    }
};

/// Descending inference timesteps: stride = floor(T/S), t_i = (i+1)*stride - 1.
/// Consecutive pairs define (t, prev_t); after the last entry prev_t is -1.
inline std::vector<int> select_timesteps(int num_train_timesteps, int num_inference_steps) {
    if (num_inference_steps < 1 || num_inference_steps > num_train_timesteps)
        throw ConfigError("select_timesteps: need 1 <= S <= T, got S=" +
                          std::to_string(num_inference_steps) +
                          " T=" + std::to_string(num_train_timesteps));
    const int stride = num_train_timesteps / num_inference_steps;
    std::vector<int> out(static_cast<std::size_t>(num_inference_steps));
    for (int i = 0; i < num_inference_steps; ++i)
        out[static_cast<std::size_t>(num_inference_steps - 1 - i)] = (i + 1) * stride - 1;
    return out;
}

/// Ancestral step: mean = (x_t - ((1-alpha_t)/sqrt(1-abar_t)) * eps) / sqrt(alpha_t),
/// plus sqrt(fixed-small posterior variance) * z for t > 0. At t = 0 the mean
/// is returned as-is.
template <typename T>
Tensor<T> ddpm_step(const schedule::ScheduleTable& table, const Tensor<T>& model_output, int t,
                    const Tensor<T>& x_t, Rng& rng) {
    check_same_shape(model_output, x_t, "ddpm_step");
    const double alpha = table.alphas.at(static_cast<std::size_t>(t));
    const double abar = table.alpha_cumprod_at(t);
    const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(alpha));
    const T eps_coef = static_cast<T>((1.0 - alpha) / std::sqrt(1.0 - abar));
    Tensor<T> out = Tensor<T>::zeros(x_t.shape());
    const T* x = x_t.data().data();
    const T* e = model_output.data().data();
    T* o = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] = inv_sqrt_alpha * (x[i] - eps_coef * e[i]);
    if (t > 0) {
        const T sigma = static_cast<T>(std::sqrt(schedule::posterior_variance(table, t)));
        for (std::size_t i = 0; i < out.numel(); ++i) o[i] += sigma * static_cast<T>(rng.normal());
    }
    return out;
}

/// pred_x0 = (x_t - sqrt(1-abar_t) * eps) / sqrt(abar_t).
template <typename T>
Tensor<T> ddim_pred_x0(const schedule::ScheduleTable& table, const Tensor<T>& model_output, int t,
                       const Tensor<T>& x_t) {
    check_same_shape(model_output, x_t, "ddim_pred_x0");
    const double abar = table.alpha_cumprod_at(t);
    if (abar < schedule::kAlphaBarFloor)
        throw NumericError("ddim_pred_x0: alpha_cumprod below floor at t=" + std::to_string(t));
    const T inv_sqrt_abar = static_cast<T>(1.0 / std::sqrt(abar));
    const T noise_coef = static_cast<T>(std::sqrt(1.0 - abar));
    Tensor<T> out = Tensor<T>::zeros(x_t.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = (x_t.data()[i] - noise_coef * model_output.data()[i]) * inv_sqrt_abar;
    return out;
}

/// Variance of the stochastic DDIM step for hop t -> prev_t:
/// sigma^2 = eta * ((1-abar_prev)/(1-abar_t)) * (1 - abar_t/abar_prev).
/// For adjacent steps this equals eta times the fixed-small DDPM posterior.
inline double ddim_sigma_squared(const schedule::ScheduleTable& table, int t, int prev_t,
                                 double eta) {
    const double abar = table.alpha_cumprod_at(t);
    const double abar_prev = table.alpha_cumprod_at(prev_t);
    return eta * ((1.0 - abar_prev) / (1.0 - abar)) * (1.0 - abar / abar_prev);
}

/// Non-Markovian step through the predicted clean sample:
/// x_prev = sqrt(abar_prev) * pred_x0 + sqrt(1 - abar_prev - sigma^2) * eps + sigma * z.
/// prev_t = -1 is the final hop to clean data (abar_prev = 1). No randomness
/// is consumed when eta = 0.
template <typename T>
Tensor<T> ddim_step(const schedule::ScheduleTable& table, const Tensor<T>& model_output, int t,
                    int prev_t, const Tensor<T>& x_t, double eta, Rng& rng) {
    check_shape(prev_t < t, "ddim_step: prev_t must precede t");
    const double abar_prev = table.alpha_cumprod_at(prev_t);
    const double sigma2 = ddim_sigma_squared(table, t, prev_t, eta);
    double dir_sq = 1.0 - abar_prev - sigma2;
    if (dir_sq < -1e-6)
        throw NumericError("ddim_step: negative direction coefficient " + std::to_string(dir_sq) +
                           " at t=" + std::to_string(t) + " (inconsistent schedule)");
    dir_sq = std::max(0.0, dir_sq);

    Tensor<T> pred = ddim_pred_x0(table, model_output, t, x_t);
    const T c_signal = static_cast<T>(std::sqrt(abar_prev));
    const T c_dir = static_cast<T>(std::sqrt(dir_sq));
    Tensor<T> out = Tensor<T>::zeros(x_t.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = c_signal * pred.data()[i] + c_dir * model_output.data()[i];
    if (eta > 0.0 && sigma2 > 0.0) {
        const T sigma = static_cast<T>(std::sqrt(sigma2));
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.data()[i] += sigma * static_cast<T>(rng.normal());
    }
    return out;
}

/// Guided score: eps_uncond + w * (eps_cond - eps_uncond).
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, double w) {
    check_same_shape(eps_uncond, eps_cond, "cfg_combine");
    const T wt = static_cast<T>(w);
    Tensor<T> out = Tensor<T>::zeros(eps_uncond.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = eps_uncond.data()[i] + wt * (eps_cond.data()[i] - eps_uncond.data()[i]);
    return out;
}

/// RNG stream used by generate(); exposed so callers can reproduce the exact
/// initial-noise draw for a given sampler seed.
inline Rng generation_rng(const SamplerConfig& cfg) {
    return Rng(mix_seed(cfg.seed, 0x67656e00ull));
}

template <typename T>
struct GenerateResult {
    Tensor<T> raw;    // model-space output (normalized pixel or latent domain)
    Tensor<T> images; // pixels in [0,1] after decode and denormalization
};

/// Full reverse process: start from x_T ~ N(0,I), iterate DDPM or DDIM steps
/// over the selected timesteps with optional classifier-free guidance, decode
/// through the latent codec when present, and map to [0,1] pixels.
///
/// Guidance: w = 1 runs the conditional pass only, w = 0 the null-class pass
/// only, anything else both passes combined; absent labels mean null-class
/// (unconditional) sampling for class-conditional models. Reentrant: the RNG
/// is local and params are read-only.
template <typename T, typename Model>
GenerateResult<T> generate(Model&& model, const schedule::ScheduleTable& table,
                           const SamplerConfig& cfg, Shape shape,
                           const std::optional<std::vector<int>>& labels, int num_classes,
                           latent::LatentCodec<T>* codec = nullptr,
                           data::Normalization norm = data::Normalization::unit_interval_symmetric,
                           const data::ChannelStats& stats = {}) {
    cfg.validate(table.num_train_timesteps);
    check_shape(shape.size() == 4, "generate: shape must be [N,C,H,W]");
    const std::size_t n = shape[0];
    if (labels.has_value()) {
        check_shape(num_classes > 0, "generate: labels given for an unconditional model");
        check_shape(labels->size() == n, "generate: one label per sample required");
    }

    NoGradGuard ng;
    Rng rng = generation_rng(cfg);
    Tensor<T> x = Tensor<T>::randn(shape, rng);

    std::optional<std::vector<int>> cond_labels = labels;
    std::optional<std::vector<int>> null_labels;
    if (num_classes > 0) {
        null_labels = std::vector<int>(n, num_classes - 1);
        if (!cond_labels.has_value()) cond_labels = null_labels;
    }

    const auto timesteps = select_timesteps(table.num_train_timesteps, cfg.num_inference_steps);
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        const int t = timesteps[i];
        const int prev_t = i + 1 < timesteps.size() ? timesteps[i + 1] : -1;
        const std::vector<int> t_vec(n, t);

        Tensor<T> eps;
        const bool unconditional = !labels.has_value() || num_classes == 0;
        if (unconditional || cfg.guidance_weight == 1.0) {
            eps = model(x, t_vec, unconditional && num_classes > 0 ? null_labels : cond_labels);
        } else if (cfg.guidance_weight == 0.0) {
            eps = model(x, t_vec, null_labels);
        } else {
            auto eps_uncond = model(x, t_vec, null_labels);
            auto eps_cond = model(x, t_vec, cond_labels);
            eps = cfg_combine(eps_uncond, eps_cond, cfg.guidance_weight);
        }

        if (cfg.kind == Kind::ddpm)
            x = ddpm_step(table, eps, t, x, rng);
        else
            x = ddim_step(table, eps, t, prev_t, x, cfg.eta, rng);
    }

    GenerateResult<T> result;
    result.raw = x;
    Tensor<T> pixels = codec != nullptr ? codec->decode(x) : x;
    result.images = data::to_unit_interval(pixels, norm, stats);
    return result;
}

} // namespace diffkit::sampler

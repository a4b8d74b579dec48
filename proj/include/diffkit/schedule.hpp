// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "diffkit/errors.hpp"
#include "diffkit/tensor.hpp"

namespace diffkit::schedule {

enum class Kind { linear, cosine };

inline const char* kind_name(Kind k) { return k == Kind::linear ? "linear" : "cosine"; }

struct ScheduleConfig {
    double beta_start = 0.0002;
    double beta_end = 0.02;
    int num_train_timesteps = 1000;
    Kind beta_schedule = Kind::linear;
    double stability_epsilon = 1e-12; // cosine only, guards the alpha ratio denominator

    void validate() const {
        if (num_train_timesteps < 2)
            throw ConfigError("num_train_timesteps must be >= 2, got " +
                              std::to_string(num_train_timesteps));
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1");
        if (stability_epsilon < 0.0) throw ConfigError("stability_epsilon must be >= 0");
    }
};

/// Per-timestep diffusion constants. Index t runs over [0, T-1]; the clean
/// image sits one step before index 0 (alpha_cumprod_at(-1) == 1). Immutable
/// after build and safe to share across threads.
struct ScheduleTable {
    int num_train_timesteps = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alphas_cumprod;
    Kind kind = Kind::linear;

    /// Cumulative signal retention with the t = -1 clean-image sentinel.
    double alpha_cumprod_at(int t) const {
        if (t < 0) return 1.0;
        if (t >= num_train_timesteps)
            throw std::out_of_range("timestep " + std::to_string(t) + " out of range [0," +
                                    std::to_string(num_train_timesteps) + ")");
        return alphas_cumprod[static_cast<std::size_t>(t)];
    }
};

inline constexpr double kMaxBeta = 0.999;       // keeps alpha_t strictly positive
inline constexpr double kAlphaBarFloor = 1e-8;  // keeps pred_x0 division finite

/// beta_i = lerp(beta_start, beta_end, i/(T-1)); endpoints are exact.
inline ScheduleTable build_linear(const ScheduleConfig& cfg) {
    cfg.validate();
    const int t_count = cfg.num_train_timesteps;
    ScheduleTable table;
    table.num_train_timesteps = t_count;
    table.kind = Kind::linear;
    table.betas.resize(t_count);
    table.alphas.resize(t_count);
    table.alphas_cumprod.resize(t_count);
    double cum = 1.0;
    for (int i = 0; i < t_count; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(t_count - 1);
        const double beta = std::lerp(cfg.beta_start, cfg.beta_end, frac);
        table.betas[i] = beta;
        table.alphas[i] = 1.0 - beta;
        cum *= table.alphas[i];
        table.alphas_cumprod[i] = cum;
    }
    return table;
}

/// Cumulative retention law for the cosine schedule, with the terminal floor
/// already applied: max(cos^2((pi/2) * t/T), floor). t may range over [0, T].
inline double cosine_alpha_bar(double t, int num_train_timesteps) {
    const double c = std::cos(1.5707963267948966 * t / static_cast<double>(num_train_timesteps));
    return std::max(c * c, kAlphaBarFloor);
}

/// Table index i holds the law evaluated at t = i+1, so index T-1 reaches the
/// floored terminal value. Betas come from the ratio of consecutive law values
/// (stability epsilon in the denominator); the stored cumulative product then
/// telescopes back to the law wherever the beta clip does not fire.
inline ScheduleTable build_cosine(const ScheduleConfig& cfg) {
    cfg.validate();
    const int t_count = cfg.num_train_timesteps;
    ScheduleTable table;
    table.num_train_timesteps = t_count;
    table.kind = Kind::cosine;
    table.betas.resize(t_count);
    table.alphas.resize(t_count);
    table.alphas_cumprod.resize(t_count);
    double prev_law = cosine_alpha_bar(0.0, t_count); // == 1
    double cum = 1.0;
    for (int i = 0; i < t_count; ++i) {
        const double law = cosine_alpha_bar(static_cast<double>(i + 1), t_count);
        const double ratio = law / (prev_law + cfg.stability_epsilon);
        const double beta = std::min(1.0 - ratio, kMaxBeta);
        table.betas[i] = beta;
        table.alphas[i] = 1.0 - beta;
        cum *= table.alphas[i];
        table.alphas_cumprod[i] = cum;
        prev_law = law;
    }
    return table;
}

inline ScheduleTable build(const ScheduleConfig& cfg) {
    return cfg.beta_schedule == Kind::linear ? build_linear(cfg) : build_cosine(cfg);
}

/// Closed-form forward noising: out = sqrt(abar_t) * x0 + sqrt(1-abar_t) * eps,
/// with a per-batch-element timestep.
template <typename T>
Tensor<T> add_noise(const ScheduleTable& table, const Tensor<T>& x0, const Tensor<T>& noise,
                    const std::vector<int>& timesteps) {
    check_same_shape(x0, noise, "add_noise");
    check_shape(x0.ndim() >= 1 && x0.dim(0) == timesteps.size(),
                "add_noise: need one timestep per batch element");
    const std::size_t n = timesteps.size();
    const std::size_t per = x0.numel() / n;
    Tensor<T> out = Tensor<T>::zeros(x0.shape());
    for (std::size_t b = 0; b < n; ++b) {
        const double abar = table.alpha_cumprod_at(timesteps[b]); // throws if out of range
        const T s_signal = static_cast<T>(std::sqrt(abar));
        const T s_noise = static_cast<T>(std::sqrt(1.0 - abar));
        const T* xs = x0.data().data() + b * per;
        const T* ns = noise.data().data() + b * per;
        T* os = out.data().data() + b * per;
        for (std::size_t j = 0; j < per; ++j) os[j] = s_signal * xs[j] + s_noise * ns[j];
    }
    return out;
}

/// Fixed-small reverse-process variance:
/// sigma_t^2 = ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t, and 0 at t = 0.
inline double posterior_variance(const ScheduleTable& table, int t) {
    if (t < 0 || t >= table.num_train_timesteps)
        throw std::out_of_range("posterior_variance: timestep " + std::to_string(t) +
                                " out of range");
    if (t == 0) return 0.0;
    const double abar_prev = table.alpha_cumprod_at(t - 1);
    const double abar = table.alpha_cumprod_at(t);
    return (1.0 - abar_prev) / (1.0 - abar) * table.betas[static_cast<std::size_t>(t)];
}

/// CSV rows "t,beta,alpha,alpha_cumprod" preceded by a header line.
inline void dump_csv(const ScheduleTable& table, std::ostream& os) {
    os << "t,beta,alpha,alpha_cumprod\n";
    os.precision(17);
    for (int t = 0; t < table.num_train_timesteps; ++t)
        os << t << ',' << table.betas[t] << ',' << table.alphas[t] << ','
           << table.alphas_cumprod[t] << '\n';
}

} // namespace diffkit::schedule

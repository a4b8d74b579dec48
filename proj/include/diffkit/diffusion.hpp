// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffkit/errors.hpp"
#include "diffkit/params.hpp"
#include "diffkit/rng.hpp"
#include "diffkit/schedule.hpp"
#include "diffkit/tensor.hpp"

namespace diffkit::diffusion {

struct TrainConfig {
    int num_epochs = 480;
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    int batch_size = 128;
    std::uint64_t seed = 42;
    double label_dropout_prob = 0.1;
    int log_every = 1;

    void validate() const {
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
        if (!(label_dropout_prob >= 0.0 && label_dropout_prob < 1.0))
            throw ConfigError("label_dropout_prob must be in [0,1)");
        if (num_epochs < 0) throw ConfigError("num_epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (log_every < 1) throw ConfigError("log_every must be >= 1");
    }
};

/// AdamW first/second moments, parallel to the ParamStore order.
template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::int64_t step = 0;

    template <typename U>
    static OptimizerState init_like(const ParamStore<U>& params) {
        OptimizerState s;
        s.m.resize(params.size());
        s.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            s.m[i].assign(params.tensor(i).numel(), T(0));
            s.v[i].assign(params.tensor(i).numel(), T(0));
        }
        return s;
    }
};

/// One AdamW update with decoupled weight decay:
///   p *= (1 - lr*wd);  p -= lr * mhat / (sqrt(vhat) + eps)
template <typename T>
void adamw_step(ParamStore<T>& params, OptimizerState<T>& opt, double lr, double weight_decay,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (opt.m.size() != params.size()) throw ConfigError("optimizer state does not match params");
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.tensor(i);
        auto& m = opt.m[i];
        auto& v = opt.v[i];
        const bool has_grad = p.has_grad();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const double g = has_grad ? static_cast<double>(p.grad()[j]) : 0.0;
            const double mj = beta1 * m[j] + (1.0 - beta1) * g;
            const double vj = beta2 * v[j] + (1.0 - beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            double x = static_cast<double>(p.data()[j]);
            x *= (1.0 - lr * weight_decay);
            x -= lr * mhat / (std::sqrt(vhat) + eps);
            p.data()[j] = static_cast<T>(x);
        }
    }
}

/// I.i.d. uniform integers in [0, T-1], one per batch element.
inline std::vector<int> sample_timesteps(Rng& rng, int batch_size, int num_train_timesteps) {
    if (num_train_timesteps < 1) throw ConfigError("sample_timesteps: T must be >= 1");
    std::vector<int> t(static_cast<std::size_t>(batch_size));
    for (int& v : t) v = static_cast<int>(rng.uniform_int(0, num_train_timesteps));
    return t;
}

template <typename T>
struct BatchData {
    Tensor<T> images; // normalized, [N,C,H,W]
    std::optional<std::vector<int>> labels;
};

/// Replaces each label by the null class (num_classes-1) with probability p.
inline std::vector<int> apply_label_dropout(const std::vector<int>& labels, int num_classes,
                                            double p, Rng& rng) {
    std::vector<int> out = labels;
    if (p <= 0.0 || num_classes <= 0) return out;
    const int null_id = num_classes - 1;
    for (int& l : out)
        if (rng.uniform() < p) l = null_id;
    return out;
}

/// Noise-prediction objective: draw a timestep and a noise sample per batch
/// element, noise the images with the closed form, and take the MSE between
/// the injected and predicted noise. Draw order from `rng`: timesteps, noise,
/// label dropout, then model dropout.
template <typename T, typename Model>
Tensor<T> compute_loss(Model&& model, const schedule::ScheduleTable& table,
                       const BatchData<T>& batch, int num_classes, double label_dropout_prob,
                       Rng& rng) {
    const int n = static_cast<int>(batch.images.dim(0));
    const auto timesteps = sample_timesteps(rng, n, table.num_train_timesteps);
    auto noise = Tensor<T>::randn(batch.images.shape(), rng);
    std::optional<std::vector<int>> labels;
    if (batch.labels.has_value())
        labels = apply_label_dropout(*batch.labels, num_classes, label_dropout_prob, rng);
    auto noisy = schedule::add_noise(table, batch.images, noise, timesteps);
    auto predicted = model(noisy, timesteps, labels, &rng);
    auto d = sub(predicted, noise);
    return mean_all(mul(d, d));
}

/// Forward, backward and one AdamW update. Returns the pre-update loss.
template <typename T, typename Model>
T train_step(Model&& model, ParamStore<T>& params, OptimizerState<T>& opt,
             const schedule::ScheduleTable& table, const BatchData<T>& batch,
             const TrainConfig& cfg, int num_classes, Rng& rng) {
    params.zero_grad();
    auto loss = compute_loss(model, table, batch, num_classes, cfg.label_dropout_prob, rng);
    const T value = loss.item();
    if (!std::isfinite(static_cast<double>(value)))
        throw NumericError("non-finite training loss at optimizer step " +
                           std::to_string(opt.step + 1) + " (loss=" + std::to_string(value) + ")");
    backward(loss);
    adamw_step(params, opt, cfg.learning_rate, cfg.weight_decay);
    return value;
}

struct TrainSummary {
    std::int64_t steps = 0;
    double final_loss = 0.0;
};

/// Batch source over tensors already resident in memory (toy datasets, latent
/// caches). Shuffles with a (seed, epoch)-derived permutation and drops the
/// final partial batch, like the byte-level loader.
template <typename T>
class InMemoryProvider {
public:
    InMemoryProvider(Tensor<T> items, std::optional<std::vector<int>> labels, int batch_size,
                     std::uint64_t seed, bool shuffle = true)
        : items_(std::move(items)), labels_(std::move(labels)),
          batch_size_(static_cast<std::size_t>(batch_size)), seed_(seed), shuffle_(shuffle) {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (items_.dim(0) < batch_size_)
            throw ConfigError("batch_size exceeds dataset size " + std::to_string(items_.dim(0)));
        if (labels_.has_value() && labels_->size() != items_.dim(0))
            throw ConfigError("label count does not match item count");
    }

    std::size_t batches_per_epoch() const { return items_.dim(0) / batch_size_; }

    BatchData<T> batch(int epoch, std::size_t index) const {
        const std::size_t n = items_.dim(0);
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        if (shuffle_) {
            Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch), 0x7065726dull));
            for (std::size_t i = n - 1; i > 0; --i) {
                const std::size_t j =
                    static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i + 1)));
                std::swap(perm[i], perm[j]);
            }
        }
        const std::size_t per = items_.numel() / n;
        Shape shape = items_.shape();
        shape[0] = batch_size_;
        BatchData<T> out;
        out.images = Tensor<T>::zeros(shape);
        if (labels_.has_value()) out.labels = std::vector<int>(batch_size_);
        for (std::size_t k = 0; k < batch_size_; ++k) {
            const std::size_t src = perm[index * batch_size_ + k];
            std::copy_n(items_.data().data() + src * per, per,
                        out.images.data().data() + k * per);
            if (labels_.has_value()) (*out.labels)[k] = (*labels_)[src];
        }
        return out;
    }

private:
    Tensor<T> items_;
    std::optional<std::vector<int>> labels_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    bool shuffle_;
};

/// Epochs x batches of train_step. `provider` yields BatchData via
/// batches_per_epoch() and batch(epoch, index); shuffling is the provider's
/// job so results are independent of any prefetch timing. Emits one JSON
/// object per line: step records {"step","epoch","loss","lr"} every log_every
/// steps plus an epoch summary record.
template <typename T, typename Model, typename Provider>
TrainSummary train(Model&& model, ParamStore<T>& params, OptimizerState<T>& opt,
                   const schedule::ScheduleTable& table, Provider& provider,
                   const TrainConfig& cfg, int num_classes, std::ostream* log_stream) {
    cfg.validate();
    if (provider.batches_per_epoch() == 0)
        throw ConfigError("training dataset is empty (no full batches)");
    Rng rng(mix_seed(cfg.seed, 0x747261696eull));
    TrainSummary summary;
    for (int epoch = 0; epoch < cfg.num_epochs; ++epoch) {
        double epoch_sum = 0.0;
        std::int64_t epoch_steps = 0;
        for (std::size_t b = 0; b < provider.batches_per_epoch(); ++b) {
            BatchData<T> batch = provider.batch(epoch, b);
            const T loss = train_step(model, params, opt, table, batch, cfg, num_classes, rng);
            summary.steps += 1;
            epoch_sum += static_cast<double>(loss);
            epoch_steps += 1;
            summary.final_loss = static_cast<double>(loss);
            if (log_stream != nullptr && summary.steps % cfg.log_every == 0) {
                nlohmann::json rec = {{"step", summary.steps},
                                      {"epoch", epoch},
                                      {"loss", static_cast<double>(loss)},
                                      {"lr", cfg.learning_rate}};
                (*log_stream) << rec.dump() << '\n';
            }
        }
        if (log_stream != nullptr) {
            nlohmann::json rec = {{"epoch", epoch},
                                  {"mean_loss", epoch_sum / static_cast<double>(epoch_steps)},
                                  {"steps", epoch_steps}};
            (*log_stream) << rec.dump() << '\n';
        }
    }
    return summary;
}

} // namespace diffkit::diffusion

// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "diffkit/diffusion.hpp"
#include "diffkit/errors.hpp"
#include "diffkit/params.hpp"
#include "diffkit/rng.hpp"
#include "diffkit/tensor.hpp"
#include "diffkit/unet.hpp"

namespace diffkit::metrics {

/// Dense row-major D x D matrix of doubles.
using Matrix = std::vector<double>;

struct GaussianStats {
    std::vector<double> mean;
    Matrix cov; // D x D, symmetric PSD
    std::size_t dim() const { return mean.size(); }
};

/// Sample mean and unbiased covariance (divisor N-1) of row features [N,D].
inline GaussianStats fit_gaussian(const std::vector<std::vector<double>>& features) {
    if (features.size() < 2) throw DataError("fit_gaussian: need at least 2 samples");
    const std::size_t n = features.size(), d = features[0].size();
    for (const auto& row : features)
        if (row.size() != d) throw DataError("fit_gaussian: ragged feature rows");
    GaussianStats s;
    s.mean.assign(d, 0.0);
    for (const auto& row : features)
        for (std::size_t j = 0; j < d; ++j) s.mean[j] += row[j];
    for (double& v : s.mean) v /= static_cast<double>(n);
    s.cov.assign(d * d, 0.0);
    for (const auto& row : features)
        for (std::size_t i = 0; i < d; ++i) {
            const double di = row[i] - s.mean[i];
            for (std::size_t j = i; j < d; ++j) s.cov[i * d + j] += di * (row[j] - s.mean[j]);
        }
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            s.cov[i * d + j] *= inv;
            s.cov[j * d + i] = s.cov[i * d + j];
        }
    return s;
}

namespace detail {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues; V holds eigenvectors in columns (A = V diag(w) V^T).
inline std::vector<double> jacobi_eigen(const Matrix& a_in, std::size_t d, Matrix& v_out) {
    Matrix a = a_in;
    v_out.assign(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) v_out[i * d + i] = 1.0;
    double norm = 0.0;
    for (double x : a) norm += x * x;
    norm = std::sqrt(norm);
    const double tol = 1e-14 * std::max(1.0, norm);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (std::sqrt(2.0 * off) <= tol) break;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (std::abs(apq) <= tol / static_cast<double>(d)) continue;
                const double app = a[p * d + p], aqq = a[q * d + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    const double akp = a[k * d + p], akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double apk = a[p * d + k], aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double vkp = v_out[k * d + p], vkq = v_out[k * d + q];
                    v_out[k * d + p] = c * vkp - s * vkq;
                    v_out[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> w(d);
    for (std::size_t i = 0; i < d; ++i) w[i] = a[i * d + i];
    return w;
}

inline Matrix matmul_dd(const Matrix& a, const Matrix& b, std::size_t d) {
    Matrix c(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double aik = a[i * d + k];
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) c[i * d + j] += aik * b[k * d + j];
        }
    return c;
}

} // namespace detail

/// Principal square root of a symmetric PSD matrix via Jacobi
/// eigendecomposition. Eigenvalues in [-1e-6, 0) are clamped to zero; anything
/// more negative is a numeric error.
inline Matrix matrix_sqrt_psd(const Matrix& a, std::size_t d) {
    if (a.size() != d * d) throw DataError("matrix_sqrt_psd: bad dimensions");
    // Symmetrize first; callers may carry tiny asymmetries from products.
    Matrix sym(d * d);
    double scale = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            sym[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]);
            scale = std::max(scale, std::abs(sym[i * d + j]));
        }
    Matrix v;
    auto w = detail::jacobi_eigen(sym, d, v);
    const double tol = 1e-6 * std::max(1.0, scale);
    for (double& x : w) {
        if (x < -tol)
            throw NumericError("matrix_sqrt_psd: negative eigenvalue " + std::to_string(x));
        x = x > 0.0 ? std::sqrt(x) : 0.0;
    }
    // V diag(sqrt(w)) V^T.
    Matrix out(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double vik = v[i * d + k] * w[k];
            if (vik == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += vik * v[j * d + k];
        }
    return out;
}

/// Frechet distance between Gaussian fits:
/// ||mu_r - mu_g||^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2)), with the cross term
/// computed in the symmetric form Tr(sqrt(C_r^(1/2) C_g C_r^(1/2))).
inline double fid(const GaussianStats& real, const GaussianStats& gen) {
    if (real.dim() != gen.dim()) throw DataError("fid: dimension mismatch");
    const std::size_t d = real.dim();
    double mean_term = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = real.mean[i] - gen.mean[i];
        mean_term += diff * diff;
    }
    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) trace += real.cov[i * d + i] + gen.cov[i * d + i];
    Matrix root_r = matrix_sqrt_psd(real.cov, d);
    Matrix inner = detail::matmul_dd(detail::matmul_dd(root_r, gen.cov, d), root_r, d);
    Matrix cross = matrix_sqrt_psd(inner, d);
    double cross_trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) cross_trace += cross[i * d + i];
    return mean_term + trace - 2.0 * cross_trace;
}

struct InceptionScore {
    double mean = 0.0;
    double std = 0.0;
};

/// exp(E_x KL(p(y|x) || p(y))) per split, averaged; p(y) is each split's
/// marginal. Rows must be probability distributions.
inline InceptionScore inception_score(const std::vector<std::vector<double>>& probs, int splits) {
    const std::size_t n = probs.size();
    if (n == 0 || splits < 1 || n < static_cast<std::size_t>(splits))
        throw DataError("inception_score: need at least one sample per split");
    const std::size_t c = probs[0].size();
    for (const auto& row : probs) {
        if (row.size() != c) throw DataError("inception_score: ragged probability rows");
        double sum = 0.0;
        for (double p : row) {
            if (p < 0.0) throw DataError("inception_score: negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-5)
            throw DataError("inception_score: row does not sum to 1 (sum=" + std::to_string(sum) +
                            ")");
    }
    std::vector<double> scores;
    for (int s = 0; s < splits; ++s) {
        const std::size_t lo = n * static_cast<std::size_t>(s) / static_cast<std::size_t>(splits);
        const std::size_t hi =
            n * static_cast<std::size_t>(s + 1) / static_cast<std::size_t>(splits);
        std::vector<double> marginal(c, 0.0);
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < c; ++j) marginal[j] += probs[i][j];
        for (double& m : marginal) m /= static_cast<double>(hi - lo);
        double mean_kl = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            double kl = 0.0;
            for (std::size_t j = 0; j < c; ++j)
                if (probs[i][j] > 0.0) kl += probs[i][j] * std::log(probs[i][j] / marginal[j]);
            mean_kl += kl;
        }
        scores.push_back(std::exp(mean_kl / static_cast<double>(hi - lo)));
    }
    InceptionScore out;
    for (double v : scores) out.mean += v;
    out.mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double v : scores) var += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(var / static_cast<double>(scores.size()));
    return out;
}

// ---------------------------------------------------------------------------
// Feature extractors
// ---------------------------------------------------------------------------

/// Deterministic map from normalized image batches to feature rows (for FID)
/// and class probability rows (for IS).
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::size_t feature_dim() const = 0;
    virtual std::size_t num_classes() const = 0;
    virtual std::vector<std::vector<double>> features(const Tensor<float>& images) = 0;
    virtual std::vector<std::vector<double>> probabilities(const Tensor<float>& images) = 0;
};

/// Stack of strided convolutions with SiLU, global average pooling into the
/// feature vector, and a linear head for class probabilities. Serves both the
/// fixed-seed random extractor and the trained classifier.
struct CnnConfig {
    int in_ch = 3;
    std::vector<int> channels = {16, 32, 64};
    int num_classes = 10;
};

template <typename T>
ParamStore<T> init_cnn(const CnnConfig& cfg, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x636e6eull));
    ParamStore<T> p;
    int prev = cfg.in_ch;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        unet::detail::add_conv(p, "conv" + std::to_string(i), cfg.channels[i], prev, 4, rng);
        prev = cfg.channels[i];
    }
    unet::detail::add_linear(p, "head", prev, cfg.num_classes, rng);
    return p;
}

/// Pooled penultimate features [N, C_last].
template <typename T>
Tensor<T> cnn_features(const ParamStore<T>& p, const CnnConfig& cfg, const Tensor<T>& images) {
    auto h = images;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        const std::string name = "conv" + std::to_string(i);
        h = silu(conv2d(h, p.at(name + ".w"), p.at(name + ".b"), 2, 1));
    }
    // Global average pool.
    const std::size_t n = h.dim(0), c = h.dim(1), hw = h.dim(2) * h.dim(3);
    Tensor<T> pooled = Tensor<T>::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            T acc = 0;
            const T* src = h.data().data() + (i * c + j) * hw;
            for (std::size_t k = 0; k < hw; ++k) acc += src[k];
            pooled.data()[i * c + j] = acc / static_cast<T>(hw);
        }
    return pooled;
}

template <typename T>
Tensor<T> cnn_logits(const ParamStore<T>& p, const CnnConfig& cfg, const Tensor<T>& images) {
    return linear(cnn_features(p, cfg, images), p.at("head.w"), p.at("head.b"));
}

class CnnExtractor final : public FeatureExtractor {
public:
    CnnExtractor(ParamStore<float> params, CnnConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {}

    /// Fixed-seed random weights; no training required.
    static std::unique_ptr<CnnExtractor> random(int num_classes = 10, std::uint64_t seed = 7) {
        CnnConfig cfg;
        cfg.num_classes = num_classes;
        return std::make_unique<CnnExtractor>(init_cnn<float>(cfg, seed), cfg);
    }

    std::size_t feature_dim() const override {
        return static_cast<std::size_t>(cfg_.channels.back());
    }
    std::size_t num_classes() const override { return static_cast<std::size_t>(cfg_.num_classes); }

    std::vector<std::vector<double>> features(const Tensor<float>& images) override {
        NoGradGuard ng;
        auto pooled = cnn_features(params_, cfg_, images);
        return rows_of(pooled);
    }

    std::vector<std::vector<double>> probabilities(const Tensor<float>& images) override {
        NoGradGuard ng;
        auto probs = softmax_lastdim(cnn_logits(params_, cfg_, images));
        return rows_of(probs);
    }

    const ParamStore<float>& params() const { return params_; }
    const CnnConfig& config() const { return cfg_; }

private:
    static std::vector<std::vector<double>> rows_of(const Tensor<float>& t) {
        const std::size_t n = t.dim(0), d = t.dim(1);
        std::vector<std::vector<double>> rows(n, std::vector<double>(d));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) rows[i][j] = t.data()[i * d + j];
        return rows;
    }

    ParamStore<float> params_;
    CnnConfig cfg_;
};

/// Cross-entropy training for the classifier backend.
template <typename T>
T classifier_train_step(ParamStore<T>& params, const CnnConfig& cfg,
                        diffusion::OptimizerState<T>& opt, const Tensor<T>& images,
                        const std::vector<int>& labels, double lr, double weight_decay) {
    params.zero_grad();
    auto loss = cross_entropy(cnn_logits(params, cfg, images), labels);
    const T value = loss.item();
    if (!std::isfinite(static_cast<double>(value)))
        throw NumericError("non-finite classifier loss");
    backward(loss);
    adamw_step(params, opt, lr, weight_decay);
    return value;
}

} // namespace diffkit::metrics

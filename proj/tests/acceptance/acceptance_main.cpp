// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: every release criterion as one numbered check with a
// single pass/fail line. Run with no arguments for the full suite or with a
// criterion number to run one check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diffkit/checkpoint.hpp"
#include "diffkit/config.hpp"
#include "diffkit/data.hpp"
#include "diffkit/diffusion.hpp"
#include "diffkit/latent.hpp"
#include "diffkit/metrics.hpp"
#include "diffkit/pipeline.hpp"
#include "diffkit/sampler.hpp"
#include "diffkit/schedule.hpp"
#include "diffkit/tensor.hpp"
#include "diffkit/unet.hpp"

namespace fs = std::filesystem;
using diffkit::ParamStore;
using diffkit::Rng;
using diffkit::Tensor;
namespace config = diffkit::config;
namespace data = diffkit::data;
namespace diffusion = diffkit::diffusion;
namespace latent = diffkit::latent;
namespace metrics = diffkit::metrics;
namespace sampler = diffkit::sampler;
namespace sched = diffkit::schedule;
namespace unet = diffkit::unet;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

#define EXPECT(cond, msg)                                                                        \
    do {                                                                                         \
        if (!(cond)) {                                                                           \
            out.pass = false;                                                                    \
            out.detail += std::string(out.detail.empty() ? "" : "; ") + (msg);                   \
        }                                                                                        \
    } while (0)

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

sched::ScheduleTable default_linear(int t_count = 1000) {
    sched::ScheduleConfig cfg;
    cfg.num_train_timesteps = t_count;
    return sched::build_linear(cfg);
}

unet::UNetConfig tiny_unet_config(int in_size = 8, int in_ch = 3, int base = 8,
                                  int num_classes = 0) {
    unet::UNetConfig cfg;
    cfg.in_size = in_size;
    cfg.in_ch = in_ch;
    cfg.base_ch = base;
    cfg.ch_mult = {1, 2};
    cfg.num_res_blocks = 1;
    cfg.attn_levels = {1};
    cfg.dropout = 0.0;
    cfg.num_classes = num_classes;
    return cfg;
}

// Random but non-degenerate parameters (zero-initialized tensors nudged).
template <typename T>
ParamStore<T> random_params(const unet::UNetConfig& cfg, std::uint64_t seed) {
    auto params = unet::init<T>(cfg, seed);
    Rng nudge(diffkit::mix_seed(seed, 0x6e756467ull));
    for (std::size_t i = 0; i < params.size(); ++i)
        for (T& v : params.tensor(i).data())
            if (v == T(0)) v = static_cast<T>(nudge.normal() * 0.05);
    return params;
}

// --- criterion 1: scheduler identities ---------------------------------------

Outcome criterion_schedule_identities() {
    Outcome out;
    auto linear = default_linear(1000);
    EXPECT(linear.betas.front() == 0.0002, "linear beta_0 != 0.0002 exactly");
    EXPECT(linear.betas.back() == 0.02, "linear beta_999 != 0.02 exactly");

    sched::ScheduleConfig cc;
    cc.num_train_timesteps = 1000;
    cc.beta_schedule = sched::Kind::cosine;
    auto cosine = sched::build_cosine(cc);
    EXPECT(std::abs(sched::cosine_alpha_bar(0, 1000) - 1.0) <= 1e-6, "cosine abar(0) != 1");
    EXPECT(std::abs(sched::cosine_alpha_bar(500, 1000) - 0.5) <= 1e-6, "cosine abar(T/2) != 1/2");
    EXPECT(std::abs(sched::cosine_alpha_bar(1000, 1000) - sched::kAlphaBarFloor) <= 1e-6,
           "cosine abar(T) != floor");
    EXPECT(cosine.alpha_cumprod_at(-1) == 1.0, "clean-image anchor != 1");
    EXPECT(std::abs(cosine.alphas_cumprod[499] - 0.5) <= 1e-6, "table abar at T/2 != 1/2");
    EXPECT(std::abs(cosine.alphas_cumprod[999] - sched::kAlphaBarFloor) <=
               1e-6 * sched::kAlphaBarFloor + 1e-12,
           "table abar at T != floor");

    for (const auto& table : {linear, cosine}) {
        double prev = 2.0;
        for (double abar : table.alphas_cumprod) {
            EXPECT(abar < prev, "alpha_cumprod not strictly decreasing");
            prev = abar;
        }
    }
    return out;
}

// --- criterion 2: forward-process equivalence --------------------------------

Outcome criterion_forward_equivalence() {
    Outcome out;
    sched::ScheduleConfig sc;
    sc.num_train_timesteps = 50;
    auto table = sched::build_linear(sc);
    Rng rng(20260809);
    const int trials = 20000;
    for (int rep = 0; rep < 5; ++rep) {
        const int t = static_cast<int>(rng.uniform_int(5, 50));
        const double x0 = 2.0 + 2.0 * rng.uniform();
        double sum = 0.0, sum_sq = 0.0;
        for (int trial = 0; trial < trials; ++trial) {
            double x = x0;
            for (int i = 0; i <= t; ++i)
                x = std::sqrt(1.0 - table.betas[i]) * x + std::sqrt(table.betas[i]) * rng.normal();
            sum += x;
            sum_sq += x * x;
        }
        const double mean = sum / trials;
        const double var = sum_sq / trials - mean * mean;
        const double abar = table.alphas_cumprod[t];
        const double mean_target = std::sqrt(abar) * x0;
        EXPECT(std::abs(mean - mean_target) <= 0.02 * std::abs(mean_target),
               "t=" + std::to_string(t) + ": chain mean " + fmt(mean) + " vs closed form " +
                   fmt(mean_target));
        EXPECT(std::abs(var - (1.0 - abar)) <= 0.03 * (1.0 - abar),
               "t=" + std::to_string(t) + ": chain var " + fmt(var) + " vs closed form " +
                   fmt(1.0 - abar));
    }
    return out;
}

// --- criterion 3: inversion identity ------------------------------------------

Outcome criterion_inversion() {
    Outcome out;
    sched::ScheduleConfig cc;
    cc.num_train_timesteps = 1000;
    cc.beta_schedule = sched::Kind::cosine;
    const auto tables = {default_linear(1000), sched::build_cosine(cc)};
    Rng rng(3);
    double worst = 0.0;
    for (const auto& table : tables) {
        for (int rep = 0; rep < 50; ++rep) {
            const int t = static_cast<int>(rng.uniform_int(0, 1000));
            auto x0 = Tensor<double>::randn({2, 3, 4, 4}, rng);
            auto eps = Tensor<double>::randn({2, 3, 4, 4}, rng);
            auto xt = sched::add_noise(table, x0, eps, {t, t});
            auto pred = sampler::ddim_pred_x0(table, eps, t, xt);
            for (std::size_t i = 0; i < pred.numel(); ++i)
                worst = std::max(worst, std::abs(pred.data()[i] - x0.data()[i]));
        }
    }
    EXPECT(worst <= 1e-5, "max |pred_x0 - x0| = " + fmt(worst));
    out.detail = "max abs error " + fmt(worst);
    return out;
}

// --- criterion 4: DDPM/DDIM consistency ----------------------------------------

Outcome criterion_ddpm_ddim_consistency() {
    Outcome out;
    auto table = default_linear(1000);
    double worst = 0.0;
    for (int t = 1; t < 1000; ++t) {
        const double ddim = sampler::ddim_sigma_squared(table, t, t - 1, 1.0);
        const double ddpm = sched::posterior_variance(table, t);
        worst = std::max(worst, std::abs(ddim - ddpm));
    }
    EXPECT(worst <= 1e-6, "max |ddim sigma^2 - ddpm posterior| = " + fmt(worst));
    out.detail = "max abs difference " + fmt(worst);
    return out;
}

// --- criterion 5: bitwise determinism through files -----------------------------

std::string read_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

Outcome criterion_determinism() {
    Outcome out;
    const auto base = fs::temp_directory_path() / "diffkit_acceptance_determinism";
    fs::remove_all(base);
    fs::create_directories(base);

    // Pixel-space model checkpoint.
    config::RunConfig pixel_cfg;
    config::apply_file_text(pixel_cfg,
                            "image_size = 8\nunet_in_size = 8\nunet_ch = 8\n"
                            "unet_ch_mult = [1,2]\nunet_attn = [1]\nunet_num_res_blocks = 1\n"
                            "num_train_timesteps = 50\nnum_inference_steps = 5\n"
                            "num_classes = 0\neta = 0\nseed = 11\n");
    config::validate(pixel_cfg);
    auto pixel_params = random_params<float>(config::unet_config(pixel_cfg), 1);
    const std::string pixel_ck = (base / "pixel.dfck").string();
    diffkit::checkpoint::save(
        diffkit::pipeline::make_model_checkpoint(pixel_cfg, pixel_params, nullptr, 0), pixel_ck);

    auto compare_runs = [&](const config::RunConfig& cfg, const std::string& ck,
                            const std::optional<std::string>& vae, const char* what) {
        const auto d1 = base / (std::string(what) + "_1");
        const auto d2 = base / (std::string(what) + "_2");
        diffkit::pipeline::run_sample(cfg, ck, vae, d1.string(), 4);
        diffkit::pipeline::run_sample(cfg, ck, vae, d2.string(), 4);
        for (const char* name : {"sample_000.png", "sample_001.png", "sample_002.png",
                                 "sample_003.png", "grid.png"}) {
            const auto b1 = read_bytes((d1 / name).string());
            const auto b2 = read_bytes((d2 / name).string());
            EXPECT(!b1.empty() && b1 == b2,
                   std::string(what) + ": " + name + " differs between identical runs");
        }
    };
    compare_runs(pixel_cfg, pixel_ck, std::nullopt, "pixel");

    // Latent path: random tiny VAE codec behind the same sampler.
    config::RunConfig lat_cfg;
    config::apply_file_text(lat_cfg,
                            "image_size = 16\nlatent = true\nlatent_factor = 2\n"
                            "latent_channels = 4\nunet_in_size = 8\nunet_in_ch = 4\n"
                            "unet_ch = 8\nunet_ch_mult = [1,2]\nunet_attn = [1]\n"
                            "unet_num_res_blocks = 1\nnum_train_timesteps = 50\n"
                            "num_inference_steps = 5\nnum_classes = 0\neta = 0\nseed = 12\n"
                            "vae_base_ch = 16\n");
    config::validate(lat_cfg);
    auto lat_params = random_params<float>(config::unet_config(lat_cfg), 2);
    const std::string lat_ck = (base / "latent.dfck").string();
    diffkit::checkpoint::save(
        diffkit::pipeline::make_model_checkpoint(lat_cfg, lat_params, nullptr, 0), lat_ck);

    auto vae_cfg = config::vae_config(lat_cfg);
    auto vae_params = latent::init_vae<float>(vae_cfg, 3);
    Rng probe_rng(4);
    auto probe = Tensor<float>::randn({8, 3, 16, 16}, probe_rng);
    const double scale = latent::compute_latent_scale(vae_params, vae_cfg, probe);
    const std::string vae_ck = (base / "vae.dfck").string();
    diffkit::checkpoint::save(
        diffkit::pipeline::make_model_checkpoint(lat_cfg, vae_params, nullptr, 0, scale), vae_ck);

    compare_runs(lat_cfg, lat_ck, vae_ck, "latent");

    fs::remove_all(base);
    return out;
}

// --- criterion 6: step-skipping speedup -----------------------------------------

Outcome criterion_speedup() {
    Outcome out;
    auto cfg = tiny_unet_config(16, 3, 16);
    auto params = random_params<float>(cfg, 5);
    auto table = default_linear(1000);
    auto model = [&](const Tensor<float>& x, const std::vector<int>& t,
                     const std::optional<std::vector<int>>& labels) {
        return unet::forward(params, cfg, x, t, labels);
    };
    const diffkit::Shape shape{2, 3, 16, 16};

    using Clock = std::chrono::steady_clock;
    sampler::SamplerConfig slow;
    slow.kind = sampler::Kind::ddpm;
    slow.num_inference_steps = 1000;
    slow.seed = 6;
    const auto t0 = Clock::now();
    sampler::generate<float>(model, table, slow, shape, std::nullopt, 0);
    const auto t1 = Clock::now();

    sampler::SamplerConfig fast;
    fast.kind = sampler::Kind::ddim;
    fast.num_inference_steps = 250;
    fast.eta = 0.0;
    fast.seed = 6;
    const auto t2 = Clock::now();
    sampler::generate<float>(model, table, fast, shape, std::nullopt, 0);
    const auto t3 = Clock::now();

    const double slow_s = std::chrono::duration<double>(t1 - t0).count();
    const double fast_s = std::chrono::duration<double>(t3 - t2).count();
    const double ratio = fast_s / slow_s;
    out.detail = "1000-step " + fmt(slow_s) + " s, 250-step " + fmt(fast_s) + " s, ratio " +
                 fmt(ratio);
    EXPECT(ratio <= 0.35, "wall-clock ratio " + fmt(ratio) + " > 0.35");
    return out;
}

// --- criterion 7: gradient correctness -------------------------------------------

double finite_diff(const std::function<double()>& eval, double* slot) {
    const double h = 1e-6;
    const double saved = *slot;
    *slot = saved + h;
    const double fp = eval();
    *slot = saved - h;
    const double fm = eval();
    *slot = saved;
    return (fp - fm) / (2.0 * h);
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

Outcome criterion_gradients() {
    Outcome out;
    // UNet MSE gradients.
    {
        auto cfg = tiny_unet_config(8, 2, 8, 3);
        auto store = random_params<double>(cfg, 7);
        store.set_requires_grad(true);
        Rng rng(8);
        auto x = Tensor<double>::randn({2, 2, 8, 8}, rng);
        auto target = Tensor<double>::randn({2, 2, 8, 8}, rng);
        std::vector<int> t = {3, 31};
        std::vector<int> labels = {0, 2};
        auto loss_fn = [&] {
            auto y = unet::forward(store, cfg, x, t, labels);
            auto d = diffkit::sub(y, target);
            return diffkit::mean_all(diffkit::mul(d, d));
        };
        for (std::size_t i = 0; i < store.size(); ++i) store.tensor(i).zero_grad();
        auto loss = loss_fn();
        diffkit::backward(loss);
        Rng picker(9);
        double worst = 0.0;
        for (int rep = 0; rep < 24; ++rep) {
            auto& tensor = store.tensor(static_cast<std::size_t>(
                picker.uniform_int(0, static_cast<std::int64_t>(store.size()))));
            const std::size_t idx = static_cast<std::size_t>(
                picker.uniform_int(0, static_cast<std::int64_t>(tensor.numel())));
            const double analytic = tensor.has_grad() ? tensor.grad()[idx] : 0.0;
            const double numeric =
                finite_diff([&] { return loss_fn().item(); }, &tensor.data()[idx]);
            worst = std::max(worst, rel_err(analytic, numeric));
        }
        EXPECT(worst < 1e-3, "UNet max rel grad error " + fmt(worst));
        out.detail += "unet " + fmt(worst);
    }
    // VAE ELBO gradients through the reparameterization.
    {
        latent::VaeConfig vc;
        vc.base_ch = 16;
        vc.latent_channels = 4;
        vc.downsample_factor = 2;
        auto store = latent::init_vae<double>(vc, 10);
        store.set_requires_grad(true);
        Rng rng(11);
        auto x = Tensor<double>::randn({2, 3, 8, 8}, rng);
        auto loss_fn = [&] {
            Rng eps_rng(12);
            auto [mu, logvar] = latent::encode_moments(store, vc, x);
            auto z = latent::reparameterize(mu, logvar, eps_rng);
            auto recon = latent::decode(store, vc, z);
            auto d = diffkit::sub(recon, x);
            return diffkit::add(diffkit::mean_all(diffkit::mul(d, d)),
                                diffkit::mul(latent::kl_divergence(mu, logvar), 0.05));
        };
        for (std::size_t i = 0; i < store.size(); ++i) store.tensor(i).zero_grad();
        auto loss = loss_fn();
        diffkit::backward(loss);
        Rng picker(13);
        double worst = 0.0;
        for (int rep = 0; rep < 24; ++rep) {
            auto& tensor = store.tensor(static_cast<std::size_t>(
                picker.uniform_int(0, static_cast<std::int64_t>(store.size()))));
            const std::size_t idx = static_cast<std::size_t>(
                picker.uniform_int(0, static_cast<std::int64_t>(tensor.numel())));
            const double analytic = tensor.has_grad() ? tensor.grad()[idx] : 0.0;
            const double numeric =
                finite_diff([&] { return loss_fn().item(); }, &tensor.data()[idx]);
            worst = std::max(worst, rel_err(analytic, numeric));
        }
        EXPECT(worst < 1e-3, "VAE ELBO max rel grad error " + fmt(worst));
        out.detail += ", vae " + fmt(worst);
    }
    return out;
}

// --- criterion 8: toy generation end to end ---------------------------------------

Outcome criterion_toy_generation() {
    Outcome out;
    // Two-mode dataset: solid bright (+0.8) and solid dark (-0.8) 8x8 images.
    const std::size_t n_items = 256;
    auto items = Tensor<float>::zeros({n_items, 3, 8, 8});
    for (std::size_t i = 0; i < n_items; ++i) {
        const float v = i % 2 == 0 ? 0.8f : -0.8f;
        for (std::size_t j = 0; j < 3 * 64; ++j) items.data()[i * 3 * 64 + j] = v;
    }

    auto cfg = tiny_unet_config(8, 3, 16);
    auto params = unet::init<float>(cfg, 21);
    params.set_requires_grad(true);
    auto opt = diffusion::OptimizerState<float>::init_like(params);
    auto table = default_linear(1000);

    diffusion::TrainConfig tc;
    tc.num_epochs = 313; // 256/32 = 8 batches per epoch; capped below at 2500 steps
    tc.batch_size = 32;
    tc.learning_rate = 2e-3;
    tc.weight_decay = 0.0;
    tc.label_dropout_prob = 0.0;
    tc.seed = 22;

    diffusion::InMemoryProvider<float> provider(items, std::nullopt, tc.batch_size, tc.seed);
    auto model = [&](const Tensor<float>& x, const std::vector<int>& t,
                     const std::optional<std::vector<int>>& labels, Rng* rng) {
        return unet::forward(params, cfg, x, t, labels, rng);
    };

    const int max_steps = 2500; // comfortably under the 5k budget
    Rng rng(diffkit::mix_seed(tc.seed, 0x747261696eull));
    int steps = 0;
    double last_loss = 1.0;
    for (int epoch = 0; epoch < tc.num_epochs && steps < max_steps; ++epoch) {
        for (std::size_t b = 0; b < provider.batches_per_epoch() && steps < max_steps; ++b) {
            auto batch = provider.batch(epoch, b);
            last_loss = diffusion::train_step(model, params, opt, table, batch, tc, 0, rng);
            ++steps;
        }
    }

    // 500 deterministic DDIM samples, classified by mean pixel value.
    sampler::SamplerConfig scfg;
    scfg.kind = sampler::Kind::ddim;
    scfg.num_inference_steps = 50;
    scfg.eta = 0.0;
    scfg.seed = 23;
    auto sampling_model = [&](const Tensor<float>& x, const std::vector<int>& t,
                              const std::optional<std::vector<int>>& labels) {
        return unet::forward(params, cfg, x, t, labels);
    };
    auto result =
        sampler::generate<float>(sampling_model, table, scfg, {500, 3, 8, 8}, std::nullopt, 0);

    int bright = 0;
    double bright_sum = 0.0, dark_sum = 0.0;
    std::size_t bright_px = 0, dark_px = 0;
    const std::size_t per = 3 * 64;
    for (std::size_t i = 0; i < 500; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < per; ++j) mean += result.raw.data()[i * per + j];
        mean /= per;
        if (mean > 0) {
            ++bright;
            bright_sum += mean * per;
            bright_px += per;
        } else {
            dark_sum += mean * per;
            dark_px += per;
        }
    }
    const double bright_frac = bright / 500.0;
    const double bright_mean = bright_px ? bright_sum / bright_px : 0.0;
    const double dark_mean = dark_px ? dark_sum / dark_px : 0.0;
    out.detail = "train steps " + std::to_string(steps) + ", final loss " + fmt(last_loss) +
                 ", bright fraction " + fmt(bright_frac) + ", mode means " + fmt(bright_mean) +
                 " / " + fmt(dark_mean);
    EXPECT(bright_frac >= 0.4 && bright_frac <= 0.6,
           "mode balance " + fmt(bright_frac) + " outside 50% +/- 10%");
    EXPECT(std::abs(bright_mean - 0.8) <= 0.15,
           "bright mode mean " + fmt(bright_mean) + " not within 0.15 of +0.8");
    EXPECT(std::abs(dark_mean + 0.8) <= 0.15,
           "dark mode mean " + fmt(dark_mean) + " not within 0.15 of -0.8");
    return out;
}

// --- criterion 9: metric identities -------------------------------------------------

Outcome criterion_metric_identities() {
    Outcome out;
    Rng rng(31);
    // fid(A, A) = 0.
    {
        std::vector<std::vector<double>> rows(60, std::vector<double>(6));
        for (auto& r : rows)
            for (double& v : r) v = rng.normal();
        auto s = metrics::fit_gaussian(rows);
        EXPECT(std::abs(metrics::fid(s, s)) <= 1e-6, "fid(A,A) = " + fmt(metrics::fid(s, s)));
    }
    // 1-d analytic cases: both exactly 1.
    {
        metrics::GaussianStats a{{0.0}, {1.0}}, b{{1.0}, {1.0}};
        EXPECT(std::abs(metrics::fid(a, b) - 1.0) <= 1e-9, "1-d mean case != 1");
        metrics::GaussianStats c{{0.0}, {4.0}}, d{{0.0}, {1.0}};
        EXPECT(std::abs(metrics::fid(c, d) - 1.0) <= 1e-9, "1-d variance case != 1");
    }
    // IS identities.
    {
        std::vector<std::vector<double>> uniform(30, std::vector<double>(10, 0.1));
        EXPECT(std::abs(metrics::inception_score(uniform, 3).mean - 1.0) <= 1e-6,
               "IS of uniform probs != 1");
        const std::size_t c = 8;
        std::vector<std::vector<double>> onehot;
        for (std::size_t i = 0; i < c; ++i) {
            std::vector<double> row(c, 0.0);
            row[i] = 1.0;
            onehot.push_back(row);
        }
        EXPECT(std::abs(metrics::inception_score(onehot, 1).mean - double(c)) <= 1e-6,
               "IS of balanced one-hot != C");
    }
    // Matrix square root on 50 random SPD matrices.
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t d = 2 + static_cast<std::size_t>(rng.uniform_int(0, 31));
        metrics::Matrix b(d * d);
        for (double& v : b) v = rng.normal();
        metrics::Matrix a(d * d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < d; ++k) acc += b[i * d + k] * b[j * d + k];
                a[i * d + j] = acc + (i == j ? 1e-3 : 0.0);
            }
        auto m = metrics::matrix_sqrt_psd(a, d);
        auto mm = metrics::detail::matmul_dd(m, m, d);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < d * d; ++i) {
            num += (mm[i] - a[i]) * (mm[i] - a[i]);
            den += a[i] * a[i];
        }
        worst = std::max(worst, std::sqrt(num / den));
    }
    EXPECT(worst <= 1e-5, "matrix sqrt Frobenius error " + fmt(worst));
    out.detail = "sqrt worst rel error " + fmt(worst);
    return out;
}

// --- criterion 10: classifier-free guidance contract ----------------------------------

Outcome criterion_cfg_contract() {
    Outcome out;
    auto cfg = tiny_unet_config(8, 3, 8, 4); // 3 real classes + null
    auto params = random_params<float>(cfg, 41);
    auto table = default_linear(50);
    auto model = [&](const Tensor<float>& x, const std::vector<int>& t,
                     const std::optional<std::vector<int>>& labels) {
        return unet::forward(params, cfg, x, t, labels);
    };
    const diffkit::Shape shape{3, 3, 8, 8};
    const std::vector<int> labels{0, 1, 2};

    sampler::SamplerConfig s0;
    s0.num_inference_steps = 5;
    s0.eta = 0.0;
    s0.seed = 42;
    s0.guidance_weight = 0.0;
    auto guided_w0 = sampler::generate<float>(model, table, s0, shape, labels, cfg.num_classes);
    auto uncond = sampler::generate<float>(model, table, s0, shape, std::nullopt, cfg.num_classes);
    EXPECT(std::memcmp(guided_w0.images.data().data(), uncond.images.data().data(),
                       guided_w0.images.numel() * sizeof(float)) == 0,
           "w = 0 does not reproduce the unconditional output bitwise");

    sampler::SamplerConfig s1 = s0;
    s1.guidance_weight = 1.0;
    auto guided_w1 = sampler::generate<float>(model, table, s1, shape, labels, cfg.num_classes);
    // Independent conditional chain: plain DDIM loop conditioned on the labels.
    {
        diffkit::NoGradGuard ng;
        auto rng = sampler::generation_rng(s1);
        auto x = Tensor<float>::randn(shape, rng);
        auto ts = sampler::select_timesteps(50, 5);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const int prev = i + 1 < ts.size() ? ts[i + 1] : -1;
            auto eps = model(x, std::vector<int>(3, ts[i]), labels);
            x = sampler::ddim_step(table, eps, ts[i], prev, x, 0.0, rng);
        }
        EXPECT(std::memcmp(guided_w1.raw.data().data(), x.data().data(),
                           x.numel() * sizeof(float)) == 0,
               "w = 1 does not reproduce the plain conditional chain bitwise");
    }

    // Guidance with w > 1 must actually change the output.
    sampler::SamplerConfig s3 = s0;
    s3.guidance_weight = 3.0;
    auto guided_w3 = sampler::generate<float>(model, table, s3, shape, labels, cfg.num_classes);
    EXPECT(std::memcmp(guided_w3.images.data().data(), guided_w1.images.data().data(),
                       guided_w3.images.numel() * sizeof(float)) != 0,
           "w = 3 output unexpectedly equals w = 1 output");

    // Label-dropout rate over 10k draws within 3 sigma of p.
    Rng rng(43);
    const double p = 0.1;
    std::vector<int> many(10000, 1);
    auto dropped = diffusion::apply_label_dropout(many, cfg.num_classes, p, rng);
    int nulls = 0;
    for (int l : dropped)
        if (l == cfg.num_classes - 1) ++nulls;
    const double frac = nulls / 10000.0;
    const double sigma = std::sqrt(p * (1.0 - p) / 10000.0);
    EXPECT(std::abs(frac - p) <= 3.0 * sigma,
           "label dropout rate " + fmt(frac) + " outside 3 sigma of " + fmt(p));
    out.detail = "dropout rate " + fmt(frac);
    return out;
}

// --- criterion 11: data pipeline -------------------------------------------------------

Outcome criterion_data_pipeline() {
    Outcome out;
    // 10-record fixture with the exact 3073-byte framing.
    std::vector<std::uint8_t> bytes;
    Rng rng(51);
    for (int i = 0; i < 10; ++i) {
        bytes.push_back(static_cast<std::uint8_t>(i % 10));
        for (int j = 0; j < 3072; ++j)
            bytes.push_back(static_cast<std::uint8_t>(rng.uniform_int(0, 256)));
    }
    EXPECT(bytes.size() == 10u * 3073u, "fixture framing arithmetic failed");
    auto ds = data::parse_cifar10_binary(bytes);
    EXPECT(ds.size() == 10u, "expected 10 parsed records");
    bool threw = false;
    try {
        auto bad = bytes;
        bad.push_back(0);
        data::parse_cifar10_binary(bad);
    } catch (const diffkit::DataError&) {
        threw = true;
    }
    EXPECT(threw, "trailing byte was not rejected");

    // Loader determinism across worker counts.
    data::LoaderConfig lc;
    lc.batch_size = 3;
    lc.flip_prob = 0.5;
    lc.num_workers = 1;
    data::Loader loader(ds, lc);
    auto drain = [&](int workers) {
        data::Prefetcher<data::Loader> pf(loader, workers);
        std::vector<float> all;
        for (int epoch = 0; epoch < 2; ++epoch)
            for (std::size_t b = 0; b < pf.batches_per_epoch(); ++b) {
                auto batch = pf.batch(epoch, b);
                all.insert(all.end(), batch.images.data().begin(), batch.images.data().end());
            }
        return all;
    };
    auto one = drain(1);
    auto four = drain(4);
    EXPECT(one.size() == four.size() &&
               std::memcmp(one.data(), four.data(), one.size() * sizeof(float)) == 0,
           "loader output differs between 1 and 4 workers");

    // Normalization round trip within one byte value.
    std::vector<std::uint8_t> ramp(256);
    for (int i = 0; i < 256; ++i) ramp[i] = static_cast<std::uint8_t>(i);
    auto t = data::normalize_bytes<float>(ramp.data(), 1, 1, 16, 16,
                                          data::Normalization::unit_interval_symmetric);
    auto unit = data::to_unit_interval(t, data::Normalization::unit_interval_symmetric);
    int worst = 0;
    for (int i = 0; i < 256; ++i) {
        const long back = std::lround(255.0 * unit.data()[i]);
        worst = std::max(worst, std::abs(static_cast<int>(back) - i));
    }
    EXPECT(worst <= 1, "round trip off by " + std::to_string(worst) + " byte values");
    out.detail = "round-trip max delta " + std::to_string(worst);
    return out;
}

// --- criterion 12: parameter count -------------------------------------------------------

Outcome criterion_param_count() {
    Outcome out;
    unet::UNetConfig cfg; // defaults follow the CIFAR-10 table
    cfg.num_classes = 10;
    auto params = unet::init<float>(cfg, 42);
    const double count = static_cast<double>(unet::param_count(params));
    out.detail = std::to_string(static_cast<long long>(count)) + " parameters";
    EXPECT(count >= 0.9 * 35e6 && count <= 1.1 * 35e6,
           "parameter count " + out.detail + " outside 35M +/- 10%");
    return out;
}

struct Criterion {
    int number;
    const char* name;
    std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> list = {
        {1, "scheduler identities", criterion_schedule_identities},
        {2, "forward-process equivalence (Monte Carlo)", criterion_forward_equivalence},
        {3, "noising/prediction inversion identity", criterion_inversion},
        {4, "DDPM/DDIM variance consistency", criterion_ddpm_ddim_consistency},
        {5, "bitwise sampling determinism (pixel and latent)", criterion_determinism},
        {6, "step-skipping wall-clock speedup", criterion_speedup},
        {7, "gradient correctness (UNet and VAE ELBO)", criterion_gradients},
        {8, "toy two-mode generation end to end", criterion_toy_generation},
        {9, "metric identities (FID, IS, matrix sqrt)", criterion_metric_identities},
        {10, "classifier-free guidance contract", criterion_cfg_contract},
        {11, "data pipeline framing and determinism", criterion_data_pipeline},
        {12, "CIFAR-10 UNet parameter count", criterion_param_count},
    };
    return list;
}

} // namespace

int main(int argc, char** argv) {
    int only = 0;
    if (argc > 1) only = std::atoi(argv[1]);
    bool all_pass = true;
    for (const auto& c : criteria()) {
        if (only != 0 && c.number != only) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out.pass = false;
            out.detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] criterion %2d: %s (%.2f s)%s%s\n", out.pass ? "PASS" : "FAIL", c.number,
                    c.name, secs, out.detail.empty() ? "" : " -- ", out.detail.c_str());
        std::fflush(stdout);
        all_pass = all_pass && out.pass;
    }
    return all_pass ? 0 : 1;
}

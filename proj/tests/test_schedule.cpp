// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "diffkit/schedule.hpp"

using diffkit::Rng;
using diffkit::Tensor;
namespace sched = diffkit::schedule;

namespace {

sched::ScheduleConfig linear_cfg(double b0, double b1, int t_count) {
    sched::ScheduleConfig cfg;
    cfg.beta_start = b0;
    cfg.beta_end = b1;
    cfg.num_train_timesteps = t_count;
    cfg.beta_schedule = sched::Kind::linear;
    return cfg;
}

sched::ScheduleConfig cosine_cfg(int t_count) {
    sched::ScheduleConfig cfg;
    cfg.num_train_timesteps = t_count;
    cfg.beta_schedule = sched::Kind::cosine;
    return cfg;
}

// Manual table for closed-form checks with a chosen abar at a chosen index.
sched::ScheduleTable table_with_abar(std::vector<double> abar) {
    sched::ScheduleTable t;
    t.num_train_timesteps = static_cast<int>(abar.size());
    t.alphas_cumprod = std::move(abar);
    t.betas.assign(t.alphas_cumprod.size(), 0.0);
    t.alphas.assign(t.alphas_cumprod.size(), 1.0);
    return t;
}

} // namespace

TEST_CASE("linear schedule endpoints are exact", "[schedule]") {
    auto table = sched::build_linear(linear_cfg(0.0002, 0.02, 1000));
    CHECK(table.betas.front() == 0.0002);
    CHECK(table.betas.back() == 0.02);

    auto tiny = sched::build_linear(linear_cfg(0.0002, 0.02, 2));
    CHECK(tiny.betas == std::vector<double>{0.0002, 0.02});
}

TEST_CASE("linear schedule rejects T < 2", "[schedule]") {
    CHECK_THROWS_AS(sched::build_linear(linear_cfg(0.0002, 0.02, 1)), diffkit::ConfigError);
}

TEST_CASE("linear alpha_cumprod matches a high-precision recomputation", "[schedule]") {
    auto table = sched::build_linear(linear_cfg(0.0002, 0.02, 1000));
    // Independent recomputation of the definition in extended precision.
    const long double b0 = 0.0002L, b1 = 0.02L;
    long double cum = 1.0L;
    for (int i = 0; i < 1000; ++i) {
        const long double beta = b0 + (static_cast<long double>(i) / 999.0L) * (b1 - b0);
        cum *= (1.0L - beta);
        const double expected = static_cast<double>(cum);
        CHECK(std::abs(table.alphas_cumprod[i] - expected) <=
              1e-12 * std::abs(expected));
    }
    // Explicit spot check of abar_1 = (1 - 0.0002) * (1 - beta_1).
    const long double beta1 = 0.0002L + (1.0L / 999.0L) * 0.0198L;
    const double abar1 = static_cast<double>((1.0L - 0.0002L) * (1.0L - beta1));
    CHECK(table.alphas_cumprod[1] == Catch::Approx(abar1).epsilon(1e-12));
}

TEST_CASE("cosine law hits 1, 1/2 and the floor", "[schedule]") {
    const int t_count = 1000;
    CHECK(sched::cosine_alpha_bar(0.0, t_count) == 1.0);
    CHECK(sched::cosine_alpha_bar(t_count / 2.0, t_count) == Catch::Approx(0.5).margin(1e-12));
    CHECK(sched::cosine_alpha_bar(t_count, t_count) == sched::kAlphaBarFloor);

    auto table = sched::build_cosine(cosine_cfg(t_count));
    CHECK(table.alpha_cumprod_at(-1) == 1.0);
    CHECK(table.alphas_cumprod[t_count / 2 - 1] == Catch::Approx(0.5).margin(1e-6));
    CHECK(table.alphas_cumprod[t_count - 1] ==
          Catch::Approx(sched::kAlphaBarFloor).epsilon(1e-6));
}

TEST_CASE("cosine table matches a direct trigonometric oracle", "[schedule]") {
    const int t_count = 400;
    auto cfg = cosine_cfg(t_count);
    auto table = sched::build_cosine(cfg);
    // Oracle uses the sin-form identity so it is not a transcription of the
    // implementation: cos^2((pi/2) x) == sin^2((pi/2)(1 - x)).
    auto law = [&](int t) {
        const double s = std::sin(1.5707963267948966 * (1.0 - static_cast<double>(t) / t_count));
        return std::max(s * s, sched::kAlphaBarFloor);
    };
    double prev = 1.0;
    for (int i = 0; i < t_count; ++i) {
        const double ratio = law(i + 1) / (prev + cfg.stability_epsilon);
        const double beta = std::min(1.0 - ratio, sched::kMaxBeta);
        CHECK(std::abs(table.betas[i] - beta) < 1e-12);
        CHECK(std::abs(table.alphas[i] - (1.0 - beta)) < 1e-12);
        prev = law(i + 1);
    }
}

TEST_CASE("both schedules: abar strictly decreasing and recomputable", "[schedule]") {
    for (auto table : {sched::build_linear(linear_cfg(0.0002, 0.02, 1000)),
                       sched::build_cosine(cosine_cfg(1000)),
                       sched::build_cosine(cosine_cfg(37)),
                       sched::build_linear(linear_cfg(0.1, 0.4, 4))}) {
        double cum = 1.0;
        double prev = 2.0;
        for (int i = 0; i < table.num_train_timesteps; ++i) {
            CHECK(table.betas[i] > 0.0);
            CHECK(table.betas[i] <= sched::kMaxBeta);
            CHECK(table.alphas_cumprod[i] < prev);
            prev = table.alphas_cumprod[i];
            cum *= (1.0 - table.betas[i]);
            CHECK(std::abs(cum - table.alphas_cumprod[i]) <= 1e-6 * std::abs(cum));
        }
        CHECK(table.alphas_cumprod.front() <= 1.0);
        CHECK(table.alphas_cumprod.back() > 0.0);
    }
}

TEST_CASE("add_noise closed form", "[schedule]") {
    SECTION("abar = 1 keeps the clean sample") {
        auto table = table_with_abar({1.0});
        Rng rng(3);
        auto x0 = Tensor<float>::randn({2, 3}, rng);
        auto noise = Tensor<float>::randn({2, 3}, rng);
        auto out = sched::add_noise(table, x0, noise, {0, 0});
        CHECK(std::memcmp(out.data().data(), x0.data().data(), x0.numel() * sizeof(float)) == 0);
    }
    SECTION("abar at the floor returns almost pure noise") {
        auto table = table_with_abar({sched::kAlphaBarFloor});
        Rng rng(5);
        auto x0 = Tensor<double>::randn({1, 8}, rng);
        auto noise = Tensor<double>::randn({1, 8}, rng);
        auto out = sched::add_noise(table, x0, noise, {0});
        const double tol = std::sqrt(sched::kAlphaBarFloor) * 10.0;
        for (std::size_t i = 0; i < 8; ++i)
            CHECK(std::abs(out.data()[i] - noise.data()[i]) < tol);
    }
    SECTION("scalar case against an independent evaluation") {
        auto table = table_with_abar({0.25});
        auto x0 = Tensor<double>::from_data({1, 1}, {1.0});
        auto noise = Tensor<double>::from_data({1, 1}, {-0.5});
        auto out = sched::add_noise(table, x0, noise, {0});
        const double expected = std::sqrt(0.25) * 1.0 + std::sqrt(1.0 - 0.25) * (-0.5);
        CHECK(out.data()[0] == Catch::Approx(expected).epsilon(1e-12));
    }
    SECTION("per-element timesteps and range errors") {
        auto table = table_with_abar({1.0, 0.25});
        auto x0 = Tensor<double>::from_data({2, 1}, {1.0, 1.0});
        auto noise = Tensor<double>::from_data({2, 1}, {-0.5, -0.5});
        auto out = sched::add_noise(table, x0, noise, {0, 1});
        CHECK(out.data()[0] == 1.0);
        CHECK(out.data()[1] == Catch::Approx(0.5 - std::sqrt(0.75) * 0.5));
        CHECK_THROWS_AS(sched::add_noise(table, x0, noise, {0, 2}), std::out_of_range);
    }
}

TEST_CASE("posterior variance identities", "[schedule]") {
    auto table = sched::build_linear(linear_cfg(0.1, 0.4, 4));
    CHECK(sched::posterior_variance(table, 0) == 0.0);

    // sigma_2^2 against an extended-precision recomputation of the formula.
    const long double b0 = 0.1L, b1 = 0.4L;
    long double beta[4], cum = 1.0L, abar[4];
    for (int i = 0; i < 4; ++i) {
        beta[i] = b0 + (static_cast<long double>(i) / 3.0L) * (b1 - b0);
        cum *= (1.0L - beta[i]);
        abar[i] = cum;
    }
    const double expected = static_cast<double>((1.0L - abar[1]) / (1.0L - abar[2]) * beta[2]);
    CHECK(sched::posterior_variance(table, 2) == Catch::Approx(expected).epsilon(1e-12));

    // Synthetic table where abar_{t-1} = 1 forces a zero numerator.
    auto synthetic = table_with_abar({1.0, 0.5});
    synthetic.betas = {0.0, 0.5};
    CHECK(sched::posterior_variance(synthetic, 1) == 0.0);

    CHECK_THROWS_AS(sched::posterior_variance(table, 4), std::out_of_range);
}

TEST_CASE("iterative chain matches closed form in distribution", "[schedule]") {
    auto table = sched::build_linear(linear_cfg(0.0002, 0.02, 50));
    Rng rng(71);
    const double x0 = 2.5;
    for (int t : {12, 49}) {
        const int trials = 20000;
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
        CHECK(std::abs(mean - std::sqrt(abar) * x0) <= 0.02 * std::abs(std::sqrt(abar) * x0));
        CHECK(std::abs(var - (1.0 - abar)) <= 0.03 * (1.0 - abar));
    }
}

TEST_CASE("csv dump emits header plus T rows", "[schedule]") {
    auto table = sched::build_linear(linear_cfg(0.0002, 0.02, 10));
    std::ostringstream os;
    sched::dump_csv(table, os);
    std::istringstream is(os.str());
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "t,beta,alpha,alpha_cumprod");
    int rows = 0;
    while (std::getline(is, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 10);
}

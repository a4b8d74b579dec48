// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "diffkit/checkpoint.hpp"
#include "diffkit/config.hpp"
#include "diffkit/pipeline.hpp"

using diffkit::Rng;
using diffkit::Tensor;
namespace config = diffkit::config;
namespace checkpoint = diffkit::checkpoint;
namespace fs = std::filesystem;

TEST_CASE("defaults mirror the hyperparameter table", "[config]") {
    auto cfg = config::parse_config(std::nullopt);
    CHECK(cfg.beta_start == 0.0002);
    CHECK(cfg.beta_end == 0.02);
    CHECK(cfg.seed == 42);
    CHECK(cfg.image_size == 32);
    CHECK(cfg.batch_size == 128);
    CHECK(cfg.num_workers == 4);
    CHECK(cfg.num_epochs == 480);
    CHECK(cfg.learning_rate == 1e-4);
    CHECK(cfg.weight_decay == 1e-4);
    CHECK(cfg.num_train_timesteps == 1000);
    CHECK(cfg.num_inference_steps == 250);
    CHECK(cfg.beta_schedule == "linear");
    CHECK(cfg.variance_type == "fixed_small");
    CHECK(cfg.predictor_type == "epsilon");
    CHECK(cfg.unet_ch == 64);
    CHECK(cfg.unet_ch_mult == std::vector<std::int64_t>{1, 2, 4, 4});
    CHECK(cfg.unet_attn == std::vector<std::int64_t>{2, 3});
    CHECK(cfg.unet_dropout == 0.1);
}

TEST_CASE("file parsing with comments and flag precedence", "[config]") {
    const std::string file = R"(
# toy overrides
num_inference_steps = 100
beta_end = 0.01   # inline comment
unet_ch_mult = [1, 2]
unet_attn = [1]
unet_ch = 8
image_size = 8
unet_in_size = 8
)";
    auto cfg = config::parse_config(file, {{"num_inference_steps", "250"}});
    CHECK(cfg.num_inference_steps == 250); // flag wins over file
    CHECK(cfg.beta_end == 0.01);
    CHECK(cfg.unet_ch_mult == std::vector<std::int64_t>{1, 2});
}

TEST_CASE("env seed sits between defaults and file", "[config]") {
    auto only_env = config::parse_config(std::nullopt, {}, std::string("777"));
    CHECK(only_env.seed == 777);
    auto file_wins = config::parse_config(std::string("seed = 5\n"), {}, std::string("777"));
    CHECK(file_wins.seed == 5);
    auto flag_wins =
        config::parse_config(std::string("seed = 5\n"), {{"seed", "9"}}, std::string("777"));
    CHECK(flag_wins.seed == 9);
}

TEST_CASE("unknown keys and bad values name the key", "[config]") {
    try {
        config::parse_config(std::string("beta_schedule = cubic\n"));
        FAIL("expected ConfigError");
    } catch (const diffkit::ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("beta_schedule") != std::string::npos);
        CHECK(msg.find("linear") != std::string::npos);
        CHECK(msg.find("cosine") != std::string::npos);
    }
    try {
        config::parse_config(std::string("betas_start = 0.1\n"));
        FAIL("expected ConfigError");
    } catch (const diffkit::ConfigError& e) {
        CHECK(std::string(e.what()).find("betas_start") != std::string::npos);
    }
    try {
        config::parse_config(std::string("num_epochs = soon\n"));
        FAIL("expected ConfigError");
    } catch (const diffkit::ConfigError& e) {
        CHECK(std::string(e.what()).find("num_epochs") != std::string::npos);
    }
}

TEST_CASE("cross-field validation", "[config]") {
    CHECK_THROWS_AS(config::parse_config(std::string("num_inference_steps = 2000\n")),
                    diffkit::ConfigError);
    CHECK_THROWS_AS(config::parse_config(std::string("unet_in_size = 16\n")),
                    diffkit::ConfigError);
    // Latent mode: consistent sizes required.
    const std::string latent_ok =
        "latent = true\nunet_in_size = 8\nunet_in_ch = 4\nimage_size = 32\nlatent_factor = 4\n"
        "unet_ch_mult = [1,2]\nunet_attn = [1]\nunet_ch = 8\n";
    CHECK_NOTHROW(config::parse_config(latent_ok));
    const std::string latent_bad =
        "latent = true\nunet_in_size = 16\nimage_size = 32\nlatent_factor = 4\n";
    CHECK_THROWS_AS(config::parse_config(latent_bad), diffkit::ConfigError);
}

TEST_CASE("precedence is total over random key subsets", "[config]") {
    // Property: for keys split into (default, file, flag) layers, the resolved
    // value comes from the highest layer that sets it.
    Rng rng(99);
    const std::vector<std::pair<std::string, std::pair<std::string, std::string>>> candidates = {
        {"batch_size", {"64", "32"}},        {"num_epochs", {"7", "9"}},
        {"learning_rate", {"0.002", "0.003"}}, {"flip_prob", {"0.25", "0.75"}},
        {"log_every", {"5", "10"}},          {"eta", {"0.5", "1.5"}},
        {"guidance_weight", {"2", "4"}},     {"seed", {"100", "200"}},
    };
    for (int trial = 0; trial < 30; ++trial) {
        std::string file;
        std::vector<std::pair<std::string, std::string>> flags;
        std::vector<int> layer(candidates.size());
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            layer[i] = static_cast<int>(rng.uniform_int(0, 3)); // 0 default, 1 file, 2 flag
            if (layer[i] >= 1)
                file += candidates[i].first + " = " + candidates[i].second.first + "\n";
            if (layer[i] == 2) flags.push_back({candidates[i].first, candidates[i].second.second});
        }
        auto cfg = config::parse_config(file, flags);
        config::RunConfig defaults;
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            const auto& key = candidates[i].first;
            const std::string got = config::get_key(cfg, key);
            if (layer[i] == 0)
                CHECK(got == config::get_key(defaults, key));
            else if (layer[i] == 1)
                CHECK(config::get_key(cfg, key) ==
                      config::get_key(
                          [&] {
                              config::RunConfig c;
                              config::set_key(c, key, candidates[i].second.first);
                              return c;
                          }(),
                          key));
            else
                CHECK(config::get_key(cfg, key) ==
                      config::get_key(
                          [&] {
                              config::RunConfig c;
                              config::set_key(c, key, candidates[i].second.second);
                              return c;
                          }(),
                          key));
        }
    }
}

TEST_CASE("canonical text round-trips and hashes stably", "[config]") {
    config::RunConfig cfg;
    config::set_key(cfg, "learning_rate", "0.00037");
    config::set_key(cfg, "unet_ch_mult", "[1,2,8]");
    const std::string text = config::to_canonical_text(cfg);

    config::RunConfig back;
    config::apply_file_text(back, text);
    CHECK(config::to_canonical_text(back) == text);

    CHECK(config::config_hash(cfg) == config::config_hash(back));
    config::set_key(back, "seed", "43");
    CHECK(config::config_hash(cfg) != config::config_hash(back));
    CHECK(config::config_hash(cfg).size() == 16u);
}

TEST_CASE("checkpoint round-trip is bitwise stable", "[config][checkpoint]") {
    const auto dir = fs::temp_directory_path() / "diffkit_ck_test";
    fs::create_directories(dir);
    const std::string p1 = (dir / "a.dfck").string();
    const std::string p2 = (dir / "b.dfck").string();

    checkpoint::Checkpoint ck;
    ck.config_text = config::to_canonical_text(config::RunConfig{});
    ck.global_step = 1234;
    ck.latent_scale = 1.7;
    Rng rng(1);
    ck.tensors.add("w1", Tensor<float>::randn({3, 4}, rng));
    ck.tensors.add("w2", Tensor<float>::randn({2, 2, 3, 3}, rng));
    ck.tensors.add("b", Tensor<float>::randn({7}, rng));

    checkpoint::save(ck, p1);
    auto loaded = checkpoint::load(p1);
    CHECK(loaded.global_step == 1234u);
    CHECK(loaded.latent_scale.has_value());
    CHECK(*loaded.latent_scale == 1.7);
    CHECK(loaded.config_text == ck.config_text);
    REQUIRE(loaded.tensors.size() == 3u); // tensor count preserved
    checkpoint::save(loaded, p2);

    auto bytes = [](const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(is)),
                           std::istreambuf_iterator<char>());
    };
    CHECK(bytes(p1) == bytes(p2)); // save -> load -> save is byte-identical

    SECTION("corrupt magic is a clear error") {
        std::fstream f(p1, std::ios::in | std::ios::out | std::ios::binary);
        f.write("ZZZZ", 4);
        f.close();
        CHECK_THROWS_AS(checkpoint::load(p1), diffkit::DataError);
    }
    SECTION("truncation is detected") {
        auto full = bytes(p1);
        std::ofstream os(p2, std::ios::binary);
        os.write(full.data(), static_cast<std::streamsize>(full.size() / 2));
        os.close();
        CHECK_THROWS_AS(checkpoint::load(p2), diffkit::DataError);
    }
    fs::remove_all(dir);
}

TEST_CASE("restore_into validates names and shapes", "[config][checkpoint]") {
    checkpoint::Checkpoint ck;
    Rng rng(2);
    ck.tensors.add("w", Tensor<float>::randn({2, 2}, rng));

    diffkit::ParamStore<float> params;
    params.add("w", Tensor<float>::zeros({2, 2}));
    checkpoint::restore_into(ck, params);
    CHECK(params.at("w").data() == ck.tensors.at("w").data());

    diffkit::ParamStore<float> wrong_shape;
    wrong_shape.add("w", Tensor<float>::zeros({4}));
    CHECK_THROWS_AS(checkpoint::restore_into(ck, wrong_shape), diffkit::DataError);

    diffkit::ParamStore<float> missing;
    missing.add("nope", Tensor<float>::zeros({1}));
    CHECK_THROWS_AS(checkpoint::restore_into(ck, missing), diffkit::DataError);
}

// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "diffkit/pipeline.hpp"

namespace {

using diffkit::config::RunConfig;

struct ConfigArgs {
    std::string config_path;
    std::map<std::string, std::string> flag_values; // key -> raw value
};

// One kebab-case flag per config key, e.g. --num-inference-steps.
void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "Flat key = value config file");
    for (const auto& key : diffkit::config::key_names()) {
        std::string flag = "--" + key;
        for (auto& c : flag)
            if (c == '_') c = '-';
        cmd->add_option(
               flag,
               [&args, key](const std::vector<std::string>& vals) {
                   args.flag_values[key] = vals.back();
                   return true;
               },
               "Override config key " + key)
            ->type_name("VALUE")
            ->take_last(); // repeated flags: last one wins
    }
}

enum class Validation { full, data_only, schedule_only };

RunConfig resolve(const ConfigArgs& args,
                  const std::optional<std::string>& base_text = std::nullopt,
                  Validation mode = Validation::full) {
    std::optional<std::string> env_seed;
    if (const char* env = std::getenv("DIFFKIT_SEED")) env_seed = std::string(env);

    RunConfig cfg;
    if (env_seed.has_value()) diffkit::config::set_key(cfg, "seed", *env_seed);
    if (base_text.has_value()) diffkit::config::apply_file_text(cfg, *base_text);
    if (!args.config_path.empty()) {
        std::ifstream is(args.config_path);
        if (!is) throw diffkit::ConfigError("cannot open config file " + args.config_path);
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        diffkit::config::apply_file_text(cfg, text);
    }
    for (const auto& [key, value] : args.flag_values) diffkit::config::set_key(cfg, key, value);
    switch (mode) {
    case Validation::full: diffkit::config::validate(cfg); break;
    case Validation::data_only: diffkit::config::validate(cfg, /*check_model=*/false); break;
    case Validation::schedule_only: diffkit::config::schedule_config(cfg).validate(); break;
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffkit: train epsilon-prediction diffusion models and generate images"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "Train the noise-prediction UNet");
    ConfigArgs train_cfg;
    std::string train_data, train_out = "runs/train", train_vae, train_latent_cache;
    train->add_option("--data", train_data, "Dataset path (.bin file/dir or image folder)")
        ->required();
    train->add_option("--out", train_out, "Output directory");
    train->add_option("--vae", train_vae, "VAE checkpoint (required for latent runs)");
    train->add_option("--latent-cache", train_latent_cache,
                      "Latent cache file to reuse or create");
    add_config_flags(train, train_cfg);

    // train-vae
    auto* train_vae_cmd = app.add_subcommand("train-vae", "Train the latent-space VAE");
    ConfigArgs vae_cfg;
    std::string vae_data, vae_out = "runs/vae";
    train_vae_cmd->add_option("--data", vae_data, "Dataset path")->required();
    train_vae_cmd->add_option("--out", vae_out, "Output directory");
    add_config_flags(train_vae_cmd, vae_cfg);

    // train-classifier
    auto* train_cls = app.add_subcommand(
        "train-classifier", "Train the tiny CNN used as the metric feature backend");
    ConfigArgs cls_cfg;
    std::string cls_data, cls_out = "runs/classifier";
    train_cls->add_option("--data", cls_data, "Labeled dataset path")->required();
    train_cls->add_option("--out", cls_out, "Output directory");
    add_config_flags(train_cls, cls_cfg);

    // sample
    auto* sample = app.add_subcommand("sample", "Generate images from a checkpoint");
    ConfigArgs sample_cfg;
    std::string sample_ckpt, sample_vae, sample_out = "runs/sample";
    int sample_num = 16;
    int sample_label = -1;
    sample->add_option("--checkpoint", sample_ckpt, "Model checkpoint (.dfck)")->required();
    sample->add_option("--vae", sample_vae, "VAE checkpoint for latent models");
    sample->add_option("--out", sample_out, "Output directory");
    sample->add_option("--num", sample_num, "Number of samples");
    sample->add_option("--label", sample_label, "Class id to condition on (-1 = unconditional)");
    add_config_flags(sample, sample_cfg);

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "FID / Inception Score of generated images");
    std::string eval_real, eval_gen, eval_extractor = "random", eval_ckpt, eval_out;
    int eval_size = 32, eval_splits = 10;
    evaluate->add_option("--real", eval_real, "Directory of real images")->required();
    evaluate->add_option("--gen", eval_gen, "Directory of generated images")->required();
    evaluate->add_option("--image-size", eval_size, "Evaluation resolution");
    evaluate->add_option("--extractor", eval_extractor, "Feature backend: random | cnn")
        ->check(CLI::IsMember({"random", "cnn"}));
    evaluate->add_option("--extractor-ckpt", eval_ckpt,
                         "Classifier checkpoint for --extractor cnn");
    evaluate->add_option("--splits", eval_splits, "Inception Score splits");
    evaluate->add_option("--out", eval_out, "Write the JSON result here as well");

    // schedule dump
    auto* schedule_cmd = app.add_subcommand("schedule", "Noise schedule utilities");
    auto* dump = schedule_cmd->add_subcommand("dump", "Emit t,beta,alpha,alpha_cumprod CSV");
    ConfigArgs dump_cfg;
    std::string dump_out;
    dump->add_option("--out", dump_out, "CSV output path (default stdout)");
    add_config_flags(dump, dump_cfg);
    schedule_cmd->require_subcommand(1);

    try {
        app.parse(argc, argv);

        if (train->parsed()) {
            auto cfg = resolve(train_cfg);
            auto outputs = diffkit::pipeline::run_train(
                cfg, train_data, train_out,
                train_vae.empty() ? std::nullopt : std::optional<std::string>(train_vae),
                train_latent_cache.empty() ? std::nullopt
                                           : std::optional<std::string>(train_latent_cache));
            std::cout << "trained " << outputs.summary.steps << " steps, final loss "
                      << outputs.summary.final_loss << "\ncheckpoint: " << outputs.checkpoint_path
                      << "\nlog: " << outputs.log_path << "\n";
        } else if (train_vae_cmd->parsed()) {
            auto cfg = resolve(vae_cfg, std::nullopt, Validation::data_only);
            auto outputs = diffkit::pipeline::run_train_vae(cfg, vae_data, vae_out);
            std::cout << "trained VAE for " << outputs.summary.steps
                      << " steps\ncheckpoint: " << outputs.checkpoint_path << "\n";
        } else if (train_cls->parsed()) {
            auto cfg = resolve(cls_cfg, std::nullopt, Validation::data_only);
            auto outputs = diffkit::pipeline::run_train_classifier(cfg, cls_data, cls_out);
            std::cout << "trained classifier for " << outputs.summary.steps
                      << " steps\ncheckpoint: " << outputs.checkpoint_path << "\n";
        } else if (sample->parsed()) {
            auto ck = diffkit::checkpoint::load(sample_ckpt);
            auto cfg = resolve(sample_cfg, ck.config_text);
            auto outputs = diffkit::pipeline::run_sample(
                cfg, sample_ckpt,
                sample_vae.empty() ? std::nullopt : std::optional<std::string>(sample_vae),
                sample_out, sample_num,
                sample_label >= 0 ? std::optional<int>(sample_label) : std::nullopt);
            std::cout << "wrote " << outputs.image_paths.size() << " samples and "
                      << outputs.grid_path << "\n";
        } else if (evaluate->parsed()) {
            std::unique_ptr<diffkit::metrics::FeatureExtractor> extractor;
            if (eval_extractor == "cnn") {
                if (eval_ckpt.empty())
                    throw diffkit::ConfigError("--extractor cnn requires --extractor-ckpt");
                extractor = std::make_unique<diffkit::metrics::CnnExtractor>(
                    diffkit::pipeline::load_classifier_extractor(eval_ckpt));
            } else {
                extractor = diffkit::metrics::CnnExtractor::random();
            }
            auto result = diffkit::pipeline::run_evaluate(eval_real, eval_gen, eval_size,
                                                          *extractor, eval_splits);
            const std::string json = result.to_json().dump();
            std::cout << json << "\n";
            if (!eval_out.empty()) diffkit::pipeline::write_text(eval_out, json + "\n");
        } else if (dump->parsed()) {
            auto cfg = resolve(dump_cfg, std::nullopt, Validation::schedule_only);
            if (dump_out.empty()) {
                diffkit::pipeline::run_schedule_dump(cfg, std::cout);
            } else {
                std::ofstream os(dump_out);
                if (!os) throw diffkit::DataError("cannot write " + dump_out);
                diffkit::pipeline::run_schedule_dump(cfg, os);
            }
        }
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2; // usage errors map to the config-error exit code
    } catch (const diffkit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const diffkit::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const diffkit::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

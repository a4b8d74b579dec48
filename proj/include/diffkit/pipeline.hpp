// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffkit/checkpoint.hpp"
#include "diffkit/config.hpp"
#include "diffkit/data.hpp"
#include "diffkit/diffusion.hpp"
#include "diffkit/errors.hpp"
#include "diffkit/image_io.hpp"
#include "diffkit/latent.hpp"
#include "diffkit/metrics.hpp"
#include "diffkit/sampler.hpp"
#include "diffkit/schedule.hpp"
#include "diffkit/unet.hpp"

namespace diffkit::pipeline {

namespace fs = std::filesystem;

/// CSV schedule dump for the resolved config.
inline void run_schedule_dump(const config::RunConfig& cfg, std::ostream& os) {
    schedule::dump_csv(schedule::build(config::schedule_config(cfg)), os);
}

/// Dataset path auto-detection: .bin file or a directory of .bin files is the
/// CIFAR-10 binary format; anything else is an image folder resized to
/// image_size.
inline data::Dataset load_dataset(const std::string& path, const config::RunConfig& cfg) {
    if (!fs::exists(path)) throw DataError("dataset path does not exist: " + path);
    bool cifar = false;
    if (fs::is_regular_file(path)) {
        cifar = fs::path(path).extension() == ".bin";
    } else {
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file() && e.path().extension() == ".bin") cifar = true;
    }
    data::Dataset ds = cifar ? data::load_cifar10(path)
                             : data::load_image_folder(path, static_cast<int>(cfg.image_size));
    if (ds.height != cfg.image_size)
        throw ConfigError("dataset images are " + std::to_string(ds.height) + "x" +
                          std::to_string(ds.width) + " but image_size = " +
                          std::to_string(cfg.image_size));
    return ds;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path);
    os << text;
}

/// Run manifest: resolved config (flat map), its hash, the seed, and the
/// output listing. The sibling run_config.cfg plus the recorded command
/// extras re-run the command bit-exactly.
inline void write_manifest(const config::RunConfig& cfg, const std::string& command,
                           const std::vector<std::string>& outputs, const std::string& out_dir,
                           const nlohmann::json& extras = nlohmann::json::object()) {
    nlohmann::json flat;
    for (const auto& key : config::key_names()) flat[key] = config::get_key(cfg, key);
    nlohmann::json manifest = {{"command", command},
                               {"seed", cfg.seed},
                               {"config_hash", config::config_hash(cfg)},
                               {"config_file", "run_config.cfg"},
                               {"config", flat},
                               {"outputs", outputs}};
    for (auto it = extras.begin(); it != extras.end(); ++it) manifest[it.key()] = it.value();
    write_text((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    write_text((fs::path(out_dir) / "run_config.cfg").string(), config::to_canonical_text(cfg));
}

inline std::function<Tensor<float>(const Tensor<float>&, const std::vector<int>&,
                                   const std::optional<std::vector<int>>&)>
sampling_model(const ParamStore<float>& params, const unet::UNetConfig& cfg) {
    return [&params, &cfg](const Tensor<float>& x, const std::vector<int>& t,
                           const std::optional<std::vector<int>>& labels) {
        return unet::forward(params, cfg, x, t, labels);
    };
}

// --- checkpoint helpers ------------------------------------------------------

inline checkpoint::Checkpoint make_model_checkpoint(
    const config::RunConfig& cfg, const ParamStore<float>& model,
    const diffusion::OptimizerState<float>* opt, std::uint64_t step,
    std::optional<double> latent_scale = std::nullopt,
    const std::optional<data::ChannelStats>& stats = std::nullopt) {
    checkpoint::Checkpoint ck;
    ck.config_text = config::to_canonical_text(cfg);
    ck.global_step = step;
    ck.latent_scale = latent_scale;
    for (std::size_t i = 0; i < model.size(); ++i)
        ck.tensors.add(model.name(i), model.tensor(i).detached());
    if (opt != nullptr) {
        for (std::size_t i = 0; i < model.size(); ++i)
            ck.tensors.add("opt.m." + model.name(i),
                           Tensor<float>::from_data(model.tensor(i).shape(), opt->m[i]));
        for (std::size_t i = 0; i < model.size(); ++i)
            ck.tensors.add("opt.v." + model.name(i),
                           Tensor<float>::from_data(model.tensor(i).shape(), opt->v[i]));
    }
    if (stats.has_value()) {
        ck.tensors.add("data.channel_mean",
                       Tensor<float>::from_data({3}, {static_cast<float>(stats->mean[0]),
                                                      static_cast<float>(stats->mean[1]),
                                                      static_cast<float>(stats->mean[2])}));
        ck.tensors.add("data.channel_std",
                       Tensor<float>::from_data({3}, {static_cast<float>(stats->std[0]),
                                                      static_cast<float>(stats->std[1]),
                                                      static_cast<float>(stats->std[2])}));
    }
    return ck;
}

inline data::ChannelStats stats_from_checkpoint(const checkpoint::Checkpoint& ck) {
    data::ChannelStats s;
    if (ck.tensors.has("data.channel_mean")) {
        for (int c = 0; c < 3; ++c) {
            s.mean[c] = ck.tensors.at("data.channel_mean").data()[c];
            s.std[c] = ck.tensors.at("data.channel_std").data()[c];
        }
    }
    return s;
}

inline latent::VaeCodec<float> load_vae_codec(const std::string& path) {
    auto ck = checkpoint::load(path);
    config::RunConfig cfg;
    config::apply_file_text(cfg, ck.config_text);
    auto vae_cfg = config::vae_config(cfg);
    auto params = latent::init_vae<float>(vae_cfg, 0);
    checkpoint::restore_into(ck, params);
    if (!ck.latent_scale.has_value())
        throw DataError("VAE checkpoint has no latent scale: " + path);
    return latent::VaeCodec<float>(std::move(params), vae_cfg, *ck.latent_scale);
}

// --- train -------------------------------------------------------------------

struct TrainOutputs {
    std::string checkpoint_path;
    std::string log_path;
    diffusion::TrainSummary summary;
};

inline TrainOutputs run_train(const config::RunConfig& cfg, const std::string& data_path,
                              const std::string& out_dir,
                              const std::optional<std::string>& vae_checkpoint = std::nullopt,
                              const std::optional<std::string>& latent_cache = std::nullopt) {
    fs::create_directories(out_dir);
    auto table = schedule::build(config::schedule_config(cfg));
    auto unet_cfg = config::unet_config(cfg);
    auto params = unet::init<float>(unet_cfg, static_cast<std::uint64_t>(cfg.seed));
    params.set_requires_grad(true);
    auto opt = diffusion::OptimizerState<float>::init_like(params);
    auto tc = config::train_config(cfg);

    const std::string log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    std::ofstream log(log_path);
    if (!log) throw DataError("cannot write " + log_path);

    Rng dropout_rng(mix_seed(static_cast<std::uint64_t>(cfg.seed), 0x64726f70ull));
    auto model = [&](const Tensor<float>& x, const std::vector<int>& t,
                     const std::optional<std::vector<int>>& labels, Rng* rng) {
        return unet::forward(params, unet_cfg, x, t, labels, rng);
    };

    diffusion::TrainSummary summary;
    std::optional<data::ChannelStats> stats;
    std::optional<double> scale;

    if (cfg.latent) {
        if (!vae_checkpoint.has_value())
            throw ConfigError("latent training requires --vae <checkpoint>");
        auto codec = load_vae_codec(*vae_checkpoint);
        scale = codec.scale();
        latent::LatentDataset lds;
        if (latent_cache.has_value() && fs::exists(*latent_cache)) {
            lds.latents = latent::load_latent_cache(*latent_cache);
            const std::string labels_path = *latent_cache + ".labels.json";
            if (fs::exists(labels_path)) {
                std::ifstream is(labels_path);
                nlohmann::json j = nlohmann::json::parse(is);
                lds.labels = j.get<std::vector<int>>();
            } else {
                lds.labels.assign(lds.latents.dim(0), 0);
            }
        } else {
            auto ds = load_dataset(data_path, cfg);
            auto lc = config::loader_config(cfg);
            lc.shuffle = false;
            lc.flip_prob = 0.0; // latents are encoded once, unaugmented
            if (lc.normalization == data::Normalization::dataset_standardize) {
                stats = data::compute_stats(ds);
                lc.stats = *stats;
            }
            data::Loader loader(ds, lc);
            lds = latent::encode_dataset(codec, loader);
            if (latent_cache.has_value()) {
                latent::save_latent_cache(*latent_cache, lds.latents);
                nlohmann::json j = lds.labels;
                write_text(*latent_cache + ".labels.json", j.dump());
            }
        }
        std::optional<std::vector<int>> labels;
        if (cfg.num_classes > 0) labels = lds.labels;
        diffusion::InMemoryProvider<float> provider(lds.latents, labels,
                                                    static_cast<int>(cfg.batch_size),
                                                    static_cast<std::uint64_t>(cfg.seed));
        summary = diffusion::train(model, params, opt, table, provider, tc,
                                   static_cast<int>(cfg.num_classes), &log);
    } else {
        auto ds = load_dataset(data_path, cfg);
        if (cfg.num_classes > 0) {
            int max_label = 0;
            for (int l : ds.labels) max_label = std::max(max_label, l);
            // The last id is the reserved null class used by guidance.
            if (max_label + 1 >= cfg.num_classes)
                throw ConfigError("num_classes must be at least " + std::to_string(max_label + 2) +
                                  ": dataset labels reach " + std::to_string(max_label) +
                                  " and the last id is the reserved null class");
        }
        auto lc = config::loader_config(cfg);
        if (lc.normalization == data::Normalization::dataset_standardize) {
            stats = data::compute_stats(ds);
            lc.stats = *stats;
            data::save_stats(*stats, (fs::path(out_dir) / "stats.json").string());
        }
        data::Loader loader(ds, lc);
        data::Prefetcher<data::Loader> prefetcher(loader, lc.num_workers);

        if (cfg.num_classes > 0) {
            summary = diffusion::train(model, params, opt, table, prefetcher, tc,
                                       static_cast<int>(cfg.num_classes), &log);
        } else {
            // Unconditional run: strip labels from the stream.
            struct Unlabeled {
                data::Prefetcher<data::Loader>* inner;
                std::size_t batches_per_epoch() const { return inner->batches_per_epoch(); }
                diffusion::BatchData<float> batch(int epoch, std::size_t index) {
                    auto b = inner->batch(epoch, index);
                    b.labels.reset();
                    return b;
                }
            } provider{&prefetcher};
            summary = diffusion::train(model, params, opt, table, provider, tc, 0, &log);
        }
    }

    const std::string ck_path = (fs::path(out_dir) / "checkpoint.dfck").string();
    auto ck = make_model_checkpoint(cfg, params, &opt,
                                    static_cast<std::uint64_t>(summary.steps), scale, stats);
    checkpoint::save(ck, ck_path);
    write_manifest(cfg, "train", {"checkpoint.dfck", "train_log.jsonl"}, out_dir);
    return {ck_path, log_path, summary};
}

// --- train-vae ----------------------------------------------------------------

inline TrainOutputs run_train_vae(const config::RunConfig& cfg, const std::string& data_path,
                                  const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto ds = load_dataset(data_path, cfg);
    auto vae_cfg = config::vae_config(cfg);
    auto params = latent::init_vae<float>(vae_cfg, static_cast<std::uint64_t>(cfg.seed));
    params.set_requires_grad(true);
    auto opt = diffusion::OptimizerState<float>::init_like(params);

    auto lc = config::loader_config(cfg);
    std::optional<data::ChannelStats> stats;
    if (lc.normalization == data::Normalization::dataset_standardize) {
        stats = data::compute_stats(ds);
        lc.stats = *stats;
    }
    data::Loader loader(ds, lc);

    const std::string log_path = (fs::path(out_dir) / "vae_log.jsonl").string();
    std::ofstream log(log_path);
    Rng step_rng(mix_seed(static_cast<std::uint64_t>(cfg.seed), 0x766165ull, 1));
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.num_epochs; ++epoch) {
        for (std::size_t b = 0; b < loader.batches_per_epoch(); ++b) {
            auto batch = loader.batch(epoch, b);
            auto losses = latent::vae_train_step(params, vae_cfg, opt, batch.images,
                                                 cfg.learning_rate, cfg.weight_decay, step_rng);
            ++step;
            if (step % cfg.log_every == 0) {
                nlohmann::json rec = {{"step", step},          {"epoch", epoch},
                                      {"loss", losses.total},  {"lr", cfg.learning_rate},
                                      {"recon", losses.recon}, {"kl", losses.kl}};
                log << rec.dump() << '\n';
            }
        }
    }

    // Scale from the first few batches (deterministic, unshuffled pass).
    auto lc0 = lc;
    lc0.shuffle = false;
    lc0.flip_prob = 0.0;
    data::Loader scale_loader(ds, lc0);
    const std::size_t probe = std::min<std::size_t>(scale_loader.batches_per_epoch(), 8);
    std::vector<float> probe_data;
    Shape shape;
    for (std::size_t b = 0; b < probe; ++b) {
        auto batch = scale_loader.batch(0, b);
        shape = batch.images.shape();
        probe_data.insert(probe_data.end(), batch.images.data().begin(),
                          batch.images.data().end());
    }
    shape[0] = probe_data.size() / (shape[1] * shape[2] * shape[3]);
    auto probe_images = Tensor<float>::from_data(shape, std::move(probe_data));
    const double scale = latent::compute_latent_scale(params, vae_cfg, probe_images);

    const std::string ck_path = (fs::path(out_dir) / "vae.dfck").string();
    auto ck = make_model_checkpoint(cfg, params, &opt, static_cast<std::uint64_t>(step), scale,
                                    stats);
    checkpoint::save(ck, ck_path);
    write_manifest(cfg, "train-vae", {"vae.dfck", "vae_log.jsonl"}, out_dir);
    return {ck_path, log_path, {step, 0.0}};
}

// --- train-classifier ----------------------------------------------------------

inline TrainOutputs run_train_classifier(const config::RunConfig& cfg,
                                         const std::string& data_path,
                                         const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto ds = load_dataset(data_path, cfg);
    if (ds.class_count < 2) throw DataError("classifier training needs a labeled dataset");
    metrics::CnnConfig cnn_cfg;
    cnn_cfg.num_classes = ds.class_count;
    auto params = metrics::init_cnn<float>(cnn_cfg, static_cast<std::uint64_t>(cfg.seed));
    params.set_requires_grad(true);
    auto opt = diffusion::OptimizerState<float>::init_like(params);

    auto lc = config::loader_config(cfg);
    data::Loader loader(ds, lc);
    const std::string log_path = (fs::path(out_dir) / "classifier_log.jsonl").string();
    std::ofstream log(log_path);
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.num_epochs; ++epoch) {
        for (std::size_t b = 0; b < loader.batches_per_epoch(); ++b) {
            auto batch = loader.batch(epoch, b);
            const float loss = metrics::classifier_train_step(
                params, cnn_cfg, opt, batch.images, *batch.labels, cfg.learning_rate,
                cfg.weight_decay);
            ++step;
            if (step % cfg.log_every == 0) {
                nlohmann::json rec = {
                    {"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", cfg.learning_rate}};
                log << rec.dump() << '\n';
            }
        }
    }
    const std::string ck_path = (fs::path(out_dir) / "classifier.dfck").string();
    auto ck = make_model_checkpoint(cfg, params, nullptr, static_cast<std::uint64_t>(step));
    checkpoint::save(ck, ck_path);
    write_manifest(cfg, "train-classifier", {"classifier.dfck"}, out_dir);
    return {ck_path, log_path, {step, 0.0}};
}

// --- sample --------------------------------------------------------------------

struct SampleOutputs {
    std::vector<std::string> image_paths;
    std::string grid_path;
    std::string manifest_path;
};

/// Loads the model checkpoint, runs the configured sampler and writes
/// individual PNGs, an NxM grid and the manifest into out_dir.
inline SampleOutputs run_sample(const config::RunConfig& cfg, const std::string& checkpoint_path,
                                const std::optional<std::string>& vae_checkpoint,
                                const std::string& out_dir, int num_samples,
                                std::optional<int> label = std::nullopt) {
    if (num_samples < 1) throw ConfigError("sample: need at least one sample");
    fs::create_directories(out_dir);
    auto ck = checkpoint::load(checkpoint_path);
    auto unet_cfg = config::unet_config(cfg);
    auto params = unet::init<float>(unet_cfg, 0);
    checkpoint::restore_into(ck, params);

    auto table = schedule::build(config::schedule_config(cfg));
    auto scfg = config::sampler_config(cfg);
    const auto norm = config::normalization_of(cfg);
    const auto stats = stats_from_checkpoint(ck);

    std::unique_ptr<latent::VaeCodec<float>> codec;
    Shape shape;
    if (cfg.latent) {
        if (!vae_checkpoint.has_value())
            throw ConfigError("latent sampling requires --vae <checkpoint>");
        codec = std::make_unique<latent::VaeCodec<float>>(load_vae_codec(*vae_checkpoint));
        shape = {static_cast<std::size_t>(num_samples),
                 static_cast<std::size_t>(cfg.latent_channels),
                 static_cast<std::size_t>(cfg.unet_in_size),
                 static_cast<std::size_t>(cfg.unet_in_size)};
    } else {
        shape = {static_cast<std::size_t>(num_samples), 3,
                 static_cast<std::size_t>(cfg.image_size),
                 static_cast<std::size_t>(cfg.image_size)};
    }

    std::optional<std::vector<int>> labels;
    if (label.has_value()) {
        if (cfg.num_classes == 0)
            throw ConfigError("sample: --label given but the model is unconditional");
        if (*label < 0 || *label >= cfg.num_classes)
            throw ConfigError("sample: label out of range [0, num_classes)");
        labels = std::vector<int>(static_cast<std::size_t>(num_samples), *label);
    }

    auto model = sampling_model(params, unet_cfg);
    auto result = sampler::generate<float>(model, table, scfg, shape, labels,
                                           static_cast<int>(cfg.num_classes), codec.get(), norm,
                                           stats);

    SampleOutputs out;
    std::vector<std::string> names;
    for (int i = 0; i < num_samples; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%03d.png", i);
        const std::string path = (fs::path(out_dir) / name).string();
        image_io::write_png(path, data::unit_to_image(result.images, static_cast<std::size_t>(i)));
        out.image_paths.push_back(path);
        names.push_back(name);
    }

    // Square-ish grid.
    const int cols = static_cast<int>(std::ceil(std::sqrt(double(num_samples))));
    const int rows = (num_samples + cols - 1) / cols;
    const int hw = static_cast<int>(result.images.dim(2));
    image_io::ImageU8 grid;
    grid.width = cols * hw;
    grid.height = rows * hw;
    grid.rgb.assign(static_cast<std::size_t>(grid.width) * grid.height * 3, 0);
    for (int i = 0; i < num_samples; ++i) {
        auto img = data::unit_to_image(result.images, static_cast<std::size_t>(i));
        const int r0 = (i / cols) * hw, c0 = (i % cols) * hw;
        for (int y = 0; y < hw; ++y)
            for (int x = 0; x < hw; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    grid.rgb[((static_cast<std::size_t>(r0 + y) * grid.width) + c0 + x) * 3 + ch] =
                        img.rgb[(static_cast<std::size_t>(y) * hw + x) * 3 + ch];
    }
    out.grid_path = (fs::path(out_dir) / "grid.png").string();
    image_io::write_png(out.grid_path, grid);

    names.push_back("grid.png");
    nlohmann::json extras = {{"num_samples", num_samples}};
    if (label.has_value()) extras["label"] = *label;
    write_manifest(cfg, "sample", names, out_dir, extras);
    out.manifest_path = (fs::path(out_dir) / "manifest.json").string();
    return out;
}

// --- evaluate --------------------------------------------------------------------

struct EvaluateResult {
    double fid = 0.0;
    double is_mean = 0.0;
    double is_std = 0.0;
    std::size_t n_real = 0;
    std::size_t n_gen = 0;

    nlohmann::json to_json() const {
        return {{"fid", fid},
                {"is_mean", is_mean},
                {"is_std", is_std},
                {"n_real", static_cast<std::int64_t>(n_real)},
                {"n_gen", static_cast<std::int64_t>(n_gen)}};
    }
};

inline metrics::CnnExtractor load_classifier_extractor(const std::string& path) {
    auto ck = checkpoint::load(path);
    metrics::CnnConfig cfg;
    cfg.num_classes = static_cast<int>(ck.tensors.at("head.b").numel());
    auto params = metrics::init_cnn<float>(cfg, 0);
    checkpoint::restore_into(ck, params);
    return metrics::CnnExtractor(std::move(params), cfg);
}

/// FID between the two image directories plus the Inception Score of the
/// generated set, using the given extractor backend.
inline EvaluateResult run_evaluate(const std::string& real_dir, const std::string& gen_dir,
                                   int image_size, metrics::FeatureExtractor& extractor,
                                   int splits = 10) {
    auto real = data::load_image_folder(real_dir, image_size);
    auto gen = data::load_image_folder(gen_dir, image_size);

    auto extract = [&](const data::Dataset& ds, bool probs) {
        std::vector<std::vector<double>> rows;
        const std::size_t chunk = 64;
        for (std::size_t base = 0; base < ds.size(); base += chunk) {
            const std::size_t n = std::min(chunk, ds.size() - base);
            auto batch = data::normalize_bytes<float>(ds.image(base), n, 3, ds.height, ds.width,
                                                      data::Normalization::unit_interval_symmetric);
            auto part = probs ? extractor.probabilities(batch) : extractor.features(batch);
            rows.insert(rows.end(), part.begin(), part.end());
        }
        return rows;
    };

    EvaluateResult result;
    result.n_real = real.size();
    result.n_gen = gen.size();
    auto stats_real = metrics::fit_gaussian(extract(real, false));
    auto stats_gen = metrics::fit_gaussian(extract(gen, false));
    result.fid = metrics::fid(stats_real, stats_gen);

    const int effective_splits = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(splits), gen.size()));
    auto is = metrics::inception_score(extract(gen, true), effective_splits);
    result.is_mean = is.mean;
    result.is_std = is.std;
    return result;
}

} // namespace diffkit::pipeline

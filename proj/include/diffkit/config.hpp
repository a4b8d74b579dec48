// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diffkit/data.hpp"
#include "diffkit/diffusion.hpp"
#include "diffkit/errors.hpp"
#include "diffkit/latent.hpp"
#include "diffkit/sampler.hpp"
#include "diffkit/schedule.hpp"
#include "diffkit/unet.hpp"

namespace diffkit::config {

/// Flat run configuration. Keys mirror the training hyperparameter table
/// verbatim so a table row can be pasted into a config file unchanged.
/// Precedence when resolving: defaults < DIFFKIT_SEED env < config file <
/// command-line flags.
struct RunConfig {
    std::int64_t seed = 42;
    std::int64_t image_size = 32;
    std::int64_t batch_size = 128;
    std::int64_t num_workers = 4;
    std::int64_t num_classes = 10;
    std::int64_t num_epochs = 480;
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    std::int64_t num_train_timesteps = 1000;
    std::int64_t num_inference_steps = 250;
    double beta_start = 0.0002;
    double beta_end = 0.02;
    std::string beta_schedule = "linear";
    std::string variance_type = "fixed_small";
    std::string predictor_type = "epsilon";
    std::int64_t unet_in_size = 32;
    std::int64_t unet_in_ch = 3;
    std::int64_t unet_ch = 64;
    std::int64_t unet_num_res_blocks = 3;
    std::vector<std::int64_t> unet_ch_mult = {1, 2, 4, 4};
    std::vector<std::int64_t> unet_attn = {2, 3};
    double unet_dropout = 0.1;
    std::int64_t time_embed_dim = 0; // 0 = 4 * unet_ch
    double stability_epsilon = 1e-12;
    std::string sampler_kind = "ddim";
    double eta = 0.0;
    double guidance_weight = 1.0;
    double label_dropout_prob = 0.1;
    bool latent = false;
    std::int64_t latent_channels = 4;
    std::int64_t latent_factor = 4;
    std::int64_t vae_base_ch = 32;
    double beta_kl = 0.001;
    double flip_prob = 0.5;
    std::string normalization = "unit_interval_symmetric";
    bool shuffle = true;
    std::int64_t log_every = 1;
};

namespace detail {

enum class FieldKind { integer, real, boolean, text, int_list };

struct FieldDesc {
    std::string name;
    FieldKind kind;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
    std::vector<std::string> choices; // non-empty for enumerated text fields
};

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v); // shortest round-trip
    return std::string(buf, res.ptr);
}

inline std::int64_t parse_int(const std::string& key, const std::string& value) {
    std::int64_t out = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
    return out;
}

inline double parse_double(const std::string& key, const std::string& value) {
    double out = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + value + "'");
}

inline std::vector<std::int64_t> parse_int_list(const std::string& key, std::string value) {
    // Accept both "[1,2,4,4]" and "1, 2, 4, 4".
    std::erase_if(value, [](char c) { return c == '[' || c == ']' || c == ' '; });
    std::vector<std::int64_t> out;
    if (value.empty()) return out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(parse_int(key, item));
    return out;
}

inline std::string format_int_list(const std::vector<std::int64_t>& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out + "]";
}

inline std::vector<FieldDesc> make_registry() {
    std::vector<FieldDesc> f;
    auto add_int = [&f](const std::string& name, std::int64_t RunConfig::* member) {
        f.push_back({name, FieldKind::integer,
                     [member](const RunConfig& c) { return std::to_string(c.*member); },
                     [member, name](RunConfig& c, const std::string& v) {
                         c.*member = parse_int(name, v);
                     },
                     {}});
    };
    auto add_double = [&f](const std::string& name, double RunConfig::* member) {
        f.push_back({name, FieldKind::real,
                     [member](const RunConfig& c) { return format_double(c.*member); },
                     [member, name](RunConfig& c, const std::string& v) {
                         c.*member = parse_double(name, v);
                     },
                     {}});
    };
    auto add_bool = [&f](const std::string& name, bool RunConfig::* member) {
        f.push_back({name, FieldKind::boolean,
                     [member](const RunConfig& c) { return (c.*member) ? "true" : "false"; },
                     [member, name](RunConfig& c, const std::string& v) {
                         c.*member = parse_bool(name, v);
                     },
                     {}});
    };
    auto add_enum = [&f](const std::string& name, std::string RunConfig::* member,
                         std::vector<std::string> choices) {
        f.push_back({name, FieldKind::text,
                     [member](const RunConfig& c) { return c.*member; },
                     [member, name, choices](RunConfig& c, const std::string& v) {
                         for (const auto& ch : choices)
                             if (v == ch) {
                                 c.*member = v;
                                 return;
                             }
                         std::string valid;
                         for (const auto& ch : choices) valid += (valid.empty() ? "" : ", ") + ch;
                         throw ConfigError("key '" + name + "': invalid value '" + v +
                                           "', must be one of: " + valid);
                     },
                     choices});
    };
    auto add_list = [&f](const std::string& name, std::vector<std::int64_t> RunConfig::* member) {
        f.push_back({name, FieldKind::int_list,
                     [member](const RunConfig& c) { return format_int_list(c.*member); },
                     [member, name](RunConfig& c, const std::string& v) {
                         c.*member = parse_int_list(name, v);
                     },
                     {}});
    };

    add_int("seed", &RunConfig::seed);
    add_int("image_size", &RunConfig::image_size);
    add_int("batch_size", &RunConfig::batch_size);
    add_int("num_workers", &RunConfig::num_workers);
    add_int("num_classes", &RunConfig::num_classes);
    add_int("num_epochs", &RunConfig::num_epochs);
    add_double("learning_rate", &RunConfig::learning_rate);
    add_double("weight_decay", &RunConfig::weight_decay);
    add_int("num_train_timesteps", &RunConfig::num_train_timesteps);
    add_int("num_inference_steps", &RunConfig::num_inference_steps);
    add_double("beta_start", &RunConfig::beta_start);
    add_double("beta_end", &RunConfig::beta_end);
    add_enum("beta_schedule", &RunConfig::beta_schedule, {"linear", "cosine"});
    add_enum("variance_type", &RunConfig::variance_type, {"fixed_small"});
    add_enum("predictor_type", &RunConfig::predictor_type, {"epsilon"});
    add_int("unet_in_size", &RunConfig::unet_in_size);
    add_int("unet_in_ch", &RunConfig::unet_in_ch);
    add_int("unet_ch", &RunConfig::unet_ch);
    add_int("unet_num_res_blocks", &RunConfig::unet_num_res_blocks);
    add_list("unet_ch_mult", &RunConfig::unet_ch_mult);
    add_list("unet_attn", &RunConfig::unet_attn);
    add_double("unet_dropout", &RunConfig::unet_dropout);
    add_int("time_embed_dim", &RunConfig::time_embed_dim);
    add_double("stability_epsilon", &RunConfig::stability_epsilon);
    add_enum("sampler_kind", &RunConfig::sampler_kind, {"ddpm", "ddim"});
    add_double("eta", &RunConfig::eta);
    add_double("guidance_weight", &RunConfig::guidance_weight);
    add_double("label_dropout_prob", &RunConfig::label_dropout_prob);
    add_bool("latent", &RunConfig::latent);
    add_int("latent_channels", &RunConfig::latent_channels);
    add_int("latent_factor", &RunConfig::latent_factor);
    add_int("vae_base_ch", &RunConfig::vae_base_ch);
    add_double("beta_kl", &RunConfig::beta_kl);
    add_double("flip_prob", &RunConfig::flip_prob);
    add_enum("normalization", &RunConfig::normalization,
             {"unit_interval_symmetric", "dataset_standardize"});
    add_bool("shuffle", &RunConfig::shuffle);
    add_int("log_every", &RunConfig::log_every);
    return f;
}

inline const std::vector<FieldDesc>& registry() {
    static const std::vector<FieldDesc> fields = make_registry();
    return fields;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace detail

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::registry()) {
        if (f.name == key) {
            f.set(cfg, detail::trim(value));
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_key(const RunConfig& cfg, const std::string& key) {
    for (const auto& f : detail::registry())
        if (f.name == key) return f.get(cfg);
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::string> key_names() {
    std::vector<std::string> names;
    for (const auto& f : detail::registry()) names.push_back(f.name);
    return names;
}

/// Applies one flat "key = value" file (with '#' comments) over cfg.
inline void apply_file_text(RunConfig& cfg, const std::string& text) {
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        set_key(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

/// Cross-field validation; throws ConfigError naming the offending keys.
/// check_model covers the UNet/latent-geometry constraints, which commands
/// that never build the UNet (VAE or classifier training) skip.
inline void validate(const RunConfig& cfg, bool check_model = true) {
    schedule::ScheduleConfig sc;
    sc.beta_start = cfg.beta_start;
    sc.beta_end = cfg.beta_end;
    sc.num_train_timesteps = static_cast<int>(cfg.num_train_timesteps);
    sc.stability_epsilon = cfg.stability_epsilon;
    sc.validate();

    if (cfg.num_inference_steps < 1 || cfg.num_inference_steps > cfg.num_train_timesteps)
        throw ConfigError("num_inference_steps must be in [1, num_train_timesteps]");
    if (cfg.learning_rate <= 0) throw ConfigError("learning_rate must be > 0");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.num_workers < 0) throw ConfigError("num_workers must be >= 0");
    if (cfg.image_size < 1) throw ConfigError("image_size must be >= 1");
    if (!(cfg.unet_dropout >= 0 && cfg.unet_dropout < 1))
        throw ConfigError("unet_dropout must be in [0,1)");
    if (!(cfg.label_dropout_prob >= 0 && cfg.label_dropout_prob < 1))
        throw ConfigError("label_dropout_prob must be in [0,1)");
    if (!(cfg.flip_prob >= 0 && cfg.flip_prob <= 1))
        throw ConfigError("flip_prob must be in [0,1]");
    if (cfg.eta < 0) throw ConfigError("eta must be >= 0");
    if (cfg.num_classes < 0) throw ConfigError("num_classes must be >= 0");
    if (cfg.log_every < 1) throw ConfigError("log_every must be >= 1");

    {
        std::int64_t f = cfg.latent_factor;
        if (f < 1) throw ConfigError("latent_factor must be >= 1");
        while (f > 1) {
            if (f % 2 != 0) throw ConfigError("latent_factor must be a power of 2");
            f /= 2;
        }
    }
    if (!check_model) return;

    if (cfg.latent) {
        if (cfg.image_size % cfg.latent_factor != 0)
            throw ConfigError("image_size must be divisible by latent_factor");
        if (cfg.unet_in_size != cfg.image_size / cfg.latent_factor)
            throw ConfigError("unet_in_size must equal image_size / latent_factor when latent");
        if (cfg.unet_in_ch != cfg.latent_channels)
            throw ConfigError("unet_in_ch must equal latent_channels when latent");
    } else {
        if (cfg.unet_in_size != cfg.image_size)
            throw ConfigError("unet_in_size must equal image_size (pixel-space run)");
        if (cfg.unet_in_ch != 3)
            throw ConfigError("unet_in_ch must be 3 for pixel-space runs");
    }

    // Structural UNet checks (divisibility, attention levels, dims).
    unet::UNetConfig uc;
    uc.in_size = static_cast<int>(cfg.unet_in_size);
    uc.in_ch = static_cast<int>(cfg.unet_in_ch);
    uc.base_ch = static_cast<int>(cfg.unet_ch);
    uc.ch_mult.assign(cfg.unet_ch_mult.begin(), cfg.unet_ch_mult.end());
    uc.num_res_blocks = static_cast<int>(cfg.unet_num_res_blocks);
    uc.attn_levels.assign(cfg.unet_attn.begin(), cfg.unet_attn.end());
    uc.dropout = cfg.unet_dropout;
    uc.num_classes = static_cast<int>(cfg.num_classes);
    uc.time_embed_dim = static_cast<int>(cfg.time_embed_dim);
    uc.validate();
}

/// defaults <- env seed <- file <- flag overrides, then validated.
inline RunConfig parse_config(
    const std::optional<std::string>& file_text,
    const std::vector<std::pair<std::string, std::string>>& flag_overrides = {},
    const std::optional<std::string>& env_seed = std::nullopt) {
    RunConfig cfg;
    if (env_seed.has_value()) set_key(cfg, "seed", *env_seed);
    if (file_text.has_value()) apply_file_text(cfg, *file_text);
    for (const auto& [key, value] : flag_overrides) set_key(cfg, key, value);
    validate(cfg);
    return cfg;
}

/// Canonical flat serialization: every key in registry order, one per line.
/// This text is what run manifests embed and what the config hash covers.
inline std::string to_canonical_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : detail::registry()) out += f.name + " = " + f.get(cfg) + "\n";
    return out;
}

/// 64-bit FNV-1a over the canonical serialization, as fixed-width hex.
inline std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string config_hash(const RunConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(to_canonical_text(cfg))));
    return std::string(buf);
}

// --- typed views ------------------------------------------------------------

inline schedule::ScheduleConfig schedule_config(const RunConfig& cfg) {
    schedule::ScheduleConfig sc;
    sc.beta_start = cfg.beta_start;
    sc.beta_end = cfg.beta_end;
    sc.num_train_timesteps = static_cast<int>(cfg.num_train_timesteps);
    sc.beta_schedule =
        cfg.beta_schedule == "linear" ? schedule::Kind::linear : schedule::Kind::cosine;
    sc.stability_epsilon = cfg.stability_epsilon;
    return sc;
}

inline unet::UNetConfig unet_config(const RunConfig& cfg) {
    unet::UNetConfig uc;
    uc.in_size = static_cast<int>(cfg.unet_in_size);
    uc.in_ch = static_cast<int>(cfg.unet_in_ch);
    uc.base_ch = static_cast<int>(cfg.unet_ch);
    uc.ch_mult.assign(cfg.unet_ch_mult.begin(), cfg.unet_ch_mult.end());
    uc.num_res_blocks = static_cast<int>(cfg.unet_num_res_blocks);
    uc.attn_levels.assign(cfg.unet_attn.begin(), cfg.unet_attn.end());
    uc.dropout = cfg.unet_dropout;
    uc.num_classes = static_cast<int>(cfg.num_classes);
    uc.time_embed_dim = static_cast<int>(cfg.time_embed_dim);
    return uc;
}

inline diffusion::TrainConfig train_config(const RunConfig& cfg) {
    diffusion::TrainConfig tc;
    tc.num_epochs = static_cast<int>(cfg.num_epochs);
    tc.learning_rate = cfg.learning_rate;
    tc.weight_decay = cfg.weight_decay;
    tc.batch_size = static_cast<int>(cfg.batch_size);
    tc.seed = static_cast<std::uint64_t>(cfg.seed);
    tc.label_dropout_prob = cfg.label_dropout_prob;
    tc.log_every = static_cast<int>(cfg.log_every);
    return tc;
}

inline sampler::SamplerConfig sampler_config(const RunConfig& cfg) {
    sampler::SamplerConfig sc;
    sc.kind = cfg.sampler_kind == "ddpm" ? sampler::Kind::ddpm : sampler::Kind::ddim;
    sc.num_inference_steps = static_cast<int>(cfg.num_inference_steps);
    sc.eta = cfg.eta;
    sc.guidance_weight = cfg.guidance_weight;
    sc.seed = static_cast<std::uint64_t>(cfg.seed);
    return sc;
}

inline data::LoaderConfig loader_config(const RunConfig& cfg) {
    data::LoaderConfig lc;
    lc.batch_size = static_cast<int>(cfg.batch_size);
    lc.shuffle = cfg.shuffle;
    lc.seed = static_cast<std::uint64_t>(cfg.seed);
    lc.num_workers = static_cast<int>(cfg.num_workers);
    lc.flip_prob = cfg.flip_prob;
    lc.normalization = cfg.normalization == "unit_interval_symmetric"
                           ? data::Normalization::unit_interval_symmetric
                           : data::Normalization::dataset_standardize;
    return lc;
}

inline latent::VaeConfig vae_config(const RunConfig& cfg) {
    latent::VaeConfig vc;
    vc.base_ch = static_cast<int>(cfg.vae_base_ch);
    vc.latent_channels = static_cast<int>(cfg.latent_channels);
    vc.downsample_factor = static_cast<int>(cfg.latent_factor);
    vc.beta_kl = cfg.beta_kl;
    return vc;
}

inline data::Normalization normalization_of(const RunConfig& cfg) {
    return cfg.normalization == "unit_interval_symmetric"
               ? data::Normalization::unit_interval_symmetric
               : data::Normalization::dataset_standardize;
}

} // namespace diffkit::config

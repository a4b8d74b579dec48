// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffkit/diffusion.hpp"
#include "diffkit/errors.hpp"
#include "diffkit/image_io.hpp"
#include "diffkit/rng.hpp"
#include "diffkit/tensor.hpp"

namespace diffkit::data {

enum class Normalization { unit_interval_symmetric, dataset_standardize };

/// Per-channel mean/std of the dataset in [0,1] pixel units.
struct ChannelStats {
    std::array<double, 3> mean = {0.5, 0.5, 0.5};
    std::array<double, 3> std = {0.5, 0.5, 0.5};
};

/// Images as 8-bit planar RGB records ([3,H,W] per image) plus labels.
struct Dataset {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels; // size() * 3 * height * width
    std::vector<int> labels;
    int class_count = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t record_size() const { return 3u * height * width; }
    const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * record_size(); }
};

inline constexpr std::size_t kCifarRecordBytes = 3073; // 1 label byte + 3 * 1024 pixels

/// CIFAR-10 binary records: label byte, then R/G/B planes of 1024 bytes each.
inline Dataset parse_cifar10_binary(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() % kCifarRecordBytes != 0)
        throw DataError("cifar10: file size " + std::to_string(bytes.size()) +
                        " is not a multiple of 3073 (trailing bytes?)");
    const std::size_t count = bytes.size() / kCifarRecordBytes;
    Dataset ds;
    ds.height = 32;
    ds.width = 32;
    ds.class_count = 10;
    ds.labels.reserve(count);
    ds.pixels.reserve(count * 3072);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
        if (rec[0] > 9)
            throw DataError("cifar10: record " + std::to_string(i) + " has label byte " +
                            std::to_string(int(rec[0])) + " > 9");
        ds.labels.push_back(rec[0]);
        ds.pixels.insert(ds.pixels.end(), rec + 1, rec + kCifarRecordBytes);
    }
    return ds;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is),
                                     std::istreambuf_iterator<char>());
}

/// Loads one .bin file or every *.bin in a directory (sorted by name).
inline Dataset load_cifar10(const std::string& path) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (fs::is_directory(path)) {
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file() && e.path().extension() == ".bin")
                files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw DataError("no .bin files under " + path);
    } else {
        files.push_back(path);
    }
    std::vector<std::uint8_t> all;
    for (const auto& f : files) {
        auto bytes = read_file_bytes(f);
        all.insert(all.end(), bytes.begin(), bytes.end());
    }
    return parse_cifar10_binary(all);
}

/// Image-folder layout root/<class>/<file>.png|.ppm; class names sorted
/// lexicographically define the labels. A flat directory of images is read as
/// a single unlabeled class. Images are bilinearly resized to target_size when
/// it differs from their native size.
inline Dataset load_image_folder(const std::string& root, int target_size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DataError("image folder does not exist: " + root);
    auto is_image = [](const fs::path& p) {
        return p.extension() == ".png" || p.extension() == ".ppm";
    };

    std::vector<std::string> class_dirs;
    std::vector<std::string> flat_files;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) class_dirs.push_back(e.path().string());
        else if (e.is_regular_file() && is_image(e.path())) flat_files.push_back(e.path().string());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    std::sort(flat_files.begin(), flat_files.end());

    Dataset ds;
    ds.height = target_size;
    ds.width = target_size;
    auto append = [&](const std::string& file, int label) {
        image_io::ImageU8 img = image_io::read_image(file);
        if (img.width != target_size || img.height != target_size)
            img = image_io::resize_bilinear(img, target_size, target_size);
        // Interleaved RGB -> planar [3,H,W].
        const std::size_t hw = static_cast<std::size_t>(target_size) * target_size;
        const std::size_t base = ds.pixels.size();
        ds.pixels.resize(base + 3 * hw);
        for (std::size_t i = 0; i < hw; ++i)
            for (int c = 0; c < 3; ++c) ds.pixels[base + c * hw + i] = img.rgb[i * 3 + c];
        ds.labels.push_back(label);
    };

    if (!class_dirs.empty()) {
        ds.class_count = static_cast<int>(class_dirs.size());
        for (std::size_t c = 0; c < class_dirs.size(); ++c) {
            std::vector<std::string> files;
            for (const auto& e : fs::directory_iterator(class_dirs[c]))
                if (e.is_regular_file() && is_image(e.path())) files.push_back(e.path().string());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) append(f, static_cast<int>(c));
        }
    } else {
        ds.class_count = 1;
        for (const auto& f : flat_files) append(f, 0);
    }
    if (ds.labels.empty()) throw DataError("no images under " + root);
    return ds;
}

inline ChannelStats compute_stats(const Dataset& ds) {
    if (ds.size() == 0) throw DataError("compute_stats: empty dataset");
    ChannelStats s;
    const std::size_t hw = static_cast<std::size_t>(ds.height) * ds.width;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sum_sq = 0.0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const std::uint8_t* plane = ds.image(i) + c * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                const double v = plane[j] / 255.0;
                sum += v;
                sum_sq += v * v;
            }
        }
        const double n = static_cast<double>(ds.size() * hw);
        s.mean[c] = sum / n;
        s.std[c] = std::sqrt(std::max(1e-12, sum_sq / n - s.mean[c] * s.mean[c]));
    }
    return s;
}

inline void save_stats(const ChannelStats& s, const std::string& path) {
    nlohmann::json j = {{"mean", s.mean}, {"std", s.std}};
    std::ofstream os(path);
    if (!os) throw DataError("cannot write stats file " + path);
    os << j.dump(2) << '\n';
}

inline ChannelStats load_stats(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read stats file " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    ChannelStats s;
    for (int c = 0; c < 3; ++c) {
        s.mean[c] = j.at("mean").at(c).get<double>();
        s.std[c] = j.at("std").at(c).get<double>();
    }
    return s;
}

/// Bytes -> normalized floats. Default maps x to x/127.5 - 1; standardize mode
/// uses cached per-channel stats in [0,1] units.
template <typename T>
Tensor<T> normalize_bytes(const std::uint8_t* bytes, std::size_t n, std::size_t channels,
                          std::size_t h, std::size_t w, Normalization mode,
                          const ChannelStats& stats = {}) {
    Tensor<T> out = Tensor<T>::zeros({n, channels, h, w});
    const std::size_t hw = h * w;
    T* dst = out.data().data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < channels; ++c) {
            const std::uint8_t* src = bytes + (i * channels + c) * hw;
            T* d = dst + (i * channels + c) * hw;
            if (mode == Normalization::unit_interval_symmetric) {
                for (std::size_t j = 0; j < hw; ++j)
                    d[j] = static_cast<T>(src[j] / 127.5 - 1.0);
            } else {
                const double mean = stats.mean[c], inv_std = 1.0 / stats.std[c];
                for (std::size_t j = 0; j < hw; ++j)
                    d[j] = static_cast<T>((src[j] / 255.0 - mean) * inv_std);
            }
        }
    return out;
}

/// Normalized floats -> [0,1] unit interval (clamped). Standardize mode needs
/// RGB inputs since the cached stats are per color channel.
template <typename T>
Tensor<T> to_unit_interval(const Tensor<T>& x, Normalization mode, const ChannelStats& stats = {}) {
    check_shape(x.ndim() == 4, "to_unit_interval: expects [N,C,H,W]");
    check_shape(mode == Normalization::unit_interval_symmetric || x.dim(1) == 3,
                "to_unit_interval: dataset_standardize expects RGB input");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < channels; ++c) {
            const T* src = x.data().data() + (i * channels + c) * hw;
            T* d = out.data().data() + (i * channels + c) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                double v = static_cast<double>(src[j]);
                v = mode == Normalization::unit_interval_symmetric ? (v + 1.0) / 2.0
                                                                   : v * stats.std[c] + stats.mean[c];
                d[j] = static_cast<T>(std::min(1.0, std::max(0.0, v)));
            }
        }
    return out;
}

/// [0,1] floats -> interleaved 8-bit RGB rows for image output.
template <typename T>
image_io::ImageU8 unit_to_image(const Tensor<T>& x01, std::size_t index) {
    const std::size_t h = x01.dim(2), w = x01.dim(3), hw = h * w;
    image_io::ImageU8 img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.rgb.resize(3 * hw);
    const T* base = x01.data().data() + index * 3 * hw;
    for (std::size_t j = 0; j < hw; ++j)
        for (std::size_t c = 0; c < 3; ++c)
            img.rgb[j * 3 + c] = static_cast<unsigned char>(
                std::lround(255.0 * std::min(1.0, std::max(0.0, double(base[c * hw + j])))));
    return img;
}

/// Horizontal mirror of a planar [C,H,W] record with probability flip_prob.
inline void augment_flip(std::uint8_t* record, std::size_t channels, std::size_t h, std::size_t w,
                         Rng& rng, double flip_prob) {
    if (flip_prob <= 0.0) return;
    if (rng.uniform() >= flip_prob) return;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t r = 0; r < h; ++r) {
            std::uint8_t* row = record + (c * h + r) * w;
            std::reverse(row, row + w);
        }
}

struct LoaderConfig {
    int batch_size = 128;
    bool shuffle = true;
    std::uint64_t seed = 42;
    int num_workers = 4;
    double flip_prob = 0.5;
    Normalization normalization = Normalization::unit_interval_symmetric;
    ChannelStats stats; // used by dataset_standardize

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip_prob must be in [0,1]");
        if (num_workers < 0) throw ConfigError("num_workers must be >= 0");
    }
};

/// Deterministic mini-batch source. batch(epoch, index) is a pure function of
/// (dataset, config, epoch, index): the epoch permutation is seeded by
/// (seed, epoch) and per-sample flips by (seed, epoch, slot). The final
/// partial batch is dropped.
class Loader {
public:
    Loader(const Dataset& dataset, LoaderConfig cfg) : ds_(&dataset), cfg_(std::move(cfg)) {
        cfg_.validate();
        if (static_cast<std::size_t>(cfg_.batch_size) > dataset.size())
            throw ConfigError("batch_size " + std::to_string(cfg_.batch_size) +
                              " exceeds dataset size " + std::to_string(dataset.size()));
    }

    std::size_t batches_per_epoch() const {
        return ds_->size() / static_cast<std::size_t>(cfg_.batch_size);
    }

    std::vector<std::size_t> permutation(int epoch) const {
        std::vector<std::size_t> perm(ds_->size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        if (cfg_.shuffle) {
            Rng rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(epoch), 0x7065726dull));
            for (std::size_t i = perm.size() - 1; i > 0; --i) {
                const std::size_t j =
                    static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i + 1)));
                std::swap(perm[i], perm[j]);
            }
        }
        return perm;
    }

    diffusion::BatchData<float> batch(int epoch, std::size_t index) const {
        if (index >= batches_per_epoch()) throw ConfigError("batch index out of range");
        {
            std::lock_guard<std::mutex> lock(perm_mutex_);
            if (!cached_perm_ || cached_epoch_ != epoch) {
                cached_perm_ = permutation(epoch);
                cached_epoch_ = epoch;
            }
        }
        const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
        const std::size_t rec = ds_->record_size();
        std::vector<std::uint8_t> bytes(bs * rec);
        std::vector<int> labels(bs);
        for (std::size_t k = 0; k < bs; ++k) {
            const std::size_t slot = index * bs + k;
            std::size_t src;
            {
                std::lock_guard<std::mutex> lock(perm_mutex_);
                src = (*cached_perm_)[slot];
            }
            std::copy_n(ds_->image(src), rec, bytes.data() + k * rec);
            labels[k] = ds_->labels[src];
            Rng flip_rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(epoch), slot, 0x666c6970ull));
            augment_flip(bytes.data() + k * rec, 3, ds_->height, ds_->width, flip_rng,
                         cfg_.flip_prob);
        }
        diffusion::BatchData<float> out;
        out.images = normalize_bytes<float>(bytes.data(), bs, 3, ds_->height, ds_->width,
                                            cfg_.normalization, cfg_.stats);
        out.labels = std::move(labels);
        return out;
    }

    const LoaderConfig& config() const { return cfg_; }

private:
    const Dataset* ds_;
    LoaderConfig cfg_;
    mutable std::mutex perm_mutex_;
    mutable std::optional<std::vector<std::size_t>> cached_perm_;
    mutable int cached_epoch_ = -1;
};

/// Prefetching wrapper: up to num_workers threads compute upcoming batches by
/// index while the consumer drains them in order. Because the inner provider's
/// batch() is pure, the stream is identical for any worker count.
template <typename Provider>
class Prefetcher {
public:
    using Batch = decltype(std::declval<Provider&>().batch(0, std::size_t{0}));

    Prefetcher(Provider& inner, int num_workers)
        : inner_(&inner), workers_(std::max(0, num_workers)) {
        window_ = static_cast<std::size_t>(std::max(1, 2 * workers_));
        for (int i = 0; i < workers_; ++i)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ~Prefetcher() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    std::size_t batches_per_epoch() const { return inner_->batches_per_epoch(); }

    Batch batch(int epoch, std::size_t index) {
        if (workers_ == 0) return inner_->batch(epoch, index);
        std::unique_lock<std::mutex> lock(mutex_);
        if (epoch != epoch_) {
            // New epoch: flush pending work, reset the schedule.
            cv_.wait(lock, [this] { return in_flight_ == 0; });
            pending_.clear();
            ready_.clear();
            epoch_ = epoch;
            next_scheduled_ = index;
        }
        const std::size_t total = inner_->batches_per_epoch();
        while (next_scheduled_ < total && next_scheduled_ < index + window_)
            pending_.push_back(next_scheduled_++);
        cv_.notify_all();
        cv_.wait(lock, [this, index] { return ready_.count(index) != 0; });
        Batch out = std::move(ready_.at(index));
        ready_.erase(index);
        cv_.notify_all();
        return out;
    }

private:
    void worker_loop() {
        std::unique_lock<std::mutex> lock(mutex_);
        while (true) {
            cv_.wait(lock, [this] { return stop_ || !pending_.empty(); });
            if (stop_) return;
            const std::size_t index = pending_.front();
            pending_.pop_front();
            const int epoch = epoch_;
            ++in_flight_;
            lock.unlock();
            Batch b = inner_->batch(epoch, index);
            lock.lock();
            --in_flight_;
            if (epoch == epoch_) ready_.emplace(index, std::move(b));
            cv_.notify_all();
        }
    }

    Provider* inner_;
    int workers_;
    std::size_t window_ = 1;
    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::size_t> pending_;
    std::map<std::size_t, Batch> ready_;
    int epoch_ = -1;
    std::size_t next_scheduled_ = 0;
    int in_flight_ = 0;
    bool stop_ = false;
};

} // namespace diffkit::data

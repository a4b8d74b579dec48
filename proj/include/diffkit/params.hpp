// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "diffkit/errors.hpp"
#include "diffkit/tensor.hpp"

namespace diffkit {

/// Insertion-ordered collection of named parameter tensors. The order is the
/// registration order, which keeps initialization, optimizer sweeps and
/// checkpoints deterministic.
template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> tensor) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        index_.emplace(name, tensors_.size());
        names_.push_back(name);
        tensors_.push_back(std::move(tensor));
        return tensors_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return tensors_[it->second];
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return tensors_[it->second];
    }

    std::size_t size() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Tensor<T>& tensor(std::size_t i) { return tensors_[i]; }
    const Tensor<T>& tensor(std::size_t i) const { return tensors_[i]; }

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

    void set_requires_grad(bool v) {
        for (auto& t : tensors_) t.set_requires_grad(v);
    }
    void zero_grad() {
        for (auto& t : tensors_) t.zero_grad();
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace diffkit

#pragma once

#include <map>
#include <set>

#include "bussam/ops.hpp"

namespace bussam {

// Named parameter tensors, each flagged trainable or frozen. Iteration order
// is the lexicographic name order (std::map), so optimizer sweeps and
// checkpoints are deterministic.
template <typename T>
class ParameterStore {
public:
    struct Entry {
        Tensor<T> tensor;
        bool trainable = true;
    };

    Tensor<T>& add(const std::string& name, Tensor<T> t, bool trainable) {
        auto [it, inserted] = entries_.emplace(name, Entry{std::move(t), trainable});
        if (!inserted) throw ConfigError("ParameterStore: duplicate parameter '" + name + "'");
        it->second.tensor.set_requires_grad(trainable);
        return it->second.tensor;
    }

    Tensor<T>& get(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw UsageError("ParameterStore: unknown parameter '" + name + "'");
        return it->second.tensor;
    }
    const Tensor<T>& get(const std::string& name) const {
        return const_cast<ParameterStore*>(this)->get(name);
    }
    bool contains(const std::string& name) const { return entries_.count(name) > 0; }
    bool is_trainable(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw UsageError("ParameterStore: unknown parameter '" + name + "'");
        return it->second.trainable;
    }

    std::set<std::string> names() const {
        std::set<std::string> out;
        for (const auto& [k, v] : entries_) out.insert(k);
        return out;
    }
    std::set<std::string> trainable_names() const {
        std::set<std::string> out;
        for (const auto& [k, v] : entries_)
            if (v.trainable) out.insert(k);
        return out;
    }
    std::set<std::string> frozen_names() const {
        std::set<std::string> out;
        for (const auto& [k, v] : entries_)
            if (!v.trainable) out.insert(k);
        return out;
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [k, v] : entries_) n += v.tensor.numel();
        return n;
    }
    std::int64_t count_with_prefix(const std::string& prefix) const {
        std::int64_t n = 0;
        for (const auto& [k, v] : entries_)
            if (k.rfind(prefix, 0) == 0) n += v.tensor.numel();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

private:
    std::map<std::string, Entry> entries_;
};

namespace init {

// Every parameter draws from its own RNG stream keyed by (seed, name), so
// models that differ only in which modules exist still share bitwise-identical
// tensors for the parameters they have in common.

template <typename T>
Tensor<T> normal(Shape shape, double std_dev, std::uint64_t seed, const std::string& name) {
    auto rng = rng_for(seed, name);
    std::normal_distribution<double> dist(0.0, std_dev);
    std::vector<T> data(static_cast<std::size_t>(bussam::numel(shape)));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(data));
}

// Kaiming fan-in scaling for conv / linear weights: std = sqrt(2 / fan_in).
template <typename T>
Tensor<T> kaiming(Shape shape, std::uint64_t seed, const std::string& name) {
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    return normal<T>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), seed, name);
}

template <typename T>
Tensor<T> zeros(Shape shape) {
    return Tensor<T>(std::move(shape), T(0));
}

template <typename T>
Tensor<T> ones(Shape shape) {
    return Tensor<T>(std::move(shape), T(1));
}

}  // namespace init

}  // namespace bussam

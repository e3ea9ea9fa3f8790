#pragma once

// Named parameter store. Canonical tensor names (stem.conv1.weight,
// blocks.{i}.attn.q.weight, lora.blocks.{i}.q.A, ...) are the unit of
// checkpointing, freezing and hashing.

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "wpmfa/tensor.hpp"

namespace wpmfa {

class ParamStore {
public:
    Tensor& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    void add(const std::string& name, Tensor t) {
        if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        params_.emplace(name, std::move(t));
    }

    void remove_prefix(const std::string& prefix) {
        for (auto it = params_.begin(); it != params_.end();)
            it = (it->first.rfind(prefix, 0) == 0) ? params_.erase(it) : std::next(it);
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for (auto& [name, t] : params_) t.set_requires_grad(pred(name));
    }

    void zero_grads() {
        for (auto& [name, t] : params_)
            if (t.requires_grad()) t.zero_grad();
    }

    std::size_t count_params(bool trainable_only = false) const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) {
            if (name.rfind("buffers.", 0) == 0) continue;  // running stats etc.
            if (trainable_only && !t.requires_grad()) continue;
            n += t.numel();
        }
        return n;
    }

    // FNV-1a over raw bytes of every tensor matching the predicate.
    std::uint64_t hash(const std::function<bool(const std::string&)>& pred =
                           [](const std::string&) { return true; }) const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&](const void* p, std::size_t n) {
            const unsigned char* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& [name, t] : params_) {
            if (!pred(name)) continue;
            mix(name.data(), name.size());
            mix(t.data().data(), t.data().size() * sizeof(double));
        }
        return h;
    }

private:
    std::map<std::string, Tensor> params_;
};

}  // namespace wpmfa

#pragma once

// Low-rank adaptation of the attention Q/K/V/O projections. A frozen
// weight W is augmented by B.A with B zero-initialized, so an adapted
// model starts bit-identical to the base model. Training updates only
// A and B (plus the head); merge folds B.A back into a plain weight.

#include <set>
#include <string>
#include <vector>

#include "wpmfa/params.hpp"
#include "wpmfa/tensor.hpp"

namespace wpmfa {

struct LoraConfig {
    std::size_t rank = 8;
    std::set<std::string> targets = {"q", "k", "v", "o"};
    double init_std = 0.02;
    double multiplier = 1.0;  // plain BA by default

    void validate() const {
        if (rank < 1) throw std::invalid_argument("lora: rank must be >= 1");
        if (targets.empty()) throw std::invalid_argument("lora: empty target set");
        for (const auto& t : targets)
            if (t != "q" && t != "k" && t != "v" && t != "o")
                throw std::invalid_argument("lora: unknown target '" + t + "'");
    }
};

struct LoraAdapter {
    Tensor A;  // r x k_in
    Tensor B;  // d_out x r
    std::size_t rank = 0;
    std::size_t block = 0;
    std::string target;
};

class LoraSet {
public:
    const LoraAdapter* find(std::size_t block, const std::string& target) const {
        for (const auto& a : adapters_)
            if (a.block == block && a.target == target) return &a;
        return nullptr;
    }
    void add(LoraAdapter a) { adapters_.push_back(std::move(a)); }
    const std::vector<LoraAdapter>& all() const { return adapters_; }
    bool empty() const { return adapters_.empty(); }

private:
    std::vector<LoraAdapter> adapters_;
};

inline std::string lora_param_name(std::size_t block, const std::string& target,
                                   const char* which) {
    return "lora.blocks." + std::to_string(block) + "." + target + "." + which;
}

// Creates adapters for every attention target of blocks [0, n_blocks),
// freezes all encoder parameters (head parameters are untouched), and
// registers A/B in the store under lora.* names.
inline LoraSet attach_lora(ParamStore& ps, std::size_t n_blocks, const LoraConfig& cfg,
                           std::mt19937_64& rng) {
    cfg.validate();
    LoraSet set;
    for (std::size_t i = 0; i < n_blocks; ++i) {
        for (const auto& t : cfg.targets) {
            const std::string wname =
                "encoder.blocks." + std::to_string(i) + ".attn." + t + ".weight";
            const Tensor& w = ps.at(wname);
            const std::size_t d_out = w.dim(0), k_in = w.dim(1);
            if (cfg.rank >= std::min(d_out, k_in))
                throw std::invalid_argument("lora: rank " + std::to_string(cfg.rank) +
                                            " must be < min(d_out, k_in) = " +
                                            std::to_string(std::min(d_out, k_in)));
            LoraAdapter a;
            a.A = Tensor::randn({cfg.rank, k_in}, rng, cfg.init_std).set_requires_grad(true);
            a.B = Tensor::zeros({d_out, cfg.rank}).set_requires_grad(true);
            a.rank = cfg.rank;
            a.block = i;
            a.target = t;
            ps.add(lora_param_name(i, t, "A"), a.A);
            ps.add(lora_param_name(i, t, "B"), a.B);
            set.add(std::move(a));
        }
    }
    for (auto& [name, p] : ps)
        if (name.rfind("encoder.", 0) == 0) p.set_requires_grad(false);
    return set;
}

// Rebuilds a LoraSet from adapter tensors already present in a store
// (e.g. after loading a checkpoint).
inline LoraSet collect_lora(ParamStore& ps, std::size_t n_blocks) {
    LoraSet set;
    for (std::size_t i = 0; i < n_blocks; ++i)
        for (const char* t : {"q", "k", "v", "o"}) {
            const std::string an = lora_param_name(i, t, "A");
            if (!ps.contains(an)) continue;
            LoraAdapter a;
            a.A = ps.at(an);
            a.B = ps.at(lora_param_name(i, t, "B"));
            a.rank = a.A.dim(0);
            a.block = i;
            a.target = t;
            set.add(std::move(a));
        }
    return set;
}

// (W + B.A).x computed as W.x + B.(A.x); gradients flow to A and B only
// when W is frozen.
inline Tensor adapted_forward(const Tensor& x, const Tensor& w, const LoraAdapter& a) {
    return add(matmul(w, x), matmul(a.B, matmul(a.A, x)));
}

// Deployment form: returns W + B.A as a plain weight.
inline Tensor merge(const Tensor& w, const LoraAdapter& a) {
    const std::size_t d_out = w.dim(0), k_in = w.dim(1), r = a.rank;
    Tensor out = w.clone();
    for (std::size_t i = 0; i < d_out; ++i)
        for (std::size_t p = 0; p < r; ++p) {
            const double bv = a.B[i * r + p];
            if (bv == 0.0) continue;
            for (std::size_t j = 0; j < k_in; ++j)
                out[i * k_in + j] += bv * a.A[p * k_in + j];
        }
    return out;
}

// Folds every adapter in the store into its base weight and drops the
// lora.* entries; the result is a base-format parameter set.
inline void merge_all(ParamStore& ps, std::size_t n_blocks) {
    LoraSet set = collect_lora(ps, n_blocks);
    for (const auto& a : set.all()) {
        const std::string wname =
            "encoder.blocks." + std::to_string(a.block) + ".attn." + a.target + ".weight";
        Tensor merged = merge(ps.at(wname), a);
        ps.at(wname).data() = merged.data();
    }
    ps.remove_prefix("lora.");
}

}  // namespace wpmfa

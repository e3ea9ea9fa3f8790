#pragma once

// Whisper-style encoder: two-conv stem, sinusoidal positional encoding,
// pre-norm transformer blocks. Every block's hidden state is exposed so
// the aggregation head can select a contiguous range.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "wpmfa/audio.hpp"
#include "wpmfa/lora.hpp"
#include "wpmfa/params.hpp"
#include "wpmfa/tensor.hpp"

namespace wpmfa {

struct EncoderConfig {
    std::size_t n_mels = 80;
    std::size_t d_model = 64;
    std::size_t n_blocks = 8;
    std::size_t n_heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t max_positions = 1500;
    double init_std = 0.02;
    bool use_positional_encoding = true;  // test toggle

    void validate() const {
        if (n_blocks < 1) throw std::invalid_argument("encoder: n_blocks must be >= 1");
        if (n_heads == 0 || d_model % n_heads != 0)
            throw std::invalid_argument("encoder: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        if (d_model % 2 != 0)
            throw std::invalid_argument("encoder: d_model must be even for sinusoidal PE");
    }
};

// h[i] is the output of block i+1 (the paper counts blocks from 1).
struct BlockOutputs {
    std::vector<Tensor> h;
};

// Parameter shapes in canonical-name order; init and count both derive
// from this single listing.
inline std::vector<std::pair<std::string, Shape>> encoder_param_shapes(const EncoderConfig& c) {
    std::vector<std::pair<std::string, Shape>> out;
    out.push_back({"encoder.stem.conv1.weight", {c.d_model, c.n_mels, 3}});
    out.push_back({"encoder.stem.conv1.bias", {c.d_model}});
    out.push_back({"encoder.stem.conv2.weight", {c.d_model, c.d_model, 3}});
    out.push_back({"encoder.stem.conv2.bias", {c.d_model}});
    const std::size_t hidden = c.mlp_ratio * c.d_model;
    for (std::size_t i = 0; i < c.n_blocks; ++i) {
        const std::string p = "encoder.blocks." + std::to_string(i) + ".";
        out.push_back({p + "ln1.gamma", {c.d_model}});
        out.push_back({p + "ln1.beta", {c.d_model}});
        for (const char* t : {"q", "k", "v", "o"}) {
            out.push_back({p + "attn." + t + ".weight", {c.d_model, c.d_model}});
            out.push_back({p + "attn." + t + ".bias", {c.d_model}});
        }
        out.push_back({p + "ln2.gamma", {c.d_model}});
        out.push_back({p + "ln2.beta", {c.d_model}});
        out.push_back({p + "mlp.fc1.weight", {hidden, c.d_model}});
        out.push_back({p + "mlp.fc1.bias", {hidden}});
        out.push_back({p + "mlp.fc2.weight", {c.d_model, hidden}});
        out.push_back({p + "mlp.fc2.bias", {c.d_model}});
    }
    return out;
}

inline void init_encoder_params(ParamStore& ps, const EncoderConfig& c, std::mt19937_64& rng) {
    c.validate();
    for (const auto& [name, shape] : encoder_param_shapes(c)) {
        Tensor t;
        if (name.ends_with(".weight"))
            t = Tensor::randn(shape, rng, c.init_std);
        else if (name.ends_with("gamma"))
            t = Tensor::full(shape, 1.0);
        else
            t = Tensor::zeros(shape);
        t.set_requires_grad(true);
        ps.add(name, std::move(t));
    }
}

// Standard transformer sinusoids, split-half layout: rows [0, d/2) carry
// sin(p * w_i), rows [d/2, d) the matching cos, w_i = 10000^(-2i/d).
inline Tensor sinusoidal_pe(std::size_t t_frames, std::size_t d_model) {
    if (d_model % 2 != 0) throw std::invalid_argument("sinusoidal_pe: d_model must be even");
    const std::size_t half = d_model / 2;
    Tensor pe = Tensor::zeros({d_model, t_frames});
    for (std::size_t i = 0; i < half; ++i) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / d_model);
        for (std::size_t p = 0; p < t_frames; ++p) {
            pe.at(i, p) = std::sin(p * w);
            pe.at(half + i, p) = std::cos(p * w);
        }
    }
    return pe;
}

// conv1d(k3,s1,p1)+GELU then conv1d(k3,s2,p1)+GELU: T' = ceil(T/2).
inline Tensor conv_stem(const Tensor& mel, const ParamStore& ps) {
    if (mel.ndim() != 2 || mel.dim(1) == 0)
        throw std::invalid_argument("conv_stem: empty input");
    Tensor x = gelu(conv1d(mel, ps.at("encoder.stem.conv1.weight"),
                           ps.at("encoder.stem.conv1.bias"), 1, 1));
    return gelu(conv1d(x, ps.at("encoder.stem.conv2.weight"),
                       ps.at("encoder.stem.conv2.bias"), 2, 1));
}

namespace encdet {

// Q/K/V/O projection, consulting a LoRA adapter when one is attached.
inline Tensor attn_proj(const Tensor& x, const ParamStore& ps, const std::string& prefix,
                        const std::string& target, const LoraSet* adapters,
                        std::size_t block_index) {
    Tensor y = linear(ps.at(prefix + "attn." + target + ".weight"), x,
                      ps.at(prefix + "attn." + target + ".bias"));
    if (adapters) {
        if (const LoraAdapter* a = adapters->find(block_index, target))
            y = add(y, matmul(a->B, matmul(a->A, x)));
    }
    return y;
}

}  // namespace encdet

// Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.)).
inline Tensor transformer_block(const Tensor& x, const ParamStore& ps,
                                const EncoderConfig& cfg, std::size_t block_index,
                                const LoraSet* adapters = nullptr) {
    cfg.validate();
    const std::string p = "encoder.blocks." + std::to_string(block_index) + ".";
    const std::size_t d = cfg.d_model, t = x.dim(1);
    const std::size_t dh = d / cfg.n_heads;

    Tensor xn = layer_norm(x, ps.at(p + "ln1.gamma"), ps.at(p + "ln1.beta"));
    Tensor q = encdet::attn_proj(xn, ps, p, "q", adapters, block_index);
    Tensor k = encdet::attn_proj(xn, ps, p, "k", adapters, block_index);
    Tensor v = encdet::attn_proj(xn, ps, p, "v", adapters, block_index);

    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        Tensor qh = slice_rows(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_rows(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_rows(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(transpose(qh), kh), sc);  // [T x T], rows = queries
        Tensor attn = softmax(scores, 1);
        heads.push_back(matmul(vh, transpose(attn)));
    }
    Tensor mhsa = encdet::attn_proj(concat_rows(heads), ps, p, "o", adapters, block_index);
    Tensor y = add(x, mhsa);

    Tensor yn = layer_norm(y, ps.at(p + "ln2.gamma"), ps.at(p + "ln2.beta"));
    Tensor hdn = gelu(linear(ps.at(p + "mlp.fc1.weight"), yn, ps.at(p + "mlp.fc1.bias")));
    Tensor mlp = linear(ps.at(p + "mlp.fc2.weight"), hdn, ps.at(p + "mlp.fc2.bias"));
    (void)t;
    return add(y, mlp);
}

inline BlockOutputs encode(const MelSpectrogram& mel, const ParamStore& ps,
                           const EncoderConfig& cfg, const LoraSet* adapters = nullptr) {
    cfg.validate();
    if (mel.n_mels != cfg.n_mels)
        throw std::invalid_argument("encode: mel channels " + std::to_string(mel.n_mels) +
                                    " != configured " + std::to_string(cfg.n_mels));
    Tensor x = conv_stem(mel.frames, ps);
    if (cfg.use_positional_encoding) x = add(x, sinusoidal_pe(x.dim(1), cfg.d_model));
    BlockOutputs bo;
    bo.h.reserve(cfg.n_blocks);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        x = transformer_block(x, ps, cfg, i, adapters);
        bo.h.push_back(x);
    }
    return bo;
}

}  // namespace wpmfa

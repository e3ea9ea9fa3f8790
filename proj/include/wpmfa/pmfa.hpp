#pragma once

// Partial multi-scale feature aggregation head: channel-concat of the
// selected block outputs h_s..h_e, per-frame LayerNorm, attentive
// statistics pooling, then BatchNorm + FC down to the speaker embedding.

#include <string>
#include <vector>

#include "wpmfa/encoder.hpp"
#include "wpmfa/params.hpp"
#include "wpmfa/tensor.hpp"

namespace wpmfa {

// 1-based contiguous block selection [s, e].
struct LayerRange {
    std::size_t s = 1;
    std::size_t e = 1;

    std::size_t k() const { return e - s + 1; }

    void validate(std::size_t n_blocks) const {
        if (s < 1 || s > e || e > n_blocks)
            throw std::out_of_range("layer range [" + std::to_string(s) + "," +
                                    std::to_string(e) + "] invalid for " +
                                    std::to_string(n_blocks) + " blocks");
    }

    std::string str() const { return std::to_string(s) + "-" + std::to_string(e); }
};

struct HeadConfig {
    std::size_t asp_bottleneck = 128;
    std::size_t emb_dim = 192;
    double sigma_eps = 1e-8;  // floor inside the pooled-std sqrt
};

struct SpeakerEmbedding {
    std::vector<double> vector;
    std::string utterance_id;
    std::string speaker_id;  // optional at inference
};

inline std::vector<std::pair<std::string, Shape>> head_param_shapes(std::size_t agg_dim,
                                                                    const HeadConfig& c) {
    const std::size_t b = c.asp_bottleneck;
    return {
        {"head.ln.gamma", {agg_dim}},
        {"head.ln.beta", {agg_dim}},
        {"head.asp.w", {b, agg_dim}},
        {"head.asp.b", {b}},
        {"head.asp.v", {1, b}},
        {"head.bn.gamma", {2 * agg_dim}},
        {"head.bn.beta", {2 * agg_dim}},
        {"head.fc.weight", {c.emb_dim, 2 * agg_dim}},
        {"head.fc.bias", {c.emb_dim}},
    };
}

inline void init_head_params(ParamStore& ps, std::size_t agg_dim, const HeadConfig& c,
                             std::mt19937_64& rng, double init_std = 0.02) {
    for (const auto& [name, shape] : head_param_shapes(agg_dim, c)) {
        Tensor t;
        if (name.ends_with("gamma"))
            t = Tensor::full(shape, 1.0);
        else if (name.ends_with(".weight") || name == "head.asp.w" || name == "head.asp.v")
            t = Tensor::randn(shape, rng, init_std);
        else
            t = Tensor::zeros(shape);
        t.set_requires_grad(true);
        ps.add(name, std::move(t));
    }
    // BatchNorm running statistics: buffers, not parameters.
    ps.add("buffers.head.bn.running_mean", Tensor::zeros({2 * agg_dim}));
    ps.add("buffers.head.bn.running_var", Tensor::full({2 * agg_dim}, 1.0));
    ps.add("buffers.head.bn.count", Tensor::zeros({1}));
}

// H' = Concat(h_s..h_e) along channels, H = LayerNorm(H') per frame.
inline Tensor aggregate(const BlockOutputs& bo, const LayerRange& range, const ParamStore& ps) {
    range.validate(bo.h.size());
    std::vector<Tensor> parts(bo.h.begin() + (range.s - 1), bo.h.begin() + range.e);
    Tensor cat = concat_rows(parts);
    return layer_norm(cat, ps.at("head.ln.gamma"), ps.at("head.ln.beta"));
}

// e_t = v^T tanh(W H[:,t] + b); alpha = softmax_t(e); output = [mu; sigma].
inline Tensor attentive_stats_pool(const Tensor& h, const ParamStore& ps,
                                   double sigma_eps = 1e-8) {
    if (h.ndim() != 2 || h.dim(1) == 0)
        throw std::invalid_argument("attentive_stats_pool: need at least one frame");
    Tensor scores = matmul(ps.at("head.asp.v"),
                           tanh_op(bias_add(matmul(ps.at("head.asp.w"), h),
                                            ps.at("head.asp.b"))));  // [1 x T]
    Tensor alpha = transpose(softmax(scores, 1));                    // [T x 1]
    Tensor mu = matmul(h, alpha);                                    // [D x 1]
    Tensor m2 = matmul(mul(h, h), alpha);
    Tensor sigma = sqrt_op(clamp_min(sub(m2, mul(mu, mu)), sigma_eps));
    return concat_rows({mu, sigma});  // [2D x 1]
}

// BatchNorm (batch stats in train mode, running stats in eval) followed by
// the affine FC projection; no nonlinearity after the FC.
inline Tensor project(const Tensor& pooled, ParamStore& ps, bool training) {
    Tensor bn = batch_norm_1d(pooled, ps.at("head.bn.gamma"), ps.at("head.bn.beta"),
                              ps.at("buffers.head.bn.running_mean"),
                              ps.at("buffers.head.bn.running_var"),
                              ps.at("buffers.head.bn.count"), training);
    return linear(ps.at("head.fc.weight"), bn, ps.at("head.fc.bias"));  // [emb x B]
}

// End-to-end inference path for one utterance.
inline SpeakerEmbedding embed_utterance(const MelSpectrogram& mel, ParamStore& ps,
                                        const EncoderConfig& enc, const LayerRange& range,
                                        const HeadConfig& head,
                                        const LoraSet* adapters = nullptr,
                                        const std::string& utterance_id = "") {
    BlockOutputs bo = encode(mel, ps, enc, adapters);
    Tensor h = aggregate(bo, range, ps);
    Tensor pooled = attentive_stats_pool(h, ps, head.sigma_eps);
    Tensor emb = project(pooled, ps, /*training=*/false);
    SpeakerEmbedding out;
    out.utterance_id = utterance_id;
    out.vector.assign(emb.data().begin(), emb.data().end());
    return out;
}

}  // namespace wpmfa

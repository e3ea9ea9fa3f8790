#pragma once

// Whole-model assembly: truncated encoder + PMFA head (+ classifier for
// training), parameter initialization and accounting.
//
// Blocks past the end of the selected layer range never contribute to the
// embedding, so the model is built with the encoder truncated at e; this
// also makes parameter counts reflect the deployed network.

#include <string>
#include <vector>

#include "wpmfa/encoder.hpp"
#include "wpmfa/lora.hpp"
#include "wpmfa/pmfa.hpp"

namespace wpmfa {

struct ModelConfig {
    EncoderConfig encoder;
    LayerRange range{1, 8};
    HeadConfig head;
    std::size_t n_classes = 0;  // 0: no classifier (inference only)

    // Encoder as actually instantiated: truncated at the last selected block.
    EncoderConfig effective_encoder() const {
        range.validate(encoder.n_blocks);
        EncoderConfig ec = encoder;
        ec.n_blocks = range.e;
        return ec;
    }

    std::size_t agg_dim() const { return range.k() * encoder.d_model; }
};

inline ParamStore init_model(const ModelConfig& cfg, std::mt19937_64& rng) {
    ParamStore ps;
    init_encoder_params(ps, cfg.effective_encoder(), rng);
    init_head_params(ps, cfg.agg_dim(), cfg.head, rng);
    if (cfg.n_classes > 0)
        ps.add("classifier.weight",
               Tensor::randn({cfg.n_classes, cfg.head.emb_dim}, rng, 0.02)
                   .set_requires_grad(true));
    return ps;
}

// Exact element counts from the shape listings alone; nothing is allocated,
// so full-scale (large-v2) configurations are countable instantly.
inline std::size_t count_total_params(const ModelConfig& cfg, bool include_classifier = false) {
    std::size_t n = 0;
    for (const auto& [name, shape] : encoder_param_shapes(cfg.effective_encoder()))
        n += shape_numel(shape);
    for (const auto& [name, shape] : head_param_shapes(cfg.agg_dim(), cfg.head))
        n += shape_numel(shape);
    if (include_classifier) n += cfg.n_classes * cfg.head.emb_dim;
    return n;
}

// Trainable count under LoRA: adapters on every instantiated block plus the
// head (and classifier when present).
inline std::size_t count_lora_trainable_params(const ModelConfig& cfg, const LoraConfig& lora,
                                               bool include_classifier = false) {
    lora.validate();
    const EncoderConfig ec = cfg.effective_encoder();
    std::size_t n = ec.n_blocks * lora.targets.size() * (lora.rank * ec.d_model * 2);
    for (const auto& [name, shape] : head_param_shapes(cfg.agg_dim(), cfg.head))
        n += shape_numel(shape);
    if (include_classifier) n += cfg.n_classes * cfg.head.emb_dim;
    return n;
}

namespace modeldet {

inline Tensor concat_cols(const std::vector<Tensor>& cols) {
    std::vector<Tensor> rows;
    rows.reserve(cols.size());
    for (const auto& c : cols) rows.push_back(transpose(c));
    return transpose(concat_rows(rows));
}

}  // namespace modeldet

// Batch of mel crops -> embedding matrix [emb_dim x B]. BatchNorm sees the
// whole batch at once, so train-mode statistics are batch statistics.
inline Tensor forward_batch(const std::vector<MelSpectrogram>& mels, ParamStore& ps,
                            const ModelConfig& cfg, bool training,
                            const LoraSet* adapters = nullptr) {
    const EncoderConfig ec = cfg.effective_encoder();
    std::vector<Tensor> pooled;
    pooled.reserve(mels.size());
    for (const auto& mel : mels) {
        BlockOutputs bo = encode(mel, ps, ec, adapters);
        Tensor h = aggregate(bo, cfg.range, ps);
        pooled.push_back(attentive_stats_pool(h, ps, cfg.head.sigma_eps));
    }
    return project(modeldet::concat_cols(pooled), ps, training);
}

inline SpeakerEmbedding embed_one(const MelSpectrogram& mel, ParamStore& ps,
                                  const ModelConfig& cfg, const LoraSet* adapters = nullptr,
                                  const std::string& utterance_id = "") {
    return embed_utterance(mel, ps, cfg.effective_encoder(), cfg.range, cfg.head, adapters,
                           utterance_id);
}

}  // namespace wpmfa

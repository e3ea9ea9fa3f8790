#pragma once

// Training: dataset manifest handling with speed-perturbation label
// expansion, crop sampling, Adam, the two-stage freeze-then-finetune
// loop, and the layer-selection sweep harness.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wpmfa/audio.hpp"
#include "wpmfa/config.hpp"
#include "wpmfa/loss.hpp"
#include "wpmfa/model.hpp"
#include "wpmfa/params.hpp"
#include "wpmfa/scoring.hpp"

namespace wpmfa {

struct UttEntry {
    std::string path;
    std::string speaker;
    std::string id() const { return path; }
};

// Manifest: one "utterance_path speaker_label" per line.
inline std::vector<UttEntry> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<UttEntry> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        UttEntry e;
        if (!(is >> e.path >> e.speaker))
            throw std::runtime_error("malformed manifest line: " + line);
        out.push_back(std::move(e));
    }
    return out;
}

// Training items are (utterance, speed factor) pairs; factors other than
// 1.0 get their own speaker label (speaker#factor), since pitch-shifted
// speech is treated as a new speaker.
struct Dataset {
    struct Item {
        std::size_t utt;
        double factor;
        std::size_t label;
    };

    std::vector<UttEntry> utts;
    AugPolicy aug;
    std::vector<Item> items;
    std::map<std::string, std::size_t> vocab;

    static std::string item_label(const UttEntry& u, double factor) {
        if (factor == 1.0) return u.speaker;
        std::ostringstream os;
        os << u.speaker << "#" << factor;
        return os.str();
    }

    static Dataset build(std::vector<UttEntry> utts, AugPolicy aug = {}) {
        if (utts.empty()) throw std::invalid_argument("dataset: empty utterance list");
        Dataset d;
        d.utts = std::move(utts);
        d.aug = std::move(aug);
        if (d.aug.speed_factors.empty()) d.aug.speed_factors = {1.0};
        for (std::size_t i = 0; i < d.utts.size(); ++i)
            for (double f : d.aug.speed_factors) {
                const std::string lab = item_label(d.utts[i], f);
                auto [it, fresh] = d.vocab.try_emplace(lab, d.vocab.size());
                d.items.push_back({i, f, it->second});
            }
        return d;
    }

    std::size_t n_classes() const { return vocab.size(); }
};

// Loads, augments and featurizes training crops. Waveforms (including
// speed-perturbed variants) are cached; noise mixing and crop offsets are
// drawn from the caller's RNG.
class CropSampler {
public:
    CropSampler(const Dataset& ds, MelConfig mel, double crop_seconds)
        : ds_(ds), mel_(mel), crop_seconds_(crop_seconds) {
        for (const auto& p : ds.aug.noise_paths) noises_.push_back(read_wav(p));
    }

    std::pair<MelSpectrogram, std::size_t> make_crop(const Dataset::Item& item,
                                                     std::mt19937_64& rng) {
        const Waveform& w = variant(item.utt, item.factor);
        const std::size_t crop_len =
            static_cast<std::size_t>(std::llround(crop_seconds_ * w.sample_rate));
        Waveform c;
        c.sample_rate = w.sample_rate;
        c.samples.resize(crop_len);
        if (w.samples.size() >= crop_len) {
            std::uniform_int_distribution<std::size_t> off(0, w.samples.size() - crop_len);
            const std::size_t o = off(rng);
            std::copy(w.samples.begin() + o, w.samples.begin() + o + crop_len,
                      c.samples.begin());
        } else {
            // Tile short utterances to the exact crop length.
            for (std::size_t i = 0; i < crop_len; ++i)
                c.samples[i] = w.samples[i % w.samples.size()];
        }
        if (!noises_.empty()) {
            std::uniform_int_distribution<std::size_t> pick(0, noises_.size() - 1);
            std::uniform_real_distribution<double> snr(ds_.aug.snr_min_db, ds_.aug.snr_max_db);
            c = mix_noise(c, noises_[pick(rng)], snr(rng), rng);
        }
        return {log_mel(c, mel_), item.label};
    }

private:
    const Waveform& variant(std::size_t utt, double factor) {
        auto key = std::make_pair(utt, factor);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        if (base_.count(utt) == 0) base_.emplace(utt, read_wav(ds_.utts[utt].path));
        Waveform v = factor == 1.0 ? base_.at(utt) : speed_perturb(base_.at(utt), factor);
        return cache_.emplace(key, std::move(v)).first->second;
    }

    const Dataset& ds_;
    MelConfig mel_;
    double crop_seconds_;
    std::vector<Waveform> noises_;
    std::map<std::size_t, Waveform> base_;
    std::map<std::pair<std::size_t, double>, Waveform> cache_;
};

// Uniform item sampling, per the training recipe.
inline std::vector<std::pair<MelSpectrogram, std::size_t>> sample_batch(
    const Dataset& ds, CropSampler& sampler, std::size_t batch_size, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, ds.items.size() - 1);
    std::vector<std::pair<MelSpectrogram, std::size_t>> out;
    out.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i)
        out.push_back(sampler.make_crop(ds.items[pick(rng)], rng));
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class AdamOptimizer {
public:
    explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore& ps, double lr, double weight_decay = 0.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, p] : ps) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto& [m, v] = state_[name];
            if (m.size() != p.numel()) {
                m.assign(p.numel(), 0.0);
                v.assign(p.numel(), 0.0);
            }
            const auto& g = p.grad();
            for (std::size_t i = 0; i < p.numel(); ++i) {
                double gi = g[i] + weight_decay * p[i];
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
        }
    }

    // Persist moments and step count into the store for exact resume.
    void save_state(ParamStore& ps) const {
        ps.remove_prefix("opt.");
        ps.add("opt.t", Tensor::scalar(static_cast<double>(t_)));
        for (const auto& [name, mv] : state_) {
            ps.add("opt.m." + name, Tensor::from(mv.first, {mv.first.size()}));
            ps.add("opt.v." + name, Tensor::from(mv.second, {mv.second.size()}));
        }
    }

    void load_state(const ParamStore& ps) {
        state_.clear();
        t_ = 0;
        if (!ps.contains("opt.t")) return;
        t_ = static_cast<std::size_t>(ps.at("opt.t")[0]);
        for (const auto& [name, t] : ps) {
            if (name.rfind("opt.m.", 0) != 0) continue;
            const std::string pname = name.substr(6);
            state_[pname] = {t.data(), ps.at("opt.v." + pname).data()};
        }
    }

    std::size_t steps() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

// ---------------------------------------------------------------------------
// Two-stage training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
    std::size_t epoch;
    int stage;
    double loss;
    double accuracy;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t step, double loss)
        : std::runtime_error("non-finite loss at training step " + std::to_string(step) +
                             " (loss=" + std::to_string(loss) + ")"),
          step(step) {}
    std::size_t step;
};

inline void apply_stage_freeze(ParamStore& ps, int stage, bool lora_mode) {
    ps.set_trainable([&](const std::string& name) {
        if (name.rfind("buffers.", 0) == 0 || name.rfind("opt.", 0) == 0) return false;
        const bool head_side =
            name.rfind("head.", 0) == 0 || name.rfind("classifier.", 0) == 0;
        if (stage == 1) return head_side;
        if (lora_mode) return head_side || name.rfind("lora.", 0) == 0;
        return name.rfind("lora.", 0) == 0 || head_side || name.rfind("encoder.", 0) == 0;
    });
}

// Runs epochs [start_epoch, stage1+stage2). The per-epoch RNG depends only
// on (seed, epoch), so a run resumed from an epoch checkpoint reproduces
// the uninterrupted run exactly.
inline std::vector<EpochMetrics> train(
    const Dataset& ds, ParamStore& ps, const ModelConfig& model, const TrainSchedule& sched,
    const AamConfig& aam, const MelConfig& mel, std::uint64_t seed, bool lora_mode = false,
    std::size_t start_epoch = 0,
    const std::function<void(std::size_t, const ParamStore&, const AdamOptimizer&)>&
        on_epoch_end = {}) {
    sched.validate();
    aam.validate();
    if (ds.items.empty()) throw std::invalid_argument("train: empty dataset");
    if (!ps.contains("classifier.weight"))
        throw std::invalid_argument("train: model has no classifier");

    LoraSet adapters = collect_lora(ps, model.effective_encoder().n_blocks);
    const LoraSet* ad = adapters.empty() ? nullptr : &adapters;
    CropSampler sampler(ds, mel, sched.crop_seconds);
    AdamOptimizer opt;
    opt.load_state(ps);
    ps.remove_prefix("opt.");

    const std::size_t total_epochs = sched.stage1_epochs + sched.stage2_epochs;
    std::vector<EpochMetrics> metrics;
    std::size_t global_step = opt.steps();

    for (std::size_t epoch = start_epoch; epoch < total_epochs; ++epoch) {
        const int stage = epoch < sched.stage1_epochs ? 1 : 2;
        const double lr = stage == 1 ? sched.lr_stage1 : sched.lr_stage2;
        apply_stage_freeze(ps, stage, lora_mode);

        std::mt19937_64 rng(seed * 1000003ull + epoch);
        std::vector<std::size_t> order(ds.items.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0, acc_sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += sched.batch_size) {
            const std::size_t b1 = std::min(b0 + sched.batch_size, order.size());
            std::vector<MelSpectrogram> mels;
            std::vector<std::size_t> labels;
            for (std::size_t i = b0; i < b1; ++i) {
                auto [crop, label] = sampler.make_crop(ds.items[order[i]], rng);
                mels.push_back(std::move(crop));
                labels.push_back(label);
            }
            ps.zero_grads();
            Tape tape;
            Tensor emb = transpose(forward_batch(mels, ps, model, /*training=*/true, ad));
            Tensor loss = aam_softmax_loss(emb, labels, ps.at("classifier.weight"), aam);
            ++global_step;
            if (!std::isfinite(loss[0])) throw DivergenceError(global_step, loss[0]);
            tape.backward(loss);
            opt.step(ps, lr, sched.weight_decay);
            loss_sum += loss[0];
            acc_sum += cosine_accuracy(emb, labels, ps.at("classifier.weight"));
            ++n_batches;
        }
        metrics.push_back({epoch, stage, loss_sum / n_batches, acc_sum / n_batches});
        if (on_epoch_end) {
            opt.save_state(ps);
            on_epoch_end(epoch, ps, opt);
            ps.remove_prefix("opt.");
        }
    }
    return metrics;
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& m) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write metrics csv: " + path);
    f << "epoch,stage,loss,acc\n";
    f.precision(12);
    for (const auto& e : m)
        f << e.epoch << "," << e.stage << "," << e.loss << "," << e.accuracy << "\n";
}

// ---------------------------------------------------------------------------
// Layer-selection sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    LayerRange range;
    double eer;
    double min_dcf;
};

inline std::map<std::string, std::vector<double>> embed_manifest(
    const std::vector<UttEntry>& utts, ParamStore& ps, const ModelConfig& model,
    const MelConfig& mel, const LoraSet* adapters = nullptr) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& u : utts) {
        MelSpectrogram m = log_mel(read_wav(u.path), mel);
        out[u.id()] = embed_one(m, ps, model, adapters, u.id()).vector;
    }
    return out;
}

// Trains one model per range under an identical schedule and seed, then
// evaluates each on the same trial list.
inline std::vector<SweepRow> layer_sweep(const Dataset& ds, const std::vector<LayerRange>& ranges,
                                         ModelConfig base, const TrainSchedule& sched,
                                         const AamConfig& aam, const MelConfig& mel,
                                         const std::vector<UttEntry>& eval_utts,
                                         const TrialList& trials, std::uint64_t seed,
                                         bool lora_mode = false, const LoraConfig& lora = {}) {
    if (ranges.empty()) throw std::invalid_argument("layer_sweep: no ranges given");
    std::vector<SweepRow> rows;
    for (const auto& r : ranges) {
        ModelConfig cfg = base;
        cfg.range = r;
        cfg.n_classes = ds.n_classes();
        std::mt19937_64 rng(seed);
        ParamStore ps = init_model(cfg, rng);
        LoraSet adapters;
        if (lora_mode) adapters = attach_lora(ps, cfg.effective_encoder().n_blocks, lora, rng);
        train(ds, ps, cfg, sched, aam, mel, seed, lora_mode);
        auto embeddings =
            embed_manifest(eval_utts, ps, cfg, mel, adapters.empty() ? nullptr : &adapters);
        EvalResult res = evaluate(trials, embeddings);
        rows.push_back({r, res.eer, res.min_dcf});
    }
    return rows;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write sweep csv: " + path);
    f << "selected_layers,eer,min_dcf\n";
    f.precision(12);
    for (const auto& r : rows)
        f << r.range.str() << "," << r.eer << "," << r.min_dcf << "\n";
}

}  // namespace wpmfa

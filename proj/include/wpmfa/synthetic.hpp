#pragma once

// Deterministic synthetic speaker corpus for end-to-end checks and demos.
// Each synthetic speaker is a fixed set of harmonically unrelated tones
// (its spectral signature); utterances differ by phase, amplitude
// modulation and additive noise.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "wpmfa/audio.hpp"
#include "wpmfa/scoring.hpp"
#include "wpmfa/training.hpp"

namespace wpmfa {

struct SyntheticCorpusConfig {
    std::size_t n_speakers = 8;
    std::size_t utts_per_speaker = 10;     // training utterances
    std::size_t heldout_per_speaker = 2;   // extra unseen utterances
    double duration_seconds = 2.4;
    int sample_rate = 16000;
    std::uint64_t seed = 7;
};

struct SyntheticCorpus {
    std::vector<UttEntry> train;
    std::vector<UttEntry> heldout;
    TrialList train_trials;
    TrialList heldout_trials;
};

namespace synthdet {

inline std::vector<double> speaker_tones(std::size_t speaker) {
    const double f1 = 220.0 + 155.0 * static_cast<double>(speaker);
    return {f1, f1 * 1.93 + 47.0, f1 * 2.71 + 89.0};
}

inline Waveform make_utterance(std::size_t speaker, std::mt19937_64& rng,
                               const SyntheticCorpusConfig& cfg) {
    const std::size_t n =
        static_cast<std::size_t>(std::llround(cfg.duration_seconds * cfg.sample_rate));
    Waveform w;
    w.sample_rate = cfg.sample_rate;
    w.samples.assign(n, 0.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> amp(0.15, 0.25);
    std::uniform_real_distribution<double> mod_rate(1.0, 3.0);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (double f : speaker_tones(speaker)) {
        const double ph = phase(rng), a = amp(rng);
        const double mr = mod_rate(rng), mp = phase(rng);
        for (std::size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / cfg.sample_rate;
            const double env = 1.0 + 0.3 * std::sin(2.0 * std::numbers::pi * mr * t + mp);
            w.samples[i] += a * env * std::sin(2.0 * std::numbers::pi * f * t + ph);
        }
    }
    for (double& s : w.samples) s = std::clamp(s + noise(rng), -1.0, 1.0);
    return w;
}

// All same-speaker pairs as targets plus an equal-sized slice of
// cross-speaker pairs as nontargets.
inline TrialList make_trials(const std::vector<UttEntry>& utts, std::mt19937_64& rng) {
    TrialList trials;
    std::vector<std::pair<std::size_t, std::size_t>> nontarget_pool;
    for (std::size_t i = 0; i < utts.size(); ++i)
        for (std::size_t j = i + 1; j < utts.size(); ++j) {
            if (utts[i].speaker == utts[j].speaker)
                trials.push_back({utts[i].id(), utts[j].id(), true});
            else
                nontarget_pool.push_back({i, j});
        }
    std::shuffle(nontarget_pool.begin(), nontarget_pool.end(), rng);
    const std::size_t n_non = std::min(nontarget_pool.size(), trials.size());
    for (std::size_t k = 0; k < n_non; ++k) {
        auto [i, j] = nontarget_pool[k];
        trials.push_back({utts[i].id(), utts[j].id(), false});
    }
    return trials;
}

}  // namespace synthdet

inline SyntheticCorpus generate_corpus(const std::string& dir,
                                       const SyntheticCorpusConfig& cfg = {}) {
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(cfg.seed);
    SyntheticCorpus corpus;
    for (std::size_t s = 0; s < cfg.n_speakers; ++s) {
        const std::string spk = "spk" + std::to_string(s);
        for (std::size_t u = 0; u < cfg.utts_per_speaker + cfg.heldout_per_speaker; ++u) {
            Waveform w = synthdet::make_utterance(s, rng, cfg);
            const std::string path =
                dir + "/" + spk + "_utt" + std::to_string(u) + ".wav";
            write_wav(path, w);
            if (u < cfg.utts_per_speaker)
                corpus.train.push_back({path, spk});
            else
                corpus.heldout.push_back({path, spk});
        }
    }
    corpus.train_trials = synthdet::make_trials(corpus.train, rng);
    corpus.heldout_trials = synthdet::make_trials(corpus.heldout, rng);
    return corpus;
}

inline void write_manifest(const std::string& path, const std::vector<UttEntry>& utts) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest: " + path);
    for (const auto& u : utts) f << u.path << " " << u.speaker << "\n";
}

inline void write_trial_list(const std::string& path, const TrialList& trials) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write trial list: " + path);
    for (const auto& t : trials)
        f << (t.target ? 1 : 0) << " " << t.enroll << " " << t.test << "\n";
}

}  // namespace wpmfa

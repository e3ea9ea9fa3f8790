#pragma once

// Waveform I/O, resampling, augmentation, and the 80-channel log-mel
// front end. RIFF/WAVE only (PCM16 / float32); everything is 64-bit
// internally and resampled to 16 kHz.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "wpmfa/tensor.hpp"

namespace wpmfa {

struct Waveform {
    std::vector<double> samples;  // in [-1, 1]
    int sample_rate = 16000;

    double duration() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

struct MelConfig {
    int sample_rate = 16000;
    std::size_t fft_size = 400;
    std::size_t hop = 160;
    std::size_t n_mels = 80;
    double floor = 1e-10;
    double dynamic_range = 8.0;  // log10 units below the global max

    void validate() const {
        if (hop == 0 || fft_size < hop)
            throw std::invalid_argument("mel config: need fft_size >= hop > 0");
        if (n_mels > fft_size / 2 + 1)
            throw std::invalid_argument("mel config: n_mels exceeds fft_size/2+1");
    }
};

struct MelSpectrogram {
    Tensor frames;       // n_mels x T
    std::size_t n_mels;
    double frame_shift;  // seconds
};

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

namespace wavdet {

inline std::uint32_t rd_u32(const unsigned char* p) {
    return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t rd_u16(const unsigned char* p) { return p[0] | (p[1] << 8); }

}  // namespace wavdet

inline Waveform resample(const Waveform& w, int target_rate);

inline Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open wav file: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
        std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw std::runtime_error("malformed wav header: " + path);

    std::uint16_t fmt = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const unsigned char* ck = buf.data() + pos;
        std::uint32_t len = wavdet::rd_u32(ck + 4);
        if (std::memcmp(ck, "fmt ", 4) == 0 && len >= 16) {
            fmt = wavdet::rd_u16(ck + 8);
            channels = wavdet::rd_u16(ck + 10);
            rate = wavdet::rd_u32(ck + 12);
            bits = wavdet::rd_u16(ck + 22);
        } else if (std::memcmp(ck, "data", 4) == 0) {
            data = ck + 8;
            data_len = std::min<std::uint32_t>(len, buf.size() - (pos + 8));
        }
        pos += 8 + len + (len & 1);
    }
    if (!data || channels == 0 || rate == 0)
        throw std::runtime_error("malformed wav file (missing fmt/data): " + path);

    std::size_t n_frames;
    Waveform w;
    w.sample_rate = static_cast<int>(rate);
    if (fmt == 1 && bits == 16) {
        n_frames = data_len / (2 * channels);
        w.samples.resize(n_frames);
        for (std::size_t i = 0; i < n_frames; ++i) {
            double acc = 0.0;
            for (std::uint16_t c = 0; c < channels; ++c) {
                std::int16_t s = static_cast<std::int16_t>(
                    wavdet::rd_u16(data + 2 * (i * channels + c)));
                acc += s / 32768.0;
            }
            w.samples[i] = acc / channels;
        }
    } else if (fmt == 3 && bits == 32) {
        n_frames = data_len / (4 * channels);
        w.samples.resize(n_frames);
        for (std::size_t i = 0; i < n_frames; ++i) {
            double acc = 0.0;
            for (std::uint16_t c = 0; c < channels; ++c) {
                std::uint32_t u = wavdet::rd_u32(data + 4 * (i * channels + c));
                float s;
                std::memcpy(&s, &u, 4);
                acc += s;
            }
            w.samples[i] = acc / channels;
        }
    } else {
        throw std::runtime_error("unsupported wav codec (fmt=" + std::to_string(fmt) +
                                 ", bits=" + std::to_string(bits) + "): " + path);
    }
    for (double s : w.samples)
        if (!std::isfinite(s)) throw std::runtime_error("non-finite sample in " + path);
    if (w.sample_rate != 16000) w = resample(w, 16000);
    return w;
}

inline void write_wav(const std::string& path, const Waveform& w) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write wav file: " + path);
    auto w_u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto w_u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
    const std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
    f.write("RIFF", 4);
    w_u32(36 + data_len);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    w_u32(16);
    w_u16(1);  // PCM
    w_u16(1);  // mono
    w_u32(static_cast<std::uint32_t>(w.sample_rate));
    w_u32(static_cast<std::uint32_t>(w.sample_rate) * 2);
    w_u16(2);
    w_u16(16);
    f.write("data", 4);
    w_u32(data_len);
    for (double s : w.samples) {
        double c = std::clamp(s, -1.0, 1.0);
        std::int16_t v = static_cast<std::int16_t>(std::lrint(c * 32767.0));
        w_u16(static_cast<std::uint16_t>(v));
    }
}

// ---------------------------------------------------------------------------
// Resampling (windowed-sinc interpolation)
// ---------------------------------------------------------------------------

namespace resdet {

// Evaluates the input at fractional position t using a Hann-windowed sinc
// kernel; cutoff < 1 low-passes for downsampling.
inline double sinc_interp(const std::vector<double>& x, double t, double cutoff,
                          int half_width = 16) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
    const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(std::floor(t)) - half_width + 1;
    const std::ptrdiff_t i1 = static_cast<std::ptrdiff_t>(std::floor(t)) + half_width;
    double acc = 0.0;
    for (std::ptrdiff_t i = std::max<std::ptrdiff_t>(i0, 0);
         i <= std::min<std::ptrdiff_t>(i1, n - 1); ++i) {
        const double d = (t - static_cast<double>(i)) * cutoff;
        double s;
        if (std::abs(d) < 1e-12) {
            s = 1.0;
        } else {
            s = std::sin(std::numbers::pi * d) / (std::numbers::pi * d);
        }
        const double win_arg = (t - static_cast<double>(i)) / (2.0 * half_width);
        const double win = 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * win_arg));
        acc += x[i] * s * cutoff * win;
    }
    return acc;
}

}  // namespace resdet

inline Waveform resample(const Waveform& w, int target_rate) {
    if (target_rate <= 0) throw std::invalid_argument("resample: target rate must be positive");
    if (w.sample_rate == target_rate) return w;
    const double ratio = static_cast<double>(w.sample_rate) / target_rate;
    const double cutoff = ratio > 1.0 ? 1.0 / ratio : 1.0;
    const std::size_t n_out =
        static_cast<std::size_t>(std::llround(w.samples.size() / ratio));
    Waveform out;
    out.sample_rate = target_rate;
    out.samples.resize(n_out);
    for (std::size_t i = 0; i < n_out; ++i)
        out.samples[i] = resdet::sinc_interp(w.samples, i * ratio, cutoff);
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

// clean + g * noise where g realizes the requested SNR from signal powers.
// An infinite snr_db is the no-noise sentinel. Output peak-normalized only
// if it would clip.
inline Waveform mix_noise(const Waveform& clean, const Waveform& noise, double snr_db,
                          std::mt19937_64& rng) {
    if (std::isinf(snr_db) && snr_db > 0) return clean;
    if (clean.sample_rate != noise.sample_rate)
        throw std::invalid_argument("mix_noise: sample-rate mismatch");
    const std::size_t n = clean.samples.size();

    // Tile or randomly crop the noise to the clean length.
    std::vector<double> nz(n);
    if (noise.samples.empty()) throw std::invalid_argument("mix_noise: empty noise");
    if (noise.samples.size() >= n) {
        std::uniform_int_distribution<std::size_t> off(0, noise.samples.size() - n);
        const std::size_t o = off(rng);
        std::copy(noise.samples.begin() + o, noise.samples.begin() + o + n, nz.begin());
    } else {
        for (std::size_t i = 0; i < n; ++i) nz[i] = noise.samples[i % noise.samples.size()];
    }

    double p_clean = 0.0, p_noise = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p_clean += clean.samples[i] * clean.samples[i];
        p_noise += nz[i] * nz[i];
    }
    p_clean /= n;
    p_noise /= n;
    if (p_noise <= 0.0) throw std::invalid_argument("mix_noise: zero-power noise");
    const double g = std::sqrt(p_clean / p_noise) * std::pow(10.0, -snr_db / 20.0);

    Waveform out;
    out.sample_rate = clean.sample_rate;
    out.samples.resize(n);
    double peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out.samples[i] = clean.samples[i] + g * nz[i];
        peak = std::max(peak, std::abs(out.samples[i]));
    }
    if (peak > 1.0)
        for (double& s : out.samples) s /= peak;
    return out;
}

// sox-style speed change: pitch and tempo scale together by `factor`.
inline Waveform speed_perturb(const Waveform& w, double factor) {
    if (factor <= 0.0) throw std::invalid_argument("speed_perturb: factor must be positive");
    if (factor == 1.0) return w;
    const std::size_t n_out =
        static_cast<std::size_t>(std::llround(w.samples.size() / factor));
    const double cutoff = factor > 1.0 ? 1.0 / factor : 1.0;
    Waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.resize(n_out);
    for (std::size_t i = 0; i < n_out; ++i)
        out.samples[i] = resdet::sinc_interp(w.samples, i * factor, cutoff);
    return out;
}

// ---------------------------------------------------------------------------
// Log-mel spectrogram
// ---------------------------------------------------------------------------

namespace meldet {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular HTK-convention filterbank, n_mels x (fft/2+1).
inline std::vector<std::vector<double>> mel_filterbank(const MelConfig& cfg) {
    const std::size_t n_bins = cfg.fft_size / 2 + 1;
    const double f_max = cfg.sample_rate / 2.0;
    const double m_lo = hz_to_mel(0.0), m_hi = hz_to_mel(f_max);
    std::vector<double> centers(cfg.n_mels + 2);
    for (std::size_t i = 0; i < centers.size(); ++i)
        centers[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (cfg.n_mels + 1));
    std::vector<std::vector<double>> fb(cfg.n_mels, std::vector<double>(n_bins, 0.0));
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
        const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
        for (std::size_t b = 0; b < n_bins; ++b) {
            const double f = b * static_cast<double>(cfg.sample_rate) / cfg.fft_size;
            if (f > lo && f < mid)
                fb[m][b] = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                fb[m][b] = (hi - f) / (hi - mid);
        }
    }
    return fb;
}

// Center frequency (Hz) of mel channel m, for test oracles.
inline double mel_center_hz(const MelConfig& cfg, std::size_t m) {
    const double m_lo = hz_to_mel(0.0), m_hi = hz_to_mel(cfg.sample_rate / 2.0);
    return mel_to_hz(m_lo + (m_hi - m_lo) * (m + 1) / (cfg.n_mels + 1));
}

}  // namespace meldet

// STFT power -> mel filterbank -> log10 with floor -> dynamic-range clamp
// -> (x+4)/4 rescale. T = floor(N/hop), reflect-padded fft_size/2 per side.
inline MelSpectrogram log_mel(const Waveform& w, const MelConfig& cfg = {}) {
    cfg.validate();
    const std::size_t n = w.samples.size();
    if (n < cfg.fft_size)
        throw std::invalid_argument("log_mel: input shorter than one analysis window (" +
                                    std::to_string(n) + " < " + std::to_string(cfg.fft_size) +
                                    " samples)");
    const std::size_t half = cfg.fft_size / 2;
    // Reflect padding.
    std::vector<double> x(n + 2 * half);
    for (std::size_t i = 0; i < half; ++i) x[i] = w.samples[half - i];
    std::copy(w.samples.begin(), w.samples.end(), x.begin() + half);
    for (std::size_t i = 0; i < half; ++i) x[n + half + i] = w.samples[n - 2 - i];

    const std::size_t t_frames = n / cfg.hop;
    const std::size_t n_bins = cfg.fft_size / 2 + 1;

    std::vector<double> window(cfg.fft_size);
    for (std::size_t i = 0; i < cfg.fft_size; ++i)
        window[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / cfg.fft_size));

    // Precomputed DFT basis (fft_size is not a power of two).
    std::vector<double> cos_tab(n_bins * cfg.fft_size), sin_tab(n_bins * cfg.fft_size);
    for (std::size_t b = 0; b < n_bins; ++b)
        for (std::size_t i = 0; i < cfg.fft_size; ++i) {
            const double a = 2.0 * std::numbers::pi * b * i / cfg.fft_size;
            cos_tab[b * cfg.fft_size + i] = std::cos(a);
            sin_tab[b * cfg.fft_size + i] = std::sin(a);
        }

    const auto fb = meldet::mel_filterbank(cfg);
    Tensor mel = Tensor::zeros({cfg.n_mels, t_frames});
    std::vector<double> frame(cfg.fft_size), power(n_bins);
    for (std::size_t t = 0; t < t_frames; ++t) {
        for (std::size_t i = 0; i < cfg.fft_size; ++i)
            frame[i] = x[t * cfg.hop + i] * window[i];
        for (std::size_t b = 0; b < n_bins; ++b) {
            double re = 0.0, im = 0.0;
            const double* ct = &cos_tab[b * cfg.fft_size];
            const double* st = &sin_tab[b * cfg.fft_size];
            for (std::size_t i = 0; i < cfg.fft_size; ++i) {
                re += frame[i] * ct[i];
                im -= frame[i] * st[i];
            }
            power[b] = re * re + im * im;
        }
        for (std::size_t m = 0; m < cfg.n_mels; ++m) {
            double acc = 0.0;
            for (std::size_t b = 0; b < n_bins; ++b) acc += fb[m][b] * power[b];
            mel.at(m, t) = std::log10(std::max(acc, cfg.floor));
        }
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : mel.data()) mx = std::max(mx, v);
    for (double& v : mel.data()) v = (std::max(v, mx - cfg.dynamic_range) + 4.0) / 4.0;

    return MelSpectrogram{std::move(mel), cfg.n_mels,
                          static_cast<double>(cfg.hop) / cfg.sample_rate};
}

}  // namespace wpmfa

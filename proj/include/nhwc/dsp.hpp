#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nhwc/error.hpp"
#include "nhwc/log.hpp"

namespace nhwc {

inline constexpr double pi = 3.14159265358979323846;

/// Mono waveform. Samples are expected to stay within [-1, 1] after any
/// operation that declares saturation safety (mixer, vocoder output).
struct AudioBuffer {
    std::vector<float> samples;
    int sample_rate = 16000;

    double duration_s() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

struct MelConfig {
    int sample_rate = 16000;
    std::size_t fft_size = 1024;
    std::size_t hop = 256;
    std::size_t n_mels = 80;
    double fmin = 0.0;
    double fmax = 8000.0;
    double log_floor = 1e-5;

    void validate() const {
        if (fmax > sample_rate / 2.0) throw InvalidInputError("mel: fmax exceeds Nyquist");
        if (hop > fft_size) throw InvalidInputError("mel: hop exceeds fft_size");
        if ((fft_size & (fft_size - 1)) != 0)
            throw InvalidInputError("mel: fft_size must be a power of two");
    }
};

/// Log-mel energies, frames x n_mels, natural log with a fixed floor.
struct MelSpectrogram {
    std::size_t frames = 0;
    std::size_t n_mels = 0;
    std::vector<double> values; // row-major frames x n_mels
    MelConfig config;

    double& at(std::size_t t, std::size_t m) { return values[t * n_mels + m]; }
    double at(std::size_t t, std::size_t m) const { return values[t * n_mels + m]; }
    double frame_rate() const {
        return static_cast<double>(config.sample_rate) / static_cast<double>(config.hop);
    }
};

// HTK mel scale.
inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a, bool inverse = false) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw InvalidInputError("fft: size must be a nonzero power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

namespace detail {

inline std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * pi * static_cast<double>(i) / static_cast<double>(n));
    return w;
}

// Reflect-padded sample access for centered framing.
inline double reflect_at(const std::vector<float>& x, std::ptrdiff_t i) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    if (i < 0 || i >= n) return 0.0;
    return static_cast<double>(x[static_cast<std::size_t>(i)]);
}

// Triangular mel filterbank, n_mels x n_bins, peak 1 per filter.
inline std::vector<double> mel_filterbank(const MelConfig& cfg) {
    const std::size_t n_bins = cfg.fft_size / 2 + 1;
    std::vector<double> bank(cfg.n_mels * n_bins, 0.0);
    const double mel_lo = hz_to_mel(cfg.fmin);
    const double mel_hi = hz_to_mel(cfg.fmax);
    std::vector<double> hz(cfg.n_mels + 2);
    for (std::size_t i = 0; i < hz.size(); ++i)
        hz[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                       static_cast<double>(cfg.n_mels + 1));
    const double bin_hz = static_cast<double>(cfg.sample_rate) / static_cast<double>(cfg.fft_size);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
        const double lo = hz[m], mid = hz[m + 1], hi = hz[m + 2];
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double f = bin_hz * static_cast<double>(k);
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                w = (hi - f) / (hi - mid);
            bank[m * n_bins + k] = w;
        }
    }
    return bank;
}

// Solve (B B^T + ridge I) y = rhs by Cholesky; used for the filterbank
// pseudo-inverse in mel inversion.
class SymmetricSolver {
public:
    SymmetricSolver(const std::vector<double>& bank, std::size_t n_mels, std::size_t n_bins)
        : n_(n_mels), chol_(n_mels * n_mels, 0.0) {
        std::vector<double> gram(n_ * n_, 0.0);
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = i; j < n_; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < n_bins; ++k)
                    s += bank[i * n_bins + k] * bank[j * n_bins + k];
                gram[i * n_ + j] = gram[j * n_ + i] = s;
            }
        for (std::size_t i = 0; i < n_; ++i) gram[i * n_ + i] += 1e-10;
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double s = gram[i * n_ + j];
                for (std::size_t k = 0; k < j; ++k) s -= chol_[i * n_ + k] * chol_[j * n_ + k];
                if (i == j) {
                    if (s <= 0.0) throw NumericalError("mel inversion: filterbank gram not SPD");
                    chol_[i * n_ + i] = std::sqrt(s);
                } else {
                    chol_[i * n_ + j] = s / chol_[j * n_ + j];
                }
            }
        }
    }

    void solve(std::vector<double>& rhs) const {
        for (std::size_t i = 0; i < n_; ++i) {
            double s = rhs[i];
            for (std::size_t k = 0; k < i; ++k) s -= chol_[i * n_ + k] * rhs[k];
            rhs[i] = s / chol_[i * n_ + i];
        }
        for (std::size_t i = n_; i-- > 0;) {
            double s = rhs[i];
            for (std::size_t k = i + 1; k < n_; ++k) s -= chol_[k * n_ + i] * rhs[k];
            rhs[i] = s / chol_[i * n_ + i];
        }
    }

private:
    std::size_t n_;
    std::vector<double> chol_;
};

} // namespace detail

/// Centered STFT power spectrum, frames x (fft_size/2 + 1).
/// Frame count is 1 + floor(len / hop).
inline std::vector<double> stft_power(const AudioBuffer& audio, const MelConfig& cfg,
                                      std::size_t* out_frames = nullptr) {
    cfg.validate();
    if (audio.sample_rate != cfg.sample_rate)
        throw InvalidInputError("stft: audio sample rate does not match mel config");
    if (audio.samples.size() < cfg.fft_size)
        throw InvalidInputError("stft: audio shorter than one FFT frame");
    const std::size_t n_frames = 1 + audio.samples.size() / cfg.hop;
    const std::size_t n_bins = cfg.fft_size / 2 + 1;
    const std::vector<double> window = detail::hann_window(cfg.fft_size);
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(cfg.fft_size / 2);

    std::vector<double> power(n_frames * n_bins, 0.0);
    std::vector<std::complex<double>> buf(cfg.fft_size);
    for (std::size_t t = 0; t < n_frames; ++t) {
        const std::ptrdiff_t center = static_cast<std::ptrdiff_t>(t * cfg.hop);
        for (std::size_t i = 0; i < cfg.fft_size; ++i)
            buf[i] = window[i] *
                     detail::reflect_at(audio.samples,
                                        center - half + static_cast<std::ptrdiff_t>(i));
        fft(buf);
        for (std::size_t k = 0; k < n_bins; ++k) power[t * n_bins + k] = std::norm(buf[k]);
    }
    if (out_frames != nullptr) *out_frames = n_frames;
    return power;
}

/// Log-mel spectrogram: Hann STFT power, triangular HTK filterbank, natural
/// log with floor.
inline MelSpectrogram log_mel(const AudioBuffer& audio, const MelConfig& cfg) {
    std::size_t n_frames = 0;
    const std::vector<double> power = stft_power(audio, cfg, &n_frames);
    const std::size_t n_bins = cfg.fft_size / 2 + 1;
    const std::vector<double> bank = detail::mel_filterbank(cfg);

    MelSpectrogram mel;
    mel.frames = n_frames;
    mel.n_mels = cfg.n_mels;
    mel.config = cfg;
    mel.values.assign(n_frames * cfg.n_mels, 0.0);
    for (std::size_t t = 0; t < n_frames; ++t)
        for (std::size_t m = 0; m < cfg.n_mels; ++m) {
            double e = 0.0;
            const double* row = bank.data() + m * n_bins;
            const double* p = power.data() + t * n_bins;
            for (std::size_t k = 0; k < n_bins; ++k) e += row[k] * p[k];
            mel.values[t * cfg.n_mels + m] = std::log(std::max(e, cfg.log_floor));
        }
    return mel;
}

namespace detail {

// Weighted overlap-add inverse STFT over the padded domain.
inline std::vector<double> istft_frames(const std::vector<std::complex<double>>& spec,
                                        std::size_t n_frames, const MelConfig& cfg) {
    const std::size_t n_bins = cfg.fft_size / 2 + 1;
    const std::vector<double> window = hann_window(cfg.fft_size);
    const std::size_t out_len = (n_frames - 1) * cfg.hop + cfg.fft_size;
    std::vector<double> acc(out_len, 0.0), norm(out_len, 0.0);
    std::vector<std::complex<double>> buf(cfg.fft_size);
    for (std::size_t t = 0; t < n_frames; ++t) {
        for (std::size_t k = 0; k < n_bins; ++k) buf[k] = spec[t * n_bins + k];
        for (std::size_t k = n_bins; k < cfg.fft_size; ++k)
            buf[k] = std::conj(spec[t * n_bins + (cfg.fft_size - k)]);
        fft(buf, true);
        for (std::size_t i = 0; i < cfg.fft_size; ++i) {
            acc[t * cfg.hop + i] += window[i] * buf[i].real();
            norm[t * cfg.hop + i] += window[i] * window[i];
        }
    }
    for (std::size_t i = 0; i < out_len; ++i) acc[i] /= std::max(norm[i], 1e-12);
    return acc;
}

} // namespace detail

/// Griffin-Lim phase recovery from a log-mel spectrogram. The filterbank is
/// pseudo-inverted to a linear power spectrum, then phase is estimated with
/// the classic magnitude-projection iteration starting from zero phase.
/// An all-floor input returns silence. Output peak is reduced to 0.95 when it
/// would exceed it; quiet audio is never amplified.
inline AudioBuffer griffin_lim_vocode(const MelSpectrogram& mel, int iterations) {
    if (iterations < 1) throw InvalidInputError("griffin_lim: iterations must be >= 1");
    const MelConfig& cfg = mel.config;
    const std::size_t n_bins = cfg.fft_size / 2 + 1;
    const std::size_t n_frames = mel.frames;
    if (n_frames == 0) throw InvalidInputError("griffin_lim: empty mel");

    AudioBuffer out;
    out.sample_rate = cfg.sample_rate;
    const std::size_t out_len = (n_frames - 1) * cfg.hop;

    const double floor_log = std::log(cfg.log_floor);
    bool all_floor = true;
    for (double v : mel.values)
        if (v > floor_log + 1e-9) {
            all_floor = false;
            break;
        }
    if (all_floor || out_len == 0) {
        out.samples.assign(out_len, 0.0f);
        return out;
    }

    const std::vector<double> bank = detail::mel_filterbank(cfg);
    detail::SymmetricSolver solver(bank, cfg.n_mels, n_bins);

    // Linear magnitude targets via the right pseudo-inverse B^T (B B^T)^-1.
    std::vector<double> mag(n_frames * n_bins, 0.0);
    std::vector<double> y(cfg.n_mels);
    for (std::size_t t = 0; t < n_frames; ++t) {
        for (std::size_t m = 0; m < cfg.n_mels; ++m) y[m] = std::exp(mel.at(t, m));
        solver.solve(y);
        for (std::size_t k = 0; k < n_bins; ++k) {
            double p = 0.0;
            for (std::size_t m = 0; m < cfg.n_mels; ++m) p += bank[m * n_bins + k] * y[m];
            mag[t * n_bins + k] = std::sqrt(std::max(p, 0.0));
        }
    }

    std::vector<std::complex<double>> spec(n_frames * n_bins);
    for (std::size_t i = 0; i < spec.size(); ++i) spec[i] = {mag[i], 0.0};

    const std::vector<double> window = detail::hann_window(cfg.fft_size);
    std::vector<std::complex<double>> buf(cfg.fft_size);
    for (int it = 0; it < iterations; ++it) {
        const std::vector<double> x = detail::istft_frames(spec, n_frames, cfg);
        for (std::size_t t = 0; t < n_frames; ++t) {
            for (std::size_t i = 0; i < cfg.fft_size; ++i)
                buf[i] = window[i] * x[t * cfg.hop + i];
            fft(buf);
            for (std::size_t k = 0; k < n_bins; ++k) {
                const double a = std::abs(buf[k]);
                spec[t * n_bins + k] =
                    a > 1e-12 ? buf[k] * (mag[t * n_bins + k] / a)
                              : std::complex<double>(mag[t * n_bins + k], 0.0);
            }
        }
    }

    const std::vector<double> x = detail::istft_frames(spec, n_frames, cfg);
    const std::size_t pad = cfg.fft_size / 2;
    out.samples.resize(out_len);
    double peak = 0.0;
    for (std::size_t i = 0; i < out_len; ++i) peak = std::max(peak, std::abs(x[pad + i]));
    const double gain = peak > 0.95 ? 0.95 / peak : 1.0;
    for (std::size_t i = 0; i < out_len; ++i)
        out.samples[i] = static_cast<float>(x[pad + i] * gain);
    return out;
}

/// Band-limited sample-rate conversion with a Blackman-windowed sinc kernel.
/// Output length is round(len * target / source); equal rates return a copy.
inline AudioBuffer resample(const AudioBuffer& audio, int target_rate) {
    if (target_rate <= 0) throw InvalidInputError("resample: target rate must be positive");
    if (target_rate == audio.sample_rate) return audio;

    AudioBuffer out;
    out.sample_rate = target_rate;
    const double ratio = static_cast<double>(target_rate) / audio.sample_rate;
    const std::size_t out_len = static_cast<std::size_t>(
        std::llround(static_cast<double>(audio.samples.size()) * ratio));
    out.samples.assign(out_len, 0.0f);
    if (audio.samples.empty()) return out;

    const double scale = std::min(1.0, ratio);   // anti-alias for downsampling
    const double fc = 0.5 * scale * 0.95;        // cutoff in cycles per input sample
    const int taps_per_side = 32;
    const double half_width = taps_per_side / scale;

    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(audio.samples.size());
    for (std::size_t j = 0; j < out_len; ++j) {
        const double center = static_cast<double>(j) / ratio;
        const std::ptrdiff_t lo =
            static_cast<std::ptrdiff_t>(std::ceil(center - half_width));
        const std::ptrdiff_t hi =
            static_cast<std::ptrdiff_t>(std::floor(center + half_width));
        double acc = 0.0, ksum = 0.0;
        for (std::ptrdiff_t m = lo; m <= hi; ++m) {
            const double x = static_cast<double>(m) - center;
            const double u = 2.0 * fc * x;
            const double sinc = u == 0.0 ? 1.0 : std::sin(pi * u) / (pi * u);
            const double wx = x / half_width;
            const double win = 0.42 + 0.5 * std::cos(pi * wx) + 0.08 * std::cos(2.0 * pi * wx);
            const double k = 2.0 * fc * sinc * win;
            ksum += k;
            if (m >= 0 && m < n) acc += k * static_cast<double>(audio.samples[static_cast<std::size_t>(m)]);
        }
        out.samples[j] = static_cast<float>(ksum != 0.0 ? acc / ksum : 0.0);
    }
    return out;
}

/// Multiplies every sample by 10^(gain_db/20). Saturation is the mixer's job.
inline AudioBuffer apply_gain_db(const AudioBuffer& audio, double gain_db) {
    AudioBuffer out = audio;
    const float g = static_cast<float>(std::pow(10.0, gain_db / 20.0));
    for (float& s : out.samples) s *= g;
    return out;
}

inline double rms(const AudioBuffer& audio) {
    if (audio.samples.empty()) return 0.0;
    double s = 0.0;
    for (float v : audio.samples) s += static_cast<double>(v) * v;
    return std::sqrt(s / static_cast<double>(audio.samples.size()));
}

inline double peak_abs(const AudioBuffer& audio) {
    double p = 0.0;
    for (float v : audio.samples) p = std::max(p, std::abs(static_cast<double>(v)));
    return p;
}

} // namespace nhwc

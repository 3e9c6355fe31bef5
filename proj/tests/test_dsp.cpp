#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <filesystem>
#include <vector>

#include "nhwc/dsp.hpp"
#include "nhwc/wav.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using nhwc::AudioBuffer;
using nhwc::InvalidInputError;
using nhwc::MelConfig;
using nhwc::MelSpectrogram;
using nhwc::Rng;
using testsupport::make_sine;

TEST_CASE("mel scale anchors") {
    REQUIRE(nhwc::hz_to_mel(0.0) == 0.0);
    REQUIRE(nhwc::hz_to_mel(700.0) == Catch::Approx(781.17).margin(0.01));
    REQUIRE(nhwc::mel_to_hz(nhwc::hz_to_mel(3456.0)) == Catch::Approx(3456.0).margin(1e-6));
}

TEST_CASE("log_mel basics") {
    MelConfig cfg;

    SECTION("silence hits the log floor everywhere") {
        AudioBuffer silence;
        silence.sample_rate = 16000;
        silence.samples.assign(16000, 0.0f);
        const MelSpectrogram mel = nhwc::log_mel(silence, cfg);
        REQUIRE(mel.frames == 1 + 16000 / cfg.hop);
        REQUIRE(mel.n_mels == cfg.n_mels);
        for (double v : mel.values) REQUIRE(v == Catch::Approx(-11.5129).margin(1e-3));
    }

    SECTION("frame count is 1 + floor(len/hop)") {
        for (std::size_t len : {1024u, 1500u, 4096u, 10000u}) {
            AudioBuffer a;
            a.sample_rate = 16000;
            a.samples.assign(len, 0.1f);
            REQUIRE(nhwc::log_mel(a, cfg).frames == 1 + len / cfg.hop);
        }
    }

    SECTION("rate mismatch and short input are invalid") {
        AudioBuffer a = make_sine(440.0, 1.0, 8000);
        REQUIRE_THROWS_AS(nhwc::log_mel(a, cfg), InvalidInputError);
        AudioBuffer b;
        b.sample_rate = 16000;
        b.samples.assign(512, 0.0f); // shorter than fft_size
        REQUIRE_THROWS_AS(nhwc::log_mel(b, cfg), InvalidInputError);
    }

    SECTION("a 440 Hz tone concentrates energy near 440 Hz") {
        const MelSpectrogram mel = nhwc::log_mel(make_sine(440.0, 1.0, 16000), cfg);
        const std::size_t mid = mel.frames / 2;
        std::size_t best = 0;
        for (std::size_t m = 1; m < mel.n_mels; ++m)
            if (mel.at(mid, m) > mel.at(mid, best)) best = m;
        // Center frequency of the winning filter should be near 440 Hz.
        const double mel_lo = nhwc::hz_to_mel(cfg.fmin), mel_hi = nhwc::hz_to_mel(cfg.fmax);
        const double f_center = nhwc::mel_to_hz(
            mel_lo + (mel_hi - mel_lo) * static_cast<double>(best + 1) / (cfg.n_mels + 1));
        REQUIRE(std::abs(f_center - 440.0) < 120.0);
    }
}

TEST_CASE("log_mel is shift-covariant by one hop") {
    MelConfig cfg;
    Rng rng(5);
    AudioBuffer a = testsupport::make_noise(0.7, 16000, 42);
    AudioBuffer delayed;
    delayed.sample_rate = 16000;
    delayed.samples.assign(cfg.hop, 0.0f);
    delayed.samples.insert(delayed.samples.end(), a.samples.begin(), a.samples.end());

    const MelSpectrogram base = nhwc::log_mel(a, cfg);
    const MelSpectrogram shifted = nhwc::log_mel(delayed, cfg);
    REQUIRE(shifted.frames == base.frames + 1);
    // Interior frames (clear of the reflect-padded edges) match exactly.
    for (std::size_t t = 3; t + 3 < base.frames; ++t)
        for (std::size_t m = 0; m < cfg.n_mels; ++m)
            REQUIRE(shifted.at(t + 1, m) == Catch::Approx(base.at(t, m)).margin(1e-6));
}

TEST_CASE("STFT power satisfies Parseval per frame on white noise") {
    MelConfig cfg;
    AudioBuffer noise = testsupport::make_noise(0.5, 16000, 7);
    std::size_t frames = 0;
    const std::vector<double> power = nhwc::stft_power(noise, cfg, &frames);
    const std::size_t n_bins = cfg.fft_size / 2 + 1;

    // Reconstruct the windowed frame energy independently.
    std::vector<double> window(cfg.fft_size);
    for (std::size_t i = 0; i < cfg.fft_size; ++i)
        window[i] = 0.5 - 0.5 * std::cos(2.0 * nhwc::pi * i / static_cast<double>(cfg.fft_size));

    for (std::size_t t = 2; t + 2 < frames; ++t) {
        double frame_energy = 0.0;
        const std::ptrdiff_t center = static_cast<std::ptrdiff_t>(t * cfg.hop);
        for (std::size_t i = 0; i < cfg.fft_size; ++i) {
            const std::ptrdiff_t idx =
                center - static_cast<std::ptrdiff_t>(cfg.fft_size / 2) + static_cast<std::ptrdiff_t>(i);
            double s = 0.0;
            if (idx >= 0 && idx < static_cast<std::ptrdiff_t>(noise.samples.size()))
                s = noise.samples[static_cast<std::size_t>(idx)];
            frame_energy += window[i] * s * window[i] * s;
        }
        // One-sided power: double everything except DC and Nyquist.
        double spec_power = power[t * n_bins] + power[t * n_bins + n_bins - 1];
        for (std::size_t k = 1; k + 1 < n_bins; ++k) spec_power += 2.0 * power[t * n_bins + k];
        const double expected = frame_energy * static_cast<double>(cfg.fft_size);
        REQUIRE(spec_power == Catch::Approx(expected).epsilon(0.01));
    }
}

TEST_CASE("griffin_lim reconstructs a sine and handles silence") {
    MelConfig cfg;

    SECTION("440 Hz round trip lands within one FFT bin") {
        const AudioBuffer input = make_sine(440.0, 1.0, 16000, 0.8);
        const MelSpectrogram mel = nhwc::log_mel(input, cfg);
        const AudioBuffer recon = nhwc::griffin_lim_vocode(mel, 32);
        REQUIRE(recon.sample_rate == 16000);
        REQUIRE(recon.samples.size() == (mel.frames - 1) * cfg.hop);
        const double peak_hz = oracles::dominant_frequency_hz(recon, 1024);
        const double bin_hz = 16000.0 / 1024.0;
        REQUIRE(std::abs(peak_hz - 440.0) <= bin_hz + 1e-9);
        REQUIRE(nhwc::peak_abs(recon) <= 0.95 + 1e-6);
    }

    SECTION("all-floor mel returns silence, not an error") {
        MelSpectrogram mel;
        mel.frames = 40;
        mel.n_mels = cfg.n_mels;
        mel.config = cfg;
        mel.values.assign(mel.frames * mel.n_mels, std::log(cfg.log_floor));
        const AudioBuffer out = nhwc::griffin_lim_vocode(mel, 16);
        REQUIRE(nhwc::rms(out) < 1e-4);
    }

    SECTION("iterations are non-increasing in spectral-convergence error") {
        const AudioBuffer input = testsupport::synth_utterance(testsupport::speaker_a(), 3, 0.6);
        const MelSpectrogram mel = nhwc::log_mel(input, cfg);

        auto residual = [&](int iters) {
            const AudioBuffer recon = nhwc::griffin_lim_vocode(mel, iters);
            // Griffin-Lim residual: distance between the reconstruction's mel
            // and the target mel, in linear magnitude.
            AudioBuffer padded = recon;
            padded.samples.resize(input.samples.size(), 0.0f);
            const MelSpectrogram got = nhwc::log_mel(padded, cfg);
            double err = 0.0;
            const std::size_t frames = std::min(got.frames, mel.frames);
            for (std::size_t t = 0; t < frames; ++t)
                for (std::size_t m = 0; m < mel.n_mels; ++m) {
                    const double d = std::sqrt(std::exp(got.at(t, m))) -
                                     std::sqrt(std::exp(mel.at(t, m)));
                    err += d * d;
                }
            return err;
        };
        REQUIRE(residual(64) <= residual(32) * 1.0001);
    }

    SECTION("iterations must be positive") {
        const MelSpectrogram mel = nhwc::log_mel(make_sine(440.0, 0.2, 16000), cfg);
        REQUIRE_THROWS_AS(nhwc::griffin_lim_vocode(mel, 0), InvalidInputError);
    }
}

TEST_CASE("resample") {
    SECTION("equal rates return a bitwise-identical copy") {
        const AudioBuffer a = testsupport::make_noise(0.3, 16000, 11);
        const AudioBuffer b = nhwc::resample(a, 16000);
        REQUIRE(a.samples == b.samples);
    }

    SECTION("16k -> 48k sine correlates with the analytic 48k sine") {
        const AudioBuffer in = make_sine(440.0, 1.0, 16000);
        const AudioBuffer out = nhwc::resample(in, 48000);
        REQUIRE(out.samples.size() == 48000);
        REQUIRE(out.sample_rate == 48000);
        const AudioBuffer analytic = make_sine(440.0, 1.0, 48000);
        REQUIRE(oracles::best_correlation(analytic.samples, out.samples) >= 0.999);
    }

    SECTION("content above the new Nyquist is rejected") {
        const AudioBuffer in = make_sine(5000.0, 1.0, 16000, 0.9);
        const AudioBuffer out = nhwc::resample(in, 8000);
        REQUIRE(out.samples.size() == 8000);
        REQUIRE(nhwc::rms(out) < 0.05);
    }

    SECTION("output length is round(len * target / source)") {
        AudioBuffer in;
        in.sample_rate = 16000;
        in.samples.assign(1001, 0.25f);
        REQUIRE(nhwc::resample(in, 48000).samples.size() == 3003);
        REQUIRE(nhwc::resample(in, 8000).samples.size() ==
                static_cast<std::size_t>(std::llround(1001.0 * 8000 / 16000)));
    }

    SECTION("resample is linear") {
        const AudioBuffer a = testsupport::make_noise(0.2, 16000, 21, 0.4);
        AudioBuffer b = testsupport::make_noise(0.2, 16000, 22, 0.4);
        b.samples.resize(a.samples.size(), 0.0f);
        AudioBuffer sum = a;
        for (std::size_t i = 0; i < sum.samples.size(); ++i) sum.samples[i] += b.samples[i];

        const auto ra = nhwc::resample(a, 22050);
        const auto rb = nhwc::resample(b, 22050);
        const auto rsum = nhwc::resample(sum, 22050);
        REQUIRE(ra.samples.size() == rsum.samples.size());
        for (std::size_t i = 0; i < rsum.samples.size(); ++i)
            REQUIRE(static_cast<double>(rsum.samples[i]) ==
                    Catch::Approx(static_cast<double>(ra.samples[i]) + rb.samples[i])
                        .margin(1e-6));
    }

    SECTION("invalid target rate") {
        REQUIRE_THROWS_AS(nhwc::resample(make_sine(440.0, 0.1, 16000), 0), InvalidInputError);
    }
}

TEST_CASE("gain and rms") {
    SECTION("0 dB is the identity") {
        const AudioBuffer a = testsupport::make_noise(0.1, 16000, 31);
        const AudioBuffer b = nhwc::apply_gain_db(a, 0.0);
        REQUIRE(a.samples == b.samples);
    }

    SECTION("-10 dB scales peak to 0.316228") {
        const AudioBuffer a = make_sine(1000.0, 0.25, 16000, 1.0);
        const AudioBuffer b = nhwc::apply_gain_db(a, -10.0);
        REQUIRE(nhwc::peak_abs(b) == Catch::Approx(0.316228).margin(2e-6));
    }

    SECTION("rms of a constant 0.5 signal is 0.5") {
        AudioBuffer a;
        a.sample_rate = 16000;
        a.samples.assign(4000, 0.5f);
        REQUIRE(nhwc::rms(a) == Catch::Approx(0.5).margin(1e-9));
    }
}

TEST_CASE("wav round trips and validation") {
    const auto dir = testsupport::fresh_tmp_dir("wav");

    SECTION("float32 round trip is bitwise") {
        const AudioBuffer a = testsupport::make_noise(0.2, 48000, 41);
        const std::string path = (dir / "f32.wav").string();
        nhwc::write_wav(path, a, nhwc::WavFormat::float32);
        const AudioBuffer b = nhwc::read_wav(path);
        REQUIRE(b.sample_rate == 48000);
        REQUIRE(a.samples == b.samples);
    }

    SECTION("pcm16 round trip is within quantization error") {
        const AudioBuffer a = make_sine(440.0, 0.1, 16000, 0.7);
        const std::string path = (dir / "pcm.wav").string();
        nhwc::write_wav(path, a, nhwc::WavFormat::pcm16);
        const AudioBuffer b = nhwc::read_wav(path);
        REQUIRE(a.samples.size() == b.samples.size());
        for (std::size_t i = 0; i < a.samples.size(); ++i)
            REQUIRE(b.samples[i] == Catch::Approx(a.samples[i]).margin(1.0 / 32000.0));
    }

    SECTION("multi-channel input is rejected") {
        // Hand-build a stereo header.
        const std::string path = (dir / "stereo.wav").string();
        std::string bytes;
        bytes += "RIFF";
        const auto put_u32 = [&](std::uint32_t v) {
            for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        };
        const auto put_u16 = [&](std::uint16_t v) {
            for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        };
        put_u32(36);
        bytes += "WAVEfmt ";
        put_u32(16);
        put_u16(1);
        put_u16(2); // stereo
        put_u32(16000);
        put_u32(16000 * 4);
        put_u16(4);
        put_u16(16);
        bytes += "data";
        put_u32(0);
        std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        REQUIRE_THROWS_AS(nhwc::read_wav(path), InvalidInputError);
    }

    SECTION("garbage is rejected") {
        const std::string path = (dir / "garbage.wav").string();
        std::ofstream(path, std::ios::binary) << "this is not a wav file at all............";
        REQUIRE_THROWS_AS(nhwc::read_wav(path), InvalidInputError);
        REQUIRE_THROWS_AS(nhwc::read_wav((dir / "missing.wav").string()), nhwc::IoError);
    }

    std::filesystem::remove_all(dir);
}

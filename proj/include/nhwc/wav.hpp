#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nhwc/dsp.hpp"
#include "nhwc/error.hpp"

namespace nhwc {

enum class WavFormat { pcm16, float32 };

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

} // namespace detail

/// Writes a mono RIFF/WAVE file, 16-bit signed PCM or 32-bit IEEE float,
/// little-endian.
inline void write_wav(const std::string& path, const AudioBuffer& audio,
                      WavFormat format = WavFormat::pcm16) {
    const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : 32;
    const std::uint16_t fmt_tag = format == WavFormat::pcm16 ? 1 : 3;
    const std::uint32_t bytes_per_sample = bits / 8;
    const std::uint32_t data_size =
        static_cast<std::uint32_t>(audio.samples.size()) * bytes_per_sample;

    std::string out;
    out.reserve(44 + data_size);
    out += "RIFF";
    detail::put_u32(out, 36 + data_size);
    out += "WAVEfmt ";
    detail::put_u32(out, 16);
    detail::put_u16(out, fmt_tag);
    detail::put_u16(out, 1); // mono
    detail::put_u32(out, static_cast<std::uint32_t>(audio.sample_rate));
    detail::put_u32(out, static_cast<std::uint32_t>(audio.sample_rate) * bytes_per_sample);
    detail::put_u16(out, static_cast<std::uint16_t>(bytes_per_sample));
    detail::put_u16(out, bits);
    out += "data";
    detail::put_u32(out, data_size);

    if (format == WavFormat::pcm16) {
        for (float s : audio.samples) {
            const float c = std::clamp(s, -1.0f, 1.0f);
            const int v = static_cast<int>(std::lround(c * 32767.0f));
            detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
        }
    } else {
        for (float s : audio.samples) {
            std::uint32_t bitsrep;
            std::memcpy(&bitsrep, &s, 4);
            detail::put_u32(out, bitsrep);
        }
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("wav: cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("wav: write failed: " + path);
}

/// Reads a mono RIFF/WAVE file. Accepts 16-bit PCM and 32-bit float;
/// multi-channel or malformed files are rejected.
inline AudioBuffer read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("wav: cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 44) throw InvalidInputError("wav: file too short: " + path);
    if (std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw InvalidInputError("wav: not a RIFF/WAVE file: " + path);

    std::uint16_t fmt_tag = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    bool have_fmt = false;
    const std::uint8_t* data = nullptr;
    std::uint32_t data_size = 0;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t size = detail::get_u32(bytes.data() + pos + 4);
        if (pos + 8 + size > bytes.size())
            throw InvalidInputError("wav: truncated chunk: " + path);
        const std::uint8_t* body = bytes.data() + pos + 8;
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (size < 16) throw InvalidInputError("wav: fmt chunk too small: " + path);
            fmt_tag = detail::get_u16(body);
            channels = detail::get_u16(body + 2);
            sample_rate = detail::get_u32(body + 4);
            bits = detail::get_u16(body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = body;
            data_size = size;
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    if (!have_fmt || data == nullptr) throw InvalidInputError("wav: missing fmt/data chunk: " + path);
    if (channels != 1)
        throw InvalidInputError("wav: only mono input is supported (got " +
                                std::to_string(channels) + " channels): " + path);
    if (sample_rate == 0) throw InvalidInputError("wav: zero sample rate: " + path);

    AudioBuffer audio;
    audio.sample_rate = static_cast<int>(sample_rate);
    if (fmt_tag == 1 && bits == 16) {
        const std::size_t n = data_size / 2;
        audio.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::int16_t v = static_cast<std::int16_t>(detail::get_u16(data + 2 * i));
            audio.samples[i] = static_cast<float>(v) / 32767.0f;
        }
    } else if (fmt_tag == 3 && bits == 32) {
        const std::size_t n = data_size / 4;
        audio.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t b = detail::get_u32(data + 4 * i);
            float s;
            std::memcpy(&s, &b, 4);
            audio.samples[i] = s;
        }
    } else {
        throw InvalidInputError("wav: unsupported format tag " + std::to_string(fmt_tag) + "/" +
                                std::to_string(bits) + " bits: " + path);
    }
    return audio;
}

} // namespace nhwc

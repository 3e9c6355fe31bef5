#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nhwc/codec.hpp"
#include "nhwc/dsp.hpp"
#include "nhwc/error.hpp"
#include "nhwc/log.hpp"

namespace nhwc {

struct EditCosts {
    std::size_t insertion = 1;
    std::size_t deletion = 1;
    std::size_t substitution = 1;

    void validate() const {
        if (insertion == 0 || deletion == 0 || substitution == 0)
            throw InvalidInputError("edit costs must be positive");
    }
};

/// Decodes UTF-8 into Unicode scalar values. Invalid bytes map to a private
/// per-byte sentinel so comparison stays total and deterministic.
inline std::vector<std::uint32_t> utf8_codepoints(const std::string& text) {
    std::vector<std::uint32_t> out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char b0 = static_cast<unsigned char>(text[i]);
        std::size_t len = 0;
        std::uint32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 >> 5) == 0x6) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 >> 4) == 0xE) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 >> 3) == 0x1E) {
            len = 4;
            cp = b0 & 0x07;
        }
        bool valid = len > 0 && i + len <= text.size();
        if (valid)
            for (std::size_t k = 1; k < len; ++k) {
                const unsigned char bk = static_cast<unsigned char>(text[i + k]);
                if ((bk >> 6) != 0x2) {
                    valid = false;
                    break;
                }
                cp = (cp << 6) | (bk & 0x3F);
            }
        if (!valid) {
            out.push_back(0x110000u + b0); // out-of-range sentinel, one per byte
            ++i;
        } else {
            out.push_back(cp);
            i += len;
        }
    }
    return out;
}

/// Levenshtein distance over Unicode scalar values, classic two-row DP.
inline std::size_t edit_distance(const std::string& a, const std::string& b,
                                 const EditCosts& costs = {}) {
    costs.validate();
    const std::vector<std::uint32_t> sa = utf8_codepoints(a);
    const std::vector<std::uint32_t> sb = utf8_codepoints(b);
    const std::size_t n = sa.size(), m = sb.size();
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = j * costs.insertion;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i * costs.deletion;
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t sub =
                prev[j - 1] + (sa[i - 1] == sb[j - 1] ? 0 : costs.substitution);
            cur[j] = std::min({prev[j] + costs.deletion, cur[j - 1] + costs.insertion, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

/// Character error rate: edit distance divided by reference length in
/// characters. May exceed 1.0 for long hypotheses.
inline double cer(const std::string& reference, const std::string& hypothesis) {
    const std::size_t ref_chars = utf8_codepoints(reference).size();
    if (ref_chars == 0) throw InvalidInputError("cer: reference must be non-empty");
    return static_cast<double>(edit_distance(reference, hypothesis)) /
           static_cast<double>(ref_chars);
}

/// cos(a, b) = <a,b> / (|a||b|); zero-norm inputs give 0 with a warning.
template <class Real>
double cosine_similarity(const std::vector<Real>& a, const std::vector<Real>& b) {
    if (a.size() != b.size()) throw InvalidInputError("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a[i]);
        const double y = static_cast<double>(b[i]);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) {
        log_warn("cosine: zero-norm embedding, returning 0");
        return 0.0;
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Speaker-embedding cosine similarity. Both utterances are embedded with
/// the codec's reference encoder over the full utterance (no random clip).
template <class Real>
double secs(const AudioBuffer& audio_a, const AudioBuffer& audio_b,
            const CodecParams<Real>& codec, const MelConfig& mel_cfg) {
    auto check = [&](const AudioBuffer& a, const char* which) {
        if (a.sample_rate != mel_cfg.sample_rate)
            throw InvalidInputError(std::string("secs: ") + which + " must be at " +
                                    std::to_string(mel_cfg.sample_rate) + " Hz");
        if (a.duration_s() < 0.5)
            throw InvalidInputError(std::string("secs: ") + which +
                                    " must be at least 0.5 s long");
    };
    check(audio_a, "first input");
    check(audio_b, "second input");

    const auto ea = ref_embedding_full(log_mel(audio_a, mel_cfg), codec);
    const auto eb = ref_embedding_full(log_mel(audio_b, mel_cfg), codec);
    return cosine_similarity(ea.values, eb.values);
}

} // namespace nhwc

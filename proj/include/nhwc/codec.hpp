#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "nhwc/dsp.hpp"
#include "nhwc/error.hpp"
#include "nhwc/optimizer.hpp"
#include "nhwc/rng.hpp"
#include "nhwc/tensor.hpp"

namespace nhwc {

struct CodecConfig {
    std::size_t n_mels = 80;
    std::size_t codebook_size = 256; // K
    std::size_t latent_dim = 128;    // D
    std::size_t ref_dim = 128;
    std::size_t hidden = 256;
    std::size_t downsample_factor = 4; // two stride-2 stages
    double beta = 0.25;                // commitment weight
    double ema_decay = 0.99;
    std::size_t clip_frames = 64;

    void validate() const {
        if (downsample_factor != 4)
            throw InvalidInputError("codec: downsample_factor must be 4 (two stride-2 stages)");
        if (codebook_size == 0 || latent_dim == 0 || ref_dim == 0 || hidden == 0 || n_mels == 0)
            throw InvalidInputError("codec: all dimensions must be positive");
    }
};

/// Discrete pronunciation-content sequence; one id per downsample_factor
/// mel frames.
struct SpeechTokens {
    std::vector<int> ids;
    int downsample_factor = 4;
};

/// Time-invariant utterance embedding (timbre/environment), mean-pooled over
/// a mel clip.
template <class Real>
struct ReferenceEmbedding {
    std::vector<Real> values;
    std::size_t source_frames = 0;
};

template <class Real>
struct Codebook {
    Tensor<Real> entries;    // [K, D]
    Tensor<Real> ema_counts; // [K]
    Tensor<Real> ema_sums;   // [K, D]

    std::size_t size() const { return entries.rows(); }
    std::size_t dim() const { return entries.cols(); }
};

template <class Real>
struct CodecParams {
    CodecConfig config;

    Tensor<Real> enc_ln_g, enc_ln_b;
    Tensor<Real> enc_l1_w, enc_l1_b; // [4*n_mels, hidden]
    Tensor<Real> enc_l2_w, enc_l2_b; // [4*hidden, hidden]
    Tensor<Real> enc_l3_w, enc_l3_b; // [hidden, D]

    Tensor<Real> ref_ln_g, ref_ln_b;
    Tensor<Real> ref_l1_w, ref_l1_b; // [n_mels, hidden]
    Tensor<Real> ref_l2_w, ref_l2_b; // [hidden, ref_dim]

    Tensor<Real> dec_l1_w, dec_l1_b; // [D+ref_dim, hidden]
    Tensor<Real> dec_l2_w, dec_l2_b; // [hidden, hidden]
    Tensor<Real> dec_l3_w, dec_l3_b; // [hidden, 4*n_mels]

    Codebook<Real> codebook;

    static CodecParams init(const CodecConfig& cfg, Rng& rng) {
        cfg.validate();
        CodecParams p;
        p.config = cfg;
        auto lin = [&rng](std::size_t in, std::size_t out, Tensor<Real>& w, Tensor<Real>& b) {
            w = Tensor<Real>::randn({in, out}, rng, Real(1) / std::sqrt(static_cast<Real>(in)),
                                    true);
            b = Tensor<Real>::zeros({out}, true);
        };
        p.enc_ln_g = Tensor<Real>::full({4 * cfg.n_mels}, Real(1));
        p.enc_ln_g.set_requires_grad(true);
        p.enc_ln_b = Tensor<Real>::zeros({4 * cfg.n_mels}, true);
        lin(4 * cfg.n_mels, cfg.hidden, p.enc_l1_w, p.enc_l1_b);
        lin(4 * cfg.hidden, cfg.hidden, p.enc_l2_w, p.enc_l2_b);
        lin(cfg.hidden, cfg.latent_dim, p.enc_l3_w, p.enc_l3_b);

        p.ref_ln_g = Tensor<Real>::full({cfg.n_mels}, Real(1));
        p.ref_ln_g.set_requires_grad(true);
        p.ref_ln_b = Tensor<Real>::zeros({cfg.n_mels}, true);
        lin(cfg.n_mels, cfg.hidden, p.ref_l1_w, p.ref_l1_b);
        lin(cfg.hidden, cfg.ref_dim, p.ref_l2_w, p.ref_l2_b);

        lin(cfg.latent_dim + cfg.ref_dim, cfg.hidden, p.dec_l1_w, p.dec_l1_b);
        lin(cfg.hidden, cfg.hidden, p.dec_l2_w, p.dec_l2_b);
        lin(cfg.hidden, 4 * cfg.n_mels, p.dec_l3_w, p.dec_l3_b);

        p.codebook.entries =
            Tensor<Real>::randn({cfg.codebook_size, cfg.latent_dim}, rng, Real(1));
        p.codebook.ema_counts = Tensor<Real>::zeros({cfg.codebook_size});
        p.codebook.ema_sums = Tensor<Real>::zeros({cfg.codebook_size, cfg.latent_dim});
        return p;
    }

    /// Trainable tensors; the codebook learns by EMA, not by gradient.
    std::vector<Tensor<Real>*> parameters() {
        return {&enc_ln_g, &enc_ln_b, &enc_l1_w, &enc_l1_b, &enc_l2_w, &enc_l2_b,
                &enc_l3_w, &enc_l3_b, &ref_ln_g, &ref_ln_b, &ref_l1_w, &ref_l1_b,
                &ref_l2_w, &ref_l2_b, &dec_l1_w, &dec_l1_b, &dec_l2_w, &dec_l2_b,
                &dec_l3_w, &dec_l3_b};
    }

    std::vector<std::pair<std::string, Tensor<Real>*>> named_tensors() {
        return {{"codec.enc.ln.g", &enc_ln_g},     {"codec.enc.ln.b", &enc_ln_b},
                {"codec.enc.l1.w", &enc_l1_w},     {"codec.enc.l1.b", &enc_l1_b},
                {"codec.enc.l2.w", &enc_l2_w},     {"codec.enc.l2.b", &enc_l2_b},
                {"codec.enc.l3.w", &enc_l3_w},     {"codec.enc.l3.b", &enc_l3_b},
                {"codec.ref.ln.g", &ref_ln_g},     {"codec.ref.ln.b", &ref_ln_b},
                {"codec.ref.l1.w", &ref_l1_w},     {"codec.ref.l1.b", &ref_l1_b},
                {"codec.ref.l2.w", &ref_l2_w},     {"codec.ref.l2.b", &ref_l2_b},
                {"codec.dec.l1.w", &dec_l1_w},     {"codec.dec.l1.b", &dec_l1_b},
                {"codec.dec.l2.w", &dec_l2_w},     {"codec.dec.l2.b", &dec_l2_b},
                {"codec.dec.l3.w", &dec_l3_w},     {"codec.dec.l3.b", &dec_l3_b},
                {"codec.vq.codebook", &codebook.entries},
                {"codec.vq.ema_counts", &codebook.ema_counts},
                {"codec.vq.ema_sums", &codebook.ema_sums}};
    }
};

namespace detail {

template <class Real>
Tensor<Real> mel_to_tensor(const MelSpectrogram& mel) {
    Tensor<Real> t = Tensor<Real>::zeros({mel.frames, mel.n_mels});
    for (std::size_t i = 0; i < mel.values.size(); ++i)
        t.data()[i] = static_cast<Real>(mel.values[i]);
    return t;
}

// Pads the frame axis up to a multiple of the downsample factor using the
// mel log floor, so token length == ceil(frames / factor).
template <class Real>
Tensor<Real> pad_mel_tensor(Tape<Real>& tape, const Tensor<Real>& mel, std::size_t factor,
                            Real pad_value) {
    const std::size_t t = mel.rows();
    const std::size_t padded = (t + factor - 1) / factor * factor;
    if (padded == t) return mel;
    Tensor<Real> pad = Tensor<Real>::full({padded - t, mel.cols()}, pad_value);
    return tape.concat_rows({mel, pad});
}

template <class Real>
Tensor<Real> encoder_forward(Tape<Real>& tape, const CodecParams<Real>& p,
                             const Tensor<Real>& mel_padded, Real pad_value) {
    auto u1 = tape.unfold_time(mel_padded, 4, 2, 1, pad_value);
    auto h1 = tape.layer_norm(u1, p.enc_ln_g, p.enc_ln_b);
    h1 = tape.gelu(tape.add_row(tape.matmul(h1, p.enc_l1_w), p.enc_l1_b));
    auto u2 = tape.unfold_time(h1, 4, 2, 1, Real(0));
    auto h2 = tape.gelu(tape.add_row(tape.matmul(u2, p.enc_l2_w), p.enc_l2_b));
    return tape.add_row(tape.matmul(h2, p.enc_l3_w), p.enc_l3_b);
}

template <class Real>
Tensor<Real> ref_forward(Tape<Real>& tape, const CodecParams<Real>& p, const Tensor<Real>& clip) {
    auto h = tape.layer_norm(clip, p.ref_ln_g, p.ref_ln_b);
    h = tape.gelu(tape.add_row(tape.matmul(h, p.ref_l1_w), p.ref_l1_b));
    h = tape.add_row(tape.matmul(h, p.ref_l2_w), p.ref_l2_b);
    return tape.mean_rows(h);
}

// Repeat a vector as rows with gradient summed back.
template <class Real>
Tensor<Real> broadcast_ref(Tape<Real>& tape, const Tensor<Real>& e_ref, std::size_t steps) {
    std::vector<Tensor<Real>> rows(steps, tape.reshape(e_ref, {1, e_ref.numel()}));
    return tape.concat_rows(rows);
}

template <class Real>
Tensor<Real> decoder_forward(Tape<Real>& tape, const CodecParams<Real>& p,
                             const Tensor<Real>& z_q, const Tensor<Real>& e_ref) {
    const std::size_t steps = z_q.rows();
    Tensor<Real> ref_bc;
    if (e_ref.requires_grad()) {
        ref_bc = broadcast_ref(tape, e_ref, steps);
    } else {
        ref_bc = Tensor<Real>::zeros({steps, e_ref.numel()});
        for (std::size_t i = 0; i < steps; ++i)
            std::copy(e_ref.data(), e_ref.data() + e_ref.numel(),
                      ref_bc.data() + i * e_ref.numel());
    }
    auto h = tape.concat_cols({z_q, ref_bc});
    h = tape.gelu(tape.add_row(tape.matmul(h, p.dec_l1_w), p.dec_l1_b));
    h = tape.gelu(tape.add_row(tape.matmul(h, p.dec_l2_w), p.dec_l2_b));
    auto flat = tape.add_row(tape.matmul(h, p.dec_l3_w), p.dec_l3_b); // [steps, 4*n_mels]
    return tape.reshape(flat, {steps * 4, p.config.n_mels});
}

} // namespace detail

template <class Real>
struct QuantizeResult {
    std::vector<int> ids;
    Tensor<Real> z_q;        // straight-through: value = codewords, grad -> z
    Tensor<Real> codewords;  // raw selected codewords, no grad
    Tensor<Real> commitment; // scalar ||z - sg(z_q)||^2 mean
};

/// Nearest-codeword quantization. Ties resolve to the smallest index.
template <class Real>
QuantizeResult<Real> quantize(Tape<Real>& tape, const Tensor<Real>& z,
                              const Codebook<Real>& codebook) {
    if (z.cols() != codebook.dim())
        throw InvalidInputError("quantize: latent dim does not match codebook");
    const std::size_t t = z.rows(), d = z.cols(), k = codebook.size();
    QuantizeResult<Real> result;
    result.ids.resize(t);
    result.codewords = Tensor<Real>::zeros({t, d});
    for (std::size_t i = 0; i < t; ++i) {
        const Real* row = z.data() + i * d;
        std::size_t best = 0;
        Real best_dist = std::numeric_limits<Real>::max();
        for (std::size_t c = 0; c < k; ++c) {
            const Real* code = codebook.entries.data() + c * d;
            Real dist = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const Real diff = row[j] - code[j];
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = c;
            }
        }
        result.ids[i] = static_cast<int>(best);
        std::copy(codebook.entries.data() + best * d, codebook.entries.data() + (best + 1) * d,
                  result.codewords.data() + i * d);
    }
    result.z_q = tape.straight_through(z, result.codewords);
    result.commitment = tape.mse(z, result.codewords);
    return result;
}

/// Content tokens for one utterance. Never reads the reference embedding, so
/// tokens are decoupled from timbre by construction.
template <class Real>
SpeechTokens encode_utterance(const MelSpectrogram& mel, const CodecParams<Real>& params) {
    if (mel.n_mels != params.config.n_mels)
        throw InvalidInputError("encode_utterance: mel has " + std::to_string(mel.n_mels) +
                                " bands, codec expects " + std::to_string(params.config.n_mels));
    Tape<Real> tape;
    tape.recording = false;
    const Real pad_value = static_cast<Real>(std::log(mel.config.log_floor));
    auto mel_t = detail::mel_to_tensor<Real>(mel);
    auto padded = detail::pad_mel_tensor(tape, mel_t, params.config.downsample_factor, pad_value);
    auto z = detail::encoder_forward(tape, params, padded, pad_value);
    auto q = quantize(tape, z, params.codebook);
    SpeechTokens tokens;
    tokens.ids = std::move(q.ids);
    tokens.downsample_factor = static_cast<int>(params.config.downsample_factor);
    return tokens;
}

/// Reconstructs a mel spectrogram from tokens plus a reference embedding.
/// Output frame count is token count * downsample_factor.
template <class Real>
MelSpectrogram decode_utterance(const SpeechTokens& tokens, const ReferenceEmbedding<Real>& e_ref,
                                const CodecParams<Real>& params, const MelConfig& mel_cfg) {
    const std::size_t k = params.config.codebook_size;
    for (int id : tokens.ids)
        if (id < 0 || static_cast<std::size_t>(id) >= k)
            throw InvalidInputError("decode_utterance: token id out of range: " +
                                    std::to_string(id));
    if (e_ref.values.size() != params.config.ref_dim)
        throw InvalidInputError("decode_utterance: reference embedding dim mismatch");

    Tape<Real> tape;
    tape.recording = false;
    const std::size_t t = tokens.ids.size(), d = params.config.latent_dim;
    Tensor<Real> z_q = Tensor<Real>::zeros({t, d});
    for (std::size_t i = 0; i < t; ++i)
        std::copy(params.codebook.entries.data() + static_cast<std::size_t>(tokens.ids[i]) * d,
                  params.codebook.entries.data() + (static_cast<std::size_t>(tokens.ids[i]) + 1) * d,
                  z_q.data() + i * d);
    Tensor<Real> ref = Tensor<Real>::zeros({params.config.ref_dim});
    std::copy(e_ref.values.begin(), e_ref.values.end(), ref.data());

    auto mel_t = detail::decoder_forward(tape, params, z_q, ref);
    MelSpectrogram mel;
    mel.frames = mel_t.rows();
    mel.n_mels = mel_t.cols();
    mel.config = mel_cfg;
    mel.values.resize(mel_t.numel());
    const double floor_log = std::log(mel_cfg.log_floor);
    for (std::size_t i = 0; i < mel_t.numel(); ++i)
        mel.values[i] = std::max(static_cast<double>(mel_t.data()[i]), floor_log);
    return mel;
}

/// Mean-pooled reference embedding from a random contiguous clip. Clips
/// longer than the utterance clamp to the whole utterance; the draw comes
/// from the caller's rng so results are reproducible per seed.
template <class Real>
ReferenceEmbedding<Real> extract_ref_embedding(const MelSpectrogram& mel,
                                               const CodecParams<Real>& params,
                                               std::size_t clip_frames, Rng& rng) {
    if (mel.frames == 0) throw InvalidInputError("extract_ref_embedding: empty mel");
    if (mel.n_mels != params.config.n_mels)
        throw InvalidInputError("extract_ref_embedding: mel band count mismatch");
    const std::size_t len = std::min(clip_frames, mel.frames);
    const std::size_t start = static_cast<std::size_t>(rng.uniform_int(mel.frames - len + 1));

    Tape<Real> tape;
    tape.recording = false;
    Tensor<Real> clip = Tensor<Real>::zeros({len, mel.n_mels});
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < mel.n_mels; ++j)
            clip.data()[i * mel.n_mels + j] = static_cast<Real>(mel.at(start + i, j));
    auto e = detail::ref_forward(tape, params, clip);

    ReferenceEmbedding<Real> out;
    out.values.assign(e.data(), e.data() + e.numel());
    out.source_frames = len;
    return out;
}

/// Full-utterance reference embedding (no clip); used by the SECS metric.
template <class Real>
ReferenceEmbedding<Real> ref_embedding_full(const MelSpectrogram& mel,
                                            const CodecParams<Real>& params) {
    if (mel.frames == 0) throw InvalidInputError("ref_embedding_full: empty mel");
    Tape<Real> tape;
    tape.recording = false;
    auto mel_t = detail::mel_to_tensor<Real>(mel);
    auto e = detail::ref_forward(tape, params, mel_t);
    ReferenceEmbedding<Real> out;
    out.values.assign(e.data(), e.data() + e.numel());
    out.source_frames = mel.frames;
    return out;
}

struct CodecLosses {
    double total = 0;
    double reconstruction = 0;
    double commitment = 0;
};

/// One training step over a batch of mels: reconstruction MSE plus
/// beta-weighted commitment, EMA codebook update, dead-code reseeding.
/// A non-finite loss aborts the step before any parameter changes.
template <class Real>
CodecLosses codec_train_step(const std::vector<MelSpectrogram>& batch, CodecParams<Real>& params,
                             AdamW<Real>& optimizer, Rng& rng) {
    if (batch.empty()) throw InvalidInputError("codec_train_step: empty batch");
    const CodecConfig& cfg = params.config;
    const std::size_t k = cfg.codebook_size, d = cfg.latent_dim;

    Tape<Real> tape;
    auto params_list = params.parameters();
    zero_grads<Real>(params_list);

    std::vector<std::vector<int>> batch_ids;
    std::vector<Tensor<Real>> batch_z;
    Tensor<Real> total;
    CodecLosses losses;

    for (const MelSpectrogram& mel : batch) {
        const Real pad_value = static_cast<Real>(std::log(mel.config.log_floor));
        auto mel_t = detail::mel_to_tensor<Real>(mel);
        auto padded = detail::pad_mel_tensor(tape, mel_t, cfg.downsample_factor, pad_value);
        auto z = detail::encoder_forward(tape, params, padded, pad_value);
        auto q = quantize(tape, z, params.codebook);
        batch_ids.push_back(q.ids);
        batch_z.push_back(z);

        // Reference clip from the same utterance.
        const std::size_t len = std::min(cfg.clip_frames, mel.frames);
        const std::size_t start = static_cast<std::size_t>(rng.uniform_int(mel.frames - len + 1));
        Tensor<Real> clip = Tensor<Real>::zeros({len, mel.n_mels});
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j < mel.n_mels; ++j)
                clip.data()[i * mel.n_mels + j] = static_cast<Real>(mel.at(start + i, j));
        auto e_ref = detail::ref_forward(tape, params, clip);

        auto recon = detail::decoder_forward(tape, params, q.z_q, e_ref);
        auto recon_loss = tape.mse(recon, padded);
        auto utt_loss = tape.add(recon_loss, tape.scale(q.commitment, static_cast<Real>(cfg.beta)));

        losses.reconstruction += static_cast<double>(recon_loss.value());
        losses.commitment += static_cast<double>(q.commitment.value());
        total = total.defined() ? tape.add(total, utt_loss) : utt_loss;
    }

    total = tape.scale(total, Real(1) / static_cast<Real>(batch.size()));
    losses.reconstruction /= static_cast<double>(batch.size());
    losses.commitment /= static_cast<double>(batch.size());
    losses.total = static_cast<double>(total.value());
    if (!std::isfinite(losses.total))
        throw NumericalError("codec_train_step: non-finite loss, step aborted");

    tape.backward(total);

    // EMA codebook update from this batch's assignments.
    std::vector<Real> counts(k, Real(0));
    std::vector<Real> sums(k * d, Real(0));
    std::size_t total_rows = 0;
    for (std::size_t u = 0; u < batch_ids.size(); ++u) {
        const auto& ids = batch_ids[u];
        const Tensor<Real>& z = batch_z[u];
        total_rows += ids.size();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const std::size_t c = static_cast<std::size_t>(ids[i]);
            counts[c] += Real(1);
            for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += z.data()[i * d + j];
        }
    }
    const Real decay = static_cast<Real>(cfg.ema_decay);
    Real* ema_n = params.codebook.ema_counts.data();
    Real* ema_s = params.codebook.ema_sums.data();
    Real* code = params.codebook.entries.data();
    for (std::size_t c = 0; c < k; ++c) {
        ema_n[c] = decay * ema_n[c] + (Real(1) - decay) * counts[c];
        for (std::size_t j = 0; j < d; ++j)
            ema_s[c * d + j] = decay * ema_s[c * d + j] + (Real(1) - decay) * sums[c * d + j];
        if (ema_n[c] < Real(1e-3)) {
            // Dead code: reseed from a random encoder output in this batch.
            const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(total_rows));
            std::size_t acc = 0;
            for (std::size_t u = 0; u < batch_z.size(); ++u) {
                const std::size_t rows = batch_z[u].rows();
                if (pick < acc + rows) {
                    const Real* row = batch_z[u].data() + (pick - acc) * d;
                    std::copy(row, row + d, code + c * d);
                    break;
                }
                acc += rows;
            }
            ema_n[c] = Real(1);
            std::copy(code + c * d, code + (c + 1) * d, ema_s + c * d);
        } else {
            for (std::size_t j = 0; j < d; ++j) code[c * d + j] = ema_s[c * d + j] / ema_n[c];
        }
    }

    optimizer.accumulate_and_step_from_grads();
    return losses;
}

/// exp(entropy) of a token usage histogram; 1.0 means total collapse.
inline double codebook_perplexity(const std::vector<std::size_t>& usage) {
    std::size_t total = 0;
    for (std::size_t c : usage) total += c;
    if (total == 0) return 0.0;
    double entropy = 0.0;
    for (std::size_t c : usage) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

} // namespace nhwc

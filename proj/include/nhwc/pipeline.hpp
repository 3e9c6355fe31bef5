#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nhwc/background.hpp"
#include "nhwc/bpe.hpp"
#include "nhwc/checkpoint.hpp"
#include "nhwc/codec.hpp"
#include "nhwc/config.hpp"
#include "nhwc/dsp.hpp"
#include "nhwc/error.hpp"
#include "nhwc/lm.hpp"
#include "nhwc/log.hpp"
#include "nhwc/manifest.hpp"
#include "nhwc/metrics.hpp"
#include "nhwc/optimizer.hpp"
#include "nhwc/rng.hpp"
#include "nhwc/tensor.hpp"
#include "nhwc/wav.hpp"

namespace nhwc {

namespace detail {

// Runs one pipeline stage; failures are rethrown with the stage name so the
// caller can tell exactly where an end-to-end run died.
template <class F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw Error(e.code(), std::string("stage ") + name + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(ExitCode::io, std::string("stage ") + name + ": " + e.what());
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Checkpoint wrappers.

template <class Real>
void save_codec_checkpoint(CodecParams<Real>& params, const std::string& path) {
    Checkpoint ckpt;
    ckpt.config = {{"kind", "codec"}, {"codec", codec_to_json(params.config)}};
    checkpoint_add_named(ckpt, params.named_tensors());
    ckpt.save(path);
}

template <class Real>
CodecParams<Real> load_codec_checkpoint(const std::string& path) {
    const Checkpoint ckpt = Checkpoint::load(path);
    if (!ckpt.config.contains("kind") || ckpt.config["kind"] != "codec")
        throw InvalidInputError("checkpoint: not a codec checkpoint: " + path);
    const CodecConfig cfg = codec_from_json(ckpt.config.at("codec"));
    Rng rng(0);
    CodecParams<Real> params = CodecParams<Real>::init(cfg, rng);
    checkpoint_restore_named(ckpt, params.named_tensors());
    return params;
}

template <class Real>
void save_lm_checkpoint(LmParams<Real>& params, const std::string& path) {
    Checkpoint ckpt;
    ckpt.config = {{"kind", "lm"}, {"lm", lm_to_json(params.config)}};
    checkpoint_add_named(ckpt, params.named_tensors());
    ckpt.save(path);
}

template <class Real>
LmParams<Real> load_lm_checkpoint(const std::string& path) {
    const Checkpoint ckpt = Checkpoint::load(path);
    if (!ckpt.config.contains("kind") || ckpt.config["kind"] != "lm")
        throw InvalidInputError("checkpoint: not an lm checkpoint: " + path);
    const LmConfig cfg = lm_from_json(ckpt.config.at("lm"));
    Rng rng(0);
    LmParams<Real> params = LmParams<Real>::init(cfg, rng);
    checkpoint_restore_named(ckpt, params.named_tensors());
    return params;
}

// ---------------------------------------------------------------------------
// LM training.

/// One prepared utterance: BPE text ids, cached mel, frozen codec tokens.
template <class Real>
struct LmExample {
    std::string id;
    std::vector<int> text_ids;
    std::vector<int> speech_ids;
    MelSpectrogram mel;
};

/// Tokenizes the dataset once with the frozen BPE/codec. Utterances whose
/// assembled sequence would overflow max_sequence_len are skipped with a
/// warning and counted, never silently dropped.
template <class Real>
std::vector<LmExample<Real>> prepare_lm_dataset(const std::vector<ManifestEntry>& entries,
                                                const BpeVocab& bpe,
                                                const CodecParams<Real>& codec,
                                                const MelConfig& mel_cfg, const LmConfig& lm_cfg,
                                                std::size_t* skipped = nullptr) {
    if (entries.empty()) throw InvalidInputError("train_lm: dataset is empty");
    std::vector<LmExample<Real>> out;
    std::size_t skip_count = 0;
    for (const ManifestEntry& entry : entries) {
        AudioBuffer audio = read_wav(entry.wav);
        if (audio.sample_rate != mel_cfg.sample_rate)
            audio = resample(audio, mel_cfg.sample_rate);
        LmExample<Real> ex;
        ex.id = entry.id;
        ex.text_ids = bpe.encode(entry.text);
        ex.mel = log_mel(audio, mel_cfg);
        ex.speech_ids = encode_utterance(ex.mel, codec).ids;
        const std::size_t total = 1 + ex.text_ids.size() + 2 + ex.speech_ids.size() + 2;
        if (total > lm_cfg.max_sequence_len) {
            log_warn("train_lm: skipping '" + entry.id + "': sequence length " +
                     std::to_string(total) + " exceeds max " +
                     std::to_string(lm_cfg.max_sequence_len));
            ++skip_count;
            continue;
        }
        out.push_back(std::move(ex));
    }
    if (skipped != nullptr) *skipped = skip_count;
    if (out.empty()) throw InvalidInputError("train_lm: every utterance was skipped");
    return out;
}

template <class Real>
struct TrainLmResult {
    std::vector<double> loss_curve; // mean per-token loss, one entry per step
    std::size_t skipped = 0;
    std::size_t updates_applied = 0;
};

/// Teacher-forced LM training: per step, take the next batch round-robin,
/// draw a fresh reference clip from each target utterance, assemble, compute
/// the dual cross-entropy and hand the mean-per-token gradients to the
/// accumulating optimizer.
template <class Real>
TrainLmResult<Real> train_lm(const std::vector<LmExample<Real>>& dataset,
                             const CodecParams<Real>& codec, LmParams<Real>& lm,
                             AdamW<Real>& optimizer, std::size_t steps, std::size_t batch_size,
                             Rng& rng) {
    if (dataset.empty()) throw InvalidInputError("train_lm: dataset is empty");
    if (batch_size == 0) throw InvalidInputError("train_lm: batch_size must be positive");
    auto params = lm.parameters();
    TrainLmResult<Real> result;
    result.loss_curve.reserve(steps);
    Rng dropout_rng = rng.fork(seed_tag::dropout);

    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        Tape<Real> tape;
        zero_grads<Real>(std::span<Tensor<Real>* const>(params));
        Tensor<Real> batch_loss;
        double loss_sum = 0;
        std::size_t token_count = 0;
        for (std::size_t b = 0; b < batch_size; ++b) {
            const LmExample<Real>& ex = dataset[cursor];
            cursor = (cursor + 1) % dataset.size();

            const auto e_ref =
                extract_ref_embedding(ex.mel, codec, codec.config.clip_frames, rng);
            Tensor<Real> e_ref_t = Tensor<Real>::zeros({e_ref.values.size()});
            std::copy(e_ref.values.begin(), e_ref.values.end(), e_ref_t.data());

            SequenceLayout layout = assemble_sequence(lm.config, ex.text_ids, ex.speech_ids);
            LmForwardOptions<Real> opts;
            opts.training = true;
            opts.dropout_rng = &dropout_rng;
            auto loss = lm_loss(tape, lm, layout, e_ref_t, opts);
            const std::size_t tokens = loss.text_count + loss.speech_count;
            auto seq_mean = tape.scale(loss.total, Real(1) / static_cast<Real>(tokens));
            batch_loss = batch_loss.defined() ? tape.add(batch_loss, seq_mean) : seq_mean;
            loss_sum += loss.text_loss + loss.speech_loss;
            token_count += tokens;
        }
        batch_loss = tape.scale(batch_loss, Real(1) / static_cast<Real>(batch_size));
        if (!std::isfinite(batch_loss.value()))
            throw NumericalError("train_lm: non-finite loss at step " + std::to_string(step));
        tape.backward(batch_loss);
        if (optimizer.accumulate_and_step_from_grads()) ++result.updates_applied;
        result.loss_curve.push_back(loss_sum / static_cast<double>(token_count));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Track 1 synthesis.

template <class Real>
struct SynthResult {
    AudioBuffer audio; // 48 kHz
    std::size_t tokens_generated = 0;
    double speech_seconds = 0;
    bool hit_eos = false;
};

/// Text + reference audio -> 48 kHz speech: BPE encode, reference embedding,
/// autoregressive token generation, codec decode, Griffin-Lim, band
/// expansion by resampling.
template <class Real>
SynthResult<Real> synth(const std::string& text, const AudioBuffer& reference,
                        const BpeVocab& bpe, const CodecParams<Real>& codec,
                        const LmParams<Real>& lm, const PipelineConfig& cfg, Rng& rng) {
    SynthResult<Real> result;
    const std::vector<int> text_ids =
        detail::stage("text-encode", [&] { return bpe.encode(text); });

    const auto e_ref = detail::stage("ref-embedding", [&] {
        AudioBuffer ref16 = reference;
        if (ref16.sample_rate != cfg.mel.sample_rate)
            ref16 = resample(ref16, cfg.mel.sample_rate);
        const MelSpectrogram ref_mel = log_mel(ref16, cfg.mel);
        Rng clip_rng = rng.fork(seed_tag::ref_clip);
        return extract_ref_embedding(ref_mel, codec, codec.config.clip_frames, clip_rng);
    });

    const auto generated = detail::stage("lm-generate", [&] {
        Rng sample_rng = rng.fork(seed_tag::sampling);
        return generate(lm, text_ids, e_ref.values, cfg.sampling, sample_rng);
    });
    result.tokens_generated = generated.speech_ids.size();
    result.hit_eos = generated.hit_eos;
    if (generated.speech_ids.empty())
        throw InvalidInputError("stage lm-generate: model produced no speech tokens");

    const MelSpectrogram mel = detail::stage("codec-decode", [&] {
        SpeechTokens tokens;
        tokens.ids = generated.speech_ids;
        tokens.downsample_factor = static_cast<int>(codec.config.downsample_factor);
        return decode_utterance(tokens, e_ref, codec, cfg.mel);
    });

    const AudioBuffer audio16 = detail::stage("vocode", [&] {
        return griffin_lim_vocode(mel, cfg.vocoder.griffin_lim_iterations);
    });
    result.audio = detail::stage("band-expand", [&] { return resample(audio16, 48000); });
    result.speech_seconds = result.audio.duration_s();
    return result;
}

// ---------------------------------------------------------------------------
// End-to-end run (track 1 + track 2).

struct E2eReport {
    std::size_t tokens_generated = 0;
    SceneDescription description;
    double gain_db = 0;
    bool limiter_fired = false;
    double speech_seconds = 0;
    double background_seconds = 0;
    double output_seconds = 0;

    nlohmann::json to_json() const {
        return {{"tokens_generated", tokens_generated},
                {"description",
                 {{"kind", to_string(description.kind)},
                  {"text", description.text},
                  {"tags", description.tags}}},
                {"gain_db", gain_db},
                {"limiter_fired", limiter_fired},
                {"durations",
                 {{"speech_seconds", speech_seconds},
                  {"background_seconds", background_seconds},
                  {"output_seconds", output_seconds}}}};
    }
};

/// Full cascade: synthesize speech from the transcript and reference, derive
/// a background description from the transcript, render and mix, write one
/// 48 kHz WAV. Nothing is written unless every stage succeeds.
template <class Real>
E2eReport run_e2e(const PipelineConfig& cfg, const std::string& transcript,
                  const std::string& reference_wav_path, const std::string& out_path,
                  std::uint64_t seed) {
    if (transcript.empty()) throw InvalidInputError("e2e: transcript must be non-empty");
    const BpeVocab bpe = detail::stage("load-bpe", [&] {
        if (cfg.paths.bpe.empty()) throw InvalidInputError("no bpe checkpoint configured");
        return BpeVocab::load(cfg.paths.bpe);
    });
    const CodecParams<Real> codec = detail::stage("load-codec", [&] {
        if (cfg.paths.codec.empty()) throw InvalidInputError("no codec checkpoint configured");
        return load_codec_checkpoint<Real>(cfg.paths.codec);
    });
    const LmParams<Real> lm = detail::stage("load-lm", [&] {
        if (cfg.paths.lm.empty()) throw InvalidInputError("no lm checkpoint configured");
        return load_lm_checkpoint<Real>(cfg.paths.lm);
    });
    const AudioBuffer reference =
        detail::stage("read-reference", [&] { return read_wav(reference_wav_path); });

    Rng rng(seed);
    SynthResult<Real> speech = synth(transcript, reference, bpe, codec, lm, cfg, rng);

    E2eReport report;
    report.description = detail::stage("describe", [&] {
        const DescriptionProvider provider =
            cfg.remote_llm_enabled ? DescriptionProvider::remote_llm(cfg.remote_llm)
                                   : DescriptionProvider::rule_based();
        return describe(transcript, provider);
    });

    const double bg_seconds = speech.speech_seconds + cfg.mix.tail_ms / 1000.0;
    const AudioBuffer background = detail::stage("render-background", [&] {
        Rng bg_rng = rng.fork(seed_tag::background);
        return render_background(report.description, bg_seconds, bg_rng, cfg.mix.output_rate);
    });

    const MixResult mixed =
        detail::stage("mix", [&] { return mix(speech.audio, background, cfg.mix); });

    detail::stage("write-output", [&] {
        write_wav(out_path, mixed.audio, WavFormat::pcm16);
        return 0;
    });

    report.tokens_generated = speech.tokens_generated;
    report.gain_db = cfg.mix.background_gain_db;
    report.limiter_fired = mixed.limiter_fired;
    report.speech_seconds = speech.speech_seconds;
    report.background_seconds = background.duration_s();
    report.output_seconds = mixed.audio.duration_s();
    return report;
}

// ---------------------------------------------------------------------------
// Evaluation harness.

struct EvalRecord {
    std::string id;
    double cer_value = 0;
    double secs_value = 0;

    nlohmann::json to_json() const {
        return {{"id", id}, {"cer", cer_value}, {"secs", secs_value}};
    }
};

/// Pairs file: JSON lines {id, ref_text, hyp_text, ref_wav, hyp_wav}.
/// Audio is resampled to the mel rate before embedding.
template <class Real>
std::vector<EvalRecord> run_eval(const std::string& pairs_path, const CodecParams<Real>& codec,
                                 const MelConfig& mel_cfg) {
    std::ifstream f(pairs_path);
    if (!f) throw IoError("eval: cannot open pairs file: " + pairs_path);
    std::vector<EvalRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInputError("eval: line " + std::to_string(line_no) + ": " + e.what());
        }
        for (const char* key : {"id", "ref_text", "hyp_text", "ref_wav", "hyp_wav"})
            if (!obj.contains(key))
                throw InvalidInputError("eval: line " + std::to_string(line_no) +
                                        ": missing \"" + key + "\"");
        EvalRecord rec;
        rec.id = obj["id"].get<std::string>();
        rec.cer_value =
            cer(obj["ref_text"].get<std::string>(), obj["hyp_text"].get<std::string>());
        AudioBuffer a = read_wav(obj["ref_wav"].get<std::string>());
        AudioBuffer b = read_wav(obj["hyp_wav"].get<std::string>());
        if (a.sample_rate != mel_cfg.sample_rate) a = resample(a, mel_cfg.sample_rate);
        if (b.sample_rate != mel_cfg.sample_rate) b = resample(b, mel_cfg.sample_rate);
        rec.secs_value = secs(a, b, codec, mel_cfg);
        records.push_back(std::move(rec));
    }
    return records;
}

} // namespace nhwc

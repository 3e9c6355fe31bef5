#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "nhwc/background.hpp"
#include "nhwc/codec.hpp"
#include "nhwc/dsp.hpp"
#include "nhwc/error.hpp"
#include "nhwc/lm.hpp"
#include "nhwc/optimizer.hpp"

namespace nhwc {

struct TrainConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t accumulation_target = 1;
    std::size_t batch_size = 1;
    std::size_t steps = 1000;

    AdamConfig adam() const {
        return AdamConfig{lr, beta1, beta2, eps, weight_decay, accumulation_target};
    }
};

struct VocoderConfig {
    int griffin_lim_iterations = 48;
};

struct PathsConfig {
    std::string bpe;
    std::string codec;
    std::string lm;
};

/// One JSON document per experiment; CLI flags override individual values.
struct PipelineConfig {
    MelConfig mel;
    CodecConfig codec;
    LmConfig lm;
    TrainConfig train;
    SamplingConfig sampling;
    MixConfig mix;
    VocoderConfig vocoder;
    RemoteLlmConfig remote_llm{.endpoint = "", .prompt_template = default_prompt_template()};
    bool remote_llm_enabled = false;
    PathsConfig paths;
    std::uint64_t seed = 0;
    int bpe_target_vocab = 512;
};

namespace detail {

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void merge_mel(const nlohmann::json& j, MelConfig& c) {
    get_if(j, "sample_rate", c.sample_rate);
    get_if(j, "fft_size", c.fft_size);
    get_if(j, "hop", c.hop);
    get_if(j, "n_mels", c.n_mels);
    get_if(j, "fmin", c.fmin);
    get_if(j, "fmax", c.fmax);
    get_if(j, "log_floor", c.log_floor);
}

inline void merge_codec(const nlohmann::json& j, CodecConfig& c) {
    get_if(j, "n_mels", c.n_mels);
    get_if(j, "codebook_size", c.codebook_size);
    get_if(j, "latent_dim", c.latent_dim);
    get_if(j, "ref_dim", c.ref_dim);
    get_if(j, "hidden", c.hidden);
    get_if(j, "downsample_factor", c.downsample_factor);
    get_if(j, "beta", c.beta);
    get_if(j, "ema_decay", c.ema_decay);
    get_if(j, "clip_frames", c.clip_frames);
}

inline void merge_lm(const nlohmann::json& j, LmConfig& c) {
    get_if(j, "n_layers", c.n_layers);
    get_if(j, "n_heads", c.n_heads);
    get_if(j, "d_model", c.d_model);
    get_if(j, "text_vocab_size", c.text_vocab_size);
    get_if(j, "speech_vocab_size", c.speech_vocab_size);
    get_if(j, "ref_dim", c.ref_dim);
    get_if(j, "max_sequence_len", c.max_sequence_len);
    get_if(j, "dropout", c.dropout);
    get_if(j, "text_loss_weight", c.text_loss_weight);
}

inline void merge_sampling(const nlohmann::json& j, SamplingConfig& c) {
    if (j.contains("mode")) {
        const std::string mode = j.at("mode").get<std::string>();
        if (mode == "greedy")
            c.mode = SamplingConfig::Mode::greedy;
        else if (mode == "top_k")
            c.mode = SamplingConfig::Mode::top_k;
        else
            throw InvalidInputError("config: sampling.mode must be greedy or top_k");
    }
    get_if(j, "top_k", c.top_k);
    get_if(j, "temperature", c.temperature);
    get_if(j, "max_new", c.max_new);
}

} // namespace detail

inline nlohmann::json mel_to_json(const MelConfig& c) {
    return {{"sample_rate", c.sample_rate}, {"fft_size", c.fft_size}, {"hop", c.hop},
            {"n_mels", c.n_mels},           {"fmin", c.fmin},         {"fmax", c.fmax},
            {"log_floor", c.log_floor}};
}

inline nlohmann::json codec_to_json(const CodecConfig& c) {
    return {{"n_mels", c.n_mels},
            {"codebook_size", c.codebook_size},
            {"latent_dim", c.latent_dim},
            {"ref_dim", c.ref_dim},
            {"hidden", c.hidden},
            {"downsample_factor", c.downsample_factor},
            {"beta", c.beta},
            {"ema_decay", c.ema_decay},
            {"clip_frames", c.clip_frames}};
}

inline nlohmann::json lm_to_json(const LmConfig& c) {
    return {{"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"d_model", c.d_model},
            {"text_vocab_size", c.text_vocab_size},
            {"speech_vocab_size", c.speech_vocab_size},
            {"ref_dim", c.ref_dim},
            {"max_sequence_len", c.max_sequence_len},
            {"dropout", c.dropout},
            {"text_loss_weight", c.text_loss_weight}};
}

inline MelConfig mel_from_json(const nlohmann::json& j) {
    MelConfig c;
    detail::merge_mel(j, c);
    return c;
}

inline CodecConfig codec_from_json(const nlohmann::json& j) {
    CodecConfig c;
    detail::merge_codec(j, c);
    return c;
}

inline LmConfig lm_from_json(const nlohmann::json& j) {
    LmConfig c;
    detail::merge_lm(j, c);
    return c;
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig cfg;
    if (j.contains("mel")) detail::merge_mel(j.at("mel"), cfg.mel);
    if (j.contains("codec")) detail::merge_codec(j.at("codec"), cfg.codec);
    if (j.contains("lm")) detail::merge_lm(j.at("lm"), cfg.lm);
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::get_if(t, "lr", cfg.train.lr);
        detail::get_if(t, "beta1", cfg.train.beta1);
        detail::get_if(t, "beta2", cfg.train.beta2);
        detail::get_if(t, "eps", cfg.train.eps);
        detail::get_if(t, "weight_decay", cfg.train.weight_decay);
        detail::get_if(t, "accumulation_target", cfg.train.accumulation_target);
        detail::get_if(t, "batch_size", cfg.train.batch_size);
        detail::get_if(t, "steps", cfg.train.steps);
    }
    if (j.contains("sampling")) detail::merge_sampling(j.at("sampling"), cfg.sampling);
    if (j.contains("mix")) {
        const auto& m = j.at("mix");
        detail::get_if(m, "background_gain_db", cfg.mix.background_gain_db);
        detail::get_if(m, "output_rate", cfg.mix.output_rate);
        detail::get_if(m, "fade_ms", cfg.mix.fade_ms);
        detail::get_if(m, "tail_ms", cfg.mix.tail_ms);
    }
    if (j.contains("vocoder"))
        detail::get_if(j.at("vocoder"), "griffin_lim_iterations",
                       cfg.vocoder.griffin_lim_iterations);
    if (j.contains("remote_llm")) {
        const auto& r = j.at("remote_llm");
        detail::get_if(r, "enabled", cfg.remote_llm_enabled);
        detail::get_if(r, "endpoint", cfg.remote_llm.endpoint);
        detail::get_if(r, "prompt_template", cfg.remote_llm.prompt_template);
        detail::get_if(r, "timeout_s", cfg.remote_llm.timeout_s);
        detail::get_if(r, "retries", cfg.remote_llm.retries);
    }
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        detail::get_if(p, "bpe", cfg.paths.bpe);
        detail::get_if(p, "codec", cfg.paths.codec);
        detail::get_if(p, "lm", cfg.paths.lm);
    }
    detail::get_if(j, "seed", cfg.seed);
    detail::get_if(j, "bpe_target_vocab", cfg.bpe_target_vocab);
    return cfg;
}

inline nlohmann::json config_to_json(const PipelineConfig& cfg) {
    return {
        {"mel", mel_to_json(cfg.mel)},
        {"codec", codec_to_json(cfg.codec)},
        {"lm", lm_to_json(cfg.lm)},
        {"train",
         {{"lr", cfg.train.lr},
          {"beta1", cfg.train.beta1},
          {"beta2", cfg.train.beta2},
          {"eps", cfg.train.eps},
          {"weight_decay", cfg.train.weight_decay},
          {"accumulation_target", cfg.train.accumulation_target},
          {"batch_size", cfg.train.batch_size},
          {"steps", cfg.train.steps}}},
        {"sampling",
         {{"mode", cfg.sampling.mode == SamplingConfig::Mode::greedy ? "greedy" : "top_k"},
          {"top_k", cfg.sampling.top_k},
          {"temperature", cfg.sampling.temperature},
          {"max_new", cfg.sampling.max_new}}},
        {"mix",
         {{"background_gain_db", cfg.mix.background_gain_db},
          {"output_rate", cfg.mix.output_rate},
          {"fade_ms", cfg.mix.fade_ms},
          {"tail_ms", cfg.mix.tail_ms}}},
        {"vocoder", {{"griffin_lim_iterations", cfg.vocoder.griffin_lim_iterations}}},
        {"remote_llm",
         {{"enabled", cfg.remote_llm_enabled},
          {"endpoint", cfg.remote_llm.endpoint},
          {"prompt_template", cfg.remote_llm.prompt_template},
          {"timeout_s", cfg.remote_llm.timeout_s},
          {"retries", cfg.remote_llm.retries}}},
        {"paths", {{"bpe", cfg.paths.bpe}, {"codec", cfg.paths.codec}, {"lm", cfg.paths.lm}}},
        {"seed", cfg.seed},
        {"bpe_target_vocab", cfg.bpe_target_vocab},
    };
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError("config: parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

} // namespace nhwc

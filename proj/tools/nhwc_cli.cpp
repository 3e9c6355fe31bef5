// Command-line surface for the two-track audio generation pipeline.
// Every subcommand prints one machine-readable JSON object on stdout and
// logs on stderr. Exit codes: 0 success, 2 invalid input, 3 numerical
// error, 4 I/O error.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nhwc/pipeline.hpp"

namespace {

using Real = float;
using nlohmann::json;

struct CommonOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t steps = 0;
    bool steps_set = false;
    bool greedy = false;
    int top_k = 0;
    bool top_k_set = false;
    double temperature = 0;
    bool temperature_set = false;
    double gain_db = 0;
    bool gain_db_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "pipeline config JSON");
    cmd->add_option("--seed", opts.seed, "deterministic seed")
        ->each([&opts](const std::string&) { opts.seed_set = true; });
    cmd->add_option("--steps", opts.steps, "training steps")
        ->each([&opts](const std::string&) { opts.steps_set = true; });
    cmd->add_flag("--greedy", opts.greedy, "greedy decoding");
    cmd->add_option("--top-k", opts.top_k, "top-k sampling size")
        ->each([&opts](const std::string&) { opts.top_k_set = true; });
    cmd->add_option("--temperature", opts.temperature, "sampling temperature")
        ->each([&opts](const std::string&) { opts.temperature_set = true; });
    cmd->add_option("--gain-db", opts.gain_db, "background gain in dB")
        ->each([&opts](const std::string&) { opts.gain_db_set = true; });
}

nhwc::PipelineConfig resolve_config(const CommonOpts& opts) {
    nhwc::PipelineConfig cfg;
    if (!opts.config_path.empty()) cfg = nhwc::load_config(opts.config_path);
    if (opts.seed_set) cfg.seed = opts.seed;
    if (opts.steps_set) cfg.train.steps = opts.steps;
    if (opts.greedy) cfg.sampling.mode = nhwc::SamplingConfig::Mode::greedy;
    if (opts.top_k_set) {
        cfg.sampling.mode = nhwc::SamplingConfig::Mode::top_k;
        cfg.sampling.top_k = opts.top_k;
    }
    if (opts.temperature_set) cfg.sampling.temperature = opts.temperature;
    if (opts.gain_db_set) cfg.mix.background_gain_db = opts.gain_db;
    return cfg;
}

void emit(const json& out) { std::cout << out.dump() << std::endl; }

int cmd_train_bpe(const CommonOpts& opts, const std::string& manifest_path,
                  const std::string& out_path, int target_vocab) {
    nhwc::PipelineConfig cfg = resolve_config(opts);
    if (target_vocab > 0) cfg.bpe_target_vocab = target_vocab;
    const auto entries = nhwc::load_manifest(manifest_path, false);
    std::vector<std::string> corpus;
    corpus.reserve(entries.size());
    for (const auto& e : entries) corpus.push_back(e.text);
    const nhwc::BpeVocab vocab = nhwc::train_bpe(corpus, cfg.bpe_target_vocab);
    vocab.save(out_path);
    emit({{"command", "train-bpe"},
          {"vocab_size", vocab.vocab_size()},
          {"merges", vocab.merges().size()},
          {"out", out_path}});
    return 0;
}

int cmd_train_codec(const CommonOpts& opts, const std::string& manifest_path,
                    const std::string& out_path) {
    nhwc::PipelineConfig cfg = resolve_config(opts);
    cfg.codec.n_mels = cfg.mel.n_mels;
    const auto entries = nhwc::load_manifest(manifest_path);
    std::vector<nhwc::MelSpectrogram> mels;
    for (const auto& e : entries) {
        nhwc::AudioBuffer audio = nhwc::read_wav(e.wav);
        if (audio.sample_rate != cfg.mel.sample_rate)
            audio = nhwc::resample(audio, cfg.mel.sample_rate);
        mels.push_back(nhwc::log_mel(audio, cfg.mel));
    }

    nhwc::Rng rng(cfg.seed);
    nhwc::Rng param_rng = rng.fork(nhwc::seed_tag::params);
    nhwc::Rng clip_rng = rng.fork(nhwc::seed_tag::ref_clip);
    auto params = nhwc::CodecParams<Real>::init(cfg.codec, param_rng);
    auto trainable = params.parameters();
    nhwc::AdamW<Real> optimizer(cfg.train.adam(),
                                std::span<nhwc::Tensor<Real>* const>(trainable));

    const std::size_t batch = std::max<std::size_t>(1, cfg.train.batch_size);
    double first_loss = 0, last_loss = 0;
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < cfg.train.steps; ++step) {
        std::vector<nhwc::MelSpectrogram> chunk;
        for (std::size_t b = 0; b < batch; ++b) {
            chunk.push_back(mels[cursor]);
            cursor = (cursor + 1) % mels.size();
        }
        const auto losses = nhwc::codec_train_step(chunk, params, optimizer, clip_rng);
        if (step == 0) first_loss = losses.total;
        last_loss = losses.total;
        if (step % 50 == 0)
            nhwc::log_info("train-codec step " + std::to_string(step) + " loss " +
                           std::to_string(losses.total));
    }
    nhwc::save_codec_checkpoint(params, out_path);
    emit({{"command", "train-codec"},
          {"steps", cfg.train.steps},
          {"utterances", mels.size()},
          {"initial_loss", first_loss},
          {"final_loss", last_loss},
          {"out", out_path}});
    return 0;
}

int cmd_train_lm(const CommonOpts& opts, const std::string& manifest_path,
                 const std::string& bpe_path, const std::string& codec_path,
                 const std::string& out_path) {
    nhwc::PipelineConfig cfg = resolve_config(opts);
    const auto entries = nhwc::load_manifest(manifest_path);
    const nhwc::BpeVocab bpe = nhwc::BpeVocab::load(bpe_path);
    const auto codec = nhwc::load_codec_checkpoint<Real>(codec_path);

    cfg.lm.text_vocab_size = static_cast<std::size_t>(bpe.vocab_size());
    cfg.lm.speech_vocab_size = codec.config.codebook_size;
    cfg.lm.ref_dim = codec.config.ref_dim;

    std::size_t skipped = 0;
    const auto dataset =
        nhwc::prepare_lm_dataset<Real>(entries, bpe, codec, cfg.mel, cfg.lm, &skipped);

    nhwc::Rng rng(cfg.seed);
    nhwc::Rng param_rng = rng.fork(nhwc::seed_tag::params);
    nhwc::Rng train_rng = rng.fork(nhwc::seed_tag::ref_clip);
    auto lm = nhwc::LmParams<Real>::init(cfg.lm, param_rng);
    auto trainable = lm.parameters();
    nhwc::AdamW<Real> optimizer(cfg.train.adam(),
                                std::span<nhwc::Tensor<Real>* const>(trainable));
    const auto result = nhwc::train_lm(dataset, codec, lm, optimizer, cfg.train.steps,
                                       cfg.train.batch_size, train_rng);
    nhwc::save_lm_checkpoint(lm, out_path);
    nhwc::log_info("train-lm: skipped " + std::to_string(skipped) + " oversized utterances");
    emit({{"command", "train-lm"},
          {"steps", cfg.train.steps},
          {"updates_applied", result.updates_applied},
          {"skipped_utterances", skipped},
          {"initial_loss", result.loss_curve.empty() ? 0.0 : result.loss_curve.front()},
          {"final_loss", result.loss_curve.empty() ? 0.0 : result.loss_curve.back()},
          {"loss_curve", result.loss_curve},
          {"parameter_count", nhwc::lm_param_count(cfg.lm)},
          {"out", out_path}});
    return 0;
}

int cmd_synth(const CommonOpts& opts, const std::string& text, const std::string& ref_path,
              const std::string& out_path) {
    const nhwc::PipelineConfig cfg = resolve_config(opts);
    const nhwc::BpeVocab bpe = nhwc::BpeVocab::load(cfg.paths.bpe);
    const auto codec = nhwc::load_codec_checkpoint<Real>(cfg.paths.codec);
    const auto lm = nhwc::load_lm_checkpoint<Real>(cfg.paths.lm);
    const nhwc::AudioBuffer reference = nhwc::read_wav(ref_path);
    nhwc::Rng rng(cfg.seed);
    const auto result = nhwc::synth(text, reference, bpe, codec, lm, cfg, rng);
    nhwc::write_wav(out_path, result.audio);
    emit({{"command", "synth"},
          {"tokens_generated", result.tokens_generated},
          {"hit_eos", result.hit_eos},
          {"speech_seconds", result.speech_seconds},
          {"out", out_path}});
    return 0;
}

int cmd_bg(const CommonOpts& opts, const std::string& text, double duration_s,
           const std::string& out_path) {
    const nhwc::PipelineConfig cfg = resolve_config(opts);
    const auto provider = cfg.remote_llm_enabled
                              ? nhwc::DescriptionProvider::remote_llm(cfg.remote_llm)
                              : nhwc::DescriptionProvider::rule_based();
    const nhwc::SceneDescription desc = nhwc::describe(text, provider);
    nhwc::Rng rng = nhwc::Rng(cfg.seed).fork(nhwc::seed_tag::background);
    const nhwc::AudioBuffer audio =
        nhwc::render_background(desc, duration_s, rng, cfg.mix.output_rate);
    nhwc::write_wav(out_path, audio);
    emit({{"command", "bg"},
          {"description",
           {{"kind", nhwc::to_string(desc.kind)}, {"text", desc.text}, {"tags", desc.tags}}},
          {"duration_seconds", audio.duration_s()},
          {"out", out_path}});
    return 0;
}

int cmd_mix(const CommonOpts& opts, const std::string& speech_path,
            const std::string& background_path, const std::string& out_path) {
    const nhwc::PipelineConfig cfg = resolve_config(opts);
    const nhwc::AudioBuffer speech = nhwc::read_wav(speech_path);
    const nhwc::AudioBuffer background = nhwc::read_wav(background_path);
    const nhwc::MixResult result = nhwc::mix(speech, background, cfg.mix);
    nhwc::write_wav(out_path, result.audio);
    emit({{"command", "mix"},
          {"gain_db", cfg.mix.background_gain_db},
          {"limiter_fired", result.limiter_fired},
          {"output_seconds", result.audio.duration_s()},
          {"out", out_path}});
    return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& pairs_path,
             const std::string& codec_path, const std::string& out_path) {
    const nhwc::PipelineConfig cfg = resolve_config(opts);
    const std::string ckpt = codec_path.empty() ? cfg.paths.codec : codec_path;
    const auto codec = nhwc::load_codec_checkpoint<Real>(ckpt);
    const auto records = nhwc::run_eval(pairs_path, codec, cfg.mel);

    std::ofstream out(out_path);
    if (!out) throw nhwc::IoError("eval: cannot open report for writing: " + out_path);
    double cer_sum = 0, secs_sum = 0;
    for (const auto& r : records) {
        out << r.to_json().dump() << "\n";
        cer_sum += r.cer_value;
        secs_sum += r.secs_value;
    }
    const double n = records.empty() ? 1.0 : static_cast<double>(records.size());
    emit({{"command", "eval"},
          {"pairs", records.size()},
          {"mean_cer", cer_sum / n},
          {"mean_secs", secs_sum / n},
          {"out", out_path}});
    return 0;
}

int cmd_e2e(const CommonOpts& opts, const std::string& text, const std::string& ref_path,
            const std::string& out_path) {
    const nhwc::PipelineConfig cfg = resolve_config(opts);
    const nhwc::E2eReport report = nhwc::run_e2e<Real>(cfg, text, ref_path, out_path, cfg.seed);
    json out = report.to_json();
    out["command"] = "e2e";
    out["out"] = out_path;
    emit(out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"nhwc: zero-shot style-cloning speech + background audio generation"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string manifest_path, out_path, bpe_path, codec_path, text, ref_path, speech_path,
        background_path, pairs_path;
    int target_vocab = 0;
    double duration_s = 4.0;

    auto* train_bpe = app.add_subcommand("train-bpe", "train the byte-level BPE tokenizer");
    add_common(train_bpe, opts);
    train_bpe->add_option("--manifest", manifest_path, "JSONL manifest")->required();
    train_bpe->add_option("--out", out_path, "output vocab path")->required();
    train_bpe->add_option("--target-vocab", target_vocab, "target vocabulary size");

    auto* train_codec = app.add_subcommand("train-codec", "train the VQ speech codec");
    add_common(train_codec, opts);
    train_codec->add_option("--manifest", manifest_path, "JSONL manifest")->required();
    train_codec->add_option("--out", out_path, "output checkpoint path")->required();

    auto* train_lm = app.add_subcommand("train-lm", "train the speech language model");
    add_common(train_lm, opts);
    train_lm->add_option("--manifest", manifest_path, "JSONL manifest")->required();
    train_lm->add_option("--bpe", bpe_path, "trained BPE vocab")->required();
    train_lm->add_option("--codec", codec_path, "trained codec checkpoint")->required();
    train_lm->add_option("--out", out_path, "output checkpoint path")->required();

    auto* synth = app.add_subcommand("synth", "track 1: text + reference -> 48 kHz speech");
    add_common(synth, opts);
    synth->add_option("--text", text, "input transcript")->required();
    synth->add_option("--ref", ref_path, "reference WAV")->required();
    synth->add_option("--out", out_path, "output WAV")->required();

    auto* bg = app.add_subcommand("bg", "track 2: transcript -> description + background WAV");
    add_common(bg, opts);
    bg->add_option("--text", text, "input transcript")->required();
    bg->add_option("--duration", duration_s, "background duration in seconds");
    bg->add_option("--out", out_path, "output WAV")->required();

    auto* mix = app.add_subcommand("mix", "mix speech and background at 48 kHz");
    add_common(mix, opts);
    mix->add_option("--speech", speech_path, "speech WAV")->required();
    mix->add_option("--background", background_path, "background WAV")->required();
    mix->add_option("--out", out_path, "output WAV")->required();

    auto* eval = app.add_subcommand("eval", "CER + SECS evaluation over a pairs file");
    add_common(eval, opts);
    eval->add_option("--pairs", pairs_path, "JSONL pairs file")->required();
    eval->add_option("--codec", codec_path, "codec checkpoint (defaults to config paths.codec)");
    eval->add_option("--out", out_path, "JSONL report path")->required();

    auto* e2e = app.add_subcommand("e2e", "full pipeline: transcript + reference -> mixed WAV");
    add_common(e2e, opts);
    e2e->add_option("--text", text, "input transcript")->required();
    e2e->add_option("--ref", ref_path, "reference WAV")->required();
    e2e->add_option("--out", out_path, "output WAV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(train_bpe))
            return cmd_train_bpe(opts, manifest_path, out_path, target_vocab);
        if (app.got_subcommand(train_codec)) return cmd_train_codec(opts, manifest_path, out_path);
        if (app.got_subcommand(train_lm))
            return cmd_train_lm(opts, manifest_path, bpe_path, codec_path, out_path);
        if (app.got_subcommand(synth)) return cmd_synth(opts, text, ref_path, out_path);
        if (app.got_subcommand(bg)) return cmd_bg(opts, text, duration_s, out_path);
        if (app.got_subcommand(mix)) return cmd_mix(opts, speech_path, background_path, out_path);
        if (app.got_subcommand(eval)) return cmd_eval(opts, pairs_path, codec_path, out_path);
        if (app.got_subcommand(e2e)) return cmd_e2e(opts, text, ref_path, out_path);
    } catch (const nhwc::Error& e) {
        nhwc::log_error(e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        nhwc::log_error(e.what());
        return static_cast<int>(nhwc::ExitCode::io);
    }
    return 0;
}

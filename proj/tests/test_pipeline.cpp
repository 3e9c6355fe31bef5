#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nhwc/pipeline.hpp"
#include "support/synthetic.hpp"

using nhwc::Rng;

namespace {

using Real = float;

nhwc::PipelineConfig tiny_pipeline_config() {
    nhwc::PipelineConfig cfg;
    cfg.codec.codebook_size = 24;
    cfg.codec.latent_dim = 12;
    cfg.codec.ref_dim = 12;
    cfg.codec.hidden = 24;
    cfg.codec.clip_frames = 16;
    cfg.lm.n_layers = 1;
    cfg.lm.n_heads = 2;
    cfg.lm.d_model = 16;
    cfg.lm.speech_vocab_size = 24;
    cfg.lm.ref_dim = 12;
    cfg.lm.max_sequence_len = 128;
    cfg.sampling.mode = nhwc::SamplingConfig::Mode::greedy;
    cfg.sampling.max_new = 16;
    cfg.vocoder.griffin_lim_iterations = 4;
    return cfg;
}

struct TinyWorld {
    std::filesystem::path dir;
    nhwc::PipelineConfig cfg;
    std::vector<nhwc::ManifestEntry> entries;
    nhwc::BpeVocab bpe;
    nhwc::CodecParams<Real> codec;
};

TinyWorld make_tiny_world(const std::string& tag) {
    TinyWorld world{testsupport::fresh_tmp_dir(tag), tiny_pipeline_config(), {}, {},
                    nhwc::CodecParams<Real>{}};
    const std::vector<std::string> transcripts = {"rain falls", "night wind", "abcd", "river run"};
    const std::string manifest = testsupport::write_dataset(
        world.dir, transcripts, {testsupport::speaker_a(), testsupport::speaker_b()}, 10, 0.45,
        0.2);
    world.entries = nhwc::load_manifest(manifest);

    std::vector<std::string> corpus;
    for (const auto& e : world.entries) corpus.push_back(e.text);
    world.bpe = nhwc::train_bpe(corpus, 280);
    world.cfg.lm.text_vocab_size = static_cast<std::size_t>(world.bpe.vocab_size());

    Rng rng(5);
    world.codec = nhwc::CodecParams<Real>::init(world.cfg.codec, rng);
    return world;
}

} // namespace

TEST_CASE("prepare_lm_dataset skips oversized utterances with a count") {
    TinyWorld world = make_tiny_world("prep");

    std::size_t skipped = 0;
    const auto full = nhwc::prepare_lm_dataset<Real>(world.entries, world.bpe, world.codec,
                                                     world.cfg.mel, world.cfg.lm, &skipped);
    REQUIRE(full.size() == world.entries.size());
    REQUIRE(skipped == 0);
    for (const auto& ex : full) {
        REQUIRE_FALSE(ex.speech_ids.empty());
        REQUIRE_FALSE(ex.text_ids.empty());
    }

    // Pick a cutoff between the shortest and longest assembled sequence so
    // some utterances must be skipped and some must survive.
    std::vector<std::size_t> lengths;
    for (const auto& ex : full)
        lengths.push_back(1 + ex.text_ids.size() + 2 + ex.speech_ids.size() + 2);
    const std::size_t lo = *std::min_element(lengths.begin(), lengths.end());
    const std::size_t hi = *std::max_element(lengths.begin(), lengths.end());
    REQUIRE(lo < hi); // fixture sanity: utterance lengths differ

    nhwc::LmConfig small = world.cfg.lm;
    small.max_sequence_len = (lo + hi) / 2;
    const auto partial = nhwc::prepare_lm_dataset<Real>(world.entries, world.bpe, world.codec,
                                                        world.cfg.mel, small, &skipped);
    REQUIRE(skipped > 0);
    REQUIRE(partial.size() + skipped == world.entries.size());
    std::filesystem::remove_all(world.dir);
}

TEST_CASE("train_lm loss curve is reproducible under a fixed seed") {
    TinyWorld world = make_tiny_world("determinism");
    const auto dataset = nhwc::prepare_lm_dataset<Real>(world.entries, world.bpe, world.codec,
                                                        world.cfg.mel, world.cfg.lm);

    auto run = [&](std::uint64_t seed) {
        Rng param_rng = Rng(seed).fork(nhwc::seed_tag::params);
        auto lm = nhwc::LmParams<Real>::init(world.cfg.lm, param_rng);
        auto params = lm.parameters();
        nhwc::AdamW<Real> opt(world.cfg.train.adam(),
                              std::span<nhwc::Tensor<Real>* const>(params));
        Rng train_rng = Rng(seed).fork(nhwc::seed_tag::ref_clip);
        const auto result = nhwc::train_lm(dataset, world.codec, lm, opt, 11, 1, train_rng);
        return result.loss_curve;
    };

    const auto a = run(7);
    const auto b = run(7);
    REQUIRE(a.size() == 11);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]); // bitwise

    std::filesystem::remove_all(world.dir);
}

TEST_CASE("run_e2e names the failing stage and writes nothing on failure") {
    TinyWorld world = make_tiny_world("stages");
    nhwc::PipelineConfig cfg = world.cfg;

    const std::string out_path = (world.dir / "out.wav").string();
    const std::string ref = world.entries[0].wav;

    SECTION("missing codec checkpoint names the codec stage") {
        cfg.paths.bpe = (world.dir / "bpe.txt").string();
        world.bpe.save(cfg.paths.bpe);
        cfg.paths.codec = (world.dir / "missing_codec.nhwc").string();
        cfg.paths.lm = (world.dir / "missing_lm.nhwc").string();
        try {
            nhwc::run_e2e<Real>(cfg, "rain at night", ref, out_path, 1);
            FAIL("expected stage error");
        } catch (const nhwc::Error& e) {
            REQUIRE(std::string(e.what()).find("load-codec") != std::string::npos);
        }
        REQUIRE_FALSE(std::filesystem::exists(out_path));
    }

    SECTION("empty paths fail in the bpe stage") {
        try {
            nhwc::run_e2e<Real>(cfg, "rain at night", ref, out_path, 1);
            FAIL("expected stage error");
        } catch (const nhwc::Error& e) {
            REQUIRE(std::string(e.what()).find("load-bpe") != std::string::npos);
        }
    }

    std::filesystem::remove_all(world.dir);
}

TEST_CASE("e2e on untrained tiny checkpoints is deterministic in greedy mode") {
    TinyWorld world = make_tiny_world("e2e");
    nhwc::PipelineConfig cfg = world.cfg;

    cfg.paths.bpe = (world.dir / "bpe.txt").string();
    world.bpe.save(cfg.paths.bpe);
    cfg.paths.codec = (world.dir / "codec.nhwc").string();
    nhwc::save_codec_checkpoint(world.codec, cfg.paths.codec);
    Rng lm_rng(3);
    auto lm = nhwc::LmParams<Real>::init(cfg.lm, lm_rng);
    cfg.paths.lm = (world.dir / "lm.nhwc").string();
    nhwc::save_lm_checkpoint(lm, cfg.paths.lm);

    const std::string ref = world.entries[1].wav;
    const std::string out1 = (world.dir / "a.wav").string();
    const std::string out2 = (world.dir / "b.wav").string();

    const auto report1 = nhwc::run_e2e<Real>(cfg, "wind across the river", ref, out1, 99);
    const auto report2 = nhwc::run_e2e<Real>(cfg, "wind across the river", ref, out2, 99);

    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    const std::string bytes1 = slurp(out1);
    REQUIRE_FALSE(bytes1.empty());
    REQUIRE(bytes1 == slurp(out2));

    REQUIRE(report1.tokens_generated == report2.tokens_generated);
    REQUIRE(report1.description.kind == nhwc::SceneDescription::Kind::scene);
    REQUIRE(report1.gain_db == -10.0);
    REQUIRE(report1.output_seconds > report1.speech_seconds);

    const auto j = report1.to_json();
    REQUIRE(j.contains("tokens_generated"));
    REQUIRE(j.contains("description"));
    REQUIRE(j["description"].contains("kind"));
    REQUIRE(j.contains("gain_db"));
    REQUIRE(j.contains("limiter_fired"));
    REQUIRE(j["durations"].contains("speech_seconds"));

    std::filesystem::remove_all(world.dir);
}

TEST_CASE("eval pairs harness") {
    TinyWorld world = make_tiny_world("eval");
    const auto a = testsupport::synth_utterance(testsupport::speaker_a(), 31, 0.8);
    const auto b = testsupport::synth_utterance(testsupport::speaker_b(), 32, 0.8);
    const std::string wav_a = (world.dir / "a16.wav").string();
    const std::string wav_b = (world.dir / "b16.wav").string();
    nhwc::write_wav(wav_a, a);
    nhwc::write_wav(wav_b, b);

    const std::string pairs = (world.dir / "pairs.jsonl").string();
    {
        std::ofstream f(pairs);
        nlohmann::json line = {{"id", "p0"},      {"ref_text", "kitten"}, {"hyp_text", "sitting"},
                               {"ref_wav", wav_a}, {"hyp_wav", wav_a}};
        f << line.dump() << "\n";
        line = {{"id", "p1"},      {"ref_text", "same"}, {"hyp_text", "same"},
                {"ref_wav", wav_a}, {"hyp_wav", wav_b}};
        f << line.dump() << "\n";
    }

    const auto records = nhwc::run_eval(pairs, world.codec, world.cfg.mel);
    REQUIRE(records.size() == 2);
    REQUIRE(records[0].id == "p0");
    REQUIRE(records[0].cer_value == Catch::Approx(0.5));
    REQUIRE(records[0].secs_value >= 0.999999); // same audio
    REQUIRE(records[1].cer_value == 0.0);
    REQUIRE(records[1].secs_value <= 1.0);

    const auto j = records[0].to_json();
    REQUIRE(j.contains("id"));
    REQUIRE(j.contains("cer"));
    REQUIRE(j.contains("secs"));

    std::filesystem::remove_all(world.dir);
}

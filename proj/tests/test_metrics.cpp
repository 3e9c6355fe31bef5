#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "nhwc/codec.hpp"
#include "nhwc/metrics.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using nhwc::InvalidInputError;
using nhwc::Rng;

namespace {

std::string random_utf8ish(Rng& rng, std::size_t max_len) {
    static const std::vector<std::string> alphabet = {
        "a", "b", "c", "x", " ",
        "\xe9\x9b\xa8",       // 雨
        "\xe9\xa3\x8e",       // 风
        "\xe5\xb1\xb1",       // 山
        "\xf0\x9f\x99\x82"};  // emoji
    const std::size_t len = rng.uniform_int(max_len + 1);
    std::string s;
    for (std::size_t i = 0; i < len; ++i) s += alphabet[rng.uniform_int(alphabet.size())];
    return s;
}

} // namespace

TEST_CASE("cer anchors") {
    REQUIRE(nhwc::cer("abc", "abc") == 0.0);
    REQUIRE(nhwc::edit_distance("kitten", "sitting") == 3);
    REQUIRE(nhwc::cer("kitten", "sitting") == Catch::Approx(0.5));
    REQUIRE(nhwc::cer("kitten", "") == 1.0);
    REQUIRE_THROWS_AS(nhwc::cer("", "anything"), InvalidInputError);

    SECTION("Chinese counts per character, not per byte") {
        const std::string ref = "\xe5\xa4\xa9\xe7\x94\x9f\xe6\x88\x91\xe6\x9d\x90"; // 天生我材 (4 chars)
        const std::string hyp = "\xe5\xa4\xa9\xe7\x94\x9f\xe6\x88\x91";             // 天生我 (3 chars)
        REQUIRE(nhwc::edit_distance(ref, hyp) == 1);
        REQUIRE(nhwc::cer(ref, hyp) == Catch::Approx(0.25));
    }

    SECTION("cer may exceed 1.0") {
        REQUIRE(nhwc::cer("a", "zzzz") > 1.0);
    }

    SECTION("edit costs must be positive") {
        nhwc::EditCosts costs;
        costs.deletion = 0;
        REQUIRE_THROWS_AS(nhwc::edit_distance("a", "b", costs), InvalidInputError);
    }
}

TEST_CASE("edit distance matches memoized recursive oracle and is a metric") {
    Rng rng(2024);
    for (int i = 0; i < 300; ++i) {
        const std::string a = random_utf8ish(rng, 12);
        const std::string b = random_utf8ish(rng, 12);
        const std::string c = random_utf8ish(rng, 12);
        const std::size_t d_ab = nhwc::edit_distance(a, b);
        REQUIRE(d_ab == oracles::lev_recursive(a, b));
        REQUIRE(d_ab == nhwc::edit_distance(b, a)); // symmetry
        // triangle inequality
        REQUIRE(nhwc::edit_distance(a, c) <= d_ab + nhwc::edit_distance(b, c));
        REQUIRE(nhwc::edit_distance(a, a) == 0);
    }
}

TEST_CASE("cosine similarity basics") {
    SECTION("orthogonal embeddings give 0") {
        const std::vector<double> a = {1.0, 0.0, 2.0, 0.0};
        const std::vector<double> b = {0.0, 3.0, 0.0, -1.0};
        REQUIRE(nhwc::cosine_similarity(a, b) == Catch::Approx(0.0).margin(1e-15));
    }

    SECTION("scale invariance: cos(c*a, b) == cos(a, b) for c > 0") {
        Rng rng(5);
        std::vector<double> a(16), b(16);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        const double base = nhwc::cosine_similarity(a, b);
        for (const double c : {0.001, 0.5, 7.0, 1234.5}) {
            std::vector<double> scaled = a;
            for (auto& v : scaled) v *= c;
            REQUIRE(nhwc::cosine_similarity(scaled, b) == Catch::Approx(base).epsilon(1e-12));
        }
    }

    SECTION("zero-norm input returns 0 with a warning") {
        const std::vector<double> z(4, 0.0);
        const std::vector<double> a = {1.0, 2.0, 3.0, 4.0};
        REQUIRE(nhwc::cosine_similarity(z, a) == 0.0);
    }
}

TEST_CASE("secs") {
    nhwc::CodecConfig ccfg;
    ccfg.codebook_size = 16;
    ccfg.latent_dim = 8;
    ccfg.ref_dim = 8;
    ccfg.hidden = 16;
    Rng rng(9);
    const auto codec = nhwc::CodecParams<float>::init(ccfg, rng);
    const nhwc::MelConfig mel_cfg;

    SECTION("self-similarity is ~1") {
        const auto x = testsupport::synth_utterance(testsupport::speaker_a(), 4, 0.8);
        REQUIRE(nhwc::secs(x, x, codec, mel_cfg) >= 0.999999);
    }

    SECTION("short or wrong-rate audio is invalid") {
        const auto ok = testsupport::synth_utterance(testsupport::speaker_a(), 4, 0.8);
        const auto too_short = testsupport::synth_utterance(testsupport::speaker_a(), 4, 0.3);
        REQUIRE_THROWS_AS(nhwc::secs(ok, too_short, codec, mel_cfg), InvalidInputError);
        auto wrong_rate = testsupport::make_sine(440.0, 1.0, 8000);
        REQUIRE_THROWS_AS(nhwc::secs(ok, wrong_rate, codec, mel_cfg), InvalidInputError);
    }
}

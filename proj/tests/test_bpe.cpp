#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nhwc/bpe.hpp"
#include "nhwc/rng.hpp"

using nhwc::BpeVocab;
using nhwc::InvalidInputError;
using nhwc::Rng;
using nhwc::train_bpe;

namespace {

std::string random_bytes(Rng& rng, std::size_t max_len) {
    const std::size_t len = rng.uniform_int(max_len + 1);
    std::string s(len, '\0');
    for (auto& c : s) c = static_cast<char>(rng.uniform_int(256));
    return s;
}

std::string random_ascii(Rng& rng, std::size_t max_len) {
    const std::size_t len = 1 + rng.uniform_int(max_len);
    std::string s(len, '\0');
    for (auto& c : s) c = static_cast<char>('a' + rng.uniform_int(6));
    return s;
}

// Exhaustive pair-frequency count, independent of the trainer.
std::map<std::pair<int, int>, std::size_t> pair_counts(const std::string& s) {
    std::map<std::pair<int, int>, std::size_t> counts;
    for (std::size_t i = 0; i + 1 < s.size(); ++i)
        ++counts[{static_cast<unsigned char>(s[i]), static_cast<unsigned char>(s[i + 1])}];
    return counts;
}

} // namespace

TEST_CASE("train_bpe picks the most frequent pair first") {
    const std::string corpus_doc = "aaabdaaabac";
    const auto counts = pair_counts(corpus_doc);
    std::pair<int, int> best{-1, -1};
    std::size_t best_count = 0;
    for (const auto& [pair, count] : counts)
        if (count > best_count) {
            best_count = count;
            best = pair;
        }
    REQUIRE(best == std::make_pair(static_cast<int>('a'), static_cast<int>('a')));
    REQUIRE(best_count == 4); // strictly more frequent than any other pair

    const BpeVocab vocab = train_bpe({corpus_doc}, 257);
    REQUIRE(vocab.vocab_size() == 257);
    REQUIRE(vocab.merges().size() == 1);
    REQUIRE(vocab.merges()[0].left == 'a');
    REQUIRE(vocab.merges()[0].right == 'a');
}

TEST_CASE("train_bpe edge cases") {
    SECTION("target 256 trains a pure byte vocab") {
        const BpeVocab vocab = train_bpe({"hello world"}, 256);
        REQUIRE(vocab.vocab_size() == 256);
        REQUIRE(vocab.merges().empty());
    }

    SECTION("empty corpus / bad target are invalid") {
        REQUIRE_THROWS_AS(train_bpe({}, 300), InvalidInputError);
        REQUIRE_THROWS_AS(train_bpe({"abc"}, 255), InvalidInputError);
    }

    SECTION("training stops when no pair repeats") {
        // Every adjacent pair occurs once; no merge is justified.
        const BpeVocab vocab = train_bpe({"abcdef"}, 400);
        REQUIRE(vocab.vocab_size() == 256);
    }

    SECTION("training is deterministic across runs") {
        Rng rng(99);
        std::vector<std::string> corpus;
        for (int i = 0; i < 100; ++i) corpus.push_back(random_ascii(rng, 40));
        const BpeVocab a = train_bpe(corpus, 300);
        const BpeVocab b = train_bpe(corpus, 300);
        REQUIRE(a.vocab_size() == b.vocab_size());
        REQUIRE(a.merges().size() == b.merges().size());
        for (std::size_t i = 0; i < a.merges().size(); ++i) {
            REQUIRE(a.merges()[i].left == b.merges()[i].left);
            REQUIRE(a.merges()[i].right == b.merges()[i].right);
        }
    }
}

TEST_CASE("encode/decode basics") {
    const BpeVocab vocab = train_bpe({"aaabdaaabac"}, 260);

    SECTION("empty input") {
        REQUIRE(vocab.encode("").empty());
        REQUIRE(vocab.decode({}).empty());
    }

    SECTION("single bytes map to byte ids") {
        for (int b : {0, 65, 127, 200, 255}) {
            const std::string s(1, static_cast<char>(b));
            const auto ids = vocab.encode(s);
            REQUIRE(ids == std::vector<int>{b});
        }
    }

    SECTION("decode rejects out-of-range ids") {
        REQUIRE_THROWS_AS(vocab.decode({vocab.vocab_size()}), InvalidInputError);
        REQUIRE_THROWS_AS(vocab.decode({-1}), InvalidInputError);
    }

    SECTION("multibyte UTF-8 round trip") {
        const std::string s = "\xe5\xa4\xa9\xe7\x94\x9f\xe6\x88\x91\xe6\x9d\x90\xe5\xbf"
                              "\x85\xe6\x9c\x89\xe7\x94\xa8"; // 天生我材必有用
        REQUIRE(vocab.decode(vocab.encode(s)) == s);
    }

    SECTION("token_to_id inverts token_bytes") {
        for (int id = 0; id < vocab.vocab_size(); ++id)
            REQUIRE(vocab.token_to_id(vocab.token_bytes(id)) == id);
        REQUIRE(vocab.token_to_id("no such token expansion") == -1);
    }
}

TEST_CASE("losslessness and monotone compression on random byte strings") {
    Rng rng(1234);
    std::vector<std::string> corpus;
    for (int i = 0; i < 50; ++i) corpus.push_back(random_bytes(rng, 60));
    corpus.push_back("the rain in spain stays mainly in the plain");
    const BpeVocab vocab = train_bpe(corpus, 320);

    for (int i = 0; i < 1000; ++i) {
        const std::string s = random_bytes(rng, 80);
        const auto ids = vocab.encode(s);
        REQUIRE(vocab.decode(ids) == s);
        REQUIRE(ids.size() <= s.size());
        for (int id : ids) REQUIRE(id < vocab.vocab_size());
    }
}

TEST_CASE("merges apply in rank order") {
    const BpeVocab vocab = train_bpe({"ababab abc abc abc"}, 258);
    REQUIRE(vocab.merges().size() == 2);
    const auto ids = vocab.encode("abc");
    REQUIRE(ids.size() <= 2);
    REQUIRE(vocab.decode(ids) == "abc");
}

TEST_CASE("vocab serialization round trip") {
    Rng rng(77);
    std::vector<std::string> corpus;
    for (int i = 0; i < 30; ++i) corpus.push_back(random_ascii(rng, 30));
    const BpeVocab vocab = train_bpe(corpus, 290);

    const std::string blob = vocab.serialize();
    REQUIRE(blob.rfind("bpe-v1 " + std::to_string(vocab.vocab_size()), 0) == 0);

    const BpeVocab restored = BpeVocab::deserialize(blob);
    REQUIRE(restored.vocab_size() == vocab.vocab_size());
    const std::string sample = "aber die cadef";
    REQUIRE(restored.encode(sample) == vocab.encode(sample));
    REQUIRE(restored.serialize() == blob);

    REQUIRE_THROWS_AS(BpeVocab::deserialize("nope 300\n"), InvalidInputError);
    REQUIRE_THROWS_AS(BpeVocab::deserialize("bpe-v1 400\n0 1 2\n"), InvalidInputError);
}

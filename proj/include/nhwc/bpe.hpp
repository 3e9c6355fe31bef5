#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nhwc/error.hpp"

namespace nhwc {

/// Byte-level BPE vocabulary. Ids are dense: 0..255 are the byte alphabet,
/// merge products follow in rank order, so vocab_size == 256 + merges.size().
class BpeVocab {
public:
    struct Merge {
        int left = 0;
        int right = 0;
    };

    BpeVocab() {
        expansions_.reserve(256);
        for (int b = 0; b < 256; ++b) expansions_.emplace_back(1, static_cast<char>(b));
    }

    int vocab_size() const { return static_cast<int>(expansions_.size()); }
    const std::vector<Merge>& merges() const { return merges_; }

    /// Byte expansion of a token id.
    const std::string& token_bytes(int id) const {
        if (id < 0 || id >= vocab_size())
            throw InvalidInputError("bpe: token id out of range: " + std::to_string(id));
        return expansions_[static_cast<std::size_t>(id)];
    }

    /// Id of the token whose expansion is exactly these bytes, or -1.
    int token_to_id(const std::string& bytes) const {
        if (bytes.size() == 1) return static_cast<int>(static_cast<unsigned char>(bytes[0]));
        const auto it = id_of_.find(bytes);
        return it == id_of_.end() ? -1 : it->second;
    }

    int add_merge(int left, int right) {
        const int id = vocab_size();
        merges_.push_back({left, right});
        expansions_.push_back(token_bytes(left) + token_bytes(right));
        rank_of_[key(left, right)] = static_cast<int>(merges_.size()) - 1;
        id_of_[expansions_.back()] = id;
        return id;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char b : text) ids.push_back(static_cast<int>(b));
        while (ids.size() >= 2) {
            // Lowest-rank pair present in the sequence merges next; applying
            // ranks in order reproduces the training-time merge order.
            int best_rank = -1;
            for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
                auto it = rank_of_.find(key(ids[i], ids[i + 1]));
                if (it != rank_of_.end() && (best_rank < 0 || it->second < best_rank))
                    best_rank = it->second;
            }
            if (best_rank < 0) break;
            const Merge m = merges_[static_cast<std::size_t>(best_rank)];
            const int merged_id = 256 + best_rank;
            std::vector<int> next;
            next.reserve(ids.size());
            for (std::size_t i = 0; i < ids.size();) {
                if (i + 1 < ids.size() && ids[i] == m.left && ids[i + 1] == m.right) {
                    next.push_back(merged_id);
                    i += 2;
                } else {
                    next.push_back(ids[i]);
                    ++i;
                }
            }
            ids = std::move(next);
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) out += token_bytes(id);
        return out;
    }

    /// Text format: header "bpe-v1 <vocab_size>" then one merge per line,
    /// "rank left_id right_id".
    std::string serialize() const {
        std::ostringstream os;
        os << "bpe-v1 " << vocab_size() << "\n";
        for (std::size_t r = 0; r < merges_.size(); ++r)
            os << r << " " << merges_[r].left << " " << merges_[r].right << "\n";
        return os.str();
    }

    static BpeVocab deserialize(const std::string& text) {
        std::istringstream is(text);
        std::string tag;
        int declared = 0;
        if (!(is >> tag >> declared) || tag != "bpe-v1")
            throw InvalidInputError("bpe: bad vocab header");
        BpeVocab vocab;
        std::size_t rank = 0;
        std::size_t r_in = 0;
        int left = 0, right = 0;
        while (is >> r_in >> left >> right) {
            if (r_in != rank) throw InvalidInputError("bpe: merge ranks must be consecutive");
            if (left < 0 || right < 0 || left >= vocab.vocab_size() || right >= vocab.vocab_size())
                throw InvalidInputError("bpe: merge references unknown token id");
            vocab.add_merge(left, right);
            ++rank;
        }
        if (vocab.vocab_size() != declared)
            throw InvalidInputError("bpe: vocab size does not match header");
        return vocab;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("bpe: cannot open for writing: " + path);
        const std::string s = serialize();
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
        if (!out) throw IoError("bpe: write failed: " + path);
    }

    static BpeVocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("bpe: cannot open: " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return deserialize(ss.str());
    }

private:
    static std::uint64_t key(int left, int right) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) |
               static_cast<std::uint32_t>(right);
    }

    std::vector<Merge> merges_;
    std::vector<std::string> expansions_;
    std::unordered_map<std::uint64_t, int> rank_of_;
    std::unordered_map<std::string, int> id_of_;
};

/// Learns merges by repeatedly fusing the most frequent adjacent token pair
/// across the corpus. Ties break toward the smaller (left_id, right_id) pair,
/// making training deterministic. Stops early once no pair occurs twice.
inline BpeVocab train_bpe(const std::vector<std::string>& corpus, int target_vocab) {
    if (corpus.empty()) throw InvalidInputError("train_bpe: empty corpus");
    if (target_vocab < 256) throw InvalidInputError("train_bpe: target_vocab must be >= 256");

    std::vector<std::vector<int>> sequences;
    sequences.reserve(corpus.size());
    for (const std::string& doc : corpus) {
        std::vector<int> ids;
        ids.reserve(doc.size());
        for (unsigned char b : doc) ids.push_back(static_cast<int>(b));
        sequences.push_back(std::move(ids));
    }

    BpeVocab vocab;
    while (vocab.vocab_size() < target_vocab) {
        std::map<std::pair<int, int>, std::size_t> counts;
        for (const auto& seq : sequences)
            for (std::size_t i = 0; i + 1 < seq.size(); ++i)
                ++counts[{seq[i], seq[i + 1]}];

        std::pair<int, int> best{-1, -1};
        std::size_t best_count = 0;
        for (const auto& [pair, count] : counts) {
            // std::map iterates pairs in ascending order, so strictly-greater
            // keeps the lexicographically smallest pair on ties.
            if (count > best_count) {
                best_count = count;
                best = pair;
            }
        }
        if (best_count < 2) break;

        const int new_id = vocab.add_merge(best.first, best.second);
        for (auto& seq : sequences) {
            if (seq.size() < 2) continue;
            std::vector<int> next;
            next.reserve(seq.size());
            for (std::size_t i = 0; i < seq.size();) {
                if (i + 1 < seq.size() && seq[i] == best.first && seq[i + 1] == best.second) {
                    next.push_back(new_id);
                    i += 2;
                } else {
                    next.push_back(seq[i]);
                    ++i;
                }
            }
            seq = std::move(next);
        }
    }
    return vocab;
}

} // namespace nhwc

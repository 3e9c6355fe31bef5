#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nhwc/error.hpp"
#include "nhwc/tensor.hpp"

namespace nhwc {

/// Shared checkpoint container: magic "NHWC", u32 version, a JSON header
/// carrying the module config plus a named-tensor directory (name, shape,
/// byte offset into the payload), then 32-bit little-endian float data.
/// Tensors are stored sorted by name with contiguous offsets, so a
/// load-then-save round trip is byte-identical.
struct Checkpoint {
    static constexpr char magic[4] = {'N', 'H', 'W', 'C'};
    static constexpr std::uint32_t version = 1;

    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::vector<float> data;
    };

    nlohmann::json config;
    std::vector<Entry> tensors;

    const Entry* find(const std::string& name) const {
        for (const auto& e : tensors)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::string serialize() const {
        std::vector<const Entry*> ordered;
        ordered.reserve(tensors.size());
        for (const auto& e : tensors) ordered.push_back(&e);
        std::sort(ordered.begin(), ordered.end(),
                  [](const Entry* a, const Entry* b) { return a->name < b->name; });

        nlohmann::json dir = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const Entry* e : ordered) {
            if (e->data.size() != Tensor<float>::count(e->shape))
                throw InvalidInputError("checkpoint: tensor '" + e->name +
                                        "' data does not match its shape");
            dir.push_back({{"name", e->name}, {"shape", e->shape}, {"offset", offset}});
            offset += e->data.size() * 4;
        }
        nlohmann::json header = {{"config", config}, {"tensors", dir}};
        const std::string header_str = header.dump();

        std::string out;
        out.reserve(16 + header_str.size() + offset);
        out.append(magic, 4);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((version >> (8 * i)) & 0xFF));
        const std::uint64_t hlen = header_str.size();
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xFF));
        out += header_str;
        for (const Entry* e : ordered) {
            static_assert(sizeof(float) == 4);
            const std::size_t bytes = e->data.size() * 4;
            const std::size_t at = out.size();
            out.resize(at + bytes);
            std::memcpy(out.data() + at, e->data.data(), bytes);
        }
        return out;
    }

    void save(const std::string& path) const {
        const std::string blob = serialize();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("checkpoint: cannot open for writing: " + path);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!f) throw IoError("checkpoint: write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("checkpoint: cannot open: " + path);
        f.seekg(0, std::ios::end);
        const std::uint64_t file_size = static_cast<std::uint64_t>(f.tellg());
        f.seekg(0, std::ios::beg);

        // Magic, version and header length are validated before anything
        // payload-sized is allocated.
        char head[16];
        if (file_size < 16 || !f.read(head, 16))
            throw IoError("checkpoint: file too short: " + path);
        if (std::memcmp(head, magic, 4) != 0)
            throw InvalidInputError("checkpoint: bad magic in " + path);
        std::uint32_t ver = 0;
        for (int i = 0; i < 4; ++i)
            ver |= static_cast<std::uint32_t>(static_cast<unsigned char>(head[4 + i])) << (8 * i);
        if (ver != version)
            throw InvalidInputError("checkpoint: unsupported version " + std::to_string(ver) +
                                    " in " + path);
        std::uint64_t hlen = 0;
        for (int i = 0; i < 8; ++i)
            hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(head[8 + i])) << (8 * i);
        if (16 + hlen > file_size)
            throw IoError("checkpoint: header extends past end of file: " + path);

        std::string header_str(hlen, '\0');
        if (!f.read(header_str.data(), static_cast<std::streamsize>(hlen)))
            throw IoError("checkpoint: header read failed: " + path);

        nlohmann::json header;
        try {
            header = nlohmann::json::parse(header_str);
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInputError("checkpoint: header is not valid JSON: " +
                                    std::string(e.what()));
        }
        if (!header.contains("config") || !header.contains("tensors") ||
            !header["tensors"].is_array())
            throw InvalidInputError("checkpoint: header missing config/tensors: " + path);

        const std::uint64_t payload_size = file_size - 16 - hlen;
        struct DirEntry {
            std::string name;
            std::vector<std::size_t> shape;
            std::uint64_t offset;
            std::uint64_t bytes;
        };
        std::vector<DirEntry> dir;
        for (const auto& item : header["tensors"]) {
            DirEntry d;
            d.name = item.at("name").get<std::string>();
            d.shape = item.at("shape").get<std::vector<std::size_t>>();
            d.offset = item.at("offset").get<std::uint64_t>();
            d.bytes = static_cast<std::uint64_t>(Tensor<float>::count(d.shape)) * 4;
            if (d.offset + d.bytes > payload_size)
                throw IoError("checkpoint: tensor '" + d.name +
                              "' extends past end of payload: " + path);
            dir.push_back(std::move(d));
        }
        // Offsets must not overlap.
        std::vector<const DirEntry*> by_offset;
        for (const auto& d : dir) by_offset.push_back(&d);
        std::sort(by_offset.begin(), by_offset.end(),
                  [](const DirEntry* a, const DirEntry* b) { return a->offset < b->offset; });
        for (std::size_t i = 1; i < by_offset.size(); ++i)
            if (by_offset[i - 1]->offset + by_offset[i - 1]->bytes > by_offset[i]->offset)
                throw IoError("checkpoint: overlapping tensor payloads: " + path);

        std::vector<char> payload(payload_size);
        if (payload_size > 0 &&
            !f.read(payload.data(), static_cast<std::streamsize>(payload_size)))
            throw IoError("checkpoint: truncated payload: " + path);

        Checkpoint ckpt;
        ckpt.config = header["config"];
        for (const auto& d : dir) {
            Entry e;
            e.name = d.name;
            e.shape = d.shape;
            e.data.resize(d.bytes / 4);
            std::memcpy(e.data.data(), payload.data() + d.offset, d.bytes);
            ckpt.tensors.push_back(std::move(e));
        }
        return ckpt;
    }
};

/// Snapshot named Real tensors into checkpoint entries (stored as f32).
template <class Real>
void checkpoint_add_named(Checkpoint& ckpt,
                          const std::vector<std::pair<std::string, Tensor<Real>*>>& named) {
    for (const auto& [name, tensor] : named) {
        Checkpoint::Entry e;
        e.name = name;
        e.shape = tensor->shape();
        e.data.resize(tensor->numel());
        for (std::size_t i = 0; i < e.data.size(); ++i)
            e.data[i] = static_cast<float>(tensor->data()[i]);
        ckpt.tensors.push_back(std::move(e));
    }
}

/// Restore named tensors from a checkpoint, validating names and shapes.
template <class Real>
void checkpoint_restore_named(const Checkpoint& ckpt,
                              const std::vector<std::pair<std::string, Tensor<Real>*>>& named) {
    for (const auto& [name, tensor] : named) {
        const Checkpoint::Entry* e = ckpt.find(name);
        if (e == nullptr)
            throw InvalidInputError("checkpoint: missing tensor '" + name + "'");
        if (e->shape != tensor->shape())
            throw InvalidInputError("checkpoint: shape mismatch for tensor '" + name + "'");
        for (std::size_t i = 0; i < e->data.size(); ++i)
            tensor->data()[i] = static_cast<Real>(e->data[i]);
    }
}

} // namespace nhwc

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "nhwc/error.hpp"
#include "nhwc/wav.hpp"

namespace nhwc {

/// One dataset row: utterance id, wav path (resolved relative to the
/// manifest file), transcript.
struct ManifestEntry {
    std::string id;
    std::string wav;
    std::string text;
};

/// Parses a JSON-lines manifest, one {"id","wav","text"} object per line.
/// Ids must be unique; each wav must exist and parse as mono PCM.
inline std::vector<ManifestEntry> load_manifest(const std::string& path,
                                                bool validate_audio = true) {
    std::ifstream f(path);
    if (!f) throw IoError("manifest: cannot open: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();

    std::vector<ManifestEntry> entries;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInputError("manifest: line " + std::to_string(line_no) +
                                    ": parse error: " + e.what());
        }
        for (const char* key : {"id", "wav", "text"})
            if (!obj.contains(key) || !obj[key].is_string())
                throw InvalidInputError("manifest: line " + std::to_string(line_no) +
                                        ": missing or non-string \"" + key + "\"");
        ManifestEntry entry;
        entry.id = obj["id"].get<std::string>();
        entry.text = obj["text"].get<std::string>();
        std::filesystem::path wav_path = obj["wav"].get<std::string>();
        if (wav_path.is_relative()) wav_path = base / wav_path;
        entry.wav = wav_path.string();

        if (!seen_ids.insert(entry.id).second)
            throw InvalidInputError("manifest: line " + std::to_string(line_no) +
                                    ": duplicate id \"" + entry.id + "\"");
        if (validate_audio) {
            if (!std::filesystem::exists(wav_path))
                throw InvalidInputError("manifest: line " + std::to_string(line_no) +
                                        ": wav does not exist: " + entry.wav);
            read_wav(entry.wav); // rejects multi-channel / malformed files
        }
        entries.push_back(std::move(entry));
    }
    return entries;
}

} // namespace nhwc

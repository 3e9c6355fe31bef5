#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "nhwc/dsp.hpp"
#include "nhwc/error.hpp"
#include "nhwc/log.hpp"
#include "nhwc/rng.hpp"

namespace nhwc {

inline constexpr int description_word_limit = 25;

struct SceneDescription {
    enum class Kind { scene, music };
    Kind kind = Kind::scene;
    std::string text;
    std::vector<std::string> tags;
};

inline const char* to_string(SceneDescription::Kind k) {
    return k == SceneDescription::Kind::scene ? "scene" : "music";
}

namespace lexicon {

struct Entry {
    const char* tag;
    std::vector<const char*> keywords;
    const char* phrase;
};

// Closed tag lexicon. ASCII keywords match whole words, CJK keywords match
// as substrings.
inline const std::vector<Entry>& scene_entries() {
    static const std::vector<Entry> entries = {
        {"rain", {"rain", "raining", "rainfall", "drizzle", "storm", "雨"}, "gentle rain falling"},
        {"wind", {"wind", "breeze", "gale", "风", "風"}, "soft wind blowing"},
        {"birds", {"bird", "birds", "birdsong", "sparrow", "鸟", "鳥", "雁"}, "birds singing in the distance"},
        {"crowd", {"crowd", "market", "people", "street", "人群", "市集", "集市", "街"}, "a murmuring crowd nearby"},
        {"fire", {"fire", "flame", "bonfire", "campfire", "hearth", "火", "篝"}, "a softly crackling fire"},
        {"water", {"water", "river", "stream", "sea", "ocean", "waves", "brook", "水", "河", "江", "海", "溪", "泉"}, "water flowing over stones"},
        {"night", {"night", "moon", "stars", "midnight", "夜", "月", "星"}, "calm night air with crickets"},
    };
    return entries;
}

inline const std::vector<Entry>& music_entries() {
    static const std::vector<Entry> entries = {
        {"solemn-music", {"solemn", "sorrow", "grief", "mourn", "悲", "哀", "挽"}, "slow solemn music with a low sustained pad"},
        {"calm-music", {"music", "melody", "song", "琴", "歌", "乐"}, "calm ambient music with a soft sustained pad"},
    };
    return entries;
}

inline bool is_scene_tag(const std::string& tag) {
    for (const auto& e : scene_entries())
        if (tag == e.tag) return true;
    return false;
}

inline const char* phrase_for(const std::string& tag) {
    for (const auto& e : scene_entries())
        if (tag == e.tag) return e.phrase;
    for (const auto& e : music_entries())
        if (tag == e.tag) return e.phrase;
    return "soft neutral ambience";
}

inline bool keyword_hits(const std::string& text_lower, const std::string& keyword) {
    const bool ascii = std::all_of(keyword.begin(), keyword.end(), [](unsigned char c) {
        return c < 0x80;
    });
    if (!ascii) return text_lower.find(keyword) != std::string::npos;
    // Whole-word match for ASCII keywords.
    std::size_t pos = 0;
    while ((pos = text_lower.find(keyword, pos)) != std::string::npos) {
        const bool left_ok =
            pos == 0 || !std::isalpha(static_cast<unsigned char>(text_lower[pos - 1]));
        const std::size_t end = pos + keyword.size();
        const bool right_ok = end >= text_lower.size() ||
                              !std::isalpha(static_cast<unsigned char>(text_lower[end]));
        if (left_ok && right_ok) return true;
        pos += 1;
    }
    return false;
}

inline std::vector<std::string> match_tags(const std::string& text,
                                           const std::vector<Entry>& entries) {
    std::string lower = text;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::vector<std::string> tags;
    for (const auto& e : entries)
        for (const auto* kw : e.keywords)
            if (keyword_hits(lower, kw)) {
                tags.emplace_back(e.tag);
                break;
            }
    return tags;
}

} // namespace lexicon

inline std::size_t word_count(const std::string& text) {
    std::istringstream is(text);
    std::string w;
    std::size_t n = 0;
    while (is >> w) ++n;
    return n;
}

struct RemoteLlmConfig {
    std::string endpoint; // e.g. http://127.0.0.1:8080/complete
    std::string prompt_template;
    double timeout_s = 10.0;
    int retries = 1;
};

inline std::string default_prompt_template() {
    return "Read the transcript below. Reply with one line, either "
           "\"scene: <description>\" if it evokes a concrete physical scene, or "
           "\"music: <description>\" if it is abstract. Use at most 25 words.\n"
           "Transcript: {transcript}";
}

/// Description source: a rule-based lexicon matcher, optionally fronted by a
/// remote LLM over HTTP. Remote failures never crash the pipeline; they fall
/// back to the rule-based path.
class DescriptionProvider {
public:
    static DescriptionProvider rule_based() { return DescriptionProvider{}; }

    static DescriptionProvider remote_llm(RemoteLlmConfig cfg) {
        validate_template(cfg.prompt_template);
        DescriptionProvider p;
        p.remote_ = std::move(cfg);
        return p;
    }

    bool is_remote() const { return remote_.has_value(); }
    const std::optional<RemoteLlmConfig>& remote_config() const { return remote_; }

private:
    static void validate_template(const std::string& tmpl) {
        std::string lower = tmpl;
        std::transform(lower.begin(), lower.end(), lower.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (lower.find("scene") == std::string::npos || lower.find("music") == std::string::npos)
            throw InvalidInputError(
                "remote_llm: prompt template must contain the scene/music instruction");
        if (lower.find(std::to_string(description_word_limit)) == std::string::npos)
            throw InvalidInputError("remote_llm: prompt template must state the word limit");
        if (tmpl.find("{transcript}") == std::string::npos)
            throw InvalidInputError("remote_llm: prompt template must contain {transcript}");
    }

    std::optional<RemoteLlmConfig> remote_;
};

namespace detail {

inline SceneDescription rule_based_describe(const std::string& transcript) {
    SceneDescription desc;
    std::vector<std::string> scene_tags = lexicon::match_tags(transcript, lexicon::scene_entries());
    if (!scene_tags.empty()) {
        desc.kind = SceneDescription::Kind::scene;
        if (scene_tags.size() > 3) scene_tags.resize(3);
        desc.tags = scene_tags;
    } else {
        // No tangible scene in the text: fall back to a musical description.
        desc.kind = SceneDescription::Kind::music;
        std::vector<std::string> music_tags =
            lexicon::match_tags(transcript, lexicon::music_entries());
        desc.tags = {music_tags.empty() ? "calm-music" : music_tags.front()};
    }
    std::string text;
    for (const auto& tag : desc.tags) {
        if (!text.empty()) text += ", ";
        text += lexicon::phrase_for(tag);
    }
    desc.text = text;
    return desc;
}

struct ParsedUrl {
    std::string host;
    int port = 80;
    std::string path = "/";
};

inline std::optional<ParsedUrl> parse_http_url(const std::string& url) {
    const std::string prefix = "http://";
    if (url.rfind(prefix, 0) != 0) return std::nullopt;
    std::string rest = url.substr(prefix.size());
    ParsedUrl out;
    const std::size_t slash = rest.find('/');
    std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
    out.path = slash == std::string::npos ? "/" : rest.substr(slash);
    const std::size_t colon = hostport.find(':');
    if (colon == std::string::npos) {
        out.host = hostport;
    } else {
        out.host = hostport.substr(0, colon);
        try {
            out.port = std::stoi(hostport.substr(colon + 1));
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }
    if (out.host.empty()) return std::nullopt;
    return out;
}

inline std::optional<SceneDescription> parse_llm_reply(const std::string& reply) {
    std::string text = reply;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return std::nullopt;
    text = text.substr(first);
    std::string lower = text;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });

    SceneDescription desc;
    std::string body;
    if (lower.rfind("scene:", 0) == 0) {
        desc.kind = SceneDescription::Kind::scene;
        body = text.substr(6);
    } else if (lower.rfind("music:", 0) == 0) {
        desc.kind = SceneDescription::Kind::music;
        body = text.substr(6);
    } else {
        return std::nullopt;
    }
    const auto b = body.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return std::nullopt;
    const auto e = body.find_last_not_of(" \t\r\n");
    body = body.substr(b, e - b + 1);
    if (body.empty() || word_count(body) > description_word_limit) return std::nullopt;

    desc.text = body;
    if (desc.kind == SceneDescription::Kind::scene) {
        desc.tags = lexicon::match_tags(body, lexicon::scene_entries());
        if (desc.tags.empty()) desc.tags = {"ambience"};
        if (desc.tags.size() > 3) desc.tags.resize(3);
    } else {
        std::vector<std::string> music_tags = lexicon::match_tags(body, lexicon::music_entries());
        desc.tags = {music_tags.empty() ? "calm-music" : music_tags.front()};
    }
    return desc;
}

} // namespace detail

/// Transcript -> scene/music description. Rule-based matching is total over
/// non-empty transcripts; the remote path validates the reply and falls back
/// on any failure.
inline SceneDescription describe(const std::string& transcript,
                                 const DescriptionProvider& provider) {
    if (transcript.empty()) throw InvalidInputError("describe: empty transcript");
    if (!provider.is_remote()) return detail::rule_based_describe(transcript);

    const RemoteLlmConfig& cfg = *provider.remote_config();
    const auto url = detail::parse_http_url(cfg.endpoint);
    if (!url) {
        log_warn("remote_llm: bad endpoint '" + cfg.endpoint + "', using rule-based description");
        return detail::rule_based_describe(transcript);
    }

    std::string prompt = cfg.prompt_template;
    const std::size_t slot = prompt.find("{transcript}");
    prompt.replace(slot, std::string("{transcript}").size(), transcript);

    const int attempts = std::max(1, cfg.retries + 1);
    for (int attempt = 0; attempt < attempts; ++attempt) {
        httplib::Client client(url->host, url->port);
        client.set_connection_timeout(static_cast<time_t>(cfg.timeout_s),
                                      static_cast<time_t>((cfg.timeout_s - static_cast<time_t>(cfg.timeout_s)) * 1e6));
        client.set_read_timeout(static_cast<time_t>(cfg.timeout_s), 0);
        nlohmann::json body = {{"prompt", prompt}};
        auto res = client.Post(url->path, body.dump(), "application/json");
        if (!res || res->status != 200) {
            log_warn("remote_llm: request failed (attempt " + std::to_string(attempt + 1) + ")");
            continue;
        }
        try {
            const auto reply = nlohmann::json::parse(res->body);
            if (!reply.contains("text") || !reply["text"].is_string()) {
                log_warn("remote_llm: reply missing text field");
                continue;
            }
            auto parsed = detail::parse_llm_reply(reply["text"].get<std::string>());
            if (!parsed) {
                log_warn("remote_llm: could not parse reply into a description");
                continue;
            }
            return *parsed;
        } catch (const nlohmann::json::exception&) {
            log_warn("remote_llm: reply was not valid JSON");
        }
    }
    log_warn("remote_llm: all attempts failed, using rule-based description");
    return detail::rule_based_describe(transcript);
}

// ---------------------------------------------------------------------------
// Procedural background synthesis.

namespace ambient {

struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
    double z1 = 0, z2 = 0;

    static Biquad bandpass(double rate, double fc, double q) {
        Biquad f;
        const double w = 2.0 * pi * fc / rate;
        const double alpha = std::sin(w) / (2.0 * q);
        const double a0 = 1.0 + alpha;
        f.b0 = alpha / a0;
        f.b1 = 0.0;
        f.b2 = -alpha / a0;
        f.a1 = -2.0 * std::cos(w) / a0;
        f.a2 = (1.0 - alpha) / a0;
        return f;
    }

    static Biquad lowpass(double rate, double fc, double q = 0.7071) {
        Biquad f;
        const double w = 2.0 * pi * fc / rate;
        const double alpha = std::sin(w) / (2.0 * q);
        const double c = std::cos(w);
        const double a0 = 1.0 + alpha;
        f.b0 = (1.0 - c) / 2.0 / a0;
        f.b1 = (1.0 - c) / a0;
        f.b2 = (1.0 - c) / 2.0 / a0;
        f.a1 = -2.0 * c / a0;
        f.a2 = (1.0 - alpha) / a0;
        return f;
    }

    static Biquad highpass(double rate, double fc, double q = 0.7071) {
        Biquad f;
        const double w = 2.0 * pi * fc / rate;
        const double alpha = std::sin(w) / (2.0 * q);
        const double c = std::cos(w);
        const double a0 = 1.0 + alpha;
        f.b0 = (1.0 + c) / 2.0 / a0;
        f.b1 = -(1.0 + c) / a0;
        f.b2 = (1.0 + c) / 2.0 / a0;
        f.a1 = -2.0 * c / a0;
        f.a2 = (1.0 - alpha) / a0;
        return f;
    }

    double process(double x) {
        const double y = b0 * x + z1;
        z1 = b1 * x - a1 * y + z2;
        z2 = b2 * x - a2 * y;
        return y;
    }
};

inline std::vector<double> render_rain(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    Biquad bp = Biquad::bandpass(rate, 1800.0, 0.5);
    for (std::size_t i = 0; i < n; ++i) out[i] = 2.2 * bp.process(rng.normal() * 0.35);
    // Sparse droplet ticks on top of the wash.
    const std::size_t droplets = static_cast<std::size_t>(n / rate * 24.0);
    for (std::size_t k = 0; k < droplets; ++k) {
        const std::size_t at = static_cast<std::size_t>(rng.uniform_int(n));
        const double amp = 0.1 + 0.2 * rng.uniform();
        const double decay = 2e-3 * rate;
        for (std::size_t i = at; i < std::min(n, at + static_cast<std::size_t>(decay * 6)); ++i)
            out[i] += amp * rng.normal() * std::exp(-static_cast<double>(i - at) / decay);
    }
    return out;
}

inline std::vector<double> render_wind(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    Biquad lp = Biquad::lowpass(rate, 320.0);
    const double lfo_hz = 0.1 + 0.1 * rng.uniform();
    const double phase = rng.uniform() * 2.0 * pi;
    for (std::size_t i = 0; i < n; ++i) {
        const double mod =
            0.55 + 0.45 * std::sin(2.0 * pi * lfo_hz * static_cast<double>(i) / rate + phase);
        out[i] = 7.0 * mod * lp.process(rng.normal() * 0.4);
    }
    return out;
}

inline std::vector<double> render_birds(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    Biquad lp = Biquad::lowpass(rate, 900.0);
    for (std::size_t i = 0; i < n; ++i) out[i] = 0.4 * lp.process(rng.normal() * 0.05);
    const std::size_t chirps = std::max<std::size_t>(2, static_cast<std::size_t>(n / rate * 2.5));
    for (std::size_t k = 0; k < chirps; ++k) {
        const std::size_t at = static_cast<std::size_t>(rng.uniform_int(n));
        const double dur = (0.08 + 0.12 * rng.uniform()) * rate;
        const double f0 = 2200.0 + 1400.0 * rng.uniform();
        const double sweep = (rng.uniform() - 0.5) * 900.0;
        for (std::size_t i = at; i < std::min(n, at + static_cast<std::size_t>(dur)); ++i) {
            const double u = static_cast<double>(i - at) / dur;
            const double env = 0.5 - 0.5 * std::cos(2.0 * pi * u);
            const double f = f0 + sweep * u;
            out[i] += 0.3 * env * std::sin(2.0 * pi * f * static_cast<double>(i - at) / rate);
        }
    }
    return out;
}

inline std::vector<double> render_crowd(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    for (int voice = 0; voice < 4; ++voice) {
        Biquad bp = Biquad::bandpass(rate, 450.0 + 280.0 * voice, 1.2);
        const double lfo = 0.3 + 0.5 * rng.uniform();
        const double phase = rng.uniform() * 2.0 * pi;
        for (std::size_t i = 0; i < n; ++i) {
            const double mod =
                0.6 + 0.4 * std::sin(2.0 * pi * lfo * static_cast<double>(i) / rate + phase);
            out[i] += 1.4 * mod * bp.process(rng.normal() * 0.3);
        }
    }
    for (double& v : out) v /= 4.0;
    return out;
}

inline std::vector<double> render_fire(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    Biquad lp = Biquad::lowpass(rate, 240.0);
    for (std::size_t i = 0; i < n; ++i) out[i] = 3.0 * lp.process(rng.normal() * 0.25);
    Biquad hp = Biquad::highpass(rate, 1500.0);
    const std::size_t crackles = static_cast<std::size_t>(n / rate * 14.0);
    for (std::size_t k = 0; k < crackles; ++k) {
        const std::size_t at = static_cast<std::size_t>(rng.uniform_int(n));
        const double amp = 0.15 + 0.3 * rng.uniform();
        const double decay = 1.2e-3 * rate;
        for (std::size_t i = at; i < std::min(n, at + static_cast<std::size_t>(decay * 5)); ++i)
            out[i] += amp * hp.process(rng.normal()) *
                      std::exp(-static_cast<double>(i - at) / decay);
    }
    return out;
}

inline std::vector<double> render_water(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    Biquad bp = Biquad::bandpass(rate, 800.0, 0.7);
    double brown = 0.0;
    const double phase = rng.uniform() * 2.0 * pi;
    for (std::size_t i = 0; i < n; ++i) {
        brown = 0.985 * brown + rng.normal() * 0.12;
        const double mod =
            0.75 + 0.25 * std::sin(2.0 * pi * 0.3 * static_cast<double>(i) / rate + phase);
        out[i] = 3.2 * mod * bp.process(brown + rng.normal() * 0.2);
    }
    return out;
}

inline std::vector<double> render_night(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    Biquad lp = Biquad::lowpass(rate, 500.0);
    for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * lp.process(rng.normal() * 0.06);
    // Cricket chirp trains: short bursts of pulsed high tones.
    std::size_t at = static_cast<std::size_t>(rng.uniform_int(std::max<std::size_t>(1, n / 4)));
    while (at < n) {
        const double burst = (0.25 + 0.15 * rng.uniform()) * rate;
        const double f = 4200.0 + 500.0 * rng.uniform();
        for (std::size_t i = at; i < std::min(n, at + static_cast<std::size_t>(burst)); ++i) {
            const double u = static_cast<double>(i - at) / rate;
            const double gate = std::sin(2.0 * pi * 28.0 * u) > 0.2 ? 1.0 : 0.0;
            out[i] += 0.18 * gate * std::sin(2.0 * pi * f * u);
        }
        at += static_cast<std::size_t>(burst + (0.4 + 0.8 * rng.uniform()) * rate);
    }
    return out;
}

inline std::vector<double> render_ambience(std::size_t n, double rate, Rng& rng) {
    std::vector<double> out(n, 0.0);
    Biquad lp = Biquad::lowpass(rate, 1200.0);
    for (std::size_t i = 0; i < n; ++i) out[i] = 1.2 * lp.process(rng.normal() * 0.12);
    return out;
}

inline std::vector<double> render_pad(std::size_t n, double rate, Rng& rng, bool minor) {
    // Sustained triad with slow attack; minor voicing sits an octave lower.
    const double root = minor ? 110.0 : 220.0;
    const std::vector<double> ratios = minor ? std::vector<double>{1.0, 1.1892, 1.4983, 2.0}
                                             : std::vector<double>{1.0, 1.2599, 1.4983, 2.0};
    std::vector<double> out(n, 0.0);
    const double attack = (minor ? 2.0 : 1.2) * rate;
    const double trem_hz = 0.2 + 0.1 * rng.uniform();
    for (const double ratio : ratios) {
        const double f = root * ratio;
        const double detune = 1.0 + (rng.uniform() - 0.5) * 0.003;
        const double phase = rng.uniform() * 2.0 * pi;
        for (std::size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i);
            double env = t < attack ? 0.5 - 0.5 * std::cos(pi * t / attack) : 1.0;
            const double tail = static_cast<double>(n) - t;
            if (tail < attack) env *= 0.5 - 0.5 * std::cos(pi * tail / attack);
            const double trem = 1.0 + 0.1 * std::sin(2.0 * pi * trem_hz * t / rate);
            out[i] += 0.22 * env * trem * std::sin(2.0 * pi * f * detune * t / rate + phase);
        }
    }
    return out;
}

} // namespace ambient

/// Procedural background audio keyed by description tags; exact duration,
/// deterministic per seed, peak held at or below 0.9.
inline AudioBuffer render_background(const SceneDescription& desc, double duration_s, Rng& rng,
                                     int sample_rate = 48000) {
    if (duration_s <= 0.0) throw InvalidInputError("render_background: duration must be positive");
    if (desc.tags.empty()) throw InvalidInputError("render_background: description has no tags");
    const std::size_t n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));
    const double rate = static_cast<double>(sample_rate);

    std::vector<double> acc(n, 0.0);
    for (const std::string& tag : desc.tags) {
        std::vector<double> part;
        if (tag == "rain")
            part = ambient::render_rain(n, rate, rng);
        else if (tag == "wind")
            part = ambient::render_wind(n, rate, rng);
        else if (tag == "birds")
            part = ambient::render_birds(n, rate, rng);
        else if (tag == "crowd")
            part = ambient::render_crowd(n, rate, rng);
        else if (tag == "fire")
            part = ambient::render_fire(n, rate, rng);
        else if (tag == "water")
            part = ambient::render_water(n, rate, rng);
        else if (tag == "night")
            part = ambient::render_night(n, rate, rng);
        else if (tag == "calm-music")
            part = ambient::render_pad(n, rate, rng, false);
        else if (tag == "solemn-music")
            part = ambient::render_pad(n, rate, rng, true);
        else if (tag == "ambience")
            part = ambient::render_ambience(n, rate, rng);
        else {
            log_warn("render_background: unknown tag '" + tag + "', using neutral ambience");
            part = ambient::render_ambience(n, rate, rng);
        }
        for (std::size_t i = 0; i < n; ++i) acc[i] += part[i];
    }
    const double inv = 1.0 / static_cast<double>(desc.tags.size());
    double peak = 0.0;
    for (double& v : acc) {
        v *= inv;
        peak = std::max(peak, std::abs(v));
    }
    const double gain = peak > 0.9 ? 0.9 / peak : 1.0;

    AudioBuffer out;
    out.sample_rate = sample_rate;
    out.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = static_cast<float>(acc[i] * gain);
    return out;
}

// ---------------------------------------------------------------------------
// Mixing.

struct MixConfig {
    double background_gain_db = -10.0;
    int output_rate = 48000;
    double fade_ms = 500.0;
    double tail_ms = 500.0;

    void validate() const {
        if (background_gain_db > 0.0)
            throw InvalidInputError("mix: background gain must be <= 0 dB");
        if (fade_ms < 0.0) throw InvalidInputError("mix: fade_ms must be >= 0");
        if (output_rate <= 0) throw InvalidInputError("mix: output rate must be positive");
    }
};

struct MixResult {
    AudioBuffer audio;
    bool limiter_fired = false;
    double applied_gain_db = 0.0;
};

/// Loops or trims the background to speech length plus tail, fades its ends,
/// applies the background gain, and sums. The speech path gets unity gain.
/// If the sum exceeds full scale the whole mix is rescaled by 1/peak.
inline MixResult mix(const AudioBuffer& speech, const AudioBuffer& background,
                     const MixConfig& cfg) {
    cfg.validate();
    if (speech.samples.empty() || background.samples.empty())
        throw InvalidInputError("mix: both inputs must be non-empty");

    const AudioBuffer speech_out = resample(speech, cfg.output_rate);
    const AudioBuffer bg_out = resample(background, cfg.output_rate);
    if (bg_out.samples.empty())
        throw InvalidInputError("mix: background is empty after resampling");

    const std::size_t tail =
        static_cast<std::size_t>(std::llround(cfg.tail_ms / 1000.0 * cfg.output_rate));
    const std::size_t total = speech_out.samples.size() + tail;

    // Loop-or-trim the background to the target length.
    std::vector<float> bg(total);
    for (std::size_t i = 0; i < total; ++i) bg[i] = bg_out.samples[i % bg_out.samples.size()];

    std::size_t fade =
        static_cast<std::size_t>(std::llround(cfg.fade_ms / 1000.0 * cfg.output_rate));
    fade = std::min(fade, total / 2);
    for (std::size_t i = 0; i < fade; ++i) {
        const float w = static_cast<float>(
            0.5 - 0.5 * std::cos(pi * static_cast<double>(i) / static_cast<double>(fade)));
        bg[i] *= w;
        bg[total - 1 - i] *= w;
    }

    const float gain = static_cast<float>(std::pow(10.0, cfg.background_gain_db / 20.0));

    MixResult result;
    result.applied_gain_db = cfg.background_gain_db;
    result.audio.sample_rate = cfg.output_rate;
    result.audio.samples.resize(total);
    double peak = 0.0;
    for (std::size_t i = 0; i < total; ++i) {
        const float s = i < speech_out.samples.size() ? speech_out.samples[i] : 0.0f;
        const float v = s + bg[i] * gain;
        result.audio.samples[i] = v;
        peak = std::max(peak, std::abs(static_cast<double>(v)));
    }
    if (peak > 1.0) {
        result.limiter_fired = true;
        const float scale = static_cast<float>(1.0 / peak);
        for (float& v : result.audio.samples) v *= scale;
        log_info("mix: limiter engaged, peak " + std::to_string(peak));
    }
    return result;
}

} // namespace nhwc

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nhwc/error.hpp"
#include "nhwc/rng.hpp"
#include "nhwc/tensor.hpp"

namespace nhwc {

/// Decoder-only transformer over a unified vocabulary:
/// [0, text_vocab)                    text tokens
/// [text_vocab, text_vocab+speech)    speech tokens
/// then BOT, EOT, BOS, EOS, PAD.
struct LmConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_model = 128;
    std::size_t text_vocab_size = 512;
    std::size_t speech_vocab_size = 256;
    std::size_t ref_dim = 128;
    std::size_t max_sequence_len = 512;
    double dropout = 0.0;
    double text_loss_weight = 1.0;

    static constexpr std::size_t n_specials = 5;

    std::size_t unified_vocab() const {
        return text_vocab_size + speech_vocab_size + n_specials;
    }
    int bot() const { return static_cast<int>(text_vocab_size + speech_vocab_size + 0); }
    int eot() const { return static_cast<int>(text_vocab_size + speech_vocab_size + 1); }
    int bos() const { return static_cast<int>(text_vocab_size + speech_vocab_size + 2); }
    int eos() const { return static_cast<int>(text_vocab_size + speech_vocab_size + 3); }
    int pad() const { return static_cast<int>(text_vocab_size + speech_vocab_size + 4); }

    bool is_text_id(int id) const {
        return id >= 0 && static_cast<std::size_t>(id) < text_vocab_size;
    }
    bool is_speech_id(int id) const {
        return id >= static_cast<int>(text_vocab_size) &&
               static_cast<std::size_t>(id) < text_vocab_size + speech_vocab_size;
    }

    void validate() const {
        if (d_model % n_heads != 0)
            throw InvalidInputError("lm: d_model must be divisible by n_heads");
        if (n_layers == 0 || d_model == 0 || max_sequence_len == 0)
            throw InvalidInputError("lm: zero-sized configuration");
        if (dropout < 0.0 || dropout >= 1.0) throw InvalidInputError("lm: dropout out of range");
    }
};

enum class SegmentTag : std::uint8_t { ref = 0, text = 1, speech = 2 };

/// The concatenated LM input [e_ref | BOT text EOT | BOS speech EOS] with
/// per-segment positions that restart at 0 for TEXT and again for SPEECH,
/// teacher-forcing targets (inputs left-shifted by one) and the loss mask.
struct SequenceLayout {
    std::vector<int> input_ids;           // REF slot holds PAD; embedding is replaced
    std::vector<SegmentTag> segment;      // per position
    std::vector<int> seg_pos;             // within-segment index
    std::vector<int> targets;             // -1 where no target exists
    std::vector<std::uint8_t> loss_mask;  // text- and speech-segment targets only
    std::vector<TargetClass> target_class;
    std::size_t text_len = 0;   // N
    std::size_t speech_len = 0; // M

    std::size_t size() const { return input_ids.size(); }
};

/// Builds the training (or, with empty speech, generation-prompt) layout.
inline SequenceLayout assemble_sequence(const LmConfig& cfg, const std::vector<int>& text_ids,
                                        const std::vector<int>& speech_ids) {
    cfg.validate();
    for (int id : text_ids)
        if (!cfg.is_text_id(id))
            throw InvalidInputError("assemble_sequence: text id out of range: " +
                                    std::to_string(id));
    const bool prompt_only = speech_ids.empty();
    const std::size_t total =
        1 + (text_ids.size() + 2) + (prompt_only ? 1 : speech_ids.size() + 2);
    if (total > cfg.max_sequence_len)
        throw SequenceTooLongError(total, cfg.max_sequence_len);

    SequenceLayout layout;
    layout.text_len = text_ids.size();
    layout.speech_len = speech_ids.size();
    layout.input_ids.reserve(total);
    layout.segment.reserve(total);
    layout.seg_pos.reserve(total);

    layout.input_ids.push_back(cfg.pad()); // REF slot; embedding comes from e_ref
    layout.segment.push_back(SegmentTag::ref);
    layout.seg_pos.push_back(0);

    layout.input_ids.push_back(cfg.bot());
    layout.segment.push_back(SegmentTag::text);
    layout.seg_pos.push_back(0);
    for (std::size_t i = 0; i < text_ids.size(); ++i) {
        layout.input_ids.push_back(text_ids[i]);
        layout.segment.push_back(SegmentTag::text);
        layout.seg_pos.push_back(static_cast<int>(i + 1));
    }
    layout.input_ids.push_back(cfg.eot());
    layout.segment.push_back(SegmentTag::text);
    layout.seg_pos.push_back(static_cast<int>(text_ids.size() + 1));

    layout.input_ids.push_back(cfg.bos());
    layout.segment.push_back(SegmentTag::speech);
    layout.seg_pos.push_back(0);
    if (!prompt_only) {
        for (std::size_t i = 0; i < speech_ids.size(); ++i) {
            const int raw = speech_ids[i];
            if (raw < 0 || static_cast<std::size_t>(raw) >= cfg.speech_vocab_size)
                throw InvalidInputError("assemble_sequence: speech id out of range: " +
                                        std::to_string(raw));
            layout.input_ids.push_back(static_cast<int>(cfg.text_vocab_size) + raw);
            layout.segment.push_back(SegmentTag::speech);
            layout.seg_pos.push_back(static_cast<int>(i + 1));
        }
        layout.input_ids.push_back(cfg.eos());
        layout.segment.push_back(SegmentTag::speech);
        layout.seg_pos.push_back(static_cast<int>(speech_ids.size() + 1));
    }

    const std::size_t n = layout.input_ids.size();
    layout.targets.assign(n, -1);
    layout.loss_mask.assign(n, 0);
    layout.target_class.assign(n, TargetClass::none);
    for (std::size_t t = 0; t + 1 < n; ++t) {
        const int target = layout.input_ids[t + 1];
        layout.targets[t] = target;
        if (cfg.is_text_id(target) || target == cfg.eot()) {
            layout.loss_mask[t] = 1;
            layout.target_class[t] = TargetClass::text;
        } else if (cfg.is_speech_id(target) || target == cfg.eos()) {
            layout.loss_mask[t] = 1;
            layout.target_class[t] = TargetClass::speech;
        }
        // BOT and BOS are structural delimiters; predicting them carries no loss.
    }
    return layout;
}

/// Exact trainable-parameter count for a configuration.
inline std::size_t lm_param_count(const LmConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t vu = cfg.unified_vocab();
    const std::size_t per_layer = 2 * d            // ln1
                                  + 4 * d * d + 3 * d // q,k,v,o (no key bias)
                                  + 2 * d           // ln2
                                  + (d * 4 * d + 4 * d) // mlp up
                                  + (4 * d * d + d);    // mlp down
    return vu * d                      // token embedding
           + 2 * cfg.max_sequence_len * d // two positional tables
           + cfg.ref_dim * d + d       // reference projection
           + cfg.n_layers * per_layer  //
           + 2 * d                     // final norm
           + d * vu + vu;              // output projection
}

template <class Real>
struct LmParams {
    LmConfig config;

    Tensor<Real> tok_emb;    // [Vu, d]
    Tensor<Real> pos_text;   // [max_seq, d]
    Tensor<Real> pos_speech; // [max_seq, d]
    Tensor<Real> ref_w;      // [ref_dim, d]
    Tensor<Real> ref_b;      // [d]

    struct Block {
        Tensor<Real> ln1_g, ln1_b;
        Tensor<Real> wq, bq, wk, wv, bv, wo, bo; // key bias omitted: softmax is
                                                 // invariant to per-row shifts, so
                                                 // its gradient is identically zero
        Tensor<Real> ln2_g, ln2_b;
        Tensor<Real> fc_w, fc_b;     // [d, 4d]
        Tensor<Real> proj_w, proj_b; // [4d, d]
    };
    std::vector<Block> blocks;

    Tensor<Real> lnf_g, lnf_b;
    Tensor<Real> out_w; // [d, Vu], zero-initialized so the start is uniform
    Tensor<Real> out_b; // [Vu]

    static LmParams init(const LmConfig& cfg, Rng& rng) {
        cfg.validate();
        LmParams p;
        p.config = cfg;
        const std::size_t d = cfg.d_model;
        const Real std_base = Real(0.02);
        // Residual-branch projections get the usual depth-scaled init.
        const Real std_proj =
            std_base / std::sqrt(Real(2) * static_cast<Real>(cfg.n_layers));

        p.tok_emb = Tensor<Real>::randn({cfg.unified_vocab(), d}, rng, std_base, true);
        p.pos_text = Tensor<Real>::randn({cfg.max_sequence_len, d}, rng, std_base, true);
        p.pos_speech = Tensor<Real>::randn({cfg.max_sequence_len, d}, rng, std_base, true);
        p.ref_w = Tensor<Real>::randn({cfg.ref_dim, d}, rng, std_base, true);
        p.ref_b = Tensor<Real>::zeros({d}, true);

        auto ones = [](std::size_t n) {
            Tensor<Real> t = Tensor<Real>::full({n}, Real(1));
            t.set_requires_grad(true);
            return t;
        };
        p.blocks.resize(cfg.n_layers);
        for (auto& b : p.blocks) {
            b.ln1_g = ones(d);
            b.ln1_b = Tensor<Real>::zeros({d}, true);
            b.wq = Tensor<Real>::randn({d, d}, rng, std_base, true);
            b.bq = Tensor<Real>::zeros({d}, true);
            b.wk = Tensor<Real>::randn({d, d}, rng, std_base, true);
            b.wv = Tensor<Real>::randn({d, d}, rng, std_base, true);
            b.bv = Tensor<Real>::zeros({d}, true);
            b.wo = Tensor<Real>::randn({d, d}, rng, std_proj, true);
            b.bo = Tensor<Real>::zeros({d}, true);
            b.ln2_g = ones(d);
            b.ln2_b = Tensor<Real>::zeros({d}, true);
            b.fc_w = Tensor<Real>::randn({d, 4 * d}, rng, std_base, true);
            b.fc_b = Tensor<Real>::zeros({4 * d}, true);
            b.proj_w = Tensor<Real>::randn({4 * d, d}, rng, std_proj, true);
            b.proj_b = Tensor<Real>::zeros({d}, true);
        }
        p.lnf_g = ones(d);
        p.lnf_b = Tensor<Real>::zeros({d}, true);
        p.out_w = Tensor<Real>::zeros({d, cfg.unified_vocab()}, true);
        p.out_b = Tensor<Real>::zeros({cfg.unified_vocab()}, true);
        return p;
    }

    std::vector<Tensor<Real>*> parameters() {
        std::vector<Tensor<Real>*> out = {&tok_emb, &pos_text, &pos_speech, &ref_w, &ref_b};
        for (auto& b : blocks) {
            for (Tensor<Real>* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.wv, &b.bv,
                                    &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.fc_w, &b.fc_b, &b.proj_w,
                                    &b.proj_b})
                out.push_back(t);
        }
        out.push_back(&lnf_g);
        out.push_back(&lnf_b);
        out.push_back(&out_w);
        out.push_back(&out_b);
        return out;
    }

    std::vector<std::pair<std::string, Tensor<Real>*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out = {
            {"lm.tok_emb", &tok_emb}, {"lm.pos_text", &pos_text},
            {"lm.pos_speech", &pos_speech}, {"lm.ref.w", &ref_w}, {"lm.ref.b", &ref_b}};
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& b = blocks[i];
            const std::string base = "lm.block" + std::to_string(i) + ".";
            out.emplace_back(base + "ln1.g", &b.ln1_g);
            out.emplace_back(base + "ln1.b", &b.ln1_b);
            out.emplace_back(base + "attn.wq", &b.wq);
            out.emplace_back(base + "attn.bq", &b.bq);
            out.emplace_back(base + "attn.wk", &b.wk);
            out.emplace_back(base + "attn.wv", &b.wv);
            out.emplace_back(base + "attn.bv", &b.bv);
            out.emplace_back(base + "attn.wo", &b.wo);
            out.emplace_back(base + "attn.bo", &b.bo);
            out.emplace_back(base + "ln2.g", &b.ln2_g);
            out.emplace_back(base + "ln2.b", &b.ln2_b);
            out.emplace_back(base + "mlp.fc.w", &b.fc_w);
            out.emplace_back(base + "mlp.fc.b", &b.fc_b);
            out.emplace_back(base + "mlp.proj.w", &b.proj_w);
            out.emplace_back(base + "mlp.proj.b", &b.proj_b);
        }
        out.emplace_back("lm.lnf.g", &lnf_g);
        out.emplace_back("lm.lnf.b", &lnf_b);
        out.emplace_back("lm.out.w", &out_w);
        out.emplace_back("lm.out.b", &out_b);
        return out;
    }
};

template <class Real>
struct LmForwardOptions {
    bool training = false;
    Rng* dropout_rng = nullptr;
};

namespace detail {

// Per-position positional rows drawn from the table matching each segment;
// the REF slot gets none. Composed from constant 0/1 indicators so gradients
// scatter back to the right table.
template <class Real>
Tensor<Real> positional_rows(Tape<Real>& tape, const LmParams<Real>& p,
                             const SequenceLayout& layout) {
    const std::size_t n = layout.size(), d = p.config.d_model;
    std::vector<int> idx(n, 0);
    Tensor<Real> text_ind = Tensor<Real>::zeros({n, d});
    Tensor<Real> speech_ind = Tensor<Real>::zeros({n, d});
    for (std::size_t t = 0; t < n; ++t) {
        idx[t] = layout.seg_pos[t];
        Real* row = layout.segment[t] == SegmentTag::text
                        ? text_ind.data() + t * d
                        : (layout.segment[t] == SegmentTag::speech ? speech_ind.data() + t * d
                                                                   : nullptr);
        if (row != nullptr) std::fill(row, row + d, Real(1));
    }
    auto from_text = tape.mul(tape.embedding(p.pos_text, idx), text_ind);
    auto from_speech = tape.mul(tape.embedding(p.pos_speech, idx), speech_ind);
    return tape.add(from_text, from_speech);
}

} // namespace detail

/// Full causal forward pass over a layout; returns [T, unified_vocab] logits.
template <class Real>
Tensor<Real> lm_forward(Tape<Real>& tape, const LmParams<Real>& p, const SequenceLayout& layout,
                        const Tensor<Real>& e_ref, const LmForwardOptions<Real>& opts = {}) {
    const LmConfig& cfg = p.config;
    if (e_ref.numel() != cfg.ref_dim)
        throw InvalidInputError("lm_forward: reference embedding dim mismatch");
    const std::size_t n = layout.size(), d = cfg.d_model;
    if (n == 0) throw InvalidInputError("lm_forward: empty layout");
    const std::size_t hd = d / cfg.n_heads;

    auto dropout = [&](const Tensor<Real>& x) {
        if (cfg.dropout <= 0.0 || !opts.training || opts.dropout_rng == nullptr) return x;
        return tape.dropout(x, static_cast<Real>(cfg.dropout), *opts.dropout_rng, true);
    };

    // Input embeddings: projected e_ref at slot 0, token embeddings after.
    auto ref_row = tape.add_row(
        tape.matmul(tape.reshape(e_ref, {1, cfg.ref_dim}), p.ref_w), p.ref_b);
    std::vector<int> tail_ids(layout.input_ids.begin() + 1, layout.input_ids.end());
    Tensor<Real> x;
    if (tail_ids.empty()) {
        x = ref_row;
    } else {
        auto tok_rows = tape.embedding(p.tok_emb, tail_ids);
        x = tape.concat_rows({ref_row, tok_rows});
    }
    x = tape.add(x, detail::positional_rows(tape, p, layout));
    x = dropout(x);

    const Real att_scale = Real(1) / std::sqrt(static_cast<Real>(hd));
    for (const auto& b : p.blocks) {
        auto h = tape.layer_norm(x, b.ln1_g, b.ln1_b);
        auto q = tape.add_row(tape.matmul(h, b.wq), b.bq);
        auto k = tape.matmul(h, b.wk);
        auto v = tape.add_row(tape.matmul(h, b.wv), b.bv);
        std::vector<Tensor<Real>> heads;
        heads.reserve(cfg.n_heads);
        for (std::size_t hi = 0; hi < cfg.n_heads; ++hi) {
            auto qh = tape.slice_cols(q, hi * hd, hd);
            auto kh = tape.slice_cols(k, hi * hd, hd);
            auto vh = tape.slice_cols(v, hi * hd, hd);
            auto scores = tape.scale(tape.matmul_nt(qh, kh), att_scale);
            auto probs = tape.softmax_causal(scores);
            heads.push_back(tape.matmul(probs, vh));
        }
        auto attn = tape.add_row(tape.matmul(tape.concat_cols(heads), b.wo), b.bo);
        x = tape.add(x, dropout(attn));
        auto h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b);
        auto m = tape.gelu(tape.add_row(tape.matmul(h2, b.fc_w), b.fc_b));
        auto mlp = tape.add_row(tape.matmul(m, b.proj_w), b.proj_b);
        x = tape.add(x, dropout(mlp));
    }
    x = tape.layer_norm(x, p.lnf_g, p.lnf_b);
    return tape.add_row(tape.matmul(x, p.out_w), p.out_b);
}

namespace detail {

inline constexpr double restrict_penalty = 1e9;

// Additive mask restricting each loss position's softmax to its segment's
// vocabulary slice: text vocab + EOT at TEXT targets, speech vocab + EOS at
// SPEECH targets.
template <class Real>
Tensor<Real> restriction_rows(const LmConfig& cfg, const SequenceLayout& layout) {
    const std::size_t n = layout.size(), vu = cfg.unified_vocab();
    Tensor<Real> mask = Tensor<Real>::zeros({n, vu});
    for (std::size_t t = 0; t < n; ++t) {
        if (layout.target_class[t] == TargetClass::none) continue;
        Real* row = mask.data() + t * vu;
        std::fill(row, row + vu, static_cast<Real>(-restrict_penalty));
        if (layout.target_class[t] == TargetClass::text) {
            for (std::size_t j = 0; j < cfg.text_vocab_size; ++j) row[j] = Real(0);
            row[static_cast<std::size_t>(cfg.eot())] = Real(0);
        } else {
            for (std::size_t j = cfg.text_vocab_size; j < cfg.text_vocab_size + cfg.speech_vocab_size;
                 ++j)
                row[j] = Real(0);
            row[static_cast<std::size_t>(cfg.eos())] = Real(0);
        }
    }
    return mask;
}

} // namespace detail

template <class Real>
struct LmLossResult {
    Tensor<Real> total;       // w_text * text_sum + speech_sum (scalar, on tape)
    double text_loss = 0;     // unweighted sums
    double speech_loss = 0;
    std::size_t text_count = 0;
    std::size_t speech_count = 0;
    Tensor<Real> logits;      // raw (unrestricted) logits, for diagnostics

    double per_token() const {
        const std::size_t n = text_count + speech_count;
        return n == 0 ? 0.0 : (text_loss + speech_loss) / static_cast<double>(n);
    }
};

/// Dual cross-entropy: one sum over text-segment targets, one over
/// speech-segment targets, each under a segment-restricted softmax.
template <class Real>
LmLossResult<Real> lm_loss(Tape<Real>& tape, const LmParams<Real>& p,
                           const SequenceLayout& layout, const Tensor<Real>& e_ref,
                           const LmForwardOptions<Real>& opts = {}) {
    const LmConfig& cfg = p.config;
    LmLossResult<Real> result;
    result.logits = lm_forward(tape, p, layout, e_ref, opts);
    auto restricted = tape.add(result.logits, detail::restriction_rows<Real>(cfg, layout));

    const std::size_t n = layout.size();
    std::vector<std::uint8_t> text_mask(n, 0), speech_mask(n, 0);
    for (std::size_t t = 0; t < n; ++t) {
        if (!layout.loss_mask[t]) continue;
        if (layout.target_class[t] == TargetClass::text) {
            text_mask[t] = 1;
            ++result.text_count;
        } else if (layout.target_class[t] == TargetClass::speech) {
            speech_mask[t] = 1;
            ++result.speech_count;
        }
    }
    if (result.text_count == 0 && result.speech_count == 0)
        throw InvalidInputError("lm_loss: layout has no loss positions");

    Tensor<Real> total;
    if (result.text_count > 0) {
        auto text_ce = tape.cross_entropy_logits(restricted, layout.targets, text_mask);
        result.text_loss = static_cast<double>(text_ce.value());
        total = tape.scale(text_ce, static_cast<Real>(cfg.text_loss_weight));
    }
    if (result.speech_count > 0) {
        auto speech_ce = tape.cross_entropy_logits(restricted, layout.targets, speech_mask);
        result.speech_loss = static_cast<double>(speech_ce.value());
        total = total.defined() ? tape.add(total, speech_ce) : speech_ce;
    }
    result.total = total;
    return result;
}

/// Fraction of speech-segment targets whose restricted argmax matches the
/// teacher-forced target.
template <class Real>
double teacher_forced_accuracy(const LmParams<Real>& p, const SequenceLayout& layout,
                               const Tensor<Real>& e_ref) {
    Tape<Real> tape;
    tape.recording = false;
    auto logits = lm_forward(tape, p, layout, e_ref);
    const LmConfig& cfg = p.config;
    const std::size_t vu = cfg.unified_vocab();
    std::size_t correct = 0, count = 0;
    for (std::size_t t = 0; t < layout.size(); ++t) {
        if (layout.target_class[t] != TargetClass::speech) continue;
        ++count;
        const Real* row = logits.data() + t * vu;
        int best = cfg.eos();
        Real best_v = row[static_cast<std::size_t>(cfg.eos())];
        for (std::size_t j = cfg.text_vocab_size; j < cfg.text_vocab_size + cfg.speech_vocab_size;
             ++j)
            if (row[j] > best_v) {
                best_v = row[j];
                best = static_cast<int>(j);
            }
        if (best == layout.targets[t]) ++correct;
    }
    return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Incremental inference with a per-call KV cache.

struct SamplingConfig {
    enum class Mode { greedy, top_k };
    Mode mode = Mode::top_k;
    int top_k = 8;
    double temperature = 0.8;
    std::size_t max_new = 256;
};

/// Single-sequence forward state. Mirrors lm_forward exactly but works on raw
/// rows, caching per-layer keys and values. One instance belongs to one
/// generation call.
template <class Real>
class LmInference {
public:
    explicit LmInference(const LmParams<Real>& params) : p_(params) {
        const LmConfig& cfg = p_.config;
        k_cache_.assign(cfg.n_layers, {});
        v_cache_.assign(cfg.n_layers, {});
    }

    std::size_t position() const { return t_; }

    /// Feeds one layout position; returns the logits row.
    std::vector<Real> step(int input_id, SegmentTag seg, int seg_pos,
                           const std::vector<Real>* ref_override = nullptr) {
        const LmConfig& cfg = p_.config;
        const std::size_t d = cfg.d_model;
        if (t_ >= cfg.max_sequence_len)
            throw SequenceTooLongError(t_ + 1, cfg.max_sequence_len);

        std::vector<Real> x(d, Real(0));
        if (seg == SegmentTag::ref) {
            if (ref_override == nullptr || ref_override->size() != cfg.ref_dim)
                throw InvalidInputError("lm inference: REF step needs the reference embedding");
            for (std::size_t i = 0; i < cfg.ref_dim; ++i) {
                const Real e = (*ref_override)[i];
                const Real* wrow = p_.ref_w.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) x[j] += e * wrow[j];
            }
            for (std::size_t j = 0; j < d; ++j) x[j] += p_.ref_b.data()[j];
        } else {
            const Real* emb = p_.tok_emb.data() + static_cast<std::size_t>(input_id) * d;
            const Real* pos = (seg == SegmentTag::text ? p_.pos_text : p_.pos_speech).data() +
                              static_cast<std::size_t>(seg_pos) * d;
            for (std::size_t j = 0; j < d; ++j) x[j] = emb[j] + pos[j];
        }

        const std::size_t hd = d / cfg.n_heads;
        const Real att_scale = Real(1) / std::sqrt(static_cast<Real>(hd));
        std::vector<Real> h(d), q(d), k(d), v(d), attn(d), m4(4 * d), mlp(d);
        for (std::size_t li = 0; li < cfg.n_layers; ++li) {
            const auto& b = p_.blocks[li];
            norm_row(x.data(), b.ln1_g.data(), b.ln1_b.data(), d, h.data());
            linear_row(h.data(), b.wq.data(), b.bq.data(), d, d, q.data());
            linear_row(h.data(), b.wk.data(), nullptr, d, d, k.data());
            linear_row(h.data(), b.wv.data(), b.bv.data(), d, d, v.data());
            k_cache_[li].insert(k_cache_[li].end(), k.begin(), k.end());
            v_cache_[li].insert(v_cache_[li].end(), v.begin(), v.end());
            const std::size_t steps = k_cache_[li].size() / d;
            for (std::size_t hi = 0; hi < cfg.n_heads; ++hi) {
                const std::size_t off = hi * hd;
                scores_.assign(steps, Real(0));
                Real mx = -std::numeric_limits<Real>::infinity();
                for (std::size_t s = 0; s < steps; ++s) {
                    const Real* ks = k_cache_[li].data() + s * d + off;
                    Real dot = 0;
                    for (std::size_t j = 0; j < hd; ++j) dot += q[off + j] * ks[j];
                    scores_[s] = dot * att_scale;
                    mx = std::max(mx, scores_[s]);
                }
                Real denom = 0;
                for (std::size_t s = 0; s < steps; ++s) {
                    scores_[s] = std::exp(scores_[s] - mx);
                    denom += scores_[s];
                }
                for (std::size_t j = 0; j < hd; ++j) {
                    Real acc = 0;
                    for (std::size_t s = 0; s < steps; ++s)
                        acc += scores_[s] * v_cache_[li][s * d + off + j];
                    attn[off + j] = acc / denom;
                }
            }
            linear_row(attn.data(), b.wo.data(), b.bo.data(), d, d, h.data());
            for (std::size_t j = 0; j < d; ++j) x[j] += h[j];
            norm_row(x.data(), b.ln2_g.data(), b.ln2_b.data(), d, h.data());
            linear_row(h.data(), b.fc_w.data(), b.fc_b.data(), d, 4 * d, m4.data());
            for (std::size_t j = 0; j < 4 * d; ++j) m4[j] = detail::gelu_value(m4[j]);
            linear_row(m4.data(), b.proj_w.data(), b.proj_b.data(), 4 * d, d, mlp.data());
            for (std::size_t j = 0; j < d; ++j) x[j] += mlp[j];
        }
        norm_row(x.data(), p_.lnf_g.data(), p_.lnf_b.data(), d, h.data());
        std::vector<Real> logits(cfg.unified_vocab());
        linear_row(h.data(), p_.out_w.data(), p_.out_b.data(), d, cfg.unified_vocab(),
                   logits.data());
        ++t_;
        return logits;
    }

private:
    static void norm_row(const Real* x, const Real* g, const Real* b, std::size_t n, Real* out) {
        Real mean = 0;
        for (std::size_t j = 0; j < n; ++j) mean += x[j];
        mean /= Real(n);
        Real var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= Real(n);
        const Real is = Real(1) / std::sqrt(var + Real(1e-5));
        for (std::size_t j = 0; j < n; ++j) out[j] = g[j] * (x[j] - mean) * is + b[j];
    }

    static void linear_row(const Real* x, const Real* w, const Real* b, std::size_t in,
                           std::size_t out_n, Real* out) {
        if (b != nullptr)
            std::copy(b, b + out_n, out);
        else
            std::fill(out, out + out_n, Real(0));
        for (std::size_t i = 0; i < in; ++i) {
            const Real xv = x[i];
            if (xv == Real(0)) continue;
            const Real* wrow = w + i * out_n;
            for (std::size_t j = 0; j < out_n; ++j) out[j] += xv * wrow[j];
        }
    }

    const LmParams<Real>& p_;
    std::vector<std::vector<Real>> k_cache_, v_cache_;
    std::vector<Real> scores_;
    std::size_t t_ = 0;
};

template <class Real>
struct GenerateResult {
    std::vector<int> speech_ids; // codec token ids, specials stripped
    bool hit_eos = false;
};

/// Autoregressive sampling of speech tokens from the SPEECH-restricted
/// softmax, starting after BOS. Greedy mode is deterministic; ties break
/// toward the smaller id.
template <class Real>
GenerateResult<Real> generate(const LmParams<Real>& params, const std::vector<int>& text_ids,
                              const std::vector<Real>& e_ref, const SamplingConfig& sampling,
                              Rng& rng) {
    const LmConfig& cfg = params.config;
    SequenceLayout prompt = assemble_sequence(cfg, text_ids, {});
    if (prompt.size() + sampling.max_new > cfg.max_sequence_len)
        throw SequenceTooLongError(prompt.size() + sampling.max_new, cfg.max_sequence_len);

    LmInference<Real> inference(params);
    std::vector<Real> logits;
    for (std::size_t t = 0; t < prompt.size(); ++t)
        logits = inference.step(prompt.input_ids[t], prompt.segment[t], prompt.seg_pos[t],
                                t == 0 ? &e_ref : nullptr);

    GenerateResult<Real> result;
    const int eos = cfg.eos();
    std::vector<std::pair<Real, int>> support;
    support.reserve(cfg.speech_vocab_size + 1);
    for (std::size_t produced = 0; produced < sampling.max_new; ++produced) {
        support.clear();
        for (std::size_t j = cfg.text_vocab_size; j < cfg.text_vocab_size + cfg.speech_vocab_size;
             ++j)
            support.emplace_back(logits[j], static_cast<int>(j));
        support.emplace_back(logits[static_cast<std::size_t>(eos)], eos);

        int chosen;
        if (sampling.mode == SamplingConfig::Mode::greedy) {
            chosen = support[0].second;
            Real best = support[0].first;
            for (const auto& [val, id] : support)
                if (val > best) {
                    best = val;
                    chosen = id;
                }
        } else {
            const int k = std::max(1, std::min<int>(sampling.top_k,
                                                    static_cast<int>(support.size())));
            std::partial_sort(support.begin(), support.begin() + k, support.end(),
                              [](const auto& a, const auto& b) {
                                  return a.first != b.first ? a.first > b.first
                                                            : a.second < b.second;
                              });
            const double temp = std::max(sampling.temperature, 1e-9);
            const double mx = static_cast<double>(support[0].first);
            double total = 0;
            std::vector<double> probs(static_cast<std::size_t>(k));
            for (int i = 0; i < k; ++i) {
                probs[static_cast<std::size_t>(i)] =
                    std::exp((static_cast<double>(support[static_cast<std::size_t>(i)].first) - mx) /
                             temp);
                total += probs[static_cast<std::size_t>(i)];
            }
            const double r = rng.uniform() * total;
            double cdf = 0;
            chosen = support[static_cast<std::size_t>(k) - 1].second;
            for (int i = 0; i < k; ++i) {
                cdf += probs[static_cast<std::size_t>(i)];
                if (r < cdf) {
                    chosen = support[static_cast<std::size_t>(i)].second;
                    break;
                }
            }
        }

        if (chosen == eos) {
            result.hit_eos = true;
            break;
        }
        result.speech_ids.push_back(chosen - static_cast<int>(cfg.text_vocab_size));
        logits = inference.step(chosen, SegmentTag::speech,
                                static_cast<int>(result.speech_ids.size()), nullptr);
    }
    return result;
}

} // namespace nhwc

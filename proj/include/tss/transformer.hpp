#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tss/rng.hpp"
#include "tss/tensor.hpp"

namespace tss {

constexpr double kMaskNegInf = -1e30;

// Pre-norm transformer block parameters: y = x + MHSA(LN(x)); z = y + MLP(LN(y)).
struct BlockParams {
    int64_t channels = 0;
    int64_t heads = 0;
    double mlp_ratio = 4.0;
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;

    int64_t head_dim() const { return channels / heads; }
    int64_t hidden() const { return static_cast<int64_t>(mlp_ratio * static_cast<double>(channels)); }

    static BlockParams init(int64_t c, int64_t heads, double mlp_ratio, const CounterRng& rng,
                            bool trainable = true) {
        if (c <= 0 || heads <= 0 || c % heads != 0)
            throw ArgumentError("block: channels " + std::to_string(c) + " not divisible by heads " +
                                std::to_string(heads));
        BlockParams p;
        p.channels = c;
        p.heads = heads;
        p.mlp_ratio = mlp_ratio;
        double ws = 1.0 / std::sqrt(static_cast<double>(c));
        int64_t h = p.hidden();
        p.ln1_gain = Tensor::full({c}, 1.0, trainable);
        p.ln1_bias = Tensor::zeros({c}, trainable);
        p.wq = Tensor::randn({c, c}, rng.derive("wq"), ws, trainable);
        p.bq = Tensor::zeros({c}, trainable);
        p.wk = Tensor::randn({c, c}, rng.derive("wk"), ws, trainable);
        p.bk = Tensor::zeros({c}, trainable);
        p.wv = Tensor::randn({c, c}, rng.derive("wv"), ws, trainable);
        p.bv = Tensor::zeros({c}, trainable);
        p.wo = Tensor::randn({c, c}, rng.derive("wo"), ws, trainable);
        p.bo = Tensor::zeros({c}, trainable);
        p.ln2_gain = Tensor::full({c}, 1.0, trainable);
        p.ln2_bias = Tensor::zeros({c}, trainable);
        p.w1 = Tensor::randn({c, h}, rng.derive("w1"), ws, trainable);
        p.b1 = Tensor::zeros({h}, trainable);
        p.w2 = Tensor::randn({h, c}, rng.derive("w2"), 1.0 / std::sqrt(static_cast<double>(h)), trainable);
        p.b2 = Tensor::zeros({c}, trainable);
        return p;
    }

    static BlockParams zeros(int64_t c, int64_t heads, double mlp_ratio) {
        BlockParams p = init(c, heads, mlp_ratio, CounterRng(0, 0), false);
        auto clear = [](Tensor& t) { t = Tensor::zeros(t.shape()); };
        clear(p.ln1_gain);
        clear(p.ln1_bias);
        clear(p.wq);
        clear(p.wk);
        clear(p.wv);
        clear(p.wo);
        clear(p.ln2_gain);
        clear(p.ln2_bias);
        clear(p.w1);
        clear(p.w2);
        return p;
    }

    void visit(const std::string& prefix,
               const std::function<void(const std::string&, Tensor&)>& fn) {
        fn(prefix + ".ln1.gain", ln1_gain);
        fn(prefix + ".ln1.bias", ln1_bias);
        fn(prefix + ".attn.wq", wq);
        fn(prefix + ".attn.bq", bq);
        fn(prefix + ".attn.wk", wk);
        fn(prefix + ".attn.bk", bk);
        fn(prefix + ".attn.wv", wv);
        fn(prefix + ".attn.bv", bv);
        fn(prefix + ".attn.wo", wo);
        fn(prefix + ".attn.bo", bo);
        fn(prefix + ".ln2.gain", ln2_gain);
        fn(prefix + ".ln2.bias", ln2_bias);
        fn(prefix + ".mlp.w1", w1);
        fn(prefix + ".mlp.b1", b1);
        fn(prefix + ".mlp.w2", w2);
        fn(prefix + ".mlp.b2", b2);
    }
};

// Test/diagnostic hook: observes every post-softmax attention tensor
// ([batch*heads, S, S]) produced by transformer_block.
inline std::function<void(const Tensor&)>& attention_probe() {
    static std::function<void(const Tensor&)> probe;
    return probe;
}

struct AttentionOptions {
    // Per-position key validity, length batch*seq; invalid keys are neither
    // attended to nor allowed to attend.
    const std::vector<uint8_t>* valid = nullptr;
    bool causal = false;
};

namespace detail {

inline Tensor attention_mask_const(int64_t batch, int64_t heads, int64_t s, const AttentionOptions& opt) {
    std::vector<double> m(static_cast<size_t>(batch * heads * s * s), 0.0);
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) {
                bool ok = true;
                if (opt.causal && j > i) ok = false;
                if (opt.valid && !(*opt.valid)[static_cast<size_t>(b * s + j)]) ok = false;
                if (!ok)
                    for (int64_t h = 0; h < heads; ++h)
                        m[static_cast<size_t>(((b * heads + h) * s + i) * s + j)] = kMaskNegInf;
            }
    return Tensor::from(std::move(m), {batch * heads, s, s});
}

}  // namespace detail

// Batched pre-norm block. The attention branch reads attn_in while the
// residual stream carries x; the two coincide except under token shift,
// where the residual must keep the unshifted features accessible.
inline Tensor transformer_block_core(const Tensor& x, const Tensor& attn_in, const BlockParams& p,
                                     const AttentionOptions& opt = {}) {
    if (x.rank() != 3 || x.dim(2) != p.channels)
        throw ArgumentError("transformer_block: expected [batch, S, " + std::to_string(p.channels) +
                            "], got " + shape_str(x.shape()));
    if (attn_in.shape() != x.shape()) throw ArgumentError("transformer_block: attn_in shape mismatch");
    if (p.channels % p.heads != 0) throw ArgumentError("transformer_block: heads do not divide channels");
    int64_t b = x.dim(0), s = x.dim(1), c = p.channels, h = p.heads, dh = p.head_dim();
    if (opt.valid && static_cast<int64_t>(opt.valid->size()) != b * s)
        throw ArgumentError("transformer_block: mask length mismatch");

    auto split_heads = [&](const Tensor& t) {
        return reshape(transpose(reshape(t, {b, s, h, dh}), {0, 2, 1, 3}), {b * h, s, dh});
    };

    Tensor hx = layer_norm(attn_in, p.ln1_gain, p.ln1_bias);
    Tensor hf = reshape(hx, {b * s, c});
    Tensor q = split_heads(add(matmul(hf, p.wq), p.bq));
    Tensor k = split_heads(add(matmul(hf, p.wk), p.bk));
    Tensor v = split_heads(add(matmul(hf, p.wv), p.bv));

    Tensor scores = scale(bmm(q, transpose(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (opt.causal || opt.valid) scores = add(scores, detail::attention_mask_const(b, h, s, opt));
    Tensor attn = softmax(scores, 2);
    if (attention_probe()) attention_probe()(attn);

    Tensor ctx = reshape(transpose(reshape(bmm(attn, v), {b, h, s, dh}), {0, 2, 1, 3}), {b * s, c});
    Tensor update = add(matmul(ctx, p.wo), p.bo);
    if (opt.valid) {
        std::vector<double> rowmask(static_cast<size_t>(b * s * c));
        for (int64_t r = 0; r < b * s; ++r)
            for (int64_t j = 0; j < c; ++j)
                rowmask[static_cast<size_t>(r * c + j)] = (*opt.valid)[static_cast<size_t>(r)] ? 1.0 : 0.0;
        update = mul(update, Tensor::from(std::move(rowmask), {b * s, c}));
    }
    Tensor y = add(x, reshape(update, {b, s, c}));

    Tensor m = layer_norm(y, p.ln2_gain, p.ln2_bias);
    Tensor mf = add(matmul(reshape(m, {b * s, c}), p.w1), p.b1);
    mf = add(matmul(gelu(mf), p.w2), p.b2);
    return add(y, reshape(mf, {b, s, c}));
}

inline Tensor transformer_block(const Tensor& x, const BlockParams& p,
                                const AttentionOptions& opt = {}) {
    return transformer_block_core(x, x, p, opt);
}

// Single-sequence view: x is [S, C], mask (when present) flags valid positions.
inline Tensor attention_block(const Tensor& x, const BlockParams& p,
                              const std::vector<uint8_t>* mask = nullptr, bool causal = false) {
    if (x.rank() != 2) throw ArgumentError("attention_block: expected [S, C]");
    AttentionOptions opt;
    opt.valid = mask;
    opt.causal = causal;
    Tensor y = transformer_block(reshape(x, {1, x.dim(0), x.dim(1)}), p, opt);
    return reshape(y, {x.dim(0), x.dim(1)});
}

// Tiles table rows by id: returns [len(ids), C], differentiable into table.
inline Tensor tile_rows(const Tensor& table, const std::vector<int64_t>& ids) {
    return gather_rows(table, ids);
}

// ---------------------------------------------------------------------------
// Text tower: GPT-style causal encoder pooled at [EOS].
// ---------------------------------------------------------------------------

struct TextBatch {
    int64_t batch = 0;
    int64_t max_len = 0;
    std::vector<int64_t> token_ids;     // batch * max_len, padded with pad_id
    std::vector<int64_t> lengths;       // true lengths, [EOS] inclusive
    std::vector<int64_t> eos_position;  // always lengths[b] - 1
    int64_t pad_id = 0;

    static TextBatch from_sequences(const std::vector<std::vector<int64_t>>& seqs, int64_t pad_id,
                                    int64_t max_len = -1) {
        TextBatch tb;
        tb.batch = static_cast<int64_t>(seqs.size());
        int64_t longest = 0;
        for (const auto& s : seqs) longest = std::max<int64_t>(longest, static_cast<int64_t>(s.size()));
        tb.max_len = max_len < 0 ? longest : max_len;
        tb.pad_id = pad_id;
        tb.token_ids.assign(static_cast<size_t>(tb.batch * tb.max_len), pad_id);
        for (int64_t b = 0; b < tb.batch; ++b) {
            const auto& s = seqs[static_cast<size_t>(b)];
            if (s.empty() || static_cast<int64_t>(s.size()) > tb.max_len)
                throw ArgumentError("text batch: sequence length out of range");
            for (size_t i = 0; i < s.size(); ++i) tb.token_ids[static_cast<size_t>(b) * tb.max_len + i] = s[i];
            tb.lengths.push_back(static_cast<int64_t>(s.size()));
            tb.eos_position.push_back(static_cast<int64_t>(s.size()) - 1);
        }
        return tb;
    }
};

struct TextEncoderParams {
    int64_t vocab = 0, max_len = 0, channels = 0, heads = 0;
    Tensor tok_embed;  // [vocab, C]
    Tensor pos_embed;  // [max_len, C]
    std::vector<BlockParams> blocks;
    Tensor lnf_gain, lnf_bias;
    Tensor proj;  // [C, C]

    static TextEncoderParams init(int64_t vocab, int64_t max_len, int64_t c, int64_t heads,
                                  int64_t layers, double mlp_ratio, const CounterRng& rng) {
        TextEncoderParams p;
        p.vocab = vocab;
        p.max_len = max_len;
        p.channels = c;
        p.heads = heads;
        p.tok_embed = Tensor::randn({vocab, c}, rng.derive("tok_embed"), 0.02, true);
        p.pos_embed = Tensor::randn({max_len, c}, rng.derive("pos_embed"), 0.01, true);
        for (int64_t i = 0; i < layers; ++i)
            p.blocks.push_back(BlockParams::init(c, heads, mlp_ratio, rng.derive("block" + std::to_string(i))));
        p.lnf_gain = Tensor::full({c}, 1.0, true);
        p.lnf_bias = Tensor::zeros({c}, true);
        p.proj = Tensor::randn({c, c}, rng.derive("proj"), 1.0 / std::sqrt(static_cast<double>(c)), true);
        return p;
    }

    void visit(const std::function<void(const std::string&, Tensor&)>& fn) {
        fn("text.tok_embed", tok_embed);
        fn("text.pos_embed", pos_embed);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("text.block" + std::to_string(i), fn);
        fn("text.lnf.gain", lnf_gain);
        fn("text.lnf.bias", lnf_bias);
        fn("text.proj", proj);
    }
};

// Returns the [EOS]-pooled, projected query embeddings, [B, C].
inline Tensor encode_text(const TextBatch& batch, const TextEncoderParams& p) {
    int64_t b = batch.batch, l = batch.max_len, c = p.channels;
    if (l > p.max_len) throw ArgumentError("encode_text: sequence longer than positional table");
    std::vector<uint8_t> valid(static_cast<size_t>(b * l));
    for (int64_t i = 0; i < b; ++i) {
        if (batch.lengths[static_cast<size_t>(i)] < 1 || batch.lengths[static_cast<size_t>(i)] > l)
            throw ArgumentError("encode_text: invalid sequence length");
        if (batch.eos_position[static_cast<size_t>(i)] != batch.lengths[static_cast<size_t>(i)] - 1)
            throw ArgumentError("encode_text: eos position must be length-1");
        for (int64_t j = 0; j < l; ++j)
            valid[static_cast<size_t>(i * l + j)] = j < batch.lengths[static_cast<size_t>(i)] ? 1 : 0;
    }
    for (int64_t id : batch.token_ids)
        if (id < 0 || id >= p.vocab)
            throw ArgumentError("encode_text: token id " + std::to_string(id) + " outside vocabulary");

    std::vector<int64_t> pos_ids(static_cast<size_t>(b * l));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < l; ++j) pos_ids[static_cast<size_t>(i * l + j)] = j;

    Tensor x = add(tile_rows(p.tok_embed, batch.token_ids), tile_rows(p.pos_embed, pos_ids));
    x = reshape(x, {b, l, c});
    AttentionOptions opt;
    opt.causal = true;
    opt.valid = &valid;
    for (const auto& blk : p.blocks) x = transformer_block(x, blk, opt);
    x = layer_norm(x, p.lnf_gain, p.lnf_bias);

    std::vector<int64_t> eos_rows(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i)
        eos_rows[static_cast<size_t>(i)] = i * l + batch.eos_position[static_cast<size_t>(i)];
    Tensor pooled = gather_rows(reshape(x, {b * l, c}), eos_rows);
    return matmul(pooled, p.proj);
}

// ---------------------------------------------------------------------------
// Frame embedding: patch projection + [CLS] + positional embeddings.
// ---------------------------------------------------------------------------

struct FrameEmbedParams {
    int64_t n_patches = 0, patch_dim = 0, channels = 0;
    Tensor patch_proj;  // [patch_dim, C], no bias
    Tensor cls;         // [1, C]
    Tensor pos_embed;   // [N+1, C]

    static FrameEmbedParams init(int64_t n_patches, int64_t patch_dim, int64_t c, const CounterRng& rng) {
        FrameEmbedParams p;
        p.n_patches = n_patches;
        p.patch_dim = patch_dim;
        p.channels = c;
        p.patch_proj = Tensor::randn({patch_dim, c}, rng.derive("patch_proj"),
                                     1.0 / std::sqrt(static_cast<double>(patch_dim)), true);
        p.cls = Tensor::randn({1, c}, rng.derive("cls"), 0.02, true);
        p.pos_embed = Tensor::randn({n_patches + 1, c}, rng.derive("pos_embed"), 0.01, true);
        return p;
    }

    void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
        fn(prefix + ".patch_proj", patch_proj);
        fn(prefix + ".cls", cls);
        fn(prefix + ".pos_embed", pos_embed);
    }
};

// frames: [F, N, patch_dim] -> [F, N+1, C]; token 0 of every frame is [CLS].
inline Tensor embed_frames(const Tensor& frames, const FrameEmbedParams& p) {
    if (frames.rank() != 3 || frames.dim(1) != p.n_patches || frames.dim(2) != p.patch_dim)
        throw ArgumentError("embed_frames: expected [F, " + std::to_string(p.n_patches) + ", " +
                            std::to_string(p.patch_dim) + "], got " + shape_str(frames.shape()));
    int64_t f = frames.dim(0), n = p.n_patches, c = p.channels;
    Tensor proj = reshape(matmul(reshape(frames, {f * n, p.patch_dim}), p.patch_proj), {f, n, c});
    Tensor cls = reshape(tile_rows(p.cls, std::vector<int64_t>(static_cast<size_t>(f), 0)), {f, 1, c});
    Tensor tokens = concatenate({cls, proj}, 1);
    std::vector<int64_t> pos_ids(static_cast<size_t>(f * (n + 1)));
    for (int64_t i = 0; i < f; ++i)
        for (int64_t j = 0; j <= n; ++j) pos_ids[static_cast<size_t>(i * (n + 1) + j)] = j;
    Tensor pos = reshape(tile_rows(p.pos_embed, pos_ids), {f, n + 1, c});
    return add(tokens, pos);
}

inline Tensor embed_frame(const Tensor& patches, const FrameEmbedParams& p) {
    if (patches.rank() != 2) throw ArgumentError("embed_frame: expected [N, patch_dim]");
    Tensor y = embed_frames(reshape(patches, {1, patches.dim(0), patches.dim(1)}), p);
    return reshape(y, {p.n_patches + 1, p.channels});
}

}  // namespace tss

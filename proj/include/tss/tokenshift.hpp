#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "tss/tensor.hpp"
#include "tss/transformer.hpp"

namespace tss {

enum class ShiftMode { token_shift, channel_shift, vis_channel_shift, cls_channel_shift, none };

inline std::string to_string(ShiftMode m) {
    switch (m) {
        case ShiftMode::token_shift: return "token_shift";
        case ShiftMode::channel_shift: return "channel_shift";
        case ShiftMode::vis_channel_shift: return "vis_channel_shift";
        case ShiftMode::cls_channel_shift: return "cls_channel_shift";
        case ShiftMode::none: return "none";
    }
    return "none";
}

inline ShiftMode shift_mode_from_string(const std::string& s) {
    if (s == "token_shift") return ShiftMode::token_shift;
    if (s == "channel_shift") return ShiftMode::channel_shift;
    if (s == "vis_channel_shift") return ShiftMode::vis_channel_shift;
    if (s == "cls_channel_shift") return ShiftMode::cls_channel_shift;
    if (s == "none") return ShiftMode::none;
    throw ArgumentError("unknown shift mode: " + s);
}

// Where and how much to shift. `layers` holds 1-based block indices; `ratio`
// is the fraction of non-[CLS] tokens (or channels, for the channel variants)
// exchanged with adjacent frames.
struct ShiftPlan {
    ShiftMode mode = ShiftMode::none;
    std::set<int> layers;
    double ratio = 0.0;

    void validate() const {
        if (ratio < 0.0 || ratio > 1.0) throw ArgumentError("shift plan: ratio must be in [0,1]");
        for (int l : layers)
            if (l < 1) throw ArgumentError("shift plan: layer indices are 1-based");
    }

    bool applies(int layer_index) const {
        return mode != ShiftMode::none && layers.count(layer_index) > 0;
    }
};

namespace detail {

// Flat gather mapping for whole-token bidirectional shift over a
// [videos, T, tokens, C] grid. k = floor(ratio * (tokens-1)) spatial tokens
// take part: indices 1..ceil(k/2) pull from frame t-1, the rest from t+1,
// zero-filled at the temporal boundaries. [CLS] (index 0) never moves.
inline std::vector<int64_t> token_shift_mapping(int64_t videos, int64_t t, int64_t tokens, int64_t c,
                                                double ratio) {
    int64_t n = tokens - 1;
    int64_t k = static_cast<int64_t>(std::floor(ratio * static_cast<double>(n)));
    int64_t kf = (k + 1) / 2;  // forward (from t-1), tokens 1..kf
    std::vector<int64_t> map(static_cast<size_t>(videos * t * tokens * c));
    size_t w = 0;
    for (int64_t b = 0; b < videos; ++b)
        for (int64_t f = 0; f < t; ++f)
            for (int64_t j = 0; j < tokens; ++j) {
                int64_t src = f;
                if (j >= 1 && j <= kf) src = f - 1;
                else if (j > kf && j <= k) src = f + 1;
                bool pad = src < 0 || src >= t;
                int64_t base = ((b * t + src) * tokens + j) * c;
                for (int64_t ch = 0; ch < c; ++ch) map[w++] = pad ? -1 : base + ch;
            }
    return map;
}

// Channel-granularity variant: the first floor(ratio*C) channels of eligible
// tokens move (ceil half forward, floor half backward); eligibility depends
// on the mode.
inline std::vector<int64_t> channel_shift_mapping(int64_t videos, int64_t t, int64_t tokens, int64_t c,
                                                  double ratio, ShiftMode mode) {
    int64_t ck = static_cast<int64_t>(std::floor(ratio * static_cast<double>(c)));
    int64_t cf = (ck + 1) / 2;
    std::vector<int64_t> map(static_cast<size_t>(videos * t * tokens * c));
    size_t w = 0;
    for (int64_t b = 0; b < videos; ++b)
        for (int64_t f = 0; f < t; ++f)
            for (int64_t j = 0; j < tokens; ++j) {
                bool eligible = mode == ShiftMode::channel_shift ||
                                (mode == ShiftMode::vis_channel_shift && j != 0) ||
                                (mode == ShiftMode::cls_channel_shift && j == 0);
                for (int64_t ch = 0; ch < c; ++ch) {
                    int64_t src = f;
                    if (eligible && ch < cf) src = f - 1;
                    else if (eligible && ch < ck) src = f + 1;
                    bool pad = src < 0 || src >= t;
                    map[w++] = pad ? -1 : ((b * t + src) * tokens + j) * c + ch;
                }
            }
    return map;
}

inline Tensor apply_shift(const Tensor& grid, int64_t videos, int64_t t, const ShiftPlan& plan) {
    int64_t tokens = grid.dim(grid.rank() - 2), c = grid.dim(grid.rank() - 1);
    std::vector<int64_t> map =
        plan.mode == ShiftMode::token_shift
            ? token_shift_mapping(videos, t, tokens, c, plan.ratio)
            : channel_shift_mapping(videos, t, tokens, c, plan.ratio, plan.mode);
    return gather(grid, map, grid.shape());
}

}  // namespace detail

// grid: [T, N+1, C]; whole-token bidirectional shift.
inline Tensor token_shift(const Tensor& grid, const ShiftPlan& plan) {
    if (plan.mode != ShiftMode::token_shift)
        throw ArgumentError("token_shift: plan mode is " + to_string(plan.mode));
    plan.validate();
    if (grid.rank() != 3 || grid.dim(1) < 1) throw ArgumentError("token_shift: expected [T, N+1, C]");
    return detail::apply_shift(grid, 1, grid.dim(0), plan);
}

inline Tensor channel_shift_variant(const Tensor& grid, const ShiftPlan& plan) {
    if (plan.mode != ShiftMode::channel_shift && plan.mode != ShiftMode::vis_channel_shift &&
        plan.mode != ShiftMode::cls_channel_shift)
        throw ArgumentError("channel_shift_variant: plan mode is " + to_string(plan.mode));
    plan.validate();
    if (grid.rank() != 3) throw ArgumentError("channel_shift_variant: expected [T, N+1, C]");
    return detail::apply_shift(grid, 1, grid.dim(0), plan);
}

// One video-tower block over a [T, N+1, C] grid: spatial attention within
// each frame, with the attention branch fed the shifted grid when the plan
// covers this (1-based) layer. The residual always carries the unshifted x.
inline Tensor shift_block(const Tensor& grid, const BlockParams& p, const ShiftPlan& plan,
                          int layer_index) {
    if (layer_index < 1) throw ArgumentError("shift_block: layer_index is 1-based");
    plan.validate();
    if (grid.rank() != 3) throw ArgumentError("shift_block: expected [T, N+1, C]");
    Tensor attn_in = plan.applies(layer_index) ? detail::apply_shift(grid, 1, grid.dim(0), plan) : grid;
    return transformer_block_core(grid, attn_in, p);
}

struct VideoEncoderParams {
    FrameEmbedParams embed;
    std::vector<BlockParams> blocks;
    Tensor lnf_gain, lnf_bias;

    int64_t channels() const { return embed.channels; }
    int64_t tokens() const { return embed.n_patches + 1; }

    static VideoEncoderParams init(int64_t n_patches, int64_t patch_dim, int64_t c, int64_t heads,
                                   int64_t layers, double mlp_ratio, const CounterRng& rng) {
        VideoEncoderParams p;
        p.embed = FrameEmbedParams::init(n_patches, patch_dim, c, rng.derive("embed"));
        for (int64_t i = 0; i < layers; ++i)
            p.blocks.push_back(BlockParams::init(c, heads, mlp_ratio, rng.derive("block" + std::to_string(i))));
        p.lnf_gain = Tensor::full({c}, 1.0, true);
        p.lnf_bias = Tensor::zeros({c}, true);
        return p;
    }

    void visit(const std::function<void(const std::string&, Tensor&)>& fn) {
        embed.visit("video", fn);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("video.block" + std::to_string(i), fn);
        fn("video.lnf.gain", lnf_gain);
        fn("video.lnf.bias", lnf_bias);
    }
};

// frames: [B, T, N, patch_dim] -> final grids [B, T, N+1, C]. Temporal mixing
// inside the tower comes only from the shift plan.
inline Tensor encode_videos(const Tensor& frames, const VideoEncoderParams& p, const ShiftPlan& plan) {
    if (frames.rank() != 4) throw ArgumentError("encode_videos: expected [B, T, N, patch_dim]");
    plan.validate();
    for (int l : plan.layers)
        if (l > static_cast<int>(p.blocks.size()))
            throw ArgumentError("shift plan: layer " + std::to_string(l) + " beyond video depth " +
                                std::to_string(p.blocks.size()));
    int64_t b = frames.dim(0), t = frames.dim(1), n = frames.dim(2), c = p.channels();
    Tensor grid = embed_frames(reshape(frames, {b * t, n, frames.dim(3)}), p.embed);  // [B*T, N+1, C]
    for (int layer = 1; layer <= static_cast<int>(p.blocks.size()); ++layer) {
        Tensor attn_in = plan.applies(layer) ? detail::apply_shift(grid, b, t, plan) : grid;
        grid = transformer_block_core(grid, attn_in, p.blocks[static_cast<size_t>(layer - 1)]);
    }
    grid = layer_norm(grid, p.lnf_gain, p.lnf_bias);
    return reshape(grid, {b, t, n + 1, c});
}

// Single-video convenience: [T, N, patch_dim] -> [T, N+1, C].
inline Tensor encode_video(const Tensor& frames, const VideoEncoderParams& p, const ShiftPlan& plan) {
    if (frames.rank() != 3) throw ArgumentError("encode_video: expected [T, N, patch_dim]");
    Tensor g = encode_videos(reshape(frames, {1, frames.dim(0), frames.dim(1), frames.dim(2)}), p, plan);
    return reshape(g, {frames.dim(0), p.tokens(), p.channels()});
}

}  // namespace tss

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "tss/rng.hpp"
#include "tss/tensor.hpp"
#include "tss/transformer.hpp"

namespace tss {

enum class SelectionMode { learned, random, all_tokens };

inline std::string to_string(SelectionMode m) {
    switch (m) {
        case SelectionMode::learned: return "learned";
        case SelectionMode::random: return "random";
        case SelectionMode::all_tokens: return "all_tokens";
    }
    return "learned";
}

inline SelectionMode selection_mode_from_string(const std::string& s) {
    if (s == "learned") return SelectionMode::learned;
    if (s == "random") return SelectionMode::random;
    if (s == "all_tokens") return SelectionMode::all_tokens;
    throw ArgumentError("unknown selection mode: " + s);
}

struct PerturbConfig {
    double epsilon = 0.05;
    int64_t samples = 500;

    void validate() const {
        if (samples < 1) throw ArgumentError("perturb config: m must be >= 1");
        if (epsilon < 0.0) throw ArgumentError("perturb config: epsilon must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Importance scoring: reduce each token to C/2 channels, pair it with the
// reduced [CLS] feature, and map the concatenation to a scalar logit;
// softmax over the N+1 positions.
// ---------------------------------------------------------------------------

struct SelectionScorerParams {
    int64_t channels = 0;
    Tensor w_reduce, b_reduce;  // [C, C/2]
    Tensor w_score1, b_score1;  // [C, C/2]
    Tensor w_score2, b_score2;  // [C/2, 1]

    static SelectionScorerParams init(int64_t c, const CounterRng& rng) {
        if (c % 2 != 0) throw ArgumentError("selection scorer: channels must be even for C/2 reduction");
        SelectionScorerParams p;
        p.channels = c;
        double ws = 1.0 / std::sqrt(static_cast<double>(c));
        p.w_reduce = Tensor::randn({c, c / 2}, rng.derive("w_reduce"), ws, true);
        p.b_reduce = Tensor::zeros({c / 2}, true);
        p.w_score1 = Tensor::randn({c, c / 2}, rng.derive("w_score1"), ws, true);
        p.b_score1 = Tensor::zeros({c / 2}, true);
        p.w_score2 = Tensor::randn({c / 2, 1}, rng.derive("w_score2"),
                                   1.0 / std::sqrt(static_cast<double>(c / 2)), true);
        p.b_score2 = Tensor::zeros({1}, true);
        return p;
    }

    void visit(const std::function<void(const std::string&, Tensor&)>& fn) {
        fn("select.score.reduce.w", w_reduce);
        fn("select.score.reduce.b", b_reduce);
        fn("select.score.mlp1.w", w_score1);
        fn("select.score.mlp1.b", b_score1);
        fn("select.score.mlp2.w", w_score2);
        fn("select.score.mlp2.b", b_score2);
    }
};

// frames: [F, N+1, C] -> scores [F, N+1], each row a probability vector.
inline Tensor importance_scores_batched(const Tensor& frames, const SelectionScorerParams& p) {
    if (frames.rank() != 3 || frames.dim(2) != p.channels)
        throw ArgumentError("importance_scores: expected [F, N+1, " + std::to_string(p.channels) + "]");
    if (p.channels % 2 != 0) throw ArgumentError("importance_scores: channels must be even");
    int64_t f = frames.dim(0), tokens = frames.dim(1), c = p.channels;
    Tensor reduced = gelu(add(matmul(reshape(frames, {f * tokens, c}), p.w_reduce), p.b_reduce));
    // Tile each frame's reduced [CLS] row over its tokens.
    std::vector<int64_t> cls_rows(static_cast<size_t>(f * tokens));
    for (int64_t i = 0; i < f; ++i)
        for (int64_t j = 0; j < tokens; ++j) cls_rows[static_cast<size_t>(i * tokens + j)] = i * tokens;
    Tensor cls_tiled = gather_rows(reduced, cls_rows);
    Tensor paired = concatenate({cls_tiled, reduced}, 1);  // [F*(N+1), C]
    Tensor h = gelu(add(matmul(paired, p.w_score1), p.b_score1));
    Tensor logits = reshape(add(matmul(h, p.w_score2), p.b_score2), {f, tokens});
    return softmax(logits, 1);
}

// Single frame [N+1, C] -> [N+1].
inline Tensor importance_scores(const Tensor& frame, const SelectionScorerParams& p) {
    if (frame.rank() != 2) throw ArgumentError("importance_scores: expected [N+1, C]");
    Tensor s = importance_scores_batched(reshape(frame, {1, frame.dim(0), frame.dim(1)}), p);
    return reshape(s, {frame.dim(0)});
}

// ---------------------------------------------------------------------------
// Top-K indicators
// ---------------------------------------------------------------------------

// Indices of the K largest entries; ties break toward the lower index; the
// result is sorted ascending (the indicator's canonical column order).
inline std::vector<int64_t> hard_topk_indices(const double* s, int64_t n, int64_t k) {
    if (k < 1 || k > n) throw ArgumentError("hard_topk: K out of range [1, " + std::to_string(n) + "]");
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int64_t a, int64_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return a < b;
    });
    std::sort(idx.begin(), idx.begin() + k);
    idx.resize(static_cast<size_t>(k));
    return idx;
}

inline std::vector<int64_t> hard_topk_indices(const std::vector<double>& s, int64_t k) {
    return hard_topk_indices(s.data(), static_cast<int64_t>(s.size()), k);
}

inline Tensor indicator_from_indices(const std::vector<int64_t>& indices, int64_t n) {
    int64_t k = static_cast<int64_t>(indices.size());
    std::vector<double> m(static_cast<size_t>(n * k), 0.0);
    for (int64_t col = 0; col < k; ++col) {
        int64_t row = indices[static_cast<size_t>(col)];
        if (row < 0 || row >= n) throw ArgumentError("indicator: index out of range");
        m[static_cast<size_t>(row * k + col)] = 1.0;
    }
    return Tensor::from(std::move(m), {n, k});
}

// Exact argmax_{M} <M, S> over ordered K-subsets; the result is a constant
// in the graph (selection gradients come from the perturbed path).
inline Tensor hard_topk(const Tensor& s, int64_t k) {
    if (s.rank() != 1) throw ArgumentError("hard_topk: expected rank-1 scores");
    return indicator_from_indices(hard_topk_indices(s.value(), k), s.dim(0));
}

// Position of the highest-score token within the ascending selection; this is
// the frame-wise "most informative" slot.
inline int64_t rank1_slot(const std::vector<double>& s, const std::vector<int64_t>& ascending) {
    int64_t best = 0;
    for (int64_t j = 1; j < static_cast<int64_t>(s.size()); ++j)
        if (s[static_cast<size_t>(j)] > s[static_cast<size_t>(best)]) best = j;
    for (size_t slot = 0; slot < ascending.size(); ++slot)
        if (ascending[slot] == best) return static_cast<int64_t>(slot);
    throw ArgumentError("rank1_slot: argmax not among selected indices");
}

// Monte-Carlo smoothed top-K: forward averages hard indicators under
// Gaussian perturbations of the scores; backward uses the score-method
// Jacobian estimate (1/m) sum_z M_z Z_z^T / eps with the same noise stream,
// regenerated from the counter-based rng. epsilon == 0 degenerates to the
// exact hard indicator with no gradient into the scores.
inline Tensor perturbed_topk(const Tensor& s, int64_t k, const PerturbConfig& cfg,
                             const CounterRng& rng) {
    if (s.rank() != 1) throw ArgumentError("perturbed_topk: expected rank-1 scores");
    cfg.validate();
    int64_t n = s.dim(0);
    if (k < 1 || k > n) throw ArgumentError("perturbed_topk: K out of range");
    if (cfg.epsilon == 0.0) return hard_topk(s, k);

    const double eps = cfg.epsilon;
    const int64_t m = cfg.samples;
    std::vector<double> m_eps(static_cast<size_t>(n * k), 0.0);
    std::vector<double> noisy(static_cast<size_t>(n));
    for (int64_t z = 0; z < m; ++z) {
        for (int64_t j = 0; j < n; ++j)
            noisy[static_cast<size_t>(j)] =
                s.value()[static_cast<size_t>(j)] + eps * rng.normal(static_cast<uint64_t>(z * n + j));
        auto idx = hard_topk_indices(noisy, k);
        for (int64_t col = 0; col < k; ++col)
            m_eps[static_cast<size_t>(idx[static_cast<size_t>(col)] * k + col)] += 1.0;
    }
    for (auto& v : m_eps) v /= static_cast<double>(m);

    auto sn = s.node();
    CounterRng r = rng;
    return detail::make_op("perturbed_topk", {n, k}, std::move(m_eps), {s},
                           [sn, r, eps, m, n, k](TensorNode& self) {
                               std::vector<double> noisy(static_cast<size_t>(n)), zb(static_cast<size_t>(n));
                               for (int64_t z = 0; z < m; ++z) {
                                   for (int64_t j = 0; j < n; ++j) {
                                       zb[static_cast<size_t>(j)] = r.normal(static_cast<uint64_t>(z * n + j));
                                       noisy[static_cast<size_t>(j)] =
                                           sn->value[static_cast<size_t>(j)] + eps * zb[static_cast<size_t>(j)];
                                   }
                                   auto idx = hard_topk_indices(noisy, k);
                                   double gdot = 0.0;
                                   for (int64_t col = 0; col < k; ++col)
                                       gdot += self.grad[static_cast<size_t>(
                                           idx[static_cast<size_t>(col)] * k + col)];
                                   if (gdot == 0.0) continue;
                                   double w = gdot / (eps * static_cast<double>(m));
                                   for (int64_t j = 0; j < n; ++j)
                                       sn->grad[static_cast<size_t>(j)] += w * zb[static_cast<size_t>(j)];
                               }
                           });
}

// Ablation baseline: K distinct positions drawn uniformly from the N+1 slots.
inline std::vector<int64_t> random_topk_indices(int64_t n, int64_t k, uint64_t seed) {
    int64_t positions = n + 1;
    if (k < 1 || k > positions) throw ArgumentError("random_topk: K out of range");
    std::vector<int64_t> pool(static_cast<size_t>(positions));
    std::iota(pool.begin(), pool.end(), 0);
    CounterRng rng(seed, CounterRng::hash_str("random_topk"));
    for (int64_t i = 0; i < k; ++i) {
        int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(i),
                                                       static_cast<uint64_t>(positions - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    std::sort(pool.begin(), pool.end());
    return pool;
}

inline Tensor random_topk(int64_t n, int64_t k, uint64_t seed) {
    return indicator_from_indices(random_topk_indices(n, k, seed), n + 1);
}

// Eq. 2: gather the selected token features, I_hat = M^T I.
inline Tensor select_tokens(const Tensor& frame, const Tensor& m) {
    if (frame.rank() != 2 || m.rank() != 2 || frame.dim(0) != m.dim(0))
        throw ArgumentError("select_tokens: shape mismatch " + shape_str(frame.shape()) + " vs " +
                            shape_str(m.shape()));
    return matmul(transpose(m, {1, 0}), frame);
}

// ---------------------------------------------------------------------------
// Joint spatial-temporal transformer over the selected tokens.
// ---------------------------------------------------------------------------

struct SelectionTransformerParams {
    int64_t max_frames = 0, channels = 0;
    Tensor temporal_embed;  // [max_frames, C]
    std::vector<BlockParams> blocks;

    static SelectionTransformerParams init(int64_t max_frames, int64_t c, int64_t heads, int64_t layers,
                                           double mlp_ratio, const CounterRng& rng) {
        SelectionTransformerParams p;
        p.max_frames = max_frames;
        p.channels = c;
        p.temporal_embed = Tensor::randn({max_frames, c}, rng.derive("temporal_embed"), 0.01, true);
        for (int64_t i = 0; i < layers; ++i)
            p.blocks.push_back(BlockParams::init(c, heads, mlp_ratio, rng.derive("block" + std::to_string(i))));
        return p;
    }

    void visit(const std::function<void(const std::string&, Tensor&)>& fn) {
        fn("select.temporal_embed", temporal_embed);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("select.block" + std::to_string(i), fn);
    }
};

namespace detail {

// Adds per-frame temporal embeddings and runs the joint block stack over the
// flattened T*K token sequence: [B, T, K, C] -> [B, T*K, C].
inline Tensor selection_stack(const Tensor& selected, const SelectionTransformerParams& p) {
    if (selected.rank() != 4 || selected.dim(3) != p.channels)
        throw ArgumentError("selection_transformer: expected [B, T, K, C]");
    int64_t b = selected.dim(0), t = selected.dim(1), k = selected.dim(2), c = p.channels;
    if (t > p.max_frames) throw ArgumentError("selection_transformer: T exceeds temporal table");
    std::vector<int64_t> frame_ids(static_cast<size_t>(b * t * k));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t f = 0; f < t; ++f)
            for (int64_t j = 0; j < k; ++j) frame_ids[static_cast<size_t>((i * t + f) * k + j)] = f;
    Tensor x = add(reshape(selected, {b * t * k, c}), tile_rows(p.temporal_embed, frame_ids));
    x = reshape(x, {b, t * k, c});
    for (const auto& blk : p.blocks) x = transformer_block(x, blk);
    return x;
}

}  // namespace detail

// selected: [B, T, K, C]; rank1_slots: per (video, frame) slot of the most
// informative token, length B*T. Adds per-frame temporal embeddings, runs
// full joint attention over the T*K sequence, and returns the feature at
// each frame's rank-1 slot: [B, T, C].
inline Tensor selection_transformer_batched(const Tensor& selected, const SelectionTransformerParams& p,
                                            const std::vector<int64_t>& rank1_slots) {
    int64_t b = selected.dim(0), t = selected.dim(1), k = selected.dim(2), c = p.channels;
    if (static_cast<int64_t>(rank1_slots.size()) != b * t)
        throw ArgumentError("selection_transformer: rank1_slots length mismatch");
    Tensor x = detail::selection_stack(selected, p);
    std::vector<int64_t> out_rows(static_cast<size_t>(b * t));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t f = 0; f < t; ++f) {
            int64_t slot = rank1_slots[static_cast<size_t>(i * t + f)];
            if (slot < 0 || slot >= k) throw ArgumentError("selection_transformer: slot out of range");
            out_rows[static_cast<size_t>(i * t + f)] = (i * t + f) * k + slot;
        }
    return reshape(gather_rows(reshape(x, {b * t * k, c}), out_rows), {b, t, c});
}


// Single video: selected [T, K, C] -> frame embeddings [T, C].
inline Tensor selection_transformer(const Tensor& selected, const SelectionTransformerParams& p,
                                    const std::vector<int64_t>& rank1_slots) {
    if (selected.rank() != 3) throw ArgumentError("selection_transformer: expected [T, K, C]");
    Tensor y = selection_transformer_batched(
        reshape(selected, {1, selected.dim(0), selected.dim(1), selected.dim(2)}), p, rank1_slots);
    return reshape(y, {selected.dim(0), p.channels});
}

}  // namespace tss

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tss/tensor.hpp"

namespace tss {

constexpr double kNormFloor = 1e-12;

namespace detail {

inline void check_row_norms(const Tensor& t, const char* what) {
    int64_t rows = t.rank() == 1 ? 1 : t.numel() / t.shape().back();
    int64_t c = t.shape().back();
    for (int64_t r = 0; r < rows; ++r) {
        double n2 = 0;
        for (int64_t j = 0; j < c; ++j) {
            double v = t.value()[static_cast<size_t>(r * c + j)];
            n2 += v * v;
        }
        if (std::sqrt(n2) < kNormFloor)
            throw NumericError(std::string(what) + ": vector norm below floor 1e-12 at row " +
                               std::to_string(r));
    }
}

}  // namespace detail

// Cosine similarity between a query [C] and frame embeddings [T, C] -> [T].
inline Tensor frame_similarities(const Tensor& q, const Tensor& v) {
    if (q.rank() != 1 || v.rank() != 2 || v.dim(1) != q.dim(0))
        throw ArgumentError("frame_similarities: expected q [C] and v [T, C]");
    detail::check_row_norms(q, "frame_similarities: query");
    detail::check_row_norms(v, "frame_similarities: frame");
    Tensor sims = cosine_similarity(v, reshape(q, {1, q.dim(0)}), kNormFloor);  // [T, 1]
    return reshape(sims, {v.dim(0)});
}

// Softmax-weighted combination of per-frame similarities; lambda = 0 is the
// arithmetic mean, large lambda approaches max.
inline Tensor aggregate_similarity(const Tensor& s, double lambda) {
    if (s.rank() != 1) throw ArgumentError("aggregate_similarity: expected rank-1 similarities");
    if (lambda < 0) throw ArgumentError("aggregate_similarity: lambda must be >= 0");
    Tensor w = softmax(scale(s, lambda), 0);
    return sum(mul(w, s));
}

// queries: [Bt, C], videos: [Bv, T, C] frame embeddings. Entry (i, j) is the
// lambda-aggregated cosine similarity between query i and video j.
inline Tensor similarity_matrix(const Tensor& queries, const Tensor& videos, double lambda) {
    if (queries.rank() != 2 || videos.rank() != 3 || queries.dim(1) != videos.dim(2))
        throw ArgumentError("similarity_matrix: expected queries [Bt, C], videos [Bv, T, C]");
    if (lambda < 0) throw ArgumentError("similarity_matrix: lambda must be >= 0");
    detail::check_row_norms(queries, "similarity_matrix: query");
    detail::check_row_norms(videos, "similarity_matrix: frame");
    int64_t bt = queries.dim(0), bv = videos.dim(0), t = videos.dim(1), c = queries.dim(1);
    Tensor sims = cosine_similarity(queries, reshape(videos, {bv * t, c}), kNormFloor);  // [Bt, Bv*T]
    Tensor per_frame = reshape(sims, {bt, bv, t});
    Tensor w = softmax(scale(per_frame, lambda), 2);
    Tensor weighted = reshape(mul(w, per_frame), {bt * bv, t});
    Tensor agg = matmul(weighted, Tensor::full({t, 1}, 1.0));
    return reshape(agg, {bt, bv});
}

// Trainable temperature for the symmetric contrastive loss, stored on a log
// scale; the effective tau is exp(log_tau) clamped to [1, 100].
struct LossState {
    Tensor log_tau;

    static LossState init(double tau = 1.0 / 0.07) {
        LossState s;
        s.log_tau = Tensor::from({std::log(tau)}, {1}, true);
        return s;
    }

    Tensor tau() const { return clamp(tss::exp(log_tau), 1.0, 100.0); }
    double tau_value() const { return std::min(std::max(std::exp(log_tau.value()[0]), 1.0), 100.0); }
};

// Symmetric cross-entropy over a square similarity matrix whose diagonal is
// the positive pairing: L = (L_t2v + L_v2t) / 2.
inline Tensor symmetric_ce_loss(const Tensor& sim, const LossState& state) {
    if (sim.rank() != 2 || sim.dim(0) != sim.dim(1))
        throw ArgumentError("symmetric_ce_loss: expected a square matrix, got " + shape_str(sim.shape()));
    int64_t b = sim.dim(0);
    Tensor scaled = mul(sim, state.tau());
    std::vector<int64_t> diag(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = i * b + i;
    Tensor lt2v = mean(gather(log_softmax(scaled, 1), diag, {b}));
    Tensor lv2t = mean(gather(log_softmax(scaled, 0), diag, {b}));
    return scale(add(lt2v, lv2t), -0.5);
}

// Inference-time hub suppression: each candidate column is renormalized over
// the queries, discounting candidates that attract everything.
// s~[i,j] = sim[i,j] * softmax_over_i(beta * sim[:,j])[i].
inline Tensor inverted_softmax(const Tensor& sim, double beta) {
    if (sim.rank() != 2) throw ArgumentError("inverted_softmax: expected a matrix");
    if (beta <= 0) throw ArgumentError("inverted_softmax: beta must be positive");
    return mul(sim, softmax(scale(sim, beta), 0));
}

}  // namespace tss

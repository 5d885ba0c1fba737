#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tss/tensor.hpp"

namespace tss {

struct RetrievalReport {
    std::string direction;       // "t2v" or "v2t"
    std::map<int64_t, double> r_at;  // K -> percentage
    double mdr = 0.0;
    double mnr = 0.0;
    double rsum = 0.0;
    int64_t n_queries = 0;

    nlohmann::json to_json() const {
        nlohmann::json r;
        r["direction"] = direction;
        nlohmann::json rk = nlohmann::json::object();
        for (const auto& [k, v] : r_at) rk[std::to_string(k)] = v;
        r["r_at"] = rk;
        r["mdr"] = mdr;
        r["mnr"] = mnr;
        r["rsum"] = rsum;
        r["n_queries"] = n_queries;
        return r;
    }
};

// 1-based rank of the truth candidate: 1 + #strictly-greater + #equal-with-
// lower-index. Deterministic under ties.
inline int64_t rank_of_truth(const std::vector<double>& scores, int64_t truth) {
    if (truth < 0 || truth >= static_cast<int64_t>(scores.size()))
        throw ArgumentError("rank_of_truth: truth index out of range");
    double tv = scores[static_cast<size_t>(truth)];
    int64_t rank = 1;
    for (int64_t j = 0; j < static_cast<int64_t>(scores.size()); ++j) {
        if (scores[static_cast<size_t>(j)] > tv) ++rank;
        else if (scores[static_cast<size_t>(j)] == tv && j < truth) ++rank;
    }
    return rank;
}

// sim: [Bq, Bc] scores, pairing[i] = truth candidate for query i. Median rank
// uses the lower-middle element for even counts; percentages stay unrounded.
inline RetrievalReport compute_metrics(const Tensor& sim, const std::vector<int64_t>& pairing,
                                       const std::vector<int64_t>& ks,
                                       const std::string& direction = "t2v") {
    if (sim.rank() != 2) throw ArgumentError("compute_metrics: expected a score matrix");
    int64_t bq = sim.dim(0), bc = sim.dim(1);
    if (static_cast<int64_t>(pairing.size()) != bq)
        throw ArgumentError("compute_metrics: pairing must cover every query");
    std::vector<int64_t> ranks(static_cast<size_t>(bq));
    std::vector<double> row(static_cast<size_t>(bc));
    for (int64_t i = 0; i < bq; ++i) {
        for (int64_t j = 0; j < bc; ++j) row[static_cast<size_t>(j)] = sim.at({i, j});
        ranks[static_cast<size_t>(i)] = rank_of_truth(row, pairing[static_cast<size_t>(i)]);
    }
    RetrievalReport report;
    report.direction = direction;
    report.n_queries = bq;
    double sum_ranks = 0;
    for (int64_t r : ranks) sum_ranks += static_cast<double>(r);
    report.mnr = sum_ranks / static_cast<double>(bq);
    std::vector<int64_t> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    report.mdr = static_cast<double>(sorted[static_cast<size_t>((bq - 1) / 2)]);
    for (int64_t k : ks) {
        int64_t hits = 0;
        for (int64_t r : ranks)
            if (r <= k) ++hits;
        report.r_at[k] = 100.0 * static_cast<double>(hits) / static_cast<double>(bq);
    }
    for (const auto& [k, v] : report.r_at) report.rsum += v;
    return report;
}

}  // namespace tss

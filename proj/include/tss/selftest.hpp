#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tss/grad_check.hpp"
#include "tss/matching.hpp"
#include "tss/metrics.hpp"
#include "tss/model.hpp"
#include "tss/tokenselect.hpp"
#include "tss/tokenshift.hpp"

namespace tss {

// Built-in verification suites behind the `selftest` CLI verb: gradient
// checks for every primitive and composite, plus the brute-force oracles for
// selection, shift, matching, and metrics.

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

namespace selfcheck {

inline CheckResult timed(const std::string& name, const std::function<std::pair<bool, std::string>()>& fn) {
    CheckResult r;
    r.name = name;
    auto t0 = std::chrono::steady_clock::now();
    try {
        auto [ok, detail] = fn();
        r.passed = ok;
        r.detail = detail;
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

// Every primitive against central finite differences, randomized shapes up
// to rank 4, tolerance 1e-5.
inline CheckResult primitive_gradients(int64_t seeds) {
    return timed("primitive gradients (" + std::to_string(seeds) + " seeds, tol 1e-5)", [seeds]() {
        double worst = 0;
        std::string worst_op;
        for (int64_t seed = 0; seed < seeds; ++seed) {
            CounterRng rng(static_cast<uint64_t>(seed), 0);
            auto shape_for = [&](uint64_t salt, int max_rank) {
                int rank = 1 + static_cast<int>(rng.below(salt * 131 + 1, static_cast<uint64_t>(max_rank)));
                Shape s;
                int64_t numel = 1;
                for (int d = 0; d < rank; ++d) {
                    int64_t dim = 1 + static_cast<int64_t>(rng.below(salt * 131 + 2 + static_cast<uint64_t>(d), 3));
                    s.push_back(dim);
                    numel *= dim;
                }
                (void)numel;
                return s;
            };
            Shape sa = shape_for(1, 4);
            Tensor a = Tensor::randn(sa, rng.derive(10));
            Tensor b = Tensor::randn(sa, rng.derive(11));
            Tensor v = Tensor::randn({sa.back()}, rng.derive(12));
            Tensor sc = Tensor::randn({1}, rng.derive(13));
            int64_t m = 2 + static_cast<int64_t>(rng.below(3, 3));
            int64_t k = 2 + static_cast<int64_t>(rng.below(4, 3));
            int64_t n = 2 + static_cast<int64_t>(rng.below(5, 3));
            int64_t bt = 1 + static_cast<int64_t>(rng.below(6, 3));
            Tensor m1 = Tensor::randn({m, k}, rng.derive(14));
            Tensor m2 = Tensor::randn({k, n}, rng.derive(15));
            // Rows feeding the normalization ops get norms bounded away from
            // zero; central differences break down near the singular point.
            auto condition_rows = [](Tensor t) {
                int64_t rows = t.dim(0), cols = t.dim(1);
                for (int64_t r = 0; r < rows; ++r) {
                    double n2 = 0;
                    for (int64_t j = 0; j < cols; ++j) {
                        double v = t.value()[static_cast<size_t>(r * cols + j)];
                        n2 += v * v;
                    }
                    if (std::sqrt(n2) < 0.5) t.mutable_value()[static_cast<size_t>(r * cols)] += 1.5;
                }
                return t;
            };
            Tensor mnorm = condition_rows(m1.clone(false));
            Tensor mcos = condition_rows(Tensor::randn({3, k}, rng.derive(30)));
            Tensor mproj = Tensor::randn({m, k}, rng.derive(31));  // independent projection
            // layer_norm input: last-axis slices need variance bounded away
            // from the 1/sqrt(var+eps) singularity and at least 3 entries
            // (2-entry slices saturate at +/-1, leaving only eps-scale
            // gradients that a relative FD check cannot resolve).
            Shape ln_shape = sa;
            if (ln_shape.back() < 3) ln_shape.back() = 3;
            Tensor ln_in = Tensor::randn(ln_shape, rng.derive(32));
            {
                int64_t cols = ln_shape.back(), rows = ln_in.numel() / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    double mean = 0, var = 0;
                    for (int64_t j = 0; j < cols; ++j) mean += ln_in.value()[static_cast<size_t>(r * cols + j)];
                    mean /= static_cast<double>(cols);
                    for (int64_t j = 0; j < cols; ++j) {
                        double d = ln_in.value()[static_cast<size_t>(r * cols + j)] - mean;
                        var += d * d;
                    }
                    var /= static_cast<double>(cols);
                    if (var < 0.25) {
                        ln_in.mutable_value()[static_cast<size_t>(r * cols)] += 2.0;
                        ln_in.mutable_value()[static_cast<size_t>((r + 1) * cols - 1)] -= 2.0;
                    }
                }
            }
            Tensor ln_gain = Tensor::randn({ln_shape.back()}, rng.derive(33));
            Tensor ln_bias = Tensor::randn({ln_shape.back()}, rng.derive(34));
            Tensor ln_probe = Tensor::randn(ln_shape, rng.derive(35));
            Tensor b1 = Tensor::randn({bt, m, k}, rng.derive(16));
            Tensor b2 = Tensor::randn({bt, k, n}, rng.derive(17));
            Tensor g1 = Tensor::randn({sa.back()}, rng.derive(18));
            Tensor g2 = Tensor::randn({sa.back()}, rng.derive(19));
            int axis = static_cast<int>(rng.below(7, sa.size()));
            std::vector<int> perm(sa.size());
            std::iota(perm.begin(), perm.end(), 0);
            for (size_t i = perm.size(); i > 1; --i)
                std::swap(perm[i - 1], perm[rng.below(100 + i, i)]);
            std::vector<int64_t> gmap(static_cast<size_t>(shape_numel(sa)));
            for (size_t i = 0; i < gmap.size(); ++i) {
                uint64_t pick = rng.below(200 + i, static_cast<uint64_t>(shape_numel(sa)) + 1);
                gmap[i] = pick == static_cast<uint64_t>(shape_numel(sa)) ? -1 : static_cast<int64_t>(pick);
            }

            struct Case {
                const char* op;
                ScalarFn fn;
                std::vector<Tensor> inputs;
            };
            std::vector<Case> cases = {
                {"add", [](const std::vector<Tensor>& in) { return sum(add(in[0], in[1])); }, {a, b}},
                {"add_scalar", [](const std::vector<Tensor>& in) { return sum(add(in[0], in[1])); }, {a, sc}},
                {"add_vector", [](const std::vector<Tensor>& in) { return sum(add(in[0], in[1])); }, {a, v}},
                {"mul", [](const std::vector<Tensor>& in) { return mean(mul(in[0], in[1])); }, {a, b}},
                {"mul_scalar", [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[1])); }, {a, sc}},
                {"mul_vector", [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[1])); }, {a, v}},
                {"sub", [](const std::vector<Tensor>& in) { return sum(mul(sub(in[0], in[1]), in[1])); }, {a, b}},
                {"scale", [](const std::vector<Tensor>& in) { return sum(scale(in[0], -2.5)); }, {a}},
                {"matmul", [](const std::vector<Tensor>& in) { return mean(matmul(in[0], in[1])); }, {m1, m2}},
                {"bmm", [](const std::vector<Tensor>& in) { return mean(bmm(in[0], in[1])); }, {b1, b2}},
                {"transpose",
                 [perm](const std::vector<Tensor>& in) {
                     Tensor t = transpose(in[0], perm);
                     return sum(mul(t, t));
                 },
                 {a}},
                {"reshape",
                 [](const std::vector<Tensor>& in) {
                     Tensor t = reshape(in[0], {in[0].numel()});
                     return sum(mul(t, t));
                 },
                 {a}},
                {"concatenate",
                 [axis](const std::vector<Tensor>& in) {
                     Tensor c = concatenate({in[0], in[1]}, axis);
                     return mean(mul(c, c));
                 },
                 {a, b}},
                {"gather",
                 [gmap, sa](const std::vector<Tensor>& in) { return sum(gather(in[0], gmap, sa)); },
                 {a}},
                {"softmax",
                 [axis](const std::vector<Tensor>& in) { return sum(mul(softmax(in[0], axis), in[1])); },
                 {a, b}},
                {"log_softmax",
                 [axis](const std::vector<Tensor>& in) { return mean(mul(log_softmax(in[0], axis), in[1])); },
                 {a, b}},
                {"layer_norm",
                 [](const std::vector<Tensor>& in) {
                     return mean(mul(layer_norm(in[0], in[1], in[2], 1e-5), in[3]));
                 },
                 {ln_in, ln_gain, ln_bias, ln_probe}},
                {"gelu", [](const std::vector<Tensor>& in) { return sum(gelu(in[0])); }, {a}},
                {"exp", [](const std::vector<Tensor>& in) { return mean(tss::exp(scale(in[0], 0.5))); }, {a}},
                {"clamp", [](const std::vector<Tensor>& in) { return sum(clamp(in[0], -0.7, 0.7)); }, {a}},
                {"mean", [](const std::vector<Tensor>& in) { return mean(mul(in[0], in[0])); }, {a}},
                {"sum", [](const std::vector<Tensor>& in) { return sum(in[0]); }, {a}},
                {"l2_normalize_rows",
                 [](const std::vector<Tensor>& in) { return sum(mul(l2_normalize_rows(in[0]), in[1])); },
                 {mnorm, mproj}},
                {"cosine_similarity",
                 [](const std::vector<Tensor>& in) { return mean(cosine_similarity(in[0], in[1])); },
                 {mnorm, mcos}},
            };
            for (auto& c : cases) {
                GradReport rep = grad_check(c.op, c.fn, c.inputs, 1e-5);
                if (rep.max_rel_error > worst) {
                    worst = rep.max_rel_error;
                    worst_op = std::string(c.op) + " seed " + std::to_string(seed);
                }
                if (!rep.passed)
                    return std::make_pair(false, std::string(c.op) + " failed at seed " +
                                                     std::to_string(seed) + ": err " +
                                                     std::to_string(rep.max_rel_error) + " " + rep.note);
            }
        }
        std::ostringstream os;
        os << "worst rel err " << worst << " (" << worst_op << ")";
        return std::make_pair(true, os.str());
    });
}

inline std::vector<std::vector<int64_t>> corpus_captions_for_check(const Corpus& corpus) {
    std::vector<std::vector<int64_t>> caps;
    for (const auto& s : corpus.samples) caps.push_back(s.caption);
    return caps;
}

inline Tensor stack_videos_for_check(const Corpus& corpus) {
    std::vector<double> data;
    for (const auto& s : corpus.samples)
        data.insert(data.end(), s.video.value().begin(), s.video.value().end());
    const auto& sp = corpus.spec;
    return Tensor::from(std::move(data),
                        {static_cast<int64_t>(corpus.samples.size()), sp.frames, sp.n_patches(), sp.patch_dim});
}

// Composite stacks at tolerance 1e-4: text tower, shift-enabled video tower,
// matching loss through tau, and the end-to-end pipeline loss in hard
// selection mode (the Monte-Carlo estimator path is validated separately by
// its sign-agreement oracle).
inline CheckResult composite_gradients() {
    return timed("composite + end-to-end gradients (tol 1e-4)", []() {
        double worst = 0;
        std::string what;
        auto track = [&](const GradReport& rep, const std::string& name) {
            if (rep.max_rel_error > worst) {
                worst = rep.max_rel_error;
                what = name;
            }
            return rep.passed;
        };

        {  // text tower
            auto p = TextEncoderParams::init(10, 5, 8, 2, 2, 2.0, CounterRng(21, 0));
            TextBatch batch = TextBatch::from_sequences({{1, 4, 8}, {2, 7, 3, 8}}, 9);
            Tensor probe = Tensor::randn({2, 8}, CounterRng(21, 1));
            std::vector<Tensor> inputs = {p.tok_embed, p.blocks[0].wq, p.blocks[1].w2, p.proj,
                                          p.pos_embed, p.lnf_gain};
            auto fn = [&](const std::vector<Tensor>& in) {
                TextEncoderParams q = p;
                q.tok_embed = in[0];
                q.blocks[0].wq = in[1];
                q.blocks[1].w2 = in[2];
                q.proj = in[3];
                q.pos_embed = in[4];
                q.lnf_gain = in[5];
                return mean(mul(encode_text(batch, q), probe));
            };
            if (!track(grad_check("text", fn, inputs, 1e-4), "text encoder"))
                return std::make_pair(false, "text encoder gradients failed (err " + std::to_string(worst) + ")");
        }
        {  // video tower with token shift active
            auto p = VideoEncoderParams::init(4, 6, 8, 2, 2, 2.0, CounterRng(22, 0));
            ShiftPlan plan;
            plan.mode = ShiftMode::token_shift;
            plan.ratio = 0.5;
            plan.layers = {1, 2};
            Tensor video = Tensor::randn({3, 4, 6}, CounterRng(22, 1), 0.5);
            Tensor probe = Tensor::randn({3, 5, 8}, CounterRng(22, 2));
            std::vector<Tensor> inputs = {p.embed.patch_proj, p.embed.cls, p.embed.pos_embed,
                                          p.blocks[0].wk, p.blocks[1].w1, p.lnf_gain};
            auto fn = [&](const std::vector<Tensor>& in) {
                VideoEncoderParams q = p;
                q.embed.patch_proj = in[0];
                q.embed.cls = in[1];
                q.embed.pos_embed = in[2];
                q.blocks[0].wk = in[3];
                q.blocks[1].w1 = in[4];
                q.lnf_gain = in[5];
                return mean(mul(encode_video(video, q, plan), probe));
            };
            if (!track(grad_check("video", fn, inputs, 1e-4), "video encoder"))
                return std::make_pair(false, "video encoder gradients failed (err " + std::to_string(worst) + ")");
        }
        {  // matching loss through tau
            Tensor sim = Tensor::randn({3, 3}, CounterRng(23, 0), 0.5);
            Tensor log_tau = Tensor::from({std::log(1.0 / 0.07)}, {1});
            auto fn = [](const std::vector<Tensor>& in) {
                LossState st;
                st.log_tau = in[1];
                return symmetric_ce_loss(in[0], st);
            };
            if (!track(grad_check("loss", fn, {sim, log_tau}, 1e-5), "matching loss"))
                return std::make_pair(false, "matching loss gradients failed (err " + std::to_string(worst) + ")");
        }
        {  // end-to-end pipeline, hard selection mode
            CorpusSpec cs;
            cs.n_samples = 3;
            cs.frames = 3;
            cs.grid_side = 2;
            cs.patch_dim = 5;
            cs.n_objects = 6;
            cs.n_motions = 3;
            cs.objects_per_video = 1;
            cs.motions_per_video = 1;
            cs.sigma_d = 0.4;
            cs.seed = 23;
            Corpus corpus = generate_corpus(cs);
            RunConfig rc;
            rc.channels = 8;
            rc.heads = 2;
            rc.mlp_ratio = 2.0;
            rc.text_layers = 1;
            rc.video_layers = 2;
            rc.select_layers = 1;
            rc.shift.layers = {2};
            rc.shift.ratio = 0.5;
            rc.top_k = 2;
            rc.seed = 24;
            Model model = Model::init(rc, ModelGeometry::of(corpus.spec));
            std::vector<std::vector<int64_t>> captions = corpus_captions_for_check(corpus);
            Tensor videos = stack_videos_for_check(corpus);
            CounterRng noise(24, 99);
            std::vector<uint64_t> keys = {0, 1, 2};
            std::vector<Tensor> inputs = {model.text.tok_embed, model.video.embed.patch_proj,
                                          model.scorer.w_reduce, model.select.blocks[0].wv,
                                          model.select.temporal_embed, model.loss.log_tau};
            auto fn = [&](const std::vector<Tensor>& in) {
                Model m2 = model;
                m2.text.tok_embed = in[0];
                m2.video.embed.patch_proj = in[1];
                m2.scorer.w_reduce = in[2];
                m2.select.blocks[0].wv = in[3];
                m2.select.temporal_embed = in[4];
                m2.loss.log_tau = in[5];
                Tensor q = m2.encode_queries(captions);
                Tensor f = m2.encode_video_frames(videos, /*training=*/false, noise, keys);
                return symmetric_ce_loss(similarity_matrix(q, f, m2.cfg.lambda), m2.loss);
            };
            if (!track(grad_check("e2e", fn, inputs, 1e-4), "end-to-end loss"))
                return std::make_pair(false, "end-to-end loss gradients failed (err " + std::to_string(worst) + ")");
        }
        return std::make_pair(true, "worst rel err " + std::to_string(worst) + " (" + what + ")");
    });
}

// Exhaustive <M,S> maximization oracle over all feasible ordered indicators.
inline CheckResult topk_oracle(int64_t vectors_per_size = 1000) {
    return timed("hard top-K vs exhaustive oracle + eps=0 degeneracy", [vectors_per_size]() {
        CounterRng rng(31, 0);
        uint64_t counter = 0;
        int64_t checked = 0;
        // Spread the requested number of score vectors across all (n, k).
        int64_t combos = 0;
        for (int64_t n = 2; n <= 10; ++n) combos += std::min<int64_t>(4, n);
        int64_t reps = std::max<int64_t>(1, vectors_per_size / combos);
        for (int64_t n = 2; n <= 10; ++n)
            for (int64_t k = 1; k <= std::min<int64_t>(4, n); ++k)
                for (int64_t rep = 0; rep < reps; ++rep) {
                    std::vector<double> s(static_cast<size_t>(n));
                    for (auto& v : s) v = rng.uniform(counter++);
                    if (rep % 5 == 1 && n >= 3) s[2] = s[0];  // tie pressure
                    // Exhaustive argmax, lexicographically smallest winner.
                    std::vector<int64_t> best, cur;
                    double best_sum = -1e300;
                    std::function<void(int64_t)> rec = [&](int64_t start) {
                        if (static_cast<int64_t>(cur.size()) == k) {
                            double total = 0;
                            for (int64_t i : cur) total += s[static_cast<size_t>(i)];
                            if (total > best_sum) {
                                best_sum = total;
                                best = cur;
                            }
                            return;
                        }
                        for (int64_t i = start; i < n; ++i) {
                            cur.push_back(i);
                            rec(i + 1);
                            cur.pop_back();
                        }
                    };
                    rec(0);
                    if (hard_topk_indices(s, k) != best)
                        return std::make_pair(false, "mismatch at n=" + std::to_string(n) +
                                                         " k=" + std::to_string(k));
                    Tensor st = Tensor::from(s, {n});
                    PerturbConfig cfg;
                    cfg.epsilon = 0.0;
                    cfg.samples = 5;
                    if (perturbed_topk(st, k, cfg, rng).value() != hard_topk(st, k).value())
                        return std::make_pair(false, std::string("eps=0 not bit-exact"));
                    ++checked;
                }
        return std::make_pair(true, std::to_string(checked) + " score vectors, exact agreement");
    });
}

// Monte-Carlo convergence of the perturbed indicator on the worked instance.
inline CheckResult perturbed_convergence() {
    return timed("perturbed top-K convergence (m=10000, +/-0.01)", []() {
        Tensor s = Tensor::from({3, 2, 1, 0}, {4});
        PerturbConfig cfg;
        cfg.epsilon = 0.05;
        cfg.samples = 10000;
        Tensor m = perturbed_topk(s, 1, cfg, CounterRng(32, 0));
        double worst = std::abs(m.at({0, 0}) - 1.0);
        for (int64_t i = 1; i < 4; ++i) worst = std::max(worst, std::abs(m.at({i, 0})));
        return std::make_pair(worst <= 0.01, "max entry error " + std::to_string(worst));
    });
}

// Exhaustive index accounting for whole-token shift.
inline CheckResult shift_accounting() {
    return timed("token shift permutation accounting (T<=5, N<=8)", []() {
        for (int64_t t = 1; t <= 5; ++t)
            for (int64_t n = 1; n <= 8; ++n)
                for (double ratio : {0.0, 0.25, 0.5, 1.0}) {
                    int64_t tokens = n + 1;
                    Tensor grid = Tensor::zeros({t, tokens, 2});
                    for (int64_t f = 0; f < t; ++f)
                        for (int64_t j = 0; j < tokens; ++j)
                            for (int64_t ch = 0; ch < 2; ++ch)
                                grid.mutable_value()[(f * tokens + j) * 2 + ch] =
                                    1000.0 * static_cast<double>(f) + 10.0 * static_cast<double>(j) +
                                    static_cast<double>(ch) + 1.0;
                    ShiftPlan plan;
                    plan.mode = ShiftMode::token_shift;
                    plan.ratio = ratio;
                    plan.layers = {1};
                    Tensor out = token_shift(grid, plan);
                    int64_t k = static_cast<int64_t>(std::floor(ratio * static_cast<double>(n)));
                    int64_t kf = (k + 1) / 2;
                    std::multiset<double> expected, got;
                    for (int64_t f = 0; f < t; ++f)
                        for (int64_t j = 0; j < tokens; ++j) {
                            bool fwd = j >= 1 && j <= kf, bwd = j > kf && j <= k;
                            if ((!fwd && !bwd) || (fwd && f + 1 < t) || (bwd && f - 1 >= 0))
                                expected.insert(grid.at({f, j, 0}));
                            double a = out.at({f, j, 0}), b2 = out.at({f, j, 1});
                            if (a == 0.0 && b2 == 0.0) continue;
                            if (b2 - a != 1.0)
                                return std::make_pair(false, std::string("channel mixing detected"));
                            got.insert(a);
                        }
                    if (expected != got)
                        return std::make_pair(false, "row multiset mismatch at T=" + std::to_string(t) +
                                                         " N=" + std::to_string(n));
                }
        return std::make_pair(true, std::string("all rows exact copies or zero, multisets match"));
    });
}

// Worked matching numbers.
inline CheckResult matching_arithmetic() {
    return timed("matching arithmetic (lambda-softmax, symmetric CE)", []() {
        Tensor s = Tensor::from({0.2, 0.8}, {2});
        double agg = aggregate_similarity(s, 4.0).item();
        if (std::abs(agg - 0.7501) > 1e-4)
            return std::make_pair(false, "aggregate(0.2,0.8;4) = " + std::to_string(agg));
        if (aggregate_similarity(s, 0.0).item() != 0.5)
            return std::make_pair(false, std::string("lambda=0 is not the exact mean"));
        LossState st = LossState::init(1.0);
        double loss = symmetric_ce_loss(Tensor::from({1, 0, 0, 1}, {2, 2}), st).item();
        if (std::abs(loss - 0.31326) > 1e-5)
            return std::make_pair(false, "2x2 identity loss = " + std::to_string(loss));
        return std::make_pair(true, "aggregate=" + std::to_string(agg) + ", loss=" + std::to_string(loss));
    });
}

// Count-based ranks against an independent sort-based oracle.
inline CheckResult metrics_oracle(int64_t matrices = 1000) {
    return timed("retrieval metrics vs sort oracle (" + std::to_string(matrices) + " matrices)", [matrices]() {
        CounterRng rng(33, 0);
        uint64_t c = 0;
        for (int64_t rep = 0; rep < matrices; ++rep) {
            int64_t bq = 1 + static_cast<int64_t>(rng.below(c++, 64));
            int64_t bc = std::max<int64_t>(bq, 1 + static_cast<int64_t>(rng.below(c++, 64)));
            std::vector<double> vals(static_cast<size_t>(bq * bc));
            for (auto& v : vals) v = rng.uniform(c++);
            if (rep % 4 == 0 && vals.size() > 3) vals[1] = vals[0];
            Tensor sim = Tensor::from(vals, {bq, bc});
            std::vector<int64_t> pairing(static_cast<size_t>(bq));
            for (auto& p : pairing) p = static_cast<int64_t>(rng.below(c++, static_cast<uint64_t>(bc)));
            RetrievalReport got = compute_metrics(sim, pairing, {1, 5, 10});
            // Sort-based oracle.
            std::vector<int64_t> ranks;
            for (int64_t i = 0; i < bq; ++i) {
                std::vector<std::pair<double, int64_t>> row;
                for (int64_t j = 0; j < bc; ++j) row.emplace_back(sim.at({i, j}), j);
                std::stable_sort(row.begin(), row.end(), [](const auto& x, const auto& y) {
                    if (x.first != y.first) return x.first > y.first;
                    return x.second < y.second;
                });
                for (size_t pos = 0; pos < row.size(); ++pos)
                    if (row[pos].second == pairing[static_cast<size_t>(i)])
                        ranks.push_back(static_cast<int64_t>(pos) + 1);
            }
            std::vector<int64_t> sorted = ranks;
            std::sort(sorted.begin(), sorted.end());
            double mdr = static_cast<double>(sorted[static_cast<size_t>((bq - 1) / 2)]);
            double mnr = 0;
            for (int64_t r : ranks) mnr += static_cast<double>(r);
            mnr /= static_cast<double>(bq);
            if (got.mdr != mdr || got.mnr != mnr) return std::make_pair(false, std::string("rank stats mismatch"));
            for (int64_t k : {1, 5, 10}) {
                int64_t hits = 0;
                for (int64_t r : ranks)
                    if (r <= k) ++hits;
                if (got.r_at.at(k) != 100.0 * static_cast<double>(hits) / static_cast<double>(bq))
                    return std::make_pair(false, "R@" + std::to_string(k) + " mismatch");
            }
        }
        // Worked example.
        RetrievalReport r = compute_metrics(
            Tensor::from({0.9, 0.1, 0.2, 0.3, 0.4, 0.8, 0.5, 0.6, 0.7}, {3, 3}), {0, 1, 2}, {1, 5, 10});
        if (std::abs(r.r_at.at(1) - 66.67) > 0.01 || std::abs(r.mnr - 4.0 / 3.0) > 1e-9)
            return std::make_pair(false, std::string("worked 3x3 example mismatch"));
        return std::make_pair(true, std::string("exact agreement, worked example R@1=66.67 MnR=1.333"));
    });
}

// Hub suppression on the crafted 3x3 instance; hub-free argmaxes untouched.
inline CheckResult inverted_softmax_oracle() {
    return timed("inverted softmax hub demotion", []() {
        Tensor sim = Tensor::from({0.50, 0.20, 0.90, 0.20, 0.50, 0.95, 0.10, 0.30, 0.85}, {3, 3});
        if (rank_of_truth({0.50, 0.20, 0.90}, 0) != 2)
            return std::make_pair(false, std::string("hub instance is not hubby"));
        Tensor out = inverted_softmax(sim, 20.0);
        std::vector<double> row0 = {out.at({0, 0}), out.at({0, 1}), out.at({0, 2})};
        bool demoted = rank_of_truth(row0, 0) == 1 && out.at({0, 2}) < out.at({0, 0});
        std::vector<double> hubfree(9, 0.1);
        for (int i = 0; i < 3; ++i) hubfree[static_cast<size_t>(i * 3 + i)] = 1.0;
        Tensor clean = inverted_softmax(Tensor::from(hubfree, {3, 3}), 20.0);
        bool stable = true;
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 3; ++j)
                if (j != i && clean.at({i, i}) <= clean.at({i, j})) stable = false;
        if (!demoted) return std::make_pair(false, std::string("hub column not demoted"));
        if (!stable) return std::make_pair(false, std::string("hub-free argmax changed"));
        return std::make_pair(true, std::string("hub demoted for query 0; hub-free argmaxes unchanged"));
    });
}

}  // namespace selfcheck

// The fast verification suite behind `tss selftest` (criteria that need no
// training run).
inline std::vector<CheckResult> run_selftest(int64_t grad_seeds = 100) {
    std::vector<CheckResult> results;
    results.push_back(selfcheck::primitive_gradients(grad_seeds));
    results.push_back(selfcheck::composite_gradients());
    results.push_back(selfcheck::topk_oracle());
    results.push_back(selfcheck::perturbed_convergence());
    results.push_back(selfcheck::shift_accounting());
    results.push_back(selfcheck::matching_arithmetic());
    results.push_back(selfcheck::metrics_oracle());
    results.push_back(selfcheck::inverted_softmax_oracle());
    return results;
}

}  // namespace tss
